#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ebyd/errors.hpp"
#include "ebyd/exposure/exposure.hpp"
#include "ebyd/nncore/network.hpp"
#include "ebyd/poisonlab/poison.hpp"
#include "ebyd/trainer/trainer.hpp"

using namespace ebyd;

namespace {

const ImageShape kShape{3, 8, 8};

struct Lab {
  ImageDataset defense, test, backdoor_test;
  ModelBundle model;
};

// A backdoored MLP on small synthetic images, trained once for the suite.
const Lab& lab() {
  static const Lab instance = [] {
    const auto all = make_synthetic_dataset(4, 160, kShape, 3);
    const auto held = stratified_split(all, 80, 3);
    const auto split = split_defense(held.kept, 0.1, 3);
    const Trigger t = make_trigger(TriggerKind::patch, {}, kShape, 3);
    TrainConfig cfg;
    cfg.epochs = 8;
    cfg.batch_size = 32;
    cfg.lr_decay_epochs = {6};
    cfg.seed = 3;
    Lab l;
    l.model = train(ArchSpec::mlp(kShape, 24, 4), poison(split.train, t, 0.1, 0, 3).poisoned, cfg);
    l.defense = split.defense;
    l.test = held.taken;
    l.backdoor_test = backdoor_testset(held.taken, t, 0);
    return l;
  }();
  return instance;
}

ResearchProbe probe() { return {&lab().test, &lab().backdoor_test, 0}; }

bool same_params(const ModelBundle& a, const ModelBundle& b) {
  if (a.params.size() != b.params.size()) return false;
  for (const auto& [name, v] : a.params) {
    const auto& w = b.params.at(name);
    if (std::memcmp(v.data(), w.data(), v.size() * sizeof(float)) != 0) return false;
  }
  return true;
}

TraceRecord rec(double asr, double ca) { return TraceRecord{0, ca, ca, asr, 0.0}; }

// Predicts class 1 when pixel 0 is lit and class 3 otherwise.
ModelBundle pixel_switch_model() {
  ModelBundle m = zero_model(ArchSpec::mlp(kShape, 4, 4));
  m.params.at("fc1.weight")[0] = 1.0f;
  m.params.at("fc1.scale")[0] = 1.0f;
  m.params.at("fc3.weight")[1 * 4 + 0] = 1.0f;
  m.params.at("fc3.bias")[3] = 0.5f;
  return m;
}

ImageDataset blank_set(std::size_t n) {
  return ImageDataset{DenseArray({n, kShape.channels, kShape.height, kShape.width}), std::vector<int>(n, 0), "blank", 4};
}

}  // namespace

TEST(Bem, HandArithmetic) {
  const std::vector<TraceRecord> two{rec(1.0, 0.1), rec(0.9, 0.1)};
  EXPECT_DOUBLE_EQ(bem(two), (0.9 + 0.8) / 1.9);
  EXPECT_NEAR(bem(two), 0.8947, 5e-5);
}

TEST(Bem, ZeroCleanAccuracyGivesOne) {
  const std::vector<TraceRecord> r{rec(0.3, 0.0), rec(1.0, 0.0), rec(0.05, 0.0)};
  EXPECT_DOUBLE_EQ(bem(r), 1.0);
}

TEST(Bem, EqualRatesCancel) {
  const std::vector<TraceRecord> r{rec(0.7, 0.7), rec(0.2, 0.2)};
  EXPECT_DOUBLE_EQ(bem(r), 0.0);
}

TEST(Bem, NeverExceedsOne) {
  for (int k = 0; k < 50; ++k) {
    std::vector<TraceRecord> r;
    for (int i = 0; i <= k % 7; ++i) r.push_back(rec(0.01 + 0.99 * ((k * 7 + i * 13) % 17) / 16.0, ((k + i) % 5) / 4.0));
    EXPECT_LE(bem(r), 1.0);
  }
}

TEST(Bem, RejectsZeroAsrAndMissingMetrics) {
  EXPECT_THROW(bem(std::vector<TraceRecord>{rec(0.0, 0.5)}), ArgumentError);
  EXPECT_THROW(bem(std::vector<TraceRecord>{}), ArgumentError);
  EXPECT_THROW(bem(std::vector<TraceRecord>{TraceRecord{0, 0.5, std::nullopt, std::nullopt, 1.0}}), ArgumentError);
}

TEST(Bem, WindowSkipsThePreExposureRecord) {
  ExposureTrace t;
  t.records = {rec(1.0, 1.0), rec(1.0, 0.1), rec(0.9, 0.1), rec(0.0, 0.0)};
  t.epochs_run = 2;
  ASSERT_EQ(t.bem_window().size(), 2u);
  EXPECT_DOUBLE_EQ(bem(t), (0.9 + 0.8) / 1.9);
  t.epochs_run = 0;
  ASSERT_EQ(t.bem_window().size(), 1u);
  EXPECT_DOUBLE_EQ(bem(t), 0.0);
}

TEST(InferLabel, ConstantPredictor) {
  ModelBundle m = zero_model(ArchSpec::mlp(kShape, 4, 4));
  m.params.at("fc3.bias")[2] = 1.0f;
  const auto [label, consistency] = infer_backdoor_label(m, blank_set(10));
  EXPECT_EQ(label, 2);
  EXPECT_DOUBLE_EQ(consistency, 1.0);
}

TEST(InferLabel, EvenSplitGoesToLowestClass) {
  ImageDataset d = blank_set(10);
  for (std::size_t i = 0; i < 5; ++i) d.images[i * kShape.size()] = 1.0f;
  ASSERT_EQ(predict_dataset(pixel_switch_model(), d), (std::vector<int>{1, 1, 1, 1, 1, 3, 3, 3, 3, 3}));
  const auto [label, consistency] = infer_backdoor_label(pixel_switch_model(), d);
  EXPECT_EQ(label, 1);
  EXPECT_DOUBLE_EQ(consistency, 0.5);
}

TEST(ExposeCul, TinyCeilingStopsBeforeAnyStep) {
  ExposureConfig cfg;
  cfg.loss_ceiling = 0.001f;
  const auto e = expose_cul(lab().model, lab().defense, cfg, probe());
  EXPECT_EQ(e.trace.epochs_run, 0u);
  EXPECT_EQ(e.trace.records.size(), 1u);
  EXPECT_FALSE(e.trace.incomplete);
  EXPECT_TRUE(same_params(e.model, lab().model));
}

TEST(ExposeCul, ReturnsOnAStopConditionUnlessFlagged) {
  for (float lr : {0.0005f, 0.01f, 0.1f}) {
    ExposureConfig cfg;
    cfg.cul_lr = lr;
    const auto e = expose_cul(lab().model, lab().defense, cfg, probe());
    ASSERT_GE(e.trace.records.size(), 1u);
    EXPECT_EQ(e.trace.records.size(), e.trace.epochs_run + 1);
    const TraceRecord& last = e.trace.records.back();
    if (!e.trace.incomplete) {
      EXPECT_TRUE(last.ca_defense <= cfg.ca_min || last.mean_loss >= cfg.loss_ceiling) << "lr " << lr;
    } else {
      EXPECT_EQ(e.trace.epochs_run, cfg.cul_max_epochs);
    }
  }
}

TEST(ExposeCul, AscentRaisesDefenseLoss) {
  ExposureConfig cfg;
  cfg.cul_lr = 0.05f;
  const auto e = expose_cul(lab().model, lab().defense, cfg, probe());
  ASSERT_GE(e.trace.epochs_run, 1u);
  EXPECT_GT(e.trace.records.back().mean_loss, e.trace.records.front().mean_loss);
  EXPECT_LT(e.trace.records.back().ca_defense, e.trace.records.front().ca_defense);
}

TEST(ExposeCul, IsDeterministic) {
  ExposureConfig cfg;
  cfg.cul_lr = 0.05f;
  const auto a = expose_cul(lab().model, lab().defense, cfg, probe());
  const auto b = expose_cul(lab().model, lab().defense, cfg, probe());
  EXPECT_TRUE(same_params(a.model, b.model));
  EXPECT_EQ(format_trace_csv(a.trace), format_trace_csv(b.trace));
}

TEST(ExposeCft, ZeroEpochsIsANoOp) {
  ExposureConfig cfg;
  cfg.cft_epochs = 0;
  const auto e = expose_cft(lab().model, lab().defense, cfg, probe());
  EXPECT_EQ(e.trace.records.size(), 1u);
  EXPECT_TRUE(same_params(e.model, lab().model));
}

TEST(ExposeCft, RandomLabelsFollowTheSeed) {
  ExposureConfig cfg;
  cfg.cft_epochs = 2;
  cfg.cft_lr = 0.05f;
  const auto a = expose_cft(lab().model, lab().defense, cfg, probe());
  const auto b = expose_cft(lab().model, lab().defense, cfg, probe());
  EXPECT_TRUE(same_params(a.model, b.model));
  cfg.cft_seed = 1;
  const auto c = expose_cft(lab().model, lab().defense, cfg, probe());
  EXPECT_FALSE(same_params(a.model, c.model));
  EXPECT_EQ(a.trace.records.size(), 3u);
}

TEST(ExposePrune, MaskIsBinaryWithFloorCount) {
  for (double step : {0.1, 0.15, 0.3}) {
    ExposureConfig cfg;
    cfg.prune_step = step;
    const auto e = expose_prune(lab().model, lab().defense, cfg, probe());
    ASSERT_TRUE(e.model.unit_mask);
    ASSERT_TRUE(e.trace.sparsity);
    std::size_t zeros = 0;
    for (float v : e.model.unit_mask->values()) {
      EXPECT_TRUE(v == 0.0f || v == 1.0f);
      zeros += v == 0.0f;
    }
    const auto units = static_cast<double>(lab().model.hidden_units());
    EXPECT_EQ(zeros, static_cast<std::size_t>(std::floor(*e.trace.sparsity * units + 1e-9)));
    EXPECT_NEAR(*e.trace.sparsity, step * static_cast<double>(e.trace.epochs_run), 1e-12);
    EXPECT_EQ(e.trace.records.size(), static_cast<std::size_t>(std::ceil(1.0 / step - 1e-9)));
    EXPECT_TRUE(same_params(e.model, lab().model));
  }
}

TEST(ExposePrune, FirstRecordIsTheUnprunedModel) {
  const auto e = expose_prune(lab().model, lab().defense, ExposureConfig{}, probe());
  EXPECT_DOUBLE_EQ(*e.trace.records[0].ca_test, eval_ca(lab().model, lab().test));
  EXPECT_DOUBLE_EQ(*e.trace.records[0].asr, eval_asr(lab().model, lab().backdoor_test, 0));
}

TEST(ExposePrune, SelectsFirstSparsityAtTargetElseMinimum) {
  ExposureConfig cfg;
  cfg.prune_ca_target = 0.0;  // unreachable unless accuracy hits zero
  const auto e = expose_prune(lab().model, lab().defense, cfg, probe());
  double best = 2.0;
  for (std::size_t k = 1; k < e.trace.records.size(); ++k) best = std::min(best, e.trace.records[k].ca_defense);
  EXPECT_DOUBLE_EQ(e.trace.records[e.trace.epochs_run].ca_defense, best);

  cfg.prune_ca_target = 1.0;
  EXPECT_EQ(expose_prune(lab().model, lab().defense, cfg, probe()).trace.epochs_run, 1u);
}

TEST(ExposePrune, OracleSelectionNeedsAProbe) {
  ExposureConfig cfg;
  cfg.prune_selection = PruneSelection::oracle_asr;
  EXPECT_THROW(expose_prune(lab().model, lab().defense, cfg), ArgumentError);
  const auto e = expose_prune(lab().model, lab().defense, cfg, probe());
  const auto gap = [&](std::size_t k) { return *e.trace.records[k].asr - *e.trace.records[k].ca_test; };
  for (std::size_t k = 1; k < e.trace.records.size(); ++k) EXPECT_LE(gap(k), gap(e.trace.epochs_run));
}

TEST(ExposeAwp, ZeroBudgetLeavesTheModelAlone) {
  ExposureConfig cfg;
  cfg.awp_budget = 0.0f;
  const auto e = expose_awp(lab().model, lab().defense, cfg, probe());
  ASSERT_TRUE(e.model.weight_perturbation);
  for (const auto& [name, d] : *e.model.weight_perturbation) {
    for (float v : d.values()) EXPECT_EQ(v, 0.0f) << name;
  }
  EXPECT_TRUE(same_params(e.model, lab().model));
  const DenseArray a = forward(e.model, lab().test.images);
  const DenseArray b = forward(lab().model, lab().test.images);
  EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)), 0);
}

TEST(ExposeAwp, PerturbationStaysInBudgetAndOnScalesOnly) {
  ExposureConfig cfg;
  cfg.awp_budget = 0.05f;
  cfg.awp_init_range = 0.2f;
  cfg.awp_lr = 50.0f;
  cfg.awp_epochs = 3;
  const auto e = expose_awp(lab().model, lab().defense, cfg, probe());
  ASSERT_TRUE(e.model.weight_perturbation);
  bool moved = false;
  for (const auto& [name, d] : *e.model.weight_perturbation) {
    EXPECT_TRUE(name.ends_with(".scale")) << name;
    for (float v : d.values()) {
      EXPECT_LE(std::abs(v), cfg.awp_budget);
      moved = moved || v != 0.0f;
    }
  }
  EXPECT_TRUE(moved);
  EXPECT_TRUE(same_params(e.model, lab().model));
  EXPECT_EQ(e.trace.records.size(), 4u);
}

TEST(ExposeAwp, RejectsAModelAlreadyPerturbed) {
  const auto once = expose_awp(lab().model, lab().defense, ExposureConfig{}, probe());
  EXPECT_THROW(expose_awp(once.model, lab().defense, ExposureConfig{}), ArgumentError);
}

TEST(Expose, InputModelIsNeverModified) {
  const ModelBundle before = lab().model;
  for (auto t : {ExposureTechnique::cul, ExposureTechnique::cft, ExposureTechnique::prune, ExposureTechnique::awp}) {
    ExposureConfig cfg;
    cfg.technique = t;
    const auto e = expose(lab().model, lab().defense, cfg, probe());
    EXPECT_TRUE(same_params(before, lab().model)) << to_string(t);
    EXPECT_FALSE(lab().model.unit_mask);
    EXPECT_FALSE(lab().model.weight_perturbation);
    EXPECT_EQ(e.trace.technique, t);
  }
}

TEST(Expose, LabelConsistencyMatchesPredictions) {
  ExposureConfig cfg;
  cfg.cul_lr = 0.05f;
  const auto e = expose(lab().model, lab().defense, cfg, probe());
  const auto pred = predict_dataset(e.model, lab().defense);
  const auto n = static_cast<double>(std::count(pred.begin(), pred.end(), e.inferred_label));
  EXPECT_DOUBLE_EQ(e.label_consistency, n / static_cast<double>(lab().defense.size()));
}

TEST(Expose, WithoutProbeTracesCarryNoResearchMetrics) {
  const auto e = expose(lab().model, lab().defense, ExposureConfig{});
  for (const auto& r : e.trace.records) {
    EXPECT_FALSE(r.asr);
    EXPECT_FALSE(r.ca_test);
  }
  EXPECT_THROW(bem(e.trace), ArgumentError);
}

TEST(Expose, RejectsBadConfigAndClassMismatch) {
  ImageDataset wrong = lab().defense;
  wrong.num_classes = 5;
  EXPECT_THROW(expose(lab().model, wrong, ExposureConfig{}), ShapeError);
  ExposureConfig cfg;
  cfg.loss_ceiling = 0.0f;
  EXPECT_THROW(expose(lab().model, lab().defense, cfg), ArgumentError);
  cfg = {};
  cfg.ca_min = 1.0;
  EXPECT_THROW(expose(lab().model, lab().defense, cfg), ArgumentError);
  cfg = {};
  cfg.prune_step = 0.0;
  EXPECT_THROW(expose(lab().model, lab().defense, cfg), ArgumentError);
}

TEST(ExposureEnums, RoundTripAndRejectUnknown) {
  for (auto t : {ExposureTechnique::cul, ExposureTechnique::cft, ExposureTechnique::prune, ExposureTechnique::awp}) {
    EXPECT_EQ(parse_exposure_technique(to_string(t)), t);
  }
  EXPECT_THROW(parse_exposure_technique("unlearn"), ArgumentError);
  EXPECT_EQ(parse_prune_selection("oracle_asr"), PruneSelection::oracle_asr);
}

TEST(TraceCsv, FormatAndFile) {
  ExposureTrace t;
  t.records = {TraceRecord{0, 1.0, 0.975, 1.0, 0.0123456789}, TraceRecord{1, 0.25, std::nullopt, std::nullopt, 9.5}};
  const std::string csv = format_trace_csv(t);
  EXPECT_EQ(csv,
            "epoch,ca_defense,ca_test,asr,loss\n"
            "0,1.000000,0.975000,1.000000,0.012346\n"
            "1,0.250000,,,9.500000\n");
  const auto path = std::filesystem::temp_directory_path() / "ebyd_trace_test.csv";
  write_trace_csv(t, path);
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  EXPECT_EQ(ss.str(), csv);
  std::filesystem::remove(path);
}
