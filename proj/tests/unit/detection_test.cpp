#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ebyd/detection/detection.hpp"
#include "ebyd/errors.hpp"
#include "ebyd/nncore/network.hpp"
#include "ebyd/nncore/rng.hpp"
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
    const auto all = make_synthetic_dataset(4, 160, kShape, 5);
    const auto held = stratified_split(all, 80, 5);
    const auto split = split_defense(held.kept, 0.1, 5);
    const Trigger t = make_trigger(TriggerKind::patch, {}, kShape, 5);
    TrainConfig cfg;
    cfg.epochs = 8;
    cfg.batch_size = 32;
    cfg.lr_decay_epochs = {6};
    cfg.seed = 5;
    Lab l;
    l.model = train(ArchSpec::mlp(kShape, 24, 4), poison(split.train, t, 0.1, 0, 5).poisoned, cfg);
    l.defense = split.defense;
    l.test = held.taken;
    l.backdoor_test = backdoor_testset(held.taken, t, 0);
    return l;
  }();
  return instance;
}

// Logits are zero except a bias on `label`, whatever the input.
ModelBundle constant_model(int label, float bias) {
  ModelBundle m = zero_model(ArchSpec::mlp(kShape, 4, 4));
  m.params.at("fc3.bias")[static_cast<std::size_t>(label)] = bias;
  return m;
}

DenseArray logits_of(std::vector<std::vector<float>> rows) {
  DenseArray out({rows.size(), rows.front().size()});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy(rows[r].begin(), rows[r].end(), out.data() + r * rows[r].size());
  }
  return out;
}

double pair_counting_auroc(const std::vector<double>& s, const std::vector<bool>& pos) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!pos[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (pos[j]) continue;
      pairs += 1.0;
      if (s[i] > s[j]) wins += 1.0;
      if (s[i] == s[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

InversionConfig quick_inversion(float lambda, std::size_t steps) {
  InversionConfig c;
  c.lambda = lambda;
  c.steps = steps;
  return c;
}

}  // namespace

TEST(Entropy, NearOneHotRowsCarryNoEntropy) {
  EXPECT_NEAR(entropy_sum_bits(logits_of({{200.0f, 0.0f, 0.0f, 0.0f}, {0.0f, 0.0f, -300.0f, 150.0f}})), 0.0, 1e-12);
}

TEST(Entropy, UniformRowsCarryLog2KBitsEach) {
  EXPECT_NEAR(entropy_sum_bits(logits_of({{3.0f, 3.0f, 3.0f, 3.0f}})), 2.0, 1e-12);
  EXPECT_NEAR(entropy_sum_bits(logits_of({{-1.0f, -1.0f}, {5.0f, 5.0f}})), 2.0, 1e-12);
}

TEST(Entropy, MatchesSoftmaxOracle) {
  CounterRng rng(11, "entropy");
  for (int trial = 0; trial < 50; ++trial) {
    DenseArray z({5, 4});
    for (auto& v : z.values()) v = rng.uniform(-6.0f, 6.0f);
    const DenseArray p = softmax(z);
    double expected = 0.0;
    for (float q : p.values()) expected -= static_cast<double>(q) * std::log2(static_cast<double>(q));
    EXPECT_NEAR(entropy_sum_bits(z), expected, 1e-5);
  }
}

TEST(Strip, ConstantLogitsGiveNLog2K) {
  StripConfig cfg;
  cfg.overlays = 10;
  const ModelBundle uniform = zero_model(ArchSpec::mlp(kShape, 4, 4));
  EXPECT_NEAR(strip_score(uniform, lab().test.image(0), lab().defense, cfg), 20.0, 1e-9);
  const ModelBundle certain = constant_model(2, 100.0f);
  EXPECT_NEAR(strip_score(certain, lab().test.image(0), lab().defense, cfg), 0.0, 1e-9);
}

TEST(Strip, OverlaysDependOnlyOnTheSeed) {
  StripConfig cfg;
  const double a = strip_score(lab().model, lab().test.image(3), lab().defense, cfg);
  EXPECT_EQ(a, strip_score(lab().model, lab().test.image(3), lab().defense, cfg));
  cfg.seed = 1;
  EXPECT_NE(a, strip_score(lab().model, lab().test.image(3), lab().defense, cfg));
}

TEST(Strip, RejectsBadInputs) {
  StripConfig cfg;
  cfg.overlays = 0;
  EXPECT_THROW(strip_score(lab().model, lab().test.image(0), lab().defense, cfg), ArgumentError);
  cfg = {};
  cfg.overlay_alpha = 1.0f;
  EXPECT_THROW(cfg.validate(), ArgumentError);
  cfg = {};
  const std::vector<float> short_image(10, 0.5f);
  EXPECT_THROW(strip_score(lab().model, short_image, lab().defense, cfg), ShapeError);
}

TEST(Auroc, PerfectSeparationAndTies) {
  const std::vector<double> s{0.9, 0.1};
  EXPECT_DOUBLE_EQ(auroc(s, {true, false}), 1.0);
  EXPECT_DOUBLE_EQ(auroc(s, {false, true}), 0.0);
  const std::vector<double> flat(6, 0.3);
  EXPECT_DOUBLE_EQ(auroc(flat, {true, false, true, false, false, true}), 0.5);
}

TEST(Auroc, MatchesPairCountingOracle) {
  CounterRng rng(21, "auroc");
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.below(199);
    std::vector<double> s(n);
    std::vector<bool> pos(n);
    // Coarse scores force plenty of ties.
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(12));
      pos[i] = rng.below(2) == 1;
    }
    pos[0] = true;
    pos[1] = false;
    EXPECT_DOUBLE_EQ(auroc(s, pos), pair_counting_auroc(s, pos)) << "trial " << trial;
  }
}

TEST(Auroc, ComplementAndNegationSymmetry) {
  CounterRng rng(22, "auroc/sym");
  std::vector<double> s(80), neg(80);
  std::vector<bool> pos(80), flipped(80);
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = rng.uniform(0.0f, 1.0f);
    neg[i] = -s[i];
    pos[i] = i % 3 == 0;
    flipped[i] = !pos[i];
  }
  const double a = auroc(s, pos);
  EXPECT_NEAR(auroc(s, flipped), 1.0 - a, 1e-12);
  EXPECT_NEAR(auroc(neg, pos), 1.0 - a, 1e-12);
}

TEST(Auroc, RandomScoresHoverAtOneHalf) {
  CounterRng rng(23, "auroc/random");
  std::vector<double> s(500);
  std::vector<bool> pos(500);
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = rng.uniform(0.0f, 1.0f);
    pos[i] = rng.below(2) == 1;
  }
  EXPECT_NEAR(auroc(s, pos), 0.5, 0.1);
}

TEST(Auroc, RejectsSingleClassAndLengthMismatch) {
  const std::vector<double> s{0.1, 0.2};
  EXPECT_THROW(auroc(s, {true, true}), ArgumentError);
  EXPECT_THROW(auroc(s, {false, false}), ArgumentError);
  EXPECT_THROW(auroc(s, {true}), ArgumentError);
}

TEST(Mixture, StacksCleanThenTriggered) {
  const SampleMixture m = make_mixture(lab().test, lab().backdoor_test);
  ASSERT_EQ(m.size(), lab().test.size() + lab().backdoor_test.size());
  EXPECT_EQ(std::count(m.backdoor.begin(), m.backdoor.end(), true),
            static_cast<std::ptrdiff_t>(lab().backdoor_test.size()));
  EXPECT_FALSE(m.backdoor.front());
  EXPECT_TRUE(m.backdoor.back());
  const std::size_t n = lab().test.image_size();
  EXPECT_TRUE(std::equal(m.images.data() + lab().test.size() * n, m.images.data() + (lab().test.size() + 1) * n,
                         lab().backdoor_test.image(0).begin()));
}

TEST(SampleDetection, PolarityFlipsTheAuroc) {
  ImageDataset clean = lab().test, trig = lab().backdoor_test;
  const std::vector<std::size_t> few{0, 1, 2, 3, 4, 5, 6, 7};
  const SampleMixture m = make_mixture(subset(clean, few), subset(trig, few));
  StripConfig cfg;
  cfg.overlays = 6;
  const SampleDetection paper = detect_samples(lab().model, m, lab().defense, cfg);
  cfg.polarity = Polarity::flipped;
  const SampleDetection flipped = detect_samples(lab().model, m, lab().defense, cfg);
  EXPECT_EQ(paper.entropy, flipped.entropy);
  EXPECT_NEAR(paper.auroc + flipped.auroc, 1.0, 1e-12);
  EXPECT_EQ(parse_polarity("flipped"), Polarity::flipped);
  EXPECT_EQ(to_string(Polarity::paper), "paper");
  EXPECT_THROW(parse_polarity("sideways"), ArgumentError);
}

TEST(Inversion, ConstantTargetModelNeedsNoTrigger) {
  const InversionResult r = invert_trigger(constant_model(2, 10.0f), 2, lab().defense, quick_inversion(0.0f, 20));
  EXPECT_LT(r.final_loss, 1e-3);
  EXPECT_EQ(r.target, 2);
}

TEST(Inversion, MaskAndPatternStayInUnitRange) {
  const InversionResult r = invert_trigger(lab().model, 1, lab().defense, quick_inversion(0.05f, 60));
  for (float v : r.mask.values()) EXPECT_TRUE(v >= 0.0f && v <= 1.0f);
  for (float v : r.pattern.values()) EXPECT_TRUE(v >= 0.0f && v <= 1.0f);
  double l1 = 0.0;
  for (float v : r.mask.values()) l1 += v;
  EXPECT_NEAR(r.l1_norm, l1, 1e-9);
  EXPECT_NEAR(r.objective, r.final_loss + 0.05 * r.l1_norm, 1e-6);
}

TEST(Inversion, HeavierPenaltyGivesSmallerMask) {
  const InversionResult light = invert_trigger(lab().model, 0, lab().defense, quick_inversion(0.01f, 150));
  const InversionResult heavy = invert_trigger(lab().model, 0, lab().defense, quick_inversion(10.0f, 150));
  EXPECT_LE(heavy.l1_norm, light.l1_norm);
}

TEST(Inversion, IsDeterministic) {
  const InversionConfig c = quick_inversion(0.1f, 40);
  const InversionResult a = invert_trigger(lab().model, 3, lab().defense, c);
  const InversionResult b = invert_trigger(lab().model, 3, lab().defense, c);
  EXPECT_EQ(a.mask.values()[0], b.mask.values()[0]);
  EXPECT_EQ(a.l1_norm, b.l1_norm);
  EXPECT_EQ(a.final_loss, b.final_loss);
}

TEST(Inversion, DivergenceNamesTheLabel) {
  ModelBundle m = zero_model(ArchSpec::mlp(kShape, 4, 4));
  for (auto& v : m.params.at("fc1.weight").values()) v = 1e30f;
  m.params.at("fc1.scale")[0] = 1.0f;
  m.params.at("fc3.weight")[0] = 1e30f;
  try {
    invert_trigger(m, 1, lab().defense, quick_inversion(0.1f, 5));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("label 1"), std::string::npos) << e.what();
  }
}

TEST(Inversion, RejectsBadTargetAndConfig) {
  EXPECT_THROW(invert_trigger(lab().model, 4, lab().defense, {}), ArgumentError);
  EXPECT_THROW(invert_trigger(lab().model, -1, lab().defense, {}), ArgumentError);
  InversionConfig c;
  c.lr = 0.0f;
  EXPECT_THROW(c.validate(), ArgumentError);
}

TEST(AnomalyIndex, EqualNormsScoreZero) {
  const std::vector<double> v{5.0, 5.0, 5.0, 5.0};
  EXPECT_DOUBLE_EQ(anomaly_index(v), 0.0);
}

TEST(AnomalyIndex, SingleOutlierUsesTheMadFloor) {
  const std::vector<double> v{1.0, 100.0, 100.0, 100.0};
  EXPECT_NEAR(anomaly_index(v), 99.0 / (1.4826 * 1.0), 1e-9);
}

TEST(AnomalyIndex, HandArithmetic) {
  // median 4, deviations {3,1,1,4} -> MAD 2
  const std::vector<double> v{1.0, 3.0, 5.0, 8.0};
  EXPECT_NEAR(anomaly_index(v), 3.0 / (1.4826 * 2.0), 1e-12);
}

TEST(DetectModel, NcRunsOneInversionPerClass) {
  const ModelVerdict v = detect_model_nc(lab().model, lab().defense, quick_inversion(0.1f, 30));
  EXPECT_EQ(v.method, DetectionMethod::nc);
  EXPECT_EQ(v.inversions, 4u);
  EXPECT_EQ(v.l1_norms.size(), 4u);
  ASSERT_TRUE(v.anomaly_index.has_value());
  EXPECT_FALSE(v.consistency.has_value());
  EXPECT_EQ(v.backdoored, v.inferred_target.has_value());
}

TEST(DetectModel, EbydThresholdGatesTheSingleInversion) {
  EbydDetectionConfig cfg;
  cfg.inversion = quick_inversion(0.1f, 30);
  const ExposedModel exposed = expose(lab().model, lab().defense, cfg.exposure);

  cfg.consistency_threshold = 1.01;
  const ModelVerdict never = detect_model_ebyd(exposed, lab().defense, cfg);
  EXPECT_FALSE(never.backdoored);
  EXPECT_EQ(never.inversions, 0u);
  EXPECT_FALSE(never.inferred_target.has_value());
  ASSERT_TRUE(never.consistency.has_value());
  EXPECT_EQ(*never.consistency, exposed.label_consistency);

  cfg.consistency_threshold = 0.0;
  const ModelVerdict always = detect_model_ebyd(exposed, lab().defense, cfg);
  EXPECT_TRUE(always.backdoored);
  EXPECT_EQ(always.inversions, 1u);
  EXPECT_EQ(always.inferred_target, exposed.inferred_label);
  EXPECT_EQ(always.triggers.size(), 1u);

  const ModelVerdict from_scratch = detect_model_ebyd(lab().model, lab().defense, cfg);
  EXPECT_EQ(from_scratch.l1_norms, always.l1_norms);
}

TEST(ExportTrigger, RoundTripsThroughTheRawFormat) {
  const InversionResult r = invert_trigger(lab().model, 2, lab().defense, quick_inversion(0.1f, 20));
  const auto dir = std::filesystem::temp_directory_path() / "ebyd_export_trigger";
  std::filesystem::create_directories(dir);
  export_trigger(r, dir / "t2");
  const ImageDataset img = load_raw_dataset(dir / "t2.ebyd");
  ASSERT_EQ(img.size(), 1u);
  EXPECT_EQ(img.labels[0], 2);
  for (std::size_t j = 0; j < r.mask.size(); ++j) {
    EXPECT_NEAR(img.images[j], r.mask[j] * r.pattern[j], 0.5 / 255.0 + 1e-6);
  }
  std::ifstream f(dir / "t2.csv");
  std::string header, row;
  std::getline(f, header);
  std::getline(f, row);
  EXPECT_EQ(header, "target,l1_norm,final_loss");
  EXPECT_EQ(row.substr(0, 2), "2,");
  std::filesystem::remove_all(dir);
}
