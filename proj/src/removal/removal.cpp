#include "ebyd/removal/removal.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ebyd/errors.hpp"
#include "ebyd/nncore/network.hpp"
#include "ebyd/nncore/rng.hpp"
#include "ebyd/trainer/trainer.hpp"

namespace ebyd {
namespace {

void check_defense(const ModelBundle& model, const ImageDataset& defense) {
  if (defense.size() == 0) throw ArgumentError("defense set is empty");
  if (defense.image_shape() != model.arch.input) throw ShapeError("defense images do not match the model input");
  if (defense.num_classes != model.arch.num_classes) {
    throw ShapeError("defense set has " + std::to_string(defense.num_classes) + " classes, the model " +
                     std::to_string(model.arch.num_classes));
  }
}

}  // namespace

std::string_view to_string(RemovalMethod m) {
  switch (m) {
    case RemovalMethod::none: return "none";
    case RemovalMethod::recover_pruning: return "recover_pruning";
    case RemovalMethod::finetune: return "finetune";
  }
  return "?";
}

void RemovalConfig::validate() const {
  if (!(mask_lr > 0.0f) || !std::isfinite(mask_lr)) throw ArgumentError("mask_lr must be > 0");
  if (mask_batch_size == 0 || ft_batch_size == 0) throw ArgumentError("removal batch sizes must be >= 1");
  const auto in_unit = [](double t) { return t > 0.0 && t < 1.0; };
  if (dt && !in_unit(*dt)) throw ArgumentError("dt must be in (0,1)");
  if (!dt && dt_sweep.empty()) throw ArgumentError("dt_sweep is empty and no fixed dt is set");
  for (double t : dt_sweep) {
    if (!in_unit(t)) throw ArgumentError("dt_sweep values must be in (0,1)");
  }
  if (!(ca_drop_budget >= 0.0)) throw ArgumentError("ca_drop_budget must be >= 0");
  if (!(ft_lr >= 0.0f) || !std::isfinite(ft_lr)) throw ArgumentError("ft_lr must be >= 0");
}

RecoveryMask learn_recovery_mask(const ExposedModel& exposed, const ImageDataset& defense, const RemovalConfig& cfg) {
  cfg.validate();
  check_defense(exposed.model, defense);
  const std::size_t units = exposed.model.hidden_units();
  const DenseArray base = exposed.model.unit_mask.value_or(DenseArray({units}, 1.0f));
  RecoveryMask m{DenseArray({units}, 1.0f)};

  ModelBundle work = exposed.model;
  GradRequest request;
  request.params = false;
  request.unit_mask = true;
  std::vector<std::size_t> order(defense.size());
  for (std::size_t epoch = 0; epoch < cfg.mask_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    CounterRng rng(cfg.seed, "recover/epoch/" + std::to_string(epoch));
    rng.shuffle(std::span(order));
    for (std::size_t start = 0; start < order.size(); start += cfg.mask_batch_size) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.mask_batch_size, order.size() - start));
      DenseArray applied({units});
      for (std::size_t u = 0; u < units; ++u) applied[u] = m.values[u] * base[u];
      work.unit_mask = std::move(applied);
      Gradients g;
      try {
        g = backward(work, gather_images(defense, idx), gather_labels(defense, idx), request);
      } catch (const NumericError& e) {
        throw NumericError("recovery mask diverged at epoch " + std::to_string(epoch) + ": " + e.what());
      }
      const DenseArray& gm = *g.unit_mask;
      for (std::size_t u = 0; u < units; ++u) {
        m.values[u] = std::clamp(m.values[u] - cfg.mask_lr * gm[u] * base[u], 0.0f, 1.0f);
      }
    }
  }
  return m;
}

std::size_t units_pruned(const RecoveryMask& mask, double dt) {
  return static_cast<std::size_t>(
      std::count_if(mask.values.values().begin(), mask.values.values().end(), [&](float v) { return v <= dt; }));
}

ModelBundle prune_with_mask(const ModelBundle& original, const RecoveryMask& mask, double dt) {
  const std::size_t units = original.hidden_units();
  if (mask.size() != units) {
    throw ShapeError("recovery mask has " + std::to_string(mask.size()) + " entries, the model " +
                     std::to_string(units) + " hidden units");
  }
  ModelBundle out = original;
  DenseArray binary({units});
  for (std::size_t u = 0; u < units; ++u) {
    const float keep = mask.values[u] > dt ? 1.0f : 0.0f;
    binary[u] = original.unit_mask ? keep * (*original.unit_mask)[u] : keep;
  }
  out.unit_mask = std::move(binary);
  return out;
}

std::vector<ThresholdCandidate> sweep_thresholds(const ModelBundle& original, const RecoveryMask& mask,
                                                 const ImageDataset& defense, const RemovalConfig& cfg) {
  cfg.validate();
  check_defense(original, defense);
  std::vector<double> dts = cfg.dt_sweep;
  std::sort(dts.begin(), dts.end());
  std::vector<ThresholdCandidate> out;
  for (double dt : dts) {
    out.push_back({dt, eval_ca(prune_with_mask(original, mask, dt), defense), units_pruned(mask, dt)});
  }
  return out;
}

double select_threshold(const ModelBundle& original, const RecoveryMask& mask, const ImageDataset& defense,
                        const RemovalConfig& cfg) {
  cfg.validate();
  if (cfg.dt) return *cfg.dt;
  const double base = eval_ca(original, defense);
  const auto sweep = sweep_thresholds(original, mask, defense, cfg);
  double chosen = sweep.front().dt;
  for (const auto& c : sweep) {
    if (base - c.ca_defense <= cfg.ca_drop_budget) chosen = c.dt;
  }
  return chosen;
}

ModelBundle finetune_baseline(const ModelBundle& model, const ImageDataset& defense, const RemovalConfig& cfg) {
  cfg.validate();
  check_defense(model, defense);
  ModelBundle out = model;
  if (cfg.ft_epochs == 0 || cfg.ft_lr == 0.0f) return out;
  TrainConfig t;
  t.epochs = cfg.ft_epochs;
  t.lr = cfg.ft_lr;
  t.weight_decay = 0.0f;
  t.batch_size = cfg.ft_batch_size;
  t.seed = cfg.seed;
  t.lr_decay_epochs.clear();
  train_in_place(out, defense, t);
  return out;
}

void measure_removal(RemovalReport& report, const ModelBundle& before, const ModelBundle& after,
                     const ImageDataset& defense, const ResearchProbe& probe) {
  const ImageDataset& clean = probe.clean_test ? *probe.clean_test : defense;
  report.ca_before = eval_ca(before, clean);
  report.ca_after = eval_ca(after, clean);
  if (probe.backdoor_test) {
    report.asr_before = eval_asr(before, *probe.backdoor_test, probe.target);
    report.asr_after = eval_asr(after, *probe.backdoor_test, probe.target);
  } else {
    report.asr_before.reset();
    report.asr_after.reset();
  }
}

DefenseOutcome defend_pipeline(const ModelBundle& model, const ImageDataset& defense,
                               const EbydDetectionConfig& detection, const RemovalConfig& removal,
                               const ResearchProbe& probe) {
  removal.validate();
  ExposedModel exposed = expose(model, defense, detection.exposure, probe);
  ModelVerdict verdict = detect_model_ebyd(exposed, defense, detection);
  DefenseOutcome out{model, {}, std::move(verdict), std::move(exposed), std::nullopt};
  if (out.verdict.backdoored) {
    RecoveryMask m = learn_recovery_mask(out.exposed, defense, removal);
    const double dt = select_threshold(model, m, defense, removal);
    out.purified = prune_with_mask(model, m, dt);
    out.report.method = RemovalMethod::recover_pruning;
    out.report.dt_selected = dt;
    out.report.units_pruned = units_pruned(m, dt);
    out.recovery_mask = std::move(m);
  }
  measure_removal(out.report, model, out.purified, defense, probe);
  return out;
}

}  // namespace ebyd
