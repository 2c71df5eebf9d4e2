#include "ebyd/exposure/exposure.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "ebyd/errors.hpp"
#include "ebyd/nncore/network.hpp"
#include "ebyd/nncore/rng.hpp"
#include "ebyd/trainer/trainer.hpp"

namespace ebyd {
namespace {

struct DefenseStats {
  double accuracy = 0.0;
  double mean_loss = 0.0;
};

DefenseStats defense_stats(const ModelBundle& model, const ImageDataset& defense) {
  constexpr std::size_t kChunk = 256;
  DefenseStats s;
  std::size_t hits = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < defense.size(); start += kChunk) {
    idx.resize(std::min(kChunk, defense.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto labels = gather_labels(defense, idx);
    const DenseArray logits = forward(model, gather_images(defense, idx));
    s.mean_loss += static_cast<double>(cross_entropy(logits, labels)) * static_cast<double>(idx.size());
    const auto pred = argmax_rows(logits);
    for (std::size_t k = 0; k < pred.size(); ++k) hits += pred[k] == labels[k];
  }
  s.accuracy = static_cast<double>(hits) / static_cast<double>(defense.size());
  s.mean_loss /= static_cast<double>(defense.size());
  return s;
}

TraceRecord make_record(std::size_t epoch, const ModelBundle& model, const ImageDataset& defense,
                        const ResearchProbe& probe) {
  const DefenseStats s = defense_stats(model, defense);
  TraceRecord r{epoch, s.accuracy, std::nullopt, std::nullopt, s.mean_loss};
  if (probe.clean_test) r.ca_test = eval_ca(model, *probe.clean_test);
  if (probe.backdoor_test) r.asr = eval_asr(model, *probe.backdoor_test, probe.target);
  return r;
}

// Seeded batch order over the defense set for one epoch.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                    const std::string& stream) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  CounterRng rng(seed, stream);
  rng.shuffle(std::span(order));
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + batch_size)));
  }
  return out;
}

void check_defense(const ModelBundle& model, const ImageDataset& defense) {
  if (defense.size() == 0) throw ArgumentError("defense set is empty");
  if (defense.num_classes != model.arch.num_classes) {
    throw ShapeError("defense set has " + std::to_string(defense.num_classes) + " classes, model has " +
                     std::to_string(model.arch.num_classes));
  }
}

ExposedModel finish(ModelBundle model, ExposureTrace trace, const ImageDataset& defense) {
  ExposedModel out{std::move(model), std::move(trace), 0, 0.0};
  std::tie(out.inferred_label, out.label_consistency) = infer_backdoor_label(out.model, defense);
  return out;
}

template <typename E>
E parse_enum(std::string_view text, std::initializer_list<E> values, const char* what) {
  for (E v : values) {
    if (to_string(v) == text) return v;
  }
  std::string list;
  for (E v : values) list += (list.empty() ? "" : ", ") + std::string(to_string(v));
  throw ArgumentError("unknown " + std::string(what) + " \"" + std::string(text) + "\" (expected " + list + ")");
}

}  // namespace

std::string_view to_string(ExposureTechnique t) {
  switch (t) {
    case ExposureTechnique::cul: return "cul";
    case ExposureTechnique::cft: return "cft";
    case ExposureTechnique::prune: return "prune";
    case ExposureTechnique::awp: return "awp";
  }
  return "?";
}

ExposureTechnique parse_exposure_technique(std::string_view text) {
  return parse_enum(text, {ExposureTechnique::cul, ExposureTechnique::cft, ExposureTechnique::prune,
                           ExposureTechnique::awp},
                    "exposure technique");
}

std::string_view to_string(PruneSelection s) {
  return s == PruneSelection::activation ? "activation" : "oracle_asr";
}

PruneSelection parse_prune_selection(std::string_view text) {
  return parse_enum(text, {PruneSelection::activation, PruneSelection::oracle_asr}, "prune selection");
}

void ExposureConfig::validate() const {
  if (!(loss_ceiling > 0.0f)) throw ArgumentError("loss ceiling gamma must be > 0");
  if (!(ca_min > 0.0 && ca_min < 1.0)) throw ArgumentError("ca_min must be in (0,1)");
  if (batch_size == 0) throw ArgumentError("exposure batch size must be >= 1");
  if (!(cul_lr > 0.0f)) throw ArgumentError("cul_lr must be > 0");
  if (!(cft_lr > 0.0f)) throw ArgumentError("cft_lr must be > 0");
  if (!(prune_step > 0.0 && prune_step < 1.0)) throw ArgumentError("prune_step must be in (0,1)");
  if (!(prune_ca_target >= 0.0 && prune_ca_target <= 1.0)) throw ArgumentError("prune_ca_target must be in [0,1]");
  if (!(awp_lr > 0.0f)) throw ArgumentError("awp_lr must be > 0");
  if (!(awp_init_range >= 0.0f)) throw ArgumentError("awp_init_range must be >= 0");
  if (!(awp_budget >= 0.0f)) throw ArgumentError("awp_budget must be >= 0");
}

std::span<const TraceRecord> ExposureTrace::bem_window() const {
  if (records.empty()) return {};
  if (epochs_run == 0) return std::span(records).first(1);
  return std::span(records).subspan(1, std::min(epochs_run, records.size() - 1));
}

ExposedModel expose(const ModelBundle& model, const ImageDataset& defense, const ExposureConfig& cfg,
                    const ResearchProbe& probe) {
  switch (cfg.technique) {
    case ExposureTechnique::cul: return expose_cul(model, defense, cfg, probe);
    case ExposureTechnique::cft: return expose_cft(model, defense, cfg, probe);
    case ExposureTechnique::prune: return expose_prune(model, defense, cfg, probe);
    case ExposureTechnique::awp: return expose_awp(model, defense, cfg, probe);
  }
  throw ArgumentError("unknown exposure technique");
}

ExposedModel expose_cul(const ModelBundle& model, const ImageDataset& defense, const ExposureConfig& cfg,
                        const ResearchProbe& probe) {
  cfg.validate();
  check_defense(model, defense);
  ModelBundle theta = model;
  ExposureTrace trace{ExposureTechnique::cul, {}, 0, false, std::nullopt};
  const auto stop = [&](const TraceRecord& r) { return r.ca_defense <= cfg.ca_min || r.mean_loss >= cfg.loss_ceiling; };

  trace.records.push_back(make_record(0, theta, defense, probe));
  bool stopped = stop(trace.records.back());
  for (std::size_t epoch = 1; !stopped && epoch <= cfg.cul_max_epochs; ++epoch) {
    // The stop rule is checked after every step: the ascent typically
    // collapses within a handful of steps, and an epoch-level check would
    // let it run on into saturation.
    for (const auto& idx : epoch_batches(defense.size(), cfg.batch_size, cfg.seed, "cul/epoch/" + std::to_string(epoch))) {
      const Gradients g = backward(theta, gather_images(defense, idx), gather_labels(defense, idx));
      if (g.loss >= cfg.loss_ceiling) continue;
      sgd_step(theta.params, g.params, cfg.cul_lr, 0.0f, Direction::ascend);
      const DefenseStats now = defense_stats(theta, defense);
      if (now.accuracy <= cfg.ca_min || now.mean_loss >= cfg.loss_ceiling) {
        stopped = true;
        break;
      }
    }
    trace.records.push_back(make_record(epoch, theta, defense, probe));
    trace.epochs_run = epoch;
    stopped = stopped || stop(trace.records.back());
  }
  trace.incomplete = !stopped;
  return finish(std::move(theta), std::move(trace), defense);
}

ExposedModel expose_cft(const ModelBundle& model, const ImageDataset& defense, const ExposureConfig& cfg,
                        const ResearchProbe& probe) {
  cfg.validate();
  check_defense(model, defense);
  ModelBundle theta = model;
  ExposureTrace trace{ExposureTechnique::cft, {}, 0, false, std::nullopt};

  std::vector<int> random_labels(defense.size());
  CounterRng label_rng(cfg.cft_seed, "cft/labels");
  for (int& y : random_labels) y = static_cast<int>(label_rng.below(defense.num_classes));

  trace.records.push_back(make_record(0, theta, defense, probe));
  for (std::size_t epoch = 1; epoch <= cfg.cft_epochs; ++epoch) {
    for (const auto& idx : epoch_batches(defense.size(), cfg.batch_size, cfg.seed, "cft/epoch/" + std::to_string(epoch))) {
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(random_labels[i]);
      const Gradients g = backward(theta, gather_images(defense, idx), labels);
      if (g.loss >= cfg.loss_ceiling) continue;
      sgd_step(theta.params, g.params, cfg.cft_lr, 0.0f, Direction::descend);
    }
    trace.records.push_back(make_record(epoch, theta, defense, probe));
    trace.epochs_run = epoch;
  }
  return finish(std::move(theta), std::move(trace), defense);
}

ExposedModel expose_prune(const ModelBundle& model, const ImageDataset& defense, const ExposureConfig& cfg,
                          const ResearchProbe& probe) {
  cfg.validate();
  check_defense(model, defense);
  if (cfg.prune_selection == PruneSelection::oracle_asr && (!probe.clean_test || !probe.backdoor_test)) {
    throw ArgumentError("oracle_asr pruning needs a research probe with clean and backdoor test sets");
  }
  const std::size_t units = model.hidden_units();

  // Mean |activation| per unit over the defense set.
  std::vector<double> activity(units, 0.0);
  {
    std::vector<std::size_t> all(defense.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    const DenseArray acts = unit_activations(model, gather_images(defense, all));
    for (std::size_t b = 0; b < defense.size(); ++b) {
      for (std::size_t u = 0; u < units; ++u) activity[u] += acts[b * units + u];
    }
  }
  std::vector<std::size_t> rank(units);
  std::iota(rank.begin(), rank.end(), std::size_t{0});
  std::stable_sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) { return activity[a] > activity[b]; });

  const auto masked = [&](double s) {
    ModelBundle m = model;
    DenseArray mask = model.unit_mask ? *model.unit_mask : DenseArray({units}, 1.0f);
    const auto count = static_cast<std::size_t>(std::floor(s * static_cast<double>(units) + 1e-9));
    for (std::size_t k = 0; k < count; ++k) mask[rank[k]] = 0.0f;
    m.unit_mask = std::move(mask);
    return m;
  };

  ExposureTrace trace{ExposureTechnique::prune, {}, 0, false, std::nullopt};
  trace.records.push_back(make_record(0, model, defense, probe));
  std::vector<double> sparsities{0.0};
  for (std::size_t k = 1;; ++k) {
    const double s = static_cast<double>(k) * cfg.prune_step;
    if (s >= 1.0 - 1e-9) break;
    sparsities.push_back(s);
    trace.records.push_back(make_record(k, masked(s), defense, probe));
  }
  if (sparsities.size() == 1) throw ArgumentError("prune_step leaves no sparsity below 1");

  std::size_t chosen = 0;
  if (cfg.prune_selection == PruneSelection::activation) {
    for (std::size_t k = 1; k < trace.records.size(); ++k) {
      if (trace.records[k].ca_defense <= cfg.prune_ca_target) {
        chosen = k;
        break;
      }
    }
    if (chosen == 0) {
      chosen = 1;
      for (std::size_t k = 2; k < trace.records.size(); ++k) {
        if (trace.records[k].ca_defense < trace.records[chosen].ca_defense) chosen = k;
      }
    }
  } else {
    chosen = 1;
    const auto gap = [&](std::size_t k) { return *trace.records[k].asr - *trace.records[k].ca_test; };
    for (std::size_t k = 2; k < trace.records.size(); ++k) {
      if (gap(k) > gap(chosen)) chosen = k;
    }
  }
  trace.epochs_run = chosen;
  trace.sparsity = sparsities[chosen];
  return finish(masked(sparsities[chosen]), std::move(trace), defense);
}

ExposedModel expose_awp(const ModelBundle& model, const ImageDataset& defense, const ExposureConfig& cfg,
                        const ResearchProbe& probe) {
  cfg.validate();
  check_defense(model, defense);
  ModelBundle theta = model;
  ParamMap delta;
  for (const auto& [name, value] : model.params) {
    if (!name.ends_with(".scale")) continue;
    DenseArray d(value.dims());
    CounterRng rng(cfg.seed, "awp/init/" + name);
    for (float& v : d.values()) {
      v = std::clamp(rng.uniform(-cfg.awp_init_range, cfg.awp_init_range), -cfg.awp_budget, cfg.awp_budget);
    }
    delta.emplace(name, std::move(d));
  }
  if (model.weight_perturbation) {
    throw ArgumentError("model already carries a weight perturbation");
  }
  theta.weight_perturbation = std::move(delta);

  ExposureTrace trace{ExposureTechnique::awp, {}, 0, false, std::nullopt};
  trace.records.push_back(make_record(0, theta, defense, probe));
  GradRequest request;
  request.params = false;
  request.perturbation = true;
  for (std::size_t epoch = 1; epoch <= cfg.awp_epochs; ++epoch) {
    for (const auto& idx : epoch_batches(defense.size(), cfg.batch_size, cfg.seed, "awp/epoch/" + std::to_string(epoch))) {
      const Gradients g = backward(theta, gather_images(defense, idx), gather_labels(defense, idx), request);
      for (auto& [name, d] : *theta.weight_perturbation) {
        sgd_update(d, g.perturbation.at(name), cfg.awp_lr, 0.0f, Direction::ascend);
        for (float& v : d.values()) v = std::clamp(v, -cfg.awp_budget, cfg.awp_budget);
      }
    }
    trace.records.push_back(make_record(epoch, theta, defense, probe));
    trace.epochs_run = epoch;
  }
  return finish(std::move(theta), std::move(trace), defense);
}

double bem(std::span<const TraceRecord> records) {
  if (records.empty()) throw ArgumentError("BEM needs at least one trace record");
  double gap = 0.0, asr = 0.0;
  for (const auto& r : records) {
    if (!r.asr || !r.ca_test) {
      throw ArgumentError("BEM needs research metrics (asr, ca_test) on every record; epoch " +
                          std::to_string(r.epoch) + " has none");
    }
    gap += *r.asr - *r.ca_test;
    asr += *r.asr;
  }
  if (!(asr > 0.0)) throw ArgumentError("BEM is undefined when every ASR is zero");
  return gap / asr;
}

double bem(const ExposureTrace& trace) { return bem(trace.bem_window()); }

std::pair<int, double> infer_backdoor_label(const ModelBundle& model, const ImageDataset& defense) {
  if (defense.size() == 0) throw ArgumentError("defense set is empty");
  const auto pred = predict_dataset(model, defense);
  std::vector<std::size_t> counts(model.arch.num_classes, 0);
  for (int p : pred) ++counts[static_cast<std::size_t>(p)];
  const auto best = std::max_element(counts.begin(), counts.end());  // first maximum = lowest class
  return {static_cast<int>(best - counts.begin()),
          static_cast<double>(*best) / static_cast<double>(defense.size())};
}

std::string format_trace_csv(const ExposureTrace& trace) {
  std::string out = "epoch,ca_defense,ca_test,asr,loss\n";
  char buf[64];
  const auto opt = [&](const std::optional<double>& v) {
    if (!v) return std::string();
    std::snprintf(buf, sizeof buf, "%.6f", *v);
    return std::string(buf);
  };
  for (const auto& r : trace.records) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f,", r.epoch, r.ca_defense);
    out += buf;
    out += opt(r.ca_test) + "," + opt(r.asr) + ",";
    std::snprintf(buf, sizeof buf, "%.6f\n", r.mean_loss);
    out += buf;
  }
  return out;
}

void write_trace_csv(const ExposureTrace& trace, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f << format_trace_csv(trace);
  if (!f) throw Error("failed writing " + path.string());
}

}  // namespace ebyd
