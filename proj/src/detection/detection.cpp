#include "ebyd/detection/detection.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "ebyd/errors.hpp"
#include "ebyd/nncore/network.hpp"
#include "ebyd/nncore/rng.hpp"

namespace ebyd {
namespace {

constexpr float kBeta1 = 0.9f, kBeta2 = 0.999f, kAdamEps = 1e-8f;

float sigmoid(float z) { return 1.0f / (1.0f + std::exp(-z)); }

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// (1 - m) x + m p for every row of `images`.
DenseArray stamp(const DenseArray& images, std::span<const std::size_t> rows, const DenseArray& mask,
                 const DenseArray& pattern) {
  const std::size_t n = mask.size();
  Dims dims = images.dims();
  dims[0] = rows.size();
  DenseArray out(dims);
  for (std::size_t b = 0; b < rows.size(); ++b) {
    const float* x = images.data() + rows[b] * n;
    float* y = out.data() + b * n;
    for (std::size_t j = 0; j < n; ++j) y[j] = (1.0f - mask[j]) * x[j] + mask[j] * pattern[j];
  }
  return out;
}

double full_cross_entropy(const ModelBundle& model, const ImageDataset& probe, int target, const DenseArray& mask,
                          const DenseArray& pattern) {
  constexpr std::size_t kChunk = 256;
  double total = 0.0;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < probe.size(); start += kChunk) {
    rows.resize(std::min(kChunk, probe.size() - start));
    std::iota(rows.begin(), rows.end(), start);
    const std::vector<int> labels(rows.size(), target);
    const DenseArray logits = forward(model, stamp(probe.images, rows, mask, pattern));
    total += static_cast<double>(cross_entropy(logits, labels)) * static_cast<double>(rows.size());
  }
  return total / static_cast<double>(probe.size());
}

}  // namespace

std::string_view to_string(Polarity p) { return p == Polarity::paper ? "paper" : "flipped"; }

Polarity parse_polarity(std::string_view text) {
  if (text == "paper") return Polarity::paper;
  if (text == "flipped") return Polarity::flipped;
  throw ArgumentError("unknown polarity \"" + std::string(text) + "\" (expected paper, flipped)");
}

std::string_view to_string(DetectionMethod m) { return m == DetectionMethod::nc ? "nc" : "ebyd"; }

void StripConfig::validate() const {
  if (overlays == 0) throw ArgumentError("STRIP needs at least one overlay");
  if (!(overlay_alpha > 0.0f && overlay_alpha < 1.0f)) throw ArgumentError("overlay_alpha must be in (0,1)");
}

void InversionConfig::validate() const {
  if (!(lambda >= 0.0f)) throw ArgumentError("inversion lambda must be >= 0");
  if (!(lr > 0.0f)) throw ArgumentError("inversion lr must be > 0");
  if (batch_size == 0) throw ArgumentError("inversion batch size must be >= 1");
}

double entropy_sum_bits(const DenseArray& logits) {
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const float* z = logits.data() + r * k;
    const double top = *std::max_element(z, z + k);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(static_cast<double>(z[j]) - top);
    const double log_sum = std::log(sum);
    for (std::size_t j = 0; j < k; ++j) {
      const double log_p = static_cast<double>(z[j]) - top - log_sum;
      const double p = std::exp(log_p);
      if (p > 0.0) total -= p * log_p;
    }
  }
  return total / std::log(2.0);
}

double strip_score(const ModelBundle& model, std::span<const float> image, const ImageDataset& overlay_pool,
                   const StripConfig& cfg) {
  cfg.validate();
  if (overlay_pool.size() == 0) throw ArgumentError("STRIP overlay pool is empty");
  const std::size_t n = overlay_pool.image_size();
  if (image.size() != n) {
    throw ShapeError("STRIP input has " + std::to_string(image.size()) + " values, overlay pool images have " +
                     std::to_string(n));
  }
  const ImageShape s = overlay_pool.image_shape();
  DenseArray batch({cfg.overlays, s.channels, s.height, s.width});
  CounterRng rng(cfg.seed, "strip/overlays");
  const float a = cfg.overlay_alpha;
  for (std::size_t k = 0; k < cfg.overlays; ++k) {
    const auto overlay = overlay_pool.image(rng.below(overlay_pool.size()));
    float* out = batch.data() + k * n;
    for (std::size_t j = 0; j < n; ++j) out[j] = std::clamp((1.0f - a) * image[j] + a * overlay[j], 0.0f, 1.0f);
  }
  return entropy_sum_bits(forward(model, batch));
}

double auroc(std::span<const double> scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw ArgumentError("auroc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (bool p : positive) n_pos += p;
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ArgumentError("auroc needs both positive and negative samples");
  for (double s : scores) {
    if (std::isnan(s)) throw ArgumentError("auroc: NaN score");
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Sum of midranks (1-based) of the positives.
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (positive[order[k]]) rank_sum += midrank;
    }
    i = j;
  }
  const double p = static_cast<double>(n_pos), q = static_cast<double>(n_neg);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * q);
}

SampleMixture make_mixture(const ImageDataset& clean, const ImageDataset& triggered) {
  if (clean.image_shape() != triggered.image_shape()) throw ShapeError("mixture parts have different image shapes");
  const ImageShape s = clean.image_shape();
  SampleMixture m{DenseArray({clean.size() + triggered.size(), s.channels, s.height, s.width}), {}};
  std::copy(clean.images.values().begin(), clean.images.values().end(), m.images.data());
  std::copy(triggered.images.values().begin(), triggered.images.values().end(), m.images.data() + clean.images.size());
  m.backdoor.assign(clean.size(), false);
  m.backdoor.resize(clean.size() + triggered.size(), true);
  return m;
}

SampleDetection detect_samples(const ModelBundle& model, const SampleMixture& mixture,
                               const ImageDataset& overlay_pool, const StripConfig& cfg) {
  cfg.validate();
  if (mixture.images.rank() != 4 || mixture.images.dim(0) != mixture.size()) {
    throw ShapeError("sample mixture images do not match its labels");
  }
  const std::size_t n = mixture.images.size() / mixture.size();
  SampleDetection out;
  out.entropy.reserve(mixture.size());
  for (std::size_t i = 0; i < mixture.size(); ++i) {
    out.entropy.push_back(
        strip_score(model, std::span(mixture.images.data() + i * n, n), overlay_pool, cfg));
  }
  std::vector<double> oriented = out.entropy;
  if (cfg.polarity == Polarity::flipped) {
    for (double& v : oriented) v = -v;
  }
  out.auroc = auroc(oriented, mixture.backdoor);
  return out;
}

InversionResult invert_trigger(const ModelBundle& model, int target, const ImageDataset& probe,
                               const InversionConfig& cfg) {
  cfg.validate();
  if (probe.size() == 0) throw ArgumentError("trigger inversion needs probe samples");
  if (target < 0 || static_cast<std::size_t>(target) >= model.arch.num_classes) {
    throw ArgumentError("inversion target " + std::to_string(target) + " outside [0," +
                        std::to_string(model.arch.num_classes) + ")");
  }
  const ImageShape s = probe.image_shape();
  if (s != model.arch.input) throw ShapeError("probe images do not match the model input");
  const std::size_t n = s.size();

  DenseArray w_mask(s.dims(), cfg.init_mask_logit), w_pattern(s.dims(), cfg.init_pattern_logit);
  DenseArray mask(s.dims()), pattern(s.dims());
  const auto refresh = [&] {
    for (std::size_t j = 0; j < n; ++j) {
      mask[j] = sigmoid(w_mask[j]);
      pattern[j] = sigmoid(w_pattern[j]);
    }
  };
  refresh();
  DenseArray best_mask = mask, best_pattern = pattern;
  double best_objective = INFINITY;

  // Adam moments for both logit fields.
  std::vector<float> m1(n, 0.0f), v1(n, 0.0f), m2(n, 0.0f), v2(n, 0.0f);
  std::size_t t = 0;
  GradRequest request;
  request.params = false;
  request.input = true;
  std::vector<std::size_t> order(probe.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t batch = std::min(cfg.batch_size, probe.size());
  std::size_t cursor = probe.size();
  std::size_t epoch = 0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    if (cursor + batch > probe.size()) {
      CounterRng rng(cfg.seed, "invert/epoch/" + std::to_string(epoch++));
      rng.shuffle(std::span(order));
      cursor = 0;
    }
    const std::span<const std::size_t> rows(order.data() + cursor, batch);
    cursor += batch;
    const std::vector<int> labels(batch, target);
    Gradients g;
    try {
      g = backward(model, stamp(probe.images, rows, mask, pattern), labels, request);
    } catch (const NumericError& e) {
      throw NumericError("trigger inversion for label " + std::to_string(target) + " diverged at step " +
                         std::to_string(step) + ": " + e.what());
    }
    double l1 = 0.0;
    for (float v : mask.values()) l1 += v;
    const double objective = static_cast<double>(g.loss) + static_cast<double>(cfg.lambda) * l1;
    if (!std::isfinite(objective)) {
      throw NumericError("trigger inversion for label " + std::to_string(target) + " diverged at step " +
                         std::to_string(step));
    }
    if (objective < best_objective) {
      best_objective = objective;
      best_mask = mask;
      best_pattern = pattern;
    }
    const DenseArray& gin = *g.input;
    ++t;
    const float c1 = 1.0f - std::pow(kBeta1, static_cast<float>(t));
    const float c2 = 1.0f - std::pow(kBeta2, static_cast<float>(t));
    for (std::size_t j = 0; j < n; ++j) {
      double d_mask = 0.0, d_pattern = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const float gx = gin[b * n + j];
        d_mask += gx * (pattern[j] - probe.images[rows[b] * n + j]);
        d_pattern += gx * mask[j];
      }
      d_mask += cfg.lambda;
      const float gm = static_cast<float>(d_mask) * mask[j] * (1.0f - mask[j]);
      const float gp = static_cast<float>(d_pattern) * pattern[j] * (1.0f - pattern[j]);
      m1[j] = kBeta1 * m1[j] + (1.0f - kBeta1) * gm;
      v1[j] = kBeta2 * v1[j] + (1.0f - kBeta2) * gm * gm;
      m2[j] = kBeta1 * m2[j] + (1.0f - kBeta1) * gp;
      v2[j] = kBeta2 * v2[j] + (1.0f - kBeta2) * gp * gp;
      w_mask[j] -= cfg.lr * (m1[j] / c1) / (std::sqrt(v1[j] / c2) + kAdamEps);
      w_pattern[j] -= cfg.lr * (m2[j] / c1) / (std::sqrt(v2[j] / c2) + kAdamEps);
    }
    refresh();
  }
  if (cfg.steps == 0) best_mask = mask, best_pattern = pattern;

  InversionResult r{best_mask, best_pattern, 0.0, 0.0, 0.0, target};
  for (float v : r.mask.values()) r.l1_norm += v;
  r.final_loss = full_cross_entropy(model, probe, target, r.mask, r.pattern);
  r.objective = r.final_loss + static_cast<double>(cfg.lambda) * r.l1_norm;
  return r;
}

double anomaly_index(std::span<const double> l1_norms) {
  if (l1_norms.empty()) throw ArgumentError("anomaly index needs at least one norm");
  const std::vector<double> v(l1_norms.begin(), l1_norms.end());
  const double med = median_of(v);
  std::vector<double> dev;
  for (double x : v) dev.push_back(std::abs(x - med));
  const double mad = std::max(median_of(dev), 0.01 * std::abs(med));
  if (mad == 0.0) return 0.0;
  return std::abs(*std::min_element(v.begin(), v.end()) - med) / (kMadConsistency * mad);
}

ModelVerdict detect_model_nc(const ModelBundle& model, const ImageDataset& defense, const InversionConfig& cfg) {
  ModelVerdict v;
  v.method = DetectionMethod::nc;
  for (std::size_t k = 0; k < model.arch.num_classes; ++k) {
    v.triggers.push_back(invert_trigger(model, static_cast<int>(k), defense, cfg));
    v.l1_norms.push_back(v.triggers.back().l1_norm);
    ++v.inversions;
  }
  v.anomaly_index = anomaly_index(v.l1_norms);
  const auto low = std::min_element(v.l1_norms.begin(), v.l1_norms.end());
  if (*low < median_of(v.l1_norms) && *v.anomaly_index > kAnomalyCutoff) {
    v.backdoored = true;
    v.inferred_target = static_cast<int>(low - v.l1_norms.begin());
  }
  return v;
}

ModelVerdict detect_model_ebyd(const ExposedModel& exposed, const ImageDataset& defense,
                               const EbydDetectionConfig& cfg) {
  ModelVerdict v;
  v.method = DetectionMethod::ebyd;
  v.consistency = exposed.label_consistency;
  if (exposed.label_consistency >= cfg.consistency_threshold) {
    v.triggers.push_back(invert_trigger(exposed.model, exposed.inferred_label, defense, cfg.inversion));
    v.l1_norms.push_back(v.triggers.back().l1_norm);
    v.inversions = 1;
    v.backdoored = true;
    v.inferred_target = exposed.inferred_label;
  }
  return v;
}

ModelVerdict detect_model_ebyd(const ModelBundle& model, const ImageDataset& defense,
                               const EbydDetectionConfig& cfg) {
  return detect_model_ebyd(expose(model, defense, cfg.exposure), defense, cfg);
}

void export_trigger(const InversionResult& result, const std::filesystem::path& stem) {
  const Dims& d = result.mask.dims();
  DenseArray image({1, d[0], d[1], d[2]});
  for (std::size_t j = 0; j < result.mask.size(); ++j) image[j] = result.mask[j] * result.pattern[j];
  const auto classes = static_cast<std::size_t>(std::max(2, result.target + 1));
  save_raw_dataset(ImageDataset{std::move(image), {result.target}, "trigger", classes},
                   std::filesystem::path(stem).concat(".ebyd"));
  std::ofstream f(std::filesystem::path(stem).concat(".csv"), std::ios::binary);
  if (!f) throw Error("cannot write trigger metrics next to " + stem.string());
  char line[128];
  std::snprintf(line, sizeof line, "%d,%.6f,%.6f\n", result.target, result.l1_norm, result.final_loss);
  f << "target,l1_norm,final_loss\n" << line;
  if (!f) throw Error("failed writing trigger metrics next to " + stem.string());
}

}  // namespace ebyd
