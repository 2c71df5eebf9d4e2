#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ebyd/exposure/exposure.hpp"
#include "ebyd/nncore/model.hpp"
#include "ebyd/poisonlab/dataset.hpp"

namespace ebyd {

// Which way entropy is read as evidence. `paper`: high entropy means
// backdoor. `flipped`: low entropy means backdoor (classic STRIP).
enum class Polarity { paper, flipped };
std::string_view to_string(Polarity p);
Polarity parse_polarity(std::string_view text);

struct StripConfig {
  std::size_t overlays = 20;  // N
  float overlay_alpha = 0.5f;
  Polarity polarity = Polarity::paper;
  std::uint64_t seed = 0;

  void validate() const;
};

// Sum over N seeded overlays of the base-2 entropy of
// softmax(f(clip((1-a) x + a overlay))). The overlay draw depends only on
// cfg.seed and the pool, so every input sees the same overlays.
double strip_score(const ModelBundle& model, std::span<const float> image, const ImageDataset& overlay_pool,
                   const StripConfig& cfg);

// Base-2 entropy of each softmax row, summed over the rows.
double entropy_sum_bits(const DenseArray& logits);

// Rank-based area under the ROC curve with `positive` as the positive
// class; tied scores count one half. Throws ArgumentError unless both
// classes are present.
double auroc(std::span<const double> scores, const std::vector<bool>& positive);

// Clean and triggered test images stacked, with the ground truth of which
// rows carry the trigger.
struct SampleMixture {
  DenseArray images;
  std::vector<bool> backdoor;
  std::size_t size() const { return backdoor.size(); }
};
SampleMixture make_mixture(const ImageDataset& clean, const ImageDataset& triggered);

struct SampleDetection {
  std::vector<double> entropy;  // raw H_sum per sample
  double auroc = 0.0;           // under cfg.polarity
};

SampleDetection detect_samples(const ModelBundle& model, const SampleMixture& mixture,
                               const ImageDataset& overlay_pool, const StripConfig& cfg);

struct InversionConfig {
  float lambda = 0.1f;
  std::size_t steps = 500;
  float lr = 0.1f;
  std::size_t batch_size = 32;
  float init_mask_logit = -3.0f;
  float init_pattern_logit = 0.0f;
  std::uint64_t seed = 0;

  void validate() const;
};

struct InversionResult {
  DenseArray mask;     // [C,H,W] in [0,1]
  DenseArray pattern;  // [C,H,W] in [0,1]
  double l1_norm = 0.0;
  double final_loss = 0.0;  // cross-entropy toward target at the returned iterate
  double objective = 0.0;   // final_loss + lambda * l1_norm
  int target = 0;
};

// Adam on (w_m, w_p) with m = sigmoid(w_m), pattern =
// sigmoid(w_p), minimizing CE(f((1-m) x + m pattern), target) + lambda |m|_1
// over seeded probe batches. Returns the iterate with the lowest batch
// objective. Throws NumericError if the objective stops being finite.
InversionResult invert_trigger(const ModelBundle& model, int target, const ImageDataset& probe,
                               const InversionConfig& cfg);

enum class DetectionMethod { nc, ebyd };
std::string_view to_string(DetectionMethod m);

struct ModelVerdict {
  bool backdoored = false;
  DetectionMethod method = DetectionMethod::nc;
  std::optional<int> inferred_target;
  std::vector<double> l1_norms;         // nc: one per class; ebyd: the inverted label only
  std::optional<double> consistency;    // ebyd
  std::optional<double> anomaly_index;  // nc
  std::size_t inversions = 0;
  std::vector<InversionResult> triggers;
};

inline constexpr double kMadConsistency = 1.4826;
inline constexpr double kAnomalyCutoff = 2.0;

// |min(l1) - median| / (1.4826 * MAD), with the MAD floored at 1% of the
// median so a single outlier among identical norms stays finite.
double anomaly_index(std::span<const double> l1_norms);

// One inversion per class on the model as given; flags the model when the
// smallest norm sits below the median with anomaly index above 2.
ModelVerdict detect_model_nc(const ModelBundle& model, const ImageDataset& defense, const InversionConfig& cfg);

struct EbydDetectionConfig {
  ExposureConfig exposure;
  InversionConfig inversion;
  double consistency_threshold = 0.9;  // tau
};

// Exposes the model, then inverts a trigger for the inferred label only
// when the label consistency reaches tau.
ModelVerdict detect_model_ebyd(const ModelBundle& model, const ImageDataset& defense,
                               const EbydDetectionConfig& cfg);
// Same decision on a model that is already exposed.
ModelVerdict detect_model_ebyd(const ExposedModel& exposed, const ImageDataset& defense,
                               const EbydDetectionConfig& cfg);

// Writes <stem>.ebyd (m * pattern as a one-image raw dataset labelled with
// the target) and <stem>.csv ("target,l1_norm,final_loss").
void export_trigger(const InversionResult& result, const std::filesystem::path& stem);

}  // namespace ebyd
