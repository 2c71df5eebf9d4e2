#pragma once

#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include "ebyd/detection/detection.hpp"
#include "ebyd/exposure/exposure.hpp"
#include "ebyd/nncore/model.hpp"
#include "ebyd/poisonlab/dataset.hpp"

namespace ebyd {

// One value in [0,1] per hidden unit, indexed like ModelBundle::unit_mask.
struct RecoveryMask {
  DenseArray values;
  std::size_t size() const { return values.size(); }
};

struct RemovalConfig {
  float mask_lr = 0.2f;  // eta
  std::size_t mask_epochs = 20;
  std::size_t mask_batch_size = 10;
  std::optional<double> dt;  // fixed threshold; the sweep is skipped when set
  std::vector<double> dt_sweep{0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50,
                               0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95};
  double ca_drop_budget = 0.02;  // epsilon, on defense accuracy
  std::size_t ft_epochs = 20;
  float ft_lr = 0.01f;
  std::size_t ft_batch_size = 10;
  std::uint64_t seed = 0;

  void validate() const;
};

enum class RemovalMethod { none, recover_pruning, finetune };
std::string_view to_string(RemovalMethod m);

// Rates are on the probe's clean and triggered test sets when a probe is
// given; otherwise CA is defense accuracy and the ASR fields stay empty.
struct RemovalReport {
  double ca_before = 0.0;
  std::optional<double> asr_before;
  double ca_after = 0.0;
  std::optional<double> asr_after;
  std::optional<double> dt_selected;
  std::size_t units_pruned = 0;
  RemovalMethod method = RemovalMethod::none;
};

// Gradient descent on the unit mask of the exposed model, all weights
// frozen, against defense cross-entropy. Starts from all ones and clips to
// [0,1] after every step. A mask the exposure already installed stays
// applied underneath.
RecoveryMask learn_recovery_mask(const ExposedModel& exposed, const ImageDataset& defense, const RemovalConfig& cfg);

// Copy of `original` carrying the binary unit mask 1[m_r > dt], multiplied
// into any mask it already has. Throws ShapeError on a size mismatch.
ModelBundle prune_with_mask(const ModelBundle& original, const RecoveryMask& mask, double dt);
std::size_t units_pruned(const RecoveryMask& mask, double dt);

struct ThresholdCandidate {
  double dt = 0.0;
  double ca_defense = 0.0;
  std::size_t units_pruned = 0;
};

// Defense accuracy of prune_with_mask at every candidate, ascending.
std::vector<ThresholdCandidate> sweep_thresholds(const ModelBundle& original, const RecoveryMask& mask,
                                                 const ImageDataset& defense, const RemovalConfig& cfg);

// cfg.dt when set. Otherwise the largest candidate whose defense-accuracy
// drop from the unpruned original is at most epsilon, or the smallest
// candidate when none qualifies.
double select_threshold(const ModelBundle& original, const RecoveryMask& mask, const ImageDataset& defense,
                        const RemovalConfig& cfg);

// Plain SGD on defense cross-entropy for ft_epochs at ft_lr.
ModelBundle finetune_baseline(const ModelBundle& model, const ImageDataset& defense, const RemovalConfig& cfg);

struct DefenseOutcome {
  ModelBundle purified;  // binary mask installed; fold_unit_mask before saving
  RemovalReport report;
  ModelVerdict verdict;
  ExposedModel exposed;
  std::optional<RecoveryMask> recovery_mask;
};

// Expose, decide, and when the verdict is backdoored learn the recovery
// mask on the exposed model and prune the original with it. A clean
// verdict returns the original model untouched.
DefenseOutcome defend_pipeline(const ModelBundle& model, const ImageDataset& defense,
                               const EbydDetectionConfig& detection, const RemovalConfig& removal,
                               const ResearchProbe& probe = {});

// Fills the before/after rates of a report from the two models.
void measure_removal(RemovalReport& report, const ModelBundle& before, const ModelBundle& after,
                     const ImageDataset& defense, const ResearchProbe& probe);

}  // namespace ebyd
