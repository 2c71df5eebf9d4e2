#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ebyd/nncore/model.hpp"
#include "ebyd/poisonlab/dataset.hpp"

namespace ebyd {

enum class ExposureTechnique { cul, cft, prune, awp };
std::string_view to_string(ExposureTechnique t);
ExposureTechnique parse_exposure_technique(std::string_view text);

// How expose_prune picks its sparsity. `activation` only looks at defense
// accuracy; `oracle_asr` needs a research probe and is for evaluation only.
enum class PruneSelection { activation, oracle_asr };
std::string_view to_string(PruneSelection s);
PruneSelection parse_prune_selection(std::string_view text);

struct ExposureConfig {
  ExposureTechnique technique = ExposureTechnique::cul;
  float loss_ceiling = 8.0f;  // gamma
  double ca_min = 0.1;
  std::size_t batch_size = 10;
  std::uint64_t seed = 0;

  float cul_lr = 0.01f;
  std::size_t cul_max_epochs = 20;

  std::size_t cft_epochs = 10;
  float cft_lr = 0.01f;
  std::uint64_t cft_seed = 0;

  double prune_step = 0.1;
  double prune_ca_target = 0.35;
  PruneSelection prune_selection = PruneSelection::activation;

  float awp_lr = 0.2f;
  float awp_init_range = 0.1f;
  std::size_t awp_epochs = 1;
  float awp_budget = 1.0f;

  void validate() const;
};

struct TraceRecord {
  std::size_t epoch = 0;
  double ca_defense = 0.0;
  std::optional<double> ca_test;  // research mode only
  std::optional<double> asr;      // research mode only
  double mean_loss = 0.0;         // defense cross-entropy against true labels
};

// records[0] is the model before exposure; records[i] follows exposure
// epoch i (or, for pruning, sparsity step i). epochs_run is the number of
// exposure epochs that produced the returned model.
struct ExposureTrace {
  ExposureTechnique technique = ExposureTechnique::cul;
  std::vector<TraceRecord> records;
  std::size_t epochs_run = 0;
  bool incomplete = false;              // CUL hit its epoch cap without a stop condition
  std::optional<double> sparsity;       // prune: the selected fraction

  // The records BEM averages over: 1..epochs_run, or record 0 alone when no
  // exposure epoch ran.
  std::span<const TraceRecord> bem_window() const;
};

struct ExposedModel {
  ModelBundle model;
  ExposureTrace trace;
  int inferred_label = 0;
  double label_consistency = 0.0;
};

// Ground truth available to a research harness. When present, traces also
// carry test CA and ASR; defense decisions never read them.
struct ResearchProbe {
  const ImageDataset* clean_test = nullptr;
  const ImageDataset* backdoor_test = nullptr;
  int target = 0;
};

ExposedModel expose(const ModelBundle& model, const ImageDataset& defense, const ExposureConfig& cfg,
                    const ResearchProbe& probe = {});
ExposedModel expose_cul(const ModelBundle& model, const ImageDataset& defense, const ExposureConfig& cfg,
                        const ResearchProbe& probe = {});
ExposedModel expose_cft(const ModelBundle& model, const ImageDataset& defense, const ExposureConfig& cfg,
                        const ResearchProbe& probe = {});
ExposedModel expose_prune(const ModelBundle& model, const ImageDataset& defense, const ExposureConfig& cfg,
                          const ResearchProbe& probe = {});
ExposedModel expose_awp(const ModelBundle& model, const ImageDataset& defense, const ExposureConfig& cfg,
                        const ResearchProbe& probe = {});

// sum(asr - ca_test) / sum(asr). Throws ArgumentError if a record lacks
// research metrics or the ASR sum is zero.
double bem(std::span<const TraceRecord> records);
double bem(const ExposureTrace& trace);

// Mode of the model's predictions over `defense` and its frequency; ties go
// to the lowest class.
std::pair<int, double> infer_backdoor_label(const ModelBundle& model, const ImageDataset& defense);

// "epoch,ca_defense,ca_test,asr,loss" header plus one line per record;
// missing research metrics are left empty.
std::string format_trace_csv(const ExposureTrace& trace);
void write_trace_csv(const ExposureTrace& trace, const std::filesystem::path& path);

}  // namespace ebyd
