#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ebyd/detection/detection.hpp"
#include "ebyd/errors.hpp"
#include "ebyd/exposure/exposure.hpp"
#include "ebyd/poisonlab/trigger.hpp"
#include "ebyd/removal/removal.hpp"
#include "ebyd/trainer/trainer.hpp"

namespace ebyd {

// A config document that does not match the schema. The message starts
// with the JSON path of the offending field, e.g. "$.attack.kind: ...".
class ConfigError : public Error {
 public:
  using Error::Error;
};

struct DatasetSection {
  std::size_t classes = 4;
  std::size_t per_class = 1100;
  ImageShape shape{3, 16, 16};
  std::size_t test_count = 400;
  double defense_fraction = 0.01;
};

struct AttackSection {
  bool clean = false;  // train without poisoning; the trigger still builds the backdoor test set
  TriggerKind kind = TriggerKind::patch;
  TriggerParams trigger;
  double rate = 0.1;
  int target = 0;

  // "clean" or the trigger kind.
  std::string name() const;
};

struct TrainSection {
  std::string arch = "tiny_cnn";  // tiny_cnn | mlp
  std::size_t mlp_hidden = 64;
  TrainConfig cfg;
};

struct ExposureSection {
  std::vector<ExposureTechnique> techniques{ExposureTechnique::cul};
  ExposureConfig cfg;
};

struct DetectionSection {
  InversionConfig inversion;
  double consistency_threshold = 0.9;
  bool run_nc = true;
  StripConfig strip;
  std::size_t strip_samples = 100;  // clean and triggered test images each
};

// Per-seed fields (train, exposure, CFT labels, inversion, STRIP, removal)
// are not configurable: every run seed drives all of them.
struct ExperimentConfig {
  DatasetSection dataset;
  AttackSection attack;
  TrainSection train;
  ExposureSection exposure;
  DetectionSection detection;
  RemovalConfig removal;
  std::vector<std::uint64_t> seeds;
  std::filesystem::path output_dir = "runs/default";
};

// Strict: unknown keys, wrong types, invalid kinds and out-of-range values
// throw ConfigError naming the JSON path. `seeds` is required.
ExperimentConfig parse_config(std::string_view json_text);
ExperimentConfig load_config(const std::filesystem::path& path);

// Module configs for one run seed.
TrainConfig train_config(const ExperimentConfig& c, std::uint64_t seed);
ExposureConfig exposure_config(const ExperimentConfig& c, ExposureTechnique t, std::uint64_t seed);
EbydDetectionConfig detection_config(const ExperimentConfig& c, ExposureTechnique t, std::uint64_t seed);
StripConfig strip_config(const ExperimentConfig& c, std::uint64_t seed);
RemovalConfig removal_config(const ExperimentConfig& c, std::uint64_t seed);
ArchSpec model_arch(const ExperimentConfig& c);

}  // namespace ebyd
