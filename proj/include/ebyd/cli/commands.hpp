#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ebyd/cli/config.hpp"
#include "ebyd/poisonlab/dataset.hpp"
#include "ebyd/poisonlab/trigger.hpp"

namespace ebyd {

// An input file a stage depends on does not exist.
class MissingArtifact : public Error {
 public:
  using Error::Error;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitMissing = 3;
inline constexpr int kExitNumeric = 4;

struct CliOptions {
  std::optional<std::filesystem::path> output_dir;
  std::optional<std::uint64_t> seed_override;
  bool quiet = false;
};

ExperimentConfig apply_options(ExperimentConfig c, const CliOptions& o);

// Everything a seed's stages need besides checkpoints, rebuilt from
// (config, seed) by every stage.
struct SeedData {
  ImageDataset train;  // poisoned unless the attack is clean
  ImageDataset defense;
  ImageDataset test;
  ImageDataset backdoor_test;
  Trigger trigger;
};
SeedData make_seed_data(const ExperimentConfig& c, std::uint64_t seed);

std::filesystem::path seed_dir(const ExperimentConfig& c, std::uint64_t seed);

// Each stage runs every configured seed. Progress goes to `log` when it is
// not null. Files per seed directory:
//   attack:  model.ckpt, attack.json
//   expose:  exposed_<t>.ckpt, trace_<t>.csv, expose.json
//   detect:  detect.json, trigger_<t>.ebyd/.csv for flagged techniques
//   remove:  purified_<t>.ckpt, finetuned.ckpt, remove.json
// pipeline runs all four and writes run.jsonl (one record per seed) into
// the output directory. Wall-clock seconds go to timing.json files only.
void cmd_attack(const ExperimentConfig& c, std::ostream* log);
void cmd_expose(const ExperimentConfig& c, std::ostream* log);
void cmd_detect(const ExperimentConfig& c, std::ostream* log);
void cmd_remove(const ExperimentConfig& c, std::ostream* log);
void cmd_pipeline(const ExperimentConfig& c, std::ostream* log);

// Merges a seed's stage files into its run record (one JSON line).
std::string collect_run_record(const ExperimentConfig& c, std::uint64_t seed);

struct ReportRow {
  std::string attack;
  std::string technique;  // an exposure technique, or "baseline" (NC, plain STRIP, FT)
  std::size_t seeds = 0;
  std::optional<double> bem;
  std::optional<double> dr;  // flagged with the right target; for clean models, flagged at all
  std::optional<double> auroc;
  std::optional<double> asr_before, ca_before, asr_after, ca_after;
};

// Medians over seeds (dr is a fraction of seeds), one row per attack and
// technique, sorted by attack then technique.
std::vector<ReportRow> aggregate_runs(const std::vector<std::filesystem::path>& run_dirs);
std::string format_report_csv(const std::vector<ReportRow>& rows);

double median(std::vector<double> values);

// Parses arguments, runs one subcommand and maps failures to exit codes.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace ebyd
