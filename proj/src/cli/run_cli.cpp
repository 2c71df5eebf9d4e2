#include <algorithm>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "ebyd/cli/commands.hpp"

namespace ebyd {

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Backdoor exposure, detection and removal experiments"};
  app.name("ebyd");
  app.require_subcommand(1, 1);

  std::string config_path;
  std::string output_dir;
  std::uint64_t seed_override = 0;
  bool quiet = false;
  std::vector<std::string> run_dirs;

  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--output-dir", output_dir, "Overrides output_dir from the config");
    sub->add_option("--seed-override", seed_override, "Runs this one seed instead of the configured list");
    sub->add_flag("--quiet", quiet, "No progress output");
  };
  struct Stage {
    const char* name;
    const char* help;
    void (*run)(const ExperimentConfig&, std::ostream*);
  };
  const Stage stages[] = {
      {"attack", "Train the model named by the config and report CA/ASR", cmd_attack},
      {"expose", "Run the configured exposure techniques on the trained model", cmd_expose},
      {"detect", "Model-level and sample-level detection on original and exposed models", cmd_detect},
      {"remove", "Recover-Pruning per technique plus the fine-tuning baseline", cmd_remove},
      {"pipeline", "attack, expose, detect and remove, then write run.jsonl", cmd_pipeline},
  };
  std::vector<CLI::App*> stage_apps;
  for (const Stage& s : stages) {
    CLI::App* sub = app.add_subcommand(s.name, s.help);
    sub->add_option("--config", config_path, "Experiment config (JSON)")->required();
    add_common(sub);
    stage_apps.push_back(sub);
  }
  CLI::App* report = app.add_subcommand("report", "Aggregate run directories into one comparison table");
  report->add_option("run_dirs", run_dirs, "Output directories of pipeline runs")->required();
  report->add_option("--output-dir", output_dir, "Also write report.csv here");
  report->add_flag("--quiet", quiet, "No progress output");

  std::vector<std::string> args(argv + 1, argv + argc);
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kExitOk;
    }
    err << "ebyd: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    if (report->parsed()) {
      std::vector<std::filesystem::path> dirs(run_dirs.begin(), run_dirs.end());
      const std::string table = format_report_csv(aggregate_runs(dirs));
      out << table;
      if (!output_dir.empty()) {
        std::filesystem::create_directories(output_dir);
        std::ofstream f(std::filesystem::path(output_dir) / "report.csv", std::ios::binary | std::ios::trunc);
        f << table;
        if (!f) throw Error("cannot write report.csv under " + output_dir);
      }
      return kExitOk;
    }
    CliOptions opts;
    if (!output_dir.empty()) opts.output_dir = output_dir;
    opts.quiet = quiet;
    for (std::size_t i = 0; i < stage_apps.size(); ++i) {
      if (!stage_apps[i]->parsed()) continue;
      if (stage_apps[i]->count("--seed-override") > 0) opts.seed_override = seed_override;
      const ExperimentConfig c = apply_options(load_config(config_path), opts);
      stages[i].run(c, quiet ? nullptr : &err);
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "ebyd: config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ArgumentError& e) {
    err << "ebyd: invalid setting: " << e.what() << '\n';
    return kExitConfig;
  } catch (const MissingArtifact& e) {
    err << "ebyd: " << e.what() << '\n';
    return kExitMissing;
  } catch (const FormatError& e) {
    err << "ebyd: unreadable artifact: " << e.what() << '\n';
    return kExitMissing;
  } catch (const NumericError& e) {
    err << "ebyd: numerical failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "ebyd: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace ebyd
