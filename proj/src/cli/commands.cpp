#include "ebyd/cli/commands.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "ebyd/detection/detection.hpp"
#include "ebyd/exposure/exposure.hpp"
#include "ebyd/nncore/checkpoint.hpp"
#include "ebyd/poisonlab/poison.hpp"
#include "ebyd/removal/removal.hpp"
#include "ebyd/trainer/trainer.hpp"

namespace ebyd {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr int kSchema = 1;

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
json opt(const std::optional<int>& v) { return v ? json(*v) : json(nullptr); }

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write '" + path.string() + "'");
  f << j.dump(2) << '\n';
  if (!f) throw Error("failed writing '" + path.string() + "'");
}

json read_json(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingArtifact("missing artifact '" + path.string() + "'");
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw FormatError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

ModelBundle need_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw MissingArtifact("missing artifact '" + path.string() + "'");
  return load_checkpoint(path);
}

std::string ckpt_name(const char* stem, ExposureTechnique t) {
  return std::string(stem) + "_" + std::string(to_string(t)) + ".ckpt";
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// Wall-clock per stage, kept out of the reports so those stay bitwise
// reproducible.
void record_time(const fs::path& dir, const std::string& stage, double seconds) {
  const fs::path path = dir / "timing.json";
  json t = json::object();
  if (fs::exists(path)) {
    try {
      t = read_json(path);
    } catch (const Error&) {
      t = json::object();
    }
  }
  t[stage] = seconds;
  write_json(path, t);
}

void say(std::ostream* log, const std::string& line) {
  if (log) *log << line << '\n' << std::flush;
}

std::string fixed(double v, int digits = 3) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

ResearchProbe probe_of(const SeedData& d, const ExperimentConfig& c) {
  return {&d.test, &d.backdoor_test, c.attack.target};
}

SampleMixture strip_mixture(const SeedData& d, std::size_t per_side) {
  std::vector<std::size_t> clean(std::min(per_side, d.test.size())), trig(std::min(per_side, d.backdoor_test.size()));
  std::iota(clean.begin(), clean.end(), std::size_t{0});
  std::iota(trig.begin(), trig.end(), std::size_t{0});
  return make_mixture(subset(d.test, clean), subset(d.backdoor_test, trig));
}

void attack_seed(const ExperimentConfig& c, std::uint64_t seed, std::ostream* log) {
  Stopwatch clock;
  const fs::path dir = seed_dir(c, seed);
  fs::create_directories(dir);
  const SeedData d = make_seed_data(c, seed);
  const ModelBundle model = train(model_arch(c), d.train, train_config(c, seed));
  save_checkpoint(model, dir / "model.ckpt");
  const EvalReport r = evaluate(model, d.test, &d.backdoor_test, c.attack.target);
  write_json(dir / "attack.json", {{"schema", kSchema},
                                   {"seed", seed},
                                   {"attack", c.attack.name()},
                                   {"target", c.attack.target},
                                   {"ca", r.ca},
                                   {"asr", opt(r.asr)},
                                   {"per_class_accuracy", r.per_class_accuracy},
                                   {"digest", checkpoint_digest(model)}});
  record_time(dir, "attack", clock.seconds());
  say(log, "seed " + std::to_string(seed) + " attack " + c.attack.name() + ": CA " + fixed(r.ca) + " ASR " +
               fixed(r.asr.value_or(0.0)));
}

void expose_seed(const ExperimentConfig& c, std::uint64_t seed, std::ostream* log) {
  Stopwatch clock;
  const fs::path dir = seed_dir(c, seed);
  const ModelBundle model = need_checkpoint(dir / "model.ckpt");
  const SeedData d = make_seed_data(c, seed);
  json techniques = json::array();
  for (ExposureTechnique t : c.exposure.techniques) {
    const ExposedModel e = expose(model, d.defense, exposure_config(c, t, seed), probe_of(d, c));
    save_checkpoint(e.model, dir / ckpt_name("exposed", t));
    const std::string trace = "trace_" + std::string(to_string(t)) + ".csv";
    write_trace_csv(e.trace, dir / trace);
    std::optional<double> b;
    try {
      b = bem(e.trace);
    } catch (const ArgumentError&) {
      // No ASR anywhere in the window: BEM is undefined.
    }
    const TraceRecord& last = e.trace.records[e.trace.epochs_run];
    techniques.push_back({{"technique", to_string(t)},
                          {"epochs_run", e.trace.epochs_run},
                          {"incomplete", e.trace.incomplete},
                          {"sparsity", opt(e.trace.sparsity)},
                          {"inferred_label", e.inferred_label},
                          {"consistency", e.label_consistency},
                          {"bem", opt(b)},
                          {"ca_defense", last.ca_defense},
                          {"ca_test", opt(last.ca_test)},
                          {"asr", opt(last.asr)},
                          {"loss", last.mean_loss},
                          {"trace", trace}});
    say(log, "seed " + std::to_string(seed) + " expose " + std::string(to_string(t)) + ": label " +
                 std::to_string(e.inferred_label) + " consistency " + fixed(e.label_consistency, 2) + " BEM " +
                 (b ? fixed(*b) : std::string("n/a")));
  }
  write_json(dir / "expose.json", {{"schema", kSchema}, {"seed", seed}, {"techniques", techniques}});
  record_time(dir, "expose", clock.seconds());
}

void detect_seed(const ExperimentConfig& c, std::uint64_t seed, std::ostream* log) {
  Stopwatch clock;
  const fs::path dir = seed_dir(c, seed);
  const ModelBundle model = need_checkpoint(dir / "model.ckpt");
  std::vector<ModelBundle> exposed;
  for (ExposureTechnique t : c.exposure.techniques) exposed.push_back(need_checkpoint(dir / ckpt_name("exposed", t)));
  const SeedData d = make_seed_data(c, seed);
  const SampleMixture mixture = strip_mixture(d, c.detection.strip_samples);
  const StripConfig strip = strip_config(c, seed);

  json baseline = {{"auroc", detect_samples(model, mixture, d.defense, strip).auroc}, {"nc", nullptr}};
  if (c.detection.run_nc) {
    InversionConfig inv = c.detection.inversion;
    inv.seed = seed;
    const ModelVerdict v = detect_model_nc(model, d.defense, inv);
    baseline["nc"] = {{"backdoored", v.backdoored},
                      {"target", opt(v.inferred_target)},
                      {"anomaly_index", opt(v.anomaly_index)},
                      {"l1_norms", v.l1_norms},
                      {"inversions", v.inversions}};
  }
  json techniques = json::array();
  for (std::size_t i = 0; i < exposed.size(); ++i) {
    const ExposureTechnique t = c.exposure.techniques[i];
    const auto [label, consistency] = infer_backdoor_label(exposed[i], d.defense);
    const ExposedModel e{exposed[i], ExposureTrace{t, {}, 0, false, std::nullopt}, label, consistency};
    const ModelVerdict v = detect_model_ebyd(e, d.defense, detection_config(c, t, seed));
    const double auroc = detect_samples(exposed[i], mixture, d.defense, strip).auroc;
    if (v.backdoored) export_trigger(v.triggers.front(), dir / ("trigger_" + std::string(to_string(t))));
    techniques.push_back({{"technique", to_string(t)},
                          {"backdoored", v.backdoored},
                          {"target", opt(v.inferred_target)},
                          {"consistency", consistency},
                          {"l1_norm", v.l1_norms.empty() ? json(nullptr) : json(v.l1_norms.front())},
                          {"inversions", v.inversions},
                          {"auroc", auroc}});
    say(log, "seed " + std::to_string(seed) + " detect " + std::string(to_string(t)) + ": " +
                 (v.backdoored ? "backdoored, target " + std::to_string(*v.inferred_target) : std::string("clean")) +
                 ", STRIP AUROC " + fixed(auroc));
  }
  write_json(dir / "detect.json", {{"schema", kSchema},
                                   {"seed", seed},
                                   {"polarity", to_string(strip.polarity)},
                                   {"baseline", baseline},
                                   {"techniques", techniques}});
  record_time(dir, "detect", clock.seconds());
}

void remove_seed(const ExperimentConfig& c, std::uint64_t seed, std::ostream* log) {
  Stopwatch clock;
  const fs::path dir = seed_dir(c, seed);
  const ModelBundle model = need_checkpoint(dir / "model.ckpt");
  const json detect = read_json(dir / "detect.json");
  const SeedData d = make_seed_data(c, seed);
  const ResearchProbe probe = probe_of(d, c);
  const RemovalConfig rc = removal_config(c, seed);

  json techniques = json::array();
  for (ExposureTechnique t : c.exposure.techniques) {
    const ModelBundle exposed = need_checkpoint(dir / ckpt_name("exposed", t));
    bool flagged = false;
    bool found = false;
    for (const auto& row : detect.at("techniques")) {
      if (row.at("technique") == to_string(t)) {
        flagged = row.at("backdoored").get<bool>();
        found = true;
      }
    }
    if (!found) throw MissingArtifact("detect.json for seed " + std::to_string(seed) + " has no " +
                                      std::string(to_string(t)) + " verdict; rerun detect");
    RemovalReport r;
    ModelBundle purified = model;
    if (flagged) {
      const auto [label, consistency] = infer_backdoor_label(exposed, d.defense);
      const ExposedModel e{exposed, ExposureTrace{t, {}, 0, false, std::nullopt}, label, consistency};
      const RecoveryMask m = learn_recovery_mask(e, d.defense, rc);
      const double dt = select_threshold(model, m, d.defense, rc);
      purified = prune_with_mask(model, m, dt);
      r.method = RemovalMethod::recover_pruning;
      r.dt_selected = dt;
      r.units_pruned = units_pruned(m, dt);
    }
    measure_removal(r, model, purified, d.defense, probe);
    save_checkpoint(fold_unit_mask(purified), dir / ckpt_name("purified", t));
    techniques.push_back({{"technique", to_string(t)},
                          {"method", to_string(r.method)},
                          {"dt", opt(r.dt_selected)},
                          {"units_pruned", r.units_pruned},
                          {"ca_before", r.ca_before},
                          {"asr_before", opt(r.asr_before)},
                          {"ca_after", r.ca_after},
                          {"asr_after", opt(r.asr_after)}});
    say(log, "seed " + std::to_string(seed) + " remove " + std::string(to_string(t)) + ": ASR " +
                 fixed(r.asr_before.value_or(0.0)) + " -> " + fixed(r.asr_after.value_or(0.0)) + ", CA " +
                 fixed(r.ca_before) + " -> " + fixed(r.ca_after));
  }
  const ModelBundle ft = finetune_baseline(model, d.defense, rc);
  save_checkpoint(ft, dir / "finetuned.ckpt");
  const json baseline = {{"method", to_string(RemovalMethod::finetune)},
                         {"ca_after", eval_ca(ft, d.test)},
                         {"asr_after", eval_asr(ft, d.backdoor_test, c.attack.target)}};
  write_json(dir / "remove.json", {{"schema", kSchema}, {"seed", seed}, {"baseline", baseline}, {"techniques", techniques}});
  record_time(dir, "remove", clock.seconds());
}

template <typename Stage>
void each_seed(const ExperimentConfig& c, std::ostream* log, Stage stage) {
  for (std::uint64_t seed : c.seeds) stage(c, seed, log);
}

}  // namespace

ExperimentConfig apply_options(ExperimentConfig c, const CliOptions& o) {
  if (o.output_dir) c.output_dir = *o.output_dir;
  if (o.seed_override) c.seeds = {*o.seed_override};
  return c;
}

SeedData make_seed_data(const ExperimentConfig& c, std::uint64_t seed) {
  const DatasetSection& ds = c.dataset;
  const ImageDataset all = make_synthetic_dataset(ds.classes, ds.per_class, ds.shape, seed);
  DatasetSplit held = stratified_split(all, ds.test_count, seed);
  DefenseSplit split = split_defense(held.kept, ds.defense_fraction, seed);
  Trigger trigger = make_trigger(c.attack.kind, c.attack.trigger, ds.shape, seed);
  ImageDataset backdoor_test = backdoor_testset(held.taken, trigger, c.attack.target);
  ImageDataset train_set =
      c.attack.clean ? std::move(split.train) : poison(split.train, trigger, c.attack.rate, c.attack.target, seed).poisoned;
  return {std::move(train_set), std::move(split.defense), std::move(held.taken), std::move(backdoor_test),
          std::move(trigger)};
}

fs::path seed_dir(const ExperimentConfig& c, std::uint64_t seed) {
  return c.output_dir / ("seed_" + std::to_string(seed));
}

void cmd_attack(const ExperimentConfig& c, std::ostream* log) { each_seed(c, log, attack_seed); }
void cmd_expose(const ExperimentConfig& c, std::ostream* log) { each_seed(c, log, expose_seed); }
void cmd_detect(const ExperimentConfig& c, std::ostream* log) { each_seed(c, log, detect_seed); }
void cmd_remove(const ExperimentConfig& c, std::ostream* log) { each_seed(c, log, remove_seed); }

std::string collect_run_record(const ExperimentConfig& c, std::uint64_t seed) {
  const fs::path dir = seed_dir(c, seed);
  const json attack = read_json(dir / "attack.json");
  const json exposed = read_json(dir / "expose.json");
  const json detect = read_json(dir / "detect.json");
  const json removed = read_json(dir / "remove.json");
  json techniques = json::array();
  for (const auto& e : exposed.at("techniques")) {
    json row = e;
    row["trace"] = (fs::path("seed_" + std::to_string(seed)) / e.at("trace").get<std::string>()).generic_string();
    for (const auto& v : detect.at("techniques")) {
      if (v.at("technique") == e.at("technique")) row["detection"] = v;
    }
    for (const auto& r : removed.at("techniques")) {
      if (r.at("technique") == e.at("technique")) row["removal"] = r;
    }
    if (!row.contains("detection") || !row.contains("removal")) {
      throw MissingArtifact("seed " + std::to_string(seed) + ": stage files disagree on the technique list");
    }
    row["detection"].erase("technique");
    row["removal"].erase("technique");
    techniques.push_back(row);
  }
  json baseline = detect.at("baseline");
  baseline["ft"] = removed.at("baseline");
  const json record = {{"schema", kSchema},
                       {"seed", seed},
                       {"attack", attack.at("attack")},
                       {"target", attack.at("target")},
                       {"model", {{"ca", attack.at("ca")}, {"asr", attack.at("asr")}, {"digest", attack.at("digest")}}},
                       {"polarity", detect.at("polarity")},
                       {"techniques", techniques},
                       {"baseline", baseline}};
  return record.dump();
}

void cmd_pipeline(const ExperimentConfig& c, std::ostream* log) {
  fs::create_directories(c.output_dir);
  std::string lines;
  for (std::uint64_t seed : c.seeds) {
    attack_seed(c, seed, log);
    expose_seed(c, seed, log);
    detect_seed(c, seed, log);
    remove_seed(c, seed, log);
    lines += collect_run_record(c, seed) + "\n";
  }
  std::ofstream f(c.output_dir / "run.jsonl", std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write '" + (c.output_dir / "run.jsonl").string() + "'");
  f << lines;
  if (!f) throw Error("failed writing run.jsonl");
}

}  // namespace ebyd
