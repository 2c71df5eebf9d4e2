#include "ebyd/cli/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace ebyd {
namespace {

using nlohmann::json;

std::string type_name(const json& j) { return j.type_name(); }

// One JSON object under a path. Reads are optional unless marked required;
// finish() rejects every key nobody asked for.
class Node {
 public:
  Node(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_, "expected an object, got " + type_name(j_));
  }

  [[noreturn]] static void fail(const std::string& path, const std::string& what) {
    throw ConfigError(path + ": " + what);
  }

  std::string at(const char* key) const { return path_ + "." + key; }

  const json* find(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void read(const char* key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) fail(at(key), "expected a boolean, got " + type_name(*v));
      out = v->get<bool>();
    }
  }

  void read(const char* key, std::size_t& out) {
    if (const json* v = find(key)) out = as_count(*v, at(key));
  }

  void read(const char* key, int& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) fail(at(key), "expected an integer, got " + type_name(*v));
      out = v->get<int>();
    }
  }

  void read(const char* key, double& out) {
    if (const json* v = find(key)) out = as_real(*v, at(key));
  }

  void read(const char* key, float& out) {
    if (const json* v = find(key)) out = static_cast<float>(as_real(*v, at(key)));
  }

  void read(const char* key, std::string& out) {
    if (const json* v = find(key)) out = as_string(*v, at(key));
  }

  template <typename Enum, typename Parse>
  void read_enum(const char* key, Enum& out, Parse parse) {
    if (const json* v = find(key)) {
      const std::string text = as_string(*v, at(key));
      try {
        out = parse(text);
      } catch (const ArgumentError& e) {
        fail(at(key), e.what());
      }
    }
  }

  std::optional<Node> child(const char* key) {
    if (const json* v = find(key)) return Node(*v, at(key));
    return std::nullopt;
  }

  const std::string& path() const { return path_; }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) fail(path_ + "." + item.key(), "unknown key");
    }
  }

  static std::size_t as_count(const json& v, const std::string& path) {
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
      fail(path, "expected a non-negative integer, got " + (v.is_number() ? v.dump() : type_name(v)));
    }
    return v.get<std::size_t>();
  }

  static double as_real(const json& v, const std::string& path) {
    if (!v.is_number()) fail(path, "expected a number, got " + type_name(v));
    return v.get<double>();
  }

  static std::string as_string(const json& v, const std::string& path) {
    if (!v.is_string()) fail(path, "expected a string, got " + type_name(v));
    return v.get<std::string>();
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename Fn>
void checked(const std::string& path, Fn&& fn) {
  try {
    fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const ArgumentError& e) {
    Node::fail(path, e.what());
  }
}

void parse_dataset(Node n, DatasetSection& d) {
  n.read("classes", d.classes);
  n.read("per_class", d.per_class);
  n.read("test_count", d.test_count);
  n.read("defense_fraction", d.defense_fraction);
  if (const json* v = n.find("shape")) {
    if (!v->is_array() || v->size() != 3) Node::fail(n.at("shape"), "expected [channels, height, width]");
    d.shape = {Node::as_count((*v)[0], n.at("shape") + "[0]"), Node::as_count((*v)[1], n.at("shape") + "[1]"),
               Node::as_count((*v)[2], n.at("shape") + "[2]")};
  }
  n.finish();
  if (d.classes < 2) Node::fail(n.at("classes"), "needs at least 2 classes");
  if (d.per_class == 0) Node::fail(n.at("per_class"), "must be >= 1");
  if (d.shape.channels == 0 || d.shape.height < 8 || d.shape.width < 8) {
    Node::fail(n.at("shape"), "needs channels >= 1 and at least 8x8 pixels");
  }
  if (d.test_count == 0 || d.test_count >= d.classes * d.per_class) {
    Node::fail(n.at("test_count"), "must be between 1 and the dataset size");
  }
  if (!(d.defense_fraction > 0.0 && d.defense_fraction < 0.5)) {
    Node::fail(n.at("defense_fraction"), "must be in (0, 0.5)");
  }
}

void parse_attack(Node n, AttackSection& a, std::size_t classes) {
  n.read("clean", a.clean);
  n.read_enum("kind", a.kind, parse_trigger_kind);
  n.read("rate", a.rate);
  n.read("target", a.target);
  if (auto t = n.child("trigger")) {
    TriggerParams& p = a.trigger;
    t->read("patch_size", p.patch_size);
    t->read_enum("corner", p.corner, parse_corner);
    std::size_t row = 0, col = 0;
    if (t->find("pixel_row")) {
      t->read("pixel_row", row);
      p.pixel_row = row;
    }
    if (t->find("pixel_col")) {
      t->read("pixel_col", col);
      p.pixel_col = col;
    }
    t->read("blend_alpha", p.blend_alpha);
    t->read("sinusoid_alpha", p.sinusoid_alpha);
    t->read("sinusoid_frequency", p.sinusoid_frequency);
    t->finish();
  }
  n.finish();
  if (!(a.rate > 0.0 && a.rate < 1.0)) Node::fail(n.at("rate"), "must be in (0,1)");
  if (a.target < 0 || static_cast<std::size_t>(a.target) >= classes) {
    Node::fail(n.at("target"), "must name one of the " + std::to_string(classes) + " classes");
  }
}

void parse_train(Node n, TrainSection& t) {
  n.read("arch", t.arch);
  n.read("mlp_hidden", t.mlp_hidden);
  n.read("epochs", t.cfg.epochs);
  n.read("lr", t.cfg.lr);
  n.read("weight_decay", t.cfg.weight_decay);
  n.read("batch_size", t.cfg.batch_size);
  n.read("lr_decay_factor", t.cfg.lr_decay_factor);
  if (const json* v = n.find("lr_decay_epochs")) {
    if (!v->is_array()) Node::fail(n.at("lr_decay_epochs"), "expected an array of epochs");
    t.cfg.lr_decay_epochs.clear();
    for (std::size_t i = 0; i < v->size(); ++i) {
      t.cfg.lr_decay_epochs.push_back(Node::as_count((*v)[i], n.at("lr_decay_epochs") + "[" + std::to_string(i) + "]"));
    }
  }
  n.finish();
  if (t.arch != "tiny_cnn" && t.arch != "mlp") Node::fail(n.at("arch"), "unknown arch \"" + t.arch + "\" (expected tiny_cnn or mlp)");
  if (t.arch == "mlp" && t.mlp_hidden == 0) Node::fail(n.at("mlp_hidden"), "must be >= 1");
  checked(n.path(), [&] { t.cfg.validate(); });
}

void parse_exposure(Node n, ExposureSection& e) {
  if (const json* v = n.find("techniques")) {
    if (!v->is_array() || v->empty()) Node::fail(n.at("techniques"), "expected a non-empty array of techniques");
    e.techniques.clear();
    for (std::size_t i = 0; i < v->size(); ++i) {
      const std::string path = n.at("techniques") + "[" + std::to_string(i) + "]";
      const std::string text = Node::as_string((*v)[i], path);
      checked(path, [&] { e.techniques.push_back(parse_exposure_technique(text)); });
      if (std::count(e.techniques.begin(), e.techniques.end(), e.techniques.back()) > 1) {
        Node::fail(path, "technique listed twice");
      }
    }
  }
  ExposureConfig& c = e.cfg;
  n.read("gamma", c.loss_ceiling);
  n.read("ca_min", c.ca_min);
  n.read("batch_size", c.batch_size);
  n.read("cul_lr", c.cul_lr);
  n.read("cul_max_epochs", c.cul_max_epochs);
  n.read("cft_epochs", c.cft_epochs);
  n.read("cft_lr", c.cft_lr);
  n.read("prune_step", c.prune_step);
  n.read("prune_ca_target", c.prune_ca_target);
  n.read_enum("prune_selection", c.prune_selection, parse_prune_selection);
  n.read("awp_lr", c.awp_lr);
  n.read("awp_init_range", c.awp_init_range);
  n.read("awp_epochs", c.awp_epochs);
  n.read("awp_budget", c.awp_budget);
  n.finish();
  checked(n.path(), [&] { c.validate(); });
}

void parse_detection(Node n, DetectionSection& d) {
  n.read("consistency_threshold", d.consistency_threshold);
  n.read("run_nc", d.run_nc);
  if (auto inv = n.child("inversion")) {
    InversionConfig& c = d.inversion;
    inv->read("lambda", c.lambda);
    inv->read("steps", c.steps);
    inv->read("lr", c.lr);
    inv->read("batch_size", c.batch_size);
    inv->read("init_mask_logit", c.init_mask_logit);
    inv->read("init_pattern_logit", c.init_pattern_logit);
    inv->finish();
    checked(inv->path(), [&] { c.validate(); });
  }
  if (auto s = n.child("strip")) {
    s->read("overlays", d.strip.overlays);
    s->read("overlay_alpha", d.strip.overlay_alpha);
    s->read_enum("polarity", d.strip.polarity, parse_polarity);
    s->read("samples", d.strip_samples);
    s->finish();
    checked(s->path(), [&] { d.strip.validate(); });
    if (d.strip_samples == 0) Node::fail(s->at("samples"), "must be >= 1");
  }
  n.finish();
  if (!(d.consistency_threshold >= 0.0)) Node::fail(n.at("consistency_threshold"), "must be >= 0");
}

void parse_removal(Node n, RemovalConfig& r) {
  n.read("mask_lr", r.mask_lr);
  n.read("mask_epochs", r.mask_epochs);
  n.read("mask_batch_size", r.mask_batch_size);
  if (n.find("dt")) {
    double dt = 0.0;
    n.read("dt", dt);
    r.dt = dt;
  }
  if (const json* v = n.find("dt_sweep")) {
    if (!v->is_array()) Node::fail(n.at("dt_sweep"), "expected an array of thresholds");
    r.dt_sweep.clear();
    for (std::size_t i = 0; i < v->size(); ++i) {
      r.dt_sweep.push_back(Node::as_real((*v)[i], n.at("dt_sweep") + "[" + std::to_string(i) + "]"));
    }
  }
  n.read("ca_drop_budget", r.ca_drop_budget);
  n.read("ft_epochs", r.ft_epochs);
  n.read("ft_lr", r.ft_lr);
  n.read("ft_batch_size", r.ft_batch_size);
  n.finish();
  checked(n.path(), [&] { r.validate(); });
}

}  // namespace

std::string AttackSection::name() const { return clean ? "clean" : std::string(to_string(kind)); }

ExperimentConfig parse_config(std::string_view json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("$: not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  Node root(doc, "$");
  if (auto n = root.child("dataset")) parse_dataset(*n, c.dataset);
  if (auto n = root.child("attack")) parse_attack(*n, c.attack, c.dataset.classes);
  if (auto n = root.child("train")) parse_train(*n, c.train);
  if (auto n = root.child("exposure")) parse_exposure(*n, c.exposure);
  if (auto n = root.child("detection")) parse_detection(*n, c.detection);
  if (auto n = root.child("removal")) parse_removal(*n, c.removal);
  const json* seeds = root.find("seeds");
  if (!seeds) Node::fail("$.seeds", "required");
  if (!seeds->is_array() || seeds->empty()) Node::fail("$.seeds", "expected a non-empty array of seeds");
  for (std::size_t i = 0; i < seeds->size(); ++i) {
    const std::uint64_t s = Node::as_count((*seeds)[i], "$.seeds[" + std::to_string(i) + "]");
    if (std::find(c.seeds.begin(), c.seeds.end(), s) != c.seeds.end()) {
      Node::fail("$.seeds[" + std::to_string(i) + "]", "seed listed twice");
    }
    c.seeds.push_back(s);
  }
  std::string out = c.output_dir.string();
  root.read("output_dir", out);
  if (out.empty()) Node::fail("$.output_dir", "must not be empty");
  c.output_dir = out;
  root.finish();
  // The trigger must fit the image.
  checked("$.attack.trigger", [&] { make_trigger(c.attack.kind, c.attack.trigger, c.dataset.shape, 0); });
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("$: cannot read config file '" + path.string() + "'");
  std::stringstream text;
  text << in.rdbuf();
  return parse_config(text.str());
}

TrainConfig train_config(const ExperimentConfig& c, std::uint64_t seed) {
  TrainConfig t = c.train.cfg;
  t.seed = seed;
  return t;
}

ExposureConfig exposure_config(const ExperimentConfig& c, ExposureTechnique t, std::uint64_t seed) {
  ExposureConfig e = c.exposure.cfg;
  e.technique = t;
  e.seed = seed;
  e.cft_seed = seed;
  return e;
}

EbydDetectionConfig detection_config(const ExperimentConfig& c, ExposureTechnique t, std::uint64_t seed) {
  EbydDetectionConfig d;
  d.exposure = exposure_config(c, t, seed);
  d.inversion = c.detection.inversion;
  d.inversion.seed = seed;
  d.consistency_threshold = c.detection.consistency_threshold;
  return d;
}

StripConfig strip_config(const ExperimentConfig& c, std::uint64_t seed) {
  StripConfig s = c.detection.strip;
  s.seed = seed;
  return s;
}

RemovalConfig removal_config(const ExperimentConfig& c, std::uint64_t seed) {
  RemovalConfig r = c.removal;
  r.seed = seed;
  return r;
}

ArchSpec model_arch(const ExperimentConfig& c) {
  if (c.train.arch == "mlp") return ArchSpec::mlp(c.dataset.shape, c.train.mlp_hidden, c.dataset.classes);
  return ArchSpec::tiny_cnn(c.dataset.shape, c.dataset.classes);
}

}  // namespace ebyd
