#pragma once

// Run configuration for the command-line tool. A JSON file with nested
// sections is flattened to dotted keys ("train.batch_size"), checked against
// a fixed schema, and then layered with key=value overrides (last wins).

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "pf3d/datagen.hpp"
#include "pf3d/metrics.hpp"
#include "pf3d/trainer.hpp"

namespace pf3d {

using nlohmann::json;

class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& what, std::vector<std::string> keys)
      : std::invalid_argument(what), keys(std::move(keys)) {}
  std::vector<std::string> keys;
};

struct ConfigKey {
  std::string key;
  json value;          // default; its JSON type is the key's type
  std::string origin;  // "published" or "local"
  std::string doc;
  int length = -1;     // required array length, -1 for any
};

inline const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> keys = [] {
    const CameraPoseDistribution tgt = target_camera_distribution(), ini = initial_camera_distribution();
    const FixedSampler fs;
    auto arr = [](const auto& a) { return json(std::vector<double>(a.begin(), a.end())); };
    const TrainConfig tc;
    const ModelConfig mc;
    const DatasetConfig dc;
    return std::vector<ConfigKey>{
        {"dataset.dir", "data", "local", "dataset directory (gen-data writes it, train and eval read it)"},
        {"dataset.families", json::array({"ellipsoid"}), "local", "shape families: ellipsoid, box, superellipsoid"},
        {"dataset.axis_x", json::array({dc.axes[0].lo, dc.axes[0].hi}), "local", "semi-axis range along x", 2},
        {"dataset.axis_y", json::array({dc.axes[1].lo, dc.axes[1].hi}), "local", "semi-axis range along y", 2},
        {"dataset.axis_z", json::array({dc.axes[2].lo, dc.axes[2].hi}), "local", "semi-axis range along z", 2},
        {"dataset.exponent", json::array({dc.exponent.lo, dc.exponent.hi}), "local", "superellipsoid exponent range", 2},
        {"dataset.shapes", 20, "local", "number of shape instances"},
        {"dataset.views_per_shape", 24, "published", "rendered views per shape"},
        {"dataset.image_size", 32, "local", "image side in pixels"},
        {"dataset.mesh_resolution", dc.mesh_resolution, "local", "grid resolution used to mesh each analytic shape"},
        {"dataset.tau", dc.tau, "local", "rasterizer softness for dataset renders"},
        {"dataset.c0", dc.c0, "published", "standard contraction the shapes are normalized to"},
        {"dataset.camera_mean", arr(tgt.mean), "published", "camera mean (theta, phi, k, dx, dy, dz)", 6},
        {"dataset.camera_std", arr(tgt.stddev), "published", "camera standard deviation, same order", 6},
        {"dataset.seed", std::uint64_t{0}, "local", "dataset seed"},
        {"dataset.augment", false, "local", "random zoom and shift of training images"},
        {"dataset.augment_scale", json::array({1.0, 1.25}), "local", "zoom range", 2},
        {"dataset.augment_shift", 0.1, "local", "maximum shift as a fraction of the image side"},
        {"camera.init_mean", arr(ini.mean), "published", "initial camera mean (theta, phi, k, dx, dy, dz)", 6},
        {"camera.init_std", arr(ini.stddev), "published", "initial camera standard deviation", 6},
        {"camera.fixed_theta", json::array({fs.theta_lo, fs.theta_hi}), "published", "phase-1 rotation range", 2},
        {"camera.fixed_phi", json::array({fs.phi_lo, fs.phi_hi}), "published", "phase-1 elevation range", 2},
        {"camera.fixed_k", fs.k, "published", "phase-1 object scale"},
        {"train.total_iterations", tc.total_iterations, "local", "training iterations"},
        {"train.phase_boundaries", json::array({0.2, 0.3, 0.4}), "published", "fractions where phases 2, 3, 4 start", 3},
        {"train.batch_size", tc.batch_size, "published", "images per step"},
        {"train.learning_rate", tc.learning_rate, "published", "Adam learning rate"},
        {"train.camera_learning_rate", tc.camera_learning_rate, "local", "Adam learning rate of the camera head"},
        {"train.beta1", tc.beta1, "published", "Adam beta1"},
        {"train.beta2", tc.beta2, "local", "Adam beta2"},
        {"train.r1_gamma", tc.r1_gamma, "published", "R1 penalty weight"},
        {"train.r1_interval", tc.r1_interval, "published", "lazy R1 interval"},
        {"train.mu1", tc.weights.mu1, "published", "SDF regularizer weight"},
        {"train.mu2", tc.weights.mu2, "published", "align loss weight"},
        {"train.c0", tc.c0, "published", "standard contraction"},
        {"train.grid_resolution", tc.grid_resolution, "local", "tetrahedral grid resolution"},
        {"train.grid_half_width", tc.grid_half_width, "local", "tetrahedral grid half-width"},
        {"train.tau", tc.tau, "local", "rasterizer softness during training"},
        {"train.snapshot_probes", tc.snapshot_probes, "local", "latents used to freeze the camera distribution"},
        {"train.seed", std::uint64_t{0}, "local", "training seed"},
        {"train.checkpoint_every", 500, "local", "checkpoint interval in iterations (phase boundaries always)"},
        {"model.z_dim", mc.z_dim, "local", "latent size"},
        {"model.map_hidden", mc.map_hidden, "local", "mapping network width"},
        {"model.w_dim", mc.w_dim, "local", "style vector size"},
        {"model.field_hidden", mc.field.hidden, "local", "field network width"},
        {"model.field_layers", mc.field.layers, "local", "field network hidden layers"},
        {"model.pe_bands", mc.field.pe_bands, "local", "positional encoding bands"},
        {"model.sphere_fraction", mc.field.sphere_fraction, "local", "initial sphere radius over the grid half-width"},
        {"model.disc_widths", json(mc.disc_widths), "local", "discriminator channel widths"},
        {"eval.points", 2048, "published", "points sampled per mesh"},
        {"eval.seed", std::uint64_t{0}, "local", "point sampling seed"},
        {"eval.mean_chamfer", false, "local", "average chamfer terms instead of summing"},
        {"eval.reference_split", "test", "local", "reference shapes: train, val or test"},
        {"eval.generated_per_reference", 5, "published", "generated shapes per reference shape"},
        {"eval.write_matrix", false, "local", "also write the distance matrix as CSV"},
        {"output.dir", "run", "local", "output directory"},
        {"camera_report.probes", 1024, "local", "sampled cameras in the report"},
        {"export.count", 8, "local", "meshes written by export-mesh"},
        {"export.seed", std::uint64_t{0}, "local", "latent seed for export-mesh"},
    };
  }();
  return keys;
}

inline const ConfigKey* find_config_key(const std::string& key) {
  for (const ConfigKey& k : config_schema())
    if (k.key == key) return &k;
  return nullptr;
}

namespace detail {

inline void flatten_json(const json& j, const std::string& prefix, std::map<std::string, json>& out) {
  for (const auto& [k, v] : j.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object()) flatten_json(v, key, out);
    else out[key] = v;
  }
}

inline bool integral_number(const json& v) {
  return v.is_number_integer() || (v.is_number_float() && std::isfinite(v.get<double>()) &&
                                   v.get<double>() == std::floor(v.get<double>()));
}

// Empty string when `v` fits the type of `def`; otherwise a description.
inline std::string type_mismatch(const json& def, const json& v, int length) {
  if (def.is_boolean()) return v.is_boolean() ? "" : "expected a boolean";
  if (def.is_string()) return v.is_string() ? "" : "expected a string";
  if (def.is_number_unsigned()) {
    if (!integral_number(v) || v.get<double>() < 0.0) return "expected a non-negative integer";
    return "";
  }
  if (def.is_number_integer()) return integral_number(v) ? "" : "expected an integer";
  if (def.is_number()) return v.is_number() ? "" : "expected a number";
  if (def.is_array()) {
    if (!v.is_array()) return "expected an array";
    if (length >= 0 && static_cast<int>(v.size()) != length)
      return "expected " + std::to_string(length) + " elements";
    if (!def.empty())
      for (const json& e : v)
        if (!type_mismatch(def.front(), e, -1).empty()) return "array element: " + type_mismatch(def.front(), e, -1);
    return "";
  }
  return "unsupported type";
}

}  // namespace detail

class RunConfig {
 public:
  RunConfig() {
    for (const ConfigKey& k : config_schema()) values_[k.key] = k.value;
  }

  // Flattened nested JSON; every problem is collected before throwing.
  void merge(const json& nested) {
    if (!nested.is_object()) throw ConfigError("config: top level must be an object", {});
    std::map<std::string, json> flat;
    detail::flatten_json(nested, "", flat);
    std::vector<std::string> bad;
    std::string msg;
    for (const auto& [k, v] : flat) {
      const ConfigKey* spec = find_config_key(k);
      if (!spec) {
        bad.push_back(k);
        msg += " " + k + ": unknown key;";
        continue;
      }
      const std::string why = detail::type_mismatch(spec->value, v, spec->length);
      if (!why.empty()) {
        bad.push_back(k);
        msg += " " + k + ": " + why + ";";
      }
    }
    if (!bad.empty()) throw ConfigError("config:" + msg, bad);
    for (const auto& [k, v] : flat) values_[k] = v;
  }

  void merge_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    source_text_ = ss.str();
    json j;
    try {
      j = json::parse(source_text_);
    } catch (const json::parse_error& e) {
      throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what(), {});
    }
    merge(j);
  }

  // "key=value"; the value is parsed as JSON and falls back to a plain string.
  void apply_override(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("config: override must be key=value, got '" + kv + "'", {kv});
    const std::string key = kv.substr(0, eq), text = kv.substr(eq + 1);
    json v = json::parse(text, nullptr, false);
    if (v.is_discarded()) v = text;
    const ConfigKey* spec = find_config_key(key);
    if (!spec) throw ConfigError("config: " + key + ": unknown key", {key});
    if (spec->value.is_string() && !v.is_string()) v = text;
    const std::string why = detail::type_mismatch(spec->value, v, spec->length);
    if (!why.empty()) throw ConfigError("config: " + key + ": " + why, {key});
    values_[key] = v;
    overrides_.push_back(key + "=" + v.dump());
  }

  // Applies every override it can and reports all offending keys together.
  void apply_overrides(const std::vector<std::string>& kvs) {
    std::vector<std::string> bad;
    std::string msg;
    for (const std::string& kv : kvs) {
      try {
        apply_override(kv);
      } catch (const ConfigError& e) {
        bad.insert(bad.end(), e.keys.begin(), e.keys.end());
        msg += std::string(msg.empty() ? "" : " ") + e.what();
      }
    }
    if (!bad.empty()) throw ConfigError(msg, bad);
  }

  const json& at(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("config: " + key + ": unknown key", {key});
    return it->second;
  }
  template <class T>
  T get(const std::string& key) const {
    return at(key).get<T>();
  }
  void set(const std::string& key, json v) {
    if (!find_config_key(key)) throw ConfigError("config: " + key + ": unknown key", {key});
    values_[key] = std::move(v);
  }

  const std::vector<std::string>& overrides() const { return overrides_; }
  const std::string& source_text() const { return source_text_; }

  // Resolved values re-nested by section.
  json nested() const {
    json out = json::object();
    for (const auto& [k, v] : values_) {
      const auto dot = k.find('.');
      out[k.substr(0, dot)][k.substr(dot + 1)] = v;
    }
    return out;
  }

  // Verbatim source, the overrides in order, and the resolved values.
  json echo() const {
    json e;
    e["source"] = source_text_;
    e["overrides"] = overrides_;
    e["resolved"] = nested();
    return e;
  }

  std::filesystem::path output_dir() const { return get<std::string>("output.dir"); }
  std::filesystem::path dataset_dir() const { return get<std::string>("dataset.dir"); }

  DatasetConfig dataset() const {
    DatasetConfig c;
    c.families.clear();
    for (const auto& f : at("dataset.families")) c.families.push_back(parse_family(f.get<std::string>()));
    const char* axes[3] = {"dataset.axis_x", "dataset.axis_y", "dataset.axis_z"};
    for (int i = 0; i < 3; ++i) c.axes[i] = range(axes[i]);
    c.exponent = range("dataset.exponent");
    c.shapes = get<int>("dataset.shapes");
    c.views_per_shape = get<int>("dataset.views_per_shape");
    c.image_size = get<int>("dataset.image_size");
    c.mesh_resolution = get<int>("dataset.mesh_resolution");
    c.tau = get<double>("dataset.tau");
    c.c0 = get<double>("dataset.c0");
    c.cameras.mean = six("dataset.camera_mean");
    c.cameras.stddev = six("dataset.camera_std");
    c.seed = get<std::uint64_t>("dataset.seed");
    return c;
  }

  AugmentOptions augment() const {
    AugmentOptions a;
    a.enabled = get<bool>("dataset.augment");
    const AxisRange s = range("dataset.augment_scale");
    a.scale_lo = s.lo;
    a.scale_hi = s.hi;
    a.max_shift = get<double>("dataset.augment_shift");
    return a;
  }

  // `image_size` comes from the dataset the model trains on.
  TrainConfig train(std::size_t image_size) const {
    TrainConfig c;
    c.total_iterations = get<std::int64_t>("train.total_iterations");
    const auto pb = at("train.phase_boundaries");
    for (int i = 0; i < 3; ++i) c.phase_boundaries[i] = pb[i].get<double>();
    c.batch_size = get<std::size_t>("train.batch_size");
    c.learning_rate = get<double>("train.learning_rate");
    c.camera_learning_rate = get<double>("train.camera_learning_rate");
    c.beta1 = get<double>("train.beta1");
    c.beta2 = get<double>("train.beta2");
    c.r1_gamma = get<double>("train.r1_gamma");
    c.r1_interval = get<std::int64_t>("train.r1_interval");
    c.weights.mu1 = get<double>("train.mu1");
    c.weights.mu2 = get<double>("train.mu2");
    c.c0 = get<double>("train.c0");
    c.grid_resolution = get<int>("train.grid_resolution");
    c.grid_half_width = get<double>("train.grid_half_width");
    c.tau = get<double>("train.tau");
    c.snapshot_probes = get<std::size_t>("train.snapshot_probes");
    c.seed = get<std::uint64_t>("train.seed");
    c.camera_init.mean = six("camera.init_mean");
    c.camera_init.stddev = six("camera.init_std");
    const AxisRange th = range("camera.fixed_theta"), ph = range("camera.fixed_phi");
    c.fixed_sampler.theta_lo = th.lo;
    c.fixed_sampler.theta_hi = th.hi;
    c.fixed_sampler.phi_lo = ph.lo;
    c.fixed_sampler.phi_hi = ph.hi;
    c.fixed_sampler.k = get<double>("camera.fixed_k");
    c.model.z_dim = get<std::size_t>("model.z_dim");
    c.model.map_hidden = get<std::size_t>("model.map_hidden");
    c.model.w_dim = get<std::size_t>("model.w_dim");
    c.model.field.w_dim = c.model.w_dim;
    c.model.field.hidden = get<std::size_t>("model.field_hidden");
    c.model.field.layers = get<int>("model.field_layers");
    c.model.field.pe_bands = get<int>("model.pe_bands");
    c.model.field.sphere_fraction = get<double>("model.sphere_fraction");
    c.model.disc_widths = at("model.disc_widths").get<std::vector<std::size_t>>();
    c.model.image_size = image_size;
    c.validate();
    return c;
  }

  EvalConfig eval() const {
    EvalConfig e;
    e.points = get<std::size_t>("eval.points");
    e.seed = get<std::uint64_t>("eval.seed");
    e.chamfer.mean = get<bool>("eval.mean_chamfer");
    e.keep_matrix = get<bool>("eval.write_matrix");
    if (e.points < 1) throw ConfigError("config: eval.points must be >= 1", {"eval.points"});
    return e;
  }

  Split reference_split() const {
    const std::string s = get<std::string>("eval.reference_split");
    if (s == "train") return Split::kTrain;
    if (s == "val") return Split::kVal;
    if (s == "test") return Split::kTest;
    throw ConfigError("config: eval.reference_split must be train, val or test", {"eval.reference_split"});
  }

 private:
  AxisRange range(const std::string& key) const {
    const json& a = at(key);
    return {a[0].get<double>(), a[1].get<double>()};
  }
  std::array<double, 6> six(const std::string& key) const {
    std::array<double, 6> out{};
    const json& a = at(key);
    for (int i = 0; i < 6; ++i) out[i] = a[i].get<double>();
    return out;
  }

  std::map<std::string, json> values_;
  std::vector<std::string> overrides_;
  std::string source_text_;
};

// One line per key: name, default, origin, description.
inline std::string config_help() {
  std::ostringstream os;
  os << "Configuration keys (JSON sections or key=value overrides; origin \"published\" marks values\n"
        "taken from the published method, \"local\" marks choices made for this implementation):\n";
  for (const ConfigKey& k : config_schema()) {
    os << "  " << k.key;
    for (std::size_t i = k.key.size(); i < 30; ++i) os << ' ';
    os << " default " << k.value.dump() << "  [" << k.origin << "]  " << k.doc << "\n";
  }
  return os.str();
}

}  // namespace pf3d
