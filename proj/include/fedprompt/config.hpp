#ifndef FEDPROMPT_CONFIG_HPP
#define FEDPROMPT_CONFIG_HPP

#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>

#include <json.hpp>

#include "fedprompt/dataset.hpp"
#include "fedprompt/errors.hpp"
#include "fedprompt/objective.hpp"

// Experiment configuration: a single JSON object with nested sections. Any
// key outside the documented schema is rejected, every range violation
// names the offending field, and a resolved config round-trips through
// to_json/parse unchanged.

namespace fedprompt {

struct PromptShape {
  int h_shared = 4;
  int h_private = 4;
  int embed_dim = 32;
};

struct EncoderShape {
  int feature_dim = 32;
  int patch_count = 16;
};

struct DataParams {
  int classes = 8;
  int per_class = 40;
  double train_fraction = 0.5;
  double noise_sigma = 0.05;
  // Common translation applied to every class embedding before
  // renormalization. Nonzero values misalign text from image prototypes by
  // a direction the learnable prompt shift can cancel, which is what makes
  // prompt training on the synthetic task meaningful.
  double text_offset = 0.75;
};

struct AblationFlags {
  bool dual_prompt = true;
  bool dpac = true;
  bool cmfac = true;
};

struct ExperimentConfig {
  std::string preset = "synthetic";
  int clients = 5;
  int rounds = 30;
  int local_epochs = 1;
  int batch_size = 32;
  double lr = 0.001;
  double temperature = 0.01;
  double dpac_scale = 10.0;
  double dpac_weight = 1.0;
  std::uint64_t master_seed = 42;
  std::string output_dir = "runs/run";
  bool aggregate_literal_mean = false;
  PromptShape prompt;
  EncoderShape encoder;
  OtParams ot;
  DataParams data;
  AblationFlags ablation;

  // Non-synthetic presets pin the dataset shape; synthetic keeps the
  // configured one. Idempotent.
  void resolve_preset() {
    if (!is_known_preset(preset)) {
      throw ConfigError("preset: unknown preset \"" + preset + "\"");
    }
    if (preset != "synthetic") {
      DatasetShape shape = preset_shape(preset);
      data.classes = shape.n_classes;
      data.per_class = shape.images_per_class;
      data.train_fraction = shape.train_fraction;
    }
  }

  void validate() const {
    if (!is_known_preset(preset)) {
      throw ConfigError("preset: unknown preset \"" + preset + "\"");
    }
    if (clients < 1) throw ConfigError("clients must be >= 1");
    if (rounds < 0) throw ConfigError("rounds must be >= 0");
    if (local_epochs < 0) throw ConfigError("local_epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) {
      throw ConfigError("lr must be a finite positive number");
    }
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
      throw ConfigError("temperature must be a finite positive number");
    }
    if (!(dpac_scale > 0.0) || !std::isfinite(dpac_scale)) {
      throw ConfigError("dpac_scale must be a finite positive number");
    }
    if (dpac_weight < 0.0 || !std::isfinite(dpac_weight)) {
      throw ConfigError("dpac_weight must be finite and >= 0");
    }
    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
    if (prompt.h_shared < 2 || prompt.h_shared % 2 != 0) {
      throw ConfigError("prompt.h_shared must be even and >= 2");
    }
    if (prompt.h_private < 2 || prompt.h_private % 2 != 0) {
      throw ConfigError("prompt.h_private must be even and >= 2");
    }
    if (prompt.embed_dim < 1) throw ConfigError("prompt.embed_dim must be >= 1");
    if (encoder.feature_dim < 1) {
      throw ConfigError("encoder.feature_dim must be >= 1");
    }
    if (encoder.patch_count < 1) {
      throw ConfigError("encoder.patch_count must be >= 1");
    }
    try {
      ot.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(e.what()));
    }
    if (data.classes < 2) throw ConfigError("data.classes must be >= 2");
    if (data.per_class < 1) throw ConfigError("data.per_class must be >= 1");
    if (!(data.train_fraction > 0.0) || !(data.train_fraction < 1.0)) {
      throw ConfigError("data.train_fraction must lie strictly in (0, 1)");
    }
    if (data.noise_sigma < 0.0 || !std::isfinite(data.noise_sigma)) {
      throw ConfigError("data.noise_sigma must be finite and >= 0");
    }
    if (data.text_offset < 0.0 || !std::isfinite(data.text_offset)) {
      throw ConfigError("data.text_offset must be finite and >= 0");
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["preset"] = preset;
    j["clients"] = clients;
    j["rounds"] = rounds;
    j["local_epochs"] = local_epochs;
    j["batch_size"] = batch_size;
    j["lr"] = lr;
    j["temperature"] = temperature;
    j["dpac_scale"] = dpac_scale;
    j["dpac_weight"] = dpac_weight;
    j["master_seed"] = master_seed;
    j["output_dir"] = output_dir;
    j["aggregate_literal_mean"] = aggregate_literal_mean;
    j["prompt"] = {{"h_shared", prompt.h_shared},
                   {"h_private", prompt.h_private},
                   {"embed_dim", prompt.embed_dim}};
    j["encoder"] = {{"feature_dim", encoder.feature_dim},
                    {"patch_count", encoder.patch_count}};
    j["ot"] = {{"lambda", ot.lambda},
               {"max_iters", ot.max_iters},
               {"tol", ot.tol},
               {"alpha_total", ot.alpha_total},
               {"beta", {ot.beta(0), ot.beta(1)}}};
    j["data"] = {{"classes", data.classes},
                 {"per_class", data.per_class},
                 {"train_fraction", data.train_fraction},
                 {"noise_sigma", data.noise_sigma},
                 {"text_offset", data.text_offset}};
    j["ablation"] = {{"dual_prompt", ablation.dual_prompt},
                     {"dpac", ablation.dpac},
                     {"cmfac", ablation.cmfac}};
    return j;
  }
};

namespace detail {

inline void require_known_keys(const nlohmann::json& j,
                               const std::string& section,
                               std::initializer_list<const char*> known) {
  for (const auto& item : j.items()) {
    bool found = false;
    for (const char* k : known) {
      if (item.key() == k) {
        found = true;
        break;
      }
    }
    if (!found) {
      throw ConfigError("unknown key \"" + item.key() + "\" in " + section);
    }
  }
}

inline std::string field_name(const std::string& section, const char* key) {
  return section == "config" ? std::string(key) : section + "." + key;
}

inline int get_int(const nlohmann::json& j, const std::string& section,
                   const char* key, int def) {
  if (!j.contains(key)) return def;
  const auto& v = j.at(key);
  if (!v.is_number_integer()) {
    throw ConfigError("field " + field_name(section, key) +
                      " must be an integer");
  }
  return v.get<int>();
}

inline std::uint64_t get_u64(const nlohmann::json& j,
                             const std::string& section, const char* key,
                             std::uint64_t def) {
  if (!j.contains(key)) return def;
  const auto& v = j.at(key);
  if (!v.is_number_integer() ||
      (v.is_number_integer() && !v.is_number_unsigned() &&
       v.get<std::int64_t>() < 0)) {
    throw ConfigError("field " + field_name(section, key) +
                      " must be a nonnegative integer");
  }
  return v.get<std::uint64_t>();
}

inline double get_double(const nlohmann::json& j, const std::string& section,
                         const char* key, double def) {
  if (!j.contains(key)) return def;
  const auto& v = j.at(key);
  if (!v.is_number()) {
    throw ConfigError("field " + field_name(section, key) +
                      " must be a number");
  }
  return v.get<double>();
}

inline bool get_bool(const nlohmann::json& j, const std::string& section,
                     const char* key, bool def) {
  if (!j.contains(key)) return def;
  const auto& v = j.at(key);
  if (!v.is_boolean()) {
    throw ConfigError("field " + field_name(section, key) +
                      " must be a boolean");
  }
  return v.get<bool>();
}

inline std::string get_string(const nlohmann::json& j,
                              const std::string& section, const char* key,
                              const std::string& def) {
  if (!j.contains(key)) return def;
  const auto& v = j.at(key);
  if (!v.is_string()) {
    throw ConfigError("field " + field_name(section, key) +
                      " must be a string");
  }
  return v.get<std::string>();
}

}  // namespace detail

// Builds a config from parsed JSON: defaults fill absent fields, unknown
// keys anywhere are errors, the preset is resolved and the result
// validated.
inline ExperimentConfig config_from_json(const nlohmann::json& root) {
  using namespace detail;
  if (!root.is_object()) {
    throw ConfigError("config root must be a JSON object");
  }
  require_known_keys(root, "config",
                     {"preset", "clients", "rounds", "local_epochs",
                      "batch_size", "lr", "temperature", "dpac_scale",
                      "dpac_weight", "master_seed", "output_dir",
                      "aggregate_literal_mean", "prompt", "encoder", "ot",
                      "data", "ablation"});
  ExperimentConfig cfg;
  cfg.preset = get_string(root, "config", "preset", cfg.preset);
  cfg.clients = get_int(root, "config", "clients", cfg.clients);
  cfg.rounds = get_int(root, "config", "rounds", cfg.rounds);
  cfg.local_epochs = get_int(root, "config", "local_epochs", cfg.local_epochs);
  cfg.batch_size = get_int(root, "config", "batch_size", cfg.batch_size);
  cfg.lr = get_double(root, "config", "lr", cfg.lr);
  cfg.temperature = get_double(root, "config", "temperature", cfg.temperature);
  cfg.dpac_scale = get_double(root, "config", "dpac_scale", cfg.dpac_scale);
  cfg.dpac_weight = get_double(root, "config", "dpac_weight", cfg.dpac_weight);
  cfg.master_seed = get_u64(root, "config", "master_seed", cfg.master_seed);
  cfg.output_dir = get_string(root, "config", "output_dir", cfg.output_dir);
  cfg.aggregate_literal_mean = get_bool(root, "config",
                                        "aggregate_literal_mean",
                                        cfg.aggregate_literal_mean);
  if (root.contains("prompt")) {
    const auto& j = root.at("prompt");
    require_known_keys(j, "prompt", {"h_shared", "h_private", "embed_dim"});
    cfg.prompt.h_shared = get_int(j, "prompt", "h_shared", cfg.prompt.h_shared);
    cfg.prompt.h_private =
        get_int(j, "prompt", "h_private", cfg.prompt.h_private);
    cfg.prompt.embed_dim =
        get_int(j, "prompt", "embed_dim", cfg.prompt.embed_dim);
  }
  if (root.contains("encoder")) {
    const auto& j = root.at("encoder");
    require_known_keys(j, "encoder", {"feature_dim", "patch_count"});
    cfg.encoder.feature_dim =
        get_int(j, "encoder", "feature_dim", cfg.encoder.feature_dim);
    cfg.encoder.patch_count =
        get_int(j, "encoder", "patch_count", cfg.encoder.patch_count);
  }
  if (root.contains("ot")) {
    const auto& j = root.at("ot");
    require_known_keys(j, "ot",
                       {"lambda", "max_iters", "tol", "alpha_total", "beta"});
    cfg.ot.lambda = get_double(j, "ot", "lambda", cfg.ot.lambda);
    cfg.ot.max_iters = get_int(j, "ot", "max_iters", cfg.ot.max_iters);
    cfg.ot.tol = get_double(j, "ot", "tol", cfg.ot.tol);
    cfg.ot.alpha_total = get_double(j, "ot", "alpha_total", cfg.ot.alpha_total);
    if (j.contains("beta")) {
      const auto& b = j.at("beta");
      if (!b.is_array() || b.size() != 2 || !b[0].is_number() ||
          !b[1].is_number()) {
        throw ConfigError("field ot.beta must be an array of two numbers");
      }
      cfg.ot.beta << b[0].get<double>(), b[1].get<double>();
    }
  }
  if (root.contains("data")) {
    const auto& j = root.at("data");
    require_known_keys(j, "data",
                       {"classes", "per_class", "train_fraction",
                        "noise_sigma", "text_offset"});
    cfg.data.classes = get_int(j, "data", "classes", cfg.data.classes);
    cfg.data.per_class = get_int(j, "data", "per_class", cfg.data.per_class);
    cfg.data.train_fraction =
        get_double(j, "data", "train_fraction", cfg.data.train_fraction);
    cfg.data.noise_sigma =
        get_double(j, "data", "noise_sigma", cfg.data.noise_sigma);
    cfg.data.text_offset =
        get_double(j, "data", "text_offset", cfg.data.text_offset);
  }
  if (root.contains("ablation")) {
    const auto& j = root.at("ablation");
    require_known_keys(j, "ablation", {"dual_prompt", "dpac", "cmfac"});
    cfg.ablation.dual_prompt =
        get_bool(j, "ablation", "dual_prompt", cfg.ablation.dual_prompt);
    cfg.ablation.dpac = get_bool(j, "ablation", "dpac", cfg.ablation.dpac);
    cfg.ablation.cmfac = get_bool(j, "ablation", "cmfac", cfg.ablation.cmfac);
  }
  cfg.resolve_preset();
  cfg.validate();
  return cfg;
}

// Parses JSON text; syntax errors surface as ConfigError with the line and
// column computed from the parser's byte offset.
inline ExperimentConfig parse_config(const std::string& text,
                                     const std::string& source_name) {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    std::size_t line = 1, column = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        column = 1;
      } else {
        ++column;
      }
    }
    std::ostringstream msg;
    msg << source_name << ": JSON parse error at line " << line << " column "
        << column << ": " << e.what();
    throw ConfigError(msg.str());
  }
  return config_from_json(root);
}

inline ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_config(buf.str(), path);
}

// FNV-1a over the canonical serialized config. Stable across runs because
// the serializer emits keys in sorted order with shortest-round-trip
// numbers.
inline std::string config_hash(const ExperimentConfig& cfg) {
  std::string dump = cfg.to_json().dump();
  std::uint64_t h = hash_label(dump);
  std::ostringstream os;
  os << "fnv1a64:" << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace fedprompt

#endif  // FEDPROMPT_CONFIG_HPP
