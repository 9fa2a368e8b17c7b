#pragma once

// Workflow configuration: a sectioned key-value file, command-line overrides,
// and validation. Every randomized step derives its seed from `run.seed`
// unless a stage seed is given explicitly.

#include "sclqa/dataset.hpp"
#include "sclqa/discovery.hpp"
#include "sclqa/scl_train.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace sclqa {

namespace fs = std::filesystem;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Method { Scl, Ft };

inline const char* to_string(Method m) { return m == Method::Scl ? "scl" : "ft"; }

inline std::vector<Method> parse_methods(const std::string& s) {
  if (s == "scl") return {Method::Scl};
  if (s == "ft") return {Method::Ft};
  if (s == "both") return {Method::Scl, Method::Ft};
  throw ConfigError("method must be scl, ft or both (got '" + s + "')");
}

inline std::string methods_string(const std::vector<Method>& ms) {
  return ms.size() == 2 ? "both" : to_string(ms.front());
}

/// Where the labeled corpus comes from: a record file, an EMB1 matrix with an
/// optional LBL1 label file, or the built-in Gaussian generator.
struct DataSource {
  std::string input;
  std::string embeddings;
  std::string labels;
  bool synthetic = false;
  int classes = 16;
  int per_class = 200;
  int dim = 32;
  double separation = 6.0;
};

struct WorkflowConfig {
  DataSource data;
  std::string out;
  std::optional<std::uint64_t> seed;
  double ind_fraction = 0.75;
  std::optional<std::uint64_t> segment_seed;
  std::optional<std::uint64_t> split_seed;
  SplitFractions split;
  SclConfig train;
  double target_tpr = 0.9;
  int k = 0;  // 0: one cluster per unknown intent
  KMeansOptions kmeans;
  bool gold_replay = false;
  std::vector<Method> methods{Method::Scl};
  bool emit_csv = true;
  bool emit_txt = true;

  std::uint64_t master_seed() const {
    if (!seed) throw ConfigError("run.seed is required");
    return *seed;
  }
  std::uint64_t data_seed() const { return master_seed(); }
  std::uint64_t segmentation_seed() const { return segment_seed.value_or(derive_seed(master_seed(), 1)); }
  std::uint64_t splitting_seed() const { return split_seed.value_or(derive_seed(master_seed(), 2)); }
  std::uint64_t init_seed() const { return derive_seed(master_seed(), 3); }
  std::uint64_t cluster_seed() const { return derive_seed(master_seed(), 4); }

  /// Training settings with the run seed and detection target filled in.
  SclConfig train_config() const {
    SclConfig c = train;
    c.seed = master_seed();
    c.target_tpr = target_tpr;
    return c;
  }

  /// Checks ranges and, when `need_data`, that the data source resolves.
  void validate(bool need_data) const {
    master_seed();
    if (out.empty()) throw ConfigError("run.out is required");
    auto check = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError(what);
    };
    check(ind_fraction > 0.0 && ind_fraction < 1.0, "segment.ind_fraction must be in (0,1)");
    check(split.test2 > 0.0 && split.test2 < 1.0, "split.test2 must be in (0,1)");
    check(split.val > 0.0 && split.test1 > 0.0 && split.val + split.test1 + split.test2 < 1.0,
          "split fractions must be positive and leave a training share");
    check(target_tpr > 0.0 && target_tpr <= 1.0, "detect.target_tpr must be in (0,1]");
    check(k >= 0, "discover.k must be non-negative");
    check(kmeans.restarts >= 1 && kmeans.max_iter >= 1, "discover.restarts and discover.max_iter must be positive");
    check(!methods.empty(), "run.method is empty");
    try {
      train_config().validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("train: ") + e.what());
    }
    if (!need_data) return;
    const int sources = int(!data.input.empty()) + int(!data.embeddings.empty()) + int(data.synthetic);
    if (sources != 1) {
      throw ConfigError("exactly one of data.input, data.embeddings or data.synthetic must be set");
    }
    if (data.synthetic) {
      check(data.classes >= 2 && data.per_class >= 2 && data.dim >= 1 && data.separation > 0.0,
            "data.synthetic_* settings must be positive (at least 2 classes and 2 samples per class)");
      return;
    }
    if (!data.input.empty() && !fs::is_regular_file(data.input)) {
      throw ConfigError("data.input not found: " + data.input);
    }
    if (!data.embeddings.empty()) {
      if (!fs::is_regular_file(data.embeddings)) throw ConfigError("data.embeddings not found: " + data.embeddings);
      if (data.labels.empty()) throw ConfigError("data.labels is required with data.embeddings");
      if (!fs::is_regular_file(data.labels)) throw ConfigError("data.labels not found: " + data.labels);
    }
  }
};

// ---------------------------------------------------------------------------
// Property-tree form. Keys are "section.key"; values are strings.

using ConfigTree = boost::property_tree::ptree;

namespace detail {

inline const std::map<std::string, std::set<std::string>>& config_keys() {
  static const std::map<std::string, std::set<std::string>> keys = {
      {"run", {"seed", "out", "method", "formats"}},
      {"data",
       {"input", "embeddings", "labels", "synthetic", "synthetic_classes", "synthetic_per_class", "synthetic_dim",
        "synthetic_separation"}},
      {"segment", {"ind_fraction", "seed"}},
      {"split", {"val", "test1", "test2", "seed"}},
      {"train",
       {"temperature", "n_views", "dropout", "learning_rate", "batch_size", "max_epochs", "inclusive_denominator"}},
      {"detect", {"target_tpr"}},
      {"discover", {"k", "restarts", "max_iter"}},
      {"continual", {"gold_replay"}},
  };
  return keys;
}

template <typename T>
T parse_value(const std::string& key, const std::string& text) {
  std::istringstream is(text);
  T v{};
  if constexpr (std::is_same_v<T, bool>) {
    if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
    if (text == "false" || text == "0" || text == "no" || text == "off") return false;
    throw ConfigError(key + ": expected a boolean, got '" + text + "'");
  } else {
    is >> v;
    if (!is || !(is >> std::ws).eof()) throw ConfigError(key + ": cannot parse '" + text + "'");
    return v;
  }
}

inline std::string resolve_path(const std::string& p, const fs::path& base) {
  if (p.empty() || fs::path(p).is_absolute() || base.empty()) return p;
  return (base / p).lexically_normal().string();
}

}  // namespace detail

/// Builds a config from a tree. Relative paths resolve against `base_dir`.
inline WorkflowConfig config_from_tree(const ConfigTree& tree, const fs::path& base_dir = {}) {
  const auto& allowed = detail::config_keys();
  for (const auto& [section, body] : tree) {
    auto it = allowed.find(section);
    if (it == allowed.end()) throw ConfigError("unknown section [" + section + "]");
    for (const auto& [key, value] : body) {
      if (!it->second.count(key)) throw ConfigError("unknown key " + section + "." + key);
    }
  }
  WorkflowConfig c;
  auto get = [&](const std::string& path) -> std::optional<std::string> {
    if (auto v = tree.get_optional<std::string>(path)) return *v;
    return std::nullopt;
  };
  auto set = [&]<typename T>(const std::string& path, T& field) {
    if (auto v = get(path)) field = detail::parse_value<T>(path, *v);
  };
  auto set_opt = [&](const std::string& path, std::optional<std::uint64_t>& field) {
    if (auto v = get(path)) field = detail::parse_value<std::uint64_t>(path, *v);
  };
  set_opt("run.seed", c.seed);
  if (auto v = get("run.out")) c.out = detail::resolve_path(*v, base_dir);
  if (auto v = get("run.method")) c.methods = parse_methods(*v);
  if (auto v = get("run.formats")) {
    c.emit_csv = c.emit_txt = false;
    std::istringstream is(*v);
    std::string f;
    while (std::getline(is, f, ',')) {
      f.erase(0, f.find_first_not_of(' '));
      f.erase(f.find_last_not_of(' ') + 1);
      if (f == "csv") {
        c.emit_csv = true;
      } else if (f == "txt") {
        c.emit_txt = true;
      } else {
        throw ConfigError("run.formats: unknown format '" + f + "'");
      }
    }
  }
  if (auto v = get("data.input")) c.data.input = detail::resolve_path(*v, base_dir);
  if (auto v = get("data.embeddings")) c.data.embeddings = detail::resolve_path(*v, base_dir);
  if (auto v = get("data.labels")) c.data.labels = detail::resolve_path(*v, base_dir);
  set("data.synthetic", c.data.synthetic);
  set("data.synthetic_classes", c.data.classes);
  set("data.synthetic_per_class", c.data.per_class);
  set("data.synthetic_dim", c.data.dim);
  set("data.synthetic_separation", c.data.separation);
  set("segment.ind_fraction", c.ind_fraction);
  set_opt("segment.seed", c.segment_seed);
  set("split.val", c.split.val);
  set("split.test1", c.split.test1);
  set("split.test2", c.split.test2);
  set_opt("split.seed", c.split_seed);
  set("train.temperature", c.train.temperature);
  set("train.n_views", c.train.n_views);
  set("train.dropout", c.train.dropout_p);
  set("train.learning_rate", c.train.learning_rate);
  set("train.batch_size", c.train.batch_size);
  set("train.max_epochs", c.train.max_epochs);
  set("train.inclusive_denominator", c.train.inclusive_denominator);
  set("detect.target_tpr", c.target_tpr);
  set("discover.k", c.k);
  set("discover.restarts", c.kmeans.restarts);
  set("discover.max_iter", c.kmeans.max_iter);
  set("continual.gold_replay", c.gold_replay);
  return c;
}

/// The fully resolved config as a tree; round-trips through config_from_tree.
inline ConfigTree config_to_tree(const WorkflowConfig& c) {
  ConfigTree t;
  auto put = [&](const std::string& path, const std::string& v) { t.put(path, v); };
  auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  if (c.seed) put("run.seed", std::to_string(*c.seed));
  put("run.out", c.out);
  put("run.method", methods_string(c.methods));
  put("run.formats", std::string(c.emit_csv ? "csv" : "") + (c.emit_csv && c.emit_txt ? "," : "") +
                         (c.emit_txt ? "txt" : ""));
  if (!c.data.input.empty()) put("data.input", c.data.input);
  if (!c.data.embeddings.empty()) put("data.embeddings", c.data.embeddings);
  if (!c.data.labels.empty()) put("data.labels", c.data.labels);
  put("data.synthetic", c.data.synthetic ? "true" : "false");
  put("data.synthetic_classes", std::to_string(c.data.classes));
  put("data.synthetic_per_class", std::to_string(c.data.per_class));
  put("data.synthetic_dim", std::to_string(c.data.dim));
  put("data.synthetic_separation", num(c.data.separation));
  put("segment.ind_fraction", num(c.ind_fraction));
  if (c.segment_seed) put("segment.seed", std::to_string(*c.segment_seed));
  put("split.val", num(c.split.val));
  put("split.test1", num(c.split.test1));
  put("split.test2", num(c.split.test2));
  if (c.split_seed) put("split.seed", std::to_string(*c.split_seed));
  put("train.temperature", num(c.train.temperature));
  put("train.n_views", std::to_string(c.train.n_views));
  put("train.dropout", num(c.train.dropout_p));
  put("train.learning_rate", num(c.train.learning_rate));
  put("train.batch_size", std::to_string(c.train.batch_size));
  put("train.max_epochs", std::to_string(c.train.max_epochs));
  put("train.inclusive_denominator", c.train.inclusive_denominator ? "true" : "false");
  put("detect.target_tpr", num(c.target_tpr));
  put("discover.k", std::to_string(c.k));
  put("discover.restarts", std::to_string(c.kmeans.restarts));
  put("discover.max_iter", std::to_string(c.kmeans.max_iter));
  put("continual.gold_replay", c.gold_replay ? "true" : "false");
  return t;
}

inline WorkflowConfig load_config(const std::string& path) {
  ConfigTree tree;
  try {
    boost::property_tree::read_ini(path, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(e.what());
  }
  return config_from_tree(tree, fs::path(path).parent_path());
}

inline WorkflowConfig parse_config(std::istream& in, const fs::path& base_dir = {}) {
  ConfigTree tree;
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(e.what());
  }
  return config_from_tree(tree, base_dir);
}

/// Default output root when neither the config nor a flag names one.
inline std::string default_out_root() {
  if (const char* env = std::getenv("SCLQA_OUT")) {
    if (*env) return env;
  }
  return "sclqa_out";
}

}  // namespace sclqa
