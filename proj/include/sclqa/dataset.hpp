#pragma once

// Labeled / unlabeled embedding datasets: ingestion (line-delimited JSON
// records and the EMB1/LBL1 binary formats), validation, intent
// segmentation into known/unknown label sets, stratified splitting and
// synthetic Gaussian data.

#include "sclqa/common.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <variant>
#include <vector>

namespace sclqa {

using TokenSequence = std::vector<Vector>;

/// One user inquiry: either a sentence-level embedding or a sequence of
/// token embeddings, never both.
struct Sample {
  std::string id;
  std::optional<std::string> text;
  std::variant<Vector, TokenSequence> input;
  std::optional<ClassId> label;

  bool is_token_level() const { return std::holds_alternative<TokenSequence>(input); }
  const Vector& embedding() const { return std::get<Vector>(input); }
  const TokenSequence& tokens() const { return std::get<TokenSequence>(input); }
};

/// Known, unknown and discovered label sets. Each list is sorted ascending.
struct LabelCatalog {
  std::vector<ClassId> known;
  std::vector<ClassId> unknown;
  std::vector<ClassId> discovered;

  static bool contains(const std::vector<ClassId>& set, ClassId c) {
    return std::binary_search(set.begin(), set.end(), c);
  }
  bool is_known(ClassId c) const { return contains(known, c); }
  bool is_unknown(ClassId c) const { return contains(unknown, c); }
  bool is_discovered(ClassId c) const { return contains(discovered, c); }

  /// Highest id in any of the three sets, or kNoClass when all are empty.
  ClassId max_id() const {
    ClassId m = kNoClass;
    for (const auto* s : {&known, &unknown, &discovered}) {
      if (!s->empty()) m = std::max(m, s->back());
    }
    return m;
  }

  void validate() const {
    for (const auto* s : {&known, &unknown, &discovered}) {
      if (!std::is_sorted(s->begin(), s->end()) ||
          std::adjacent_find(s->begin(), s->end()) != s->end()) {
        throw DataError("label catalog sets must be sorted and duplicate-free");
      }
    }
    for (ClassId c : known) {
      if (is_unknown(c) || is_discovered(c)) throw DataError("label catalog sets overlap");
    }
    for (ClassId c : unknown) {
      if (is_discovered(c)) throw DataError("label catalog sets overlap");
    }
    if (!discovered.empty()) {
      ClassId prior = kNoClass;
      if (!known.empty()) prior = std::max(prior, known.back());
      if (!unknown.empty()) prior = std::max(prior, unknown.back());
      if (discovered.front() <= prior) {
        throw DataError("discovered ids must exceed every known and unknown id");
      }
    }
  }
};

inline void to_json(nlohmann::json& j, const LabelCatalog& c) {
  j = nlohmann::json{{"known", c.known}, {"unknown", c.unknown}, {"discovered", c.discovered}};
}
inline void from_json(const nlohmann::json& j, LabelCatalog& c) {
  j.at("known").get_to(c.known);
  j.at("unknown").get_to(c.unknown);
  j.at("discovered").get_to(c.discovered);
}

struct Dataset {
  std::vector<Sample> samples;
  std::size_t dim = 0;
  LabelCatalog catalog;
  /// Original label strings, indexed by class id.
  std::vector<std::string> label_names;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }

  std::vector<ClassId> labels() const {
    std::vector<ClassId> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.label.value_or(kNoClass));
    return out;
  }

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.id);
    return out;
  }

  /// Checks dimension consistency, id uniqueness and catalog membership.
  void validate() const {
    if (dim == 0) throw DataError("dataset dimension must be positive");
    std::unordered_set<std::string> seen;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& s = samples[i];
      if (!seen.insert(s.id).second) throw DataError("duplicate sample id '" + s.id + "'");
      if (s.is_token_level()) {
        if (s.tokens().empty()) throw DataError("sample '" + s.id + "' has no token embeddings");
        for (const auto& t : s.tokens()) {
          if (static_cast<std::size_t>(t.size()) != dim) {
            throw DataError("sample '" + s.id + "' has token dimension " +
                            std::to_string(t.size()) + ", expected " + std::to_string(dim));
          }
        }
      } else if (static_cast<std::size_t>(s.embedding().size()) != dim) {
        throw DataError("sample '" + s.id + "' has dimension " +
                        std::to_string(s.embedding().size()) + ", expected " + std::to_string(dim));
      }
      if (s.label) {
        const ClassId c = *s.label;
        if (c < 0 || !(catalog.is_known(c) || catalog.is_unknown(c) || catalog.is_discovered(c))) {
          throw DataError("sample '" + s.id + "' label " + std::to_string(c) +
                          " is not in the catalog");
        }
      }
    }
    catalog.validate();
  }

  /// Copy of the samples at `indices`, sharing catalog and label names.
  Dataset subset(const std::vector<std::size_t>& indices) const {
    Dataset out;
    out.dim = dim;
    out.catalog = catalog;
    out.label_names = label_names;
    out.samples.reserve(indices.size());
    for (std::size_t i : indices) out.samples.push_back(samples.at(i));
    return out;
  }

  std::string label_name(ClassId c) const {
    if (c >= 0 && static_cast<std::size_t>(c) < label_names.size()) return label_names[c];
    return std::to_string(c);
  }
};

/// Maps the sample ids of `ds` to their positions.
inline std::unordered_map<std::string, std::size_t> index_by_id(const Dataset& ds) {
  std::unordered_map<std::string, std::size_t> out;
  out.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) out.emplace(ds.samples[i].id, i);
  return out;
}

// ---------------------------------------------------------------------------
// Line-delimited JSON records.

namespace detail {

inline Vector json_to_vector(const nlohmann::json& arr) {
  if (!arr.is_array()) throw DataError("embedding must be an array of numbers");
  Vector v(static_cast<Eigen::Index>(arr.size()));
  for (std::size_t k = 0; k < arr.size(); ++k) {
    if (!arr[k].is_number()) throw DataError("embedding entries must be numbers");
    v[static_cast<Eigen::Index>(k)] = arr[k].get<double>();
  }
  return v;
}

inline nlohmann::json vector_to_json(const Vector& v) {
  nlohmann::json arr = nlohmann::json::array();
  for (Eigen::Index k = 0; k < v.size(); ++k) arr.push_back(v[k]);
  return arr;
}

}  // namespace detail

/// Reads records from `in`. Labels are strings; they receive dense ids in
/// first-seen order, continuing after any names already in `label_names`
/// (pass the names of a previously saved dataset to keep its numbering).
inline Dataset parse_jsonl(std::istream& in, const std::string& source,
                           std::vector<std::string> label_names = {}) {
  Dataset ds;
  std::unordered_map<std::string, ClassId> name_to_id;
  for (std::size_t i = 0; i < label_names.size(); ++i) {
    name_to_id.emplace(label_names[i], static_cast<ClassId>(i));
  }
  std::unordered_set<std::string> ids;
  std::set<ClassId> observed;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    Sample s;
    try {
      const auto j = nlohmann::json::parse(line);
      if (!j.is_object()) throw DataError("record is not an object");
      if (!j.contains("id") || !j["id"].is_string()) throw DataError("missing string field 'id'");
      s.id = j["id"].get<std::string>();
      if (j.contains("text") && !j["text"].is_null()) s.text = j["text"].get<std::string>();
      const bool has_emb = j.contains("embedding");
      const bool has_tok = j.contains("token_embeddings");
      if (has_emb == has_tok) {
        throw DataError("exactly one of 'embedding' or 'token_embeddings' is required");
      }
      std::size_t m = 0;
      if (has_emb) {
        Vector v = detail::json_to_vector(j["embedding"]);
        m = static_cast<std::size_t>(v.size());
        s.input = std::move(v);
      } else {
        const auto& arr = j["token_embeddings"];
        if (!arr.is_array() || arr.empty()) throw DataError("token_embeddings must be non-empty");
        TokenSequence toks;
        for (const auto& t : arr) {
          toks.push_back(detail::json_to_vector(t));
          if (static_cast<std::size_t>(toks.back().size()) != static_cast<std::size_t>(toks.front().size())) {
            throw DataError("token embeddings have mixed dimensions");
          }
        }
        m = static_cast<std::size_t>(toks.front().size());
        s.input = std::move(toks);
      }
      if (m == 0) throw DataError("empty embedding");
      if (ds.dim == 0) ds.dim = m;
      if (m != ds.dim) {
        throw DataError("dimension mismatch: got " + std::to_string(m) + ", expected " +
                        std::to_string(ds.dim));
      }
      if (!ids.insert(s.id).second) throw DataError("duplicate id '" + s.id + "'");
      if (j.contains("label") && !j["label"].is_null()) {
        const auto& lj = j["label"];
        std::string name;
        if (lj.is_string()) {
          name = lj.get<std::string>();
        } else if (lj.is_number_integer()) {
          name = std::to_string(lj.get<long long>());
        } else {
          throw DataError("label must be a string");
        }
        auto [it, fresh] = name_to_id.emplace(name, static_cast<ClassId>(label_names.size()));
        if (fresh) label_names.push_back(name);
        s.label = it->second;
        observed.insert(it->second);
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + "malformed record: " + e.what());
    } catch (const DataError& e) {
      throw DataError(where + e.what());
    }
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.empty()) throw DataError(source + ": no records");
  ds.label_names = std::move(label_names);
  ds.catalog.known.assign(observed.begin(), observed.end());
  return ds;
}

inline Dataset load_jsonl(const std::string& path, std::vector<std::string> label_names = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return parse_jsonl(in, path, std::move(label_names));
}

inline void write_jsonl(const Dataset& ds, std::ostream& out) {
  for (const auto& s : ds.samples) {
    nlohmann::json j;
    j["id"] = s.id;
    if (s.text) j["text"] = *s.text;
    if (s.label) j["label"] = ds.label_name(*s.label);
    if (s.is_token_level()) {
      nlohmann::json arr = nlohmann::json::array();
      for (const auto& t : s.tokens()) arr.push_back(detail::vector_to_json(t));
      j["token_embeddings"] = std::move(arr);
    } else {
      j["embedding"] = detail::vector_to_json(s.embedding());
    }
    out << j.dump() << '\n';
  }
}

inline void save_jsonl(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  write_jsonl(ds, out);
}

// ---------------------------------------------------------------------------
// Binary interchange: EMB1 matrices and LBL1 label vectors.

inline Matrix read_embedding_matrix(std::istream& in, const std::string& source) {
  binio::expect_magic(in, "EMB1", source);
  const std::uint32_t n = binio::read_u32(in, source + " header");
  const std::uint32_t m = binio::read_u32(in, source + " header");
  Matrix out(n, m);
  for (std::uint32_t i = 0; i < n; ++i) {
    for (std::uint32_t k = 0; k < m; ++k) {
      float v;
      if (!binio::get_f32(in, v)) {
        throw DataError(source + ": truncated payload (expected " +
                        std::to_string(std::uint64_t(n) * m * 4) + " bytes)");
      }
      out(i, k) = v;
    }
  }
  return out;
}

inline Matrix load_embedding_matrix(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return read_embedding_matrix(in, path);
}

inline void write_embedding_matrix(const Matrix& m, std::ostream& out) {
  binio::put_magic(out, "EMB1");
  binio::put_u32(out, static_cast<std::uint32_t>(m.rows()));
  binio::put_u32(out, static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index k = 0; k < m.cols(); ++k) binio::put_f32(out, m(i, k));
  }
}

inline void save_embedding_matrix(const Matrix& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  write_embedding_matrix(m, out);
}

inline std::vector<std::uint32_t> read_labels(std::istream& in, const std::string& source) {
  binio::expect_magic(in, "LBL1", source);
  const std::uint32_t n = binio::read_u32(in, source + " header");
  std::vector<std::uint32_t> out(n);
  for (auto& v : out) {
    if (!binio::get_u32(in, v)) {
      throw DataError(source + ": truncated payload (expected " + std::to_string(n * 4ULL) +
                      " bytes)");
    }
  }
  return out;
}

inline std::vector<std::uint32_t> load_labels(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return read_labels(in, path);
}

inline void save_labels(const std::vector<std::uint32_t>& labels, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  binio::put_magic(out, "LBL1");
  binio::put_u32(out, static_cast<std::uint32_t>(labels.size()));
  for (auto v : labels) binio::put_u32(out, v);
}

/// Builds a dataset from a row-major embedding matrix and optional labels;
/// sample ids are the row indices.
inline Dataset dataset_from_matrix(const Matrix& emb, const std::vector<std::uint32_t>* labels) {
  if (emb.rows() == 0 || emb.cols() == 0) throw DataError("empty embedding matrix");
  if (labels && labels->size() != static_cast<std::size_t>(emb.rows())) {
    throw DataError("label count " + std::to_string(labels->size()) + " does not match " +
                    std::to_string(emb.rows()) + " rows");
  }
  Dataset ds;
  ds.dim = static_cast<std::size_t>(emb.cols());
  std::set<ClassId> observed;
  ClassId max_label = kNoClass;
  for (Eigen::Index i = 0; i < emb.rows(); ++i) {
    Sample s;
    s.id = std::to_string(i);
    s.input = Vector(emb.row(i).transpose());
    if (labels) {
      const auto c = static_cast<ClassId>((*labels)[static_cast<std::size_t>(i)]);
      s.label = c;
      observed.insert(c);
      max_label = std::max(max_label, c);
    }
    ds.samples.push_back(std::move(s));
  }
  for (ClassId c = 0; c <= max_label; ++c) ds.label_names.push_back(std::to_string(c));
  ds.catalog.known.assign(observed.begin(), observed.end());
  return ds;
}

// ---------------------------------------------------------------------------
// Segmentation and splitting.

/// Randomly assigns round(ind_fraction * |labels|) of the catalog's labels to
/// `known`; the rest become `unknown`.
inline LabelCatalog segment_intents(const LabelCatalog& catalog, double ind_fraction,
                                    std::uint64_t seed) {
  require(!catalog.known.empty(), "segment_intents: catalog has no known labels");
  require(ind_fraction > 0.0 && ind_fraction < 1.0, "segment_intents: fraction must be in (0,1)");
  std::vector<ClassId> all = catalog.known;
  all.insert(all.end(), catalog.unknown.begin(), catalog.unknown.end());
  std::sort(all.begin(), all.end());
  const auto n_known = static_cast<std::size_t>(std::llround(ind_fraction * double(all.size())));
  if (n_known == 0 || n_known >= all.size()) {
    throw std::invalid_argument("segment_intents: fraction " + std::to_string(ind_fraction) +
                                " of " + std::to_string(all.size()) +
                                " labels leaves one side empty");
  }
  Rng rng(seed);
  rng.shuffle(all);
  LabelCatalog out;
  out.known.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_known));
  out.unknown.assign(all.begin() + static_cast<std::ptrdiff_t>(n_known), all.end());
  std::sort(out.known.begin(), out.known.end());
  std::sort(out.unknown.begin(), out.unknown.end());
  out.discovered = catalog.discovered;
  return out;
}

struct SplitFractions {
  double val = 0.1;
  double test1 = 0.2;
  double test2 = 0.2;
};

struct SplitBundle {
  Dataset train;
  Dataset val;
  Dataset test1;
  Dataset test2;
  std::uint64_t seed = 0;
};

/// Per-class stratified split. For every class Test II takes
/// round(test2 * n_c) samples first, then val and test1 take their shares;
/// the remainder is training data for known classes and is dropped for
/// unknown classes.
inline SplitBundle make_splits(const Dataset& ds, const LabelCatalog& catalog,
                               const SplitFractions& fr, std::uint64_t seed) {
  require(fr.test2 > 0.0 && fr.test2 < 1.0, "make_splits: test2 fraction must be in (0,1)");
  require(fr.val >= 0.0 && fr.test1 >= 0.0 && fr.val + fr.test1 + fr.test2 < 1.0,
          "make_splits: fractions must leave a training share");
  std::map<ClassId, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& lab = ds.samples[i].label;
    if (!lab) throw DataError("make_splits: sample '" + ds.samples[i].id + "' is unlabeled");
    if (!catalog.is_known(*lab) && !catalog.is_unknown(*lab)) {
      throw DataError("make_splits: label " + std::to_string(*lab) + " is not in the catalog");
    }
    by_class[*lab].push_back(i);
  }
  std::vector<std::size_t> train, val, test1, test2;
  for (auto& [c, members] : by_class) {
    const std::size_t n = members.size();
    if (n < 2) {
      throw DataError("make_splits: class " + ds.label_name(c) + " has " + std::to_string(n) +
                      " sample(s); at least 2 are needed to stratify");
    }
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(c)));
    rng.shuffle(members);
    auto share = [n](double f) { return static_cast<std::size_t>(std::llround(f * double(n))); };
    const std::size_t n2 = std::clamp<std::size_t>(share(fr.test2), 1, n - 1);
    std::size_t nv = share(fr.val);
    std::size_t n1 = share(fr.test1);
    // Keep at least one training sample per class.
    while (n2 + nv + n1 >= n && n1 > 0) --n1;
    while (n2 + nv + n1 >= n && nv > 0) --nv;
    std::size_t pos = 0;
    auto take = [&](std::vector<std::size_t>& dst, std::size_t count) {
      dst.insert(dst.end(), members.begin() + static_cast<std::ptrdiff_t>(pos),
                 members.begin() + static_cast<std::ptrdiff_t>(pos + count));
      pos += count;
    };
    take(test2, n2);
    take(val, nv);
    take(test1, n1);
    if (catalog.is_known(c)) take(train, n - pos);
  }
  for (auto* v : {&train, &val, &test1, &test2}) std::sort(v->begin(), v->end());
  Dataset base = ds;
  base.catalog = catalog;
  SplitBundle b;
  b.train = base.subset(train);
  b.val = base.subset(val);
  b.test1 = base.subset(test1);
  b.test2 = base.subset(test2);
  b.seed = seed;
  return b;
}

/// One line per sample: `<id>\t<split>`, in train, val, test1, test2 order.
inline void write_split_manifest(const SplitBundle& b, std::ostream& out) {
  const std::pair<const char*, const Dataset*> parts[] = {
      {"train", &b.train}, {"val", &b.val}, {"test1", &b.test1}, {"test2", &b.test2}};
  for (const auto& [name, part] : parts) {
    for (const auto& s : part->samples) out << s.id << '\t' << name << '\n';
  }
}

// ---------------------------------------------------------------------------
// Synthetic data.

struct SyntheticData {
  Dataset data;
  std::vector<Vector> means;
};

/// Isotropic unit-variance Gaussian classes whose means are pairwise at
/// least `separation` apart. Also returns the class means.
inline SyntheticData generate_synthetic_with_means(int n_classes, int per_class, int dim,
                                                   double separation, std::uint64_t seed) {
  require(n_classes > 0 && per_class > 0 && dim > 0, "generate_synthetic: counts must be positive");
  require(separation > 0.0, "generate_synthetic: separation must be positive");
  Rng rng(seed);
  std::vector<Vector> means;
  double spread = 1.25 * separation / std::sqrt(2.0 * dim);
  int failures = 0;
  while (static_cast<int>(means.size()) < n_classes) {
    Vector cand(dim);
    for (int k = 0; k < dim; ++k) cand[k] = spread * rng.normal();
    bool ok = true;
    for (const auto& m : means) {
      if ((m - cand).norm() < separation) {
        ok = false;
        break;
      }
    }
    if (ok) {
      means.push_back(std::move(cand));
    } else if (++failures % 200 == 0) {
      spread *= 1.1;
    }
  }
  Dataset ds;
  ds.dim = static_cast<std::size_t>(dim);
  const int width = static_cast<int>(std::to_string(per_class - 1).size());
  for (int c = 0; c < n_classes; ++c) {
    char name[32];
    std::snprintf(name, sizeof name, "intent_%02d", c);
    ds.label_names.emplace_back(name);
    ds.catalog.known.push_back(c);
    for (int i = 0; i < per_class; ++i) {
      Sample s;
      char id[64];
      std::snprintf(id, sizeof id, "c%02d-%0*d", c, width, i);
      s.id = id;
      Vector x(dim);
      for (int k = 0; k < dim; ++k) x[k] = means[static_cast<std::size_t>(c)][k] + rng.normal();
      s.input = std::move(x);
      s.label = c;
      ds.samples.push_back(std::move(s));
    }
  }
  return {std::move(ds), std::move(means)};
}

inline Dataset generate_synthetic(int n_classes, int per_class, int dim, double separation,
                                  std::uint64_t seed) {
  return generate_synthetic_with_means(n_classes, per_class, dim, separation, seed).data;
}

}  // namespace sclqa
