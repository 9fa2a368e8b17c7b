#pragma once

// The four-task workflow as six restartable stages. Every stage reads its
// inputs from the run directory and writes its outputs back, so a full
// workflow and a sequence of single-stage runs produce the same files.
//
// Layout under the run directory:
//   manifest.json              stages run, input hashes, outputs, seed, wall time
//   data/                      splits and label catalog (written by pretrain)
//   <method>/<stage>/          per-method stage artifacts
//   report/                    consolidated tables and the embedding dump

#include "sclqa/baseline_ce.hpp"
#include "sclqa/config.hpp"
#include "sclqa/continual.hpp"
#include "sclqa/discovery.hpp"
#include "sclqa/ood.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace sclqa {

enum class Stage { Pretrain, Classify, Detect, Discover, Continual, Evaluate };

inline constexpr std::array<Stage, 6> kStages = {Stage::Pretrain, Stage::Classify,  Stage::Detect,
                                                 Stage::Discover, Stage::Continual, Stage::Evaluate};

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::Pretrain: return "pretrain";
    case Stage::Classify: return "classify";
    case Stage::Detect: return "detect";
    case Stage::Discover: return "discover";
    case Stage::Continual: return "continual";
    case Stage::Evaluate: return "evaluate";
  }
  return "?";
}

inline Stage parse_stage(const std::string& s) {
  for (Stage st : kStages) {
    if (s == to_string(st)) return st;
  }
  throw ConfigError("unknown stage '" + s + "'");
}

/// A stage input that has not been produced yet.
class MissingArtifact : public std::runtime_error {
 public:
  MissingArtifact(const fs::path& path, const std::string& producer)
      : std::runtime_error("missing artifact " + path.string() + " (produced by stage '" + producer + "')") {}
};

/// Any other failure inside a stage, tagged with the stage name.
class StageError : public std::runtime_error {
 public:
  StageError(Stage s, const std::string& what)
      : std::runtime_error("stage '" + std::string(to_string(s)) + "' failed: " + what) {}
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitStage = 3;
inline constexpr int kExitMissing = 4;

// ---------------------------------------------------------------------------
// Small file helpers.

/// 64-bit FNV-1a of a file's bytes, as 16 hex digits.
inline std::string file_hash(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  std::uint64_t h = 1469598103934665603ULL;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write " + p.string());
    out << text;
    if (!out) throw DataError("write failed: " + p.string());
  }
  fs::rename(tmp, p);
}

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

/// `key=value` lines into a map; the key is everything before the first '='.
inline std::map<std::string, std::string> read_key_values(const fs::path& p) {
  std::map<std::string, std::string> out;
  std::istringstream in(read_text(p));
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Catalog and data files.

inline nlohmann::json catalog_json(const LabelCatalog& c, const std::vector<std::string>& names) {
  nlohmann::json j = c;
  j["label_names"] = names;
  return j;
}

struct CatalogFile {
  LabelCatalog catalog;
  std::vector<std::string> names;
};

inline CatalogFile read_catalog(const fs::path& p) {
  try {
    const auto j = nlohmann::json::parse(read_text(p));
    CatalogFile out{j.get<LabelCatalog>(), j.at("label_names").get<std::vector<std::string>>()};
    out.catalog.validate();
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(p.string() + ": malformed catalog: " + e.what());
  }
}

/// Loads a record file whose labels are names in `cat.names`, attaching `cat.catalog`.
inline Dataset load_with_catalog(const fs::path& p, const CatalogFile& cat) {
  Dataset ds = load_jsonl(p.string(), cat.names);
  if (ds.label_names.size() != cat.names.size()) {
    throw DataError(p.string() + ": label '" + ds.label_names.back() + "' is not in the catalog");
  }
  ds.catalog = cat.catalog;
  return ds;
}

inline std::vector<bool> is_unknown_mask(const Dataset& ds, const LabelCatalog& cat) {
  std::vector<bool> out;
  for (const auto& s : ds.samples) {
    if (!s.label) throw DataError("sample '" + s.id + "' is unlabeled");
    out.push_back(cat.is_unknown(*s.label));
  }
  return out;
}

inline Dataset known_slice(const Dataset& ds, const LabelCatalog& cat) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.samples[i].label && cat.is_known(*ds.samples[i].label)) idx.push_back(i);
  }
  return ds.subset(idx);
}

// ---------------------------------------------------------------------------
// Manifest.

inline fs::path manifest_path(const fs::path& root) { return root / "manifest.json"; }

inline nlohmann::json tree_to_json(const ConfigTree& t) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [section, body] : t) {
    for (const auto& [key, value] : body) j[section][key] = value.data();
  }
  return j;
}

inline ConfigTree json_to_tree(const nlohmann::json& j) {
  ConfigTree t;
  for (const auto& [section, body] : j.items()) {
    for (const auto& [key, value] : body.items()) t.put(section + "." + key, value.get<std::string>());
  }
  return t;
}

inline nlohmann::json read_manifest(const fs::path& root) {
  const auto p = manifest_path(root);
  try {
    auto j = nlohmann::json::parse(read_text(p));
    if (!j.is_object() || !j.contains("stages") || !j["stages"].is_array() || !j.contains("config")) {
      throw DataError("missing 'stages' or 'config'");
    }
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt manifest " + p.string() + ": " + e.what());
  } catch (const DataError& e) {
    throw DataError("corrupt manifest " + p.string() + ": " + e.what());
  }
}

/// The configuration recorded by the last stage run in `root`.
inline WorkflowConfig config_from_manifest(const fs::path& root) {
  return config_from_tree(json_to_tree(read_manifest(root)["config"]));
}

inline int stage_rank(const std::string& name) {
  for (std::size_t i = 0; i < kStages.size(); ++i) {
    if (name == to_string(kStages[i])) return static_cast<int>(i);
  }
  return static_cast<int>(kStages.size());
}

/// Inserts or replaces the entry for (stage, method), keeping entries in
/// workflow order.
inline void record_stage(const fs::path& root, const WorkflowConfig& cfg, nlohmann::json entry) {
  nlohmann::json m;
  if (fs::exists(manifest_path(root))) {
    m = read_manifest(root);
  } else {
    m = {{"format", "sclqa-run"}, {"version", 1}, {"stages", nlohmann::json::array()}};
  }
  m["config"] = tree_to_json(config_to_tree(cfg));
  m["seed"] = cfg.master_seed();
  auto& stages = m["stages"];
  nlohmann::json kept = nlohmann::json::array();
  for (const auto& e : stages) {
    if (e.value("stage", "") == entry["stage"] && e.value("method", "") == entry["method"]) continue;
    kept.push_back(e);
  }
  kept.push_back(std::move(entry));
  std::stable_sort(kept.begin(), kept.end(), [](const nlohmann::json& a, const nlohmann::json& b) {
    const int ra = stage_rank(a.value("stage", "")), rb = stage_rank(b.value("stage", ""));
    if (ra != rb) return ra < rb;
    return a.value("method", "") < b.value("method", "");
  });
  stages = std::move(kept);
  write_text(manifest_path(root), m.dump(2) + "\n");
}

/// The manifest entry for (stage, method), if that stage has run.
inline std::optional<nlohmann::json> find_stage(const nlohmann::json& manifest, Stage s, Method m) {
  for (const auto& e : manifest["stages"]) {
    if (e.value("stage", "") == to_string(s) && e.value("method", "") == to_string(m)) return nlohmann::json(e);
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Stage context: input checks, output bookkeeping.

class StageContext {
 public:
  StageContext(const WorkflowConfig& cfg, Stage stage, Method method)
      : cfg_(cfg), stage_(stage), method_(method), root_(cfg.out) {}

  const WorkflowConfig& cfg() const { return cfg_; }
  Method method() const { return method_; }
  const fs::path& root() const { return root_; }
  fs::path data_dir() const { return root_ / "data"; }
  fs::path stage_dir(Stage s) const { return root_ / to_string(method_) / to_string(s); }
  fs::path dir() const { return stage_dir(stage_); }

  /// Records an input, failing with the producing stage's name when absent.
  fs::path need(const fs::path& p, Stage producer) {
    if (!fs::is_regular_file(p)) throw MissingArtifact(p, to_string(producer));
    inputs_.push_back(p);
    return p;
  }
  fs::path need_data(const std::string& name) { return need(data_dir() / name, Stage::Pretrain); }
  fs::path need_from(Stage s, const std::string& name) { return need(stage_dir(s) / name, s); }

  /// Path for an output of this stage; the directory is created.
  fs::path out(const std::string& name) {
    fs::create_directories(dir());
    outputs_.push_back(dir() / name);
    return outputs_.back();
  }
  fs::path out_data(const std::string& name) {
    fs::create_directories(data_dir());
    outputs_.push_back(data_dir() / name);
    return outputs_.back();
  }

  nlohmann::json entry(double wall_ms) const {
    auto rel = [&](const fs::path& p) { return fs::relative(p, root_).generic_string(); };
    nlohmann::json in = nlohmann::json::array(), out = nlohmann::json::array();
    for (const auto& p : inputs_) in.push_back({{"path", rel(p)}, {"hash", file_hash(p)}});
    for (const auto& p : outputs_) out.push_back({{"path", rel(p)}, {"hash", file_hash(p)}});
    if (stage_ == Stage::Pretrain) {
      if (!cfg_.data.input.empty()) in.push_back({{"path", cfg_.data.input}, {"hash", file_hash(cfg_.data.input)}});
      for (const auto* p : {&cfg_.data.embeddings, &cfg_.data.labels}) {
        if (!p->empty()) in.push_back({{"path", *p}, {"hash", file_hash(*p)}});
      }
    }
    return {{"stage", to_string(stage_)}, {"method", to_string(method_)}, {"seed", cfg_.master_seed()},
            {"inputs", in},           {"outputs", out},                {"wall_ms", std::llround(wall_ms)}};
  }

 private:
  const WorkflowConfig& cfg_;
  Stage stage_;
  Method method_;
  fs::path root_;
  std::vector<fs::path> inputs_, outputs_;
};

// ---------------------------------------------------------------------------
// Stage bodies.

namespace stages {

inline Dataset ingest(const WorkflowConfig& cfg) {
  const auto& d = cfg.data;
  if (d.synthetic) return generate_synthetic(d.classes, d.per_class, d.dim, d.separation, cfg.data_seed());
  if (!d.input.empty()) return load_jsonl(d.input);
  const auto labels = load_labels(d.labels);
  Dataset ds = dataset_from_matrix(load_embedding_matrix(d.embeddings), &labels);
  return ds;
}

inline std::string history_csv(const TrainResult& r) {
  std::ostringstream os;
  os << "epoch,train_loss,val_score,best\n";
  for (const auto& h : r.history) {
    os << h.epoch << ',' << fmt_real(h.train_loss) << ',' << fmt_real(h.val_score) << ','
       << (h.epoch == r.best_epoch ? 1 : 0) << '\n';
  }
  return os.str();
}

inline std::string calibration_json(const DetectionCalibration& c, std::optional<double> test_tpr = {}) {
  nlohmann::json j = {{"lambda", fmt_real(c.lambda, 9)},
                      {"target_tpr", fmt_real(c.target_tpr)},
                      {"achieved_tpr", fmt_real(c.achieved_tpr)},
                      {"calibrated_on", c.calibrated_on}};
  if (test_tpr) j["test1_tpr"] = fmt_real(*test_tpr);
  return j.dump(2) + "\n";
}

inline std::string predictions_csv(const Dataset& ds, std::span<const ClassId> pred) {
  std::ostringstream os;
  os << "id,gold,pred\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    os << ds.samples[i].id << ',' << ds.label_name(*ds.samples[i].label) << ',' << ds.label_name(pred[i]) << '\n';
  }
  return os.str();
}

inline void pretrain(StageContext& ctx) {
  const auto& cfg = ctx.cfg();
  const Dataset all = ingest(cfg);
  const LabelCatalog cat = segment_intents(all.catalog, cfg.ind_fraction, cfg.segmentation_seed());
  const SplitBundle b = make_splits(all, cat, cfg.split, cfg.splitting_seed());
  write_text(ctx.out_data("catalog.json"), catalog_json(cat, all.label_names).dump(2) + "\n");
  for (const auto& [name, part] : {std::pair{"train", &b.train}, {"val", &b.val}, {"test1", &b.test1},
                                   {"test2", &b.test2}}) {
    std::ostringstream os;
    write_jsonl(*part, os);
    write_text(ctx.out_data(std::string(name) + ".jsonl"), os.str());
  }
  std::ostringstream manifest;
  write_split_manifest(b, manifest);
  write_text(ctx.out_data("splits.tsv"), manifest.str());

  const SclConfig tc = cfg.train_config();
  const auto enc0 = make_default_encoder(all.dim, tc.dropout_p, cfg.init_seed());
  std::ostringstream log;
  TrainResult tr;
  if (ctx.method() == Method::Scl) {
    tr = sclqa::pretrain(enc0, b.train, b.val, tc, {.out = &log, .method = "scl"});
  } else {
    auto ft = ft_pretrain(enc0, b.train, b.val, tc, {.out = &log, .method = "ft"});
    save_head(ft.head, ctx.out("head.lhd").string());
    tr = std::move(ft.train);
  }
  save_encoder(tr.encoder, ctx.out("encoder.enc").string());
  const auto enc = load_encoder(ctx.dir() / "encoder.enc");
  save_centroid_model(fit_centroids(encode(enc, b.train), b.train.labels()), ctx.out("centroids.cmd").string());
  write_text(ctx.out("calibration.json"), calibration_json(*tr.calibration));
  write_text(ctx.out("history.csv"), history_csv(tr));
  write_text(ctx.out("train_log.txt"), log.str());
  std::ostringstream summary;
  summary << "best_epoch=" << tr.best_epoch << "\nbest_val_auroc=" << fmt_real(tr.best_score)
          << "\nepochs_run=" << tr.history.size() << "\nknown_intents=" << cat.known.size()
          << "\nunknown_intents=" << cat.unknown.size() << "\ntrain=" << b.train.size() << "\nval=" << b.val.size()
          << "\ntest1=" << b.test1.size() << "\ntest2=" << b.test2.size() << '\n';
  write_text(ctx.out("summary.txt"), summary.str());
}

inline void classify(StageContext& ctx) {
  const auto cat = read_catalog(ctx.need_data("catalog.json"));
  const Dataset test1 = known_slice(load_with_catalog(ctx.need_data("test1.jsonl"), cat), cat.catalog);
  const auto enc = load_encoder(ctx.need_from(Stage::Pretrain, "encoder.enc").string());
  const auto model = load_centroid_model(ctx.need_from(Stage::Pretrain, "centroids.cmd").string());
  if (test1.empty()) throw DataError("Test I has no known-intent samples");
  const auto gold = test1.labels();
  auto emit = [&](const std::string& suffix, const std::vector<ClassId>& pred) {
    const auto f = micro_macro_f1(gold, pred);
    MetricsReport r;
    r.micro_f1 = f.micro;
    r.macro_f1 = f.macro;
    r.validate();
    write_text(ctx.out("predictions" + suffix + ".csv"), predictions_csv(test1, pred));
    write_text(ctx.out("report" + suffix + ".txt"), r.to_key_values());
  };
  emit("", classify_all(model, encode(enc, test1)));
  if (ctx.method() == Method::Ft) {
    const auto head = load_head(ctx.need_from(Stage::Pretrain, "head.lhd").string());
    std::vector<ClassId> pred;
    for (const auto& s : test1.samples) pred.push_back(fc_classify(enc, head, sentence_input(s)));
    emit("_fc", pred);
  }
}

inline void detect(StageContext& ctx) {
  const auto& cfg = ctx.cfg();
  const auto cat = read_catalog(ctx.need_data("catalog.json"));
  const Dataset val = load_with_catalog(ctx.need_data("val.jsonl"), cat);
  const Dataset test1 = load_with_catalog(ctx.need_data("test1.jsonl"), cat);
  const auto enc = load_encoder(ctx.need_from(Stage::Pretrain, "encoder.enc").string());
  const auto model = load_centroid_model(ctx.need_from(Stage::Pretrain, "centroids.cmd").string());

  const auto val_unknown = is_unknown_mask(val, cat.catalog);
  const auto val_scores = ood_scores(model, encode(enc, val));
  std::vector<double> val_ood;
  for (std::size_t i = 0; i < val_scores.size(); ++i) {
    if (val_unknown[i]) val_ood.push_back(val_scores[i]);
  }
  const auto cal = calibrate(val_ood, cfg.target_tpr, "val");

  const Matrix h = encode(enc, test1);
  const auto is_ood = is_unknown_mask(test1, cat.catalog);
  const auto part = partition(model, cal, test1, h);
  MetricsReport r;
  r.auroc = roc_auroc(part.scores, is_ood);
  r.aupr = aupr(part.scores, is_ood);
  r.fpr90 = fpr_at_tpr(part.scores, is_ood, 0.9);
  r.validate();
  std::size_t tp = 0, positives = 0;
  std::ostringstream scores;
  scores << "id,true_is_ood,score,judged\n";
  for (std::size_t i = 0; i < test1.size(); ++i) {
    scores << test1.samples[i].id << ',' << (is_ood[i] ? 1 : 0) << ',' << fmt_real(part.scores[i], 9) << ','
           << to_string(part.verdicts[i]) << '\n';
    positives += is_ood[i];
    tp += is_ood[i] && part.verdicts[i] == Verdict::OOD;
  }
  const double test_tpr = positives ? double(tp) / double(positives) : 0.0;
  write_text(ctx.out("scores.csv"), scores.str());
  write_text(ctx.out("calibration.json"), calibration_json(cal, test_tpr));
  write_text(ctx.out("report.txt"), r.to_key_values());
  std::ostringstream ind, ood;
  write_jsonl(part.detected_ind, ind);
  write_jsonl(part.detected_ood, ood);
  write_text(ctx.out("detected_ind.jsonl"), ind.str());
  write_text(ctx.out("detected_ood.jsonl"), ood.str());
}

inline void discover(StageContext& ctx) {
  const auto& cfg = ctx.cfg();
  const auto cat = read_catalog(ctx.need_data("catalog.json"));
  const Dataset test1 = load_with_catalog(ctx.need_data("test1.jsonl"), cat);
  const auto ood_path = ctx.need_from(Stage::Detect, "detected_ood.jsonl");
  const auto enc = load_encoder(ctx.need_from(Stage::Pretrain, "encoder.enc").string());
  if (fs::file_size(ood_path) == 0) throw DataError("no samples were detected as OOD");
  const Dataset ood = load_with_catalog(ood_path, cat);
  const int k = cfg.k > 0 ? cfg.k : static_cast<int>(cat.catalog.unknown.size());
  if (static_cast<std::size_t>(k) > ood.size()) {
    throw DataError("k = " + std::to_string(k) + " exceeds the " + std::to_string(ood.size()) +
                    " detected-OOD samples");
  }
  const auto clusters = kmeans(encode(enc, ood), k, cfg.cluster_seed(), cfg.kmeans);
  auto pl = assign_pseudo_labels(clusters, cat.catalog);
  std::vector<std::string> names = cat.names;
  for (int j = 0; j < k; ++j) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "new_%02d", j);
    names.resize(static_cast<std::size_t>(pl.catalog.discovered[static_cast<std::size_t>(j)]), "");
    names.emplace_back(buf);
  }
  Dataset discovered = ood;
  discovered.label_names = names;
  discovered.catalog = pl.catalog;
  for (std::size_t i = 0; i < discovered.size(); ++i) discovered.samples[i].label = pl.labels[i];

  // Clustering quality on the detected samples whose gold intent is unknown.
  const auto index = index_by_id(test1);
  std::vector<ClassId> gold, minted;
  std::ostringstream csv;
  csv << "id,cluster,minted_id,label,gold\n";
  for (std::size_t i = 0; i < ood.size(); ++i) {
    const auto& gs = test1.samples.at(index.at(ood.samples[i].id));
    const ClassId g = *gs.label;
    csv << ood.samples[i].id << ',' << clusters.assignments[i] << ',' << pl.labels[i] << ','
        << names[static_cast<std::size_t>(pl.labels[i])] << ',' << test1.label_name(g) << '\n';
    if (cat.catalog.is_unknown(g)) {
      gold.push_back(g);
      minted.push_back(pl.labels[i]);
    }
  }
  MetricsReport r;
  nlohmann::json mapping = nlohmann::json::array();
  std::size_t unmatched = static_cast<std::size_t>(k);
  if (!gold.empty()) {
    r.nmi = nmi(gold, minted);
    r.ari = ari(gold, minted);
    const auto acc = clustering_acc(gold, minted);
    r.acc = acc.acc;
    for (const auto& [cluster, g] : acc.mapping) mapping.push_back({{"gold", g}, {"discovered", cluster}});
    unmatched = static_cast<std::size_t>(k) - acc.mapping.size();
  }
  r.validate();
  std::ostringstream summary;
  summary << "k=" << k << "\nclustered=" << ood.size() << "\nscored=" << gold.size()
          << "\ninertia=" << fmt_real(clusters.inertia) << "\niterations=" << clusters.iterations
          << "\nrestarts=" << clusters.restarts
          << "\nunmatched_clusters=" << unmatched << '\n';
  std::ostringstream disc;
  write_jsonl(discovered, disc);
  write_text(ctx.out("clusters.csv"), csv.str());
  write_text(ctx.out("discovered.jsonl"), disc.str());
  write_text(ctx.out("catalog.json"), catalog_json(pl.catalog, names).dump(2) + "\n");
  write_text(ctx.out("mapping.json"), mapping.dump(2) + "\n");
  write_text(ctx.out("report.txt"), r.to_key_values());
  write_text(ctx.out("summary.txt"), summary.str());
}

inline std::map<ClassId, ClassId> read_mapping(const fs::path& p) {
  std::map<ClassId, ClassId> out;
  try {
    for (const auto& e : nlohmann::json::parse(read_text(p))) {
      out[e.at("gold").get<ClassId>()] = e.at("discovered").get<ClassId>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(p.string() + ": malformed mapping: " + e.what());
  }
  return out;
}

inline void continual(StageContext& ctx) {
  const auto& cfg = ctx.cfg();
  const auto expanded = read_catalog(ctx.need_from(Stage::Discover, "catalog.json"));
  const auto mapping = read_mapping(ctx.need_from(Stage::Discover, "mapping.json"));
  const auto ind_path = ctx.need_from(Stage::Detect, "detected_ind.jsonl");
  const Dataset detected_ind =
      fs::file_size(ind_path) ? load_with_catalog(ind_path, expanded) : Dataset{};
  const Dataset discovered = load_with_catalog(ctx.need_from(Stage::Discover, "discovered.jsonl"), expanded);
  Dataset val = load_with_catalog(ctx.need_data("val.jsonl"), expanded);
  const auto enc0 = load_encoder(ctx.need_from(Stage::Pretrain, "encoder.enc").string());

  ReplaySet replay = build_replay_set(detected_ind, discovered, expanded.catalog);
  std::size_t gold_rows = 0;
  if (cfg.gold_replay) {
    const Dataset train = load_with_catalog(ctx.need_data("train.jsonl"), expanded);
    const ReplaySet gold = build_replay_set(train, Dataset{}, expanded.catalog);
    for (const auto& s : gold.samples.samples) {
      replay.samples.samples.push_back(s);
      replay.provenance.push_back(Provenance::GoldInd);
    }
    gold_rows = gold.samples.size();
  }
  replay.samples.label_names = expanded.names;
  const auto val_gold = val.labels();
  const auto val_mapped = map_gold_labels(val_gold, expanded.catalog, mapping);
  for (std::size_t i = 0; i < val.size(); ++i) val.samples[i].label = val_mapped[i];

  const SclConfig tc = cfg.train_config();
  std::ostringstream log;
  TrainResult tr;
  if (ctx.method() == Method::Scl) {
    tr = retrain(enc0, replay, val, tc, {.out = &log, .method = "scl", .metric = "val_macro_f1"}).train;
  } else {
    const auto head = load_head(ctx.need_from(Stage::Pretrain, "head.lhd").string());
    auto ft = ft_train(enc0, head, replay.samples, tc, macro_f1_validator(replay.samples, val), true,
                       {.out = &log, .method = "ft", .metric = "val_macro_f1"});
    save_head(ft.head, ctx.out("head.lhd").string());
    tr = std::move(ft.train);
  }
  save_encoder(tr.encoder, ctx.out("encoder.enc").string());
  const auto enc = load_encoder(ctx.dir() / "encoder.enc");
  const auto model = fit_centroids(encode(enc, replay.samples), replay.samples.labels());
  if (model.class_count() != expanded.catalog.known.size() + expanded.catalog.discovered.size()) {
    throw std::logic_error("retrained model does not cover the expanded label set");
  }
  save_centroid_model(model, ctx.out("centroids.cmd").string());
  std::ostringstream rcsv;
  rcsv << "id,provenance,label\n";
  for (std::size_t i = 0; i < replay.samples.size(); ++i) {
    const auto& s = replay.samples.samples[i];
    rcsv << s.id << ',' << to_string(replay.provenance[i]) << ',' << replay.samples.label_name(*s.label) << '\n';
  }
  write_text(ctx.out("replay.csv"), rcsv.str());
  write_text(ctx.out("history.csv"), history_csv(tr));
  write_text(ctx.out("train_log.txt"), log.str());
  std::ostringstream summary;
  summary << "best_epoch=" << tr.best_epoch << "\nbest_val_macro_f1=" << fmt_real(tr.best_score)
          << "\nreplay=" << replay.samples.size() << "\npseudo_ind=" << replay.count(Provenance::PseudoInd)
          << "\npseudo_ood=" << replay.count(Provenance::PseudoOod) << "\ngold_ind=" << gold_rows
          << "\nclasses=" << model.class_count() << '\n';
  write_text(ctx.out("summary.txt"), summary.str());
}

inline void evaluate(StageContext& ctx) {
  const auto expanded = read_catalog(ctx.need_from(Stage::Discover, "catalog.json"));
  const auto mapping = read_mapping(ctx.need_from(Stage::Discover, "mapping.json"));
  const Dataset test2 = load_with_catalog(ctx.need_data("test2.jsonl"), expanded);
  const auto enc = load_encoder(ctx.need_from(Stage::Continual, "encoder.enc").string());
  const auto model = load_centroid_model(ctx.need_from(Stage::Continual, "centroids.cmd").string());
  const auto ref_enc = load_encoder(ctx.need_from(Stage::Pretrain, "encoder.enc").string());
  const auto ref_model = load_centroid_model(ctx.need_from(Stage::Pretrain, "centroids.cmd").string());

  const auto pred = classify_all(model, encode(enc, test2));
  const auto rep = evaluate_continual(pred, test2, expanded.catalog, mapping);
  const Dataset ind = known_slice(test2, expanded.catalog);
  MetricsReport ref;
  if (!ind.empty()) {
    const auto gold = ind.labels();
    const auto f = micro_macro_f1(gold, classify_all(ref_model, encode(ref_enc, ind)), gold);
    ref.micro_f1 = f.micro;
    ref.macro_f1 = f.macro;
  }
  std::ostringstream kv, csv, preds;
  csv << "slice,n,Micro F1,Macro F1\n";
  const std::tuple<const char*, const MetricsReport*, std::size_t> rows[] = {
      {"overall", &rep.overall, rep.n_overall},
      {"on_ind", &rep.on_ind, rep.n_ind},
      {"on_ood", &rep.on_ood, rep.n_ood},
      {"ref_on_ind", &ref, ind.size()}};
  for (const auto& [name, r, n] : rows) {
    r->validate();
    csv << name << ',' << n << ',' << (r->micro_f1 ? fmt_real(*r->micro_f1) : "") << ','
        << (r->macro_f1 ? fmt_real(*r->macro_f1) : "") << '\n';
    if (r->micro_f1) kv << name << "/Micro F1=" << fmt_real(*r->micro_f1) << '\n';
    if (r->macro_f1) kv << name << "/Macro F1=" << fmt_real(*r->macro_f1) << '\n';
  }
  kv << "unmatched_classes=" << rep.unmatched_classes.size() << '\n';
  const auto mapped = map_gold_labels(test2.labels(), expanded.catalog, mapping);
  preds << "id,gold,gold_mapped,pred\n";
  for (std::size_t i = 0; i < test2.size(); ++i) {
    preds << test2.samples[i].id << ',' << test2.label_name(*test2.samples[i].label) << ','
          << (mapped[i] == kNoClass ? std::string("unmatched") : test2.label_name(mapped[i])) << ','
          << test2.label_name(pred[i]) << '\n';
  }
  write_text(ctx.out("predictions.csv"), preds.str());
  write_text(ctx.out("report.csv"), csv.str());
  write_text(ctx.out("report.txt"), kv.str());
}

}  // namespace stages

// ---------------------------------------------------------------------------
// Commands.

/// Runs one stage for one method and records it in the manifest.
inline void run_stage(Stage s, Method m, const WorkflowConfig& cfg) {
  cfg.validate(s == Stage::Pretrain);
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  StageContext ctx(cfg, s, m);
  try {
    switch (s) {
      case Stage::Pretrain: stages::pretrain(ctx); break;
      case Stage::Classify: stages::classify(ctx); break;
      case Stage::Detect: stages::detect(ctx); break;
      case Stage::Discover: stages::discover(ctx); break;
      case Stage::Continual: stages::continual(ctx); break;
      case Stage::Evaluate: stages::evaluate(ctx); break;
    }
  } catch (const MissingArtifact&) {
    throw;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(s, std::string(to_string(m)) + ": " + e.what());
  }
  const double ms = std::chrono::duration<double, std::milli>(clock::now() - start).count();
  record_stage(cfg.out, cfg, ctx.entry(ms));
}

/// Every stage in workflow order, for every configured method.
inline void run_workflow(const WorkflowConfig& cfg, std::ostream* progress = nullptr) {
  cfg.validate(true);
  for (Method m : cfg.methods) {
    for (Stage s : kStages) {
      run_stage(s, m, cfg);
      if (progress) *progress << "stage=" << to_string(s) << " method=" << to_string(m) << " ok\n";
    }
  }
}

// ---------------------------------------------------------------------------
// Consolidated report.

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::string csv() const {
    std::ostringstream os;
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << cells[i];
      os << '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
    return os.str();
  }

  std::string text() const {
    std::vector<std::size_t> w(header.size(), 0);
    for (std::size_t i = 0; i < header.size(); ++i) w[i] = header[i].size();
    for (const auto& r : rows) {
      for (std::size_t i = 0; i < r.size(); ++i) w[i] = std::max(w[i], r[i].size());
    }
    std::ostringstream os;
    auto line = [&](const std::vector<std::string>& cells) {
      std::string s;
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) s += "  ";
        s += i == 0 ? cells[i] + std::string(w[i] - cells[i].size(), ' ')
                    : std::string(w[i] - cells[i].size(), ' ') + cells[i];
      }
      s.erase(s.find_last_not_of(' ') + 1);
      os << s << '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
    return os.str();
  }
};

namespace detail {

/// Metric cells for `keys` from a stage's key-value report, or "unavailable".
inline std::vector<std::string> metric_cells(const fs::path& root, const nlohmann::json& manifest, Stage s,
                                             Method m, const std::string& file,
                                             const std::vector<std::string>& keys) {
  std::vector<std::string> cells;
  const auto entry = find_stage(manifest, s, m);
  const fs::path p = root / to_string(m) / to_string(s) / file;
  if (!entry || !fs::is_regular_file(p)) return std::vector<std::string>(keys.size(), "unavailable");
  const auto kv = read_key_values(p);
  for (const auto& k : keys) {
    auto it = kv.find(k);
    cells.push_back(it == kv.end() ? "unavailable" : it->second);
  }
  return cells;
}

inline std::vector<std::string> row(std::string label, std::vector<std::string> cells) {
  cells.insert(cells.begin(), std::move(label));
  return cells;
}

}  // namespace detail

/// The four task tables from the artifacts listed in the manifest.
inline std::array<Table, 4> build_tables(const fs::path& root) {
  const auto manifest = read_manifest(root);
  std::vector<Method> methods;
  for (Method m : {Method::Scl, Method::Ft}) {
    for (Stage s : kStages) {
      if (find_stage(manifest, s, m)) {
        methods.push_back(m);
        break;
      }
    }
  }
  std::array<Table, 4> t;
  t[0].header = {"method", "Micro F1", "Macro F1"};
  t[1].header = {"method", "AUROC", "AUPR", "FPR90"};
  t[2].header = {"method", "NMI", "ARI", "ACC"};
  t[3].header = {"method", "slice", "Micro F1", "Macro F1"};
  for (Method m : methods) {
    const std::string name = to_string(m);
    const auto cells = [&](Stage s, const std::string& file, const std::vector<std::string>& keys) {
      return detail::metric_cells(root, manifest, s, m, file, keys);
    };
    if (m == Method::Scl) {
      t[0].rows.push_back(detail::row(name, cells(Stage::Classify, "report.txt", {"Micro F1", "Macro F1"})));
    } else {
      t[0].rows.push_back(detail::row("ft-ndist", cells(Stage::Classify, "report.txt", {"Micro F1", "Macro F1"})));
      t[0].rows.push_back(detail::row("ft-fc", cells(Stage::Classify, "report_fc.txt", {"Micro F1", "Macro F1"})));
    }
    t[1].rows.push_back(detail::row(name, cells(Stage::Detect, "report.txt", {"AUROC", "AUPR", "FPR90"})));
    t[2].rows.push_back(detail::row(name, cells(Stage::Discover, "report.txt", {"NMI", "ARI", "ACC"})));
    for (const char* slice : {"overall", "on_ind", "on_ood", "ref_on_ind"}) {
      const std::string s(slice);
      auto r = cells(Stage::Evaluate, "report.txt", {s + "/Micro F1", s + "/Macro F1"});
      r.insert(r.begin(), s);
      t[3].rows.push_back(detail::row(name, r));
    }
  }
  return t;
}

/// Test II embeddings from each method's latest encoder: method, id, label, e0..
inline std::string embedding_dump(const fs::path& root) {
  const auto manifest = read_manifest(root);
  std::ostringstream os;
  bool header = false;
  for (Method m : {Method::Scl, Method::Ft}) {
    std::optional<Stage> src;
    if (find_stage(manifest, Stage::Continual, m)) {
      src = Stage::Continual;
    } else if (find_stage(manifest, Stage::Pretrain, m)) {
      src = Stage::Pretrain;
    }
    if (!src) continue;
    const fs::path enc_path = root / to_string(m) / to_string(*src) / "encoder.enc";
    const fs::path cat_path = root / "data" / "catalog.json";
    const fs::path data_path = root / "data" / "test2.jsonl";
    if (!fs::is_regular_file(enc_path) || !fs::is_regular_file(cat_path) || !fs::is_regular_file(data_path)) continue;
    const auto cat = read_catalog(cat_path);
    const Dataset test2 = load_with_catalog(data_path, cat);
    const Matrix h = encode(load_encoder(enc_path.string()), test2);
    if (!header) {
      os << "method,id,label";
      for (Eigen::Index j = 0; j < h.cols(); ++j) os << ",e" << j;
      os << '\n';
      header = true;
    }
    for (std::size_t i = 0; i < test2.size(); ++i) {
      os << to_string(m) << ',' << test2.samples[i].id << ',' << test2.label_name(*test2.samples[i].label);
      for (Eigen::Index j = 0; j < h.cols(); ++j) os << ',' << fmt_real(h(static_cast<Eigen::Index>(i), j), 9);
      os << '\n';
    }
  }
  return os.str();
}

/// Writes report/table{1..4}.{csv,txt} and report/embeddings.csv. Returns the written paths.
inline std::vector<fs::path> render_report(const fs::path& root, bool csv = true, bool txt = true) {
  const auto tables = build_tables(root);
  const fs::path dir = root / "report";
  std::vector<fs::path> written;
  for (std::size_t i = 0; i < tables.size(); ++i) {
    const std::string stem = "table" + std::to_string(i + 1);
    if (csv) {
      written.push_back(dir / (stem + ".csv"));
      write_text(written.back(), tables[i].csv());
    }
    if (txt) {
      written.push_back(dir / (stem + ".txt"));
      write_text(written.back(), tables[i].text());
    }
  }
  written.push_back(dir / "embeddings.csv");
  write_text(written.back(), embedding_dump(root));
  return written;
}

// ---------------------------------------------------------------------------
// Exit-code wrappers.

template <typename Fn>
int guarded(Fn&& fn, std::ostream& err) {
  try {
    fn();
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const MissingArtifact& e) {
    err << "error: " << e.what() << '\n';
    return kExitMissing;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitStage;
  }
}

inline int cmd_workflow(const WorkflowConfig& cfg, std::ostream& log, std::ostream& err) {
  return guarded(
      [&] {
        run_workflow(cfg, &log);
        render_report(cfg.out, cfg.emit_csv, cfg.emit_txt);
      },
      err);
}

inline int cmd_stage(Stage s, const WorkflowConfig& cfg, std::ostream& log, std::ostream& err) {
  return guarded(
      [&] {
        for (Method m : cfg.methods) {
          run_stage(s, m, cfg);
          log << "stage=" << to_string(s) << " method=" << to_string(m) << " ok\n";
        }
      },
      err);
}

inline int cmd_report(const fs::path& root, bool csv, bool txt, std::ostream& log, std::ostream& err) {
  return guarded(
      [&] {
        for (const auto& p : render_report(root, csv, txt)) log << p.string() << '\n';
      },
      err);
}

}  // namespace sclqa
