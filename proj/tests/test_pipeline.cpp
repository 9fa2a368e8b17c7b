#include "sclqa/pipeline.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <sstream>

using namespace sclqa;

namespace {

/// Fresh directory under the system temp root, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / ("sclqa_test_" + name)) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

/// Small synthetic run: 8 intents (6 known, 2 unknown), a few epochs.
WorkflowConfig small_config(const fs::path& out, std::vector<Method> methods = {Method::Scl}) {
  WorkflowConfig c;
  c.seed = 3;
  c.out = out.string();
  c.data.synthetic = true;
  c.data.classes = 8;
  c.data.per_class = 60;
  c.data.dim = 8;
  c.data.separation = 7.0;
  c.train.max_epochs = 4;
  c.methods = std::move(methods);
  return c;
}

/// Relative path -> contents for every file under `root`, minus the ones
/// that carry wall-clock times or absolute paths.
std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const auto name = e.path().filename().string();
    if (name == "manifest.json" || name == "train_log.txt") continue;
    out[fs::relative(e.path(), root).generic_string()] = read_text(e.path());
  }
  return out;
}

int run_workflow_quiet(const WorkflowConfig& cfg, std::string* err_text = nullptr) {
  std::ostringstream log, err;
  const int rc = cmd_workflow(cfg, log, err);
  if (err_text) *err_text = err.str();
  return rc;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

TEST(Config, ParsesSectionsAndResolvesPaths) {
  std::istringstream in(
      "[run]\nseed = 7\nout = runs/a\nmethod = both\nformats = csv\n"
      "[data]\ninput = data/train.jsonl\n"
      "[train]\ntemperature = 0.05\nmax_epochs = 3\ninclusive_denominator = yes\n"
      "[detect]\ntarget_tpr = 0.85\n[discover]\nk = 5\n");
  const auto c = parse_config(in, "/base");
  EXPECT_EQ(*c.seed, 7u);
  EXPECT_EQ(c.out, "/base/runs/a");
  EXPECT_EQ(c.data.input, "/base/data/train.jsonl");
  EXPECT_EQ(c.methods, (std::vector<Method>{Method::Scl, Method::Ft}));
  EXPECT_TRUE(c.emit_csv);
  EXPECT_FALSE(c.emit_txt);
  EXPECT_EQ(c.train.temperature, 0.05);
  EXPECT_EQ(c.train.max_epochs, 3);
  EXPECT_TRUE(c.train.inclusive_denominator);
  EXPECT_EQ(c.train_config().target_tpr, 0.85);
  EXPECT_EQ(c.train_config().seed, 7u);
  EXPECT_EQ(c.k, 5);
  EXPECT_EQ(c.segmentation_seed(), derive_seed(7, 1));
  EXPECT_EQ(c.splitting_seed(), derive_seed(7, 2));
}

TEST(Config, TreeRoundTrip) {
  auto c = small_config("/tmp/x", {Method::Ft});
  c.target_tpr = 0.8;
  c.segment_seed = 99;
  c.gold_replay = true;
  const auto back = config_from_tree(config_to_tree(c));
  std::ostringstream a, b;
  boost::property_tree::write_ini(a, config_to_tree(c));
  boost::property_tree::write_ini(b, config_to_tree(back));
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(back.segmentation_seed(), 99u);
}

TEST(Config, Errors) {
  for (const char* text : {"[run]\nseed = 1\nbogus = 2\n", "[nope]\nx = 1\n", "[run]\nseed = one\n",
                           "[train]\ninclusive_denominator = maybe\n", "[run]\nformats = pdf\n",
                           "[run]\nmethod = svm\n", "[run\nseed=1\n"}) {
    std::istringstream in(text);
    EXPECT_THROW(parse_config(in), ConfigError) << text;
  }
  WorkflowConfig c = small_config("/tmp/x");
  c.seed.reset();
  EXPECT_THROW(c.validate(true), ConfigError);
  c = small_config("/tmp/x");
  c.train.temperature = 0.0;
  EXPECT_THROW(c.validate(true), ConfigError);
  c = small_config("/tmp/x");
  c.data.input = "/tmp/also.jsonl";
  EXPECT_THROW(c.validate(true), ConfigError);
}

TEST(Workflow, MissingDatasetIsAConfigErrorBeforeAnyWork) {
  TempDir tmp("missing_data");
  WorkflowConfig c = small_config(tmp.path() / "run");
  c.data = {};
  c.data.input = (tmp.path() / "absent.jsonl").string();
  std::string err;
  EXPECT_EQ(run_workflow_quiet(c, &err), kExitConfig);
  EXPECT_NE(err.find("absent.jsonl"), std::string::npos);
  EXPECT_FALSE(fs::exists(tmp.path() / "run"));
}

// ---------------------------------------------------------------------------
// Stages

TEST(Stages, DiscoverBeforeDetectNamesTheDetectOutput) {
  TempDir tmp("order");
  const auto c = small_config(tmp.path());
  std::ostringstream log, err;
  ASSERT_EQ(cmd_stage(Stage::Pretrain, c, log, err), kExitOk) << err.str();
  EXPECT_EQ(cmd_stage(Stage::Discover, c, log, err), kExitMissing);
  EXPECT_NE(err.str().find("detected_ood.jsonl"), std::string::npos);
  EXPECT_NE(err.str().find("'detect'"), std::string::npos);
}

TEST(Stages, ClassifyNeedsPretrain) {
  TempDir tmp("nopre");
  const auto c = small_config(tmp.path());
  std::ostringstream log, err;
  EXPECT_EQ(cmd_stage(Stage::Classify, c, log, err), kExitMissing);
  EXPECT_NE(err.str().find("'pretrain'"), std::string::npos);
}

TEST(Stages, FailingStageExitsWithStageName) {
  TempDir tmp("fail");
  auto c = small_config(tmp.path());
  std::ostringstream log, err;
  ASSERT_EQ(cmd_stage(Stage::Pretrain, c, log, err), kExitOk);
  ASSERT_EQ(cmd_stage(Stage::Detect, c, log, err), kExitOk);
  c.k = 100000;
  EXPECT_EQ(cmd_stage(Stage::Discover, c, log, err), kExitStage);
  EXPECT_NE(err.str().find("stage 'discover' failed"), std::string::npos);
  // Earlier artifacts stay in place.
  EXPECT_TRUE(fs::is_regular_file(tmp.path() / "scl" / "detect" / "detected_ood.jsonl"));
}

TEST(Stages, TargetTprOverrideIsRecorded) {
  TempDir tmp("tpr");
  auto c = small_config(tmp.path());
  std::ostringstream log, err;
  ASSERT_EQ(cmd_stage(Stage::Pretrain, c, log, err), kExitOk);
  c.target_tpr = 0.8;
  ASSERT_EQ(cmd_stage(Stage::Detect, c, log, err), kExitOk);
  const auto j = nlohmann::json::parse(read_text(tmp.path() / "scl" / "detect" / "calibration.json"));
  EXPECT_EQ(std::stod(j["target_tpr"].get<std::string>()), 0.8);
  EXPECT_GE(std::stod(j["achieved_tpr"].get<std::string>()), 0.8);
  EXPECT_EQ(j["calibrated_on"], "val");
  EXPECT_EQ(config_from_manifest(tmp.path()).target_tpr, 0.8);
}

TEST(Stages, SeparateRunsMatchTheWorkflow) {
  TempDir a("iso_a"), b("iso_b");
  const auto ca = small_config(a.path(), {Method::Scl, Method::Ft});
  ASSERT_EQ(run_workflow_quiet(ca), kExitOk);
  const auto cb = small_config(b.path(), {Method::Scl, Method::Ft});
  std::ostringstream log, err;
  for (Stage s : kStages) ASSERT_EQ(cmd_stage(s, cb, log, err), kExitOk) << err.str();
  ASSERT_EQ(cmd_report(b.path(), true, true, log, err), kExitOk);
  const auto sa = snapshot(a.path()), sb = snapshot(b.path());
  ASSERT_EQ(sa.size(), sb.size());
  for (const auto& [rel, text] : sa) {
    ASSERT_TRUE(sb.count(rel)) << rel;
    EXPECT_EQ(text, sb.at(rel)) << rel;
  }
}

TEST(Workflow, ManifestListsEveryStageWithMatchingHashes) {
  TempDir tmp("manifest");
  ASSERT_EQ(run_workflow_quiet(small_config(tmp.path())), kExitOk);
  const auto m = read_manifest(tmp.path());
  ASSERT_EQ(m["stages"].size(), kStages.size());
  for (std::size_t i = 0; i < kStages.size(); ++i) {
    const auto& e = m["stages"][i];
    EXPECT_EQ(e["stage"], to_string(kStages[i]));
    EXPECT_EQ(e["seed"], 3);
    EXPECT_FALSE(e["outputs"].empty());
    for (const auto& o : e["outputs"]) {
      EXPECT_EQ(o["hash"], file_hash(tmp.path() / o["path"].get<std::string>())) << o["path"];
    }
  }
  const auto kv = read_key_values(tmp.path() / "scl" / "evaluate" / "report.txt");
  for (const char* key : {"overall/Macro F1", "on_ind/Macro F1", "on_ood/Macro F1", "ref_on_ind/Macro F1"}) {
    EXPECT_TRUE(kv.count(key)) << key;
  }
  const auto clusters = read_text(tmp.path() / "scl" / "discover" / "clusters.csv");
  EXPECT_EQ(clusters.substr(0, clusters.find('\n')), "id,cluster,minted_id,label,gold");
}

// ---------------------------------------------------------------------------
// Report

TEST(Report, OnlyPretrainMarksTablesUnavailable) {
  TempDir tmp("report_partial");
  const auto c = small_config(tmp.path());
  std::ostringstream log, err;
  ASSERT_EQ(cmd_stage(Stage::Pretrain, c, log, err), kExitOk);
  ASSERT_EQ(cmd_report(tmp.path(), true, true, log, err), kExitOk) << err.str();
  for (int t = 1; t <= 4; ++t) {
    const auto csv = read_text(tmp.path() / "report" / ("table" + std::to_string(t) + ".csv"));
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    int rows = 0;
    while (std::getline(in, line)) {
      ++rows;
      EXPECT_EQ(line.find_first_of("0123456789"), std::string::npos) << line;
      EXPECT_NE(line.find("unavailable"), std::string::npos);
    }
    EXPECT_GE(rows, 1);
  }
  EXPECT_NE(read_text(tmp.path() / "report" / "embeddings.csv").find("method,id,label,e0"), std::string::npos);
}

TEST(Report, IdempotentAndRejectsCorruptManifest) {
  TempDir tmp("report_full");
  ASSERT_EQ(run_workflow_quiet(small_config(tmp.path())), kExitOk);
  const auto first = snapshot(tmp.path() / "report");
  EXPECT_EQ(first.size(), 9u);
  std::ostringstream log, err;
  ASSERT_EQ(cmd_report(tmp.path(), true, true, log, err), kExitOk);
  EXPECT_EQ(snapshot(tmp.path() / "report"), first);

  write_text(manifest_path(tmp.path()), "{ not json");
  EXPECT_EQ(cmd_report(tmp.path(), true, true, log, err), kExitStage);
  EXPECT_NE(err.str().find("corrupt manifest"), std::string::npos);
}

// ---------------------------------------------------------------------------
// Command-line binary

namespace {

int cli(const std::string& args) {
  const std::string cmd = std::string(SCLQA_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Cli, ExitCodes) {
  TempDir tmp("cli");
  const std::string out = "--out " + (tmp.path() / "run").string();
  EXPECT_EQ(cli("workflow --config " + (tmp.path() / "nope.ini").string() + " " + out), kExitConfig);
  EXPECT_EQ(cli("workflow --data " + (tmp.path() / "nope.jsonl").string() + " --seed 1 " + out), kExitConfig);
  EXPECT_EQ(cli("workflow " + out), kExitConfig);  // no seed
  EXPECT_EQ(cli("evaluate --seed 1 " + out), kExitMissing);
  EXPECT_EQ(cli("report " + out), kExitStage);
}

TEST(Cli, FlagsOverrideConfigAndPersist) {
  TempDir tmp("cli_flags");
  const auto ini = tmp.path() / "run.ini";
  write_text(ini,
             "[run]\nseed = 3\nout = run\n[data]\nsynthetic = true\nsynthetic_classes = 8\n"
             "synthetic_per_class = 60\nsynthetic_dim = 8\nsynthetic_separation = 7\n[train]\nmax_epochs = 2\n");
  ASSERT_EQ(cli("pretrain --config " + ini.string() + " --seed 5"), kExitOk);
  const fs::path run = tmp.path() / "run";
  EXPECT_EQ(read_manifest(run)["seed"], 5);
  ASSERT_EQ(cli("detect --out " + run.string() + " --target-tpr 0.8"), kExitOk);
  const auto cfg = config_from_manifest(run);
  EXPECT_EQ(cfg.target_tpr, 0.8);
  EXPECT_EQ(*cfg.seed, 5u);
  EXPECT_EQ(cfg.train.max_epochs, 2);
}
