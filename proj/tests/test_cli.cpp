#include <doctest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <json.hpp>
#include <map>
#include <string>

#include "drasmil/bench.hpp"
#include "drasmil/eval.hpp"
#include "drasmil/image.hpp"
#include "drasmil/model.hpp"
#include "drasmil/slide.hpp"
#include "drasmil/tune.hpp"
#include "test_support.hpp"

using namespace drasmil;
using testsupport::TempDir;

namespace {

namespace fs = std::filesystem;

const char* cli_path() {
  const char* path = std::getenv("DRASMIL_CLI");
  REQUIRE_MESSAGE(path != nullptr, "DRASMIL_CLI must point at the drasmil binary");
  return path;
}

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
};

RunResult run_cli(const TempDir& dir, const std::string& args) {
  const std::string out_file = dir.file("._stdout");
  const std::string err_file = dir.file("._stderr");
  const std::string cmd =
      std::string(cli_path()) + " " + args + " >" + out_file + " 2>" + err_file;
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = testsupport::slurp(out_file);
  r.err = testsupport::slurp(err_file);
  return r;
}

// Relative path -> raw bytes for every regular file under root.
std::map<std::string, std::string> dir_snapshot(const std::string& root) {
  std::map<std::string, std::string> files;
  for (const auto& entry : fs::recursive_directory_iterator(root))
    if (entry.is_regular_file())
      files[fs::relative(entry.path(), root).string()] =
          testsupport::slurp(entry.path().string());
  return files;
}

// Shared dataset: 12 bags over 6 patients (2 slides each, labels alternate),
// then 3-fold models; built once because several cases reuse it.
struct Workspace {
  TempDir dir{"cli"};
  std::string data;
  std::string models;

  Workspace() {
    data = dir.file("data");
    models = dir.file("models");
    const RunResult synth = run_cli(
        dir, "synth --out " + data +
                 " --bags 12 --patients 6 --grid-width 8 --grid-height 8"
                 " --fraction 0.2 --dim 4 --seed 9");
    REQUIRE_MESSAGE(synth.code == 0, synth.err);
    const RunResult train = run_cli(
        dir, "train --manifest " + data + "/manifest.csv --out " + models +
                 " --folds 3 --epochs 3 --attention-dim 4 --seed 5");
    REQUIRE_MESSAGE(train.code == 0, train.err);
  }
};

Workspace& workspace() {
  static Workspace ws;
  return ws;
}

}  // namespace

TEST_CASE("cli rejects bare invocation and offers help") {
  TempDir dir("cli-help");
  CHECK(run_cli(dir, "").code != 0);
  const RunResult help = run_cli(dir, "--help");
  CHECK(help.code == 0);
  CHECK(help.out.find("synth") != std::string::npos);
  CHECK(help.out.find("eval") != std::string::npos);
  CHECK(run_cli(dir, "transmogrify").code != 0);
}

TEST_CASE("synth writes a deterministic dataset") {
  TempDir dir("cli-synth");
  const std::string args =
      " --bags 6 --patients 3 --grid-width 6 --grid-height 5 --fraction 0.2"
      " --dim 4 --seed 11";
  REQUIRE(run_cli(dir, "synth --out " + dir.file("a") + args).code == 0);

  const auto manifest = manifest_read(dir.file("a") + "/manifest.csv");
  REQUIRE(manifest.size() == 6);
  const int expected_labels[] = {0, 1, 0, 0, 1, 0};
  for (int b = 0; b < 6; ++b) {
    CHECK(manifest[static_cast<std::size_t>(b)].slide_id[0] == 's');
    CHECK(manifest[static_cast<std::size_t>(b)].label == expected_labels[b]);
  }
  CHECK(manifest[0].patient_id == manifest[3].patient_id);  // bag % patients
  CHECK(manifest[0].patient_id != manifest[1].patient_id);

  const Bag bag = cache_read(dir.file("a") + "/" + manifest[0].path);
  CHECK(bag.size() == 30);
  CHECK(bag.dim() == 4);
  CHECK(fs::exists(dir.file("a") + "/synth_meta.json"));

  REQUIRE(run_cli(dir, "synth --out " + dir.file("b") + args).code == 0);
  CHECK(dir_snapshot(dir.file("a")) == dir_snapshot(dir.file("b")));
  REQUIRE(run_cli(dir, "synth --out " + dir.file("c") +
                           " --bags 6 --patients 3 --grid-width 6 --grid-height 5"
                           " --fraction 0.2 --dim 4 --seed 12")
              .code == 0);
  CHECK(dir_snapshot(dir.file("a")) != dir_snapshot(dir.file("c")));
}

TEST_CASE("patch encodes a ppm raster into a feature cache") {
  TempDir dir("cli-patch");
  Image img(8, 8);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) img.set(x, y, 210, 60, static_cast<std::uint8_t>(30 * x));
  write_ppm(img, dir.file("slide.ppm"));

  const std::string args = "patch --image " + dir.file("slide.ppm") + " --out " +
                           dir.file("a") +
                           " --slide-id sl --patient-id pt --label 1 --patch-size 4"
                           " --dim 6 --seed 3";
  REQUIRE(run_cli(dir, args).code == 0);
  const Bag bag = cache_read(dir.file("a") + "/sl.drasfeat");
  CHECK(bag.size() == 4);
  CHECK(bag.dim() == 6);
  CHECK(bag.label == 1);
  CHECK(bag.slide_id == "sl");
  CHECK(bag.coords == std::vector<GridCoord>{{0, 0}, {1, 0}, {0, 1}, {1, 1}});
  CHECK(fs::exists(dir.file("a") + "/patch_meta.json"));

  const std::string first = testsupport::slurp(dir.file("a") + "/sl.drasfeat");
  REQUIRE(run_cli(dir, "patch --image " + dir.file("slide.ppm") + " --out " +
                           dir.file("b") +
                           " --slide-id sl --patient-id pt --label 1 --patch-size 4"
                           " --dim 6 --seed 3")
              .code == 0);
  CHECK(testsupport::slurp(dir.file("b") + "/sl.drasfeat") == first);

  Image grey(8, 8);
  for (auto& p : grey.pixels) p = 235;
  write_ppm(grey, dir.file("grey.ppm"));
  const RunResult empty = run_cli(dir, "patch --image " + dir.file("grey.ppm") +
                                           " --out " + dir.file("c"));
  CHECK(empty.code == 1);
  CHECK(empty.err.find("error:") != std::string::npos);
}

TEST_CASE("train produces per-fold models and logs") {
  Workspace& ws = workspace();

  const auto folds = nlohmann::json::parse(
      testsupport::slurp(ws.models + "/folds.json"));
  CHECK(folds["n_folds"] == 3);
  CHECK(folds["slide_folds"].size() == 12);
  CHECK(folds["patient_folds"].size() == 6);

  for (int f = 0; f < 3; ++f) {
    const Checkpoint ckpt =
        checkpoint_read(ws.models + "/model_fold" + std::to_string(f) + ".ckpt");
    CHECK(ckpt.params.embedding_dim() == 4);
    CHECK(ckpt.params.attention_dim() == 4);
    const auto meta = nlohmann::json::parse(ckpt.metadata_json);
    CHECK(meta.contains("best_epoch"));
    CHECK(meta.contains("learning_rate"));
    const std::string log =
        testsupport::slurp(ws.models + "/train_log_fold" + std::to_string(f) + ".csv");
    CHECK(log.rfind("epoch,train_loss,val_loss\n", 0) == 0);
  }
  CHECK(fs::exists(ws.models + "/train_meta.json"));

  // Re-training with more workers yields byte-identical artifacts.
  const std::string again = ws.dir.file("models-again");
  REQUIRE(run_cli(ws.dir, "train --manifest " + ws.data + "/manifest.csv --out " +
                              again +
                              " --folds 3 --epochs 3 --attention-dim 4 --seed 5"
                              " --workers 3")
              .code == 0);
  CHECK(dir_snapshot(ws.models) == dir_snapshot(again));
}

TEST_CASE("eval scores a manifest against fold models") {
  Workspace& ws = workspace();
  const std::string base = "eval --manifest " + ws.data + "/manifest.csv --model-dir " +
                           ws.models + " --repeats 2 --seed 4";
  REQUIRE(run_cli(ws.dir, base + " --out " + ws.dir.file("eval-a")).code == 0);

  const PredictionTable table =
      prediction_table_read(ws.dir.file("eval-a") + "/predictions.csv");
  REQUIRE(table.rows.size() == 12);
  CHECK(table.probs.cols() == 2);
  for (Index i = 0; i < 12; ++i) {
    CHECK(table.probs(i, 0) == table.probs(i, 1));  // full method is constant
    CHECK(table.probs(i, 0) >= 0.0);
    CHECK(table.probs(i, 0) <= 1.0);
  }

  const auto metrics = nlohmann::json::parse(
      testsupport::slurp(ws.dir.file("eval-a") + "/metrics.json"));
  CHECK(metrics["auc"].get<double>() >= 0.0);
  CHECK(metrics["auc"].get<double>() <= 1.0);
  CHECK(metrics["meta"]["method"] == "full");
  const auto boot = nlohmann::json::parse(
      testsupport::slurp(ws.dir.file("eval-a") + "/bootstrap.json"));
  CHECK(boot["auc"]["std"] == 0.0);  // identical repeat columns
  CHECK(fs::exists(ws.dir.file("eval-a") + "/eval_meta.json"));

  REQUIRE(run_cli(ws.dir, base + " --workers 3 --out " + ws.dir.file("eval-b")).code == 0);
  CHECK(dir_snapshot(ws.dir.file("eval-a")) == dir_snapshot(ws.dir.file("eval-b")));
}

TEST_CASE("eval supports sampled methods and single checkpoints") {
  Workspace& ws = workspace();
  const std::string dras = "eval --manifest " + ws.data + "/manifest.csv --model-dir " +
                           ws.models +
                           " --method dras --budget 20 --iterations 2 --final-extra 4"
                           " --neighbours 8 --repeats 2 --seed 7";
  REQUIRE(run_cli(ws.dir, dras + " --out " + ws.dir.file("eval-d1")).code == 0);
  REQUIRE(run_cli(ws.dir, dras + " --workers 2 --out " + ws.dir.file("eval-d2")).code == 0);
  CHECK(dir_snapshot(ws.dir.file("eval-d1")) == dir_snapshot(ws.dir.file("eval-d2")));

  const PredictionTable table =
      prediction_table_read(ws.dir.file("eval-d1") + "/predictions.csv");
  bool spread = false;
  for (Index i = 0; i < table.probs.rows(); ++i)
    if (table.probs(i, 0) != table.probs(i, 1)) spread = true;
  CHECK(spread);  // subsampling varies across repeats

  REQUIRE(run_cli(ws.dir, "eval --manifest " + ws.data +
                              "/manifest.csv --checkpoint " + ws.models +
                              "/model_fold0.ckpt --repeats 1 --out " +
                              ws.dir.file("eval-c"))
              .code == 0);
  const PredictionTable single =
      prediction_table_read(ws.dir.file("eval-c") + "/predictions.csv");
  CHECK(single.rows.size() == 12);

  const RunResult neither = run_cli(ws.dir, "eval --manifest " + ws.data +
                                                "/manifest.csv --out " +
                                                ws.dir.file("eval-x"));
  CHECK(neither.code == 1);
  CHECK(neither.err.find("error:") != std::string::npos);
  const RunResult both = run_cli(
      ws.dir, "eval --manifest " + ws.data + "/manifest.csv --model-dir " + ws.models +
                  " --checkpoint " + ws.models + "/model_fold0.ckpt --out " +
                  ws.dir.file("eval-y"));
  CHECK(both.code == 1);
  CHECK(both.err.find("error:") != std::string::npos);
}

TEST_CASE("heatmap exports weight and attention maps") {
  Workspace& ws = workspace();
  const auto manifest = manifest_read(ws.data + "/manifest.csv");
  const std::string cache = ws.data + "/" + manifest[0].path;
  const std::string args = "heatmap --cache " + cache + " --checkpoint " + ws.models +
                           "/model_fold0.ckpt --method dras --budget 20 --iterations 2"
                           " --final-extra 4 --neighbours 8 --seed 4";
  REQUIRE(run_cli(ws.dir, args + " --out " + ws.dir.file("heat-a")).code == 0);

  for (const char* name : {"weights.pgm", "weights.csv", "attention.pgm",
                           "attention.csv", "trace.csv", "heatmap_meta.json"})
    CHECK(fs::exists(ws.dir.file("heat-a") + "/" + name));
  CHECK(testsupport::slurp(ws.dir.file("heat-a") + "/weights.pgm").substr(0, 3) == "P5\n");
  const std::string trace = testsupport::slurp(ws.dir.file("heat-a") + "/trace.csv");
  CHECK(trace.rfind("iteration,patch,grid_x,grid_y,drawn_randomly,weight_at_draw,"
                    "attention\n", 0) == 0);

  REQUIRE(run_cli(ws.dir, args + " --out " + ws.dir.file("heat-b")).code == 0);
  CHECK(dir_snapshot(ws.dir.file("heat-a")) == dir_snapshot(ws.dir.file("heat-b")));
}

TEST_CASE("bench writes a parseable report") {
  TempDir dir("cli-bench");
  const RunResult r = run_cli(
      dir, "bench --out " + dir.file("a") +
               " --bags 1 --patches 32 --patch-size 4 --dim 4 --attention-dim 4"
               " --batch-sizes 4,8 --methods full,dras --reps 1 --budget 16"
               " --iterations 2 --final-extra 4 --neighbours 4 --seed 2");
  REQUIRE_MESSAGE(r.code == 0, r.err);

  const BenchReport report =
      report_parse_csv(testsupport::slurp(dir.file("a") + "/bench.csv"));
  REQUIRE(report.cells.size() == 4);
  CHECK(report.cells[0].method == Method::full);
  CHECK(report.cells[0].patches_encoded == 32);
  CHECK(report.cells[1].method == Method::dras);
  CHECK(report.cells[1].patches_encoded == 16);
  CHECK(!testsupport::slurp(dir.file("a") + "/bench.txt").empty());
  CHECK(fs::exists(dir.file("a") + "/bench_meta.json"));
}

TEST_CASE("tune searches training hyperparameters") {
  Workspace& ws = workspace();
  const RunResult r = run_cli(
      ws.dir, "tune --mode train --manifest " + ws.data + "/manifest.csv --out " +
                  ws.dir.file("tune-t") +
                  " --trials 3 --repeats 1 --folds 3 --epochs 2 --attention-dim 4"
                  " --seed 6");
  REQUIRE_MESSAGE(r.code == 0, r.err);

  const std::string log = testsupport::slurp(ws.dir.file("tune-t") + "/tuning_log.csv");
  CHECK(std::count(log.begin(), log.end(), '\n') == 4);  // header + 3 trials
  CHECK(log.rfind("learning_rate,weight_decay,dropout,objective,seed\n", 0) == 0);

  const ParamSpace space = param_space_from_json(
      testsupport::slurp(ws.dir.file("tune-t") + "/space.json"));
  CHECK(space.params.size() == 3);

  const auto best = nlohmann::json::parse(
      testsupport::slurp(ws.dir.file("tune-t") + "/best.json"));
  CHECK(best.contains("trial"));
  CHECK(best.contains("objective"));
  CHECK(best["params"].contains("learning_rate"));
}

TEST_CASE("tune searches sampling parameters against a checkpoint") {
  Workspace& ws = workspace();
  const RunResult missing = run_cli(
      ws.dir, "tune --mode sampling --manifest " + ws.data + "/manifest.csv --out " +
                  ws.dir.file("tune-x") + " --trials 2");
  CHECK(missing.code == 1);
  CHECK(missing.err.find("error:") != std::string::npos);

  const RunResult r = run_cli(
      ws.dir, "tune --mode sampling --manifest " + ws.data + "/manifest.csv"
                  " --checkpoint " + ws.models + "/model_fold0.ckpt --out " +
                  ws.dir.file("tune-s") +
                  " --trials 2 --repeats 1 --folds 3 --budget 52 --final-extra 4"
                  " --seed 6");
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto best = nlohmann::json::parse(
      testsupport::slurp(ws.dir.file("tune-s") + "/best.json"));
  CHECK(best["params"].contains("iterations"));
  CHECK(best["params"].contains("sampling_random"));
}

TEST_CASE("config files provide defaults that flags override") {
  TempDir dir("cli-config");
  testsupport::spit(dir.file("config.json"),
                    R"({"bags": 4, "patients": 2, "grid-width": 5, "grid-height": 4,)"
                    R"( "fraction": 0.25, "dim": 3, "seed": 8})");
  REQUIRE(run_cli(dir, "synth --out " + dir.file("a") + " --config " +
                           dir.file("config.json"))
              .code == 0);
  const auto manifest = manifest_read(dir.file("a") + "/manifest.csv");
  CHECK(manifest.size() == 4);
  CHECK(cache_read(dir.file("a") + "/" + manifest[0].path).dim() == 3);

  REQUIRE(run_cli(dir, "synth --out " + dir.file("b") + " --config " +
                           dir.file("config.json") + " --bags 5")
              .code == 0);
  CHECK(manifest_read(dir.file("b") + "/manifest.csv").size() == 5);
}

TEST_CASE("failures exit nonzero with a clean message") {
  TempDir dir("cli-fail");
  const RunResult method = run_cli(
      dir, "eval --manifest nowhere.csv --checkpoint nowhere.ckpt --method teleport"
           " --out " + dir.file("x"));
  CHECK(method.code == 1);
  CHECK(method.err.find("error:") != std::string::npos);

  const RunResult manifest = run_cli(
      dir, "train --manifest " + dir.file("missing.csv") + " --out " + dir.file("y"));
  CHECK(manifest.code == 1);
  CHECK(manifest.err.find("error:") != std::string::npos);

  CHECK(run_cli(dir, "synth --out " + dir.file("z") + " --no-such-flag").code != 0);
}
