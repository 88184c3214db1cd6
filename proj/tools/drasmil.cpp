#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "drasmil/bench.hpp"
#include "drasmil/eval.hpp"
#include "drasmil/model.hpp"
#include "drasmil/parallel.hpp"
#include "drasmil/sampler.hpp"
#include "drasmil/slide.hpp"
#include "drasmil/tune.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace drasmil;

namespace {

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << content;
  if (!out) throw std::runtime_error("write failed: " + path);
  std::cerr << "wrote " << path << "\n";
}

std::string out_path(const std::string& dir, const std::string& name) {
  fs::create_directories(dir);
  return (fs::path(dir) / name).string();
}

// Pulls --config out of the argument list and splices the JSON file's entries
// in as flags right after the subcommand, skipping any key the command line
// already sets, so explicit flags always win.
std::vector<std::string> expand_config_args(int argc, char** argv) {
  std::vector<std::string> args;
  std::string config_path;
  for (int i = 0; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--config" && i + 1 < argc) {
      config_path = argv[++i];
    } else if (a.rfind("--config=", 0) == 0) {
      config_path = a.substr(9);
    } else {
      args.push_back(a);
    }
  }
  if (config_path.empty()) return args;

  std::size_t sub = 0;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (!args[i].empty() && args[i][0] != '-') {
      sub = i;
      break;
    }
  }
  if (sub == 0) return args;

  std::set<std::string> given;
  for (std::size_t i = sub + 1; i < args.size(); ++i) {
    if (args[i].rfind("--", 0) != 0) continue;
    given.insert(args[i].substr(0, args[i].find('=')));
  }

  const json cfg = json::parse(read_text(config_path));
  if (!cfg.is_object()) throw std::runtime_error(config_path + ": config must be a JSON object");
  std::vector<std::string> injected;
  for (const auto& [key, value] : cfg.items()) {
    if (key == "config") continue;
    const std::string flag = "--" + key;
    if (given.count(flag)) continue;
    if (value.is_boolean()) {
      if (value.get<bool>()) injected.push_back(flag);
    } else if (value.is_string()) {
      injected.push_back(flag + "=" + value.get<std::string>());
    } else if (value.is_array()) {
      std::string joined;
      for (const auto& item : value) {
        if (!joined.empty()) joined += ',';
        joined += item.is_string() ? item.get<std::string>() : item.dump();
      }
      injected.push_back(flag + "=" + joined);
    } else {
      injected.push_back(flag + "=" + value.dump());
    }
  }
  args.insert(args.begin() + static_cast<std::ptrdiff_t>(sub) + 1, injected.begin(),
              injected.end());
  return args;
}

struct DatasetEntry {
  ManifestEntry manifest;
  Bag bag;
};

std::vector<DatasetEntry> load_dataset(const std::string& manifest_path) {
  const auto entries = manifest_read(manifest_path);
  if (entries.empty()) throw std::runtime_error(manifest_path + ": manifest lists no slides");
  const fs::path base = fs::path(manifest_path).parent_path();
  std::vector<DatasetEntry> dataset;
  dataset.reserve(entries.size());
  for (const auto& e : entries) {
    fs::path p(e.path);
    if (p.is_relative()) p = base / p;
    Bag bag = cache_read(p.string());
    if (bag.slide_id != e.slide_id || bag.patient_id != e.patient_id || bag.label != e.label)
      throw std::runtime_error(p.string() + ": cache ids/label disagree with the manifest row for " +
                               e.slide_id);
    dataset.push_back({e, std::move(bag)});
  }
  return dataset;
}

std::vector<SlideInfo> slide_infos(const std::vector<DatasetEntry>& dataset) {
  std::vector<SlideInfo> slides;
  slides.reserve(dataset.size());
  for (const auto& d : dataset)
    slides.push_back({d.manifest.slide_id, d.manifest.patient_id, d.manifest.label});
  return slides;
}

LossMode parse_loss(const std::string& name) {
  if (name == "cross_entropy") return LossMode::cross_entropy;
  if (name == "balanced_cross_entropy") return LossMode::balanced_cross_entropy;
  throw std::runtime_error("unknown loss: " + name +
                           " (expected cross_entropy|balanced_cross_entropy)");
}

std::string loss_name(LossMode mode) {
  return mode == LossMode::cross_entropy ? "cross_entropy" : "balanced_cross_entropy";
}

json sampling_json(const SamplingConfig& s) {
  return {{"total_budget", s.total_budget},
          {"iterations", s.iterations},
          {"final_extra", s.final_extra},
          {"neighbours", s.neighbours},
          {"sampling_random", s.sampling_random},
          {"sampling_random_delta", s.sampling_random_delta}};
}

void add_sampling_flags(CLI::App* cmd, SamplingConfig& s) {
  cmd->add_option("--budget", s.total_budget, "total patch budget per bag");
  cmd->add_option("--iterations", s.iterations, "resampling iterations");
  cmd->add_option("--final-extra", s.final_extra, "patches drawn in the final step");
  cmd->add_option("--neighbours", s.neighbours, "nearest neighbours receiving weights");
  cmd->add_option("--rate", s.sampling_random, "starting random-draw fraction");
  cmd->add_option("--delta", s.sampling_random_delta,
                  "per-iteration decay of the random-draw fraction");
}

// ---------------------------------------------------------------------------
// synth

struct SynthOpts {
  std::string out;
  std::uint64_t seed = 0;
  int bags = 20;
  int patients = 0;  // 0 = bags / 2
  int grid_width = 100;
  int grid_height = 160;
  double fraction = 0.05;
  double shift = 2.0;
  double noise = 1.0;
  Index dim = 32;
};

void run_synth(const SynthOpts& o) {
  if (o.bags < 1) throw std::runtime_error("--bags must be positive");
  const int patients = o.patients > 0 ? o.patients : std::max(o.bags / 2, 1);
  if (patients > o.bags) throw std::runtime_error("--patients cannot exceed --bags");

  std::vector<ManifestEntry> manifest;
  for (int b = 0; b < o.bags; ++b) {
    const int patient = b % patients;
    char slide_id[16], patient_id[16];
    std::snprintf(slide_id, sizeof(slide_id), "s%04d", b);
    std::snprintf(patient_id, sizeof(patient_id), "p%04d", patient);
    SynthSpec spec;
    spec.grid_width = o.grid_width;
    spec.grid_height = o.grid_height;
    spec.region_fraction = o.fraction;
    spec.signal_shift = o.shift;
    spec.noise_scale = o.noise;
    spec.feature_dim = o.dim;
    spec.label = patient % 2;
    spec.slide_id = slide_id;
    spec.patient_id = patient_id;
    spec.seed = derive_seed(o.seed, "synth", static_cast<std::uint64_t>(b));
    const SynthBag synth = generate_synthetic(spec);
    const std::string cache_name = std::string(slide_id) + ".drasfeat";
    cache_write(synth.bag, out_path(o.out, cache_name));
    manifest.push_back({slide_id, patient_id, spec.label, cache_name});
  }
  manifest_write(manifest, out_path(o.out, "manifest.csv"));
  std::cerr << "wrote " << out_path(o.out, "manifest.csv") << "\n";

  const json meta = {{"command", "synth"},         {"seed", o.seed},
                     {"bags", o.bags},             {"patients", patients},
                     {"grid_width", o.grid_width}, {"grid_height", o.grid_height},
                     {"fraction", o.fraction},     {"shift", o.shift},
                     {"noise", o.noise},           {"dim", o.dim}};
  write_text(out_path(o.out, "synth_meta.json"), meta.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// patch

struct PatchOpts {
  std::string image;
  std::string out;
  std::string slide_id = "slide";
  std::string patient_id = "patient";
  int label = 0;
  int patch_size = 256;
  double threshold = 0.07;
  std::string encoder = "random_projection";
  Index dim = 1024;
  std::uint64_t seed = 0;
};

EncoderKind parse_encoder(const std::string& name) {
  if (name == "random_projection") return EncoderKind::random_projection;
  if (name == "color_histogram") return EncoderKind::color_histogram;
  throw std::runtime_error("unknown encoder: " + name +
                           " (expected random_projection|color_histogram)");
}

void run_patch(const PatchOpts& o) {
  const Image img = read_ppm(o.image);
  const TissueMask mask = tissue_mask(img, o.patch_size, o.threshold);
  const std::vector<RawPatch> patches = extract_grid(img, o.patch_size, mask);
  if (patches.empty())
    throw std::runtime_error(o.image + ": no tissue patches at patch size " +
                             std::to_string(o.patch_size));

  const PatchEncoder encoder(parse_encoder(o.encoder), o.dim,
                             derive_seed(o.seed, "encoder"));
  Bag bag;
  bag.slide_id = o.slide_id;
  bag.patient_id = o.patient_id;
  bag.label = o.label;
  bag.provenance = Bag::Provenance::raster;
  bag.coords.reserve(patches.size());
  for (const auto& p : patches) bag.coords.push_back(p.coord);
  bag.features = encoder.encode(patches);
  cache_write(bag, out_path(o.out, o.slide_id + ".drasfeat"));
  std::cerr << "wrote " << out_path(o.out, o.slide_id + ".drasfeat") << "\n";

  const json meta = {{"command", "patch"},         {"seed", o.seed},
                     {"image", o.image},           {"slide_id", o.slide_id},
                     {"patient_id", o.patient_id}, {"label", o.label},
                     {"patch_size", o.patch_size}, {"threshold", o.threshold},
                     {"encoder", o.encoder},       {"dim", o.dim},
                     {"patches", bag.size()}};
  write_text(out_path(o.out, "patch_meta.json"), meta.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// train

struct TrainOpts {
  std::string manifest;
  std::string out;
  std::uint64_t seed = 0;
  int workers = 1;
  int folds = 3;
  double learning_rate = 0.0038;
  double weight_decay = 0.00079;
  double dropout = 0.020;
  std::string loss = "cross_entropy";
  int epochs = 100;
  int patience = 20;
  Index attention_dim = 256;
  Index head_hidden = 0;
};

std::string fold_model_name(int fold) { return "model_fold" + std::to_string(fold) + ".ckpt"; }

void run_train(const TrainOpts& o) {
  const auto dataset = load_dataset(o.manifest);
  const FoldAssignment folds = stratified_folds(slide_infos(dataset), o.folds, o.seed);
  const LossMode loss_mode = parse_loss(o.loss);

  json slide_folds = json::object();
  for (std::size_t i = 0; i < dataset.size(); ++i)
    slide_folds[dataset[i].manifest.slide_id] = folds.slide_fold[i];
  json patient_folds = json::object();
  for (const auto& [patient, fold] : folds.patient_fold) patient_folds[patient] = fold;
  const json folds_doc = {{"n_folds", o.folds},
                          {"seed", o.seed},
                          {"slide_folds", slide_folds},
                          {"patient_folds", patient_folds}};
  write_text(out_path(o.out, "folds.json"), folds_doc.dump(2) + "\n");

  parallel_for(static_cast<std::size_t>(o.folds), o.workers, [&](std::size_t run) {
    const int test_fold = folds.test_fold(static_cast<int>(run));
    const int val_fold = folds.val_fold(static_cast<int>(run));
    std::vector<Bag> train_bags, val_bags;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      const int fold = folds.slide_fold[i];
      if (fold == test_fold) continue;
      (fold == val_fold ? val_bags : train_bags).push_back(dataset[i].bag);
    }

    TrainConfig config;
    config.learning_rate = o.learning_rate;
    config.weight_decay = o.weight_decay;
    config.dropout = o.dropout;
    config.loss_mode = loss_mode;
    config.max_epochs = o.epochs;
    config.patience = o.patience;
    config.seed = derive_seed(o.seed, "train", run);
    config.attention_dim = o.attention_dim;
    config.head_hidden = o.head_hidden;
    const TrainResult result = train(train_bags, val_bags, config);

    const json meta = {{"command", "train"},
                       {"fold", run},
                       {"test_fold", test_fold},
                       {"val_fold", val_fold},
                       {"base_seed", o.seed},
                       {"seed", config.seed},
                       {"learning_rate", o.learning_rate},
                       {"weight_decay", o.weight_decay},
                       {"dropout", o.dropout},
                       {"loss", o.loss},
                       {"max_epochs", o.epochs},
                       {"patience", o.patience},
                       {"attention_dim", o.attention_dim},
                       {"head_hidden", o.head_hidden},
                       {"best_epoch", result.best_epoch},
                       {"best_val_loss", result.best_val_loss}};
    checkpoint_write(result.params, meta.dump(),
                     out_path(o.out, fold_model_name(static_cast<int>(run))));
    std::cerr << "wrote " << out_path(o.out, fold_model_name(static_cast<int>(run))) << "\n";

    std::string log = "epoch,train_loss,val_loss\n";
    char line[96];
    for (const auto& entry : result.log) {
      std::snprintf(line, sizeof(line), "%d,%.17g,%.17g\n", entry.epoch, entry.train_loss,
                    entry.val_loss);
      log += line;
    }
    write_text(out_path(o.out, "train_log_fold" + std::to_string(run) + ".csv"), log);
  });

  const json meta = {{"command", "train"},
                     {"seed", o.seed},
                     {"folds", o.folds},
                     {"learning_rate", o.learning_rate},
                     {"weight_decay", o.weight_decay},
                     {"dropout", o.dropout},
                     {"loss", o.loss},
                     {"max_epochs", o.epochs},
                     {"patience", o.patience},
                     {"attention_dim", o.attention_dim},
                     {"head_hidden", o.head_hidden}};
  write_text(out_path(o.out, "train_meta.json"), meta.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// eval

struct EvalOpts {
  std::string manifest;
  std::string checkpoint;
  std::string model_dir;
  std::string out;
  std::string method = "full";
  int repeats = 50;
  double threshold = 0.5;
  std::int64_t bootstrap_epochs = 100000;
  SamplingConfig sampling;
  std::uint64_t seed = 0;
  int workers = 1;
};

void run_eval(const EvalOpts& o) {
  if (o.checkpoint.empty() == o.model_dir.empty())
    throw std::runtime_error("pass exactly one of --checkpoint or --model-dir");
  const auto dataset = load_dataset(o.manifest);
  const Method method = parse_method(o.method);

  EvalOptions options;
  options.method = method;
  options.repeats = o.repeats;
  options.sampling = o.sampling;
  options.base_seed = o.seed;
  options.workers = o.workers;

  PredictionTable table;
  table.probs.resize(static_cast<Index>(dataset.size()), o.repeats);
  for (const auto& d : dataset)
    table.rows.push_back({d.manifest.slide_id, d.manifest.patient_id, d.manifest.label});

  if (!o.checkpoint.empty()) {
    const Checkpoint ckpt = checkpoint_read(o.checkpoint);
    std::vector<Bag> bags;
    bags.reserve(dataset.size());
    for (const auto& d : dataset) bags.push_back(d.bag);
    table.probs = repeat_evaluate(ckpt.params, bags, options).probs;
  } else {
    const json folds_doc =
        json::parse(read_text((fs::path(o.model_dir) / "folds.json").string()));
    const int n_folds = folds_doc.at("n_folds").get<int>();
    const auto& slide_folds = folds_doc.at("slide_folds");
    std::vector<int> fold_of(dataset.size());
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      const auto& id = dataset[i].manifest.slide_id;
      if (!slide_folds.contains(id))
        throw std::runtime_error(id + " missing from " + o.model_dir + "/folds.json");
      fold_of[i] = slide_folds.at(id).get<int>();
    }
    // Each bag is scored by the model whose run held the bag's fold out as
    // the test set; run r tests fold r.
    for (int fold = 0; fold < n_folds; ++fold) {
      std::vector<Bag> bags;
      std::vector<std::size_t> rows;
      for (std::size_t i = 0; i < dataset.size(); ++i) {
        if (fold_of[i] != fold) continue;
        bags.push_back(dataset[i].bag);
        rows.push_back(i);
      }
      if (bags.empty()) continue;
      const Checkpoint ckpt =
          checkpoint_read((fs::path(o.model_dir) / fold_model_name(fold)).string());
      const PredictionTable part = repeat_evaluate(ckpt.params, bags, options);
      for (std::size_t j = 0; j < rows.size(); ++j)
        table.probs.row(static_cast<Index>(rows[j])) =
            part.probs.row(static_cast<Index>(j));
    }
  }

  prediction_table_write(table, out_path(o.out, "predictions.csv"));
  std::cerr << "wrote " << out_path(o.out, "predictions.csv") << "\n";

  // Point metrics on the per-slide mean probability across repeats.
  Vec mean_scores = table.probs.rowwise().mean();
  std::vector<int> labels;
  labels.reserve(table.rows.size());
  for (const auto& row : table.rows) labels.push_back(row.label);

  const json meta = {{"command", "eval"},
                     {"seed", o.seed},
                     {"method", o.method},
                     {"repeats", o.repeats},
                     {"threshold", o.threshold},
                     {"bootstrap_epochs", o.bootstrap_epochs},
                     {"checkpoint", o.checkpoint},
                     {"model_dir", o.model_dir},
                     {"sampling", sampling_json(o.sampling)}};

  const MetricsReport metrics = compute_metrics(mean_scores, labels, o.threshold);
  write_text(out_path(o.out, "metrics.json"), metrics_report_json(metrics, meta.dump()));

  const BootstrapReport boot = bootstrap(table, o.bootstrap_epochs, o.seed, o.threshold);
  write_text(out_path(o.out, "bootstrap.json"), bootstrap_report_json(boot, meta.dump()));

  json run_meta = meta;
  run_meta["manifest"] = o.manifest;
  write_text(out_path(o.out, "eval_meta.json"), run_meta.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// bench

struct BenchOpts {
  std::string out;
  std::string checkpoint;
  std::vector<int> batch_sizes{1, 4, 8, 16, 32, 64};
  std::vector<std::string> methods{"full", "dras"};
  int reps = 3;
  int bags = 10;
  Index patches = 16000;
  int patch_size = 32;
  Index dim = 32;
  Index attention_dim = 64;
  std::string encoder = "random_projection";
  SamplingConfig sampling;
  std::uint64_t seed = 0;
};

void run_bench_cmd(const BenchOpts& o) {
  BenchConfig config;
  config.batch_sizes = o.batch_sizes;
  config.methods.clear();
  for (const auto& m : o.methods) config.methods.push_back(parse_method(m));
  config.repetitions = o.reps;
  config.bag_count = o.bags;
  config.patches_per_bag = o.patches;
  config.patch_size = o.patch_size;
  config.feature_dim = o.dim;
  config.encoder = parse_encoder(o.encoder);
  config.sampling = o.sampling;
  config.seed = o.seed;

  ModelParams params;
  if (!o.checkpoint.empty()) {
    params = checkpoint_read(o.checkpoint).params;
  } else {
    params = make_model(o.dim, o.attention_dim, derive_seed(o.seed, "bench-model"));
  }

  const BenchReport report = run_bench(config, params);
  write_text(out_path(o.out, "bench.csv"), report_csv(report));
  write_text(out_path(o.out, "bench.txt"), report_text(report));

  const json meta = {{"command", "bench"},
                     {"seed", o.seed},
                     {"batch_sizes", o.batch_sizes},
                     {"methods", o.methods},
                     {"repetitions", o.reps},
                     {"bags", o.bags},
                     {"patches", o.patches},
                     {"patch_size", o.patch_size},
                     {"dim", o.dim},
                     {"attention_dim", o.attention_dim},
                     {"encoder", o.encoder},
                     {"checkpoint", o.checkpoint},
                     {"sampling", sampling_json(o.sampling)}};
  write_text(out_path(o.out, "bench_meta.json"), meta.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// tune

struct TuneOpts {
  std::string mode = "sampling";
  std::string manifest;
  std::string out;
  std::string space_path;
  std::string checkpoint;
  int trials = 0;  // 0 = mode default
  int repeats = 0;
  int folds = 3;
  std::string loss = "cross_entropy";
  int epochs = 100;
  int patience = 20;
  Index attention_dim = 256;
  Index head_hidden = 0;
  SamplingConfig sampling;
  std::uint64_t seed = 0;
  int workers = 1;
};

void require_params(const ParamSpace& space, const std::vector<std::string>& names) {
  const auto columns = column_names(space);
  for (const auto& name : names)
    if (std::find(columns.begin(), columns.end(), name) == columns.end())
      throw std::runtime_error("search space is missing parameter: " + name);
}

void run_tune(const TuneOpts& o) {
  const auto dataset = load_dataset(o.manifest);
  const FoldAssignment folds = stratified_folds(slide_infos(dataset), o.folds, o.seed);
  std::vector<Bag> train_bags, val_bags;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const int fold = folds.slide_fold[i];
    if (fold == folds.test_fold(0)) continue;
    (fold == folds.val_fold(0) ? val_bags : train_bags).push_back(dataset[i].bag);
  }

  ParamSpace space;
  SearchMode mode;
  Objective objective;
  int trials = o.trials;
  int repeats = o.repeats;

  if (o.mode == "train") {
    space = o.space_path.empty() ? training_space()
                                 : param_space_from_json(read_text(o.space_path));
    require_params(space, {"learning_rate", "weight_decay", "dropout"});
    mode = SearchMode::minimize;
    if (trials == 0) trials = 500;
    if (repeats == 0) repeats = 1;
    const LossMode loss_mode = parse_loss(o.loss);
    objective = [&, loss_mode](const TrialConfig& config, std::uint64_t seed) {
      TrainConfig tc;
      tc.learning_rate = config_value(config, "learning_rate");
      tc.weight_decay = config_value(config, "weight_decay");
      tc.dropout = config_value(config, "dropout");
      tc.loss_mode = loss_mode;
      tc.max_epochs = o.epochs;
      tc.patience = o.patience;
      tc.seed = seed;
      tc.attention_dim = o.attention_dim;
      tc.head_hidden = o.head_hidden;
      return train(train_bags, val_bags, tc).best_val_loss;
    };
  } else if (o.mode == "sampling") {
    space = o.space_path.empty() ? sampling_space()
                                 : param_space_from_json(read_text(o.space_path));
    require_params(space, {"iterations", "neighbours", "sampling_random",
                           "sampling_random_delta"});
    mode = SearchMode::maximize;
    if (trials == 0) trials = 200;
    if (repeats == 0) repeats = 30;
    if (o.checkpoint.empty())
      throw std::runtime_error("sampling mode needs --checkpoint for the trained model");
    const Checkpoint ckpt = checkpoint_read(o.checkpoint);
    objective = [&, params = ckpt.params](const TrialConfig& config, std::uint64_t seed) {
      SamplingConfig sc = o.sampling;
      sc.iterations = static_cast<int>(config_value(config, "iterations"));
      sc.neighbours = static_cast<int>(config_value(config, "neighbours"));
      sc.sampling_random = config_value(config, "sampling_random");
      sc.sampling_random_delta = config_value(config, "sampling_random_delta");
      Vec scores(static_cast<Index>(val_bags.size()));
      std::vector<int> labels(val_bags.size());
      for (std::size_t i = 0; i < val_bags.size(); ++i) {
        const SamplingResult result =
            run_dras(params, val_bags[i], sc,
                     derive_seed(seed, "tune-bag", val_bags[i].slide_id));
        scores[static_cast<Index>(i)] = softmax(result.logits)[1];
        labels[i] = val_bags[i].label;
      }
      return auc(scores, labels);
    };
  } else {
    throw std::runtime_error("unknown tune mode: " + o.mode + " (expected train|sampling)");
  }

  const SearchResult result =
      random_search(space, objective, trials, repeats, mode, o.seed, o.workers);
  write_text(out_path(o.out, "tuning_log.csv"), tuning_log_csv(space, result));
  write_text(out_path(o.out, "space.json"), param_space_to_json(space));

  const TrialRecord& best = result.log[static_cast<std::size_t>(result.best_trial)];
  json best_params = json::object();
  for (const auto& [name, value] : best.config) best_params[name] = value;
  const json best_doc = {{"trial", best.trial},
                         {"objective", best.objective},
                         {"seed", best.seed},
                         {"repeats", best.repeats},
                         {"params", best_params}};
  write_text(out_path(o.out, "best.json"), best_doc.dump(2) + "\n");

  const json meta = {{"command", "tune"},   {"seed", o.seed},
                     {"mode", o.mode},      {"trials", trials},
                     {"repeats", repeats},  {"folds", o.folds},
                     {"loss", o.loss},      {"checkpoint", o.checkpoint},
                     {"manifest", o.manifest}};
  write_text(out_path(o.out, "tune_meta.json"), meta.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// heatmap

struct HeatmapOpts {
  std::string cache;
  std::string checkpoint;
  std::string out;
  std::string method = "dras";
  SamplingConfig sampling;
  std::uint64_t seed = 0;
};

void run_heatmap(const HeatmapOpts& o) {
  const Bag bag = cache_read(o.cache);
  const Checkpoint ckpt = checkpoint_read(o.checkpoint);
  const Method method = parse_method(o.method);
  // Same stream as repeat 0 of an eval run with this base seed.
  const std::uint64_t run_seed = derive_seed(o.seed, "evaluate", bag.slide_id, 0);

  SamplingResult result;
  switch (method) {
    case Method::full:
      result = run_full(ckpt.params, bag);
      break;
    case Method::random:
      result = run_random(ckpt.params, bag, o.sampling.total_budget, run_seed);
      break;
    case Method::dras:
      result = run_dras(ckpt.params, bag, o.sampling, run_seed);
      break;
  }

  const ValueMap weights = build_value_map(bag.coords, result.weight_map);
  value_map_write_pgm(weights, out_path(o.out, "weights.pgm"));
  value_map_write_csv(weights, out_path(o.out, "weights.csv"));
  const ValueMap attention = build_value_map(bag.coords, result.sampled, result.attention);
  value_map_write_pgm(attention, out_path(o.out, "attention.pgm"));
  value_map_write_csv(attention, out_path(o.out, "attention.csv"));
  trace_write(result.trace, out_path(o.out, "trace.csv"));
  for (const char* name : {"weights.pgm", "weights.csv", "attention.pgm", "attention.csv",
                           "trace.csv"})
    std::cerr << "wrote " << out_path(o.out, name) << "\n";

  const json meta = {{"command", "heatmap"},
                     {"seed", o.seed},
                     {"cache", o.cache},
                     {"checkpoint", o.checkpoint},
                     {"method", o.method},
                     {"slide_id", bag.slide_id},
                     {"patches", bag.size()},
                     {"sampled", static_cast<std::int64_t>(result.sampled.size())},
                     {"forward_passes", result.forward_passes},
                     {"sampling", sampling_json(o.sampling)}};
  write_text(out_path(o.out, "heatmap_meta.json"), meta.dump(2) + "\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention-based MIL with discriminative region active sampling"};
  app.require_subcommand(1);

  static const char kConfigHelp[] =
      "JSON file of flag defaults; command-line flags override it";

  SynthOpts synth;
  CLI::App* synth_cmd = app.add_subcommand("synth", "generate synthetic slides and a manifest");
  synth_cmd->add_option("--out", synth.out, "output directory")->required();
  synth_cmd->add_option("--seed", synth.seed, "base RNG seed");
  synth_cmd->add_option("--bags", synth.bags, "number of slides");
  synth_cmd->add_option("--patients", synth.patients, "number of patients (default bags/2)");
  synth_cmd->add_option("--grid-width", synth.grid_width, "patch grid width");
  synth_cmd->add_option("--grid-height", synth.grid_height, "patch grid height");
  synth_cmd->add_option("--fraction", synth.fraction, "discriminative region fraction");
  synth_cmd->add_option("--shift", synth.shift, "class signal mean shift");
  synth_cmd->add_option("--noise", synth.noise, "background noise scale");
  synth_cmd->add_option("--dim", synth.dim, "feature dimension");
  synth_cmd->add_option("--config", kConfigHelp)->type_name("FILE");
  synth_cmd->callback([&] { run_synth(synth); });

  PatchOpts patch;
  CLI::App* patch_cmd = app.add_subcommand("patch", "tile and encode a raster image into a cache");
  patch_cmd->add_option("--image", patch.image, "input PPM image")->required();
  patch_cmd->add_option("--out", patch.out, "output directory")->required();
  patch_cmd->add_option("--slide-id", patch.slide_id, "slide identifier");
  patch_cmd->add_option("--patient-id", patch.patient_id, "patient identifier");
  patch_cmd->add_option("--label", patch.label, "slide label (0 or 1)");
  patch_cmd->add_option("--patch-size", patch.patch_size, "patch side in pixels");
  patch_cmd->add_option("--threshold", patch.threshold, "tissue saturation threshold");
  patch_cmd->add_option("--encoder", patch.encoder, "random_projection|color_histogram");
  patch_cmd->add_option("--dim", patch.dim, "feature dimension");
  patch_cmd->add_option("--seed", patch.seed, "base RNG seed");
  patch_cmd->add_option("--config", kConfigHelp)->type_name("FILE");
  patch_cmd->callback([&] { run_patch(patch); });

  TrainOpts train_opts;
  CLI::App* train_cmd = app.add_subcommand("train", "train one model per cross-validation fold");
  train_cmd->add_option("--manifest", train_opts.manifest, "slide manifest CSV")->required();
  train_cmd->add_option("--out", train_opts.out, "output directory")->required();
  train_cmd->add_option("--seed", train_opts.seed, "base RNG seed");
  train_cmd->add_option("--workers", train_opts.workers, "parallel fold runs");
  train_cmd->add_option("--folds", train_opts.folds, "cross-validation folds");
  train_cmd->add_option("--lr", train_opts.learning_rate, "learning rate");
  train_cmd->add_option("--weight-decay", train_opts.weight_decay, "decoupled weight decay");
  train_cmd->add_option("--dropout", train_opts.dropout, "head dropout probability");
  train_cmd->add_option("--loss", train_opts.loss, "cross_entropy|balanced_cross_entropy");
  train_cmd->add_option("--epochs", train_opts.epochs, "maximum epochs");
  train_cmd->add_option("--patience", train_opts.patience, "early-stop patience");
  train_cmd->add_option("--attention-dim", train_opts.attention_dim, "attention hidden width");
  train_cmd->add_option("--head-hidden", train_opts.head_hidden,
                        "head hidden width (0 = half the feature dim)");
  train_cmd->add_option("--config", kConfigHelp)->type_name("FILE");
  train_cmd->callback([&] { run_train(train_opts); });

  EvalOpts eval_opts;
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate slides and report metrics");
  eval_cmd->add_option("--manifest", eval_opts.manifest, "slide manifest CSV")->required();
  eval_cmd->add_option("--checkpoint", eval_opts.checkpoint, "single model checkpoint");
  eval_cmd->add_option("--model-dir", eval_opts.model_dir,
                       "directory from the train command (cross-validated scoring)");
  eval_cmd->add_option("--out", eval_opts.out, "output directory")->required();
  eval_cmd->add_option("--method", eval_opts.method, "full|random|dras");
  eval_cmd->add_option("--repeats", eval_opts.repeats, "evaluation repeats per slide");
  eval_cmd->add_option("--threshold", eval_opts.threshold, "positive-class threshold");
  eval_cmd->add_option("--bootstrap-epochs", eval_opts.bootstrap_epochs, "bootstrap epochs");
  eval_cmd->add_option("--seed", eval_opts.seed, "base RNG seed");
  eval_cmd->add_option("--workers", eval_opts.workers, "worker threads");
  add_sampling_flags(eval_cmd, eval_opts.sampling);
  eval_cmd->add_option("--config", kConfigHelp)->type_name("FILE");
  eval_cmd->callback([&] { run_eval(eval_opts); });

  BenchOpts bench_opts;
  CLI::App* bench_cmd = app.add_subcommand("bench", "efficiency benchmark with real-time encoding");
  bench_cmd->add_option("--out", bench_opts.out, "output directory")->required();
  bench_cmd->add_option("--checkpoint", bench_opts.checkpoint,
                        "model checkpoint (default: a seeded untrained model)");
  bench_cmd->add_option("--batch-sizes", bench_opts.batch_sizes, "comma-separated batch sizes")
      ->delimiter(',');
  bench_cmd->add_option("--methods", bench_opts.methods, "comma-separated methods")
      ->delimiter(',');
  bench_cmd->add_option("--reps", bench_opts.reps, "timed repetitions per cell (odd)");
  bench_cmd->add_option("--bags", bench_opts.bags, "number of procedural bags");
  bench_cmd->add_option("--patches", bench_opts.patches, "patches per bag");
  bench_cmd->add_option("--patch-size", bench_opts.patch_size, "patch side in pixels");
  bench_cmd->add_option("--dim", bench_opts.dim, "feature dimension");
  bench_cmd->add_option("--attention-dim", bench_opts.attention_dim, "attention hidden width");
  bench_cmd->add_option("--encoder", bench_opts.encoder,
                        "random_projection|color_histogram");
  bench_cmd->add_option("--seed", bench_opts.seed, "base RNG seed");
  add_sampling_flags(bench_cmd, bench_opts.sampling);
  bench_cmd->add_option("--config", kConfigHelp)->type_name("FILE");
  bench_cmd->callback([&] { run_bench_cmd(bench_opts); });

  TuneOpts tune_opts;
  CLI::App* tune_cmd = app.add_subcommand("tune", "random-search hyperparameter tuning");
  tune_cmd->add_option("--mode", tune_opts.mode, "train|sampling")->required();
  tune_cmd->add_option("--manifest", tune_opts.manifest, "slide manifest CSV")->required();
  tune_cmd->add_option("--out", tune_opts.out, "output directory")->required();
  tune_cmd->add_option("--space", tune_opts.space_path, "search space JSON (default built-in)");
  tune_cmd->add_option("--checkpoint", tune_opts.checkpoint, "trained model (sampling mode)");
  tune_cmd->add_option("--trials", tune_opts.trials, "trial count (default 500 train, 200 sampling)");
  tune_cmd->add_option("--repeats", tune_opts.repeats,
                       "evaluations per trial (default 1 train, 30 sampling)");
  tune_cmd->add_option("--folds", tune_opts.folds, "cross-validation folds");
  tune_cmd->add_option("--loss", tune_opts.loss, "loss for train mode");
  tune_cmd->add_option("--epochs", tune_opts.epochs, "maximum epochs (train mode)");
  tune_cmd->add_option("--patience", tune_opts.patience, "early-stop patience (train mode)");
  tune_cmd->add_option("--attention-dim", tune_opts.attention_dim, "attention hidden width");
  tune_cmd->add_option("--head-hidden", tune_opts.head_hidden, "head hidden width");
  tune_cmd->add_option("--seed", tune_opts.seed, "base RNG seed");
  tune_cmd->add_option("--workers", tune_opts.workers, "parallel trials");
  add_sampling_flags(tune_cmd, tune_opts.sampling);
  tune_cmd->add_option("--config", kConfigHelp)->type_name("FILE");
  tune_cmd->callback([&] { run_tune(tune_opts); });

  HeatmapOpts heatmap_opts;
  CLI::App* heatmap_cmd = app.add_subcommand("heatmap", "export weight and attention maps");
  heatmap_cmd->add_option("--cache", heatmap_opts.cache, "feature cache of one slide")->required();
  heatmap_cmd->add_option("--checkpoint", heatmap_opts.checkpoint, "model checkpoint")->required();
  heatmap_cmd->add_option("--out", heatmap_opts.out, "output directory")->required();
  heatmap_cmd->add_option("--method", heatmap_opts.method, "full|random|dras");
  heatmap_cmd->add_option("--seed", heatmap_opts.seed, "base RNG seed");
  add_sampling_flags(heatmap_cmd, heatmap_opts.sampling);
  heatmap_cmd->add_option("--config", kConfigHelp)->type_name("FILE");
  heatmap_cmd->callback([&] { run_heatmap(heatmap_opts); });

  try {
    auto args = expand_config_args(argc, argv);
    std::vector<char*> cargv;
    cargv.reserve(args.size());
    for (auto& a : args) cargv.push_back(a.data());
    app.parse(static_cast<int>(cargv.size()), cargv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
