#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "keycache/analysis.hpp"
#include "keycache/attacks.hpp"
#include "keycache/cache.hpp"
#include "keycache/error.hpp"
#include "keycache/feature_store.hpp"
#include "keycache/format.hpp"
#include "keycache/model.hpp"
#include "keycache/refnet.hpp"
#include "keycache/tuner.hpp"

namespace keycache::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

const std::vector<std::string> kCommands{"gen-data", "train",  "extract", "build-cache", "tune",
                                         "eval",     "attack", "jacobian", "report"};

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

template <typename T>
std::vector<T> parse_list(const std::string& text, const char* what) {
  std::vector<T> out;
  for (const auto& item : split_list(text)) {
    try {
      std::size_t used = 0;
      if constexpr (std::is_floating_point_v<T>) {
        out.push_back(static_cast<T>(std::stod(item, &used)));
      } else {
        if (item.front() == '-') throw std::invalid_argument(item);
        out.push_back(static_cast<T>(std::stoull(item, &used)));
      }
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError(std::string("bad value '") + item + "' in " + what);
    }
  }
  return out;
}

std::string join(const std::vector<std::string>& items, char sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    out += items[i];
  }
  return out;
}

std::string read_text(const fs::path& path) {
  const Bytes bytes = read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

fs::path normalized(const fs::path& p) {
  fs::path out = fs::weakly_canonical(fs::absolute(p));
  if (out.filename().empty()) out = out.parent_path();
  return out;
}

bool is_within(const fs::path& inner, const fs::path& outer) {
  auto i = inner.begin();
  for (auto o = outer.begin(); o != outer.end(); ++o, ++i) {
    if (i == inner.end() || *i != *o) return false;
  }
  return true;
}

// Everything is written into a hidden sibling directory and moved into place
// only after the command succeeded, so a failed run leaves nothing behind.
class OutputDir {
 public:
  explicit OutputDir(const fs::path& target) : target_(normalized(target)) {
    staging_ = target_.parent_path() / ("." + target_.filename().string() + ".partial");
    fs::remove_all(staging_);
    fs::create_directories(staging_);
  }
  OutputDir(const OutputDir&) = delete;
  OutputDir& operator=(const OutputDir&) = delete;
  ~OutputDir() {
    std::error_code ec;
    if (!committed_) fs::remove_all(staging_, ec);
  }

  const fs::path& dir() const { return staging_; }
  const fs::path& target() const { return target_; }
  void text(const std::string& name, const std::string& body) {
    write_text_atomic(staging_ / name, body);
  }

  void commit() {
    json files = json::array();
    std::vector<fs::path> paths;
    for (const auto& e : fs::recursive_directory_iterator(staging_)) {
      if (e.is_regular_file()) paths.push_back(e.path());
    }
    std::sort(paths.begin(), paths.end());
    for (const auto& p : paths) {
      const Bytes bytes = read_file(p);
      files.push_back({{"file", fs::relative(p, staging_).generic_string()},
                       {"bytes", bytes.size()},
                       {"crc32", crc32(bytes)}});
    }
    text("outputs.json", json{{"files", files}}.dump(2) + "\n");

    fs::create_directories(target_);
    for (const auto& e : fs::directory_iterator(staging_)) {
      const fs::path dest = target_ / e.path().filename();
      fs::remove_all(dest);
      fs::rename(e.path(), dest);
    }
    fs::remove_all(staging_);
    committed_ = true;
  }

 private:
  fs::path target_;
  fs::path staging_;
  bool committed_ = false;
};

// ---- option state -------------------------------------------------------------

struct HyperFlags {
  std::string tuned;
  double theta = 50.0;
  double lambda = 0.5;
  double cache_only_theta = 50.0;
  CLI::Option* tuned_opt = nullptr;
  CLI::Option* theta_opt = nullptr;
  CLI::Option* lambda_opt = nullptr;
  CLI::Option* only_theta_opt = nullptr;
};

struct State {
  std::size_t threads = 1;
  std::string config;

  struct {
    std::string out;
    SyntheticDatasetSpec spec;
    std::string rare_classes;
  } gen;

  struct {
    std::string data, out, hidden = "128,64";
    RefNetConfig cfg;
  } train;

  struct {
    std::string data, model, out;
  } extract;

  struct {
    std::string features, out, layers = "hidden2", split = "train";
    double fraction = 1.0;
    std::size_t per_class = 0;
    std::uint64_t seed = 0;
    CLI::Option* fraction_opt = nullptr;
    CLI::Option* per_class_opt = nullptr;
  } build;

  struct {
    std::string features, cache, out, mode = "grid", layers;
    std::string fractions = "0,0.1,0.25,0.5,1";
    double theta = 50.0, lambda = 0.5;
    std::size_t max_layers = 2, beam = 3, runs = 2;
    std::uint64_t seed = 0;
    CLI::Option* cache_opt = nullptr;
  } tune;

  struct {
    std::string features, cache, out;
    HyperFlags hyper;
    CLI::Option* cache_opt = nullptr;
  } eval;

  struct AttackFlags {
    std::string data, model, cache, out, mode = "transfer", attacks = "fgsm,ifgsm,sp,gb";
    HyperFlags hyper;
    std::size_t samples = 250, steps = 100, iterations = 10;
    double max_epsilon = 0.5;
    std::uint64_t seed = 0;
    bool save_adversarials = false;
    bool allow_empty = false;
  } attack;

  struct {
    std::string data, model, cache, out;
    HyperFlags hyper;
    std::size_t points = 200;
    std::uint64_t seed = 0;
  } jac;

  struct {
    std::vector<std::string> inputs;
    std::string out;
  } report;
};

template <typename T>
CLI::Option* opt(CLI::App* app, const std::string& name, T& var, const std::string& help) {
  return app->add_option(name, var, help)->capture_default_str();
}

CLI::Option* existing_dir(CLI::App* app, const std::string& name, std::string& var,
                          const std::string& help) {
  return app->add_option(name, var, help)->required()->check(CLI::ExistingDirectory);
}

void add_hyper_flags(CLI::App* app, HyperFlags& h) {
  h.tuned_opt = app->add_option("--tuned", h.tuned,
                                "best.json written by `tune --mode grid`; supplies theta/lambda "
                                "for the cache and cache_only models")
                    ->check(CLI::ExistingFile);
  h.theta_opt = app->add_option("--theta", h.theta, "Override cache-model sharpness")
                    ->check(CLI::NonNegativeNumber);
  h.lambda_opt =
      app->add_option("--lambda", h.lambda, "Override cache-model weight")->check(CLI::Range(0.0, 1.0));
  h.only_theta_opt = app->add_option("--cache-only-theta", h.cache_only_theta,
                                     "Override cache_only sharpness (default: tuned value, else --theta)")
                         ->check(CLI::NonNegativeNumber);
}

void build_app(CLI::App& app, State& s) {
  app.require_subcommand(1, 1);
  app.fallthrough();
  app.add_option("--threads", s.threads, "Worker cap; 1 is fully sequential")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  app.add_option("--config", s.config,
                 "JSON file of flat flag=value keys; flags on the command line win")
      ->check(CLI::ExistingFile);

  {
    auto* c = app.add_subcommand("gen-data", "Generate the synthetic rare-feature dataset");
    auto& g = s.gen;
    c->add_option("--out", g.out, "Output dataset directory")->required();
    opt(c, "--classes", g.spec.n_classes, "Number of classes");
    opt(c, "--width", g.spec.shape.width, "Image width");
    opt(c, "--height", g.spec.shape.height, "Image height");
    opt(c, "--channels", g.spec.shape.channels, "Image channels");
    opt(c, "--train-per-class", g.spec.train_per_class, "Training images per class");
    opt(c, "--val-per-class", g.spec.val_per_class, "Validation images per class");
    opt(c, "--test-per-class", g.spec.test_per_class, "Test images per class");
    opt(c, "--noise", g.spec.noise_std, "Per-pixel Gaussian noise std");
    opt(c, "--nuisance-rank", g.spec.nuisance_rank, "Number of shared nuisance patterns");
    opt(c, "--nuisance-std", g.spec.nuisance_std, "Std of each nuisance coefficient");
    opt(c, "--rare-probability", g.spec.rare_probability, "Chance a sample carries its class patch")
        ->check(CLI::Range(0.0, 1.0));
    opt(c, "--rare-classes", g.rare_classes, "Comma list of classes with a patch (empty: all)");
    opt(c, "--seed", g.spec.seed, "Generator seed");
  }
  {
    auto* c = app.add_subcommand("train", "Train the reference network on a dataset's train split");
    auto& t = s.train;
    existing_dir(c, "--data", t.data, "Dataset directory from gen-data");
    c->add_option("--out", t.out, "Output model directory")->required();
    opt(c, "--hidden", t.hidden, "Comma list of hidden widths");
    opt(c, "--learning-rate", t.cfg.learning_rate, "SGD step size");
    opt(c, "--epochs", t.cfg.epochs, "Training epochs");
    opt(c, "--batch-size", t.cfg.batch_size, "Mini-batch size");
    opt(c, "--seed", t.cfg.seed, "Initialization and shuffling seed");
  }
  {
    auto* c = app.add_subcommand("extract", "Write every layer's activations for every split");
    auto& e = s.extract;
    existing_dir(c, "--data", e.data, "Dataset directory");
    existing_dir(c, "--model", e.model, "Model directory");
    c->add_option("--out", e.out, "Output feature directory")->required();
  }
  {
    auto* c = app.add_subcommand("build-cache", "Build a key/value cache from extracted features");
    auto& b = s.build;
    existing_dir(c, "--features", b.features, "Feature directory from extract");
    c->add_option("--out", b.out, "Output cache directory")->required();
    opt(c, "--layers", b.layers, "Comma list of key layers");
    opt(c, "--split", b.split, "Split to store")->check(CLI::IsMember({"train", "val", "test"}));
    b.fraction_opt = c->add_option("--fraction", b.fraction, "Stratified fraction of items to keep")
                         ->check(CLI::Range(0.0, 1.0));
    b.per_class_opt = c->add_option("--per-class", b.per_class, "Exact items per class to keep");
    opt(c, "--seed", b.seed, "Subsampling seed");
  }
  {
    auto* c = app.add_subcommand("tune", "Grid search and layer/size sweeps on the validation split");
    auto& t = s.tune;
    existing_dir(c, "--features", t.features, "Feature directory from extract");
    c->add_option("--out", t.out, "Output directory")->required();
    opt(c, "--mode", t.mode, "grid | layers | multi | size")
        ->check(CLI::IsMember({"grid", "layers", "multi", "size"}));
    t.cache_opt = c->add_option("--cache", t.cache, "Cache directory (grid mode)")
                      ->check(CLI::ExistingDirectory);
    opt(c, "--layers", t.layers,
        "Key layers (grid/size, default hidden2) or candidates (layers/multi, default all)");
    opt(c, "--theta", t.theta, "Sharpness for the single-layer sweep");
    opt(c, "--lambda", t.lambda, "Cache weight for the single-layer sweep")->check(CLI::Range(0.0, 1.0));
    opt(c, "--max-layers", t.max_layers, "Largest layer combination (multi)");
    opt(c, "--beam", t.beam, "Beam width (multi)");
    opt(c, "--fractions", t.fractions, "Comma list of cache fractions (size)");
    opt(c, "--runs", t.runs, "Random subsets per fraction (size)");
    opt(c, "--seed", t.seed, "Subsampling seed (size)");
  }
  {
    auto* c = app.add_subcommand("eval", "Top-1 accuracy table: baseline, cache and cache_only rows");
    auto& e = s.eval;
    existing_dir(c, "--features", e.features, "Feature directory from extract");
    c->add_option("--out", e.out, "Output directory")->required();
    e.cache_opt = c->add_option("--cache", e.cache, "Cache directory; without it only the baseline row is written")
                      ->check(CLI::ExistingDirectory);
    add_hyper_flags(c, e.hyper);
    c->footer("Without --tuned, --theta and --lambda, hyperparameters are grid searched on the "
              "validation split.");
  }
  {
    auto* c = app.add_subcommand("attack", "Adversarial campaigns on the test split");
    auto& a = s.attack;
    existing_dir(c, "--data", a.data, "Dataset directory (images)");
    existing_dir(c, "--model", a.model, "Model directory");
    existing_dir(c, "--cache", a.cache, "Cache directory");
    c->add_option("--out", a.out, "Output directory")->required();
    add_hyper_flags(c, a.hyper);
    opt(c, "--mode", a.mode, "transfer: attack the baseline, evaluate every model; "
                             "whitebox: attack each model directly")
        ->check(CLI::IsMember({"transfer", "whitebox"}));
    opt(c, "--attacks", a.attacks, "Comma list from fgsm, ifgsm, sp, gb");
    opt(c, "--samples", a.samples, "Test images sampled per attack");
    opt(c, "--steps", a.steps, "Points in each epsilon schedule");
    opt(c, "--max-epsilon", a.max_epsilon, "Largest epsilon for fgsm and ifgsm");
    opt(c, "--iterations", a.iterations, "Steps per epsilon for ifgsm");
    opt(c, "--seed", a.seed, "Image sampling seed");
    c->add_flag("--save-adversarials", a.save_adversarials, "Also write adversarial images as .ftr");
    c->add_flag("--allow-empty", a.allow_empty, "Do not fail when an attack finds nothing");
  }
  {
    auto* c = app.add_subcommand("jacobian", "Input-output Jacobian norms and singular values");
    auto& j = s.jac;
    existing_dir(c, "--data", j.data, "Dataset directory (images)");
    existing_dir(c, "--model", j.model, "Model directory");
    existing_dir(c, "--cache", j.cache, "Cache directory");
    c->add_option("--out", j.out, "Output directory")->required();
    add_hyper_flags(c, j.hyper);
    opt(c, "--points", j.points, "Test points sampled");
    opt(c, "--seed", j.seed, "Point sampling seed");
  }
  {
    auto* c = app.add_subcommand("report", "Collate eval/attack/jacobian/tune outputs into one table");
    auto& r = s.report;
    c->add_option("--inputs", r.inputs, "Output directories of earlier runs")
        ->required()
        ->expected(1, -1)
        ->check(CLI::ExistingDirectory);
    c->add_option("--out", r.out, "Output directory")->required();
  }
}

// ---- config file -----------------------------------------------------------------

struct Scan {
  std::string command;
  std::string config;
  std::vector<std::string> given;  // long names without dashes
};

Scan scan(const std::vector<std::string>& args) {
  Scan s;
  for (std::size_t i = 1; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a.rfind("--", 0) == 0) {
      const std::string name = a.substr(2, a.find('=') - 2);
      s.given.push_back(name);
      if (name == "config") {
        if (a.find('=') != std::string::npos) {
          s.config = a.substr(a.find('=') + 1);
        } else if (i + 1 < args.size()) {
          s.config = args[i + 1];
        }
      }
    } else if (s.command.empty() &&
               std::find(kCommands.begin(), kCommands.end(), a) != kCommands.end()) {
      s.command = a;
    }
  }
  return s;
}

std::string json_scalar(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number() || v.is_boolean()) return v.dump();
  throw UsageError("config values must be scalars or arrays of scalars");
}

// Appends "--key value" for every config key the command line did not set.
std::vector<std::string> apply_config(std::vector<std::string> args, const Scan& scan,
                                      const CLI::App& app) {
  if (scan.config.empty()) return args;
  json cfg;
  try {
    cfg = json::parse(read_text(scan.config));
  } catch (const json::exception& e) {
    throw UsageError("config " + scan.config + " is not valid JSON: " + e.what());
  }
  if (!cfg.is_object()) throw UsageError("config must be a JSON object");
  const CLI::App* sub = scan.command.empty() ? nullptr : app.get_subcommand(scan.command);
  for (const auto& [key, value] : cfg.items()) {
    if (key == "command") {
      if (!value.is_string() || value.get<std::string>() != scan.command) {
        throw UsageError("config is for '" + json_scalar(value) + "', not '" + scan.command + "'");
      }
      continue;
    }
    if (key == "config") throw UsageError("config files cannot nest");
    const CLI::Option* o = sub ? sub->get_option_no_throw("--" + key) : nullptr;
    if (!o) o = app.get_option_no_throw("--" + key);
    if (!o || key == "help") throw UsageError("unknown config key '" + key + "'");
    if (std::find(scan.given.begin(), scan.given.end(), key) != scan.given.end()) continue;
    if (o->get_type_size() == 0) {
      if (!value.is_boolean()) throw UsageError("config key '" + key + "' must be true or false");
      if (value.get<bool>()) args.push_back("--" + key);
      continue;
    }
    args.push_back("--" + key);
    if (value.is_array()) {
      for (const auto& v : value) args.push_back(json_scalar(v));
    } else {
      args.push_back(json_scalar(value));
    }
  }
  return args;
}

json typed(const std::string& text) {
  if (text.empty()) return text;
  const char c = text.front();
  if (!(std::isdigit(static_cast<unsigned char>(c)) || c == '-' || c == '.')) return text;
  try {
    json v = json::parse(text);
    if (v.is_number()) return v;
  } catch (const json::exception&) {
  }
  return text;
}

// Flat echo of every option in effect, loadable again with --config.
json config_echo(const CLI::App& app, const CLI::App& sub) {
  json j;
  j["command"] = sub.get_name();
  auto add = [&](const CLI::Option* o) {
    if (o->get_lnames().empty()) return;
    const std::string& name = o->get_lnames().front();
    if (name == "help" || name == "config") return;
    if (o->get_type_size() == 0) {
      j[name] = o->count() > 0;
    } else if (o->count() > 0) {
      const auto& r = o->results();
      if (o->get_items_expected_max() > 1) {
        json arr = json::array();
        for (const auto& v : r) arr.push_back(typed(v));
        j[name] = arr;
      } else {
        j[name] = typed(r.back());
      }
    } else if (!o->get_default_str().empty()) {
      j[name] = typed(o->get_default_str());
    }
  };
  for (const CLI::Option* o : app.get_options()) add(o);
  for (const CLI::Option* o : sub.get_options()) add(o);
  return j;
}

// ---- shared loading ------------------------------------------------------------

struct Dataset {
  Manifest manifest;
  fs::path dir;
  FeatureSet load(Split split) const { return load_feature_set(dir, manifest, split); }
  bool has(Split split) const { return manifest.splits.count(std::string(to_string(split))) > 0; }
};

Dataset open_dataset(const std::string& dir) {
  return {Manifest::load(fs::path(dir) / kManifestFile), dir};
}

ImageShape image_shape_of(const Dataset& d) {
  if (!d.manifest.image_shape) {
    fail(ErrorCode::InvalidArgument, "dataset manifest has no image_shape; attacks need images");
  }
  return *d.manifest.image_shape;
}

struct ModelSet {
  std::shared_ptr<const RefNet> net;
  std::shared_ptr<const CacheStore> cache;
  HyperParams mixture;
  HyperParams cache_only;
  std::unique_ptr<CacheAugmentedNet> baseline, cached, only;
  std::vector<NamedModel> named() const {
    return {{"baseline", baseline.get()}, {"cache", cached.get()}, {"cache_only", only.get()}};
  }
};

HyperParams hyper_from(const json& j) {
  return {j.at("theta").get<double>(), j.at("lambda").get<double>()};
}

// Order of precedence: explicit flag, tuned file, built-in default.
std::pair<HyperParams, HyperParams> resolve_hyper(const HyperFlags& h) {
  HyperParams mixture{50.0, 0.5};
  std::optional<HyperParams> only;
  if (h.tuned_opt->count()) {
    const json j = json::parse(read_text(h.tuned));
    if (j.contains("mixture")) mixture = hyper_from(j["mixture"]);
    if (j.contains("cache_only")) only = hyper_from(j["cache_only"]);
  }
  if (h.theta_opt->count()) mixture.theta = h.theta;
  if (h.lambda_opt->count()) mixture.lambda = h.lambda;
  HyperParams cache_only{only ? only->theta : mixture.theta, 1.0};
  if (h.only_theta_opt->count()) cache_only.theta = h.cache_only_theta;
  mixture.validate();
  cache_only.validate();
  return {mixture, cache_only};
}

ModelSet load_models(const std::string& model_dir, const std::string& cache_dir,
                     const HyperFlags& h) {
  ModelSet m;
  m.net = std::make_shared<const RefNet>(load_refnet(model_dir));
  m.cache = std::make_shared<const CacheStore>(load_cache(cache_dir));
  std::tie(m.mixture, m.cache_only) = resolve_hyper(h);
  m.baseline = std::make_unique<CacheAugmentedNet>(m.net);
  m.cached = std::make_unique<CacheAugmentedNet>(m.net, m.cache, m.mixture);
  m.only = std::make_unique<CacheAugmentedNet>(m.net, m.cache, m.cache_only);
  return m;
}

json hyper_json(const HyperParams& h) { return {{"theta", h.theta}, {"lambda", h.lambda}}; }

// ---- subcommands -------------------------------------------------------------------

void cmd_gen_data(State& s, OutputDir& out) {
  auto spec = s.gen.spec;
  spec.rare_classes = parse_list<std::uint32_t>(s.gen.rare_classes, "--rare-classes");
  const SyntheticDataset data = generate_synthetic(spec);
  Manifest m;
  m.dataset = "synthetic";
  m.n_classes = spec.n_classes;
  m.generator_seed = spec.seed;
  m.image_shape = data.shape;
  for (const FeatureSet* split : {&data.train, &data.val, &data.test}) {
    save_feature_set(out.dir(), *split, m);
  }
  m.save(out.dir() / kManifestFile);
}

void cmd_train(State& s, OutputDir& out) {
  const Dataset d = open_dataset(s.train.data);
  RefNetConfig cfg = s.train.cfg;
  cfg.input_shape = image_shape_of(d);
  cfg.n_classes = d.manifest.n_classes;
  cfg.hidden = parse_list<std::size_t>(s.train.hidden, "--hidden");
  const FeatureSet train_split = d.load(Split::Train);
  const TrainResult r = train(RefNet(cfg), train_split, cfg);
  save_refnet(out.dir(), r.net);
  std::string curve = "epoch,loss\n";
  for (std::size_t e = 0; e < r.loss_curve.size(); ++e) {
    curve += std::to_string(e + 1) + "," + format_number(r.loss_curve[e]) + "\n";
  }
  out.text("loss.csv", curve);
  out.text("metrics.json", json{{"train_accuracy", r.train_accuracy},
                                {"final_loss", r.loss_curve.empty() ? 0.0 : r.loss_curve.back()},
                                {"parameters", r.net.parameter_count()}}
                               .dump(2) + "\n");
}

void cmd_extract(State& s, OutputDir& out) {
  const Dataset d = open_dataset(s.extract.data);
  const RefNet net = load_refnet(s.extract.model);
  Manifest m;
  m.dataset = d.manifest.dataset;
  m.n_classes = d.manifest.n_classes;
  m.generator_seed = d.manifest.generator_seed;
  m.seeds = d.manifest.seeds;
  m.image_shape = d.manifest.image_shape;
  for (const Split split : {Split::Train, Split::Val, Split::Test}) {
    if (!d.has(split)) continue;
    save_feature_set(out.dir(), extract_features(net, d.load(split), s.threads), m);
  }
  m.save(out.dir() / kManifestFile);
}

void cmd_build_cache(State& s, OutputDir& out) {
  const auto& b = s.build;
  const Dataset d = open_dataset(b.features);
  FeatureSet items = d.load(parse_split(b.split));
  if (b.fraction_opt->count() || b.per_class_opt->count()) {
    SubsetSpec sub;
    if (b.fraction_opt->count()) sub.fraction = b.fraction;
    if (b.per_class_opt->count()) sub.per_class = b.per_class;
    sub.seed = b.seed;
    items = subsample(items, sub);
  }
  const auto layers = split_list(b.layers);
  save_cache(out.dir(), build_cache(items, layers));
}

void write_sweep(OutputDir& out, const std::string& stem, const SweepReport& r) {
  out.text(stem + ".csv", r.to_csv());
  out.text(stem + ".json", r.to_json());
}

void cmd_tune(State& s, OutputDir& out) {
  const auto& t = s.tune;
  const Dataset d = open_dataset(t.features);
  const FeatureSet val = d.load(Split::Val);
  const FeatureSet test = d.load(Split::Test);
  std::vector<std::string> layers = split_list(t.layers);

  if (t.mode == "grid") {
    std::shared_ptr<const CacheStore> cache;
    if (t.cache_opt->count()) {
      cache = std::make_shared<const CacheStore>(load_cache(t.cache));
    } else {
      if (layers.empty()) layers = {"hidden2"};
      cache = std::make_shared<const CacheStore>(build_cache(d.load(Split::Train), layers));
    }
    const ModelComparison c = compare_models(*cache, val, test, Grid::standard(), s.threads);
    write_sweep(out, "grid_cache", c.mixture.report);
    write_sweep(out, "grid_cache_only", c.cache_only.report);
    json best;
    best["key_layers"] = cache->layer_ids();
    best["baseline"] = {{"val_accuracy", c.baseline_val}, {"test_accuracy", c.baseline_test}};
    best["mixture"] = hyper_json(c.mixture.best);
    best["mixture"]["val_accuracy"] = c.mixture.val_accuracy;
    best["mixture"]["test_accuracy"] = c.mixture_test;
    best["cache_only"] = hyper_json(c.cache_only.best);
    best["cache_only"]["val_accuracy"] = c.cache_only.val_accuracy;
    best["cache_only"]["test_accuracy"] = c.cache_only_test;
    out.text("best.json", best.dump(2) + "\n");
    return;
  }

  const FeatureSet train_split = d.load(Split::Train);
  if (t.mode == "layers") {
    if (layers.empty()) layers = train_split.layer_ids();
    write_sweep(out, "layers", layer_sweep(train_split, val, test, layers, {t.theta, t.lambda}, s.threads));
  } else if (t.mode == "multi") {
    if (layers.empty()) layers = train_split.layer_ids();
    const LayerSelection sel =
        multi_layer_select(layers, t.max_layers, train_split, val, Grid::standard(), t.beam, s.threads);
    write_sweep(out, "multi", sel.report);
    json best;
    best["key_layers"] = sel.layers;
    best["mixture"] = hyper_json(sel.hyper);
    best["mixture"]["val_accuracy"] = sel.val_accuracy;
    out.text("best.json", best.dump(2) + "\n");
  } else {
    if (layers.empty()) layers = {"hidden2"};
    CacheSizeSweepConfig cfg;
    cfg.fractions = parse_list<double>(t.fractions, "--fractions");
    cfg.runs = t.runs;
    cfg.seed = t.seed;
    write_sweep(out, "size", cache_size_sweep(train_split, val, test, layers, cfg, s.threads));
  }
}

void cmd_eval(State& s, OutputDir& out) {
  const auto& e = s.eval;
  const Dataset d = open_dataset(e.features);
  const FeatureSet val = d.load(Split::Val);
  const FeatureSet test = d.load(Split::Test);

  std::ostringstream csv;
  csv << "model,key_layers,theta,lambda,val_accuracy,test_accuracy,test_error\n";
  auto row = [&](const std::string& name, const std::string& layers, double theta, double lambda,
                 double val_acc, double test_acc) {
    csv << name << ',' << csv_escape(layers) << ',' << format_number(theta) << ','
        << format_number(lambda) << ',' << format_number(val_acc) << ',' << format_number(test_acc)
        << ',' << format_number(1.0 - test_acc) << '\n';
  };
  row("baseline", "", kNaN, kNaN, baseline_accuracy(val), baseline_accuracy(test));

  if (e.cache_opt->count()) {
    const CacheStore cache = load_cache(e.cache);
    auto [mixture, only] = resolve_hyper(e.hyper);
    const HyperFlags& h = e.hyper;
    const bool search = !h.tuned_opt->count() && !(h.theta_opt->count() && h.lambda_opt->count());
    if (search) {
      const ModelComparison c = compare_models(cache, val, test, Grid::standard(), s.threads);
      mixture = c.mixture.best;
      only = c.cache_only.best;
      if (h.theta_opt->count()) mixture.theta = h.theta;
      if (h.lambda_opt->count()) mixture.lambda = h.lambda;
      if (h.only_theta_opt->count()) only.theta = h.cache_only_theta;
    }
    const ScoredSplit vs = score_split(val, cache, "output", s.threads);
    const ScoredSplit ts = score_split(test, cache, "output", s.threads);
    const std::string layers = join(cache.layer_ids(), '+');
    row("cache", layers, mixture.theta, mixture.lambda, accuracy_at(vs, cache, mixture),
        accuracy_at(ts, cache, mixture));
    row("cache_only", layers, only.theta, only.lambda, accuracy_at(vs, cache, only),
        accuracy_at(ts, cache, only));
  }
  out.text("eval.csv", csv.str());
}

std::vector<AttackConfig> attack_configs(const State::AttackFlags& a) {
  std::vector<AttackConfig> out;
  for (const auto& name : split_list(a.attacks)) {
    AttackConfig c;
    try {
      c.kind = parse_attack_kind(name);
    } catch (const Error&) {
      throw UsageError("unknown attack '" + name + "' (fgsm, ifgsm, sp, gb)");
    }
    c.schedule_steps = a.steps;
    c.max_epsilon = a.max_epsilon;
    c.iterations = a.iterations;
    c.validate();
    out.push_back(c);
  }
  if (out.empty()) throw UsageError("--attacks is empty");
  return out;
}

void save_adversarials(OutputDir& out, const CampaignResult& r, const std::string& prefix) {
  for (const auto& row : r.rows) {
    const auto stem = "adv_" + prefix + row.attack;
    if (fs::exists(out.dir() / (stem + ".ftr"))) continue;
    const FloatMatrix m = r.adversarials(row.attack);
    if (m.rows() == 0) continue;
    const Bytes bytes = encode_features(m);
    write_file_atomic(out.dir() / (stem + ".ftr"), bytes);
  }
}

void cmd_attack(State& s, OutputDir& out) {
  const auto& a = s.attack;
  const Dataset d = open_dataset(a.data);
  const ImageShape shape = image_shape_of(d);
  const FeatureSet test = d.load(Split::Test);
  const ModelSet models = load_models(a.model, a.cache, a.hyper);

  CampaignConfig cc;
  cc.attacks = attack_configs(a);
  cc.samples = a.samples;
  cc.seed = a.seed;
  cc.threads = s.threads;
  cc.allow_empty = a.allow_empty || a.mode == "whitebox";

  const auto named = models.named();
  if (a.mode == "transfer") {
    const CampaignResult r = attack_campaign(named[0], named, test, shape, cc);
    out.text("attacks.csv", r.to_csv());
    out.text("attacks.jsonl", r.to_jsonl());
    if (a.save_adversarials) save_adversarials(out, r, "");
  } else {
    std::string csv;
    for (const auto& m : named) {
      const std::vector<NamedModel> self{m};
      const CampaignResult r = attack_campaign(m, self, test, shape, cc);
      const std::string part = r.to_csv();
      csv += csv.empty() ? part : part.substr(part.find('\n') + 1);
      out.text("attacks_" + m.name + ".jsonl", r.to_jsonl());
      if (a.save_adversarials) save_adversarials(out, r, m.name + "_");
    }
    out.text("attacks.csv", csv);
  }
  out.text("models.json", json{{"cache", hyper_json(models.mixture)},
                               {"cache_only", hyper_json(models.cache_only)},
                               {"key_layers", models.cache->layer_ids()},
                               {"mode", a.mode},
                               {"notes",
                                {{"sampling", "only test images the attacked model classifies correctly"},
                                 {"success", "prediction differs from the clean prediction"},
                                 {"mean_rho_adv", "over successful adversarials; discarded images excluded"}}}}
                              .dump(2) + "\n");
}

void cmd_jacobian(State& s, OutputDir& out) {
  const auto& j = s.jac;
  const Dataset d = open_dataset(j.data);
  const FeatureSet test = d.load(Split::Test);
  const ModelSet models = load_models(j.model, j.cache, j.hyper);
  JacobianStudyConfig cfg;
  cfg.points = j.points;
  cfg.seed = j.seed;
  cfg.threads = s.threads;
  const auto named = models.named();
  const JacobianReport r = jacobian_study(named, test, cfg);
  out.text("jacobian_norms.csv", r.norms_csv());
  out.text("jacobian_spectrum.csv", r.spectrum_csv());
  out.text("jacobian.json", r.to_json());
}

// ---- report --------------------------------------------------------------------------

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::vector<std::vector<std::string>> rows;
  const std::string text = read_text(path);
  std::vector<std::string> row;
  std::string cell;
  bool quoted = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        cell += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cell += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      row.push_back(std::move(cell));
      cell.clear();
    } else if (c == '\n') {
      row.push_back(std::move(cell));
      cell.clear();
      rows.push_back(std::move(row));
      row.clear();
    } else {
      cell += c;
    }
  }
  if (!cell.empty() || !row.empty()) {
    row.push_back(std::move(cell));
    rows.push_back(std::move(row));
  }
  return rows;
}

// Header-keyed view of a CSV file.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  const std::string& get(const std::vector<std::string>& row, const std::string& col) const {
    const auto it = std::find(header.begin(), header.end(), col);
    if (it == header.end()) fail(ErrorCode::Io, "report input lacks column '" + col + "'");
    return row.at(static_cast<std::size_t>(it - header.begin()));
  }
};

Table load_table(const fs::path& path) {
  auto all = read_csv(path);
  if (all.empty()) fail(ErrorCode::Io, "empty CSV " + path.string());
  Table t{std::move(all.front()), {}};
  t.rows.assign(all.begin() + 1, all.end());
  return t;
}

struct ReportEntry {
  std::string section, source, row, column, value;
};

void cmd_report(State& s, OutputDir& out) {
  std::vector<ReportEntry> entries;
  for (const auto& input : s.report.inputs) {
    const fs::path dir(input);
    const fs::path cfg_path = dir / "config.json";
    if (!fs::exists(cfg_path)) fail(ErrorCode::Io, input + " has no config.json");
    const json cfg = json::parse(read_text(cfg_path));
    const std::string command = cfg.value("command", "");
    const std::string source = dir.filename().empty() ? dir.parent_path().filename().string()
                                                      : dir.filename().string();
    auto add = [&](const std::string& section, const std::string& row, const std::string& col,
                   const std::string& value) { entries.push_back({section, source, row, col, value}); };

    if (command == "eval") {
      const Table t = load_table(dir / "eval.csv");
      for (const auto& r : t.rows) {
        for (const char* col : {"theta", "lambda", "test_accuracy", "test_error"}) {
          add("accuracy", t.get(r, "model"), col, t.get(r, col));
        }
      }
    } else if (command == "attack") {
      const Table t = load_table(dir / "attacks.csv");
      const bool transfer = cfg.value("mode", "transfer") == "transfer";
      for (const auto& r : t.rows) {
        if (transfer) {
          const std::string row = t.get(r, "attack") + ":" + t.get(r, "eval_model");
          add("transfer", row, "accuracy", t.get(r, "eval_accuracy"));
          add("transfer", row, "n_success", t.get(r, "n_success"));
        } else {
          const std::string row = t.get(r, "attack") + ":" + t.get(r, "attacked_model");
          add("whitebox", row, "mean_rho_adv", t.get(r, "mean_rho_adv"));
          add("whitebox", row, "n_success", t.get(r, "n_success"));
          add("whitebox", row, "n_attacked", t.get(r, "n_attacked"));
        }
      }
    } else if (command == "jacobian") {
      const json j = json::parse(read_text(dir / "jacobian.json"));
      for (const auto& [name, m] : j.at("models").items()) {
        add("jacobian", name, "mean_frobenius_norm", format_number(m.at("mean_jacobian_norm").get<double>()));
        const auto& sv = m.at("mean_singular_values");
        if (!sv.empty()) add("jacobian", name, "mean_top_singular_value", format_number(sv[0].get<double>()));
      }
    } else if (command == "tune") {
      for (const auto& e : fs::directory_iterator(dir)) {
        if (e.path().extension() != ".csv") continue;
        const Table t = load_table(e.path());
        for (const auto& r : t.rows) {
          const std::string section = "tune_" + t.get(r, "kind");
          const std::string row = t.get(r, "label");
          add(section, row, "val_accuracy", t.get(r, "val_accuracy"));
          add(section, row, "test_accuracy", t.get(r, "test_accuracy"));
          if (!t.get(r, "test_sem").empty()) add(section, row, "test_sem", t.get(r, "test_sem"));
          if (t.get(r, "chosen") == "1") add(section, row, "chosen", "1");
        }
      }
    } else {
      fail(ErrorCode::InvalidArgument,
           input + " was produced by '" + command + "'; report reads eval, attack, jacobian and tune outputs");
    }
  }
  if (entries.empty()) fail(ErrorCode::InvalidArgument, "nothing to report");

  std::ostringstream csv;
  csv << "section,source,row,column,value\n";
  for (const auto& e : entries) {
    csv << csv_escape(e.section) << ',' << csv_escape(e.source) << ',' << csv_escape(e.row) << ','
        << csv_escape(e.column) << ',' << csv_escape(e.value) << '\n';
  }
  out.text("report.csv", csv.str());

  // One markdown table per section: rows x columns.
  std::ostringstream md;
  std::vector<std::string> sections;
  for (const auto& e : entries) {
    if (std::find(sections.begin(), sections.end(), e.section) == sections.end()) sections.push_back(e.section);
  }
  for (const auto& section : sections) {
    std::vector<std::string> cols, rows;
    std::map<std::pair<std::string, std::string>, std::string> cell;
    for (const auto& e : entries) {
      if (e.section != section) continue;
      const std::string row = e.source + " / " + e.row;
      if (std::find(rows.begin(), rows.end(), row) == rows.end()) rows.push_back(row);
      if (std::find(cols.begin(), cols.end(), e.column) == cols.end()) cols.push_back(e.column);
      cell[{row, e.column}] = e.value;
    }
    md << "## " << section << "\n\n| row |";
    for (const auto& c : cols) md << ' ' << c << " |";
    md << "\n|---|";
    for (std::size_t i = 0; i < cols.size(); ++i) md << "---|";
    md << '\n';
    for (const auto& r : rows) {
      md << "| " << r << " |";
      for (const auto& c : cols) {
        const auto it = cell.find({r, c});
        md << ' ' << (it == cell.end() ? "" : it->second) << " |";
      }
      md << '\n';
    }
    md << '\n';
  }
  out.text("report.md", md.str());
}

// ---- dispatch ------------------------------------------------------------------------

std::string output_of(const State& s, const std::string& command) {
  if (command == "gen-data") return s.gen.out;
  if (command == "train") return s.train.out;
  if (command == "extract") return s.extract.out;
  if (command == "build-cache") return s.build.out;
  if (command == "tune") return s.tune.out;
  if (command == "eval") return s.eval.out;
  if (command == "attack") return s.attack.out;
  if (command == "jacobian") return s.jac.out;
  return s.report.out;
}

std::vector<std::string> inputs_of(const State& s, const std::string& command) {
  if (command == "train") return {s.train.data};
  if (command == "extract") return {s.extract.data, s.extract.model};
  if (command == "build-cache") return {s.build.features};
  if (command == "tune") return {s.tune.features, s.tune.cache};
  if (command == "eval") return {s.eval.features, s.eval.cache};
  if (command == "attack") return {s.attack.data, s.attack.model, s.attack.cache};
  if (command == "jacobian") return {s.jac.data, s.jac.model, s.jac.cache};
  if (command == "report") return s.report.inputs;
  return {};
}

void (*body_of(const std::string& command))(State&, OutputDir&) {
  if (command == "gen-data") return cmd_gen_data;
  if (command == "train") return cmd_train;
  if (command == "extract") return cmd_extract;
  if (command == "build-cache") return cmd_build_cache;
  if (command == "tune") return cmd_tune;
  if (command == "eval") return cmd_eval;
  if (command == "attack") return cmd_attack;
  if (command == "jacobian") return cmd_jacobian;
  return cmd_report;
}

int parse(CLI::App& app, const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return kExitUsage;
  }
  return -1;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  State state;
  CLI::App app{"Cache-memory augmentation for classifiers: data, training, tuning, attacks, analysis",
               "keycache"};
  build_app(app, state);

  std::vector<std::string> full;
  try {
    const Scan sc = scan(args.empty() ? std::vector<std::string>{"keycache"} : args);
    full = apply_config(args.empty() ? std::vector<std::string>{"keycache"} : args, sc, app);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  if (const int code = parse(app, full, out, err); code >= 0) return code;

  const CLI::App& sub = *app.get_subcommands().front();
  const std::string command = sub.get_name();
  try {
    const fs::path target = normalized(output_of(state, command));
    for (const auto& in : inputs_of(state, command)) {
      if (in.empty()) continue;
      const fs::path p = normalized(in);
      if (is_within(p, target) || is_within(target, p)) {
        throw UsageError("--out " + target.string() + " overlaps input " + p.string());
      }
    }
    OutputDir dir(target);
    body_of(command)(state, dir);
    dir.text("config.json", config_echo(app, sub).dump(2) + "\n");
    dir.commit();
    out << command << ": wrote " << dir.target().string() << '\n';
    return kExitOk;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const Error& e) {
    err << "error [" << to_string(e.code()) << "]: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args(argv, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace keycache::cli
