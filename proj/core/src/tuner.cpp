#include "keycache/tuner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"
#include "keycache/error.hpp"
#include "keycache/format.hpp"
#include "keycache/rng.hpp"

namespace keycache {

namespace {

std::string join_layers(std::span<const std::string> layers) {
  std::string out;
  for (const auto& l : layers) {
    if (!out.empty()) out += '+';
    out += l;
  }
  return out;
}

std::string cell_label(double theta, double lambda) {
  return "theta=" + format_number(theta) + " lambda=" + format_number(lambda);
}

std::size_t argmax_val(const std::vector<SweepRow>& rows) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].val_accuracy > rows[best].val_accuracy) best = i;
  }
  return best;
}

double accuracy_of(std::span<const ClassDistribution> preds, std::span<const std::uint32_t> labels) {
  return top1_accuracy(preds, labels);
}

// p_mem for every row of the split at one theta.
std::vector<ClassDistribution> cache_distributions(const ScoredSplit& split,
                                                   const CacheStore& cache, double theta) {
  const std::size_t k = cache.size();
  std::vector<ClassDistribution> out;
  out.reserve(split.p_net.size());
  for (std::size_t i = 0; i < split.p_net.size(); ++i) {
    out.push_back(cache_distribution(
        weights_from_scores({split.scores.data() + i * k, k}, theta), cache));
  }
  return out;
}

double mixed_accuracy(const ScoredSplit& split, std::span<const ClassDistribution> p_mem,
                      double lambda) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < split.p_net.size(); ++i) {
    if (mix(split.p_net[i], p_mem[i], lambda).argmax() == split.labels[i]) ++correct;
  }
  return split.labels.empty() ? 0.0
                              : static_cast<double>(correct) / static_cast<double>(split.labels.size());
}

void record_protocol_notes(SweepReport& report) {
  report.notes["selection_metric"] = "validation top-1 accuracy";
  report.notes["tie_break"] = "smaller lambda, then smaller theta";
  report.notes["query_normalization"] = "unit L2 (cosine similarity)";
}

std::vector<std::size_t> depth_order(const FeatureSet& fs, std::vector<std::string>& layers) {
  std::vector<std::size_t> idx;
  for (const auto& l : layers) idx.push_back(fs.layer_index(l));
  std::vector<std::size_t> order(layers.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return idx[a] < idx[b]; });
  std::vector<std::string> sorted;
  std::vector<std::size_t> sorted_idx;
  for (auto o : order) {
    sorted.push_back(layers[o]);
    sorted_idx.push_back(idx[o]);
  }
  layers = std::move(sorted);
  return sorted_idx;
}

}  // namespace

Grid Grid::standard() {
  Grid g;
  for (int i = 1; i <= 9; ++i) {
    g.thetas.push_back(10.0 * i);
    g.lambdas.push_back(i / 10.0);
  }
  return g;
}

Grid Grid::cache_only() {
  Grid g = standard();
  g.lambdas = {1.0};
  return g;
}

void Grid::validate() const {
  if (thetas.empty() || lambdas.empty()) fail(ErrorCode::EmptyGrid, "grid has no cells");
  for (double t : thetas) {
    if (!(t >= 0.0) || !std::isfinite(t)) fail(ErrorCode::InvalidArgument, "grid theta invalid");
  }
  for (double l : lambdas) {
    if (!(l >= 0.0 && l <= 1.0)) fail(ErrorCode::InvalidArgument, "grid lambda outside [0, 1]");
  }
}

// ---- reports -------------------------------------------------------------

std::string SweepReport::to_csv() const {
  std::ostringstream out;
  out << "kind,label,layers,position,theta,lambda,val_accuracy,test_accuracy,test_sem,runs,"
         "chosen,detail\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    out << csv_escape(kind) << ',' << csv_escape(r.label) << ',' << csv_escape(r.layers) << ','
        << format_number(r.position) << ',' << format_number(r.theta) << ','
        << format_number(r.lambda) << ',' << format_number(r.val_accuracy) << ','
        << format_number(r.test_accuracy) << ',' << format_number(r.test_sem) << ',' << r.runs
        << ',' << (i == chosen ? 1 : 0) << ',' << csv_escape(r.detail) << '\n';
  }
  return out.str();
}

std::string SweepReport::to_json() const {
  using nlohmann::json;
  auto num = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
  json j;
  j["kind"] = kind;
  j["n_rows"] = rows.size();
  if (!rows.empty()) {
    const auto& r = chosen_row();
    j["chosen"] = {{"index", chosen},        {"label", r.label},
                   {"layers", r.layers},     {"position", num(r.position)},
                   {"theta", num(r.theta)},  {"lambda", num(r.lambda)},
                   {"val_accuracy", num(r.val_accuracy)},
                   {"test_accuracy", num(r.test_accuracy)},
                   {"test_sem", num(r.test_sem)}, {"runs", r.runs}};
  }
  j["seeds"] = seeds;
  j["metrics"] = json::object();
  for (const auto& [k, v] : metrics) j["metrics"][k] = num(v);
  j["notes"] = notes;
  return j.dump(2) + "\n";
}

// ---- scoring -------------------------------------------------------------

ScoredSplit score_split(const FeatureSet& fs, const CacheStore& cache,
                        std::string_view p_net_layer, std::size_t threads) {
  ScoredSplit out;
  out.scores = compute_scores(concat_layers(fs, cache.layer_ids()), cache, threads);
  out.p_net = distributions_from_layer(fs.layer(p_net_layer).values);
  out.labels = fs.labels();
  if (out.p_net.size() && out.p_net.front().size() != cache.n_classes()) {
    fail(ErrorCode::DimMismatch, "p_net class count differs from cache");
  }
  return out;
}

double baseline_accuracy(const FeatureSet& fs, std::string_view p_net_layer) {
  return accuracy_of(distributions_from_layer(fs.layer(p_net_layer).values), fs.labels());
}

double accuracy_at(const ScoredSplit& split, const CacheStore& cache, const HyperParams& hyper) {
  return accuracy_of(predict_from_scores(split.scores, split.p_net, cache, hyper), split.labels);
}

GridSearchResult grid_search(const ScoredSplit& val, const CacheStore& cache, const Grid& grid,
                             const ScoredSplit* test) {
  grid.validate();
  auto thetas = grid.thetas;
  auto lambdas = grid.lambdas;
  std::sort(thetas.begin(), thetas.end());
  std::sort(lambdas.begin(), lambdas.end());

  // val_acc[lambda][theta]; p_mem computed once per theta and reused for
  // every lambda.
  std::vector<std::vector<double>> val_acc(lambdas.size(), std::vector<double>(thetas.size()));
  std::vector<std::vector<double>> test_acc(lambdas.size(),
                                            std::vector<double>(thetas.size(), kNaN));
  for (std::size_t t = 0; t < thetas.size(); ++t) {
    const auto p_mem_val = cache_distributions(val, cache, thetas[t]);
    std::vector<ClassDistribution> p_mem_test;
    if (test) p_mem_test = cache_distributions(*test, cache, thetas[t]);
    for (std::size_t l = 0; l < lambdas.size(); ++l) {
      val_acc[l][t] = mixed_accuracy(val, p_mem_val, lambdas[l]);
      if (test) test_acc[l][t] = mixed_accuracy(*test, p_mem_test, lambdas[l]);
    }
  }

  GridSearchResult result;
  result.report.kind = "grid";
  record_protocol_notes(result.report);
  result.report.notes["key_layers"] = join_layers(cache.layer_ids());
  bool first = true;
  for (std::size_t l = 0; l < lambdas.size(); ++l) {
    for (std::size_t t = 0; t < thetas.size(); ++t) {
      SweepRow row;
      row.label = cell_label(thetas[t], lambdas[l]);
      row.layers = join_layers(cache.layer_ids());
      row.theta = thetas[t];
      row.lambda = lambdas[l];
      row.val_accuracy = val_acc[l][t];
      row.test_accuracy = test_acc[l][t];
      // Rows are visited in (lambda, theta) ascending order, so a strict
      // comparison realizes the tie-break.
      if (first || row.val_accuracy > result.val_accuracy) {
        result.val_accuracy = row.val_accuracy;
        result.best = {thetas[t], lambdas[l]};
        result.report.chosen = result.report.rows.size();
        first = false;
      }
      result.report.rows.push_back(std::move(row));
    }
  }
  return result;
}

// ---- sweeps --------------------------------------------------------------

SweepReport layer_sweep(const FeatureSet& train, const FeatureSet& val, const FeatureSet& test,
                        std::span<const std::string> layer_ids, HyperParams hyper,
                        std::size_t threads) {
  hyper.validate();
  SweepReport report;
  report.kind = "layers";
  report.notes["selection_metric"] = "validation top-1 accuracy";
  report.notes["hyper_parameters"] = cell_label(hyper.theta, hyper.lambda);
  report.metrics["baseline_val_accuracy"] = baseline_accuracy(val);
  report.metrics["baseline_test_accuracy"] = baseline_accuracy(test);

  const std::size_t n_layers = train.layers().size();
  for (const auto& id : layer_ids) {
    const std::string single[] = {id};
    const CacheStore cache = build_cache(train, single);
    SweepRow row;
    row.label = id;
    row.layers = id;
    row.position = n_layers > 1 ? static_cast<double>(train.layer_index(id)) /
                                      static_cast<double>(n_layers - 1)
                                : 0.0;
    row.theta = hyper.theta;
    row.lambda = hyper.lambda;
    row.val_accuracy = accuracy_at(score_split(val, cache, "output", threads), cache, hyper);
    row.test_accuracy = accuracy_at(score_split(test, cache, "output", threads), cache, hyper);
    if (cache.skipped() > 0) row.detail = "skipped=" + std::to_string(cache.skipped());
    report.rows.push_back(std::move(row));
  }
  if (report.rows.empty()) fail(ErrorCode::InvalidArgument, "layer sweep needs at least one layer");
  report.chosen = argmax_val(report.rows);
  return report;
}

LayerSelection multi_layer_select(std::span<const std::string> candidates, std::size_t max_layers,
                                  const FeatureSet& train, const FeatureSet& val,
                                  const Grid& grid, std::size_t beam, std::size_t threads) {
  if (candidates.empty()) fail(ErrorCode::InvalidArgument, "no candidate layers");
  max_layers = std::max<std::size_t>(max_layers, 1);
  beam = std::max<std::size_t>(beam, 1);

  std::vector<std::string> unique;
  for (const auto& c : candidates) {
    train.layer_index(c);
    if (std::find(unique.begin(), unique.end(), c) == unique.end()) unique.push_back(c);
  }

  struct Evaluated {
    std::vector<std::string> layers;
    double val_accuracy;
    HyperParams hyper;
  };
  std::map<std::string, Evaluated> memo;
  LayerSelection result;
  result.report.kind = "multi";
  record_protocol_notes(result.report);
  result.report.notes["search"] = "beam " + std::to_string(beam) + ", up to " +
                                  std::to_string(max_layers) + " layers";

  auto evaluate = [&](std::vector<std::string> layers) -> const Evaluated& {
    depth_order(train, layers);
    const std::string key = join_layers(layers);
    if (auto it = memo.find(key); it != memo.end()) return it->second;
    const CacheStore cache = build_cache(train, layers);
    const auto tuned = grid_search(score_split(val, cache, "output", threads), cache, grid);
    SweepRow row;
    row.label = key;
    row.layers = key;
    row.position = static_cast<double>(layers.size());
    row.theta = tuned.best.theta;
    row.lambda = tuned.best.lambda;
    row.val_accuracy = tuned.val_accuracy;
    result.report.rows.push_back(row);
    return memo.emplace(key, Evaluated{layers, tuned.val_accuracy, tuned.best}).first->second;
  };

  std::vector<Evaluated> singles;
  for (const auto& c : unique) singles.push_back(evaluate({c}));
  std::stable_sort(singles.begin(), singles.end(),
                   [](const auto& a, const auto& b) { return a.val_accuracy > b.val_accuracy; });

  Evaluated best = singles.front();
  for (std::size_t b = 0; b < std::min(beam, singles.size()); ++b) {
    Evaluated current = singles[b];
    while (current.layers.size() < max_layers) {
      const Evaluated* step = nullptr;
      for (const auto& c : unique) {
        if (std::find(current.layers.begin(), current.layers.end(), c) != current.layers.end()) {
          continue;
        }
        auto grown = current.layers;
        grown.push_back(c);
        const Evaluated& e = evaluate(grown);
        if (e.val_accuracy > current.val_accuracy &&
            (!step || e.val_accuracy > step->val_accuracy)) {
          step = &e;
        }
      }
      if (!step) break;
      current = *step;
    }
    if (current.val_accuracy > best.val_accuracy) best = current;
  }

  result.layers = best.layers;
  result.val_accuracy = best.val_accuracy;
  result.hyper = best.hyper;
  const std::string chosen = join_layers(best.layers);
  for (std::size_t i = 0; i < result.report.rows.size(); ++i) {
    if (result.report.rows[i].layers == chosen) result.report.chosen = i;
  }
  return result;
}

SweepReport cache_size_sweep(const FeatureSet& train, const FeatureSet& val,
                             const FeatureSet& test, std::span<const std::string> layer_ids,
                             const CacheSizeSweepConfig& config, std::size_t threads) {
  config.grid.validate();
  if (config.runs == 0) fail(ErrorCode::InvalidArgument, "cache size sweep needs runs >= 1");
  for (std::size_t i = 0; i < config.fractions.size(); ++i) {
    const double f = config.fractions[i];
    if (!(f >= 0.0 && f <= 1.0)) fail(ErrorCode::InvalidArgument, "fraction outside [0, 1]");
    if (i > 0 && f < config.fractions[i - 1]) {
      fail(ErrorCode::InvalidArgument, "fractions must be sorted");
    }
  }

  SweepReport report;
  report.kind = "size";
  record_protocol_notes(report);
  report.notes["key_layers"] = join_layers(layer_ids);
  report.notes["fraction_zero"] = "bare network (lambda = 0), no cache built";
  report.seeds["sweep"] = config.seed;
  report.metrics["runs"] = static_cast<double>(config.runs);

  const double base_val = baseline_accuracy(val);
  const double base_test = baseline_accuracy(test);
  for (double fraction : config.fractions) {
    SweepRow row;
    row.label = "fraction=" + format_number(fraction);
    row.layers = fraction > 0.0 ? join_layers(layer_ids) : std::string{};
    row.position = fraction;
    row.runs = config.runs;
    std::vector<double> vals, tests;
    for (std::size_t r = 0; r < config.runs; ++r) {
      if (fraction == 0.0) {
        vals.push_back(base_val);
        tests.push_back(base_test);
        continue;
      }
      const std::uint64_t seed = derive_seed(config.seed, r);
      const FeatureSet subset = subsample(train, SubsetSpec{fraction, std::nullopt, seed});
      const CacheStore cache = build_cache(subset, layer_ids);
      const ScoredSplit val_scored = score_split(val, cache, "output", threads);
      const auto tuned = grid_search(val_scored, cache, config.grid);
      vals.push_back(tuned.val_accuracy);
      tests.push_back(accuracy_at(score_split(test, cache, "output", threads), cache, tuned.best));
      if (!row.detail.empty()) row.detail += ';';
      row.detail += "run" + std::to_string(r) + ":K=" + std::to_string(cache.size()) + "," +
                    cell_label(tuned.best.theta, tuned.best.lambda);
    }
    if (fraction == 0.0) {
      row.theta = 0.0;
      row.lambda = 0.0;
    }
    row.val_accuracy = mean(vals);
    row.test_accuracy = mean(tests);
    row.test_sem = standard_error(tests);
    report.rows.push_back(std::move(row));
  }
  if (report.rows.empty()) fail(ErrorCode::InvalidArgument, "no fractions given");
  report.chosen = argmax_val(report.rows);

  std::vector<double> xs, ys;
  for (const auto& r : report.rows) {
    xs.push_back(r.position);
    ys.push_back(r.test_accuracy);
  }
  if (xs.size() >= 2) report.metrics["spearman_fraction_vs_test_accuracy"] = spearman(xs, ys);
  return report;
}

ModelComparison compare_models(const CacheStore& cache, const FeatureSet& val,
                               const FeatureSet& test, const Grid& grid, std::size_t threads) {
  ModelComparison out;
  const ScoredSplit val_scored = score_split(val, cache, "output", threads);
  const ScoredSplit test_scored = score_split(test, cache, "output", threads);
  out.baseline_val = baseline_accuracy(val);
  out.baseline_test = baseline_accuracy(test);
  out.mixture = grid_search(val_scored, cache, grid, &test_scored);
  Grid only = grid;
  only.lambdas = {1.0};
  out.cache_only = grid_search(val_scored, cache, only, &test_scored);
  out.mixture_test = accuracy_at(test_scored, cache, out.mixture.best);
  out.cache_only_test = accuracy_at(test_scored, cache, out.cache_only.best);
  return out;
}

// ---- statistics ----------------------------------------------------------

double mean(std::span<const double> xs) {
  if (xs.empty()) return kNaN;
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

double standard_error(std::span<const double> xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  const double sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  return sd / std::sqrt(static_cast<double>(xs.size()));
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) fail(ErrorCode::LengthMismatch, "spearman inputs differ in length");
  if (x.size() < 2) fail(ErrorCode::InvalidArgument, "spearman needs at least two points");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double mx = mean(rx), my = mean(ry);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace keycache
