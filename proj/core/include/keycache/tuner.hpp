#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "keycache/cache.hpp"
#include "keycache/feature_store.hpp"

namespace keycache {

struct Grid {
  std::vector<double> thetas;
  std::vector<double> lambdas;

  /// theta in {10, 20, ..., 90}, lambda in {0.1, 0.2, ..., 0.9}.
  static Grid standard();
  /// Same thetas with lambda pinned to 1.
  static Grid cache_only();

  std::size_t size() const noexcept { return thetas.size() * lambdas.size(); }
  void validate() const;  // EmptyGrid / InvalidArgument
};

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct SweepRow {
  std::string label;
  std::string layers;            // '+'-joined key layers, empty for the baseline
  double position = kNaN;        // normalized layer index or cache fraction
  double theta = kNaN;
  double lambda = kNaN;
  double val_accuracy = kNaN;
  double test_accuracy = kNaN;
  double test_sem = kNaN;
  std::size_t runs = 1;
  std::string detail;
};

struct SweepReport {
  std::string kind;
  std::vector<SweepRow> rows;
  std::size_t chosen = 0;
  std::map<std::string, std::uint64_t> seeds;
  std::map<std::string, double> metrics;
  std::map<std::string, std::string> notes;

  const SweepRow& chosen_row() const { return rows.at(chosen); }
  std::string to_csv() const;
  std::string to_json() const;
};

/// Everything the cache scorer needs for one split, with the query-key
/// score matrix computed once.
struct ScoredSplit {
  ScoreMatrix scores;
  std::vector<ClassDistribution> p_net;
  std::vector<std::uint32_t> labels;
};

/// Queries are the concatenation of cache.layer_ids() from `fs`; p_net is
/// read from `p_net_layer`.
ScoredSplit score_split(const FeatureSet& fs, const CacheStore& cache,
                        std::string_view p_net_layer = "output", std::size_t threads = 1);

double baseline_accuracy(const FeatureSet& fs, std::string_view p_net_layer = "output");
double accuracy_at(const ScoredSplit& split, const CacheStore& cache, const HyperParams& hyper);

struct GridSearchResult {
  HyperParams best;
  double val_accuracy = 0.0;
  SweepReport report;
};

/// Evaluates every grid cell by reweighting the precomputed scores. The
/// winner maximizes validation accuracy; ties go to the smaller lambda,
/// then the smaller theta. If `test` is given each row also carries test
/// accuracy.
GridSearchResult grid_search(const ScoredSplit& val, const CacheStore& cache, const Grid& grid,
                             const ScoredSplit* test = nullptr);

/// One cache per layer at fixed hyper-parameters (default: the middle of
/// the standard grid). Row position is layer index / (L - 1).
SweepReport layer_sweep(const FeatureSet& train, const FeatureSet& val, const FeatureSet& test,
                        std::span<const std::string> layer_ids, HyperParams hyper = {50.0, 0.5},
                        std::size_t threads = 1);

struct LayerSelection {
  std::vector<std::string> layers;  // depth order
  double val_accuracy = 0.0;
  HyperParams hyper;
  SweepReport report;               // every combination evaluated
};

/// Beam search over layer combinations: singles ranked by tuned validation
/// accuracy, the top `beam` grown greedily (best strictly-improving
/// addition per step) up to `max_layers`.
LayerSelection multi_layer_select(std::span<const std::string> candidates, std::size_t max_layers,
                                  const FeatureSet& train, const FeatureSet& val,
                                  const Grid& grid = Grid::standard(), std::size_t beam = 3,
                                  std::size_t threads = 1);

struct CacheSizeSweepConfig {
  std::vector<double> fractions{0.0, 0.1, 0.25, 0.5, 1.0};
  std::size_t runs = 2;
  std::uint64_t seed = 0;
  Grid grid = Grid::standard();
};

/// Row per fraction: mean validation/test accuracy over `runs` stratified
/// subsamples (each tuned separately); fraction 0 is the bare network.
SweepReport cache_size_sweep(const FeatureSet& train, const FeatureSet& val,
                             const FeatureSet& test, std::span<const std::string> layer_ids,
                             const CacheSizeSweepConfig& config, std::size_t threads = 1);

/// Baseline, tuned mixture and tuned cache-only on one split triple.
struct ModelComparison {
  double baseline_val = 0.0;
  double baseline_test = 0.0;
  GridSearchResult mixture;
  GridSearchResult cache_only;
  double mixture_test = 0.0;
  double cache_only_test = 0.0;
};

ModelComparison compare_models(const CacheStore& cache, const FeatureSet& val,
                               const FeatureSet& test, const Grid& grid = Grid::standard(),
                               std::size_t threads = 1);

// ---- small statistics helpers ---------------------------------------------

double mean(std::span<const double> xs);
/// Standard error of the mean (sample standard deviation / sqrt(n)); 0 for n < 2.
double standard_error(std::span<const double> xs);
/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

}  // namespace keycache
