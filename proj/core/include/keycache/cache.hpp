#pragma once

// The key-value cache memory: unit-norm keys built from (concatenated)
// layer activations, one-hot values, exponentiated-similarity weighting,
// the cache class distribution and its mixture with the network softmax.

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "keycache/feature_store.hpp"

namespace keycache {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// N x K query-key similarity scores (rows are queries).
using ScoreMatrix = RowMatrix;

inline constexpr double kZeroNormThreshold = 1e-12;
inline constexpr double kKeyNormTolerance = 1e-6;
inline constexpr double kDistributionTolerance = 1e-9;

struct ClassDistribution {
  std::vector<double> probs;

  std::size_t size() const noexcept { return probs.size(); }
  double operator[](std::size_t c) const { return probs[c]; }

  /// Ties resolve to the smallest class index.
  std::uint32_t argmax() const;
  /// Throws InvalidArgument unless entries are >= 0 and sum to 1 +- tol.
  void validate(double tol = kDistributionTolerance) const;
};

struct SimilarityWeights {
  std::vector<double> weights;

  std::size_t size() const noexcept { return weights.size(); }
  double operator[](std::size_t k) const { return weights[k]; }
};

struct HyperParams {
  double theta = 50.0;   // sharpness
  double lambda = 0.5;   // cache weight

  void validate() const;
  friend bool operator==(const HyperParams&, const HyperParams&) = default;
};

/// Immutable cache memory. Keys are stored row-wise (row k is mu_k), so
/// the mathematical d x K key matrix is keys().transpose().
class CacheStore {
 public:
  CacheStore(RowMatrix keys, std::vector<std::uint32_t> labels, std::uint32_t n_classes,
             std::vector<std::string> layer_ids, std::size_t skipped = 0);

  std::size_t size() const noexcept { return labels_.size(); }
  std::size_t dim() const noexcept { return static_cast<std::size_t>(keys_.cols()); }
  std::uint32_t n_classes() const noexcept { return n_classes_; }
  std::size_t skipped() const noexcept { return skipped_; }

  const RowMatrix& keys() const noexcept { return keys_; }
  std::span<const double> key(std::size_t k) const {
    return {keys_.data() + k * dim(), dim()};
  }
  const std::vector<std::uint32_t>& labels() const noexcept { return labels_; }
  const std::vector<std::string>& layer_ids() const noexcept { return layer_ids_; }

  /// C x K one-hot value matrix.
  Eigen::MatrixXd values() const;

 private:
  RowMatrix keys_;
  std::vector<std::uint32_t> labels_;
  std::uint32_t n_classes_;
  std::vector<std::string> layer_ids_;
  std::size_t skipped_;
};

double dot(std::span<const double> a, std::span<const double> b);

/// v / ||v||_2; throws ZeroVector when ||v||_2 < 1e-12.
std::vector<double> normalize_vector(std::span<const double> v);

/// Row-wise concatenation of the selected layers, in the order given.
RowMatrix concat_layers(const FeatureSet& fs, std::span<const std::string> layer_ids);

/// Keys from the selected layers of `fs`. Items whose concatenated vector
/// is (numerically) zero are skipped and counted in CacheStore::skipped().
CacheStore build_cache(const FeatureSet& fs, std::span<const std::string> layer_ids);

/// Scores of an already-normalized query against every key.
void score_row(std::span<const double> unit_query, const CacheStore& cache,
               std::span<double> out);

/// Stable softmax of theta * scores (max subtracted before exponentiation).
SimilarityWeights weights_from_scores(std::span<const double> scores, double theta);

/// Normalizes the query, then weights_from_scores.
SimilarityWeights cache_weights(std::span<const double> query, const CacheStore& cache,
                                double theta);

ClassDistribution cache_distribution(const SimilarityWeights& weights, const CacheStore& cache);

/// (1 - lambda) p_net + lambda p_mem
ClassDistribution mix(const ClassDistribution& p_net, const ClassDistribution& p_mem,
                      double lambda);

/// Normalizes each query row and scores it against the cache. Rows are
/// independent, so `threads` only changes scheduling, never values.
ScoreMatrix compute_scores(const RowMatrix& queries, const CacheStore& cache,
                           std::size_t threads = 1);

std::vector<ClassDistribution> predict_from_scores(const ScoreMatrix& scores,
                                                   std::span<const ClassDistribution> p_net,
                                                   const CacheStore& cache,
                                                   const HyperParams& hyper);

struct BatchPrediction {
  std::vector<ClassDistribution> predictions;
  ScoreMatrix scores;
};

BatchPrediction predict_batch(const RowMatrix& queries, const CacheStore& cache,
                              std::span<const ClassDistribution> p_net,
                              const HyperParams& hyper, std::size_t threads = 1);

double top1_error(std::span<const ClassDistribution> predictions,
                  std::span<const std::uint32_t> labels);
double top1_accuracy(std::span<const ClassDistribution> predictions,
                     std::span<const std::uint32_t> labels);

/// Network softmax rows from a float layer (typically "output"), each
/// renormalized in double precision.
std::vector<ClassDistribution> distributions_from_layer(const FloatMatrix& probs);

// Cache persistence: keys.ftr + values.lbl + manifest.json naming key_layers.
void save_cache(const std::filesystem::path& dir, const CacheStore& cache);
CacheStore load_cache(const std::filesystem::path& dir);

}  // namespace keycache
