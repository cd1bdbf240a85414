#include "keycache/cache.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "keycache/error.hpp"
#include "keycache/parallel.hpp"

namespace keycache {

std::uint32_t ClassDistribution::argmax() const {
  if (probs.empty()) fail(ErrorCode::InvalidArgument, "argmax of empty distribution");
  std::size_t best = 0;
  for (std::size_t c = 1; c < probs.size(); ++c) {
    if (probs[c] > probs[best]) best = c;
  }
  return static_cast<std::uint32_t>(best);
}

void ClassDistribution::validate(double tol) const {
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0) || !std::isfinite(p)) {
      fail(ErrorCode::InvalidArgument, "distribution entry negative or non-finite");
    }
    sum += p;
  }
  if (std::abs(sum - 1.0) > tol) {
    fail(ErrorCode::InvalidArgument, "distribution sums to " + std::to_string(sum));
  }
}

void HyperParams::validate() const {
  if (!(theta >= 0.0) || !std::isfinite(theta)) {
    fail(ErrorCode::InvalidArgument, "theta must be finite and non-negative");
  }
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    fail(ErrorCode::InvalidArgument, "lambda must lie in [0, 1]");
  }
}

CacheStore::CacheStore(RowMatrix keys, std::vector<std::uint32_t> labels, std::uint32_t n_classes,
                       std::vector<std::string> layer_ids, std::size_t skipped)
    : keys_(std::move(keys)),
      labels_(std::move(labels)),
      n_classes_(n_classes),
      layer_ids_(std::move(layer_ids)),
      skipped_(skipped) {
  if (labels_.empty()) fail(ErrorCode::EmptyCache, "cache holds no items");
  if (static_cast<std::size_t>(keys_.rows()) != labels_.size()) {
    fail(ErrorCode::DimMismatch, "key count differs from value count");
  }
  if (n_classes_ == 0) fail(ErrorCode::InvalidArgument, "cache needs at least one class");
  for (std::size_t k = 0; k < labels_.size(); ++k) {
    if (labels_[k] >= n_classes_) fail(ErrorCode::DimMismatch, "cache label out of range");
    const double norm = keys_.row(static_cast<Eigen::Index>(k)).norm();
    if (!(std::abs(norm - 1.0) <= kKeyNormTolerance)) {
      fail(ErrorCode::InvalidArgument, "key " + std::to_string(k) + " has norm " +
                                           std::to_string(norm));
    }
  }
}

Eigen::MatrixXd CacheStore::values() const {
  Eigen::MatrixXd v = Eigen::MatrixXd::Zero(n_classes_, static_cast<Eigen::Index>(size()));
  for (std::size_t k = 0; k < size(); ++k) v(labels_[k], static_cast<Eigen::Index>(k)) = 1.0;
  return v;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::vector<double> normalize_vector(std::span<const double> v) {
  double sq = 0.0;
  for (double x : v) {
    if (!std::isfinite(x)) fail(ErrorCode::NonFiniteValue, "vector has non-finite entry");
    sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (norm < kZeroNormThreshold) fail(ErrorCode::ZeroVector, "vector norm below 1e-12");
  std::vector<double> out(v.begin(), v.end());
  for (double& x : out) x /= norm;
  return out;
}

RowMatrix concat_layers(const FeatureSet& fs, std::span<const std::string> layer_ids) {
  if (layer_ids.empty()) fail(ErrorCode::InvalidArgument, "no layers selected");
  std::vector<const LayerData*> selected;
  Eigen::Index width = 0;
  for (const auto& id : layer_ids) {
    selected.push_back(&fs.layer(id));
    width += selected.back()->values.cols();
  }
  RowMatrix out(static_cast<Eigen::Index>(fs.n_items()), width);
  Eigen::Index col = 0;
  for (const LayerData* layer : selected) {
    out.middleCols(col, layer->values.cols()) = layer->values.cast<double>();
    col += layer->values.cols();
  }
  return out;
}

CacheStore build_cache(const FeatureSet& fs, std::span<const std::string> layer_ids) {
  const RowMatrix raw = concat_layers(fs, layer_ids);
  RowMatrix keys(raw.rows(), raw.cols());
  std::vector<std::uint32_t> labels;
  std::size_t kept = 0;
  std::size_t skipped = 0;
  for (Eigen::Index i = 0; i < raw.rows(); ++i) {
    const double norm = raw.row(i).norm();
    if (norm < kZeroNormThreshold) {
      ++skipped;
      continue;
    }
    keys.row(static_cast<Eigen::Index>(kept)) = raw.row(i) / norm;
    labels.push_back(fs.labels()[static_cast<std::size_t>(i)]);
    ++kept;
  }
  if (kept == 0) fail(ErrorCode::EmptyCache, "every item has a zero key vector");
  keys.conservativeResize(static_cast<Eigen::Index>(kept), Eigen::NoChange);
  return CacheStore(std::move(keys), std::move(labels), fs.n_classes(),
                    std::vector<std::string>(layer_ids.begin(), layer_ids.end()), skipped);
}

void score_row(std::span<const double> unit_query, const CacheStore& cache,
               std::span<double> out) {
  if (unit_query.size() != cache.dim()) {
    fail(ErrorCode::DimMismatch, "query has " + std::to_string(unit_query.size()) +
                                     " dims, cache keys have " + std::to_string(cache.dim()));
  }
  // Every scoring path goes through here, so single queries and batches agree
  // bit for bit regardless of thread count.
  const Eigen::Map<const Eigen::VectorXd> q(unit_query.data(), static_cast<Eigen::Index>(unit_query.size()));
  Eigen::Map<Eigen::VectorXd>(out.data(), static_cast<Eigen::Index>(out.size())).noalias() = cache.keys() * q;
}

SimilarityWeights weights_from_scores(std::span<const double> scores, double theta) {
  SimilarityWeights w;
  w.weights.resize(scores.size());
  if (scores.empty()) return w;
  const double top = *std::max_element(scores.begin(), scores.end());
  double total = 0.0;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    w.weights[k] = std::exp(theta * (scores[k] - top));
    total += w.weights[k];
  }
  for (double& x : w.weights) x /= total;
  return w;
}

SimilarityWeights cache_weights(std::span<const double> query, const CacheStore& cache,
                                double theta) {
  if (query.size() != cache.dim()) {
    fail(ErrorCode::DimMismatch, "query has " + std::to_string(query.size()) +
                                     " dims, cache keys have " + std::to_string(cache.dim()));
  }
  const auto unit = normalize_vector(query);
  std::vector<double> scores(cache.size());
  score_row(unit, cache, scores);
  return weights_from_scores(scores, theta);
}

ClassDistribution cache_distribution(const SimilarityWeights& weights, const CacheStore& cache) {
  if (weights.size() != cache.size()) {
    fail(ErrorCode::LengthMismatch, "weight count differs from cache size");
  }
  ClassDistribution p{std::vector<double>(cache.n_classes(), 0.0)};
  const auto& labels = cache.labels();
  for (std::size_t k = 0; k < weights.size(); ++k) p.probs[labels[k]] += weights[k];
  return p;
}

ClassDistribution mix(const ClassDistribution& p_net, const ClassDistribution& p_mem,
                      double lambda) {
  if (p_net.size() != p_mem.size()) {
    fail(ErrorCode::DimMismatch, "p_net and p_mem have different class counts");
  }
  ClassDistribution p{std::vector<double>(p_net.size())};
  for (std::size_t c = 0; c < p.size(); ++c) {
    p.probs[c] = (1.0 - lambda) * p_net[c] + lambda * p_mem[c];
  }
  return p;
}

ScoreMatrix compute_scores(const RowMatrix& queries, const CacheStore& cache,
                           std::size_t threads) {
  if (static_cast<std::size_t>(queries.cols()) != cache.dim()) {
    fail(ErrorCode::DimMismatch, "query width " + std::to_string(queries.cols()) +
                                     " differs from key width " + std::to_string(cache.dim()));
  }
  ScoreMatrix scores(queries.rows(), static_cast<Eigen::Index>(cache.size()));
  const auto d = static_cast<std::size_t>(queries.cols());
  parallel_for(static_cast<std::size_t>(queries.rows()), threads, [&](std::size_t i) {
    const auto unit = normalize_vector({queries.data() + i * d, d});
    score_row(unit, cache, {scores.data() + i * cache.size(), cache.size()});
  });
  return scores;
}

std::vector<ClassDistribution> predict_from_scores(const ScoreMatrix& scores,
                                                   std::span<const ClassDistribution> p_net,
                                                   const CacheStore& cache,
                                                   const HyperParams& hyper) {
  hyper.validate();
  if (static_cast<std::size_t>(scores.rows()) != p_net.size()) {
    fail(ErrorCode::LengthMismatch, "score rows differ from p_net batch size");
  }
  if (static_cast<std::size_t>(scores.cols()) != cache.size()) {
    fail(ErrorCode::DimMismatch, "score columns differ from cache size");
  }
  std::vector<ClassDistribution> out;
  out.reserve(p_net.size());
  const std::size_t k = cache.size();
  for (std::size_t i = 0; i < p_net.size(); ++i) {
    const auto w = weights_from_scores({scores.data() + i * k, k}, hyper.theta);
    out.push_back(mix(p_net[i], cache_distribution(w, cache), hyper.lambda));
  }
  return out;
}

BatchPrediction predict_batch(const RowMatrix& queries, const CacheStore& cache,
                              std::span<const ClassDistribution> p_net,
                              const HyperParams& hyper, std::size_t threads) {
  BatchPrediction out;
  out.scores = compute_scores(queries, cache, threads);
  out.predictions = predict_from_scores(out.scores, p_net, cache, hyper);
  return out;
}

double top1_error(std::span<const ClassDistribution> predictions,
                  std::span<const std::uint32_t> labels) {
  if (predictions.size() != labels.size()) {
    fail(ErrorCode::LengthMismatch, "prediction count differs from label count");
  }
  if (predictions.empty()) return 0.0;
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (predictions[i].argmax() != labels[i]) ++wrong;
  }
  return static_cast<double>(wrong) / static_cast<double>(labels.size());
}

double top1_accuracy(std::span<const ClassDistribution> predictions,
                     std::span<const std::uint32_t> labels) {
  return 1.0 - top1_error(predictions, labels);
}

std::vector<ClassDistribution> distributions_from_layer(const FloatMatrix& probs) {
  std::vector<ClassDistribution> out;
  out.reserve(static_cast<std::size_t>(probs.rows()));
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    ClassDistribution p{std::vector<double>(static_cast<std::size_t>(probs.cols()))};
    double sum = 0.0;
    for (Eigen::Index c = 0; c < probs.cols(); ++c) {
      p.probs[static_cast<std::size_t>(c)] = probs(i, c);
      sum += p.probs[static_cast<std::size_t>(c)];
    }
    if (!(sum > 0.0)) fail(ErrorCode::InvalidArgument, "probability row sums to zero");
    for (double& x : p.probs) x /= sum;
    out.push_back(std::move(p));
  }
  return out;
}

void save_cache(const std::filesystem::path& dir, const CacheStore& cache) {
  std::filesystem::create_directories(dir);
  Manifest m;
  m.dataset = "cache";
  m.n_classes = cache.n_classes();
  m.key_layers = cache.layer_ids();
  m.layers.push_back({"keys", cache.dim()});
  m.skipped_items = cache.skipped();

  const FloatMatrix keys = cache.keys().cast<float>();
  const Bytes key_bytes = encode_features(keys);
  const Bytes label_bytes = encode_labels(cache.labels(), cache.n_classes());
  SplitEntry entry;
  entry.n_items = cache.size();
  entry.labels = {"values.lbl", crc32(label_bytes)};
  entry.features["keys"] = {"keys.ftr", crc32(key_bytes)};
  write_file_atomic(dir / "keys.ftr", key_bytes);
  write_file_atomic(dir / "values.lbl", label_bytes);
  m.splits["train"] = entry;
  m.save(dir / kManifestFile);
}

CacheStore load_cache(const std::filesystem::path& dir) {
  const Manifest m = Manifest::load(dir / kManifestFile);
  if (m.key_layers.empty()) fail(ErrorCode::Io, "cache manifest lists no key layers");
  const FeatureSet fs = load_feature_set(dir, m, Split::Train);
  return CacheStore(fs.layer("keys").values.cast<double>(), fs.labels(), m.n_classes,
                    m.key_layers, m.skipped_items);
}

}  // namespace keycache
