#include "keycache/model.hpp"

#include <cmath>

#include "keycache/error.hpp"

namespace keycache {

std::vector<double> Classifier::input_gradient(std::span<const double> x,
                                               std::uint32_t target) const {
  if (target >= n_classes()) fail(ErrorCode::InvalidArgument, "target class out of range");
  const ClassDistribution p = predict(x);
  if (!(p[target] > 0.0)) {
    fail(ErrorCode::NonFiniteGradient, "p(target|x) is zero; -log p has no finite gradient");
  }
  std::vector<double> v(n_classes(), 0.0);
  v[target] = -1.0 / p[target];
  auto g = vjp(x, v);
  for (double gi : g) {
    if (!std::isfinite(gi)) fail(ErrorCode::NonFiniteGradient, "input gradient is not finite");
  }
  return g;
}

CacheAugmentedNet::CacheAugmentedNet(std::shared_ptr<const RefNet> net) : net_(std::move(net)) {
  if (!net_) fail(ErrorCode::InvalidArgument, "network required");
}

CacheAugmentedNet::CacheAugmentedNet(std::shared_ptr<const RefNet> net,
                                     std::shared_ptr<const CacheStore> cache, HyperParams hyper)
    : net_(std::move(net)), cache_(std::move(cache)), hyper_(hyper) {
  if (!net_ || !cache_) fail(ErrorCode::InvalidArgument, "network and cache required");
  hyper_.validate();
  if (cache_->n_classes() != net_->n_classes()) {
    fail(ErrorCode::DimMismatch, "cache and network disagree on class count");
  }
  const auto dims = net_->tap_dims();
  std::size_t width = 0;
  for (const auto& id : cache_->layer_ids()) {
    key_taps_.push_back(net_->tap_index(id));
    width += dims[key_taps_.back()];
  }
  if (width != cache_->dim()) {
    fail(ErrorCode::DimMismatch, "cache key width differs from the selected taps");
  }
}

std::vector<double> CacheAugmentedNet::query_from(const ForwardPass& pass) const {
  std::vector<double> q;
  q.reserve(cache_->dim());
  for (std::size_t t : key_taps_) {
    const auto& tap = pass.taps[t];
    q.insert(q.end(), tap.data(), tap.data() + tap.size());
  }
  return q;
}

ClassDistribution CacheAugmentedNet::cache_component(std::span<const double> x) const {
  if (!cache_) fail(ErrorCode::InvalidArgument, "model has no cache");
  const ForwardPass pass = net_->forward(x);
  return cache_distribution(cache_weights(query_from(pass), *cache_, hyper_.theta), *cache_);
}

ClassDistribution CacheAugmentedNet::predict(std::span<const double> x) const {
  const ForwardPass pass = net_->forward(x);
  ClassDistribution p_net = pass.p_net();
  if (!uses_cache()) return p_net;
  const auto p_mem =
      cache_distribution(cache_weights(query_from(pass), *cache_, hyper_.theta), *cache_);
  return mix(p_net, p_mem, hyper_.lambda);
}

std::vector<double> CacheAugmentedNet::vjp(std::span<const double> x,
                                           std::span<const double> v) const {
  if (v.size() != n_classes()) fail(ErrorCode::DimMismatch, "cotangent must have C entries");
  const ForwardPass pass = net_->forward(x);
  std::vector<Eigen::VectorXd> tap_grads(pass.taps.size());

  const double lambda = uses_cache() ? hyper_.lambda : 0.0;
  Eigen::VectorXd g_net(static_cast<Eigen::Index>(v.size()));
  for (std::size_t c = 0; c < v.size(); ++c) g_net[static_cast<Eigen::Index>(c)] = (1.0 - lambda) * v[c];
  tap_grads.back() = g_net;

  if (uses_cache()) {
    const CacheStore& cache = *cache_;
    const auto raw = query_from(pass);
    double norm = 0.0;
    for (double q : raw) norm += q * q;
    norm = std::sqrt(norm);
    const auto unit = normalize_vector(raw);
    std::vector<double> scores(cache.size());
    score_row(unit, cache, scores);
    const auto w = weights_from_scores(scores, hyper_.theta);

    // p_mem_c = sum_k w_k [y_k = c]  =>  dL/dw_k = lambda * v[y_k]
    double mean = 0.0;
    for (std::size_t k = 0; k < cache.size(); ++k) mean += w[k] * v[cache.labels()[k]];
    mean *= lambda;
    // softmax over theta * s:  dL/ds_k = theta * w_k * (g_k - sum_j w_j g_j)
    std::vector<double> g_unit(unit.size(), 0.0);
    for (std::size_t k = 0; k < cache.size(); ++k) {
      const double g_score = hyper_.theta * w[k] * (lambda * v[cache.labels()[k]] - mean);
      if (g_score == 0.0) continue;
      const auto key = cache.key(k);
      for (std::size_t i = 0; i < g_unit.size(); ++i) g_unit[i] += g_score * key[i];
    }
    // through q / ||q||:  (g - q_hat (q_hat . g)) / ||q||
    const double along = dot(unit, g_unit);
    std::size_t offset = 0;
    for (std::size_t t : key_taps_) {
      const auto width = pass.taps[t].size();
      Eigen::VectorXd g_tap(width);
      for (Eigen::Index i = 0; i < width; ++i) {
        const std::size_t j = offset + static_cast<std::size_t>(i);
        g_tap[i] = (g_unit[j] - unit[j] * along) / norm;
      }
      if (tap_grads[t].size() == 0) {
        tap_grads[t] = std::move(g_tap);
      } else {
        tap_grads[t] += g_tap;
      }
      offset += static_cast<std::size_t>(width);
    }
  }

  const Eigen::VectorXd g = net_->backward(pass, tap_grads);
  return std::vector<double>(g.data(), g.data() + g.size());
}

}  // namespace keycache
