#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "keycache/cache.hpp"
#include "keycache/refnet.hpp"

namespace keycache {

/// A differentiable classifier over flat inputs. Attacks and the Jacobian
/// analysis only see this interface.
class Classifier {
 public:
  virtual ~Classifier() = default;

  virtual std::size_t input_dim() const = 0;
  virtual std::uint32_t n_classes() const = 0;
  virtual ClassDistribution predict(std::span<const double> x) const = 0;

  /// Vector-Jacobian product: sum_c v_c * dp_c/dx.
  virtual std::vector<double> vjp(std::span<const double> x, std::span<const double> v) const = 0;

  std::uint32_t predict_label(std::span<const double> x) const { return predict(x).argmax(); }

  /// Gradient of -log p(target | x) with respect to x. Throws
  /// NonFiniteGradient if p(target | x) underflows or the result is not
  /// finite.
  std::vector<double> input_gradient(std::span<const double> x, std::uint32_t target) const;
};

/// RefNet, optionally mixed with a cache memory whose keys come from the
/// net's own taps: p = (1 - lambda) p_net + lambda p_mem.
class CacheAugmentedNet : public Classifier {
 public:
  explicit CacheAugmentedNet(std::shared_ptr<const RefNet> net);
  CacheAugmentedNet(std::shared_ptr<const RefNet> net, std::shared_ptr<const CacheStore> cache,
                    HyperParams hyper);

  std::size_t input_dim() const override { return net_->input_dim(); }
  std::uint32_t n_classes() const override { return net_->n_classes(); }
  ClassDistribution predict(std::span<const double> x) const override;
  std::vector<double> vjp(std::span<const double> x, std::span<const double> v) const override;

  const RefNet& net() const noexcept { return *net_; }
  bool has_cache() const noexcept { return cache_ != nullptr; }
  const HyperParams& hyper() const noexcept { return hyper_; }

  /// Cache-only distribution p_mem(x); requires a cache.
  ClassDistribution cache_component(std::span<const double> x) const;

 private:
  bool uses_cache() const noexcept { return cache_ && hyper_.lambda > 0.0; }
  std::vector<double> query_from(const ForwardPass& pass) const;

  std::shared_ptr<const RefNet> net_;
  std::shared_ptr<const CacheStore> cache_;
  HyperParams hyper_{0.0, 0.0};
  std::vector<std::size_t> key_taps_;
};

}  // namespace keycache
