#pragma once

// Reference rectifier MLP over flattened images: p_net, per-layer activation
// taps, analytic backpropagation, seeded SGD training, checkpointing and a
// synthetic template-plus-noise image generator with optional rare features.

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "keycache/cache.hpp"
#include "keycache/feature_store.hpp"

namespace keycache {

struct RefNetConfig {
  ImageShape input_shape{8, 8, 1};
  std::vector<std::size_t> hidden{128, 64};
  std::uint32_t n_classes = 10;
  double learning_rate = 0.05;
  std::size_t epochs = 60;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;

  void validate() const;
};

struct DenseLayer {
  Eigen::MatrixXd weights;  // out x in
  Eigen::VectorXd bias;     // out
};

/// Activations of one forward pass, one entry per layer id:
/// input, hidden1..hiddenH, logits, output.
struct ForwardPass {
  std::vector<Eigen::VectorXd> taps;
  std::vector<Eigen::VectorXd> pre_activations;  // hidden layers only

  const Eigen::VectorXd& output() const { return taps.back(); }
  const Eigen::VectorXd& logits() const { return taps[taps.size() - 2]; }
  ClassDistribution p_net() const;
};

class RefNet {
 public:
  /// Fresh network with seeded He-uniform weights and zero biases.
  explicit RefNet(const RefNetConfig& config);
  RefNet(ImageShape input_shape, std::vector<DenseLayer> layers);

  std::size_t input_dim() const noexcept { return input_shape_.size(); }
  std::uint32_t n_classes() const noexcept;
  const ImageShape& input_shape() const noexcept { return input_shape_; }
  const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
  std::vector<DenseLayer>& mutable_layers() noexcept { return layers_; }
  std::size_t parameter_count() const noexcept;

  const std::vector<std::string>& layer_ids() const noexcept { return layer_ids_; }
  std::vector<std::size_t> tap_dims() const;
  std::size_t tap_index(std::string_view id) const;  // throws UnknownLayer

  ForwardPass forward(std::span<const double> x) const;
  ClassDistribution predict(std::span<const double> x) const { return forward(x).p_net(); }

  /// Gradient with respect to the input given upstream gradients for every
  /// tap (same layout as ForwardPass::taps; entries may be empty = zero).
  Eigen::VectorXd backward(const ForwardPass& pass,
                           const std::vector<Eigen::VectorXd>& tap_grads) const;

  /// Rounds every parameter to the nearest binary32 value.
  void round_to_float();

  friend bool operator==(const RefNet& a, const RefNet& b);

 private:
  void check_shapes();  // also derives layer_ids_

  ImageShape input_shape_;
  std::vector<DenseLayer> layers_;
  std::vector<std::string> layer_ids_;
};

Eigen::VectorXd softmax(const Eigen::VectorXd& logits);

struct TrainResult {
  RefNet net;
  std::vector<double> loss_curve;  // mean cross-entropy per epoch
  double train_accuracy = 0.0;
};

/// Minibatch SGD on cross-entropy over the "input" layer of `data`.
/// Single-threaded and bit-reproducible for a fixed seed. Final parameters
/// are rounded to binary32 so that checkpoints reload exactly.
TrainResult train(RefNet net, const FeatureSet& data, const RefNetConfig& config);

/// Runs every item of data's "input" layer through the net and records all
/// taps as float layers, keeping labels and split.
FeatureSet extract_features(const RefNet& net, const FeatureSet& data, std::size_t threads = 1);

void save_refnet(const std::filesystem::path& dir, const RefNet& net);
RefNet load_refnet(const std::filesystem::path& dir);

// ---- synthetic data ------------------------------------------------------

struct SyntheticDatasetSpec {
  std::uint32_t n_classes = 10;
  ImageShape shape{8, 8, 1};
  std::size_t train_per_class = 100;
  std::size_t val_per_class = 200;
  std::size_t test_per_class = 100;
  double noise_std = 0.3;
  // Class-independent Gaussian variation confined to `nuisance_rank` fixed
  // random patterns (unit RMS each); pixel-space similarity is dominated by
  // it while a trained network can learn to ignore it.
  std::size_t nuisance_rank = 4;
  double nuisance_std = 0.7;
  double rare_probability = 0.1;
  std::vector<std::uint32_t> rare_classes;   // empty: every class carries a patch
  std::uint64_t seed = 1;

  void validate() const;
};

struct SyntheticDataset {
  FeatureSet train;
  FeatureSet val;
  FeatureSet test;
  ImageShape shape;
  std::vector<std::vector<float>> templates;      // per class
  std::vector<std::vector<float>> rare_patches;   // per class, empty if not rare
  std::vector<std::vector<double>> nuisance_patterns;
};

inline constexpr std::size_t kRarePatchSide = 2;

/// Row-major (row, col, channel) offsets covered by the rare-feature patch.
std::vector<std::size_t> rare_patch_offsets(const ImageShape& shape);

SyntheticDataset generate_synthetic(const SyntheticDatasetSpec& spec);

}  // namespace keycache
