#include "keycache/refnet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"
#include "keycache/error.hpp"
#include "keycache/parallel.hpp"
#include "keycache/rng.hpp"

namespace keycache {

void RefNetConfig::validate() const {
  if (input_shape.size() == 0) fail(ErrorCode::InvalidArgument, "input shape must be non-empty");
  if (hidden.empty()) fail(ErrorCode::InvalidArgument, "at least one hidden layer required");
  for (std::size_t w : hidden) {
    if (w == 0) fail(ErrorCode::InvalidArgument, "hidden widths must be positive");
  }
  if (n_classes < 2) fail(ErrorCode::InvalidArgument, "need at least two classes");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    fail(ErrorCode::InvalidArgument, "learning rate must be finite and non-negative");
  }
  if (batch_size == 0) fail(ErrorCode::InvalidArgument, "batch size must be positive");
}

ClassDistribution ForwardPass::p_net() const {
  const auto& out = output();
  return ClassDistribution{std::vector<double>(out.data(), out.data() + out.size())};
}

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  const double top = logits.maxCoeff();
  Eigen::VectorXd e = (logits.array() - top).exp().matrix();
  return e / e.sum();
}

RefNet::RefNet(const RefNetConfig& config) : input_shape_(config.input_shape) {
  config.validate();
  Rng rng(derive_seed(config.seed, 0));
  std::vector<std::size_t> widths{config.input_shape.size()};
  widths.insert(widths.end(), config.hidden.begin(), config.hidden.end());
  widths.push_back(config.n_classes);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const auto in = static_cast<Eigen::Index>(widths[l]);
    const auto out = static_cast<Eigen::Index>(widths[l + 1]);
    const double limit = std::sqrt(6.0 / static_cast<double>(in));
    DenseLayer layer{Eigen::MatrixXd(out, in), Eigen::VectorXd::Zero(out)};
    for (Eigen::Index r = 0; r < out; ++r) {
      for (Eigen::Index c = 0; c < in; ++c) layer.weights(r, c) = rng.uniform(-limit, limit);
    }
    layers_.push_back(std::move(layer));
  }
  round_to_float();
  check_shapes();
}

RefNet::RefNet(ImageShape input_shape, std::vector<DenseLayer> layers)
    : input_shape_(input_shape), layers_(std::move(layers)) {
  check_shapes();
}

void RefNet::check_shapes() {
  if (layers_.size() < 2) fail(ErrorCode::ShapeMismatch, "need a hidden and an output layer");
  auto width = static_cast<Eigen::Index>(input_dim());
  for (const auto& layer : layers_) {
    if (layer.weights.cols() != width || layer.bias.size() != layer.weights.rows()) {
      fail(ErrorCode::ShapeMismatch, "consecutive layer shapes incompatible");
    }
    if (!layer.weights.allFinite() || !layer.bias.allFinite()) {
      fail(ErrorCode::NonFiniteValue, "network parameters must be finite");
    }
    width = layer.weights.rows();
  }
  layer_ids_.clear();
  layer_ids_.push_back("input");
  for (std::size_t h = 1; h < layers_.size(); ++h) layer_ids_.push_back("hidden" + std::to_string(h));
  layer_ids_.push_back("logits");
  layer_ids_.push_back("output");
}

std::uint32_t RefNet::n_classes() const noexcept {
  return static_cast<std::uint32_t>(layers_.back().weights.rows());
}

std::size_t RefNet::parameter_count() const noexcept {
  std::size_t n = 0;
  for (const auto& l : layers_) n += static_cast<std::size_t>(l.weights.size() + l.bias.size());
  return n;
}

std::vector<std::size_t> RefNet::tap_dims() const {
  std::vector<std::size_t> dims{input_dim()};
  for (const auto& l : layers_) dims.push_back(static_cast<std::size_t>(l.weights.rows()));
  dims.push_back(n_classes());
  return dims;
}

std::size_t RefNet::tap_index(std::string_view id) const {
  for (std::size_t i = 0; i < layer_ids_.size(); ++i) {
    if (layer_ids_[i] == id) return i;
  }
  fail(ErrorCode::UnknownLayer, "network has no layer '" + std::string(id) + "'");
}

ForwardPass RefNet::forward(std::span<const double> x) const {
  if (x.size() != input_dim()) {
    fail(ErrorCode::ShapeMismatch, "input has " + std::to_string(x.size()) + " values, net expects " +
                                       std::to_string(input_dim()));
  }
  ForwardPass pass;
  pass.taps.reserve(layers_.size() + 2);
  pass.taps.emplace_back(Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size())));
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Eigen::VectorXd z = layers_[l].weights * pass.taps.back() + layers_[l].bias;
    if (l + 1 < layers_.size()) {
      pass.taps.push_back(z.cwiseMax(0.0));
      pass.pre_activations.push_back(std::move(z));
    } else {
      pass.taps.push_back(std::move(z));
    }
  }
  pass.taps.push_back(softmax(pass.taps.back()));
  return pass;
}

Eigen::VectorXd RefNet::backward(const ForwardPass& pass,
                                 const std::vector<Eigen::VectorXd>& tap_grads) const {
  const std::size_t n_taps = layers_.size() + 2;
  if (tap_grads.size() != n_taps) fail(ErrorCode::ShapeMismatch, "one gradient per tap expected");
  auto add_tap = [&](Eigen::VectorXd& g, std::size_t tap) {
    if (tap_grads[tap].size() == 0) return;
    if (tap_grads[tap].size() != g.size()) fail(ErrorCode::ShapeMismatch, "tap gradient width");
    g += tap_grads[tap];
  };

  const Eigen::VectorXd& out = pass.output();
  Eigen::VectorXd g_out = Eigen::VectorXd::Zero(out.size());
  add_tap(g_out, n_taps - 1);
  // softmax backward: J^T g = p * (g - p.g)
  Eigen::VectorXd g = (out.array() * (g_out.array() - out.dot(g_out))).matrix();
  add_tap(g, n_taps - 2);

  for (std::size_t l = layers_.size(); l-- > 0;) {
    Eigen::VectorXd g_in = layers_[l].weights.transpose() * g;
    add_tap(g_in, l);
    if (l == 0) return g_in;
    const Eigen::VectorXd& pre = pass.pre_activations[l - 1];
    g = (pre.array() > 0.0).select(g_in, 0.0);
  }
  return g;
}

void RefNet::round_to_float() {
  for (auto& l : layers_) {
    l.weights = l.weights.cast<float>().cast<double>();
    l.bias = l.bias.cast<float>().cast<double>();
  }
}

bool operator==(const RefNet& a, const RefNet& b) {
  if (!(a.input_shape_ == b.input_shape_) || a.layers_.size() != b.layers_.size()) return false;
  for (std::size_t l = 0; l < a.layers_.size(); ++l) {
    const auto& la = a.layers_[l];
    const auto& lb = b.layers_[l];
    if (la.weights.rows() != lb.weights.rows() || la.weights.cols() != lb.weights.cols() ||
        la.weights != lb.weights || la.bias != lb.bias) {
      return false;
    }
  }
  return true;
}

// ---- training ------------------------------------------------------------

TrainResult train(RefNet net, const FeatureSet& data, const RefNetConfig& config) {
  config.validate();
  if (data.n_items() == 0) fail(ErrorCode::InvalidArgument, "training data is empty");
  const FloatMatrix& inputs = data.layer("input").values;
  if (static_cast<std::size_t>(inputs.cols()) != net.input_dim()) {
    fail(ErrorCode::ShapeMismatch, "training inputs do not match network input size");
  }
  if (data.n_classes() != net.n_classes()) {
    fail(ErrorCode::ShapeMismatch, "training labels do not match network class count");
  }

  auto& layers = net.mutable_layers();
  std::vector<Eigen::MatrixXd> grad_w(layers.size());
  std::vector<Eigen::VectorXd> grad_b(layers.size());
  const std::size_t n = data.n_items();
  Eigen::VectorXd x(inputs.cols());

  TrainResult result{net, {}, 0.0};
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    Rng rng(derive_seed(config.seed, 1000 + epoch));
    const auto order = rng.permutation(n);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t end = std::min(n, start + config.batch_size);
      for (std::size_t l = 0; l < layers.size(); ++l) {
        grad_w[l].setZero(layers[l].weights.rows(), layers[l].weights.cols());
        grad_b[l].setZero(layers[l].bias.size());
      }
      for (std::size_t b = start; b < end; ++b) {
        const auto row = static_cast<Eigen::Index>(order[b]);
        x = inputs.row(row).transpose().cast<double>();
        const ForwardPass pass = net.forward({x.data(), static_cast<std::size_t>(x.size())});
        const std::uint32_t y = data.labels()[order[b]];
        epoch_loss -= std::log(std::max(pass.output()[y], 1e-300));
        // d(CE)/d(logits) = p - onehot(y)
        Eigen::VectorXd g = pass.output();
        g[y] -= 1.0;
        for (std::size_t l = layers.size(); l-- > 0;) {
          grad_w[l].noalias() += g * pass.taps[l].transpose();
          grad_b[l] += g;
          if (l == 0) break;
          Eigen::VectorXd g_in = layers[l].weights.transpose() * g;
          g = (pass.pre_activations[l - 1].array() > 0.0).select(g_in, 0.0);
        }
      }
      const double step = config.learning_rate / static_cast<double>(end - start);
      for (std::size_t l = 0; l < layers.size(); ++l) {
        layers[l].weights -= step * grad_w[l];
        layers[l].bias -= step * grad_b[l];
      }
    }
    epoch_loss /= static_cast<double>(n);
    if (!std::isfinite(epoch_loss)) {
      fail(ErrorCode::DivergenceDetected, "loss became non-finite in epoch " + std::to_string(epoch));
    }
    result.loss_curve.push_back(epoch_loss);
  }
  for (const auto& l : layers) {
    if (!l.weights.allFinite() || !l.bias.allFinite()) {
      fail(ErrorCode::DivergenceDetected, "parameters became non-finite");
    }
  }
  net.round_to_float();

  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    x = inputs.row(static_cast<Eigen::Index>(i)).transpose().cast<double>();
    if (net.predict({x.data(), static_cast<std::size_t>(x.size())}).argmax() == data.labels()[i]) {
      ++correct;
    }
  }
  result.train_accuracy = static_cast<double>(correct) / static_cast<double>(n);
  result.net = std::move(net);
  return result;
}

FeatureSet extract_features(const RefNet& net, const FeatureSet& data, std::size_t threads) {
  const FloatMatrix& inputs = data.layer("input").values;
  if (static_cast<std::size_t>(inputs.cols()) != net.input_dim()) {
    fail(ErrorCode::ShapeMismatch, "inputs do not match network input size");
  }
  const auto dims = net.tap_dims();
  const auto n = static_cast<Eigen::Index>(data.n_items());
  std::vector<LayerData> layers;
  for (std::size_t t = 0; t < dims.size(); ++t) {
    layers.push_back({net.layer_ids()[t], FloatMatrix(n, static_cast<Eigen::Index>(dims[t]))});
  }
  parallel_for(data.n_items(), threads, [&](std::size_t i) {
    const auto row = static_cast<Eigen::Index>(i);
    const Eigen::VectorXd x = inputs.row(row).transpose().cast<double>();
    const ForwardPass pass = net.forward({x.data(), static_cast<std::size_t>(x.size())});
    for (std::size_t t = 0; t < dims.size(); ++t) {
      layers[t].values.row(row) = pass.taps[t].transpose().cast<float>();
    }
  });
  return FeatureSet(std::move(layers), data.labels(), data.n_classes(), data.split());
}

// ---- checkpoints ---------------------------------------------------------

void save_refnet(const std::filesystem::path& dir, const RefNet& net) {
  using nlohmann::json;
  std::filesystem::create_directories(dir);
  json j;
  j["format"] = "keycache-refnet";
  j["version"] = kFormatVersion;
  j["input_shape"] = {{"width", net.input_shape().width},
                      {"height", net.input_shape().height},
                      {"channels", net.input_shape().channels}};
  j["activation"] = "relu";
  j["layer_ids"] = net.layer_ids();
  j["params"] = json::array();
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    const auto& layer = net.layers()[l];
    const FloatMatrix w = layer.weights.cast<float>();
    const FloatMatrix b = layer.bias.transpose().cast<float>();
    for (const auto& [name, m] : {std::pair{"W" + std::to_string(l + 1), &w},
                                  std::pair{"b" + std::to_string(l + 1), &b}}) {
      const Bytes bytes = encode_features(*m);
      const std::string file = name + ".ftr";
      write_file_atomic(dir / file, bytes);
      j["params"].push_back({{"name", name},
                             {"file", file},
                             {"rows", m->rows()},
                             {"cols", m->cols()},
                             {"crc32", crc32(bytes)}});
    }
  }
  write_text_atomic(dir / "model.json", j.dump(2) + "\n");
}

RefNet load_refnet(const std::filesystem::path& dir) {
  using nlohmann::json;
  const Bytes text = read_file(dir / "model.json");
  json j;
  try {
    j = json::parse(text.begin(), text.end());
  } catch (const json::exception& e) {
    fail(ErrorCode::Io, std::string("malformed model.json: ") + e.what());
  }
  if (j.value("version", 0u) != kFormatVersion) {
    fail(ErrorCode::VersionMismatch, "model checkpoint version unsupported");
  }
  const auto& s = j.at("input_shape");
  const ImageShape shape{s.at("width").get<std::uint32_t>(), s.at("height").get<std::uint32_t>(),
                         s.at("channels").get<std::uint32_t>()};
  const auto& params = j.at("params");
  if (params.size() % 2 != 0) fail(ErrorCode::ShapeMismatch, "weights and biases must pair up");
  std::vector<DenseLayer> layers;
  auto load_param = [&](const json& p) {
    const Bytes bytes = read_file(dir / p.at("file").get<std::string>());
    if (crc32(bytes) != p.at("crc32").get<std::uint32_t>()) {
      fail(ErrorCode::ChecksumMismatch, "checksum mismatch for " + p.at("file").get<std::string>());
    }
    FloatMatrix m = decode_features(bytes);
    if (m.rows() != p.at("rows").get<Eigen::Index>() || m.cols() != p.at("cols").get<Eigen::Index>()) {
      fail(ErrorCode::DimMismatch, "parameter dims differ from model.json");
    }
    return m;
  };
  for (std::size_t i = 0; i < params.size(); i += 2) {
    const FloatMatrix w = load_param(params[i]);
    const FloatMatrix b = load_param(params[i + 1]);
    if (b.rows() != 1) fail(ErrorCode::ShapeMismatch, "bias must be a single row");
    layers.push_back({w.cast<double>(), b.row(0).transpose().cast<double>()});
  }
  return RefNet(shape, std::move(layers));
}

// ---- synthetic data ------------------------------------------------------

void SyntheticDatasetSpec::validate() const {
  if (n_classes < 2) fail(ErrorCode::InvalidArgument, "need at least two classes");
  if (shape.width < kRarePatchSide || shape.height < kRarePatchSide || shape.channels == 0) {
    fail(ErrorCode::InvalidArgument, "image too small for the rare-feature patch");
  }
  if (!(noise_std >= 0.0) || !(nuisance_std >= 0.0)) {
    fail(ErrorCode::InvalidArgument, "noise scales must be non-negative");
  }
  if (!(rare_probability >= 0.0 && rare_probability <= 1.0)) {
    fail(ErrorCode::InvalidArgument, "rare probability must lie in [0, 1]");
  }
  for (auto c : rare_classes) {
    if (c >= n_classes) fail(ErrorCode::InvalidArgument, "rare class out of range");
  }
}

std::vector<std::size_t> rare_patch_offsets(const ImageShape& shape) {
  std::vector<std::size_t> offsets;
  for (std::size_t r = 0; r < kRarePatchSide; ++r) {
    for (std::size_t c = 0; c < kRarePatchSide; ++c) {
      for (std::size_t ch = 0; ch < shape.channels; ++ch) {
        offsets.push_back((r * shape.width + c) * shape.channels + ch);
      }
    }
  }
  return offsets;
}

SyntheticDataset generate_synthetic(const SyntheticDatasetSpec& spec) {
  spec.validate();
  const std::size_t dim = spec.shape.size();
  Rng template_rng(derive_seed(spec.seed, 0));

  std::vector<std::vector<float>> templates(spec.n_classes, std::vector<float>(dim));
  for (auto& t : templates) {
    for (auto& v : t) v = static_cast<float>(template_rng.uniform());
  }
  const auto offsets = rare_patch_offsets(spec.shape);
  std::vector<std::vector<float>> patches(spec.n_classes);
  std::vector<std::uint32_t> rare = spec.rare_classes;
  if (rare.empty()) {
    for (std::uint32_t c = 0; c < spec.n_classes; ++c) rare.push_back(c);
  }
  for (auto c : rare) {
    patches[c].resize(offsets.size());
    // Alternate extremes so the patch reads as a crisp checkerboard; the
    // phase is per class so different rare classes get different patches.
    const std::size_t phase = template_rng.index(2);
    for (std::size_t i = 0; i < offsets.size(); ++i) {
      const std::size_t pixel = i / spec.shape.channels;
      const std::size_t r = pixel / kRarePatchSide;
      const std::size_t col = pixel % kRarePatchSide;
      patches[c][i] = ((r + col + phase + c) % 2 == 0) ? 1.0f : 0.0f;
    }
  }

  std::vector<std::vector<double>> nuisance(spec.nuisance_rank, std::vector<double>(dim));
  for (auto& pattern : nuisance) {
    double sq = 0.0;
    for (auto& v : pattern) {
      v = template_rng.uniform(-1.0, 1.0);
      sq += v * v;
    }
    const double rms = std::sqrt(sq / static_cast<double>(dim));
    for (auto& v : pattern) v /= rms;
  }

  auto make_split = [&](Split split, std::size_t per_class, std::uint64_t stream) {
    Rng rng(derive_seed(spec.seed, stream));
    const std::size_t n = per_class * spec.n_classes;
    FloatMatrix pixels(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
    std::vector<std::uint32_t> labels(n);
    std::size_t row = 0;
    for (std::size_t i = 0; i < per_class; ++i) {
      for (std::uint32_t c = 0; c < spec.n_classes; ++c, ++row) {
        labels[row] = c;
        std::vector<double> offset(dim, 0.0);
        for (const auto& pattern : nuisance) {
          const double z = spec.nuisance_std * rng.normal();
          for (std::size_t p = 0; p < dim; ++p) offset[p] += z * pattern[p];
        }
        for (std::size_t p = 0; p < dim; ++p) {
          const double v = templates[c][p] + offset[p] + spec.noise_std * rng.normal();
          pixels(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(p)) =
              static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
        const bool rare = rng.uniform() < spec.rare_probability;
        if (rare && !patches[c].empty()) {
          for (std::size_t i2 = 0; i2 < offsets.size(); ++i2) {
            pixels(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(offsets[i2])) = patches[c][i2];
          }
        }
      }
    }
    std::vector<LayerData> layers;
    layers.push_back({"input", std::move(pixels)});
    return FeatureSet(std::move(layers), std::move(labels), spec.n_classes, split);
  };

  return SyntheticDataset{make_split(Split::Train, spec.train_per_class, 1),
                          make_split(Split::Val, spec.val_per_class, 2),
                          make_split(Split::Test, spec.test_per_class, 3),
                          spec.shape,
                          std::move(templates),
                          std::move(patches),
                          std::move(nuisance)};
}

}  // namespace keycache
