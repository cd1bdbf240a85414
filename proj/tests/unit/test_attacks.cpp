#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <random>

#include "keycache/attacks.hpp"
#include "keycache/error.hpp"
#include "oracles.hpp"

using namespace keycache;

namespace {

class ConstantModel : public Classifier {
 public:
  explicit ConstantModel(std::size_t d) : d_(d) {}
  std::size_t input_dim() const override { return d_; }
  std::uint32_t n_classes() const override { return 2; }
  ClassDistribution predict(std::span<const double>) const override { return {{0.7, 0.3}}; }
  std::vector<double> vjp(std::span<const double>, std::span<const double>) const override {
    return std::vector<double>(d_, 0.0);
  }

 private:
  std::size_t d_;
};

// softmax(W x + b)
class LinearModel : public Classifier {
 public:
  LinearModel(Eigen::MatrixXd w, Eigen::VectorXd b) : w_(std::move(w)), b_(std::move(b)) {}
  std::size_t input_dim() const override { return static_cast<std::size_t>(w_.cols()); }
  std::uint32_t n_classes() const override { return static_cast<std::uint32_t>(w_.rows()); }
  ClassDistribution predict(std::span<const double> x) const override {
    const Eigen::VectorXd z = w_ * Eigen::Map<const Eigen::VectorXd>(x.data(), x.size()) + b_;
    const Eigen::VectorXd p = softmax(z);
    return {std::vector<double>(p.data(), p.data() + p.size())};
  }
  std::vector<double> vjp(std::span<const double> x, std::span<const double> v) const override {
    const auto p = predict(x);
    const Eigen::RowVectorXd mean_w = Eigen::Map<const Eigen::RowVectorXd>(p.probs.data(), p.size()) * w_;
    Eigen::RowVectorXd g = Eigen::RowVectorXd::Zero(w_.cols());
    for (Eigen::Index c = 0; c < w_.rows(); ++c) g += v[c] * p[c] * (w_.row(c) - mean_w);
    return std::vector<double>(g.data(), g.data() + g.size());
  }

 private:
  Eigen::MatrixXd w_;
  Eigen::VectorXd b_;
};

// Class 1 iff pixel 0 exceeds 0.9.
class PixelKeyModel : public Classifier {
 public:
  explicit PixelKeyModel(std::size_t d) : d_(d) {}
  std::size_t input_dim() const override { return d_; }
  std::uint32_t n_classes() const override { return 2; }
  ClassDistribution predict(std::span<const double> x) const override {
    return x[0] > 0.9 ? ClassDistribution{{0.0, 1.0}} : ClassDistribution{{1.0, 0.0}};
  }
  std::vector<double> vjp(std::span<const double>, std::span<const double>) const override {
    return std::vector<double>(d_, 0.0);
  }

 private:
  std::size_t d_;
};

// Boundary at x = 0.6 for a single pixel; class 1 to the right.
LinearModel boundary_model() {
  Eigen::MatrixXd w(2, 1);
  w << 0.0, 10.0;
  Eigen::VectorXd b(2);
  b << 0.0, -6.0;
  return LinearModel(w, b);
}

// Reference blur: direct 2-D sum with the same kernel and edge-repeating
// reflection, no separability.
std::vector<double> blur_oracle(const std::vector<double>& x, const ImageShape& s, double sigma) {
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<long double> k(2 * r + 1);
  long double total = 0;
  for (int i = -r; i <= r; ++i) total += (k[i + r] = std::exp(-(long double)(i * i) / (2 * sigma * sigma)));
  for (auto& v : k) v /= total;
  auto reflect = [](int i, int n) {
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
  };
  const int w = s.width, h = s.height;
  std::vector<double> out(x.size());
  for (int row = 0; row < h; ++row) {
    for (int col = 0; col < w; ++col) {
      for (std::uint32_t ch = 0; ch < s.channels; ++ch) {
        long double acc = 0;
        for (int a = -r; a <= r; ++a) {
          for (int b = -r; b <= r; ++b) {
            const int rr = reflect(row + a, h), cc = reflect(col + b, w);
            acc += k[a + r] * k[b + r] * x[(rr * w + cc) * s.channels + ch];
          }
        }
        out[(row * w + col) * s.channels + ch] = static_cast<double>(acc);
      }
    }
  }
  return out;
}

}  // namespace

TEST(Rho, Examples) {
  const std::vector<double> x{3, 4};
  EXPECT_EQ(rho_adv(x, x), 0.0);
  EXPECT_DOUBLE_EQ(rho_adv(x, std::vector<double>{6, 8}), 1.0);
  EXPECT_DOUBLE_EQ(rho_adv(x, std::vector<double>{3, 4.5}), 0.1);
  EXPECT_THROW(rho_adv(std::vector<double>{0, 0}, x), Error);
}

TEST(Schedule, LinearAndKindSpecific) {
  const auto s = linear_schedule(0.5, 100);
  EXPECT_EQ(s.size(), 100u);
  EXPECT_EQ(s.front(), 0.005);
  EXPECT_EQ(s.back(), 0.5);
  AttackConfig blur{AttackKind::GaussianBlur};
  EXPECT_EQ(blur.schedule({8, 6, 1}).back(), 8.0);
  EXPECT_TRUE(AttackConfig{AttackKind::SinglePixel}.schedule({8, 8, 1}).empty());
  EXPECT_EQ(parse_attack_kind("sp"), AttackKind::SinglePixel);
  EXPECT_THROW(parse_attack_kind("cw"), Error);
}

TEST(Fgsm, ConstantModelDiscards) {
  const ConstantModel model(4);
  const std::vector<double> x{0.1, 0.5, 0.9, 0.3};
  const auto sched = linear_schedule(0.5, 100);
  EXPECT_FALSE(fgsm(model, x, sched).success);
  EXPECT_FALSE(ifgsm(model, x, sched).success);
  EXPECT_FALSE(single_pixel(model, x, {2, 2, 1}).success);
  EXPECT_FALSE(gaussian_blur(model, x, {2, 2, 1}, linear_schedule(2, 10)).success);
}

TEST(Fgsm, CrossesLinearBoundaryAtFirstEpsilonPastIt) {
  const auto model = boundary_model();
  const std::vector<double> x{0.5};
  const auto sched = linear_schedule(0.5, 100);
  const auto out = fgsm(model, x, sched);
  ASSERT_TRUE(out.success);
  EXPECT_EQ(out.clean_label, 0u);
  EXPECT_EQ(out.adversarial_label, 1u);
  EXPECT_GT(out.epsilon, 0.1);
  for (std::size_t s = 0; s < out.schedule_index; ++s) EXPECT_LE(sched[s], 0.1 + 1e-12);
  EXPECT_DOUBLE_EQ(out.x_adv[0], 0.5 + out.epsilon);
}

TEST(Ifgsm, NoWorseThanFgsmOnLinearModels) {
  std::mt19937_64 gen(1);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> u(0.2, 0.8);
  const auto sched = linear_schedule(0.5, 100);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::MatrixXd w(3, 5);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = nd(gen);
    const LinearModel model(w, Eigen::VectorXd::Zero(3));
    std::vector<double> x(5);
    for (auto& v : x) v = u(gen);
    const auto a = fgsm(model, x, sched);
    const auto b = ifgsm(model, x, sched);
    if (a.success) {
      ASSERT_TRUE(b.success);
      EXPECT_LE(b.epsilon, a.epsilon);
    }
  }
}

TEST(SinglePixel, HandBuiltModelBreaksAtFirstPixel) {
  const PixelKeyModel model(4);
  const std::vector<double> x{0.2, 1.0, 0.4, 0.0};
  const auto out = single_pixel(model, x, {2, 2, 1});
  ASSERT_TRUE(out.success);
  EXPECT_EQ(out.pixel, 0u);
  EXPECT_EQ(out.x_adv, (std::vector<double>{1.0, 1.0, 0.4, 0.0}));
}

TEST(SinglePixel, ConstantImageIsNoOp) {
  const PixelKeyModel model(4);
  EXPECT_FALSE(single_pixel(model, std::vector<double>(4, 0.95), {2, 2, 1}).success);
}

TEST(Blur, MatchesDirectTwoDimensionalOracle) {
  std::mt19937_64 gen(2);
  const ImageShape shape{5, 4, 2};
  const auto x = oracle::random_vector(gen, shape.size());
  for (double sigma : {0.3, 0.8, 2.5}) {
    const auto fast = gaussian_blur_image(x, shape, sigma);
    const auto ref = blur_oracle(x, shape, sigma);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(fast[i], ref[i], 1e-12);
  }
}

TEST(Blur, LimitsAndIdentities) {
  const ImageShape shape{4, 4, 1};
  std::mt19937_64 gen(3);
  const auto x = oracle::random_vector(gen, 16);
  const auto tiny = gaussian_blur_image(x, shape, 1e-3);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(tiny[i], x[i], 1e-6);
  const std::vector<double> flat(16, 0.4);
  for (double sigma : {0.5, 2.0, 4.0}) {
    const auto b = gaussian_blur_image(flat, shape, sigma);
    for (double v : b) EXPECT_NEAR(v, 0.4, 1e-15);
  }
  EXPECT_FALSE(gaussian_blur(boundary_model(), std::vector<double>{0.5}, {1, 1, 1},
                             linear_schedule(1, 20))
                   .success);
}

TEST(ToyNetAttacks, SoundnessBudgetAndMinimality) {
  SyntheticDatasetSpec spec;
  spec.train_per_class = 30;
  spec.val_per_class = 5;
  spec.test_per_class = 5;
  const auto data = generate_synthetic(spec);
  RefNetConfig cfg;
  cfg.epochs = 5;
  auto net = std::make_shared<const RefNet>(train(RefNet(cfg), data.train, cfg).net);
  const CacheAugmentedNet model(net);
  const auto& xs = data.test.layer("input").values;
  const auto sched = linear_schedule(0.5, 100);
  int successes = 0;
  for (Eigen::Index i = 0; i < 20; ++i) {
    std::vector<double> x(xs.cols());
    for (Eigen::Index j = 0; j < xs.cols(); ++j) x[j] = xs(i, j);
    for (AttackKind kind : {AttackKind::FGSM, AttackKind::IFGSM}) {
      const auto out = run_attack(model, x, data.shape, AttackConfig{kind});
      if (!out.success) continue;
      ++successes;
      EXPECT_NE(model.predict_label(out.x_adv), out.clean_label);
      double linf = 0;
      for (std::size_t j = 0; j < x.size(); ++j) {
        EXPECT_GE(out.x_adv[j], 0.0);
        EXPECT_LE(out.x_adv[j], 1.0);
        linf = std::max(linf, std::abs(out.x_adv[j] - x[j]));
      }
      EXPECT_LE(linf, out.epsilon + 1e-9);
      EXPECT_NEAR(out.rho_adv, rho_adv(x, out.x_adv), 1e-12);
      for (std::size_t s = 0; s < out.schedule_index; ++s) {
        const std::span<const double> earlier(sched.data() + s, 1);
        const auto retry = kind == AttackKind::FGSM ? fgsm(model, x, earlier) : ifgsm(model, x, earlier);
        EXPECT_FALSE(retry.success) << "smaller epsilon " << sched[s] << " already succeeds";
      }
    }
  }
  EXPECT_GT(successes, 0);
}

TEST(Campaign, SelfEvaluationIsZeroAndEmptyIsAnError) {
  SyntheticDatasetSpec spec;
  spec.train_per_class = 30;
  spec.val_per_class = 5;
  spec.test_per_class = 3;
  const auto data = generate_synthetic(spec);
  RefNetConfig cfg;
  cfg.epochs = 5;
  auto net = std::make_shared<const RefNet>(train(RefNet(cfg), data.train, cfg).net);
  const CacheAugmentedNet model(net);
  CampaignConfig cc;
  cc.attacks = {AttackConfig{AttackKind::FGSM}};
  cc.samples = 10;
  const std::vector<NamedModel> evals{{"base", &model}};
  const auto r = attack_campaign({"base", &model}, evals, data.test, data.shape, cc);
  ASSERT_EQ(r.rows.size(), 1u);
  EXPECT_GT(r.rows[0].n_attacked, 0u);
  EXPECT_LE(r.rows[0].n_attacked, 10u);
  EXPECT_GT(r.rows[0].n_success, 0u);
  EXPECT_EQ(r.rows[0].eval_accuracy, 0.0);
  EXPECT_EQ(r.adversarials("fgsm").rows(), static_cast<Eigen::Index>(r.rows[0].n_success));

  const ConstantModel constant(data.shape.size());
  const std::vector<NamedModel> const_evals{{"const", &constant}};
  try {
    attack_campaign({"const", &constant}, const_evals, data.test, data.shape, cc);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoSuccessfulAttacks);
  }
  cc.allow_empty = true;
  const auto empty = attack_campaign({"const", &constant}, const_evals, data.test, data.shape, cc);
  EXPECT_EQ(empty.rows[0].n_success, 0u);
  EXPECT_EQ(empty.rows[0].n_discarded, empty.rows[0].n_attacked);
}
