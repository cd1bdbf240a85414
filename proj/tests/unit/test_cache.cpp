#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "keycache/cache.hpp"
#include "keycache/error.hpp"
#include "oracles.hpp"

using namespace keycache;

namespace {

struct Instance {
  std::vector<std::vector<double>> keys;
  std::vector<std::uint32_t> labels;
  std::uint32_t n_classes;
  std::vector<std::vector<double>> queries;
  std::vector<std::vector<double>> p_net;
};

Instance random_instance(std::mt19937_64& gen, std::size_t n, std::size_t k, std::uint32_t c,
                         std::size_t d) {
  Instance inst;
  inst.n_classes = c;
  for (std::size_t j = 0; j < k; ++j) {
    inst.keys.push_back(oracle::random_vector(gen, d));
    inst.labels.push_back(std::uniform_int_distribution<std::uint32_t>(0, c - 1)(gen));
  }
  for (std::size_t i = 0; i < n; ++i) {
    inst.queries.push_back(oracle::random_vector(gen, d));
    inst.p_net.push_back(oracle::random_simplex(gen, c));
  }
  return inst;
}

RowMatrix as_rows(const std::vector<std::vector<double>>& rows) {
  RowMatrix m(rows.size(), rows.at(0).size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(i, j) = rows[i][j];
  }
  return m;
}

std::vector<ClassDistribution> as_dists(const std::vector<std::vector<double>>& rows) {
  std::vector<ClassDistribution> out;
  for (const auto& r : rows) out.push_back({r});
  return out;
}

}  // namespace

TEST(Normalize, Examples) {
  const auto a = normalize_vector(std::vector<double>{3, 4});
  EXPECT_DOUBLE_EQ(a[0], 0.6);
  EXPECT_DOUBLE_EQ(a[1], 0.8);
  const auto b = normalize_vector(std::vector<double>{1, 0, 0});
  EXPECT_EQ(b, (std::vector<double>{1, 0, 0}));
  try {
    normalize_vector(std::vector<double>{0, 0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ZeroVector);
  }
}

TEST(BuildCache, ConcatenatesLayers) {
  FloatMatrix a(5, 2), b(5, 3);
  a.setRandom();
  b.setRandom();
  FeatureSet fs({{"a", a}, {"b", b}}, {0, 1, 0, 1, 0}, 2, Split::Train);
  const std::vector<std::string> ids{"a", "b"};
  const auto cache = build_cache(fs, ids);
  EXPECT_EQ(cache.dim(), 5u);
  EXPECT_EQ(cache.size(), 5u);
  EXPECT_EQ(cache.values().rows(), 2);
  EXPECT_EQ(cache.values().cols(), 5);
  EXPECT_EQ(cache.layer_ids(), ids);
}

TEST(BuildCache, KeyNormsAgainstExtendedPrecision) {
  std::mt19937_64 gen(21);
  std::normal_distribution<float> nd;
  FloatMatrix a(20, 4), b(20, 7);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = nd(gen);
  for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = nd(gen);
  FeatureSet fs({{"a", a}, {"b", b}}, std::vector<std::uint32_t>(20, 0), 1, Split::Train);
  const std::vector<std::string> ids{"a", "b"};
  const auto cache = build_cache(fs, ids);
  ASSERT_EQ(cache.size(), 20u);
  for (std::size_t k = 0; k < 20; ++k) {
    long double sq = 0;
    for (double v : cache.key(k)) sq += static_cast<long double>(v) * v;
    EXPECT_NEAR(static_cast<double>(std::sqrt(sq)), 1.0, 1e-6);
  }
}

TEST(BuildCache, SingleItemAndZeroRows) {
  FloatMatrix one(1, 3);
  one << 0.0f, 2.0f, 0.0f;
  const std::vector<std::string> ids{"x"};
  const auto c1 = build_cache(FeatureSet({{"x", one}}, {0}, 1, Split::Train), ids);
  EXPECT_EQ(c1.size(), 1u);
  EXPECT_DOUBLE_EQ(c1.key(0)[1], 1.0);

  FloatMatrix m(3, 2);
  m << 1, 0, 0, 0, 0, 1;
  const auto c2 = build_cache(FeatureSet({{"x", m}}, {0, 1, 1}, 2, Split::Train), ids);
  EXPECT_EQ(c2.size(), 2u);
  EXPECT_EQ(c2.skipped(), 1u);

  FloatMatrix zero = FloatMatrix::Zero(2, 2);
  try {
    build_cache(FeatureSet({{"x", zero}}, {0, 1}, 2, Split::Train), ids);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyCache);
  }
}

TEST(CacheStoreInvariants, RejectsNonUnitKeys) {
  RowMatrix keys(1, 2);
  keys << 1.0, 1.0;
  EXPECT_THROW(CacheStore(keys, {0}, 1, {"x"}), Error);
}

TEST(Weights, ThetaZeroIsUniform) {
  const auto cache = oracle::make_cache({{1, 0}, {0, 1}, {1, 1}, {-1, 0.5}}, {0, 0, 1, 1}, 2);
  const auto w = cache_weights(std::vector<double>{0.3, -2}, cache, 0.0);
  for (double x : w.weights) EXPECT_EQ(x, 0.25);
}

TEST(Weights, SingleKey) {
  const auto cache = oracle::make_cache({{1, 2, 3}}, {0}, 1);
  for (double theta : {0.0, 10.0, 1e4}) {
    EXPECT_EQ(cache_weights(std::vector<double>{-4, 1, 0.5}, cache, theta)[0], 1.0);
  }
}

TEST(Weights, TwoOrthogonalKeysAgainstOracle) {
  const auto cache = oracle::make_cache({{1, 0}, {0, 1}}, {0, 1}, 2);
  const std::vector<double> q{1, 0};
  const auto w = cache_weights(q, cache, 10.0);
  const auto p = oracle::mixture({{1, 0}, {0, 1}}, {0, 1}, 2, q, {0.5, 0.5}, 10, 1);
  EXPECT_NEAR(w[0], static_cast<double>(p[0]), 1e-15);
  EXPECT_NEAR(w[1], static_cast<double>(p[1]), 1e-15);
  EXPECT_NEAR(w[0], 0.99995460, 5e-9);
  EXPECT_NEAR(w[1], 0.00004540, 5e-9);
  const auto p_mem = cache_distribution(w, cache);
  EXPECT_NEAR(p_mem[0], 0.99995460, 5e-9);
  EXPECT_NEAR(p_mem[1], 0.00004540, 5e-9);
}

TEST(Weights, StableForLargeTheta) {
  const auto cache = oracle::make_cache({{1, 0}, {0.6, 0.8}}, {0, 1}, 2);
  const auto w = cache_weights(std::vector<double>{1, 0}, cache, 1e6);
  EXPECT_EQ(w[0], 1.0);
  EXPECT_EQ(w[1], 0.0);
}

TEST(CacheDistribution, Examples) {
  const auto same = oracle::make_cache({{1, 0}, {0, 1}, {1, 1}}, {2, 2, 2}, 3);
  const auto p = cache_distribution(cache_weights(std::vector<double>{1, 0}, same, 40), same);
  EXPECT_EQ(p.probs, (std::vector<double>{0, 0, 1}));

  const auto freq = oracle::make_cache({{1, 0}, {0, 1}, {1, 1}}, {0, 0, 1}, 2);
  const auto q = cache_distribution(cache_weights(std::vector<double>{1, 0}, freq, 0), freq);
  EXPECT_NEAR(q[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(q[1], 1.0 / 3.0, 1e-15);
}

TEST(Mix, Examples) {
  const ClassDistribution net{{0.8, 0.2}}, mem{{0.2, 0.8}};
  EXPECT_EQ(mix(net, mem, 0.0).probs, net.probs);
  EXPECT_EQ(mix(net, mem, 1.0).probs, mem.probs);
  const auto half = mix(net, mem, 0.5);
  EXPECT_DOUBLE_EQ(half[0], 0.5);
  EXPECT_DOUBLE_EQ(half[1], 0.5);
}

TEST(ClassDistributionTest, ArgmaxTieGoesToSmallerIndex) {
  EXPECT_EQ((ClassDistribution{{0.4, 0.4, 0.2}}).argmax(), 0u);
  EXPECT_EQ((ClassDistribution{{0.1, 0.45, 0.45}}).argmax(), 1u);
}

TEST(PredictBatch, MatchesScalarOracle) {
  std::mt19937_64 gen(99);
  const auto inst = random_instance(gen, 8, 16, 5, 8);
  const auto cache = oracle::make_cache(inst.keys, inst.labels, inst.n_classes);
  const auto p_net = as_dists(inst.p_net);
  for (HyperParams h : {HyperParams{50, 0.5}, HyperParams{0, 0.3}, HyperParams{100, 1.0}}) {
    const auto out = predict_batch(as_rows(inst.queries), cache, p_net, h);
    for (std::size_t i = 0; i < 8; ++i) {
      const auto ref = oracle::mixture(inst.keys, inst.labels, inst.n_classes, inst.queries[i],
                                       inst.p_net[i], h.theta, h.lambda);
      for (std::uint32_t c = 0; c < inst.n_classes; ++c) {
        const double r = static_cast<double>(ref[c]);
        EXPECT_LE(std::abs(out.predictions[i][c] - r), 1e-10 * std::max(std::abs(r), 1e-300))
            << "item " << i << " class " << c;
      }
      out.predictions[i].validate();
    }
  }
}

TEST(PredictBatch, SingleItemMatchesScalarPathExactly) {
  std::mt19937_64 gen(5);
  const auto inst = random_instance(gen, 1, 9, 4, 6);
  const auto cache = oracle::make_cache(inst.keys, inst.labels, inst.n_classes);
  const HyperParams h{30, 0.4};
  const auto batch = predict_batch(as_rows(inst.queries), cache, as_dists(inst.p_net), h);
  const auto scalar = mix({inst.p_net[0]},
                          cache_distribution(cache_weights(inst.queries[0], cache, h.theta), cache),
                          h.lambda);
  EXPECT_EQ(batch.predictions[0].probs, scalar.probs);
}

TEST(PredictBatch, ScoreReuseEqualsRecomputation) {
  std::mt19937_64 gen(6);
  const auto inst = random_instance(gen, 12, 20, 4, 5);
  const auto cache = oracle::make_cache(inst.keys, inst.labels, inst.n_classes);
  const auto p_net = as_dists(inst.p_net);
  const auto scores = compute_scores(as_rows(inst.queries), cache);
  for (double theta : {10.0, 50.0, 90.0}) {
    for (double lambda : {0.1, 0.5, 0.9}) {
      const auto reused = predict_from_scores(scores, p_net, cache, {theta, lambda});
      const auto fresh = predict_batch(as_rows(inst.queries), cache, p_net, {theta, lambda});
      for (std::size_t i = 0; i < reused.size(); ++i) {
        EXPECT_EQ(reused[i].probs, fresh.predictions[i].probs);
      }
    }
  }
}

TEST(PredictBatch, ThreadCountDoesNotChangeValues) {
  std::mt19937_64 gen(8);
  const auto inst = random_instance(gen, 33, 10, 3, 4);
  const auto cache = oracle::make_cache(inst.keys, inst.labels, inst.n_classes);
  EXPECT_EQ(compute_scores(as_rows(inst.queries), cache, 1),
            compute_scores(as_rows(inst.queries), cache, 4));
}

TEST(PredictBatch, Properties) {
  std::mt19937_64 gen(10);
  for (int trial = 0; trial < 30; ++trial) {
    const auto inst = random_instance(gen, 4, 7, 3, 4);
    const auto cache = oracle::make_cache(inst.keys, inst.labels, inst.n_classes);
    const auto queries = as_rows(inst.queries);
    const auto p_net = as_dists(inst.p_net);
    const double theta = std::uniform_real_distribution<double>(0, 100)(gen);
    const double lambda = std::uniform_real_distribution<double>(0, 1)(gen);

    // softmax shift invariance
    std::vector<double> s(7);
    for (auto& v : s) v = std::uniform_real_distribution<double>(-1, 1)(gen);
    auto shifted = s;
    for (auto& v : shifted) v += 0.37;
    const auto w1 = weights_from_scores(s, theta), w2 = weights_from_scores(shifted, theta);
    for (std::size_t k = 0; k < s.size(); ++k) EXPECT_NEAR(w1[k], w2[k], 1e-12);

    // key permutation invariance
    std::vector<std::size_t> perm{6, 2, 4, 0, 1, 5, 3};
    std::vector<std::vector<double>> keys;
    std::vector<std::uint32_t> labels;
    for (auto k : perm) {
      keys.push_back(inst.keys[k]);
      labels.push_back(inst.labels[k]);
    }
    const auto permuted = oracle::make_cache(keys, labels, inst.n_classes);
    const auto a = predict_batch(queries, cache, p_net, {theta, lambda}).predictions;
    const auto b = predict_batch(queries, permuted, p_net, {theta, lambda}).predictions;
    for (std::size_t i = 0; i < a.size(); ++i) {
      for (std::uint32_t c = 0; c < 3; ++c) {
        EXPECT_NEAR(a[i][c], b[i][c], 1e-12);
        // the mixture lies between its two components
        const auto p_mem = cache_distribution(cache_weights(inst.queries[i], cache, theta), cache);
        EXPECT_GE(a[i][c], std::min(p_net[i][c], p_mem[c]) - 1e-12);
        EXPECT_LE(a[i][c], std::max(p_net[i][c], p_mem[c]) + 1e-12);
      }
    }
  }
}

TEST(PredictBatch, RetrievalLimit) {
  std::mt19937_64 gen(12);
  const auto inst = random_instance(gen, 1, 10, 4, 6);
  const auto cache = oracle::make_cache(inst.keys, inst.labels, inst.n_classes);
  const std::vector<double> query = inst.keys[3];
  const auto p = predict_batch(as_rows({query}), cache, as_dists({{0.25, 0.25, 0.25, 0.25}}),
                               {1e4, 1.0});
  EXPECT_GE(p.predictions[0][inst.labels[3]], 1.0 - 1e-6);
}

TEST(PredictBatch, ZeroQueryFails) {
  const auto cache = oracle::make_cache({{1, 0}}, {0}, 1);
  try {
    compute_scores(RowMatrix::Zero(1, 2), cache);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ZeroVector);
  }
}

TEST(TopOne, Examples) {
  const std::vector<ClassDistribution> preds{{{0.9, 0.1}}, {{0.2, 0.8}}, {{0.6, 0.4}}, {{0.3, 0.7}}};
  EXPECT_EQ(top1_error(preds, std::vector<std::uint32_t>{0, 1, 0, 1}), 0.0);
  EXPECT_EQ(top1_error(preds, std::vector<std::uint32_t>{0, 1, 1, 1}), 0.25);
  EXPECT_THROW(top1_error(preds, std::vector<std::uint32_t>{0}), Error);
}

TEST(CachePersistence, RoundTrip) {
  std::mt19937_64 gen(14);
  const auto inst = random_instance(gen, 1, 6, 3, 4);
  const auto cache = oracle::make_cache(inst.keys, inst.labels, inst.n_classes);
  const auto dir = std::filesystem::temp_directory_path() / "keycache_cache_rt";
  std::filesystem::remove_all(dir);
  save_cache(dir, cache);
  const auto back = load_cache(dir);
  EXPECT_EQ(back.labels(), cache.labels());
  EXPECT_EQ(back.layer_ids(), cache.layer_ids());
  // keys travel as float32
  EXPECT_TRUE(back.keys().isApprox(cache.keys(), 1e-6));
}
