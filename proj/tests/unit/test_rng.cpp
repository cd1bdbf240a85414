#include <gtest/gtest.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "keycache/format.hpp"
#include "keycache/parallel.hpp"
#include "keycache/rng.hpp"
#include "keycache/tuner.hpp"

using namespace keycache;

TEST(RngTest, ReproducibleStreams) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_NE(derive_seed(1, 0), derive_seed(1, 1));
  EXPECT_NE(derive_seed(1, 0), derive_seed(2, 0));
}

TEST(RngTest, UniformAndIndexRanges) {
  Rng rng(7);
  std::vector<int> counts(5, 0);
  for (int i = 0; i < 50000; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    ++counts[rng.index(5)];
  }
  for (int c : counts) EXPECT_NEAR(c, 10000, 500);
}

TEST(RngTest, NormalMoments) {
  Rng rng(8);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(RngTest, PermutationIsPermutation) {
  Rng rng(9);
  auto p = rng.permutation(100);
  std::sort(p.begin(), p.end());
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_EQ(p[i], i);
}

TEST(ParallelFor, CoversEveryIndexOnce) {
  std::vector<std::atomic<int>> hits(1000);
  parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i]++; });
  for (auto& h : hits) EXPECT_EQ(h.load(), 1);
}

TEST(ParallelFor, PropagatesExceptions) {
  EXPECT_THROW(parallel_for(10, 3,
                            [](std::size_t i) {
                              if (i == 7) throw std::runtime_error("boom");
                            }),
               std::runtime_error);
}

TEST(Format, Numbers) {
  EXPECT_EQ(format_number(0.1), "0.1");
  EXPECT_EQ(format_number(50), "50");
  EXPECT_EQ(format_number(NAN), "");
  EXPECT_EQ(format_number(-INFINITY), "-inf");
  EXPECT_EQ(csv_escape("a,b"), "\"a,b\"");
  EXPECT_EQ(csv_escape("plain"), "plain");
}

TEST(Statistics, MeanSemSpearman) {
  const std::vector<double> x{1, 2, 3, 4};
  EXPECT_DOUBLE_EQ(mean(x), 2.5);
  // sample sd of 1..4 is sqrt(5/3)
  EXPECT_NEAR(standard_error(x), std::sqrt(5.0 / 3.0) / 2.0, 1e-15);
  EXPECT_EQ(standard_error(std::vector<double>{3.0}), 0.0);
  EXPECT_DOUBLE_EQ(spearman(x, std::vector<double>{10, 20, 30, 40}), 1.0);
  EXPECT_DOUBLE_EQ(spearman(x, std::vector<double>{4, 3, 2, 1}), -1.0);
  // ties: ranks (1, 2.5, 2.5, 4) vs (1, 2, 3, 4) -> Pearson of the ranks
  const double r = spearman(std::vector<double>{1, 2, 2, 3}, x);
  EXPECT_NEAR(r, 4.5 / std::sqrt(4.5 * 5.0), 1e-15);
}
