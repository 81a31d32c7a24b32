#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "ttmm/router.hpp"

using namespace ttmm;

namespace {

EmbeddingVector unit(std::vector<double> v) {
  double n = 0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  std::vector<float> f;
  for (double x : v) f.push_back(static_cast<float>(x / n));
  return EmbeddingVector(f);
}

std::vector<EmbeddingVector> random_units(std::size_t n, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::vector<EmbeddingVector> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> v(dim);
    for (auto& x : v) x = nd(rng);
    out.push_back(unit(v));
  }
  return out;
}

void expect_valid(const MergeWeights& w) {
  ASSERT_GE(w.size(), 1u);
  for (std::size_t i = 0; i < w.entries.size(); ++i) {
    EXPECT_GT(w.entries[i].second, 0.0);
    if (i) EXPECT_LT(w.entries[i - 1].first, w.entries[i].first);
  }
  EXPECT_NEAR(w.total(), 1.0, 1e-9);
}

}  // namespace

TEST(Router, SparseSoftmaxExamples) {
  std::vector<double> eq{0.3, 0.3, 0.3};
  auto w = sparse_softmax(eq, 0.0);
  ASSERT_EQ(w.size(), 3u);
  for (auto& e : w.entries) EXPECT_NEAR(e.second, 1.0 / 3.0, 1e-15);

  std::vector<double> z{std::log(0.5), std::log(0.3), std::log(0.2)};
  auto s = sparse_softmax(z, 0.25);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_NEAR(s.weight(0), 5.0 / 6.0, 1e-12);
  EXPECT_NEAR(s.weight(1), 1.0 / 6.0, 1e-12);
  EXPECT_EQ(s.weight(2), 0.0);

  std::vector<double> one{-4.0};
  EXPECT_EQ(sparse_softmax(one, 0.99), MergeWeights::one_hot(0));

  try {
    sparse_softmax(eq, 1.0 / 3.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(std::string(e.what()), "tau too large for K");
  }
}

TEST(Router, SparseSoftmaxProperties) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> kd(1, 40);
  std::normal_distribution<double> nd(0.0, 3.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t K = static_cast<std::size_t>(kd(rng));
    std::vector<double> z(K);
    for (auto& x : z) x = nd(rng);
    const double tau = u(rng) * (1.0 / static_cast<double>(K)) * 0.999;
    auto w = sparse_softmax(z, tau);
    expect_valid(w);
    // Bumping one logit never lowers its weight.
    const std::size_t j = static_cast<std::size_t>(rng() % K);
    auto z2 = z;
    z2[j] += 0.5;
    EXPECT_GE(sparse_softmax(z2, tau).weight(static_cast<ExpertId>(j)) + 1e-12, w.weight(static_cast<ExpertId>(j)));
  }
}

TEST(Router, RouteExamples) {
  auto cs = random_units(8, 16, 3);
  auto w = route(cs[5], cs, 1e-3, 0.0);
  EXPECT_GT(w.weight(5), 1.0 - 1e-6);
  auto u = route(cs[2], cs, 1e9, 0.0);
  ASSERT_EQ(u.size(), 8u);
  for (auto& e : u.entries) EXPECT_NEAR(e.second, 1.0 / 8.0, 1e-9);

  auto q = random_units(1, 16, 9)[0];
  std::vector<std::size_t> perm{3, 0, 7, 1, 6, 2, 5, 4};
  std::vector<EmbeddingVector> pc;
  for (auto p : perm) pc.push_back(cs[p]);
  auto a = route(q, cs, 0.05, 0.01), b = route(q, pc, 0.05, 0.01);
  for (std::size_t i = 0; i < perm.size(); ++i)
    EXPECT_DOUBLE_EQ(b.weight(static_cast<ExpertId>(i)), a.weight(static_cast<ExpertId>(perm[i])));

  EXPECT_THROW(route(q, std::vector<EmbeddingVector>{}, 0.05, 0.0), Error);
  EXPECT_THROW(route(q, cs, 0.0, 0.0), Error);
  EXPECT_THROW(route(random_units(1, 4, 1)[0], cs, 0.05, 0.0), Error);
}

TEST(Router, ArgmaxIsNearestCentroid) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    auto cs = random_units(12, 10, 100 + s);
    auto q = random_units(1, 10, 500 + s)[0];
    auto sims = similarities(q, cs);
    auto best = static_cast<ExpertId>(std::max_element(sims.begin(), sims.end()) - sims.begin());
    EXPECT_EQ(route(q, cs, 0.05, 0.01).argmax(), best);
  }
}

TEST(Router, RbfEquivalence) {
  for (std::uint64_t s = 0; s < 100; ++s) {
    auto cs = random_units(6, 12, 1000 + s);
    auto q = random_units(1, 12, 2000 + s)[0];
    for (double beta : {0.01, 0.1, 1.0}) {
      std::vector<double> z, r;
      for (const auto& c : cs) {
        double dot = 0, d2 = 0;
        for (std::size_t i = 0; i < 12; ++i) {
          dot += static_cast<double>(c[i]) * q[i];
          d2 += (static_cast<double>(c[i]) - q[i]) * (static_cast<double>(c[i]) - q[i]);
        }
        z.push_back(dot / beta);
        r.push_back(-d2 / (2 * beta));
      }
      auto p = softmax(z), pr = softmax(r);
      for (std::size_t k = 0; k < p.size(); ++k) EXPECT_NEAR(p[k], pr[k], 1e-6);
    }
  }
}

TEST(Router, RouteBatchMatchesRoute) {
  auto cs = random_units(16, 20, 4);
  auto qs = random_units(5, 20, 5);
  qs.push_back(qs[1]);
  RoutingConfig cfg;
  auto rows = route_batch(qs, cs, cfg);
  ASSERT_EQ(rows.size(), qs.size());
  for (std::size_t i = 0; i < qs.size(); ++i) {
    auto r = route(qs[i], cs, cfg);
    ASSERT_EQ(rows[i].support(), r.support());
    for (std::size_t j = 0; j < r.entries.size(); ++j) EXPECT_NEAR(rows[i].entries[j].second, r.entries[j].second, 1e-12);
  }
  EXPECT_EQ(rows[1], rows.back());
  std::vector<EmbeddingVector> one{qs[0]};
  EXPECT_EQ(route_batch(one, cs, cfg)[0], route(qs[0], cs, cfg));
}

TEST(Router, FixedN) {
  auto cs = random_units(6, 8, 6);
  auto q = random_units(1, 8, 7)[0];
  auto full = route_fixed_n(q, cs, 6, 0.1);
  auto r0 = route(q, cs, 0.1, 0.0);
  ASSERT_EQ(full.support(), r0.support());
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(full.entries[i].second, r0.entries[i].second, 1e-12);

  auto sims = similarities(q, cs);
  auto nearest = static_cast<ExpertId>(std::max_element(sims.begin(), sims.end()) - sims.begin());
  EXPECT_EQ(route_fixed_n(q, cs, 1, 0.1), MergeWeights::one_hot(nearest));

  // Brute force: the top-3 set is the 3-subset with the largest similarity sum.
  std::vector<std::size_t> best;
  double best_sum = -1e9;
  for (std::size_t a = 0; a < 6; ++a)
    for (std::size_t b = a + 1; b < 6; ++b)
      for (std::size_t c = b + 1; c < 6; ++c)
        if (sims[a] + sims[b] + sims[c] > best_sum) best_sum = sims[a] + sims[b] + sims[c], best = {a, b, c};
  auto w3 = route_fixed_n(q, cs, 3, 0.1);
  double Z = 0;
  for (auto k : best) Z += std::exp(sims[k] / 0.1);
  ASSERT_EQ(w3.size(), 3u);
  for (auto k : best) EXPECT_NEAR(w3.weight(static_cast<ExpertId>(k)), std::exp(sims[k] / 0.1) / Z, 1e-12);

  EXPECT_THROW(route_fixed_n(q, cs, 0, 0.1), Error);
  EXPECT_THROW(route_fixed_n(q, cs, 7, 0.1), Error);
}

TEST(Router, TiesGoToLowerId) {
  auto e = unit({1, 0, 0});
  std::vector<EmbeddingVector> cs{unit({0, 1, 0}), e, unit({0, 0, 1}), e};
  EXPECT_EQ(route_fixed_n(e, cs, 1, 0.1), MergeWeights::one_hot(1));
  EXPECT_EQ(weights_uniform_topn(e, cs, 1), MergeWeights::one_hot(1));
  EXPECT_EQ(route(e, cs, 0.05, 0.0).argmax(), 1u);
}

TEST(Router, UniformTopN) {
  auto cs = random_units(9, 8, 8);
  auto q = random_units(1, 8, 9)[0];
  auto w1 = weights_uniform_topn(q, cs, 1);
  EXPECT_EQ(w1.size(), 1u);
  auto w4 = weights_uniform_topn(q, cs, 4);
  ASSERT_EQ(w4.size(), 4u);
  for (auto& e : w4.entries) EXPECT_EQ(e.second, 0.25);
  EXPECT_EQ(w4.support(), route_fixed_n(q, cs, 4, 0.05).support());
  EXPECT_THROW(weights_uniform_topn(q, cs, 10), Error);
}

TEST(Router, Sift) {
  auto cs = random_units(6, 10, 10);
  auto q = random_units(1, 10, 11)[0];
  SiftConfig one{0.01, 1};
  auto sims = similarities(q, cs);
  auto nearest = static_cast<ExpertId>(std::max_element(sims.begin(), sims.end()) - sims.begin());
  EXPECT_EQ(weights_sift(q, cs, one), MergeWeights::one_hot(nearest));
  for (std::size_t n = 1; n <= 6; ++n) expect_valid(weights_sift(q, cs, SiftConfig{0.05, n}));
  EXPECT_THROW(weights_sift(q, cs, SiftConfig{0.0, 2}), Error);
  EXPECT_THROW(weights_sift(q, cs, SiftConfig{0.1, 7}), Error);

  // An orthogonal query gets no variance reduction at all.
  std::vector<EmbeddingVector> axes{unit({1, 0, 0}), unit({0, 1, 0})};
  try {
    weights_sift(unit({0, 0, 1}), axes, SiftConfig{0.1, 2});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(std::string(e.what()), "no uncertainty reduction");
  }
}

TEST(Router, SiftDuplicatesShareWeight) {
  auto base = random_units(4, 12, 12);
  auto q = random_units(1, 12, 13)[0];
  for (std::size_t dup = 0; dup < base.size(); ++dup) {
    auto with_dup = base;
    with_dup.push_back(base[dup]);
    const double lambda = 1e-3;
    auto plain = weights_sift(q, base, SiftConfig{lambda, base.size()});
    auto dupw = weights_sift(q, with_dup, SiftConfig{lambda, with_dup.size()});
    const double pair = dupw.weight(static_cast<ExpertId>(dup)) + dupw.weight(static_cast<ExpertId>(base.size()));
    const double single = plain.weight(static_cast<ExpertId>(dup));
    EXPECT_NEAR(pair, single, 0.05 * single) << dup;
  }
}

TEST(Router, DaWin) {
  auto v = Vocab::from_symbols("abcd");
  const std::size_t h = 4;
  BaseParams<float> base(v.size(), h);
  for (auto& b : base.dense_bias) b = 3.0f;  // constant hidden output
  LoraConfig lc;
  lc.targets = {"out"};
  lc.rank = 1;
  lc.alpha = 1;
  auto flat = create_adapter(base, lc, 1);
  for (auto& x : flat.targets[0].A.data) x = 1.0f;
  std::vector<LoraAdapter<float>> same(3, flat);
  auto u = weights_dawin("abc", base, std::span<const LoraAdapter<float>>(same), v, 0.1, 0.0);
  ASSERT_EQ(u.size(), 3u);
  for (auto& e : u.entries) EXPECT_NEAR(e.second, 1.0 / 3.0, 1e-12);

  auto sharp = flat;
  sharp.targets[0].B(static_cast<std::size_t>(v.id('c')), 0) = 100.0f;
  std::vector<LoraAdapter<float>> mixed{flat, sharp, flat};
  auto hs = expert_entropies(base, std::span<const LoraAdapter<float>>(mixed), v, "ab");
  EXPECT_NEAR(hs[0], std::log(6.0), 1e-9);
  EXPECT_LT(hs[1], 1e-6);
  auto w = weights_dawin("ab", base, std::span<const LoraAdapter<float>>(mixed), v, 0.05, 0.01);
  expect_valid(w);
  EXPECT_GT(w.weight(1), 0.99);
}

TEST(Router, ConfigDispatch) {
  auto cs = random_units(5, 6, 14);
  auto q = random_units(1, 6, 15)[0];
  RoutingConfig cfg;
  cfg.weighting = Weighting::uniform_topn;
  cfg.fixed_n = 2;
  EXPECT_EQ(route(q, cs, cfg), weights_uniform_topn(q, cs, 2));
  cfg.weighting = Weighting::dawin;
  EXPECT_THROW(route(q, cs, cfg), Error);
  EXPECT_EQ(weighting_from_string("sift"), Weighting::sift);
  EXPECT_THROW(weighting_from_string("nope"), Error);
}
