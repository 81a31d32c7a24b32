#include <gtest/gtest.h>

#include <random>
#include <set>

#include "ttmm/evalbl.hpp"

using namespace ttmm;

namespace {

EmbeddingVector vec(std::vector<float> v) { return EmbeddingVector(std::move(v)); }

EmbeddingVector unit(std::vector<double> v) {
  double n = 0;
  for (double x : v) n += x * x;
  std::vector<float> f;
  for (double x : v) f.push_back(static_cast<float>(x / std::sqrt(n)));
  return EmbeddingVector(f);
}

ClusterAssignment sized(std::vector<std::size_t> sizes) {
  ClusterAssignment a;
  a.k = sizes.size();
  for (std::size_t c = 0; c < sizes.size(); ++c)
    for (std::size_t i = 0; i < sizes[c]; ++i) a.labels.push_back(static_cast<std::uint32_t>(c));
  // interleave so members are not contiguous
  std::mt19937_64 rng(5);
  std::shuffle(a.labels.begin(), a.labels.end(), rng);
  return a;
}

// Points near the three coordinate axes of R^3.
std::vector<EmbeddingVector> axis_blobs(std::size_t per, std::uint64_t seed, std::vector<std::uint32_t>& labels) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 0.05);
  std::vector<EmbeddingVector> out;
  for (std::size_t i = 0; i < 3 * per; ++i) {
    std::vector<double> v{nd(rng), nd(rng), nd(rng)};
    v[i % 3] += 1.0;
    out.push_back(unit(v));
    labels.push_back(static_cast<std::uint32_t>(i % 3));
  }
  return out;
}

std::string pattern_doc(const std::string& unit_text, std::size_t len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::string d;
  while (d.size() < len) {
    d += unit_text;
    if (rng() % 4 == 0) d.push_back(' ');
  }
  d.resize(len);
  return d;
}

}  // namespace

TEST(Evalbl, SplitExamples) {
  auto a = sized({5, 6, 7});
  EvalProtocol p;
  p.holdout_fraction = 0;
  auto s = split_holdout(a, p);
  EXPECT_EQ(s.test.size(), 3u);
  EXPECT_EQ(s.test_cluster, (std::vector<std::uint32_t>{0, 1, 2}));
  for (std::size_t i = 0; i < s.test.size(); ++i) EXPECT_EQ(a.labels[s.test[i]], s.test_cluster[i]);

  p.holdout_fraction = 0.3;
  s = split_holdout(a, p);
  std::set<std::size_t> all;
  std::size_t total = 0;
  auto add = [&](const std::vector<std::size_t>& v) {
    all.insert(v.begin(), v.end());
    total += v.size();
  };
  add(s.train);
  add(s.test);
  for (const auto& h : s.holdout) add(h);
  EXPECT_EQ(total, 18u);
  EXPECT_EQ(all.size(), 18u);
  EXPECT_EQ(s.holdout[0].size(), 1u);
  EXPECT_EQ(s.holdout[2].size(), 2u);
  for (std::size_t c = 0; c < 3; ++c)
    for (auto i : s.train_by_cluster[c]) EXPECT_EQ(a.labels[i], c);

  auto s2 = split_holdout(a, p);
  EXPECT_EQ(s2.test, s.test);
  EXPECT_EQ(s2.holdout, s.holdout);
  p.seed = 99;
  auto s3 = split_holdout(a, p);
  EXPECT_TRUE(s3.test != s.test || s3.holdout != s.holdout);

  auto small = sized({4, 2});
  EvalProtocol q;
  q.holdout_fraction = 0.1;
  try {
    split_holdout(small, q);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("cluster 1"), std::string::npos);
  }
}

TEST(Evalbl, ProtocolChecksDocuments) {
  EvalProtocol p;
  std::vector<std::string> docs{std::string(60, 'a'), std::string(50, 'a')};
  try {
    p.check_documents(docs);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("document 1"), std::string::npos);
  }
}

TEST(Evalbl, GlobalFinetune) {
  auto v = Vocab::from_symbols("abcd ");
  ModelConfig mc;
  mc.hidden = 10;
  auto base = init_base<float>(v.size(), mc, 1);
  std::vector<std::string> docs;
  for (std::uint64_t i = 0; i < 8; ++i) docs.push_back(pattern_doc("abcd", 30, i));
  TrainConfig tc;
  tc.learning_rate = 0;
  auto z = global_finetune(base, v, docs, tc, LoraConfig{});
  for (const auto& t : z.targets)
    for (auto x : t.B.data) EXPECT_EQ(x, 0.0f);
  tc.learning_rate = 1e-2;
  tc.epochs = 3;
  auto g1 = global_finetune(base, v, docs, tc, LoraConfig{}), g2 = global_finetune(base, v, docs, tc, LoraConfig{});
  EXPECT_EQ(g1, g2);
  std::vector<std::string> held{pattern_doc("abcd", 30, 100), pattern_doc("abcd", 30, 101)};
  const LoraAdapter<float>* none = nullptr;
  EXPECT_LE(perplexity(base, &g1, v, held), perplexity(base, none, v, held));
}

TEST(Evalbl, TestTimeTraining) {
  auto v = Vocab::from_symbols("abcdxyz ");
  ModelConfig mc;
  mc.hidden = 10;
  auto base = init_base<float>(v.size(), mc, 2);
  std::vector<std::string> docs;
  for (std::uint64_t i = 0; i < 6; ++i) docs.push_back(pattern_doc(i % 2 ? "abcd" : "xyz", 40, i));
  HashedNgramEmbedder emb;
  auto index = emb.embed_all(docs);

  TttConfig cfg;
  cfg.neighbors = 1;
  cfg.train.learning_rate = 0;
  std::vector<std::size_t> order;
  auto z = ttt_adapt(base, v, index[3], index, docs, cfg, LoraConfig{}, &order);
  EXPECT_EQ(order, (std::vector<std::size_t>{3}));
  const LoraAdapter<float>* none = nullptr;
  EXPECT_EQ(forward(base, &z, v, "abc"), forward(base, none, v, "abc"));

  cfg.train.learning_rate = 1e-2;
  std::vector<double> before;
  auto a = ttt_adapt(base, v, index[3], index, docs, cfg, LoraConfig{}, &order,
                     [&](std::size_t, double l) { before.push_back(l); });
  ASSERT_EQ(before.size(), 1u);
  std::vector<std::string> own{docs[3]};
  EXPECT_LT(std::log(perplexity(base, &a, v, own)), before[0]);

  cfg.neighbors = 4;
  (void)ttt_adapt(base, v, index[0], index, docs, cfg, LoraConfig{}, &order);
  ASSERT_EQ(order.size(), 4u);
  auto sims = similarities(index[0], index);
  for (std::size_t i = 1; i < order.size(); ++i) EXPECT_GE(sims[order[i - 1]], sims[order[i]]);
  EXPECT_EQ(order[0], 0u);

  cfg.neighbors = 7;
  EXPECT_THROW(ttt_adapt(base, v, index[0], index, docs, cfg, LoraConfig{}), Error);
}

TEST(Evalbl, ExpertClusterMatrix) {
  auto v = Vocab::from_symbols("ab");
  ModelConfig mc;
  mc.hidden = 6;
  auto base = init_base<float>(v.size(), mc, 3);
  auto a = create_adapter(base, LoraConfig{}, 1);
  std::vector<LoraAdapter<float>> same(3, a);
  std::vector<std::vector<std::string>> hold{{"abab", "aab"}, {"bbba"}, {"aaaa", "b"}};
  auto m = expert_cluster_matrix(base, same, v, hold, 0, 2);
  ASSERT_EQ(m.rows, 3u);
  ASSERT_EQ(m.cols, 3u);
  for (std::size_t k = 1; k < 3; ++k)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(m(k, j), m(0, j));
  for (double x : m.data) EXPECT_GE(x, 1.0);

  Matrix<double> d(3, 3, 5.0);
  d(0, 0) = 1;
  d(1, 1) = 1;
  d(2, 0) = 0.5;
  EXPECT_NEAR(diagonal_row_min_fraction(d), 2.0 / 3.0, 1e-12);
}

TEST(Evalbl, PassAtN) {
  std::vector<std::uint32_t> labels;
  auto pts = axis_blobs(10, 4, labels);
  std::vector<EmbeddingVector> cents{unit({1, 0, 0}), unit({0, 1, 0}), unit({0, 0, 1})};
  std::vector<std::size_t> ns{1, 2, 3};
  auto acc = pass_at_n(cents, pts, labels, ns);
  EXPECT_EQ(acc, (std::vector<double>{1.0, 1.0, 1.0}));

  // Shuffled labels: curve still nondecreasing and pass@K = 1.
  std::mt19937_64 rng(1);
  std::shuffle(labels.begin(), labels.end(), rng);
  auto acc2 = pass_at_n(cents, pts, labels, ns);
  for (std::size_t i = 1; i < acc2.size(); ++i) EXPECT_GE(acc2[i], acc2[i - 1]);
  EXPECT_EQ(acc2.back(), 1.0);
  std::vector<std::size_t> bad{4};
  EXPECT_THROW(pass_at_n(cents, pts, labels, bad), Error);
}

TEST(Evalbl, CentroidVersusSumCounterexample) {
  std::vector<EmbeddingVector> e{vec({-1}), vec({0}), vec({1})};
  std::vector<std::vector<std::size_t>> clusters{{0, 1}, {1, 2}, {0, 2}};
  auto r = centroid_vs_sum_selection(vec({0}), e, clusters);
  EXPECT_EQ(r.by_centroid, 2u);
  EXPECT_TRUE(r.by_sum == 0u || r.by_sum == 1u);
}

TEST(Evalbl, CentroidVersusSumAgreement) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  std::vector<EmbeddingVector> pts;
  for (int i = 0; i < 5; ++i) pts.push_back(unit({nd(rng), nd(rng), nd(rng), nd(rng)}));
  ClusterAssignment single{{0, 1, 2, 3, 4}, 5};
  for (int t = 0; t < 20; ++t) {
    auto q = unit({nd(rng), nd(rng), nd(rng), nd(rng)});
    auto r = centroid_vs_sum_selection(q, pts, single);
    EXPECT_EQ(r.by_centroid, r.by_sum);
  }

  std::vector<std::uint32_t> labels;
  auto blobs = axis_blobs(8, 6, labels);
  ClusterAssignment a{labels, 3};
  std::vector<std::uint32_t> qlabels;
  auto queries = axis_blobs(10, 7, qlabels);
  for (std::size_t i = 0; i < queries.size(); ++i) {
    auto r = centroid_vs_sum_selection(queries[i], blobs, a);
    EXPECT_EQ(r.by_centroid, r.by_sum);
    EXPECT_EQ(r.by_centroid, qlabels[i]);
  }
}

TEST(Evalbl, ProbeTrivialCases) {
  auto in = make_probe_instance(1);
  in.probe.eta = 0;
  auto r0 = run_probe_instance(in);
  EXPECT_EQ(r0.lhs, 0.0);
  EXPECT_EQ(r0.rhs, 0.0);
  EXPECT_TRUE(r0.holds);

  auto in2 = make_probe_instance(2);
  in2.d_prime = top_n(similarities(in2.prompt_embedding, in2.embeddings), in2.probe.N);
  auto r1 = run_probe_instance(in2);
  EXPECT_EQ(r1.lhs, 0.0);
  EXPECT_GE(r1.rhs, 0.0);
  EXPECT_TRUE(r1.holds);

  auto in3 = make_probe_instance(3);
  auto nn = top_n(similarities(in3.prompt_embedding, in3.embeddings), in3.probe.N);
  in3.d_prime.clear();
  for (std::size_t i = 0; i < in3.docs.size() && in3.d_prime.size() < 3; ++i)
    if (std::find(nn.begin(), nn.end(), i) == nn.end()) in3.d_prime.push_back(i);
  try {
    run_probe_instance(in3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(std::string(e.what()), "proposition precondition violated");
  }
}

TEST(Evalbl, ProbeHoldsOnRandomInstances) {
  for (std::uint64_t s = 10; s < 20; ++s) {
    auto in = make_probe_instance(s);
    auto r = run_probe_instance(in);
    EXPECT_TRUE(r.holds) << "instance " << s << " lhs " << r.lhs << " rhs " << r.rhs;
    EXPECT_GT(r.L_hat, 0.0);
    EXPECT_GT(r.G_hat, 0.0);
  }
}

TEST(Evalbl, TableReportsExactlyRequestedMethods) {
  auto v = Vocab::from_symbols("abcxyz ");
  ModelConfig mc;
  mc.hidden = 8;
  auto base = init_base<float>(v.size(), mc, 4);
  HashedNgramEmbedder emb;
  std::vector<std::string> a_docs, x_docs;
  for (std::uint64_t i = 0; i < 6; ++i) {
    a_docs.push_back(pattern_doc("abc", 30, i));
    x_docs.push_back(pattern_doc("xyz", 30, 50 + i));
  }
  TrainConfig tc;
  tc.learning_rate = 1e-2;
  LoraConfig lc;
  lc.rank = 2;

  EvalContext ctx;
  ctx.base = &base;
  ctx.vocab = &v;
  ctx.embedder = &emb;
  ctx.experts = {train_adapter(base, v, std::span(a_docs).first(4), tc, lc),
                 train_adapter(base, v, std::span(x_docs).first(4), tc, lc)};
  ctx.centroids = {compute_centroids(emb.embed_all(std::span(a_docs).first(4)), ClusterAssignment{{0, 0, 0, 0}, 1}).centroids[0],
                   compute_centroids(emb.embed_all(std::span(x_docs).first(4)), ClusterAssignment{{0, 0, 0, 0}, 1}).centroids[0]};
  ctx.test = {a_docs[4], x_docs[4]};
  ctx.test_cluster = {0, 1};
  ctx.holdout = {{a_docs[5]}, {x_docs[5]}};
  ctx.train.insert(ctx.train.end(), a_docs.begin(), a_docs.begin() + 4);
  ctx.train.insert(ctx.train.end(), x_docs.begin(), x_docs.begin() + 4);
  ctx.train_embeddings = emb.embed_all(ctx.train);

  TableConfig cfg;
  cfg.protocol.query_prefix_len = 10;
  cfg.protocol.eval_prefix_len = 10;
  cfg.lora = lc;
  cfg.ttt.neighbors = 3;
  cfg.ttt.train = tc;
  cfg.methods = {"base", "ttmm_tau", "ttmm_n1", "ensemble_n3", "ttt"};
  auto rep = run_table1(ctx, cfg, nlohmann::json{{"echo", 1}});
  ASSERT_EQ(rep.methods.size(), cfg.methods.size());
  for (std::size_t i = 0; i < cfg.methods.size(); ++i) {
    EXPECT_EQ(rep.methods[i].method, cfg.methods[i]);
    EXPECT_GE(rep.methods[i].perplexity, 1.0);
  }
  EXPECT_EQ(rep.methods[1].evals_per_token, 1.0);
  EXPECT_EQ(rep.methods[3].evals_per_token, 2.0);  // n capped at K = 2
  EXPECT_EQ(rep.beta_grid.size(), cfg.beta_grid.size());
  EXPECT_EQ(rep.expert_cluster.rows, 2u);
  EXPECT_EQ(rep.pass_n.back(), 2u);
  EXPECT_EQ(rep.pass_at.back(), 1.0);
  EXPECT_THROW(rep.ppl("sift"), Error);

  auto j = report_to_json(rep);
  EXPECT_EQ(j.at("config").at("echo"), 1);
  EXPECT_EQ(j.at("methods").size(), cfg.methods.size());
  auto csv = report_to_csv(rep);
  EXPECT_EQ(csv.rfind("table,row,column,value\n", 0), 0u);
  EXPECT_NE(csv.find("method,ttt,perplexity,"), std::string::npos);

  cfg.methods = {"nope"};
  EXPECT_THROW(run_table1(ctx, cfg), Error);
  cfg.methods = {"finetune"};
  EXPECT_THROW(run_table1(ctx, cfg), Error);
}

TEST(Evalbl, ClusterTitles) {
  std::vector<std::string> docs{"aaaaab", "aaaa", "zzzz"};
  ClusterAssignment a{{0, 0, 1}, 2};
  auto t = cluster_titles(docs, a, 4, 1);
  EXPECT_EQ(t[0], (std::vector<std::string>{"aaaa"}));
  EXPECT_EQ(t[1], (std::vector<std::string>{"zzzz"}));
}
