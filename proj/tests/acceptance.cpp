// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Runs the full desk pipeline (synthetic corpus, K = 32) once and
// writes the catalog and report under ./acceptance_out.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ttmm/config.hpp"
#include "ttmm/evalbl.hpp"
#include "ttmm/merge.hpp"
#include "ttmm/pipeline.hpp"
#include "ttmm/router.hpp"
#include "ttmm/store.hpp"

using namespace ttmm;

namespace {

int failures = 0;

void report(int id, bool ok, const std::string& what, const std::string& detail) {
  std::printf("%s criterion %2d: %s (%s)\n", ok ? "PASS" : "FAIL", id, what.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

EmbeddingVector random_unit(std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  std::vector<double> v(dim);
  double n = 0;
  for (auto& x : v) x = nd(rng), n += x * x;
  std::vector<float> f;
  for (double x : v) f.push_back(static_cast<float>(x / std::sqrt(n)));
  return EmbeddingVector(f);
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

void sparse_softmax_suite() {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> kd(1, 64);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> nd;
  std::size_t bad = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t K = static_cast<std::size_t>(kd(rng));
    const double scale = std::exp(nd(rng) * 1.5);
    std::vector<double> z(K);
    for (auto& x : z) x = nd(rng) * scale;
    const double tau = u(rng) / static_cast<double>(K);
    auto w = sparse_softmax(z, tau);
    auto p = softmax(z);
    bool ok = w.size() >= 1 && std::abs(w.total() - 1.0) <= 1e-9;
    for (std::size_t k = 0; k < K; ++k)
      if (w.weight(static_cast<ExpertId>(k)) == 0.0) ok = ok && p[k] <= tau;
    const auto pmax = static_cast<ExpertId>(std::max_element(p.begin(), p.end()) - p.begin());
    ok = ok && w.argmax() == pmax;
    bad += !ok;
  }
  report(3, bad == 0, "sparse softmax properties on 10000 random cases", fmt("%.0f violations", static_cast<double>(bad)));
}

std::vector<double> unit_double(const EmbeddingVector& v) {
  std::vector<double> d(v.values.begin(), v.values.end());
  double n = 0;
  for (double x : d) n += x * x;
  n = std::sqrt(n);
  for (double& x : d) x /= n;
  return d;
}

void rbf_suite() {
  std::mt19937_64 rng(4);
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t dim = 2 + static_cast<std::size_t>(rng() % 63);
    const std::size_t K = 2 + static_cast<std::size_t>(rng() % 15);
    auto q = random_unit(dim, rng);
    std::vector<EmbeddingVector> cs;
    for (std::size_t k = 0; k < K; ++k) cs.push_back(random_unit(dim, rng));
    for (double beta : {0.01, 0.1, 1.0}) {
      auto w = route(q, cs, beta, 0.0);
      std::vector<double> r;
      // Distances on the exactly normalized (double) vectors; float storage
      // leaves norms off by ~1e-7, which 1/(2 beta) would amplify.
      auto qd = unit_double(q);
      for (const auto& c : cs) {
        auto cd = unit_double(c);
        double d2 = 0;
        for (std::size_t i = 0; i < dim; ++i) d2 += (qd[i] - cd[i]) * (qd[i] - cd[i]);
        r.push_back(-d2 / (2 * beta));
      }
      auto pr = softmax(r);
      for (std::size_t k = 0; k < K; ++k) worst = std::max(worst, std::abs(w.weight(static_cast<ExpertId>(k)) - pr[k]));
    }
  }
  report(4, worst <= 1e-6, "cosine routing equals RBF-kernel weights", fmt("max |diff| %.2e", worst));
}

void gradient_check() {
  auto v = Vocab::from_symbols("abc");
  BaseParams<double> p(v.size(), 4);
  std::mt19937_64 rng(6);
  std::normal_distribution<double> nd(0.0, 0.5);
  p.for_each_tensor([&](auto& t) {
    for (auto& x : t) x = nd(rng);
  });
  LoraConfig lc;
  lc.rank = 2;
  auto a = create_adapter(p, lc, 1);
  for (auto& t : a.targets)
    for (auto& x : t.B.data) x = nd(rng);
  std::vector<std::string> batch{"abcab", "cba", "aacbbc"};
  auto analytic = nll_and_grad(p, a, v, batch).grads.flat();
  auto theta = flatten(a);
  double worst = 0;
  const double h = 1e-6;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    auto tp = theta, tm = theta;
    tp[i] += h;
    tm[i] -= h;
    auto ap = a, am = a;
    unflatten(tp, ap);
    unflatten(tm, am);
    const double fd = (nll_and_grad(p, ap, v, batch).nll - nll_and_grad(p, am, v, batch).nll) / (2 * h);
    worst = std::max(worst, std::abs(fd - analytic[i]) / std::max({std::abs(fd), std::abs(analytic[i]), 1e-6}));
  }
  report(6, worst <= 1e-4, "adapter gradient matches central differences (V=5, h=4, r=2)",
         fmt("max rel err %.2e over %.0f params", worst, static_cast<double>(theta.size())));
}

void probe_suite() {
  std::size_t held = 0;
  const std::size_t n = 100;
  double max_ratio = 0;
  for (std::size_t i = 0; i < n; ++i) {
    auto in = make_probe_instance(derive_seed(2024, i), 0.03, 3);
    auto r = run_probe_instance(in);
    if (r.holds) {
      ++held;
      if (r.rhs > 0) max_ratio = std::max(max_ratio, r.lhs / r.rhs);
    } else {
      std::printf("  probe violation, instance %zu: eta %.5f T %zu N %zu |D'| %zu lhs %.6e rhs %.6e L %.4e G %.4e "
                  "diam %.4f + %.4f\n  prompt \"%s\"\n",
                  i, in.probe.eta, in.probe.T, in.probe.N, in.d_prime.size(), r.lhs, r.rhs, r.L_hat, r.G_hat,
                  r.diam_neighbors, r.diam_prime, in.prompt.c_str());
    }
  }
  report(7, held == n, "approximation bound on random small instances",
         fmt("held on %.0f/%.0f, max lhs/rhs %.3f", static_cast<double>(held), static_cast<double>(n), max_ratio));
}

// Criteria that need the built catalog.
struct Desk {
  RunConfig cfg;
  Corpora corpora;
  BuildResult build;
  std::unique_ptr<HashedNgramEmbedder> embedder;
  EvalContext ctx;
  EvalReport rep;
  double seconds = 0;
};

void one_hot_exactness(const Desk& d) {
  std::mt19937_64 rng(5);
  const auto& syms = d.build.base.vocab.symbols();
  AdapterMap m;
  for (std::size_t k = 0; k < d.build.experts.size(); ++k) m.emplace(static_cast<ExpertId>(k), d.build.experts[k]);
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    std::string prompt;
    const std::size_t len = 1 + rng() % 80;
    for (std::size_t c = 0; c < len; ++c) prompt.push_back(syms[rng() % syms.size()]);
    const auto k = static_cast<ExpertId>(rng() % m.size());
    auto merged = merge_adapters(MergeWeights::one_hot(k), m);
    auto via_merge = forward(materialize(d.build.base.params, merged), d.build.base.vocab.encode_prefix(prompt));
    auto direct = forward(d.build.base.params, &m.at(k), d.build.base.vocab, prompt);
    worst = std::max(worst, max_abs_diff(via_merge, direct));
  }
  report(5, worst <= 1e-6, "one-hot merged forward equals expert forward on 100 prompts", fmt("max |diff| %.2e", worst));
}

void forward_accounting(const Desk& d) {
  const auto& base = d.build.base.params;
  const auto& vocab = d.build.base.vocab;
  std::vector<DenseWeights> ws;
  for (const auto& a : d.build.experts) ws.push_back(materialize(base, &a));
  bool ok = true;
  std::ostringstream detail;
  const auto& doc = d.ctx.test.front();
  auto seq = vocab.encode_document(doc);
  const auto steps = seq.size() - 1;
  for (std::size_t n : {1, 3, 10}) {
    std::vector<std::pair<double, const DenseWeights*>> ex;
    for (std::size_t k = 0; k < n; ++k) ex.emplace_back(1.0 / static_cast<double>(n), &ws[k]);
    const auto before = model_evaluations();
    (void)ensemble_sequence_nll(ex, seq, d.cfg.eval.protocol.eval_prefix_len);
    const auto evals = model_evaluations() - before;
    ok = ok && evals == n * steps;
    detail << "ensemble n=" << n << ": " << static_cast<double>(evals) / static_cast<double>(steps) << "/token; ";
  }
  AdapterMap m;
  for (std::size_t k = 0; k < 10; ++k) m.emplace(static_cast<ExpertId>(k), d.build.experts[k]);
  MergeWeights w;
  for (std::size_t k = 0; k < 10; ++k) w.entries.emplace_back(static_cast<ExpertId>(k), 0.1);
  auto dw = materialize(base, merge_adapters(w, m));
  auto before = model_evaluations();
  (void)sequence_nll(dw, seq, d.cfg.eval.protocol.eval_prefix_len);
  const auto merged_evals = model_evaluations() - before;
  ok = ok && merged_evals == steps;
  detail << "merged (10 experts): " << static_cast<double>(merged_evals) / static_cast<double>(steps) << "/token";
  // Same accounting as seen by the table run.
  for (const auto& r : d.rep.methods) {
    if (r.method.rfind("ensemble_n", 0) == 0)
      ok = ok && r.evals_per_token == static_cast<double>(std::min<std::size_t>(std::stoul(r.method.substr(10)), d.cfg.K));
    if (r.method.rfind("ttmm", 0) == 0 || r.method == "base" || r.method == "finetune")
      ok = ok && r.evals_per_token == 1.0;
  }
  report(8, ok, "model evaluations per token: n for ensembles, 1 for merged", detail.str());
}

void diagnostics(const Desk& d) {
  const auto& r = d.rep;
  bool mono = !r.pass_at.empty();
  for (std::size_t i = 1; i < r.pass_at.size(); ++i) mono = mono && r.pass_at[i] >= r.pass_at[i - 1];
  const bool at_k = !r.pass_n.empty() && r.pass_n.back() == d.cfg.K && r.pass_at.back() == 1.0;
  const bool diag = r.expert_cluster.rows == d.cfg.K && r.diagonal_fraction >= 0.8;
  std::ostringstream s;
  s << "pass@N";
  for (std::size_t i = 0; i < r.pass_n.size(); ++i) s << " " << r.pass_n[i] << ":" << r.pass_at[i];
  s << "; diagonal row-min " << r.diagonal_fraction;
  report(9, mono && at_k && diag, "pass@N nondecreasing, pass@K = 1, diagonal row-min >= 80%", s.str());
}

void latency(const Desk& d) {
  const auto& rows = d.rep.latency;
  bool ok = rows.size() == d.cfg.eval.bench_taus.size();
  std::ostringstream s;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    ok = ok && r.repetitions >= 10 && r.select_ms >= 0 && r.load_ms >= 0 && r.merge_ms >= 0;
    if (i) ok = ok && r.mean_active <= rows[i - 1].mean_active;
    char buf[160];
    std::snprintf(buf, sizeof buf, "tau %.3g: active %.2f sel %.3fms load %.3fms merge %.3fms; ", r.tau, r.mean_active,
                  r.select_ms, r.load_ms, r.merge_ms);
    s << buf;
  }
  report(10, ok, "latency medians over >= 10 reps, active experts nonincreasing in tau", s.str());
}

void persistence(const Desk& d) {
  bool ok = true;
  const auto& cat = d.build.catalog;
  auto back = load_catalog(cat.dir);
  ok = ok && back.manifest_equal(cat);
  for (std::size_t k = 0; k < cat.size(); ++k) {
    auto a = load_expert(back, static_cast<ExpertId>(k));
    ok = ok && serialize_adapter(a, cat.base_fingerprint) == serialize_adapter(d.build.experts[k], cat.base_fingerprint);
  }
  auto base = load_catalog_base(back);
  ok = ok && base.params == d.build.base.params && base.vocab == d.build.base.vocab;

  // Every single-bit flip of one adapter file is rejected.
  std::ifstream in(cat.dir / cat.experts[0].adapter_path, std::ios::binary);
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), {}};
  std::size_t caught = 0, tried = 0;
  for (std::size_t i = 0; i < bytes.size(); i += std::max<std::size_t>(1, bytes.size() / 2000))
    for (int bit = 0; bit < 8; ++bit) {
      auto b = bytes;
      b[i] ^= static_cast<std::uint8_t>(1u << bit);
      ++tried;
      try {
        (void)parse_adapter(b, &cat.base_fingerprint);
      } catch (const Error&) {
        ++caught;
      }
    }
  std::size_t trunc_caught = 0;
  for (std::size_t n : {std::size_t{0}, std::size_t{7}, bytes.size() / 2, bytes.size() - 1}) {
    try {
      (void)parse_adapter(std::span<const std::uint8_t>(bytes).first(n), &cat.base_fingerprint);
    } catch (const Error&) {
      ++trunc_caught;
    }
  }
  ok = ok && caught == tried && trunc_caught == 4;
  report(11, ok, "bit-exact adapter, base and catalog round trips; corruption rejected",
         fmt("%.0f experts reloaded, %.0f/%.0f bit flips and %.0f/4 truncations rejected", static_cast<double>(cat.size()),
             static_cast<double>(caught), static_cast<double>(tried), static_cast<double>(trunc_caught)));
}

void print_table(const EvalReport& r) {
  std::printf("  %-14s %10s %8s %10s\n", "method", "perplexity", "active", "evals/tok");
  for (const auto& m : r.methods)
    std::printf("  %-14s %10.4f %8.2f %10.2f\n", m.method.c_str(), m.perplexity, m.mean_active, m.evals_per_token);
  std::printf("  tuned beta %.3g:", r.beta);
  for (const auto& [b, p] : r.beta_grid) std::printf(" %.3g->%.4f", b, p);
  std::printf("\n");
}

}  // namespace

int main() {
  using clock = std::chrono::steady_clock;
  sparse_softmax_suite();
  rbf_suite();
  gradient_check();
  probe_suite();

  Desk d;
  const auto t0 = clock::now();
  try {
    d.cfg.catalog_dir = "acceptance_out/catalog";
    d.cfg.report_dir = "acceptance_out/report";
    d.corpora = load_corpora(d.cfg);
    d.build = build_catalog(d.cfg, d.corpora, &std::cout);
    d.embedder = std::make_unique<HashedNgramEmbedder>(d.cfg.embedder);
    d.ctx = context_from_build(d.build, *d.embedder, d.corpora.docs);
    d.rep = run_table1(d.ctx, d.cfg.eval, config_to_json(d.cfg));
    d.seconds = std::chrono::duration<double>(clock::now() - t0).count();
    d.rep.seconds = d.seconds;
    write_report(d.rep, d.cfg.report_dir);
  } catch (const Error& e) {
    std::printf("pipeline failed: [%s] %s\n", e.module().c_str(), e.what());
    for (int id : {1, 2, 5, 8, 9, 10, 11}) report(id, false, "desk pipeline", "did not run");
    return 1;
  }
  std::printf("  desk pipeline: %zu documents, K = %zu, %.1f s (build %s)\n", d.corpora.docs.size(), d.cfg.K,
              d.seconds, d.build.timings.dump().c_str());
  print_table(d.rep);

  const double base = d.rep.ppl("base"), ft = d.rep.ppl("finetune"), tt = d.rep.ppl("ttmm_tau");
  report(1, base > ft && ft > tt && tt <= 0.98 * ft && d.seconds <= 600.0,
         "perplexity base > fine-tune > TTMM(tau=0.01), TTMM >= 2% below fine-tune, <= 10 min",
         fmt("%.4f > %.4f > %.4f (%.2f%% below)", base, ft, tt, 100.0 * (1.0 - tt / ft)) +
             fmt(", %.0f s", d.seconds));
  const double n1 = d.rep.ppl("ttmm_n1"), n10 = d.rep.ppl("ttmm_n10");
  report(2, n10 <= n1 * 1.005, "merging 10 experts is no worse than 1 (0.5% slack)", fmt("n10 %.4f vs n1 %.4f", n10, n1));
  one_hot_exactness(d);
  forward_accounting(d);
  diagnostics(d);
  latency(d);
  persistence(d);

  std::printf("%s: %d criteria failed\n", failures ? "FAILED" : "ALL PASSED", failures);
  return failures ? 1 : 0;
}
