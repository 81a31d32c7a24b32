// ttmm: build expert catalogs, evaluate, benchmark, generate.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ttmm/config.hpp"
#include "ttmm/corpus.hpp"
#include "ttmm/evalbl.hpp"
#include "ttmm/merge.hpp"
#include "ttmm/pipeline.hpp"
#include "ttmm/store.hpp"

using namespace ttmm;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "config file (JSON, comments allowed)");
  cmd->add_option("-s,--set", c.overrides, "override a config key, e.g. --set train.epochs=1")->take_all();
}

std::optional<fs::path> opt_path(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return fs::path(s);
}

// Config used to build a catalog, unless an explicit one is given.
RunConfig config_for_catalog(const std::string& catalog, const Common& c) {
  if (!c.config.empty()) return resolve_config(opt_path(c.config), c.overrides);
  auto cat = load_catalog(catalog);
  return resolve_config(cat.extra.value("config", nlohmann::json()), c.overrides);
}

void print_table(const EvalReport& r) {
  std::printf("%-14s %10s %8s %10s\n", "method", "perplexity", "active", "evals/tok");
  for (const auto& m : r.methods)
    std::printf("%-14s %10.4f %8.2f %10.2f\n", m.method.c_str(), m.perplexity, m.mean_active, m.evals_per_token);
  std::printf("beta %.3g  diagonal row-min %.3f\n", r.beta, r.diagonal_fraction);
}

int cmd_synth(const Common& c, const std::string& out) {
  auto cfg = resolve_config(opt_path(c.config), c.overrides);
  auto docs = texts_of(generate_synthetic_corpus(cfg.synthetic, cfg.lexicon_seed));
  write_corpus(out, docs);
  std::cout << "wrote " << docs.size() << " documents to " << out << "\n";
  return 0;
}

int cmd_build(const Common& c, const std::string& corpus, const std::string& catalog) {
  auto cfg = resolve_config(opt_path(c.config), c.overrides);
  if (!corpus.empty()) cfg.corpus_path = corpus;
  if (!catalog.empty()) cfg.catalog_dir = catalog;
  cfg.validate();
  auto corpora = load_corpora(cfg);
  auto r = build_catalog(cfg, corpora, &std::cerr);
  std::cout << r.catalog.dir.string() << "\n";
  return 0;
}

int cmd_eval(const Common& c, const std::string& catalog, const std::vector<std::string>& methods,
             const std::string& report) {
  auto cfg = config_for_catalog(catalog, c);
  if (!methods.empty()) cfg.eval.methods = methods;
  auto corpora = load_corpora(cfg);
  auto run = load_run(catalog, corpora.docs);
  auto rep = run_table1(run->context, cfg.eval, config_to_json(cfg));
  const std::string dir = report.empty() ? cfg.report_dir : report;
  write_report(rep, dir);
  print_table(rep);
  std::cout << "report written to " << dir << "\n";
  return 0;
}

int cmd_bench(const Common& c, const std::string& catalog, std::vector<double> taus, std::vector<double> betas,
              std::size_t reps, std::size_t n_queries) {
  auto cfg = config_for_catalog(catalog, c);
  auto cat = load_catalog(catalog);
  auto corpora = load_corpora(cfg);
  HashedNgramEmbedder emb(cat.embedder);
  std::vector<EmbeddingVector> queries;
  for (std::size_t i = 0; i < std::min(n_queries, corpora.docs.size()); ++i)
    queries.push_back(emb.embed(std::string_view(corpora.docs[i]).substr(0, cfg.eval.protocol.query_prefix_len)));
  if (taus.empty()) taus = cfg.eval.bench_taus;
  if (betas.empty()) betas = {cfg.routing.beta};
  auto rows = bench_sweep(cat, queries, taus, betas, reps);
  std::printf("%8s %8s %5s %10s %10s %10s %10s\n", "tau", "beta", "reps", "active", "select_ms", "load_ms", "merge_ms");
  for (const auto& r : rows)
    std::printf("%8.4g %8.4g %5zu %10.3f %10.4f %10.4f %10.4f\n", r.tau, r.beta, r.repetitions, r.mean_active,
                r.select_ms, r.load_ms, r.merge_ms);
  return 0;
}

int cmd_generate(const std::string& catalog, const std::string& prompt, std::size_t n_tokens,
                 const std::string& method, std::uint64_t seed, const Common& c) {
  auto cfg = config_for_catalog(catalog, c);
  auto cat = load_catalog(catalog);
  auto base = load_catalog_base(cat);
  std::string out;
  if (method == "base") {
    out = generate(base.params, static_cast<const LoraAdapter<float>*>(nullptr), base.vocab, prompt, n_tokens, seed);
  } else if (method == "merged") {
    HashedNgramEmbedder emb(cat.embedder);
    auto q = emb.embed(std::string_view(prompt).substr(0, cfg.eval.protocol.query_prefix_len));
    auto tm = timed_route_merge(cat, q, cfg.routing);
    std::cerr << "active experts: " << tm.latency.n_active << "\n";
    out = generate(materialize(base.params, tm.merged), base.vocab, prompt, n_tokens, seed);
  } else if (method.rfind("expert-", 0) == 0) {
    auto id = static_cast<ExpertId>(std::stoul(method.substr(7)));
    auto a = load_expert(cat, id);
    out = generate(base.params, &a, base.vocab, prompt, n_tokens, seed);
  } else {
    throw Error("cli", "method must be base, merged or expert-<id>");
  }
  std::cout << out << "\n";
  return 0;
}

int cmd_probe(std::size_t instances, std::uint64_t seed, double eta_t) {
  std::size_t held = 0;
  std::printf("%4s %3s %2s %9s %12s %12s %5s\n", "inst", "N", "T", "eta", "lhs", "rhs", "holds");
  for (std::size_t i = 0; i < instances; ++i) {
    auto in = make_probe_instance(derive_seed(seed, i), eta_t);
    auto r = run_probe_instance(in);
    held += r.holds;
    std::printf("%4zu %3zu %2zu %9.5f %12.4e %12.4e %5s\n", i, in.probe.N, in.probe.T, in.probe.eta, r.lhs, r.rhs,
                r.holds ? "yes" : "NO");
  }
  std::printf("bound held on %zu/%zu instances\n", held, instances);
  return 0;
}

int cmd_cluster_report(const Common& c, const std::string& corpus, std::vector<std::size_t> ks) {
  auto cfg = resolve_config(opt_path(c.config), c.overrides);
  if (!corpus.empty()) cfg.corpus_path = corpus;
  std::vector<std::string> docs =
      cfg.corpus_path ? read_corpus(*cfg.corpus_path) : texts_of(generate_synthetic_corpus(cfg.synthetic, cfg.lexicon_seed));
  HashedNgramEmbedder emb(cfg.embedder);
  auto E = emb.embed_all(docs);
  if (ks.empty()) ks = {1, 2, 4, 8, 16, 32, 64};
  std::sort(ks.begin(), ks.end());
  while (!ks.empty() && ks.back() > docs.size()) ks.pop_back();
  auto curve = elbow_curve(E, ks, derive_seed(cfg.seed, 0xc1), cfg.clustering);
  std::printf("%6s %14s\n", "K", "kmeans_loss");
  for (const auto& p : curve) std::printf("%6zu %14.6f\n", p.k, p.loss);
  auto a = bisecting_kmeans(E, cfg.K, derive_seed(cfg.seed, 0xc1), cfg.clustering);
  auto titles = cluster_titles(docs, a);
  auto sizes = a.members();
  for (std::size_t k = 0; k < titles.size(); ++k) {
    std::printf("cluster %3zu  size %5zu ", k, sizes[k].size());
    for (const auto& t : titles[k]) std::printf(" \"%s\"", t.c_str());
    std::printf("\n");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Test-time merging of cluster experts"};
  app.require_subcommand(1);

  Common common;
  std::string corpus, catalog, report, prompt, method = "merged", out;
  std::vector<std::string> methods;
  std::vector<double> taus, betas;
  std::vector<std::size_t> ks;
  std::size_t reps = 10, n_queries = 32, n_tokens = 100, instances = 100;
  std::uint64_t seed = 0;
  double eta_t = 0.03;

  auto* synth = app.add_subcommand("synth", "write the synthetic corpus");
  add_common(synth, common);
  synth->add_option("-o,--out", out, "output corpus file")->required();

  auto* build = app.add_subcommand("build", "cluster, train experts and write a catalog");
  add_common(build, common);
  build->add_option("--corpus", corpus, "corpus file or directory (default: synthetic)");
  build->add_option("--catalog", catalog, "catalog directory");

  auto* eval = app.add_subcommand("eval", "method table and diagnostics");
  add_common(eval, common);
  eval->add_option("--catalog", catalog, "catalog directory")->required();
  eval->add_option("--methods", methods, "subset of methods")->delimiter(',');
  eval->add_option("--report", report, "report directory");

  auto* bench = app.add_subcommand("bench", "route/load/merge latency sweep");
  add_common(bench, common);
  bench->add_option("--catalog", catalog, "catalog directory")->required();
  bench->add_option("--taus", taus, "tau values")->delimiter(',');
  bench->add_option("--betas", betas, "beta values")->delimiter(',');
  bench->add_option("--reps", reps, "repetitions (>= 1)");
  bench->add_option("--queries", n_queries, "number of corpus prefixes used as queries");

  auto* gen = app.add_subcommand("generate", "sample text from base, merged or one expert");
  add_common(gen, common);
  gen->add_option("--catalog", catalog, "catalog directory")->required();
  gen->add_option("--prompt", prompt, "prompt text")->required();
  gen->add_option("-n,--n-tokens", n_tokens, "characters to generate");
  gen->add_option("--method", method, "base | merged | expert-<id>");
  gen->add_option("--seed", seed, "sampling seed");

  auto* probe = app.add_subcommand("probe", "approximation bound sweep on random small instances");
  probe->add_option("--instances", instances, "number of instances");
  probe->add_option("--seed", seed, "seed");
  probe->add_option("--eta-t", eta_t, "upper bound on eta * T");

  auto* report_cmd = app.add_subcommand("cluster-report", "elbow curve and cluster titles");
  add_common(report_cmd, common);
  report_cmd->add_option("--corpus", corpus, "corpus file or directory (default: synthetic)");
  report_cmd->add_option("--ks", ks, "K values for the elbow curve")->delimiter(',');

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) return cmd_synth(common, out);
    if (*build) return cmd_build(common, corpus, catalog);
    if (*eval) return cmd_eval(common, catalog, methods, report);
    if (*bench) return cmd_bench(common, catalog, taus, betas, reps, n_queries);
    if (*gen) return cmd_generate(catalog, prompt, n_tokens, method, seed, common);
    if (*probe) return cmd_probe(instances, seed, eta_t);
    if (*report_cmd) return cmd_cluster_report(common, corpus, ks);
  } catch (const Error& e) {
    std::cerr << "error [" << e.module() << "]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error [cli]: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
