#pragma once

// End-to-end driver: corpus -> base model -> clusters -> experts -> catalog,
// and catalog -> in-memory evaluation context.

#include <chrono>
#include <memory>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ttmm/cluster.hpp"
#include "ttmm/config.hpp"
#include "ttmm/corpus.hpp"
#include "ttmm/embed.hpp"
#include "ttmm/evalbl.hpp"
#include "ttmm/lm.hpp"
#include "ttmm/store.hpp"

namespace ttmm {

struct Corpora {
  std::vector<std::string> docs;
  std::vector<std::string> pretrain;  // empty when a base model is supplied
};

inline Corpora load_corpora(const RunConfig& cfg) {
  Corpora c;
  if (cfg.corpus_path) {
    c.docs = read_corpus(*cfg.corpus_path);
  } else {
    c.docs = texts_of(generate_synthetic_corpus(cfg.synthetic, cfg.lexicon_seed));
  }
  if (cfg.base_path) return c;
  if (cfg.pretrain.corpus_path) {
    c.pretrain = read_corpus(*cfg.pretrain.corpus_path);
  } else if (!cfg.corpus_path) {
    SyntheticCorpusConfig pc = cfg.synthetic;
    pc.docs_per_domain = cfg.pretrain.docs_per_domain;
    pc.seed = derive_seed(cfg.seed, 0x9e);
    c.pretrain = texts_of(generate_synthetic_corpus(pc, cfg.pretrain.lexicon_seed));
  } else {
    c.pretrain = c.docs;
  }
  return c;
}

inline std::string corpus_fingerprint(std::span<const std::string> docs) {
  std::uint64_t h = kFnvOffset;
  for (const auto& d : docs) {
    h = fnv1a(d.data(), d.size(), h);
    h = fnv1a("\n", 1, h);
  }
  return to_hex(h);
}

struct BuildResult {
  ExpertCatalog catalog;
  BaseModel base;
  std::vector<LoraAdapter<float>> experts;
  std::optional<LoraAdapter<float>> global;
  ClusterAssignment assignment;
  HoldoutSplit split;
  std::vector<EmbeddingVector> embeddings;
  std::vector<EmbeddingVector> centroids;
  nlohmann::json timings = nlohmann::json::object();  // seconds per stage
};

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

inline nlohmann::json split_to_json(const HoldoutSplit& s) {
  return {{"train_by_cluster", s.train_by_cluster}, {"holdout", s.holdout}, {"test", s.test}, {"test_cluster", s.test_cluster}};
}

inline HoldoutSplit split_from_json(const nlohmann::json& j) {
  HoldoutSplit s;
  s.train_by_cluster = j.at("train_by_cluster").get<std::vector<std::vector<std::size_t>>>();
  s.holdout = j.at("holdout").get<std::vector<std::vector<std::size_t>>>();
  s.test = j.at("test").get<std::vector<std::size_t>>();
  s.test_cluster = j.at("test_cluster").get<std::vector<std::uint32_t>>();
  for (const auto& m : s.train_by_cluster) s.train.insert(s.train.end(), m.begin(), m.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

// Refuses to clobber a directory that is not already a catalog.
inline void prepare_catalog_dir(const fs::path& dir) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw Error("store", dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir) && !fs::exists(dir / "manifest.json"))
      throw Error("store", dir.string() + " is not empty and holds no catalog manifest");
    fs::remove_all(dir / "adapters");
    fs::remove(dir / "global.ttmm");
  }
  fs::create_directories(dir / "adapters");
}

}  // namespace detail

/// Trains everything and writes the catalog: manifest.json, base.ttmb,
/// adapters/expert_NNNN.ttmm and, optionally, global.ttmm. The split and the
/// resolved config are stored in the manifest's "extra" block.
inline BuildResult build_catalog(const RunConfig& cfg, const Corpora& corpora, std::ostream* log = nullptr) {
  using clock = std::chrono::steady_clock;
  cfg.validate();
  auto say = [&](const std::string& s) {
    if (log) *log << s << std::endl;
  };
  const auto& docs = corpora.docs;
  if (docs.empty()) throw Error("cli", "empty corpus");
  if (cfg.K > docs.size())
    throw Error("cluster", "K > n (K=" + std::to_string(cfg.K) + ", n=" + std::to_string(docs.size()) + ")");
  if (cfg.eval.protocol.test_per_cluster > 0) cfg.eval.protocol.check_documents(docs);

  BuildResult r;
  auto t = clock::now();
  if (cfg.base_path) {
    r.base = load_base(*cfg.base_path);
    for (const auto& d : docs) (void)r.base.vocab.encode_prefix(d);
  } else {
    std::vector<std::string> all = docs;
    all.insert(all.end(), corpora.pretrain.begin(), corpora.pretrain.end());
    r.base.vocab = Vocab::from_texts(all);
    say("pre-training base model on " + std::to_string(corpora.pretrain.size()) + " documents");
    r.base.params = pretrain_base<float>(r.base.vocab, corpora.pretrain.empty() ? docs : corpora.pretrain, cfg.model,
                                         cfg.pretrain.train);
    r.base.fingerprint = base_fingerprint(r.base.params, r.base.vocab);
  }
  r.timings["base"] = detail::seconds_since(t);

  t = clock::now();
  HashedNgramEmbedder embedder(cfg.embedder);
  r.embeddings = embedder.embed_all(docs);
  r.assignment = bisecting_kmeans(r.embeddings, cfg.K, derive_seed(cfg.seed, 0xc1), cfg.clustering);
  r.split = split_holdout(r.assignment, cfg.eval.protocol);
  r.centroids = train_centroids(r.embeddings, r.split);
  r.timings["cluster"] = detail::seconds_since(t);
  say("clustered " + std::to_string(docs.size()) + " documents into " + std::to_string(cfg.K) + " clusters");

  t = clock::now();
  r.experts = train_experts(r.base.params, r.base.vocab, docs, r.split.train_by_cluster, cfg.train, cfg.lora,
                            cfg.eval.workers);
  r.timings["experts"] = detail::seconds_since(t);
  say("trained " + std::to_string(r.experts.size()) + " experts");

  if (cfg.save_global) {
    t = clock::now();
    r.global = global_finetune(r.base.params, r.base.vocab, gather(docs, r.split.train), cfg.train, cfg.lora);
    r.timings["global"] = detail::seconds_since(t);
    say("trained global fine-tune adapter");
  }

  const fs::path dir = cfg.catalog_dir;
  detail::prepare_catalog_dir(dir);
  auto& cat = r.catalog;
  cat.dir = dir;
  cat.embedder = cfg.embedder;
  cat.embedder_fingerprint = embedder.fingerprint();
  save_base(r.base.params, r.base.vocab, dir / cat.base_path);
  cat.base_fingerprint = r.base.fingerprint;
  for (std::size_t k = 0; k < r.experts.size(); ++k)
    add_expert(cat, r.centroids[k], r.split.train_by_cluster[k].size(), r.experts[k]);
  if (r.global) {
    save_adapter(*r.global, dir / "global.ttmm", cat.base_fingerprint);
    cat.extra["global_adapter"] = "global.ttmm";
  }
  cat.extra["corpus_fingerprint"] = corpus_fingerprint(docs);
  cat.extra["corpus_size"] = docs.size();
  cat.extra["split"] = detail::split_to_json(r.split);
  cat.extra["config"] = config_to_json(cfg);
  save_manifest(cat);
  say("wrote catalog to " + dir.string());
  return r;
}

/// Catalog plus everything loaded from it, owning the storage an
/// EvalContext points into.
struct LoadedRun {
  ExpertCatalog catalog;
  BaseModel base;
  std::unique_ptr<Embedder> embedder;
  EvalContext context;
};

inline std::unique_ptr<LoadedRun> load_run(const fs::path& catalog_dir, std::span<const std::string> docs) {
  auto run = std::make_unique<LoadedRun>();
  run->catalog = load_catalog(catalog_dir);
  run->base = load_catalog_base(run->catalog);
  auto emb = std::make_unique<HashedNgramEmbedder>(run->catalog.embedder);
  if (emb->fingerprint() != run->catalog.embedder_fingerprint)
    throw Error("store", "catalog was built with a different embedder");
  run->embedder = std::move(emb);
  const auto& extra = run->catalog.extra;
  if (!extra.contains("split")) throw Error("store", "catalog has no stored split");
  if (extra.value("corpus_fingerprint", "") != corpus_fingerprint(docs))
    throw Error("store", "corpus does not match the one the catalog was built from");

  auto& ctx = run->context;
  ctx.base = &run->base.params;
  ctx.vocab = &run->base.vocab;
  ctx.embedder = run->embedder.get();
  ctx.catalog = &run->catalog;
  for (std::size_t k = 0; k < run->catalog.size(); ++k) ctx.experts.push_back(load_expert(run->catalog, static_cast<ExpertId>(k)));
  ctx.centroids = run->catalog.centroids();
  if (extra.contains("global_adapter"))
    ctx.global = load_adapter(run->catalog.dir / extra.at("global_adapter").get<std::string>(), run->base);
  const auto split = detail::split_from_json(extra.at("split"));
  ctx.test = gather(docs, split.test);
  ctx.test_cluster = split.test_cluster;
  for (const auto& h : split.holdout) ctx.holdout.push_back(gather(docs, h));
  ctx.train = gather(docs, split.train);
  ctx.train_embeddings = run->embedder->embed_all(ctx.train);
  return run;
}

/// In-memory context straight from a build, without reloading files.
inline EvalContext context_from_build(const BuildResult& b, const Embedder& embedder, std::span<const std::string> docs) {
  EvalContext ctx;
  ctx.base = &b.base.params;
  ctx.vocab = &b.base.vocab;
  ctx.embedder = &embedder;
  ctx.catalog = &b.catalog;
  ctx.experts = b.experts;
  ctx.centroids = b.centroids;
  ctx.global = b.global;
  ctx.test = gather(docs, b.split.test);
  ctx.test_cluster = b.split.test_cluster;
  for (const auto& h : b.split.holdout) ctx.holdout.push_back(gather(docs, h));
  ctx.train = gather(docs, b.split.train);
  ctx.train_embeddings = gather(b.embeddings, b.split.train);
  return ctx;
}

}  // namespace ttmm
