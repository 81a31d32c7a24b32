#pragma once

// Evaluation protocol, baselines and diagnostics: holdout splits, global
// fine-tuning, test-time training, the expert x cluster matrix, pass@N, the
// centroid ablation, the test-time-training approximation probe and the
// method table.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ttmm/cluster.hpp"
#include "ttmm/common.hpp"
#include "ttmm/embed.hpp"
#include "ttmm/lm.hpp"
#include "ttmm/merge.hpp"
#include "ttmm/router.hpp"
#include "ttmm/store.hpp"

namespace ttmm {

// ---------------------------------------------------------------------------
// Protocol and split

struct EvalProtocol {
  std::size_t query_prefix_len = 50;  // characters routed on
  std::size_t eval_prefix_len = 50;   // characters not scored
  double holdout_fraction = 0.1;      // per cluster, besides the test docs
  std::size_t test_per_cluster = 1;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0))
      throw Error("evalbl", "holdout_fraction must be in [0, 1)");
  }

  /// Both prefixes must leave something to route on and something to score.
  void check_documents(std::span<const std::string> docs) const {
    for (std::size_t i = 0; i < docs.size(); ++i)
      if (docs[i].size() <= std::max(query_prefix_len, eval_prefix_len))
        throw Error("evalbl", "document " + std::to_string(i) + " has " + std::to_string(docs[i].size()) +
                                  " characters, not more than the prefix lengths");
  }
};

struct HoldoutSplit {
  std::vector<std::size_t> train;                       // corpus indices, ascending
  std::vector<std::vector<std::size_t>> train_by_cluster;
  std::vector<std::vector<std::size_t>> holdout;        // per cluster
  std::vector<std::size_t> test;                        // grouped by cluster
  std::vector<std::uint32_t> test_cluster;
};

/// Seeded per-cluster split. Each cluster gives `test_per_cluster` test
/// documents, floor(holdout_fraction * n) (at least one when the fraction is
/// positive) holdout documents, and keeps the rest for training.
inline HoldoutSplit split_holdout(const ClusterAssignment& assignment, const EvalProtocol& protocol) {
  protocol.validate();
  HoldoutSplit s;
  auto groups = assignment.members();
  s.train_by_cluster.resize(groups.size());
  s.holdout.resize(groups.size());
  for (std::size_t c = 0; c < groups.size(); ++c) {
    auto m = groups[c];
    const std::size_t n = m.size();
    std::size_t n_hold = 0;
    if (protocol.holdout_fraction > 0)
      n_hold = std::max<std::size_t>(1, static_cast<std::size_t>(protocol.holdout_fraction * static_cast<double>(n)));
    if (n < protocol.test_per_cluster + n_hold + 1)
      throw Error("evalbl", "cluster " + std::to_string(c) + " too small for the holdout split (" + std::to_string(n) +
                                " documents)");
    std::mt19937_64 rng(derive_seed(protocol.seed, 0x5917 + c));
    std::shuffle(m.begin(), m.end(), rng);
    std::size_t i = 0;
    for (; i < protocol.test_per_cluster; ++i) {
      s.test.push_back(m[i]);
      s.test_cluster.push_back(static_cast<std::uint32_t>(c));
    }
    for (; i < protocol.test_per_cluster + n_hold; ++i) s.holdout[c].push_back(m[i]);
    for (; i < n; ++i) s.train_by_cluster[c].push_back(m[i]);
    std::sort(s.holdout[c].begin(), s.holdout[c].end());
    std::sort(s.train_by_cluster[c].begin(), s.train_by_cluster[c].end());
    s.train.insert(s.train.end(), s.train_by_cluster[c].begin(), s.train_by_cluster[c].end());
  }
  std::sort(s.train.begin(), s.train.end());
  return s;
}

inline std::vector<std::string> gather(std::span<const std::string> docs, std::span<const std::size_t> idx) {
  std::vector<std::string> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(docs[i]);
  return out;
}

inline std::vector<EmbeddingVector> gather(std::span<const EmbeddingVector> v, std::span<const std::size_t> idx) {
  std::vector<EmbeddingVector> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(v[i]);
  return out;
}

/// Renormalized centroid of each cluster's training members.
inline std::vector<EmbeddingVector> train_centroids(std::span<const EmbeddingVector> embeddings,
                                                    const HoldoutSplit& split) {
  std::vector<std::uint32_t> labels;
  std::vector<EmbeddingVector> pts;
  for (std::size_t c = 0; c < split.train_by_cluster.size(); ++c)
    for (auto i : split.train_by_cluster[c]) {
      pts.push_back(embeddings[i]);
      labels.push_back(static_cast<std::uint32_t>(c));
    }
  ClusterAssignment a{std::move(labels), split.train_by_cluster.size()};
  return compute_centroids(pts, a).centroids;
}

// ---------------------------------------------------------------------------
// Training baselines

inline LoraAdapter<float> global_finetune(const BaseParams<float>& base, const Vocab& vocab,
                                          std::span<const std::string> train_docs, const TrainConfig& cfg,
                                          const LoraConfig& lora) {
  TrainConfig c = cfg;
  c.seed = derive_seed(cfg.seed, 0x91b);
  return train_adapter(base, vocab, train_docs, c, lora);
}

/// One adapter per cluster, trained on that cluster's training documents.
inline std::vector<LoraAdapter<float>> train_experts(const BaseParams<float>& base, const Vocab& vocab,
                                                     std::span<const std::string> docs,
                                                     const std::vector<std::vector<std::size_t>>& members,
                                                     const TrainConfig& cfg, const LoraConfig& lora,
                                                     unsigned workers = default_workers()) {
  std::vector<LoraAdapter<float>> out(members.size());
  parallel_for(
      members.size(),
      [&](std::size_t k) {
        TrainConfig c = cfg;
        c.seed = derive_seed(cfg.seed, 0xe0000 + k);
        out[k] = train_adapter(base, vocab, gather(docs, members[k]), c, lora);
      },
      workers);
  return out;
}

struct TttConfig {
  std::size_t neighbors = 100;
  std::size_t epochs = 1;  // passes over the neighbors; 1 is a single step per neighbor
  TrainConfig train;
};

/// Test-time training: retrieves the N nearest documents to the query
/// embedding and takes one AdamW step per document, most similar first.
/// `order_out` receives the retrieved indices in training order.
template <class Real>
LoraAdapter<Real> ttt_adapt(const BaseParams<Real>& base, const Vocab& vocab, const EmbeddingVector& query,
                            std::span<const EmbeddingVector> index, std::span<const std::string> docs,
                            const TttConfig& cfg, const LoraConfig& lora, std::vector<std::size_t>* order_out = nullptr,
                            const StepObserver& observer = {}) {
  cfg.train.validate();
  if (index.size() != docs.size()) throw Error("evalbl", "index and documents differ in size");
  if (cfg.neighbors < 1 || cfg.neighbors > docs.size())
    throw Error("evalbl", "N > corpus size (N=" + std::to_string(cfg.neighbors) + ", n=" +
                              std::to_string(docs.size()) + ")");
  if (cfg.epochs < 1) throw Error("evalbl", "TTT epochs must be >= 1");
  auto order = top_n(similarities(query, index), cfg.neighbors);
  if (order_out) *order_out = order;
  auto nearest = gather(docs, order);
  auto seqs = encode_training_docs(vocab, nearest, cfg.train.max_seq_len);
  auto adapter = create_adapter(base, lora, derive_seed(cfg.train.seed, 0x777));
  std::vector<double> params = flatten(adapter);
  AdamW opt(params.size(), cfg.train);
  std::size_t step = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e)
    for (const auto& s : seqs) {
      DenseWeights w = materialize(base, &adapter);
      DenseGrads g(w);
      const double inv = 1.0 / static_cast<double>(s.size() - 1);
      double nll = accumulate_gradients(w, s, inv, g).nll * inv;
      if (!std::isfinite(nll)) throw Error("evalbl", "TTT diverged at step " + std::to_string(step));
      if (observer) observer(step, nll);
      auto grads = project_to_adapter(adapter, g).flat();
      opt.step(params, grads);
      unflatten(params, adapter);
      ++step;
    }
  return adapter;
}

// ---------------------------------------------------------------------------
// Diagnostics

/// Entry (k, j): perplexity of expert k on cluster j's holdout documents.
inline Matrix<double> expert_cluster_matrix(const BaseParams<float>& base, std::span<const LoraAdapter<float>> adapters,
                                            const Vocab& vocab, const std::vector<std::vector<std::string>>& holdout,
                                            std::size_t eval_prefix_len, unsigned workers = default_workers()) {
  if (adapters.size() != holdout.size()) throw Error("evalbl", "need one holdout set per expert");
  for (std::size_t j = 0; j < holdout.size(); ++j)
    if (holdout[j].empty()) throw Error("evalbl", "cluster " + std::to_string(j) + " has no holdout documents");
  const std::size_t K = adapters.size();
  Matrix<double> m(K, K, 0.0);
  parallel_for(
      K,
      [&](std::size_t k) {
        auto w = materialize(base, &adapters[k]);
        for (std::size_t j = 0; j < K; ++j) m(k, j) = perplexity_of(corpus_nll(w, vocab, holdout[j], eval_prefix_len));
      },
      workers);
  return m;
}

/// Share of experts whose own cluster is where they score best.
inline double diagonal_row_min_fraction(const Matrix<double>& m) {
  if (m.rows == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t k = 0; k < m.rows; ++k) {
    auto row = m.row(k);
    if (row[k] <= *std::min_element(row.begin(), row.end())) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(m.rows);
}

/// Fraction of samples whose source cluster is among the N most similar
/// centroids (ties broken toward the lower id).
inline std::vector<double> pass_at_n(std::span<const EmbeddingVector> centroids,
                                     std::span<const EmbeddingVector> samples, std::span<const std::uint32_t> labels,
                                     std::span<const std::size_t> n_list) {
  const std::size_t K = centroids.size();
  if (samples.size() != labels.size()) throw Error("evalbl", "samples and labels differ in size");
  for (auto n : n_list)
    if (n < 1 || n > K) throw Error("evalbl", "N must be in [1, K]");
  std::vector<std::size_t> rank(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (labels[i] >= K) throw Error("evalbl", "label out of range");
    auto sims = similarities(samples[i], centroids);
    const double own = sims[labels[i]];
    std::size_t r = 0;
    for (std::size_t k = 0; k < K; ++k)
      if (sims[k] > own || (sims[k] == own && k < labels[i])) ++r;
    rank[i] = r;
  }
  std::vector<double> out;
  for (auto n : n_list) {
    std::size_t hit = 0;
    for (auto r : rank) hit += r < n;
    out.push_back(samples.empty() ? 1.0 : static_cast<double>(hit) / static_cast<double>(samples.size()));
  }
  return out;
}

struct SelectionPair {
  std::size_t by_centroid = 0;
  std::size_t by_sum = 0;
};

/// argmin_k |q - mean(D_k)|^2 versus argmin_k sum_{x in D_k} |q - x|^2 over
/// explicit (possibly overlapping) member lists. The mean is not renormalized.
inline SelectionPair centroid_vs_sum_selection(const EmbeddingVector& query, std::span<const EmbeddingVector> embeddings,
                                               const std::vector<std::vector<std::size_t>>& clusters) {
  if (clusters.empty()) throw Error("evalbl", "no clusters");
  SelectionPair out;
  double best_c = std::numeric_limits<double>::infinity(), best_s = best_c;
  for (std::size_t k = 0; k < clusters.size(); ++k) {
    if (clusters[k].empty()) throw Error("evalbl", "cluster " + std::to_string(k) + " is empty");
    auto mean = detail::mean_of(embeddings, clusters[k]);
    const double dc = detail::sq_dist_to(query, mean);
    double ds = 0.0;
    for (auto i : clusters[k]) ds += squared_distance(query.span(), embeddings[i].span());
    if (dc < best_c) best_c = dc, out.by_centroid = k;
    if (ds < best_s) best_s = ds, out.by_sum = k;
  }
  return out;
}

inline SelectionPair centroid_vs_sum_selection(const EmbeddingVector& query, std::span<const EmbeddingVector> embeddings,
                                               const ClusterAssignment& a) {
  a.validate(embeddings.size());
  return centroid_vs_sum_selection(query, embeddings, a.members());
}

// ---------------------------------------------------------------------------
// Test-time-training approximation probe

struct PropositionProbe {
  double eta = 0.01;
  std::size_t T = 1;
  std::size_t N = 4;  // neighbors of the prompt
  double safety = 2.0;
  std::size_t param_samples = 8;  // random perturbations per iterate for L_hat
  double param_radius = 1e-3;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(eta >= 0)) throw Error("evalbl", "eta must be >= 0");
    if (T < 1) throw Error("evalbl", "T must be >= 1");
    if (N < 1) throw Error("evalbl", "N must be >= 1");
    if (!(safety >= 1)) throw Error("evalbl", "safety factor must be >= 1");
  }
};

struct ProbeResult {
  double lhs = 0, rhs = 0;
  bool holds = false;
  double L_hat = 0, G_hat = 0;
  double diam_neighbors = 0, diam_prime = 0;
  double param_distance = 0;
  std::vector<std::size_t> neighbors;
};

namespace detail {

inline double l2_diff(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace detail

/// Trains two adapters from `init` with T steps of full-batch gradient
/// descent (step eta, loss = mean per-document token NLL): one on the N
/// nearest neighbors of the prompt, one on D'. Compares
///   lhs = |f(x*; theta_x) - f(x*; theta')|   (next-token distributions)
///   rhs = eta T L G (diam(D_x*) + diam(D'))
/// with L and G estimated as safety * max of sampled quotients:
///   L: |f(x*; a) - f(x*; b)| / |a - b| over both trajectories, cross pairs
///      and random perturbations of the iterates;
///   G: |grad(a; z) - grad(b; z')| / |phi(z) - phi(z')| over document pairs,
///      with a, b the iterates each document is used at.
template <class Real>
ProbeResult proposition_probe(const PropositionProbe& probe, const BaseParams<Real>& base,
                              const LoraAdapter<Real>& init, const Vocab& vocab, std::string_view prompt,
                              const EmbeddingVector& prompt_embedding, std::span<const std::string> docs,
                              std::span<const EmbeddingVector> embeddings, std::span<const std::size_t> d_prime) {
  probe.validate();
  if (docs.size() != embeddings.size()) throw Error("evalbl", "documents and embeddings differ in size");
  if (probe.N > docs.size()) throw Error("evalbl", "N > corpus size");
  if (d_prime.empty()) throw Error("evalbl", "D' is empty");
  ProbeResult r;
  r.neighbors = top_n(similarities(prompt_embedding, embeddings), probe.N);
  bool meet = false;
  for (auto i : d_prime) {
    if (i >= docs.size()) throw Error("evalbl", "D' index out of range");
    meet = meet || std::find(r.neighbors.begin(), r.neighbors.end(), i) != r.neighbors.end();
  }
  if (!meet) throw Error("evalbl", "proposition precondition violated");
  r.diam_neighbors = subset_diameter(embeddings, r.neighbors);
  r.diam_prime = subset_diameter(embeddings, d_prime);

  std::vector<std::vector<int>> seqs(docs.size());
  auto encode = [&](std::span<const std::size_t> idx) {
    for (auto i : idx)
      if (seqs[i].empty()) seqs[i] = vocab.encode_document(docs[i]);
  };
  encode(r.neighbors);
  encode(d_prime);
  const auto prompt_toks = vocab.encode_prefix(prompt);

  LoraAdapter<Real> work = init;
  auto grad_at = [&](std::span<const double> theta, std::size_t doc) {
    unflatten(theta, work);
    DenseWeights w = materialize(base, &work);
    DenseGrads g(w);
    accumulate_gradients(w, seqs[doc], 1.0 / static_cast<double>(seqs[doc].size() - 1), g);
    return project_to_adapter(work, g).flat();
  };
  auto output_at = [&](std::span<const double> theta) {
    unflatten(theta, work);
    return forward(materialize(base, &work), prompt_toks);
  };

  struct Trajectory {
    std::vector<std::vector<double>> theta;             // T + 1 iterates
    std::vector<std::vector<std::vector<double>>> grad;  // [t][member]
  };
  auto run = [&](std::span<const std::size_t> set) {
    Trajectory tr;
    tr.theta.push_back(flatten(init));
    for (std::size_t t = 0; t < probe.T; ++t) {
      const auto& th = tr.theta.back();
      std::vector<std::vector<double>> gs;
      std::vector<double> mean(th.size(), 0.0);
      for (auto i : set) {
        gs.push_back(grad_at(th, i));
        for (std::size_t p = 0; p < mean.size(); ++p) mean[p] += gs.back()[p] / static_cast<double>(set.size());
      }
      std::vector<double> next = th;
      for (std::size_t p = 0; p < next.size(); ++p) next[p] -= probe.eta * mean[p];
      tr.grad.push_back(std::move(gs));
      tr.theta.push_back(std::move(next));
    }
    return tr;
  };
  const Trajectory tx = run(r.neighbors);
  const Trajectory tp = run(d_prime);

  // G quotients.
  double g_max = 0.0;
  auto g_quot = [&](const std::vector<double>& ga, std::size_t a, const std::vector<double>& gb, std::size_t b) {
    const double dx = std::sqrt(squared_distance(embeddings[a].span(), embeddings[b].span()));
    if (dx <= 1e-12) return;
    g_max = std::max(g_max, detail::l2_diff(ga, gb) / dx);
  };
  for (std::size_t t = 0; t < probe.T; ++t) {
    for (std::size_t i = 0; i < r.neighbors.size(); ++i) {
      for (std::size_t j = 0; j < d_prime.size(); ++j)
        g_quot(tx.grad[t][i], r.neighbors[i], tp.grad[t][j], d_prime[j]);
      for (std::size_t i2 = i + 1; i2 < r.neighbors.size(); ++i2)
        g_quot(tx.grad[t][i], r.neighbors[i], tx.grad[t][i2], r.neighbors[i2]);
    }
    for (std::size_t j = 0; j < d_prime.size(); ++j)
      for (std::size_t j2 = j + 1; j2 < d_prime.size(); ++j2)
        g_quot(tp.grad[t][j], d_prime[j], tp.grad[t][j2], d_prime[j2]);
  }

  // L quotients.
  double l_max = 0.0;
  std::vector<std::vector<double>> outs_x, outs_p;
  for (const auto& th : tx.theta) outs_x.push_back(output_at(th));
  for (const auto& th : tp.theta) outs_p.push_back(output_at(th));
  auto l_quot = [&](const std::vector<double>& ta, const std::vector<double>& fa, const std::vector<double>& tb,
                    const std::vector<double>& fb) {
    const double d = detail::l2_diff(ta, tb);
    if (d <= 0.0) return;
    l_max = std::max(l_max, detail::l2_diff(fa, fb) / d);
  };
  for (std::size_t t = 0; t <= probe.T; ++t) {
    l_quot(tx.theta[t], outs_x[t], tp.theta[t], outs_p[t]);
    if (t > 0) {
      l_quot(tx.theta[t], outs_x[t], tx.theta[t - 1], outs_x[t - 1]);
      l_quot(tp.theta[t], outs_p[t], tp.theta[t - 1], outs_p[t - 1]);
    }
  }
  std::mt19937_64 rng(derive_seed(probe.seed, 0x1b));
  std::normal_distribution<double> nd(0.0, 1.0);
  for (const auto* tr : {&tx, &tp})
    for (const auto& th : tr->theta) {
      const auto f0 = output_at(th);
      for (std::size_t s = 0; s < probe.param_samples; ++s) {
        std::vector<double> u(th.size());
        double norm = 0;
        for (auto& x : u) x = nd(rng), norm += x * x;
        norm = std::sqrt(norm);
        std::vector<double> pert = th;
        for (std::size_t p = 0; p < pert.size(); ++p) pert[p] += probe.param_radius * u[p] / norm;
        l_quot(th, f0, pert, output_at(pert));
      }
    }

  r.L_hat = probe.safety * l_max;
  r.G_hat = probe.safety * g_max;
  r.param_distance = detail::l2_diff(tx.theta.back(), tp.theta.back());
  r.lhs = detail::l2_diff(outs_x.back(), outs_p.back());
  r.rhs = probe.eta * static_cast<double>(probe.T) * r.L_hat * r.G_hat * (r.diam_neighbors + r.diam_prime);
  r.holds = r.lhs <= r.rhs || r.lhs == 0.0;
  return r;
}

/// Small random instance for the probe: V = 8 (six characters), h = 8,
/// rank 2, two families of documents with different character biases.
struct ProbeInstance {
  Vocab vocab;
  BaseParams<double> base;
  LoraAdapter<double> init;
  std::vector<std::string> docs;
  std::vector<EmbeddingVector> embeddings;
  std::string prompt;
  EmbeddingVector prompt_embedding;
  std::vector<std::size_t> d_prime;
  PropositionProbe probe;
};

inline ProbeInstance make_probe_instance(std::uint64_t seed, double eta_t_max = 0.03, std::size_t max_T = 3) {
  ProbeInstance in;
  std::mt19937_64 rng(derive_seed(seed, 0x9b0be));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::string alphabet = "abcdef";
  in.vocab = Vocab::from_symbols(alphabet);
  ModelConfig mc;
  mc.hidden = 8;
  in.base = init_base<double>(in.vocab.size(), mc, derive_seed(seed, 1));
  LoraConfig lc;
  lc.rank = 2;
  lc.alpha = 4;
  lc.init_std = 0.3;
  in.init = create_adapter(in.base, lc, derive_seed(seed, 2));
  std::normal_distribution<double> nd(0.0, 0.3);
  for (auto& t : in.init.targets)
    for (auto& x : t.B.data) x = nd(rng);

  auto make_doc = [&](int family) {
    std::string d;
    const std::size_t len = 8 + static_cast<std::size_t>(u(rng) * 10);
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t half = family == 0 ? 0 : 3;
      std::size_t c = u(rng) < 0.8 ? half + static_cast<std::size_t>(u(rng) * 3) % 3
                                   : static_cast<std::size_t>(u(rng) * 6) % 6;
      d.push_back(alphabet[c]);
    }
    return d;
  };
  const std::size_t n = 16;
  for (std::size_t i = 0; i < n; ++i) in.docs.push_back(make_doc(static_cast<int>(i % 2)));
  HashedNgramEmbedder emb(EmbedderConfig{64, {1, 2}, 0x7072});
  in.embeddings = emb.embed_all(in.docs);
  in.prompt = make_doc(static_cast<int>(u(rng) < 0.5));
  in.prompt_embedding = emb.embed(in.prompt);

  in.probe.N = 2 + static_cast<std::size_t>(u(rng) * 3);
  in.probe.T = 1 + static_cast<std::size_t>(u(rng) * static_cast<double>(max_T)) % max_T;
  in.probe.eta = eta_t_max / static_cast<double>(in.probe.T) * (0.2 + 0.8 * u(rng));
  in.probe.seed = derive_seed(seed, 3);

  // D': one of the prompt's neighbors plus a few random documents.
  auto nn = top_n(similarities(in.prompt_embedding, in.embeddings), in.probe.N);
  in.d_prime.push_back(nn[static_cast<std::size_t>(u(rng) * static_cast<double>(nn.size())) % nn.size()]);
  const std::size_t extra = 1 + static_cast<std::size_t>(u(rng) * 4);
  for (std::size_t e = 0; e < extra; ++e) {
    std::size_t j = static_cast<std::size_t>(u(rng) * n) % n;
    if (std::find(in.d_prime.begin(), in.d_prime.end(), j) == in.d_prime.end()) in.d_prime.push_back(j);
  }
  return in;
}

inline ProbeResult run_probe_instance(const ProbeInstance& in) {
  return proposition_probe(in.probe, in.base, in.init, in.vocab, in.prompt, in.prompt_embedding, in.docs,
                           in.embeddings, in.d_prime);
}

// ---------------------------------------------------------------------------
// Method table

/// Everything a table run needs, held in memory.
struct EvalContext {
  const BaseParams<float>* base = nullptr;
  const Vocab* vocab = nullptr;
  const Embedder* embedder = nullptr;
  std::vector<LoraAdapter<float>> experts;
  std::vector<EmbeddingVector> centroids;
  std::optional<LoraAdapter<float>> global;
  std::vector<std::string> test;                       // one or more per cluster
  std::vector<std::uint32_t> test_cluster;
  std::vector<std::vector<std::string>> holdout;       // per cluster
  std::vector<std::string> train;                      // TTT retrieval corpus
  std::vector<EmbeddingVector> train_embeddings;
  const ExpertCatalog* catalog = nullptr;              // enables load timing
};

struct TableConfig {
  EvalProtocol protocol;
  RoutingConfig routing;
  std::vector<double> beta_grid{0.01, 0.02, 0.05, 0.1, 0.2, 0.5};
  bool tune_beta = true;
  std::size_t tune_docs_per_cluster = 4;
  std::size_t matrix_docs_per_cluster = 5;
  std::vector<std::size_t> fixed_n{1, 3, 10};
  std::vector<std::size_t> ensemble_n{3, 10};
  std::size_t uniform_n = 10;
  double dawin_beta = 0.1;
  std::vector<std::size_t> pass_n{1, 2, 3, 5, 10};
  TttConfig ttt;
  LoraConfig lora;
  std::vector<std::string> methods;  // empty = all
  std::vector<double> bench_taus{0.0, 0.005, 0.01, 0.02};
  std::size_t bench_repetitions = 10;
  unsigned workers = default_workers();
};

inline std::vector<std::string> all_methods(const TableConfig& cfg) {
  std::vector<std::string> m{"base", "finetune", "ttmm_tau"};
  for (auto n : cfg.fixed_n) m.push_back("ttmm_n" + std::to_string(n));
  for (auto n : cfg.ensemble_n) m.push_back("ensemble_n" + std::to_string(n));
  m.push_back("uniform_n" + std::to_string(cfg.uniform_n));
  m.push_back("sift");
  m.push_back("dawin");
  m.push_back("ttt");
  return m;
}

struct MethodResult {
  std::string method;
  double perplexity = 0;
  double mean_active = 0;      // experts with nonzero weight per prompt
  double evals_per_token = 0;  // model evaluations per scored-sequence step
  double select_ms = 0, merge_ms = 0, load_ms = 0;  // medians per prompt
  double seconds = 0;
};

struct EvalReport {
  std::vector<MethodResult> methods;
  double beta = 0;
  std::vector<std::pair<double, double>> beta_grid;  // (beta, holdout perplexity)
  Matrix<double> expert_cluster;
  double diagonal_fraction = 0;
  std::vector<std::size_t> pass_n;
  std::vector<double> pass_at;
  std::vector<BenchRow> latency;
  nlohmann::json config = nlohmann::json::object();
  double seconds = 0;

  const MethodResult* find(std::string_view name) const {
    for (const auto& m : methods)
      if (m.method == name) return &m;
    return nullptr;
  }
  double ppl(std::string_view name) const {
    auto* m = find(name);
    if (!m) throw Error("evalbl", "method '" + std::string(name) + "' not in report");
    return m->perplexity;
  }
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double ms_since(Clock::time_point t) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t).count();
}

struct PromptScore {
  NllSum nll;
  double active = 0, select_ms = 0, merge_ms = 0, load_ms = 0;
  std::uint64_t evals = 0, steps = 0;
};

inline MethodResult summarize(std::string name, const std::vector<PromptScore>& s, double seconds) {
  MethodResult r;
  r.method = std::move(name);
  NllSum tot;
  std::vector<double> sel, mrg, ld;
  std::uint64_t evals = 0, steps = 0;
  for (const auto& p : s) {
    tot.nll += p.nll.nll;
    tot.count += p.nll.count;
    r.mean_active += p.active;
    sel.push_back(p.select_ms);
    mrg.push_back(p.merge_ms);
    ld.push_back(p.load_ms);
    evals += p.evals;
    steps += p.steps;
  }
  r.perplexity = perplexity_of(tot);
  r.mean_active /= static_cast<double>(s.size());
  r.evals_per_token = steps ? static_cast<double>(evals) / static_cast<double>(steps) : 0.0;
  r.select_ms = median(sel);
  r.merge_ms = median(mrg);
  r.load_ms = median(ld);
  r.seconds = seconds;
  return r;
}

}  // namespace detail

/// Perplexity of merged TTMM with the given routing on a document set.
inline double merged_perplexity(const EvalContext& ctx, const AdapterMap& adapters, std::span<const std::string> docs,
                                const RoutingConfig& routing, const EvalProtocol& protocol) {
  NllSum tot;
  for (const auto& d : docs) {
    auto q = ctx.embedder->embed(std::string_view(d).substr(0, protocol.query_prefix_len));
    auto w = route(q, ctx.centroids, routing);
    auto merged = merge_adapters(w, adapters);
    auto r = sequence_nll(materialize(*ctx.base, merged), ctx.vocab->encode_document(d), protocol.eval_prefix_len);
    tot.nll += r.nll;
    tot.count += r.count;
  }
  return perplexity_of(tot);
}

/// Grid search of beta for tau-mode merging on holdout perplexity. Ties keep
/// the earlier grid value.
inline std::pair<double, std::vector<std::pair<double, double>>> tune_beta(const EvalContext& ctx,
                                                                          const AdapterMap& adapters,
                                                                          const TableConfig& cfg) {
  std::vector<std::string> docs;
  for (const auto& h : ctx.holdout)
    for (std::size_t i = 0; i < std::min(h.size(), cfg.tune_docs_per_cluster); ++i) docs.push_back(h[i]);
  if (docs.empty()) throw Error("evalbl", "beta tuning needs holdout documents");
  std::vector<std::pair<double, double>> grid;
  double best = cfg.routing.beta, best_ppl = std::numeric_limits<double>::infinity();
  for (double beta : cfg.beta_grid) {
    RoutingConfig rc = cfg.routing;
    rc.beta = beta;
    rc.fixed_n.reset();
    rc.weighting = Weighting::cross_attention;
    const double p = merged_perplexity(ctx, adapters, docs, rc, cfg.protocol);
    grid.emplace_back(beta, p);
    if (p < best_ppl) best_ppl = p, best = beta;
  }
  return {best, grid};
}

/// Fills the method table on the context's test set, plus the expert x
/// cluster matrix, pass@N on holdout documents and a latency sweep when a
/// catalog is attached.
inline EvalReport run_table1(const EvalContext& ctx, const TableConfig& cfg_in, nlohmann::json config_echo = {}) {
  using detail::Clock;
  const auto t_start = Clock::now();
  if (!ctx.base || !ctx.vocab || !ctx.embedder) throw Error("evalbl", "context is missing base, vocab or embedder");
  if (ctx.experts.empty() || ctx.experts.size() != ctx.centroids.size())
    throw Error("evalbl", "context needs one centroid per expert");
  if (ctx.test.empty()) throw Error("evalbl", "empty test set");
  TableConfig cfg = cfg_in;
  cfg.protocol.validate();
  cfg.protocol.check_documents(ctx.test);
  const std::size_t K = ctx.experts.size();
  const auto methods = cfg.methods.empty() ? all_methods(cfg) : cfg.methods;
  const auto& base = *ctx.base;
  const auto& vocab = *ctx.vocab;

  AdapterMap adapters;
  for (std::size_t k = 0; k < K; ++k) adapters.emplace(static_cast<ExpertId>(k), ctx.experts[k]);

  EvalReport rep;
  rep.config = std::move(config_echo);
  rep.beta = cfg.routing.beta;
  bool has_holdout = !ctx.holdout.empty();
  for (const auto& h : ctx.holdout) has_holdout = has_holdout && !h.empty();
  if (cfg.tune_beta && has_holdout) {
    auto [b, grid] = tune_beta(ctx, adapters, cfg);
    rep.beta = b;
    rep.beta_grid = std::move(grid);
  }
  cfg.routing.beta = rep.beta;

  std::vector<EmbeddingVector> queries;
  std::vector<std::vector<int>> seqs;
  for (const auto& d : ctx.test) {
    queries.push_back(ctx.embedder->embed(std::string_view(d).substr(0, cfg.protocol.query_prefix_len)));
    seqs.push_back(vocab.encode_document(d));
  }
  const std::size_t P = cfg.protocol.eval_prefix_len;

  std::vector<DenseWeights> expert_weights;
  auto ensure_expert_weights = [&] {
    if (!expert_weights.empty()) return;
    for (const auto& a : ctx.experts) expert_weights.push_back(materialize(base, &a));
  };

  // Single-model scoring with instrumented counts.
  auto score_single = [&](const DenseWeights& w, std::size_t i) {
    detail::PromptScore s;
    const auto before = model_evaluations();
    s.nll = sequence_nll(w, seqs[i], P);
    s.evals = model_evaluations() - before;
    s.steps = seqs[i].size() - 1;
    return s;
  };

  auto run_merged = [&](const std::function<MergeWeights(std::size_t)>& weigh) {
    std::vector<detail::PromptScore> out(ctx.test.size());
    for (std::size_t i = 0; i < ctx.test.size(); ++i) {
      auto t0 = Clock::now();
      auto w = weigh(i);
      const double sel = detail::ms_since(t0);
      double load = 0;
      if (ctx.catalog) {
        auto t1 = Clock::now();
        (void)load_active(*ctx.catalog, w);
        load = detail::ms_since(t1);
      }
      auto t2 = Clock::now();
      auto merged = merge_adapters(w, adapters);
      const double mrg = detail::ms_since(t2);
      out[i] = score_single(materialize(base, merged), i);
      out[i].active = static_cast<double>(w.size());
      out[i].select_ms = sel;
      out[i].load_ms = load;
      out[i].merge_ms = mrg;
    }
    return out;
  };

  for (const auto& m : methods) {
    const auto t0 = Clock::now();
    std::vector<detail::PromptScore> scores(ctx.test.size());
    if (m == "base") {
      auto w = materialize(base);
      for (std::size_t i = 0; i < seqs.size(); ++i) scores[i] = score_single(w, i);
    } else if (m == "finetune") {
      if (!ctx.global) throw Error("evalbl", "finetune requested but no global adapter in context");
      auto w = materialize(base, &*ctx.global);
      for (std::size_t i = 0; i < seqs.size(); ++i) scores[i] = score_single(w, i);
    } else if (m == "ttmm_tau") {
      RoutingConfig rc = cfg.routing;
      rc.fixed_n.reset();
      rc.weighting = Weighting::cross_attention;
      scores = run_merged([&](std::size_t i) { return route(queries[i], ctx.centroids, rc); });
    } else if (m.rfind("ttmm_n", 0) == 0) {
      const std::size_t n = std::min<std::size_t>(std::stoul(m.substr(6)), K);
      scores = run_merged([&](std::size_t i) { return route_fixed_n(queries[i], ctx.centroids, n, cfg.routing.beta); });
    } else if (m.rfind("uniform_n", 0) == 0) {
      const std::size_t n = std::min<std::size_t>(std::stoul(m.substr(9)), K);
      scores = run_merged([&](std::size_t i) { return weights_uniform_topn(queries[i], ctx.centroids, n); });
    } else if (m == "sift") {
      SiftConfig sc = cfg.routing.sift;
      sc.n_candidates = std::min(sc.n_candidates, K);
      scores = run_merged([&](std::size_t i) { return weights_sift(queries[i], ctx.centroids, sc); });
    } else if (m == "dawin") {
      scores = run_merged([&](std::size_t i) {
        return weights_dawin(std::string_view(ctx.test[i]).substr(0, cfg.protocol.query_prefix_len), base,
                             std::span<const LoraAdapter<float>>(ctx.experts), vocab, cfg.dawin_beta,
                             cfg.routing.tau);
      });
    } else if (m.rfind("ensemble_n", 0) == 0) {
      const std::size_t n = std::min<std::size_t>(std::stoul(m.substr(10)), K);
      ensure_expert_weights();
      for (std::size_t i = 0; i < seqs.size(); ++i) {
        auto ts = Clock::now();
        auto w = route_fixed_n(queries[i], ctx.centroids, n, cfg.routing.beta);
        scores[i].select_ms = detail::ms_since(ts);
        std::vector<std::pair<double, const DenseWeights*>> ex;
        for (const auto& [id, wk] : w.entries) ex.emplace_back(wk, &expert_weights[id]);
        const auto before = model_evaluations();
        scores[i].nll = ensemble_sequence_nll(ex, seqs[i], P);
        scores[i].evals = model_evaluations() - before;
        scores[i].steps = seqs[i].size() - 1;
        scores[i].active = static_cast<double>(w.size());
      }
    } else if (m == "ttt") {
      if (ctx.train.empty()) throw Error("evalbl", "ttt requested but no retrieval corpus in context");
      TttConfig tc = cfg.ttt;
      tc.neighbors = std::min(tc.neighbors, ctx.train.size());
      std::vector<LoraAdapter<float>> tuned(seqs.size());
      std::vector<double> train_ms(seqs.size());
      parallel_for(
          seqs.size(),
          [&](std::size_t i) {
            TttConfig c = tc;
            c.train.seed = derive_seed(tc.train.seed, 0x7770000 + i);
            auto ts = Clock::now();
            tuned[i] = ttt_adapt(base, vocab, queries[i], ctx.train_embeddings, ctx.train, c, cfg.lora);
            train_ms[i] = detail::ms_since(ts);
          },
          cfg.workers);
      // Scored serially so the evaluation counter is not shared across threads.
      for (std::size_t i = 0; i < seqs.size(); ++i) {
        scores[i] = score_single(materialize(base, &tuned[i]), i);
        scores[i].merge_ms = train_ms[i];
      }
    } else {
      throw Error("evalbl", "unknown method '" + m + "'");
    }
    rep.methods.push_back(detail::summarize(m, scores, std::chrono::duration<double>(Clock::now() - t0).count()));
  }

  if (has_holdout && ctx.holdout.size() == K) {
    std::vector<std::vector<std::string>> hsub;
    std::vector<EmbeddingVector> samples;
    std::vector<std::uint32_t> labels;
    for (std::size_t j = 0; j < K; ++j) {
      const auto& h = ctx.holdout[j];
      hsub.emplace_back(h.begin(), h.begin() + static_cast<std::ptrdiff_t>(std::min(h.size(), cfg.matrix_docs_per_cluster)));
      for (const auto& d : h) {
        samples.push_back(ctx.embedder->embed(std::string_view(d).substr(0, cfg.protocol.query_prefix_len)));
        labels.push_back(static_cast<std::uint32_t>(j));
      }
    }
    rep.expert_cluster = expert_cluster_matrix(base, ctx.experts, vocab, hsub, P, cfg.workers);
    rep.diagonal_fraction = diagonal_row_min_fraction(rep.expert_cluster);
    for (auto n : cfg.pass_n)
      if (n >= 1 && n <= K) rep.pass_n.push_back(n);
    if (rep.pass_n.empty() || rep.pass_n.back() != K) rep.pass_n.push_back(K);
    rep.pass_at = pass_at_n(ctx.centroids, samples, labels, rep.pass_n);
  }

  if (ctx.catalog && cfg.bench_repetitions > 0) {
    std::vector<double> betas{rep.beta};
    rep.latency = bench_sweep(*ctx.catalog, queries, cfg.bench_taus, betas, cfg.bench_repetitions);
  }
  rep.seconds = std::chrono::duration<double>(Clock::now() - t_start).count();
  return rep;
}

// ---------------------------------------------------------------------------
// Report output

inline nlohmann::json bench_to_json(std::span<const BenchRow> rows) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows)
    j.push_back({{"tau", r.tau},
                 {"beta", r.beta},
                 {"repetitions", r.repetitions},
                 {"mean_active", r.mean_active},
                 {"mean_bytes_loaded", r.mean_bytes_loaded},
                 {"select_ms", r.select_ms},
                 {"load_ms", r.load_ms},
                 {"merge_ms", r.merge_ms}});
  return j;
}

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json methods = nlohmann::json::array();
  for (const auto& m : r.methods)
    methods.push_back({{"method", m.method},
                       {"perplexity", m.perplexity},
                       {"mean_active", m.mean_active},
                       {"evals_per_token", m.evals_per_token},
                       {"select_ms", m.select_ms},
                       {"load_ms", m.load_ms},
                       {"merge_ms", m.merge_ms},
                       {"seconds", m.seconds}});
  nlohmann::json grid = nlohmann::json::array();
  for (const auto& [b, p] : r.beta_grid) grid.push_back({{"beta", b}, {"perplexity", p}});
  nlohmann::json matrix = nlohmann::json::array();
  for (std::size_t k = 0; k < r.expert_cluster.rows; ++k) {
    auto row = r.expert_cluster.row(k);
    matrix.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return {{"methods", methods},
          {"beta", r.beta},
          {"beta_grid", grid},
          {"expert_cluster_matrix", matrix},
          {"diagonal_row_min_fraction", r.diagonal_fraction},
          {"pass_at", {{"n", r.pass_n}, {"accuracy", r.pass_at}}},
          {"latency", bench_to_json(r.latency)},
          {"seconds", r.seconds},
          {"config", r.config}};
}

/// Long-format table: table,row,column,value.
inline std::string report_to_csv(const EvalReport& r) {
  std::ostringstream os;
  os.precision(10);
  os << "table,row,column,value\n";
  for (const auto& m : r.methods) {
    os << "method," << m.method << ",perplexity," << m.perplexity << "\n";
    os << "method," << m.method << ",mean_active," << m.mean_active << "\n";
    os << "method," << m.method << ",evals_per_token," << m.evals_per_token << "\n";
    os << "method," << m.method << ",select_ms," << m.select_ms << "\n";
    os << "method," << m.method << ",load_ms," << m.load_ms << "\n";
    os << "method," << m.method << ",merge_ms," << m.merge_ms << "\n";
  }
  for (const auto& [b, p] : r.beta_grid) os << "beta_grid," << b << ",perplexity," << p << "\n";
  for (std::size_t k = 0; k < r.expert_cluster.rows; ++k)
    for (std::size_t j = 0; j < r.expert_cluster.cols; ++j)
      os << "expert_cluster," << k << "," << j << "," << r.expert_cluster(k, j) << "\n";
  for (std::size_t i = 0; i < r.pass_n.size(); ++i) os << "pass_at," << r.pass_n[i] << ",accuracy," << r.pass_at[i] << "\n";
  for (const auto& b : r.latency) {
    const std::string key = "tau=" + std::to_string(b.tau) + ";beta=" + std::to_string(b.beta);
    os << "latency," << key << ",mean_active," << b.mean_active << "\n";
    os << "latency," << key << ",select_ms," << b.select_ms << "\n";
    os << "latency," << key << ",load_ms," << b.load_ms << "\n";
    os << "latency," << key << ",merge_ms," << b.merge_ms << "\n";
  }
  return os.str();
}

inline void write_report(const EvalReport& r, const fs::path& dir) {
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "report.json", std::ios::trunc);
    if (!out) throw Error("evalbl", "cannot write " + (dir / "report.json").string());
    out << report_to_json(r).dump(2) << "\n";
  }
  std::ofstream out(dir / "report.csv", std::ios::trunc);
  if (!out) throw Error("evalbl", "cannot write " + (dir / "report.csv").string());
  out << report_to_csv(r);
}

// ---------------------------------------------------------------------------
// Cluster titles

/// Most frequent character n-grams of each cluster, as a cheap label.
inline std::vector<std::vector<std::string>> cluster_titles(std::span<const std::string> docs,
                                                            const ClusterAssignment& a, std::size_t order = 4,
                                                            std::size_t top = 3) {
  a.validate(docs.size());
  std::vector<std::vector<std::string>> out;
  for (const auto& m : a.members()) {
    std::map<std::string, std::size_t> counts;
    for (auto i : m)
      for (std::size_t p = 0; p + order <= docs[i].size(); ++p) ++counts[docs[i].substr(p, order)];
    std::vector<std::pair<std::string, std::size_t>> v(counts.begin(), counts.end());
    std::stable_sort(v.begin(), v.end(), [](const auto& x, const auto& y) { return x.second > y.second; });
    std::vector<std::string> t;
    for (std::size_t i = 0; i < std::min(top, v.size()); ++i) t.push_back(v[i].first);
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace ttmm
