#pragma once

// Merging coefficients from a prompt embedding: sparse softmax over scaled
// centroid similarities (the default cross-attention routing), its batched
// form, fixed-N and uniform top-N selection, SIFT redundancy-aware weights
// and DaWin logit-entropy weights.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ttmm/common.hpp"
#include "ttmm/embed.hpp"
#include "ttmm/lm.hpp"

namespace ttmm {

/// Sparse convex combination over experts. Entries are sorted by expert id,
/// every weight is > 0 and the weights sum to one.
struct MergeWeights {
  std::vector<std::pair<ExpertId, double>> entries;

  std::size_t size() const noexcept { return entries.size(); }
  double weight(ExpertId id) const {
    for (const auto& [k, w] : entries)
      if (k == id) return w;
    return 0.0;
  }
  std::vector<ExpertId> support() const {
    std::vector<ExpertId> s;
    for (const auto& e : entries) s.push_back(e.first);
    return s;
  }
  double total() const {
    double s = 0.0;
    for (const auto& e : entries) s += e.second;
    return s;
  }
  /// Expert with the largest weight; lower id on ties.
  ExpertId argmax() const {
    ExpertId best = entries.front().first;
    double bw = -1.0;
    for (const auto& [k, w] : entries)
      if (w > bw) {
        bw = w;
        best = k;
      }
    return best;
  }
  static MergeWeights one_hot(ExpertId id) { return MergeWeights{{{id, 1.0}}}; }

  friend bool operator==(const MergeWeights&, const MergeWeights&) = default;
};

enum class Weighting { cross_attention, uniform_topn, sift, dawin };

inline const char* to_string(Weighting w) {
  switch (w) {
    case Weighting::cross_attention: return "cross_attention";
    case Weighting::uniform_topn: return "uniform_topn";
    case Weighting::sift: return "sift";
    case Weighting::dawin: return "dawin";
  }
  return "?";
}

inline Weighting weighting_from_string(std::string_view s) {
  if (s == "cross_attention") return Weighting::cross_attention;
  if (s == "uniform_topn") return Weighting::uniform_topn;
  if (s == "sift") return Weighting::sift;
  if (s == "dawin") return Weighting::dawin;
  throw Error("router", "unknown weighting '" + std::string(s) + "'");
}

struct SiftConfig {
  double lambda = 0.01;
  std::size_t n_candidates = 10;
};

struct RoutingConfig {
  double beta = 0.05;
  double tau = 0.01;
  std::optional<std::size_t> fixed_n;
  Weighting weighting = Weighting::cross_attention;
  SiftConfig sift;
};

inline std::vector<double> softmax(std::span<const double> z) {
  std::vector<double> p(z.begin(), z.end());
  softmax_inplace(p);
  return p;
}

/// softmax followed by relu(p - tau) and renormalization. For tau < 1/K the
/// largest probability is >= 1/K > tau, so at least one expert survives.
inline MergeWeights sparse_softmax(std::span<const double> z, double tau) {
  const std::size_t K = z.size();
  if (K == 0) throw Error("router", "no experts to route over");
  if (!(tau >= 0.0)) throw Error("router", "tau must be >= 0");
  if (tau >= 1.0 / static_cast<double>(K)) throw Error("router", "tau too large for K");
  auto p = softmax(z);
  MergeWeights w;
  double s = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    double r = p[k] - tau;
    if (r > 0.0) {
      w.entries.emplace_back(static_cast<ExpertId>(k), r);
      s += r;
    }
  }
  for (auto& e : w.entries) e.second /= s;
  return w;
}

inline void check_query(const EmbeddingVector& q, std::span<const EmbeddingVector> centroids) {
  if (centroids.empty()) throw Error("router", "empty catalog");
  if (q.dim() != centroids.front().dim()) throw Error("router", "query dim does not match catalog");
}

/// Cosine similarity of the query to every centroid.
inline std::vector<double> similarities(const EmbeddingVector& q, std::span<const EmbeddingVector> centroids) {
  std::vector<double> s(centroids.size());
  for (std::size_t k = 0; k < centroids.size(); ++k) s[k] = cosine(centroids[k], q);
  return s;
}

/// Sparse cross-attention routing: w = ssoftmax_tau(cos(phi_k, phi*) / beta).
inline MergeWeights route(const EmbeddingVector& query, std::span<const EmbeddingVector> centroids, double beta,
                          double tau) {
  check_query(query, centroids);
  if (!(beta > 0)) throw Error("router", "beta must be positive");
  auto z = similarities(query, centroids);
  for (double& x : z) x /= beta;
  return sparse_softmax(z, tau);
}

/// Indices of the n most similar centroids; ties go to the lower id.
inline std::vector<std::size_t> top_n(std::span<const double> sims, std::size_t n) {
  std::vector<std::size_t> idx(sims.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return sims[a] > sims[b]; });
  idx.resize(n);
  return idx;
}

/// Softmax at temperature beta restricted to the n nearest centroids.
inline MergeWeights route_fixed_n(const EmbeddingVector& query, std::span<const EmbeddingVector> centroids,
                                  std::size_t n, double beta) {
  check_query(query, centroids);
  if (n < 1 || n > centroids.size()) throw Error("router", "fixed_n out of range");
  if (!(beta > 0)) throw Error("router", "beta must be positive");
  auto sims = similarities(query, centroids);
  auto sel = top_n(sims, n);
  std::sort(sel.begin(), sel.end());
  std::vector<double> z;
  for (auto k : sel) z.push_back(sims[k] / beta);
  auto p = softmax(z);
  MergeWeights w;
  for (std::size_t i = 0; i < sel.size(); ++i)
    if (p[i] > 0.0) w.entries.emplace_back(static_cast<ExpertId>(sel[i]), p[i]);
  return w;
}

/// Equal weights on the n nearest centroids.
inline MergeWeights weights_uniform_topn(const EmbeddingVector& query, std::span<const EmbeddingVector> centroids,
                                         std::size_t n) {
  check_query(query, centroids);
  if (n < 1 || n > centroids.size()) throw Error("router", "n out of range");
  auto sel = top_n(similarities(query, centroids), n);
  std::sort(sel.begin(), sel.end());
  MergeWeights w;
  for (auto k : sel) w.entries.emplace_back(static_cast<ExpertId>(k), 1.0 / static_cast<double>(n));
  return w;
}

/// Redundancy-aware weights. The N nearest centroids c_1..c_N (most similar
/// first) are conditioned on one at a time under a linear kernel
/// k(a, b) = a^T b with observation noise lambda:
///
///   sigma_i^2 = 1 - k_i^T (K_i + lambda I)^{-1} k_i
///
/// where K_i is the Gram matrix of c_1..c_i and k_i their similarities to the
/// query (sigma_0^2 = k(q, q) = 1 for unit vectors). Expert i receives the
/// variance it removes, sigma_{i-1}^2 - sigma_i^2, normalized by the total
/// reduction sigma_0^2 - sigma_N^2. A duplicated centroid removes almost
/// nothing once its twin is in the set, so duplicates share one weight.
inline MergeWeights weights_sift(const EmbeddingVector& query, std::span<const EmbeddingVector> centroids,
                                 const SiftConfig& cfg) {
  check_query(query, centroids);
  if (!(cfg.lambda > 0)) throw Error("router", "SIFT lambda must be positive");
  if (cfg.n_candidates < 1 || cfg.n_candidates > centroids.size())
    throw Error("router", "SIFT n_candidates out of range");
  auto sims = similarities(query, centroids);
  auto sel = top_n(sims, cfg.n_candidates);
  const std::size_t N = sel.size();

  // Incremental Cholesky of (K + lambda I); z = L^{-1} k so k^T (..)^{-1} k = |z|^2.
  std::vector<double> L(N * N, 0.0), zvec(N, 0.0), sigma2(N + 1, 1.0);
  double explained = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    const auto& ci = centroids[sel[i]];
    for (std::size_t j = 0; j < i; ++j) {
      double s = cosine(ci, centroids[sel[j]]);
      for (std::size_t m = 0; m < j; ++m) s -= L[i * N + m] * L[j * N + m];
      L[i * N + j] = s / L[j * N + j];
    }
    double d = cosine(ci, ci) + cfg.lambda;
    for (std::size_t m = 0; m < i; ++m) d -= L[i * N + m] * L[i * N + m];
    L[i * N + i] = std::sqrt(std::max(d, 1e-300));
    double s = sims[sel[i]];
    for (std::size_t m = 0; m < i; ++m) s -= L[i * N + m] * zvec[m];
    zvec[i] = s / L[i * N + i];
    explained += zvec[i] * zvec[i];
    sigma2[i + 1] = 1.0 - explained;
  }
  const double total = sigma2[0] - sigma2[N];
  if (!(total > 0.0)) throw Error("router", "no uncertainty reduction");
  std::vector<std::pair<ExpertId, double>> raw;
  for (std::size_t i = 0; i < N; ++i) {
    double w = (sigma2[i] - sigma2[i + 1]) / total;
    if (w > 0.0) raw.emplace_back(static_cast<ExpertId>(sel[i]), w);
  }
  std::sort(raw.begin(), raw.end());
  MergeWeights out{std::move(raw)};
  // zvec^2 terms are the decrements exactly; renormalize for rounding.
  const double s = out.total();
  for (auto& e : out.entries) e.second /= s;
  return out;
}

/// Next-token entropy of each expert at the final prompt position, one
/// forward pass per expert.
template <class Real>
std::vector<double> expert_entropies(const BaseParams<Real>& base, std::span<const LoraAdapter<Real>> adapters,
                                     const Vocab& vocab, std::string_view prompt) {
  std::vector<double> h(adapters.size());
  auto toks = vocab.encode_prefix(prompt);
  for (std::size_t k = 0; k < adapters.size(); ++k) h[k] = entropy(forward(materialize(base, &adapters[k]), toks));
  return h;
}

/// DaWin weighting: ssoftmax_tau(-H(p_k(prompt)) / beta). Costs K forward passes.
template <class Real>
MergeWeights weights_dawin(std::string_view prompt, const BaseParams<Real>& base,
                           std::span<const LoraAdapter<Real>> adapters, const Vocab& vocab, double beta,
                           double tau) {
  if (adapters.empty()) throw Error("router", "empty catalog");
  if (!(beta > 0)) throw Error("router", "beta must be positive");
  auto h = expert_entropies(base, adapters, vocab, prompt);
  for (double& x : h) x = -x / beta;
  return sparse_softmax(h, tau);
}

/// Dispatch on cfg for the embedding-only weightings.
inline MergeWeights route(const EmbeddingVector& query, std::span<const EmbeddingVector> centroids,
                          const RoutingConfig& cfg) {
  switch (cfg.weighting) {
    case Weighting::cross_attention:
      if (cfg.fixed_n) return route_fixed_n(query, centroids, *cfg.fixed_n, cfg.beta);
      return route(query, centroids, cfg.beta, cfg.tau);
    case Weighting::uniform_topn:
      return weights_uniform_topn(query, centroids, cfg.fixed_n.value_or(1));
    case Weighting::sift:
      return weights_sift(query, centroids, cfg.sift);
    case Weighting::dawin:
      throw Error("router", "dawin weighting needs the expert models; use weights_dawin");
  }
  throw Error("router", "unknown weighting");
}

/// Batched cross-attention: row i of ssoftmax_tau(Q C^T / beta). Each row is
/// computed with the same reductions as `route`, so rows match it exactly.
inline std::vector<MergeWeights> route_batch(std::span<const EmbeddingVector> queries,
                                             std::span<const EmbeddingVector> centroids, const RoutingConfig& cfg) {
  std::vector<MergeWeights> out;
  out.reserve(queries.size());
  if (cfg.weighting != Weighting::cross_attention || cfg.fixed_n) {
    for (const auto& q : queries) out.push_back(route(q, centroids, cfg));
    return out;
  }
  if (!(cfg.beta > 0)) throw Error("router", "beta must be positive");
  const std::size_t K = centroids.size();
  std::vector<double> scores(queries.size() * K);
  for (std::size_t i = 0; i < queries.size(); ++i) {
    check_query(queries[i], centroids);
    for (std::size_t k = 0; k < K; ++k) scores[i * K + k] = cosine(centroids[k], queries[i]) / cfg.beta;
  }
  for (std::size_t i = 0; i < queries.size(); ++i)
    out.push_back(sparse_softmax(std::span<const double>(scores).subspan(i * K, K), cfg.tau));
  return out;
}

}  // namespace ttmm
