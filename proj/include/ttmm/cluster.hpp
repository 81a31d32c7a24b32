#pragma once

// Bisecting k-means over unit-norm embeddings plus the cluster statistics
// used by routing (renormalized centroids) and diagnostics (loss, diameter).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ttmm/common.hpp"
#include "ttmm/embed.hpp"

namespace ttmm {

struct ClusterAssignment {
  std::vector<std::uint32_t> labels;  // document index -> cluster id
  std::size_t k = 0;

  std::vector<std::vector<std::size_t>> members() const {
    std::vector<std::vector<std::size_t>> out(k);
    for (std::size_t i = 0; i < labels.size(); ++i) out[labels[i]].push_back(i);
    return out;
  }

  void validate(std::size_t n_docs) const {
    if (labels.size() != n_docs) throw Error("cluster", "assignment size does not match corpus size");
    std::vector<std::size_t> counts(k, 0);
    for (auto l : labels) {
      if (l >= k) throw Error("cluster", "cluster id out of range");
      ++counts[l];
    }
    for (std::size_t c = 0; c < k; ++c)
      if (counts[c] == 0) throw Error("cluster", "cluster " + std::to_string(c) + " is empty");
  }
};

struct CentroidSet {
  std::vector<EmbeddingVector> centroids;
  std::vector<std::size_t> sizes;
};

struct BisectingOptions {
  std::size_t exact_diameter_cap = 512;
  std::size_t max_iterations = 25;
};

namespace detail {

using Point = std::span<const float>;

inline std::vector<double> mean_of(std::span<const EmbeddingVector> pts, std::span<const std::size_t> idx) {
  std::vector<double> m(pts[idx[0]].dim(), 0.0);
  for (auto i : idx) {
    const auto& v = pts[i].values;
    for (std::size_t d = 0; d < m.size(); ++d) m[d] += v[d];
  }
  for (double& x : m) x /= static_cast<double>(idx.size());
  return m;
}

inline double sq_dist_to(const EmbeddingVector& v, std::span<const double> m) {
  double s = 0.0;
  for (std::size_t d = 0; d < m.size(); ++d) {
    double t = static_cast<double>(v.values[d]) - m[d];
    s += t * t;
  }
  return s;
}

inline double sse(std::span<const EmbeddingVector> pts, std::span<const std::size_t> idx) {
  if (idx.empty()) return 0.0;
  auto m = mean_of(pts, idx);
  double s = 0.0;
  for (auto i : idx) s += sq_dist_to(pts[i], m);
  return s;
}

inline double exact_diameter(std::span<const EmbeddingVector> pts, std::span<const std::size_t> idx) {
  double best = 0.0;
  for (std::size_t a = 0; a < idx.size(); ++a)
    for (std::size_t b = a + 1; b < idx.size(); ++b)
      best = std::max(best, squared_distance(pts[idx[a]].span(), pts[idx[b]].span()));
  return std::sqrt(best);
}

// Diameter used for split selection: exact up to the cap, otherwise twice the
// largest distance to the cluster mean (an upper bound on the diameter).
inline double split_diameter(std::span<const EmbeddingVector> pts, std::span<const std::size_t> idx,
                             std::size_t cap) {
  if (idx.size() <= 1) return 0.0;
  if (idx.size() <= cap) return exact_diameter(pts, idx);
  auto m = mean_of(pts, idx);
  double best = 0.0;
  for (auto i : idx) best = std::max(best, sq_dist_to(pts[i], m));
  return 2.0 * std::sqrt(best);
}

struct Split {
  std::vector<std::size_t> left, right;
  double loss = std::numeric_limits<double>::infinity();
};

inline std::size_t farthest_from(std::span<const EmbeddingVector> pts, std::span<const std::size_t> idx,
                                 std::size_t from) {
  std::size_t best = idx[0];
  double best_d = -1.0;
  for (auto i : idx) {
    double d = squared_distance(pts[i].span(), pts[from].span());
    if (d > best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

inline Split lloyd_two_means(std::span<const EmbeddingVector> pts, std::span<const std::size_t> idx,
                             std::uint64_t seed, std::size_t max_iter) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, idx.size() - 1);
  std::size_t a = idx[pick(rng)];
  std::size_t b = farthest_from(pts, idx, a);
  std::size_t c = farthest_from(pts, idx, b);
  const std::size_t dim = pts[idx[0]].dim();
  std::vector<double> c0(dim), c1(dim);
  for (std::size_t d = 0; d < dim; ++d) {
    c0[d] = pts[b].values[d];
    c1[d] = pts[c].values[d];
  }
  std::vector<std::uint8_t> side(idx.size(), 0);
  for (std::size_t it = 0; it < max_iter; ++it) {
    bool changed = it == 0;
    for (std::size_t j = 0; j < idx.size(); ++j) {
      std::uint8_t s = sq_dist_to(pts[idx[j]], c1) < sq_dist_to(pts[idx[j]], c0) ? 1 : 0;
      if (s != side[j]) {
        side[j] = s;
        changed = true;
      }
    }
    if (!changed) break;
    std::fill(c0.begin(), c0.end(), 0.0);
    std::fill(c1.begin(), c1.end(), 0.0);
    std::size_t n0 = 0, n1 = 0;
    for (std::size_t j = 0; j < idx.size(); ++j) {
      auto& cc = side[j] ? c1 : c0;
      (side[j] ? n1 : n0)++;
      for (std::size_t d = 0; d < dim; ++d) cc[d] += pts[idx[j]].values[d];
    }
    if (n0 == 0 || n1 == 0) break;
    for (std::size_t d = 0; d < dim; ++d) {
      c0[d] /= static_cast<double>(n0);
      c1[d] /= static_cast<double>(n1);
    }
  }
  Split out;
  for (std::size_t j = 0; j < idx.size(); ++j) (side[j] ? out.right : out.left).push_back(idx[j]);
  if (!out.left.empty() && !out.right.empty()) out.loss = sse(pts, out.left) + sse(pts, out.right);
  return out;
}

// Moves the point farthest from the cluster mean into its own side. Always
// produces two non-empty sides for clusters of size >= 2.
inline Split farthest_point_split(std::span<const EmbeddingVector> pts, std::span<const std::size_t> idx) {
  auto m = mean_of(pts, idx);
  std::size_t far = 0;
  double best = -1.0;
  for (std::size_t j = 0; j < idx.size(); ++j) {
    double d = sq_dist_to(pts[idx[j]], m);
    if (d > best) {
      best = d;
      far = j;
    }
  }
  Split out;
  for (std::size_t j = 0; j < idx.size(); ++j) (j == far ? out.right : out.left).push_back(idx[j]);
  out.loss = sse(pts, out.left) + sse(pts, out.right);
  return out;
}

inline Split bisect(std::span<const EmbeddingVector> pts, std::span<const std::size_t> idx, std::uint64_t seed,
                    std::size_t split_index, const BisectingOptions& opt) {
  Split best;
  for (std::uint64_t attempt = 0; attempt < 2; ++attempt) {
    Split s = lloyd_two_means(pts, idx, derive_seed(seed, split_index * 2 + attempt), opt.max_iterations);
    if (s.loss < best.loss) best = std::move(s);
  }
  // Both inits collapsed to one side: reseed once more, then fall back.
  if (!std::isfinite(best.loss)) {
    best = lloyd_two_means(pts, idx, derive_seed(seed ^ 0x5eed, split_index), opt.max_iterations);
    if (!std::isfinite(best.loss)) best = farthest_point_split(pts, idx);
  }
  return best;
}

}  // namespace detail

/// Called after every split with the current number of clusters and labels.
using SplitObserver = std::function<void(std::size_t k, const std::vector<std::uint32_t>& labels)>;

inline ClusterAssignment bisecting_kmeans(std::span<const EmbeddingVector> embeddings, std::size_t K,
                                          std::uint64_t seed, const BisectingOptions& opt = {},
                                          const SplitObserver& observer = {}) {
  const std::size_t n = embeddings.size();
  if (K < 1) throw Error("cluster", "K must be >= 1");
  if (K > n) throw Error("cluster", "K > n (K=" + std::to_string(K) + ", n=" + std::to_string(n) + ")");

  std::vector<std::vector<std::size_t>> members(1);
  members[0].resize(n);
  for (std::size_t i = 0; i < n; ++i) members[0][i] = i;
  std::vector<double> diam{detail::split_diameter(embeddings, members[0], opt.exact_diameter_cap)};
  std::vector<std::uint32_t> labels(n, 0);
  if (observer) observer(1, labels);

  for (std::size_t split = 0; members.size() < K; ++split) {
    // Largest diameter wins; lower id on ties. Clusters of identical points
    // have diameter 0 but can still be split if nothing else is available.
    std::size_t target = members.size();
    double best = -1.0;
    for (std::size_t c = 0; c < members.size(); ++c) {
      if (members[c].size() < 2) continue;
      if (diam[c] > best) {
        best = diam[c];
        target = c;
      }
    }
    auto s = detail::bisect(embeddings, members[target], seed, split, opt);
    const auto new_id = static_cast<std::uint32_t>(members.size());
    for (auto i : s.right) labels[i] = new_id;
    members[target] = std::move(s.left);
    members.push_back(std::move(s.right));
    diam[target] = detail::split_diameter(embeddings, members[target], opt.exact_diameter_cap);
    diam.push_back(detail::split_diameter(embeddings, members.back(), opt.exact_diameter_cap));
    if (observer) observer(members.size(), labels);
  }
  return ClusterAssignment{std::move(labels), K};
}

/// Sum of squared distances to the (un-normalized) mean of each cluster.
inline double kmeans_loss(std::span<const EmbeddingVector> embeddings, const ClusterAssignment& a) {
  double total = 0.0;
  for (const auto& m : a.members()) total += detail::sse(embeddings, m);
  return total;
}

inline CentroidSet compute_centroids(std::span<const EmbeddingVector> embeddings, const ClusterAssignment& a) {
  a.validate(embeddings.size());
  CentroidSet out;
  auto groups = a.members();
  for (std::size_t c = 0; c < groups.size(); ++c) {
    auto mean = detail::mean_of(embeddings, groups[c]);
    out.centroids.push_back(normalized(mean, "cluster", "degenerate centroid in cluster " + std::to_string(c)));
    out.sizes.push_back(groups[c].size());
  }
  return out;
}

/// Exact maximum pairwise Euclidean distance among members of `cluster`.
inline double cluster_diameter(std::span<const EmbeddingVector> embeddings, const ClusterAssignment& a,
                               std::uint32_t cluster) {
  if (cluster >= a.k) throw Error("cluster", "cluster id out of range");
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < a.labels.size(); ++i)
    if (a.labels[i] == cluster) idx.push_back(i);
  return detail::exact_diameter(embeddings, idx);
}

/// Diameter of an arbitrary subset of embeddings.
inline double subset_diameter(std::span<const EmbeddingVector> embeddings, std::span<const std::size_t> idx) {
  return detail::exact_diameter(embeddings, idx);
}

struct ElbowPoint {
  std::size_t k;
  double loss;
};

/// k-means loss for each K in `k_list` (ascending). A single bisecting run to
/// max(K) is sampled at each requested K, so later entries refine earlier ones.
inline std::vector<ElbowPoint> elbow_curve(std::span<const EmbeddingVector> embeddings,
                                           std::span<const std::size_t> k_list, std::uint64_t seed,
                                           const BisectingOptions& opt = {}) {
  if (k_list.empty()) return {};
  if (!std::is_sorted(k_list.begin(), k_list.end())) throw Error("cluster", "K_list must be sorted ascending");
  std::vector<ElbowPoint> out;
  std::size_t next = 0;
  auto observer = [&](std::size_t k, const std::vector<std::uint32_t>& labels) {
    while (next < k_list.size() && k_list[next] == k) {
      out.push_back({k, kmeans_loss(embeddings, ClusterAssignment{labels, k})});
      ++next;
    }
  };
  bisecting_kmeans(embeddings, k_list.back(), seed, opt, observer);
  return out;
}

}  // namespace ttmm
