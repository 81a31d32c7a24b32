#pragma once

// Training-free sequence embedder: signed-hash character n-grams, mean pooled
// and L2 normalized. Stands in for a learned sentence encoder; anything that
// implements `Embedder` can be plugged into clustering and routing instead.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ttmm/common.hpp"

namespace ttmm {

struct EmbedderConfig {
  std::size_t dim = 256;
  std::vector<std::size_t> ngram_orders{2, 3, 4};
  std::uint64_t hash_seed = 0x7474'6d6d;

  void validate() const {
    if (dim < 8) throw Error("embed", "embedding dim must be >= 8");
    if (ngram_orders.empty()) throw Error("embed", "ngram_orders must be non-empty");
    for (auto n : ngram_orders)
      if (n < 1) throw Error("embed", "ngram order must be >= 1");
  }
};

/// Dense unit-norm vector. Embedders never return the zero vector.
struct EmbeddingVector {
  std::vector<float> values;

  EmbeddingVector() = default;
  explicit EmbeddingVector(std::vector<float> v) : values(std::move(v)) {}

  std::size_t dim() const noexcept { return values.size(); }
  std::span<const float> span() const noexcept { return values; }
  float operator[](std::size_t i) const { return values[i]; }

  friend bool operator==(const EmbeddingVector&, const EmbeddingVector&) = default;
};

inline double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

inline double l2_norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

inline double squared_distance(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s;
}

/// Cosine similarity; 0 if either vector is zero. Symmetric bit-for-bit.
inline double cosine(const EmbeddingVector& a, const EmbeddingVector& b) {
  if (a.dim() != b.dim()) throw Error("embed", "cosine of vectors with different dims");
  // Stored vectors are unit norm only up to float rounding; divide it out.
  const double na = dot(a.span(), a.span()), nb = dot(b.span(), b.span());
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a.span(), b.span()) / std::sqrt(na * nb);
}

/// Returns v / ||v|| or throws if v is zero.
inline EmbeddingVector normalized(std::span<const double> v, const char* module, const std::string& what) {
  double ss = 0.0;
  for (double x : v) ss += x * x;
  if (!(ss > 0.0)) throw Error(module, what);
  double inv = 1.0 / std::sqrt(ss);
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] * inv);
  return EmbeddingVector(std::move(out));
}

/// Hash of one n-gram. Bucket is `h % dim`; sign is bit 32 of `h`.
inline std::uint64_t ngram_hash(std::uint64_t seed, std::string_view gram) noexcept {
  std::uint64_t h = fnv1a(gram.data(), gram.size(), kFnvOffset ^ mix64(seed));
  return mix64(h);
}

struct HashedGram {
  std::size_t bucket;
  int sign;
};

inline HashedGram hash_gram(const EmbedderConfig& cfg, std::string_view gram) noexcept {
  std::uint64_t h = ngram_hash(cfg.hash_seed, gram);
  return {static_cast<std::size_t>(h % cfg.dim), ((h >> 32) & 1u) ? 1 : -1};
}

inline EmbeddingVector embed(const EmbedderConfig& cfg, std::string_view text) {
  if (text.empty()) throw Error("embed", "empty sequence");
  std::vector<double> acc(cfg.dim, 0.0);
  std::size_t count = 0;
  for (std::size_t n : cfg.ngram_orders) {
    if (n > text.size()) continue;
    for (std::size_t i = 0; i + n <= text.size(); ++i) {
      auto g = hash_gram(cfg, text.substr(i, n));
      acc[g.bucket] += g.sign;
      ++count;
    }
  }
  if (count > 0)
    for (double& x : acc) x /= static_cast<double>(count);
  return normalized(acc, "embed", "degenerate embedding");
}

/// Pluggable sequence embedder.
class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual EmbeddingVector embed(std::string_view text) const = 0;
  virtual std::size_t dim() const = 0;
  /// Stable identifier of the embedder and its configuration; stored in
  /// catalogs so routing refuses a mismatched embedder.
  virtual std::string fingerprint() const = 0;

  std::vector<EmbeddingVector> embed_all(std::span<const std::string> texts) const {
    std::vector<EmbeddingVector> out(texts.size());
    for (std::size_t i = 0; i < texts.size(); ++i) out[i] = embed(texts[i]);
    return out;
  }
};

class HashedNgramEmbedder final : public Embedder {
 public:
  explicit HashedNgramEmbedder(EmbedderConfig cfg = {}) : cfg_(std::move(cfg)) { cfg_.validate(); }

  EmbeddingVector embed(std::string_view text) const override { return ttmm::embed(cfg_, text); }
  std::size_t dim() const override { return cfg_.dim; }
  std::string fingerprint() const override {
    std::string s = "hashed-ngram/dim=" + std::to_string(cfg_.dim) + "/orders=";
    for (std::size_t i = 0; i < cfg_.ngram_orders.size(); ++i) {
      if (i) s += ',';
      s += std::to_string(cfg_.ngram_orders[i]);
    }
    s += "/seed=" + std::to_string(cfg_.hash_seed);
    return s;
  }
  const EmbedderConfig& config() const noexcept { return cfg_; }

 private:
  EmbedderConfig cfg_;
};

}  // namespace ttmm
