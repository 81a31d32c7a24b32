#pragma once

// Character-level recurrent language model with low-rank adapters.
//
//   h_t      = tanh(E[x_t] + W_rec h_{t-1} + b_rec)
//   g_t      = tanh(W_dense h_t + b_dense)
//   logits_t = W_out g_t + b_out
//
// Parameters are stored in `Real` (float by default); every reduction runs in
// double. Adapters target any subset of {rec, dense, out} and contribute
// (alpha / r) * B * A to the targeted matrix.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ttmm/common.hpp"

namespace ttmm {

// ---------------------------------------------------------------------------
// Vocabulary

class Vocab {
 public:
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;

  Vocab() { index_.fill(-1); }

  /// Builds the symbol set from every byte occurring in `texts`.
  static Vocab from_texts(std::span<const std::string> texts) {
    std::array<bool, 256> seen{};
    for (const auto& t : texts)
      for (unsigned char c : t) seen[c] = true;
    std::string symbols;
    for (int c = 0; c < 256; ++c)
      if (seen[c]) symbols.push_back(static_cast<char>(c));
    return from_symbols(symbols);
  }

  static Vocab from_symbols(std::string_view symbols) {
    Vocab v;
    for (char c : symbols) {
      auto u = static_cast<unsigned char>(c);
      if (v.index_[u] >= 0) throw Error("lm", "duplicate vocabulary symbol");
      v.index_[u] = static_cast<int>(v.symbols_.size()) + 2;
      v.symbols_.push_back(c);
    }
    if (v.size() < 3) throw Error("lm", "vocabulary needs at least one symbol");
    return v;
  }

  std::size_t size() const noexcept { return symbols_.size() + 2; }
  const std::string& symbols() const noexcept { return symbols_; }

  int id(char c) const {
    int i = index_[static_cast<unsigned char>(c)];
    if (i < 0) throw Error("lm", std::string("out of vocabulary: '") + c + "'");
    return i;
  }
  bool contains(char c) const noexcept { return index_[static_cast<unsigned char>(c)] >= 0; }
  char symbol(int id) const { return symbols_.at(static_cast<std::size_t>(id - 2)); }

  /// BOS followed by the encoded characters (no EOS).
  std::vector<int> encode_prefix(std::string_view text) const {
    std::vector<int> out;
    out.reserve(text.size() + 1);
    out.push_back(kBos);
    for (char c : text) out.push_back(id(c));
    return out;
  }

  /// BOS, characters, EOS.
  std::vector<int> encode_document(std::string_view text) const {
    auto out = encode_prefix(text);
    out.push_back(kEos);
    return out;
  }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.symbols_ == b.symbols_; }

 private:
  std::string symbols_;
  std::array<int, 256> index_{};
};

// ---------------------------------------------------------------------------
// Parameters

template <class T>
struct Matrix {
  std::size_t rows = 0, cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), data(r * c, fill) {}

  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const T> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

template <class To, class From>
Matrix<To> matrix_cast(const Matrix<From>& m) {
  Matrix<To> out(m.rows, m.cols);
  for (std::size_t i = 0; i < m.data.size(); ++i) out.data[i] = static_cast<To>(m.data[i]);
  return out;
}

inline constexpr std::array<std::string_view, 3> kTargetNames{"rec", "dense", "out"};

template <class Real = float>
struct BaseParams {
  Matrix<Real> embed;  // V x h
  Matrix<Real> rec;    // h x h
  std::vector<Real> rec_bias;
  Matrix<Real> dense;  // h x h
  std::vector<Real> dense_bias;
  Matrix<Real> out;  // V x h
  std::vector<Real> out_bias;

  BaseParams() = default;
  BaseParams(std::size_t vocab, std::size_t hidden)
      : embed(vocab, hidden),
        rec(hidden, hidden),
        rec_bias(hidden),
        dense(hidden, hidden),
        dense_bias(hidden),
        out(vocab, hidden),
        out_bias(vocab) {}

  std::size_t vocab_size() const noexcept { return embed.rows; }
  std::size_t hidden() const noexcept { return embed.cols; }

  Matrix<Real>& target(std::string_view name) {
    if (name == "rec") return rec;
    if (name == "dense") return dense;
    if (name == "out") return out;
    throw Error("lm", "unknown adapter target '" + std::string(name) + "'");
  }
  const Matrix<Real>& target(std::string_view name) const { return const_cast<BaseParams&>(*this).target(name); }

  template <class F>
  void for_each_tensor(F&& f) {
    f(embed.data);
    f(rec.data);
    f(rec_bias);
    f(dense.data);
    f(dense_bias);
    f(out.data);
    f(out_bias);
  }

  friend bool operator==(const BaseParams&, const BaseParams&) = default;
};

struct ModelConfig {
  std::size_t hidden = 64;
  std::size_t max_seq_len = 256;
  double init_scale = 1.0;
};

/// Seeded initialization for pre-training. Recurrent weights are scaled to
/// keep the spectral radius below one.
template <class Real = float>
BaseParams<Real> init_base(std::size_t vocab, const ModelConfig& cfg, std::uint64_t seed) {
  BaseParams<Real> p(vocab, cfg.hidden);
  std::mt19937_64 rng(seed);
  const double h = static_cast<double>(cfg.hidden);
  auto fill = [&](Matrix<Real>& m, double std) {
    std::normal_distribution<double> nd(0.0, std * cfg.init_scale);
    for (auto& x : m.data) x = static_cast<Real>(nd(rng));
  };
  fill(p.embed, 0.5);
  fill(p.rec, 0.5 / std::sqrt(h));
  fill(p.dense, 1.0 / std::sqrt(h));
  fill(p.out, 1.0 / std::sqrt(h));
  return p;
}

// ---------------------------------------------------------------------------
// Adapters

template <class Real = float>
struct LoraFactors {
  std::string name;
  std::size_t d_out = 0, d_in = 0, rank = 0;
  Real alpha = 1;
  Matrix<Real> A;  // rank x d_in
  Matrix<Real> B;  // d_out x rank

  double scale() const noexcept { return static_cast<double>(alpha) / static_cast<double>(rank); }
  friend bool operator==(const LoraFactors&, const LoraFactors&) = default;
};

template <class Real = float>
struct LoraAdapter {
  std::vector<LoraFactors<Real>> targets;

  const LoraFactors<Real>* find(std::string_view name) const {
    for (const auto& t : targets)
      if (t.name == name) return &t;
    return nullptr;
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : targets) n += t.A.data.size() + t.B.data.size();
    return n;
  }
  friend bool operator==(const LoraAdapter&, const LoraAdapter&) = default;
};

struct LoraConfig {
  std::size_t rank = 8;
  double alpha = 16.0;
  std::vector<std::string> targets{"rec", "dense", "out"};
  double init_std = 0.02;
};

/// Fresh adapter: A ~ N(0, init_std^2) seeded, B = 0, so the delta starts at zero.
template <class Real>
LoraAdapter<Real> create_adapter(const BaseParams<Real>& base, const LoraConfig& cfg, std::uint64_t seed) {
  if (cfg.rank < 1) throw Error("lm", "LoRA rank must be >= 1");
  if (!(cfg.alpha > 0)) throw Error("lm", "LoRA alpha must be positive");
  LoraAdapter<Real> a;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, cfg.init_std);
  for (const auto& name : cfg.targets) {
    const auto& w = base.target(name);
    LoraFactors<Real> f;
    f.name = name;
    f.d_out = w.rows;
    f.d_in = w.cols;
    f.rank = cfg.rank;
    f.alpha = static_cast<Real>(cfg.alpha);
    f.A = Matrix<Real>(cfg.rank, w.cols);
    f.B = Matrix<Real>(w.rows, cfg.rank);
    for (auto& x : f.A.data) x = static_cast<Real>(nd(rng));
    a.targets.push_back(std::move(f));
  }
  return a;
}

/// Dense (alpha/r) * B * A in double.
template <class Real>
Matrix<double> lora_delta(const LoraFactors<Real>& f) {
  Matrix<double> d(f.d_out, f.d_in, 0.0);
  const double s = f.scale();
  for (std::size_t o = 0; o < f.d_out; ++o)
    for (std::size_t k = 0; k < f.rank; ++k) {
      double b = s * static_cast<double>(f.B(o, k));
      if (b == 0.0) continue;
      auto arow = f.A.row(k);
      auto drow = d.row(o);
      for (std::size_t i = 0; i < f.d_in; ++i) drow[i] += b * static_cast<double>(arow[i]);
    }
  return d;
}

/// Flat views used by optimizers and by distance computations.
template <class Real>
std::vector<double> flatten(const LoraAdapter<Real>& a) {
  std::vector<double> out;
  out.reserve(a.parameter_count());
  for (const auto& t : a.targets) {
    for (auto x : t.A.data) out.push_back(x);
    for (auto x : t.B.data) out.push_back(x);
  }
  return out;
}

template <class Real>
void unflatten(std::span<const double> flat, LoraAdapter<Real>& a) {
  std::size_t i = 0;
  for (auto& t : a.targets) {
    for (auto& x : t.A.data) x = static_cast<Real>(flat[i++]);
    for (auto& x : t.B.data) x = static_cast<Real>(flat[i++]);
  }
}

// ---------------------------------------------------------------------------
// Materialized weights and the recurrent step

/// Effective weights in double with any adapter delta folded in.
struct DenseWeights {
  Matrix<double> embed, rec, dense, out;
  std::vector<double> rec_bias, dense_bias, out_bias;

  std::size_t vocab_size() const noexcept { return embed.rows; }
  std::size_t hidden() const noexcept { return embed.cols; }

  Matrix<double>& target(std::string_view name) {
    if (name == "rec") return rec;
    if (name == "dense") return dense;
    if (name == "out") return out;
    throw Error("lm", "unknown adapter target '" + std::string(name) + "'");
  }
};

template <class Real>
DenseWeights materialize(const BaseParams<Real>& base) {
  DenseWeights w;
  w.embed = matrix_cast<double>(base.embed);
  w.rec = matrix_cast<double>(base.rec);
  w.dense = matrix_cast<double>(base.dense);
  w.out = matrix_cast<double>(base.out);
  w.rec_bias.assign(base.rec_bias.begin(), base.rec_bias.end());
  w.dense_bias.assign(base.dense_bias.begin(), base.dense_bias.end());
  w.out_bias.assign(base.out_bias.begin(), base.out_bias.end());
  return w;
}

template <class Real>
void check_adapter_shapes(const BaseParams<Real>& base, const LoraAdapter<Real>& a) {
  for (const auto& t : a.targets) {
    const auto& w = base.target(t.name);
    if (t.d_out != w.rows || t.d_in != w.cols || t.A.rows != t.rank || t.A.cols != t.d_in ||
        t.B.rows != t.d_out || t.B.cols != t.rank)
      throw Error("lm", "adapter shape mismatch for matrix '" + t.name + "'");
  }
}

template <class Real>
DenseWeights materialize(const BaseParams<Real>& base, const LoraAdapter<Real>* adapter) {
  DenseWeights w = materialize(base);
  if (adapter) {
    check_adapter_shapes(base, *adapter);
    for (const auto& t : adapter->targets) {
      auto d = lora_delta(t);
      auto& m = w.target(t.name);
      for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] += d.data[i];
    }
  }
  return w;
}

namespace detail {
inline std::atomic<std::uint64_t>& evaluation_counter() {
  static std::atomic<std::uint64_t> n{0};
  return n;
}
}  // namespace detail

/// Number of single-token model evaluations performed in this process; one
/// evaluation is one recurrent step through one set of weights.
inline std::uint64_t model_evaluations() { return detail::evaluation_counter().load(); }
inline void reset_model_evaluations() { detail::evaluation_counter().store(0); }

struct RecurrentState {
  std::vector<double> h;
  explicit RecurrentState(std::size_t hidden = 0) : h(hidden, 0.0) {}
};

inline void softmax_inplace(std::span<double> z) {
  double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double& x : z) {
    x = std::exp(x - m);
    s += x;
  }
  for (double& x : z) x /= s;
}

struct StepBuffers {
  std::vector<double> pre, g, logits;
};

/// Advances `state` by one token and writes next-token logits.
inline void step_logits(const DenseWeights& w, int token, RecurrentState& state, StepBuffers& buf) {
  const std::size_t h = w.hidden(), V = w.vocab_size();
  buf.pre.resize(h);
  buf.g.resize(h);
  buf.logits.resize(V);
  auto e = w.embed.row(static_cast<std::size_t>(token));
  for (std::size_t i = 0; i < h; ++i) {
    double s = e[i] + w.rec_bias[i];
    auto r = w.rec.row(i);
    for (std::size_t j = 0; j < h; ++j) s += r[j] * state.h[j];
    buf.pre[i] = std::tanh(s);
  }
  state.h.swap(buf.pre);
  for (std::size_t i = 0; i < h; ++i) {
    double s = w.dense_bias[i];
    auto r = w.dense.row(i);
    for (std::size_t j = 0; j < h; ++j) s += r[j] * state.h[j];
    buf.g[i] = std::tanh(s);
  }
  for (std::size_t v = 0; v < V; ++v) {
    double s = w.out_bias[v];
    auto r = w.out.row(v);
    for (std::size_t j = 0; j < h; ++j) s += r[j] * buf.g[j];
    buf.logits[v] = s;
  }
  detail::evaluation_counter().fetch_add(1, std::memory_order_relaxed);
}

inline void step_probs(const DenseWeights& w, int token, RecurrentState& state, StepBuffers& buf,
                       std::vector<double>& probs) {
  step_logits(w, token, state, buf);
  probs = buf.logits;
  softmax_inplace(probs);
}

/// Next-token logits after consuming BOS + prefix.
inline std::vector<double> forward_logits(const DenseWeights& w, std::span<const int> tokens) {
  RecurrentState st(w.hidden());
  StepBuffers buf;
  for (int t : tokens) step_logits(w, t, st, buf);
  return buf.logits;
}

template <class Real>
std::vector<double> forward_logits(const BaseParams<Real>& base, const LoraAdapter<Real>* adapter,
                                   const Vocab& vocab, std::string_view prefix) {
  return forward_logits(materialize(base, adapter), vocab.encode_prefix(prefix));
}

/// Next-token distribution after BOS + prefix.
template <class Real>
std::vector<double> forward(const BaseParams<Real>& base, const LoraAdapter<Real>* adapter, const Vocab& vocab,
                            std::string_view prefix, std::size_t max_seq_len = 256) {
  if (prefix.size() > max_seq_len) throw Error("lm", "prefix longer than max_seq_len");
  auto z = forward_logits(base, adapter, vocab, prefix);
  softmax_inplace(z);
  return z;
}

inline std::vector<double> forward(const DenseWeights& w, std::span<const int> tokens) {
  auto z = forward_logits(w, tokens);
  softmax_inplace(z);
  return z;
}

inline double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double x : p)
    if (x > 0) h -= x * std::log(x);
  return h;
}

// ---------------------------------------------------------------------------
// Loss and gradients

struct DenseGrads {
  Matrix<double> embed, rec, dense, out;
  std::vector<double> rec_bias, dense_bias, out_bias;

  explicit DenseGrads(const DenseWeights& w)
      : embed(w.embed.rows, w.embed.cols),
        rec(w.rec.rows, w.rec.cols),
        dense(w.dense.rows, w.dense.cols),
        out(w.out.rows, w.out.cols),
        rec_bias(w.rec_bias.size()),
        dense_bias(w.dense_bias.size()),
        out_bias(w.out_bias.size()) {}

  Matrix<double>& target(std::string_view name) {
    if (name == "rec") return rec;
    if (name == "dense") return dense;
    if (name == "out") return out;
    throw Error("lm", "unknown adapter target '" + std::string(name) + "'");
  }
};

struct NllSum {
  double nll = 0.0;
  std::size_t count = 0;
};

/// Summed NLL of predictions at positions >= `skip` of an encoded document
/// (BOS ... EOS). Prediction t consumes token t and scores token t+1.
inline NllSum sequence_nll(const DenseWeights& w, std::span<const int> seq, std::size_t skip = 0) {
  NllSum r;
  RecurrentState st(w.hidden());
  StepBuffers buf;
  for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
    step_logits(w, seq[t], st, buf);
    if (t < skip) continue;
    double m = *std::max_element(buf.logits.begin(), buf.logits.end());
    double s = 0.0;
    for (double z : buf.logits) s += std::exp(z - m);
    r.nll += (m + std::log(s)) - buf.logits[static_cast<std::size_t>(seq[t + 1])];
    ++r.count;
  }
  return r;
}

/// Backpropagation through time for one encoded document. Adds
/// `weight * d(sum of token NLL)/d(params)` into `g`; returns the NLL sum.
inline NllSum accumulate_gradients(const DenseWeights& w, std::span<const int> seq, double weight,
                                   DenseGrads& g) {
  const std::size_t h = w.hidden(), V = w.vocab_size();
  const std::size_t T = seq.size() - 1;
  std::vector<double> hs((T + 1) * h, 0.0), gs(T * h), ps(T * V);
  NllSum r;
  for (std::size_t t = 0; t < T; ++t) {
    const double* hp = &hs[t * h];
    double* hc = &hs[(t + 1) * h];
    auto e = w.embed.row(static_cast<std::size_t>(seq[t]));
    for (std::size_t i = 0; i < h; ++i) {
      double s = e[i] + w.rec_bias[i];
      auto row = w.rec.row(i);
      for (std::size_t j = 0; j < h; ++j) s += row[j] * hp[j];
      hc[i] = std::tanh(s);
    }
    double* gc = &gs[t * h];
    for (std::size_t i = 0; i < h; ++i) {
      double s = w.dense_bias[i];
      auto row = w.dense.row(i);
      for (std::size_t j = 0; j < h; ++j) s += row[j] * hc[j];
      gc[i] = std::tanh(s);
    }
    double* pc = &ps[t * V];
    for (std::size_t v = 0; v < V; ++v) {
      double s = w.out_bias[v];
      auto row = w.out.row(v);
      for (std::size_t j = 0; j < h; ++j) s += row[j] * gc[j];
      pc[v] = s;
    }
    double m = *std::max_element(pc, pc + V);
    double z = 0.0;
    for (std::size_t v = 0; v < V; ++v) z += std::exp(pc[v] - m);
    const double lse = m + std::log(z);
    r.nll += lse - pc[seq[t + 1]];
    ++r.count;
    for (std::size_t v = 0; v < V; ++v) pc[v] = std::exp(pc[v] - lse);
  }
  detail::evaluation_counter().fetch_add(T, std::memory_order_relaxed);

  std::vector<double> dh_next(h, 0.0), dl(V), dg(h), dh(h), da(h);
  for (std::size_t t = T; t-- > 0;) {
    const double* hp = &hs[t * h];
    const double* hc = &hs[(t + 1) * h];
    const double* gc = &gs[t * h];
    const double* pc = &ps[t * V];
    for (std::size_t v = 0; v < V; ++v) dl[v] = weight * pc[v];
    dl[seq[t + 1]] -= weight;

    std::fill(dg.begin(), dg.end(), 0.0);
    for (std::size_t v = 0; v < V; ++v) {
      const double d = dl[v];
      g.out_bias[v] += d;
      auto grow = g.out.row(v);
      auto wrow = w.out.row(v);
      for (std::size_t j = 0; j < h; ++j) {
        grow[j] += d * gc[j];
        dg[j] += wrow[j] * d;
      }
    }
    for (std::size_t i = 0; i < h; ++i) dg[i] *= 1.0 - gc[i] * gc[i];
    dh = dh_next;
    for (std::size_t i = 0; i < h; ++i) {
      const double d = dg[i];
      g.dense_bias[i] += d;
      auto grow = g.dense.row(i);
      auto wrow = w.dense.row(i);
      for (std::size_t j = 0; j < h; ++j) {
        grow[j] += d * hc[j];
        dh[j] += wrow[j] * d;
      }
    }
    for (std::size_t i = 0; i < h; ++i) da[i] = dh[i] * (1.0 - hc[i] * hc[i]);
    std::fill(dh_next.begin(), dh_next.end(), 0.0);
    auto erow = g.embed.row(static_cast<std::size_t>(seq[t]));
    for (std::size_t i = 0; i < h; ++i) {
      const double d = da[i];
      g.rec_bias[i] += d;
      erow[i] += d;
      auto grow = g.rec.row(i);
      auto wrow = w.rec.row(i);
      for (std::size_t j = 0; j < h; ++j) {
        grow[j] += d * hp[j];
        dh_next[j] += wrow[j] * d;
      }
    }
  }
  return r;
}

/// Gradients with respect to every adapter factor, same layout as the adapter.
struct AdapterGrads {
  std::vector<Matrix<double>> dA, dB;

  std::vector<double> flat() const {
    std::vector<double> out;
    for (std::size_t i = 0; i < dA.size(); ++i) {
      out.insert(out.end(), dA[i].data.begin(), dA[i].data.end());
      out.insert(out.end(), dB[i].data.begin(), dB[i].data.end());
    }
    return out;
  }
};

/// Chain rule from the effective-weight gradient dW to the factors:
/// dA = s * B^T dW, dB = s * dW A^T.
template <class Real>
AdapterGrads project_to_adapter(const LoraAdapter<Real>& a, DenseGrads& g) {
  AdapterGrads out;
  for (const auto& t : a.targets) {
    const auto& dW = g.target(t.name);
    const double s = t.scale();
    Matrix<double> dA(t.rank, t.d_in, 0.0), dB(t.d_out, t.rank, 0.0);
    for (std::size_t o = 0; o < t.d_out; ++o) {
      auto dwrow = dW.row(o);
      for (std::size_t k = 0; k < t.rank; ++k) {
        const double b = s * static_cast<double>(t.B(o, k));
        auto arow = t.A.row(k);
        auto darow = dA.row(k);
        double acc = 0.0;
        for (std::size_t i = 0; i < t.d_in; ++i) {
          darow[i] += b * dwrow[i];
          acc += dwrow[i] * static_cast<double>(arow[i]);
        }
        dB(o, k) = s * acc;
      }
    }
    out.dA.push_back(std::move(dA));
    out.dB.push_back(std::move(dB));
  }
  return out;
}

struct LossAndGrads {
  double nll = 0.0;  // mean token NLL
  AdapterGrads grads;
};

/// Mean next-token NLL over the batch and its gradient with respect to the
/// adapter factors only (base frozen).
template <class Real>
LossAndGrads nll_and_grad(const BaseParams<Real>& base, const LoraAdapter<Real>& adapter, const Vocab& vocab,
                          std::span<const std::string> batch, std::size_t max_seq_len = 256) {
  if (batch.empty()) throw Error("lm", "empty batch");
  std::vector<std::vector<int>> seqs;
  std::size_t total = 0;
  for (const auto& doc : batch) {
    if (doc.size() > max_seq_len) throw Error("lm", "document longer than max_seq_len");
    seqs.push_back(vocab.encode_document(doc));
    total += seqs.back().size() - 1;
  }
  DenseWeights w = materialize(base, &adapter);
  DenseGrads g(w);
  double nll = 0.0;
  for (const auto& s : seqs) nll += accumulate_gradients(w, s, 1.0 / static_cast<double>(total), g).nll;
  return {nll / static_cast<double>(total), project_to_adapter(adapter, g)};
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double learning_rate = 2e-4;
  std::size_t batch_size = 4;
  std::size_t epochs = 1;
  std::size_t max_seq_len = 256;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate >= 0)) throw Error("lm", "learning_rate must be >= 0");
    if (batch_size < 1) throw Error("lm", "batch_size must be >= 1");
    if (epochs < 1) throw Error("lm", "epochs must be >= 1");
    if (max_seq_len < 1) throw Error("lm", "max_seq_len must be >= 1");
  }
};

/// Decoupled-weight-decay Adam over a flat parameter vector.
class AdamW {
 public:
  AdamW(std::size_t n, const TrainConfig& cfg) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::span<double> params, std::span<const double> grad) {
    ++t_;
    const double lr = cfg_.learning_rate;
    if (lr == 0.0) return;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
      const double mh = m_[i] / c1, vh = v_[i] / c2;
      params[i] -= lr * (mh / (std::sqrt(vh) + cfg_.eps) + cfg_.weight_decay * params[i]);
    }
  }

 private:
  TrainConfig cfg_;
  std::vector<double> m_, v_;
  std::uint64_t t_ = 0;
};

/// Encodes training documents, truncating to max_seq_len characters. A
/// truncated document does not end with EOS.
inline std::vector<std::vector<int>> encode_training_docs(const Vocab& vocab, std::span<const std::string> docs,
                                                          std::size_t max_seq_len) {
  std::vector<std::vector<int>> out;
  out.reserve(docs.size());
  for (const auto& d : docs) {
    if (d.size() <= max_seq_len) {
      out.push_back(vocab.encode_document(d));
    } else {
      out.push_back(vocab.encode_prefix(std::string_view(d).substr(0, max_seq_len)));
    }
    if (out.back().size() < 2) throw Error("lm", "training document too short");
  }
  return out;
}

/// Optional per-step observer: (step index, mean batch NLL before the update).
using StepObserver = std::function<void(std::size_t, double)>;

/// Adapter training: AdamW over seeded shuffled minibatches, base frozen.
template <class Real>
LoraAdapter<Real> train_adapter(const BaseParams<Real>& base, const Vocab& vocab, std::span<const std::string> docs,
                                const TrainConfig& cfg, LoraAdapter<Real> adapter,
                                const StepObserver& observer = {}) {
  cfg.validate();
  if (docs.empty()) throw Error("lm", "no training documents");
  auto seqs = encode_training_docs(vocab, docs, cfg.max_seq_len);
  std::vector<double> params = flatten(adapter);
  AdamW opt(params.size(), cfg);
  std::mt19937_64 rng(derive_seed(cfg.seed, 0xada));
  std::vector<std::size_t> order(seqs.size());
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      std::size_t total = 0;
      for (std::size_t i = b; i < e; ++i) total += seqs[order[i]].size() - 1;
      DenseWeights w = materialize(base, &adapter);
      DenseGrads g(w);
      double nll = 0.0;
      for (std::size_t i = b; i < e; ++i)
        nll += accumulate_gradients(w, seqs[order[i]], 1.0 / static_cast<double>(total), g).nll;
      nll /= static_cast<double>(total);
      if (!std::isfinite(nll)) throw Error("lm", "diverged at step " + std::to_string(step));
      if (observer) observer(step, nll);
      auto grads = project_to_adapter(adapter, g).flat();
      opt.step(params, grads);
      unflatten(params, adapter);
      ++step;
    }
  }
  return adapter;
}

template <class Real>
LoraAdapter<Real> train_adapter(const BaseParams<Real>& base, const Vocab& vocab, std::span<const std::string> docs,
                                const TrainConfig& cfg, const LoraConfig& lora, const StepObserver& observer = {}) {
  return train_adapter(base, vocab, docs, cfg, create_adapter(base, lora, derive_seed(cfg.seed, 0x10a)),
                       observer);
}

/// Full-parameter pre-training of the base model.
template <class Real = float>
BaseParams<Real> pretrain_base(const Vocab& vocab, std::span<const std::string> docs, const ModelConfig& model,
                               const TrainConfig& cfg, const StepObserver& observer = {}) {
  cfg.validate();
  if (docs.empty()) throw Error("lm", "no pre-training documents");
  auto base = init_base<Real>(vocab.size(), model, derive_seed(cfg.seed, 0xba5e));
  auto seqs = encode_training_docs(vocab, docs, cfg.max_seq_len);
  std::vector<double> params;
  base.for_each_tensor([&](const auto& v) { params.insert(params.end(), v.begin(), v.end()); });
  AdamW opt(params.size(), cfg);
  std::mt19937_64 rng(derive_seed(cfg.seed, 0x5b));
  std::vector<std::size_t> order(seqs.size());
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      std::size_t total = 0;
      for (std::size_t i = b; i < e; ++i) total += seqs[order[i]].size() - 1;
      DenseWeights w = materialize(base);
      DenseGrads g(w);
      double nll = 0.0;
      for (std::size_t i = b; i < e; ++i)
        nll += accumulate_gradients(w, seqs[order[i]], 1.0 / static_cast<double>(total), g).nll;
      nll /= static_cast<double>(total);
      if (!std::isfinite(nll)) throw Error("lm", "diverged at step " + std::to_string(step));
      if (observer) observer(step, nll);
      std::vector<double> flat;
      flat.reserve(params.size());
      auto push = [&](const std::vector<double>& v) { flat.insert(flat.end(), v.begin(), v.end()); };
      push(g.embed.data);
      push(g.rec.data);
      push(g.rec_bias);
      push(g.dense.data);
      push(g.dense_bias);
      push(g.out.data);
      push(g.out_bias);
      opt.step(params, flat);
      std::size_t k = 0;
      base.for_each_tensor([&](auto& v) {
        for (auto& x : v) x = static_cast<Real>(params[k++]);
      });
      ++step;
    }
  }
  return base;
}

// ---------------------------------------------------------------------------
// Evaluation and generation

/// Summed NLL over every document, scoring only positions after the first
/// `eval_prefix_len` characters.
inline NllSum corpus_nll(const DenseWeights& w, const Vocab& vocab, std::span<const std::string> docs,
                         std::size_t eval_prefix_len) {
  NllSum total;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (docs[i].size() <= eval_prefix_len)
      throw Error("lm", "document " + std::to_string(i) + " is not longer than eval_prefix_len");
    auto r = sequence_nll(w, vocab.encode_document(docs[i]), eval_prefix_len);
    total.nll += r.nll;
    total.count += r.count;
  }
  return total;
}

inline double perplexity_of(const NllSum& s) { return std::exp(s.nll / static_cast<double>(s.count)); }

template <class Real>
double perplexity(const BaseParams<Real>& base, const LoraAdapter<Real>* adapter, const Vocab& vocab,
                  std::span<const std::string> docs, std::size_t eval_prefix_len = 0) {
  if (docs.empty()) throw Error("lm", "no documents to evaluate");
  return perplexity_of(corpus_nll(materialize(base, adapter), vocab, docs, eval_prefix_len));
}

/// Ancestral sampling. Stops early when EOS (or BOS) is drawn.
inline std::string generate(const DenseWeights& w, const Vocab& vocab, std::string_view prompt,
                            std::size_t n_tokens, std::uint64_t seed) {
  std::string out(prompt);
  if (n_tokens == 0) return out;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  RecurrentState st(w.hidden());
  StepBuffers buf;
  std::vector<double> p;
  auto toks = vocab.encode_prefix(prompt);
  for (std::size_t i = 0; i + 1 < toks.size(); ++i) step_logits(w, toks[i], st, buf);
  int cur = toks.back();
  for (std::size_t n = 0; n < n_tokens; ++n) {
    step_probs(w, cur, st, buf, p);
    double r = u(rng), c = 0.0;
    int next = static_cast<int>(p.size()) - 1;
    for (std::size_t v = 0; v < p.size(); ++v) {
      c += p[v];
      if (r < c) {
        next = static_cast<int>(v);
        break;
      }
    }
    // A one-hot distribution must yield its support regardless of r.
    if (p[static_cast<std::size_t>(next)] == 0.0)
      next = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
    if (next == Vocab::kEos || next == Vocab::kBos) break;
    out.push_back(vocab.symbol(next));
    cur = next;
  }
  return out;
}

template <class Real>
std::string generate(const BaseParams<Real>& base, const LoraAdapter<Real>* adapter, const Vocab& vocab,
                     std::string_view prompt, std::size_t n_tokens, std::uint64_t seed) {
  return generate(materialize(base, adapter), vocab, prompt, n_tokens, seed);
}

}  // namespace ttmm
