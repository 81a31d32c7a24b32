#pragma once

// Expert combination in parameter space (merged low-rank deltas) and in
// prediction space (weighted mixture of next-token distributions).

#include <map>
#include <string>
#include <vector>

#include "ttmm/common.hpp"
#include "ttmm/lm.hpp"
#include "ttmm/router.hpp"

namespace ttmm {

struct MergedDelta {
  std::string name;
  Matrix<float> delta;  // d_out x d_in
};

struct MergedAdapter {
  std::vector<MergedDelta> deltas;
  MergeWeights provenance;

  const MergedDelta* find(std::string_view name) const {
    for (const auto& d : deltas)
      if (d.name == name) return &d;
    return nullptr;
  }
};

using AdapterMap = std::map<ExpertId, LoraAdapter<float>>;

/// Delta_W = sum_k w_k (alpha_k / r_k) B_k A_k per target matrix, contracted
/// over experts before it touches the base weights. Ranks may differ between
/// experts; accumulation is in double.
inline MergedAdapter merge_adapters(const MergeWeights& weights, const AdapterMap& adapters) {
  if (weights.entries.empty()) throw Error("merge", "empty merge weights");
  MergedAdapter out;
  out.provenance = weights;
  const LoraAdapter<float>* first = nullptr;
  for (const auto& [id, w] : weights.entries) {
    auto it = adapters.find(id);
    if (it == adapters.end()) throw Error("merge", "missing adapter for expert " + std::to_string(id));
    if (!first) first = &it->second;
  }
  std::vector<Matrix<double>> acc;
  for (const auto& t : first->targets) acc.emplace_back(t.d_out, t.d_in, 0.0);

  for (const auto& [id, w] : weights.entries) {
    const auto& a = adapters.at(id);
    if (a.targets.size() != first->targets.size())
      throw Error("merge", "expert " + std::to_string(id) + " adapts a different set of matrices");
    for (std::size_t m = 0; m < a.targets.size(); ++m) {
      const auto& f = a.targets[m];
      const auto& ref = first->targets[m];
      if (f.name != ref.name || f.d_out != ref.d_out || f.d_in != ref.d_in)
        throw Error("merge", "shape mismatch for matrix '" + f.name + "' in expert " + std::to_string(id));
      if (f.alpha != ref.alpha)
        throw Error("merge", "alpha mismatch for matrix '" + f.name + "' in expert " + std::to_string(id));
      // w_k pre-scales B_k, then (w_k s_k B_k) A_k is contracted into the sum.
      const double s = w * f.scale();
      auto& dst = acc[m];
      for (std::size_t o = 0; o < f.d_out; ++o) {
        auto drow = dst.row(o);
        for (std::size_t r = 0; r < f.rank; ++r) {
          const double b = s * static_cast<double>(f.B(o, r));
          if (b == 0.0) continue;
          auto arow = f.A.row(r);
          for (std::size_t i = 0; i < f.d_in; ++i) drow[i] += b * static_cast<double>(arow[i]);
        }
      }
    }
  }
  for (std::size_t m = 0; m < acc.size(); ++m)
    out.deltas.push_back({first->targets[m].name, matrix_cast<float>(acc[m])});
  return out;
}

/// Copy of `base` with W + Delta_W for every merged matrix.
inline BaseParams<float> apply_merged(const BaseParams<float>& base, const MergedAdapter& merged) {
  BaseParams<float> out = base;
  for (const auto& d : merged.deltas) {
    auto& w = out.target(d.name);
    if (w.rows != d.delta.rows || w.cols != d.delta.cols)
      throw Error("merge", "shape mismatch for matrix '" + d.name + "'");
    for (std::size_t i = 0; i < w.data.size(); ++i) w.data[i] += d.delta.data[i];
  }
  return out;
}

/// Effective double weights for merged inference without rounding the sum
/// back to float.
inline DenseWeights materialize(const BaseParams<float>& base, const MergedAdapter& merged) {
  DenseWeights w = materialize(base);
  for (const auto& d : merged.deltas) {
    auto& m = w.target(d.name);
    if (m.rows != d.delta.rows || m.cols != d.delta.cols)
      throw Error("merge", "shape mismatch for matrix '" + d.name + "'");
    for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] += d.delta.data[i];
  }
  return w;
}

/// Prediction-space mixture sum_k w_k p_k(. | prefix). Runs one forward pass
/// per active expert.
inline std::vector<double> ensemble_forward(const MergeWeights& weights, const AdapterMap& adapters,
                                            const BaseParams<float>& base, const Vocab& vocab,
                                            std::string_view prefix) {
  auto toks = vocab.encode_prefix(prefix);
  std::vector<double> mix(base.vocab_size(), 0.0);
  for (const auto& [id, w] : weights.entries) {
    auto it = adapters.find(id);
    if (it == adapters.end()) throw Error("merge", "missing adapter for expert " + std::to_string(id));
    auto p = forward(materialize(base, &it->second), toks);
    for (std::size_t v = 0; v < mix.size(); ++v) mix[v] += w * p[v];
  }
  return mix;
}

/// Token-synchronous ensemble over a whole document: every active expert
/// keeps its own recurrent state and is stepped once per token. Returns the
/// summed NLL of positions >= skip.
inline NllSum ensemble_sequence_nll(const std::vector<std::pair<double, const DenseWeights*>>& experts,
                                    std::span<const int> seq, std::size_t skip) {
  NllSum r;
  const std::size_t h = experts.front().second->hidden();
  std::vector<RecurrentState> states(experts.size(), RecurrentState(h));
  StepBuffers buf;
  std::vector<double> p, mix;
  for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
    mix.assign(experts.front().second->vocab_size(), 0.0);
    for (std::size_t e = 0; e < experts.size(); ++e) {
      step_probs(*experts[e].second, seq[t], states[e], buf, p);
      for (std::size_t v = 0; v < mix.size(); ++v) mix[v] += experts[e].first * p[v];
    }
    if (t < skip) continue;
    r.nll -= std::log(mix[static_cast<std::size_t>(seq[t + 1])]);
    ++r.count;
  }
  return r;
}

}  // namespace ttmm
