#pragma once

// Run configuration: one JSON document (comments allowed) holding every
// module's settings, with dotted-key command-line overrides.

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ttmm/cluster.hpp"
#include "ttmm/common.hpp"
#include "ttmm/corpus.hpp"
#include "ttmm/embed.hpp"
#include "ttmm/evalbl.hpp"
#include "ttmm/lm.hpp"
#include "ttmm/router.hpp"

namespace ttmm {

struct PretrainConfig {
  std::optional<std::string> corpus_path;  // none: synthetic general corpus
  std::uint64_t lexicon_seed = 77;
  std::size_t docs_per_domain = 150;
  TrainConfig train{3e-3, 8, 2, 256, 0.9, 0.999, 1e-8, 0.0, 0};
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::optional<std::string> corpus_path;  // none: synthetic corpus
  SyntheticCorpusConfig synthetic;
  std::uint64_t lexicon_seed = 11;
  PretrainConfig pretrain;
  ModelConfig model;
  EmbedderConfig embedder;
  std::size_t K = 32;
  BisectingOptions clustering;
  LoraConfig lora;
  TrainConfig train{1e-2, 4, 2, 256, 0.9, 0.999, 1e-8, 0.01, 0};
  RoutingConfig routing;
  TableConfig eval;
  std::string catalog_dir = "out/catalog";
  std::string report_dir = "out/report";
  std::optional<std::string> base_path;  // existing base model; none: pre-train
  bool save_global = true;

  RunConfig() {
    eval.routing = routing;
    eval.lora = lora;
    eval.ttt.train = train;
  }

  void validate() const {
    if (K < 1) throw Error("cli", "K must be >= 1");
    embedder.validate();
    train.validate();
    pretrain.train.validate();
    eval.protocol.validate();
    if (!(routing.beta > 0)) throw Error("cli", "routing.beta must be positive");
    if (!(routing.tau >= 0)) throw Error("cli", "routing.tau must be >= 0");
    for (const auto* p : {&corpus_path, &pretrain.corpus_path, &base_path})
      if (*p && !fs::exists(**p)) throw Error("cli", "path does not exist: " + **p);
  }
};

namespace detail {

inline nlohmann::json opt_json(const std::optional<std::string>& s) { return s ? nlohmann::json(*s) : nlohmann::json(); }

inline std::optional<std::string> opt_string(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<std::string>();
}

inline nlohmann::json train_to_json(const TrainConfig& t) {
  return {{"learning_rate", t.learning_rate}, {"batch_size", t.batch_size}, {"epochs", t.epochs},
          {"max_seq_len", t.max_seq_len},     {"beta1", t.beta1},           {"beta2", t.beta2},
          {"eps", t.eps},                     {"weight_decay", t.weight_decay}};
}

inline TrainConfig train_from_json(const nlohmann::json& j, std::uint64_t seed) {
  TrainConfig t;
  t.learning_rate = j.at("learning_rate").get<double>();
  t.batch_size = j.at("batch_size").get<std::size_t>();
  t.epochs = j.at("epochs").get<std::size_t>();
  t.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  t.beta1 = j.at("beta1").get<double>();
  t.beta2 = j.at("beta2").get<double>();
  t.eps = j.at("eps").get<double>();
  t.weight_decay = j.at("weight_decay").get<double>();
  t.seed = seed;
  return t;
}

// Every key of `patch` must exist in `defaults`.
inline void check_known_keys(const nlohmann::json& defaults, const nlohmann::json& patch, const std::string& prefix) {
  if (!patch.is_object() || !defaults.is_object()) return;
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!defaults.contains(it.key())) throw Error("cli", "unknown config key '" + key + "'");
    check_known_keys(defaults.at(it.key()), it.value(), key);
  }
}

}  // namespace detail

inline nlohmann::json config_to_json(const RunConfig& c) {
  const auto& e = c.eval;
  return {
      {"seed", c.seed},
      {"corpus",
       {{"path", detail::opt_json(c.corpus_path)},
        {"lexicon_seed", c.lexicon_seed},
        {"domains", c.synthetic.domains},
        {"subtopics", c.synthetic.subtopics},
        {"docs_per_domain", c.synthetic.docs_per_domain},
        {"lexicon_size", c.synthetic.lexicon_size},
        {"shared_words", c.synthetic.shared_words},
        {"secondary_mix", c.synthetic.secondary_mix},
        {"min_chars", c.synthetic.min_chars},
        {"max_chars", c.synthetic.max_chars}}},
      {"pretrain",
       {{"corpus_path", detail::opt_json(c.pretrain.corpus_path)},
        {"lexicon_seed", c.pretrain.lexicon_seed},
        {"docs_per_domain", c.pretrain.docs_per_domain},
        {"train", detail::train_to_json(c.pretrain.train)}}},
      {"model", {{"hidden", c.model.hidden}, {"max_seq_len", c.model.max_seq_len}, {"init_scale", c.model.init_scale}}},
      {"embedder", embedder_to_json(c.embedder)},
      {"cluster",
       {{"K", c.K},
        {"exact_diameter_cap", c.clustering.exact_diameter_cap},
        {"max_iterations", c.clustering.max_iterations}}},
      {"lora", {{"rank", c.lora.rank}, {"alpha", c.lora.alpha}, {"targets", c.lora.targets}, {"init_std", c.lora.init_std}}},
      {"train", detail::train_to_json(c.train)},
      {"routing",
       {{"beta", c.routing.beta},
        {"tau", c.routing.tau},
        {"fixed_n", c.routing.fixed_n ? nlohmann::json(*c.routing.fixed_n) : nlohmann::json()},
        {"weighting", to_string(c.routing.weighting)},
        {"sift", {{"lambda", c.routing.sift.lambda}, {"n_candidates", c.routing.sift.n_candidates}}}}},
      {"protocol",
       {{"query_prefix_len", e.protocol.query_prefix_len},
        {"eval_prefix_len", e.protocol.eval_prefix_len},
        {"holdout_fraction", e.protocol.holdout_fraction},
        {"test_per_cluster", e.protocol.test_per_cluster}}},
      {"eval",
       {{"methods", e.methods},
        {"beta_grid", e.beta_grid},
        {"tune_beta", e.tune_beta},
        {"tune_docs_per_cluster", e.tune_docs_per_cluster},
        {"matrix_docs_per_cluster", e.matrix_docs_per_cluster},
        {"fixed_n", e.fixed_n},
        {"ensemble_n", e.ensemble_n},
        {"uniform_n", e.uniform_n},
        {"dawin_beta", e.dawin_beta},
        {"pass_n", e.pass_n},
        {"bench_taus", e.bench_taus},
        {"bench_repetitions", e.bench_repetitions},
        {"ttt",
         {{"neighbors", e.ttt.neighbors}, {"epochs", e.ttt.epochs}, {"learning_rate", e.ttt.train.learning_rate}}}}},
      {"paths",
       {{"catalog", c.catalog_dir},
        {"report", c.report_dir},
        {"base", detail::opt_json(c.base_path)},
        {"save_global", c.save_global}}},
  };
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    c.seed = j.at("seed").get<std::uint64_t>();
    const auto& co = j.at("corpus");
    c.corpus_path = detail::opt_string(co.at("path"));
    c.lexicon_seed = co.at("lexicon_seed").get<std::uint64_t>();
    c.synthetic.domains = co.at("domains").get<std::size_t>();
    c.synthetic.subtopics = co.at("subtopics").get<std::size_t>();
    c.synthetic.docs_per_domain = co.at("docs_per_domain").get<std::size_t>();
    c.synthetic.lexicon_size = co.at("lexicon_size").get<std::size_t>();
    c.synthetic.shared_words = co.at("shared_words").get<std::size_t>();
    c.synthetic.secondary_mix = co.at("secondary_mix").get<double>();
    c.synthetic.min_chars = co.at("min_chars").get<std::size_t>();
    c.synthetic.max_chars = co.at("max_chars").get<std::size_t>();
    c.synthetic.seed = c.seed;

    const auto& pt = j.at("pretrain");
    c.pretrain.corpus_path = detail::opt_string(pt.at("corpus_path"));
    c.pretrain.lexicon_seed = pt.at("lexicon_seed").get<std::uint64_t>();
    c.pretrain.docs_per_domain = pt.at("docs_per_domain").get<std::size_t>();
    c.pretrain.train = detail::train_from_json(pt.at("train"), derive_seed(c.seed, 0xb));

    const auto& mo = j.at("model");
    c.model.hidden = mo.at("hidden").get<std::size_t>();
    c.model.max_seq_len = mo.at("max_seq_len").get<std::size_t>();
    c.model.init_scale = mo.at("init_scale").get<double>();
    c.embedder = embedder_from_json(j.at("embedder"));

    const auto& cl = j.at("cluster");
    c.K = cl.at("K").get<std::size_t>();
    c.clustering.exact_diameter_cap = cl.at("exact_diameter_cap").get<std::size_t>();
    c.clustering.max_iterations = cl.at("max_iterations").get<std::size_t>();

    const auto& lo = j.at("lora");
    c.lora.rank = lo.at("rank").get<std::size_t>();
    c.lora.alpha = lo.at("alpha").get<double>();
    c.lora.targets = lo.at("targets").get<std::vector<std::string>>();
    c.lora.init_std = lo.at("init_std").get<double>();
    c.train = detail::train_from_json(j.at("train"), derive_seed(c.seed, 0x7));

    const auto& ro = j.at("routing");
    c.routing.beta = ro.at("beta").get<double>();
    c.routing.tau = ro.at("tau").get<double>();
    if (!ro.at("fixed_n").is_null()) c.routing.fixed_n = ro.at("fixed_n").get<std::size_t>();
    c.routing.weighting = weighting_from_string(ro.at("weighting").get<std::string>());
    c.routing.sift.lambda = ro.at("sift").at("lambda").get<double>();
    c.routing.sift.n_candidates = ro.at("sift").at("n_candidates").get<std::size_t>();

    auto& e = c.eval;
    const auto& pr = j.at("protocol");
    e.protocol.query_prefix_len = pr.at("query_prefix_len").get<std::size_t>();
    e.protocol.eval_prefix_len = pr.at("eval_prefix_len").get<std::size_t>();
    e.protocol.holdout_fraction = pr.at("holdout_fraction").get<double>();
    e.protocol.test_per_cluster = pr.at("test_per_cluster").get<std::size_t>();
    e.protocol.seed = derive_seed(c.seed, 0x5);

    const auto& ev = j.at("eval");
    e.methods = ev.at("methods").get<std::vector<std::string>>();
    e.beta_grid = ev.at("beta_grid").get<std::vector<double>>();
    e.tune_beta = ev.at("tune_beta").get<bool>();
    e.tune_docs_per_cluster = ev.at("tune_docs_per_cluster").get<std::size_t>();
    e.matrix_docs_per_cluster = ev.at("matrix_docs_per_cluster").get<std::size_t>();
    e.fixed_n = ev.at("fixed_n").get<std::vector<std::size_t>>();
    e.ensemble_n = ev.at("ensemble_n").get<std::vector<std::size_t>>();
    e.uniform_n = ev.at("uniform_n").get<std::size_t>();
    e.dawin_beta = ev.at("dawin_beta").get<double>();
    e.pass_n = ev.at("pass_n").get<std::vector<std::size_t>>();
    e.bench_taus = ev.at("bench_taus").get<std::vector<double>>();
    e.bench_repetitions = ev.at("bench_repetitions").get<std::size_t>();
    e.ttt.neighbors = ev.at("ttt").at("neighbors").get<std::size_t>();
    e.ttt.epochs = ev.at("ttt").at("epochs").get<std::size_t>();
    e.ttt.train = c.train;
    e.ttt.train.learning_rate = ev.at("ttt").at("learning_rate").get<double>();
    e.ttt.train.seed = derive_seed(c.seed, 0x77);
    e.routing = c.routing;
    e.lora = c.lora;

    const auto& pa = j.at("paths");
    c.catalog_dir = pa.at("catalog").get<std::string>();
    c.report_dir = pa.at("report").get<std::string>();
    c.base_path = detail::opt_string(pa.at("base"));
    c.save_global = pa.at("save_global").get<bool>();
  } catch (const nlohmann::json::exception& ex) {
    throw Error("cli", std::string("bad config: ") + ex.what());
  }
  return c;
}

/// Parses "a.b.c=value". The value is read as JSON when it parses, else as a
/// plain string.
inline nlohmann::json override_patch(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) throw Error("cli", "override must look like key=value");
  const std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  nlohmann::json patch = value;
  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = nlohmann::json{{*it, patch}};
  return patch;
}

inline nlohmann::json parse_config_text(std::string_view text) {
  try {
    return nlohmann::json::parse(text.begin(), text.end(), nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::exception& e) {
    throw Error("cli", std::string("cannot parse config: ") + e.what());
  }
}

/// Defaults, then `patch` (a parsed config document), then each override in
/// order. Null values reset a field to null rather than deleting it.
inline RunConfig resolve_config(const nlohmann::json& patch, std::span<const std::string> overrides) {
  nlohmann::json j = config_to_json(RunConfig{});
  const nlohmann::json defaults = j;
  std::function<void(nlohmann::json&, const nlohmann::json&)> merge = [&](nlohmann::json& dst,
                                                                        const nlohmann::json& src) {
    for (auto it = src.begin(); it != src.end(); ++it) {
      if (it.value().is_object() && dst.contains(it.key()) && dst[it.key()].is_object())
        merge(dst[it.key()], it.value());
      else
        dst[it.key()] = it.value();
    }
  };
  auto apply = [&](const nlohmann::json& p) {
    if (!p.is_object()) throw Error("cli", "config must be a JSON object");
    detail::check_known_keys(defaults, p, "");
    merge(j, p);
  };
  if (!patch.is_null()) apply(patch);
  for (const auto& o : overrides) apply(override_patch(o));
  return config_from_json(j);
}

inline RunConfig resolve_config(const std::optional<fs::path>& file, std::span<const std::string> overrides = {}) {
  nlohmann::json patch;
  if (file) {
    std::ifstream in(*file, std::ios::binary);
    if (!in) throw Error("cli", "cannot open config " + file->string());
    std::string text((std::istreambuf_iterator<char>(in)), {});
    patch = parse_config_text(text);
  }
  return resolve_config(patch, overrides);
}

}  // namespace ttmm
