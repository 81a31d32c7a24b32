#pragma once

// Corpus input/output and the synthetic multi-domain corpus used for desk
// experiments.
//
// Each domain has its own character alphabet and surface style (prose, code,
// arithmetic, ...). Each domain is further split into subtopics, and every
// subtopic draws words from its own lexicon with a sparse word-bigram
// structure. Documents are one line of text, so they round-trip through the
// one-document-per-line corpus format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "ttmm/common.hpp"

namespace ttmm {

namespace fs = std::filesystem;

/// One document per non-empty line of a file, or one document per regular
/// file (sorted by name) under a directory. Trailing '\r' and '\n' are
/// stripped.
inline std::vector<std::string> read_corpus(const fs::path& path) {
  std::vector<std::string> docs;
  auto strip = [](std::string s) {
    while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
    return s;
  };
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(path))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      std::ifstream in(f, std::ios::binary);
      std::string s((std::istreambuf_iterator<char>(in)), {});
      s = strip(std::move(s));
      if (!s.empty()) docs.push_back(std::move(s));
    }
  } else {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("corpus", "cannot open corpus " + path.string());
    std::string line;
    while (std::getline(in, line)) {
      line = strip(std::move(line));
      if (!line.empty()) docs.push_back(std::move(line));
    }
  }
  if (docs.empty()) throw Error("corpus", "corpus " + path.string() + " is empty");
  return docs;
}

inline void write_corpus(const fs::path& path, const std::vector<std::string>& docs) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("corpus", "cannot write " + path.string());
  for (const auto& d : docs) {
    if (d.find('\n') != std::string::npos) throw Error("corpus", "documents must not contain newlines");
    out << d << '\n';
  }
}

struct SyntheticCorpusConfig {
  std::size_t domains = 8;
  std::size_t subtopics = 4;  // per domain
  std::size_t docs_per_domain = 400;
  std::size_t lexicon_size = 24;  // words per subtopic
  std::size_t shared_words = 8;   // per domain, used by every subtopic
  double secondary_mix = 0.25;    // share of words drawn from a second subtopic
  std::size_t min_chars = 140;
  std::size_t max_chars = 200;
  std::uint64_t seed = 1;
};

struct LabeledDocument {
  std::string text;
  std::size_t domain = 0;
  std::size_t subtopic = 0;
};

namespace detail {

struct DomainStyle {
  std::string alphabet;
  std::string word_sep;
  std::string sentence_end;
  std::string open, close;  // wraps every few words
  std::size_t min_word, max_word;
};

// Surface styles; domains beyond the list reuse styles with fresh alphabets.
inline DomainStyle style_for(std::size_t domain) {
  static const DomainStyle kStyles[] = {
      {"etaoinshrdlu", " ", ". ", "", "", 3, 7},     // prose
      {"abcdefxyz_", "_", "; ", "(", ")", 3, 6},     // code identifiers
      {"0123456789", "+", "= ", "", "", 1, 3},       // arithmetic
      {"mnpqrstvwk", ",", "| ", "[", "]", 2, 5},     // lists
      {"bcdgjkoquz", "-", "/ ", "<", ">", 3, 6},     // markup
      {"aeioulmnrv", ".", ": ", "{", "}", 2, 6},     // paths
      {"fghjpwy0123", " ", "! ", "'", "'", 2, 5},    // quoted talk
      {"ACEGIKMOQS", " ", "# ", "*", "*", 3, 6},     // shouted headers
  };
  return kStyles[domain % std::size(kStyles)];
}

inline std::string random_word(std::mt19937_64& rng, const DomainStyle& st) {
  std::uniform_int_distribution<std::size_t> len(st.min_word, st.max_word);
  std::uniform_int_distribution<std::size_t> ch(0, st.alphabet.size() - 1);
  std::string w;
  std::size_t n = len(rng);
  for (std::size_t i = 0; i < n; ++i) w.push_back(st.alphabet[ch(rng)]);
  return w;
}

struct Lexicon {
  std::vector<std::string> words;
  std::vector<std::vector<std::size_t>> successors;  // preferred next words
  std::vector<double> zipf;
};

inline Lexicon make_lexicon(std::mt19937_64& rng, const DomainStyle& st, std::size_t size) {
  Lexicon lx;
  while (lx.words.size() < size) {
    auto w = random_word(rng, st);
    if (std::find(lx.words.begin(), lx.words.end(), w) == lx.words.end()) lx.words.push_back(std::move(w));
  }
  std::uniform_int_distribution<std::size_t> pick(0, size - 1);
  lx.successors.resize(size);
  for (auto& s : lx.successors)
    for (int i = 0; i < 3; ++i) s.push_back(pick(rng));
  for (std::size_t i = 0; i < size; ++i) lx.zipf.push_back(1.0 / static_cast<double>(i + 1));
  return lx;
}

}  // namespace detail

/// Generates `domains * docs_per_domain` documents, interleaved by domain.
/// `lexicon_seed` selects the vocabulary of words; corpora that share a
/// lexicon seed share subtopics. A different lexicon seed with the same
/// styles yields a "general" corpus suitable for pre-training.
inline std::vector<LabeledDocument> generate_synthetic_corpus(const SyntheticCorpusConfig& cfg,
                                                              std::uint64_t lexicon_seed) {
  if (cfg.domains < 1 || cfg.subtopics < 1 || cfg.docs_per_domain < 1)
    throw Error("corpus", "synthetic corpus needs at least one domain, subtopic and document");
  if (cfg.min_chars > cfg.max_chars) throw Error("corpus", "min_chars > max_chars");

  struct Domain {
    detail::DomainStyle style;
    detail::Lexicon shared;
    std::vector<detail::Lexicon> topics;
  };
  std::vector<Domain> domains;
  for (std::size_t d = 0; d < cfg.domains; ++d) {
    std::mt19937_64 lrng(derive_seed(lexicon_seed, d));
    Domain dom;
    dom.style = detail::style_for(d);
    if (d >= 8) std::shuffle(dom.style.alphabet.begin(), dom.style.alphabet.end(), lrng);
    dom.shared = detail::make_lexicon(lrng, dom.style, std::max<std::size_t>(1, cfg.shared_words));
    for (std::size_t s = 0; s < cfg.subtopics; ++s)
      dom.topics.push_back(detail::make_lexicon(lrng, dom.style, cfg.lexicon_size));
    domains.push_back(std::move(dom));
  }

  std::mt19937_64 rng(derive_seed(cfg.seed, lexicon_seed ^ 0xc0de));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> len(cfg.min_chars, cfg.max_chars);
  std::vector<LabeledDocument> out;
  out.reserve(cfg.domains * cfg.docs_per_domain);
  for (std::size_t i = 0; i < cfg.docs_per_domain; ++i) {
    for (std::size_t d = 0; d < cfg.domains; ++d) {
      const auto& dom = domains[d];
      const std::size_t topic = std::uniform_int_distribution<std::size_t>(0, cfg.subtopics - 1)(rng);
      const auto& lx = dom.topics[topic];
      std::size_t other = topic;
      if (cfg.subtopics > 1) {
        other = std::uniform_int_distribution<std::size_t>(0, cfg.subtopics - 2)(rng);
        if (other >= topic) ++other;
      }
      const auto& lx2 = dom.topics[other];
      std::discrete_distribution<std::size_t> zipf(lx.zipf.begin(), lx.zipf.end());
      std::discrete_distribution<std::size_t> shared_zipf(dom.shared.zipf.begin(), dom.shared.zipf.end());
      const std::size_t target = len(rng);
      std::string text;
      std::size_t cur = zipf(rng), cur2 = zipf(rng);
      std::size_t in_sentence = 0;
      while (text.size() < target) {
        std::string word;
        double r = u(rng);
        if (r < 0.15) {
          word = dom.shared.words[shared_zipf(rng)];
        } else if (u(rng) < cfg.secondary_mix) {
          cur2 = r < 0.65 ? lx2.successors[cur2][std::uniform_int_distribution<int>(0, 2)(rng)] : zipf(rng);
          word = lx2.words[cur2];
        } else {
          cur = r < 0.65 ? lx.successors[cur][std::uniform_int_distribution<int>(0, 2)(rng)] : zipf(rng);
          word = lx.words[cur];
        }
        if (!dom.style.open.empty() && u(rng) < 0.2) word = dom.style.open + word + dom.style.close;
        text += word;
        ++in_sentence;
        if (in_sentence >= 4 && u(rng) < 0.25) {
          text += dom.style.sentence_end;
          in_sentence = 0;
        } else {
          text += dom.style.word_sep;
        }
      }
      while (!text.empty() && text.back() == ' ') text.pop_back();
      if (text.size() > cfg.max_chars) text.resize(cfg.max_chars);
      out.push_back({std::move(text), d, topic});
    }
  }
  return out;
}

inline std::vector<std::string> texts_of(const std::vector<LabeledDocument>& docs) {
  std::vector<std::string> t;
  t.reserve(docs.size());
  for (const auto& d : docs) t.push_back(d.text);
  return t;
}

}  // namespace ttmm
