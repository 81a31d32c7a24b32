#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <string>

#include "ttmm/embed.hpp"

using namespace ttmm;

namespace {

// Reference hash written out from the definitions: FNV-1a 64 seeded with
// offset ^ splitmix(seed), then a splitmix finalizer.
std::uint64_t ref_splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t ref_hash(std::uint64_t seed, const std::string& gram) {
  std::uint64_t h = 0xcbf29ce484222325ULL ^ ref_splitmix(seed);
  for (unsigned char c : gram) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return ref_splitmix(h);
}

std::set<std::size_t> ref_buckets(const EmbedderConfig& c, const std::string& text) {
  std::set<std::size_t> b;
  for (auto n : c.ngram_orders)
    for (std::size_t i = 0; i + n <= text.size(); ++i) b.insert(ref_hash(c.hash_seed, text.substr(i, n)) % c.dim);
  return b;
}

}  // namespace

TEST(Embed, Deterministic) {
  EmbedderConfig c;
  auto a = embed(c, "abc"), b = embed(c, "abc");
  EXPECT_EQ(a.values, b.values);
}

TEST(Embed, UnitNorm) {
  EmbedderConfig c;
  for (const char* s : {"ab", "hello world", "0123456789+-*/", "zzzzzzzzzzzzzzzzzzzzzz"})
    EXPECT_NEAR(l2_norm(embed(c, s).span()), 1.0, 1e-6) << s;
}

TEST(Embed, Errors) {
  EmbedderConfig c;
  try {
    embed(c, "");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(std::string(e.what()), "empty sequence");
    EXPECT_EQ(e.module(), "embed");
  }
  // Shorter than every n-gram order: nothing to hash.
  EXPECT_THROW(
      {
        try {
          embed(c, "a");
        } catch (const Error& e) {
          EXPECT_EQ(std::string(e.what()), "degenerate embedding");
          throw;
        }
      },
      Error);
  EmbedderConfig bad;
  bad.dim = 4;
  EXPECT_THROW(bad.validate(), Error);
  bad = {};
  bad.ngram_orders = {};
  EXPECT_THROW(bad.validate(), Error);
  bad.ngram_orders = {0};
  EXPECT_THROW(bad.validate(), Error);
}

TEST(Embed, HashMatchesReference) {
  EmbedderConfig c;
  for (const char* g : {"ab", "xyz", "1234", "a b"}) EXPECT_EQ(ngram_hash(c.hash_seed, g), ref_hash(c.hash_seed, g));
}

TEST(Embed, DisjointBucketsGiveZeroCosine) {
  EmbedderConfig c;
  c.dim = 64;
  c.ngram_orders = {2};
  // Search two-character texts until the reference buckets are disjoint.
  const std::string a = "qq";
  const auto ba = ref_buckets(c, a);
  std::string found;
  for (char x = 'a'; x <= 'z' && found.empty(); ++x)
    for (char y = 'a'; y <= 'z' && found.empty(); ++y) {
      std::string b{x, y, x};
      auto bb = ref_buckets(c, b);
      bool disjoint = true;
      for (auto k : bb) disjoint = disjoint && !ba.count(k);
      if (disjoint) found = b;
    }
  ASSERT_FALSE(found.empty());
  EXPECT_EQ(cosine(embed(c, a), embed(c, found)), 0.0);
}

TEST(Embed, MeanPooledSignedCounts) {
  EmbedderConfig c;
  c.dim = 32;
  c.ngram_orders = {1, 2};
  const std::string t = "abab";
  std::vector<double> acc(c.dim, 0.0);
  for (auto n : c.ngram_orders)
    for (std::size_t i = 0; i + n <= t.size(); ++i) {
      auto h = ref_hash(c.hash_seed, t.substr(i, n));
      acc[h % c.dim] += ((h >> 32) & 1) ? 1.0 : -1.0;
    }
  double norm = 0;
  for (double x : acc) norm += x * x;
  norm = std::sqrt(norm);
  auto e = embed(c, t);
  for (std::size_t i = 0; i < c.dim; ++i) EXPECT_NEAR(e[i], acc[i] / norm, 1e-7);
}

TEST(Embed, CosineExamples) {
  EmbedderConfig c;
  auto v = embed(c, "some text");
  EXPECT_NEAR(cosine(v, v), 1.0, 1e-6);
  std::vector<float> neg(v.values);
  for (auto& x : neg) x = -x;
  EXPECT_NEAR(cosine(v, EmbeddingVector(neg)), -1.0, 1e-6);
  EmbeddingVector e1(std::vector<float>{1, 0, 0}), e2(std::vector<float>{0, 1, 0});
  EXPECT_EQ(cosine(e1, e2), 0.0);
  auto w = embed(c, "other words here");
  EXPECT_EQ(cosine(v, w), cosine(w, v));
}

TEST(Embed, EmbedderInterface) {
  HashedNgramEmbedder e;
  EXPECT_EQ(e.dim(), 256u);
  std::vector<std::string> texts{"abc", "def"};
  auto all = e.embed_all(texts);
  ASSERT_EQ(all.size(), 2u);
  EXPECT_EQ(all[1], e.embed("def"));
  EXPECT_NE(e.fingerprint(), HashedNgramEmbedder(EmbedderConfig{128, {2, 3, 4}, 0x74746d6d}).fingerprint());
}
