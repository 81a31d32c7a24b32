#pragma once

// On-disk expert catalog.
//
// Adapter file (all integers and reals little-endian):
//
//   "TTMM"  u16 version  u8[32] base fingerprint  u32 matrix count
//   per matrix:
//     u32 name length, name bytes, u32 d_out, u32 d_in, u32 r, f32 alpha,
//     A (r x d_in, row-major f32), B (d_out x r, row-major f32)
//   u64 FNV-1a checksum of every preceding byte
//
// Base model file: "TTMB" u16 version, u32 symbol count + symbol bytes,
// u32 V, u32 h, then embed, rec, rec_bias, dense, dense_bias, out, out_bias
// as f32, and the same trailing checksum.
//
// Catalog directory: manifest.json, base.ttmb, adapters/expert_NNNN.ttmm.

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <atomic>
#include <bit>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ttmm/common.hpp"
#include "ttmm/embed.hpp"
#include "ttmm/lm.hpp"
#include "ttmm/merge.hpp"
#include "ttmm/router.hpp"

namespace ttmm {

namespace fs = std::filesystem;
using Digest = std::array<std::uint8_t, 32>;

inline constexpr std::uint16_t kAdapterVersion = 1;
inline constexpr std::uint16_t kBaseVersion = 1;

namespace io {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  template <class U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u16(std::uint16_t v) { uint(v); }
  void u32(std::uint32_t v) { uint(v); }
  void u64(std::uint64_t v) { uint(v); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f32s(std::span<const float> v) {
    for (float x : v) f32(x);
  }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void checksum() { u64(fnv1a(buf_.data(), buf_.size())); }
  const std::vector<std::uint8_t>& data() const noexcept { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> data, std::string what) : d_(data), what_(std::move(what)) {}

  void need(std::size_t n) const {
    if (pos_ + n > d_.size()) throw Error("store", "corrupt " + what_ + ": truncated");
  }
  template <class U>
  U uint() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(d_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  std::uint16_t u16() { return uint<std::uint16_t>(); }
  std::uint32_t u32() { return uint<std::uint32_t>(); }
  std::uint64_t u64() { return uint<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(u32()); }
  void f32s(std::span<float> out) {
    need(out.size() * 4);
    for (float& x : out) x = f32();
  }
  std::string str(std::size_t max_len = 1 << 16) {
    auto n = u32();
    if (n > max_len) throw Error("store", "corrupt " + what_ + ": string too long");
    need(n);
    std::string s(reinterpret_cast<const char*>(d_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, d_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t pos() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return d_.size() - pos_; }

 private:
  std::span<const std::uint8_t> d_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline std::atomic<std::uint64_t>& open_counter() {
  static std::atomic<std::uint64_t> n{0};
  return n;
}

inline std::vector<std::uint8_t> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("store", "cannot open " + p.string());
  open_counter().fetch_add(1);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const fs::path& p, std::span<const std::uint8_t> data) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("store", "cannot write " + p.string());
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw Error("store", "short write to " + p.string());
}

/// Verifies and strips the trailing checksum.
inline std::span<const std::uint8_t> verified_body(std::span<const std::uint8_t> data, const std::string& err) {
  if (data.size() < 8) throw Error("store", err);
  auto body = data.first(data.size() - 8);
  Reader tail(data.subspan(data.size() - 8), err);
  if (tail.u64() != fnv1a(body.data(), body.size())) throw Error("store", err);
  return body;
}

}  // namespace io

/// Number of files opened by the store since process start (instrumentation).
inline std::uint64_t store_file_opens() { return io::open_counter().load(); }

inline std::string to_hex(std::span<const std::uint8_t> b) {
  std::ostringstream os;
  for (auto x : b) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(x);
  return os.str();
}

inline std::string to_hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline Digest digest_from_hex(std::string_view s) {
  if (s.size() != 64) throw Error("store", "bad fingerprint length");
  Digest d{};
  for (std::size_t i = 0; i < 32; ++i) d[i] = static_cast<std::uint8_t>(std::stoul(std::string(s.substr(2 * i, 2)), nullptr, 16));
  return d;
}

inline Digest sha256(std::span<const std::uint8_t> data) {
  Digest out{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 || len != 32)
    throw Error("store", "SHA-256 failed");
  return out;
}

// ---------------------------------------------------------------------------
// Base model

inline std::vector<std::uint8_t> serialize_base(const BaseParams<float>& base, const Vocab& vocab) {
  io::Writer w;
  w.bytes("TTMB", 4);
  w.u16(kBaseVersion);
  w.str(vocab.symbols());
  w.u32(static_cast<std::uint32_t>(base.vocab_size()));
  w.u32(static_cast<std::uint32_t>(base.hidden()));
  auto copy = base;
  copy.for_each_tensor([&](const std::vector<float>& v) { w.f32s(v); });
  w.checksum();
  return w.data();
}

/// SHA-256 over the serialized base model (vocabulary, shapes, parameters).
inline Digest base_fingerprint(const BaseParams<float>& base, const Vocab& vocab) {
  auto bytes = serialize_base(base, vocab);
  return sha256(std::span<const std::uint8_t>(bytes).first(bytes.size() - 8));
}

struct BaseModel {
  Vocab vocab;
  BaseParams<float> params;
  Digest fingerprint{};
};

inline std::size_t save_base(const BaseParams<float>& base, const Vocab& vocab, const fs::path& path) {
  auto bytes = serialize_base(base, vocab);
  io::write_file(path, bytes);
  return bytes.size();
}

inline BaseModel load_base(const fs::path& path) {
  auto data = io::read_file(path);
  auto body = io::verified_body(data, "corrupt base model");
  io::Reader r(body, "base model");
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "TTMB", 4) != 0) throw Error("store", "corrupt base model: bad magic");
  if (r.u16() != kBaseVersion) throw Error("store", "unsupported base model version");
  BaseModel m;
  m.vocab = Vocab::from_symbols(r.str());
  const auto V = r.u32(), h = r.u32();
  if (V != m.vocab.size()) throw Error("store", "corrupt base model: vocab size mismatch");
  m.params = BaseParams<float>(V, h);
  m.params.for_each_tensor([&](std::vector<float>& v) { r.f32s(v); });
  if (r.remaining() != 0) throw Error("store", "corrupt base model: trailing bytes");
  m.fingerprint = sha256(body);
  return m;
}

// ---------------------------------------------------------------------------
// Adapters

/// Exact file size for an adapter: header, per-matrix records, checksum.
inline std::size_t adapter_byte_size(const LoraAdapter<float>& a) {
  std::size_t n = 4 + 2 + 32 + 4;
  for (const auto& t : a.targets) n += 4 + t.name.size() + 4 * 3 + 4 + 4 * (t.rank * t.d_in + t.d_out * t.rank);
  return n + 8;
}

inline std::vector<std::uint8_t> serialize_adapter(const LoraAdapter<float>& a, const Digest& base_fp) {
  io::Writer w;
  w.bytes("TTMM", 4);
  w.u16(kAdapterVersion);
  w.bytes(base_fp.data(), base_fp.size());
  w.u32(static_cast<std::uint32_t>(a.targets.size()));
  for (const auto& t : a.targets) {
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.d_out));
    w.u32(static_cast<std::uint32_t>(t.d_in));
    w.u32(static_cast<std::uint32_t>(t.rank));
    w.f32(t.alpha);
    w.f32s(t.A.data);
    w.f32s(t.B.data);
  }
  w.checksum();
  return w.data();
}

/// Writes the adapter and returns the number of bytes written.
inline std::size_t save_adapter(const LoraAdapter<float>& a, const fs::path& path, const Digest& base_fp) {
  auto bytes = serialize_adapter(a, base_fp);
  io::write_file(path, bytes);
  return bytes.size();
}

inline LoraAdapter<float> parse_adapter(std::span<const std::uint8_t> data, const Digest* expected_base) {
  auto body = io::verified_body(data, "corrupt adapter");
  io::Reader r(body, "adapter");
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "TTMM", 4) != 0) throw Error("store", "corrupt adapter: bad magic");
  if (r.u16() != kAdapterVersion) throw Error("store", "unsupported adapter version");
  Digest fp{};
  r.bytes(fp.data(), fp.size());
  if (expected_base && fp != *expected_base) throw Error("store", "adapter was trained for a different base model");
  const auto count = r.u32();
  LoraAdapter<float> a;
  for (std::uint32_t m = 0; m < count; ++m) {
    LoraFactors<float> f;
    f.name = r.str(256);
    f.d_out = r.u32();
    f.d_in = r.u32();
    f.rank = r.u32();
    f.alpha = r.f32();
    if (f.rank == 0) throw Error("store", "corrupt adapter: zero rank");
    r.need(4 * (f.rank * f.d_in + f.d_out * f.rank));
    f.A = Matrix<float>(f.rank, f.d_in);
    f.B = Matrix<float>(f.d_out, f.rank);
    r.f32s(f.A.data);
    r.f32s(f.B.data);
    a.targets.push_back(std::move(f));
  }
  if (r.remaining() != 0) throw Error("store", "corrupt adapter: trailing bytes");
  return a;
}

inline LoraAdapter<float> load_adapter(const fs::path& path, const Digest* expected_base = nullptr) {
  return parse_adapter(io::read_file(path), expected_base);
}

/// Loads and checks every matrix shape against the base model.
inline LoraAdapter<float> load_adapter(const fs::path& path, const BaseModel& base) {
  auto a = load_adapter(path, &base.fingerprint);
  try {
    check_adapter_shapes(base.params, a);
  } catch (const Error& e) {
    throw Error("store", e.what());
  }
  return a;
}

// ---------------------------------------------------------------------------
// Catalog

struct ExpertRecord {
  ExpertId id = 0;
  EmbeddingVector centroid;
  std::size_t cluster_size = 0;
  std::string adapter_path;  // relative to the catalog directory
  std::size_t byte_size = 0;
  std::uint64_t checksum = 0;

  friend bool operator==(const ExpertRecord&, const ExpertRecord&) = default;
};

struct ExpertCatalog {
  fs::path dir;
  std::string embedder_fingerprint;
  EmbedderConfig embedder;
  std::string base_path = "base.ttmb";
  Digest base_fingerprint{};
  std::vector<ExpertRecord> experts;
  nlohmann::json extra = nlohmann::json::object();  // config echo, split, ...

  std::size_t size() const noexcept { return experts.size(); }

  std::vector<EmbeddingVector> centroids() const {
    std::vector<EmbeddingVector> c;
    c.reserve(experts.size());
    for (const auto& e : experts) c.push_back(e.centroid);
    return c;
  }

  void validate() const {
    for (std::size_t k = 0; k < experts.size(); ++k) {
      if (experts[k].id != k) throw Error("store", "expert ids must be dense in [0, K)");
      if (std::abs(l2_norm(experts[k].centroid.span()) - 1.0) > 1e-5)
        throw Error("store", "centroid " + std::to_string(k) + " is not unit norm");
    }
  }

  bool manifest_equal(const ExpertCatalog& o) const {
    return embedder_fingerprint == o.embedder_fingerprint && base_path == o.base_path &&
           base_fingerprint == o.base_fingerprint && experts == o.experts && extra == o.extra;
  }
};

inline std::string adapter_relpath(ExpertId id) {
  std::ostringstream os;
  os << "adapters/expert_" << std::setw(4) << std::setfill('0') << id << ".ttmm";
  return os.str();
}

/// Adds an expert: writes its adapter under dir/adapters and records the
/// byte size and checksum in the manifest entry.
inline void add_expert(ExpertCatalog& cat, const EmbeddingVector& centroid, std::size_t cluster_size,
                       const LoraAdapter<float>& adapter) {
  ExpertRecord rec;
  rec.id = static_cast<ExpertId>(cat.experts.size());
  rec.centroid = centroid;
  rec.cluster_size = cluster_size;
  rec.adapter_path = adapter_relpath(rec.id);
  auto bytes = serialize_adapter(adapter, cat.base_fingerprint);
  io::write_file(cat.dir / rec.adapter_path, bytes);
  rec.byte_size = bytes.size();
  io::Reader tail(std::span<const std::uint8_t>(bytes).last(8), "adapter");
  rec.checksum = tail.u64();
  cat.experts.push_back(std::move(rec));
}

inline nlohmann::json embedder_to_json(const EmbedderConfig& c) {
  return {{"dim", c.dim}, {"ngram_orders", c.ngram_orders}, {"hash_seed", c.hash_seed}};
}

inline EmbedderConfig embedder_from_json(const nlohmann::json& j) {
  EmbedderConfig c;
  c.dim = j.at("dim").get<std::size_t>();
  c.ngram_orders = j.at("ngram_orders").get<std::vector<std::size_t>>();
  c.hash_seed = j.at("hash_seed").get<std::uint64_t>();
  c.validate();
  return c;
}

inline nlohmann::json manifest_to_json(const ExpertCatalog& cat) {
  nlohmann::json experts = nlohmann::json::array();
  for (const auto& e : cat.experts) {
    experts.push_back({{"id", e.id},
                       {"centroid", e.centroid.values},
                       {"cluster_size", e.cluster_size},
                       {"adapter_path", e.adapter_path},
                       {"byte_size", e.byte_size},
                       {"checksum", to_hex(e.checksum)}});
  }
  return {{"format", "ttmm-catalog"},
          {"version", 1},
          {"embedder", {{"fingerprint", cat.embedder_fingerprint}, {"config", embedder_to_json(cat.embedder)}}},
          {"base", {{"path", cat.base_path}, {"fingerprint", to_hex(cat.base_fingerprint)}}},
          {"experts", experts},
          {"extra", cat.extra}};
}

inline void save_manifest(const ExpertCatalog& cat) {
  cat.validate();
  auto text = manifest_to_json(cat).dump(2) + "\n";
  io::write_file(cat.dir / "manifest.json", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline ExpertCatalog load_catalog(const fs::path& dir) {
  auto bytes = io::read_file(dir / "manifest.json");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw Error("store", std::string("corrupt manifest: ") + e.what());
  }
  if (j.value("format", "") != "ttmm-catalog") throw Error("store", "not a catalog manifest");
  ExpertCatalog cat;
  cat.dir = dir;
  try {
    cat.embedder_fingerprint = j.at("embedder").at("fingerprint").get<std::string>();
    cat.embedder = embedder_from_json(j.at("embedder").at("config"));
    cat.base_path = j.at("base").at("path").get<std::string>();
    cat.base_fingerprint = digest_from_hex(j.at("base").at("fingerprint").get<std::string>());
    for (const auto& e : j.at("experts")) {
      ExpertRecord r;
      r.id = e.at("id").get<ExpertId>();
      r.centroid = EmbeddingVector(e.at("centroid").get<std::vector<float>>());
      r.cluster_size = e.at("cluster_size").get<std::size_t>();
      r.adapter_path = e.at("adapter_path").get<std::string>();
      r.byte_size = e.at("byte_size").get<std::size_t>();
      r.checksum = std::stoull(e.at("checksum").get<std::string>(), nullptr, 16);
      cat.experts.push_back(std::move(r));
    }
    cat.extra = j.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw Error("store", std::string("corrupt manifest: ") + e.what());
  }
  cat.validate();
  return cat;
}

inline BaseModel load_catalog_base(const ExpertCatalog& cat) {
  auto m = load_base(cat.dir / cat.base_path);
  if (m.fingerprint != cat.base_fingerprint) throw Error("store", "base model does not match catalog fingerprint");
  return m;
}

inline LoraAdapter<float> load_expert(const ExpertCatalog& cat, ExpertId id) {
  if (id >= cat.experts.size()) throw Error("store", "unknown expert " + std::to_string(id));
  const auto& rec = cat.experts[id];
  std::vector<std::uint8_t> data;
  try {
    data = io::read_file(cat.dir / rec.adapter_path);
  } catch (const Error&) {
    throw Error("store", "missing adapter file for expert " + std::to_string(id));
  }
  if (data.size() != rec.byte_size) throw Error("store", "corrupt adapter: size mismatch for expert " + std::to_string(id));
  auto a = parse_adapter(data, &cat.base_fingerprint);
  io::Reader tail(std::span<const std::uint8_t>(data).last(8), "adapter");
  if (tail.u64() != rec.checksum) throw Error("store", "corrupt adapter: checksum differs from manifest");
  return a;
}

// ---------------------------------------------------------------------------
// Dynamic loading and latency

using Seconds = std::chrono::duration<double>;

struct LatencyReport {
  Seconds select{0}, load{0}, merge{0};
  std::size_t n_active = 0;
  std::size_t bytes_loaded = 0;
};

struct LoadedExperts {
  AdapterMap adapters;
  LatencyReport latency;  // load and n_active/bytes_loaded filled
};

/// Loads exactly the support of `weights`.
inline LoadedExperts load_active(const ExpertCatalog& cat, const MergeWeights& weights) {
  LoadedExperts out;
  auto t0 = std::chrono::steady_clock::now();
  for (const auto& [id, w] : weights.entries) {
    if (id >= cat.size()) throw Error("store", "expert " + std::to_string(id) + " not in catalog");
    out.adapters.emplace(id, load_expert(cat, id));
    out.latency.bytes_loaded += cat.experts[id].byte_size;
  }
  out.latency.load = std::chrono::steady_clock::now() - t0;
  out.latency.n_active = weights.size();
  return out;
}

struct TimedMerge {
  MergedAdapter merged;
  LatencyReport latency;
};

/// route -> load_active -> merge_adapters, each phase timed separately.
inline TimedMerge timed_route_merge(const ExpertCatalog& cat, std::span<const EmbeddingVector> centroids,
                                    const EmbeddingVector& query, const RoutingConfig& cfg) {
  auto t0 = std::chrono::steady_clock::now();
  auto weights = route(query, centroids, cfg);
  auto t1 = std::chrono::steady_clock::now();
  auto loaded = load_active(cat, weights);
  auto t2 = std::chrono::steady_clock::now();
  auto merged = merge_adapters(weights, loaded.adapters);
  auto t3 = std::chrono::steady_clock::now();
  TimedMerge out{std::move(merged), loaded.latency};
  out.latency.select = t1 - t0;
  out.latency.load = t2 - t1;
  out.latency.merge = t3 - t2;
  return out;
}

inline TimedMerge timed_route_merge(const ExpertCatalog& cat, const EmbeddingVector& query,
                                    const RoutingConfig& cfg) {
  return timed_route_merge(cat, cat.centroids(), query, cfg);
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct BenchRow {
  double tau = 0, beta = 0;
  std::size_t repetitions = 0;
  double mean_active = 0;
  double select_ms = 0, load_ms = 0, merge_ms = 0;  // medians
  double mean_bytes_loaded = 0;
};

/// Latency sweep over (tau, beta). Every repetition routes each query once;
/// the reported durations are medians over repetitions of the per-query mean.
inline std::vector<BenchRow> bench_sweep(const ExpertCatalog& cat, std::span<const EmbeddingVector> queries,
                                         std::span<const double> taus, std::span<const double> betas,
                                         std::size_t repetitions) {
  if (queries.empty()) throw Error("store", "bench needs at least one query");
  if (repetitions < 1) throw Error("store", "repetitions must be >= 1");
  auto centroids = cat.centroids();
  std::vector<BenchRow> rows;
  for (double beta : betas)
    for (double tau : taus) {
      RoutingConfig cfg;
      cfg.beta = beta;
      cfg.tau = tau;
      std::vector<double> sel, load, mrg;
      double active = 0, bytes = 0;
      for (std::size_t rep = 0; rep < repetitions; ++rep) {
        double s = 0, l = 0, m = 0;
        for (const auto& q : queries) {
          auto r = timed_route_merge(cat, centroids, q, cfg);
          s += r.latency.select.count();
          l += r.latency.load.count();
          m += r.latency.merge.count();
          if (rep == 0) {
            active += static_cast<double>(r.latency.n_active);
            bytes += static_cast<double>(r.latency.bytes_loaded);
          }
        }
        const double nq = static_cast<double>(queries.size());
        sel.push_back(1e3 * s / nq);
        load.push_back(1e3 * l / nq);
        mrg.push_back(1e3 * m / nq);
      }
      BenchRow row;
      row.tau = tau;
      row.beta = beta;
      row.repetitions = repetitions;
      row.mean_active = active / static_cast<double>(queries.size());
      row.mean_bytes_loaded = bytes / static_cast<double>(queries.size());
      row.select_ms = median(sel);
      row.load_ms = median(load);
      row.merge_ms = median(mrg);
      rows.push_back(row);
    }
  return rows;
}

}  // namespace ttmm
