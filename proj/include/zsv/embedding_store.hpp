#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "zsv/ensemble.hpp"
#include "zsv/hash.hpp"
#include "zsv/image_io.hpp"
#include "zsv/io.hpp"
#include "zsv/transport.hpp"

namespace zsv {

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr char store_magic[4] = {'Z', 'S', 'E', 'B'};
inline constexpr std::uint16_t store_version = 1;
inline constexpr double store_norm_tolerance = 1e-3;

// Id-keyed unit-norm vectors of one dimension. Insertion order is kept so
// serialization is deterministic.
class EmbeddingStore {
 public:
  explicit EmbeddingStore(std::size_t dimension = 0) : dimension_(dimension) {}

  std::size_t dimension() const { return dimension_; }
  std::size_t size() const { return vectors_.size(); }
  const std::vector<std::string>& ids() const { return ids_; }

  // Normalizes raw encoder output and records its original norm.
  void insert(const std::string& id, std::span<const double> raw) {
    check_dimension(raw.size(), id);
    auto v = EmbeddingVector::normalize(raw);
    double n = 0;
    for (double x : raw) n += x * x;
    original_norms_[id] = std::sqrt(n);
    put(id, std::move(v));
  }

  void insert(const std::string& id, EmbeddingVector v) {
    check_dimension(v.dimension(), id);
    put(id, std::move(v));
  }

  const EmbeddingVector* find(std::string_view id) const {
    auto it = index_.find(std::string(id));
    return it == index_.end() ? nullptr : &vectors_[it->second];
  }

  const EmbeddingVector& at(std::string_view id) const {
    if (auto* v = find(id)) return *v;
    throw std::out_of_range("no embedding for '" + std::string(id) + "'");
  }

  bool contains(std::string_view id) const { return find(id) != nullptr; }

  std::optional<double> original_norm(std::string_view id) const {
    auto it = original_norms_.find(std::string(id));
    if (it == original_norms_.end()) return std::nullopt;
    return it->second;
  }

 private:
  void check_dimension(std::size_t d, const std::string& id) {
    if (dimension_ == 0) dimension_ = d;
    if (d != dimension_)
      throw DimensionError("'" + id + "' has dimension " + std::to_string(d) + ", store expects " +
                           std::to_string(dimension_));
  }

  void put(const std::string& id, EmbeddingVector v) {
    if (id.size() > 0xFFFF) throw std::invalid_argument("embedding id longer than 65535 bytes");
    auto [it, fresh] = index_.emplace(id, vectors_.size());
    if (fresh) {
      ids_.push_back(id);
      vectors_.push_back(std::move(v));
    } else {
      vectors_[it->second] = std::move(v);
    }
  }

  std::size_t dimension_;
  std::vector<std::string> ids_;
  std::vector<EmbeddingVector> vectors_;
  std::unordered_map<std::string, std::size_t> index_;
  std::unordered_map<std::string, double> original_norms_;
};

namespace detail {

template <typename T>
void put_le(std::string& out, T value) {
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) out += static_cast<char>((u >> (8 * i)) & 0xFF);
}

template <typename T>
T get_le(std::string_view in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw FormatError("truncated embedding store");
  std::make_unsigned_t<T> u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    u |= static_cast<std::make_unsigned_t<T>>(static_cast<std::uint8_t>(in[pos + i])) << (8 * i);
  pos += sizeof(T);
  return static_cast<T>(u);
}

}  // namespace detail

inline std::string serialize_store(const EmbeddingStore& store) {
  std::string out(store_magic, 4);
  detail::put_le<std::uint16_t>(out, store_version);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(store.dimension()));
  detail::put_le<std::uint64_t>(out, store.size());
  for (const auto& id : store.ids()) {
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(id.size()));
    out += id;
    for (float f : store.at(id).values()) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

inline EmbeddingStore deserialize_store(std::string_view data) {
  if (data.size() < 4 || std::memcmp(data.data(), store_magic, 4) != 0) throw FormatError("bad magic (expected ZSEB)");
  std::size_t pos = 4;
  auto version = detail::get_le<std::uint16_t>(data, pos);
  if (version != store_version) throw FormatError("unsupported store version " + std::to_string(version));
  auto dim = detail::get_le<std::uint32_t>(data, pos);
  auto count = detail::get_le<std::uint64_t>(data, pos);
  if (dim == 0 && count > 0) throw DimensionError("store declares dimension 0");
  EmbeddingStore store(dim);
  for (std::uint64_t r = 0; r < count; ++r) {
    auto len = detail::get_le<std::uint16_t>(data, pos);
    if (pos + len > data.size()) throw FormatError("truncated embedding id");
    std::string id(data.substr(pos, len));
    pos += len;
    std::vector<float> values(dim);
    for (auto& f : values) f = std::bit_cast<float>(detail::get_le<std::uint32_t>(data, pos));
    for (float f : values)
      if (!std::isfinite(f)) throw NonFiniteVector("non-finite value in '" + id + "'");
    const double n = l2_norm(values);
    if (std::abs(n - 1.0) > store_norm_tolerance)
      throw FormatError("'" + id + "' is not unit norm (|v| = " + std::to_string(n) + ")");
    // Values written from float-normalized vectors sit well inside 1e-6 and
    // are kept bit-exact; anything looser is renormalized.
    if (std::abs(n - 1.0) > 1e-6)
      store.insert(id, EmbeddingVector::normalize(std::span<const float>(values)));
    else
      store.insert(id, EmbeddingVector::from_unit(std::move(values)));
  }
  if (pos != data.size()) throw FormatError("trailing bytes after last record");
  return store;
}

inline void write_store(const EmbeddingStore& store, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_store(store));
}

inline EmbeddingStore read_store(const std::filesystem::path& path) { return deserialize_store(read_file(path)); }

// Encoder behind the engine; implementations must be deterministic for
// identical inputs within one session.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::vector<EmbeddingVector> embed_texts(const std::vector<std::string>& texts) = 0;
  virtual std::vector<EmbeddingVector> embed_images(const std::vector<EncodedImage>& images) = 0;
  virtual std::size_t dimension() const = 0;
};

inline std::string text_content_key(std::string_view text) { return "t" + to_hex16(fnv1a64_fields({"text", text})); }
inline std::string image_content_key(std::string_view bytes) {
  return "i" + to_hex16(fnv1a64_fields({"image", bytes}));
}

// Embedding service client. Request: POST {path} with
//   {"model": m, "input": [{"type": "text", "text": s}
//                         | {"type": "image", "mime": t, "data": <base64>}]}
// Response: {"data": [{"embedding": [f, ...]}]}.
// Each distinct input is sent once; results are cached under content keys.
class RemoteEmbeddingProvider final : public EmbeddingProvider {
 public:
  RemoteEmbeddingProvider(HttpTransport& transport, std::string model, std::size_t dimension, EmbeddingStore& cache,
                          TransportPolicy policy = {}, Clock* clock = nullptr, std::string api_key = {},
                          std::string path = "/v1/embeddings")
      : transport_(transport),
        model_(std::move(model)),
        dimension_(dimension),
        cache_(cache),
        policy_(policy),
        clock_(clock ? clock : &default_clock_),
        api_key_(std::move(api_key)),
        path_(std::move(path)) {
    if (cache_.dimension() != 0 && cache_.dimension() != dimension_)
      throw DimensionError("cache dimension " + std::to_string(cache_.dimension()) + " differs from provider " +
                           std::to_string(dimension_));
  }

  std::size_t dimension() const override { return dimension_; }
  std::size_t network_requests() const { return requests_; }

  std::vector<EmbeddingVector> embed_texts(const std::vector<std::string>& texts) override {
    std::vector<EmbeddingVector> out;
    out.reserve(texts.size());
    for (const auto& t : texts)
      out.push_back(fetch(text_content_key(t), nlohmann::json{{"type", "text"}, {"text", t}}));
    return out;
  }

  std::vector<EmbeddingVector> embed_images(const std::vector<EncodedImage>& images) override {
    std::vector<EmbeddingVector> out;
    out.reserve(images.size());
    for (const auto& img : images)
      out.push_back(fetch(image_content_key(img.bytes),
                          nlohmann::json{{"type", "image"}, {"mime", img.mime}, {"data", base64_encode(img.bytes)}}));
    return out;
  }

 private:
  EmbeddingVector fetch(const std::string& key, const nlohmann::json& input) {
    {
      std::lock_guard lk(mu_);
      if (auto* v = cache_.find(key)) return *v;
    }
    nlohmann::json body{{"model", model_}, {"input", nlohmann::json::array({input})}};
    Headers headers{{"X-Request-Key", key}};
    if (!api_key_.empty()) headers["Authorization"] = "Bearer " + api_key_;
    auto res = send_with_retry(transport_, path_, body.dump(), headers, policy_, *clock_);
    ++requests_;
    nlohmann::json parsed;
    try {
      parsed = nlohmann::json::parse(res.body);
    } catch (const nlohmann::json::exception& e) {
      throw TransportError(std::string("malformed embedding response: ") + e.what());
    }
    if (!parsed.contains("data") || !parsed["data"].is_array() || parsed["data"].size() != 1 ||
        !parsed["data"][0].contains("embedding") || !parsed["data"][0]["embedding"].is_array())
      throw TransportError("embedding response missing data[0].embedding");
    std::vector<double> raw;
    for (const auto& x : parsed["data"][0]["embedding"]) {
      if (!x.is_number()) throw NonFiniteVector("embedding component is not a number");
      raw.push_back(x.get<double>());
    }
    if (raw.size() != dimension_)
      throw DimensionError("service returned dimension " + std::to_string(raw.size()) + ", expected " +
                           std::to_string(dimension_));
    for (double x : raw)
      if (!std::isfinite(x)) throw NonFiniteVector("service returned a non-finite component");
    std::lock_guard lk(mu_);
    cache_.insert(key, std::span<const double>(raw));
    return cache_.at(key);
  }

  HttpTransport& transport_;
  std::string model_;
  std::size_t dimension_;
  EmbeddingStore& cache_;
  TransportPolicy policy_;
  SteadyClock default_clock_;
  Clock* clock_;
  std::string api_key_;
  std::string path_;
  std::mutex mu_;
  std::size_t requests_ = 0;
};

}  // namespace zsv
