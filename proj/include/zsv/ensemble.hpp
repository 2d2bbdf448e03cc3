#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace zsv {

struct ZeroVector : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DimensionMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct RaggedK : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NonFiniteVector : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr double unit_norm_tolerance = 1e-4;

inline double l2_norm(std::span<const float> v) {
  double s = 0;
  for (float x : v) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

// Unit-norm embedding with float32 payload. Construct with normalize() for
// raw encoder output or from_unit() for values already normalized.
class EmbeddingVector {
 public:
  EmbeddingVector() = default;

  static EmbeddingVector from_unit(std::vector<float> values) {
    check_finite(values);
    double n = l2_norm(values);
    if (std::abs(n - 1.0) > unit_norm_tolerance)
      throw std::invalid_argument("embedding is not unit norm (|v| = " + std::to_string(n) + ")");
    return EmbeddingVector(std::move(values));
  }

  static EmbeddingVector normalize(std::span<const double> raw) {
    std::vector<float> tmp(raw.begin(), raw.end());
    double s = 0;
    for (double x : raw) {
      if (!std::isfinite(x)) throw NonFiniteVector("embedding has non-finite component");
      s += x * x;
    }
    double n = std::sqrt(s);
    if (n < 1e-12) throw ZeroVector("cannot normalize a zero vector");
    for (std::size_t i = 0; i < raw.size(); ++i) tmp[i] = static_cast<float>(raw[i] / n);
    return EmbeddingVector(std::move(tmp));
  }

  static EmbeddingVector normalize(std::span<const float> raw) {
    std::vector<double> tmp(raw.begin(), raw.end());
    return normalize(std::span<const double>(tmp));
  }

  std::size_t dimension() const { return values_.size(); }
  std::span<const float> values() const { return values_; }
  float operator[](std::size_t i) const { return values_[i]; }

  double dot(const EmbeddingVector& other) const {
    if (other.dimension() != dimension())
      throw DimensionMismatch("dimension " + std::to_string(dimension()) + " vs " + std::to_string(other.dimension()));
    double s = 0;
    for (std::size_t i = 0; i < values_.size(); ++i) s += static_cast<double>(values_[i]) * other.values_[i];
    return s;
  }

  friend bool operator==(const EmbeddingVector&, const EmbeddingVector&) = default;

 private:
  explicit EmbeddingVector(std::vector<float> v) : values_(std::move(v)) {}

  static void check_finite(const std::vector<float>& v) {
    for (float x : v)
      if (!std::isfinite(x)) throw NonFiniteVector("embedding has non-finite component");
  }

  std::vector<float> values_;
};

enum class SoftmaxAxis {
  per_slot,           // softmax over categories for each sentence slot, then mean over slots
  mean_then_softmax,  // mean similarity per category, then one softmax
};

struct EnsembleConfig {
  double logit_scale = 100.0;
  SoftmaxAxis axis = SoftmaxAxis::per_slot;
};

// sims[c][k]: cosine similarity between the vision embedding and sentence k
// of category c. Rows may differ in length only for mean_then_softmax.
struct ScoreMatrix {
  std::vector<std::vector<double>> sims;

  std::size_t categories() const { return sims.size(); }
  bool uniform_k() const {
    return std::all_of(sims.begin(), sims.end(), [&](const auto& r) { return r.size() == sims.front().size(); });
  }
};

struct Prediction {
  std::vector<std::size_t> ranked;
  std::vector<double> scores;
};

// Global average pooling over frame or view embeddings, renormalized.
inline EmbeddingVector pool_vision_embedding(std::span<const EmbeddingVector> frames) {
  if (frames.empty()) throw std::invalid_argument("no embeddings to pool");
  const std::size_t d = frames.front().dimension();
  std::vector<double> mean(d, 0.0);
  for (const auto& f : frames) {
    if (f.dimension() != d) throw DimensionMismatch("frame embeddings have mixed dimensions");
    for (std::size_t i = 0; i < d; ++i) mean[i] += f[i];
  }
  double s = 0;
  for (double& m : mean) {
    m /= static_cast<double>(frames.size());
    s += m * m;
  }
  if (std::sqrt(s) < 1e-9) throw ZeroVector("pooled embedding has (near) zero norm");
  return EmbeddingVector::normalize(std::span<const double>(mean));
}

inline ScoreMatrix score_matrix(const EmbeddingVector& vision,
                                const std::vector<std::vector<EmbeddingVector>>& text) {
  ScoreMatrix m;
  m.sims.reserve(text.size());
  for (const auto& row : text) {
    std::vector<double> r;
    r.reserve(row.size());
    for (const auto& t : row) r.push_back(vision.dot(t));
    m.sims.push_back(std::move(r));
  }
  return m;
}

namespace detail {

// Numerically stable softmax of scale * x.
inline std::vector<double> scaled_softmax(std::span<const double> x, double scale) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : x) mx = std::max(mx, scale * v);
  std::vector<double> out(x.size());
  double z = 0;
  for (std::size_t i = 0; i < x.size(); ++i) z += out[i] = std::exp(scale * x[i] - mx);
  for (double& v : out) v /= z;
  return out;
}

}  // namespace detail

inline std::vector<double> ensemble_scores(const ScoreMatrix& m, const EnsembleConfig& cfg = {}) {
  if (!(cfg.logit_scale > 0)) throw std::invalid_argument("logit_scale must be positive");
  const std::size_t c = m.categories();
  if (c == 0) throw std::invalid_argument("score matrix has no categories");
  for (const auto& row : m.sims)
    if (row.empty()) throw std::invalid_argument("category with no sentences");

  if (cfg.axis == SoftmaxAxis::mean_then_softmax) {
    std::vector<double> means(c);
    for (std::size_t i = 0; i < c; ++i)
      means[i] = std::accumulate(m.sims[i].begin(), m.sims[i].end(), 0.0) / static_cast<double>(m.sims[i].size());
    return detail::scaled_softmax(means, cfg.logit_scale);
  }

  if (!m.uniform_k()) throw RaggedK("sentence counts differ across categories; use mean_then_softmax");
  const std::size_t k = m.sims.front().size();
  std::vector<double> scores(c, 0.0), slot(c);
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t i = 0; i < c; ++i) slot[i] = m.sims[i][j];
    auto p = detail::scaled_softmax(slot, cfg.logit_scale);
    for (std::size_t i = 0; i < c; ++i) scores[i] += p[i];
  }
  for (double& s : scores) s /= static_cast<double>(k);
  return scores;
}

// Indices of the k largest scores, best first; ties go to the lower index.
inline Prediction top_k(std::span<const double> scores, std::size_t k = 5) {
  if (k > scores.size()) throw std::invalid_argument("k exceeds number of categories");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
  Prediction p;
  p.ranked.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
  for (auto i : p.ranked) p.scores.push_back(scores[i]);
  return p;
}

}  // namespace zsv
