#pragma once

// Reference implementations written independently of the library, used as
// test oracles. They favour directness over speed.

#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

// Per-slot softmax over categories followed by the slot mean, evaluated
// without max-subtraction in extended precision.
inline std::vector<double> slot_softmax_mean(const std::vector<std::vector<double>>& sims, double scale) {
  const std::size_t C = sims.size();
  const std::size_t K = sims.at(0).size();
  std::vector<long double> acc(C, 0.0L);
  for (std::size_t k = 0; k < K; ++k) {
    long double z = 0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(static_cast<long double>(scale) * sims[c][k]);
    for (std::size_t c = 0; c < C; ++c) acc[c] += std::exp(static_cast<long double>(scale) * sims[c][k]) / z;
  }
  std::vector<double> out(C);
  for (std::size_t c = 0; c < C; ++c) out[c] = static_cast<double>(acc[c] / static_cast<long double>(K));
  return out;
}

inline std::vector<double> mean_then_softmax(const std::vector<std::vector<double>>& sims, double scale) {
  std::vector<long double> mean(sims.size(), 0.0L);
  for (std::size_t c = 0; c < sims.size(); ++c) {
    for (double s : sims[c]) mean[c] += s;
    mean[c] /= static_cast<long double>(sims[c].size());
  }
  long double z = 0;
  for (auto m : mean) z += std::exp(static_cast<long double>(scale) * m);
  std::vector<double> out;
  for (auto m : mean) out.push_back(static_cast<double>(std::exp(static_cast<long double>(scale) * m) / z));
  return out;
}

// Index of the frame containing the midpoint of segment i when N frames are
// cut into T equal segments: the largest j with 2T*j <= (2i+1)*N.
inline std::vector<std::size_t> segment_midpoints(std::size_t N, std::size_t T) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < T; ++i) {
    std::size_t j = 0;
    while (2 * T * (j + 1) <= (2 * i + 1) * N) ++j;
    out.push_back(j);
  }
  return out;
}

// First index of the maximum; lower index wins ties.
inline std::size_t argmax(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace oracle
