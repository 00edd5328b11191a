#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsc/matrix.hpp"

namespace dsc {

// ln(1 + e^x), overflow-free for large |x|.
inline double softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double logsumexp(std::span<const double> r) {
  if (r.empty()) throw std::invalid_argument("logsumexp: empty input");
  double m = r[0];
  for (double v : r) m = std::max(m, v);
  double s = 0.0;
  for (double v : r) s += std::exp(v - m);
  return m + std::log(s);
}

// Max-shifted softmax written into out (same length as r).
inline void softmax_inplace(std::span<const double> r, std::span<double> out) {
  double m = r[0];
  for (double v : r) m = std::max(m, v);
  double s = 0.0;
  for (std::size_t j = 0; j < r.size(); ++j) {
    out[j] = std::exp(r[j] - m);
    s += out[j];
  }
  for (std::size_t j = 0; j < r.size(); ++j) out[j] /= s;
}

struct TopKResult {
  std::vector<std::size_t> indices;  // strictly increasing
  std::vector<double> values;        // values[i] = input[indices[i]]
};

// K largest entries; ties broken toward the lowest index. Indices are
// returned sorted ascending.
inline TopKResult top_k_select(std::span<const double> scores, std::size_t K) {
  const std::size_t M = scores.size();
  if (K == 0 || K > M)
    throw std::invalid_argument("top_k_select: require 1 <= K <= M");
  std::vector<std::size_t> order(M);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + K, order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return a < b;
                    });
  order.resize(K);
  std::sort(order.begin(), order.end());
  TopKResult res;
  res.indices = std::move(order);
  res.values.resize(K);
  for (std::size_t i = 0; i < K; ++i) res.values[i] = scores[res.indices[i]];
  return res;
}

// (x - mean) / sqrt(var + eps), population variance, no learnable affine.
inline std::vector<double> layer_norm(std::span<const double> x, double eps) {
  const std::size_t d = x.size();
  if (d < 2) throw std::invalid_argument("layer_norm: need d >= 2");
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(d);
  const double inv = 1.0 / std::sqrt(var + eps);
  std::vector<double> out(d);
  for (std::size_t i = 0; i < d; ++i) out[i] = (x[i] - mean) * inv;
  return out;
}

struct SpectralNormError : std::runtime_error {
  double best_estimate;
  explicit SpectralNormError(double best)
      : std::runtime_error("spectral_norm: power iteration did not converge "
                           "(best estimate " +
                           std::to_string(best) + ")"),
        best_estimate(best) {}
};

// Largest singular value via power iteration on A^T A. Deterministic start
// (normalized all-ones) with a fixed pseudorandom fallback if that vector is
// orthogonal to the top singular subspace.
inline double spectral_norm(const Matrix& A, double tol = 1e-13,
                            std::size_t max_iters = 100000) {
  if (tol <= 0.0) throw std::invalid_argument("spectral_norm: tol must be > 0");
  const std::size_t n = A.cols;
  if (n == 0 || A.rows == 0)
    throw std::invalid_argument("spectral_norm: empty matrix");
  if (frobenius_norm(A) == 0.0)
    throw std::invalid_argument("spectral_norm: zero matrix");

  std::vector<double> v(n, 1.0 / std::sqrt(static_cast<double>(n)));
  std::vector<double> Av(A.rows), w(n);
  auto apply = [&]() {
    for (std::size_t i = 0; i < A.rows; ++i) Av[i] = dot(A.row_span(i), v);
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < A.rows; ++i) s += A(i, j) * Av[i];
      w[j] = s;
    }
  };

  bool used_fallback = false;
  double sigma = 0.0, prev = -1.0;
  for (std::size_t it = 0; it < max_iters; ++it) {
    apply();
    double nw = norm2(w);
    if (nw == 0.0) {
      if (used_fallback) return 0.0;  // start vectors lie in the nullspace
      used_fallback = true;
      std::uint64_t s = 0x5ca1ab1edeadbeefull;
      for (std::size_t j = 0; j < n; ++j)
        v[j] = static_cast<double>(splitmix64(s) >> 11) * 0x1.0p-53 - 0.5;
      const double nv = norm2(v);
      for (double& vj : v) vj /= nv;
      prev = -1.0;
      continue;
    }
    for (std::size_t j = 0; j < n; ++j) v[j] = w[j] / nw;
    for (std::size_t i = 0; i < A.rows; ++i) Av[i] = dot(A.row_span(i), v);
    sigma = norm2(Av);
    if (prev >= 0.0 && std::fabs(sigma - prev) <= tol * std::max(sigma, 1e-300))
      return sigma;
    prev = sigma;
  }
  throw SpectralNormError(sigma);
}

}  // namespace dsc
