#pragma once

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsc/dsc_layer.hpp"

namespace dsc {

// Closed-form per-token, per-layer weight-fetch accounting. Dynamic elements
// are the context-dependent fetches; static elements (router, base map) are
// itemized separately rather than folded into one number.
struct TrafficConfig {
  std::string arch;  // dense | moe | molora | dsc
  std::size_t d = 384;
  std::size_t d_ffn = 0;     // dense
  std::size_t d_expert = 0;  // moe
  std::size_t n_experts = 0; // moe (router stream)
  std::size_t top_k = 0;     // moe / molora
  std::size_t rank = 0;      // molora
  std::size_t M = 0;         // molora / dsc (router stream)
  std::size_t K = 0;         // dsc
  std::size_t dtype_bytes = 4;
};

struct TrafficReport {
  std::string arch;
  std::size_t dynamic_elements = 0;
  std::size_t static_elements = 0;
  std::size_t dynamic_bytes = 0;
  double ratio_vs_moe = 0.0;  // moe dynamic / this dynamic (filled by table)
};

inline TrafficReport traffic_per_token(const TrafficConfig& c) {
  TrafficReport r;
  r.arch = c.arch;
  if (c.arch == "dense") {
    // Streamed static weights, reported for context; nothing is dynamic.
    r.dynamic_elements = 0;
    r.static_elements = 2 * c.d * c.d_ffn;
  } else if (c.arch == "moe") {
    r.dynamic_elements = c.top_k * 2 * c.d * c.d_expert;
    r.static_elements = c.d * c.n_experts;
  } else if (c.arch == "molora") {
    r.dynamic_elements = c.top_k * 2 * c.rank * c.d;
    r.static_elements = c.d * c.M;
  } else if (c.arch == "dsc") {
    r.dynamic_elements = c.K * 2 * c.d;
    r.static_elements = c.d * c.M + 2 * c.d * c.d_ffn;  // router + base stream
  } else {
    throw std::invalid_argument("traffic_per_token: unknown arch " + c.arch);
  }
  r.dynamic_bytes = r.dynamic_elements * c.dtype_bytes;
  return r;
}

// True whenever the DSC dynamic fetch beats MoE's: 2Kd < 2k*d*d_expert.
inline bool dsc_traffic_below_moe(std::size_t K, std::size_t moe_top_k,
                                  std::size_t d_expert) {
  return K < moe_top_k * d_expert;
}

struct TrafficTable {
  std::vector<TrafficReport> rows;
  std::string csv;
  std::string text;
};

inline TrafficTable traffic_table(const std::vector<TrafficConfig>& configs) {
  TrafficTable t;
  std::size_t moe_dynamic = 0;
  for (const auto& c : configs) {
    t.rows.push_back(traffic_per_token(c));
    if (c.arch == "moe") moe_dynamic = t.rows.back().dynamic_elements;
  }
  for (auto& r : t.rows)
    if (r.dynamic_elements > 0 && moe_dynamic > 0)
      r.ratio_vs_moe = static_cast<double>(moe_dynamic) /
                       static_cast<double>(r.dynamic_elements);

  std::ostringstream csv, txt;
  csv << "arch,dynamic_elements,static_elements,dynamic_bytes,ratio_vs_moe\n";
  txt << std::left << std::setw(8) << "arch" << std::right << std::setw(18)
      << "dyn elems/token" << std::setw(18) << "static elems" << std::setw(14)
      << "dyn bytes" << std::setw(14) << "moe/this" << "\n";
  for (const auto& r : t.rows) {
    csv << r.arch << ',' << r.dynamic_elements << ',' << r.static_elements
        << ',' << r.dynamic_bytes << ',' << std::setprecision(9) << r.ratio_vs_moe
        << "\n";
    txt << std::left << std::setw(8) << r.arch << std::right << std::setw(18)
        << r.dynamic_elements << std::setw(18) << r.static_elements
        << std::setw(14) << r.dynamic_bytes << std::setw(14)
        << std::setprecision(4) << r.ratio_vs_moe << "\n";
  }
  t.csv = csv.str();
  t.text = txt.str();
  return t;
}

struct BenchResult {
  double median_ns = 0.0;
  double p90_ns = 0.0;
};

namespace detail {

template <typename F>
inline BenchResult time_repeats(F&& body, std::size_t repeats) {
  if (repeats < 30)
    throw std::invalid_argument("microbench: need repeats >= 30");
  using clock = std::chrono::steady_clock;
  for (int i = 0; i < 5; ++i) body();  // warmup
  std::vector<double> ns(repeats);
  for (std::size_t i = 0; i < repeats; ++i) {
    const auto t0 = clock::now();
    body();
    const auto t1 = clock::now();
    ns[i] = std::chrono::duration<double, std::nano>(t1 - t0).count();
  }
  std::sort(ns.begin(), ns.end());
  BenchResult r;
  r.median_ns = ns[repeats / 2];
  r.p90_ns = ns[(repeats * 9) / 10];
  if (r.median_ns <= 0.0)
    throw std::runtime_error("microbench: timer resolution insufficient");
  return r;
}

}  // namespace detail

// Wall-clock microbenchmark of the DSC forward at the given dims.
inline BenchResult microbench_dsc_forward(std::size_t d, std::size_t M,
                                          std::size_t K, std::size_t batch,
                                          std::size_t repeats,
                                          std::uint64_t seed = 42) {
  DscConfig cfg;
  cfg.d = d;
  cfg.M = M;
  cfg.K = K;
  DscLayer layer = make_layer(cfg, seed);
  Rng rng = Rng::stream(seed, "bench-input");
  Matrix X = gaussian_matrix(batch, d, 1.0, rng);
  volatile double sink = 0.0;
  return detail::time_repeats(
      [&]() {
        const Matrix Y = forward(layer, X);
        sink = sink + Y.data[0];
      },
      repeats);
}

// Minimal top-k MoE forward (softmax-renormalized gate, linear experts) as
// the latency comparison point.
inline BenchResult microbench_moe_forward(std::size_t d, std::size_t n_experts,
                                          std::size_t d_expert,
                                          std::size_t top_k, std::size_t batch,
                                          std::size_t repeats,
                                          std::uint64_t seed = 42) {
  Rng rng = Rng::stream(seed, "bench-moe");
  Matrix Wg = gaussian_matrix(d, n_experts, 1.0 / std::sqrt(double(d)), rng);
  std::vector<Matrix> Win, Wout;
  for (std::size_t e = 0; e < n_experts; ++e) {
    Win.push_back(gaussian_matrix(d, d_expert, 1.0 / std::sqrt(double(d)), rng));
    Wout.push_back(gaussian_matrix(d_expert, d, 1.0 / std::sqrt(double(d_expert)), rng));
  }
  Matrix X = gaussian_matrix(batch, d, 1.0, rng);
  Matrix Y(batch, d);
  std::vector<double> hidden(d_expert);
  volatile double sink = 0.0;
  return detail::time_repeats(
      [&]() {
        for (std::size_t b = 0; b < batch; ++b) {
          std::vector<double> logits(n_experts);
          for (std::size_t e = 0; e < n_experts; ++e) {
            double s = 0.0;
            for (std::size_t i = 0; i < d; ++i) s += X(b, i) * Wg(i, e);
            logits[e] = s;
          }
          TopKResult tk = top_k_select(logits, top_k);
          std::vector<double> p(top_k);
          softmax_inplace(tk.values, p);
          double* yb = Y.row(b);
          std::fill(yb, yb + d, 0.0);
          for (std::size_t k = 0; k < top_k; ++k) {
            const std::size_t e = tk.indices[k];
            for (std::size_t hcol = 0; hcol < d_expert; ++hcol) {
              double s = 0.0;
              for (std::size_t i = 0; i < d; ++i) s += X(b, i) * Win[e](i, hcol);
              hidden[hcol] = s;
            }
            for (std::size_t i = 0; i < d; ++i) {
              double s = 0.0;
              for (std::size_t hcol = 0; hcol < d_expert; ++hcol)
                s += hidden[hcol] * Wout[e](hcol, i);
              yb[i] += p[k] * s;
            }
          }
        }
        sink = sink + Y.data[0];
      },
      repeats);
}

}  // namespace dsc
