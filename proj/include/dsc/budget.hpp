#pragma once

#include <cmath>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>

namespace dsc {

// GPT-style backbone used by the iso-parameter solver. Count model: tied
// input/output embeddings, learned positional embeddings, bias-free linear
// maps, twin pre-norms per layer plus a final norm (2*d_model params each).
struct BackboneSpec {
  std::size_t d_model = 384;
  std::size_t layers = 6;
  std::size_t heads = 6;
  std::size_t vocab = 50304;
  std::size_t seq_len = 256;

  void validate() const {
    if (heads == 0 || d_model % heads != 0)
      throw std::invalid_argument("BackboneSpec: d_model must divide by heads");
  }
};

struct ParamCount {
  std::size_t total = 0;
  std::size_t active = 0;
};

struct DenseArch {
  std::size_t d_ffn = 0;
};
struct MoeArch {
  std::size_t n_experts = 0;
  std::size_t d_expert = 0;
  std::size_t top_k = 0;
};
struct DscArch {
  std::size_t M = 0;
  std::size_t K = 0;
  std::size_t d_base = 0;
};

namespace detail {

// Everything except the FFN-replacement block: embeddings, positions,
// attention, per-layer norms, final norm.
inline std::size_t backbone_params(const BackboneSpec& s) {
  const std::size_t d = s.d_model;
  return s.vocab * d + s.seq_len * d + s.layers * (4 * d * d + 2 * (2 * d)) +
         2 * d;
}

}  // namespace detail

inline ParamCount count_params(const BackboneSpec& s, const DenseArch& a) {
  s.validate();
  const std::size_t t =
      detail::backbone_params(s) + s.layers * 2 * s.d_model * a.d_ffn;
  return {t, t};
}

inline ParamCount count_params(const BackboneSpec& s, const MoeArch& a) {
  s.validate();
  if (a.top_k > a.n_experts)
    throw std::invalid_argument("count_params: top_k > n_experts");
  const std::size_t d = s.d_model;
  const std::size_t router = d * a.n_experts;
  const std::size_t expert = 2 * d * a.d_expert;
  ParamCount c;
  c.total = detail::backbone_params(s) +
            s.layers * (router + a.n_experts * expert);
  c.active = detail::backbone_params(s) + s.layers * (router + a.top_k * expert);
  return c;
}

inline ParamCount count_params(const BackboneSpec& s, const DscArch& a) {
  s.validate();
  if (a.K > a.M) throw std::invalid_argument("count_params: K > M");
  const std::size_t d = s.d_model;
  const std::size_t bank = 2 * a.M * d;
  const std::size_t router = d * a.M;
  const std::size_t base = 2 * d * a.d_base;
  ParamCount c;
  c.total = detail::backbone_params(s) + s.layers * (bank + router + base);
  // Active: static base + router (fully active) + K gathered atom pairs.
  c.active = detail::backbone_params(s) + s.layers * (router + base + 2 * a.K * d);
  return c;
}

struct ArchBudget {
  std::string arch;  // dense | moe | dsc
  DenseArch dense{};
  MoeArch moe{};
  DscArch dsc{};
  ParamCount counts{};
};

struct InfeasibleBudget : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

// Smallest integer n with base + step*n >= target - step/2; i.e. the nearest
// integer inversion of the linear count formula.
inline std::size_t invert_linear(double target, double base, double step,
                                 const char* what) {
  const double x = (target - step / 2.0 - base) / step;
  const double n = std::ceil(x);
  if (!(n >= 1.0))
    throw InfeasibleBudget(std::string(what) + ": target does not exceed the fixed backbone cost");
  return static_cast<std::size_t>(n);
}

}  // namespace detail

inline ArchBudget solve_dense_ffn(const BackboneSpec& s, std::size_t target_total) {
  s.validate();
  const double base = static_cast<double>(detail::backbone_params(s));
  const double step = static_cast<double>(s.layers * 2 * s.d_model);
  ArchBudget b;
  b.arch = "dense";
  b.dense.d_ffn = detail::invert_linear(static_cast<double>(target_total), base,
                                        step, "solve_dense_ffn");
  b.counts = count_params(s, b.dense);
  return b;
}

inline ArchBudget solve_moe(const BackboneSpec& s, std::size_t n_experts,
                            std::size_t top_k, std::size_t target_active) {
  s.validate();
  if (top_k == 0 || top_k > n_experts)
    throw std::invalid_argument("solve_moe: require 1 <= top_k <= n_experts");
  const double base = static_cast<double>(detail::backbone_params(s) +
                                          s.layers * s.d_model * n_experts);
  const double step = static_cast<double>(s.layers * top_k * 2 * s.d_model);
  ArchBudget b;
  b.arch = "moe";
  b.moe.n_experts = n_experts;
  b.moe.top_k = top_k;
  b.moe.d_expert = detail::invert_linear(static_cast<double>(target_active),
                                         base, step, "solve_moe");
  b.counts = count_params(s, b.moe);
  return b;
}

// Two-constraint solve: the total/active gap fixes M (floor), then the total
// fixes d_base (nearest).
inline ArchBudget solve_dsc(const BackboneSpec& s, std::size_t K,
                            std::size_t target_total, std::size_t target_active) {
  s.validate();
  if (target_total < target_active)
    throw InfeasibleBudget("solve_dsc: target_total < target_active");
  const std::size_t d = s.d_model, L = s.layers;
  const std::size_t gap_step = 2 * d * L;
  const std::size_t M = K + (target_total - target_active) / gap_step;
  if (M < K + 1)
    throw InfeasibleBudget("solve_dsc: no inactive bank margin; increase target_total");
  const double base = static_cast<double>(detail::backbone_params(s) +
                                          L * 3 * M * d);
  const double step = static_cast<double>(L * 2 * d);
  ArchBudget b;
  b.arch = "dsc";
  b.dsc.K = K;
  b.dsc.M = M;
  b.dsc.d_base = detail::invert_linear(static_cast<double>(target_total), base,
                                       step, "solve_dsc (d_base)");
  b.counts = count_params(s, b.dsc);
  return b;
}

// Flat key=value block consumable by the trainer and traffic model.
inline std::string emit_config_block(const ArchBudget& b) {
  std::ostringstream os;
  os << "arch=" << b.arch << "\n";
  if (b.arch == "dense") {
    os << "d_ffn=" << b.dense.d_ffn << "\n";
  } else if (b.arch == "moe") {
    os << "n_experts=" << b.moe.n_experts << "\n";
    os << "d_expert=" << b.moe.d_expert << "\n";
    os << "top_k=" << b.moe.top_k << "\n";
  } else {
    os << "M=" << b.dsc.M << "\n";
    os << "K=" << b.dsc.K << "\n";
    os << "d_base=" << b.dsc.d_base << "\n";
  }
  os << "total_params=" << b.counts.total << "\n";
  os << "active_params=" << b.counts.active << "\n";
  return os.str();
}

}  // namespace dsc
