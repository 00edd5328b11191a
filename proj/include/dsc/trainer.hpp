#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "dsc/grad.hpp"
#include "dsc/numeric.hpp"

namespace dsc {

// Context-dependent linear-map regression: the context index is encoded in
// the leading +-1 coordinates, and each context applies a shared orthogonal
// base plus its own rank-1 spike. A static linear model cannot express the
// context dependence, which is exactly what the dynamic layer is for.
struct SyntheticTask {
  std::size_t d = 0;
  std::size_t C = 0;
  std::size_t code_bits = 0;
  double noise_std = 0.0;
  std::vector<Matrix> A;  // per-context target maps, ||A_c||_2 <= 1.5
};

namespace detail {

// Modified Gram-Schmidt orthogonalization of a random Gaussian matrix.
inline Matrix random_orthogonal(std::size_t d, Rng& rng) {
  Matrix Q = gaussian_matrix(d, d, 1.0, rng);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      const double proj = dot(Q.row_span(i), Q.row_span(j));
      for (std::size_t k = 0; k < d; ++k) Q(i, k) -= proj * Q(j, k);
    }
    const double n = norm2(Q.row_span(i));
    if (n < 1e-12) throw std::runtime_error("random_orthogonal: degenerate draw");
    for (std::size_t k = 0; k < d; ++k) Q(i, k) /= n;
  }
  return Q;
}

}  // namespace detail

inline SyntheticTask make_synthetic_task(std::size_t d, std::size_t C,
                                         std::uint64_t seed,
                                         double noise_std = 0.02) {
  if (C < 2) throw std::invalid_argument("make_synthetic_task: need C >= 2");
  std::size_t bits = 0;
  while ((std::size_t{1} << bits) < C) ++bits;
  if (d < 2 * bits)
    throw std::invalid_argument("make_synthetic_task: need d >= 2*ceil(log2 C)");
  SyntheticTask task;
  task.d = d;
  task.C = C;
  task.code_bits = bits;
  task.noise_std = noise_std;
  Rng rng = Rng::stream(seed, "task");
  const Matrix Q = detail::random_orthogonal(d, rng);
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<double> u(d), v(d);
    for (auto& x : u) x = rng.normal();
    for (auto& x : v) x = rng.normal();
    const double nu = norm2(u), nv = norm2(v);
    Matrix A = Q;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j)
        A(i, j) += 0.45 * (u[i] / nu) * (v[j] / nv);
    task.A.push_back(std::move(A));  // ||A|| <= ||Q|| + 0.45 = 1.45
  }
  return task;
}

inline std::size_t decode_context(const SyntheticTask& task,
                                  std::span<const double> x) {
  std::size_t c = 0;
  for (std::size_t b = 0; b < task.code_bits; ++b)
    if (x[b] > 0.0) c |= (std::size_t{1} << b);
  return c < task.C ? c : task.C - 1;
}

inline void sample_batch(const SyntheticTask& task, std::size_t B, Rng& rng,
                         Matrix& X, Matrix& Y) {
  const std::size_t d = task.d;
  X = Matrix(B, d);
  Y = Matrix(B, d);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t c = rng.below(task.C);
    for (std::size_t i = 0; i < d; ++i) {
      if (i < task.code_bits)
        X(b, i) = ((c >> i) & 1) ? 1.0 : -1.0;
      else
        X(b, i) = rng.normal();
    }
    const Matrix& A = task.A[c];
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < d; ++i) s += X(b, i) * A(i, j);
      Y(b, j) = s + task.noise_std * rng.normal();
    }
  }
}

// ---------------------------------------------------------------------------
// Baseline models (iso-active protocol).

struct DenseModel {
  Matrix W0;  // d x d
  Matrix A;   // d x h
  Matrix B;   // h x d
};

struct MoeModel {
  std::size_t top_k = 2;
  Matrix Wg;  // d x N
  std::vector<Matrix> Win, Wout;
};

struct MoloraModel {
  std::size_t top_k = 2;
  Matrix W0;  // d x d
  Matrix Wg;  // d x M
  std::vector<Matrix> A;  // d x r
  std::vector<Matrix> B;  // r x d
};

using Model = std::variant<DscLayer, DenseModel, MoeModel, MoloraModel>;

struct InfeasibleModelBudget : std::runtime_error {
  std::size_t closest_feasible;
  InfeasibleModelBudget(const std::string& msg, std::size_t closest)
      : std::runtime_error(msg + " (closest feasible budget: " +
                           std::to_string(closest) + ")"),
        closest_feasible(closest) {}
};

struct BaselineHints {
  std::size_t moe_experts = 5;
  std::size_t moe_top_k = 2;
  std::size_t molora_M = 8;
  std::size_t molora_rank = 0;  // 0: solved from the budget
  std::size_t molora_top_k = 2;
};

inline std::size_t molora_adapter_params(std::size_t M, std::size_t r,
                                         std::size_t d) {
  return M * 2 * r * d;
}

inline Model build_baseline(const std::string& kind, std::size_t d,
                            std::size_t iso_active_budget, std::uint64_t seed,
                            const BaselineHints& hints = {}) {
  Rng rng = Rng::stream(seed, "baseline-" + kind);
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  if (kind == "dense") {
    // Base d x d plus a factored static map holding the rest of the budget.
    const std::size_t min_budget = d * d + 2 * d;
    if (iso_active_budget < min_budget)
      throw InfeasibleModelBudget("build_baseline: dense budget too small",
                                  min_budget);
    const std::size_t h = (iso_active_budget - d * d + d) / (2 * d);  // nearest
    DenseModel m;
    m.W0 = gaussian_matrix(d, d, sd, rng);
    m.A = gaussian_matrix(d, h, sd, rng);
    m.B = gaussian_matrix(h, d, 1.0 / std::sqrt(double(h)), rng);
    return m;
  }
  if (kind == "moe") {
    const std::size_t N = hints.moe_experts, k = hints.moe_top_k;
    const std::size_t min_budget = d * N + k * 2 * d;
    if (iso_active_budget < min_budget)
      throw InfeasibleModelBudget("build_baseline: moe budget too small",
                                  min_budget);
    const std::size_t de = (iso_active_budget - d * N + k * d) / (k * 2 * d);
    MoeModel m;
    m.top_k = k;
    m.Wg = gaussian_matrix(d, N, sd, rng);
    for (std::size_t e = 0; e < N; ++e) {
      m.Win.push_back(gaussian_matrix(d, de, sd, rng));
      m.Wout.push_back(gaussian_matrix(de, d, 1.0 / std::sqrt(double(de)), rng));
    }
    return m;
  }
  if (kind == "molora") {
    const std::size_t M = hints.molora_M, k = hints.molora_top_k;
    std::size_t r = hints.molora_rank;
    if (r == 0) {
      const std::size_t min_budget = d * d + d * M + k * 2 * d;
      if (iso_active_budget < min_budget)
        throw InfeasibleModelBudget("build_baseline: molora budget too small",
                                    min_budget);
      r = (iso_active_budget - d * d - d * M + k * d) / (k * 2 * d);
    }
    MoloraModel m;
    m.top_k = k;
    m.W0 = gaussian_matrix(d, d, sd, rng);
    m.Wg = gaussian_matrix(d, M, sd, rng);
    for (std::size_t i = 0; i < M; ++i) {
      m.A.push_back(gaussian_matrix(d, r, sd, rng));
      m.B.push_back(gaussian_matrix(r, d, 1.0 / std::sqrt(double(r)), rng));
    }
    return m;
  }
  throw std::invalid_argument("build_baseline: unknown kind " + kind);
}

inline std::size_t param_count(const Model& model) {
  std::size_t n = 0;
  std::visit(
      [&](const auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, DscLayer>) {
          n = m.bank.U_hat.data.size() + m.bank.V_hat.data.size() +
              m.router.W_r.data.size() + m.gamma.size() + m.W0.data.size();
        } else if constexpr (std::is_same_v<T, DenseModel>) {
          n = m.W0.data.size() + m.A.data.size() + m.B.data.size();
        } else if constexpr (std::is_same_v<T, MoeModel>) {
          n = m.Wg.data.size();
          for (const auto& w : m.Win) n += w.data.size();
          for (const auto& w : m.Wout) n += w.data.size();
        } else {
          n = m.W0.data.size() + m.Wg.data.size();
          for (const auto& w : m.A) n += w.data.size();
          for (const auto& w : m.B) n += w.data.size();
        }
      },
      model);
  return n;
}

// ---------------------------------------------------------------------------
// Optimizer: decoupled weight decay, beta1=0.9, beta2=0.95.

struct AdamW {
  struct Slot {
    double* p = nullptr;
    std::size_t n = 0;
    double lr_mult = 1.0;
    bool decay = true;
    std::vector<double> m, v;
  };
  double beta1 = 0.9, beta2 = 0.95, eps = 1e-8, weight_decay = 0.02;
  std::size_t t = 0;
  std::vector<Slot> slots;

  void add(double* p, std::size_t n, double lr_mult, bool decay) {
    Slot s;
    s.p = p;
    s.n = n;
    s.lr_mult = lr_mult;
    s.decay = decay;
    s.m.assign(n, 0.0);
    s.v.assign(n, 0.0);
    slots.push_back(std::move(s));
  }

  void step(const std::vector<std::span<const double>>& grads, double lr) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t si = 0; si < slots.size(); ++si) {
      Slot& s = slots[si];
      const std::span<const double> g = grads[si];
      const double lr_s = lr * s.lr_mult;
      for (std::size_t i = 0; i < s.n; ++i) {
        s.m[i] = beta1 * s.m[i] + (1.0 - beta1) * g[i];
        s.v[i] = beta2 * s.v[i] + (1.0 - beta2) * g[i] * g[i];
        const double mh = s.m[i] / bc1;
        const double vh = s.v[i] / bc2;
        double upd = mh / (std::sqrt(vh) + eps);
        if (s.decay) upd += weight_decay * s.p[i];
        s.p[i] -= lr_s * upd;
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Metrics.

struct CollapseMetrics {
  double utilization_entropy = 0.0;  // nats over the selection histogram
  double active_expert_fraction = 0.0;
  double mean_S = 0.0;
  double max_coherence = 0.0;
};

inline CollapseMetrics selection_metrics(
    const std::vector<std::vector<std::size_t>>& indices, std::size_t M) {
  CollapseMetrics m;
  std::vector<std::size_t> counts(M, 0);
  std::size_t total = 0;
  for (const auto& row : indices)
    for (std::size_t j : row) {
      ++counts[j];
      ++total;
    }
  if (total == 0) return m;
  std::size_t active = 0;
  for (std::size_t j = 0; j < M; ++j) {
    if (counts[j] == 0) continue;
    ++active;
    const double p = static_cast<double>(counts[j]) / static_cast<double>(total);
    m.utilization_entropy -= p * std::log(p);
  }
  m.active_expert_fraction = static_cast<double>(active) / static_cast<double>(M);
  return m;
}

// ---------------------------------------------------------------------------
// Per-model loss/grad and a shared train step.

struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

struct StepGrads {
  std::vector<Matrix> mats;  // storage backing the spans passed to AdamW
  std::vector<std::vector<double>> vecs;
};

// Plain MSE forward/backward for the dense baseline.
inline double dense_loss_grad(const DenseModel& m, const Matrix& X,
                              const Matrix& T, Matrix& dW0, Matrix& dA,
                              Matrix& dB) {
  const std::size_t Bsz = X.rows, d = X.cols, h = m.A.cols;
  const Matrix H = matmul(X, m.A);
  Matrix Y = matmul(X, m.W0);
  const Matrix HB = matmul(H, m.B);
  for (std::size_t i = 0; i < Y.data.size(); ++i) Y.data[i] += HB.data[i];

  double loss = 0.0;
  Matrix up(Bsz, d);
  const double scale = 2.0 / static_cast<double>(Bsz * d);
  for (std::size_t i = 0; i < Y.data.size(); ++i) {
    const double diff = Y.data[i] - T.data[i];
    loss += diff * diff / static_cast<double>(Bsz * d);
    up.data[i] = scale * diff;
  }
  dW0 = matmul(transpose(X), up);
  dB = matmul(transpose(H), up);
  const Matrix dH = matmul_bt(up, m.B);  // up * B^T
  dA = matmul(transpose(X), dH);
  (void)h;
  return loss;
}

// Softmax-renormalized top-k gate over linear expert pairs; frozen selection.
template <typename GetExpertA, typename GetExpertB>
inline double gated_loss_grad(const Matrix& Wg, std::size_t top_k,
                              std::size_t n_units, const Matrix& X,
                              const Matrix& T, const Matrix* W0,
                              GetExpertA expert_in, GetExpertB expert_out,
                              Matrix& dWg, Matrix* dW0,
                              std::vector<Matrix>& dIn,
                              std::vector<Matrix>& dOut,
                              std::vector<std::vector<std::size_t>>* sel_out) {
  const std::size_t Bsz = X.rows, d = X.cols;
  const double scale = 2.0 / static_cast<double>(Bsz * d);
  double loss = 0.0;
  if (sel_out) sel_out->clear();

  for (std::size_t b = 0; b < Bsz; ++b) {
    std::vector<double> logits(n_units);
    for (std::size_t e = 0; e < n_units; ++e) {
      double s = 0.0;
      for (std::size_t i = 0; i < d; ++i) s += X(b, i) * Wg(i, e);
      logits[e] = s;
    }
    TopKResult tk = top_k_select(logits, top_k);
    if (sel_out) sel_out->push_back(tk.indices);
    std::vector<double> p(top_k);
    softmax_inplace(tk.values, p);

    // Forward.
    std::vector<std::vector<double>> hidden(top_k);
    std::vector<double> y(d, 0.0);
    if (W0)
      for (std::size_t j = 0; j < d; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < d; ++i) s += X(b, i) * (*W0)(i, j);
        y[j] = s;
      }
    for (std::size_t k = 0; k < top_k; ++k) {
      const std::size_t e = tk.indices[k];
      const Matrix& Wi = expert_in(e);
      const Matrix& Wo = expert_out(e);
      const std::size_t hdim = Wi.cols;
      hidden[k].resize(hdim);
      for (std::size_t hcol = 0; hcol < hdim; ++hcol) {
        double s = 0.0;
        for (std::size_t i = 0; i < d; ++i) s += X(b, i) * Wi(i, hcol);
        hidden[k][hcol] = s;
      }
      for (std::size_t j = 0; j < d; ++j) {
        double s = 0.0;
        for (std::size_t hcol = 0; hcol < hdim; ++hcol)
          s += hidden[k][hcol] * Wo(hcol, j);
        y[j] += p[k] * s;
      }
    }

    // Backward.
    std::vector<double> up(d);
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = y[j] - T(b, j);
      loss += diff * diff / static_cast<double>(Bsz * d);
      up[j] = scale * diff;
    }
    if (dW0)
      for (std::size_t j = 0; j < d; ++j)
        for (std::size_t i = 0; i < d; ++i) (*dW0)(i, j) += X(b, i) * up[j];

    std::vector<double> dgate(top_k, 0.0);
    for (std::size_t k = 0; k < top_k; ++k) {
      const std::size_t e = tk.indices[k];
      const Matrix& Wo = expert_out(e);
      const std::size_t hdim = hidden[k].size();
      // expert output o_k and its upstream p_k * up
      double o_dot_up = 0.0;
      std::vector<double> dhidden(hdim, 0.0);
      for (std::size_t j = 0; j < d; ++j) {
        double o = 0.0;
        for (std::size_t hcol = 0; hcol < hdim; ++hcol)
          o += hidden[k][hcol] * Wo(hcol, j);
        o_dot_up += o * up[j];
        const double pu = p[k] * up[j];
        for (std::size_t hcol = 0; hcol < hdim; ++hcol) {
          dOut[e](hcol, j) += hidden[k][hcol] * pu;
          dhidden[hcol] += Wo(hcol, j) * pu;
        }
      }
      dgate[k] = o_dot_up;
      for (std::size_t hcol = 0; hcol < hdim; ++hcol)
        for (std::size_t i = 0; i < d; ++i)
          dIn[e](i, hcol) += X(b, i) * dhidden[hcol];
    }

    // Renormalized softmax backward into the selected logits.
    double inner = 0.0;
    for (std::size_t k = 0; k < top_k; ++k) inner += dgate[k] * p[k];
    for (std::size_t k = 0; k < top_k; ++k) {
      const double dlogit = p[k] * (dgate[k] - inner);
      const std::size_t e = tk.indices[k];
      for (std::size_t i = 0; i < d; ++i) dWg(i, e) += X(b, i) * dlogit;
    }
  }
  return loss;
}

}  // namespace detail

struct TrainStepResult {
  LossBreakdown loss;
  CollapseMetrics metrics;
};

// One optimizer step on the total objective. The DSC router (W_r) runs at a
// 5x learning-rate multiplier; gamma is excluded from weight decay.
class Trainer {
 public:
  explicit Trainer(Model model) : model_(std::move(model)) {
    register_params();
  }

  Model& model() { return model_; }
  const Model& model() const { return model_; }

  TrainStepResult step(const Matrix& X, const Matrix& T, double lr_now) {
    TrainStepResult res;
    std::vector<std::span<const double>> grads;

    if (auto* layer = std::get_if<DscLayer>(&model_)) {
      auto [loss, g] = objective_with_grad(*layer, X, T, TaskTerm::MseMean);
      res.loss = loss;
      ForwardCache cache;  // metrics from the routing of this batch
      forward(*layer, X, &cache);
      res.metrics = selection_metrics(cache.outcome.indices, layer->M());
      double mean_S = 0.0;
      for (double s : cache.outcome.S) mean_S += s;
      res.metrics.mean_S = mean_S / static_cast<double>(X.rows);
      const CoherenceStats cs = coherence_stats(layer->bank);
      res.metrics.max_coherence =
          std::max(cs.max_abs_offdiag_U, cs.max_abs_offdiag_V);
      grads = {
          {g.dU_hat.data.data(), g.dU_hat.data.size()},
          {g.dV_hat.data.data(), g.dV_hat.data.size()},
          {g.dW_r.data.data(), g.dW_r.data.size()},
          {g.dGamma.data(), g.dGamma.size()},
          {g.dW0.data.data(), g.dW0.data.size()},
      };
      check_finite(res.loss.total);
      opt_.step(grads, lr_now);
      return res;
    }

    if (auto* m = std::get_if<DenseModel>(&model_)) {
      Matrix dW0(m->W0.rows, m->W0.cols), dA(m->A.rows, m->A.cols),
          dB(m->B.rows, m->B.cols);
      res.loss.task = detail::dense_loss_grad(*m, X, T, dW0, dA, dB);
      res.loss.total = res.loss.task;
      check_finite(res.loss.total);
      grads = {{dW0.data.data(), dW0.data.size()},
               {dA.data.data(), dA.data.size()},
               {dB.data.data(), dB.data.size()}};
      opt_.step(grads, lr_now);
      return res;
    }

    if (auto* m = std::get_if<MoeModel>(&model_)) {
      Matrix dWg(m->Wg.rows, m->Wg.cols);
      std::vector<Matrix> dIn, dOut;
      for (const auto& w : m->Win) dIn.emplace_back(w.rows, w.cols);
      for (const auto& w : m->Wout) dOut.emplace_back(w.rows, w.cols);
      std::vector<std::vector<std::size_t>> sel;
      res.loss.task = detail::gated_loss_grad(
          m->Wg, m->top_k, m->Win.size(), X, T, nullptr,
          [&](std::size_t e) -> const Matrix& { return m->Win[e]; },
          [&](std::size_t e) -> const Matrix& { return m->Wout[e]; }, dWg,
          nullptr, dIn, dOut, &sel);
      res.loss.total = res.loss.task;
      res.metrics = selection_metrics(sel, m->Win.size());
      check_finite(res.loss.total);
      grads.push_back({dWg.data.data(), dWg.data.size()});
      for (auto& g : dIn) grads.push_back({g.data.data(), g.data.size()});
      for (auto& g : dOut) grads.push_back({g.data.data(), g.data.size()});
      opt_.step(grads, lr_now);
      return res;
    }

    auto* m = std::get_if<MoloraModel>(&model_);
    Matrix dWg(m->Wg.rows, m->Wg.cols), dW0(m->W0.rows, m->W0.cols);
    std::vector<Matrix> dA, dB;
    for (const auto& w : m->A) dA.emplace_back(w.rows, w.cols);
    for (const auto& w : m->B) dB.emplace_back(w.rows, w.cols);
    std::vector<std::vector<std::size_t>> sel;
    res.loss.task = detail::gated_loss_grad(
        m->Wg, m->top_k, m->A.size(), X, T, &m->W0,
        [&](std::size_t e) -> const Matrix& { return m->A[e]; },
        [&](std::size_t e) -> const Matrix& { return m->B[e]; }, dWg, &dW0, dA,
        dB, &sel);
    res.loss.total = res.loss.task;
    res.metrics = selection_metrics(sel, m->A.size());
    check_finite(res.loss.total);
    grads.push_back({dWg.data.data(), dWg.data.size()});
    grads.push_back({dW0.data.data(), dW0.data.size()});
    for (auto& g : dA) grads.push_back({g.data.data(), g.data.size()});
    for (auto& g : dB) grads.push_back({g.data.data(), g.data.size()});
    opt_.step(grads, lr_now);
    return res;
  }

  // Evaluation MSE without an optimizer step.
  double eval_mse(const Matrix& X, const Matrix& T) const {
    Matrix Y = predict(X);
    double loss = 0.0;
    for (std::size_t i = 0; i < Y.data.size(); ++i) {
      const double diff = Y.data[i] - T.data[i];
      loss += diff * diff / static_cast<double>(Y.data.size());
    }
    return loss;
  }

  Matrix predict(const Matrix& X) const {
    if (auto* layer = std::get_if<DscLayer>(&model_)) return forward(*layer, X);
    if (auto* m = std::get_if<DenseModel>(&model_)) {
      Matrix Y = matmul(X, m->W0);
      const Matrix HB = matmul(matmul(X, m->A), m->B);
      for (std::size_t i = 0; i < Y.data.size(); ++i) Y.data[i] += HB.data[i];
      return Y;
    }
    // Gated baselines share the forward inside gated_loss_grad; reuse it with
    // zero-upstream by running against a target of the prediction itself is
    // wasteful, so duplicate the small forward here.
    const std::size_t Bsz = X.rows, d = X.cols;
    Matrix Y(Bsz, d);
    auto gated_forward = [&](const Matrix& Wg, std::size_t top_k,
                             std::size_t n_units, const Matrix* W0,
                             auto expert_in, auto expert_out) {
      for (std::size_t b = 0; b < Bsz; ++b) {
        std::vector<double> logits(n_units);
        for (std::size_t e = 0; e < n_units; ++e) {
          double s = 0.0;
          for (std::size_t i = 0; i < d; ++i) s += X(b, i) * Wg(i, e);
          logits[e] = s;
        }
        TopKResult tk = top_k_select(logits, top_k);
        std::vector<double> p(top_k);
        softmax_inplace(tk.values, p);
        double* yb = Y.row(b);
        if (W0)
          for (std::size_t j = 0; j < d; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < d; ++i) s += X(b, i) * (*W0)(i, j);
            yb[j] = s;
          }
        for (std::size_t k = 0; k < top_k; ++k) {
          const std::size_t e = tk.indices[k];
          const Matrix& Wi = expert_in(e);
          const Matrix& Wo = expert_out(e);
          std::vector<double> hidden(Wi.cols);
          for (std::size_t hcol = 0; hcol < Wi.cols; ++hcol) {
            double s = 0.0;
            for (std::size_t i = 0; i < d; ++i) s += X(b, i) * Wi(i, hcol);
            hidden[hcol] = s;
          }
          for (std::size_t j = 0; j < d; ++j) {
            double s = 0.0;
            for (std::size_t hcol = 0; hcol < Wi.cols; ++hcol)
              s += hidden[hcol] * Wo(hcol, j);
            yb[j] += p[k] * s;
          }
        }
      }
    };
    if (auto* m = std::get_if<MoeModel>(&model_)) {
      gated_forward(
          m->Wg, m->top_k, m->Win.size(), nullptr,
          [&](std::size_t e) -> const Matrix& { return m->Win[e]; },
          [&](std::size_t e) -> const Matrix& { return m->Wout[e]; });
      return Y;
    }
    auto* m = std::get_if<MoloraModel>(&model_);
    gated_forward(
        m->Wg, m->top_k, m->A.size(), &m->W0,
        [&](std::size_t e) -> const Matrix& { return m->A[e]; },
        [&](std::size_t e) -> const Matrix& { return m->B[e]; });
    return Y;
  }

 private:
  static void check_finite(double loss) {
    if (!std::isfinite(loss))
      throw TrainingDiverged("train_step: non-finite loss");
  }

  void register_params() {
    if (auto* layer = std::get_if<DscLayer>(&model_)) {
      opt_.add(layer->bank.U_hat.data.data(), layer->bank.U_hat.data.size(), 1.0, true);
      opt_.add(layer->bank.V_hat.data.data(), layer->bank.V_hat.data.size(), 1.0, true);
      opt_.add(layer->router.W_r.data.data(), layer->router.W_r.data.size(), 5.0, true);
      opt_.add(layer->gamma.data(), layer->gamma.size(), 1.0, false);
      opt_.add(layer->W0.data.data(), layer->W0.data.size(), 1.0, true);
    } else if (auto* m = std::get_if<DenseModel>(&model_)) {
      opt_.add(m->W0.data.data(), m->W0.data.size(), 1.0, true);
      opt_.add(m->A.data.data(), m->A.data.size(), 1.0, true);
      opt_.add(m->B.data.data(), m->B.data.size(), 1.0, true);
    } else if (auto* m = std::get_if<MoeModel>(&model_)) {
      opt_.add(m->Wg.data.data(), m->Wg.data.size(), 5.0, true);
      for (auto& w : m->Win) opt_.add(w.data.data(), w.data.size(), 1.0, true);
      for (auto& w : m->Wout) opt_.add(w.data.data(), w.data.size(), 1.0, true);
    } else if (auto* m = std::get_if<MoloraModel>(&model_)) {
      opt_.add(m->Wg.data.data(), m->Wg.data.size(), 5.0, true);
      opt_.add(m->W0.data.data(), m->W0.data.size(), 1.0, true);
      for (auto& w : m->A) opt_.add(w.data.data(), w.data.size(), 1.0, true);
      for (auto& w : m->B) opt_.add(w.data.data(), w.data.size(), 1.0, true);
    }
  }

  Model model_;
  AdamW opt_;
};

// Linear warmup then cosine decay to final_frac of the peak.
inline double lr_schedule(double lr_peak, std::size_t step, std::size_t steps,
                          std::size_t warmup, double final_frac = 0.1) {
  if (warmup > 0 && step < warmup)
    return lr_peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (steps <= warmup) return lr_peak;
  const double prog = static_cast<double>(step - warmup) /
                      static_cast<double>(steps - warmup);
  const double lr_final = final_frac * lr_peak;
  return lr_final + (lr_peak - lr_final) *
                        0.5 * (1.0 + std::cos(3.14159265358979323846 * prog));
}

struct TrainRunConfig {
  std::string kind = "dsc";  // dsc | dense | moe | molora
  std::size_t d = 32;
  std::size_t C = 8;
  std::size_t steps = 2000;
  std::size_t batch = 64;
  double lr = 3e-3;
  double noise_std = 0.02;
  std::uint64_t task_seed = 7;
  DscConfig dsc;               // used when kind == dsc
  std::size_t iso_budget = 0;  // 0: match the DSC total parameter count
  BaselineHints hints;

  std::size_t warmup() const {
    return static_cast<std::size_t>(std::lround(0.075 * static_cast<double>(steps)));
  }
};

struct SeedResult {
  std::uint64_t seed = 0;
  double final_eval_mse = 0.0;
  double final_entropy = 0.0;
  double final_mean_S = 0.0;
  double final_max_coherence = 0.0;
  double final_active_fraction = 0.0;
};

struct TrainOutput {
  std::string csv;
  std::vector<SeedResult> finals;
};

inline std::size_t dsc_total_params(const DscConfig& c) {
  const std::size_t gamma_n = (c.gamma_mode == GammaMode::Scalar) ? 1 : c.d;
  return c.d * c.d + 2 * c.M * c.d + c.d * c.M + gamma_n;
}

inline Model make_model(const TrainRunConfig& cfg, std::uint64_t seed) {
  if (cfg.kind == "dsc") {
    DscConfig dc = cfg.dsc;
    dc.d = cfg.d;
    return make_layer(dc, seed);
  }
  std::size_t budget = cfg.iso_budget;
  if (budget == 0) {
    DscConfig dc = cfg.dsc;
    dc.d = cfg.d;
    budget = dsc_total_params(dc);
  }
  return build_baseline(cfg.kind, cfg.d, budget, seed, cfg.hints);
}

inline void append_csv_row(std::string& csv, std::size_t step,
                           std::uint64_t seed, const LossBreakdown& l,
                           const CollapseMetrics& m) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "%zu,%llu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                step, static_cast<unsigned long long>(seed), l.task, l.aux,
                l.budget, l.frame, l.z, l.total, m.utilization_entropy,
                m.active_expert_fraction, m.mean_S, m.max_coherence);
  csv += buf;
}

// Deterministic per seed: data, init, and eval streams all derive from the
// run seeds, and every reduction is sequential.
inline TrainOutput run_training(const TrainRunConfig& cfg,
                                const std::vector<std::uint64_t>& seeds) {
  TrainOutput out;
  out.csv = "step,seed,task,aux,budget,frame,z,total,entropy,active_frac,"
            "mean_S,max_coh\n";
  const SyntheticTask task =
      make_synthetic_task(cfg.d, cfg.C, cfg.task_seed, cfg.noise_std);

  // Shared evaluation set so every model kind faces identical data.
  Rng eval_rng = Rng::stream(cfg.task_seed, "eval");
  Matrix Xe, Te;
  sample_batch(task, 512, eval_rng, Xe, Te);

  for (std::uint64_t seed : seeds) {
    Trainer trainer(make_model(cfg, seed));
    Rng data_rng = Rng::stream(seed, "data");
    SeedResult sr;
    sr.seed = seed;
    CollapseMetrics last_metrics;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
      Matrix X, T;
      sample_batch(task, cfg.batch, data_rng, X, T);
      const double lr =
          lr_schedule(cfg.lr, step, cfg.steps, cfg.warmup());
      const TrainStepResult r = trainer.step(X, T, lr);
      append_csv_row(out.csv, step, seed, r.loss, r.metrics);
      last_metrics = r.metrics;
    }
    sr.final_eval_mse = trainer.eval_mse(Xe, Te);
    sr.final_entropy = last_metrics.utilization_entropy;
    sr.final_mean_S = last_metrics.mean_S;
    sr.final_max_coherence = last_metrics.max_coherence;
    sr.final_active_fraction = last_metrics.active_expert_fraction;
    out.finals.push_back(sr);
  }
  return out;
}

}  // namespace dsc
