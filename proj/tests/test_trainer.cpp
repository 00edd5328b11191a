#include <doctest.h>

#include <cmath>

#include "dsc/trainer.hpp"

using namespace dsc;

TEST_CASE("synthetic task: targets follow the per-context map exactly") {
  SyntheticTask task = make_synthetic_task(16, 4, 99, /*noise_std=*/0.0);
  Rng rng = Rng::stream(99, "task-check");
  Matrix X, Y;
  sample_batch(task, 32, rng, X, Y);
  for (std::size_t b = 0; b < 32; ++b) {
    const std::size_t c = decode_context(task, X.row_span(b));
    const Matrix& A = task.A[c];
    for (std::size_t j = 0; j < 16; ++j) {
      double want = 0.0;
      for (std::size_t i = 0; i < 16; ++i) want += X(b, i) * A(i, j);
      CHECK(Y(b, j) == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("synthetic task: per-context operators stay below the norm cap") {
  SyntheticTask task = make_synthetic_task(12, 8, 5);
  for (const Matrix& A : task.A) {
    // ||Q + 0.45 uv^T|| <= 1 + 0.45 by the triangle inequality; verify with
    // margin through the Frobenius bound on the rank-1 part
    double fro = 0.0;
    for (double v : A.data) fro += v * v;
    (void)fro;
    // direct spectral check on a few probes
    Rng rng = Rng::stream(5, "norm-probe");
    for (int t = 0; t < 20; ++t) {
      std::vector<double> x(12);
      for (double& v : x) v = rng.normal();
      std::vector<double> Ax(12, 0.0);
      for (std::size_t i = 0; i < 12; ++i)
        for (std::size_t j = 0; j < 12; ++j) Ax[j] += x[i] * A(i, j);
      CHECK(norm2(Ax) <= 1.5 * norm2(x) + 1e-9);
    }
  }
}

TEST_CASE("synthetic task validation") {
  CHECK_THROWS_AS(make_synthetic_task(16, 1, 0), std::invalid_argument);
  CHECK_THROWS_AS(make_synthetic_task(3, 8, 0), std::invalid_argument);
}

TEST_CASE("baseline budget arithmetic") {
  // dense: W0 (d^2) + factored pair (2dh); budget d^2 + 2dh lands exactly
  Model dense = build_baseline("dense", 8, 8 * 8 + 2 * 8 * 5, 1);
  CHECK(param_count(dense) == 8u * 8u + 2u * 8u * 5u);

  // molora adapters: M * 2 * r * d
  CHECK(molora_adapter_params(8, 8, 8) == 1024u);
  BaselineHints hints;
  hints.molora_M = 4;
  hints.molora_rank = 3;
  Model molora = build_baseline("molora", 8, 0, 2, hints);
  CHECK(param_count(molora) == 8u * 8u + 8u * 4u + molora_adapter_params(4, 3, 8));

  // moe with 5 experts, top-2: expert weights split 2:5 between active/total
  BaselineHints mh;
  Model moe = build_baseline("moe", 8, 1000, 3, mh);
  const auto& m = std::get<MoeModel>(moe);
  CHECK(m.Win.size() == 5);
  const std::size_t de = m.Win[0].cols;
  const std::size_t active = 8 * 5 + 2 * 2 * 8 * de;
  CHECK(active <= 1000u + 2u * 2u * 8u);  // nearest-step rounding slack
}

TEST_CASE("infeasible baseline budgets raise with the closest feasible size") {
  try {
    build_baseline("dense", 8, 10, 1);
    FAIL("expected InfeasibleModelBudget");
  } catch (const InfeasibleModelBudget& e) {
    CHECK(e.closest_feasible == 8u * 8u + 2u * 8u);
    CHECK(std::string(e.what()).find("closest feasible") != std::string::npos);
  }
  CHECK_THROWS_AS(build_baseline("nosuch", 8, 1000, 1), std::invalid_argument);
}

TEST_CASE("iso budget defaults to the dsc parameter count") {
  TrainRunConfig cfg;
  cfg.kind = "dense";
  cfg.d = 16;
  cfg.dsc.M = 24;
  cfg.dsc.K = 4;
  DscConfig dc = cfg.dsc;
  dc.d = 16;
  const std::size_t target = dsc_total_params(dc);
  Model m = make_model(cfg, 1);
  // nearest-integer sizing stays within one step (2d) of the target
  CHECK(param_count(m) <= target + 2 * 16);
  CHECK(param_count(m) + 2 * 16 >= target);

  cfg.kind = "dsc";
  Model layer = make_model(cfg, 1);
  CHECK(param_count(layer) == target);
}

TEST_CASE("training runs are byte-deterministic per seed") {
  TrainRunConfig cfg;
  cfg.d = 8;
  cfg.C = 4;
  cfg.steps = 10;
  cfg.batch = 8;
  cfg.dsc.M = 12;
  cfg.dsc.K = 2;
  const TrainOutput a = run_training(cfg, {42, 7});
  const TrainOutput b = run_training(cfg, {42, 7});
  CHECK(a.csv == b.csv);
  REQUIRE(a.finals.size() == 2);
  CHECK(a.finals[0].final_eval_mse == b.finals[0].final_eval_mse);
  // different seeds produce different trajectories
  CHECK(a.finals[0].final_eval_mse != a.finals[1].final_eval_mse);
}

TEST_CASE("zero steps emits only the csv header") {
  TrainRunConfig cfg;
  cfg.steps = 0;
  cfg.d = 8;
  cfg.C = 2;
  cfg.dsc.M = 8;
  cfg.dsc.K = 2;
  const TrainOutput out = run_training(cfg, {1});
  CHECK(out.csv ==
        "step,seed,task,aux,budget,frame,z,total,entropy,active_frac,mean_S,max_coh\n");
}

TEST_CASE("short dsc run improves the training loss") {
  TrainRunConfig cfg;
  cfg.d = 8;
  cfg.C = 4;
  cfg.steps = 60;
  cfg.batch = 16;
  cfg.dsc.M = 12;
  cfg.dsc.K = 2;
  const SyntheticTask task = make_synthetic_task(cfg.d, cfg.C, cfg.task_seed, cfg.noise_std);
  Trainer trainer(make_model(cfg, 42));
  Rng rng = Rng::stream(42, "improve-test");
  Matrix Xe, Te;
  sample_batch(task, 128, rng, Xe, Te);
  const double before = trainer.eval_mse(Xe, Te);
  Rng data = Rng::stream(42, "data");
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    Matrix X, T;
    sample_batch(task, cfg.batch, data, X, T);
    trainer.step(X, T, lr_schedule(cfg.lr, s, cfg.steps, cfg.warmup()));
  }
  CHECK(trainer.eval_mse(Xe, Te) < before);
}

TEST_CASE("lr schedule: warmup ramps, cosine decays to the floor") {
  const double peak = 1.0;
  CHECK(lr_schedule(peak, 0, 1000, 75) == doctest::Approx(1.0 / 75.0));
  CHECK(lr_schedule(peak, 74, 1000, 75) == doctest::Approx(1.0));
  CHECK(lr_schedule(peak, 75, 1000, 75) == doctest::Approx(1.0));
  const double last = lr_schedule(peak, 999, 1000, 75);
  CHECK(last > 0.1);
  CHECK(last < 0.11);  // just above the 10% floor
  // monotone decay after warmup
  double prev = 2.0;
  for (std::size_t s = 75; s < 1000; s += 50) {
    const double lr = lr_schedule(peak, s, 1000, 75);
    CHECK(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("selection metrics: entropy and active fraction") {
  std::vector<std::vector<std::size_t>> sel = {{0, 1}, {2, 3}};
  const CollapseMetrics m = selection_metrics(sel, 8);
  CHECK(m.utilization_entropy == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(m.active_expert_fraction == doctest::Approx(0.5));
  std::vector<std::vector<std::size_t>> collapsed = {{0, 0}, {0, 0}};
  const CollapseMetrics c = selection_metrics(collapsed, 8);
  CHECK(c.utilization_entropy == doctest::Approx(0.0));
  CHECK(c.active_expert_fraction == doctest::Approx(1.0 / 8.0));
}
