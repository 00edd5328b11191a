#include <doctest.h>

#include "dsc/budget.hpp"

using namespace dsc;

// All reference figures below assume the 384-wide, 6-layer, 50304-vocab,
// 256-position backbone with tied embeddings and bias-free linears.

TEST_CASE("backbone fixed cost") {
  BackboneSpec s;
  CHECK(detail::backbone_params(s) == 22963968u);
}

TEST_CASE("dense solver hits the 35M target") {
  BackboneSpec s;
  const ArchBudget b = solve_dense_ffn(s, 35000000);
  CHECK(b.dense.d_ffn == 2612);
  CHECK(b.counts.total == 35000064u);
  CHECK(b.counts.active == b.counts.total);
  // within the 1% reproduction band
  CHECK(std::fabs(double(b.counts.total) - 35.0e6) / 35.0e6 < 0.01);
}

TEST_CASE("moe solver hits the 28M-active target with 5 experts, top-2") {
  BackboneSpec s;
  const ArchBudget b = solve_moe(s, 5, 2, 28000000);
  CHECK(b.moe.d_expert == 545);
  CHECK(b.counts.active == 27998208u);
  CHECK(b.counts.total == 35532288u);
  CHECK(std::fabs(double(b.counts.total) - 35.54e6) / 35.54e6 < 0.01);
  CHECK(std::fabs(double(b.counts.active) - 28.0e6) / 28.0e6 < 0.01);
  // 2-of-5 expert activation: the expert-only share scales by top_k/N
  const std::size_t expert_total = b.counts.total - detail::backbone_params(s) -
                                   s.layers * s.d_model * b.moe.n_experts;
  const std::size_t expert_active = b.counts.active - detail::backbone_params(s) -
                                    s.layers * s.d_model * b.moe.n_experts;
  CHECK(expert_active * 5 == expert_total * 2);
}

TEST_CASE("dsc solver resolves M then d_base from the two targets") {
  BackboneSpec s;
  const ArchBudget b = solve_dsc(s, 4, 35000000, 28000000);
  CHECK(b.dsc.M == 1523);
  CHECK(b.dsc.d_base == 327);
  CHECK(b.counts.total == 34997760u);
  CHECK(b.counts.active == 27998208u);
  CHECK(std::fabs(double(b.counts.total) - 35.01e6) / 35.01e6 < 0.01);
  CHECK(std::fabs(double(b.counts.active) - 28.0e6) / 28.0e6 < 0.01);
}

TEST_CASE("count/solve round trip: re-counting the solved dims is stable") {
  BackboneSpec s;
  const ArchBudget dense = solve_dense_ffn(s, 35000000);
  CHECK(count_params(s, dense.dense).total == dense.counts.total);
  const ArchBudget moe = solve_moe(s, 5, 2, 28000000);
  CHECK(count_params(s, moe.moe).active == moe.counts.active);
  const ArchBudget d = solve_dsc(s, 4, 35000000, 28000000);
  CHECK(count_params(s, d.dsc).total == d.counts.total);
  CHECK(count_params(s, d.dsc).active == d.counts.active);
}

TEST_CASE("solved size is monotone in the target") {
  BackboneSpec s;
  std::size_t prev = 0;
  for (std::size_t target = 30000000; target <= 60000000; target += 5000000) {
    const ArchBudget b = solve_dense_ffn(s, target);
    CHECK(b.dense.d_ffn >= prev);
    prev = b.dense.d_ffn;
    // nearest-integer inversion stays within half a step of the target
    const double step = double(s.layers * 2 * s.d_model);
    CHECK(std::fabs(double(b.counts.total) - double(target)) <= step / 2.0 + step);
  }
}

TEST_CASE("infeasible targets raise typed errors") {
  BackboneSpec s;
  CHECK_THROWS_AS(solve_dense_ffn(s, 1000), InfeasibleBudget);
  CHECK_THROWS_AS(solve_moe(s, 5, 2, 1000), InfeasibleBudget);
  CHECK_THROWS_AS(solve_dsc(s, 4, 28000000, 35000000), InfeasibleBudget);
  CHECK_THROWS_AS(solve_dsc(s, 4, 28000000, 28000000), InfeasibleBudget);
  CHECK_THROWS_AS(solve_moe(s, 5, 0, 28000000), std::invalid_argument);
  CHECK_THROWS_AS(solve_moe(s, 5, 6, 28000000), std::invalid_argument);
}

TEST_CASE("count_params input validation") {
  BackboneSpec s;
  s.heads = 5;  // 384 % 5 != 0
  CHECK_THROWS_AS(count_params(s, DenseArch{100}), std::invalid_argument);
  BackboneSpec ok;
  CHECK_THROWS_AS(count_params(ok, MoeArch{4, 100, 5}), std::invalid_argument);
  CHECK_THROWS_AS(count_params(ok, DscArch{4, 8, 100}), std::invalid_argument);
}

TEST_CASE("emitted config block is flat key=value") {
  BackboneSpec s;
  const ArchBudget b = solve_dsc(s, 4, 35000000, 28000000);
  const std::string block = emit_config_block(b);
  CHECK(block.find("arch=dsc\n") != std::string::npos);
  CHECK(block.find("M=1523\n") != std::string::npos);
  CHECK(block.find("K=4\n") != std::string::npos);
  CHECK(block.find("d_base=327\n") != std::string::npos);
  CHECK(block.find("total_params=34997760\n") != std::string::npos);
  CHECK(block.find("active_params=27998208\n") != std::string::npos);
}
