#include <doctest.h>

#include <cmath>

#include "mlkd/optim.hpp"

using namespace mlkd;

namespace {

std::vector<std::pair<std::string, Tensor<double>>> single_param(double v) {
  std::vector<std::pair<std::string, Tensor<double>>> params;
  params.emplace_back("w", Tensor<double>::from({1}, {v}, true));
  return params;
}

}  // namespace

TEST_CASE("adam: zero gradients and zero decay leave parameters unchanged") {
  auto params = single_param(0.7);
  auto state = AdamState<double>::init(params);
  params[0].second.grad();  // allocate zeros
  adam_step(params, state, 0.1, 0.0);
  CHECK(params[0].second.value()[0] == 0.7);
  CHECK(state.t == 1);
}

TEST_CASE("adam: first-step magnitude is about lr") {
  auto params = single_param(0.0);
  auto state = AdamState<double>::init(params);
  params[0].second.grad()[0] = 1.0;
  adam_step(params, state, 0.1, 0.0);
  // mhat = 1, vhat = 1 -> delta = -lr / (1 + eps)
  CHECK(params[0].second.value()[0] == doctest::Approx(-0.1).epsilon(1e-7));
}

TEST_CASE("adam: first-step update is scale invariant") {
  auto a = single_param(0.0);
  auto sa = AdamState<double>::init(a);
  a[0].second.grad()[0] = 1.0;
  adam_step(a, sa, 0.1, 0.0);

  auto b = single_param(0.0);
  auto sb = AdamState<double>::init(b);
  b[0].second.grad()[0] = 1000.0;
  adam_step(b, sb, 0.1, 0.0);

  CHECK(std::signbit(a[0].second.value()[0]) == std::signbit(b[0].second.value()[0]));
  CHECK(std::abs(b[0].second.value()[0]) / 0.1 == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("adam: decoupled decay applies before the delta") {
  auto params = single_param(1.0);
  auto state = AdamState<double>::init(params);
  params[0].second.grad();  // zero gradient
  adam_step(params, state, 0.1, 0.01);
  // pure decay step: 1 - lr*wd
  CHECK(params[0].second.value()[0] == doctest::Approx(1.0 - 0.1 * 0.01).epsilon(1e-12));
}

TEST_CASE("adam: non-finite gradient aborts before touching parameters") {
  auto params = single_param(0.5);
  auto state = AdamState<double>::init(params);
  params[0].second.grad()[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(adam_step(params, state, 0.1, 0.0), NumericError);
  CHECK(params[0].second.value()[0] == 0.5);
  CHECK(state.t == 0);
}

TEST_CASE("one-cycle: boundaries, peak, monotone rise and fall, single peak") {
  int64_t total = 200;
  double max_lr = 1e-3, warmup = 0.3, div = 25, final_div = 1e4;
  int64_t peak = static_cast<int64_t>(warmup * total);

  CHECK(one_cycle_lr(0, total, max_lr, warmup, div, final_div) ==
        doctest::Approx(max_lr / div).epsilon(1e-12));
  CHECK(one_cycle_lr(peak, total, max_lr, warmup, div, final_div) == max_lr);
  CHECK(one_cycle_lr(total - 1, total, max_lr, warmup, div, final_div) ==
        doctest::Approx(max_lr / final_div).epsilon(1e-9));

  int64_t hits = 0;
  double prev = -1;
  for (int64_t s = 0; s < total; ++s) {
    double lr = one_cycle_lr(s, total, max_lr, warmup, div, final_div);
    if (lr == max_lr) ++hits;
    if (s > 0) {
      if (s <= peak)
        CHECK(lr > prev);
      else
        CHECK(lr < prev);
    }
    prev = lr;
  }
  CHECK(hits == 1);

  CHECK_THROWS_AS(one_cycle_lr(-1, total, max_lr, warmup, div, final_div),
                  std::invalid_argument);
  CHECK_THROWS_AS(one_cycle_lr(total, total, max_lr, warmup, div, final_div),
                  std::invalid_argument);
}

TEST_CASE("one-cycle: zero warmup peaks at step 0") {
  CHECK(one_cycle_lr(0, 10, 1e-3, 0.0, 25, 1e4) == 1e-3);
  CHECK(one_cycle_lr(1, 10, 1e-3, 0.0, 25, 1e4) < 1e-3);
}
