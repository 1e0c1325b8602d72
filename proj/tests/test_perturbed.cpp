#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "ptopk/gradcheck.hpp"
#include "ptopk/perturbed.hpp"
#include "ptopk/rng.hpp"
#include "ptopk/topk.hpp"
#include "reference_topk.hpp"

using namespace ptopk;
using ptopk_test::reference_perturbed_topk;
using ptopk_test::ReferenceOut;

TEST_CASE("sigma=0 equals hard top-k bit for bit") {
  Uniform64 u(11);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 2 + static_cast<int>(u.next() % 12);
    const int k = 1 + static_cast<int>(u.next() % static_cast<uint64_t>(n));
    std::vector<float> s(static_cast<size_t>(n));
    for (auto& v : s) v = static_cast<float>(u.next_open01());
    PerturbedConfig cfg{500, 0.0f, trial * 7u};
    auto fw = perturbed_topk_forward(s, k, cfg);
    Tensor hard = indicator_from_indices(hard_topk_indices(s, k), n);
    REQUIRE(max_abs_diff(fw.indicator, hard) == 0.0);

    // degenerate context: backward is the zero vector
    Tensor grad_out({n, k});
    for (int64_t i = 0; i < grad_out.size(); ++i) grad_out[i] = 1.0f;
    Tensor g = perturbed_topk_backward(fw.ctx, grad_out);
    for (int64_t i = 0; i < g.size(); ++i) REQUIRE(g[i] == 0.0f);
  }
}

TEST_CASE("equal scores split the selection evenly") {
  PerturbedConfig cfg{100000, 0.5f, 42};
  auto fw = perturbed_topk_forward(std::vector<float>{0.3f, 0.3f}, 1, cfg);
  const double p = fw.indicator.at({0, 0});
  const double se = std::sqrt(0.25 / cfg.n);
  REQUIRE(std::abs(p - 0.5) <= 3.0 * se);
  REQUIRE(std::abs(fw.indicator.at({1, 0}) - 0.5) <= 3.0 * se);
}

TEST_CASE("closed-form N=2 oracle values") {
  auto sym = closed_form_n2(0.0f, 0.0f, 1.0f);
  REQUIRE(std::abs(sym.y.at({0, 0}) - 0.5) < 1e-7);
  REQUIRE(std::abs(sym.y.at({1, 0}) - 0.5) < 1e-7);

  auto cf = closed_form_n2(0.0f, 1.0f, 0.5f);
  REQUIRE(std::abs(cf.y.at({1, 0}) - 0.92135) < 1e-4);
  REQUIRE(std::abs(cf.jac.at({1, 1}) - 0.20755) < 1e-4);
  REQUIRE(std::abs(cf.jac.at({1, 0}) + 0.20755) < 1e-4);
  REQUIRE_THROWS_AS(closed_form_n2(0.0f, 1.0f, 0.0f), std::invalid_argument);
}

TEST_CASE("forward matches the Gaussian CDF oracle across sample counts") {
  const float sigma = 0.5f;
  const double ref = closed_form_n2(0.0f, 1.0f, sigma).y.at({1, 0});
  for (int n : {1000, 10000, 100000}) {
    PerturbedConfig cfg{n, sigma, 2024};
    auto fw = perturbed_topk_forward(std::vector<float>{0.0f, 1.0f}, 1, cfg);
    const double p = fw.indicator.at({1, 0});
    const double se = std::sqrt(p * (1.0 - p) / n);
    INFO("n=" << n << " p=" << p);
    REQUIRE(std::abs(p - ref) <= 3.0 * se);
  }
}

TEST_CASE("backward matches the Gaussian PDF oracle across sample counts") {
  const float sigma = 0.5f;
  const double ref = closed_form_n2(0.0f, 1.0f, sigma).jac.at({1, 1});
  Tensor grad_out({2, 1});
  grad_out.at({1, 0}) = 1.0f;
  for (int n : {1000, 10000, 100000}) {
    PerturbedConfig cfg{n, sigma, 31};
    auto fw = perturbed_topk_forward(std::vector<float>{0.0f, 1.0f}, 1, cfg);
    Tensor g = perturbed_topk_backward(fw.ctx, grad_out);

    double mean = 0.0, sq = 0.0;
    for (int j = 0; j < n; ++j) {
      const double w = fw.ctx.per_sample_indicators[static_cast<int64_t>(j) * 2 + 1];
      const double u = w * fw.ctx.noise[static_cast<int64_t>(j) * 2 + 1] / sigma;
      mean += u;
      sq += u * u;
    }
    mean /= n;
    const double se = std::sqrt((sq - n * mean * mean) / (n - 1) / n);
    INFO("n=" << n << " grad=" << g[1]);
    REQUIRE(std::abs(g[1] - ref) <= 3.0 * se);
  }
}

TEST_CASE("the all-ones direction is annihilated up to sampling error") {
  const float sigma = 0.5f;
  const int n = 100000;
  PerturbedConfig cfg{n, sigma, 77};
  auto fw = perturbed_topk_forward(std::vector<float>{0.1f, 0.8f, 0.4f}, 2, cfg);
  Tensor grad_out({3, 2}, {0.3f, 0.9f, -0.4f, 0.2f, 0.7f, -0.6f});
  Tensor g = perturbed_topk_backward(fw.ctx, grad_out);
  double dir = 0.0;
  for (int d = 0; d < 3; ++d) dir += g[d];

  // SE of the per-sample terms w_j * (sum_d Z_j[d]) / sigma
  double mean = 0.0, sq = 0.0;
  for (int j = 0; j < n; ++j) {
    double w = 0.0, zsum = 0.0;
    for (int64_t i = 0; i < 6; ++i)
      w += grad_out[i] * fw.ctx.per_sample_indicators[static_cast<int64_t>(j) * 6 + i];
    for (int d = 0; d < 3; ++d) zsum += fw.ctx.noise[static_cast<int64_t>(j) * 3 + d];
    const double u = w * zsum / sigma;
    mean += u;
    sq += u * u;
  }
  mean /= n;
  const double se = std::sqrt((sq - n * mean * mean) / (n - 1) / n);
  REQUIRE(std::abs(dir) <= 3.0 * se);
}

TEST_CASE("soft indicator feasibility and column-center monotonicity") {
  Uniform64 u(909);
  for (int trial = 0; trial < 25; ++trial) {
    const int n = 3 + static_cast<int>(u.next() % 10);
    const int k = 1 + static_cast<int>(u.next() % static_cast<uint64_t>(n));
    std::vector<float> s(static_cast<size_t>(n));
    for (size_t i = 0; i < s.size(); ++i)
      s[i] = static_cast<float>(u.next_open01() + 0.05 * i);  // distinct by construction
    PerturbedConfig cfg{400, 0.3f, 100 + static_cast<uint64_t>(trial)};
    auto fw = perturbed_topk_forward(s, k, cfg);
    REQUIRE(indicator_entries_nonneg(fw.indicator));
    REQUIRE(indicator_max_col_sum_err(fw.indicator) <= 1e-6);
    REQUIRE(indicator_max_row_sum_excess(fw.indicator) <= 1e-6);
    REQUIRE(indicator_centers_strictly_increasing(fw.indicator));

    // context slices are exact integral indicators averaging to the output
    Tensor mean({n, k});
    for (int j = 0; j < cfg.n; ++j)
      for (int64_t i = 0; i < mean.size(); ++i) {
        const float v = fw.ctx.per_sample_indicators[static_cast<int64_t>(j) * n * k + i];
        REQUIRE((v == 0.0f || v == 1.0f));
        mean[i] += v / cfg.n;
      }
    REQUIRE(max_abs_diff(mean, fw.indicator) <= 1e-6);
  }
}

TEST_CASE("distance to the hard indicator shrinks as sigma decays") {
  Uniform64 u(313);
  for (int trial = 0; trial < 10; ++trial) {
    const int n = 4 + static_cast<int>(u.next() % 6);
    const int k = 1 + static_cast<int>(u.next() % static_cast<uint64_t>(n));
    std::vector<float> s(static_cast<size_t>(n));
    for (size_t i = 0; i < s.size(); ++i) s[i] = static_cast<float>(u.next_open01() + 0.07 * i);
    Tensor hard = indicator_from_indices(hard_topk_indices(s, k), n);
    double prev = 2.0;
    for (float sigma : {0.5f, 0.25f, 0.1f, 0.05f, 0.01f}) {
      PerturbedConfig cfg{500, sigma, 5000 + static_cast<uint64_t>(trial)};
      auto fw = perturbed_topk_forward(s, k, cfg);
      const double dist = max_abs_diff(fw.indicator, hard);
      REQUIRE(dist <= prev + 1e-9);
      prev = dist;
    }
  }
}

TEST_CASE("deterministic outputs and contexts for identical inputs") {
  std::vector<float> s{0.2f, 0.9f, 0.4f, 0.6f};
  PerturbedConfig cfg{300, 0.2f, 12345};
  auto a = perturbed_topk_forward(s, 2, cfg);
  auto b = perturbed_topk_forward(s, 2, cfg);
  REQUIRE(max_abs_diff(a.indicator, b.indicator) == 0.0);
  REQUIRE(max_abs_diff(a.ctx.noise, b.ctx.noise) == 0.0);
  REQUIRE(max_abs_diff(a.ctx.per_sample_indicators, b.ctx.per_sample_indicators) == 0.0);
}

TEST_CASE("straight-line reference parity on fixed seeds") {
  Uniform64 u(626);
  for (int trial = 0; trial < 5; ++trial) {
    const int n = 3 + static_cast<int>(u.next() % 6);
    const int k = 1 + static_cast<int>(u.next() % static_cast<uint64_t>(n));
    std::vector<float> s(static_cast<size_t>(n));
    for (auto& v : s) v = static_cast<float>(u.next_open01());
    Tensor grad_out({n, k});
    for (int64_t i = 0; i < grad_out.size(); ++i)
      grad_out[i] = static_cast<float>(u.next_open01() * 2.0 - 1.0);

    const uint64_t seed = 9000 + static_cast<uint64_t>(trial);
    PerturbedConfig cfg{700, 0.3f, seed};
    auto fw = perturbed_topk_forward(s, k, cfg);
    Tensor g = perturbed_topk_backward(fw.ctx, grad_out);
    ReferenceOut ref = reference_perturbed_topk(s, k, cfg.n, cfg.sigma, seed, grad_out);
    REQUIRE(max_abs_diff(fw.indicator, ref.y) <= 1e-5);
    REQUIRE(max_abs_diff(g, ref.grad_s) <= 1e-5);
  }
}

TEST_CASE("estimator consistency against independent-noise finite differences") {
  GradCheckRow row = check_fd_consistency_n3(7, false);
  INFO("relative error " << row.value);
  REQUIRE(row.pass);
}

TEST_CASE("input validation") {
  PerturbedConfig cfg{100, 0.5f, 0};
  REQUIRE_THROWS_AS(perturbed_topk_forward(std::vector<float>{1.0f, NAN}, 1, cfg),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(perturbed_topk_forward(std::vector<float>{1.0f}, 2, cfg), std::invalid_argument);

  // dense-context memory guard
  PerturbedConfig big{1 << 20, 0.5f, 0};
  REQUIRE_THROWS_AS(perturbed_topk_forward(std::vector<float>(256, 0.5f), 256, big),
                    std::invalid_argument);

  auto fw = perturbed_topk_forward(std::vector<float>{0.1f, 0.5f, 0.9f}, 2, cfg);
  REQUIRE_THROWS_AS(perturbed_topk_backward(fw.ctx, Tensor({3, 1})), std::invalid_argument);

  REQUIRE_THROWS_AS(sigma_schedule(5, 4, 0.1f), std::invalid_argument);
  REQUIRE(sigma_schedule(0, 10, 0.4f) == 0.4f);
  REQUIRE(sigma_schedule(10, 10, 0.4f) == 0.0f);
  REQUIRE(std::abs(sigma_schedule(5, 10, 0.4f) - 0.2f) < 1e-7f);
}
