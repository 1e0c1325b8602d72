#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <utility>
#include <vector>

#include "ptopk/autodiff.hpp"
#include "ptopk/rng.hpp"
#include "ptopk/tensor.hpp"
#include "ptopk/topk.hpp"

namespace ptopk {

// Perturbed-maximum smoothing of index-sorted Top-K.
//
// Forward: average the hard indicators of s + sigma * Z over n Gaussian
// draws. Backward: the same draws give the Jacobian estimate
//   d Y[i,k] / d s[d]  ~=  E[ Y_j[i,k] * Z_j[d] ] / sigma,
// so the vector-Jacobian product contracts <grad_out, Y_j> against Z_j.
// At sigma = 0 the operator is exactly hard Top-K and the gradient is zero.

struct PerturbedConfig {
  int n = 500;
  float sigma = 0.05f;
  uint64_t seed = 0;
};

struct PerturbedContext {
  Tensor noise;                  // (n, N)
  Tensor per_sample_indicators;  // (n, N, K), integral slices
  float sigma = 0.0f;
  int n = 0;
  int N = 0;
  int K = 0;
};

struct PerturbedForward {
  Tensor indicator;  // (N, K)
  PerturbedContext ctx;
};

// Dense context guard: n*N*K entries must stay desk-scale.
inline constexpr int64_t kMaxContextEntries = int64_t(1) << 26;

inline PerturbedForward perturbed_topk_forward(const std::vector<float>& s, int k,
                                               const PerturbedConfig& cfg) {
  const int n_scores = static_cast<int>(s.size());
  if (n_scores < 1 || k < 1 || k > n_scores)
    throw std::invalid_argument("perturbed_topk_forward: K must be in [1, N]");
  if (cfg.n < 1) throw std::invalid_argument("perturbed_topk_forward: need n >= 1 samples");
  if (!(cfg.sigma >= 0)) throw std::invalid_argument("perturbed_topk_forward: sigma must be >= 0");
  for (float v : s)
    if (!std::isfinite(v)) throw std::invalid_argument("perturbed_topk_forward: non-finite score");

  PerturbedForward out;
  out.ctx.sigma = cfg.sigma;
  out.ctx.N = n_scores;
  out.ctx.K = k;

  if (cfg.sigma == 0.0f) {
    // hard path, numerically identical to hard Top-K
    out.indicator = indicator_from_indices(hard_topk_indices(s, k), n_scores);
    out.ctx.n = 0;
    return out;
  }

  const int64_t entries = static_cast<int64_t>(cfg.n) * n_scores * k;
  if (entries > kMaxContextEntries)
    throw std::invalid_argument("perturbed_topk_forward: context of " + std::to_string(entries) +
                                " entries exceeds the dense-storage guard");

  out.ctx.n = cfg.n;
  out.ctx.noise = Tensor({cfg.n, n_scores});
  out.ctx.per_sample_indicators = Tensor({cfg.n, n_scores, k});
  std::vector<int> counts(static_cast<size_t>(n_scores) * k, 0);

  std::vector<float> perturbed(static_cast<size_t>(n_scores));
  RngStream base(cfg.seed, 0);
  for (int j = 0; j < cfg.n; ++j) {
    RngStream stream = base.child(static_cast<uint64_t>(j));
    Tensor z = gaussian_sample(stream, {n_scores});
    for (int d = 0; d < n_scores; ++d) {
      out.ctx.noise[static_cast<int64_t>(j) * n_scores + d] = z[d];
      perturbed[static_cast<size_t>(d)] = s[static_cast<size_t>(d)] + cfg.sigma * z[d];
    }
    const std::vector<int> idx = hard_topk_indices(perturbed, k);
    const int64_t slice = static_cast<int64_t>(j) * n_scores * k;
    for (int col = 0; col < k; ++col) {
      out.ctx.per_sample_indicators[slice + static_cast<int64_t>(idx[col]) * k + col] = 1.0f;
      counts[static_cast<size_t>(idx[col]) * k + col] += 1;
    }
  }

  out.indicator = Tensor({n_scores, k});
  for (int64_t i = 0; i < out.indicator.size(); ++i)
    out.indicator[i] = static_cast<float>(static_cast<double>(counts[static_cast<size_t>(i)]) / cfg.n);
  return out;
}

inline PerturbedForward perturbed_topk_forward(const Tensor& s, int k, const PerturbedConfig& cfg) {
  return perturbed_topk_forward(std::vector<float>(s.data(), s.data() + s.size()), k, cfg);
}

inline Tensor perturbed_topk_backward(const PerturbedContext& ctx, const Tensor& grad_out) {
  if (grad_out.rank() != 2 || grad_out.dim(0) != ctx.N || grad_out.dim(1) != ctx.K)
    throw std::invalid_argument("perturbed_topk_backward: grad_out must be (N, K) = (" +
                                std::to_string(ctx.N) + ", " + std::to_string(ctx.K) + ")");
  Tensor grad_s({ctx.N});
  if (ctx.sigma == 0.0f) return grad_s;  // gradients vanish at sigma = 0

  std::vector<double> acc(static_cast<size_t>(ctx.N), 0.0);
  for (int j = 0; j < ctx.n; ++j) {
    const int64_t slice = static_cast<int64_t>(j) * ctx.N * ctx.K;
    double w = 0.0;
    for (int64_t i = 0; i < static_cast<int64_t>(ctx.N) * ctx.K; ++i)
      w += static_cast<double>(grad_out[i]) * ctx.per_sample_indicators[slice + i];
    if (w == 0.0) continue;
    const int64_t zoff = static_cast<int64_t>(j) * ctx.N;
    for (int d = 0; d < ctx.N; ++d) acc[static_cast<size_t>(d)] += w * ctx.noise[zoff + d];
  }
  const double inv = 1.0 / (static_cast<double>(ctx.n) * ctx.sigma);
  for (int d = 0; d < ctx.N; ++d) grad_s[d] = static_cast<float>(acc[static_cast<size_t>(d)] * inv);
  return grad_s;
}

// Closed-form oracle for N=2, K=1: the selection probability is a Gaussian
// CDF of the score gap, since s1 + sigma*z1 > s0 + sigma*z0 iff a standard
// normal exceeds -(s1 - s0) / (sigma * sqrt(2)).

inline double std_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

inline double std_normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); }

struct ClosedFormN2 {
  Tensor y;    // (2, 1)
  Tensor jac;  // (2, 2): jac[i, d] = d y[i] / d s[d]
};

inline ClosedFormN2 closed_form_n2(float s0, float s1, float sigma) {
  if (!(sigma > 0)) throw std::invalid_argument("closed_form_n2: sigma must be > 0");
  const double u = (static_cast<double>(s1) - s0) / (sigma * std::sqrt(2.0));
  const double p1 = std_normal_cdf(u);
  const double a = std_normal_pdf(u) / (sigma * std::sqrt(2.0));
  ClosedFormN2 out;
  out.y = Tensor({2, 1});
  out.y[0] = static_cast<float>(1.0 - p1);
  out.y[1] = static_cast<float>(p1);
  out.jac = Tensor({2, 2});
  out.jac.at({0, 0}) = static_cast<float>(a);
  out.jac.at({0, 1}) = static_cast<float>(-a);
  out.jac.at({1, 0}) = static_cast<float>(-a);
  out.jac.at({1, 1}) = static_cast<float>(a);
  return out;
}

/// Linear decay sigma0 * (1 - step / total_steps).
inline float sigma_schedule(int64_t step, int64_t total_steps, float sigma0) {
  if (total_steps < 1) throw std::invalid_argument("sigma_schedule: total_steps must be >= 1");
  if (step < 0 || step > total_steps) throw std::invalid_argument("sigma_schedule: step out of range");
  if (!(sigma0 >= 0)) throw std::invalid_argument("sigma_schedule: sigma0 must be >= 0");
  return static_cast<float>(sigma0 * (1.0 - static_cast<double>(step) / static_cast<double>(total_steps)));
}

// ---- tape nodes ----

/// Differentiable selector node: value is the smoothed indicator, backward
/// applies the Monte-Carlo Jacobian estimate to the incoming gradient.
inline Var perturbed_topk_node(Var s, int k, const PerturbedConfig& cfg) {
  Tape& t = *s.tape;
  auto fwd = perturbed_topk_forward(t.value(s), k, cfg);
  auto ctx = std::make_shared<PerturbedContext>(std::move(fwd.ctx));
  return t.append(std::move(fwd.indicator), "perturbed_topk", {s.id},
                  [ctx](Tape& t, const Tape::Node& n) {
                    Tensor gs = perturbed_topk_backward(*ctx, n.grad);
                    Tensor& g = detail::grd(n, t, 0);
                    for (int64_t i = 0; i < g.size(); ++i) g[i] += gs[i];
                  });
}

/// Hard selector node: exact indicator, no gradient to the scores.
inline Var hard_topk_node(Var s, int k) {
  Tape& t = *s.tape;
  Tensor y = indicator_from_indices(hard_topk_indices(t.value(s), k), t.value(s).dim(0));
  return t.append(std::move(y), "hard_topk", {s.id}, nullptr);
}

}  // namespace ptopk
