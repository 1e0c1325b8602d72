#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ptopk/perturbed.hpp"
#include "ptopk/pipeline.hpp"
#include "ptopk/rng.hpp"
#include "ptopk/tensor.hpp"

namespace ptopk {

// Gradient validation suite behind the `gradcheck` subcommand: closed-form
// oracles for the smoothed selector at N=2, finite-difference consistency at
// N=3, the sigma = 0 hard-path parity, and a full-chain check of the scorer
// gradient on a tiny pipeline. `corrupt_backward` is a test hook that scales
// the estimator output so the harness itself can be validated.

struct GradCheckRow {
  std::string check;
  double value = 0.0;
  double reference = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

namespace detail {

inline Tensor maybe_corrupt(Tensor g, bool corrupt) {
  if (corrupt)
    for (int64_t i = 0; i < g.size(); ++i) g[i] *= 1.5f;
  return g;
}

}  // namespace detail

/// Forward oracle at N=2, K=1, s=[0,1], sigma=0.5: the selected-probability
/// of index 1 is Phi(sqrt(2)). Tolerance is 3 standard errors of the mean.
inline GradCheckRow check_closed_form_forward(uint64_t seed) {
  const float sigma = 0.5f;
  const int n = 100000;
  PerturbedConfig cfg{n, sigma, seed};
  auto fw = perturbed_topk_forward(std::vector<float>{0.0f, 1.0f}, 1, cfg);
  const double p = fw.indicator.at({1, 0});
  const double ref = closed_form_n2(0.0f, 1.0f, sigma).y.at({1, 0});
  const double se = std::sqrt(p * (1.0 - p) / n);
  GradCheckRow row{"closed_form_forward_n2", p, ref, 3.0 * se, false};
  row.pass = std::abs(p - ref) <= row.tolerance;
  return row;
}

/// Backward oracle in the same setting: gradient of Y[1,0] wrt s[1] is
/// phi(sqrt(2)) / (sigma * sqrt(2)).
inline GradCheckRow check_closed_form_backward(uint64_t seed, bool corrupt) {
  const float sigma = 0.5f;
  const int n = 100000;
  PerturbedConfig cfg{n, sigma, seed};
  auto fw = perturbed_topk_forward(std::vector<float>{0.0f, 1.0f}, 1, cfg);
  Tensor grad_out({2, 1});
  grad_out.at({1, 0}) = 1.0f;
  Tensor g = detail::maybe_corrupt(perturbed_topk_backward(fw.ctx, grad_out), corrupt);

  // standard error from the per-sample estimator terms w_j * Z_j[1] / sigma
  double mean = 0.0, sq = 0.0;
  for (int j = 0; j < n; ++j) {
    const double w = fw.ctx.per_sample_indicators[static_cast<int64_t>(j) * 2 + 1];
    const double u = w * fw.ctx.noise[static_cast<int64_t>(j) * 2 + 1] / sigma;
    mean += u;
    sq += u * u;
  }
  mean /= n;
  const double var = (sq - n * mean * mean) / (n - 1);
  const double se = std::sqrt(var / n);

  const double ref = closed_form_n2(0.0f, 1.0f, sigma).jac.at({1, 1});
  GradCheckRow row{"closed_form_backward_n2", g[1], ref, 3.0 * se, false};
  row.pass = std::abs(g[1] - ref) <= row.tolerance;
  return row;
}

/// N=3, K=2: the analytic estimator against central differences of an
/// independent-noise large-sample forward at step h = 0.05 * sigma.
inline GradCheckRow check_fd_consistency_n3(uint64_t seed, bool corrupt) {
  const float sigma = 0.5f;
  const int n = 1000000;
  const std::vector<float> s{0.2f, 0.7f, 0.4f};
  const int k = 2;
  Tensor grad_out({3, 2}, {0.7f, -0.3f, 0.5f, 0.9f, -0.6f, 0.4f});

  PerturbedConfig cfg{n, sigma, seed};
  auto fw = perturbed_topk_forward(s, k, cfg);
  Tensor g = detail::maybe_corrupt(perturbed_topk_backward(fw.ctx, grad_out), corrupt);

  const double h = 0.05 * sigma;
  Tensor fd({3});
  uint64_t eval_seed = mix64(seed ^ 0xfdfdULL);
  for (int d = 0; d < 3; ++d) {
    std::vector<float> sp(s), sm(s);
    sp[static_cast<size_t>(d)] += static_cast<float>(h);
    sm[static_cast<size_t>(d)] -= static_cast<float>(h);
    PerturbedConfig cp{n, sigma, eval_seed++};
    PerturbedConfig cm{n, sigma, eval_seed++};
    Tensor yp = perturbed_topk_forward(sp, k, cp).indicator;
    Tensor ym = perturbed_topk_forward(sm, k, cm).indicator;
    double acc = 0.0;
    for (int64_t i = 0; i < yp.size(); ++i)
      acc += static_cast<double>(grad_out[i]) * (static_cast<double>(yp[i]) - ym[i]) / (2.0 * h);
    fd[d] = static_cast<float>(acc);
  }

  double num = 0.0, den = 0.0;
  for (int d = 0; d < 3; ++d) {
    num += (static_cast<double>(g[d]) - fd[d]) * (static_cast<double>(g[d]) - fd[d]);
    den += static_cast<double>(fd[d]) * fd[d];
  }
  const double rel = std::sqrt(num) / std::sqrt(den);
  GradCheckRow row{"fd_consistency_n3", rel, 0.0, 0.05, rel <= 0.05};
  return row;
}

/// sigma = 0 parity of the smoothed forward with hard Top-K (bit-for-bit).
inline GradCheckRow check_sigma_zero_parity(uint64_t seed) {
  RngStream rng(seed, 17);
  Tensor s = gaussian_sample(rng, {10});
  PerturbedConfig cfg{500, 0.0f, seed};
  auto fw = perturbed_topk_forward(s, 3, cfg);
  Tensor hard = indicator_from_indices(hard_topk_indices(s, 3), 10);
  const double diff = max_abs_diff(fw.indicator, hard);
  return GradCheckRow{"sigma_zero_parity", diff, 0.0, 0.0, diff == 0.0};
}

inline PipelineConfig tiny_pipeline_config(uint64_t seed) {
  PipelineConfig cfg;
  cfg.image_h = cfg.image_w = 16;
  cfg.patch = 8;
  cfg.stride = 8;
  cfg.k = 2;
  cfg.num_classes = 3;
  cfg.samples = 10000;
  cfg.sigma0 = 0.5f;
  cfg.sigma_decay = false;
  cfg.entropy_coeff = 0.0f;
  cfg.batch_size = 1;
  cfg.steps = 10;
  cfg.seed = seed;
  cfg.threads = 1;
  return cfg;
}

/// Scorer gradient is exactly zero through a full train step at sigma = 0.
inline GradCheckRow check_sigma_zero_scorer_grad(uint64_t seed) {
  PipelineConfig cfg = tiny_pipeline_config(seed);
  cfg.sigma0 = 0.0f;
  cfg.samples = 64;
  ModelParams params = init_params(cfg);
  AdamWState opt;
  RngStream rng(seed, 5);
  Tensor image = gaussian_sample(rng, {16, 16, 1});
  Batch batch;
  batch.images.push_back(&image);
  batch.labels.push_back(1);
  StepMetrics m = train_step(batch, params, opt, cfg, 0);
  return GradCheckRow{"sigma_zero_scorer_grad", m.scorer_grad_norm, 0.0, 0.0,
                      m.scorer_grad_norm == 0.0};
}

namespace detail {

/// Monte-Carlo estimate of the expected loss on the tiny pipeline, averaged
/// over `repeats` independent-noise forwards.
inline double tiny_expected_loss(const ModelParams& params, const PipelineConfig& cfg,
                                 const Tensor& image, int label, uint64_t seed, int repeats) {
  double total = 0.0;
  for (int r = 0; r < repeats; ++r) {
    Tape tape;
    ModelVars vars = lift_params(tape, params);
    ForwardResult fw =
        model_forward(tape, image, vars, cfg, cfg.sigma0, mix64(seed + 0x17ULL * r + 1));
    total += tape.scalar(cross_entropy(fw.logits, label));
  }
  return total / repeats;
}

}  // namespace detail

/// Full-chain check: scorer gradient of the expected loss on the tiny
/// pipeline against finite differences of independent-noise forwards. The
/// evaluation point is pinned to a configuration whose score grid has wide
/// min/max margins, so the (unsmoothed) min-max normalization stays on one
/// subgradient piece across the finite-difference stencil.
inline GradCheckRow check_full_chain_theta_fd(uint64_t seed, bool corrupt) {
  const uint64_t point_seed = 6;
  PipelineConfig cfg = tiny_pipeline_config(point_seed);
  ModelParams params = init_params(cfg);
  RngStream rng(point_seed, 11);
  Tensor image = gaussian_sample(rng, {16, 16, 1});
  for (int64_t i = 0; i < image.size(); ++i) image[i] = std::abs(image[i]);
  const int label = 1;

  // analytic gradient, averaged over independent estimator draws
  const int grad_repeats = 64;
  std::vector<std::string> theta_names;
  for (const auto& [name, tensor] : params.t)
    if (name.rfind("scorer.", 0) == 0) theta_names.push_back(name);

  std::map<std::string, Tensor> grad;
  for (const auto& name : theta_names) grad.emplace(name, Tensor(params.at(name).shape()));
  (void)seed;  // the evaluation point and draw streams are pinned
  for (int r = 0; r < grad_repeats; ++r) {
    Tape tape;
    ModelVars vars = lift_params(tape, params);
    ForwardResult fw =
        model_forward(tape, image, vars, cfg, cfg.sigma0, mix64(point_seed + 0xabcdULL * (r + 1)));
    tape.backward(cross_entropy(fw.logits, label));
    for (const auto& name : theta_names) {
      const Tensor& g = tape.grad(vars.at(name));
      Tensor& acc = grad.at(name);
      for (int64_t i = 0; i < g.size(); ++i) acc[i] += g[i] / grad_repeats;
    }
  }
  if (corrupt)
    for (auto& [name, g] : grad)
      for (int64_t i = 0; i < g.size(); ++i) g[i] *= 1.5f;

  // finite differences over every scorer coordinate
  const double h = 0.05;
  const int fd_repeats = 16;
  uint64_t eval_seed = mix64(point_seed ^ 0xfeedULL);
  double num = 0.0, den = 0.0;
  for (const auto& name : theta_names) {
    Tensor& theta = params.at(name);
    const Tensor& g = grad.at(name);
    for (int64_t i = 0; i < theta.size(); ++i) {
      const float orig = theta[i];
      theta[i] = static_cast<float>(orig + h);
      const double fp = detail::tiny_expected_loss(params, cfg, image, label, eval_seed, fd_repeats);
      eval_seed = mix64(eval_seed + 1);
      theta[i] = static_cast<float>(orig - h);
      const double fm = detail::tiny_expected_loss(params, cfg, image, label, eval_seed, fd_repeats);
      eval_seed = mix64(eval_seed + 1);
      theta[i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      num += (g[i] - fd) * (g[i] - fd);
      den += fd * fd;
    }
  }
  const double rel = std::sqrt(num) / std::sqrt(den);
  return GradCheckRow{"full_chain_theta_fd", rel, 0.0, 0.1, rel <= 0.1};
}

inline std::vector<GradCheckRow> run_gradchecks(uint64_t seed, bool corrupt_backward) {
  std::vector<GradCheckRow> rows;
  rows.push_back(check_closed_form_forward(seed));
  rows.push_back(check_closed_form_backward(seed, corrupt_backward));
  rows.push_back(check_fd_consistency_n3(seed, corrupt_backward));
  rows.push_back(check_sigma_zero_parity(seed));
  rows.push_back(check_sigma_zero_scorer_grad(seed));
  rows.push_back(check_full_chain_theta_fd(seed, corrupt_backward));
  return rows;
}

}  // namespace ptopk
