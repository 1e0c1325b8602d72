#pragma once

#include <cmath>
#include <memory>
#include <stdexcept>
#include <vector>

#include "ptopk/autodiff.hpp"
#include "ptopk/tensor.hpp"
#include "ptopk/topk.hpp"

namespace ptopk {

// Entropic optimal-transport relaxation of Top-K: N unit-mass points placed
// at (normalized) scores are transported onto two bins, "rejected" at 0 with
// mass N-K and "selected" at 1 with mass K. The per-element mass sent to the
// selected bin is the soft membership weight. Updates run in the log domain;
// the backward pass differentiates through the unrolled iterations.

struct SinkhornConfig {
  float epsilon_reg = 0.05f;
  int max_iters = 2000;
  double tol = 1e-5;  // L1 row-marginal residual; float32 floors near 1e-6
};

struct SinkhornResult {
  Tensor mass;  // (N), entries in [0,1], total K on convergence
  bool converged = false;
  double residual = 0.0;
  int iters = 0;
};

struct SinkhornRun {
  std::shared_ptr<Tape> tape;
  Var scores;  // leaf
  Var mass;    // (N)
  SinkhornResult info;
};

namespace detail {

struct SinkhornNodes {
  Var mass;
  SinkhornResult info;
};

/// Builds the unrolled iteration on the given tape, starting from raw scores.
inline SinkhornNodes sinkhorn_unrolled(Var s, int k, const SinkhornConfig& cfg) {
  Tape& t = *s.tape;
  const int n = t.value(s).dim(0);
  if (k < 1 || k > n) throw std::invalid_argument("sinkhorn_topk: K must be in [1, N]");
  if (!(cfg.epsilon_reg > 0)) throw std::invalid_argument("sinkhorn_topk: epsilon_reg must be > 0");
  if (cfg.max_iters < 1 || !(cfg.tol > 0)) throw std::invalid_argument("sinkhorn_topk: bad iteration config");

  const float eps = cfg.epsilon_reg;
  const double log_a = -std::log(static_cast<double>(n));  // uniform source mass 1/N
  Tensor log_b_t({2});
  log_b_t[0] = static_cast<float>(std::log(static_cast<double>(n - k) / n));
  log_b_t[1] = static_cast<float>(std::log(static_cast<double>(k) / n));
  if (k == n) log_b_t[0] = -100.0f;  // empty rejected bin in log space

  // cost columns to the two anchors, from min-max normalized scores
  Var sn = normalize_scores_node(s);
  Var c_rej = mul(sn, sn);
  Var shift = add_const(sn, -1.0f);
  Var c_sel = mul(shift, shift);
  Var cost = concat_cols(reshape(c_rej, {n, 1}), reshape(c_sel, {n, 1}));  // (N, 2)
  Var neg_cost_over_eps = scale(cost, -1.0f / eps);

  Var f = t.leaf(Tensor({n}));  // potentials start at zero
  Var g = t.leaf(Tensor({2}));
  Var eps_log_b = t.leaf(Tensor({2}, {static_cast<float>(eps * log_b_t[0]),
                                      static_cast<float>(eps * log_b_t[1])}));

  SinkhornResult info;
  Var plan = neg_cost_over_eps;  // placeholder; set in loop
  for (int it = 0; it < cfg.max_iters; ++it) {
    // f_i = eps*log a_i - eps*lse_b((g_b - C_ib)/eps)
    Var m1 = bcast_add_row(neg_cost_over_eps, scale(g, 1.0f / eps));
    f = add_const(scale(lse_rows(m1), -eps), static_cast<float>(eps * log_a));
    // g_b = eps*log b_b - eps*lse_i((f_i - C_ib)/eps)
    Var m2 = bcast_add_col(neg_cost_over_eps, scale(f, 1.0f / eps));
    g = sub(eps_log_b, scale(lse_cols(m2), eps));

    // transport plan and row-marginal residual (values only, controls the loop)
    Var log_plan = bcast_add_col(bcast_add_row(neg_cost_over_eps, scale(g, 1.0f / eps)),
                                 scale(f, 1.0f / eps));
    plan = vexp(log_plan);
    double resid = 0.0;
    for (int i = 0; i < n; ++i) {
      double row = 0.0;
      for (int b = 0; b < 2; ++b) row += t.value(plan)[static_cast<int64_t>(i) * 2 + b];
      resid += std::abs(row - 1.0 / n);
    }
    info.iters = it + 1;
    info.residual = resid;
    if (resid < cfg.tol) {
      info.converged = true;
      break;
    }
  }

  // close with a row rescale so per-element masses are row-exact in [0, 1]
  {
    Var m1 = bcast_add_row(neg_cost_over_eps, scale(g, 1.0f / eps));
    f = add_const(scale(lse_rows(m1), -eps), static_cast<float>(eps * log_a));
    plan = vexp(bcast_add_col(bcast_add_row(neg_cost_over_eps, scale(g, 1.0f / eps)),
                              scale(f, 1.0f / eps)));
  }

  // selected mass per element: N * plan[:, 1]
  std::vector<Var> elems;
  elems.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    elems.push_back(scale(get_elem(plan, i * 2 + 1), static_cast<float>(n)));
  Var mass = reshape(stack_rows(elems), {n});

  SinkhornNodes out{mass, info};
  out.info.mass = t.value(mass);
  return out;
}

}  // namespace detail

/// Forward with saved unrolled iterates; pair with sinkhorn_topk_backward.
inline SinkhornRun sinkhorn_topk_run(const std::vector<float>& s, int k, const SinkhornConfig& cfg) {
  SinkhornRun run;
  run.tape = std::make_shared<Tape>();
  run.scores = run.tape->leaf(Tensor({static_cast<int>(s.size())}, std::vector<float>(s)));
  auto nodes = detail::sinkhorn_unrolled(run.scores, k, cfg);
  run.mass = nodes.mass;
  run.info = nodes.info;
  return run;
}

/// Per-element selected mass; non-convergence is flagged on the result
/// rather than thrown.
inline SinkhornResult sinkhorn_topk_forward(const std::vector<float>& s, int k,
                                            const SinkhornConfig& cfg) {
  return sinkhorn_topk_run(s, k, cfg).info;
}

/// Reverse-mode gradient through the unrolled iterations.
inline Tensor sinkhorn_topk_backward(SinkhornRun& run, const Tensor& grad_out) {
  if (!grad_out.same_shape(run.tape->value(run.mass)))
    throw std::invalid_argument("sinkhorn_topk_backward: grad_out shape mismatch");
  Var g = run.tape->leaf(grad_out);
  Var root = dot(run.mass, g);
  run.tape->backward(root);
  return run.tape->grad(run.scores);
}

/// Selector node for the pipeline: builds an (N, K) matrix whose column k is
/// one-hot at the k-th largest-mass index (index-sorted), carrying that
/// element's mass so gradients flow back through the transport plan.
inline Var sinkhorn_topk_node(Var s, int k, const SinkhornConfig& cfg) {
  Tape& t = *s.tape;
  auto nodes = detail::sinkhorn_unrolled(s, k, cfg);
  const Tensor& mass = t.value(nodes.mass);
  const int n = mass.dim(0);
  std::vector<int> idx = hard_topk_indices(mass, k);  // ties prefer lower index
  Tensor y({n, k});
  for (int col = 0; col < k; ++col) y[static_cast<int64_t>(idx[col]) * k + col] = mass[idx[col]];
  return t.append(std::move(y), "sinkhorn_topk_select", {nodes.mass.id},
                  [idx, k](Tape& t, const Tape::Node& node) {
                    Tensor& gm = detail::grd(node, t, 0);
                    for (int col = 0; col < k; ++col)
                      gm[idx[static_cast<size_t>(col)]] +=
                          node.grad[static_cast<int64_t>(idx[static_cast<size_t>(col)]) * k + col];
                  });
}

}  // namespace ptopk
