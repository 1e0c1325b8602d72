#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "ptopk/tensor.hpp"

namespace ptopk {

// Index-sorted hard Top-K and its indicator/linear-program view.
//
// The indicator of a selection y_1 < ... < y_K over N elements is the N x K
// matrix whose k-th column is one-hot at y_k. Soft selections are convex
// combinations of such matrices: nonneg entries, columns summing to 1, rows
// summing to at most 1, column centers strictly increasing.

/// Positions of the K largest entries of s, reported in ascending index
/// order. Ties prefer the lower index. Full sort for small N, partial
/// selection above 4096.
inline std::vector<int> hard_topk_indices(const std::vector<float>& s, int k) {
  const int n = static_cast<int>(s.size());
  if (n < 1) throw std::invalid_argument("hard_topk_indices: empty scores");
  if (k < 1 || k > n) throw std::invalid_argument("hard_topk_indices: K must be in [1, N]");

  std::vector<int> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  auto better = [&](int a, int b) { return s[a] > s[b] || (s[a] == s[b] && a < b); };
  if (n <= 4096) {
    std::sort(idx.begin(), idx.end(), better);
  } else {
    std::nth_element(idx.begin(), idx.begin() + (k - 1), idx.end(), better);
  }
  idx.resize(static_cast<size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline std::vector<int> hard_topk_indices(const Tensor& s, int k) {
  return hard_topk_indices(std::vector<float>(s.data(), s.data() + s.size()), k);
}

/// N x K matrix with column k one-hot at y[k].
inline Tensor indicator_from_indices(const std::vector<int>& y, int n) {
  const int k = static_cast<int>(y.size());
  for (int j = 0; j < k; ++j) {
    if (y[j] < 0 || y[j] >= n) throw std::invalid_argument("indicator_from_indices: index out of range");
    if (j > 0 && y[j] <= y[j - 1])
      throw std::invalid_argument("indicator_from_indices: indices must be strictly increasing");
  }
  Tensor out({n, k});
  for (int j = 0; j < k; ++j) out[static_cast<int64_t>(y[j]) * k + j] = 1.0f;
  return out;
}

/// Column-wise argmax of an indicator, the inverse of indicator_from_indices
/// on integral inputs.
inline std::vector<int> indices_from_indicator(const Tensor& y) {
  const int n = y.dim(0), k = y.dim(1);
  std::vector<int> out(static_cast<size_t>(k));
  for (int j = 0; j < k; ++j) {
    int best = 0;
    for (int i = 1; i < n; ++i)
      if (y[static_cast<int64_t>(i) * k + j] > y[static_cast<int64_t>(best) * k + j]) best = i;
    out[j] = best;
  }
  return out;
}

/// <Y, s 1^T> = sum_k sum_n Y[n,k] * s[n].
inline double lp_objective(const Tensor& y, const std::vector<float>& s) {
  const int n = static_cast<int>(s.size());
  if (y.rank() != 2 || y.dim(0) != n) throw std::invalid_argument("lp_objective: shape mismatch");
  const int k = y.dim(1);
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    double row = 0.0;
    for (int j = 0; j < k; ++j) row += y[static_cast<int64_t>(i) * k + j];
    acc += row * s[i];
  }
  return acc;
}

/// Exhaustive LP oracle: enumerates every strictly increasing K-subset of
/// [0, N) and returns the integral indicator with the largest objective.
/// Ties keep the lexicographically smallest index set. N is capped at 16.
inline Tensor brute_force_topk(const std::vector<float>& s, int k) {
  const int n = static_cast<int>(s.size());
  if (n > 16) throw std::invalid_argument("brute_force_topk: N > 16");
  if (n < 1 || k < 1 || k > n) throw std::invalid_argument("brute_force_topk: K must be in [1, N]");

  std::vector<int> comb(static_cast<size_t>(k));
  std::iota(comb.begin(), comb.end(), 0);
  std::vector<int> best;
  double best_obj = 0.0;
  for (;;) {
    double obj = 0.0;
    for (int i : comb) obj += s[i];
    if (best.empty() || obj > best_obj) {
      best = comb;
      best_obj = obj;
    }
    // next combination in lexicographic order
    int i = k - 1;
    while (i >= 0 && comb[i] == n - k + i) --i;
    if (i < 0) break;
    ++comb[i];
    for (int j = i + 1; j < k; ++j) comb[j] = comb[j - 1] + 1;
  }
  return indicator_from_indices(best, n);
}

/// Min-max rescale (s - min) / (max - min + eps); constant inputs map to 0.
inline std::vector<float> normalize_scores(const std::vector<float>& s, float eps = 1e-5f) {
  if (s.empty()) throw std::invalid_argument("normalize_scores: empty scores");
  if (!(eps > 0)) throw std::invalid_argument("normalize_scores: eps must be > 0");
  float lo = s[0], hi = s[0];
  for (float v : s) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const float denom = hi - lo + eps;
  std::vector<float> out(s.size());
  for (size_t i = 0; i < s.size(); ++i) out[i] = (s[i] - lo) / denom;
  return out;
}

inline Tensor normalize_scores(const Tensor& s, float eps = 1e-5f) {
  auto v = normalize_scores(std::vector<float>(s.data(), s.data() + s.size()), eps);
  return Tensor(s.shape(), std::move(v));
}

// Feasibility checks for (soft) indicators, with the tolerances used across
// the test suites.

inline bool indicator_entries_nonneg(const Tensor& y, double tol = 0.0) {
  for (int64_t i = 0; i < y.size(); ++i)
    if (y[i] < -tol) return false;
  return true;
}

inline double indicator_max_col_sum_err(const Tensor& y) {
  const int n = y.dim(0), k = y.dim(1);
  double worst = 0.0;
  for (int j = 0; j < k; ++j) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += y[static_cast<int64_t>(i) * k + j];
    worst = std::max(worst, std::abs(acc - 1.0));
  }
  return worst;
}

inline double indicator_max_row_sum_excess(const Tensor& y) {
  const int n = y.dim(0), k = y.dim(1);
  double worst = 0.0;
  for (int i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int j = 0; j < k; ++j) acc += y[static_cast<int64_t>(i) * k + j];
    worst = std::max(worst, acc - 1.0);
  }
  return worst;
}

/// Center of mass sum_i i*Y[i,k] per column; strict increase across columns
/// is the index-sorting constraint of the selection polytope.
inline std::vector<double> indicator_column_centers(const Tensor& y) {
  const int n = y.dim(0), k = y.dim(1);
  std::vector<double> c(static_cast<size_t>(k), 0.0);
  for (int j = 0; j < k; ++j)
    for (int i = 0; i < n; ++i) c[j] += static_cast<double>(i) * y[static_cast<int64_t>(i) * k + j];
  return c;
}

inline bool indicator_centers_strictly_increasing(const Tensor& y) {
  auto c = indicator_column_centers(y);
  for (size_t j = 1; j < c.size(); ++j)
    if (!(c[j] > c[j - 1])) return false;
  return true;
}

}  // namespace ptopk
