#pragma once

#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

#include "ptopk/autodiff.hpp"
#include "ptopk/tensor.hpp"

namespace ptopk {

/// Sliding-window grid over an image. Patch index n maps row-major to grid
/// cell (n / grid_w, n % grid_w) with pixel origin (r*stride_h, c*stride_w).
struct PatchGeometry {
  int image_h = 0, image_w = 0, channels = 1;
  int patch_h = 0, patch_w = 0;
  int stride_h = 0, stride_w = 0;
  int grid_h = 0, grid_w = 0;

  int num_patches() const { return grid_h * grid_w; }
  int64_t patch_numel() const { return static_cast<int64_t>(patch_h) * patch_w * channels; }

  std::pair<int, int> origin(int n) const {
    return {(n / grid_w) * stride_h, (n % grid_w) * stride_w};
  }
};

inline PatchGeometry make_patch_geometry(int image_h, int image_w, int channels, int patch_h,
                                         int patch_w, int stride_h, int stride_w) {
  if (stride_h <= 0 || stride_w <= 0) throw std::invalid_argument("patch geometry: stride must be > 0");
  if (patch_h <= 0 || patch_w <= 0) throw std::invalid_argument("patch geometry: patch dims must be > 0");
  if (patch_h > image_h || patch_w > image_w)
    throw std::invalid_argument("patch geometry: patch larger than image");
  PatchGeometry g;
  g.image_h = image_h;
  g.image_w = image_w;
  g.channels = channels;
  g.patch_h = patch_h;
  g.patch_w = patch_w;
  g.stride_h = stride_h;
  g.stride_w = stride_w;
  g.grid_h = (image_h - patch_h) / stride_h + 1;
  g.grid_w = (image_w - patch_w) / stride_w + 1;
  return g;
}

inline void check_image(const Tensor& image, const PatchGeometry& g) {
  if (image.rank() != 3 || image.dim(0) != g.image_h || image.dim(1) != g.image_w ||
      image.dim(2) != g.channels)
    throw std::invalid_argument("image shape " + shape_str(image.shape()) +
                                " does not match patch geometry");
}

/// All N patches as one (N, Ph, Pw, C) tensor, lexicographic over grid cells.
inline Tensor enumerate_patches(const Tensor& image, const PatchGeometry& g) {
  check_image(image, g);
  const int n = g.num_patches();
  Tensor out({n, g.patch_h, g.patch_w, g.channels});
  int64_t w = 0;
  for (int p = 0; p < n; ++p) {
    const auto [oy, ox] = g.origin(p);
    for (int y = 0; y < g.patch_h; ++y)
      for (int x = 0; x < g.patch_w; ++x)
        for (int c = 0; c < g.channels; ++c)
          out[w++] = image[(static_cast<int64_t>(oy + y) * g.image_w + (ox + x)) * g.channels + c];
  }
  return out;
}

/// X~ = Y^T P over the materialized all-patches tensor.
inline Tensor extract_dense(const Tensor& all_patches, const Tensor& y) {
  if (all_patches.rank() < 2 || y.rank() != 2 || all_patches.dim(0) != y.dim(0))
    throw std::invalid_argument("extract_dense: shape mismatch");
  const int n = y.dim(0), k = y.dim(1);
  const int64_t pn = all_patches.size() / n;
  Shape s = all_patches.shape();
  s[0] = k;
  Tensor out(s);
  for (int col = 0; col < k; ++col)
    for (int64_t i = 0; i < pn; ++i) {
      double acc = 0.0;
      for (int p = 0; p < n; ++p)
        acc += static_cast<double>(y[static_cast<int64_t>(p) * k + col]) * all_patches[p * pn + i];
      out[col * pn + i] = static_cast<float>(acc);
    }
  return out;
}

inline void check_soft_indicator_columns(const Tensor& y) {
  const int n = y.dim(0), k = y.dim(1);
  for (int col = 0; col < k; ++col) {
    double sum = 0.0;
    for (int p = 0; p < n; ++p) {
      const float v = y[static_cast<int64_t>(p) * k + col];
      if (v < -1e-4f) throw std::invalid_argument("extract_scan: negative indicator entry");
      sum += v;
    }
    if (sum < 1e-6)
      throw std::invalid_argument("extract_scan: column " + std::to_string(col) + " has zero mass");
  }
}

/// Same contraction as extract_dense without materializing the all-patches
/// tensor: per column, accumulate Y[n,k] * patch_n in ascending n.
inline Tensor extract_scan(const Tensor& image, const Tensor& y, const PatchGeometry& g) {
  check_image(image, g);
  if (y.rank() != 2 || y.dim(0) != g.num_patches())
    throw std::invalid_argument("extract_scan: indicator rows must equal patch count");
  check_soft_indicator_columns(y);
  const int n = y.dim(0), k = y.dim(1);
  const int64_t pn = g.patch_numel();
  Tensor out({k, g.patch_h, g.patch_w, g.channels});
  std::vector<double> acc(static_cast<size_t>(pn));
  for (int col = 0; col < k; ++col) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int p = 0; p < n; ++p) {
      const float w = y[static_cast<int64_t>(p) * k + col];
      if (w == 0.0f) continue;
      const auto [oy, ox] = g.origin(p);
      int64_t i = 0;
      for (int yy = 0; yy < g.patch_h; ++yy)
        for (int xx = 0; xx < g.patch_w; ++xx)
          for (int c = 0; c < g.channels; ++c)
            acc[static_cast<size_t>(i++)] +=
                static_cast<double>(w) *
                image[(static_cast<int64_t>(oy + yy) * g.image_w + (ox + xx)) * g.channels + c];
    }
    for (int64_t i = 0; i < pn; ++i) out[col * pn + i] = static_cast<float>(acc[static_cast<size_t>(i)]);
  }
  return out;
}

/// Direct slicing for integral selections; the hard-path identity case.
inline Tensor extract_by_indices(const Tensor& image, const std::vector<int>& idx,
                                 const PatchGeometry& g) {
  check_image(image, g);
  const int k = static_cast<int>(idx.size());
  const int64_t pn = g.patch_numel();
  Tensor out({k, g.patch_h, g.patch_w, g.channels});
  for (int col = 0; col < k; ++col) {
    const auto [oy, ox] = g.origin(idx[static_cast<size_t>(col)]);
    int64_t i = col * pn;
    for (int yy = 0; yy < g.patch_h; ++yy)
      for (int xx = 0; xx < g.patch_w; ++xx)
        for (int c = 0; c < g.channels; ++c)
          out[i++] = image[(static_cast<int64_t>(oy + yy) * g.image_w + (ox + xx)) * g.channels + c];
  }
  return out;
}

struct ExtractionGrads {
  Tensor grad_y;      // (N, K)
  Tensor grad_image;  // (H, W, C)
};

/// Backward of the linear map (image, Y) -> patches:
/// grad_Y[n,k] = <grad_patches_k, patch_n>, grad_image gathers Y-weighted
/// patch gradients at their origins (overlaps accumulate).
inline ExtractionGrads extraction_backward(const Tensor& grad_patches, const Tensor& image,
                                           const Tensor& y, const PatchGeometry& g) {
  check_image(image, g);
  const int n = g.num_patches();
  if (y.rank() != 2 || y.dim(0) != n) throw std::invalid_argument("extraction_backward: bad indicator");
  const int k = y.dim(1);
  const int64_t pn = g.patch_numel();
  if (grad_patches.rank() != 4 || grad_patches.dim(0) != k || grad_patches.size() != k * pn)
    throw std::invalid_argument("extraction_backward: grad_patches shape mismatch");

  ExtractionGrads out;
  out.grad_y = Tensor({n, k});
  out.grad_image = Tensor(image.shape());
  for (int p = 0; p < n; ++p) {
    const auto [oy, ox] = g.origin(p);
    for (int col = 0; col < k; ++col) {
      const float w = y[static_cast<int64_t>(p) * k + col];
      double ip = 0.0;
      int64_t i = col * pn;
      for (int yy = 0; yy < g.patch_h; ++yy)
        for (int xx = 0; xx < g.patch_w; ++xx)
          for (int c = 0; c < g.channels; ++c) {
            const int64_t img_off = (static_cast<int64_t>(oy + yy) * g.image_w + (ox + xx)) * g.channels + c;
            const float gp = grad_patches[i++];
            ip += static_cast<double>(gp) * image[img_off];
            if (w != 0.0f) out.grad_image[img_off] += w * gp;
          }
      out.grad_y[static_cast<int64_t>(p) * k + col] = static_cast<float>(ip);
    }
  }
  return out;
}

/// Tape node for patch extraction; gradients flow to both the indicator and
/// the image.
inline Var extract_patches_node(Var image, Var y, const PatchGeometry& g) {
  Tape& t = *image.tape;
  Tensor out = extract_scan(t.value(image), t.value(y), g);
  return t.append(std::move(out), "extract_patches", {image.id, y.id},
                  [g](Tape& t, const Tape::Node& n) {
                    ExtractionGrads eg =
                        extraction_backward(n.grad, detail::val(n, t, 0), detail::val(n, t, 1), g);
                    Tensor& gi = detail::grd(n, t, 0);
                    Tensor& gy = detail::grd(n, t, 1);
                    for (int64_t i = 0; i < gi.size(); ++i) gi[i] += eg.grad_image[i];
                    for (int64_t i = 0; i < gy.size(); ++i) gy[i] += eg.grad_y[i];
                  });
}

}  // namespace ptopk
