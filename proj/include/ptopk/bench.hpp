#pragma once

#include <algorithm>
#include <chrono>
#include <vector>

#include "ptopk/pipeline.hpp"

namespace ptopk {

/// Images/second of forward-only inference over the given batch, one value
/// per timed trial (after the warm-up passes).
inline std::vector<double> inference_throughput(const ModelParams& params,
                                                const PipelineConfig& cfg, const Tensor& images,
                                                int trials, int warmup = 1) {
  const int count = images.dim(0);
  const int64_t stride = images.size() / count;
  std::vector<Tensor> batch;
  batch.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    Tensor img({cfg.image_h, cfg.image_w, cfg.channels});
    for (int64_t j = 0; j < stride; ++j) img[j] = images[i * stride + j];
    batch.push_back(std::move(img));
  }

  auto pass = [&]() {
    double sink = 0.0;
    for (int i = 0; i < count; ++i) {
      Tape tape;
      ModelVars vars = lift_params(tape, params);
      ForwardResult fw = model_forward(tape, batch[static_cast<size_t>(i)], vars, cfg, cfg.sigma0,
                                       mix64(0xbe7cULL + static_cast<uint64_t>(i)));
      sink += tape.value(fw.logits)[0];
    }
    return sink;
  };

  double sink = 0.0;
  for (int w = 0; w < warmup; ++w) sink += pass();

  std::vector<double> out;
  out.reserve(static_cast<size_t>(trials));
  for (int t = 0; t < trials; ++t) {
    const auto t0 = std::chrono::steady_clock::now();
    sink += pass();
    const auto t1 = std::chrono::steady_clock::now();
    const double secs = std::chrono::duration<double>(t1 - t0).count();
    out.push_back(count / secs);
  }
  static volatile double keep;
  keep = sink;
  return out;
}

inline double median(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

}  // namespace ptopk
