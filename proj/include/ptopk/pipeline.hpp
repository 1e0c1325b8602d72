#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ptopk/autodiff.hpp"
#include "ptopk/io.hpp"
#include "ptopk/nn.hpp"
#include "ptopk/patches.hpp"
#include "ptopk/perturbed.hpp"
#include "ptopk/rng.hpp"
#include "ptopk/sinkhorn.hpp"
#include "ptopk/threads.hpp"
#include "ptopk/topk.hpp"

namespace ptopk {

// End-to-end model: scorer -> normalized scores -> differentiable selection
// -> patch extraction -> shared per-patch feature net -> aggregation head.
// The scorer sees the 2x-downscaled image; patches are cut from the full
// resolution image.

enum class Selector { perturbed, sinkhorn, hard };
enum class Aggregation { mean, max, attention };

inline Selector selector_from_string(const std::string& s) {
  if (s == "perturbed") return Selector::perturbed;
  if (s == "sinkhorn") return Selector::sinkhorn;
  if (s == "hard") return Selector::hard;
  throw std::invalid_argument("unknown selector: " + s);
}

inline Aggregation aggregation_from_string(const std::string& s) {
  if (s == "mean") return Aggregation::mean;
  if (s == "max") return Aggregation::max;
  if (s == "attention") return Aggregation::attention;
  throw std::invalid_argument("unknown aggregation: " + s);
}

struct PipelineConfig {
  int image_h = 64, image_w = 64, channels = 1;
  int patch = 8, stride = 8;
  int k = 2;
  int num_classes = 4;
  Aggregation aggregation = Aggregation::mean;
  Selector selector = Selector::perturbed;
  float sigma0 = 0.05f;
  bool sigma_decay = true;
  int samples = 500;  // Monte-Carlo draws per selection
  float entropy_coeff = 0.0f;
  float learning_rate = 1e-3f;
  float weight_decay = 1e-4f;
  float grad_clip = 1.0f;
  int steps = 400;
  int batch_size = 32;
  int feature_dim = 32;
  uint64_t seed = 0;
  int threads = 1;
  SinkhornConfig sinkhorn;

  PatchGeometry geometry() const {
    return make_patch_geometry(image_h, image_w, channels, patch, patch, stride, stride);
  }

  // scorer pooling factor from downscaled image to the score grid
  int scorer_pool() const {
    PatchGeometry g = geometry();
    const int hs = image_h / 2, ws = image_w / 2;
    if (hs % g.grid_h != 0 || ws % g.grid_w != 0 || hs / g.grid_h != ws / g.grid_w)
      throw std::invalid_argument("pipeline: downscaled image does not pool evenly onto the score grid");
    return hs / g.grid_h;
  }

  void validate() const {
    if (k < 1 || k > geometry().num_patches())
      throw std::invalid_argument("pipeline: K must be in [1, N]");
    if (num_classes < 2) throw std::invalid_argument("pipeline: need at least 2 classes");
    if (!(entropy_coeff >= 0)) throw std::invalid_argument("pipeline: entropy_coeff must be >= 0");
    if (!(sigma0 >= 0)) throw std::invalid_argument("pipeline: sigma0 must be >= 0");
    if (samples < 1 || batch_size < 1 || steps < 1)
      throw std::invalid_argument("pipeline: counts must be >= 1");
    if (image_h % 2 != 0 || image_w % 2 != 0)
      throw std::invalid_argument("pipeline: image dims must be even for the 2x scorer downscale");
    scorer_pool();
  }
};

/// Named parameter set. Prefixes group the three sub-networks: "scorer."
/// (theta), "feature." (phi), "agg." (psi).
struct ModelParams {
  std::map<std::string, Tensor> t;

  Tensor& at(const std::string& name) {
    auto it = t.find(name);
    if (it == t.end()) throw std::invalid_argument("unknown parameter: " + name);
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = t.find(name);
    if (it == t.end()) throw std::invalid_argument("unknown parameter: " + name);
    return it->second;
  }
};

inline ModelParams init_params(const PipelineConfig& cfg) {
  cfg.validate();
  RngStream rng(mix64(cfg.seed ^ 0x706172616d735fULL), 0);
  const int c = cfg.channels;
  const int dh = cfg.feature_dim;
  const int feat_flat = (cfg.patch / 2) * (cfg.patch / 2) * 16;
  if (cfg.patch % 2 != 0) throw std::invalid_argument("pipeline: patch size must be even");

  ModelParams p;
  p.t["scorer.conv1.w"] = he_conv_init(rng, 3, 3, c, 8);
  p.t["scorer.conv1.b"] = Tensor({8});
  p.t["scorer.conv2.w"] = he_conv_init(rng, 3, 3, 8, 1);
  p.t["scorer.conv2.b"] = Tensor({1});
  p.t["feature.conv1.w"] = he_conv_init(rng, 3, 3, c, 8);
  p.t["feature.conv1.b"] = Tensor({8});
  p.t["feature.conv2.w"] = he_conv_init(rng, 3, 3, 8, 16);
  p.t["feature.conv2.b"] = Tensor({16});
  p.t["feature.dense.w"] = glorot_dense_init(rng, dh, feat_flat);
  p.t["feature.dense.b"] = Tensor({dh});
  p.t["agg.head.w"] = glorot_dense_init(rng, cfg.num_classes, dh);
  p.t["agg.head.b"] = Tensor({cfg.num_classes});
  if (cfg.aggregation == Aggregation::attention) {
    const int dk = dh / 2;
    p.t["agg.att.pos"] = Tensor({cfg.k, dh});  // zero-initialized positional encoding
    for (int h = 0; h < 2; ++h) {
      const std::string hp = "agg.att.h" + std::to_string(h);
      p.t[hp + ".q"] = glorot_dense_init(rng, dk, dh);
      p.t[hp + ".k"] = glorot_dense_init(rng, dk, dh);
      p.t[hp + ".v"] = glorot_dense_init(rng, dk, dh);
    }
    p.t["agg.att.out.w"] = glorot_dense_init(rng, dh, dh);
    p.t["agg.att.out.b"] = Tensor({dh});
  }
  return p;
}

/// Parameters lifted onto a tape as leaves, keeping the map's name order.
struct ModelVars {
  std::map<std::string, Var> v;
  Var at(const std::string& name) const {
    auto it = v.find(name);
    if (it == v.end()) throw std::invalid_argument("unknown parameter var: " + name);
    return it->second;
  }
};

inline ModelVars lift_params(Tape& tape, const ModelParams& p) {
  ModelVars out;
  for (const auto& [name, tensor] : p.t) out.v.emplace(name, tape.leaf(tensor));
  return out;
}

/// Scorer on the (already downscaled) image: two 3x3 convs, relu between,
/// max-pool onto the score grid.
inline Var scorer_forward(Var image_small, const ModelVars& vars, int pool) {
  Var h1 = relu(conv2d_same(image_small, vars.at("scorer.conv1.w"), vars.at("scorer.conv1.b")));
  Var h2 = conv2d_same(h1, vars.at("scorer.conv2.w"), vars.at("scorer.conv2.b"));
  Var pooled = max_pool2d(h2, pool, pool);
  const Tensor& pv = pooled.tape->value(pooled);
  return reshape(pooled, {pv.dim(0), pv.dim(1)});
}

/// Shared per-patch encoder: two convs, 2x2 average pool, dense projection.
inline Var feature_forward(Var patch, const ModelVars& vars, int feature_dim) {
  Var h1 = relu(conv2d_same(patch, vars.at("feature.conv1.w"), vars.at("feature.conv1.b")));
  Var h2 = relu(conv2d_same(h1, vars.at("feature.conv2.w"), vars.at("feature.conv2.b")));
  Var pooled = avg_pool2d(h2, 2, 2);
  Var flat = reshape(pooled, {static_cast<int>(pooled.tape->value(pooled).size())});
  (void)feature_dim;
  return affine(vars.at("feature.dense.w"), flat, vars.at("feature.dense.b"));
}

namespace detail {

inline Var softmax_rows(Var m) {
  return vexp(bcast_add_col(m, scale(lse_rows(m), -1.0f)));
}

inline Var attention_block(Var h, const ModelVars& vars) {
  Tape& t = *h.tape;
  const int dh = t.value(h).dim(1);
  const int dk = dh / 2;
  Var x = add(h, vars.at("agg.att.pos"));
  std::vector<Var> heads;
  for (int hd = 0; hd < 2; ++hd) {
    const std::string hp = "agg.att.h" + std::to_string(hd);
    Var q = matmul(x, transpose2d(vars.at(hp + ".q")));  // (K, dk)
    Var kk = matmul(x, transpose2d(vars.at(hp + ".k")));
    Var v = matmul(x, transpose2d(vars.at(hp + ".v")));
    Var att = detail::softmax_rows(scale(matmul(q, transpose2d(kk)), 1.0f / std::sqrt(static_cast<float>(dk))));
    heads.push_back(matmul(att, v));  // (K, dk)
  }
  Var cat = concat_cols(heads[0], heads[1]);  // (K, dh)
  Var proj = bcast_add_row(matmul(cat, transpose2d(vars.at("agg.att.out.w"))), vars.at("agg.att.out.b"));
  return add(x, proj);  // residual
}

}  // namespace detail

/// Pools the K patch embeddings into logits.
inline Var aggregate(Var h, Aggregation mode, const ModelVars& vars) {
  switch (mode) {
    case Aggregation::mean:
      return affine(vars.at("agg.head.w"), mean_rows(h), vars.at("agg.head.b"));
    case Aggregation::max:
      return affine(vars.at("agg.head.w"), max_rows(h), vars.at("agg.head.b"));
    case Aggregation::attention:
      return affine(vars.at("agg.head.w"), mean_rows(detail::attention_block(h, vars)),
                    vars.at("agg.head.b"));
  }
  throw std::invalid_argument("aggregate: unknown mode");
}

struct ForwardResult {
  Var logits;
  Var raw_scores;   // flattened scorer output, pre-normalization
  Var norm_scores;  // after min-max normalization
  Var indicator;    // (N, K)
};

/// Full forward pass on the given tape. sigma applies to the perturbed
/// selector only; noise_seed keys its Gaussian draws.
inline ForwardResult model_forward(Tape& tape, const Tensor& image, const ModelVars& vars,
                                   const PipelineConfig& cfg, float sigma, uint64_t noise_seed) {
  const PatchGeometry geom = cfg.geometry();
  const int n = geom.num_patches();

  Var img = tape.leaf(image);
  Var small = avg_pool2d(img, 2, 2);
  Var grid = scorer_forward(small, vars, cfg.scorer_pool());
  if (tape.value(grid).dim(0) != geom.grid_h || tape.value(grid).dim(1) != geom.grid_w)
    throw std::invalid_argument("model_forward: scorer grid does not match patch grid");
  Var raw = reshape(grid, {n});
  Var norm = normalize_scores_node(raw);

  ForwardResult out;
  out.raw_scores = raw;
  out.norm_scores = norm;

  Var patches;  // (K, Ph, Pw, C)
  if (cfg.selector == Selector::hard) {
    const std::vector<int> idx = hard_topk_indices(tape.value(norm), cfg.k);
    out.indicator = tape.append(indicator_from_indices(idx, n), "hard_topk", {norm.id}, nullptr);
    patches = tape.append(extract_by_indices(image, idx, geom), "slice_patches",
                          {img.id, out.indicator.id}, nullptr);
  } else {
    if (cfg.selector == Selector::perturbed) {
      PerturbedConfig pc;
      pc.n = cfg.samples;
      pc.sigma = sigma;
      pc.seed = noise_seed;
      out.indicator = perturbed_topk_node(norm, cfg.k, pc);
    } else {
      out.indicator = sinkhorn_topk_node(norm, cfg.k, cfg.sinkhorn);
    }
    patches = extract_patches_node(img, out.indicator, geom);
  }

  std::vector<Var> embeddings;
  embeddings.reserve(static_cast<size_t>(cfg.k));
  for (int col = 0; col < cfg.k; ++col)
    embeddings.push_back(feature_forward(select_row(patches, col), vars, cfg.feature_dim));
  Var h = stack_rows(embeddings);  // (K, D_h)
  out.logits = aggregate(h, cfg.aggregation, vars);
  return out;
}

/// -lambda_H * H(softmax(flatten(S))), the optional score-entropy loss term.
inline double entropy_regularizer(const Tensor& score_grid, float lambda_h) {
  if (!(lambda_h >= 0)) throw std::invalid_argument("entropy_regularizer: lambda_H must be >= 0");
  if (lambda_h == 0.0f) return 0.0;
  float hi = score_grid.max();
  double z = 0.0, dotp = 0.0;
  for (int64_t i = 0; i < score_grid.size(); ++i) z += std::exp(static_cast<double>(score_grid[i]) - hi);
  const double lse = hi + std::log(z);
  for (int64_t i = 0; i < score_grid.size(); ++i) {
    const double p = std::exp(static_cast<double>(score_grid[i]) - lse);
    dotp += p * score_grid[i];
  }
  const double entropy = lse - dotp;
  return -static_cast<double>(lambda_h) * entropy;
}

struct StepMetrics {
  double loss = 0.0;
  double accuracy = 0.0;
  float sigma = 0.0f;
  double scorer_grad_norm = 0.0;
  double entropy = 0.0;  // mean softmax entropy of the raw scores
};

/// Thrown when a training step produces a non-finite loss; carries the
/// offending score grid and indicator for the diagnostic dump.
struct TrainingDiverged : std::runtime_error {
  Tensor scores;
  Tensor indicator;
  int64_t step;
  TrainingDiverged(int64_t step_, Tensor s, Tensor y)
      : std::runtime_error("training diverged: non-finite loss at step " + std::to_string(step_)),
        scores(std::move(s)),
        indicator(std::move(y)),
        step(step_) {}
};

struct AdamWState {
  std::map<std::string, Tensor> m, v;
  int64_t t = 0;
};

struct Batch {
  std::vector<const Tensor*> images;  // borrowed, (H, W, C) each
  std::vector<int> labels;            // 0-based class ids
};

inline float effective_sigma(const PipelineConfig& cfg, int64_t step) {
  return cfg.sigma_decay ? sigma_schedule(step, cfg.steps, cfg.sigma0) : cfg.sigma0;
}

/// One optimization step: per-example forward/backward (optionally in
/// parallel), fixed-order gradient averaging, global-norm clipping, AdamW
/// with decoupled weight decay.
inline StepMetrics train_step(const Batch& batch, ModelParams& params, AdamWState& opt,
                              const PipelineConfig& cfg, int64_t step) {
  const int b = static_cast<int>(batch.images.size());
  if (b == 0) throw std::invalid_argument("train_step: empty batch");
  const float sigma = effective_sigma(cfg, step);

  std::vector<std::string> names;
  for (const auto& [name, tensor] : params.t) names.push_back(name);

  struct ExampleOut {
    std::vector<Tensor> grads;
    double loss = 0.0;
    bool correct = false;
    double entropy = 0.0;
    Tensor scores, indicator;
    bool finite = true;
  };
  std::vector<ExampleOut> outs(static_cast<size_t>(b));

  parallel_for(b, cfg.threads, [&](int e) {
    Tape tape;
    ModelVars vars = lift_params(tape, params);
    const uint64_t noise_seed =
        mix64(mix64(cfg.seed + 0x5e11ULL) ^ (static_cast<uint64_t>(step) * 0x9E3779B97F4A7C15ULL +
                                             static_cast<uint64_t>(e)));
    ForwardResult fw = model_forward(tape, *batch.images[static_cast<size_t>(e)], vars, cfg, sigma,
                                     noise_seed);
    Var loss = cross_entropy(fw.logits, batch.labels[static_cast<size_t>(e)]);
    Var ent = softmax_entropy(fw.raw_scores);
    if (cfg.entropy_coeff > 0.0f) loss = add(loss, scale(ent, -cfg.entropy_coeff));

    ExampleOut& out = outs[static_cast<size_t>(e)];
    out.loss = tape.scalar(loss);
    out.entropy = tape.scalar(ent);
    out.scores = tape.value(fw.raw_scores);
    out.indicator = tape.value(fw.indicator);
    if (!std::isfinite(out.loss)) {
      out.finite = false;
      return;
    }
    const Tensor& lv = tape.value(fw.logits);
    int pred = 0;
    for (int c = 1; c < lv.dim(0); ++c)
      if (lv[c] > lv[pred]) pred = c;
    out.correct = pred == batch.labels[static_cast<size_t>(e)];

    tape.backward(loss);
    out.grads.reserve(names.size());
    for (const auto& name : names) out.grads.push_back(tape.grad(vars.at(name)));
  });

  StepMetrics metrics;
  metrics.sigma = sigma;
  for (int e = 0; e < b; ++e) {
    if (!outs[static_cast<size_t>(e)].finite)
      throw TrainingDiverged(step, outs[static_cast<size_t>(e)].scores,
                             outs[static_cast<size_t>(e)].indicator);
    metrics.loss += outs[static_cast<size_t>(e)].loss / b;
    metrics.accuracy += outs[static_cast<size_t>(e)].correct ? 1.0 / b : 0.0;
    metrics.entropy += outs[static_cast<size_t>(e)].entropy / b;
  }

  // fixed-order average over examples
  std::vector<Tensor> grads;
  grads.reserve(names.size());
  for (size_t p = 0; p < names.size(); ++p) {
    Tensor g(params.at(names[p]).shape());
    for (int e = 0; e < b; ++e) {
      const Tensor& ge = outs[static_cast<size_t>(e)].grads[p];
      for (int64_t i = 0; i < g.size(); ++i) g[i] += ge[i] / b;
    }
    grads.push_back(std::move(g));
  }

  double scorer_sq = 0.0, total_sq = 0.0;
  for (size_t p = 0; p < names.size(); ++p) {
    double sq = 0.0;
    for (int64_t i = 0; i < grads[p].size(); ++i) sq += static_cast<double>(grads[p][i]) * grads[p][i];
    total_sq += sq;
    if (names[p].rfind("scorer.", 0) == 0) scorer_sq += sq;
  }
  metrics.scorer_grad_norm = std::sqrt(scorer_sq);

  float clip_scale = 1.0f;
  if (cfg.grad_clip > 0 && std::sqrt(total_sq) > cfg.grad_clip)
    clip_scale = static_cast<float>(cfg.grad_clip / std::sqrt(total_sq));

  // AdamW
  opt.t += 1;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(opt.t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(opt.t));
  for (size_t p = 0; p < names.size(); ++p) {
    Tensor& theta = params.at(names[p]);
    Tensor& m = opt.m.try_emplace(names[p], Tensor(theta.shape())).first->second;
    Tensor& v = opt.v.try_emplace(names[p], Tensor(theta.shape())).first->second;
    for (int64_t i = 0; i < theta.size(); ++i) {
      const double g = static_cast<double>(grads[p][i]) * clip_scale;
      m[i] = static_cast<float>(b1 * m[i] + (1.0 - b1) * g);
      v[i] = static_cast<float>(b2 * v[i] + (1.0 - b2) * g * g);
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      double next = theta[i] - cfg.learning_rate * mhat / (std::sqrt(vhat) + eps);
      next -= static_cast<double>(cfg.learning_rate) * cfg.weight_decay * theta[i];
      theta[i] = static_cast<float>(next);
    }
  }
  return metrics;
}

/// Accuracy of the model over a set of images; inference always selects with
/// hard Top-K unless a different selector is forced.
inline double evaluate(const ModelParams& params, const PipelineConfig& cfg, const Tensor& images,
                       const std::vector<int>& labels, Selector selector = Selector::hard) {
  const int count = images.dim(0);
  if (count != static_cast<int>(labels.size()))
    throw std::invalid_argument("evaluate: image/label count mismatch");
  PipelineConfig ecfg = cfg;
  ecfg.selector = selector;
  const int64_t stride = images.size() / count;
  std::vector<int> correct(static_cast<size_t>(count), 0);
  parallel_for(count, cfg.threads, [&](int i) {
    Tensor image({cfg.image_h, cfg.image_w, cfg.channels});
    for (int64_t j = 0; j < stride; ++j) image[j] = images[i * stride + j];
    Tape tape;
    ModelVars vars = lift_params(tape, params);
    ForwardResult fw = model_forward(tape, image, vars, ecfg, 0.0f, mix64(0xe7a1ULL + static_cast<uint64_t>(i)));
    const Tensor& lv = tape.value(fw.logits);
    int pred = 0;
    for (int c = 1; c < lv.dim(0); ++c)
      if (lv[c] > lv[pred]) pred = c;
    correct[static_cast<size_t>(i)] = pred == labels[static_cast<size_t>(i)] ? 1 : 0;
  });
  int64_t total = 0;
  for (int v : correct) total += v;
  return static_cast<double>(total) / count;
}

// Checkpoints: one PTKT file per parameter plus a manifest of name=shape.

inline void save_checkpoint(const std::string& dir, const ModelParams& params) {
  std::vector<std::pair<std::string, std::string>> manifest;
  for (const auto& [name, tensor] : params.t) {
    write_ptkt(dir + "/" + name + ".ptkt", tensor);
    manifest.emplace_back(name, shape_str(tensor.shape()));
  }
  write_kv(dir + "/manifest.txt", manifest);
}

inline ModelParams load_checkpoint(const std::string& dir) {
  ModelParams p;
  for (const auto& [name, shape] : read_kv(dir + "/manifest.txt")) {
    Tensor t = read_ptkt(dir + "/" + name + ".ptkt");
    if (shape_str(t.shape()) != shape)
      throw std::runtime_error("checkpoint " + name + ": shape " + shape_str(t.shape()) +
                               " does not match manifest " + shape);
    p.t.emplace(name, std::move(t));
  }
  return p;
}

}  // namespace ptopk
