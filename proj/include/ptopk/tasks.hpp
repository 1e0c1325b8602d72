#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "ptopk/io.hpp"
#include "ptopk/rng.hpp"
#include "ptopk/tensor.hpp"

namespace ptopk {

// Two desk-scale tasks over 8x8 binary glyph templates placed on the patch
// grid: "needle" (localize one sign among clutter, or none) and "relational"
// (report the higher digit between the leftmost and rightmost glyph).

struct GlyphDef {
  const char* name;
  std::array<const char*, 8> rows;  // '#' = on
};

// Digits 1..9 then the three sign shapes. Digit 9 is the 180-degree rotation
// of digit 6; their 4x-downscaled averages agree to within one pixel per
// block, which is what makes the relational task unreadable after 4x
// downsampling.
inline const std::vector<GlyphDef>& glyph_registry() {
  static const std::vector<GlyphDef> defs = {
      {"digit1", {"...##...", "..###...", "...##...", "...##...", "...##...", "...##...", "...##...", "..####.."}},
      {"digit2", {"..####..", ".##..##.", ".....##.", "....##..", "...##...", "..##....", ".##.....", ".######."}},
      {"digit3", {"..####..", ".##..##.", ".....##.", "...###..", ".....##.", ".....##.", ".##..##.", "..####.."}},
      {"digit4", {"....##..", "...###..", "..####..", ".##.##..", ".######.", "....##..", "....##..", "....##.."}},
      {"digit5", {".######.", ".##.....", ".##.....", ".#####..", ".....##.", ".....##.", ".##..##.", "..####.."}},
      {"digit6", {"..####..", ".##..##.", ".##.....", ".######.", ".##..##.", ".##..##.", ".##..##.", "..####.."}},
      {"digit7", {".######.", ".....##.", "....##..", "....##..", "...##...", "...##...", "..##....", "..##...."}},
      {"digit8", {"..####..", ".##..##.", ".##..##.", "..####..", ".##..##.", ".##..##.", ".##..##.", "..####.."}},
      {"digit9", {"..####..", ".##..##.", ".##..##.", ".##..##.", ".######.", ".....##.", ".##..##.", "..####.."}},
      {"sign_box", {"########", "########", "##....##", "##....##", "##....##", "##....##", "########", "########"}},
      {"sign_disc", {"...##...", "..####..", ".######.", "########", "########", ".######.", "..####..", "...##..."}},
      {"sign_cross", {"##....##", "###..###", ".######.", "..####..", "..####..", ".######.", "###..###", "##....##"}},
  };
  return defs;
}

inline constexpr int kGlyphSize = 8;
inline constexpr int kNumDigits = 9;
inline constexpr int kNumSigns = 3;

inline Tensor glyph_template(int id) {
  const GlyphDef& def = glyph_registry().at(static_cast<size_t>(id));
  Tensor t({kGlyphSize, kGlyphSize});
  for (int y = 0; y < kGlyphSize; ++y)
    for (int x = 0; x < kGlyphSize; ++x)
      t[static_cast<int64_t>(y) * kGlyphSize + x] = def.rows[static_cast<size_t>(y)][x] == '#' ? 1.0f : 0.0f;
  return t;
}

inline int digit_glyph_id(int value) {
  if (value < 1 || value > 9) throw std::invalid_argument("digit value out of range");
  return value - 1;
}

inline int sign_glyph_id(int sign_class) {
  if (sign_class < 0 || sign_class >= kNumSigns) throw std::invalid_argument("sign class out of range");
  return kNumDigits + sign_class;
}

struct GlyphPlacement {
  int cell = 0;      // patch-grid index, row-major
  int glyph_id = 0;  // registry index
  int value = 0;     // digit value, or sign class for needle signs
};

struct Dataset {
  Tensor images;  // (count, H, W, C)
  Tensor labels;  // (count)
  std::vector<std::vector<GlyphPlacement>> placements;  // in-memory only
  std::vector<std::pair<std::string, std::string>> info;
};

struct NeedleTaskConfig {
  int image = 64;
  int patch = 8, stride = 8;
  int clutter = 3;
  int train_size = 4000, val_size = 500, test_size = 1000;
  uint64_t seed = 0;
};

struct RelationalTaskConfig {
  int image = 64;
  int patch = 8, stride = 8;
  int glyph_min = 4, glyph_max = 8;
  float ramp = 0.25f;  // horizontal background gradient, the position cue inside patches
  int train_size = 4000, val_size = 500, test_size = 1000;
  uint64_t seed = 0;
};

namespace detail {

inline int task_grid(int image, int patch, int stride) {
  if (stride <= 0 || patch > image) throw std::invalid_argument("task: bad patch geometry");
  return (image - patch) / stride + 1;
}

inline void draw_glyph(Tensor& image, int image_w, int cell, int grid_w, int stride,
                       const Tensor& tmpl) {
  const int oy = (cell / grid_w) * stride;
  const int ox = (cell % grid_w) * stride;
  for (int y = 0; y < kGlyphSize; ++y)
    for (int x = 0; x < kGlyphSize; ++x)
      if (tmpl[static_cast<int64_t>(y) * kGlyphSize + x] > 0.5f)
        image[static_cast<int64_t>(oy + y) * image_w + (ox + x)] = 1.0f;
}

/// Exact sliding-window match of a binary template against a thresholded
/// image window, at every pixel offset.
inline bool image_contains_template(const float* img, int h, int w, const Tensor& tmpl) {
  for (int oy = 0; oy + kGlyphSize <= h; ++oy)
    for (int ox = 0; ox + kGlyphSize <= w; ++ox) {
      bool match = true;
      for (int y = 0; y < kGlyphSize && match; ++y)
        for (int x = 0; x < kGlyphSize; ++x) {
          const bool on = img[static_cast<int64_t>(oy + y) * w + (ox + x)] > 0.5f;
          const bool want = tmpl[static_cast<int64_t>(y) * kGlyphSize + x] > 0.5f;
          if (on != want) {
            match = false;
            break;
          }
        }
      if (match) return true;
    }
  return false;
}

inline int uniform_below(Uniform64& u, int n) { return static_cast<int>(u.next() % static_cast<uint64_t>(n)); }

}  // namespace detail

inline bool image_contains_template(const Tensor& image, const Tensor& tmpl) {
  return detail::image_contains_template(image.data(), image.dim(0), image.dim(1), tmpl);
}

/// Localized-evidence task: classes {box, disc, cross, none}, exactly one
/// sign glyph (or none) plus clutter blobs that match no sign template.
inline Dataset gen_needle(const NeedleTaskConfig& cfg) {
  if (cfg.patch < kGlyphSize) throw std::invalid_argument("gen_needle: glyph larger than patch");
  const int grid = detail::task_grid(cfg.image, cfg.patch, cfg.stride);
  const int cells = grid * grid;
  if (cfg.clutter + 1 > cells) throw std::invalid_argument("gen_needle: too much clutter for the grid");
  const int total = cfg.train_size + cfg.val_size + cfg.test_size;

  Dataset ds;
  ds.images = Tensor({total, cfg.image, cfg.image, 1});
  ds.labels = Tensor({total});
  ds.placements.resize(static_cast<size_t>(total));
  const int64_t stride_img = static_cast<int64_t>(cfg.image) * cfg.image;

  std::vector<Tensor> signs;
  for (int s = 0; s < kNumSigns; ++s) signs.push_back(glyph_template(sign_glyph_id(s)));

  for (int i = 0; i < total; ++i) {
    const int cls = i % 4;
    RngStream stream(cfg.seed, static_cast<uint64_t>(i));
    Uniform64 u = uniform_stream(stream);

    Tensor image({cfg.image, cfg.image});
    std::vector<int> used;
    auto pick_free_cell = [&]() {
      for (;;) {
        const int c = detail::uniform_below(u, cells);
        bool taken = false;
        for (int uc : used) taken |= uc == c;
        if (!taken) {
          used.push_back(c);
          return c;
        }
      }
    };

    if (cls < kNumSigns) {
      const int cell = pick_free_cell();
      detail::draw_glyph(image, cfg.image, cell, grid, cfg.stride, signs[static_cast<size_t>(cls)]);
      ds.placements[static_cast<size_t>(i)].push_back({cell, sign_glyph_id(cls), cls});
    }

    for (int c = 0; c < cfg.clutter; ++c) {
      const int cell = pick_free_cell();
      Tensor blob({kGlyphSize, kGlyphSize});
      for (;;) {
        for (int64_t p = 0; p < blob.size(); ++p)
          blob[p] = (u.next() & 0xFFFF) < 26214 ? 1.0f : 0.0f;  // density ~0.4
        bool is_sign = false;
        for (const Tensor& s : signs) is_sign |= max_abs_diff(blob, s) == 0.0;
        if (!is_sign) break;
      }
      detail::draw_glyph(image, cfg.image, cell, grid, cfg.stride, blob);
    }

    if (cls == 3) {
      // the none class must stay free of sign matches at any offset
      bool dirty = true;
      while (dirty) {
        dirty = false;
        for (const Tensor& s : signs)
          if (detail::image_contains_template(image.data(), cfg.image, cfg.image, s)) {
            dirty = true;
            break;
          }
        if (dirty) {
          // scrub by clearing one clutter pixel chosen from the stream
          const int y = detail::uniform_below(u, cfg.image);
          const int x = detail::uniform_below(u, cfg.image);
          image[static_cast<int64_t>(y) * cfg.image + x] = 0.0f;
        }
      }
    }

    for (int64_t p = 0; p < stride_img; ++p) ds.images[i * stride_img + p] = image[p];
    ds.labels[i] = static_cast<float>(cls);
  }

  ds.info = {
      {"task", "needle"},
      {"seed", std::to_string(cfg.seed)},
      {"image_h", std::to_string(cfg.image)},
      {"image_w", std::to_string(cfg.image)},
      {"channels", "1"},
      {"patch", std::to_string(cfg.patch)},
      {"stride", std::to_string(cfg.stride)},
      {"clutter", std::to_string(cfg.clutter)},
      {"train_size", std::to_string(cfg.train_size)},
      {"val_size", std::to_string(cfg.val_size)},
      {"test_size", std::to_string(cfg.test_size)},
      {"num_classes", "4"},
      {"label_min", "0"},
      {"glyphs", "sign_box;sign_disc;sign_cross"},
  };
  return ds;
}

/// Relational task: 4..8 digit glyphs at distinct grid columns over a
/// horizontal intensity ramp; label = max(leftmost value, rightmost value).
inline Dataset gen_relational(const RelationalTaskConfig& cfg) {
  if (cfg.patch < kGlyphSize) throw std::invalid_argument("gen_relational: glyph larger than patch");
  const int grid = detail::task_grid(cfg.image, cfg.patch, cfg.stride);
  if (cfg.glyph_min < 2 || cfg.glyph_max < cfg.glyph_min)
    throw std::invalid_argument("gen_relational: need at least 2 glyphs");
  if (cfg.glyph_max > grid)
    throw std::invalid_argument("gen_relational: cannot place " + std::to_string(cfg.glyph_max) +
                                " glyphs in " + std::to_string(grid) + " distinct columns");
  const int total = cfg.train_size + cfg.val_size + cfg.test_size;

  Dataset ds;
  ds.images = Tensor({total, cfg.image, cfg.image, 1});
  ds.labels = Tensor({total});
  ds.placements.resize(static_cast<size_t>(total));
  const int64_t stride_img = static_cast<int64_t>(cfg.image) * cfg.image;

  for (int i = 0; i < total; ++i) {
    RngStream stream(cfg.seed, static_cast<uint64_t>(i));
    Uniform64 u = uniform_stream(stream);

    Tensor image({cfg.image, cfg.image});
    for (int y = 0; y < cfg.image; ++y)
      for (int x = 0; x < cfg.image; ++x)
        image[static_cast<int64_t>(y) * cfg.image + x] =
            cfg.ramp * static_cast<float>(x) / static_cast<float>(cfg.image - 1);

    const int m = cfg.glyph_min + detail::uniform_below(u, cfg.glyph_max - cfg.glyph_min + 1);
    std::vector<int> cols(static_cast<size_t>(grid));
    for (int c = 0; c < grid; ++c) cols[static_cast<size_t>(c)] = c;
    for (int c = 0; c < m; ++c) {  // partial Fisher-Yates
      const int j = c + detail::uniform_below(u, grid - c);
      std::swap(cols[static_cast<size_t>(c)], cols[static_cast<size_t>(j)]);
    }

    int left_col = grid, right_col = -1, left_val = 0, right_val = 0;
    for (int gidx = 0; gidx < m; ++gidx) {
      const int col = cols[static_cast<size_t>(gidx)];
      const int row = detail::uniform_below(u, grid);
      const int value = 1 + detail::uniform_below(u, 9);
      const int cell = row * grid + col;
      detail::draw_glyph(image, cfg.image, cell, grid, cfg.stride, glyph_template(digit_glyph_id(value)));
      ds.placements[static_cast<size_t>(i)].push_back({cell, digit_glyph_id(value), value});
      if (col < left_col) {
        left_col = col;
        left_val = value;
      }
      if (col > right_col) {
        right_col = col;
        right_val = value;
      }
    }

    for (int64_t p = 0; p < stride_img; ++p) ds.images[i * stride_img + p] = image[p];
    ds.labels[i] = static_cast<float>(std::max(left_val, right_val));
  }

  ds.info = {
      {"task", "relational"},
      {"seed", std::to_string(cfg.seed)},
      {"image_h", std::to_string(cfg.image)},
      {"image_w", std::to_string(cfg.image)},
      {"channels", "1"},
      {"patch", std::to_string(cfg.patch)},
      {"stride", std::to_string(cfg.stride)},
      {"glyph_min", std::to_string(cfg.glyph_min)},
      {"glyph_max", std::to_string(cfg.glyph_max)},
      {"ramp", std::to_string(cfg.ramp)},
      {"train_size", std::to_string(cfg.train_size)},
      {"val_size", std::to_string(cfg.val_size)},
      {"test_size", std::to_string(cfg.test_size)},
      {"num_classes", "9"},
      {"label_min", "1"},
      {"glyphs", "digit1;digit2;digit3;digit4;digit5;digit6;digit7;digit8;digit9"},
  };
  return ds;
}

inline void write_dataset(const Dataset& ds, const std::string& dir) {
  std::filesystem::create_directories(dir);
  write_ptkt(dir + "/images.ptkt", ds.images);
  write_ptkt(dir + "/labels.ptkt", ds.labels);
  write_kv(dir + "/meta.txt", ds.info);
}

inline Dataset read_dataset(const std::string& dir) {
  Dataset ds;
  ds.images = read_ptkt(dir + "/images.ptkt");
  ds.labels = read_ptkt(dir + "/labels.ptkt");
  ds.info = read_kv(dir + "/meta.txt");
  if (ds.images.dim(0) != ds.labels.dim(0))
    throw std::runtime_error(dir + ": image/label count mismatch");
  return ds;
}

inline std::string dataset_info(const Dataset& ds, const std::string& key) {
  for (const auto& [k, v] : ds.info)
    if (k == key) return v;
  throw std::runtime_error("dataset metadata missing key: " + key);
}

struct SplitView {
  Tensor images;
  std::vector<int> labels;  // 0-based class ids
};

/// Copies out one of the train/val/test slices, mapping labels to 0-based.
inline SplitView dataset_split(const Dataset& ds, const std::string& split) {
  const int train = std::stoi(dataset_info(ds, "train_size"));
  const int val = std::stoi(dataset_info(ds, "val_size"));
  const int test = std::stoi(dataset_info(ds, "test_size"));
  const int label_min = std::stoi(dataset_info(ds, "label_min"));
  int offset = 0, count = 0;
  if (split == "train") {
    offset = 0;
    count = train;
  } else if (split == "val") {
    offset = train;
    count = val;
  } else if (split == "test") {
    offset = train + val;
    count = test;
  } else {
    throw std::invalid_argument("unknown split: " + split);
  }
  const int64_t stride = ds.images.size() / ds.images.dim(0);
  Shape s = ds.images.shape();
  s[0] = count;
  SplitView out;
  out.images = Tensor(s);
  out.labels.resize(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    for (int64_t j = 0; j < stride; ++j)
      out.images[i * stride + j] = ds.images[(offset + i) * stride + j];
    out.labels[static_cast<size_t>(i)] = static_cast<int>(ds.labels[offset + i]) - label_min;
  }
  return out;
}

}  // namespace ptopk
