// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "kdpl/errors.hpp"
#include "kdpl/rng.hpp"

namespace kdpl {

/// Simple HWC float image.
struct Image {
  int height = 0, width = 0, channels = 0;
  std::vector<float> data;

  Image() = default;
  Image(int h, int w, int c) : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, 0.f) {}

  float& at(int y, int x, int c) {
    return data[(static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x)) * channels + static_cast<std::size_t>(c)];
  }
  float at(int y, int x, int c) const {
    return data[(static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x)) * channels + static_cast<std::size_t>(c)];
  }
};

enum class PreprocessMode { train, eval };

struct PreprocessConfig {
  int size = 224;
  // per-backbone normalization; defaults to the common vision-model triple
  std::array<double, 3> mean = {0.48145466, 0.4578275, 0.40821073};
  std::array<double, 3> std = {0.26862954, 0.26130258, 0.27577711};
};

namespace detail {

// cubic convolution kernel, a = -0.5
inline double cubic_weight(double x) {
  x = std::abs(x);
  if (x <= 1.0) return 1.5 * x * x * x - 2.5 * x * x + 1.0;
  if (x < 2.0) return -0.5 * x * x * x + 2.5 * x * x - 4.0 * x + 2.0;
  return 0.0;
}

inline int clamp_idx(int v, int lo, int hi) { return std::max(lo, std::min(v, hi)); }

}  // namespace detail

inline Image bicubic_resize(const Image& src, int out_h, int out_w) {
  if (src.height < 1 || src.width < 1) throw DataError("cannot resize an empty image");
  Image dst(out_h, out_w, src.channels);
  const double sy = static_cast<double>(src.height) / out_h;
  const double sx = static_cast<double>(src.width) / out_w;
  for (int y = 0; y < out_h; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    int y0 = static_cast<int>(std::floor(fy));
    for (int x = 0; x < out_w; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      int x0 = static_cast<int>(std::floor(fx));
      for (int c = 0; c < src.channels; ++c) {
        double acc = 0.0, wsum = 0.0;
        for (int dy = -1; dy <= 2; ++dy) {
          double wy = detail::cubic_weight(fy - (y0 + dy));
          if (wy == 0.0) continue;
          int yy = detail::clamp_idx(y0 + dy, 0, src.height - 1);
          for (int dx = -1; dx <= 2; ++dx) {
            double wx = detail::cubic_weight(fx - (x0 + dx));
            if (wx == 0.0) continue;
            int xx = detail::clamp_idx(x0 + dx, 0, src.width - 1);
            acc += wy * wx * src.at(yy, xx, c);
            wsum += wy * wx;
          }
        }
        dst.at(y, x, c) = static_cast<float>(acc / wsum);
      }
    }
  }
  return dst;
}

inline Image crop(const Image& src, int top, int left, int h, int w) {
  if (top < 0 || left < 0 || top + h > src.height || left + w > src.width)
    throw DataError("crop window out of bounds");
  Image out(h, w, src.channels);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < src.channels; ++c) out.at(y, x, c) = src.at(top + y, left + x, c);
  return out;
}

inline Image hflip(const Image& src) {
  Image out(src.height, src.width, src.channels);
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x)
      for (int c = 0; c < src.channels; ++c) out.at(y, x, c) = src.at(y, src.width - 1 - x, c);
  return out;
}

inline void normalize_inplace(Image& img, const PreprocessConfig& cfg) {
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) {
        int ci = std::min(c, 2);
        img.at(y, x, c) = static_cast<float>((img.at(y, x, c) - cfg.mean[static_cast<std::size_t>(ci)]) /
                                             cfg.std[static_cast<std::size_t>(ci)]);
      }
}

/// eval: bicubic resize to size x size + normalization (deterministic).
/// train: random resized crop + random horizontal flip + normalization,
/// driven by the supplied RNG. Synthetic feature-vector datasets bypass this.
inline Image preprocess(const Image& input, PreprocessMode mode, const PreprocessConfig& cfg = {},
                        SplitMix64* rng = nullptr) {
  if (input.height < 1 || input.width < 1 || input.data.empty())
    throw DataError("undecodable or empty image");
  if (mode == PreprocessMode::eval) {
    Image out = bicubic_resize(input, cfg.size, cfg.size);
    normalize_inplace(out, cfg);
    return out;
  }
  if (!rng) throw ContractViolation("train-mode preprocessing needs an RNG");
  const double area = static_cast<double>(input.height) * input.width;
  int ch = input.height, cw = input.width, top = 0, left = 0;
  for (int attempt = 0; attempt < 10; ++attempt) {
    double target_area = area * (0.08 + 0.92 * rng->next_unit());
    double log_ratio = std::log(3.0 / 4.0) + rng->next_unit() * (std::log(4.0 / 3.0) - std::log(3.0 / 4.0));
    double aspect = std::exp(log_ratio);
    int w = static_cast<int>(std::round(std::sqrt(target_area * aspect)));
    int h = static_cast<int>(std::round(std::sqrt(target_area / aspect)));
    if (w > 0 && h > 0 && w <= input.width && h <= input.height) {
      cw = w;
      ch = h;
      top = static_cast<int>(rng->next_below(static_cast<std::uint64_t>(input.height - h + 1)));
      left = static_cast<int>(rng->next_below(static_cast<std::uint64_t>(input.width - w + 1)));
      break;
    }
  }
  Image out = crop(input, top, left, ch, cw);
  out = bicubic_resize(out, cfg.size, cfg.size);
  if (rng->next_unit() < 0.5) out = hflip(out);
  normalize_inplace(out, cfg);
  return out;
}

}  // namespace kdpl
