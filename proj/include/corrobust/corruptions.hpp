#pragma once

#include <array>
#include <string>
#include <vector>

#include "corrobust/dataset.hpp"

namespace corrobust {

// Procedural, asset-free corruption kinds standing in for the usual
// benchmark set. Noise, blur, digital, and weather-proxy categories are all
// represented.
enum class CorruptionKind {
  kGaussianNoise,
  kShotNoise,
  kImpulseNoise,
  kDefocusBlur,
  kMotionBlur,
  kBrightness,
  kContrast,
  kPixelate,
  kElastic,
};

constexpr int kCorruptionKindCount = 9;

inline const std::array<CorruptionKind, kCorruptionKindCount>& all_corruption_kinds() {
  static const std::array<CorruptionKind, kCorruptionKindCount> kinds = {
      CorruptionKind::kGaussianNoise, CorruptionKind::kShotNoise,
      CorruptionKind::kImpulseNoise,  CorruptionKind::kDefocusBlur,
      CorruptionKind::kMotionBlur,    CorruptionKind::kBrightness,
      CorruptionKind::kContrast,      CorruptionKind::kPixelate,
      CorruptionKind::kElastic};
  return kinds;
}

inline const char* corruption_name(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::kGaussianNoise: return "gaussian_noise";
    case CorruptionKind::kShotNoise: return "shot_noise";
    case CorruptionKind::kImpulseNoise: return "impulse_noise";
    case CorruptionKind::kDefocusBlur: return "defocus_blur";
    case CorruptionKind::kMotionBlur: return "motion_blur";
    case CorruptionKind::kBrightness: return "brightness";
    case CorruptionKind::kContrast: return "contrast";
    case CorruptionKind::kPixelate: return "pixelate";
    case CorruptionKind::kElastic: return "elastic";
  }
  return "?";
}

inline CorruptionKind corruption_from_name(const std::string& name) {
  for (CorruptionKind k : all_corruption_kinds()) {
    if (name == corruption_name(k)) return k;
  }
  throw ConfigError("unknown corruption kind '" + name + "'");
}

// Category mapping used for per-type aggregation. Brightness/contrast act as
// the weather proxies in this corruption set.
inline const char* corruption_category(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::kGaussianNoise:
    case CorruptionKind::kShotNoise:
    case CorruptionKind::kImpulseNoise: return "noise";
    case CorruptionKind::kDefocusBlur:
    case CorruptionKind::kMotionBlur: return "blur";
    case CorruptionKind::kBrightness:
    case CorruptionKind::kContrast: return "weather";
    case CorruptionKind::kPixelate:
    case CorruptionKind::kElastic: return "digital";
  }
  return "?";
}

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::kGaussianNoise;
  int severity = 1;  // 1..5
  uint64_t seed = 0;

  void validate() const {
    if (severity < 1 || severity > 5) {
      throw ConfigError("corruption severity must be in 1..5");
    }
  }
};

// Frozen severity ramps, version 1. The dominant parameter is strictly
// increasing in severity for every kind:
//   gaussian_noise  sigma of the additive noise
//   shot_noise      1/photons of the Poisson photon model
//   impulse_noise   salt-and-pepper rate
//   defocus_blur    disk kernel radius (px)
//   motion_blur     line kernel length (px)
//   brightness      additive offset
//   contrast        contrast reduction (factor = 1 - value)
//   pixelate        block size (px)
//   elastic         displacement amplitude (px)
constexpr int kSeverityRampVersion = 1;

namespace detail {

inline const std::array<std::array<double, 5>, kCorruptionKindCount>& severity_ramps() {
  static const std::array<std::array<double, 5>, kCorruptionKindCount> ramps = {{
      {0.04, 0.08, 0.12, 0.18, 0.26},                          // gaussian_noise
      {1.0 / 250, 1.0 / 120, 1.0 / 60, 1.0 / 25, 1.0 / 12},    // shot_noise
      {0.02, 0.04, 0.07, 0.12, 0.18},                          // impulse_noise
      {0.6, 1.0, 1.5, 2.1, 2.8},                               // defocus_blur
      {2.0, 3.0, 4.5, 6.0, 8.0},                               // motion_blur
      {0.08, 0.15, 0.22, 0.30, 0.40},                          // brightness
      {0.25, 0.40, 0.55, 0.70, 0.82},                          // contrast
      {2, 3, 4, 6, 8},                                         // pixelate
      {0.6, 1.2, 1.9, 2.7, 3.6},                               // elastic
  }};
  return ramps;
}

}  // namespace detail

// Dominant ramp parameter for (kind, severity).
inline double severity_param(CorruptionKind kind, int severity) {
  if (severity < 1 || severity > 5) throw ConfigError("severity must be in 1..5");
  return detail::severity_ramps()[static_cast<size_t>(kind)][static_cast<size_t>(severity - 1)];
}

namespace detail {

inline void clip01(TensorF& t) {
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = std::clamp(t[i], 0.0f, 1.0f);
}

// replicate-border pixel fetch
inline float pix(const TensorF& img, int64_t c, int64_t i, int64_t j) {
  const int64_t h = img.dim(1), w = img.dim(2);
  i = std::clamp<int64_t>(i, 0, h - 1);
  j = std::clamp<int64_t>(j, 0, w - 1);
  return img[(c * h + i) * w + j];
}

inline TensorF convolve_kernel(const TensorF& img, const std::vector<float>& kernel,
                               int64_t kh, int64_t kw) {
  const int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  TensorF out(img.shape());
  const int64_t oy = kh / 2, ox = kw / 2;
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t i = 0; i < h; ++i) {
      for (int64_t j = 0; j < w; ++j) {
        float s = 0;
        for (int64_t a = 0; a < kh; ++a) {
          for (int64_t b = 0; b < kw; ++b) {
            s += kernel[static_cast<size_t>(a * kw + b)] * pix(img, ch, i + a - oy, j + b - ox);
          }
        }
        out[(ch * h + i) * w + j] = s;
      }
    }
  }
  return out;
}

// Disk kernel with 4x4 subsample coverage per cell.
inline std::vector<float> disk_kernel(double radius, int64_t& size) {
  const int64_t r = static_cast<int64_t>(std::ceil(radius));
  size = 2 * r + 1;
  std::vector<float> k(static_cast<size_t>(size * size), 0.0f);
  double total = 0;
  for (int64_t a = -r; a <= r; ++a) {
    for (int64_t b = -r; b <= r; ++b) {
      int inside = 0;
      for (int sa = 0; sa < 4; ++sa) {
        for (int sb = 0; sb < 4; ++sb) {
          const double y = a - 0.375 + sa * 0.25;
          const double x = b - 0.375 + sb * 0.25;
          if (y * y + x * x <= radius * radius) ++inside;
        }
      }
      const double v = inside / 16.0;
      k[static_cast<size_t>((a + r) * size + (b + r))] = static_cast<float>(v);
      total += v;
    }
  }
  for (float& v : k) v = static_cast<float>(v / total);
  return k;
}

// Oriented line kernel: bilinear splats along a segment through the center.
inline std::vector<float> line_kernel(double length, double angle, int64_t& size) {
  const int64_t r = static_cast<int64_t>(std::ceil(length / 2));
  size = 2 * r + 1;
  std::vector<float> k(static_cast<size_t>(size * size), 0.0f);
  const double cx = r, cy = r;
  const double dy = std::sin(angle), dx = std::cos(angle);
  const int steps = std::max(2, static_cast<int>(length * 4));
  for (int s = 0; s < steps; ++s) {
    const double t = -length / 2 + length * s / (steps - 1);
    const double y = cy + t * dy, x = cx + t * dx;
    const int64_t i0 = static_cast<int64_t>(std::floor(y));
    const int64_t j0 = static_cast<int64_t>(std::floor(x));
    const double fy = y - i0, fx = x - j0;
    const double w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx;
    const double w10 = fy * (1 - fx), w11 = fy * fx;
    auto put = [&](int64_t i, int64_t j, double wgt) {
      if (i >= 0 && i < size && j >= 0 && j < size) {
        k[static_cast<size_t>(i * size + j)] += static_cast<float>(wgt);
      }
    };
    put(i0, j0, w00);
    put(i0, j0 + 1, w01);
    put(i0 + 1, j0, w10);
    put(i0 + 1, j0 + 1, w11);
  }
  double total = 0;
  for (float v : k) total += v;
  for (float& v : k) v = static_cast<float>(v / total);
  return k;
}

// Gaussian-smoothed unit-variance random field used by the elastic warp.
inline std::vector<double> smooth_field(int64_t h, int64_t w, double sigma, Rng& rng) {
  std::vector<double> raw(static_cast<size_t>(h * w));
  for (double& v : raw) v = rng.normal();
  const int64_t r = static_cast<int64_t>(std::ceil(2 * sigma));
  std::vector<double> g(static_cast<size_t>(2 * r + 1));
  double gsum = 0;
  for (int64_t i = -r; i <= r; ++i) {
    g[static_cast<size_t>(i + r)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    gsum += g[static_cast<size_t>(i + r)];
  }
  for (double& v : g) v /= gsum;
  std::vector<double> tmp(raw.size()), out(raw.size());
  for (int64_t i = 0; i < h; ++i) {
    for (int64_t j = 0; j < w; ++j) {
      double s = 0;
      for (int64_t d = -r; d <= r; ++d) {
        const int64_t jj = std::clamp<int64_t>(j + d, 0, w - 1);
        s += g[static_cast<size_t>(d + r)] * raw[static_cast<size_t>(i * w + jj)];
      }
      tmp[static_cast<size_t>(i * w + j)] = s;
    }
  }
  double mean = 0, var = 0;
  for (int64_t i = 0; i < h; ++i) {
    for (int64_t j = 0; j < w; ++j) {
      double s = 0;
      for (int64_t d = -r; d <= r; ++d) {
        const int64_t ii = std::clamp<int64_t>(i + d, 0, h - 1);
        s += g[static_cast<size_t>(d + r)] * tmp[static_cast<size_t>(ii * w + j)];
      }
      out[static_cast<size_t>(i * w + j)] = s;
      mean += s;
    }
  }
  mean /= static_cast<double>(h * w);
  for (double& v : out) {
    v -= mean;
    var += v * v;
  }
  var /= static_cast<double>(h * w);
  const double inv_std = var > 0 ? 1.0 / std::sqrt(var) : 0.0;
  for (double& v : out) v *= inv_std;
  return out;
}

inline float bilinear(const TensorF& img, int64_t c, double y, double x) {
  const int64_t i0 = static_cast<int64_t>(std::floor(y));
  const int64_t j0 = static_cast<int64_t>(std::floor(x));
  const double fy = y - i0, fx = x - j0;
  return static_cast<float>((1 - fy) * ((1 - fx) * pix(img, c, i0, j0) + fx * pix(img, c, i0, j0 + 1)) +
                            fy * ((1 - fx) * pix(img, c, i0 + 1, j0) + fx * pix(img, c, i0 + 1, j0 + 1)));
}

}  // namespace detail

// Parameterized generator core. `param` is the kind's dominant parameter (a
// zero noise rate / unit block factor degenerates to the identity). Output
// stays in [0,1].
inline TensorF apply_corruption(const TensorF& image, CorruptionKind kind, double param,
                                Rng& rng) {
  if (image.ndim() != 3) throw ShapeError("corrupt: image must be C,H,W");
  const int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  TensorF out = image;

  switch (spec.kind) {
    case CorruptionKind::kGaussianNoise: {
      for (int64_t i = 0; i < out.numel(); ++i) {
        out[i] += static_cast<float>(rng.normal(0.0, param));
      }
      break;
    }
    case CorruptionKind::kShotNoise: {
      const double photons = 1.0 / param;
      for (int64_t i = 0; i < out.numel(); ++i) {
        const double lam = std::max(0.0, static_cast<double>(out[i])) * photons;
        out[i] = static_cast<float>(static_cast<double>(rng.poisson(lam)) / photons);
      }
      break;
    }
    case CorruptionKind::kImpulseNoise: {
      for (int64_t i = 0; i < out.numel(); ++i) {
        if (rng.uniform() < param) out[i] = rng.uniform() < 0.5 ? 0.0f : 1.0f;
      }
      break;
    }
    case CorruptionKind::kDefocusBlur: {
      int64_t size = 0;
      const auto kernel = detail::disk_kernel(param, size);
      out = detail::convolve_kernel(image, kernel, size, size);
      break;
    }
    case CorruptionKind::kMotionBlur: {
      const double angle = rng.uniform(0.0, M_PI);
      int64_t size = 0;
      const auto kernel = detail::line_kernel(param, angle, size);
      out = detail::convolve_kernel(image, kernel, size, size);
      break;
    }
    case CorruptionKind::kBrightness: {
      for (int64_t i = 0; i < out.numel(); ++i) out[i] += static_cast<float>(param);
      break;
    }
    case CorruptionKind::kContrast: {
      const double factor = 1.0 - param;
      double mean = 0;
      for (int64_t i = 0; i < image.numel(); ++i) mean += image[i];
      mean /= static_cast<double>(image.numel());
      for (int64_t i = 0; i < out.numel(); ++i) {
        out[i] = static_cast<float>((image[i] - mean) * factor + mean);
      }
      break;
    }
    case CorruptionKind::kPixelate: {
      const int64_t block = static_cast<int64_t>(param);
      if (block <= 1) break;  // block factor 1 is the identity
      for (int64_t ch = 0; ch < c; ++ch) {
        for (int64_t bi = 0; bi < h; bi += block) {
          for (int64_t bj = 0; bj < w; bj += block) {
            const int64_t ei = std::min(bi + block, h), ej = std::min(bj + block, w);
            double s = 0;
            for (int64_t i = bi; i < ei; ++i)
              for (int64_t j = bj; j < ej; ++j) s += image[(ch * h + i) * w + j];
            const float avg = static_cast<float>(s / ((ei - bi) * (ej - bj)));
            for (int64_t i = bi; i < ei; ++i)
              for (int64_t j = bj; j < ej; ++j) out[(ch * h + i) * w + j] = avg;
          }
        }
      }
      break;
    }
    case CorruptionKind::kElastic: {
      const double smooth_sigma = 2.0;
      const auto dy = detail::smooth_field(h, w, smooth_sigma, rng);
      const auto dx = detail::smooth_field(h, w, smooth_sigma, rng);
      for (int64_t ch = 0; ch < c; ++ch) {
        for (int64_t i = 0; i < h; ++i) {
          for (int64_t j = 0; j < w; ++j) {
            const double sy = i + param * dy[static_cast<size_t>(i * w + j)];
            const double sx = j + param * dx[static_cast<size_t>(i * w + j)];
            out[(ch * h + i) * w + j] = detail::bilinear(image, ch, sy, sx);
          }
        }
      }
      break;
    }
  }
  detail::clip01(out);
  return out;
}

struct CorruptedItem {
  TensorF image;
  int64_t label = 0;
  CorruptionKind kind = CorruptionKind::kGaussianNoise;
  int severity = 1;
  int64_t dataset_index = 0;
};

// Lazily generated corruption stream over a dataset: kind-major, then
// severity, then dataset order. Per-item seeds derive from (seed, index,
// kind, severity), so any item can be regenerated independently.
class CorruptedStream {
 public:
  CorruptedStream(const Dataset& dataset, std::vector<CorruptionKind> kinds,
                  std::vector<int> severities, uint64_t seed)
      : ds_(dataset), kinds_(std::move(kinds)), severities_(std::move(severities)), seed_(seed) {
    for (int s : severities_) {
      if (s < 1 || s > 5) throw ConfigError("corrupt_dataset: severity out of range");
    }
  }

  int64_t size() const {
    return ds_.size() * static_cast<int64_t>(kinds_.size()) *
           static_cast<int64_t>(severities_.size());
  }

  CorruptedItem item(int64_t i) const {
    if (i < 0 || i >= size()) throw DataError("corrupted stream index out of range");
    const int64_t per_sev = ds_.size();
    const int64_t per_kind = per_sev * static_cast<int64_t>(severities_.size());
    const size_t ki = static_cast<size_t>(i / per_kind);
    const size_t si = static_cast<size_t>((i % per_kind) / per_sev);
    const int64_t di = i % per_sev;
    CorruptedItem it;
    it.kind = kinds_[ki];
    it.severity = severities_[si];
    it.dataset_index = di;
    it.label = ds_.labels[static_cast<size_t>(di)];
    CorruptionSpec spec;
    spec.kind = it.kind;
    spec.severity = it.severity;
    spec.seed = derive_seed(seed_, static_cast<uint64_t>(di), static_cast<uint64_t>(it.kind),
                            static_cast<uint64_t>(it.severity));
    it.image = corrupt(ds_.images[static_cast<size_t>(di)], spec);
    return it;
  }

  const Dataset& dataset() const { return ds_; }
  const std::vector<CorruptionKind>& kinds() const { return kinds_; }
  const std::vector<int>& severities() const { return severities_; }
  uint64_t seed() const { return seed_; }

 private:
  const Dataset& ds_;
  std::vector<CorruptionKind> kinds_;
  std::vector<int> severities_;
  uint64_t seed_;
};

inline CorruptedStream corrupt_dataset(const Dataset& dataset,
                                       std::vector<CorruptionKind> kinds,
                                       std::vector<int> severities, uint64_t seed) {
  return CorruptedStream(dataset, std::move(kinds), std::move(severities), seed);
}

}  // namespace corrobust
