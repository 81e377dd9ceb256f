#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "corrobust/tensor.hpp"

namespace corrobust {

struct Dataset {
  std::vector<TensorF> images;  // each C,H,W with values in [0,1]
  std::vector<int64_t> labels;
  int64_t num_classes = 0;
  std::string name;

  int64_t size() const { return static_cast<int64_t>(images.size()); }

  void validate() const {
    if (images.size() != labels.size()) throw DataError("dataset: image/label count mismatch");
    for (int64_t l : labels) {
      if (l < 0 || l >= num_classes) throw DataError("dataset: label out of range");
    }
  }

  const Shape& image_shape() const {
    if (images.empty()) throw DataError("dataset: empty");
    return images.front().shape();
  }
};

// Stacks the given rows into an (N,C,H,W) batch tensor.
inline TensorF make_batch(const Dataset& ds, const std::vector<int64_t>& idx) {
  if (idx.empty()) throw DataError("make_batch: empty index list");
  const Shape& s = ds.image_shape();
  TensorF batch({static_cast<int64_t>(idx.size()), s[0], s[1], s[2]});
  const int64_t rowsize = shape_numel(s);
  for (size_t r = 0; r < idx.size(); ++r) {
    const TensorF& img = ds.images[static_cast<size_t>(idx[r])];
    std::copy(img.data(), img.data() + rowsize, batch.data() + static_cast<int64_t>(r) * rowsize);
  }
  return batch;
}

inline TensorF batch_labels(const Dataset& ds, const std::vector<int64_t>& idx) {
  TensorF y({static_cast<int64_t>(idx.size())});
  for (size_t r = 0; r < idx.size(); ++r) {
    y[static_cast<int64_t>(r)] = static_cast<float>(ds.labels[static_cast<size_t>(idx[r])]);
  }
  return y;
}

// Generic fixed-size record reader: each record is one label byte followed by
// C*H*W pixel bytes (channel-planar, row-major), scaled into [0,1].
inline Dataset load_records(const std::string& path, int64_t c, int64_t h, int64_t w,
                            int64_t num_classes) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  in.seekg(0, std::ios::end);
  const int64_t file_size = static_cast<int64_t>(in.tellg());
  in.seekg(0);
  const int64_t record = 1 + c * h * w;
  if (file_size % record != 0) {
    throw DataError("'" + path + "': truncated record at byte offset " +
                    std::to_string((file_size / record) * record) + " (file size " +
                    std::to_string(file_size) + ", record size " + std::to_string(record) + ")");
  }
  Dataset ds;
  ds.num_classes = num_classes;
  ds.name = path;
  const int64_t n = file_size / record;
  std::vector<unsigned char> buf(static_cast<size_t>(record));
  for (int64_t i = 0; i < n; ++i) {
    in.read(reinterpret_cast<char*>(buf.data()), record);
    if (!in) throw DataError("'" + path + "': read failure at record " + std::to_string(i));
    const int64_t label = buf[0];
    if (label >= num_classes) {
      throw DataError("'" + path + "': label byte " + std::to_string(label) +
                      " out of range at record " + std::to_string(i));
    }
    TensorF img({c, h, w});
    for (int64_t j = 0; j < c * h * w; ++j) {
      img[j] = static_cast<float>(buf[static_cast<size_t>(j + 1)]) / 255.0f;
    }
    ds.images.push_back(std::move(img));
    ds.labels.push_back(label);
  }
  return ds;
}

// CIFAR-10 binary layout: 3073-byte records, 1 label byte + 3072 pixel bytes
// (R,G,B planes, row-major 32x32).
inline Dataset load_cifar10_binary(const std::string& path) {
  return load_records(path, 3, 32, 32, 10);
}

// Writes the same record layout back out. Pixels are quantized to bytes, so
// this is exact for byte-sourced data.
inline void save_records(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  for (int64_t i = 0; i < ds.size(); ++i) {
    const unsigned char label = static_cast<unsigned char>(ds.labels[static_cast<size_t>(i)]);
    out.put(static_cast<char>(label));
    const TensorF& img = ds.images[static_cast<size_t>(i)];
    for (int64_t j = 0; j < img.numel(); ++j) {
      const float v = std::clamp(img[j], 0.0f, 1.0f);
      out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
    }
  }
  if (!out) throw DataError("write failure on '" + path + "'");
}

struct SyntheticSpec {
  int64_t num_classes = 4;
  int64_t height = 16;
  int64_t width = 16;
  int64_t samples_per_class = 500;
  uint64_t seed = 0;
};

namespace detail {

constexpr int kSyntheticClassCount = 6;

// Procedural class renderers: filled disk, square outline, diagonal stripes,
// checkerboard, cross, horizontal stripes. Geometry, colors, and a small
// pixel jitter vary per sample.
inline TensorF render_synthetic(int64_t cls, int64_t h, int64_t w, Rng& rng) {
  TensorF img({3, h, w});
  float bg[3], fg[3];
  for (int c = 0; c < 3; ++c) {
    bg[c] = static_cast<float>(rng.uniform(0.15, 0.45));
    fg[c] = static_cast<float>(rng.uniform(0.6, 0.9));
  }
  const double cy = h / 2.0 + rng.uniform(-0.15, 0.15) * h;
  const double cx = w / 2.0 + rng.uniform(-0.15, 0.15) * w;
  const double extent = rng.uniform(0.28, 0.42) * std::min(h, w);
  const int64_t period = std::max<int64_t>(2, static_cast<int64_t>(std::min(h, w) / rng.uniform(4.0, 6.0)));
  const int64_t phase = rng.uniform_int(period * 2);
  const int64_t cell = std::max<int64_t>(2, static_cast<int64_t>(std::min(h, w) / rng.uniform(5.0, 8.0)));
  const double thickness = std::max(1.0, extent / 3.5);

  auto is_fg = [&](int64_t i, int64_t j) -> bool {
    const double dy = i + 0.5 - cy, dx = j + 0.5 - cx;
    switch (cls) {
      case 0:  // filled disk
        return dy * dy + dx * dx <= extent * extent;
      case 1: {  // square outline
        const double ay = std::abs(dy), ax = std::abs(dx);
        const double outer = extent, inner = std::max(0.0, extent - thickness);
        return std::max(ay, ax) <= outer && std::max(ay, ax) > inner;
      }
      case 2:  // diagonal stripes
        return ((i + j + phase) / period) % 2 == 0;
      case 3:  // checkerboard
        return ((i / cell) + (j / cell) + phase) % 2 == 0;
      case 4: {  // cross
        const double ay = std::abs(dy), ax = std::abs(dx);
        return (ay <= thickness / 2 || ax <= thickness / 2) && std::max(ay, ax) <= extent;
      }
      default:  // horizontal stripes
        return ((i + phase) / period) % 2 == 0;
    }
  };

  for (int64_t c = 0; c < 3; ++c) {
    for (int64_t i = 0; i < h; ++i) {
      for (int64_t j = 0; j < w; ++j) {
        float v = is_fg(i, j) ? fg[c] : bg[c];
        v += static_cast<float>(rng.uniform(-0.03, 0.03));
        img[(c * h + i) * w + j] = std::clamp(v, 0.0f, 1.0f);
      }
    }
  }
  return img;
}

}  // namespace detail

// Deterministic procedural classification dataset; the desk-scale stand-in
// for CIFAR-10. Classes are interleaved so prefixes stay balanced.
inline Dataset gen_synthetic(const SyntheticSpec& spec) {
  if (spec.num_classes < 2) throw ConfigError("synthetic: need at least 2 classes");
  if (spec.num_classes > detail::kSyntheticClassCount) {
    throw ConfigError("synthetic: only " + std::to_string(detail::kSyntheticClassCount) +
                      " shape generators available, got K=" + std::to_string(spec.num_classes));
  }
  if (spec.samples_per_class < 1) throw ConfigError("synthetic: samples_per_class must be >= 1");
  Dataset ds;
  ds.num_classes = spec.num_classes;
  ds.name = "synthetic";
  for (int64_t i = 0; i < spec.samples_per_class; ++i) {
    for (int64_t cls = 0; cls < spec.num_classes; ++cls) {
      Rng rng(derive_seed(spec.seed, 0x73796eULL, static_cast<uint64_t>(i),
                          static_cast<uint64_t>(cls)));
      ds.images.push_back(detail::render_synthetic(cls, spec.height, spec.width, rng));
      ds.labels.push_back(cls);
    }
  }
  return ds;
}

}  // namespace corrobust
