#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "dydit/error.hpp"
#include "dydit/io.hpp"
#include "dydit/model.hpp"
#include "dydit/rng.hpp"
#include "dydit/tensor.hpp"

namespace dydit {

inline constexpr std::uint32_t kDatasetVersion = 1;

/// 8-bit images (count x channels x extent x extent) with u16 labels.
struct DatasetContainer {
  int count = 0;
  int channels = 0;
  int extent = 0;
  int classes = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<std::uint16_t> labels;

  std::size_t image_bytes() const { return static_cast<std::size_t>(channels) * extent * extent; }

  void validate() const {
    require(count >= 0 && channels > 0 && extent > 0 && classes > 0, "dataset: invalid header (count ", count,
            ", channels ", channels, ", extent ", extent, ", classes ", classes, ")");
    require(pixels.size() == static_cast<std::size_t>(count) * image_bytes(), "dataset: pixel block has ",
            pixels.size(), " bytes, expected ", static_cast<std::size_t>(count) * image_bytes());
    require(labels.size() == static_cast<std::size_t>(count), "dataset: ", labels.size(), " labels for ", count,
            " images");
    for (std::size_t i = 0; i < labels.size(); ++i)
      require(labels[i] < classes, "dataset: label ", labels[i], " of image ", i, " outside [0, ", classes, ")");
  }

  void check_compatible(const ModelConfig& cfg) const {
    require(channels == cfg.channels_in, "dataset channels ", channels, " != model.channels_in ", cfg.channels_in);
    require(extent == cfg.extent, "dataset extent ", extent, " != model.extent ", cfg.extent);
    require(classes == cfg.classes, "dataset classes ", classes, " != model.classes ", cfg.classes);
  }

  /// Selected images as floats in [-1, 1], shape B x channels x extent x extent.
  template <typename T = float>
  BasicTensor<T> images(const std::vector<int>& indices) const {
    const auto per = image_bytes();
    std::vector<T> out(indices.size() * per);
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const auto idx = indices[i];
      require(idx >= 0 && idx < count, "dataset: index ", idx, " out of range [0, ", count, ")");
      const auto* src = pixels.data() + static_cast<std::size_t>(idx) * per;
      for (std::size_t j = 0; j < per; ++j) out[i * per + j] = static_cast<T>(src[j] / 127.5 - 1.0);
    }
    return BasicTensor<T>(Shape{static_cast<std::int64_t>(indices.size()), channels, extent, extent}, std::move(out));
  }

  std::vector<int> labels_of(const std::vector<int>& indices) const {
    std::vector<int> out;
    for (int i : indices) out.push_back(labels[static_cast<std::size_t>(i)]);
    return out;
  }
};

inline void write_dataset(std::ostream& os, const DatasetContainer& ds) {
  ds.validate();
  os.write("DYDS", 4);
  io::put_u32(os, kDatasetVersion);
  io::put_u32(os, static_cast<std::uint32_t>(ds.count));
  io::put_u32(os, static_cast<std::uint32_t>(ds.channels));
  io::put_u32(os, static_cast<std::uint32_t>(ds.extent));
  io::put_u32(os, static_cast<std::uint32_t>(ds.classes));
  os.write(reinterpret_cast<const char*>(ds.pixels.data()), static_cast<std::streamsize>(ds.pixels.size()));
  for (auto l : ds.labels) io::put_u16(os, l);
}

inline void save_dataset(const DatasetContainer& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), "cannot write dataset '", path, "'");
  write_dataset(out, ds);
  require(static_cast<bool>(out), "failed writing dataset '", path, "'");
}

inline DatasetContainer read_dataset(std::istream& is, const std::string& what = "dataset") {
  io::Reader r(is, what);
  r.magic("DYDS");
  const auto vat = r.offset();
  const auto version = r.u32();
  if (version != kDatasetVersion) r.error("unsupported version " + std::to_string(version), vat);
  DatasetContainer ds;
  const auto hat = r.offset();
  const auto count = r.u32(), channels = r.u32(), extent = r.u32(), classes = r.u32();
  if (count > (1u << 24) || channels == 0 || channels > 64 || extent == 0 || extent > 4096 || classes == 0 ||
      classes > 65535)
    r.error("implausible header", hat);
  ds.count = static_cast<int>(count);
  ds.channels = static_cast<int>(channels);
  ds.extent = static_cast<int>(extent);
  ds.classes = static_cast<int>(classes);
  ds.pixels.resize(static_cast<std::size_t>(count) * ds.image_bytes());
  r.bytes(ds.pixels.data(), ds.pixels.size());
  ds.labels.resize(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto at = r.offset();
    ds.labels[i] = r.u16();
    if (ds.labels[i] >= classes)
      r.error("label " + std::to_string(ds.labels[i]) + " outside [0, " + std::to_string(classes) + ")", at);
  }
  return ds;
}

inline DatasetContainer load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "cannot open dataset '", path, "'");
  return read_dataset(in, "dataset '" + path + "'");
}

/// Deterministic epoch-wise reshuffling: sample position p of the stream maps
/// to perm(epoch = p / count)[p % count], perm seeded from (seed, epoch).
class BatchSampler {
 public:
  BatchSampler(int count, std::uint64_t seed) : count_(count), seed_(seed) {
    require(count > 0, "BatchSampler: empty dataset");
  }

  std::vector<int> batch(std::int64_t step, int batch_size) {
    std::vector<int> out;
    for (int j = 0; j < batch_size; ++j) {
      const std::int64_t pos = step * batch_size + j;
      const std::int64_t epoch = pos / count_;
      if (epoch != epoch_) {
        perm_.resize(static_cast<std::size_t>(count_));
        std::iota(perm_.begin(), perm_.end(), 0);
        std::mt19937_64 eng(derive_seed(seed_, static_cast<std::uint64_t>(epoch), 0x5eed));
        std::shuffle(perm_.begin(), perm_.end(), eng);
        epoch_ = epoch;
      }
      out.push_back(perm_[static_cast<std::size_t>(pos % count_)]);
    }
    return out;
  }

 private:
  int count_;
  std::uint64_t seed_;
  std::int64_t epoch_ = -1;
  std::vector<int> perm_;
};

/// Synthetic images plus per-pixel object masks (1 = object).
struct SyntheticDataset {
  DatasetContainer data;
  std::vector<std::vector<std::uint8_t>> object;  // count x (extent * extent)
};

namespace detail {

inline bool shape_covers(int shape, double dx, double dy, double r) {
  switch (shape) {
    case 0:  // square
      return std::abs(dx) <= r && std::abs(dy) <= r;
    case 1:  // disk
      return dx * dx + dy * dy <= r * r;
    case 2:  // upward triangle
      return dy <= r && dy >= -r && std::abs(dx) <= (dy + r) * 0.5;
    default:  // plus sign
      return (std::abs(dx) <= r * 0.4 && std::abs(dy) <= r) || (std::abs(dy) <= r * 0.4 && std::abs(dx) <= r);
  }
}

}  // namespace detail

/// K classes of colored geometric shapes on uniform dark backgrounds. Class k
/// fixes the shape (k mod 4) and the hue; position, size, brightness and
/// background vary per image.
inline SyntheticDataset make_synthetic(int count, int classes, int extent, int channels, std::uint64_t seed) {
  require(count > 0 && classes > 0 && extent >= 8, "make_synthetic: need count > 0, classes > 0, extent >= 8");
  require(channels == 1 || channels == 3, "make_synthetic: channels must be 1 or 3");
  static constexpr int kPalette[8][3] = {{230, 60, 50},  {60, 200, 70},  {70, 110, 240}, {235, 210, 60},
                                         {220, 90, 220}, {60, 215, 215}, {245, 150, 50}, {240, 240, 240}};
  SyntheticDataset out;
  auto& ds = out.data;
  ds.count = count;
  ds.channels = channels;
  ds.extent = extent;
  ds.classes = classes;
  ds.pixels.resize(static_cast<std::size_t>(count) * ds.image_bytes());
  ds.labels.resize(static_cast<std::size_t>(count));
  out.object.assign(static_cast<std::size_t>(count), std::vector<std::uint8_t>(static_cast<std::size_t>(extent * extent)));
  const std::size_t plane = static_cast<std::size_t>(extent * extent);

  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i), 0xda7a));
    const int label = static_cast<int>(rng.integer(0, classes - 1));
    ds.labels[static_cast<std::size_t>(i)] = static_cast<std::uint16_t>(label);
    const int shape = label % 4;
    const auto& col = kPalette[label % 8];
    const double radius = extent * (0.18 + 0.12 * rng.uniform());
    const double cx = radius + rng.uniform() * (extent - 1 - 2 * radius);
    const double cy = radius + rng.uniform() * (extent - 1 - 2 * radius);
    const double bright = 0.8 + 0.2 * rng.uniform();
    int bg[3];
    for (auto& c : bg) c = 20 + static_cast<int>(rng.integer(0, 60));

    auto* img = ds.pixels.data() + static_cast<std::size_t>(i) * ds.image_bytes();
    auto& obj = out.object[static_cast<std::size_t>(i)];
    for (int y = 0; y < extent; ++y)
      for (int x = 0; x < extent; ++x) {
        const std::size_t p = static_cast<std::size_t>(y * extent + x);
        const bool in = detail::shape_covers(shape, x - cx, y - cy, radius);
        obj[p] = in ? 1 : 0;
        for (int c = 0; c < channels; ++c) {
          const int fg = channels == 1 ? (col[0] + col[1] + col[2]) / 3 : col[c];
          const int v = in ? static_cast<int>(fg * bright) : bg[c];
          img[static_cast<std::size_t>(c) * plane + p] = static_cast<std::uint8_t>(std::clamp(v, 0, 255));
        }
      }
  }
  return out;
}

/// Per-token object indicator: a patch counts as object when at least a
/// quarter of its pixels belong to the object.
inline std::vector<std::uint8_t> patch_object_mask(const std::vector<std::uint8_t>& object, const ModelConfig& cfg) {
  require(object.size() == static_cast<std::size_t>(cfg.extent * cfg.extent), "patch_object_mask: mask has ",
          object.size(), " pixels, expected ", cfg.extent * cfg.extent);
  const int g = cfg.grid(), p = cfg.patch;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(cfg.tokens()));
  for (int gy = 0; gy < g; ++gy)
    for (int gx = 0; gx < g; ++gx) {
      int n = 0;
      for (int y = 0; y < p; ++y)
        for (int x = 0; x < p; ++x) n += object[static_cast<std::size_t>((gy * p + y) * cfg.extent + gx * p + x)];
      out[static_cast<std::size_t>(gy * g + gx)] = 4 * n >= p * p ? 1 : 0;
    }
  return out;
}

/// Recovers an object mask from pixels: every pixel whose color differs from
/// the image's most frequent color.
inline std::vector<std::uint8_t> infer_object_pixels(const DatasetContainer& ds, int index) {
  const std::size_t plane = static_cast<std::size_t>(ds.extent * ds.extent);
  const auto* img = ds.pixels.data() + static_cast<std::size_t>(index) * ds.image_bytes();
  auto color = [&](std::size_t p) {
    std::uint32_t key = 0;
    for (int c = 0; c < ds.channels; ++c) key = key * 256u + img[static_cast<std::size_t>(c) * plane + p];
    return key;
  };
  std::vector<std::uint32_t> keys(plane);
  for (std::size_t p = 0; p < plane; ++p) keys[p] = color(p);
  auto sorted = keys;
  std::sort(sorted.begin(), sorted.end());
  std::uint32_t mode = sorted[0];
  std::size_t best = 0;
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
    if (j - i > best) {
      best = j - i;
      mode = sorted[i];
    }
    i = j;
  }
  std::vector<std::uint8_t> out(plane);
  for (std::size_t p = 0; p < plane; ++p) out[p] = keys[p] != mode ? 1 : 0;
  return out;
}

}  // namespace dydit
