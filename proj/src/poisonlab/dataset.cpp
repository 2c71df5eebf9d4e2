#include "ebyd/poisonlab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ebyd/errors.hpp"
#include "ebyd/nncore/binary_io.hpp"
#include "ebyd/nncore/rng.hpp"

namespace ebyd {
namespace {

constexpr std::string_view kRawMagic = "EBYDDATA";
constexpr float kPixelNoise = 0.15f;

struct ClassTemplate {
  float center_y, center_x;
  float radius;
  std::vector<float> cast;       // per-channel background offset
  std::vector<float> amplitude;  // per-channel blob strength
};

std::vector<ClassTemplate> make_templates(std::size_t num_classes, ImageShape shape, std::uint64_t seed) {
  // Blob centres come from a 3x3 grid of anchor points, without repetition
  // while anchors last.
  std::vector<std::pair<float, float>> anchors;
  for (float fy : {0.25f, 0.5f, 0.75f}) {
    for (float fx : {0.25f, 0.5f, 0.75f}) {
      anchors.emplace_back(fy * static_cast<float>(shape.height - 1), fx * static_cast<float>(shape.width - 1));
    }
  }
  CounterRng order(seed, "template/anchors");
  order.shuffle(std::span(anchors));

  std::vector<ClassTemplate> out;
  for (std::size_t c = 0; c < num_classes; ++c) {
    CounterRng rng(seed, "template/" + std::to_string(c));
    ClassTemplate t;
    std::tie(t.center_y, t.center_x) = anchors[c % anchors.size()];
    t.radius = rng.uniform(1.5f, 2.5f) * static_cast<float>(std::min(shape.height, shape.width)) / 16.0f;
    for (std::size_t ch = 0; ch < shape.channels; ++ch) {
      t.cast.push_back(rng.uniform(-0.05f, 0.05f));
      const float sign = rng.uniform() < 0.5f ? -1.0f : 1.0f;
      t.amplitude.push_back(sign * rng.uniform(0.25f, 0.45f));
    }
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace

void ImageDataset::validate() const {
  if (images.rank() != 4) throw ShapeError("dataset images must be [N,C,H,W], got " + format_dims(images.dims()));
  if (images.dim(0) != labels.size()) {
    throw ShapeError("dataset has " + std::to_string(images.dim(0)) + " images but " +
                     std::to_string(labels.size()) + " labels");
  }
  if (num_classes < 2) throw ArgumentError("dataset needs at least 2 classes");
  for (float v : images.values()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ArgumentError("dataset pixel outside [0,1]");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw ArgumentError("dataset label " + std::to_string(y) + " outside [0," + std::to_string(num_classes) + ")");
    }
  }
}

ImageDataset subset(const ImageDataset& data, std::span<const std::size_t> indices) {
  return ImageDataset{gather_images(data, indices), gather_labels(data, indices), data.name, data.num_classes};
}

DenseArray gather_images(const ImageDataset& data, std::span<const std::size_t> indices) {
  const ImageShape s = data.image_shape();
  DenseArray out({indices.size(), s.channels, s.height, s.width});
  const std::size_t n = s.size();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto src = data.image(indices[k]);
    std::copy(src.begin(), src.end(), out.data() + k * n);
  }
  return out;
}

std::vector<int> gather_labels(const ImageDataset& data, std::span<const std::size_t> indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(data.labels.at(i));
  return out;
}

std::vector<std::size_t> class_histogram(const ImageDataset& data) {
  std::vector<std::size_t> hist(data.num_classes, 0);
  for (int y : data.labels) ++hist.at(static_cast<std::size_t>(y));
  return hist;
}

ImageDataset make_synthetic_dataset(std::size_t num_classes, std::size_t n_per_class, ImageShape shape,
                                    std::uint64_t seed) {
  if (num_classes < 2) throw ArgumentError("synthetic dataset needs K >= 2");
  if (n_per_class == 0) throw ArgumentError("synthetic dataset needs at least one sample per class");
  if (shape.channels == 0 || shape.height < 8 || shape.width < 8) {
    throw ShapeError("synthetic images must be at least 8x8 with one channel, got " + format_dims(shape.dims()));
  }
  const auto templates = make_templates(num_classes, shape, seed);
  const std::size_t n = num_classes * n_per_class;
  ImageDataset data{DenseArray({n, shape.channels, shape.height, shape.width}), std::vector<int>(n),
                    "synthetic", num_classes};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % num_classes;
    const ClassTemplate& t = templates[c];
    CounterRng rng(seed, "sample/" + std::to_string(i));
    const float cy = t.center_y + static_cast<float>(static_cast<int>(rng.below(3)) - 1);
    const float cx = t.center_x + static_cast<float>(static_cast<int>(rng.below(3)) - 1);
    const float gain = rng.uniform(0.8f, 1.2f);
    auto img = data.image(i);
    for (std::size_t ch = 0; ch < shape.channels; ++ch) {
      for (std::size_t y = 0; y < shape.height; ++y) {
        for (std::size_t x = 0; x < shape.width; ++x) {
          const float dy = static_cast<float>(y) - cy, dx = static_cast<float>(x) - cx;
          const float blob = std::exp(-(dy * dy + dx * dx) / (2.0f * t.radius * t.radius));
          const float v = 0.5f + t.cast[ch] + gain * t.amplitude[ch] * blob + kPixelNoise * rng.normal();
          img[(ch * shape.height + y) * shape.width + x] = std::clamp(v, 0.0f, 1.0f);
        }
      }
    }
    data.labels[i] = static_cast<int>(c);
  }
  return data;
}

DatasetSplit stratified_split(const ImageDataset& data, std::size_t count, std::uint64_t seed) {
  const std::size_t n = data.size();
  if (count == 0 || count >= n) {
    throw ArgumentError("stratified split of " + std::to_string(count) + " from " + std::to_string(n) + " samples");
  }
  const auto hist = class_histogram(data);
  // Largest-remainder apportionment of `count` over the classes.
  std::vector<std::size_t> quota(hist.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < hist.size(); ++c) {
    const double exact = static_cast<double>(count) * static_cast<double>(hist[c]) / static_cast<double>(n);
    quota[c] = static_cast<std::size_t>(exact);
    assigned += quota[c];
    remainders.emplace_back(-(exact - static_cast<double>(quota[c])), c);
  }
  std::sort(remainders.begin(), remainders.end());
  for (std::size_t k = 0; assigned < count; ++k) {
    const std::size_t c = remainders[k % remainders.size()].second;
    if (quota[c] < hist[c]) {
      ++quota[c];
      ++assigned;
    }
  }

  std::vector<std::vector<std::size_t>> by_class(hist.size());
  for (std::size_t i = 0; i < n; ++i) by_class[static_cast<std::size_t>(data.labels[i])].push_back(i);
  std::vector<bool> taken(n, false);
  for (std::size_t c = 0; c < hist.size(); ++c) {
    CounterRng rng(seed, "stratified/" + std::to_string(c));
    rng.shuffle(std::span(by_class[c]));
    for (std::size_t k = 0; k < quota[c]; ++k) taken[by_class[c][k]] = true;
  }
  DatasetSplit split;
  for (std::size_t i = 0; i < n; ++i) (taken[i] ? split.taken_indices : split.kept_indices).push_back(i);
  split.kept = subset(data, split.kept_indices);
  split.taken = subset(data, split.taken_indices);
  return split;
}

std::vector<std::uint8_t> encode_raw_dataset(const ImageDataset& data) {
  data.validate();
  if (data.num_classes > 256) throw ArgumentError("raw dataset format holds at most 256 classes");
  const ImageShape s = data.image_shape();
  ByteWriter out;
  out.raw(kRawMagic);
  out.u32(kRawDatasetVersion);
  for (auto v : {data.size(), s.channels, s.height, s.width, data.num_classes}) out.u32(static_cast<std::uint32_t>(v));
  for (float v : data.images.values()) out.u8(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
  for (int y : data.labels) out.u8(static_cast<std::uint8_t>(y));
  return out.take();
}

ImageDataset decode_raw_dataset(std::span<const std::uint8_t> bytes, std::string name) {
  ByteReader in(bytes);
  in.set_context("magic");
  const auto magic = in.raw(kRawMagic.size());
  if (std::string_view(reinterpret_cast<const char*>(magic.data()), magic.size()) != kRawMagic) {
    throw FormatError("bad raw dataset magic at byte offset 0 (expected \"EBYDDATA\")");
  }
  in.set_context("version");
  const std::uint32_t version = in.u32();
  if (version != kRawDatasetVersion) {
    throw FormatError("unsupported raw dataset version " + std::to_string(version) + " at byte offset 8");
  }
  in.set_context("header");
  const std::size_t n = in.u32(), c = in.u32(), h = in.u32(), w = in.u32(), k = in.u32();
  if (n == 0 || c == 0 || h == 0 || w == 0) throw FormatError("raw dataset header has a zero dimension");
  in.set_context("pixels");
  const auto pixels = in.raw(n * c * h * w);
  in.set_context("labels");
  const auto labels = in.raw(n);
  if (in.remaining() != 0) throw FormatError("trailing bytes at byte offset " + std::to_string(in.offset()));
  ImageDataset data{DenseArray({n, c, h, w}), std::vector<int>(labels.begin(), labels.end()), std::move(name), k};
  for (std::size_t i = 0; i < pixels.size(); ++i) data.images[i] = static_cast<float>(pixels[i]) / 255.0f;
  try {
    data.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("raw dataset content invalid: ") + e.what());
  }
  return data;
}

void save_raw_dataset(const ImageDataset& data, const std::filesystem::path& path) {
  write_file_bytes(path, encode_raw_dataset(data));
}

ImageDataset load_raw_dataset(const std::filesystem::path& path) {
  return decode_raw_dataset(read_file_bytes(path), path.stem().string());
}

}  // namespace ebyd
