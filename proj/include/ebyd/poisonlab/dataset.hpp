#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ebyd/nncore/arch.hpp"
#include "ebyd/nncore/dense_array.hpp"

namespace ebyd {

// Labelled images in [0,1], stored as one [N,C,H,W] array.
struct ImageDataset {
  DenseArray images;
  std::vector<int> labels;
  std::string name;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  ImageShape image_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }
  std::size_t image_size() const { return image_shape().size(); }
  std::span<const float> image(std::size_t i) const { return images.values().subspan(i * image_size(), image_size()); }
  std::span<float> image(std::size_t i) { return images.values().subspan(i * image_size(), image_size()); }

  // Throws when pixels leave [0,1], labels leave [0,K), or counts disagree.
  void validate() const;
};

ImageDataset subset(const ImageDataset& data, std::span<const std::size_t> indices);
// Images of `indices` as a [n,C,H,W] batch.
DenseArray gather_images(const ImageDataset& data, std::span<const std::size_t> indices);
std::vector<int> gather_labels(const ImageDataset& data, std::span<const std::size_t> indices);
std::vector<std::size_t> class_histogram(const ImageDataset& data);

// Class c is a seeded template (a gaussian blob at a class-specific place
// over a class-specific colour cast) plus per-sample jitter of the blob and
// gaussian pixel noise (sigma 0.15), clipped to [0,1]. Samples are ordered
// round-robin over classes, so the counts are exactly balanced.
ImageDataset make_synthetic_dataset(std::size_t num_classes, std::size_t n_per_class, ImageShape shape,
                                    std::uint64_t seed);

struct DatasetSplit {
  ImageDataset kept;
  ImageDataset taken;
  std::vector<std::size_t> kept_indices;   // ascending
  std::vector<std::size_t> taken_indices;  // ascending
};

// Seeded class-stratified draw of `count` samples; the rest stay in `kept`.
DatasetSplit stratified_split(const ImageDataset& data, std::size_t count, std::uint64_t seed);

// Raw file: "EBYDDATA" | version u32 | N C H W K u32 | N*C*H*W pixel bytes
// (value = byte / 255) | N label bytes. Integers little-endian.
inline constexpr std::uint32_t kRawDatasetVersion = 1;

std::vector<std::uint8_t> encode_raw_dataset(const ImageDataset& data);
ImageDataset decode_raw_dataset(std::span<const std::uint8_t> bytes, std::string name = "raw");
void save_raw_dataset(const ImageDataset& data, const std::filesystem::path& path);
ImageDataset load_raw_dataset(const std::filesystem::path& path);

}  // namespace ebyd
