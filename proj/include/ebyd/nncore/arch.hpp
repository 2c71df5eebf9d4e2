#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ebyd/nncore/dense_array.hpp"

namespace ebyd {

struct ImageShape {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t size() const { return channels * height * width; }
  Dims dims() const { return {channels, height, width}; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

// Wire values are part of the checkpoint format.
enum class LayerKind : std::uint8_t {
  conv = 1,     // 3x3, stride 1, zero padding 1
  relu = 2,
  maxpool = 3,  // 2x2, stride 2
  flatten = 4,
  fc = 5,
};

const char* to_string(LayerKind kind);

struct Layer {
  LayerKind kind;
  std::size_t units = 0;  // out-channels (conv) or out-units (fc)

  friend bool operator==(const Layer&, const Layer&) = default;
};

struct ArchSpec {
  ImageShape input;
  std::vector<Layer> layers;
  std::size_t num_classes = 0;

  // flatten -> fc(hidden) -> relu -> fc(K)
  static ArchSpec mlp(ImageShape input, std::size_t hidden, std::size_t num_classes);
  // conv8 -> relu -> pool -> conv16 -> relu -> pool -> flatten -> fc(K)
  static ArchSpec tiny_cnn(ImageShape input, std::size_t num_classes);

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

struct ParamSpec {
  std::string name;
  Dims dims;
};

// Contiguous block of hidden units owned by one conv or fc layer.
struct UnitBlock {
  std::size_t layer = 0;   // index of the conv/fc layer
  std::size_t offset = 0;  // first index in the global unit vector
  std::size_t count = 0;
};

struct LayerPlan {
  Layer layer;
  Dims in_dims;   // per-sample, rank 1 or 3
  Dims out_dims;  // per-sample
  std::string prefix;  // parameter-name prefix for conv/fc, e.g. "conv0"
  bool hidden = false;  // conv/fc with per-unit scale and mask entries
  std::optional<UnitBlock> mask_after;  // apply unit mask to this layer's output
};

// Statically resolved layer shapes, parameter names and hidden-unit layout.
// Construction validates that the architecture composes.
class Topology {
 public:
  explicit Topology(const ArchSpec& arch);

  const std::vector<LayerPlan>& plan() const { return plan_; }
  const std::vector<ParamSpec>& params() const { return params_; }
  const std::vector<UnitBlock>& unit_blocks() const { return blocks_; }
  std::size_t hidden_units() const { return hidden_units_; }
  // Names of the per-unit scale parameters, in unit order.
  std::vector<std::string> scale_params() const;

 private:
  std::vector<LayerPlan> plan_;
  std::vector<ParamSpec> params_;
  std::vector<UnitBlock> blocks_;
  std::size_t hidden_units_ = 0;
};

}  // namespace ebyd
