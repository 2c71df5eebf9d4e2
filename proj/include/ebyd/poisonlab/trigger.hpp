#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "ebyd/nncore/arch.hpp"
#include "ebyd/nncore/dense_array.hpp"

namespace ebyd {

enum class TriggerKind { one_pixel, patch, blend, sinusoid };
enum class Corner { top_left, top_right, bottom_left, bottom_right };

std::string_view to_string(TriggerKind kind);
TriggerKind parse_trigger_kind(std::string_view text);
std::string_view to_string(Corner corner);
Corner parse_corner(std::string_view text);

struct TriggerParams {
  // patch: side length and corner; the pattern is a checkerboard.
  std::size_t patch_size = 3;
  Corner corner = Corner::bottom_right;
  // one_pixel: coordinate, defaults to the bottom-right pixel.
  std::optional<std::size_t> pixel_row;
  std::optional<std::size_t> pixel_col;
  float blend_alpha = 0.15f;
  float sinusoid_alpha = 0.1f;
  float sinusoid_frequency = 6.0f;
};

// x_b = x*(1-m) + pattern*m, with m and pattern both [C,H,W] in [0,1].
struct Trigger {
  TriggerKind kind = TriggerKind::patch;
  DenseArray mask;
  DenseArray pattern;

  ImageShape shape() const { return {mask.dim(0), mask.dim(1), mask.dim(2)}; }
  void validate() const;
};

Trigger make_trigger(TriggerKind kind, const TriggerParams& params, ImageShape shape, std::uint64_t seed);

// Writes the triggered image into `out` (may alias `x`), clipped to [0,1].
void apply_trigger(std::span<const float> x, const Trigger& t, std::span<float> out);
DenseArray apply_trigger(const DenseArray& image, const Trigger& t);

}  // namespace ebyd
