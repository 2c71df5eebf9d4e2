#include "ebyd/poisonlab/trigger.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ebyd/errors.hpp"
#include "ebyd/nncore/rng.hpp"

namespace ebyd {

std::string_view to_string(TriggerKind kind) {
  switch (kind) {
    case TriggerKind::one_pixel: return "one_pixel";
    case TriggerKind::patch: return "patch";
    case TriggerKind::blend: return "blend";
    case TriggerKind::sinusoid: return "sinusoid";
  }
  return "?";
}

TriggerKind parse_trigger_kind(std::string_view text) {
  for (auto k : {TriggerKind::one_pixel, TriggerKind::patch, TriggerKind::blend, TriggerKind::sinusoid}) {
    if (to_string(k) == text) return k;
  }
  throw ArgumentError("unknown trigger kind \"" + std::string(text) +
                      "\" (expected one_pixel, patch, blend or sinusoid)");
}

std::string_view to_string(Corner corner) {
  switch (corner) {
    case Corner::top_left: return "top_left";
    case Corner::top_right: return "top_right";
    case Corner::bottom_left: return "bottom_left";
    case Corner::bottom_right: return "bottom_right";
  }
  return "?";
}

Corner parse_corner(std::string_view text) {
  for (auto c : {Corner::top_left, Corner::top_right, Corner::bottom_left, Corner::bottom_right}) {
    if (to_string(c) == text) return c;
  }
  throw ArgumentError("unknown corner \"" + std::string(text) + "\"");
}

void Trigger::validate() const {
  if (mask.rank() != 3 || !mask.same_shape(pattern)) {
    throw ShapeError("trigger mask " + format_dims(mask.dims()) + " and pattern " + format_dims(pattern.dims()) +
                     " must share one [C,H,W] shape");
  }
  bool nonzero = false;
  for (float v : mask.values()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ArgumentError("trigger mask value outside [0,1]");
    nonzero = nonzero || v > 0.0f;
  }
  if (!nonzero) throw ArgumentError("trigger mask is all zero");
  for (float v : pattern.values()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ArgumentError("trigger pattern value outside [0,1]");
  }
}

namespace {

void check_alpha(float alpha, const char* what) {
  if (!(alpha > 0.0f && alpha <= 1.0f)) throw ArgumentError(std::string(what) + " must be in (0,1]");
}

}  // namespace

Trigger make_trigger(TriggerKind kind, const TriggerParams& params, ImageShape shape, std::uint64_t seed) {
  if (shape.channels == 0 || shape.height == 0 || shape.width == 0) {
    throw ShapeError("trigger needs a non-empty image shape");
  }
  const std::size_t C = shape.channels, H = shape.height, W = shape.width;
  Trigger t{kind, DenseArray(shape.dims()), DenseArray(shape.dims())};
  auto at = [&](std::size_t c, std::size_t h, std::size_t w) { return (c * H + h) * W + w; };

  switch (kind) {
    case TriggerKind::one_pixel: {
      const std::size_t r = params.pixel_row.value_or(H - 1), col = params.pixel_col.value_or(W - 1);
      if (r >= H || col >= W) {
        throw ArgumentError("one_pixel coordinate (" + std::to_string(r) + "," + std::to_string(col) +
                            ") outside " + std::to_string(H) + "x" + std::to_string(W) + " image");
      }
      for (std::size_t c = 0; c < C; ++c) {
        t.mask[at(c, r, col)] = 1.0f;
        t.pattern[at(c, r, col)] = 1.0f;
      }
      break;
    }
    case TriggerKind::patch: {
      const std::size_t s = params.patch_size;
      if (s == 0 || s > H || s > W) {
        throw ArgumentError("patch of size " + std::to_string(s) + " exceeds " + std::to_string(H) + "x" +
                            std::to_string(W) + " image");
      }
      const bool bottom = params.corner == Corner::bottom_left || params.corner == Corner::bottom_right;
      const bool right = params.corner == Corner::top_right || params.corner == Corner::bottom_right;
      const std::size_t r0 = bottom ? H - s : 0, c0 = right ? W - s : 0;
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < s; ++i) {
          for (std::size_t j = 0; j < s; ++j) {
            t.mask[at(c, r0 + i, c0 + j)] = 1.0f;
            t.pattern[at(c, r0 + i, c0 + j)] = (i + j) % 2 == 0 ? 1.0f : 0.0f;
          }
        }
      }
      break;
    }
    case TriggerKind::blend: {
      check_alpha(params.blend_alpha, "blend alpha");
      t.mask.fill(params.blend_alpha);
      CounterRng rng(seed, "trigger/blend");
      for (float& v : t.pattern.values()) v = rng.uniform();
      break;
    }
    case TriggerKind::sinusoid: {
      check_alpha(params.sinusoid_alpha, "sinusoid alpha");
      if (!(params.sinusoid_frequency > 0.0f) || !std::isfinite(params.sinusoid_frequency)) {
        throw ArgumentError("sinusoid frequency must be positive");
      }
      t.mask.fill(params.sinusoid_alpha);
      for (std::size_t w = 0; w < W; ++w) {
        const double phase = 2.0 * std::numbers::pi * params.sinusoid_frequency * static_cast<double>(w) /
                             static_cast<double>(W);
        const float v = static_cast<float>(0.5 + 0.5 * std::sin(phase));
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t h = 0; h < H; ++h) t.pattern[at(c, h, w)] = std::clamp(v, 0.0f, 1.0f);
        }
      }
      break;
    }
  }
  t.validate();
  return t;
}

void apply_trigger(std::span<const float> x, const Trigger& t, std::span<float> out) {
  const std::size_t n = t.mask.size();
  if (x.size() != n || out.size() != n) {
    throw ShapeError("image of " + std::to_string(x.size()) + " values does not match trigger shape " +
                     format_dims(t.mask.dims()));
  }
  const float* m = t.mask.data();
  const float* p = t.pattern.data();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::clamp(x[i] * (1.0f - m[i]) + p[i] * m[i], 0.0f, 1.0f);
  }
}

DenseArray apply_trigger(const DenseArray& image, const Trigger& t) {
  if (!image.same_shape(t.mask)) {
    throw ShapeError("image " + format_dims(image.dims()) + " does not match trigger " + format_dims(t.mask.dims()));
  }
  DenseArray out(image.dims());
  apply_trigger(image.values(), t, out.values());
  return out;
}

}  // namespace ebyd
