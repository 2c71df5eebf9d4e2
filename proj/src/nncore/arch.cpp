#include "ebyd/nncore/arch.hpp"

#include "ebyd/errors.hpp"

namespace ebyd {

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::fc: return "fc";
  }
  return "unknown";
}

ArchSpec ArchSpec::mlp(ImageShape input, std::size_t hidden, std::size_t num_classes) {
  return ArchSpec{input,
                  {{LayerKind::flatten},
                   {LayerKind::fc, hidden},
                   {LayerKind::relu},
                   {LayerKind::fc, num_classes}},
                  num_classes};
}

ArchSpec ArchSpec::tiny_cnn(ImageShape input, std::size_t num_classes) {
  return ArchSpec{input,
                  {{LayerKind::conv, 8},
                   {LayerKind::relu},
                   {LayerKind::maxpool},
                   {LayerKind::conv, 16},
                   {LayerKind::relu},
                   {LayerKind::maxpool},
                   {LayerKind::flatten},
                   {LayerKind::fc, num_classes}},
                  num_classes};
}

Topology::Topology(const ArchSpec& arch) {
  const auto fail = [](std::size_t i, const std::string& what) {
    throw ShapeError("layer " + std::to_string(i) + ": " + what);
  };
  if (arch.input.size() == 0) throw ShapeError("architecture input shape has a zero dimension");
  if (arch.num_classes < 2) throw ShapeError("architecture needs at least 2 classes");
  if (arch.layers.empty()) throw ShapeError("architecture has no layers");
  const Layer& last = arch.layers.back();
  if (last.kind != LayerKind::fc || last.units != arch.num_classes) {
    throw ShapeError("last layer must be fc with " + std::to_string(arch.num_classes) + " units");
  }

  Dims cur = arch.input.dims();
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const Layer& layer = arch.layers[i];
    LayerPlan step{layer, cur, cur, {}, false, std::nullopt};
    const bool is_last = i + 1 == arch.layers.size();
    switch (layer.kind) {
      case LayerKind::conv:
        if (cur.size() != 3) fail(i, "conv needs a (C,H,W) input");
        if (layer.units == 0) fail(i, "conv needs at least one output channel");
        step.out_dims = {layer.units, cur[1], cur[2]};
        step.prefix = "conv" + std::to_string(i);
        params_.push_back({step.prefix + ".weight", {layer.units, cur[0], 3, 3}});
        params_.push_back({step.prefix + ".bias", {layer.units}});
        break;
      case LayerKind::fc:
        if (cur.size() != 1) fail(i, "fc needs a flat input; insert flatten");
        if (layer.units == 0) fail(i, "fc needs at least one output unit");
        step.out_dims = {layer.units};
        step.prefix = "fc" + std::to_string(i);
        params_.push_back({step.prefix + ".weight", {layer.units, cur[0]}});
        params_.push_back({step.prefix + ".bias", {layer.units}});
        break;
      case LayerKind::relu:
        break;
      case LayerKind::maxpool:
        if (cur.size() != 3) fail(i, "maxpool needs a (C,H,W) input");
        if (cur[1] < 2 || cur[2] < 2) fail(i, "maxpool input smaller than 2x2");
        step.out_dims = {cur[0], cur[1] / 2, cur[2] / 2};
        break;
      case LayerKind::flatten:
        step.out_dims = {dims_product(cur)};
        break;
      default:
        fail(i, "unknown layer kind");
    }
    if ((layer.kind == LayerKind::conv || layer.kind == LayerKind::fc) && !is_last) {
      step.hidden = true;
      params_.push_back({step.prefix + ".scale", {layer.units}});
      blocks_.push_back({i, hidden_units_, layer.units});
      hidden_units_ += layer.units;
    }
    cur = step.out_dims;
    plan_.push_back(std::move(step));
  }

  // The mask multiplies the post-activation output: after the relu that
  // directly follows a hidden layer, or after the layer itself otherwise.
  for (const UnitBlock& block : blocks_) {
    std::size_t at = block.layer;
    if (at + 1 < plan_.size() && plan_[at + 1].layer.kind == LayerKind::relu) ++at;
    plan_[at].mask_after = block;
  }
}

std::vector<std::string> Topology::scale_params() const {
  std::vector<std::string> names;
  for (const auto& block : blocks_) names.push_back(plan_[block.layer].prefix + ".scale");
  return names;
}

}  // namespace ebyd
