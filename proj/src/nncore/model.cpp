#include "ebyd/nncore/model.hpp"

#include <cmath>

#include "ebyd/errors.hpp"
#include "ebyd/nncore/rng.hpp"

namespace ebyd {

void ModelBundle::validate() const {
  const Topology topo(arch);
  if (params.size() != topo.params().size()) {
    throw ShapeError("model has " + std::to_string(params.size()) + " parameter arrays, architecture expects " +
                     std::to_string(topo.params().size()));
  }
  for (const auto& spec : topo.params()) {
    auto it = params.find(spec.name);
    if (it == params.end()) throw ShapeError("missing parameter '" + spec.name + "'");
    if (it->second.dims() != spec.dims) {
      throw ShapeError("parameter '" + spec.name + "' has dims " + format_dims(it->second.dims()) +
                       ", expected " + format_dims(spec.dims));
    }
  }
  if (unit_mask) {
    if (unit_mask->size() != topo.hidden_units() || unit_mask->rank() != 1) {
      throw ShapeError("unit mask has dims " + format_dims(unit_mask->dims()) + ", expected [" +
                       std::to_string(topo.hidden_units()) + "]");
    }
    for (float v : unit_mask->values()) {
      if (!(v >= 0.0f && v <= 1.0f)) throw ArgumentError("unit mask entry outside [0,1]");
    }
  }
  if (weight_perturbation) {
    for (const auto& [name, delta] : *weight_perturbation) {
      auto it = params.find(name);
      if (it == params.end()) throw ShapeError("perturbation for unknown parameter '" + name + "'");
      if (!delta.same_shape(it->second)) {
        throw ShapeError("perturbation for '" + name + "' has dims " + format_dims(delta.dims()));
      }
    }
  }
}

std::size_t ModelBundle::hidden_units() const { return Topology(arch).hidden_units(); }

ModelBundle init_model(const ArchSpec& arch, std::uint64_t seed) {
  const Topology topo(arch);
  ModelBundle model{arch, {}, std::nullopt, std::nullopt};
  for (const auto& spec : topo.params()) {
    DenseArray values(spec.dims);
    const std::string& name = spec.name;
    if (name.ends_with(".weight")) {
      const std::size_t fan_in = values.size() / spec.dims[0];
      const float stddev = std::sqrt(2.0f / static_cast<float>(fan_in));
      CounterRng rng(seed, "init/" + name);
      for (auto& v : values.values()) v = stddev * rng.normal();
    } else if (name.ends_with(".scale")) {
      values.fill(1.0f);
    }
    model.params.emplace(name, std::move(values));
  }
  return model;
}

ModelBundle zero_model(const ArchSpec& arch) {
  const Topology topo(arch);
  ModelBundle model{arch, {}, std::nullopt, std::nullopt};
  for (const auto& spec : topo.params()) model.params.emplace(spec.name, DenseArray(spec.dims));
  return model;
}

ParamMap effective_params(const ModelBundle& model) {
  ParamMap eff = model.params;
  if (model.weight_perturbation) {
    for (const auto& [name, delta] : *model.weight_perturbation) {
      auto& target = eff.at(name);
      for (std::size_t i = 0; i < target.size(); ++i) target[i] *= 1.0f + delta[i];
    }
  }
  return eff;
}

ModelBundle fold_unit_mask(const ModelBundle& model) {
  ModelBundle folded = model;
  folded.unit_mask.reset();
  if (!model.unit_mask) return folded;
  const Topology topo(model.arch);
  const DenseArray& mask = *model.unit_mask;
  for (const auto& block : topo.unit_blocks()) {
    const std::string& prefix = topo.plan()[block.layer].prefix;
    auto& weight = folded.params.at(prefix + ".weight");
    const std::size_t row = weight.size() / block.count;
    for (std::size_t u = 0; u < block.count; ++u) {
      const float m = mask[block.offset + u];
      if (m != 0.0f && m != 1.0f) throw ArgumentError("fold_unit_mask: mask must be binary");
      if (m == 1.0f) continue;
      for (std::size_t k = 0; k < row; ++k) weight[u * row + k] = 0.0f;
      folded.params.at(prefix + ".bias")[u] = 0.0f;
      folded.params.at(prefix + ".scale")[u] = 0.0f;
      if (folded.weight_perturbation) {
        for (auto& [name, delta] : *folded.weight_perturbation) {
          if (name == prefix + ".scale" || name == prefix + ".bias") delta[u] = 0.0f;
          if (name == prefix + ".weight") {
            for (std::size_t k = 0; k < row; ++k) delta[u * row + k] = 0.0f;
          }
        }
      }
    }
  }
  return folded;
}

}  // namespace ebyd
