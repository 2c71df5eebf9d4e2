#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>

#include "ebyd/nncore/arch.hpp"
#include "ebyd/nncore/dense_array.hpp"

namespace ebyd {

using ParamMap = std::map<std::string, DenseArray>;

// Architecture plus named parameters, with an optional per-hidden-unit mask
// and an optional multiplicative weight perturbation delta. With delta
// attached, a parameter's effective value is (1 + delta) * theta.
struct ModelBundle {
  ArchSpec arch;
  ParamMap params;
  std::optional<DenseArray> unit_mask;
  std::optional<ParamMap> weight_perturbation;

  // Throws ShapeError/ArgumentError when any bundle invariant is broken.
  void validate() const;
  std::size_t hidden_units() const;
};

// He-style fan-in initialization from a counter-based stream per parameter.
// Biases start at 0 and per-unit scales at 1.
ModelBundle init_model(const ArchSpec& arch, std::uint64_t seed);

// Every parameter zero, scales included.
ModelBundle zero_model(const ArchSpec& arch);

// Parameters as seen by the forward pass, perturbation applied.
ParamMap effective_params(const ModelBundle& model);

// Copy of `model` with the unit mask folded into the parameters: every
// masked-out unit has its incoming weights, bias and scale zeroed, and the
// mask is dropped. Requires a binary mask.
ModelBundle fold_unit_mask(const ModelBundle& model);

}  // namespace ebyd
