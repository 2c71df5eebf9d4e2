#pragma once

#include <optional>
#include <span>
#include <vector>

#include "ebyd/nncore/dense_array.hpp"
#include "ebyd/nncore/model.hpp"

namespace ebyd {

// Logits [B,K] for a batch [B,C,H,W]. Pure: identical inputs give
// bitwise-identical logits. Throws ShapeError on a batch/arch mismatch and
// NumericError when the logits are not finite.
DenseArray forward(const ModelBundle& model, const DenseArray& batch);

// Mean over the batch of -log softmax(logits)[label], max-subtracted.
float cross_entropy(const DenseArray& logits, std::span<const int> labels);

// Row-wise softmax of [B,K] logits.
DenseArray softmax(const DenseArray& logits);

// Row-wise argmax; ties resolve to the lowest class index.
std::vector<int> argmax_rows(const DenseArray& logits);

std::vector<int> predict(const ModelBundle& model, const DenseArray& batch);

// [B, hidden_units]: mean absolute activation of each hidden unit per
// sample, read at the point where the unit mask acts but before it does.
DenseArray unit_activations(const ModelBundle& model, const DenseArray& batch);

struct GradRequest {
  bool params = true;
  bool unit_mask = false;
  bool perturbation = false;
  bool input = false;
};

struct Gradients {
  float loss = 0.0f;
  DenseArray logits;
  ParamMap params;                     // d loss / d theta
  std::optional<DenseArray> unit_mask;
  ParamMap perturbation;               // d loss / d delta, keyed like the perturbation map
  std::optional<DenseArray> input;     // d loss / d batch
};

// Gradient of cross_entropy(forward(model, batch), labels) with respect to
// every requested leaf. Requesting the mask or perturbation gradient of a
// model that carries none throws ArgumentError.
Gradients backward(const ModelBundle& model, const DenseArray& batch, std::span<const int> labels,
                   const GradRequest& request = {});

enum class Direction { descend, ascend };

// In place: value <- value -/+ lr * (grad + weight_decay * value).
void sgd_update(DenseArray& value, const DenseArray& grad, float lr, float weight_decay,
                Direction direction);

// sgd_update applied to every parameter named in `grads`. Parameters
// without a gradient entry are left untouched.
void sgd_step(ParamMap& params, const ParamMap& grads, float lr, float weight_decay,
              Direction direction);

}  // namespace ebyd
