#include "ebyd/nncore/network.hpp"

#include <algorithm>
#include <cmath>

#include "ebyd/errors.hpp"

namespace ebyd {
namespace {

// Per-layer values the backward pass needs. Buffers are batch-major.
struct LayerTape {
  std::vector<float> input;      // layer input (fc, relu); padded input for conv
  std::vector<float> pre_scale;  // hidden conv/fc output before the unit scale
  std::vector<float> pre_mask;   // layer output before the unit mask
  std::vector<std::uint32_t> argmax;  // maxpool winners
};

// Conv planes are computed over an "extended" row layout of width W+2 so
// that each 3x3 tap is one contiguous axpy over the whole plane. The two
// trailing columns of every extended row are scratch.
struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t padded_width() const { return width + 2; }
  std::size_t padded_plane() const { return (height + 2) * padded_width() + 2; }  // +2 slack for scratch columns
  std::size_t ext_plane() const { return height * padded_width(); }
  std::size_t plane() const { return height * width; }
  std::size_t tap_offset(std::size_t ky, std::size_t kx) const { return ky * padded_width() + kx; }
};

class Engine {
 public:
  Engine(const ModelBundle& model, const DenseArray& batch)
      : topo_(model.arch), params_(effective_params(model)), mask_(model.unit_mask ? &*model.unit_mask : nullptr) {
    const ImageShape& in = model.arch.input;
    if (batch.rank() != 4 || batch.dim(1) != in.channels || batch.dim(2) != in.height ||
        batch.dim(3) != in.width) {
      throw ShapeError("batch dims " + format_dims(batch.dims()) + " do not match model input [B," +
                       std::to_string(in.channels) + "," + std::to_string(in.height) + "," +
                       std::to_string(in.width) + "]");
    }
    batch_ = batch.dim(0);
  }

  const Topology& topology() const { return topo_; }
  const ParamMap& params() const { return params_; }

  // Runs the network; fills `tape` when non-null and per-sample mean |a| of
  // every hidden unit (taken before the mask) into `unit_abs` when non-null.
  std::vector<float> run(std::span<const float> input, std::vector<LayerTape>* tape,
                         std::vector<float>* unit_abs = nullptr) const {
    std::vector<float> cur(input.begin(), input.end());
    if (tape) tape->assign(topo_.plan().size(), {});
    for (std::size_t i = 0; i < topo_.plan().size(); ++i) {
      const LayerPlan& step = topo_.plan()[i];
      LayerTape* rec = tape ? &(*tape)[i] : nullptr;
      std::vector<float> out;
      switch (step.layer.kind) {
        case LayerKind::conv: out = conv_forward(step, cur, rec); break;
        case LayerKind::fc: out = fc_forward(step, cur, rec); break;
        case LayerKind::relu:
          out = cur;
          for (auto& v : out) v = v > 0.0f ? v : 0.0f;
          if (rec) rec->input = std::move(cur);
          break;
        case LayerKind::maxpool: out = pool_forward(step, cur, rec); break;
        case LayerKind::flatten: out = std::move(cur); break;
      }
      if (step.mask_after && unit_abs) record_unit_abs(step, *step.mask_after, out, *unit_abs);
      if (step.mask_after && mask_) apply_mask(step, *step.mask_after, out, rec);
      cur = std::move(out);
    }
    return cur;
  }

  // Propagates d loss / d logits back through the tape. Accumulates
  // parameter and mask gradients; returns d loss / d input when asked.
  std::vector<float> reverse(std::vector<float> grad, const std::vector<LayerTape>& tape,
                             ParamMap& param_grads, std::vector<float>* mask_grad, bool want_input) const {
    for (std::size_t i = topo_.plan().size(); i-- > 0;) {
      const LayerPlan& step = topo_.plan()[i];
      const LayerTape& rec = tape[i];
      if (step.mask_after && mask_) unmask(step, *step.mask_after, grad, rec, mask_grad);
      const bool need_input = want_input || i > 0;
      switch (step.layer.kind) {
        case LayerKind::conv: grad = conv_backward(step, grad, rec, param_grads, need_input); break;
        case LayerKind::fc: grad = fc_backward(step, grad, rec, param_grads, need_input); break;
        case LayerKind::relu:
          for (std::size_t k = 0; k < grad.size(); ++k) {
            if (!(rec.input[k] > 0.0f)) grad[k] = 0.0f;
          }
          break;
        case LayerKind::maxpool: grad = pool_backward(step, grad, rec); break;
        case LayerKind::flatten: break;
      }
    }
    return grad;
  }

  std::size_t batch() const { return batch_; }

 private:
  std::vector<float> conv_forward(const LayerPlan& step, const std::vector<float>& in, LayerTape* rec) const {
    const ConvGeometry g{step.in_dims[0], step.in_dims[1], step.in_dims[2]};
    const std::size_t outc = step.layer.units;
    const float* weight = params_.at(step.prefix + ".weight").data();
    const float* bias = params_.at(step.prefix + ".bias").data();
    const float* scale = step.hidden ? params_.at(step.prefix + ".scale").data() : nullptr;

    std::vector<float> padded(batch_ * g.channels * g.padded_plane(), 0.0f);
    for (std::size_t b = 0; b < batch_; ++b) {
      for (std::size_t c = 0; c < g.channels; ++c) {
        const float* src = in.data() + (b * g.channels + c) * g.plane();
        float* dst = padded.data() + (b * g.channels + c) * g.padded_plane();
        for (std::size_t y = 0; y < g.height; ++y) {
          std::copy_n(src + y * g.width, g.width, dst + (y + 1) * g.padded_width() + 1);
        }
      }
    }

    std::vector<float> out(batch_ * outc * g.plane());
    std::vector<float> pre(rec && scale ? out.size() : 0);
    std::vector<float> ext(g.ext_plane());
    for (std::size_t b = 0; b < batch_; ++b) {
      for (std::size_t o = 0; o < outc; ++o) {
        std::fill(ext.begin(), ext.end(), 0.0f);
        for (std::size_t c = 0; c < g.channels; ++c) {
          const float* plane = padded.data() + (b * g.channels + c) * g.padded_plane();
          const float* w = weight + (o * g.channels + c) * 9;
          for (std::size_t ky = 0; ky < 3; ++ky) {
            for (std::size_t kx = 0; kx < 3; ++kx) {
              const float wv = w[ky * 3 + kx];
              const float* src = plane + g.tap_offset(ky, kx);
              float* acc = ext.data();
              for (std::size_t j = 0; j < ext.size(); ++j) acc[j] += wv * src[j];
            }
          }
        }
        const std::size_t base = (b * outc + o) * g.plane();
        const float s = scale ? scale[o] : 1.0f;
        for (std::size_t y = 0; y < g.height; ++y) {
          for (std::size_t x = 0; x < g.width; ++x) {
            const float u = ext[y * g.padded_width() + x] + bias[o];
            if (!pre.empty()) pre[base + y * g.width + x] = u;
            out[base + y * g.width + x] = s * u;
          }
        }
      }
    }
    if (rec) {
      rec->input = std::move(padded);
      rec->pre_scale = std::move(pre);
    }
    return out;
  }

  std::vector<float> conv_backward(const LayerPlan& step, const std::vector<float>& grad, const LayerTape& rec,
                                   ParamMap& grads, bool need_input) const {
    const ConvGeometry g{step.in_dims[0], step.in_dims[1], step.in_dims[2]};
    const std::size_t outc = step.layer.units;
    const float* weight = params_.at(step.prefix + ".weight").data();
    const float* scale = step.hidden ? params_.at(step.prefix + ".scale").data() : nullptr;
    float* dweight = grads.at(step.prefix + ".weight").data();
    float* dbias = grads.at(step.prefix + ".bias").data();
    float* dscale = scale ? grads.at(step.prefix + ".scale").data() : nullptr;

    std::vector<float> dpadded(need_input ? rec.input.size() : 0, 0.0f);
    std::vector<float> ext(g.ext_plane());
    for (std::size_t b = 0; b < batch_; ++b) {
      for (std::size_t o = 0; o < outc; ++o) {
        const std::size_t base = (b * outc + o) * g.plane();
        const float s = scale ? scale[o] : 1.0f;
        std::fill(ext.begin(), ext.end(), 0.0f);
        float bias_acc = 0.0f;
        float scale_acc = 0.0f;
        for (std::size_t y = 0; y < g.height; ++y) {
          for (std::size_t x = 0; x < g.width; ++x) {
            const float dz = grad[base + y * g.width + x];
            if (dscale) scale_acc += dz * rec.pre_scale[base + y * g.width + x];
            const float du = dz * s;
            ext[y * g.padded_width() + x] = du;
            bias_acc += du;
          }
        }
        dbias[o] += bias_acc;
        if (dscale) dscale[o] += scale_acc;
        for (std::size_t c = 0; c < g.channels; ++c) {
          const float* plane = rec.input.data() + (b * g.channels + c) * g.padded_plane();
          float* dplane = need_input ? dpadded.data() + (b * g.channels + c) * g.padded_plane() : nullptr;
          float* dw = dweight + (o * g.channels + c) * 9;
          const float* w = weight + (o * g.channels + c) * 9;
          for (std::size_t ky = 0; ky < 3; ++ky) {
            for (std::size_t kx = 0; kx < 3; ++kx) {
              const std::size_t off = g.tap_offset(ky, kx);
              const float* src = plane + off;
              float acc = 0.0f;
              for (std::size_t j = 0; j < ext.size(); ++j) acc += ext[j] * src[j];
              dw[ky * 3 + kx] += acc;
              if (dplane) {
                const float wv = w[ky * 3 + kx];
                float* dst = dplane + off;
                for (std::size_t j = 0; j < ext.size(); ++j) dst[j] += wv * ext[j];
              }
            }
          }
        }
      }
    }
    if (!need_input) return {};
    std::vector<float> dinput(batch_ * g.channels * g.plane());
    for (std::size_t b = 0; b < batch_; ++b) {
      for (std::size_t c = 0; c < g.channels; ++c) {
        const float* src = dpadded.data() + (b * g.channels + c) * g.padded_plane();
        float* dst = dinput.data() + (b * g.channels + c) * g.plane();
        for (std::size_t y = 0; y < g.height; ++y) {
          std::copy_n(src + (y + 1) * g.padded_width() + 1, g.width, dst + y * g.width);
        }
      }
    }
    return dinput;
  }

  std::vector<float> fc_forward(const LayerPlan& step, std::vector<float>& in, LayerTape* rec) const {
    const std::size_t n_in = step.in_dims[0];
    const std::size_t n_out = step.layer.units;
    const float* weight = params_.at(step.prefix + ".weight").data();
    const float* bias = params_.at(step.prefix + ".bias").data();
    const float* scale = step.hidden ? params_.at(step.prefix + ".scale").data() : nullptr;
    std::vector<float> out(batch_ * n_out);
    std::vector<float> pre(rec && scale ? out.size() : 0);
    for (std::size_t b = 0; b < batch_; ++b) {
      const float* x = in.data() + b * n_in;
      for (std::size_t o = 0; o < n_out; ++o) {
        const float* w = weight + o * n_in;
        float acc = 0.0f;
        for (std::size_t i = 0; i < n_in; ++i) acc += w[i] * x[i];
        const float u = acc + bias[o];
        if (!pre.empty()) pre[b * n_out + o] = u;
        out[b * n_out + o] = scale ? scale[o] * u : u;
      }
    }
    if (rec) {
      rec->input = std::move(in);
      rec->pre_scale = std::move(pre);
    }
    return out;
  }

  std::vector<float> fc_backward(const LayerPlan& step, const std::vector<float>& grad, const LayerTape& rec,
                                 ParamMap& grads, bool need_input) const {
    const std::size_t n_in = step.in_dims[0];
    const std::size_t n_out = step.layer.units;
    const float* weight = params_.at(step.prefix + ".weight").data();
    const float* scale = step.hidden ? params_.at(step.prefix + ".scale").data() : nullptr;
    float* dweight = grads.at(step.prefix + ".weight").data();
    float* dbias = grads.at(step.prefix + ".bias").data();
    float* dscale = scale ? grads.at(step.prefix + ".scale").data() : nullptr;
    std::vector<float> dinput(need_input ? batch_ * n_in : 0, 0.0f);
    for (std::size_t b = 0; b < batch_; ++b) {
      const float* x = rec.input.data() + b * n_in;
      float* dx = need_input ? dinput.data() + b * n_in : nullptr;
      for (std::size_t o = 0; o < n_out; ++o) {
        const float dz = grad[b * n_out + o];
        if (dscale) dscale[o] += dz * rec.pre_scale[b * n_out + o];
        const float du = scale ? dz * scale[o] : dz;
        dbias[o] += du;
        float* dw = dweight + o * n_in;
        for (std::size_t i = 0; i < n_in; ++i) dw[i] += du * x[i];
        if (dx) {
          const float* w = weight + o * n_in;
          for (std::size_t i = 0; i < n_in; ++i) dx[i] += du * w[i];
        }
      }
    }
    return dinput;
  }

  std::vector<float> pool_forward(const LayerPlan& step, const std::vector<float>& in, LayerTape* rec) const {
    const std::size_t ch = step.in_dims[0], h = step.in_dims[1], w = step.in_dims[2];
    const std::size_t oh = step.out_dims[1], ow = step.out_dims[2];
    std::vector<float> out(batch_ * ch * oh * ow);
    std::vector<std::uint32_t> winners(rec ? out.size() : 0);
    for (std::size_t p = 0; p < batch_ * ch; ++p) {
      const float* src = in.data() + p * h * w;
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
          std::size_t best = (2 * y) * w + 2 * x;
          for (std::size_t k : {best + 1, best + w, best + w + 1}) {
            if (src[k] > src[best]) best = k;
          }
          const std::size_t o = p * oh * ow + y * ow + x;
          out[o] = src[best];
          if (rec) winners[o] = static_cast<std::uint32_t>(p * h * w + best);
        }
      }
    }
    if (rec) rec->argmax = std::move(winners);
    return out;
  }

  std::vector<float> pool_backward(const LayerPlan& step, const std::vector<float>& grad, const LayerTape& rec) const {
    std::vector<float> dinput(batch_ * dims_product(step.in_dims), 0.0f);
    for (std::size_t k = 0; k < grad.size(); ++k) dinput[rec.argmax[k]] += grad[k];
    return dinput;
  }

  void record_unit_abs(const LayerPlan& step, const UnitBlock& block, const std::vector<float>& out,
                       std::vector<float>& unit_abs) const {
    const std::size_t spatial = dims_product(step.out_dims) / block.count;
    const std::size_t total = topo_.hidden_units();
    unit_abs.resize(batch_ * total, 0.0f);
    for (std::size_t b = 0; b < batch_; ++b) {
      for (std::size_t u = 0; u < block.count; ++u) {
        const float* p = out.data() + (b * block.count + u) * spatial;
        double acc = 0.0;
        for (std::size_t k = 0; k < spatial; ++k) acc += std::abs(p[k]);
        unit_abs[b * total + block.offset + u] = static_cast<float>(acc / static_cast<double>(spatial));
      }
    }
  }

  void apply_mask(const LayerPlan& step, const UnitBlock& block, std::vector<float>& out, LayerTape* rec) const {
    if (rec) rec->pre_mask = out;
    const std::size_t spatial = dims_product(step.out_dims) / block.count;
    const float* m = mask_->data() + block.offset;
    for (std::size_t b = 0; b < batch_; ++b) {
      for (std::size_t u = 0; u < block.count; ++u) {
        float* p = out.data() + (b * block.count + u) * spatial;
        for (std::size_t k = 0; k < spatial; ++k) p[k] *= m[u];
      }
    }
  }

  void unmask(const LayerPlan& step, const UnitBlock& block, std::vector<float>& grad, const LayerTape& rec,
              std::vector<float>* mask_grad) const {
    const std::size_t spatial = dims_product(step.out_dims) / block.count;
    const float* m = mask_->data() + block.offset;
    for (std::size_t b = 0; b < batch_; ++b) {
      for (std::size_t u = 0; u < block.count; ++u) {
        const std::size_t base = (b * block.count + u) * spatial;
        float acc = 0.0f;
        for (std::size_t k = 0; k < spatial; ++k) {
          acc += grad[base + k] * rec.pre_mask[base + k];
          grad[base + k] *= m[u];
        }
        if (mask_grad) (*mask_grad)[block.offset + u] += acc;
      }
    }
  }

  Topology topo_;
  ParamMap params_;
  const DenseArray* mask_;
  std::size_t batch_ = 0;
};

void check_labels(std::span<const int> labels, std::size_t batch, std::size_t classes) {
  if (labels.size() != batch) {
    throw ShapeError(std::to_string(labels.size()) + " labels for a batch of " + std::to_string(batch));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw ArgumentError("label " + std::to_string(y) + " outside [0," + std::to_string(classes) + ")");
    }
  }
}

DenseArray finite_logits(std::vector<float> values, std::size_t batch, std::size_t classes) {
  DenseArray logits({batch, classes}, std::move(values));
  if (!logits.all_finite()) throw NumericError("forward produced non-finite logits");
  return logits;
}

}  // namespace

DenseArray forward(const ModelBundle& model, const DenseArray& batch) {
  const Engine engine(model, batch);
  return finite_logits(engine.run(batch.values(), nullptr), engine.batch(), model.arch.num_classes);
}

float cross_entropy(const DenseArray& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy expects [B,K] logits");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  check_labels(labels, batch, classes);
  float total = 0.0f;
  for (std::size_t b = 0; b < batch; ++b) {
    const float* row = logits.data() + b * classes;
    const float top = *std::max_element(row, row + classes);
    float sum = 0.0f;
    for (std::size_t k = 0; k < classes; ++k) sum += std::exp(row[k] - top);
    total += std::log(sum) - (row[labels[b]] - top);
  }
  return total / static_cast<float>(batch);
}

DenseArray softmax(const DenseArray& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax expects [B,K] logits");
  DenseArray probs = logits;
  const std::size_t classes = logits.dim(1);
  for (std::size_t b = 0; b < logits.dim(0); ++b) {
    float* row = probs.data() + b * classes;
    const float top = *std::max_element(row, row + classes);
    float sum = 0.0f;
    for (std::size_t k = 0; k < classes; ++k) sum += (row[k] = std::exp(row[k] - top));
    for (std::size_t k = 0; k < classes; ++k) row[k] /= sum;
  }
  return probs;
}

std::vector<int> argmax_rows(const DenseArray& logits) {
  if (logits.rank() != 2) throw ShapeError("argmax_rows expects [B,K] logits");
  const std::size_t classes = logits.dim(1);
  std::vector<int> out(logits.dim(0));
  for (std::size_t b = 0; b < out.size(); ++b) {
    const float* row = logits.data() + b * classes;
    out[b] = static_cast<int>(std::max_element(row, row + classes) - row);
  }
  return out;
}

std::vector<int> predict(const ModelBundle& model, const DenseArray& batch) {
  return argmax_rows(forward(model, batch));
}

DenseArray unit_activations(const ModelBundle& model, const DenseArray& batch) {
  Engine engine(model, batch);
  std::vector<float> unit_abs;
  engine.run(batch.values(), nullptr, &unit_abs);
  return DenseArray({engine.batch(), engine.topology().hidden_units()}, std::move(unit_abs));
}

Gradients backward(const ModelBundle& model, const DenseArray& batch, std::span<const int> labels,
                   const GradRequest& request) {
  if (request.unit_mask && !model.unit_mask) {
    throw ArgumentError("unit-mask gradient requested but the model carries no unit mask");
  }
  if (request.perturbation && !model.weight_perturbation) {
    throw ArgumentError("perturbation gradient requested but the model carries no weight perturbation");
  }
  const Engine engine(model, batch);
  const std::size_t classes = model.arch.num_classes;
  check_labels(labels, engine.batch(), classes);

  std::vector<LayerTape> tape;
  Gradients out;
  out.logits = finite_logits(engine.run(batch.values(), &tape), engine.batch(), classes);
  out.loss = cross_entropy(out.logits, labels);

  const DenseArray probs = softmax(out.logits);
  std::vector<float> grad(probs.values().begin(), probs.values().end());
  const float inv_batch = 1.0f / static_cast<float>(engine.batch());
  for (std::size_t b = 0; b < engine.batch(); ++b) {
    grad[b * classes + labels[b]] -= 1.0f;
    for (std::size_t k = 0; k < classes; ++k) grad[b * classes + k] *= inv_batch;
  }

  ParamMap eff_grads;
  for (const auto& [name, value] : engine.params()) eff_grads.emplace(name, DenseArray(value.dims()));
  std::vector<float> mask_grad(request.unit_mask ? model.unit_mask->size() : 0, 0.0f);
  std::vector<float> dinput =
      engine.reverse(std::move(grad), tape, eff_grads, request.unit_mask ? &mask_grad : nullptr, request.input);

  if (request.perturbation) {
    for (const auto& [name, delta] : *model.weight_perturbation) {
      DenseArray g = eff_grads.at(name);
      const DenseArray& theta = model.params.at(name);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= theta[i];
      out.perturbation.emplace(name, std::move(g));
    }
  }
  if (request.params) {
    if (model.weight_perturbation) {
      for (const auto& [name, delta] : *model.weight_perturbation) {
        DenseArray& g = eff_grads.at(name);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] *= 1.0f + delta[i];
      }
    }
    out.params = std::move(eff_grads);
  }
  if (request.unit_mask) {
    const std::size_t units = mask_grad.size();
    out.unit_mask = DenseArray({units}, std::move(mask_grad));
  }
  if (request.input) out.input = DenseArray(batch.dims(), std::move(dinput));
  return out;
}

void sgd_update(DenseArray& value, const DenseArray& grad, float lr, float weight_decay, Direction direction) {
  if (!(lr >= 0.0f) || !std::isfinite(lr)) throw ArgumentError("learning rate must be a finite non-negative value");
  if (!(weight_decay >= 0.0f)) throw ArgumentError("weight decay must be non-negative");
  if (!value.same_shape(grad)) {
    throw ShapeError("gradient dims " + format_dims(grad.dims()) + " do not match " + format_dims(value.dims()));
  }
  const float sign = direction == Direction::descend ? -1.0f : 1.0f;
  for (std::size_t i = 0; i < value.size(); ++i) {
    value[i] += sign * lr * (grad[i] + weight_decay * value[i]);
  }
  if (!value.all_finite()) throw NumericError("sgd update produced non-finite values");
}

void sgd_step(ParamMap& params, const ParamMap& grads, float lr, float weight_decay, Direction direction) {
  for (const auto& [name, grad] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw ArgumentError("gradient for unknown parameter '" + name + "'");
    sgd_update(it->second, grad, lr, weight_decay, direction);
  }
}

}  // namespace ebyd
