#include "ebyd/trainer/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ebyd/errors.hpp"
#include "ebyd/nncore/network.hpp"
#include "ebyd/nncore/rng.hpp"

namespace ebyd {
namespace {

constexpr std::size_t kEvalChunk = 256;

void check_nonempty(const ImageDataset& data, const char* what) {
  if (data.size() == 0) throw ArgumentError(std::string(what) + " is empty");
}

void check_compatible(const ModelBundle& model, const ImageDataset& data) {
  if (model.arch.num_classes != data.num_classes) {
    throw ShapeError("model has " + std::to_string(model.arch.num_classes) + " classes, dataset has " +
                     std::to_string(data.num_classes));
  }
  if (model.arch.input.dims() != data.image_shape().dims()) {
    throw ShapeError("model input " + format_dims(model.arch.input.dims()) + " does not match images " +
                     format_dims(data.image_shape().dims()));
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ArgumentError("training needs epochs >= 1");
  if (!(lr > 0.0f) || !std::isfinite(lr)) throw ArgumentError("training lr must be positive");
  if (!(weight_decay >= 0.0f) || !std::isfinite(weight_decay)) throw ArgumentError("weight decay must be >= 0");
  if (batch_size < 1) throw ArgumentError("batch size must be >= 1");
  if (!(lr_decay_factor > 0.0f)) throw ArgumentError("lr decay factor must be positive");
}

ModelBundle train(const ArchSpec& arch, const ImageDataset& data, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  ModelBundle model = init_model(arch, cfg.seed);
  train_in_place(model, data, cfg, on_epoch);
  return model;
}

void train_in_place(ModelBundle& model, const ImageDataset& data, const TrainConfig& cfg,
                    const EpochCallback& on_epoch) {
  cfg.validate();
  check_nonempty(data, "training set");
  check_compatible(model, data);

  const std::size_t n = data.size();
  std::vector<std::size_t> order(n);
  float lr = cfg.lr;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (std::find(cfg.lr_decay_epochs.begin(), cfg.lr_decay_epochs.end(), epoch) != cfg.lr_decay_epochs.end()) {
      lr *= cfg.lr_decay_factor;
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    CounterRng rng(cfg.seed, "train/epoch/" + std::to_string(epoch));
    rng.shuffle(std::span(order));

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, n - start));
      const DenseArray batch = gather_images(data, idx);
      const std::vector<int> labels = gather_labels(data, idx);
      const auto diverged = [&](const std::string& what) {
        return NumericError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batches) + " (lr " + std::to_string(lr) + "): " + what);
      };
      Gradients g;
      try {
        g = backward(model, batch, labels);
      } catch (const NumericError& e) {
        throw diverged(e.what());
      }
      if (!std::isfinite(g.loss)) throw diverged("loss " + std::to_string(g.loss));
      sgd_step(model.params, g.params, lr, cfg.weight_decay, Direction::descend);
      loss_sum += g.loss;
      ++batches;
    }
    if (on_epoch) on_epoch(EpochStats{epoch, lr, loss_sum / static_cast<double>(batches)});
  }
}

std::vector<int> predict_dataset(const ModelBundle& model, const ImageDataset& data) {
  check_compatible(model, data);
  std::vector<int> out;
  out.reserve(data.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += kEvalChunk) {
    idx.resize(std::min(kEvalChunk, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto p = predict(model, gather_images(data, idx));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

double eval_ca(const ModelBundle& model, const ImageDataset& clean_test) {
  check_nonempty(clean_test, "test set");
  const auto pred = predict_dataset(model, clean_test);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == clean_test.labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

double eval_asr(const ModelBundle& model, const ImageDataset& backdoor_test, int target) {
  check_nonempty(backdoor_test, "backdoor test set");
  const auto pred = predict_dataset(model, backdoor_test);
  return static_cast<double>(std::count(pred.begin(), pred.end(), target)) / static_cast<double>(pred.size());
}

std::vector<double> per_class_accuracy(const ModelBundle& model, const ImageDataset& clean_test) {
  check_nonempty(clean_test, "test set");
  const auto pred = predict_dataset(model, clean_test);
  std::vector<std::size_t> hit(clean_test.num_classes, 0), total(clean_test.num_classes, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto y = static_cast<std::size_t>(clean_test.labels[i]);
    ++total[y];
    hit[y] += pred[i] == clean_test.labels[i];
  }
  std::vector<double> acc(clean_test.num_classes, 0.0);
  for (std::size_t c = 0; c < acc.size(); ++c) {
    if (total[c] > 0) acc[c] = static_cast<double>(hit[c]) / static_cast<double>(total[c]);
  }
  return acc;
}

EvalReport evaluate(const ModelBundle& model, const ImageDataset& clean_test, const ImageDataset* backdoor_test,
                    int target) {
  EvalReport r;
  r.ca = eval_ca(model, clean_test);
  r.per_class_accuracy = per_class_accuracy(model, clean_test);
  if (backdoor_test != nullptr) r.asr = eval_asr(model, *backdoor_test, target);
  return r;
}

}  // namespace ebyd
