#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "ebyd/nncore/arch.hpp"
#include "ebyd/nncore/model.hpp"
#include "ebyd/poisonlab/dataset.hpp"

namespace ebyd {

// Plain mini-batch SGD (no momentum). The learning rate is multiplied by
// lr_decay_factor at the start of each epoch listed in lr_decay_epochs
// (0-based).
struct TrainConfig {
  std::size_t epochs = 15;
  float lr = 0.05f;
  float weight_decay = 5e-4f;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  std::vector<std::size_t> lr_decay_epochs{10};
  float lr_decay_factor = 0.1f;

  void validate() const;
};

struct EpochStats {
  std::size_t epoch = 0;
  float lr = 0.0f;
  double mean_loss = 0.0;
};

using EpochCallback = std::function<void(const EpochStats&)>;

// Deterministic in (arch, data, cfg). Throws NumericError naming the epoch
// and batch if the loss stops being finite.
ModelBundle train(const ArchSpec& arch, const ImageDataset& data, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

// Continues training an existing model in place with the same schedule rules.
void train_in_place(ModelBundle& model, const ImageDataset& data, const TrainConfig& cfg,
                    const EpochCallback& on_epoch = {});

// Argmax predictions over the whole dataset, evaluated in fixed chunks.
std::vector<int> predict_dataset(const ModelBundle& model, const ImageDataset& data);

double eval_ca(const ModelBundle& model, const ImageDataset& clean_test);
// Fraction of `backdoor_test` predicted as `target`.
double eval_asr(const ModelBundle& model, const ImageDataset& backdoor_test, int target);
std::vector<double> per_class_accuracy(const ModelBundle& model, const ImageDataset& clean_test);

struct EvalReport {
  double ca = 0.0;
  std::optional<double> asr;
  std::vector<double> per_class_accuracy;
};

EvalReport evaluate(const ModelBundle& model, const ImageDataset& clean_test,
                    const ImageDataset* backdoor_test = nullptr, int target = 0);

}  // namespace ebyd
