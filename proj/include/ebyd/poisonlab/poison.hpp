#pragma once

#include <cstdint>
#include <vector>

#include "ebyd/poisonlab/dataset.hpp"
#include "ebyd/poisonlab/trigger.hpp"

namespace ebyd {

struct PoisonedDataset {
  ImageDataset base;
  Trigger trigger;
  int target_label = 0;
  std::vector<std::size_t> poison_indices;  // ascending
  ImageDataset poisoned;                    // base with poison_indices triggered and relabelled

  bool is_poisoned(std::size_t i) const;
};

// floor(rate*N) indices drawn uniformly without replacement over all samples,
// including those already labelled target.
PoisonedDataset poison(const ImageDataset& data, const Trigger& trigger, double rate, int target,
                       std::uint64_t seed);

struct DefenseSplit {
  ImageDataset train;
  ImageDataset defense;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> defense_indices;
};

// Class-stratified, seeded; defense size is round(fraction*N), at least 1.
DefenseSplit split_defense(const ImageDataset& data, double fraction, std::uint64_t seed);

// Every test sample whose label differs from `target`, triggered and
// relabelled `target`.
ImageDataset backdoor_testset(const ImageDataset& clean_test, const Trigger& trigger, int target);

}  // namespace ebyd
