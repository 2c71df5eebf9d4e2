#include "ebyd/poisonlab/poison.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ebyd/errors.hpp"
#include "ebyd/nncore/rng.hpp"

namespace ebyd {
namespace {

void check_target(const ImageDataset& data, int target) {
  if (target < 0 || static_cast<std::size_t>(target) >= data.num_classes) {
    throw ArgumentError("target label " + std::to_string(target) + " outside [0," +
                        std::to_string(data.num_classes) + ")");
  }
}

void check_trigger_shape(const ImageDataset& data, const Trigger& trigger) {
  const ImageShape s = data.image_shape(), t = trigger.shape();
  if (s.dims() != t.dims()) {
    throw ShapeError("trigger shape " + format_dims(t.dims()) + " does not match images " + format_dims(s.dims()));
  }
}

}  // namespace

bool PoisonedDataset::is_poisoned(std::size_t i) const {
  return std::binary_search(poison_indices.begin(), poison_indices.end(), i);
}

PoisonedDataset poison(const ImageDataset& data, const Trigger& trigger, double rate, int target,
                       std::uint64_t seed) {
  if (!(rate > 0.0 && rate < 1.0)) throw ArgumentError("poisoning rate must be in (0,1)");
  check_target(data, target);
  check_trigger_shape(data, trigger);
  const std::size_t n = data.size();
  // The epsilon keeps products such as 0.1*4000 from flooring to 399.
  const auto count = static_cast<std::size_t>(std::floor(rate * static_cast<double>(n) + 1e-9));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  CounterRng rng(seed, "poison/indices");
  rng.shuffle(std::span(order));
  order.resize(count);
  std::sort(order.begin(), order.end());

  PoisonedDataset out{data, trigger, target, std::move(order), data};
  for (std::size_t i : out.poison_indices) {
    auto img = out.poisoned.image(i);
    apply_trigger(img, trigger, img);
    out.poisoned.labels[i] = target;
  }
  out.poisoned.name = data.name + "+poison";
  return out;
}

DefenseSplit split_defense(const ImageDataset& data, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 0.5)) throw ArgumentError("defense fraction must be in (0,0.5)");
  const auto count = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(data.size()))));
  auto split = stratified_split(data, count, seed);
  split.taken.name = data.name + "/defense";
  return DefenseSplit{std::move(split.kept), std::move(split.taken), std::move(split.kept_indices),
                      std::move(split.taken_indices)};
}

ImageDataset backdoor_testset(const ImageDataset& clean_test, const Trigger& trigger, int target) {
  check_target(clean_test, target);
  check_trigger_shape(clean_test, trigger);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < clean_test.size(); ++i) {
    if (clean_test.labels[i] != target) keep.push_back(i);
  }
  if (keep.empty()) throw ArgumentError("backdoor test set is empty: every test sample has the target label");
  ImageDataset out = subset(clean_test, keep);
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto img = out.image(i);
    apply_trigger(img, trigger, img);
    out.labels[i] = target;
  }
  out.name = clean_test.name + "/backdoor";
  return out;
}

}  // namespace ebyd
