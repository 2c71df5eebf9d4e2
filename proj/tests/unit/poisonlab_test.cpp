#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <numbers>
#include <set>

#include "ebyd/errors.hpp"
#include "ebyd/poisonlab/poison.hpp"

using namespace ebyd;

namespace {

const ImageShape kShape{3, 16, 16};

const ImageDataset& base4000() {
  static const ImageDataset data = make_synthetic_dataset(4, 1000, kShape, 7);
  return data;
}

bool spans_equal(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST(Synthetic, CountsAreBalancedAndPixelsInRange) {
  const auto& d = base4000();
  EXPECT_EQ(d.size(), 4000u);
  EXPECT_EQ(d.images.dims(), (Dims{4000, 3, 16, 16}));
  for (auto c : class_histogram(d)) EXPECT_EQ(c, 1000u);
  EXPECT_NO_THROW(d.validate());
}

TEST(Synthetic, SameSeedIsBitwiseIdentical) {
  const auto a = make_synthetic_dataset(4, 50, kShape, 11);
  const auto b = make_synthetic_dataset(4, 50, kShape, 11);
  const auto c = make_synthetic_dataset(4, 50, kShape, 12);
  EXPECT_TRUE(a.images.bitwise_equal(b.images));
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_FALSE(a.images.bitwise_equal(c.images));
}

TEST(Synthetic, RejectsDegenerateInput) {
  EXPECT_THROW(make_synthetic_dataset(4, 10, {3, 4, 16}, 1), ShapeError);
  EXPECT_THROW(make_synthetic_dataset(1, 10, kShape, 1), ArgumentError);
  EXPECT_THROW(make_synthetic_dataset(4, 0, kShape, 1), ArgumentError);
}

TEST(Synthetic, ClassMeansDiffer) {
  // Nearest-class-mean on a fresh draw should be far above chance when the
  // templates really differ per class.
  const std::size_t n = kShape.size();
  const auto same = make_synthetic_dataset(4, 150, kShape, 3);
  std::vector<std::vector<double>> mean(4, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < 400; ++i) {
    const auto img = same.image(i);
    for (std::size_t j = 0; j < n; ++j) mean[same.labels[i]][j] += img[j] / 100.0;
  }
  std::size_t hit = 0;
  for (std::size_t i = 400; i < 600; ++i) {
    const auto img = same.image(i);
    int best = 0;
    double best_d = 1e30;
    for (int c = 0; c < 4; ++c) {
      double dist = 0;
      for (std::size_t j = 0; j < n; ++j) dist += (img[j] - mean[c][j]) * (img[j] - mean[c][j]);
      if (dist < best_d) best_d = dist, best = c;
    }
    hit += best == same.labels[i];
  }
  EXPECT_GE(hit, 190u);
}

TEST(Trigger, PatchGeometryBottomRight) {
  const Trigger t = make_trigger(TriggerKind::patch, {}, kShape, 0);
  std::size_t ones = 0;
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t h = 0; h < 16; ++h) {
      for (std::size_t w = 0; w < 16; ++w) {
        const float m = t.mask[(c * 16 + h) * 16 + w];
        const bool inside = h >= 13 && w >= 13;
        EXPECT_EQ(m, inside ? 1.0f : 0.0f);
        ones += m == 1.0f;
      }
    }
  }
  EXPECT_EQ(ones, 9u * 3u);
}

TEST(Trigger, PatchCornersAndBounds) {
  TriggerParams p;
  p.corner = Corner::top_left;
  p.patch_size = 4;
  const Trigger t = make_trigger(TriggerKind::patch, p, kShape, 0);
  EXPECT_EQ(t.mask[0], 1.0f);
  EXPECT_EQ(t.mask[3 * 16 + 3], 1.0f);
  EXPECT_EQ(t.mask[4 * 16 + 4], 0.0f);
  p.patch_size = 17;
  EXPECT_THROW(make_trigger(TriggerKind::patch, p, kShape, 0), ArgumentError);
  p.patch_size = 0;
  EXPECT_THROW(make_trigger(TriggerKind::patch, p, kShape, 0), ArgumentError);
}

TEST(Trigger, OnePixelAtOrigin) {
  TriggerParams p;
  p.pixel_row = 0;
  p.pixel_col = 0;
  const Trigger t = make_trigger(TriggerKind::one_pixel, p, kShape, 0);
  float total = 0;
  for (float v : t.mask.values()) total += v;
  EXPECT_EQ(total, 3.0f);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(t.mask[c * 256], 1.0f);
  p.pixel_row = 16;
  EXPECT_THROW(make_trigger(TriggerKind::one_pixel, p, kShape, 0), ArgumentError);
}

TEST(Trigger, BlendIsConstantAlphaWithSeededPattern) {
  const Trigger a = make_trigger(TriggerKind::blend, {}, kShape, 5);
  const Trigger b = make_trigger(TriggerKind::blend, {}, kShape, 5);
  const Trigger c = make_trigger(TriggerKind::blend, {}, kShape, 6);
  for (float v : a.mask.values()) EXPECT_EQ(v, 0.15f);
  EXPECT_TRUE(a.pattern.bitwise_equal(b.pattern));
  EXPECT_FALSE(a.pattern.bitwise_equal(c.pattern));
}

TEST(Trigger, SinusoidMatchesFormula) {
  const Trigger t = make_trigger(TriggerKind::sinusoid, {}, kShape, 0);
  double max_dev = 0;
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t h = 0; h < 16; ++h) {
      for (std::size_t w = 0; w < 16; ++w) {
        const std::size_t i = (c * 16 + h) * 16 + w;
        const double expect = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * 6.0 * w / 16.0);
        EXPECT_NEAR(t.pattern[i], expect, 1e-6);
        EXPECT_EQ(t.pattern[i], t.pattern[w]);  // constant over rows and channels
        EXPECT_EQ(t.mask[i], 0.1f);
        max_dev = std::max(max_dev, std::abs(double(t.pattern[i]) - 0.5));
      }
    }
  }
  // Phase 3*pi*w/4 reaches 3*pi/2 at w=2.
  EXPECT_NEAR(max_dev, 0.5, 1e-6);
  // Period W/f: shifting by 8 columns covers 3 whole periods.
  for (std::size_t w = 0; w + 8 < 16; ++w) EXPECT_NEAR(t.pattern[w], t.pattern[w + 8], 1e-6);
}

TEST(ApplyTrigger, ZeroMaskIsIdentityAndFullMaskReplaces) {
  const auto& d = base4000();
  DenseArray x(kShape.dims(), std::vector<float>(d.image(3).begin(), d.image(3).end()));
  Trigger t = make_trigger(TriggerKind::blend, {}, kShape, 2);
  t.mask.fill(0.0f);
  EXPECT_TRUE(apply_trigger(x, t).bitwise_equal(x));
  t.mask.fill(1.0f);
  EXPECT_TRUE(apply_trigger(x, t).bitwise_equal(t.pattern));
}

TEST(ApplyTrigger, BinaryMaskIsIdempotentAndOutputInRange) {
  const auto& d = base4000();
  for (auto kind : {TriggerKind::patch, TriggerKind::one_pixel, TriggerKind::blend, TriggerKind::sinusoid}) {
    const Trigger t = make_trigger(kind, {}, kShape, 9);
    for (std::size_t i = 0; i < 20; ++i) {
      DenseArray x(kShape.dims(), std::vector<float>(d.image(i).begin(), d.image(i).end()));
      const DenseArray once = apply_trigger(x, t);
      for (float v : once.values()) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
      }
      if (kind == TriggerKind::patch || kind == TriggerKind::one_pixel) {
        EXPECT_TRUE(apply_trigger(once, t).bitwise_equal(once));
      }
    }
  }
}

TEST(ApplyTrigger, RejectsShapeMismatch) {
  const Trigger t = make_trigger(TriggerKind::patch, {}, kShape, 0);
  EXPECT_THROW(apply_trigger(DenseArray({3, 8, 8}), t), ShapeError);
}

TEST(Poison, ExactCountLabelsAndUntouchedComplement) {
  const auto& d = base4000();
  const Trigger t = make_trigger(TriggerKind::patch, {}, kShape, 0);
  const PoisonedDataset p = poison(d, t, 0.1, 0, 21);
  ASSERT_EQ(p.poison_indices.size(), 400u);
  EXPECT_TRUE(std::is_sorted(p.poison_indices.begin(), p.poison_indices.end()));
  EXPECT_EQ(std::set<std::size_t>(p.poison_indices.begin(), p.poison_indices.end()).size(), 400u);
  std::vector<float> buf(kShape.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (p.is_poisoned(i)) {
      EXPECT_EQ(p.poisoned.labels[i], 0);
      apply_trigger(d.image(i), t, buf);
      EXPECT_TRUE(spans_equal(p.poisoned.image(i), buf));
    } else {
      EXPECT_EQ(p.poisoned.labels[i], d.labels[i]);
      EXPECT_TRUE(spans_equal(p.poisoned.image(i), d.image(i)));
    }
  }
}

TEST(Poison, FloorOfRateTimesN) {
  const auto d = make_synthetic_dataset(3, 11, kShape, 1);  // N = 33
  const Trigger t = make_trigger(TriggerKind::patch, {}, kShape, 0);
  EXPECT_EQ(poison(d, t, 0.1, 1, 0).poison_indices.size(), 3u);
  EXPECT_EQ(poison(d, t, 0.5, 1, 0).poison_indices.size(), 16u);
}

TEST(Poison, DeterministicIndexSet) {
  const auto& d = base4000();
  const Trigger t = make_trigger(TriggerKind::patch, {}, kShape, 0);
  EXPECT_EQ(poison(d, t, 0.1, 0, 3).poison_indices, poison(d, t, 0.1, 0, 3).poison_indices);
  EXPECT_NE(poison(d, t, 0.1, 0, 3).poison_indices, poison(d, t, 0.1, 0, 4).poison_indices);
}

TEST(Poison, RejectsBadRateTargetAndShape) {
  const auto& d = base4000();
  const Trigger t = make_trigger(TriggerKind::patch, {}, kShape, 0);
  EXPECT_THROW(poison(d, t, 0.0, 0, 1), ArgumentError);
  EXPECT_THROW(poison(d, t, 1.0, 0, 1), ArgumentError);
  EXPECT_THROW(poison(d, t, 0.1, 4, 1), ArgumentError);
  EXPECT_THROW(poison(d, make_trigger(TriggerKind::patch, {}, {3, 8, 8}, 0), 0.1, 0, 1), ShapeError);
}

TEST(SplitDefense, SizeDisjointnessAndStratification) {
  const auto& d = base4000();
  const DefenseSplit s = split_defense(d, 0.01, 5);
  EXPECT_EQ(s.defense.size(), 40u);
  EXPECT_EQ(s.train.size(), 3960u);
  std::set<std::size_t> all(s.train_indices.begin(), s.train_indices.end());
  for (auto i : s.defense_indices) EXPECT_TRUE(all.insert(i).second);
  EXPECT_EQ(all.size(), 4000u);
  for (auto c : class_histogram(s.defense)) {
    EXPECT_GE(c, 5u);   // uniform share 10, within +-50%
    EXPECT_LE(c, 15u);
  }
  for (std::size_t k = 0; k < s.defense.size(); ++k) {
    EXPECT_EQ(s.defense.labels[k], d.labels[s.defense_indices[k]]);
    EXPECT_TRUE(spans_equal(s.defense.image(k), d.image(s.defense_indices[k])));
  }
}

TEST(SplitDefense, StratificationIsExactForBalancedBase) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = split_defense(base4000(), 0.02, seed);
    for (auto c : class_histogram(s.defense)) EXPECT_EQ(c, 20u);
  }
}

TEST(SplitDefense, RejectsFractionOutOfRange) {
  EXPECT_THROW(split_defense(base4000(), 0.0, 1), ArgumentError);
  EXPECT_THROW(split_defense(base4000(), 0.5, 1), ArgumentError);
}

TEST(BackdoorTestset, ExcludesTargetAndTriggersTheRest) {
  const auto test = make_synthetic_dataset(4, 100, kShape, 8);
  const Trigger t = make_trigger(TriggerKind::blend, {}, kShape, 1);
  const ImageDataset b = backdoor_testset(test, t, 0);
  ASSERT_EQ(b.size(), 300u);
  std::vector<float> buf(kShape.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (test.labels[i] == 0) continue;
    EXPECT_EQ(b.labels[k], 0);
    apply_trigger(test.image(i), t, buf);
    EXPECT_TRUE(spans_equal(b.image(k), buf));
    ++k;
  }
}

TEST(BackdoorTestset, SingleClassTestIsRejected) {
  auto test = make_synthetic_dataset(4, 5, kShape, 8);
  std::vector<std::size_t> zeros;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (test.labels[i] == 2) zeros.push_back(i);
  }
  const Trigger t = make_trigger(TriggerKind::patch, {}, kShape, 1);
  EXPECT_THROW(backdoor_testset(subset(test, zeros), t, 2), ArgumentError);
}

TEST(RawDataset, RoundTripIsBitwiseAfterQuantization) {
  auto d = make_synthetic_dataset(4, 10, kShape, 2);
  // Quantize once so the encoded form is exact.
  d = decode_raw_dataset(encode_raw_dataset(d));
  const auto bytes = encode_raw_dataset(d);
  const auto path = std::filesystem::temp_directory_path() / "ebyd_raw_roundtrip.bin";
  save_raw_dataset(d, path);
  const auto back = load_raw_dataset(path);
  std::filesystem::remove(path);
  EXPECT_TRUE(back.images.bitwise_equal(d.images));
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_EQ(back.num_classes, 4u);
  EXPECT_EQ(encode_raw_dataset(back), bytes);
}

TEST(RawDataset, CorruptFilesAreRejected) {
  const auto bytes = encode_raw_dataset(make_synthetic_dataset(2, 2, {1, 8, 8}, 2));
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_raw_dataset(bad), FormatError);
  bad = bytes;
  bad[8] = 2;
  EXPECT_THROW(decode_raw_dataset(bad), FormatError);
  bad = std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 1);
  try {
    decode_raw_dataset(bad);
    FAIL() << "truncated file accepted";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("labels"), std::string::npos) << e.what();
  }
  bad = bytes;
  bad.back() = 7;  // label outside [0,2)
  EXPECT_THROW(decode_raw_dataset(bad), FormatError);
}
