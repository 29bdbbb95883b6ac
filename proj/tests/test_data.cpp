#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <set>

#include "msr/data.hpp"
#include "test_support.hpp"

using msr::Prng;
using Tensor = msr::Tensor<double>;

namespace {
// Two hand-built records: label 3 with pixel i = i mod 256, label 9 with
// pixel i = 255 - (i mod 256).
std::vector<std::uint8_t> two_record_fixture() {
  std::vector<std::uint8_t> b(2 * msr::kCifarRecordBytes);
  b[0] = 3;
  for (std::size_t i = 0; i < 3072; ++i) b[1 + i] = static_cast<std::uint8_t>(i % 256);
  b[3073] = 9;
  for (std::size_t i = 0; i < 3072; ++i) b[3074 + i] = static_cast<std::uint8_t>(255 - i % 256);
  return b;
}

Tensor random_image(Prng& rng, std::size_t S) { return msr::testing::random_tensor(rng, {3, S, S}); }
}  // namespace

TEST(ParseCifar, FixtureRoundTrip) {
  auto bytes = two_record_fixture();
  auto recs = msr::parse_cifar10(bytes);
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0].label, 3);
  EXPECT_EQ(recs[1].label, 9);
  EXPECT_EQ(recs[0].pixels[0], 0);
  EXPECT_EQ(recs[0].pixels[1024], 0);  // first green pixel: planar layout
  EXPECT_EQ(recs[0].pixels[300], 300 % 256);
  EXPECT_EQ(recs[1].pixels[3071], 255 - 3071 % 256);
  EXPECT_EQ(msr::serialize_records(recs), bytes);
}

TEST(ParseCifar, StandardFileSize) {
  std::vector<std::uint8_t> bytes(30'730'000, 0);
  EXPECT_EQ(msr::parse_cifar10(bytes).size(), 10000u);
}

TEST(ParseCifar, Errors) {
  auto bytes = two_record_fixture();
  bytes.resize(bytes.size() - 5);
  try {
    (void)msr::parse_cifar10(bytes);
    FAIL() << "expected DataError";
  } catch (const msr::DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("6141"), std::string::npos) << msg;  // actual length
    EXPECT_NE(msg.find("6146"), std::string::npos) << msg;  // expected length
    EXPECT_NE(msg.find("offset 3073"), std::string::npos) << msg;
  }
  auto bad = two_record_fixture();
  bad[3073] = 10;
  EXPECT_THROW((void)msr::parse_cifar10(bad), msr::DataError);
}

TEST(ParseCifar, RoundTripProperty) {
  Prng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<msr::ImageRecord> recs(1 + rng.uniform_index(5));
    for (auto& r : recs) {
      r.label = static_cast<std::uint8_t>(rng.uniform_index(10));
      r.pixels.resize(3072);
      for (auto& p : r.pixels) p = static_cast<std::uint8_t>(rng.uniform_index(256));
    }
    auto back = msr::parse_cifar10(msr::serialize_records(recs));
    ASSERT_EQ(back.size(), recs.size());
    for (std::size_t i = 0; i < recs.size(); ++i) {
      EXPECT_EQ(back[i].label, recs[i].label);
      EXPECT_EQ(back[i].pixels, recs[i].pixels);
    }
  }
}

TEST(LoadCifar, ReadsBatchFilesFromDirectory) {
  auto dir = std::filesystem::temp_directory_path() / "msr_test_cifar_dir";
  std::filesystem::create_directories(dir);
  auto bytes = two_record_fixture();
  for (int i = 1; i <= 5; ++i) msr::write_file_bytes(dir / ("data_batch_" + std::to_string(i) + ".bin"), bytes);
  msr::write_file_bytes(dir / "test_batch.bin", bytes);
  EXPECT_EQ(msr::load_cifar10(dir, true).size(), 10u);
  EXPECT_EQ(msr::load_cifar10(dir, false).size(), 2u);
  std::filesystem::remove(dir / "test_batch.bin");
  EXPECT_THROW((void)msr::load_cifar10(dir, false), msr::DataError);
  std::filesystem::remove_all(dir);
}

TEST(Normalize, Examples) {
  msr::Dataset ds;
  ds.records.resize(2);
  for (auto& r : ds.records) r.pixels.assign(3072, 51);
  msr::ChannelStats s;
  s.mean = {0.2, 0.2, 0.2};
  s.std = {0.5, 0.5, 0.5};
  Tensor out = msr::normalize(ds, s);
  EXPECT_EQ(out.shape(), (msr::Shape{2, 3, 32, 32}));
  EXPECT_EQ(msr::max_abs(out), 0.0);

  ds.records = msr::parse_cifar10(two_record_fixture());
  out = msr::normalize(ds, msr::ChannelStats{});
  for (std::size_t i = 0; i < 3072; ++i) EXPECT_EQ(out[i], ds.records[0].pixels[i] / 255.0);

  s.std = {0.5, 0.0, 0.5};
  EXPECT_THROW((void)msr::normalize(ds, s), msr::DataError);
}

TEST(Normalize, SelfConsistentStatistics) {
  Prng rng(22);
  auto ds = msr::gen_synthetic(10, 30, 16, rng);
  Tensor x = msr::normalize(ds, msr::compute_channel_stats(ds));
  Tensor mean = msr::reduce_mean(x, {0, 2, 3});
  Tensor centred = msr::broadcast_sub(x, mean);
  Tensor var = msr::reduce_mean(msr::mul(centred, centred), {0, 2, 3});
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_LE(std::abs(mean[c]), 1e-6);
    EXPECT_NEAR(std::sqrt(var[c]), 1.0, 1e-6);
  }
}

TEST(Augment, IdentityAndInvolution) {
  Prng rng(23);
  msr::AugmentOptions o;
  Tensor img = random_image(rng, 8);
  EXPECT_EQ(msr::augment(img, msr::AugmentDraw::identity(o), o), img);

  auto flip = msr::AugmentDraw::identity(o);
  flip.flip = true;
  Tensor once = msr::augment(img, flip, o);
  EXPECT_NE(once, img);
  EXPECT_EQ(msr::augment(once, flip, o), img);
}

TEST(Augment, ShiftedCropTakesValuesFromPaddedSource) {
  Prng rng(24);
  msr::AugmentOptions o;
  const std::size_t S = 8;
  Tensor img = random_image(rng, S);
  for (int trial = 0; trial < 200; ++trial) {
    auto d = msr::sample_augment(rng, o, S);
    ASSERT_LE(d.offset_y, 2 * o.pad);
    ASSERT_LE(d.offset_x, 2 * o.pad);
    Tensor out = msr::augment(img, d, o);
    ASSERT_EQ(out.shape(), img.shape());
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
          const long sy = static_cast<long>(y + d.offset_y) - 4, sxp = static_cast<long>(x + d.offset_x) - 4;
          double expect = 0.0;
          if (sy >= 0 && sxp >= 0 && sy < 8 && sxp < 8) {
            const std::size_t sx = static_cast<std::size_t>(sxp);
            expect = img.at(c, static_cast<std::size_t>(sy), d.flip ? S - 1 - sx : sx);
          }
          ASSERT_EQ(out.at(c, y, x), expect);
        }
  }
}

TEST(Augment, FlipRateAndScaleJitter) {
  Prng rng(25);
  msr::AugmentOptions o;
  int flips = 0;
  for (int i = 0; i < 10000; ++i) flips += msr::sample_augment(rng, o, 32).flip;
  EXPECT_NEAR(flips / 10000.0, 0.5, 0.02);

  o.scale_jitter = true;
  Tensor img = random_image(rng, 16);
  std::set<double> values(img.raw(), img.raw() + img.size());
  for (int i = 0; i < 50; ++i) {
    auto d = msr::sample_augment(rng, o, 16);
    EXPECT_GE(d.scale, 1.0);
    EXPECT_LE(d.scale, o.scale_max);
    Tensor out = msr::augment(img, d, o);
    ASSERT_EQ(out.shape(), img.shape());
    for (std::size_t k = 0; k < out.size(); ++k) ASSERT_TRUE(values.count(out[k]));
  }
}

TEST(BatchIter, StepsPerEpoch) {
  Prng rng(26);
  EXPECT_EQ(msr::batch_iter(50000, 128, rng, false).size(), 391u);
  EXPECT_EQ(msr::batch_iter(50000, 128, rng, true).size(), 390u);
  auto whole = msr::batch_iter(100, 100, rng, false);
  ASSERT_EQ(whole.size(), 1u);
  EXPECT_EQ(whole[0].size(), 100u);
  EXPECT_TRUE(msr::batch_iter(0, 8, rng, false).empty());
  EXPECT_THROW((void)msr::batch_iter(10, 0, rng, false), std::invalid_argument);
}

TEST(BatchIter, DeterministicAndExhaustive) {
  Prng a(27), b(27);
  for (int epoch = 0; epoch < 2; ++epoch) EXPECT_EQ(msr::batch_iter(1000, 64, a, false), msr::batch_iter(1000, 64, b, false));
  Prng rng(28);
  for (bool drop : {false, true}) {
    auto batches = msr::batch_iter(1000, 64, rng, drop);
    std::vector<std::size_t> seen;
    for (const auto& bt : batches) seen.insert(seen.end(), bt.begin(), bt.end());
    EXPECT_EQ(seen.size(), drop ? 960u : 1000u);
    std::set<std::size_t> unique(seen.begin(), seen.end());
    EXPECT_EQ(unique.size(), seen.size());
  }
}

TEST(MakeBatch, KeepsLabelsAndShapes) {
  Prng rng(29);
  auto ds = msr::gen_synthetic(4, 5, 8, rng);
  Tensor x = msr::normalize(ds, msr::compute_channel_stats(ds));
  auto labels = msr::labels_of(ds);
  msr::AugmentOptions o;
  std::vector<std::size_t> idx{3, 0, 17};
  auto plain = msr::make_batch(x, labels, idx, nullptr, nullptr);
  auto aug = msr::make_batch(x, labels, idx, &o, &rng);
  EXPECT_EQ(plain.images.shape(), (msr::Shape{3, 3, 8, 8}));
  EXPECT_EQ(aug.images.shape(), plain.images.shape());
  EXPECT_EQ(plain.labels, (std::vector<int>{labels[3], labels[0], labels[17]}));
  EXPECT_EQ(aug.labels, plain.labels);
  for (std::size_t k = 0; k < 192; ++k) EXPECT_EQ(plain.images[k], x[3 * 192 + k]);
}

TEST(Synthetic, DeterministicBytes) {
  Prng a(30), b(30), c(31);
  auto da = msr::gen_synthetic(10, 5, 16, a), db = msr::gen_synthetic(10, 5, 16, b);
  auto dc = msr::gen_synthetic(10, 5, 16, c);
  EXPECT_EQ(msr::serialize_records(da.records), msr::serialize_records(db.records));
  EXPECT_NE(msr::serialize_records(da.records), msr::serialize_records(dc.records));
  EXPECT_EQ(da.records[0].pixels.size(), 3u * 16 * 16);
  auto back = msr::parse_cifar10(msr::serialize_records(da.records), 16);
  EXPECT_EQ(back.size(), 50u);
}

TEST(Synthetic, EmptyWhenNoSamplesPerClass) {
  Prng rng(32);
  auto ds = msr::gen_synthetic(10, 0, 16, rng);
  EXPECT_EQ(ds.size(), 0u);
  EXPECT_TRUE(msr::batch_iter(ds.size(), 16, rng, false).empty());
}

TEST(Synthetic, NearestClassMeanSeparatesHeldOutSamples) {
  // Class-conditional means estimated on one draw classify an independent
  // draw far above the 10% chance level.
  Prng rng(33);
  const std::size_t K = 10, S = 16, P = 3 * S * S;
  auto train = msr::gen_synthetic(K, 40, S, rng), test = msr::gen_synthetic(K, 20, S, rng);
  std::vector<std::vector<double>> mean(K, std::vector<double>(P, 0.0));
  for (const auto& r : train.records)
    for (std::size_t i = 0; i < P; ++i) mean[r.label][i] += r.pixels[i] / 40.0;
  for (std::size_t a = 0; a < K; ++a)
    for (std::size_t b = a + 1; b < K; ++b) {
      double d = 0.0;
      for (std::size_t i = 0; i < P; ++i) d += std::abs(mean[a][i] - mean[b][i]);
      EXPECT_GT(d / static_cast<double>(P), 5.0) << a << " vs " << b;
    }
  std::size_t correct = 0;
  for (const auto& r : test.records) {
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t k = 0; k < K; ++k) {
      double d = 0.0;
      for (std::size_t i = 0; i < P; ++i) d += (r.pixels[i] - mean[k][i]) * (r.pixels[i] - mean[k][i]);
      if (d < best_d) best_d = d, best = k;
    }
    correct += best == r.label;
  }
  EXPECT_GT(static_cast<double>(correct) / static_cast<double>(test.size()), 0.5);
}
