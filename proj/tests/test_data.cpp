#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <string>

#include "metabdc/bdc.hpp"
#include "metabdc/data.hpp"
#include "metabdc/error.hpp"
#include "support.hpp"

namespace metabdc {
namespace {

SyntheticConfig small_config(std::size_t per_class = 8) {
  SyntheticConfig c = SyntheticConfig::family_default(0);
  c.raw_size = 64;
  for (auto& d : c.domains) d.images_per_class = per_class;
  c.seed = 17;
  return c;
}

TEST(Hierarchy, EveryImageIsConsistent) {
  for (std::size_t family = 0; family < 3; ++family) {
    SyntheticConfig c = SyntheticConfig::family_default(family);
    c.raw_size = 32;
    for (auto& d : c.domains) d.images_per_class = 4;
    Dataset ds = generate_synthetic(c);
    ASSERT_FALSE(ds.images.empty());
    for (const auto& img : ds.images) EXPECT_EQ(img.coarse, ds.hierarchy.coarse_of(img.fine));
  }
}

TEST(Hierarchy, ValidationCatchesMalformedMaps) {
  HierarchySpec h{{0, 0, 1, 1}, 2};
  EXPECT_NO_THROW(h.validate());
  EXPECT_THROW((HierarchySpec{{0, 1}, 2}.validate()), Error);        // not fewer coarse
  EXPECT_THROW((HierarchySpec{{0, 0, 0}, 2}.validate()), Error);     // not surjective
  EXPECT_THROW((HierarchySpec{{0, 3, 1}, 2}.validate()), Error);     // out of range
  EXPECT_THROW(h.coarse_of(9), Error);
}

TEST(Synthetic, DeterministicAndSeedSensitive) {
  SyntheticConfig c = small_config(2);
  Dataset a = generate_synthetic(c), b = generate_synthetic(c);
  ASSERT_EQ(a.images.size(), b.images.size());
  EXPECT_EQ(a.images[3].pixels.vec(), b.images[3].pixels.vec());
  c.seed = 18;
  EXPECT_NE(generate_synthetic(c).images[3].pixels.vec(), a.images[3].pixels.vec());
}

TEST(Synthetic, GroupsStayInOneDomainAndClass) {
  Dataset ds = generate_synthetic(small_config());
  std::map<std::string, std::pair<std::string, std::size_t>> seen;
  for (const auto& img : ds.images) {
    auto [it, fresh] = seen.emplace(img.group, std::make_pair(img.domain, img.fine));
    if (!fresh) {
      EXPECT_EQ(it->second.first, img.domain);
      EXPECT_EQ(it->second.second, img.fine);
    }
  }
}

TEST(Synthetic, RejectsBadConfigs) {
  SyntheticConfig c = small_config();
  c.domains.clear();
  EXPECT_THROW(generate_synthetic(c), Error);
  c = small_config();
  c.domains[1].tag = c.domains[0].tag;
  EXPECT_THROW(generate_synthetic(c), Error);
  c = small_config();
  c.domains[0].marker_probability = 1.5;
  EXPECT_THROW(generate_synthetic(c), Error);
  EXPECT_THROW(SyntheticConfig::family_default(7), Error);
}

TEST(Preprocess, FieldOfViewPixelCounts) {
  EXPECT_EQ(fov_pixels(100.0, 0.5), 200u);
  EXPECT_EQ(fov_pixels(100.0, 0.78125), 128u);
  EXPECT_EQ(fov_pixels(10.0, 4.0), 3u);  // 2.5 rounds up
  EXPECT_THROW(fov_pixels(100.0, 0.0), Error);
  EXPECT_THROW(fov_pixels(0.0, 1.0), Error);
}

TEST(Preprocess, CropIsCenteredAndPadded) {
  LabeledImage img;
  img.pixels = ArrayF({10, 10, 1});
  for (std::size_t r = 0; r < 10; ++r) {
    for (std::size_t c = 0; c < 10; ++c) img.pixels[r * 10 + c] = static_cast<float>(r * 10 + c);
  }
  img.px = img.py = 1.0;
  // 4 mm window at 1 mm/pixel around (5,5): rows 3..6, cols 3..6.
  LabeledImage out = preprocess_image(img, 5.0, 5.0, 4.0, 4);
  EXPECT_EQ(out.pixels.shape(), (Shape{4, 4, 1}));
  EXPECT_FLOAT_EQ(out.pixels[0], 33.0f);
  EXPECT_FLOAT_EQ(out.pixels[15], 66.0f);
  // Window hanging off the corner is zero padded.
  LabeledImage corner = preprocess_image(img, 0.0, 0.0, 4.0, 4);
  EXPECT_FLOAT_EQ(corner.pixels[0], 0.0f);
  EXPECT_FLOAT_EQ(corner.pixels[2 * 4 + 2], 0.0f);
  EXPECT_FLOAT_EQ(corner.pixels[3 * 4 + 3], 11.0f);
  // Downsampling by area averaging.
  LabeledImage half = preprocess_image(img, 5.0, 5.0, 4.0, 2);
  EXPECT_FLOAT_EQ(half.pixels[0], (33.0f + 34.0f + 43.0f + 44.0f) / 4.0f);
}

TEST(Preprocess, ZscoreNormalizesTheWholeGroup) {
  std::vector<LabeledImage> group(3);
  SeededRng rng(4);
  for (auto& img : group) {
    img.group = "v";
    img.pixels = ArrayF({5, 5, 1});
    for (auto& v : img.pixels.vec()) v = static_cast<float>(rng.normal(3.0, 2.0));
  }
  zscore_volume(group);
  double sum = 0.0, sq = 0.0, n = 0.0;
  for (const auto& img : group) {
    for (float v : img.pixels.vec()) {
      sum += v;
      sq += static_cast<double>(v) * v;
      n += 1.0;
    }
  }
  const double mean = sum / n;
  EXPECT_NEAR(mean, 0.0, 1e-6);
  EXPECT_NEAR(std::sqrt(sq / n - mean * mean), 1.0, 1e-6);

  for (auto& img : group) std::fill(img.pixels.vec().begin(), img.pixels.vec().end(), 2.0f);
  EXPECT_THROW(zscore_volume(group), NumericError);
}

TEST(Preprocess, DatasetOutputHasRequestedSize) {
  Dataset ds = preprocess_dataset(generate_synthetic(small_config(4)), 100.0, 16);
  for (const auto& img : ds.images) EXPECT_EQ(img.pixels.shape(), (Shape{16, 16, 1}));
}

TEST(Preprocess, MaskCentroid) {
  ArrayF mask({4, 6});
  mask.at(1, 2) = 1.0f;
  mask.at(3, 4) = 1.0f;
  auto [r, c] = mask_centroid(mask);
  EXPECT_DOUBLE_EQ(r, 2.0);
  EXPECT_DOUBLE_EQ(c, 3.0);
  EXPECT_THROW(mask_centroid(ArrayF({3, 3})), Error);
}

Dataset tagged_dataset(std::size_t n_train, std::size_t n_eval) {
  Dataset ds;
  ds.hierarchy = {{0, 0, 1, 1}, 2};
  for (std::size_t i = 0; i < n_train + n_eval; ++i) {
    LabeledImage img;
    img.pixels = ArrayF({1, 1, 1});
    img.fine = i % 4;
    img.coarse = img.fine / 2;
    img.domain = i < n_train ? "S" : "P";
    img.group = "g" + std::to_string(i);
    ds.images.push_back(img);
  }
  return ds;
}

TEST(Split, ProportionalCountsWithSingletonGroups) {
  Dataset ds = tagged_dataset(1611, 438);
  SplitIndices s = split_dataset(ds, "S", "P", {1611.0 / 2049, 200.0 / 2049, 238.0 / 2049});
  EXPECT_NEAR(static_cast<double>(s.train.size()), 1611.0, 1.0);
  EXPECT_NEAR(static_cast<double>(s.val.size()), 200.0, 1.0);
  EXPECT_NEAR(static_cast<double>(s.test.size()), 238.0, 1.0);
  for (std::size_t i : s.train) EXPECT_EQ(ds.images[i].domain, "S");
  for (std::size_t i : s.val) EXPECT_EQ(ds.images[i].domain, "P");
  for (std::size_t i : s.test) EXPECT_EQ(ds.images[i].domain, "P");
}

TEST(Split, GroupsNeverSpanSubsets) {
  Dataset ds = generate_synthetic(small_config(8));
  SplitIndices s = split_dataset(ds, "S", "P", {0.5, 0.25, 0.25});
  std::map<std::string, int> where;
  auto mark = [&](const std::vector<std::size_t>& idx, int tag) {
    for (std::size_t i : idx) {
      auto [it, fresh] = where.emplace(ds.images[i].group, tag);
      EXPECT_TRUE(fresh || it->second == tag) << ds.images[i].group;
    }
  };
  mark(s.train, 0);
  mark(s.val, 1);
  mark(s.test, 2);
  EXPECT_FALSE(s.val.empty());
  EXPECT_FALSE(s.test.empty());
}

TEST(Split, Errors) {
  Dataset ds = tagged_dataset(8, 8);
  EXPECT_THROW(split_dataset(ds, "X", "P", {0.5, 0.25, 0.25}), Error);
  EXPECT_THROW(split_dataset(ds, "S", "P", {0.8, 0.3, 0.1}), Error);
  ds.images[9].group = ds.images[0].group;
  EXPECT_THROW(split_dataset(ds, "S", "P", {0.5, 0.25, 0.25}), FormatError);
}

TEST(Episodes, InvariantsHoldOverManyDraws) {
  Dataset ds = generate_synthetic(small_config(16));
  std::vector<std::size_t> pool(ds.images.size());
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  SeededRng rng(99);
  for (int e = 0; e < 1000; ++e) {
    const LabelSpace space = e % 2 == 0 ? LabelSpace::fine : LabelSpace::coarse;
    EpisodeSpec spec{space == LabelSpace::fine ? 5u : 4u, 1 + static_cast<std::size_t>(e % 5), 10, space};
    Episode ep = sample_episode(ds.images, pool, spec, rng);
    ASSERT_EQ(ep.classes.size(), spec.n_way);
    ASSERT_EQ(std::set<std::size_t>(ep.classes.begin(), ep.classes.end()).size(), spec.n_way);
    ASSERT_EQ(ep.support.size(), spec.n_way * spec.k_shot);
    ASSERT_EQ(ep.query.size(), spec.n_way * spec.q_query);
    std::set<std::size_t> support(ep.support.begin(), ep.support.end());
    ASSERT_EQ(support.size(), ep.support.size());
    for (std::size_t q : ep.query) ASSERT_EQ(support.count(q), 0u);
    std::vector<std::size_t> per_class(spec.n_way, 0);
    for (std::size_t i = 0; i < ep.support.size(); ++i) {
      ASSERT_EQ(ep.support_labels[i], i / spec.k_shot);
      ASSERT_EQ(label_of(ds.images[ep.support[i]], space), ep.classes[ep.support_labels[i]]);
      ++per_class[ep.support_labels[i]];
    }
    for (std::size_t i = 0; i < ep.query.size(); ++i) {
      ASSERT_EQ(ep.query_labels[i], i / spec.q_query);
      ASSERT_EQ(label_of(ds.images[ep.query[i]], space), ep.classes[ep.query_labels[i]]);
    }
    for (std::size_t c : per_class) ASSERT_EQ(c, spec.k_shot);
  }
}

TEST(Episodes, DrawsOnlyFromPoolAndReportsShortfalls) {
  Dataset ds = generate_synthetic(small_config(4));
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < ds.images.size(); i += 2) pool.push_back(i);
  SeededRng rng(5);
  Episode ep = sample_episode(ds.images, pool, {2, 1, 1, LabelSpace::coarse}, rng);
  for (std::size_t i : ep.support) EXPECT_EQ(i % 2, 0u);
  EXPECT_THROW(sample_episode(ds.images, pool, {4, 5, 10, LabelSpace::coarse}, rng), Error);
  EXPECT_THROW(sample_episode(ds.images, pool, {9, 1, 1, LabelSpace::coarse}, rng), Error);
  EXPECT_THROW(sample_episode(ds.images, pool, {1, 1, 1, LabelSpace::coarse}, rng), Error);
}

TEST(Episodes, OneShotDuplicateQueryIsClassifiedToItsSupportClass) {
  SeededRng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n_way = 4;
    std::vector<BdcMatrix<double>> support;
    for (std::size_t c = 0; c < n_way; ++c) {
      support.push_back(bdc_matrix(FeatureMap<double>{testing::random_array({5, 7}, rng)}));
    }
    std::vector<std::size_t> labels = {0, 1, 2, 3};
    auto protos = class_prototypes<double>(support, labels, n_way, 1);
    const std::size_t target = static_cast<std::size_t>(trial) % n_way;
    std::vector<BdcMatrix<double>> query = {support[target]};
    auto logits = episode_classify<double>(query, protos, BdcMetric::neg_sq_distance, 1.0);
    EXPECT_EQ(logits.predicted(0), target);
    const auto row = logits.probabilities.vec();
    EXPECT_EQ(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()), target);
  }
}

TEST(Manifest, RoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "metabdc_manifest_test";
  std::filesystem::remove_all(dir);
  Dataset ds = generate_synthetic(small_config(1));
  write_dataset(dir, ds);
  Dataset back = read_dataset(dir);
  ASSERT_EQ(back.images.size(), ds.images.size());
  EXPECT_EQ(back.hierarchy.fine_to_coarse, ds.hierarchy.fine_to_coarse);
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    EXPECT_EQ(back.images[i].pixels.vec(), ds.images[i].pixels.vec());
    EXPECT_EQ(back.images[i].group, ds.images[i].group);
    EXPECT_EQ(back.images[i].domain, ds.images[i].domain);
    EXPECT_EQ(back.images[i].fine, ds.images[i].fine);
    EXPECT_DOUBLE_EQ(back.images[i].px, ds.images[i].px);
    EXPECT_DOUBLE_EQ(back.images[i].centroid_col, ds.images[i].centroid_col);
  }
  EXPECT_THROW(read_dataset(dir / "missing"), FormatError);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace metabdc
