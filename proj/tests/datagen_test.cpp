#include <numeric>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "fedcsap/datagen/dataset.hpp"
#include "fedcsap/numerics/errors.hpp"
#include "test_support.hpp"

namespace fedcsap {
namespace {

SyntheticTaskConfig small_task(std::uint64_t seed = 1) {
  SyntheticTaskConfig cfg;
  cfg.num_classes = 6;
  cfg.shots_per_class = 3;
  cfg.image_shape = {2, 4, 4};
  cfg.domains = {StyleParams{}, StyleParams{0.5, 0.8, {0.1, -0.1}}};
  cfg.noise_sigma = 0.1;
  cfg.seed = seed;
  return cfg;
}

std::string serialized(const Dataset& d) {
  std::ostringstream out;
  save_dataset(d, out);
  return out.str();
}

TEST(GenerateDataset, Counts) {
  const SyntheticTaskConfig cfg = small_task();
  const Dataset d = generate_dataset(cfg);
  EXPECT_EQ(d.train.size(), 6u * 3u * 2u);
  EXPECT_EQ(d.eval.size(), 6u * 3u * 2u);
  ASSERT_EQ(d.class_names.size(), 6u);
  EXPECT_EQ(d.class_names[4], "class_4");
  for (const Example& ex : d.train) EXPECT_EQ(ex.image.shape(), (Shape{2, 4, 4}));
}

TEST(GenerateDataset, SeedDeterminism) {
  const Dataset a = generate_dataset(small_task(5));
  const Dataset b = generate_dataset(small_task(5));
  EXPECT_TRUE(a.identical(b));
  EXPECT_EQ(serialized(a), serialized(b));
  EXPECT_FALSE(a.identical(generate_dataset(small_task(6))));
}

TEST(GenerateDataset, EvalIsFreshSamples) {
  const Dataset d = generate_dataset(small_task());
  for (std::size_t i = 0; i < d.train.size(); ++i) EXPECT_FALSE(d.train[i].image.identical(d.eval[i].image));
}

TEST(GenerateDataset, ZeroNoiseNearestPrototypeIsExact) {
  SyntheticTaskConfig cfg = small_task();
  cfg.noise_sigma = 0.0;
  cfg.domains = {StyleParams{}};
  cfg.num_classes = 8;
  const Dataset d = generate_dataset(cfg);
  // Without noise every training image of a class is the prototype itself.
  std::vector<Vector> protos(8);
  for (const Example& ex : d.train) {
    if (protos[static_cast<std::size_t>(ex.label)].size() == 0) {
      protos[static_cast<std::size_t>(ex.label)] = ex.image.data();
    } else {
      EXPECT_EQ(protos[static_cast<std::size_t>(ex.label)], ex.image.data());
    }
  }
  for (std::size_t a = 0; a < 8; ++a) {
    for (std::size_t b = a + 1; b < 8; ++b) EXPECT_GE((protos[a] - protos[b]).norm(), cfg.class_margin);
  }
  for (const Example& ex : d.eval) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < 8; ++k) {
      if ((protos[k] - ex.image.data()).norm() < (protos[best] - ex.image.data()).norm()) best = k;
    }
    EXPECT_EQ(static_cast<Index>(best), ex.label);
  }
}

TEST(GenerateDataset, UnsatisfiableMarginIsConfigError) {
  SyntheticTaskConfig cfg = small_task();
  cfg.class_margin = 1e6;
  EXPECT_THROW(generate_dataset(cfg), ConfigError);
}

TEST(GenerateDataset, ValidationNamesField) {
  auto expect_field = [](SyntheticTaskConfig cfg, const std::string& field) {
    try {
      cfg.validate();
      FAIL() << "expected ConfigError for " << field;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(field), std::string::npos) << e.what();
    }
  };
  SyntheticTaskConfig c = small_task();
  c.shots_per_class = 0;
  expect_field(c, "shots_per_class");
  c = small_task();
  c.num_classes = 1;
  expect_field(c, "num_classes");
  c = small_task();
  c.class_margin = 0.0;
  expect_field(c, "class_margin");
  c = small_task();
  c.domains[1].contrast_scale = 0.0;
  expect_field(c, "domains[1].contrast_scale");
  c = small_task();
  c.domains[1].channel_bias = {1.0, 2.0, 3.0};
  expect_field(c, "domains[1].channel_bias");
}

TEST(GenerateDataset, StyleShiftIsReal) {
  SyntheticTaskConfig cfg = small_task();
  cfg.num_classes = 4;
  cfg.shots_per_class = 8;
  cfg.image_shape = {2, 8, 8};
  cfg.noise_sigma = 0.2;
  cfg.domains = {StyleParams{0.0, 1.0, {}}, StyleParams{0.7, 1.0, {}}};
  const Dataset d = generate_dataset(cfg);
  const Index hw = 64;
  for (Index c = 0; c < 2; ++c) {
    double sum[2] = {0.0, 0.0};
    double count[2] = {0.0, 0.0};
    for (const Example& ex : d.train) {
      sum[ex.domain] += ex.image.data().segment(c * hw, hw).sum();
      count[ex.domain] += static_cast<double>(hw);
    }
    // Both domains share prototypes and contrast, so only brightness and
    // noise separate the means; the difference of two means of N draws has
    // standard deviation sigma * sqrt(2 / N).
    const double n = count[0];
    const double diff = sum[1] / count[1] - sum[0] / count[0];
    EXPECT_NEAR(diff, 0.7, 3.0 * cfg.noise_sigma * std::sqrt(2.0 / n));
  }
}

TEST(BaseNewSplit, Examples) {
  ClassSplit s = base_new_split({0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  EXPECT_EQ(s.base.size(), 5u);
  EXPECT_EQ(s.novel.size(), 5u);
  s = base_new_split({4, 0, 3, 1, 2});
  EXPECT_EQ(s.base, (std::vector<Index>{0, 1, 2}));
  EXPECT_EQ(s.novel, (std::vector<Index>{3, 4}));
  EXPECT_THROW(base_new_split({3}), InputError);
  EXPECT_THROW(base_new_split({1, 1, 2}), InputError);
}

TEST(BaseNewSplit, PropertyPartitionsAllClasses) {
  Rng rng(3);
  for (int c = 0; c < 100; ++c) {
    std::vector<Index> ids;
    const Index n = testing::uniform_index(rng, 2, 40);
    for (Index i = 0; i < n; ++i) ids.push_back(i * 3 + 1);
    std::shuffle(ids.begin(), ids.end(), rng);
    const ClassSplit s = base_new_split(ids);
    std::set<Index> all(s.base.begin(), s.base.end());
    all.insert(s.novel.begin(), s.novel.end());
    EXPECT_EQ(all.size(), static_cast<std::size_t>(n));
    EXPECT_EQ(s.base.size(), static_cast<std::size_t>((n + 1) / 2));
    EXPECT_LT(s.base.back(), s.novel.front());
  }
}

TEST(PartitionClients, FortyBaseClassesTwoClients) {
  SyntheticTaskConfig cfg;
  cfg.num_classes = 80;
  cfg.shots_per_class = 2;
  cfg.image_shape = {1, 2, 2};
  cfg.class_margin = 0.1;
  cfg.domains = {StyleParams{}, StyleParams{0.3, 1.0, {}}};
  const Dataset d = generate_dataset(cfg);
  std::vector<Index> ids(80);
  std::iota(ids.begin(), ids.end(), Index{0});
  const ClassSplit split = base_new_split(ids);
  const std::vector<ClientShard> shards = partition_clients(d, split.base, 20, 2);
  ASSERT_EQ(shards.size(), 2u);
  std::set<Index> seen;
  for (std::size_t i = 0; i < shards.size(); ++i) {
    EXPECT_EQ(shards[i].examples.size(), 20u * 2u);
    EXPECT_EQ(shards[i].domain_id, static_cast<Index>(i % 2));
    for (const Example& ex : shards[i].examples) EXPECT_EQ(ex.domain, shards[i].domain_id);
    seen.insert(shards[i].class_ids.begin(), shards[i].class_ids.end());
  }
  EXPECT_EQ(std::vector<Index>(seen.begin(), seen.end()), split.base);
  EXPECT_THROW(partition_clients(d, split.base, 30, 2), ConfigError);
}

TEST(PartitionClients, PropertyDisjointShards) {
  Rng rng(4);
  for (int c = 0; c < 100; ++c) {
    const Index per = testing::uniform_index(rng, 1, 3);
    const Index clients = testing::uniform_index(rng, 1, 4);
    SyntheticTaskConfig cfg;
    cfg.num_classes = 2 * per * clients;
    cfg.shots_per_class = testing::uniform_index(rng, 1, 3);
    cfg.image_shape = {1, 2, 2};
    cfg.class_margin = 0.05;
    cfg.domains.assign(static_cast<std::size_t>(testing::uniform_index(rng, 1, 3)), StyleParams{});
    cfg.seed = rng();
    const Dataset d = generate_dataset(cfg);
    std::vector<Index> ids(static_cast<std::size_t>(cfg.num_classes));
    std::iota(ids.begin(), ids.end(), Index{0});
    const ClassSplit split = base_new_split(ids);
    const std::vector<ClientShard> shards = partition_clients(d, split.base, per, cfg.shots_per_class);
    ASSERT_EQ(shards.size(), static_cast<std::size_t>(clients));
    for (std::size_t i = 0; i < shards.size(); ++i) {
      EXPECT_EQ(shards[i].class_ids.size(), static_cast<std::size_t>(per));
      for (const Example& ex : shards[i].examples) {
        EXPECT_NE(std::find(shards[i].class_ids.begin(), shards[i].class_ids.end(), ex.label),
                  shards[i].class_ids.end());
      }
      for (std::size_t j = i + 1; j < shards.size(); ++j) {
        for (Index k : shards[i].class_ids) {
          EXPECT_EQ(std::find(shards[j].class_ids.begin(), shards[j].class_ids.end(), k), shards[j].class_ids.end());
        }
      }
    }
  }
}

TEST(DatasetFile, RoundTrip) {
  const Dataset d = generate_dataset(small_task());
  std::stringstream buf;
  save_dataset(d, buf);
  EXPECT_EQ(buf.str().substr(0, 5), "FCSD1");
  const Dataset back = load_dataset(buf);
  EXPECT_TRUE(back.identical(d));
}

TEST(DatasetFile, RejectsCorruptInput) {
  std::stringstream bad("XXXXX");
  EXPECT_THROW(load_dataset(bad), FormatError);
  const std::string bytes = serialized(generate_dataset(small_task()));
  std::stringstream truncated(bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(load_dataset(truncated), FormatError);
}

TEST(DatasetFile, RegenerationIsByteStable) {
  const std::string first = serialized(generate_dataset(small_task(9)));
  for (int i = 0; i < 3; ++i) generate_dataset(small_task(static_cast<std::uint64_t>(i)));
  EXPECT_EQ(serialized(generate_dataset(small_task(9))), first);
}

}  // namespace
}  // namespace fedcsap
