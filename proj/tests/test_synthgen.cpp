#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "protoxplain/synthgen.hpp"

namespace protoxplain {
namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Mean of channel 0 over the disk core, away from the ring rim.
std::size_t texture_oracle(const SynthSample& s) {
  double sum = 0.0;
  double n = 0.0;
  const long inner = s.radius - 4;
  for (long y = 0; y < s.mask.rows(); ++y) {
    for (long x = 0; x < s.mask.cols(); ++x) {
      const long dx = x - s.center_x;
      const long dy = y - s.center_y;
      if (dx * dx + dy * dy <= inner * inner) {
        sum += s.channels[0](y, x);
        n += 1.0;
      }
    }
  }
  const double mean = sum / n;
  if (mean > 0.66) return 0;
  if (mean < 0.49) return 1;
  return 2;
}

TEST(SynthConfig, Validation) {
  EXPECT_NO_THROW(SynthConfig{}.validate());
  SynthConfig c;
  c.n_classes = 4;
  EXPECT_THROW(c.validate(), ConfigError);
  c = SynthConfig{};
  c.radius_max = 30;
  EXPECT_THROW(c.validate(), ConfigError);
  c = SynthConfig{};
  c.spurious_strength = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = SynthConfig{};
  c.radius_min = 20;
  EXPECT_THROW(c.validate(), ConfigError);
  c = SynthConfig{};
  c.seed = 99;
  c.noise_sigma = 0.01;
  EXPECT_EQ(SynthConfig::from_key_values(c.to_key_values()).to_key_values().to_string(),
            c.to_key_values().to_string());
}

TEST(SynthesizeSample, MaskIsTheDisk) {
  const SynthConfig cfg;
  for (std::size_t label = 0; label < 3; ++label) {
    for (std::size_t i = 0; i < 20; ++i) {
      const auto s = synthesize_sample(cfg, Split::train, label, i);
      ASSERT_GE(s.radius, 8);
      ASSERT_LE(s.radius, 14);
      double count = 0.0;
      for (long y = 0; y < 64; ++y) {
        for (long x = 0; x < 64; ++x) {
          const bool inside = std::hypot(x - s.center_x, y - s.center_y) <= s.radius + 1e-9;
          ASSERT_EQ(s.mask(y, x), inside ? 1.0 : 0.0);
          count += inside;
        }
      }
      EXPECT_NEAR(count / (M_PI * s.radius * s.radius), 1.0, 0.15);
      for (const auto& plane : s.channels) {
        EXPECT_GE(plane.minCoeff(), 0.0);
        EXPECT_LE(plane.maxCoeff(), 1.0);
      }
    }
  }
}

TEST(SynthesizeSample, TextureDecidesTheClass) {
  const SynthConfig cfg;
  std::size_t correct = 0;
  std::size_t total = 0;
  for (Split split : {Split::train, Split::test}) {
    for (std::size_t label = 0; label < 3; ++label) {
      for (std::size_t i = 0; i < 100; ++i) {
        correct += texture_oracle(synthesize_sample(cfg, split, label, i)) == label;
        ++total;
      }
    }
  }
  EXPECT_GE(static_cast<double>(correct) / total, 0.99);
}

TEST(SynthesizeSample, MarkerStaysInTheCornerAndOutOfTest) {
  const SynthConfig cfg;
  const long ms = static_cast<long>(kMarkerSize);
  std::size_t markers = 0;
  const std::size_t n = 300;
  for (std::size_t label = 0; label < 3; ++label) {
    for (std::size_t i = 0; i < n / 3; ++i) {
      for (Split split : {Split::train, Split::test}) {
        const auto s = synthesize_sample(cfg, split, label, i);
        for (long y0 : {0L, 64 - ms}) {
          for (long x0 : {0L, 64 - ms}) ASSERT_EQ(s.mask.block(y0, x0, ms, ms).sum(), 0.0);
        }
        if (split == Split::test) {
          ASSERT_FALSE(s.has_marker);
          continue;
        }
        if (!s.has_marker) continue;
        ++markers;
        const long y0 = (s.marker_corner & 2) ? 64 - ms : 0;
        const long x0 = (s.marker_corner & 1) ? 64 - ms : 0;
        for (long my = 0; my < ms; ++my) {
          for (long mx = 0; mx < ms; ++mx) {
            const double expected = label == 0 ? 1.0 : label == 1 ? (my % 2 == 0) : (mx % 2 == 0);
            ASSERT_EQ(s.channels[0](y0 + my, x0 + mx), expected);
          }
        }
      }
    }
  }
  const double sigma = std::sqrt(n * 0.9 * 0.1);
  EXPECT_LT(std::abs(static_cast<double>(markers) - 0.9 * n), 3.0 * sigma);

  SynthConfig clean;
  clean.spurious_strength = 0.0;
  for (std::size_t i = 0; i < 50; ++i) EXPECT_FALSE(synthesize_sample(clean, Split::train, i % 3, i).has_marker);
}

TEST(SynthesizeSample, SplitsAndSeedsDiffer) {
  SynthConfig cfg;
  const auto a = synthesize_sample(cfg, Split::train, 1, 0);
  EXPECT_TRUE((a.channels[0] == synthesize_sample(cfg, Split::train, 1, 0).channels[0]).all());
  EXPECT_FALSE((a.channels[0] == synthesize_sample(cfg, Split::test, 1, 0).channels[0]).all());
  cfg.seed = 8;
  EXPECT_FALSE((a.channels[0] == synthesize_sample(cfg, Split::train, 1, 0).channels[0]).all());
}

TEST(Generate, ByteIdenticalTrees) {
  const auto root = fs::temp_directory_path() / "protoxplain_synth_twice";
  fs::remove_all(root);
  SynthConfig cfg;
  cfg.samples_per_class = 5;
  const auto out = generate(cfg, root / "a");
  generate(cfg, root / "b");
  EXPECT_EQ(out.train.entries.size(), 15u);
  EXPECT_EQ(out.test.entries.size(), 15u);
  EXPECT_EQ(out.train.class_catalog, (std::vector<std::string>{"solid", "ring", "checker"}));
  EXPECT_EQ(out.train.entries[0].sample_id, "train_solid_000");
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), root / "a");
    ASSERT_EQ(slurp(e.path()), slurp(root / "b" / rel)) << rel;
    ++files;
  }
  EXPECT_EQ(files, 2u * (3u + 2u * 15u));
  fs::remove_all(root);
}

}  // namespace
}  // namespace protoxplain
