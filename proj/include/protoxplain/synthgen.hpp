#pragma once

// Synthetic few-shot benchmark with exact ROI masks and a spurious cue.
//
// Every image holds one textured disk ("lesion") on a noisy background; the
// texture decides the class and the mask is the disk. Training-split images
// additionally carry, with probability spurious_strength, a 6x6 class-specific
// marker in a random corner. The marker is never stamped on test images and
// never touches the disk, so a model that keys on it does not transfer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "protoxplain/dataio.hpp"
#include "protoxplain/image_io.hpp"
#include "protoxplain/keyvalue.hpp"

namespace protoxplain {

inline const std::vector<std::string>& synth_class_names() {
  static const std::vector<std::string> names{"solid", "ring", "checker"};
  return names;
}

inline constexpr std::size_t kMarkerSize = 6;
inline constexpr double kBackgroundLevel = 0.25;

struct SynthConfig {
  std::size_t n_classes = 3;
  std::size_t samples_per_class = 40;  // per split
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t radius_min = 8;
  std::size_t radius_max = 14;
  double spurious_strength = 0.9;
  double noise_sigma = 0.06;
  std::uint64_t seed = 7;

  /// Gap kept between the disk and the image border so corner markers never overlap it.
  static constexpr std::size_t margin() { return kMarkerSize + 1; }

  void validate() const {
    if (n_classes < 2 || n_classes > synth_class_names().size()) {
      throw ConfigError("n_classes must be in 2.." + std::to_string(synth_class_names().size()));
    }
    if (samples_per_class < 1) throw ConfigError("samples_per_class must be >= 1");
    if (height < 16 || width < 16) throw ConfigError("image_size must be at least 16x16");
    if (radius_min < 1 || radius_min > radius_max) throw ConfigError("lesion radius range is empty");
    if (2 * (radius_max + margin()) + 1 > std::min(height, width)) {
      throw ConfigError("lesion radius " + std::to_string(radius_max) + " does not fit a " + std::to_string(height) +
                        "x" + std::to_string(width) + " image");
    }
    if (!(spurious_strength >= 0.0 && spurious_strength <= 1.0)) throw ConfigError("spurious_strength must be in [0,1]");
    if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
  }

  KeyValues to_key_values() const {
    KeyValues kv;
    kv.set_number("n_classes", n_classes);
    kv.set_number("samples_per_class", samples_per_class);
    kv.set_number("image_height", height);
    kv.set_number("image_width", width);
    kv.set_number("radius_min", radius_min);
    kv.set_number("radius_max", radius_max);
    kv.set_number("spurious_strength", spurious_strength);
    kv.set_number("noise_sigma", noise_sigma);
    kv.set_number("seed", seed);
    return kv;
  }

  /// Overrides the fields of `base` named in `kv`; other keys are ignored.
  static SynthConfig from_key_values(const KeyValues& kv) { return from_key_values(kv, SynthConfig{}); }
  static SynthConfig from_key_values(const KeyValues& kv, SynthConfig base) {
    auto count = [&](const std::string& key, std::size_t fallback) {
      const auto v = kv.integer(key, static_cast<long long>(fallback));
      if (v < 0) throw ConfigError(key + " must be >= 0");
      return static_cast<std::size_t>(v);
    };
    base.n_classes = count("n_classes", base.n_classes);
    base.samples_per_class = count("samples_per_class", base.samples_per_class);
    base.height = count("image_height", base.height);
    base.width = count("image_width", base.width);
    base.radius_min = count("radius_min", base.radius_min);
    base.radius_max = count("radius_max", base.radius_max);
    base.spurious_strength = kv.number("spurious_strength", base.spurious_strength);
    base.noise_sigma = kv.number("noise_sigma", base.noise_sigma);
    base.seed = count("seed", base.seed);
    return base;
  }
};

enum class Split { train, test };
inline std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

struct SynthSample {
  std::vector<Grid> channels;  // three planes in [0,1]
  Grid mask;
  std::size_t label = 0;
  long center_x = 0;
  long center_y = 0;
  long radius = 0;
  bool has_marker = false;
  std::size_t marker_corner = 0;  // 0 TL, 1 TR, 2 BL, 3 BR
};

namespace detail {

inline double lesion_texture(std::size_t label, long dx, long dy, long radius) {
  switch (label) {
    case 0:  // solid
      return 0.75;
    case 1: {  // ring: bright rim three pixels wide, dim core
      const double d = std::sqrt(static_cast<double>(dx * dx + dy * dy));
      return d >= static_cast<double>(radius) - 3.0 ? 0.8 : 0.4;
    }
    default: {  // checker with 3-pixel cells, anchored at the disk centre
      const long cx = (dx + 300) / 3;
      const long cy = (dy + 300) / 3;
      return ((cx + cy) % 2 == 0) ? 0.8 : 0.35;
    }
  }
}

inline double marker_value(std::size_t label, std::size_t my, std::size_t mx) {
  switch (label) {
    case 0: return 1.0;                            // solid
    case 1: return my % 2 == 0 ? 1.0 : 0.0;        // horizontal stripes
    default: return mx % 2 == 0 ? 1.0 : 0.0;       // vertical stripes
  }
}

}  // namespace detail

inline SynthSample synthesize_sample(const SynthConfig& cfg, Split split, std::size_t label, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                    static_cast<std::uint32_t>(split == Split::train ? 1 : 2), static_cast<std::uint32_t>(label),
                    static_cast<std::uint32_t>(index)};
  std::mt19937_64 rng(seq);
  const auto h = static_cast<long>(cfg.height);
  const auto w = static_cast<long>(cfg.width);
  const auto m = static_cast<long>(SynthConfig::margin());

  SynthSample s;
  s.label = label;
  s.radius = std::uniform_int_distribution<long>(static_cast<long>(cfg.radius_min), static_cast<long>(cfg.radius_max))(rng);
  s.center_x = std::uniform_int_distribution<long>(m + s.radius, w - 1 - m - s.radius)(rng);
  s.center_y = std::uniform_int_distribution<long>(m + s.radius, h - 1 - m - s.radius)(rng);
  s.has_marker = split == Split::train && std::bernoulli_distribution(cfg.spurious_strength)(rng);
  s.marker_corner = std::uniform_int_distribution<std::size_t>(0, 3)(rng);

  s.mask = Grid::Zero(h, w);
  Grid level = Grid::Constant(h, w, kBackgroundLevel);
  for (long y = 0; y < h; ++y) {
    for (long x = 0; x < w; ++x) {
      const long dx = x - s.center_x;
      const long dy = y - s.center_y;
      if (dx * dx + dy * dy <= s.radius * s.radius) {
        s.mask(y, x) = 1.0;
        level(y, x) = detail::lesion_texture(label, dx, dy, s.radius);
      }
    }
  }

  // Channel gains mimic three co-registered sequences with different contrast.
  static constexpr double kGain[3] = {1.0, 0.85, 0.7};
  std::normal_distribution<double> noise(0.0, 1.0);
  for (double gain : kGain) {
    Grid plane(h, w);
    for (long y = 0; y < h; ++y) {
      for (long x = 0; x < w; ++x) {
        const double v = kBackgroundLevel + gain * (level(y, x) - kBackgroundLevel) + cfg.noise_sigma * noise(rng);
        plane(y, x) = std::clamp(v, 0.0, 1.0);
      }
    }
    s.channels.push_back(std::move(plane));
  }

  if (s.has_marker) {
    const auto ms = static_cast<long>(kMarkerSize);
    const long y0 = (s.marker_corner & 2) ? h - ms : 0;
    const long x0 = (s.marker_corner & 1) ? w - ms : 0;
    for (long my = 0; my < ms; ++my) {
      for (long mx = 0; mx < ms; ++mx) {
        const double v = detail::marker_value(label, static_cast<std::size_t>(my), static_cast<std::size_t>(mx));
        for (auto& plane : s.channels) plane(y0 + my, x0 + mx) = v;
      }
    }
  }
  return s;
}

inline std::string synth_sample_id(Split split, std::size_t label, std::size_t index) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%s_%03zu", to_string(split).c_str(), synth_class_names()[label].c_str(), index);
  return buf;
}

struct SynthOutput {
  DatasetIndex train;
  DatasetIndex test;
};

/// Writes out_root/{train,test}/ in the dataset layout and returns both indices.
inline SynthOutput generate(const SynthConfig& cfg, const std::filesystem::path& out_root) {
  cfg.validate();
  for (Split split : {Split::train, Split::test}) {
    const auto dir = out_root / to_string(split);
    std::error_code ec;
    std::filesystem::create_directories(dir / "images", ec);
    std::filesystem::create_directories(dir / "masks", ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

    std::ofstream index(dir / "index.csv");
    std::ofstream classes(dir / "classes.txt");
    std::ofstream meta(dir / "dataset.cfg");
    if (!index || !classes || !meta) throw IoError("cannot write dataset files under " + dir.string());
    index << "sample_id,label,image,mask\n";
    for (std::size_t c = 0; c < cfg.n_classes; ++c) classes << synth_class_names()[c] << '\n';
    meta << "source=synthetic\nallow_empty_masks=0\n" << cfg.to_key_values().to_string();

    for (std::size_t c = 0; c < cfg.n_classes; ++c) {
      for (std::size_t i = 0; i < cfg.samples_per_class; ++i) {
        const auto s = synthesize_sample(cfg, split, c, i);
        const auto id = synth_sample_id(split, c, i);
        const std::string image = "images/" + id + ".png";
        const std::string mask = "masks/" + id + ".png";
        write_rgb_png((dir / image).string(), s.channels[0], s.channels[1], s.channels[2]);
        write_gray_png((dir / mask).string(), s.mask);
        index << id << ',' << synth_class_names()[c] << ',' << image << ',' << mask << '\n';
      }
    }
    if (!index) throw IoError("failed writing " + (dir / "index.csv").string());
  }
  return {load_index(out_root / "train"), load_index(out_root / "test")};
}

}  // namespace protoxplain
