#pragma once

// N-way K-shot episodes drawn deterministically from (seed, episode counter).

#include <algorithm>
#include <cstdint>
#include <memory>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "protoxplain/dataio.hpp"

namespace protoxplain {

struct EpisodeSpec {
  std::size_t n_way = 3;
  std::size_t k_shot = 3;
  std::size_t q_per_class = 3;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_way < 2) throw ConfigError("n_way must be >= 2");
    if (k_shot < 1) throw ConfigError("k_shot must be >= 1");
    if (q_per_class < 1) throw ConfigError("q_per_class must be >= 1");
  }
};

class CapacityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpisodeItem {
  std::shared_ptr<const AnnotatedSample> sample;
  std::size_t label = 0;  // episode-local
};

struct Episode {
  std::vector<EpisodeItem> support;
  std::vector<EpisodeItem> query;
  std::vector<std::size_t> class_map;  // episode-local -> global class index
};

inline std::mt19937_64 episode_rng(std::uint64_t seed, std::uint64_t counter) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(counter), static_cast<std::uint32_t>(counter >> 32)};
  return std::mt19937_64(seq);
}

inline void check_capacity(const Dataset& ds, const EpisodeSpec& spec) {
  if (ds.num_classes() < spec.n_way) {
    throw CapacityError("episode needs " + std::to_string(spec.n_way) + " classes, dataset has " +
                        std::to_string(ds.num_classes()));
  }
  const auto need = spec.k_shot + spec.q_per_class;
  for (std::size_t c = 0; c < ds.num_classes(); ++c) {
    const auto have = ds.members(c).size();
    if (have < need) {
      throw CapacityError("class " + ds.index.class_catalog[c] + " has " + std::to_string(have) +
                          " samples, episode needs " + std::to_string(need));
    }
  }
}

inline Episode sample_episode(const Dataset& ds, const EpisodeSpec& spec, std::uint64_t episode_counter) {
  spec.validate();
  check_capacity(ds, spec);
  auto rng = episode_rng(spec.seed, episode_counter);

  std::vector<std::size_t> classes(ds.num_classes());
  std::iota(classes.begin(), classes.end(), std::size_t{0});
  std::shuffle(classes.begin(), classes.end(), rng);
  classes.resize(spec.n_way);

  Episode ep;
  ep.class_map = classes;
  for (std::size_t local = 0; local < classes.size(); ++local) {
    auto members = ds.members(classes[local]);
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t i = 0; i < spec.k_shot; ++i) ep.support.push_back({ds.samples[members[i]], local});
    for (std::size_t i = 0; i < spec.q_per_class; ++i) {
      ep.query.push_back({ds.samples[members[spec.k_shot + i]], local});
    }
  }
  return ep;
}

}  // namespace protoxplain
