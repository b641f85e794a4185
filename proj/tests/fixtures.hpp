#pragma once
#include <vector>

#include "avsink/model.hpp"

namespace avsink::testing {

// Default planted model, built once per process.
inline const Model& planted(std::uint64_t seed = 7) {
  static std::vector<std::pair<std::uint64_t, Model>> cache;
  for (const auto& [s, m] : cache)
    if (s == seed) return m;
  cache.emplace_back(seed, build_planted_model(ModelConfig{}, seed, PlantSpec{}));
  return cache.back().second;
}

inline const std::vector<Sample>& task_samples() {
  static const std::vector<Sample> s = generate_dataset(planted(), TaskSpec{}, 60, 11);
  return s;
}

inline const std::vector<Sample>& caption_samples() {
  static const std::vector<Sample> s = generate_caption_corpus(planted(), CaptionTaskSpec{}, 30, 12);
  return s;
}

}  // namespace avsink::testing
