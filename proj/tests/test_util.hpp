#pragma once

#include <cstdint>

#include "json.hpp"
#include "muslcat/model.hpp"
#include "muslcat/random.hpp"
#include "muslcat/tensor.hpp"

namespace muslcat::testing {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double stddev = 1.0) {
  Rng rng(seed);
  return random_normal(std::move(shape), rng, stddev);
}

// Values with |v| >= margin, for inputs that must stay clear of kinks.
inline Tensor random_away_from_zero(Shape shape, std::uint64_t seed, double margin) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> mag(margin, 1.0 + margin);
  std::bernoulli_distribution sign(0.5);
  for (double& v : t.values()) v = sign(rng) ? mag(rng) : -mag(rng);
  return t;
}

// Entries drawn without replacement from a spaced grid, so no window has ties.
inline Tensor random_distinct(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  std::vector<double> grid(t.size());
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = -1.0 + 0.01 * static_cast<double>(i);
  std::shuffle(grid.begin(), grid.end(), rng);
  std::copy(grid.begin(), grid.end(), t.data());
  return t;
}

// Width-reduced two-branch model over 2048-sample inputs.
inline nlohmann::json tiny_model_json(const std::string& backend = "aac", int n_tags = 4) {
  const nlohmann::json att = {{"heads", 2}, {"key_ratio", 0.25}, {"value_ratio", 0.25}, {"max_distance", 8}};
  nlohmann::json low = {{"branch", "low"},
              {"multilevel", 4},
              {"se_reduction", 4},
              {"attention", att},
              {"fusion_max_distance", 16},
              {"layers",
               {{{"kind", "conv"}, {"channels", 8}, {"filter", 27}, {"stride", 9}},
                {{"kind", "se"}, {"channels", 16}, {"pool", true}, {"repeat", 2}},
                {{"kind", "aac"}, {"channels", 16}, {"repeat", 3}}}}};
  nlohmann::json high = {{"branch", "high"},
               {"multilevel", 4},
               {"se_reduction", 4},
               {"attention", att},
               {"fusion_max_distance", 16},
               {"layers",
                {{{"kind", "conv"}, {"channels", 8}, {"filter", 3}, {"stride", 3}},
                 {{"kind", "se"}, {"channels", 16}, {"pool", true}, {"repeat", 3}},
                 {{"kind", "aac"}, {"channels", 16}, {"repeat", 3}}}}};
  nlohmann::json be;
  if (backend == "aac") {
    be = {{"kind", "aac"}, {"channels", 16}, {"attention", att}};
  } else if (backend == "bert") {
    be = {{"kind", "bert"}, {"layers", 2}, {"width", 16}, {"heads", 2}, {"ffn", 32},
          {"dropout", 0.2}, {"max_distance", 40}};
  } else {
    be = {{"kind", "pool"}};
  }
  return {{"name", "tiny"},     {"n_tags", n_tags},        {"input_length", 2048}, {"seed", 3},
          {"branches", {low, high}}, {"backend", be}, {"classifier_hidden", 16}};
}

inline ModelConfig tiny(const std::string& backend = "aac", int n_tags = 4) {
  return model_config_from_json(tiny_model_json(backend, n_tags));
}

}  // namespace muslcat::testing
