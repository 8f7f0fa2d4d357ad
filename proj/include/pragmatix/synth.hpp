#pragma once

// Synthetic classification worlds with known claim semantics.

#include <cstdint>
#include <filesystem>
#include <vector>

#include <Eigen/Dense>

#include "pragmatix/core.hpp"

namespace pragmatix::synth {

struct WorldSpec {
  int k = 10;
  int m = 40;
  int d = 40;
  int n_train = 2000;
  int n_val = 500;
  double epsilon = 0.05;  // attribute flip probability
  double sigma_e = 0.1;   // embedding noise
  double rho = 0.2;       // semantics mask rate
  int num_groups = 4;
  // group_of[j] for attribute j; empty means contiguous blocks of m / num_groups.
  std::vector<int> group_of;
  // Explicit k x m prototypes in {-1,+1}; empty means sampled.
  std::vector<std::vector<int>> prototypes;
  // Sampled prototypes mix a few attributes that most classes share with
  // rarer, more discriminative ones. Every round(1 / common_fraction)-th
  // attribute is common.
  double common_fraction = 0.25;
  double common_prevalence = 0.9;
  double rare_prevalence = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
};

json to_json(const WorldSpec& s);
WorldSpec world_spec_from_json(const json& j);
WorldSpec load_world_spec(const std::filesystem::path& path);

WorldSpec default_desk_world();

struct World {
  Vocabulary vocabulary;
  Dataset train;
  Dataset val;
  std::vector<std::vector<int>> prototypes;
  Eigen::MatrixXd projection;  // d x m

  // Fraction of examples with prediction == label.
  double classifier_accuracy(const Dataset& d) const;
};

World generate_world(const WorldSpec& spec);

// Nearest projected prototype; ties go to the lower class index.
int nearest_prototype(const World& world, std::span<const double> embedding);

}  // namespace pragmatix::synth
