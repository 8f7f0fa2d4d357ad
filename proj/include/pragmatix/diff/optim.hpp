#pragma once

#include <cstdint>
#include <filesystem>

#include "pragmatix/diff/tape.hpp"

namespace pragmatix::diff {

struct OptimizerConfig {
  double learning_rate = 1e-4;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double lr_min = 0.0;

  void validate() const;
};

// Global L2 norm over every gradient entry.
double global_norm(const Gradients& grads);

// Scales every gradient by max_norm / norm when norm > max_norm. Returns the
// norm before clipping.
double clip_global_norm(Gradients& grads, double max_norm);

// Cosine interpolation from lr_max at step 0 to lr_min at step total.
double cosine_lr(std::int64_t step, std::int64_t total, double lr_max, double lr_min);

// Adaptive-moment optimizer with decoupled weight decay: the decay multiplies
// the parameters directly instead of entering the gradient.
class AdamW {
 public:
  AdamW(const ParameterSet& params, OptimizerConfig config);

  // Applies one update at learning rate `lr` and increments params.step.
  void step(ParameterSet& params, const Gradients& grads, double lr);

  const OptimizerConfig& config() const { return config_; }

 private:
  OptimizerConfig config_;
  Gradients m_;
  Gradients v_;
  std::int64_t t_ = 0;
};

// Flat little-endian float64 tensors in `<stem>.bin` plus a `<stem>.json`
// manifest with names, shapes, offsets, dtype and the step counter. Both files
// are written temp-then-rename.
void save_parameters(const ParameterSet& params, const std::filesystem::path& dir,
                     const std::string& stem);
ParameterSet load_parameters(const std::filesystem::path& dir, const std::string& stem);
// Loads into an existing set after checking names and shapes match.
void load_parameters_into(ParameterSet& params, const std::filesystem::path& dir,
                          const std::string& stem);

}  // namespace pragmatix::diff
