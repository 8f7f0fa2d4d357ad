#pragma once

// Parameter layouts and forward passes of the transformer pieces shared by the
// speaker and listener.

#include <optional>
#include <string>

#include "pragmatix/diff/tape.hpp"
#include "pragmatix/rng.hpp"

namespace pragmatix::agents {

using diff::Matrix;
using diff::ParameterSet;
using diff::Tape;
using diff::Var;

enum class InitMode { kRandom, kZero };

// Linear weights ~ N(0, 1/fan_in), embeddings ~ N(0, embed_std^2), biases 0,
// layer-norm gains 1. kZero sets every entry (gains included) to zero.
class Initializer {
 public:
  Initializer(InitMode mode, std::uint64_t seed) : mode_(mode), rng_(seed) {}

  Matrix weight(Eigen::Index rows, Eigen::Index cols, double std);
  Matrix zeros(Eigen::Index rows, Eigen::Index cols) { return Matrix::Zero(rows, cols); }
  Matrix ones(Eigen::Index rows, Eigen::Index cols);

 private:
  InitMode mode_;
  Rng rng_;
};

struct Linear {
  std::size_t w = 0;
  std::size_t b = 0;

  static Linear create(ParameterSet& ps, const std::string& name, Eigen::Index in,
                       Eigen::Index out, Initializer& init, double std = -1.0);
  Var operator()(Tape& t, const ParameterSet& ps, Var x) const;
};

struct LayerNorm {
  std::size_t gain = 0;
  std::size_t bias = 0;

  static LayerNorm create(ParameterSet& ps, const std::string& name, Eigen::Index width,
                          Initializer& init);
  Var operator()(Tape& t, const ParameterSet& ps, Var x) const;
};

struct MultiHeadAttention {
  Linear q, k, v, o;
  int heads = 1;

  static MultiHeadAttention create(ParameterSet& ps, const std::string& name, Eigen::Index width,
                                   int heads, Initializer& init);
  Var operator()(Tape& t, const ParameterSet& ps, Var queries, Var keys,
                 diff::AttentionLayout layout) const;
};

// Pre-norm residual block: self-attention, optional cross-attention, MLP.
struct TransformerLayer {
  LayerNorm ln_self;
  MultiHeadAttention self_attn;
  std::optional<LayerNorm> ln_cross;
  std::optional<MultiHeadAttention> cross_attn;
  LayerNorm ln_ff;
  Linear ff_in, ff_out;

  static TransformerLayer create(ParameterSet& ps, const std::string& name, Eigen::Index width,
                                 int heads, Eigen::Index ff_width, bool with_cross,
                                 Initializer& init);

  // x: (batch*len) x width. `memory` (batch*mem_len) x width is required when
  // the layer has cross-attention.
  Var operator()(Tape& t, const ParameterSet& ps, Var x, const diff::AttentionLayout& self_layout,
                 std::optional<Var> memory = std::nullopt,
                 std::optional<diff::AttentionLayout> cross_layout = std::nullopt) const;
};

}  // namespace pragmatix::agents
