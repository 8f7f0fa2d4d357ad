#include "pragmatix/agents/layers.hpp"

#include <cmath>

namespace pragmatix::agents {

Matrix Initializer::weight(Eigen::Index rows, Eigen::Index cols, double std) {
  Matrix m(rows, cols);
  if (mode_ == InitMode::kZero) return Matrix::Zero(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std * rng_.normal();
  return m;
}

Matrix Initializer::ones(Eigen::Index rows, Eigen::Index cols) {
  return mode_ == InitMode::kZero ? Matrix::Zero(rows, cols) : Matrix::Ones(rows, cols);
}

Linear Linear::create(ParameterSet& ps, const std::string& name, Eigen::Index in,
                      Eigen::Index out, Initializer& init, double std) {
  if (std < 0.0) std = 1.0 / std::sqrt(static_cast<double>(in));
  Linear l;
  l.w = ps.add(name + ".w", init.weight(in, out, std));
  l.b = ps.add(name + ".b", init.zeros(1, out));
  return l;
}

Var Linear::operator()(Tape& t, const ParameterSet& ps, Var x) const {
  return diff::linear(x, t.parameter(ps, w), t.parameter(ps, b));
}

LayerNorm LayerNorm::create(ParameterSet& ps, const std::string& name, Eigen::Index width,
                            Initializer& init) {
  LayerNorm ln;
  ln.gain = ps.add(name + ".gain", init.ones(1, width));
  ln.bias = ps.add(name + ".bias", init.zeros(1, width));
  return ln;
}

Var LayerNorm::operator()(Tape& t, const ParameterSet& ps, Var x) const {
  return diff::layer_norm(x, t.parameter(ps, gain), t.parameter(ps, bias));
}

MultiHeadAttention MultiHeadAttention::create(ParameterSet& ps, const std::string& name,
                                              Eigen::Index width, int heads, Initializer& init) {
  if (heads < 1 || width % heads != 0)
    throw ConfigError("width must be divisible by the number of heads");
  MultiHeadAttention a;
  a.q = Linear::create(ps, name + ".q", width, width, init);
  a.k = Linear::create(ps, name + ".k", width, width, init);
  a.v = Linear::create(ps, name + ".v", width, width, init);
  a.o = Linear::create(ps, name + ".o", width, width, init);
  a.heads = heads;
  return a;
}

Var MultiHeadAttention::operator()(Tape& t, const ParameterSet& ps, Var queries, Var keys,
                                   diff::AttentionLayout layout) const {
  layout.heads = heads;
  Var attended = diff::attention(q(t, ps, queries), k(t, ps, keys), v(t, ps, keys), layout);
  return o(t, ps, attended);
}

TransformerLayer TransformerLayer::create(ParameterSet& ps, const std::string& name,
                                          Eigen::Index width, int heads, Eigen::Index ff_width,
                                          bool with_cross, Initializer& init) {
  TransformerLayer l;
  l.ln_self = LayerNorm::create(ps, name + ".ln_self", width, init);
  l.self_attn = MultiHeadAttention::create(ps, name + ".self", width, heads, init);
  if (with_cross) {
    l.ln_cross = LayerNorm::create(ps, name + ".ln_cross", width, init);
    l.cross_attn = MultiHeadAttention::create(ps, name + ".cross", width, heads, init);
  }
  l.ln_ff = LayerNorm::create(ps, name + ".ln_ff", width, init);
  l.ff_in = Linear::create(ps, name + ".ff_in", width, ff_width, init);
  l.ff_out = Linear::create(ps, name + ".ff_out", ff_width, width, init);
  return l;
}

Var TransformerLayer::operator()(Tape& t, const ParameterSet& ps, Var x,
                                 const diff::AttentionLayout& self_layout, std::optional<Var> memory,
                                 std::optional<diff::AttentionLayout> cross_layout) const {
  Var h = ln_self(t, ps, x);
  x = diff::add(x, self_attn(t, ps, h, h, self_layout));
  if (cross_attn) {
    if (!memory || !cross_layout) throw ConfigError("cross-attention layer needs a memory");
    x = diff::add(x, (*cross_attn)(t, ps, (*ln_cross)(t, ps, x), *memory, *cross_layout));
  }
  Var f = ff_out(t, ps, diff::relu(ff_in(t, ps, ln_ff(t, ps, x))));
  return diff::add(x, f);
}

}  // namespace pragmatix::agents
