#include "pragmatix/diff/tape.hpp"

#include <cmath>
#include <limits>
#include <memory>

namespace pragmatix::diff {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeMismatch(std::string(op) + ": " + std::to_string(a.rows()) + "x" +
                        std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                        std::to_string(b.cols()));
}

}  // namespace

// ---- ParameterSet ---------------------------------------------------------

std::size_t ParameterSet::add(std::string name, Matrix init) {
  if (find(name)) throw ConfigError("duplicate parameter name " + name);
  entries_.push_back({std::move(name), std::move(init)});
  return entries_.size() - 1;
}

std::optional<std::size_t> ParameterSet::find(const std::string& name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].name == name) return i;
  return std::nullopt;
}

std::size_t ParameterSet::num_scalars() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += static_cast<std::size_t>(e.value.size());
  return n;
}

bool ParameterSet::all_finite() const {
  for (const auto& e : entries_)
    if (!e.value.allFinite()) return false;
  return true;
}

bool ParameterSet::operator==(const ParameterSet& other) const {
  if (step != other.step || entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& a = entries_[i];
    const auto& b = other.entries_[i];
    if (a.name != b.name || a.value.rows() != b.value.rows() ||
        a.value.cols() != b.value.cols() || a.value != b.value)
      return false;
  }
  return true;
}

Gradients zeros_like(const ParameterSet& params) {
  Gradients g;
  g.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    g.push_back(Matrix::Zero(params.value(i).rows(), params.value(i).cols()));
  return g;
}

// ---- Tape -----------------------------------------------------------------

const Matrix& Var::value() const { return tape->value(id); }

double Var::item() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ShapeMismatch("item() on a non-scalar");
  return v(0, 0);
}

const Matrix& Tape::value(int id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  return n.ref ? *n.ref : n.value;
}

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::parameter(const ParameterSet& params, std::size_t index) {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (n.owner == &params && n.param_index == index) return {this, static_cast<int>(i)};
  }
  Node n;
  n.ref = &params.value(index);
  n.owner = &params;
  n.param_index = index;
  n.requires_grad = record_;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::push(Matrix value, std::initializer_list<Var> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  if (record_) {
    for (Var in : inputs) {
      if (in.tape != this) throw ConfigError("variable belongs to another tape");
      if (requires_grad(in.id)) n.requires_grad = true;
    }
    if (n.requires_grad) n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

void Tape::accumulate(int id, const Matrix& grad) { accumulate_expr(id, grad); }

Gradients Tape::backward(Var loss, const ParameterSet& params) {
  if (!record_) throw ConfigError("backward() on a tape that does not record gradients");
  const Matrix& lv = value(loss.id);
  if (lv.size() != 1) throw ShapeMismatch("backward() needs a scalar loss");
  if (!std::isfinite(lv(0, 0))) throw NonFiniteLoss("backward");
  Gradients grads = zeros_like(params);
  if (!requires_grad(loss.id)) return grads;
  for (auto& n : nodes_) n.grad.resize(0, 0);
  nodes_[static_cast<std::size_t>(loss.id)].grad = Matrix::Ones(1, 1);
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || n.grad.size() == 0 || !n.backward) continue;
    n.backward(*this, n.grad);
  }
  for (const Node& n : nodes_) {
    if (n.owner == &params && n.grad.size() != 0) grads[n.param_index] = n.grad;
  }
  return grads;
}

// ---- operations -----------------------------------------------------------

Var matmul(Var a, Var b) {
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  if (A.cols() != B.rows()) throw ShapeMismatch("matmul inner dimensions");
  return a.tape->push(A * B, {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a.id)) t.accumulate_expr(a.id, g * t.value(b.id).transpose());
    if (t.requires_grad(b.id)) t.accumulate_expr(b.id, t.value(a.id).transpose() * g);
  });
}

Var linear(Var x, Var w, Var b) {
  const Matrix& X = x.value();
  const Matrix& W = w.value();
  const Matrix& B = b.value();
  if (X.cols() != W.rows() || B.rows() != 1 || B.cols() != W.cols())
    throw ShapeMismatch("linear");
  Matrix out = X * W;
  out.rowwise() += B.row(0);
  return x.tape->push(std::move(out), {x, w, b}, [x, w, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(x.id)) t.accumulate_expr(x.id, g * t.value(w.id).transpose());
    if (t.requires_grad(w.id)) t.accumulate_expr(w.id, t.value(x.id).transpose() * g);
    if (t.requires_grad(b.id)) t.accumulate_expr(b.id, g.colwise().sum());
  });
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  return a.tape->push(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate_expr(a.id, g);
    t.accumulate_expr(b.id, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  return a.tape->push(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate_expr(a.id, g);
    t.accumulate_expr(b.id, -g);
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  return a.tape->push(a.value().cwiseProduct(b.value()), {a, b},
                      [a, b](Tape& t, const Matrix& g) {
                        if (t.requires_grad(a.id))
                          t.accumulate_expr(a.id, g.cwiseProduct(t.value(b.id)));
                        if (t.requires_grad(b.id))
                          t.accumulate_expr(b.id, g.cwiseProduct(t.value(a.id)));
                      });
}

Var scale(Var a, double s) {
  return a.tape->push(a.value() * s, {a},
                      [a, s](Tape& t, const Matrix& g) { t.accumulate_expr(a.id, g * s); });
}

Var relu(Var a) {
  return a.tape->push(a.value().cwiseMax(0.0), {a}, [a](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(a.id);
    t.accumulate_expr(a.id, (x.array() > 0.0).select(g, 0.0));
  });
}

Var sigmoid(Var a) {
  Matrix s = a.value().unaryExpr([](double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  });
  const int out_id = static_cast<int>(a.tape->size());
  return a.tape->push(std::move(s), {a}, [a, out_id](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(out_id);
    t.accumulate_expr(a.id, g.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
  });
}

namespace {

double stable_log_sigmoid(double x) {
  return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

double stable_sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

Var log_sigmoid(Var a) {
  return a.tape->push(a.value().unaryExpr(&stable_log_sigmoid), {a},
                      [a](Tape& t, const Matrix& g) {
                        const Matrix& x = t.value(a.id);
                        // d/dx log sigma(x) = sigma(-x)
                        t.accumulate_expr(
                            a.id, g.cwiseProduct(x.unaryExpr([](double v) {
                              return stable_sigmoid(-v);
                            })));
                      });
}

Var log(Var a) {
  return a.tape->push(a.value().array().log().matrix(), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate_expr(a.id, g.cwiseQuotient(t.value(a.id)));
  });
}

Var elementwise(Var a, const std::function<double(double)>& f,
                const std::function<double(double)>& df) {
  return a.tape->push(a.value().unaryExpr(f), {a}, [a, df](Tape& t, const Matrix& g) {
    t.accumulate_expr(a.id, g.cwiseProduct(t.value(a.id).unaryExpr(df)));
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Matrix& X = x.value();
  const Matrix& G = gain.value();
  const Matrix& B = bias.value();
  if (G.rows() != 1 || G.cols() != X.cols() || B.rows() != 1 || B.cols() != X.cols())
    throw ShapeMismatch("layer_norm");
  const Eigen::Index n = X.cols();
  auto xhat = std::make_shared<Matrix>(X.rows(), n);
  auto inv_std = std::make_shared<Eigen::VectorXd>(X.rows());
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    const double mu = X.row(r).mean();
    const double var = (X.row(r).array() - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)(r) = is;
    xhat->row(r) = (X.row(r).array() - mu) * is;
  }
  Matrix out = xhat->array().rowwise() * G.row(0).array();
  out.rowwise() += B.row(0);
  return x.tape->push(std::move(out), {x, gain, bias},
                      [x, gain, bias, xhat, inv_std, n](Tape& t, const Matrix& g) {
                        const Matrix& Gn = t.value(gain.id);
                        if (t.requires_grad(gain.id))
                          t.accumulate_expr(gain.id, g.cwiseProduct(*xhat).colwise().sum());
                        if (t.requires_grad(bias.id)) t.accumulate_expr(bias.id, g.colwise().sum());
                        if (t.requires_grad(x.id)) {
                          Matrix dxhat = g.array().rowwise() * Gn.row(0).array();
                          Matrix dx(dxhat.rows(), n);
                          for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
                            const double m1 = dxhat.row(r).mean();
                            const double m2 = dxhat.row(r).cwiseProduct(xhat->row(r)).mean();
                            dx.row(r) = (*inv_std)(r) *
                                        (dxhat.row(r).array() - m1 - xhat->row(r).array() * m2);
                          }
                          t.accumulate_expr(x.id, dx);
                        }
                      });
}

Var gather_rows(Var table, std::span<const int> indices) {
  const Matrix& T = table.value();
  Matrix out(static_cast<Eigen::Index>(indices.size()), T.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= T.rows()) throw ShapeMismatch("gather_rows index");
    out.row(static_cast<Eigen::Index>(i)) = T.row(indices[i]);
  }
  std::vector<int> idx(indices.begin(), indices.end());
  return table.tape->push(std::move(out), {table},
                          [table, idx = std::move(idx)](Tape& t, const Matrix& g) {
                            const Matrix& T = t.value(table.id);
                            Matrix d = Matrix::Zero(T.rows(), T.cols());
                            for (std::size_t i = 0; i < idx.size(); ++i)
                              d.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
                            t.accumulate_expr(table.id, d);
                          });
}

Var segment_sum(Var x, std::span<const int> segment, int num_segments) {
  const Matrix& X = x.value();
  if (static_cast<std::size_t>(X.rows()) != segment.size())
    throw ShapeMismatch("segment_sum needs one segment id per row");
  Matrix out = Matrix::Zero(num_segments, X.cols());
  for (std::size_t i = 0; i < segment.size(); ++i)
    out.row(segment[i]) += X.row(static_cast<Eigen::Index>(i));
  std::vector<int> seg(segment.begin(), segment.end());
  return x.tape->push(std::move(out), {x}, [x, seg = std::move(seg)](Tape& t, const Matrix& g) {
    Matrix d(static_cast<Eigen::Index>(seg.size()), g.cols());
    for (std::size_t i = 0; i < seg.size(); ++i) d.row(static_cast<Eigen::Index>(i)) = g.row(seg[i]);
    t.accumulate_expr(x.id, d);
  });
}

Var segment_mean(Var x, std::span<const int> segment, int num_segments) {
  std::vector<double> counts(static_cast<std::size_t>(num_segments), 0.0);
  for (int s : segment) counts[static_cast<std::size_t>(s)] += 1.0;
  for (double& c : counts) {
    if (c == 0.0) throw ShapeMismatch("segment_mean on an empty segment");
    c = 1.0 / c;
  }
  return scale_rows(segment_sum(x, segment, num_segments), counts);
}

Var pick(Var x, std::span<const int> cols) {
  const Matrix& X = x.value();
  if (static_cast<std::size_t>(X.rows()) != cols.size())
    throw ShapeMismatch("pick needs one column per row");
  Matrix out(X.rows(), 1);
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    const int c = cols[static_cast<std::size_t>(r)];
    if (c < 0 || c >= X.cols()) throw ShapeMismatch("pick column out of range");
    out(r, 0) = X(r, c);
  }
  std::vector<int> cs(cols.begin(), cols.end());
  return x.tape->push(std::move(out), {x}, [x, cs = std::move(cs)](Tape& t, const Matrix& g) {
    const Matrix& X = t.value(x.id);
    Matrix d = Matrix::Zero(X.rows(), X.cols());
    for (Eigen::Index r = 0; r < X.rows(); ++r) d(r, cs[static_cast<std::size_t>(r)]) = g(r, 0);
    t.accumulate_expr(x.id, d);
  });
}

Var log_softmax(Var x, std::span<const std::uint8_t> allowed) {
  const Matrix& X = x.value();
  const bool masked = !allowed.empty();
  if (masked && allowed.size() != static_cast<std::size_t>(X.size()))
    throw ShapeMismatch("log_softmax mask size");
  Matrix out(X.rows(), X.cols());
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    double mx = kNegInf;
    for (Eigen::Index c = 0; c < X.cols(); ++c) {
      if (masked && !allowed[static_cast<std::size_t>(r * X.cols() + c)]) continue;
      mx = std::max(mx, X(r, c));
    }
    double acc = 0.0;
    for (Eigen::Index c = 0; c < X.cols(); ++c) {
      if (masked && !allowed[static_cast<std::size_t>(r * X.cols() + c)]) continue;
      acc += std::exp(X(r, c) - mx);
    }
    const double lse = mx + std::log(acc);
    for (Eigen::Index c = 0; c < X.cols(); ++c) {
      const bool ok = !masked || allowed[static_cast<std::size_t>(r * X.cols() + c)];
      out(r, c) = ok ? X(r, c) - lse : kNegInf;
    }
  }
  const int out_id = static_cast<int>(x.tape->size());
  return x.tape->push(std::move(out), {x}, [x, out_id](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(out_id);
    Matrix d(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      double gs = 0.0;
      for (Eigen::Index c = 0; c < y.cols(); ++c)
        if (y(r, c) != kNegInf) gs += g(r, c);
      for (Eigen::Index c = 0; c < y.cols(); ++c)
        d(r, c) = y(r, c) == kNegInf ? 0.0 : g(r, c) - std::exp(y(r, c)) * gs;
    }
    t.accumulate_expr(x.id, d);
  });
}

Var scale_rows(Var x, std::span<const double> factors) {
  const Matrix& X = x.value();
  if (static_cast<std::size_t>(X.rows()) != factors.size())
    throw ShapeMismatch("scale_rows needs one factor per row");
  Eigen::VectorXd f(X.rows());
  for (Eigen::Index r = 0; r < X.rows(); ++r) f(r) = factors[static_cast<std::size_t>(r)];
  Matrix out = f.asDiagonal() * X;
  return x.tape->push(std::move(out), {x}, [x, f](Tape& t, const Matrix& g) {
    t.accumulate_expr(x.id, f.asDiagonal() * g);
  });
}

Var reshape(Var x, Eigen::Index rows, Eigen::Index cols) {
  const Matrix& X = x.value();
  if (rows * cols != X.size()) throw ShapeMismatch("reshape size");
  Matrix out = Eigen::Map<const Matrix>(X.data(), rows, cols);
  const Eigen::Index r0 = X.rows(), c0 = X.cols();
  return x.tape->push(std::move(out), {x}, [x, r0, c0](Tape& t, const Matrix& g) {
    t.accumulate_expr(x.id, Eigen::Map<const Matrix>(g.data(), r0, c0));
  });
}

Var sum(Var x) {
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  return x.tape->push(std::move(out), {x}, [x](Tape& t, const Matrix& g) {
    const Matrix& X = t.value(x.id);
    t.accumulate_expr(x.id, Matrix::Constant(X.rows(), X.cols(), g(0, 0)));
  });
}

Var mean(Var x) {
  const auto n = static_cast<double>(x.value().size());
  return scale(sum(x), 1.0 / n);
}

Var attention(Var q, Var k, Var v, const AttentionLayout& L) {
  const Matrix& Q = q.value();
  const Matrix& K = k.value();
  const Matrix& V = v.value();
  const Eigen::Index width = Q.cols();
  if (K.cols() != width || V.cols() != width || Q.rows() != L.batch * L.query_len ||
      K.rows() != L.batch * L.key_len || V.rows() != K.rows() || width % L.heads != 0)
    throw ShapeMismatch("attention layout");
  if (L.causal && L.query_len != L.key_len) throw ShapeMismatch("causal attention needs Lq == Lk");
  if (!L.key_lengths.empty() && static_cast<int>(L.key_lengths.size()) != L.batch)
    throw ShapeMismatch("attention key_lengths");
  const Eigen::Index dh = width / L.heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  auto probs = std::make_shared<std::vector<Matrix>>(static_cast<std::size_t>(L.batch * L.heads));
  Matrix out(Q.rows(), width);
  for (int b = 0; b < L.batch; ++b) {
    const int valid = L.key_lengths.empty() ? L.key_len : L.key_lengths[static_cast<std::size_t>(b)];
    for (int h = 0; h < L.heads; ++h) {
      auto qb = Q.block(b * L.query_len, h * dh, L.query_len, dh);
      auto kb = K.block(b * L.key_len, h * dh, L.key_len, dh);
      auto vb = V.block(b * L.key_len, h * dh, L.key_len, dh);
      Matrix s = (qb * kb.transpose()) * sc;
      for (int i = 0; i < L.query_len; ++i) {
        double mx = kNegInf;
        for (int j = 0; j < L.key_len; ++j) {
          if (j >= valid || (L.causal && j > i)) s(i, j) = kNegInf;
          mx = std::max(mx, s(i, j));
        }
        double acc = 0.0;
        for (int j = 0; j < L.key_len; ++j) {
          s(i, j) = s(i, j) == kNegInf ? 0.0 : std::exp(s(i, j) - mx);
          acc += s(i, j);
        }
        s.row(i) /= acc;
      }
      out.block(b * L.query_len, h * dh, L.query_len, dh).noalias() = s * vb;
      (*probs)[static_cast<std::size_t>(b * L.heads + h)] = std::move(s);
    }
  }
  return q.tape->push(
      std::move(out), {q, k, v}, [q, k, v, L, dh, sc, probs](Tape& t, const Matrix& g) {
        const Matrix& Q = t.value(q.id);
        const Matrix& K = t.value(k.id);
        const Matrix& V = t.value(v.id);
        Matrix dQ = Matrix::Zero(Q.rows(), Q.cols());
        Matrix dK = Matrix::Zero(K.rows(), K.cols());
        Matrix dV = Matrix::Zero(V.rows(), V.cols());
        for (int b = 0; b < L.batch; ++b) {
          for (int h = 0; h < L.heads; ++h) {
            const Matrix& P = (*probs)[static_cast<std::size_t>(b * L.heads + h)];
            auto gb = g.block(b * L.query_len, h * dh, L.query_len, dh);
            auto qb = Q.block(b * L.query_len, h * dh, L.query_len, dh);
            auto kb = K.block(b * L.key_len, h * dh, L.key_len, dh);
            auto vb = V.block(b * L.key_len, h * dh, L.key_len, dh);
            Matrix dP = gb * vb.transpose();
            dV.block(b * L.key_len, h * dh, L.key_len, dh).noalias() += P.transpose() * gb;
            Eigen::VectorXd rs = (dP.cwiseProduct(P)).rowwise().sum();
            Matrix dS = P.cwiseProduct((dP.colwise() - rs).matrix()) * sc;
            dQ.block(b * L.query_len, h * dh, L.query_len, dh).noalias() += dS * kb;
            dK.block(b * L.key_len, h * dh, L.key_len, dh).noalias() += dS.transpose() * qb;
          }
        }
        t.accumulate_expr(q.id, dQ);
        t.accumulate_expr(k.id, dK);
        t.accumulate_expr(v.id, dV);
      });
}

// ---- gradient checking ----------------------------------------------------

Gradients gradient(const LossBuilder& f, const ParameterSet& params, double* loss) {
  Tape tape(true);
  Var l = f(tape, params);
  if (loss) *loss = l.item();
  return tape.backward(l, params);
}

double finite_diff_check(const LossBuilder& f, ParameterSet& params, double step) {
  const Gradients analytic = gradient(f, params);
  auto eval = [&]() {
    Tape tape(false);
    return f(tape, params).item();
  };
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Matrix& value = params.value(p);
    for (Eigen::Index i = 0; i < value.size(); ++i) {
      double& x = value.data()[i];
      const double saved = x;
      x = saved + step;
      const double up = eval();
      x = saved - step;
      const double down = eval();
      x = saved;
      const double fd = (up - down) / (2.0 * step);
      const double ad = analytic[p].data()[i];
      worst = std::max(worst, std::abs(ad - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  return worst;
}

}  // namespace pragmatix::diff
