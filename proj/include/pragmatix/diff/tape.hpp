#pragma once

// Reverse-mode differentiation over row-major double matrices.
//
// A Tape records every operation of one forward computation. Parameters enter
// the tape by reference (no copy); backward() walks the tape in reverse and
// returns gradients aligned with the ParameterSet. A tape built with
// record_gradients = false is a plain inference context: ops compute values
// only and store no closures.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pragmatix/errors.hpp"

namespace pragmatix::diff {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class ParameterSet {
 public:
  std::size_t add(std::string name, Matrix init);

  std::size_t size() const { return entries_.size(); }
  const std::string& name(std::size_t i) const { return entries_[i].name; }
  Matrix& value(std::size_t i) { return entries_[i].value; }
  const Matrix& value(std::size_t i) const { return entries_[i].value; }
  std::optional<std::size_t> find(const std::string& name) const;
  std::size_t num_scalars() const;
  bool all_finite() const;

  // Number of optimizer updates applied so far.
  std::int64_t step = 0;

  bool operator==(const ParameterSet& other) const;

 private:
  struct Entry {
    std::string name;
    Matrix value;
  };
  std::vector<Entry> entries_;
};

using Gradients = std::vector<Matrix>;

Gradients zeros_like(const ParameterSet& params);

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double item() const;
};

class Tape {
 public:
  explicit Tape(bool record_gradients = true) : record_(record_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Matrix value);
  // Leaf referencing params.value(index); repeated calls return the same node.
  Var parameter(const ParameterSet& params, std::size_t index);

  // Gradients of the 1x1 `loss` with respect to every entry of `params`.
  // Entries that did not take part in the computation get zeros.
  Gradients backward(Var loss, const ParameterSet& params);

  const Matrix& value(int id) const;

  // Op construction API. `inputs` are the node ids the op reads; the backward
  // closure receives the output gradient and accumulates into inputs through
  // accumulate().
  using BackwardFn = std::function<void(Tape&, const Matrix& grad_out)>;
  Var push(Matrix value, std::initializer_list<Var> inputs, BackwardFn backward);
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  void accumulate(int id, const Matrix& grad);
  template <typename Expr>
  void accumulate_expr(int id, const Expr& expr) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = expr;
    } else {
      n.grad += expr;
    }
  }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    const Matrix* ref = nullptr;
    Matrix grad;
    bool requires_grad = false;
    BackwardFn backward;
    const ParameterSet* owner = nullptr;
    std::size_t param_index = 0;
  };
  bool record_;
  std::vector<Node> nodes_;
};

// ---- operations -----------------------------------------------------------

Var matmul(Var a, Var b);
// x * w + b, with b a 1 x out row broadcast over rows.
Var linear(Var x, Var w, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var relu(Var a);
Var sigmoid(Var a);
Var log_sigmoid(Var a);
Var log(Var a);
// Elementwise f with derivative df.
Var elementwise(Var a, const std::function<double(double)>& f,
                const std::function<double(double)>& df);
// Row-wise layer normalization with 1 x n gain and bias.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
// out[i] = table[indices[i]].
Var gather_rows(Var table, std::span<const int> indices);
// out[s] = sum of rows i with segment[i] == s.
Var segment_sum(Var x, std::span<const int> segment, int num_segments);
// Mean over rows of each segment; every segment must be non-empty.
Var segment_mean(Var x, std::span<const int> segment, int num_segments);
// out[i] = x(i, cols[i]), an N x 1 column.
Var pick(Var x, std::span<const int> cols);
// Row-wise log-softmax. When `allowed` is given (rows*cols, row-major) the
// disallowed entries are -inf and carry no gradient.
Var log_softmax(Var x, std::span<const std::uint8_t> allowed = {});
// Multiplies row i by factors[i] (constants).
Var scale_rows(Var x, std::span<const double> factors);
Var reshape(Var x, Eigen::Index rows, Eigen::Index cols);
Var sum(Var x);
Var mean(Var x);

struct AttentionLayout {
  int batch = 1;
  int query_len = 1;
  int key_len = 1;
  int heads = 1;
  bool causal = false;
  // Optional number of valid keys per batch element.
  std::vector<int> key_lengths;
};

// Scaled dot-product attention over batch-stacked rows: q is
// (batch*query_len) x width, k and v are (batch*key_len) x width.
Var attention(Var q, Var k, Var v, const AttentionLayout& layout);

// ---- gradient checking ----------------------------------------------------

using LossBuilder = std::function<Var(Tape&, const ParameterSet&)>;

// Runs one recorded evaluation of `f` and backward(). Throws NonFiniteLoss.
Gradients gradient(const LossBuilder& f, const ParameterSet& params, double* loss = nullptr);

// Central differences per coordinate compared with backward(); returns
// max |g_ad - g_fd| / max(1, |g_fd|). `params` is restored on return.
double finite_diff_check(const LossBuilder& f, ParameterSet& params, double step = 1e-5);

}  // namespace pragmatix::diff
