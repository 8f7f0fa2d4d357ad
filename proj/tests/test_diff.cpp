#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "pragmatix/diff/optim.hpp"
#include "pragmatix/diff/tape.hpp"
#include "pragmatix/rng.hpp"

using namespace pragmatix;
using namespace pragmatix::diff;

namespace {

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

}  // namespace

TEST_SUITE("diff") {

TEST_CASE("quadratic gradient and unused parameters") {
  ParameterSet p;
  Matrix theta(2, 2);
  theta << 1.0, -2.0, 0.5, 3.0;
  p.add("theta", theta);
  p.add("unused", Matrix::Ones(3, 1));
  const auto g = gradient(
      [](Tape& t, const ParameterSet& ps) {
        Var x = t.parameter(ps, 0);
        return sum(mul(x, x));
      },
      p);
  CHECK((g[0] - 2.0 * theta).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(g[1].cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("finite differences on linear and sine functions") {
  ParameterSet p;
  p.add("x", Matrix::Constant(1, 3, 0.3));
  const double lin = finite_diff_check(
      [](Tape& t, const ParameterSet& ps) {
        Matrix w(3, 1);
        w << 1.5, -2.0, 0.25;
        return sum(matmul(t.parameter(ps, 0), t.constant(w)));
      },
      p);
  CHECK(lin < 1e-9);
  ParameterSet q;
  q.add("x", Matrix::Constant(1, 1, 0.3));
  const double sine = finite_diff_check(
      [](Tape& t, const ParameterSet& ps) {
        return sum(elementwise(t.parameter(ps, 0), [](double v) { return std::sin(v); },
                               [](double v) { return std::cos(v); }));
      },
      q);
  CHECK(sine < 1e-8);
}

TEST_CASE("composite ops match finite differences") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    ParameterSet p;
    p.add("w", random_matrix(rng, 4, 6));
    p.add("b", random_matrix(rng, 1, 6));
    p.add("g", random_matrix(rng, 1, 6));
    p.add("beta", random_matrix(rng, 1, 6));
    p.add("table", random_matrix(rng, 5, 4));
    p.add("wq", random_matrix(rng, 6, 6));
    const Matrix x = random_matrix(rng, 6, 4);
    const std::vector<int> idx{0, 3, 3, 1, 4, 2};
    const std::vector<int> targets{1, 0, 5, 2, 2, 4};
    const std::vector<int> seg{0, 0, 1, 1, 1, 2};
    std::vector<std::uint8_t> allowed(36, 1);
    allowed[0 * 6 + 3] = 0;
    allowed[4 * 6 + 0] = 0;
    const std::vector<double> factors{1.0, 0.5, -1.0, 2.0, 0.0, 1.0};
    auto f = [&](Tape& t, const ParameterSet& ps) {
      Var h = add(t.constant(x), gather_rows(t.parameter(ps, 4), idx));
      h = linear(h, t.parameter(ps, 0), t.parameter(ps, 1));
      h = layer_norm(h, t.parameter(ps, 2), t.parameter(ps, 3));
      Var q = matmul(h, t.parameter(ps, 5));
      AttentionLayout lay{2, 3, 3, 2, true, {}};
      Var a = attention(q, h, h, lay);
      AttentionLayout lay2{2, 3, 3, 3, false, {2, 3}};
      a = add(a, attention(h, q, q, lay2));
      Var logp = log_softmax(scale_rows(a, factors), allowed);
      Var picked = pick(logp, targets);
      Var per = segment_sum(picked, seg, 3);
      Var extra = mean(log_sigmoid(segment_mean(relu(a), seg, 3)));
      return add(scale(sum(per), -1.0), extra);
    };
    CHECK(finite_diff_check(f, p) < 1e-4);
  }
}

TEST_CASE("non-finite losses are rejected") {
  ParameterSet p;
  p.add("x", Matrix::Constant(1, 1, -1.0));
  CHECK_THROWS_AS(gradient([](Tape& t, const ParameterSet& ps) { return sum(log(t.parameter(ps, 0))); }, p),
                  NonFiniteLoss);
}

TEST_CASE("adamw decoupled decay, clipping and cosine schedule") {
  ParameterSet p;
  p.add("x", Matrix::Constant(2, 2, 3.0));
  OptimizerConfig c;
  c.weight_decay = 0.01;
  AdamW opt(p, c);
  opt.step(p, zeros_like(p), 0.1);
  CHECK(std::abs(p.value(0)(0, 0) - 3.0 * (1 - 0.1 * 0.01)) < 1e-15);
  CHECK(p.step == 1);

  Gradients g{Matrix::Constant(1, 1, 2.0)};
  CHECK(clip_global_norm(g, 1.0) == doctest::Approx(2.0));
  CHECK(g[0](0, 0) == doctest::Approx(1.0));
  Gradients h{Matrix::Constant(2, 1, std::sqrt(2.0))};
  clip_global_norm(h, 1.0);
  CHECK(h[0](0, 0) == doctest::Approx(std::sqrt(2.0) / 2));

  CHECK(cosine_lr(0, 10, 1e-3, 1e-5) == 1e-3);
  CHECK(cosine_lr(10, 10, 1e-3, 1e-5) == doctest::Approx(1e-5));
  CHECK(cosine_lr(5, 10, 1.0, 0.0) == doctest::Approx(0.5));
}

TEST_CASE("clipping is idempotent and never increases the norm") {
  Rng rng(4);
  for (int t = 0; t < 100; ++t) {
    Gradients g{random_matrix(rng, 3, 2), random_matrix(rng, 1, 4)};
    const double before = global_norm(g);
    const double max = 0.1 + 3.0 * rng.uniform();
    clip_global_norm(g, max);
    const double once = global_norm(g);
    CHECK(once <= before + 1e-12);
    CHECK(once <= max + 1e-12);
    const Gradients snapshot = g;
    clip_global_norm(g, max);
    CHECK((g[0] - snapshot[0]).cwiseAbs().maxCoeff() < 1e-15);
  }
}

TEST_CASE("adamw without decay moves against the gradient sign") {
  Rng rng(8);
  ParameterSet p;
  p.add("x", random_matrix(rng, 3, 3));
  const Matrix start = p.value(0);
  OptimizerConfig c;
  c.weight_decay = 0.0;
  AdamW opt(p, c);
  const Gradients g{random_matrix(rng, 3, 3)};
  for (int i = 0; i < 5; ++i) opt.step(p, g, 1e-2);
  for (Eigen::Index i = 0; i < 9; ++i) {
    const double moved = p.value(0).data()[i] - start.data()[i];
    CHECK(moved * g[0].data()[i] < 0.0);
  }
}

TEST_CASE("adamw rejects mismatched gradients") {
  ParameterSet p;
  p.add("x", Matrix::Zero(2, 2));
  AdamW opt(p, OptimizerConfig{});
  CHECK_THROWS_AS(opt.step(p, Gradients{Matrix::Zero(3, 1)}, 0.1), ShapeMismatch);
}

TEST_CASE("parameter checkpoints round-trip exactly") {
  testing::TempDir dir("diff");
  Rng rng(12);
  ParameterSet p;
  p.add("a", random_matrix(rng, 3, 4));
  p.add("b", random_matrix(rng, 1, 7));
  p.step = 42;
  save_parameters(p, dir.path(), "m");
  const ParameterSet back = load_parameters(dir.path(), "m");
  CHECK(back == p);
  CHECK(back.step == 42);
  ParameterSet wrong;
  wrong.add("a", Matrix::Zero(3, 4));
  wrong.add("b", Matrix::Zero(1, 6));
  CHECK_THROWS(load_parameters_into(wrong, dir.path(), "m"));
}

}
