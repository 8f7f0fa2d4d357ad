#include <doctest.h>

#include <algorithm>

#include "helpers.hpp"
#include "pragmatix/grounding.hpp"
#include "pragmatix/rng.hpp"

using namespace pragmatix;
using testing::utt;

namespace {

Example example_with(std::vector<int> z, int prediction = 0) {
  return {"ex", {0.0}, prediction, std::move(z), std::nullopt};
}

ListenerFn fixed_listener(std::vector<double> p) {
  return [p](const Utterance&) { return p; };
}

Utterance random_utterance(Rng& rng, int m, int l) {
  std::vector<int> ids(static_cast<std::size_t>(m));
  for (int j = 0; j < m; ++j) ids[static_cast<std::size_t>(j)] = j;
  std::shuffle(ids.begin(), ids.end(), rng.engine());
  Utterance u;
  u.max_len = static_cast<std::size_t>(l);
  const std::size_t len = 1 + rng.index(static_cast<std::size_t>(l));
  for (std::size_t i = 0; i < len; ++i)
    u.tokens.push_back({ids[i], rng.bernoulli(0.5) ? Sign::kPositive : Sign::kNegative});
  return u;
}

}  // namespace

TEST_SUITE("grounding") {

TEST_CASE("fidelity examples") {
  const std::vector<int> z{1, -1, 0, 1};
  CHECK(fidelity(utt({{0, 1}, {1, -1}}), z, 0.4).score == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(fidelity(utt({{0, -1}, {2, 1}}), z, 0.4).score == 0.0);
  for (double g : {0.0, 0.3, 1.0}) CHECK(fidelity(utt({{0, 1}, {3, 1}}), z, g).score == 1.0);
  const auto f = fidelity(utt({{0, 1}, {2, 1}, {1, -1}}), z, 0.5);
  CHECK(f.tp == 1);
  CHECK(f.tn == 1);
  CHECK(f.len == 3);
  CHECK(f.score == doctest::Approx(0.5));
}

TEST_CASE("fidelity is bounded and permutation invariant") {
  Rng rng(3);
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<int> z(10);
    for (int& x : z) x = static_cast<int>(rng.index(3)) - 1;
    Utterance u = random_utterance(rng, 10, 6);
    const double gamma = rng.uniform();
    const double s = fidelity(u, z, gamma).score;
    CHECK(s >= 0.0);
    CHECK(s <= 1.0);
    std::shuffle(u.tokens.begin(), u.tokens.end(), rng.engine());
    CHECK(fidelity(u, z, gamma).score == s);
  }
}

TEST_CASE("rank_score arithmetic and literal mode") {
  const auto r = make_rank_score(0.7, 0.5, 0.2);
  CHECK(r.total == doctest::Approx(0.8).epsilon(1e-15));
  const Example e = example_with({1, -1, 0, 1});
  bool called = false;
  ListenerFn spy = [&](const Utterance&) {
    called = true;
    return std::vector<double>{0.1, 0.9};
  };
  const auto lit = rank_score(utt({{0, 1}, {1, -1}}), e, spy, 0.0, 0.4);
  CHECK(lit.total == doctest::Approx(0.7).epsilon(1e-15));
  CHECK_FALSE(called);
  const auto hi = rank_score(utt({{0, 1}}), e, fixed_listener({0.9, 0.1}), 0.3, 0.4);
  const auto lo = rank_score(utt({{3, 1}}), e, fixed_listener({0.1, 0.9}), 0.3, 0.4);
  CHECK(hi.fidelity == lo.fidelity);
  CHECK(hi.total > lo.total);
}

TEST_CASE("total is strictly increasing in utility when alpha > 0") {
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const double f = rng.uniform(), a = 0.01 + rng.uniform(), u1 = rng.uniform();
    const double u2 = u1 + 1e-6 + (1.0 - u1) * rng.uniform();
    CHECK(make_rank_score(f, u2, a).total > make_rank_score(f, u1, a).total);
  }
}

TEST_CASE("rank_candidates pair counts, orientation and ties") {
  const Example e = example_with({1, -1, 0, 1});
  std::vector<Utterance> four{utt({{0, 1}}), utt({{1, 1}}), utt({{2, 1}}), utt({{3, -1}})};
  CHECK(rank_candidates(four, e, fixed_listener({0.5, 0.5}), 0.2, 0.4, 1).size() == 6);

  std::vector<Utterance> two{utt({{0, 1}}), utt({{1, 1}})};
  const std::vector<RankScore> scores{make_rank_score(0.8, 0, 0), make_rank_score(0.3, 0, 0)};
  const auto pairs = rank_candidates(two, scores, "ex", 1);
  REQUIRE(pairs.size() == 1);
  CHECK(pairs[0].u_plus == two[0]);
  CHECK_FALSE(pairs[0].tie);

  std::vector<Utterance> same(3, utt({{0, 1}}));
  const auto ties = rank_candidates(same, e, fixed_listener({0.5, 0.5}), 0.2, 0.4, 9);
  CHECK(ties.size() == 3);
  for (const auto& p : ties) CHECK(p.tie);
}

TEST_CASE("swapping candidates never changes which content wins a strict pair") {
  Rng rng(11);
  const Example e = example_with({1, -1, 0, 1, -1, 1, 0, 0});
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Utterance> c;
    for (int i = 0; i < 4; ++i) c.push_back(random_utterance(rng, 8, 3));
    const auto a = rank_candidates(c, e, fixed_listener({1.0, 0.0}), 0.0, 0.4, 1);
    std::reverse(c.begin(), c.end());
    const auto b = rank_candidates(c, e, fixed_listener({1.0, 0.0}), 0.0, 0.4, 1);
    for (const auto& p : a) {
      if (p.tie) continue;
      const bool found = std::any_of(b.begin(), b.end(), [&](const PreferencePair& q) {
        return !q.tie && q.u_plus == p.u_plus && q.u_minus == p.u_minus;
      });
      CHECK(found);
    }
  }
}

TEST_CASE("tie orientation is seeded") {
  const Example e = example_with({1, 1});
  std::vector<Utterance> c{utt({{0, 1}}), utt({{1, 1}})};
  int first = 0;
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto a = rank_candidates(c, e, fixed_listener({1.0}), 0.0, 0.4, s);
    const auto b = rank_candidates(c, e, fixed_listener({1.0}), 0.0, 0.4, s);
    CHECK(a == b);
    CHECK(a[0].tie);
    first += a[0].u_plus == c[0] ? 1 : 0;
  }
  CHECK(first > 60);
  CHECK(first < 140);
}

}
