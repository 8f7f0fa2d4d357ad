#include <doctest.h>

#include <cmath>
#include <map>

#include "helpers.hpp"
#include "oracles.hpp"
#include "pragmatix/agents/listener.hpp"
#include "pragmatix/agents/speaker.hpp"
#include "pragmatix/diff/optim.hpp"
#include "pragmatix/metrics.hpp"

using namespace pragmatix;
using namespace pragmatix::agents;
using testing::utt;

namespace {

SpeakerConfig small_speaker(int m, int l, bool fixed, int d = 3) {
  SpeakerConfig c;
  c.num_claims = m;
  c.embedding_dim = d;
  c.max_len = l;
  c.fixed_length = fixed;
  c.width = 8;
  c.layers = 1;
  c.heads = 2;
  return c;
}

ListenerConfig small_listener(int m, int k, int l = 4) {
  ListenerConfig c;
  c.num_claims = m;
  c.num_classes = k;
  c.max_len = l;
  c.width = 8;
  c.layers = 1;
  c.heads = 2;
  return c;
}

Matrix one_embedding(std::vector<double> e) {
  Matrix m(1, static_cast<Eigen::Index>(e.size()));
  for (std::size_t i = 0; i < e.size(); ++i) m(0, static_cast<Eigen::Index>(i)) = e[i];
  return m;
}

}  // namespace

TEST_SUITE("agents") {

TEST_CASE("zero-initialized one-token speaker is uniform") {
  const SpeakerModel s(small_speaker(4, 1, true), InitMode::kZero, 0);
  const std::vector<double> h{0.3, -1.0, 2.0};
  CHECK(speaker_log_prob(s, h, utt({{2, 1}}, 1)) == doctest::Approx(-std::log(8.0)).epsilon(1e-14));
  CHECK(speaker_log_prob(s, h, utt({{2, 1}}, 1)) == speaker_log_prob(s, h, utt({{2, 1}}, 1)));
  double total = 0;
  for (const auto& u : oracle::all_utterances(4, 1, true)) total += std::exp(speaker_log_prob(s, h, u));
  CHECK(std::abs(total - 1.0) < 1e-10);
}

TEST_CASE("speaker probabilities sum to one over the utterance space") {
  Rng rng(1);
  for (bool fixed : {true, false}) {
    for (int m = 1; m <= 5; ++m) {
      for (int l = 1; l <= std::min(2, m); ++l) {
        const SpeakerModel s(small_speaker(m, l, fixed), InitMode::kRandom, 100 + m * 10 + l);
        const auto all = oracle::all_utterances(m, l, fixed);
        const Matrix h = one_embedding({rng.normal(), rng.normal(), rng.normal()});
        Matrix rows(static_cast<Eigen::Index>(all.size()), 3);
        for (Eigen::Index i = 0; i < rows.rows(); ++i) rows.row(i) = h.row(0);
        const auto lp = s.log_prob(rows, all);
        long double total = 0;
        for (double x : lp) total += std::exp(static_cast<long double>(x));
        CHECK(std::abs(static_cast<double>(total) - 1.0) < 1e-8);
      }
    }
  }
}

TEST_CASE("impossible utterances are rejected") {
  const SpeakerModel fixed(small_speaker(4, 2, true), InitMode::kRandom, 1);
  const std::vector<double> h{0.1, 0.2, 0.3};
  CHECK_THROWS_AS(speaker_log_prob(fixed, h, utt({{0, 1}}, 2)), ImpossibleUtterance);
  CHECK_THROWS_AS(speaker_log_prob(fixed, h, utt({{0, 1}, {0, -1}}, 2)), ImpossibleUtterance);
  CHECK_THROWS_AS(speaker_log_prob(fixed, h, utt({{0, 1}, {7, -1}}, 2)), ImpossibleUtterance);
}

TEST_CASE("zero-initialized speaker samples are uniform (chi-square)") {
  const SpeakerModel s(small_speaker(4, 1, true), InitMode::kZero, 0);
  const int n = 100000;
  Matrix h = Matrix::Zero(n, 3);
  std::vector<std::uint64_t> seeds(n);
  for (int i = 0; i < n; ++i) seeds[static_cast<std::size_t>(i)] = derive_seed(77, {static_cast<std::uint64_t>(i)});
  const auto samples = s.sample(h, seeds);
  std::map<std::pair<int, int>, int> counts;
  for (const auto& u : samples) {
    REQUIRE(u.size() == 1);
    ++counts[{u.tokens[0].claim, to_int(u.tokens[0].sign)}];
  }
  CHECK(counts.size() == 8);
  double chi2 = 0;
  for (const auto& [k, c] : counts) chi2 += (c - n / 8.0) * (c - n / 8.0) / (n / 8.0);
  CHECK(oracle::chi2_sf(chi2, 7) > 0.001);
}

TEST_CASE("speaker samples are valid, seeded and respect fixed length") {
  const SpeakerModel var(small_speaker(6, 3, false, 2), InitMode::kRandom, 5);
  const SpeakerModel fix(small_speaker(6, 3, true, 2), InitMode::kRandom, 5);
  std::vector<Claim> claims;
  for (int j = 0; j < 6; ++j) claims.push_back({j, "c" + std::to_string(j), {0}});
  const Vocabulary v(claims, {{0, "g"}});
  const int n = 10000;
  Matrix h(n, 2);
  Rng rng(3);
  for (Eigen::Index i = 0; i < h.size(); ++i) h.data()[i] = rng.normal();
  std::vector<std::uint64_t> seeds(n);
  for (int i = 0; i < n; ++i) seeds[static_cast<std::size_t>(i)] = derive_seed(1, {static_cast<std::uint64_t>(i)});
  const auto a = var.sample(h, seeds);
  std::map<std::size_t, int> lengths;
  for (const auto& u : a) {
    CHECK_NOTHROW(validate_utterance(u, v));
    ++lengths[u.size()];
  }
  CHECK(lengths.size() > 1);
  CHECK(var.sample(h, seeds) == a);
  for (const auto& u : fix.sample(h.topRows(500), std::span(seeds).first(500))) {
    CHECK(u.size() == 3);
    CHECK_NOTHROW(validate_utterance(u, v));
  }
  // Row i depends on its own seed only.
  const auto single = var.sample(h.middleRows(17, 1), std::span(seeds).subspan(17, 1));
  CHECK(single[0] == a[17]);
  Rng r1(9), r2(9);
  const std::vector<double> e{0.5, -0.5};
  for (int i = 0; i < 20; ++i) CHECK(speaker_sample(var, e, r1) == speaker_sample(var, e, r2));
}

TEST_CASE("speaker checkpoints reload to identical log-probabilities") {
  testing::TempDir dir("agents");
  const SpeakerModel s(small_speaker(5, 2, false), InitMode::kRandom, 8);
  diff::save_parameters(s.params(), dir.path(), "speaker");
  SpeakerModel t(small_speaker(5, 2, false), InitMode::kRandom, 9);
  diff::load_parameters_into(t.params(), dir.path(), "speaker");
  const std::vector<double> h{1.0, 0.0, -1.0};
  CHECK(speaker_log_prob(s, h, utt({{4, -1}, {1, 1}}, 2)) == speaker_log_prob(t, h, utt({{4, -1}, {1, 1}}, 2)));
}

TEST_CASE("zero-initialized listener is uniform") {
  const ListenerModel l(small_listener(5, 3), InitMode::kZero, 0);
  const auto p = listener_predict(l, utt({{1, 1}, {3, -1}}, 4));
  for (double x : p.probs) CHECK(std::abs(x - 1.0 / 3) < 1e-15);
  const ListenerModel two(small_listener(5, 2), InitMode::kZero, 0);
  CHECK(listener_predict(two, utt({{0, 1}}, 4)).probs == std::vector<double>{0.5, 0.5});
}

TEST_CASE("listener distributions sum to one") {
  const ListenerModel l(small_listener(6, 4), InitMode::kRandom, 3);
  Rng rng(2);
  for (int t = 0; t < 200; ++t) {
    Utterance u;
    u.max_len = 4;
    std::vector<int> ids{0, 1, 2, 3, 4, 5};
    std::shuffle(ids.begin(), ids.end(), rng.engine());
    for (std::size_t i = 0; i < 1 + rng.index(4); ++i)
      u.tokens.push_back({ids[i], rng.bernoulli(0.5) ? Sign::kPositive : Sign::kNegative});
    double s = 0;
    for (double x : listener_predict(l, u).probs) s += x;
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("listener argmax ignores a constant logit shift") {
  Rng rng(6);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> xi(5);
    for (double& x : xi) x = rng.normal();
    const int a = metrics::argmax(xi);
    for (double& x : xi) x += 3.7;
    CHECK(metrics::argmax(xi) == a);
    CHECK(metrics::argmax(softmax(xi)) == a);
  }
}

TEST_CASE("prior-scaled listener") {
  const Vocabulary v = testing::block_vocabulary(4, 2);
  const ListenerModel l(small_listener(4, 3), InitMode::kRandom, 4);
  const Utterance mixed = utt({{0, 1}, {2, -1}}, 4);
  const Utterance first = utt({{0, 1}, {1, 1}}, 4);
  const auto raw = listener_predict(l, mixed).probs;

  const auto tau0 = prior_scaled_predict(l, {{0.2, 0.8}, 0.0}, mixed, v);
  for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(tau0[c] - raw[c]) < 1e-15);
  const auto matched = prior_scaled_predict(l, {{0.5, 0.5}, 3.0}, mixed, v);
  for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(matched[c] - raw[c]) < 1e-15);
  const auto excluded = prior_scaled_predict(l, {{1.0, 0.0}, 1.0}, mixed, v);
  for (double p : excluded) CHECK(p == 1.0 / 3);
  const auto huge = prior_scaled_predict(l, {{0.9, 0.1}, 1e9}, first, v);
  for (double p : huge) CHECK(std::abs(p - 1.0 / 3) < 1e-6);

  const double kl = group_kl(std::vector<double>{1.0, 0.0}, std::vector<double>{0.25, 0.75});
  CHECK(kl == doctest::Approx(std::log(4.0)));
  CHECK(std::isinf(group_kl(std::vector<double>{0.5, 0.5}, std::vector<double>{1.0, 0.0})));
  CHECK(prior_logit_factor({{0.25, 0.75}, 2.0}, first, v) ==
        doctest::Approx(1.0 / (2.0 * std::log(4.0) + 1.0)));
}

TEST_CASE("prior divisor never amplifies logits") {
  const Vocabulary v = testing::block_vocabulary(6, 3);
  Rng rng(12);
  for (int t = 0; t < 300; ++t) {
    std::vector<double> pi{rng.uniform(), rng.uniform(), rng.uniform()};
    const double s = pi[0] + pi[1] + pi[2];
    for (double& x : pi) x /= s;
    Utterance u;
    u.max_len = 4;
    std::vector<int> ids{0, 1, 2, 3, 4, 5};
    std::shuffle(ids.begin(), ids.end(), rng.engine());
    for (std::size_t i = 0; i < 1 + rng.index(4); ++i) u.tokens.push_back({ids[i], Sign::kPositive});
    const double f = prior_logit_factor({pi, 10.0 * rng.uniform()}, u, v);
    CHECK(f > 0.0);
    CHECK(f <= 1.0);
  }
}

TEST_CASE("prior validation") {
  const Vocabulary v = testing::block_vocabulary(4, 2);
  CHECK_THROWS_AS((ListenerPrior{{0.5, 0.6}, 1.0}.validate(v)), ConfigError);
  CHECK_THROWS_AS((ListenerPrior{{1.0}, 1.0}.validate(v)), ConfigError);
  CHECK_THROWS_AS((ListenerPrior{{0.5, 0.5}, -1.0}.validate(v)), ConfigError);
  CHECK_NOTHROW((ListenerPrior{{1.0, 0.0}, 5.0}.validate(v)));
  const ListenerPrior p{{0.25, 0.75}, 5.0};
  const ListenerPrior back = listener_prior_from_json(to_json(p));
  CHECK(back.pi == p.pi);
  CHECK(back.tau == p.tau);
}

}
