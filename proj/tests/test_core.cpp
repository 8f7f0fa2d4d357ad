#include <doctest.h>

#include <fstream>

#include "helpers.hpp"
#include "pragmatix/core.hpp"
#include "pragmatix/rng.hpp"

using namespace pragmatix;
using testing::block_vocabulary;
using testing::utt;

TEST_SUITE("core") {

TEST_CASE("validate_utterance accepts a minimal utterance") {
  const Vocabulary v = block_vocabulary(4, 2);
  CHECK_NOTHROW(validate_utterance(utt({{0, 1}}), v));
}

TEST_CASE("validate_utterance rejects duplicates, unknown claims, overlong and empty") {
  const Vocabulary v = block_vocabulary(4, 2);
  try {
    validate_utterance(utt({{0, 1}, {0, -1}}), v);
    FAIL("expected DuplicateClaim");
  } catch (const DuplicateClaim& e) {
    CHECK(e.token_index() == 1);
  }
  CHECK_THROWS_AS(validate_utterance(utt({{5, 1}}), v), UnknownClaim);
  CHECK_THROWS_AS(validate_utterance(utt({{0, 1}, {1, 1}, {2, 1}}, 2), v), LengthExceeded);
  CHECK_THROWS_AS(validate_utterance(utt({}), v), EmptyUtterance);
}

TEST_CASE("group_distribution counts memberships") {
  std::vector<Claim> claims{{0, "a", {0}}, {1, "b", {0}}, {2, "c", {1}}, {3, "d", {0, 1}}};
  const Vocabulary v(claims, {{0, "A"}, {1, "B"}});
  auto g = group_distribution(utt({{0, 1}, {1, -1}, {2, 1}}), v);
  CHECK(g[0] == doctest::Approx(2.0 / 3).epsilon(1e-15));
  CHECK(g[1] == doctest::Approx(1.0 / 3).epsilon(1e-15));
  g = group_distribution(utt({{0, 1}, {1, 1}}), v);
  CHECK(g == std::vector<double>{1.0, 0.0});
  g = group_distribution(utt({{3, 1}}), v);
  CHECK(g == std::vector<double>{0.5, 0.5});
}

TEST_CASE("group_distribution is a probability vector for random utterances") {
  std::vector<Claim> claims;
  for (int j = 0; j < 12; ++j) {
    std::vector<int> gs{j % 3};
    if (j % 4 == 0) gs.push_back(3);
    claims.push_back({j, "c" + std::to_string(j), gs});
  }
  const Vocabulary v(claims, {{0, "A"}, {1, "B"}, {2, "C"}, {3, "D"}});
  Rng rng(7);
  for (int trial = 0; trial < 500; ++trial) {
    Utterance u;
    u.max_len = 6;
    std::vector<int> ids(12);
    for (int j = 0; j < 12; ++j) ids[j] = j;
    std::shuffle(ids.begin(), ids.end(), rng.engine());
    const std::size_t len = 1 + rng.index(6);
    for (std::size_t i = 0; i < len; ++i) u.tokens.push_back({ids[i], rng.bernoulli(0.5) ? Sign::kPositive : Sign::kNegative});
    const auto g = group_distribution(u, v);
    double s = 0;
    for (double x : g) {
      CHECK(x >= 0.0);
      s += x;
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("vocabulary construction enforces its invariants") {
  CHECK_THROWS_AS(Vocabulary({{0, "a", {0}}, {1, "a", {0}}}, {{0, "A"}}), SchemaMismatch);
  CHECK_THROWS_AS(Vocabulary({{0, "a", {}}}, {{0, "A"}}), SchemaMismatch);
  CHECK_THROWS_AS(Vocabulary({{1, "a", {0}}}, {{0, "A"}}), SchemaMismatch);
  CHECK_THROWS_AS(Vocabulary({{0, "a", {0}}}, {{0, "A"}, {1, "B"}}), SchemaMismatch);
  CHECK_THROWS_AS(Vocabulary({{0, "a", {2}}}, {{0, "A"}}), SchemaMismatch);
}

Dataset two_examples() {
  Dataset d;
  d.vocabulary = block_vocabulary(4, 2);
  d.class_names = {"x", "y"};
  d.examples.push_back({"e0", {0.5, -1.25, 3.0}, 0, {1, -1, 0, 1}, 0});
  d.examples.push_back({"e1", {0.1, 0.2, 1e-17}, 1, {0, 0, -1, 1}, std::nullopt});
  return d;
}

TEST_CASE("dataset save/load round-trip") {
  testing::TempDir dir("core");
  const Dataset d = two_examples();
  save_dataset(d, dir.path() / "d.jsonl");
  const Dataset back = load_dataset(dir.path() / "d.jsonl");
  CHECK(back == d);
  const Dataset again = load_dataset(dir.path() / "d.jsonl", d.vocabulary);
  CHECK(again == d);
}

TEST_CASE("dataset loading rejects bad semantics and empty files") {
  testing::TempDir dir("core");
  Dataset d = two_examples();
  d.examples[0].semantics[2] = 2;
  CHECK_THROWS_AS(d.validate(), SchemaMismatch);

  const Dataset good = two_examples();
  save_dataset(good, dir.path() / "d.jsonl");
  std::string text = read_file(dir.path() / "d.jsonl");
  const auto pos = text.find("[1,-1,0,1]");
  REQUIRE(pos != std::string::npos);
  text.replace(pos, 10, "[1,-1,2,1]");
  write_file_atomic(dir.path() / "bad.jsonl", text);
  CHECK_THROWS_AS(load_dataset(dir.path() / "bad.jsonl"), SchemaMismatch);

  const std::string header = text.substr(0, text.find('\n') + 1);
  write_file_atomic(dir.path() / "empty.jsonl", header);
  try {
    load_dataset(dir.path() / "empty.jsonl");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("empty dataset") != std::string::npos);
  }
}

TEST_CASE("utterance JSON round-trip and sign parsing") {
  const Utterance u = utt({{3, -1}, {0, 1}});
  CHECK(utterance_tokens_to_json(u).dump() == "[[3,-1],[0,1]]");
  CHECK(utterance_from_json(json::parse("[[3,-1],[0,1]]"), 6) == u);
  CHECK_THROWS_AS(utterance_from_json(json::parse("[[3,0]]"), 6), ParseError);
  CHECK_THROWS_AS(sign_from_int(2), ParseError);
}

TEST_CASE("derive_seed separates streams") {
  CHECK(derive_seed(1, {2, 3}) == derive_seed(1, {2, 3}));
  CHECK(derive_seed(1, {2, 3}) != derive_seed(1, {3, 2}));
  CHECK(derive_seed(1, {2}) != derive_seed(2, {2}));
}

}
