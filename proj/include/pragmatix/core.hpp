#pragma once

// Domain types shared by every module: claims, groups, utterances, examples
// and datasets, plus the JSON / JSON Lines file formats for them.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pragmatix/errors.hpp"

namespace pragmatix {

using json = nlohmann::json;

class EmptyUtterance : public UtteranceError {
 public:
  EmptyUtterance() : UtteranceError("empty utterance", 0) {}
};

enum class Sign : int { kNegative = -1, kPositive = 1 };

inline int to_int(Sign s) { return static_cast<int>(s); }
Sign sign_from_int(int value);

struct Claim {
  int id = 0;
  std::string name;
  std::vector<int> groups;
  bool operator==(const Claim&) const = default;
};

struct ClaimGroup {
  int id = 0;
  std::string name;
  bool operator==(const ClaimGroup&) const = default;
};

// Immutable claim vocabulary. Construction enforces: claim ids are 0..m-1 in
// order, names unique, every claim has at least one group, group ids are
// contiguous from 0 and each group is referenced by some claim.
class Vocabulary {
 public:
  Vocabulary() = default;
  Vocabulary(std::vector<Claim> claims, std::vector<ClaimGroup> groups);

  std::size_t num_claims() const { return claims_.size(); }
  std::size_t num_groups() const { return groups_.size(); }
  const std::vector<Claim>& claims() const { return claims_; }
  const std::vector<ClaimGroup>& groups() const { return groups_; }
  const Claim& claim(int id) const { return claims_.at(static_cast<std::size_t>(id)); }
  std::optional<int> find_claim(const std::string& name) const;

  bool operator==(const Vocabulary&) const = default;

 private:
  std::vector<Claim> claims_;
  std::vector<ClaimGroup> groups_;
};

struct Token {
  int claim = 0;
  Sign sign = Sign::kPositive;
  bool operator==(const Token&) const = default;
};

struct Utterance {
  std::vector<Token> tokens;
  std::size_t max_len = 0;

  std::size_t size() const { return tokens.size(); }
  bool operator==(const Utterance&) const = default;
};

struct Example {
  std::string id;
  std::vector<double> embedding;
  int prediction = 0;
  std::vector<int> semantics;  // entries in {-1, 0, +1}, length m
  std::optional<int> label;

  bool operator==(const Example&) const = default;
};

struct Dataset {
  Vocabulary vocabulary;
  std::vector<Example> examples;
  std::vector<std::string> class_names;

  std::size_t num_claims() const { return vocabulary.num_claims(); }
  std::size_t num_classes() const { return class_names.size(); }
  std::size_t embedding_dim() const {
    return examples.empty() ? 0 : examples.front().embedding.size();
  }
  // Throws SchemaMismatch / ParseError when an invariant is broken.
  void validate() const;

  bool operator==(const Dataset&) const = default;
};

// Returns the utterance unchanged when every claim id is < m, no claim repeats
// and 1 <= size <= max_len. Throws the matching UtteranceError otherwise.
const Utterance& validate_utterance(const Utterance& u, const Vocabulary& v);

// g(u): share of group memberships over the claims in u. A claim that belongs
// to several groups contributes one membership to each.
std::vector<double> group_distribution(const Utterance& u, const Vocabulary& v);

// JSON helpers. Utterance tokens serialize as [[claim, sign], ...].
json utterance_tokens_to_json(const Utterance& u);
Utterance utterance_from_json(const json& tokens, std::size_t max_len);

json vocabulary_to_json(const Vocabulary& v);
Vocabulary vocabulary_from_json(const json& j);
Vocabulary load_vocabulary(const std::filesystem::path& path);
void save_vocabulary(const Vocabulary& v, const std::filesystem::path& path);

json example_to_json(const Example& e);

// JSON Lines: a header line {m, d, k, class_names, vocabulary} followed by one
// example per line.
void save_dataset(const Dataset& d, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);
// Variant for files whose header does not embed the vocabulary.
Dataset load_dataset(const std::filesystem::path& path, const Vocabulary& vocab);

// Writes `contents` to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

}  // namespace pragmatix
