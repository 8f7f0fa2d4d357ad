#include "pragmatix/core.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <unordered_set>

namespace pragmatix {

Sign sign_from_int(int value) {
  if (value == 1) return Sign::kPositive;
  if (value == -1) return Sign::kNegative;
  throw ParseError("sign must be -1 or +1, got " + std::to_string(value));
}

Vocabulary::Vocabulary(std::vector<Claim> claims, std::vector<ClaimGroup> groups)
    : claims_(std::move(claims)), groups_(std::move(groups)) {
  if (claims_.empty()) throw SchemaMismatch("vocabulary has no claims");
  if (groups_.empty()) throw SchemaMismatch("vocabulary has no groups");
  for (std::size_t g = 0; g < groups_.size(); ++g) {
    if (groups_[g].id != static_cast<int>(g))
      throw SchemaMismatch("group ids must be contiguous from 0");
  }
  std::set<std::string> names;
  std::vector<bool> referenced(groups_.size(), false);
  for (std::size_t c = 0; c < claims_.size(); ++c) {
    const Claim& claim = claims_[c];
    if (claim.id != static_cast<int>(c))
      throw SchemaMismatch("claim ids must be 0..m-1 in order (claim '" +
                           claim.name + "')");
    if (!names.insert(claim.name).second)
      throw SchemaMismatch("duplicate claim name '" + claim.name + "'");
    if (claim.groups.empty())
      throw SchemaMismatch("claim '" + claim.name + "' has no group");
    std::set<int> seen;
    for (int g : claim.groups) {
      if (g < 0 || g >= static_cast<int>(groups_.size()))
        throw SchemaMismatch("claim '" + claim.name + "' references unknown group " +
                             std::to_string(g));
      if (!seen.insert(g).second)
        throw SchemaMismatch("claim '" + claim.name + "' lists group " +
                             std::to_string(g) + " twice");
      referenced[static_cast<std::size_t>(g)] = true;
    }
  }
  for (std::size_t g = 0; g < groups_.size(); ++g) {
    if (!referenced[g])
      throw SchemaMismatch("group '" + groups_[g].name + "' has no claims");
  }
}

std::optional<int> Vocabulary::find_claim(const std::string& name) const {
  for (const Claim& c : claims_)
    if (c.name == name) return c.id;
  return std::nullopt;
}

const Utterance& validate_utterance(const Utterance& u, const Vocabulary& v) {
  if (u.tokens.empty()) throw EmptyUtterance();
  const auto m = static_cast<int>(v.num_claims());
  std::unordered_set<int> seen;
  for (std::size_t i = 0; i < u.tokens.size(); ++i) {
    if (i >= u.max_len) throw LengthExceeded(i);
    const Token& t = u.tokens[i];
    if (t.claim < 0 || t.claim >= m) throw UnknownClaim(i);
    if (!seen.insert(t.claim).second) throw DuplicateClaim(i);
    if (t.sign != Sign::kPositive && t.sign != Sign::kNegative)
      throw ParseError("invalid sign at token " + std::to_string(i));
  }
  return u;
}

std::vector<double> group_distribution(const Utterance& u, const Vocabulary& v) {
  std::vector<double> counts(v.num_groups(), 0.0);
  double total = 0.0;
  for (const Token& t : u.tokens) {
    for (int g : v.claim(t.claim).groups) {
      counts[static_cast<std::size_t>(g)] += 1.0;
      total += 1.0;
    }
  }
  for (double& c : counts) c /= total;
  return counts;
}

json utterance_tokens_to_json(const Utterance& u) {
  json out = json::array();
  for (const Token& t : u.tokens) out.push_back({t.claim, to_int(t.sign)});
  return out;
}

Utterance utterance_from_json(const json& tokens, std::size_t max_len) {
  if (!tokens.is_array()) throw ParseError("utterance must be an array");
  Utterance u;
  u.max_len = max_len;
  for (const json& pair : tokens) {
    if (!pair.is_array() || pair.size() != 2 || !pair[0].is_number_integer() ||
        !pair[1].is_number_integer())
      throw ParseError("utterance token must be [claim, sign]");
    u.tokens.push_back({pair[0].get<int>(), sign_from_int(pair[1].get<int>())});
  }
  return u;
}

json vocabulary_to_json(const Vocabulary& v) {
  json claims = json::array();
  for (const Claim& c : v.claims())
    claims.push_back({{"id", c.id}, {"name", c.name}, {"groups", c.groups}});
  json groups = json::array();
  for (const ClaimGroup& g : v.groups())
    groups.push_back({{"id", g.id}, {"name", g.name}});
  return {{"claims", claims}, {"groups", groups}};
}

namespace {

template <typename T>
T field(const json& j, const char* name, std::size_t line = 0) {
  if (!j.is_object() || !j.contains(name)) throw ParseError("missing field", line, name);
  try {
    return j.at(name).get<T>();
  } catch (const json::exception&) {
    throw ParseError("wrong type", line, name);
  }
}

}  // namespace

Vocabulary vocabulary_from_json(const json& j) {
  std::vector<Claim> claims;
  std::vector<ClaimGroup> groups;
  for (const json& c : field<json>(j, "claims")) {
    claims.push_back({field<int>(c, "id"), field<std::string>(c, "name"),
                      field<std::vector<int>>(c, "groups")});
  }
  for (const json& g : field<json>(j, "groups"))
    groups.push_back({field<int>(g, "id"), field<std::string>(g, "name")});
  return Vocabulary(std::move(claims), std::move(groups));
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw Error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Vocabulary load_vocabulary(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ParseError(e.what());
  }
  return vocabulary_from_json(j);
}

void save_vocabulary(const Vocabulary& v, const std::filesystem::path& path) {
  write_file_atomic(path, vocabulary_to_json(v).dump(2) + "\n");
}

json example_to_json(const Example& e) {
  return {{"id", e.id},
          {"embedding", e.embedding},
          {"prediction", e.prediction},
          {"semantics", e.semantics},
          {"label", e.label ? json(*e.label) : json(nullptr)}};
}

void Dataset::validate() const {
  if (examples.empty()) throw ParseError("empty dataset");
  const std::size_t m = num_claims();
  const std::size_t d = embedding_dim();
  const auto k = static_cast<int>(num_classes());
  if (k < 1) throw SchemaMismatch("no classes");
  for (const Example& e : examples) {
    if (e.embedding.size() != d)
      throw SchemaMismatch("example '" + e.id + "' embedding dimension " +
                           std::to_string(e.embedding.size()) + " != " + std::to_string(d));
    if (e.semantics.size() != m)
      throw SchemaMismatch("example '" + e.id + "' semantics length " +
                           std::to_string(e.semantics.size()) + " != m=" + std::to_string(m));
    for (int z : e.semantics)
      if (z < -1 || z > 1)
        throw SchemaMismatch("example '" + e.id + "' semantics entry " + std::to_string(z));
    if (e.prediction < 0 || e.prediction >= k)
      throw SchemaMismatch("example '" + e.id + "' prediction out of range");
    if (e.label && (*e.label < 0 || *e.label >= k))
      throw SchemaMismatch("example '" + e.id + "' label out of range");
  }
}

void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  d.validate();
  std::string out;
  json header = {{"m", d.num_claims()},
                 {"d", d.embedding_dim()},
                 {"k", d.num_classes()},
                 {"class_names", d.class_names},
                 {"vocabulary", vocabulary_to_json(d.vocabulary)}};
  out += header.dump() + "\n";
  for (const Example& e : d.examples) out += example_to_json(e).dump() + "\n";
  write_file_atomic(path, out);
}

namespace {

Dataset parse_dataset(const std::filesystem::path& path, const Vocabulary* vocab) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  Dataset d;
  std::size_t m = 0, dim = 0, k = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error&) {
      throw ParseError("malformed JSON", lineno);
    }
    if (!have_header) {
      m = field<std::size_t>(j, "m", lineno);
      dim = field<std::size_t>(j, "d", lineno);
      k = field<std::size_t>(j, "k", lineno);
      d.class_names = field<std::vector<std::string>>(j, "class_names", lineno);
      if (d.class_names.size() != k) throw SchemaMismatch("class_names length != k");
      if (j.contains("vocabulary")) {
        d.vocabulary = vocabulary_from_json(j.at("vocabulary"));
        if (vocab && !(*vocab == d.vocabulary))
          throw SchemaMismatch("embedded vocabulary differs from the supplied one");
      } else if (vocab) {
        d.vocabulary = *vocab;
      } else {
        throw ParseError("header has no vocabulary and none was supplied", lineno,
                         "vocabulary");
      }
      if (d.vocabulary.num_claims() != m)
        throw SchemaMismatch("header m=" + std::to_string(m) + " but vocabulary has " +
                             std::to_string(d.vocabulary.num_claims()) + " claims");
      have_header = true;
      continue;
    }
    Example e;
    e.id = field<std::string>(j, "id", lineno);
    e.embedding = field<std::vector<double>>(j, "embedding", lineno);
    e.prediction = field<int>(j, "prediction", lineno);
    e.semantics = field<std::vector<int>>(j, "semantics", lineno);
    if (!j.contains("label")) throw ParseError("missing field", lineno, "label");
    if (!j.at("label").is_null()) e.label = field<int>(j, "label", lineno);
    if (e.embedding.size() != dim)
      throw SchemaMismatch("line " + std::to_string(lineno) + ": embedding length != d");
    if (e.semantics.size() != m)
      throw SchemaMismatch("line " + std::to_string(lineno) + ": semantics length != m");
    d.examples.push_back(std::move(e));
  }
  if (!have_header) throw ParseError("missing header line");
  if (d.examples.empty()) throw ParseError("empty dataset");
  d.validate();
  return d;
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& path) {
  return parse_dataset(path, nullptr);
}

Dataset load_dataset(const std::filesystem::path& path, const Vocabulary& vocab) {
  return parse_dataset(path, &vocab);
}

}  // namespace pragmatix
