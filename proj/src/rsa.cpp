#include "pragmatix/rsa.hpp"

#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

namespace pragmatix::rsa {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double safe_log(double p) { return p > 0.0 ? std::log(p) : kNegInf; }

std::vector<double> uniform(std::size_t n) {
  return std::vector<double>(n, 1.0 / static_cast<double>(n));
}

void check_prior(const std::vector<double>& prior, std::size_t n, const char* what) {
  if (prior.size() != n)
    throw ShapeMismatch(std::string(what) + " prior has " + std::to_string(prior.size()) +
                        " entries, expected " + std::to_string(n));
  double total = 0.0;
  for (double p : prior) {
    if (!(p >= 0.0) || !std::isfinite(p))
      throw ConfigError(std::string(what) + " prior entries must be finite and >= 0");
    total += p;
  }
  if (!(total > 0.0)) throw ConfigError(std::string(what) + " prior has no mass");
}

// Normalizes each row of `logits` (rows x cols) with log-sum-exp and returns
// probabilities. Returns the index of the first all -inf row, or -1.
long normalize_rows(std::vector<double>& logits, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = logits.data() + r * cols;
    double mx = kNegInf;
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, row[c]);
    if (mx == kNegInf) return static_cast<long>(r);
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += std::exp(row[c] - mx);
    const double lse = mx + std::log(acc);
    for (std::size_t c = 0; c < cols; ++c) row[c] = std::exp(row[c] - lse);
  }
  return -1;
}

}  // namespace

std::vector<double> ReferenceGame::world_prior_at(int level) const {
  auto it = world_prior.find(level);
  return it == world_prior.end() ? uniform(num_worlds()) : it->second;
}

std::vector<double> ReferenceGame::utterance_prior_at(int level) const {
  auto it = utterance_prior.find(level);
  return it == utterance_prior.end() ? uniform(num_utterances()) : it->second;
}

void ReferenceGame::validate() const {
  if (worlds.empty() || utterances.empty())
    throw ConfigError("reference game needs at least one world and one utterance");
  if (truth.size() != utterances.size())
    throw ShapeMismatch("truth must have one row per utterance");
  for (const auto& row : truth)
    if (row.size() != worlds.size())
      throw ShapeMismatch("truth rows must have one entry per world");
  for (const auto& [level, p] : world_prior) {
    if (level < 0) throw ConfigError("prior levels must be >= 0");
    check_prior(p, num_worlds(), "world");
  }
  for (const auto& [level, p] : utterance_prior) {
    if (level < 1) throw ConfigError("utterance prior levels start at 1");
    check_prior(p, num_utterances(), "utterance");
  }
}

std::string AgentTable::name() const {
  return (kind == AgentKind::kListener ? "L" : "S") + std::to_string(level);
}

AgentTable literal_listener(const ReferenceGame& game) {
  game.validate();
  const std::size_t nu = game.num_utterances();
  const std::size_t nw = game.num_worlds();
  const auto prior = game.world_prior_at(0);
  AgentTable t{0, AgentKind::kListener, nu, nw, std::vector<double>(nu * nw)};
  for (std::size_t u = 0; u < nu; ++u)
    for (std::size_t w = 0; w < nw; ++w)
      t.probs[u * nw + w] = game.truth[u][w] ? safe_log(prior[w]) : kNegInf;
  if (long bad = normalize_rows(t.probs, nu, nw); bad >= 0)
    throw DegenerateUtterance(static_cast<std::size_t>(bad));
  return t;
}

AgentTable pragmatic_speaker(const AgentTable& listener,
                             const std::vector<double>& utterance_prior) {
  if (listener.kind != AgentKind::kListener)
    throw ConfigError("pragmatic_speaker expects a listener table");
  const std::size_t nu = listener.rows;
  const std::size_t nw = listener.cols;
  check_prior(utterance_prior, nu, "utterance");
  AgentTable t{listener.level + 1, AgentKind::kSpeaker, nw, nu, std::vector<double>(nw * nu)};
  for (std::size_t w = 0; w < nw; ++w)
    for (std::size_t u = 0; u < nu; ++u)
      t.probs[w * nu + u] = safe_log(listener(u, w)) + safe_log(utterance_prior[u]);
  if (long bad = normalize_rows(t.probs, nw, nu); bad >= 0)
    throw DegenerateWorld(static_cast<std::size_t>(bad));
  return t;
}

AgentTable pragmatic_listener(const AgentTable& speaker, const std::vector<double>& world_prior) {
  if (speaker.kind != AgentKind::kSpeaker)
    throw ConfigError("pragmatic_listener expects a speaker table");
  const std::size_t nw = speaker.rows;
  const std::size_t nu = speaker.cols;
  check_prior(world_prior, nw, "world");
  AgentTable t{speaker.level, AgentKind::kListener, nu, nw, std::vector<double>(nu * nw)};
  for (std::size_t u = 0; u < nu; ++u)
    for (std::size_t w = 0; w < nw; ++w)
      t.probs[u * nw + w] = safe_log(speaker(w, u)) + safe_log(world_prior[w]);
  if (long bad = normalize_rows(t.probs, nu, nw); bad >= 0)
    throw DegenerateUtterance(static_cast<std::size_t>(bad));
  return t;
}

std::vector<AgentTable> rsa_chain(const ReferenceGame& game, int depth) {
  if (depth < 0) throw ConfigError("depth must be >= 0");
  std::vector<AgentTable> chain;
  chain.push_back(literal_listener(game));
  for (int i = 1; i <= depth; ++i) {
    const AgentTable& prev = chain.back();
    if (prev.kind == AgentKind::kListener) {
      chain.push_back(pragmatic_speaker(prev, game.utterance_prior_at(prev.level + 1)));
    } else {
      chain.push_back(pragmatic_listener(prev, game.world_prior_at(prev.level)));
    }
  }
  return chain;
}

ReferenceGame game_from_json(const json& j) {
  ReferenceGame g;
  try {
    g.worlds = j.at("worlds").get<std::vector<std::string>>();
    g.utterances = j.at("utterances").get<std::vector<std::string>>();
    for (const json& row : j.at("truth")) {
      std::vector<bool> r;
      for (const json& v : row) {
        const int x = v.get<int>();
        if (x != 0 && x != 1) throw ParseError("truth entries must be 0 or 1", 0, "truth");
        r.push_back(x == 1);
      }
      g.truth.push_back(std::move(r));
    }
    if (j.contains("priors")) {
      const json& p = j.at("priors");
      auto read = [](const json& levels, std::map<int, std::vector<double>>& out) {
        for (const auto& [key, value] : levels.items())
          out[std::stoi(key)] = value.get<std::vector<double>>();
      };
      if (p.contains("world")) read(p.at("world"), g.world_prior);
      if (p.contains("utterance")) read(p.at("utterance"), g.utterance_prior);
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("reference game: ") + e.what());
  } catch (const std::invalid_argument&) {
    throw ParseError("prior levels must be integers", 0, "priors");
  }
  g.validate();
  return g;
}

ReferenceGame load_game(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ParseError(e.what());
  }
  return game_from_json(j);
}

json table_to_json(const AgentTable& t, const ReferenceGame& game) {
  const bool listener = t.kind == AgentKind::kListener;
  const auto& row_names = listener ? game.utterances : game.worlds;
  const auto& col_names = listener ? game.worlds : game.utterances;
  json rows = json::object();
  for (std::size_t r = 0; r < t.rows; ++r) {
    json row = json::object();
    for (std::size_t c = 0; c < t.cols; ++c) row[col_names[c]] = t(r, c);
    rows[row_names[r]] = row;
  }
  return {{"agent", t.name()}, {"level", t.level},
          {"kind", listener ? "listener" : "speaker"}, {"probs", rows}};
}

std::string format_table(const AgentTable& t, const ReferenceGame& game) {
  const bool listener = t.kind == AgentKind::kListener;
  const auto& row_names = listener ? game.utterances : game.worlds;
  const auto& col_names = listener ? game.worlds : game.utterances;
  std::ostringstream os;
  os << t.name() << (listener ? " P(world | utterance)" : " P(utterance | world)") << "\n";
  os << std::setw(16) << "";
  for (const auto& c : col_names) os << std::setw(14) << c;
  os << "\n";
  os << std::fixed << std::setprecision(6);
  for (std::size_t r = 0; r < t.rows; ++r) {
    os << std::setw(16) << row_names[r];
    for (std::size_t c = 0; c < t.cols; ++c) os << std::setw(14) << t(r, c);
    os << "\n";
  }
  return os.str();
}

}  // namespace pragmatix::rsa
