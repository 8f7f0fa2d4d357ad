#pragma once

// Exact rational-speech-act inference over small, fully enumerable
// reference games. Used as a standalone engine and as a brute-force oracle.

#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pragmatix/core.hpp"

namespace pragmatix::rsa {

// Unnormalized priors are accepted; they are normalized on use. Levels without
// an override are uniform.
struct ReferenceGame {
  std::vector<std::string> worlds;
  std::vector<std::string> utterances;
  std::vector<std::vector<bool>> truth;  // truth[u][w]
  std::map<int, std::vector<double>> world_prior;      // level -> P_level(w)
  std::map<int, std::vector<double>> utterance_prior;  // level -> P_level(u)

  std::size_t num_worlds() const { return worlds.size(); }
  std::size_t num_utterances() const { return utterances.size(); }

  std::vector<double> world_prior_at(int level) const;
  std::vector<double> utterance_prior_at(int level) const;

  // Shapes, prior lengths and signs, nonzero prior mass. Support invariants are
  // reported by the inference functions as DegenerateUtterance/DegenerateWorld.
  void validate() const;
};

enum class AgentKind { kListener, kSpeaker };

// Listener tables have one row per utterance (columns are worlds); speaker
// tables have one row per world (columns are utterances).
struct AgentTable {
  int level = 0;
  AgentKind kind = AgentKind::kListener;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> probs;  // row-major

  double operator()(std::size_t r, std::size_t c) const { return probs[r * cols + c]; }
  std::string name() const;
};

AgentTable literal_listener(const ReferenceGame& game);
AgentTable pragmatic_speaker(const AgentTable& listener,
                             const std::vector<double>& utterance_prior);
AgentTable pragmatic_listener(const AgentTable& speaker,
                              const std::vector<double>& world_prior);

// [L0, S1, L1, S2, L2, ...] with depth + 1 entries; agent level n uses the
// level-n priors of the game.
std::vector<AgentTable> rsa_chain(const ReferenceGame& game, int depth);

ReferenceGame game_from_json(const json& j);
ReferenceGame load_game(const std::filesystem::path& path);
json table_to_json(const AgentTable& t, const ReferenceGame& game);
std::string format_table(const AgentTable& t, const ReferenceGame& game);

}  // namespace pragmatix::rsa
