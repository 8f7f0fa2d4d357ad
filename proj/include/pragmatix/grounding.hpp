#pragma once

// Fidelity of an utterance to ground-truth semantics, the ranking score that
// combines fidelity with listener utility, and ranked preference pairs.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pragmatix/core.hpp"

namespace pragmatix {

enum class PreferenceSource { kSimulated, kHuman };

struct PreferencePair {
  std::string example_id;
  Utterance u_plus;
  Utterance u_minus;
  bool tie = false;
  PreferenceSource source = PreferenceSource::kSimulated;

  bool operator==(const PreferencePair&) const = default;
};

struct FidelityBreakdown {
  int tp = 0;
  int tn = 0;
  int len = 0;
  double gamma = 0.0;
  double score = 0.0;  // (tp + gamma * tn) / len
};

struct RankScore {
  double fidelity = 0.0;
  double utility = 0.0;
  double alpha = 0.0;
  double total = 0.0;  // fidelity + alpha * utility
};

// Claims with unknown semantics (z = 0) count toward |u| only.
FidelityBreakdown fidelity(const Utterance& u, std::span<const int> semantics, double gamma);

RankScore make_rank_score(double fidelity, double utility, double alpha);

// Listener callback: utterance -> distribution over the k classes.
using ListenerFn = std::function<std::vector<double>(const Utterance&)>;

RankScore rank_score(const Utterance& u, const Example& example, const ListenerFn& listener,
                     double alpha, double gamma);

// All b(b-1)/2 pairs, oriented so u_plus has the larger total. Exact ties are
// oriented by a coin drawn from `tie_seed` and flagged.
std::vector<PreferencePair> rank_candidates(std::span<const Utterance> candidates,
                                            std::span<const RankScore> scores,
                                            const std::string& example_id,
                                            std::uint64_t tie_seed);

std::vector<PreferencePair> rank_candidates(std::span<const Utterance> candidates,
                                            const Example& example, const ListenerFn& listener,
                                            double alpha, double gamma, std::uint64_t tie_seed);

}  // namespace pragmatix
