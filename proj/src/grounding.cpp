#include "pragmatix/grounding.hpp"

#include "pragmatix/rng.hpp"

namespace pragmatix {

FidelityBreakdown fidelity(const Utterance& u, std::span<const int> semantics, double gamma) {
  FidelityBreakdown f;
  f.gamma = gamma;
  f.len = static_cast<int>(u.size());
  for (const Token& t : u.tokens) {
    const int z = semantics[static_cast<std::size_t>(t.claim)];
    if (t.sign == Sign::kPositive && z == 1) ++f.tp;
    if (t.sign == Sign::kNegative && z == -1) ++f.tn;
  }
  f.score = f.len == 0 ? 0.0 : (f.tp + gamma * f.tn) / f.len;
  return f;
}

RankScore make_rank_score(double fid, double utility, double alpha) {
  return {fid, utility, alpha, fid + alpha * utility};
}

RankScore rank_score(const Utterance& u, const Example& example, const ListenerFn& listener,
                     double alpha, double gamma) {
  const double fid = fidelity(u, example.semantics, gamma).score;
  if (alpha == 0.0) return make_rank_score(fid, 0.0, alpha);
  const auto dist = listener(u);
  return make_rank_score(fid, dist.at(static_cast<std::size_t>(example.prediction)), alpha);
}

std::vector<PreferencePair> rank_candidates(std::span<const Utterance> candidates,
                                            std::span<const RankScore> scores,
                                            const std::string& example_id,
                                            std::uint64_t tie_seed) {
  if (candidates.size() != scores.size())
    throw ShapeMismatch("one score per candidate expected");
  Rng coin(tie_seed);
  std::vector<PreferencePair> out;
  const std::size_t b = candidates.size();
  out.reserve(b * (b - 1) / 2);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = i + 1; j < b; ++j) {
      PreferencePair p;
      p.example_id = example_id;
      const double si = scores[i].total;
      const double sj = scores[j].total;
      bool first_wins;
      if (si == sj) {
        p.tie = true;
        first_wins = coin.bernoulli(0.5);
      } else {
        first_wins = si > sj;
      }
      p.u_plus = first_wins ? candidates[i] : candidates[j];
      p.u_minus = first_wins ? candidates[j] : candidates[i];
      out.push_back(std::move(p));
    }
  }
  return out;
}

std::vector<PreferencePair> rank_candidates(std::span<const Utterance> candidates,
                                            const Example& example, const ListenerFn& listener,
                                            double alpha, double gamma, std::uint64_t tie_seed) {
  std::vector<RankScore> scores;
  scores.reserve(candidates.size());
  for (const Utterance& u : candidates)
    scores.push_back(rank_score(u, example, listener, alpha, gamma));
  return rank_candidates(candidates, scores, example.id, tie_seed);
}

}  // namespace pragmatix
