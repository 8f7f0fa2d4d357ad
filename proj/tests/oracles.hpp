#pragma once

// Independent reference computations shared by the unit tests and the
// acceptance runner. Nothing here calls the code under test.

#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "pragmatix/core.hpp"
#include "pragmatix/rng.hpp"
#include "pragmatix/rsa.hpp"

namespace oracle {

using pragmatix::Rng;
using pragmatix::Sign;
using pragmatix::Token;
using pragmatix::Utterance;
using pragmatix::rsa::ReferenceGame;

// Row-major table of plain probabilities.
struct Table {
  std::size_t rows = 0, cols = 0;
  std::vector<long double> p;
  long double at(std::size_t r, std::size_t c) const { return p[r * cols + c]; }
};

inline std::vector<long double> normalized(const std::vector<double>& w) {
  long double s = 0;
  for (std::size_t i = w.size(); i-- > 0;) s += w[i];
  std::vector<long double> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = w[i] / s;
  return out;
}

inline std::vector<long double> level_prior(const std::map<int, std::vector<double>>& m, int level,
                                            std::size_t n) {
  auto it = m.find(level);
  if (it == m.end()) return std::vector<long double>(n, 1.0L / static_cast<long double>(n));
  return normalized(it->second);
}

// Direct evaluation of the recursion in linear space, summing in reverse
// order. Rows are utterances for listeners and worlds for speakers.
inline std::vector<Table> rsa_brute(const ReferenceGame& g, int depth) {
  const std::size_t nw = g.worlds.size(), nu = g.utterances.size();
  std::vector<Table> out;
  Table l0{nu, nw, std::vector<long double>(nu * nw)};
  const auto pw0 = level_prior(g.world_prior, 0, nw);
  for (std::size_t u = 0; u < nu; ++u) {
    long double z = 0;
    for (std::size_t w = nw; w-- > 0;) z += (g.truth[u][w] ? 1.0L : 0.0L) * pw0[w];
    for (std::size_t w = 0; w < nw; ++w) l0.p[u * nw + w] = (g.truth[u][w] ? pw0[w] : 0.0L) / z;
  }
  out.push_back(l0);
  int level = 0;
  for (int i = 1; i <= depth; ++i) {
    const Table& prev = out.back();
    if (i % 2 == 1) {
      const auto pu = level_prior(g.utterance_prior, level + 1, nu);
      Table s{nw, nu, std::vector<long double>(nw * nu)};
      for (std::size_t w = 0; w < nw; ++w) {
        long double z = 0;
        for (std::size_t u = nu; u-- > 0;) z += prev.at(u, w) * pu[u];
        for (std::size_t u = 0; u < nu; ++u) s.p[w * nu + u] = prev.at(u, w) * pu[u] / z;
      }
      out.push_back(s);
      ++level;
    } else {
      const auto pw = level_prior(g.world_prior, level, nw);
      Table l{nu, nw, std::vector<long double>(nu * nw)};
      for (std::size_t u = 0; u < nu; ++u) {
        long double z = 0;
        for (std::size_t w = nw; w-- > 0;) z += prev.at(w, u) * pw[w];
        for (std::size_t w = 0; w < nw; ++w) l.p[u * nw + w] = prev.at(w, u) * pw[w] / z;
      }
      out.push_back(l);
    }
  }
  return out;
}

// Random game with full support: every utterance is true somewhere and every
// world has a true utterance. Priors are positive and unnormalized.
inline ReferenceGame random_game(Rng& rng, std::size_t max_w = 8, std::size_t max_u = 8,
                                 int levels = 3) {
  ReferenceGame g;
  const std::size_t nw = 2 + rng.index(max_w - 1), nu = 2 + rng.index(max_u - 1);
  for (std::size_t w = 0; w < nw; ++w) g.worlds.push_back("w" + std::to_string(w));
  for (std::size_t u = 0; u < nu; ++u) g.utterances.push_back("u" + std::to_string(u));
  g.truth.assign(nu, std::vector<bool>(nw, false));
  for (std::size_t u = 0; u < nu; ++u)
    for (std::size_t w = 0; w < nw; ++w) g.truth[u][w] = rng.bernoulli(0.4);
  for (std::size_t u = 0; u < nu; ++u) g.truth[u][rng.index(nw)] = true;
  for (std::size_t w = 0; w < nw; ++w) g.truth[rng.index(nu)][w] = true;
  for (int lv = 0; lv <= levels; ++lv) {
    if (rng.bernoulli(0.5)) {
      std::vector<double> p(nw);
      for (double& x : p) x = 0.05 + 3.0 * rng.uniform();
      g.world_prior[lv] = p;
    }
    if (lv >= 1 && rng.bernoulli(0.5)) {
      std::vector<double> p(nu);
      for (double& x : p) x = 0.05 + 3.0 * rng.uniform();
      g.utterance_prior[lv] = p;
    }
  }
  return g;
}

// Every utterance over m claims with distinct claims, length 1..l (exactly l
// when fixed).
inline std::vector<Utterance> all_utterances(int m, int l, bool fixed) {
  std::vector<Utterance> out;
  std::vector<Token> cur;
  auto rec = [&](auto&& self) -> void {
    const int len = static_cast<int>(cur.size());
    if (len > 0 && (!fixed || len == l))
      out.push_back(Utterance{cur, static_cast<std::size_t>(l)});
    if (len == l) return;
    for (int c = 0; c < m; ++c) {
      bool used = false;
      for (const auto& t : cur) used = used || t.claim == c;
      if (used) continue;
      for (Sign s : {Sign::kNegative, Sign::kPositive}) {
        cur.push_back({c, s});
        self(self);
        cur.pop_back();
      }
    }
  };
  rec(rec);
  return out;
}

// Upper-tail probability of a chi-square variable with k degrees of freedom
// (Wilson-Hilferty approximation).
inline double chi2_sf(double x, int k) {
  const double kk = k;
  const double z = (std::cbrt(x / kk) - (1.0 - 2.0 / (9.0 * kk))) / std::sqrt(2.0 / (9.0 * kk));
  return 0.5 * std::erfc(z / std::sqrt(2.0));
}

inline long double log_sigmoid(long double x) {
  return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

// Reference DPO loss from raw log-probabilities.
inline double dpo_reference(const std::vector<double>& lp_plus, const std::vector<double>& lp_minus,
                            const std::vector<double>& ref_plus,
                            const std::vector<double>& ref_minus, double beta) {
  long double s = 0;
  for (std::size_t i = 0; i < lp_plus.size(); ++i) {
    const long double h =
        beta * ((static_cast<long double>(lp_plus[i]) - ref_plus[i]) - (lp_minus[i] - ref_minus[i]));
    s -= log_sigmoid(h);
  }
  return static_cast<double>(s / static_cast<long double>(lp_plus.size()));
}

}  // namespace oracle
