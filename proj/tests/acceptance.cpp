// End-to-end acceptance runner. Prints one PASS/FAIL line per criterion on
// stdout; per-seed progress goes to stderr. Exit status is 0 only when every
// selected criterion passes.

#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "helpers.hpp"
#include "oracles.hpp"
#include "pragmatix/cli.hpp"
#include "pragmatix/diff/tape.hpp"
#include "pragmatix/metrics.hpp"
#include "pragmatix/rsa.hpp"
#include "pragmatix/synth.hpp"
#include "pragmatix/training.hpp"

using namespace pragmatix;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double x, int precision = 3) {
  std::ostringstream os;
  os << std::setprecision(precision) << x;
  return os.str();
}

const std::vector<std::uint64_t> kSeeds{1, 2, 3, 4, 5};

// Reduced agents for a single CPU core; see README.
training::TrainConfig desk_config(std::uint64_t seed, double alpha, int iterations) {
  training::TrainConfig c;
  c.alpha = alpha;
  c.iterations = iterations;
  c.max_len = 4;
  c.fixed_length = false;
  c.speaker_width = 32;
  c.speaker_layers = 1;
  c.speaker_heads = 2;
  c.listener_width = 32;
  c.listener_layers = 1;
  c.listener_heads = 2;
  c.speaker_optimizer.learning_rate = 3e-3;
  c.listener_optimizer.learning_rate = 3e-3;
  c.n_expl = 8;
  c.seed = seed;
  return c;
}

synth::World desk_world(std::uint64_t seed, double epsilon) {
  synth::WorldSpec s = synth::default_desk_world();
  s.seed = seed;
  s.epsilon = epsilon;
  return synth::generate_world(s);
}

metrics::EvalReport train_and_eval(const synth::World& w, const training::TrainConfig& c) {
  const auto r = training::run(w.train, w.val, c);
  metrics::EvalOptions o;
  o.per_example = 4;
  o.seed = derive_seed(c.seed, {0xacce97ULL});
  o.kl_cap = c.kl_cap;
  return metrics::evaluate(r.models.speaker, r.models.listener, c.prior ? &*c.prior : nullptr, w.val, o);
}

// ---------------------------------------------------------------------------

Outcome rsa_oracle() {
  const auto t0 = Clock::now();
  Rng rng(4242);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const rsa::ReferenceGame g = oracle::random_game(rng, 8, 8, 4);
    const int depth = static_cast<int>(rng.index(5));
    const auto got = rsa::rsa_chain(g, depth);
    const auto want = oracle::rsa_brute(g, depth);
    if (got.size() != want.size()) return {false, "chain length mismatch"};
    for (std::size_t i = 0; i < got.size(); ++i)
      for (std::size_t r = 0; r < got[i].rows; ++r)
        for (std::size_t c = 0; c < got[i].cols; ++c)
          worst = std::max(worst, std::abs(got[i](r, c) - static_cast<double>(want[i].at(r, c))));
  }
  rsa::ReferenceGame g;
  g.worlds = {"both", "glasses", "neither"};
  g.utterances = {"glasses", "hat", "none"};
  g.truth = {{true, true, false}, {true, false, false}, {false, false, true}};
  const auto chain = rsa::rsa_chain(g, 2);
  const bool exact = std::abs(chain[0](0, 0) - 0.5) < 1e-15 && std::abs(chain[1](0, 1) - 2.0 / 3.0) < 1e-15 &&
                     std::abs(chain[2](0, 1) - 0.75) < 1e-15;
  const double secs = seconds_since(t0);
  return {worst < 1e-12 && exact && secs < 10.0,
          "100 games, max |diff| " + fmt(worst) + ", glasses/hat " + (exact ? "exact" : "WRONG") + ", " +
              fmt(secs) + " s"};
}

Outcome dpo_identities() {
  const auto t0 = Clock::now();
  double worst_identity = 0.0, worst_grad = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    Dataset d;
    d.vocabulary = testing::block_vocabulary(3, 1);
    d.class_names = {"a", "b"};
    for (int i = 0; i < 4; ++i)
      d.examples.push_back({"x" + std::to_string(i), {rng.normal(), rng.normal()}, i % 2, {1, -1, 0}, std::nullopt});
    agents::SpeakerConfig sc;
    sc.num_claims = 3;
    sc.embedding_dim = 2;
    sc.max_len = 2;
    sc.fixed_length = seed % 2 == 0;
    sc.width = 4;
    sc.layers = 1;
    sc.heads = 2;
    const agents::SpeakerModel ref(sc, agents::InitMode::kRandom, seed);
    agents::SpeakerModel policy(sc, agents::InitMode::kRandom, seed + 100);
    const auto all = oracle::all_utterances(3, 2, sc.fixed_length);
    std::vector<PreferencePair> pairs;
    for (int i = 0; i < 6; ++i) {
      const auto a = rng.index(all.size());
      const auto b = (a + 1 + rng.index(all.size() - 1)) % all.size();
      pairs.push_back({d.examples[static_cast<std::size_t>(i % 4)].id, all[a], all[b], false,
                       PreferenceSource::kSimulated});
    }
    const training::ExampleIndex idx(d.examples);
    worst_identity = std::max(worst_identity, std::abs(training::dpo_loss(ref, ref, pairs, idx, 0.6) - std::log(2.0)));
    std::vector<double> rp, rm;
    for (const auto& p : pairs) {
      rp.push_back(agents::speaker_log_prob(ref, idx.at(p.example_id).embedding, p.u_plus));
      rm.push_back(agents::speaker_log_prob(ref, idx.at(p.example_id).embedding, p.u_minus));
    }
    worst_grad = std::max(worst_grad, diff::finite_diff_check(
                                          [&](diff::Tape& tape, const diff::ParameterSet&) {
                                            return training::dpo_loss(tape, policy, pairs, rp, rm, idx, 0.6);
                                          },
                                          policy.params()));
  }
  const double secs = seconds_since(t0);
  return {worst_identity < 1e-12 && worst_grad < 1e-4 && secs < 60.0,
          "|L(S,S) - log 2| " + fmt(worst_identity) + ", max rel grad err " + fmt(worst_grad) + " over 20 seeds, " +
              fmt(secs) + " s"};
}

Outcome speaker_normalization() {
  double worst = 0.0;
  int configs = 0;
  Rng rng(7);
  for (bool fixed : {true, false}) {
    for (int m = 1; m <= 5; ++m) {
      for (int l = 1; l <= std::min(2, m); ++l) {
        agents::SpeakerConfig c;
        c.num_claims = m;
        c.embedding_dim = 3;
        c.max_len = l;
        c.fixed_length = fixed;
        c.width = 8;
        c.layers = 1;
        c.heads = 2;
        const agents::SpeakerModel s(c, agents::InitMode::kRandom, derive_seed(9, {static_cast<std::uint64_t>(m), static_cast<std::uint64_t>(l)}));
        const auto all = oracle::all_utterances(m, l, fixed);
        for (int rep = 0; rep < 3; ++rep) {
          const std::vector<double> h{rng.normal(), rng.normal(), rng.normal()};
          long double total = 0;
          for (const auto& u : all) total += std::exp(static_cast<long double>(agents::speaker_log_prob(s, h, u)));
          worst = std::max(worst, std::abs(static_cast<double>(total) - 1.0));
        }
        ++configs;
      }
    }
  }
  return {worst < 1e-8, fmt(configs) + " configurations, max |sum - 1| " + fmt(worst)};
}

Outcome pragmatic_gap() {
  int wins = 0;
  std::string per_seed;
  for (std::uint64_t seed : kSeeds) {
    const auto w = desk_world(seed, synth::default_desk_world().epsilon);
    const double literal = train_and_eval(w, desk_config(seed, 0.0, 20)).listener_accuracy;
    const double pragmatic = train_and_eval(w, desk_config(seed, 0.2, 20)).listener_accuracy;
    const bool ok = pragmatic - literal >= 0.10;
    wins += ok ? 1 : 0;
    std::cerr << "  gap seed " << seed << ": literal " << fmt(literal) << ", pragmatic " << fmt(pragmatic) << "\n";
    per_seed += " " + fmt(100 * (pragmatic - literal), 3);
  }
  return {wins >= 4, fmt(wins) + "/5 seeds with gap >= 10 pts (gaps in pts:" + per_seed + ")"};
}

Outcome preference_alignment() {
  int wins = 0;
  std::string per_seed;
  for (std::uint64_t seed : kSeeds) {
    const auto w = desk_world(seed, synth::default_desk_world().epsilon);
    auto config = [&](double tau) {
      auto c = desk_config(seed, 0.5, 30);
      c.prior = agents::ListenerPrior{{0.5, 0.5, 0.0, 0.0}, tau};
      return c;
    };
    const auto base = train_and_eval(w, config(0.0));
    per_seed += " s" + std::to_string(seed);
    bool ok = base.kl.has_value() && base.kl->mean > 0.0;
    std::cerr << "  alignment seed " << seed << ": tau 0 acc " << fmt(base.listener_accuracy) << " kl "
              << fmt(base.kl ? base.kl->mean : 0.0) << "\n";
    for (double tau : {1.0, 5.0}) {
      const auto r = train_and_eval(w, config(tau));
      const double nkl = ok ? metrics::normalized_kl(r.kl->mean, base.kl->mean) : 1.0;
      const double drop = base.listener_accuracy - r.listener_accuracy;
      ok = ok && nkl < 0.8 && drop < 0.05;
      std::cerr << "  alignment seed " << seed << ": tau " << tau << " acc " << fmt(r.listener_accuracy)
                << " normalized kl " << fmt(nkl) << "\n";
      per_seed += " " + fmt(nkl, 2) + "/" + fmt(100 * drop, 2);
      if (tau == 1.0) per_seed += ",";
    }
    wins += ok ? 1 : 0;
  }
  return {wins >= 4, fmt(wins) + "/5 seeds with normalized KL < 0.8 and accuracy drop < 5 pts for tau 1 and 5"
                         " (nkl/drop:" + per_seed + ")"};
}

Outcome correlation_direction() {
  int wins = 0;
  std::string per_seed;
  auto rho = [](const metrics::EvalReport& r) { return r.correlation.spearman.value_or(0.0); };
  for (std::uint64_t seed : kSeeds) {
    const auto w = desk_world(seed, 0.15);
    const auto literal = train_and_eval(w, desk_config(seed, 0.0, 15));
    const auto pragmatic = train_and_eval(w, desk_config(seed, 0.2, 15));
    const bool ok = rho(pragmatic) > rho(literal);
    wins += ok ? 1 : 0;
    std::cerr << "  correlation seed " << seed << ": literal rho " << fmt(rho(literal)) << ", pragmatic rho "
              << fmt(rho(pragmatic)) << "\n";
    per_seed += " " + fmt(rho(literal), 2) + "<" + fmt(rho(pragmatic), 2);
  }
  return {wins >= 4, fmt(wins) + "/5 seeds with higher pragmatic Spearman (literal<pragmatic:" + per_seed + ")"};
}

Outcome gamma_behavior() {
  int wins = 0;
  std::string per_seed;
  for (std::uint64_t seed : kSeeds) {
    const auto w = desk_world(seed, synth::default_desk_world().epsilon);
    std::vector<double> fractions;
    for (double gamma : {0.0, 0.5, 1.0}) {
      auto c = desk_config(seed, 0.2, 5);
      c.gamma = gamma;
      fractions.push_back(train_and_eval(w, c).positive_fraction);
    }
    const bool ok = fractions[1] <= fractions[0] && fractions[2] <= fractions[1];
    wins += ok ? 1 : 0;
    std::cerr << "  gamma seed " << seed << ": positive fraction " << fmt(fractions[0]) << " " << fmt(fractions[1])
              << " " << fmt(fractions[2]) << "\n";
    per_seed += " " + fmt(fractions[0], 2) + ">=" + fmt(fractions[1], 2) + ">=" + fmt(fractions[2], 2);
  }
  return {wins >= 4, fmt(wins) + "/5 seeds non-increasing over gamma 0, 0.5, 1 (" + per_seed.substr(1) + ")"};
}

Outcome determinism() {
  testing::TempDir dir("acceptance");
  synth::WorldSpec s = synth::default_desk_world();
  s.n_train = 300;
  s.n_val = 100;
  s.seed = 11;
  write_file_atomic(dir.path() / "spec.json", synth::to_json(s).dump());
  std::ostringstream out, err;
  const auto data = dir.path() / "data";
  if (cli::run_command({"synth", "--spec", (dir.path() / "spec.json").string(), "--out", data.string()}, out, err) != 0)
    return {false, "synth failed: " + err.str()};
  auto train = [&](const std::string& name) {
    return cli::run_command({"train", "--data", data.string(), "--out", (dir.path() / name).string(), "--iters", "3",
                             "--max-len", "4", "--variable-length", "--speaker-width", "32", "--speaker-layers", "1",
                             "--speaker-heads", "2", "--listener-width", "32", "--listener-layers", "1",
                             "--listener-heads", "2", "--prior", (dir.path() / "prior.json").string(), "--seed", "5"},
                            out, err);
  };
  write_file_atomic(dir.path() / "prior.json", R"({"pi": [0.5, 0.5, 0.0, 0.0], "tau": 1.0})");
  if (train("a") != 0 || train("b") != 0) return {false, "train failed: " + err.str()};
  auto tree = [&](const std::string& name) {
    auto t = testing::read_tree(dir.path() / name);
    t.erase("timings.jsonl");
    return t;
  };
  const auto a = tree("a"), b = tree("b");
  long checkpoints = 0;
  for (const auto& [k, v] : a) checkpoints += k.rfind("checkpoints/", 0) == 0 ? 1 : 0;
  const bool same = a == b && checkpoints > 0 && a.count("reports.jsonl") == 1;
  return {same, fmt(a.size()) + " files (" + fmt(checkpoints) + " checkpoint files) " +
                    (same ? "byte-identical" : "DIFFER") + " across two runs"};
}

struct Criterion {
  std::string name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{{"rsa", rsa_oracle},
                                   {"dpo", dpo_identities},
                                   {"speaker_norm", speaker_normalization},
                                   {"gap", pragmatic_gap},
                                   {"alignment", preference_alignment},
                                   {"correlation", correlation_direction},
                                   {"gamma", gamma_behavior},
                                   {"determinism", determinism}};
  CLI::App app("pragmatix acceptance criteria");
  std::vector<std::string> selected;
  app.add_option("--criterion", selected, "Criteria to run (default: all)");
  CLI11_PARSE(app, argc, argv);

  int failures = 0;
  for (const auto& c : all) {
    if (!selected.empty() && std::find(selected.begin(), selected.end(), c.name) == selected.end()) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS " : "FAIL ") << c.name << ": " << o.detail << " [" << fmt(seconds_since(t0))
              << " s]" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
