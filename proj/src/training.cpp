#include "pragmatix/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "pragmatix/metrics.hpp"
#include "pragmatix/rng.hpp"

namespace pragmatix::training {

namespace {

void validate_optimizer(const OptimizerConfig& o, const char* which) {
  try {
    o.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(which) + ": " + e.what());
  }
}

json optimizer_to_json(const OptimizerConfig& o) {
  return {{"learning_rate", o.learning_rate}, {"weight_decay", o.weight_decay},
          {"clip_norm", o.clip_norm},         {"beta1", o.beta1},
          {"beta2", o.beta2},                 {"epsilon", o.epsilon},
          {"lr_min", o.lr_min}};
}

OptimizerConfig optimizer_from_json(const json& j) {
  OptimizerConfig o;
  o.learning_rate = j.value("learning_rate", o.learning_rate);
  o.weight_decay = j.value("weight_decay", o.weight_decay);
  o.clip_norm = j.value("clip_norm", o.clip_norm);
  o.beta1 = j.value("beta1", o.beta1);
  o.beta2 = j.value("beta2", o.beta2);
  o.epsilon = j.value("epsilon", o.epsilon);
  o.lr_min = j.value("lr_min", o.lr_min);
  return o;
}

// Fisher-Yates with our own generator so the order does not depend on the
// standard library's shuffle.
std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.index(i)]);
  return p;
}

constexpr std::size_t kEvalChunk = 512;

}  // namespace

void TrainConfig::validate() const {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be >= 0");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("beta must be >= 0");
  if (b < 2) throw ConfigError("b must be >= 2");
  if (n_expl < 1) throw ConfigError("n_expl must be >= 1");
  if (iterations < 1) throw ConfigError("iterations must be >= 1");
  if (max_len < 1) throw ConfigError("max_len must be >= 1");
  if (speaker_epochs < 0 || listener_epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (eval_samples < 1) throw ConfigError("eval_samples must be >= 1");
  if (!(kl_cap > 0.0)) throw ConfigError("kl_cap must be > 0");
  validate_optimizer(speaker_optimizer, "speaker optimizer");
  validate_optimizer(listener_optimizer, "listener optimizer");
  if (prior && !(prior->tau >= 0.0)) throw ConfigError("tau must be >= 0");
}

agents::SpeakerConfig TrainConfig::speaker_config(int m, int d) const {
  agents::SpeakerConfig c;
  c.num_claims = m;
  c.embedding_dim = d;
  c.max_len = max_len;
  c.fixed_length = fixed_length;
  c.width = speaker_width;
  c.layers = speaker_layers;
  c.heads = speaker_heads;
  return paper_sizes ? c.with_paper_sizes() : c;
}

agents::ListenerConfig TrainConfig::listener_config(int m, int k) const {
  agents::ListenerConfig c;
  c.num_claims = m;
  c.num_classes = k;
  c.max_len = max_len;
  c.width = listener_width;
  c.layers = listener_layers;
  c.heads = listener_heads;
  return paper_sizes ? c.with_paper_sizes() : c;
}

json to_json(const TrainConfig& c) {
  json j = {{"alpha", c.alpha},
            {"gamma", c.gamma},
            {"beta", c.beta},
            {"n_expl", c.n_expl},
            {"b", c.b},
            {"iterations", c.iterations},
            {"max_len", c.max_len},
            {"fixed_length", c.fixed_length},
            {"speaker_epochs", c.speaker_epochs},
            {"listener_epochs", c.listener_epochs},
            {"batch_size", c.batch_size},
            {"speaker_optimizer", optimizer_to_json(c.speaker_optimizer)},
            {"listener_optimizer", optimizer_to_json(c.listener_optimizer)},
            {"speaker_width", c.speaker_width},
            {"speaker_layers", c.speaker_layers},
            {"speaker_heads", c.speaker_heads},
            {"listener_width", c.listener_width},
            {"listener_layers", c.listener_layers},
            {"listener_heads", c.listener_heads},
            {"paper_sizes", c.paper_sizes},
            {"prior", c.prior ? agents::to_json(*c.prior) : json(nullptr)},
            {"retain_candidates", c.retain_candidates},
            {"eval_samples", c.eval_samples},
            {"kl_cap", c.kl_cap},
            {"seed", c.seed}};
  return j;
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.alpha = j.value("alpha", c.alpha);
  c.gamma = j.value("gamma", c.gamma);
  c.beta = j.value("beta", c.beta);
  c.n_expl = j.value("n_expl", c.n_expl);
  c.b = j.value("b", c.b);
  c.iterations = j.value("iterations", c.iterations);
  c.max_len = j.value("max_len", c.max_len);
  c.fixed_length = j.value("fixed_length", c.fixed_length);
  c.speaker_epochs = j.value("speaker_epochs", c.speaker_epochs);
  c.listener_epochs = j.value("listener_epochs", c.listener_epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("speaker_optimizer")) c.speaker_optimizer = optimizer_from_json(j["speaker_optimizer"]);
  if (j.contains("listener_optimizer"))
    c.listener_optimizer = optimizer_from_json(j["listener_optimizer"]);
  c.speaker_width = j.value("speaker_width", c.speaker_width);
  c.speaker_layers = j.value("speaker_layers", c.speaker_layers);
  c.speaker_heads = j.value("speaker_heads", c.speaker_heads);
  c.listener_width = j.value("listener_width", c.listener_width);
  c.listener_layers = j.value("listener_layers", c.listener_layers);
  c.listener_heads = j.value("listener_heads", c.listener_heads);
  c.paper_sizes = j.value("paper_sizes", c.paper_sizes);
  if (j.contains("prior") && !j["prior"].is_null()) c.prior = agents::listener_prior_from_json(j["prior"]);
  c.retain_candidates = j.value("retain_candidates", c.retain_candidates);
  c.eval_samples = j.value("eval_samples", c.eval_samples);
  c.kl_cap = j.value("kl_cap", c.kl_cap);
  c.seed = j.value("seed", c.seed);
  return c;
}

json to_json(const IterationReport& r) {
  return {{"iteration", r.iteration},
          {"num_pairs", r.num_pairs},
          {"num_ties", r.num_ties},
          {"num_human_pairs", r.num_human_pairs},
          {"dpo_loss", r.dpo_loss},
          {"margin", r.margin},
          {"listener_nll", r.listener_nll},
          {"val_accuracy", r.val_accuracy},
          {"kl_alignment", r.kl_alignment ? json(*r.kl_alignment) : json(nullptr)}};
}

IterationReport iteration_report_from_json(const json& j) {
  IterationReport r;
  r.iteration = j.at("iteration").get<int>();
  r.num_pairs = j.at("num_pairs").get<int>();
  r.num_ties = j.at("num_ties").get<int>();
  r.num_human_pairs = j.value("num_human_pairs", 0);
  r.dpo_loss = j.at("dpo_loss").get<double>();
  r.margin = j.at("margin").get<double>();
  r.listener_nll = j.at("listener_nll").get<double>();
  r.val_accuracy = j.at("val_accuracy").get<double>();
  if (j.contains("kl_alignment") && !j["kl_alignment"].is_null())
    r.kl_alignment = j["kl_alignment"].get<double>();
  return r;
}

double bt_probability(double r_plus, double r_minus) {
  const double x = r_plus - r_minus;
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

ExampleIndex::ExampleIndex(std::span<const Example> examples) {
  for (const Example& e : examples) map_.emplace(e.id, &e);
}

const Example& ExampleIndex::at(const std::string& id) const {
  auto it = map_.find(id);
  if (it == map_.end()) throw SchemaMismatch("unknown example id '" + id + "'");
  return *it->second;
}

json preference_to_json(const PreferencePair& p) {
  return {{"example_id", p.example_id},
          {"u_plus", utterance_tokens_to_json(p.u_plus)},
          {"u_minus", utterance_tokens_to_json(p.u_minus)},
          {"tie", p.tie},
          {"source", p.source == PreferenceSource::kHuman ? "human" : "simulated"}};
}

PreferencePair preference_from_json(const json& j, std::size_t max_len) {
  PreferencePair p;
  p.example_id = j.at("example_id").get<std::string>();
  p.u_plus = utterance_from_json(j.at("u_plus"), max_len);
  p.u_minus = utterance_from_json(j.at("u_minus"), max_len);
  p.tie = j.value("tie", false);
  const std::string source = j.value("source", "simulated");
  if (source == "human") {
    p.source = PreferenceSource::kHuman;
  } else if (source == "simulated") {
    p.source = PreferenceSource::kSimulated;
  } else {
    throw ParseError("unknown preference source '" + source + "'", 0, "source");
  }
  return p;
}

void save_preferences(std::span<const PreferencePair> pairs, const std::filesystem::path& path) {
  std::string out;
  for (const auto& p : pairs) out += preference_to_json(p).dump() + "\n";
  write_file_atomic(path, out);
}

std::vector<PreferencePair> load_preferences(const std::filesystem::path& path, std::size_t max_len) {
  std::istringstream in(read_file(path));
  std::vector<PreferencePair> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(preference_from_json(json::parse(line), max_len));
    } catch (const json::exception& e) {
      throw ParseError(e.what(), line_no);
    }
  }
  return out;
}

PreferenceDataset make_preference_dataset(const Dataset& d, const SpeakerModel& speaker,
                                          const ListenerModel& listener,
                                          const TrainConfig& config, std::uint64_t seed,
                                          std::span<const PreferencePair> human,
                                          double human_weight,
                                          const std::vector<std::vector<Utterance>>* previous) {
  const std::size_t n = d.examples.size();
  const auto samples = agents::sample_for_examples(speaker, d.examples, config.b, seed);
  PreferenceDataset out;
  out.candidates.assign(n, {});
  for (std::size_t i = 0; i < samples.utterances.size(); ++i)
    out.candidates[static_cast<std::size_t>(samples.example[i])].push_back(samples.utterances[i]);

  std::vector<std::vector<Utterance>> pools = out.candidates;
  if (previous != nullptr && previous->size() == n) {
    for (std::size_t i = 0; i < n; ++i)
      pools[i].insert(pools[i].begin(), (*previous)[i].begin(), (*previous)[i].end());
  }

  // Utility only matters when alpha > 0; the listener is skipped otherwise.
  std::vector<std::vector<double>> utility(n);
  if (config.alpha != 0.0) {
    std::vector<Utterance> flat;
    std::vector<std::size_t> owner;
    for (std::size_t i = 0; i < n; ++i) {
      for (const auto& u : pools[i]) {
        flat.push_back(u);
        owner.push_back(i);
      }
    }
    const ListenerPrior* prior = config.prior ? &*config.prior : nullptr;
    std::span<const Utterance> all(flat);
    for (std::size_t start = 0; start < all.size(); start += kEvalChunk) {
      const auto chunk = all.subspan(start, std::min(kEvalChunk, all.size() - start));
      const Matrix p = agents::predict_batch(listener, prior, chunk, d.vocabulary);
      for (Eigen::Index r = 0; r < p.rows(); ++r) {
        const std::size_t i = owner[start + static_cast<std::size_t>(r)];
        utility[i].push_back(p(r, d.examples[i].prediction));
      }
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    const Example& e = d.examples[i];
    std::vector<RankScore> scores;
    for (std::size_t c = 0; c < pools[i].size(); ++c) {
      const double fid = fidelity(pools[i][c], e.semantics, config.gamma).score;
      const double util = config.alpha != 0.0 ? utility[i][c] : 0.0;
      scores.push_back(make_rank_score(fid, util, config.alpha));
    }
    auto pairs = rank_candidates(pools[i], scores, e.id, derive_seed(seed, {i, 0x7e5ULL << 32}));
    for (auto& p : pairs) {
      if (p.tie) {
        ++out.ties;
        continue;
      }
      out.pairs.push_back(std::move(p));
    }
  }

  if (!human.empty()) {
    const ExampleIndex index(d.examples);
    for (const auto& p : human) index.at(p.example_id);
    const int repeats = static_cast<int>(std::ceil(std::max(0.0, human_weight)));
    for (int r = 0; r < repeats; ++r) {
      for (const auto& p : human) {
        if (p.tie) continue;
        out.pairs.push_back(p);
        ++out.human;
      }
    }
  }
  return out;
}

diff::Var dpo_loss(diff::Tape& tape, const SpeakerModel& speaker,
                   std::span<const PreferencePair> pairs, std::span<const double> ref_plus,
                   std::span<const double> ref_minus, const ExampleIndex& index, double beta,
                   std::vector<double>* margins) {
  const std::size_t n = pairs.size();
  if (n == 0) throw ShapeMismatch("dpo_loss needs at least one pair");
  if (ref_plus.size() != n || ref_minus.size() != n) throw ShapeMismatch("reference log-probs");
  const Eigen::Index dim = speaker.config().embedding_dim;
  Matrix emb(static_cast<Eigen::Index>(2 * n), dim);
  std::vector<Utterance> utts;
  utts.reserve(2 * n);
  for (std::size_t half = 0; half < 2; ++half) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto& e = index.at(pairs[i].example_id).embedding;
      if (static_cast<Eigen::Index>(e.size()) != dim) throw ShapeMismatch("embedding dimension");
      for (Eigen::Index c = 0; c < dim; ++c)
        emb(static_cast<Eigen::Index>(half * n + i), c) = e[static_cast<std::size_t>(c)];
      utts.push_back(half == 0 ? pairs[i].u_plus : pairs[i].u_minus);
    }
  }
  diff::Var lp = speaker.log_prob(tape, emb, utts);
  std::vector<int> plus_rows(n), minus_rows(n);
  Matrix ref_gap(static_cast<Eigen::Index>(n), 1);
  for (std::size_t i = 0; i < n; ++i) {
    plus_rows[i] = static_cast<int>(i);
    minus_rows[i] = static_cast<int>(n + i);
    ref_gap(static_cast<Eigen::Index>(i), 0) = -(ref_plus[i] - ref_minus[i]);
  }
  diff::Var gap = diff::sub(diff::gather_rows(lp, plus_rows), diff::gather_rows(lp, minus_rows));
  diff::Var z = diff::scale(diff::add(gap, tape.constant(ref_gap)), beta);
  if (margins != nullptr) {
    const Matrix& zv = z.value();
    margins->assign(zv.data(), zv.data() + zv.size());
  }
  return diff::scale(diff::mean(diff::log_sigmoid(z)), -1.0);
}

namespace {

void log_probs_of_pairs(const SpeakerModel& s, std::span<const PreferencePair> pairs,
                        const ExampleIndex& index, std::vector<double>& plus,
                        std::vector<double>& minus) {
  plus.clear();
  minus.clear();
  const Eigen::Index dim = s.config().embedding_dim;
  for (std::size_t start = 0; start < pairs.size(); start += kEvalChunk) {
    const std::size_t n = std::min(kEvalChunk, pairs.size() - start);
    Matrix emb(static_cast<Eigen::Index>(2 * n), dim);
    std::vector<Utterance> utts;
    for (std::size_t half = 0; half < 2; ++half) {
      for (std::size_t i = 0; i < n; ++i) {
        const PreferencePair& p = pairs[start + i];
        const auto& e = index.at(p.example_id).embedding;
        for (Eigen::Index c = 0; c < dim; ++c)
          emb(static_cast<Eigen::Index>(half * n + i), c) = e[static_cast<std::size_t>(c)];
        utts.push_back(half == 0 ? p.u_plus : p.u_minus);
      }
    }
    const auto lp = s.log_prob(emb, utts);
    plus.insert(plus.end(), lp.begin(), lp.begin() + static_cast<std::ptrdiff_t>(n));
    minus.insert(minus.end(), lp.begin() + static_cast<std::ptrdiff_t>(n), lp.end());
  }
}

template <typename Model, typename LossFn>
PhaseStats minimize(Model& model, std::size_t count, const OptimizerConfig& optimizer, int epochs,
                    int batch_size, std::uint64_t seed, const char* where, LossFn&& loss_fn) {
  PhaseStats stats;
  if (count == 0 || epochs == 0) return stats;
  diff::AdamW opt(model.params(), optimizer);
  const std::size_t bs = static_cast<std::size_t>(batch_size);
  const std::size_t per_epoch = (count + bs - 1) / bs;
  const auto total = static_cast<std::int64_t>(per_epoch) * epochs;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    const auto order = permutation(count, derive_seed(seed, {static_cast<std::uint64_t>(epoch)}));
    double loss_sum = 0.0, margin_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < count; start += bs) {
      const std::size_t n = std::min(bs, count - start);
      std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                     order.begin() + static_cast<std::ptrdiff_t>(start + n));
      diff::Tape tape;
      double margin = 0.0;
      diff::Var loss = loss_fn(tape, batch, &margin);
      const double value = loss.item();
      if (!std::isfinite(value)) throw NonFiniteLoss(where);
      auto grads = tape.backward(loss, model.params());
      diff::clip_global_norm(grads, optimizer.clip_norm);
      const double lr = diff::cosine_lr(step, total, optimizer.learning_rate, optimizer.lr_min);
      opt.step(model.params(), grads, lr);
      ++step;
      loss_sum += value * static_cast<double>(n);
      margin_sum += margin * static_cast<double>(n);
      seen += n;
    }
    stats.loss = loss_sum / static_cast<double>(seen);
    stats.margin = margin_sum / static_cast<double>(seen);
  }
  stats.steps = static_cast<int>(step);
  if (!model.params().all_finite()) throw NonFiniteLoss(std::string(where) + " parameters");
  return stats;
}

}  // namespace

double dpo_loss(const SpeakerModel& speaker, const SpeakerModel& reference,
                std::span<const PreferencePair> pairs, const ExampleIndex& index, double beta,
                double* mean_margin) {
  std::vector<double> sp, sm, rp, rm;
  log_probs_of_pairs(speaker, pairs, index, sp, sm);
  log_probs_of_pairs(reference, pairs, index, rp, rm);
  double loss = 0.0, margin = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const double z = beta * ((sp[i] - rp[i]) - (sm[i] - rm[i]));
    margin += z;
    loss += z >= 0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));
  }
  const double n = static_cast<double>(pairs.size());
  if (mean_margin != nullptr) *mean_margin = pairs.empty() ? 0.0 : margin / n;
  return pairs.empty() ? 0.0 : loss / n;
}

SpeakerModel dpo_update(const SpeakerModel& speaker, std::span<const PreferencePair> pairs,
                        const ExampleIndex& index, double beta, const OptimizerConfig& optimizer,
                        int epochs, int batch_size, std::uint64_t seed, PhaseStats* stats) {
  SpeakerModel updated = speaker;
  if (pairs.empty()) {
    std::cerr << "warning: empty preference set, speaker unchanged\n";
    if (stats != nullptr) *stats = PhaseStats{};
    return updated;
  }
  std::vector<double> ref_plus, ref_minus;
  log_probs_of_pairs(speaker, pairs, index, ref_plus, ref_minus);
  PhaseStats s = minimize(
      updated, pairs.size(), optimizer, epochs, batch_size, seed, "dpo_update",
      [&](diff::Tape& tape, const std::vector<std::size_t>& batch, double* margin) {
        std::vector<PreferencePair> bp;
        std::vector<double> bplus, bminus;
        for (std::size_t i : batch) {
          bp.push_back(pairs[i]);
          bplus.push_back(ref_plus[i]);
          bminus.push_back(ref_minus[i]);
        }
        std::vector<double> margins;
        diff::Var loss = dpo_loss(tape, updated, bp, bplus, bminus, index, beta, &margins);
        double m = 0.0;
        for (double v : margins) m += v;
        *margin = m / static_cast<double>(margins.size());
        return loss;
      });
  if (stats != nullptr) *stats = s;
  return updated;
}

std::vector<ExplanationItem> make_explanation_dataset(const Dataset& d, const SpeakerModel& speaker,
                                                      int n_expl, std::uint64_t seed) {
  if (n_expl < 1) throw ConfigError("n_expl must be >= 1");
  auto samples = agents::sample_for_examples(speaker, d.examples, n_expl, seed);
  std::vector<ExplanationItem> out;
  out.reserve(samples.utterances.size());
  for (std::size_t i = 0; i < samples.utterances.size(); ++i) {
    out.push_back({d.examples[static_cast<std::size_t>(samples.example[i])].prediction,
                   std::move(samples.utterances[i])});
  }
  return out;
}

diff::Var listener_nll(diff::Tape& tape, const ListenerModel& listener, const ListenerPrior* prior,
                       std::span<const ExplanationItem> items, const Vocabulary& v) {
  if (items.empty()) throw ShapeMismatch("listener_nll needs at least one item");
  std::vector<Utterance> utts;
  std::vector<int> targets;
  for (const auto& it : items) {
    utts.push_back(it.utterance);
    targets.push_back(it.target);
  }
  diff::Var lp = agents::prior_scaled_log_probs(tape, listener, prior, utts, v);
  return diff::scale(diff::mean(diff::pick(lp, targets)), -1.0);
}

double listener_nll(const ListenerModel& listener, const ListenerPrior* prior,
                    std::span<const ExplanationItem> items, const Vocabulary& v) {
  if (items.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t start = 0; start < items.size(); start += kEvalChunk) {
    const auto chunk = items.subspan(start, std::min(kEvalChunk, items.size() - start));
    diff::Tape tape(false);
    total += listener_nll(tape, listener, prior, chunk, v).item() * static_cast<double>(chunk.size());
  }
  return total / static_cast<double>(items.size());
}

ListenerModel listener_update(const ListenerModel& listener, std::span<const ExplanationItem> items,
                              const ListenerPrior* prior, const Vocabulary& v,
                              const OptimizerConfig& optimizer, int epochs, int batch_size,
                              std::uint64_t seed, PhaseStats* stats) {
  ListenerModel updated = listener;
  PhaseStats s = minimize(updated, items.size(), optimizer, epochs, batch_size, seed,
                          "listener_update",
                          [&](diff::Tape& tape, const std::vector<std::size_t>& batch, double*) {
                            std::vector<ExplanationItem> b;
                            for (std::size_t i : batch) b.push_back(items[i]);
                            return listener_nll(tape, updated, prior, b, v);
                          });
  if (stats != nullptr) *stats = s;
  return updated;
}

std::uint64_t phase_seed(std::uint64_t base, int iteration, Phase phase) {
  return derive_seed(base, {static_cast<std::uint64_t>(iteration), static_cast<std::uint64_t>(phase)});
}

Models initial_models(const TrainConfig& config, const Dataset& d) {
  const int m = static_cast<int>(d.num_claims());
  const int dim = static_cast<int>(d.embedding_dim());
  const int k = static_cast<int>(d.num_classes());
  return Models{
      SpeakerModel(config.speaker_config(m, dim), agents::InitMode::kRandom,
                   phase_seed(config.seed, 0, Phase::kInitSpeaker)),
      ListenerModel(config.listener_config(m, k), agents::InitMode::kRandom,
                    phase_seed(config.seed, 0, Phase::kInitListener))};
}

StepResult run_iteration(const Models& models, const Dataset& train, const Dataset& val,
                         const TrainConfig& config, int iteration, const HumanPreferences* human,
                         const std::vector<std::vector<Utterance>>* previous) {
  const ListenerPrior* prior = config.prior ? &*config.prior : nullptr;
  if (prior != nullptr) prior->validate(train.vocabulary);
  const ExampleIndex index(train.examples);

  auto prefs = make_preference_dataset(
      train, models.speaker, models.listener, config,
      phase_seed(config.seed, iteration, Phase::kPreference),
      human ? std::span<const PreferencePair>(human->pairs) : std::span<const PreferencePair>{},
      human ? human->weight : 0.0, config.retain_candidates ? previous : nullptr);

  PhaseStats dpo_stats;
  SpeakerModel speaker = dpo_update(models.speaker, prefs.pairs, index, config.beta,
                                    config.speaker_optimizer, config.speaker_epochs,
                                    config.batch_size,
                                    phase_seed(config.seed, iteration, Phase::kDpo), &dpo_stats);

  const auto items = make_explanation_dataset(
      train, speaker, config.n_expl, phase_seed(config.seed, iteration, Phase::kExplanation));
  PhaseStats nll_stats;
  ListenerModel listener = listener_update(
      models.listener, items, prior, train.vocabulary, config.listener_optimizer,
      config.listener_epochs, config.batch_size,
      phase_seed(config.seed, iteration, Phase::kListener), &nll_stats);

  const Dataset& eval_set = val.examples.empty() ? train : val;
  const auto samples = agents::sample_for_examples(speaker, eval_set.examples, config.eval_samples,
                                                   phase_seed(config.seed, iteration, Phase::kEval));
  IterationReport report;
  report.iteration = iteration;
  report.num_pairs = static_cast<int>(prefs.pairs.size());
  report.num_ties = prefs.ties;
  report.num_human_pairs = prefs.human;
  report.dpo_loss = dpo_stats.steps > 0 ? dpo_stats.loss : std::log(2.0);
  report.margin = dpo_stats.margin;
  report.listener_nll = nll_stats.steps > 0 ? nll_stats.loss : listener_nll(listener, prior, items, train.vocabulary);
  report.val_accuracy =
      metrics::listener_accuracy(listener, prior, eval_set.examples, samples, eval_set.vocabulary);
  if (prior != nullptr)
    report.kl_alignment = metrics::kl_alignment(prior->pi, samples, eval_set.vocabulary, config.kl_cap).mean;

  return StepResult{Models{std::move(speaker), std::move(listener)}, report,
                    std::move(prefs.candidates)};
}

std::filesystem::path iteration_dir(const std::filesystem::path& out, int iteration) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "iter_%04d", iteration);
  return out / "checkpoints" / buf;
}

void save_models(const Models& models, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  diff::save_parameters(models.speaker.params(), dir, "speaker");
  diff::save_parameters(models.listener.params(), dir, "listener");
}

Models load_models(const TrainConfig& config, const Dataset& d, const std::filesystem::path& dir) {
  Models models = initial_models(config, d);
  diff::load_parameters_into(models.speaker.params(), dir, "speaker");
  diff::load_parameters_into(models.listener.params(), dir, "listener");
  return models;
}

int last_completed_iteration(const std::filesystem::path& out) {
  const auto root = out / "checkpoints";
  if (!std::filesystem::exists(root)) return 0;
  int best = 0;
  for (const auto& entry : std::filesystem::directory_iterator(root)) {
    const std::string name = entry.path().filename().string();
    if (name.size() != 9 || name.rfind("iter_", 0) != 0) continue;
    if (!std::filesystem::exists(entry.path() / "report.json")) continue;
    best = std::max(best, std::stoi(name.substr(5)));
  }
  return best;
}

namespace {

json candidates_to_json(const std::vector<std::vector<Utterance>>& c) {
  json j = json::array();
  for (const auto& pool : c) {
    json p = json::array();
    for (const auto& u : pool) p.push_back(utterance_tokens_to_json(u));
    j.push_back(std::move(p));
  }
  return j;
}

std::vector<std::vector<Utterance>> candidates_from_json(const json& j, std::size_t max_len) {
  std::vector<std::vector<Utterance>> out;
  for (const auto& pool : j) {
    out.emplace_back();
    for (const auto& u : pool) out.back().push_back(utterance_from_json(u, max_len));
  }
  return out;
}

void write_reports(const std::filesystem::path& out, const std::vector<IterationReport>& reports) {
  std::string text;
  for (const auto& r : reports) text += to_json(r).dump() + "\n";
  write_file_atomic(out / "reports.jsonl", text);
}

}  // namespace

RunResult run(const Dataset& train, const Dataset& val, const TrainConfig& config,
              const RunOptions& options) {
  config.validate();
  train.validate();
  if (!val.examples.empty() && !(val.vocabulary == train.vocabulary))
    throw SchemaMismatch("train and validation vocabularies differ");
  if (config.prior) config.prior->validate(train.vocabulary);

  RunResult result{initial_models(config, train), {}};
  std::vector<std::vector<Utterance>> previous;
  int start = 1;
  if (options.out_dir) {
    const auto& out = *options.out_dir;
    std::filesystem::create_directories(out / "checkpoints");
    const int last = last_completed_iteration(out);
    if (last > 0) {
      result.models = load_models(config, train, iteration_dir(out, last));
      for (int t = 1; t <= last; ++t) {
        const auto dir = iteration_dir(out, t);
        if (std::filesystem::exists(dir / "report.json"))
          result.reports.push_back(iteration_report_from_json(json::parse(read_file(dir / "report.json"))));
      }
      if (config.retain_candidates && std::filesystem::exists(iteration_dir(out, last) / "candidates.json"))
        previous = candidates_from_json(json::parse(read_file(iteration_dir(out, last) / "candidates.json")),
                                        static_cast<std::size_t>(config.max_len));
      start = last + 1;
    }
    write_reports(out, result.reports);
  }

  int done_now = 0;
  for (int t = start; t <= config.iterations; ++t) {
    const auto t0 = std::chrono::steady_clock::now();
    StepResult step = run_iteration(result.models, train, val, config, t, options.human ? &*options.human : nullptr,
                                    previous.empty() ? nullptr : &previous);
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.models = std::move(step.models);
    result.reports.push_back(step.report);
    if (config.retain_candidates) previous = std::move(step.candidates);

    if (options.out_dir) {
      const auto& out = *options.out_dir;
      const auto final_dir = iteration_dir(out, t);
      auto staging = final_dir;
      staging += ".tmp";
      std::filesystem::remove_all(staging);
      save_models(result.models, staging);
      if (config.retain_candidates)
        write_file_atomic(staging / "candidates.json", candidates_to_json(previous).dump() + "\n");
      write_file_atomic(staging / "report.json", to_json(step.report).dump() + "\n");
      std::filesystem::remove_all(final_dir);
      std::filesystem::rename(staging, final_dir);
      write_reports(out, result.reports);
      std::ofstream timings(out / "timings.jsonl", std::ios::app);
      timings << json{{"iteration", t}, {"wall_seconds", seconds}}.dump() << "\n";
    }
    ++done_now;
    if (options.on_iteration && !options.on_iteration(step.report)) break;
    if (options.stop_after && done_now >= *options.stop_after) break;
  }
  return result;
}

}  // namespace pragmatix::training
