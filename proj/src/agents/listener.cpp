#include "pragmatix/agents/listener.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace pragmatix::agents {

void ListenerConfig::validate() const {
  if (num_claims < 1) throw ConfigError("listener needs at least one claim");
  if (num_classes < 1) throw ConfigError("listener needs at least one class");
  if (max_len < 1) throw ConfigError("max_len must be >= 1");
  if (width < 1 || layers < 0 || heads < 1 || ff_mult < 1)
    throw ConfigError("listener sizes must be positive");
  if (width % heads != 0) throw ConfigError("listener width must be divisible by heads");
}

ListenerConfig ListenerConfig::with_paper_sizes() const {
  ListenerConfig c = *this;
  c.width = 256;
  c.layers = 12;
  c.heads = 4;
  return c;
}

json to_json(const ListenerConfig& c) {
  return {{"num_claims", c.num_claims}, {"num_classes", c.num_classes},
          {"max_len", c.max_len},       {"width", c.width},
          {"layers", c.layers},         {"heads", c.heads},
          {"ff_mult", c.ff_mult}};
}

ListenerConfig listener_config_from_json(const json& j) {
  ListenerConfig c;
  c.num_claims = j.at("num_claims").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.width = j.at("width").get<int>();
  c.layers = j.at("layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.ff_mult = j.at("ff_mult").get<int>();
  return c;
}

ListenerModel::ListenerModel(ListenerConfig config, InitMode init_mode, std::uint64_t seed)
    : config_(config) {
  config_.validate();
  Initializer init(init_mode, seed);
  const int w = config_.width;
  token_embedding_ =
      params_.add("listener.token_embedding", init.weight(2 * config_.num_claims, w, 0.5));
  position_embedding_ =
      params_.add("listener.position_embedding", init.weight(config_.max_len, w, 0.5));
  for (int l = 0; l < config_.layers; ++l) {
    layers_.push_back(TransformerLayer::create(params_, "listener.layer" + std::to_string(l), w,
                                               config_.heads, w * config_.ff_mult, false, init));
  }
  final_ln_ = LayerNorm::create(params_, "listener.final_ln", w, init);
  head_ = Linear::create(params_, "listener.head", w, config_.num_classes, init, 0.02);
}

Var ListenerModel::logits(Tape& tape, std::span<const Utterance> utterances) const {
  const int batch = static_cast<int>(utterances.size());
  const int l = config_.max_len;
  std::vector<int> tokens(static_cast<std::size_t>(batch * l), 0);
  std::vector<int> positions(tokens.size());
  std::vector<int> lengths(static_cast<std::size_t>(batch));
  std::vector<int> valid_rows, segment;
  for (int b = 0; b < batch; ++b) {
    const Utterance& u = utterances[static_cast<std::size_t>(b)];
    const int len = static_cast<int>(u.size());
    if (len < 1 || len > l) throw ShapeMismatch("listener utterance length out of range");
    lengths[static_cast<std::size_t>(b)] = len;
    for (int j = 0; j < l; ++j) positions[static_cast<std::size_t>(b * l + j)] = j;
    for (int j = 0; j < len; ++j) {
      const Token& t = u.tokens[static_cast<std::size_t>(j)];
      if (t.claim < 0 || t.claim >= config_.num_claims) throw UnknownClaim(static_cast<std::size_t>(j));
      tokens[static_cast<std::size_t>(b * l + j)] = 2 * t.claim + (t.sign == Sign::kPositive ? 1 : 0);
      valid_rows.push_back(b * l + j);
      segment.push_back(b);
    }
  }
  Var x = diff::add(diff::gather_rows(tape.parameter(params_, token_embedding_), tokens),
                    diff::gather_rows(tape.parameter(params_, position_embedding_), positions));
  diff::AttentionLayout layout{batch, l, l, config_.heads, false, lengths};
  for (const auto& layer : layers_) x = layer(tape, params_, x, layout);
  Var pooled = diff::segment_mean(diff::gather_rows(x, valid_rows), segment, batch);
  return head_(tape, params_, final_ln_(tape, params_, pooled));
}

Matrix ListenerModel::logits(std::span<const Utterance> utterances) const {
  Tape tape(false);
  return logits(tape, utterances).value();
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.size());
  if (logits.empty()) return p;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (double& v : p) v /= z;
  return p;
}

ListenerPrediction listener_predict(const ListenerModel& listener, const Utterance& u) {
  const Matrix lg = listener.logits(std::span<const Utterance>(&u, 1));
  ListenerPrediction out;
  out.logits.assign(lg.data(), lg.data() + lg.size());
  out.probs = softmax(out.logits);
  return out;
}

void ListenerPrior::validate(const Vocabulary& v) const {
  if (pi.size() != v.num_groups())
    throw ConfigError("prior has " + std::to_string(pi.size()) + " entries for " +
                      std::to_string(v.num_groups()) + " groups");
  if (!(tau >= 0.0) || !std::isfinite(tau)) throw ConfigError("tau must be finite and >= 0");
  double total = 0.0;
  for (double p : pi) {
    if (!(p >= 0.0)) throw ConfigError("prior entries must be >= 0");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("prior must sum to 1");
}

json to_json(const ListenerPrior& p) { return {{"pi", p.pi}, {"tau", p.tau}}; }

ListenerPrior listener_prior_from_json(const json& j) {
  ListenerPrior p;
  p.pi = j.at("pi").get<std::vector<double>>();
  p.tau = j.value("tau", 0.0);
  return p;
}

ListenerPrior load_listener_prior(const std::filesystem::path& path) {
  try {
    return listener_prior_from_json(json::parse(read_file(path)));
  } catch (const json::exception& e) {
    throw ParseError(e.what(), 0, path.string());
  }
}

double group_kl(std::span<const double> g, std::span<const double> pi) {
  if (g.size() != pi.size()) throw ShapeMismatch("group distribution and prior differ in size");
  double kl = 0.0;
  for (std::size_t j = 0; j < g.size(); ++j) {
    if (g[j] <= 0.0) continue;
    if (pi[j] <= 0.0) return std::numeric_limits<double>::infinity();
    kl += g[j] * std::log(g[j] / pi[j]);
  }
  return std::max(kl, 0.0);
}

double prior_logit_factor(const ListenerPrior& prior, const Utterance& u, const Vocabulary& v) {
  if (prior.tau == 0.0) return 1.0;
  const double kl = group_kl(group_distribution(u, v), prior.pi);
  if (std::isinf(kl)) return 0.0;
  return 1.0 / (prior.tau * kl + 1.0);
}

Var prior_scaled_log_probs(Tape& tape, const ListenerModel& listener, const ListenerPrior* prior,
                           std::span<const Utterance> utterances, const Vocabulary& v) {
  Var lg = listener.logits(tape, utterances);
  if (prior != nullptr && prior->tau != 0.0) {
    std::vector<double> factors(utterances.size());
    for (std::size_t i = 0; i < utterances.size(); ++i)
      factors[i] = prior_logit_factor(*prior, utterances[i], v);
    lg = diff::scale_rows(lg, factors);
  }
  return diff::log_softmax(lg);
}

std::vector<double> prior_scaled_predict(const ListenerModel& listener, const ListenerPrior& prior,
                                         const Utterance& u, const Vocabulary& v) {
  const int k = listener.config().num_classes;
  if (prior_logit_factor(prior, u, v) == 0.0)
    return std::vector<double>(static_cast<std::size_t>(k), 1.0 / k);
  const Matrix p = predict_batch(listener, &prior, std::span<const Utterance>(&u, 1), v);
  return {p.data(), p.data() + p.size()};
}

Matrix predict_batch(const ListenerModel& listener, const ListenerPrior* prior,
                     std::span<const Utterance> utterances, const Vocabulary& v) {
  if (utterances.empty()) return Matrix(0, listener.config().num_classes);
  Tape tape(false);
  return prior_scaled_log_probs(tape, listener, prior, utterances, v).value().array().exp();
}

}  // namespace pragmatix::agents
