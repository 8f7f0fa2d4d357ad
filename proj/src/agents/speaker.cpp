#include "pragmatix/agents/speaker.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace pragmatix::agents {

int SpeakerConfig::resolved_condition_tokens() const {
  return condition_tokens > 0 ? condition_tokens : std::max(1, max_len / 2);
}

void SpeakerConfig::validate() const {
  if (num_claims < 1) throw ConfigError("speaker needs at least one claim");
  if (embedding_dim < 1) throw ConfigError("speaker embedding_dim must be >= 1");
  if (max_len < 1) throw ConfigError("max_len must be >= 1");
  if (fixed_length && max_len > num_claims)
    throw ConfigError("fixed-length utterances longer than the vocabulary are impossible");
  if (width < 1 || layers < 0 || heads < 1 || ff_mult < 1 || condition_tokens < 0)
    throw ConfigError("speaker sizes must be positive");
  if (width % heads != 0) throw ConfigError("speaker width must be divisible by heads");
}

SpeakerConfig SpeakerConfig::with_paper_sizes() const {
  SpeakerConfig c = *this;
  c.width = 256;
  c.layers = 6;
  c.heads = 4;
  return c;
}

json to_json(const SpeakerConfig& c) {
  return {{"num_claims", c.num_claims}, {"embedding_dim", c.embedding_dim},
          {"max_len", c.max_len},       {"fixed_length", c.fixed_length},
          {"width", c.width},           {"layers", c.layers},
          {"heads", c.heads},           {"ff_mult", c.ff_mult},
          {"condition_tokens", c.condition_tokens}};
}

SpeakerConfig speaker_config_from_json(const json& j) {
  SpeakerConfig c;
  c.num_claims = j.at("num_claims").get<int>();
  c.embedding_dim = j.at("embedding_dim").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.fixed_length = j.at("fixed_length").get<bool>();
  c.width = j.at("width").get<int>();
  c.layers = j.at("layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.ff_mult = j.at("ff_mult").get<int>();
  c.condition_tokens = j.at("condition_tokens").get<int>();
  return c;
}

SpeakerModel::SpeakerModel(SpeakerConfig config, InitMode init_mode, std::uint64_t seed)
    : config_(config) {
  config_.validate();
  Initializer init(init_mode, seed);
  const int w = config_.width;
  const int nc = config_.resolved_condition_tokens();
  const int m = config_.num_claims;
  cond_proj_ = Linear::create(params_, "speaker.cond_proj", config_.embedding_dim, nc * w, init);
  cond_ln_ = LayerNorm::create(params_, "speaker.cond_ln", w, init);
  token_embedding_ = params_.add("speaker.token_embedding", init.weight(m + 1, w, 0.5));
  position_embedding_ =
      params_.add("speaker.position_embedding", init.weight(config_.max_len + 1, w, 0.5));
  for (int l = 0; l < config_.layers; ++l) {
    layers_.push_back(TransformerLayer::create(params_, "speaker.layer" + std::to_string(l), w,
                                               config_.heads, w * config_.ff_mult, true, init));
  }
  final_ln_ = LayerNorm::create(params_, "speaker.final_ln", w, init);
  // Small output scales keep the initial policy close to uniform.
  claim_head_ = Linear::create(params_, "speaker.claim_head", w, m + 1, init, 0.02);
  sign_head_ = Linear::create(params_, "speaker.sign_head", nc * w, m, init, 0.02);
}

Var SpeakerModel::condition(Tape& tape, const Matrix& embeddings) const {
  if (embeddings.cols() != config_.embedding_dim)
    throw ShapeMismatch("speaker embedding dimension " + std::to_string(embeddings.cols()) +
                        " != " + std::to_string(config_.embedding_dim));
  const Eigen::Index batch = embeddings.rows();
  const int nc = config_.resolved_condition_tokens();
  Var projected = cond_proj_(tape, params_, tape.constant(embeddings));
  return cond_ln_(tape, params_, diff::reshape(projected, batch * nc, config_.width));
}

Var SpeakerModel::decode(Tape& tape, Var cond, std::span<const int> input_tokens, int batch,
                         int positions) const {
  std::vector<int> pos(input_tokens.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i) % positions;
  Var x = diff::add(diff::gather_rows(tape.parameter(params_, token_embedding_), input_tokens),
                    diff::gather_rows(tape.parameter(params_, position_embedding_), pos));
  diff::AttentionLayout self_layout{batch, positions, positions, config_.heads, true, {}};
  diff::AttentionLayout cross_layout{batch, positions, config_.resolved_condition_tokens(),
                                     config_.heads, false, {}};
  for (const auto& layer : layers_) x = layer(tape, params_, x, self_layout, cond, cross_layout);
  return final_ln_(tape, params_, x);
}

std::vector<std::uint8_t> SpeakerModel::step_mask(std::span<const int> used, int position) const {
  const int m = config_.num_claims;
  std::vector<std::uint8_t> allowed(static_cast<std::size_t>(m + 1), 0);
  if (position < config_.max_len) {
    for (int c = 0; c < m; ++c) allowed[static_cast<std::size_t>(c)] = 1;
    for (int c : used) allowed[static_cast<std::size_t>(c)] = 0;
  }
  const bool end_ok =
      position >= 1 && (!config_.fixed_length || position == config_.max_len);
  allowed[static_cast<std::size_t>(m)] = end_ok ? 1 : 0;
  return allowed;
}

Var SpeakerModel::log_prob(Tape& tape, const Matrix& embeddings,
                           std::span<const Utterance> utterances) const {
  const int batch = static_cast<int>(utterances.size());
  if (embeddings.rows() != batch) throw ShapeMismatch("one embedding row per utterance");
  const int m = config_.num_claims;
  const int l = config_.max_len;
  const int positions = config_.fixed_length ? l : l + 1;

  std::vector<int> tokens(static_cast<std::size_t>(batch * positions), m);
  std::vector<int> eval_rows, targets, eval_segment;
  std::vector<std::uint8_t> mask;
  std::vector<int> sign_batch, sign_claims;
  std::vector<double> sign_values;
  for (int b = 0; b < batch; ++b) {
    const Utterance& u = utterances[static_cast<std::size_t>(b)];
    const int len = static_cast<int>(u.size());
    if (len < 1) throw ImpossibleUtterance("empty utterance");
    if (len > l) throw ImpossibleUtterance("utterance longer than max_len");
    if (config_.fixed_length && len != l)
      throw ImpossibleUtterance("fixed-length speaker needs exactly " + std::to_string(l) +
                                " tokens");
    std::vector<int> used;
    for (int j = 0; j <= len; ++j) {
      if (j == len && config_.fixed_length) break;
      const int target = j < len ? u.tokens[static_cast<std::size_t>(j)].claim : m;
      if (target < 0 || target > m) throw ImpossibleUtterance("unknown claim id");
      auto allowed = step_mask(used, j);
      if (!allowed[static_cast<std::size_t>(target)])
        throw ImpossibleUtterance(j < len ? "claim masked at position " + std::to_string(j)
                                          : "END masked at position " + std::to_string(j));
      eval_rows.push_back(b * positions + j);
      targets.push_back(target);
      eval_segment.push_back(b);
      mask.insert(mask.end(), allowed.begin(), allowed.end());
      if (j < len) {
        const Token& tk = u.tokens[static_cast<std::size_t>(j)];
        used.push_back(tk.claim);
        if (j + 1 < positions) tokens[static_cast<std::size_t>(b * positions + j + 1)] = tk.claim;
        sign_batch.push_back(b);
        sign_claims.push_back(tk.claim);
        sign_values.push_back(static_cast<double>(to_int(tk.sign)));
      }
    }
  }

  Var cond = condition(tape, embeddings);
  Var hidden = decode(tape, cond, tokens, batch, positions);
  Var logits = claim_head_(tape, params_, diff::gather_rows(hidden, eval_rows));
  Var claim_lp = diff::pick(diff::log_softmax(logits, mask), targets);
  Var claim_total = diff::segment_sum(claim_lp, eval_segment, batch);

  const int nc = config_.resolved_condition_tokens();
  Var sign_logits = sign_head_(tape, params_, diff::reshape(cond, batch, nc * config_.width));
  Var chosen = diff::pick(diff::gather_rows(sign_logits, sign_batch), sign_claims);
  Var sign_lp = diff::log_sigmoid(diff::scale_rows(chosen, sign_values));
  Var sign_total = diff::segment_sum(sign_lp, sign_batch, batch);
  return diff::add(claim_total, sign_total);
}

std::vector<double> SpeakerModel::log_prob(const Matrix& embeddings,
                                           std::span<const Utterance> utterances) const {
  Tape tape(false);
  const Matrix& v = log_prob(tape, embeddings, utterances).value();
  return {v.data(), v.data() + v.size()};
}

std::vector<Utterance> SpeakerModel::sample(const Matrix& embeddings,
                                            std::span<const std::uint64_t> seeds) const {
  const int batch = static_cast<int>(embeddings.rows());
  if (static_cast<int>(seeds.size()) != batch) throw ShapeMismatch("one seed per embedding row");
  const int m = config_.num_claims;
  const int l = config_.max_len;
  const int nc = config_.resolved_condition_tokens();

  Matrix cond_value, sign_logits;
  {
    Tape tape(false);
    Var cond = condition(tape, embeddings);
    cond_value = cond.value();
    sign_logits = sign_head_(tape, params_, diff::reshape(cond, batch, nc * config_.width)).value();
  }

  std::vector<Rng> rngs;
  rngs.reserve(seeds.size());
  for (std::uint64_t s : seeds) rngs.emplace_back(s);
  std::vector<Utterance> out(static_cast<std::size_t>(batch));
  std::vector<std::vector<int>> used(static_cast<std::size_t>(batch));
  std::vector<bool> done(static_cast<std::size_t>(batch), false);
  for (auto& u : out) u.max_len = static_cast<std::size_t>(l);

  std::vector<double> weights(static_cast<std::size_t>(m + 1));
  for (int j = 0; j < l; ++j) {
    const int positions = j + 1;
    std::vector<int> tokens(static_cast<std::size_t>(batch * positions), m);
    std::vector<int> rows(static_cast<std::size_t>(batch));
    for (int b = 0; b < batch; ++b) {
      const auto& ub = used[static_cast<std::size_t>(b)];
      for (int p = 1; p < positions && p - 1 < static_cast<int>(ub.size()); ++p)
        tokens[static_cast<std::size_t>(b * positions + p)] = ub[static_cast<std::size_t>(p - 1)];
      rows[static_cast<std::size_t>(b)] = b * positions + j;
    }
    Tape tape(false);
    Var hidden = decode(tape, tape.constant(cond_value), tokens, batch, positions);
    const Matrix logits = claim_head_(tape, params_, diff::gather_rows(hidden, rows)).value();
    bool any_active = false;
    for (int b = 0; b < batch; ++b) {
      const auto bi = static_cast<std::size_t>(b);
      if (done[bi]) continue;
      const auto allowed = step_mask(used[bi], j);
      double mx = -std::numeric_limits<double>::infinity();
      for (int c = 0; c <= m; ++c)
        if (allowed[static_cast<std::size_t>(c)]) mx = std::max(mx, logits(b, c));
      for (int c = 0; c <= m; ++c)
        weights[static_cast<std::size_t>(c)] =
            allowed[static_cast<std::size_t>(c)] ? std::exp(logits(b, c) - mx) : 0.0;
      const int choice = static_cast<int>(rngs[bi].categorical(weights));
      if (choice == m) {
        done[bi] = true;
        continue;
      }
      const double s = sign_logits(b, choice);
      const double p_plus = s >= 0 ? 1.0 / (1.0 + std::exp(-s)) : std::exp(s) / (1.0 + std::exp(s));
      const Sign sign = rngs[bi].uniform() < p_plus ? Sign::kPositive : Sign::kNegative;
      out[bi].tokens.push_back({choice, sign});
      used[bi].push_back(choice);
      if (static_cast<int>(used[bi].size()) == m) done[bi] = true;
      any_active = any_active || !done[bi];
    }
    if (!any_active) break;
  }
  return out;
}

double speaker_log_prob(const SpeakerModel& speaker, std::span<const double> embedding,
                        const Utterance& u) {
  Matrix e(1, static_cast<Eigen::Index>(embedding.size()));
  for (std::size_t i = 0; i < embedding.size(); ++i) e(0, static_cast<Eigen::Index>(i)) = embedding[i];
  return speaker.log_prob(e, std::span<const Utterance>(&u, 1)).front();
}

Utterance speaker_sample(const SpeakerModel& speaker, std::span<const double> embedding, Rng& rng) {
  Matrix e(1, static_cast<Eigen::Index>(embedding.size()));
  for (std::size_t i = 0; i < embedding.size(); ++i) e(0, static_cast<Eigen::Index>(i)) = embedding[i];
  const std::uint64_t seed = rng.engine()();
  return speaker.sample(e, std::span<const std::uint64_t>(&seed, 1)).front();
}

Matrix embedding_matrix(std::span<const Example* const> examples) {
  if (examples.empty()) return Matrix(0, 0);
  const auto d = static_cast<Eigen::Index>(examples.front()->embedding.size());
  Matrix out(static_cast<Eigen::Index>(examples.size()), d);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (static_cast<Eigen::Index>(examples[i]->embedding.size()) != d)
      throw ShapeMismatch("embedding dimensions differ");
    for (Eigen::Index c = 0; c < d; ++c)
      out(static_cast<Eigen::Index>(i), c) = examples[i]->embedding[static_cast<std::size_t>(c)];
  }
  return out;
}

SampleSet sample_for_examples(const SpeakerModel& speaker, std::span<const Example> examples,
                              int per_example, std::uint64_t seed) {
  constexpr std::size_t kChunk = 1024;
  SampleSet out;
  const std::size_t total = examples.size() * static_cast<std::size_t>(per_example);
  out.example.reserve(total);
  out.utterances.reserve(total);
  const Eigen::Index d = speaker.config().embedding_dim;
  for (std::size_t start = 0; start < total; start += kChunk) {
    const std::size_t n = std::min(kChunk, total - start);
    Matrix emb(static_cast<Eigen::Index>(n), d);
    std::vector<std::uint64_t> seeds(n);
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t flat = start + r;
      const std::size_t i = flat / static_cast<std::size_t>(per_example);
      const std::size_t s = flat % static_cast<std::size_t>(per_example);
      const auto& e = examples[i].embedding;
      if (static_cast<Eigen::Index>(e.size()) != d) throw ShapeMismatch("embedding dimension");
      for (Eigen::Index c = 0; c < d; ++c) emb(static_cast<Eigen::Index>(r), c) = e[static_cast<std::size_t>(c)];
      seeds[r] = derive_seed(seed, {i, s});
      out.example.push_back(static_cast<int>(i));
    }
    auto drawn = speaker.sample(emb, seeds);
    for (auto& u : drawn) out.utterances.push_back(std::move(u));
  }
  return out;
}

}  // namespace pragmatix::agents
