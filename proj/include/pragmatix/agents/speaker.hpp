#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pragmatix/agents/layers.hpp"
#include "pragmatix/core.hpp"

namespace pragmatix::agents {

struct SpeakerConfig {
  int num_claims = 0;
  int embedding_dim = 0;
  int max_len = 6;
  bool fixed_length = false;
  int width = 64;
  int layers = 2;
  int heads = 4;
  int ff_mult = 4;
  // Number of condition tokens the embedding is projected to; 0 picks
  // max(1, max_len / 2).
  int condition_tokens = 0;

  int resolved_condition_tokens() const;
  void validate() const;

  // 6 decoder layers, width 256, 4 heads.
  SpeakerConfig with_paper_sizes() const;
};

json to_json(const SpeakerConfig& c);
SpeakerConfig speaker_config_from_json(const json& j);

// Autoregressive claim decoder with cross-attention to condition tokens, a
// claim head over m claims + END, and a sign head that sees only the
// condition tokens and the claim id:
//   P(c_j, s_j | c_<j, h) = P(c_j | c_<j, h) * P(s_j | h, c_j).
// Claims already used are masked out; END is never available at position 0,
// and in fixed-length mode only at position max_len (where generation stops).
class SpeakerModel {
 public:
  SpeakerModel(SpeakerConfig config, InitMode init, std::uint64_t seed);

  const SpeakerConfig& config() const { return config_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  int end_token() const { return config_.num_claims; }

  // Recorded log P_S(u | h) per utterance, a (batch x 1) column.
  // `embeddings` has one row per utterance.
  Var log_prob(Tape& tape, const Matrix& embeddings, std::span<const Utterance> utterances) const;
  std::vector<double> log_prob(const Matrix& embeddings,
                               std::span<const Utterance> utterances) const;

  // Ancestral sampling; row i uses its own generator seeded with seeds[i], so
  // results do not depend on how examples are batched.
  std::vector<Utterance> sample(const Matrix& embeddings,
                                std::span<const std::uint64_t> seeds) const;

 private:
  Var condition(Tape& tape, const Matrix& embeddings) const;
  Var decode(Tape& tape, Var cond, std::span<const int> input_tokens, int batch, int positions) const;
  std::vector<std::uint8_t> step_mask(std::span<const int> used, int position) const;

  SpeakerConfig config_;
  ParameterSet params_;
  Linear cond_proj_;
  LayerNorm cond_ln_;
  std::size_t token_embedding_ = 0;
  std::size_t position_embedding_ = 0;
  std::vector<TransformerLayer> layers_;
  LayerNorm final_ln_;
  Linear claim_head_;
  Linear sign_head_;
};

double speaker_log_prob(const SpeakerModel& speaker, std::span<const double> embedding,
                        const Utterance& u);
Utterance speaker_sample(const SpeakerModel& speaker, std::span<const double> embedding,
                         Rng& rng);

// Stacks example embeddings as rows.
Matrix embedding_matrix(std::span<const Example* const> examples);

// Utterances drawn for a list of examples, flattened example-major.
struct SampleSet {
  std::vector<int> example;  // index into the example list
  std::vector<Utterance> utterances;
};

// per_example draws for every example; draw s of example i uses the stream
// derive_seed(seed, {i, s}), so the result does not depend on batching.
SampleSet sample_for_examples(const SpeakerModel& speaker, std::span<const Example> examples,
                              int per_example, std::uint64_t seed);

}  // namespace pragmatix::agents
