#pragma once

#include <span>
#include <vector>

#include "pragmatix/agents/layers.hpp"
#include "pragmatix/core.hpp"

namespace pragmatix::agents {

struct ListenerConfig {
  int num_claims = 0;
  int num_classes = 0;
  int max_len = 6;
  int width = 64;
  int layers = 2;
  int heads = 4;
  int ff_mult = 4;

  void validate() const;
  // 12 encoder layers, width 256.
  ListenerConfig with_paper_sizes() const;
};

json to_json(const ListenerConfig& c);
ListenerConfig listener_config_from_json(const json& j);

// Bidirectional encoder over (claim, sign) tokens, mean-pooled into k logits.
// It sees the utterance only.
class ListenerModel {
 public:
  ListenerModel(ListenerConfig config, InitMode init, std::uint64_t seed);

  const ListenerConfig& config() const { return config_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  // (batch x k) logits.
  Var logits(Tape& tape, std::span<const Utterance> utterances) const;
  Matrix logits(std::span<const Utterance> utterances) const;

 private:
  ListenerConfig config_;
  ParameterSet params_;
  std::size_t token_embedding_ = 0;
  std::size_t position_embedding_ = 0;
  std::vector<TransformerLayer> layers_;
  LayerNorm final_ln_;
  Linear head_;
};

struct ListenerPrediction {
  std::vector<double> logits;
  std::vector<double> probs;
};

ListenerPrediction listener_predict(const ListenerModel& listener, const Utterance& u);

// Preference over claim groups. tau = 0 disables the wrapper.
struct ListenerPrior {
  std::vector<double> pi;
  double tau = 0.0;

  void validate(const Vocabulary& v) const;
};

json to_json(const ListenerPrior& p);
ListenerPrior listener_prior_from_json(const json& j);
ListenerPrior load_listener_prior(const std::filesystem::path& path);

// Reverse KL(g(u) || pi); +inf when u uses a group with pi = 0.
double group_kl(std::span<const double> g, std::span<const double> pi);

// Multiplier applied to the logits: 1 / (tau * KL + 1), or 0 when the KL is
// infinite and tau > 0 (the output is then exactly uniform).
double prior_logit_factor(const ListenerPrior& prior, const Utterance& u, const Vocabulary& v);

// Log-probabilities (batch x k) of the prior-scaled listener. A null prior is
// the raw listener.
Var prior_scaled_log_probs(Tape& tape, const ListenerModel& listener, const ListenerPrior* prior,
                           std::span<const Utterance> utterances, const Vocabulary& v);

std::vector<double> prior_scaled_predict(const ListenerModel& listener, const ListenerPrior& prior,
                                         const Utterance& u, const Vocabulary& v);

// Row-wise probabilities for a batch; prior may be null.
Matrix predict_batch(const ListenerModel& listener, const ListenerPrior* prior,
                     std::span<const Utterance> utterances, const Vocabulary& v);

std::vector<double> softmax(std::span<const double> logits);

}  // namespace pragmatix::agents
