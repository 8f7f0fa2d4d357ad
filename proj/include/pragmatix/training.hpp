#pragma once

// Alternating preference-based speaker updates and NLL listener updates.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "pragmatix/agents/listener.hpp"
#include "pragmatix/agents/speaker.hpp"
#include "pragmatix/diff/optim.hpp"
#include "pragmatix/grounding.hpp"

namespace pragmatix::training {

using agents::ListenerModel;
using agents::ListenerPrior;
using agents::SpeakerModel;
using diff::Matrix;
using diff::OptimizerConfig;

struct TrainConfig {
  double alpha = 0.2;
  double gamma = 0.4;
  double beta = 0.6;
  int n_expl = 8;
  int b = 4;
  int iterations = 1;
  int max_len = 6;
  bool fixed_length = false;
  int speaker_epochs = 1;
  int listener_epochs = 1;
  int batch_size = 64;
  OptimizerConfig speaker_optimizer;
  OptimizerConfig listener_optimizer;
  int speaker_width = 64;
  int speaker_layers = 2;
  int speaker_heads = 4;
  int listener_width = 64;
  int listener_layers = 2;
  int listener_heads = 4;
  bool paper_sizes = false;
  std::optional<ListenerPrior> prior;
  // Keeps the previous iteration's candidates in each example's ranking pool.
  bool retain_candidates = false;
  int eval_samples = 1;
  double kl_cap = 1e3;
  std::uint64_t seed = 0;

  void validate() const;
  agents::SpeakerConfig speaker_config(int m, int d) const;
  agents::ListenerConfig listener_config(int m, int k) const;
};

json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const json& j);

struct IterationReport {
  int iteration = 0;
  int num_pairs = 0;
  int num_ties = 0;
  int num_human_pairs = 0;
  double dpo_loss = 0.0;      // mean over the pairs after the update
  double margin = 0.0;        // mean beta * log-ratio gap after the update
  double listener_nll = 0.0;  // mean over the explanation set after the update
  double val_accuracy = 0.0;
  std::optional<double> kl_alignment;
};

json to_json(const IterationReport& r);
IterationReport iteration_report_from_json(const json& j);

// P[u+ preferred over u-] = sigmoid(r_plus - r_minus).
double bt_probability(double r_plus, double r_minus);

// Example id -> example, for resolving preference pairs.
class ExampleIndex {
 public:
  explicit ExampleIndex(std::span<const Example> examples);
  const Example& at(const std::string& id) const;
  bool contains(const std::string& id) const { return map_.count(id) != 0; }

 private:
  std::unordered_map<std::string, const Example*> map_;
};

json preference_to_json(const PreferencePair& p);
PreferencePair preference_from_json(const json& j, std::size_t max_len);
void save_preferences(std::span<const PreferencePair> pairs, const std::filesystem::path& path);
std::vector<PreferencePair> load_preferences(const std::filesystem::path& path, std::size_t max_len);

struct PreferenceDataset {
  std::vector<PreferencePair> pairs;  // ties removed; human pairs appended last
  int ties = 0;
  int human = 0;
  // Candidates drawn per example, kept for the retain_candidates option.
  std::vector<std::vector<Utterance>> candidates;
};

// b fresh candidates per example from the speaker, scored with fidelity plus
// alpha times the (prior-scaled) listener probability of the prediction, and
// turned into ranked pairs. `previous` optionally extends each pool.
PreferenceDataset make_preference_dataset(const Dataset& d, const SpeakerModel& speaker,
                                          const ListenerModel& listener,
                                          const TrainConfig& config, std::uint64_t seed,
                                          std::span<const PreferencePair> human = {},
                                          double human_weight = 1.0,
                                          const std::vector<std::vector<Utterance>>* previous = nullptr);

// Recorded mean DPO loss over `pairs`; ref_plus / ref_minus are the frozen
// reference log-probabilities.
diff::Var dpo_loss(diff::Tape& tape, const SpeakerModel& speaker,
                   std::span<const PreferencePair> pairs, std::span<const double> ref_plus,
                   std::span<const double> ref_minus, const ExampleIndex& index, double beta,
                   std::vector<double>* margins = nullptr);

double dpo_loss(const SpeakerModel& speaker, const SpeakerModel& reference,
                std::span<const PreferencePair> pairs, const ExampleIndex& index, double beta,
                double* mean_margin = nullptr);

struct PhaseStats {
  double loss = 0.0;
  double margin = 0.0;
  int steps = 0;
};

// Minimizes the DPO loss against a frozen copy of the incoming speaker.
// Returns the updated speaker; the input is never modified.
SpeakerModel dpo_update(const SpeakerModel& speaker, std::span<const PreferencePair> pairs,
                        const ExampleIndex& index, double beta, const OptimizerConfig& optimizer,
                        int epochs, int batch_size, std::uint64_t seed, PhaseStats* stats = nullptr);

struct ExplanationItem {
  int target = 0;  // the classifier's prediction
  Utterance utterance;
};

std::vector<ExplanationItem> make_explanation_dataset(const Dataset& d, const SpeakerModel& speaker,
                                                      int n_expl, std::uint64_t seed);

diff::Var listener_nll(diff::Tape& tape, const ListenerModel& listener, const ListenerPrior* prior,
                       std::span<const ExplanationItem> items, const Vocabulary& v);
double listener_nll(const ListenerModel& listener, const ListenerPrior* prior,
                    std::span<const ExplanationItem> items, const Vocabulary& v);

ListenerModel listener_update(const ListenerModel& listener, std::span<const ExplanationItem> items,
                              const ListenerPrior* prior, const Vocabulary& v,
                              const OptimizerConfig& optimizer, int epochs, int batch_size,
                              std::uint64_t seed, PhaseStats* stats = nullptr);

// Per-iteration, per-phase stream seeds.
enum class Phase : std::uint64_t {
  kInitSpeaker = 1,
  kInitListener,
  kPreference,
  kDpo,
  kExplanation,
  kListener,
  kEval,
};
std::uint64_t phase_seed(std::uint64_t base, int iteration, Phase phase);

struct Models {
  SpeakerModel speaker;
  ListenerModel listener;
};

Models initial_models(const TrainConfig& config, const Dataset& d);

struct HumanPreferences {
  std::vector<PreferencePair> pairs;
  double weight = 1.0;
};

struct StepResult {
  Models models;
  IterationReport report;
  std::vector<std::vector<Utterance>> candidates;
};

// One iteration: preferences, DPO, explanations, NLL, validation metrics.
StepResult run_iteration(const Models& models, const Dataset& train, const Dataset& val,
                         const TrainConfig& config, int iteration,
                         const HumanPreferences* human = nullptr,
                         const std::vector<std::vector<Utterance>>* previous = nullptr);

struct RunResult {
  Models models;
  std::vector<IterationReport> reports;
};

struct RunOptions {
  // When set, checkpoints and reports are written under this directory and an
  // interrupted run resumes from its last completed iteration.
  std::optional<std::filesystem::path> out_dir;
  // Called after every completed iteration; returning false stops the run.
  std::function<bool(const IterationReport&)> on_iteration;
  // Stop after this many iterations of the current invocation (testing aid).
  std::optional<int> stop_after;
  std::optional<HumanPreferences> human;
};

RunResult run(const Dataset& train, const Dataset& val, const TrainConfig& config,
              const RunOptions& options = {});

// Checkpoint directory layout helpers.
std::filesystem::path iteration_dir(const std::filesystem::path& out, int iteration);
void save_models(const Models& models, const std::filesystem::path& dir);
Models load_models(const TrainConfig& config, const Dataset& d, const std::filesystem::path& dir);
// Highest iteration with a completed checkpoint, or 0.
int last_completed_iteration(const std::filesystem::path& out);

}  // namespace pragmatix::training
