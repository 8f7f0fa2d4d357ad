#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pragmatix/agents/listener.hpp"
#include "pragmatix/agents/speaker.hpp"

namespace pragmatix::metrics {

using agents::ListenerModel;
using agents::ListenerPrior;
using agents::SampleSet;
using agents::SpeakerModel;
using diff::Matrix;

class DegenerateVariance : public Error {
 public:
  explicit DegenerateVariance(const std::string& what) : Error("degenerate variance: " + what) {}
};

// Argmax with ties resolved to the lowest index.
int argmax(std::span<const double> v);

// Fraction of sampled utterances whose prior-scaled listener argmax equals
// the example's prediction. prior may be null.
double listener_accuracy(const ListenerModel& listener, const ListenerPrior* prior,
                         std::span<const Example> examples, const SampleSet& samples,
                         const Vocabulary& v);
double listener_accuracy(const ListenerModel& listener, const ListenerPrior* prior,
                         const SpeakerModel& speaker, const Dataset& d, int per_example,
                         std::uint64_t seed);

struct ExplanationAccuracy {
  std::optional<double> accuracy;  // empty when no sampled token had known semantics
  long known_tokens = 0;
  long correct_tokens = 0;
};

ExplanationAccuracy explanation_accuracy(std::span<const Example> examples,
                                         const SampleSet& samples);

struct KlSummary {
  double mean = 0.0;  // infinite values enter the mean at `cap`
  long infinite = 0;
  long count = 0;
};

KlSummary kl_alignment(std::span<const double> pi, const SampleSet& samples, const Vocabulary& v,
                       double cap = 1e3);
// mean / baseline_mean; requires baseline_mean > 0.
double normalized_kl(double mean, double baseline_mean);

// Share of +1 tokens among all sampled tokens.
double positive_fraction(const SampleSet& samples);

// Intersection over union; two empty sets give 1.
double iou(std::span<const int> a, std::span<const int> b);

struct Diversity {
  double positive_iou = 1.0;
  double negative_iou = 1.0;
  long pairs = 0;
};

// Mean IoU over utterance pairs whose examples share a class (the prediction
// when use_labels is false).
Diversity diversity_iou(std::span<const Example> examples, const SampleSet& samples,
                        bool use_labels = false);

// Per ground-truth class: fraction of examples with prediction == label.
std::vector<double> classifier_per_class_accuracy(std::span<const Example> examples, int k);
// Per ground-truth class: fraction of sampled utterances whose listener argmax
// equals the prediction.
std::vector<double> listener_per_class_accuracy(const ListenerModel& listener,
                                                const ListenerPrior* prior,
                                                std::span<const Example> examples,
                                                const SampleSet& samples, const Vocabulary& v,
                                                int k);

// Average ranks (1-based), ties share the mean rank.
std::vector<double> average_ranks(std::span<const double> x);
// Throws DegenerateVariance when either input is constant.
double pearson(std::span<const double> x, std::span<const double> y);
double spearman(std::span<const double> x, std::span<const double> y);

struct Correlation {
  double r2 = 0.0;
  std::optional<double> spearman;  // empty when a vector is constant
  bool degenerate = false;
};

// R^2 of the least-squares line and Spearman rank correlation. Needs >= 3
// classes.
Correlation classwise_correlation(std::span<const double> listener_acc,
                                  std::span<const double> classifier_acc);

struct EvalReport {
  double listener_accuracy = 0.0;
  ExplanationAccuracy explanation;
  std::optional<KlSummary> kl;
  std::optional<double> normalized_kl;
  std::vector<double> listener_per_class;
  std::vector<double> classifier_per_class;
  Correlation correlation;
  Diversity diversity;
  double positive_fraction = 0.0;
};

json to_json(const EvalReport& r);
// class,listener_accuracy,classifier_accuracy rows.
std::string per_class_csv(const EvalReport& r, std::span<const std::string> class_names);

struct EvalOptions {
  int per_example = 1;
  std::uint64_t seed = 0;
  double kl_cap = 1e3;
  std::optional<double> kl_baseline;
};

EvalReport evaluate(const SpeakerModel& speaker, const ListenerModel& listener,
                    const ListenerPrior* prior, const Dataset& d, const EvalOptions& options);

}  // namespace pragmatix::metrics
