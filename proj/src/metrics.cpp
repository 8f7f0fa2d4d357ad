#include "pragmatix/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace pragmatix::metrics {

int argmax(std::span<const double> v) {
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

namespace {

std::vector<int> listener_guesses(const ListenerModel& listener, const ListenerPrior* prior,
                                  const SampleSet& samples, const Vocabulary& v) {
  constexpr std::size_t kChunk = 1024;
  std::vector<int> guesses;
  guesses.reserve(samples.utterances.size());
  std::span<const Utterance> all(samples.utterances);
  for (std::size_t start = 0; start < all.size(); start += kChunk) {
    const auto chunk = all.subspan(start, std::min(kChunk, all.size() - start));
    const Matrix p = agents::predict_batch(listener, prior, chunk, v);
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      std::vector<double> row(p.row(r).data(), p.row(r).data() + p.cols());
      guesses.push_back(argmax(row));
    }
  }
  return guesses;
}

}  // namespace

double listener_accuracy(const ListenerModel& listener, const ListenerPrior* prior,
                         std::span<const Example> examples, const SampleSet& samples,
                         const Vocabulary& v) {
  if (samples.utterances.empty()) return 0.0;
  const auto guesses = listener_guesses(listener, prior, samples, v);
  long hits = 0;
  for (std::size_t i = 0; i < guesses.size(); ++i)
    hits += guesses[i] == examples[static_cast<std::size_t>(samples.example[i])].prediction;
  return static_cast<double>(hits) / static_cast<double>(guesses.size());
}

double listener_accuracy(const ListenerModel& listener, const ListenerPrior* prior,
                         const SpeakerModel& speaker, const Dataset& d, int per_example,
                         std::uint64_t seed) {
  const SampleSet s = agents::sample_for_examples(speaker, d.examples, per_example, seed);
  return listener_accuracy(listener, prior, d.examples, s, d.vocabulary);
}

ExplanationAccuracy explanation_accuracy(std::span<const Example> examples,
                                         const SampleSet& samples) {
  ExplanationAccuracy out;
  for (std::size_t i = 0; i < samples.utterances.size(); ++i) {
    const Example& e = examples[static_cast<std::size_t>(samples.example[i])];
    for (const Token& t : samples.utterances[i].tokens) {
      const int z = e.semantics[static_cast<std::size_t>(t.claim)];
      if (z == 0) continue;
      ++out.known_tokens;
      out.correct_tokens += z == to_int(t.sign) ? 1 : 0;
    }
  }
  if (out.known_tokens > 0)
    out.accuracy = static_cast<double>(out.correct_tokens) / static_cast<double>(out.known_tokens);
  return out;
}

KlSummary kl_alignment(std::span<const double> pi, const SampleSet& samples, const Vocabulary& v,
                       double cap) {
  KlSummary out;
  double total = 0.0;
  for (const Utterance& u : samples.utterances) {
    double kl = agents::group_kl(group_distribution(u, v), pi);
    if (std::isinf(kl)) {
      ++out.infinite;
      kl = cap;
    }
    total += std::min(kl, cap);
    ++out.count;
  }
  out.mean = out.count == 0 ? 0.0 : total / static_cast<double>(out.count);
  return out;
}

double normalized_kl(double mean, double baseline_mean) {
  if (!(baseline_mean > 0.0)) throw ConfigError("KL baseline must be > 0 to normalize");
  return mean / baseline_mean;
}

double positive_fraction(const SampleSet& samples) {
  long pos = 0, total = 0;
  for (const Utterance& u : samples.utterances) {
    for (const Token& t : u.tokens) {
      pos += t.sign == Sign::kPositive ? 1 : 0;
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(pos) / static_cast<double>(total);
}

double iou(std::span<const int> a, std::span<const int> b) {
  std::vector<int> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  sa.erase(std::unique(sa.begin(), sa.end()), sa.end());
  sb.erase(std::unique(sb.begin(), sb.end()), sb.end());
  std::vector<int> inter, uni;
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(inter));
  std::set_union(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(uni));
  if (uni.empty()) return 1.0;
  return static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

Diversity diversity_iou(std::span<const Example> examples, const SampleSet& samples,
                        bool use_labels) {
  std::vector<std::vector<int>> pos(samples.utterances.size()), neg(samples.utterances.size());
  std::vector<int> cls(samples.utterances.size());
  for (std::size_t i = 0; i < samples.utterances.size(); ++i) {
    for (const Token& t : samples.utterances[i].tokens)
      (t.sign == Sign::kPositive ? pos[i] : neg[i]).push_back(t.claim);
    const Example& e = examples[static_cast<std::size_t>(samples.example[i])];
    cls[i] = use_labels && e.label ? *e.label : e.prediction;
  }
  Diversity out;
  double sp = 0.0, sn = 0.0;
  for (std::size_t i = 0; i < cls.size(); ++i) {
    for (std::size_t j = i + 1; j < cls.size(); ++j) {
      if (cls[i] != cls[j]) continue;
      sp += iou(pos[i], pos[j]);
      sn += iou(neg[i], neg[j]);
      ++out.pairs;
    }
  }
  if (out.pairs > 0) {
    out.positive_iou = sp / static_cast<double>(out.pairs);
    out.negative_iou = sn / static_cast<double>(out.pairs);
  }
  return out;
}

std::vector<double> classifier_per_class_accuracy(std::span<const Example> examples, int k) {
  std::vector<double> hits(static_cast<std::size_t>(k), 0.0), n(static_cast<std::size_t>(k), 0.0);
  for (const Example& e : examples) {
    if (!e.label) continue;
    const auto c = static_cast<std::size_t>(*e.label);
    n[c] += 1.0;
    hits[c] += e.prediction == *e.label ? 1.0 : 0.0;
  }
  for (std::size_t c = 0; c < hits.size(); ++c) hits[c] = n[c] > 0 ? hits[c] / n[c] : 0.0;
  return hits;
}

std::vector<double> listener_per_class_accuracy(const ListenerModel& listener,
                                                const ListenerPrior* prior,
                                                std::span<const Example> examples,
                                                const SampleSet& samples, const Vocabulary& v,
                                                int k) {
  const auto guesses = listener_guesses(listener, prior, samples, v);
  std::vector<double> hits(static_cast<std::size_t>(k), 0.0), n(static_cast<std::size_t>(k), 0.0);
  for (std::size_t i = 0; i < guesses.size(); ++i) {
    const Example& e = examples[static_cast<std::size_t>(samples.example[i])];
    if (!e.label) continue;
    const auto c = static_cast<std::size_t>(*e.label);
    n[c] += 1.0;
    hits[c] += guesses[i] == e.prediction ? 1.0 : 0.0;
  }
  for (std::size_t c = 0; c < hits.size(); ++c) hits[c] = n[c] > 0 ? hits[c] / n[c] : 0.0;
  return hits;
}

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw ShapeMismatch("correlation needs paired vectors");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw DegenerateVariance("constant vector");
  return sxy / std::sqrt(sxx * syy);
}

double spearman(std::span<const double> x, std::span<const double> y) {
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  return pearson(rx, ry);
}

Correlation classwise_correlation(std::span<const double> listener_acc,
                                  std::span<const double> classifier_acc) {
  if (listener_acc.size() != classifier_acc.size())
    throw ShapeMismatch("per-class vectors differ in length");
  if (listener_acc.size() < 3) throw ConfigError("class-wise correlation needs >= 3 classes");
  Correlation c;
  try {
    const double r = pearson(listener_acc, classifier_acc);
    c.r2 = r * r;
    c.spearman = spearman(listener_acc, classifier_acc);
  } catch (const DegenerateVariance&) {
    c.r2 = 0.0;
    c.spearman.reset();
    c.degenerate = true;
  }
  return c;
}

json to_json(const EvalReport& r) {
  json j;
  j["listener_accuracy"] = r.listener_accuracy;
  j["explanation_accuracy"] = r.explanation.accuracy ? json(*r.explanation.accuracy) : json(nullptr);
  j["explanation_known_tokens"] = r.explanation.known_tokens;
  if (!r.explanation.accuracy) j["explanation_flag"] = "no known tokens";
  if (r.kl) {
    j["mean_kl_alignment"] = r.kl->mean;
    j["kl_infinite_count"] = r.kl->infinite;
    j["kl_count"] = r.kl->count;
  }
  j["normalized_kl_alignment"] = r.normalized_kl ? json(*r.normalized_kl) : json(nullptr);
  j["listener_per_class_accuracy"] = r.listener_per_class;
  j["classifier_per_class_accuracy"] = r.classifier_per_class;
  j["classwise_r2"] = r.correlation.r2;
  j["classwise_spearman"] = r.correlation.spearman ? json(*r.correlation.spearman) : json(nullptr);
  j["classwise_degenerate"] = r.correlation.degenerate;
  j["diversity"] = {{"positive_iou", r.diversity.positive_iou},
                    {"negative_iou", r.diversity.negative_iou},
                    {"pairs", r.diversity.pairs}};
  j["positive_fraction"] = r.positive_fraction;
  return j;
}

std::string per_class_csv(const EvalReport& r, std::span<const std::string> class_names) {
  std::ostringstream os;
  os.precision(17);
  os << "class,listener_accuracy,classifier_accuracy\n";
  for (std::size_t c = 0; c < r.listener_per_class.size(); ++c) {
    os << (c < class_names.size() ? class_names[c] : std::to_string(c)) << ','
       << r.listener_per_class[c] << ',' << r.classifier_per_class[c] << '\n';
  }
  return os.str();
}

EvalReport evaluate(const SpeakerModel& speaker, const ListenerModel& listener,
                    const ListenerPrior* prior, const Dataset& d, const EvalOptions& options) {
  const int k = static_cast<int>(d.num_classes());
  const SampleSet s = agents::sample_for_examples(speaker, d.examples, options.per_example, options.seed);
  EvalReport r;
  r.listener_accuracy = listener_accuracy(listener, prior, d.examples, s, d.vocabulary);
  r.explanation = explanation_accuracy(d.examples, s);
  if (prior != nullptr) {
    r.kl = kl_alignment(prior->pi, s, d.vocabulary, options.kl_cap);
    if (options.kl_baseline && *options.kl_baseline > 0.0)
      r.normalized_kl = normalized_kl(r.kl->mean, *options.kl_baseline);
  }
  r.listener_per_class = listener_per_class_accuracy(listener, prior, d.examples, s, d.vocabulary, k);
  r.classifier_per_class = classifier_per_class_accuracy(d.examples, k);
  if (k >= 3) r.correlation = classwise_correlation(r.listener_per_class, r.classifier_per_class);
  r.diversity = diversity_iou(d.examples, s);
  r.positive_fraction = positive_fraction(s);
  return r;
}

}  // namespace pragmatix::metrics
