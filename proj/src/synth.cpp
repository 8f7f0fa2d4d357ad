#include "pragmatix/synth.hpp"

#include <cmath>
#include <cstdio>
#include <set>

#include "pragmatix/rng.hpp"

namespace pragmatix::synth {

void WorldSpec::validate() const {
  if (k < 2) throw ConfigError("k must be >= 2");
  if (m < 1 || d < 1) throw ConfigError("m and d must be >= 1");
  if (n_train < 1 || n_val < 0) throw ConfigError("n_train must be >= 1, n_val >= 0");
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("epsilon must lie in [0, 1]");
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("rho must lie in [0, 1]");
  if (!(sigma_e >= 0.0)) throw ConfigError("sigma_e must be >= 0");
  if (num_groups < 1 || num_groups > m) throw ConfigError("num_groups must lie in [1, m]");
  if (!group_of.empty()) {
    if (static_cast<int>(group_of.size()) != m) throw ConfigError("group_of needs m entries");
    std::set<int> seen(group_of.begin(), group_of.end());
    if (*seen.begin() != 0 || *seen.rbegin() != num_groups - 1 ||
        static_cast<int>(seen.size()) != num_groups)
      throw ConfigError("group_of must use every group id in [0, num_groups)");
  }
  if (!prototypes.empty()) {
    if (static_cast<int>(prototypes.size()) != k) throw ConfigError("prototypes need k rows");
    for (const auto& p : prototypes) {
      if (static_cast<int>(p.size()) != m) throw ConfigError("prototype rows need m entries");
      for (int v : p)
        if (v != -1 && v != 1) throw ConfigError("prototype entries must be -1 or +1");
    }
    std::set<std::vector<int>> distinct(prototypes.begin(), prototypes.end());
    if (static_cast<int>(distinct.size()) != k) throw ConfigError("prototypes must be distinct");
  }
  if (!(common_fraction >= 0.0 && common_fraction <= 1.0) ||
      !(common_prevalence >= 0.0 && common_prevalence <= 1.0) ||
      !(rare_prevalence >= 0.0 && rare_prevalence <= 1.0))
    throw ConfigError("prevalence settings must lie in [0, 1]");
}

json to_json(const WorldSpec& s) {
  return {{"k", s.k},
          {"m", s.m},
          {"d", s.d},
          {"n_train", s.n_train},
          {"n_val", s.n_val},
          {"epsilon", s.epsilon},
          {"sigma_e", s.sigma_e},
          {"rho", s.rho},
          {"num_groups", s.num_groups},
          {"group_of", s.group_of},
          {"prototypes", s.prototypes},
          {"common_fraction", s.common_fraction},
          {"common_prevalence", s.common_prevalence},
          {"rare_prevalence", s.rare_prevalence},
          {"seed", s.seed}};
}

WorldSpec world_spec_from_json(const json& j) {
  WorldSpec s = default_desk_world();
  s.k = j.value("k", s.k);
  s.m = j.value("m", s.m);
  s.d = j.value("d", s.d);
  s.n_train = j.value("n_train", s.n_train);
  s.n_val = j.value("n_val", s.n_val);
  s.epsilon = j.value("epsilon", s.epsilon);
  s.sigma_e = j.value("sigma_e", s.sigma_e);
  s.rho = j.value("rho", s.rho);
  s.num_groups = j.value("num_groups", s.num_groups);
  s.group_of = j.value("group_of", s.group_of);
  s.prototypes = j.value("prototypes", s.prototypes);
  s.common_fraction = j.value("common_fraction", s.common_fraction);
  s.common_prevalence = j.value("common_prevalence", s.common_prevalence);
  s.rare_prevalence = j.value("rare_prevalence", s.rare_prevalence);
  s.seed = j.value("seed", s.seed);
  return s;
}

WorldSpec load_world_spec(const std::filesystem::path& path) {
  try {
    return world_spec_from_json(json::parse(read_file(path)));
  } catch (const json::exception& e) {
    throw ParseError(e.what(), 0, path.string());
  }
}

WorldSpec default_desk_world() { return WorldSpec{}; }

double World::classifier_accuracy(const Dataset& d) const {
  int hits = 0, total = 0;
  for (const Example& e : d.examples) {
    if (!e.label) continue;
    ++total;
    hits += e.prediction == *e.label ? 1 : 0;
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / total;
}

namespace {

std::string padded(const char* prefix, int i, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%0*d", prefix, width, i);
  return buf;
}

std::vector<std::vector<int>> sample_prototypes(const WorldSpec& s, Rng& rng) {
  const int stride = s.common_fraction > 0.0
                         ? std::max(1, static_cast<int>(std::lround(1.0 / s.common_fraction)))
                         : 0;
  std::set<std::vector<int>> seen;
  std::vector<std::vector<int>> out;
  int attempts = 0;
  while (static_cast<int>(out.size()) < s.k) {
    if (++attempts > 1000 * s.k) throw ConfigError("cannot draw k distinct prototypes");
    std::vector<int> p(static_cast<std::size_t>(s.m));
    for (int j = 0; j < s.m; ++j) {
      const bool common = stride > 0 && j % stride == 0;
      const double prevalence = common ? s.common_prevalence : s.rare_prevalence;
      p[static_cast<std::size_t>(j)] = rng.bernoulli(prevalence) ? 1 : -1;
    }
    if (seen.insert(p).second) out.push_back(std::move(p));
  }
  return out;
}

Eigen::MatrixXd sample_projection(const WorldSpec& s, Rng& rng) {
  Eigen::MatrixXd g(s.d, s.m);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
  if (s.d >= s.m) {
    // Orthonormal columns keep prototype distances intact.
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    return qr.householderQ() * Eigen::MatrixXd::Identity(s.d, s.m);
  }
  return g / std::sqrt(static_cast<double>(s.d));
}

}  // namespace

int nearest_prototype(const World& world, std::span<const double> embedding) {
  const Eigen::Index d = world.projection.rows();
  Eigen::Map<const Eigen::VectorXd> e(embedding.data(), d);
  int best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < world.prototypes.size(); ++c) {
    Eigen::VectorXd p(world.projection.cols());
    for (Eigen::Index j = 0; j < p.size(); ++j)
      p(j) = world.prototypes[c][static_cast<std::size_t>(j)];
    const double dist = (e - world.projection * p).squaredNorm();
    if (dist < best_dist) {
      best_dist = dist;
      best = static_cast<int>(c);
    }
  }
  return best;
}

World generate_world(const WorldSpec& spec) {
  spec.validate();
  Rng world_rng(derive_seed(spec.seed, {0}));

  std::vector<int> group_of = spec.group_of;
  if (group_of.empty()) {
    group_of.resize(static_cast<std::size_t>(spec.m));
    for (int j = 0; j < spec.m; ++j)
      group_of[static_cast<std::size_t>(j)] = std::min(spec.num_groups - 1, j * spec.num_groups / spec.m);
  }
  std::vector<ClaimGroup> groups;
  for (int g = 0; g < spec.num_groups; ++g) groups.push_back({g, padded("group_", g, 1)});
  std::vector<Claim> claims;
  for (int j = 0; j < spec.m; ++j)
    claims.push_back({j, padded("attr_", j, 2), {group_of[static_cast<std::size_t>(j)]}});

  World w;
  w.vocabulary = Vocabulary(std::move(claims), std::move(groups));
  w.prototypes = spec.prototypes.empty() ? sample_prototypes(spec, world_rng) : spec.prototypes;
  w.projection = sample_projection(spec, world_rng);

  std::vector<std::string> class_names;
  for (int c = 0; c < spec.k; ++c) class_names.push_back(padded("class_", c, 1));

  auto make_split = [&](const char* prefix, int n, std::uint64_t split_tag) {
    Dataset ds;
    ds.vocabulary = w.vocabulary;
    ds.class_names = class_names;
    for (int i = 0; i < n; ++i) {
      Rng rng(derive_seed(spec.seed, {split_tag, static_cast<std::uint64_t>(i)}));
      Example e;
      e.id = padded(prefix, i, 5);
      const int y = static_cast<int>(rng.index(static_cast<std::size_t>(spec.k)));
      Eigen::VectorXd attrs(spec.m);
      for (int j = 0; j < spec.m; ++j) {
        int a = w.prototypes[static_cast<std::size_t>(y)][static_cast<std::size_t>(j)];
        if (rng.bernoulli(spec.epsilon)) a = -a;
        attrs(j) = a;
      }
      Eigen::VectorXd emb = w.projection * attrs;
      for (Eigen::Index r = 0; r < emb.size(); ++r) emb(r) += spec.sigma_e * rng.normal();
      e.embedding.assign(emb.data(), emb.data() + emb.size());
      e.semantics.resize(static_cast<std::size_t>(spec.m));
      for (int j = 0; j < spec.m; ++j)
        e.semantics[static_cast<std::size_t>(j)] = rng.bernoulli(spec.rho) ? 0 : static_cast<int>(attrs(j));
      e.label = y;
      e.prediction = nearest_prototype(w, e.embedding);
      ds.examples.push_back(std::move(e));
    }
    return ds;
  };
  w.train = make_split("train-", spec.n_train, 1);
  w.val = make_split("val-", spec.n_val, 2);
  return w;
}

}  // namespace pragmatix::synth
