#pragma once

#include <filesystem>
#include <map>
#include <random>
#include <string>

#include "pragmatix/core.hpp"
#include "pragmatix/synth.hpp"
#include "pragmatix/training.hpp"

namespace testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("pragmatix-" + tag + "-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline pragmatix::Utterance utt(std::initializer_list<std::pair<int, int>> tokens,
                                std::size_t max_len = 6) {
  pragmatix::Utterance u;
  u.max_len = max_len;
  for (auto [c, s] : tokens) u.tokens.push_back({c, pragmatix::sign_from_int(s)});
  return u;
}

// m claims, claim j in group j / per_group.
inline pragmatix::Vocabulary block_vocabulary(int m, int groups) {
  std::vector<pragmatix::Claim> claims;
  std::vector<pragmatix::ClaimGroup> gs;
  const int per = m / groups;
  for (int g = 0; g < groups; ++g) gs.push_back({g, "group_" + std::to_string(g)});
  for (int j = 0; j < m; ++j)
    claims.push_back({j, "c" + std::to_string(j), {std::min(j / per, groups - 1)}});
  return pragmatix::Vocabulary(claims, gs);
}

// A world small enough for end-to-end runs in well under a second.
inline pragmatix::synth::World tiny_world(std::uint64_t seed = 1, int n_train = 24, int n_val = 12) {
  pragmatix::synth::WorldSpec s;
  s.k = 3;
  s.m = 6;
  s.d = 6;
  s.n_train = n_train;
  s.n_val = n_val;
  s.num_groups = 2;
  s.seed = seed;
  return pragmatix::synth::generate_world(s);
}

inline pragmatix::training::TrainConfig tiny_config(std::uint64_t seed = 3) {
  pragmatix::training::TrainConfig c;
  c.max_len = 2;
  c.n_expl = 2;
  c.b = 3;
  c.batch_size = 16;
  c.speaker_width = 8;
  c.speaker_layers = 1;
  c.speaker_heads = 2;
  c.listener_width = 8;
  c.listener_layers = 1;
  c.listener_heads = 2;
  c.speaker_optimizer.learning_rate = 1e-3;
  c.listener_optimizer.learning_rate = 1e-3;
  c.seed = seed;
  return c;
}

// Every regular file under `root`, relative path -> contents.
inline std::map<std::string, std::string> read_tree(const std::filesystem::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root))
    if (e.is_regular_file())
      out[std::filesystem::relative(e.path(), root).string()] = pragmatix::read_file(e.path());
  return out;
}

}  // namespace testing
