#pragma once

// Live reference games with human listeners and collection of human pairwise
// preferences. The Service class holds all logic; make_http_server() exposes
// it over HTTP+JSON.

#include <atomic>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "pragmatix/training.hpp"

namespace httplib {
class Server;
}

namespace pragmatix::service {

// Error with an HTTP status and a stable machine-readable code.
class ServiceError : public Error {
 public:
  ServiceError(int status, std::string code, const std::string& message)
      : Error(message), status_(status), code_(std::move(code)) {}
  int status() const { return status_; }
  const std::string& code() const { return code_; }

 private:
  int status_;
  std::string code_;
};

struct ServiceConfig {
  int trials = 20;
  int options = 5;
  int preference_tasks = 5;
  // Empty disables every admin route.
  std::string admin_token;
  std::filesystem::path event_log;
  // When set, each admin training iteration is checkpointed here in the
  // same layout as an offline run.
  std::optional<std::filesystem::path> run_dir;
  std::uint64_t seed = 0;
  training::TrainConfig train_config;
};

struct Trial {
  std::string example_id;
  Utterance utterance;
  std::vector<int> options;  // class indices, shuffled, prediction included
  int prediction = 0;
};

struct PreferenceTask {
  std::string task_id;
  std::string example_id;
  int prediction = 0;
  Utterance a;
  Utterance b;
};

struct GuessRecord {
  int trial = 0;
  int choice = 0;
  bool correct = false;
  long latency_ms = 0;
  std::string idempotency_key;
  std::string timestamp;
};

struct PreferenceRecord {
  std::string task_id;
  std::string winner;  // "A" or "B"
  long latency_ms = 0;
  std::string timestamp;
};

struct Session {
  std::string id;
  std::string created;
  std::string condition;  // speaker snapshot the schedule was drawn from
  json demographics;
  std::vector<Trial> trials;
  std::vector<PreferenceTask> tasks;
  std::vector<GuessRecord> guesses;
  std::map<std::string, PreferenceRecord> preferences;
  std::vector<std::string> preference_order;
};

struct Snapshot {
  training::Models models;
  int iteration = 0;
  std::optional<training::IterationReport> last_report;
  std::string id() const;
};

class Service {
 public:
  // Replays an existing event log, if any, before accepting requests.
  Service(ServiceConfig config, Dataset train, Dataset val, training::Models models,
          int iteration);

  json create_session(const json& body);
  json next_trial(const std::string& session_id);
  json record_guess(const std::string& session_id, int trial, const json& body);
  json next_preference_task(const std::string& session_id);
  json record_preference(const std::string& session_id, const std::string& task_id,
                         const json& body);

  // Admin operations; `token` is the presented bearer token.
  json run_training_iteration(const std::string& token, const json& body);
  json metrics(const std::string& token) const;
  std::string export_preferences(const std::string& token) const;

  std::vector<PreferencePair> human_pairs() const;
  std::shared_ptr<const Snapshot> snapshot() const;
  std::map<std::string, Session> sessions() const;
  const ServiceConfig& config() const { return config_; }

  // Called inside the training critical section; tests use it to observe or
  // provoke concurrent triggers.
  void set_training_hook(std::function<void()> hook) { training_hook_ = std::move(hook); }

  // Rebuilds sessions from an event log alone.
  static std::map<std::string, Session> replay(const std::filesystem::path& log,
                                               const Vocabulary& v, std::size_t max_len);
  // PreferencePair export straight from an event log.
  static std::vector<PreferencePair> export_from_log(const std::filesystem::path& log,
                                                     std::size_t max_len);

 private:
  void check_admin(const std::string& token) const;
  void append_event(json event);
  Session& session_or_throw(const std::string& id);
  json trial_payload(const Session& s, int index) const;
  json render(const Utterance& u) const;
  Session build_session(const std::string& id, const Snapshot& snap, const json& demographics);

  ServiceConfig config_;
  Dataset train_;
  Dataset val_;
  mutable std::mutex state_mutex_;
  std::map<std::string, Session> sessions_;
  std::vector<PreferencePair> human_pairs_;
  std::uint64_t session_counter_ = 0;
  long event_seq_ = 0;
  mutable std::mutex snapshot_mutex_;
  std::shared_ptr<const Snapshot> snapshot_;
  std::atomic<bool> training_busy_{false};
  std::function<void()> training_hook_;
};

// Routes:
//   POST /sessions
//   GET  /sessions/{id}/trials/next
//   POST /sessions/{id}/trials/{n}/guess
//   GET  /sessions/{id}/preferences/next
//   POST /sessions/{id}/preferences/{task}
//   POST /admin/train
//   GET  /admin/metrics          (also /metrics)
//   GET  /admin/export/preferences
std::unique_ptr<httplib::Server> make_http_server(Service& service);

}  // namespace pragmatix::service
