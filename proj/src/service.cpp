#include "pragmatix/service.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <sstream>

#include <httplib.h>

#include "pragmatix/rng.hpp"

namespace pragmatix::service {

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  const auto ms =
      std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[96];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900,
                tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
  return buf;
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

ServiceError not_found(const std::string& code, const std::string& what) {
  return ServiceError(404, code, what);
}

ServiceError conflict(const std::string& code, const std::string& what) {
  return ServiceError(409, code, what);
}

ServiceError invalid(const std::string& what) { return ServiceError(400, "ValidationError", what); }

long latency_of(const json& body) {
  if (!body.contains("latency_ms")) return 0;
  if (!body["latency_ms"].is_number()) throw invalid("latency_ms must be a number");
  return body["latency_ms"].get<long>();
}

// Distinct indices in [0, n), at most `count` of them.
std::vector<std::size_t> choose(std::size_t n, std::size_t count, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  count = std::min(count, n);
  for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + rng.index(n - i)]);
  idx.resize(count);
  return idx;
}

json trial_to_json(const Trial& t) {
  return {{"example_id", t.example_id},
          {"utterance", utterance_tokens_to_json(t.utterance)},
          {"options", t.options},
          {"prediction", t.prediction}};
}

Trial trial_from_json(const json& j, std::size_t max_len) {
  return {j.at("example_id").get<std::string>(), utterance_from_json(j.at("utterance"), max_len),
          j.at("options").get<std::vector<int>>(), j.at("prediction").get<int>()};
}

json task_to_json(const PreferenceTask& t) {
  return {{"task_id", t.task_id},
          {"example_id", t.example_id},
          {"prediction", t.prediction},
          {"a", utterance_tokens_to_json(t.a)},
          {"b", utterance_tokens_to_json(t.b)}};
}

PreferenceTask task_from_json(const json& j, std::size_t max_len) {
  return {j.at("task_id").get<std::string>(), j.at("example_id").get<std::string>(),
          j.at("prediction").get<int>(), utterance_from_json(j.at("a"), max_len),
          utterance_from_json(j.at("b"), max_len)};
}

PreferencePair pair_from_event(const json& e, std::size_t max_len) {
  PreferencePair p;
  p.example_id = e.at("example_id").get<std::string>();
  p.u_plus = utterance_from_json(e.at("u_plus"), max_len);
  p.u_minus = utterance_from_json(e.at("u_minus"), max_len);
  p.tie = false;
  p.source = PreferenceSource::kHuman;
  return p;
}

Session& event_session(std::map<std::string, Session>& sessions, const json& e) {
  const std::string id = e.at("session_id").get<std::string>();
  auto it = sessions.find(id);
  if (it == sessions.end()) throw ParseError("event refers to unknown session '" + id + "'");
  return it->second;
}

void apply_event(std::map<std::string, Session>& sessions, std::vector<PreferencePair>* pairs,
                 const json& e, std::size_t max_len) {
  const std::string type = e.at("type").get<std::string>();
  if (type == "session_created") {
    Session s;
    s.id = e.at("session_id").get<std::string>();
    s.created = e.at("timestamp").get<std::string>();
    s.condition = e.at("condition").get<std::string>();
    s.demographics = e.value("demographics", json::object());
    for (const auto& t : e.at("trials")) s.trials.push_back(trial_from_json(t, max_len));
    for (const auto& t : e.at("tasks")) s.tasks.push_back(task_from_json(t, max_len));
    sessions[s.id] = std::move(s);
  } else if (type == "guess") {
    Session& s = event_session(sessions, e);
    GuessRecord g;
    g.trial = e.at("trial").get<int>();
    g.choice = e.at("choice").get<int>();
    g.correct = e.at("correct").get<bool>();
    g.latency_ms = e.value("latency_ms", 0L);
    g.idempotency_key = e.value("idempotency_key", "");
    g.timestamp = e.at("timestamp").get<std::string>();
    s.guesses.push_back(std::move(g));
  } else if (type == "preference") {
    Session& s = event_session(sessions, e);
    PreferenceRecord r;
    r.task_id = e.at("task_id").get<std::string>();
    r.winner = e.at("winner").get<std::string>();
    r.latency_ms = e.value("latency_ms", 0L);
    r.timestamp = e.at("timestamp").get<std::string>();
    s.preference_order.push_back(r.task_id);
    s.preferences[r.task_id] = std::move(r);
    if (pairs != nullptr) pairs->push_back(pair_from_event(e, max_len));
  }
}

template <typename Fn>
void for_each_event(const std::filesystem::path& log, Fn&& fn) {
  if (log.empty() || !std::filesystem::exists(log)) return;
  std::ifstream in(log);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json e;
    try {
      e = json::parse(line);
    } catch (const json::exception& ex) {
      throw ParseError(log.string() + ": " + ex.what(), line_no);
    }
    try {
      fn(e);
    } catch (const json::exception& ex) {
      throw ParseError(log.string() + ": malformed event: " + ex.what(), line_no);
    } catch (const ParseError& ex) {
      throw ParseError(log.string() + ": " + ex.what(), line_no);
    }
  }
}

}  // namespace

std::string Snapshot::id() const {
  char buf[32];
  std::snprintf(buf, sizeof buf, "iter_%04d", iteration);
  return buf;
}

Service::Service(ServiceConfig config, Dataset train, Dataset val, training::Models models,
                 int iteration)
    : config_(std::move(config)), train_(std::move(train)), val_(std::move(val)) {
  if (config_.trials < 1 || config_.options < 2 || config_.preference_tasks < 0)
    throw ConfigError("service needs trials >= 1, options >= 2, preference_tasks >= 0");
  if (val_.examples.empty()) val_ = train_;
  auto snap = std::make_shared<Snapshot>(Snapshot{std::move(models), iteration, std::nullopt});
  snapshot_ = std::move(snap);
  const auto max_len = static_cast<std::size_t>(config_.train_config.max_len);
  for_each_event(config_.event_log, [&](const json& e) {
    apply_event(sessions_, &human_pairs_, e, max_len);
    if (e.at("type") == "session_created") ++session_counter_;
    event_seq_ = std::max(event_seq_, e.value("seq", 0L));
  });
}

std::shared_ptr<const Snapshot> Service::snapshot() const {
  std::lock_guard lock(snapshot_mutex_);
  return snapshot_;
}

std::map<std::string, Session> Service::sessions() const {
  std::lock_guard lock(state_mutex_);
  return sessions_;
}

std::vector<PreferencePair> Service::human_pairs() const {
  std::lock_guard lock(state_mutex_);
  return human_pairs_;
}

void Service::append_event(json event) {
  event["seq"] = ++event_seq_;
  if (config_.event_log.empty()) return;
  std::ofstream out(config_.event_log, std::ios::app);
  out << event.dump() << "\n";
  out.flush();
  if (!out) throw Error("cannot append to event log " + config_.event_log.string());
}

Session& Service::session_or_throw(const std::string& id) {
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw not_found("UnknownSession", "unknown session '" + id + "'");
  return it->second;
}

json Service::render(const Utterance& u) const {
  json out = json::array();
  for (const Token& t : u.tokens) {
    out.push_back({{"claim", train_.vocabulary.claim(t.claim).name},
                   {"value", t.sign == Sign::kPositive ? "yes" : "no"}});
  }
  return out;
}

Session Service::build_session(const std::string& id, const Snapshot& snap,
                               const json& demographics) {
  Rng rng(derive_seed(config_.seed, {fnv1a(id)}));
  Session s;
  s.id = id;
  s.created = utc_now();
  s.condition = snap.id();
  s.demographics = demographics;
  const int k = static_cast<int>(train_.num_classes());
  const auto trial_idx = choose(val_.examples.size(), static_cast<std::size_t>(config_.trials), rng);
  std::vector<Example> trial_examples;
  std::vector<std::uint64_t> seeds;
  for (std::size_t i : trial_idx) {
    trial_examples.push_back(val_.examples[i]);
    seeds.push_back(rng.engine()());
  }
  std::vector<const Example*> ptrs;
  for (const auto& e : trial_examples) ptrs.push_back(&e);
  const auto utts = snap.models.speaker.sample(agents::embedding_matrix(ptrs), seeds);
  for (std::size_t t = 0; t < trial_examples.size(); ++t) {
    Trial trial;
    trial.example_id = trial_examples[t].id;
    trial.utterance = utts[t];
    trial.prediction = trial_examples[t].prediction;
    std::vector<std::size_t> others;
    for (int c = 0; c < k; ++c)
      if (c != trial.prediction) others.push_back(static_cast<std::size_t>(c));
    const auto picked = choose(others.size(), static_cast<std::size_t>(std::min(config_.options, k) - 1), rng);
    trial.options.push_back(trial.prediction);
    for (std::size_t p : picked) trial.options.push_back(static_cast<int>(others[p]));
    for (std::size_t i = trial.options.size(); i > 1; --i)
      std::swap(trial.options[i - 1], trial.options[rng.index(i)]);
    s.trials.push_back(std::move(trial));
  }

  const auto task_idx =
      choose(train_.examples.size(), static_cast<std::size_t>(config_.preference_tasks), rng);
  for (std::size_t n = 0; n < task_idx.size(); ++n) {
    const Example& e = train_.examples[task_idx[n]];
    std::vector<const Example*> one{&e, &e};
    PreferenceTask task;
    task.task_id = "t" + std::to_string(n);
    task.example_id = e.id;
    task.prediction = e.prediction;
    // A few redraws to avoid showing the same explanation twice.
    for (int attempt = 0; attempt < 8; ++attempt) {
      const std::uint64_t pair_seeds[2] = {rng.engine()(), rng.engine()()};
      auto drawn = snap.models.speaker.sample(agents::embedding_matrix(one), pair_seeds);
      task.a = drawn[0];
      task.b = drawn[1];
      if (!(task.a == task.b)) break;
    }
    s.tasks.push_back(std::move(task));
  }
  return s;
}

json Service::create_session(const json& body) {
  if (!body.is_object()) throw invalid("request body must be a JSON object");
  json demographics = body.value("demographics", json::object());
  const auto snap = snapshot();
  if (body.contains("condition") && !body["condition"].is_null() &&
      body["condition"].get<std::string>() != snap->id())
    throw conflict("UnknownCondition", "only the current snapshot '" + snap->id() + "' is served");
  std::lock_guard lock(state_mutex_);
  char id_buf[40];
  std::snprintf(id_buf, sizeof id_buf, "s%06llu-%08llx",
                static_cast<unsigned long long>(session_counter_ + 1),
                static_cast<unsigned long long>(derive_seed(config_.seed, {session_counter_}) & 0xffffffffULL));
  const std::string id = id_buf;
  Session s = build_session(id, *snap, demographics);
  json trials = json::array(), tasks = json::array();
  for (const auto& t : s.trials) trials.push_back(trial_to_json(t));
  for (const auto& t : s.tasks) tasks.push_back(task_to_json(t));
  append_event({{"type", "session_created"},
                {"session_id", id},
                {"timestamp", s.created},
                {"condition", s.condition},
                {"demographics", demographics},
                {"trials", trials},
                {"tasks", tasks}});
  ++session_counter_;
  sessions_[id] = s;
  return {{"session_id", id},
          {"condition", s.condition},
          {"created", s.created},
          {"total_trials", s.trials.size()},
          {"total_preference_tasks", s.tasks.size()}};
}

json Service::trial_payload(const Session& s, int index) const {
  const Trial& t = s.trials[static_cast<std::size_t>(index)];
  json options = json::array();
  for (int c : t.options) options.push_back(train_.class_names[static_cast<std::size_t>(c)]);
  return {{"session_id", s.id},
          {"trial_index", index},
          {"total_trials", s.trials.size()},
          {"utterance", render(t.utterance)},
          {"options", options}};
}

json Service::next_trial(const std::string& session_id) {
  std::lock_guard lock(state_mutex_);
  const Session& s = session_or_throw(session_id);
  const int next = static_cast<int>(s.guesses.size());
  if (next >= static_cast<int>(s.trials.size()))
    throw conflict("SessionComplete", "all " + std::to_string(s.trials.size()) + " trials answered");
  return trial_payload(s, next);
}

json Service::record_guess(const std::string& session_id, int trial, const json& body) {
  if (!body.is_object()) throw invalid("request body must be a JSON object");
  std::lock_guard lock(state_mutex_);
  Session& s = session_or_throw(session_id);
  const std::string key = body.value("idempotency_key", "");
  // A retried submission of an already recorded guess returns the same result.
  if (trial >= 0 && trial < static_cast<int>(s.guesses.size()) && !key.empty() &&
      s.guesses[static_cast<std::size_t>(trial)].idempotency_key == key) {
    const GuessRecord& g = s.guesses[static_cast<std::size_t>(trial)];
    long hits = 0;
    for (const auto& r : s.guesses) hits += r.correct ? 1 : 0;
    return {{"trial_index", trial},
            {"correct", g.correct},
            {"completed", s.guesses.size() == s.trials.size()},
            {"correct_so_far", hits},
            {"answered", s.guesses.size()}};
  }
  const int next = static_cast<int>(s.guesses.size());
  if (next >= static_cast<int>(s.trials.size()))
    throw conflict("SessionComplete", "all trials already answered");
  if (trial != next)
    throw conflict("OutOfOrderTrial",
                   "expected trial " + std::to_string(next) + ", got " + std::to_string(trial));
  const Trial& t = s.trials[static_cast<std::size_t>(trial)];
  if (!body.contains("choice")) throw invalid("missing 'choice'");
  int choice = -1;
  const json& c = body["choice"];
  if (c.is_string()) {
    for (int o : t.options)
      if (train_.class_names[static_cast<std::size_t>(o)] == c.get<std::string>()) choice = o;
  } else if (c.is_number_integer()) {
    const int v = c.get<int>();
    if (std::find(t.options.begin(), t.options.end(), v) != t.options.end()) choice = v;
  }
  if (choice < 0) throw invalid("choice is not one of the offered options");
  GuessRecord g;
  g.trial = trial;
  g.choice = choice;
  g.correct = choice == t.prediction;
  g.latency_ms = latency_of(body);
  g.idempotency_key = key;
  g.timestamp = utc_now();
  append_event({{"type", "guess"},
                {"session_id", s.id},
                {"trial", trial},
                {"example_id", t.example_id},
                {"utterance", utterance_tokens_to_json(t.utterance)},
                {"options", t.options},
                {"choice", choice},
                {"correct", g.correct},
                {"latency_ms", g.latency_ms},
                {"idempotency_key", key},
                {"timestamp", g.timestamp}});
  s.guesses.push_back(g);
  long hits = 0;
  for (const auto& r : s.guesses) hits += r.correct ? 1 : 0;
  return {{"trial_index", trial},
          {"correct", g.correct},
          {"completed", s.guesses.size() == s.trials.size()},
          {"correct_so_far", hits},
          {"answered", s.guesses.size()}};
}

json Service::next_preference_task(const std::string& session_id) {
  std::lock_guard lock(state_mutex_);
  const Session& s = session_or_throw(session_id);
  for (const auto& t : s.tasks) {
    if (s.preferences.count(t.task_id)) continue;
    return {{"session_id", s.id},
            {"task_id", t.task_id},
            {"prediction", train_.class_names[static_cast<std::size_t>(t.prediction)]},
            {"a", render(t.a)},
            {"b", render(t.b)},
            {"remaining", s.tasks.size() - s.preferences.size()}};
  }
  throw conflict("SessionComplete", "no preference tasks left");
}

json Service::record_preference(const std::string& session_id, const std::string& task_id,
                                const json& body) {
  if (!body.is_object()) throw invalid("request body must be a JSON object");
  std::lock_guard lock(state_mutex_);
  Session& s = session_or_throw(session_id);
  const PreferenceTask* task = nullptr;
  for (const auto& t : s.tasks)
    if (t.task_id == task_id) task = &t;
  if (task == nullptr) throw not_found("UnknownTask", "unknown task '" + task_id + "'");
  if (!body.contains("winner") || !body["winner"].is_string()) throw invalid("winner must be \"A\" or \"B\"");
  const std::string winner = body["winner"].get<std::string>();
  if (winner != "A" && winner != "B") throw invalid("winner must be \"A\" or \"B\"");
  if (s.preferences.count(task_id))
    throw conflict("DuplicateResponse", "task '" + task_id + "' already answered");
  PreferenceRecord r;
  r.task_id = task_id;
  r.winner = winner;
  r.latency_ms = latency_of(body);
  r.timestamp = utc_now();
  const Utterance& plus = winner == "A" ? task->a : task->b;
  const Utterance& minus = winner == "A" ? task->b : task->a;
  json event = {{"type", "preference"},
                {"session_id", s.id},
                {"task_id", task_id},
                {"example_id", task->example_id},
                {"shown", {{"a", utterance_tokens_to_json(task->a)}, {"b", utterance_tokens_to_json(task->b)}}},
                {"winner", winner},
                {"u_plus", utterance_tokens_to_json(plus)},
                {"u_minus", utterance_tokens_to_json(minus)},
                {"latency_ms", r.latency_ms},
                {"timestamp", r.timestamp}};
  append_event(event);
  s.preference_order.push_back(task_id);
  s.preferences[task_id] = r;
  human_pairs_.push_back(pair_from_event(event, static_cast<std::size_t>(config_.train_config.max_len)));
  return {{"task_id", task_id}, {"recorded", true}};
}

void Service::check_admin(const std::string& token) const {
  if (config_.admin_token.empty()) throw ServiceError(403, "AdminDisabled", "admin token not configured");
  if (token != config_.admin_token) throw ServiceError(401, "Unauthorized", "bad or missing bearer token");
}

json Service::run_training_iteration(const std::string& token, const json& body) {
  check_admin(token);
  if (!body.is_object()) throw invalid("request body must be a JSON object");
  double weight = 1.0;
  if (body.contains("human_weight")) {
    if (!body["human_weight"].is_number()) throw invalid("human_weight must be a number");
    weight = body["human_weight"].get<double>();
    if (!(weight >= 0.0) || !std::isfinite(weight)) throw invalid("human_weight must be >= 0");
  }
  bool expected = false;
  if (!training_busy_.compare_exchange_strong(expected, true))
    throw conflict("TrainingBusy", "a training iteration is already running");
  struct Release {
    std::atomic<bool>& flag;
    ~Release() { flag = false; }
  } release{training_busy_};

  if (training_hook_) training_hook_();
  const auto snap = snapshot();
  training::HumanPreferences human{human_pairs(), weight};
  std::optional<training::StepResult> result;
  try {
    result = training::run_iteration(snap->models, train_, val_, config_.train_config,
                                   snap->iteration + 1, &human);
  } catch (const ServiceError&) {
    throw;
  } catch (const std::exception& e) {
    throw ServiceError(500, "TrainingFailed", e.what());
  }
  training::StepResult& step = *result;
  if (config_.run_dir) {
    const auto final_dir = training::iteration_dir(*config_.run_dir, snap->iteration + 1);
    auto staging = final_dir;
    staging += ".tmp";
    std::filesystem::remove_all(staging);
    training::save_models(step.models, staging);
    write_file_atomic(staging / "report.json", training::to_json(step.report).dump() + "\n");
    std::filesystem::remove_all(final_dir);
    std::filesystem::rename(staging, final_dir);
  }
  auto next = std::make_shared<Snapshot>(
      Snapshot{std::move(step.models), snap->iteration + 1, step.report});
  {
    std::lock_guard lock(state_mutex_);
    append_event({{"type", "training"},
                  {"iteration", next->iteration},
                  {"human_pairs", human.pairs.size()},
                  {"human_weight", weight},
                  {"report", training::to_json(step.report)},
                  {"timestamp", utc_now()}});
  }
  {
    std::lock_guard lock(snapshot_mutex_);
    snapshot_ = next;
  }
  return {{"iteration", next->iteration}, {"snapshot", next->id()}, {"report", training::to_json(step.report)}};
}

json Service::metrics(const std::string& token) const {
  check_admin(token);
  const auto snap = snapshot();
  std::lock_guard lock(state_mutex_);
  long guesses = 0, correct = 0, prefs = 0;
  for (const auto& [id, s] : sessions_) {
    for (const auto& g : s.guesses) {
      ++guesses;
      correct += g.correct ? 1 : 0;
    }
    prefs += static_cast<long>(s.preferences.size());
  }
  return {{"snapshot", snap->id()},
          {"iteration", snap->iteration},
          {"last_report", snap->last_report ? training::to_json(*snap->last_report) : json(nullptr)},
          {"training_busy", training_busy_.load()},
          {"sessions", sessions_.size()},
          {"guesses", guesses},
          {"human_accuracy", guesses > 0 ? json(static_cast<double>(correct) / guesses) : json(nullptr)},
          {"preferences", prefs}};
}

std::string Service::export_preferences(const std::string& token) const {
  check_admin(token);
  std::string out;
  for (const auto& p : human_pairs()) out += training::preference_to_json(p).dump() + "\n";
  return out;
}

std::map<std::string, Session> Service::replay(const std::filesystem::path& log, const Vocabulary&,
                                               std::size_t max_len) {
  std::map<std::string, Session> sessions;
  for_each_event(log, [&](const json& e) { apply_event(sessions, nullptr, e, max_len); });
  return sessions;
}

std::vector<PreferencePair> Service::export_from_log(const std::filesystem::path& log,
                                                     std::size_t max_len) {
  std::vector<PreferencePair> pairs;
  std::map<std::string, Session> sessions;
  for_each_event(log, [&](const json& e) { apply_event(sessions, &pairs, e, max_len); });
  return pairs;
}

namespace {

std::string bearer(const httplib::Request& req) {
  const std::string h = req.get_header_value("Authorization");
  const std::string prefix = "Bearer ";
  return h.rfind(prefix, 0) == 0 ? h.substr(prefix.size()) : std::string();
}

json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  try {
    return json::parse(req.body);
  } catch (const json::exception&) {
    throw ServiceError(400, "ValidationError", "request body is not valid JSON");
  }
}

template <typename Fn>
httplib::Server::Handler wrap(Fn fn) {
  return [fn](const httplib::Request& req, httplib::Response& res) {
    try {
      json out = fn(req);
      res.set_content(out.dump(), "application/json");
    } catch (const ServiceError& e) {
      res.status = e.status();
      res.set_content(json{{"error", e.code()}, {"message", e.what()}}.dump(), "application/json");
    } catch (const std::exception& e) {
      res.status = 500;
      res.set_content(json{{"error", "InternalError"}, {"message", e.what()}}.dump(),
                      "application/json");
    }
  };
}

int parse_index(const std::string& s) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ServiceError(400, "ValidationError", "trial index must be an integer");
  }
}

}  // namespace

std::unique_ptr<httplib::Server> make_http_server(Service& service) {
  auto server = std::make_unique<httplib::Server>();
  Service* svc = &service;
  server->Post("/sessions", wrap([svc](const httplib::Request& r) {
                 return svc->create_session(parse_body(r));
               }));
  server->Get(R"(/sessions/([^/]+)/trials/next)", wrap([svc](const httplib::Request& r) {
                return svc->next_trial(r.matches[1]);
              }));
  server->Post(R"(/sessions/([^/]+)/trials/([^/]+)/guess)", wrap([svc](const httplib::Request& r) {
                 return svc->record_guess(r.matches[1], parse_index(r.matches[2]), parse_body(r));
               }));
  server->Get(R"(/sessions/([^/]+)/preferences/next)", wrap([svc](const httplib::Request& r) {
                return svc->next_preference_task(r.matches[1]);
              }));
  server->Post(R"(/sessions/([^/]+)/preferences/([^/]+))", wrap([svc](const httplib::Request& r) {
                 return svc->record_preference(r.matches[1], r.matches[2], parse_body(r));
               }));
  server->Post("/admin/train", wrap([svc](const httplib::Request& r) {
                 return svc->run_training_iteration(bearer(r), parse_body(r));
               }));
  auto metrics = wrap([svc](const httplib::Request& r) { return svc->metrics(bearer(r)); });
  server->Get("/admin/metrics", metrics);
  server->Get("/metrics", metrics);
  server->Get("/admin/export/preferences", [svc](const httplib::Request& r, httplib::Response& res) {
    try {
      res.set_content(svc->export_preferences(bearer(r)), "application/x-ndjson");
    } catch (const ServiceError& e) {
      res.status = e.status();
      res.set_content(json{{"error", e.code()}, {"message", e.what()}}.dump(), "application/json");
    }
  });
  return server;
}

}  // namespace pragmatix::service
