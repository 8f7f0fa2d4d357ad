#include "pragmatix/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "pragmatix/metrics.hpp"
#include "pragmatix/rng.hpp"
#include "pragmatix/rsa.hpp"
#include "pragmatix/service.hpp"
#include "pragmatix/synth.hpp"
#include "pragmatix/training.hpp"

// After Eigen: resolv.h defines a _res macro.
#include <httplib.h>

#ifndef PRAGMATIX_VERSION
#define PRAGMATIX_VERSION "unknown"
#endif

namespace pragmatix::cli {

namespace fs = std::filesystem;
using training::TrainConfig;

std::string version() { return PRAGMATIX_VERSION; }

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

DataFiles data_files(const fs::path& dir) {
  return {dir / "vocabulary.json", dir / "train.jsonl", dir / "val.jsonl"};
}

namespace {

struct Data {
  Dataset train;
  Dataset val;
  std::vector<fs::path> inputs;
};

Data load_data(const fs::path& dir) {
  const DataFiles f = data_files(dir);
  for (const auto& p : {f.vocabulary, f.train})
    if (!fs::exists(p)) throw ConfigError("missing data file " + p.string());
  const Vocabulary v = load_vocabulary(f.vocabulary);
  Data d;
  d.train = load_dataset(f.train, v);
  d.inputs = {f.vocabulary, f.train};
  if (fs::exists(f.val)) {
    d.val = load_dataset(f.val, v);
    d.inputs.push_back(f.val);
  } else {
    d.val.vocabulary = v;
    d.val.class_names = d.train.class_names;
  }
  return d;
}

// The flags a run was trained with, from its manifest.
TrainConfig run_config(const fs::path& run) {
  const fs::path manifest = run / "manifest.json";
  if (!fs::exists(manifest)) throw ConfigError("no manifest.json in " + run.string());
  return training::train_config_from_json(json::parse(read_file(manifest)).at("config"));
}

training::Models run_models(const fs::path& run, const TrainConfig& config, const Dataset& d,
                            std::optional<int> iteration, int* loaded) {
  const int it = iteration ? *iteration : training::last_completed_iteration(run);
  if (loaded) *loaded = it;
  if (it == 0) return training::initial_models(config, d);
  const fs::path dir = training::iteration_dir(run, it);
  if (!fs::exists(dir / "report.json")) throw ConfigError("no completed checkpoint " + dir.string());
  return training::load_models(config, d, dir);
}

void ensure_fresh_or_same(const fs::path& out, const json& config) {
  const fs::path manifest = out / "manifest.json";
  if (!fs::exists(manifest)) return;
  const json old = json::parse(read_file(manifest));
  if (old.at("config") != config)
    throw ConfigError("--out " + out.string() + " holds a run with a different config");
}

std::string render(const Utterance& u, const Vocabulary& v) {
  std::string s;
  for (const Token& t : u.tokens) {
    if (!s.empty()) s += ' ';
    s += (t.sign == Sign::kPositive ? '+' : '-');
    s += v.claim(t.claim).name;
  }
  return s.empty() ? "(empty)" : s;
}

void add_threads(CLI::App* cmd, int& threads) {
  cmd->add_option("--threads", threads, "Worker threads (computation is single-threaded)")
      ->check(CLI::PositiveNumber);
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"pragmatix: grounded pragmatic explanations for classifiers", "pragmatix"};
  app.require_subcommand(1);
  app.set_version_flag("--version", version());
  int threads = 1;

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic world");
  std::optional<fs::path> spec_path;
  fs::path synth_out;
  std::optional<std::uint64_t> synth_seed;
  synth->add_option("--spec", spec_path, "WorldSpec JSON (default: desk world)");
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--seed", synth_seed, "Override the spec seed");
  add_threads(synth, threads);

  // train
  auto* train = app.add_subcommand("train", "Run the alternating training loop");
  fs::path train_data, train_out;
  std::optional<fs::path> train_config_path, prior_path, human_path;
  std::optional<double> alpha, gamma, beta, tau, speaker_lr, listener_lr, human_weight;
  std::optional<int> n_expl, b, iters, max_len, batch, sp_epochs, li_epochs, sp_width, sp_layers,
      sp_heads, li_width, li_layers, li_heads, eval_samples;
  std::optional<std::uint64_t> train_seed;
  bool fixed_length = false, variable_length = false, paper_sizes = false, retain = false;
  train->add_option("--data", train_data, "Data directory from synth")->required();
  train->add_option("--out", train_out, "Run directory")->required();
  train->add_option("--config", train_config_path, "TrainConfig JSON; flags override it");
  train->add_option("--alpha", alpha, "Utility weight");
  train->add_option("--gamma", gamma, "Weight of correct omissions in fidelity");
  train->add_option("--beta", beta, "DPO temperature");
  train->add_option("--n-expl", n_expl, "Explanations per example for the listener");
  train->add_option("--b", b, "Candidates per example for preferences");
  train->add_option("--iters", iters, "Outer iterations");
  train->add_option("--tau", tau, "Prior strength");
  train->add_option("--prior", prior_path, "Listener prior JSON {pi, tau}");
  train->add_flag("--fixed-length", fixed_length, "Emit exactly max-len claims");
  train->add_flag("--variable-length", variable_length, "Allow END before max-len");
  train->add_option("--max-len", max_len, "Utterance length limit");
  train->add_option("--batch-size", batch);
  train->add_option("--speaker-epochs", sp_epochs);
  train->add_option("--listener-epochs", li_epochs);
  train->add_option("--speaker-lr", speaker_lr);
  train->add_option("--listener-lr", listener_lr);
  train->add_option("--speaker-width", sp_width);
  train->add_option("--speaker-layers", sp_layers);
  train->add_option("--speaker-heads", sp_heads);
  train->add_option("--listener-width", li_width);
  train->add_option("--listener-layers", li_layers);
  train->add_option("--listener-heads", li_heads);
  train->add_option("--eval-samples", eval_samples);
  train->add_flag("--paper-sizes", paper_sizes, "Full-size agents");
  train->add_flag("--retain-candidates", retain, "Keep last iteration's candidates in the pool");
  train->add_option("--human-prefs", human_path, "Human PreferencePair JSONL");
  train->add_option("--human-weight", human_weight, "Repeat count for human pairs (ceil)");
  train->add_option("--seed", train_seed);
  add_threads(train, threads);
  train->get_option("--fixed-length")->excludes("--variable-length");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a speaker/listener snapshot");
  std::optional<fs::path> eval_run, eval_prior, baseline_run, eval_config;
  fs::path eval_data, eval_out;
  std::string split = "val";
  std::optional<int> eval_iter;
  std::optional<double> kl_baseline, eval_tau;
  int per_example = 1;
  std::uint64_t eval_seed = 0;
  bool zero_listener = false, no_prior = false;
  eval->add_option("--run", eval_run, "Run directory (default: fresh agents)");
  eval->add_option("--config", eval_config, "TrainConfig JSON for fresh agents");
  eval->add_option("--data", eval_data, "Data directory")->required();
  eval->add_option("--out", eval_out, "Output directory for eval.json and per_class.csv")->required();
  eval->add_option("--split", split)->check(CLI::IsMember({"train", "val"}));
  eval->add_option("--iteration", eval_iter, "Checkpoint (default: last)");
  eval->add_option("--samples", per_example, "Utterances per example")->check(CLI::PositiveNumber);
  eval->add_option("--seed", eval_seed);
  eval->add_option("--prior", eval_prior, "Override the run's prior");
  eval->add_option("--tau", eval_tau, "Override the prior strength");
  eval->add_flag("--no-prior", no_prior, "Evaluate without a prior");
  eval->add_option("--kl-baseline", kl_baseline, "Mean KL of the baseline speaker");
  eval->add_option("--baseline-run", baseline_run, "Run whose speaker gives the KL baseline");
  eval->add_flag("--zero-listener", zero_listener, "Replace the listener by an all-zero one");
  add_threads(eval, threads);

  // explain
  auto* explain = app.add_subcommand("explain", "Print sampled explanations for examples");
  std::optional<fs::path> explain_run;
  fs::path explain_data;
  std::vector<std::string> ids;
  int explain_samples = 1;
  std::uint64_t explain_seed = 0;
  std::optional<int> explain_iter;
  explain->add_option("--run", explain_run, "Run directory")->required();
  explain->add_option("--data", explain_data, "Data directory")->required();
  explain->add_option("--ids", ids, "Example ids")->required()->delimiter(',');
  explain->add_option("--samples", explain_samples)->check(CLI::PositiveNumber);
  explain->add_option("--seed", explain_seed);
  explain->add_option("--iteration", explain_iter);
  add_threads(explain, threads);

  // rsa
  auto* rsa_cmd = app.add_subcommand("rsa", "Exact RSA on a reference game");
  fs::path game_path;
  int depth = 1;
  bool rsa_json = false;
  rsa_cmd->add_option("--game", game_path, "Game JSON")->required();
  rsa_cmd->add_option("--depth", depth, "Speaker levels")->check(CLI::NonNegativeNumber);
  rsa_cmd->add_flag("--json", rsa_json, "Print tables as JSON");
  add_threads(rsa_cmd, threads);

  // serve
  auto* serve = app.add_subcommand("serve", "Run the reference-game service");
  fs::path serve_run, serve_data;
  std::optional<fs::path> event_log;
  std::string host = "127.0.0.1";
  int port = 8080;
  service::ServiceConfig service_config;
  serve->add_option("--run", serve_run, "Run directory")->required();
  serve->add_option("--data", serve_data, "Data directory")->required();
  serve->add_option("--event-log", event_log, "Event log (default: RUN/events.jsonl)");
  serve->add_option("--host", host);
  serve->add_option("--port", port)->check(CLI::Range(0, 65535));
  serve->add_option("--trials", service_config.trials)->check(CLI::PositiveNumber);
  serve->add_option("--options", service_config.options)->check(CLI::Range(2, 1 << 20));
  serve->add_option("--tasks", service_config.preference_tasks)->check(CLI::NonNegativeNumber);
  serve->add_option("--seed", service_config.seed);
  add_threads(serve, threads);

  // export-prefs
  auto* export_cmd = app.add_subcommand("export-prefs", "Dump human preferences from an event log");
  fs::path export_log;
  std::optional<fs::path> export_out;
  int export_max_len = 6;
  export_cmd->add_option("--event-log", export_log, "Event log")->required();
  export_cmd->add_option("--out", export_out, "Output JSONL (default: stdout)");
  export_cmd->add_option("--max-len", export_max_len)->check(CLI::PositiveNumber);
  add_threads(export_cmd, threads);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << version() << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (*synth) {
      synth::WorldSpec spec = spec_path ? synth::load_world_spec(*spec_path) : synth::default_desk_world();
      if (synth_seed) spec.seed = *synth_seed;
      spec.validate();
      const synth::World world = synth::generate_world(spec);
      fs::create_directories(synth_out);
      const DataFiles f = data_files(synth_out);
      save_vocabulary(world.vocabulary, f.vocabulary);
      save_dataset(world.train, f.train);
      save_dataset(world.val, f.val);
      json info = {{"spec", synth::to_json(spec)},
                   {"classifier_accuracy",
                    {{"train", world.classifier_accuracy(world.train)},
                     {"val", world.classifier_accuracy(world.val)}}}};
      write_file_atomic(synth_out / "world.json", info.dump(2) + "\n");
      out << "wrote " << world.train.examples.size() << " train / " << world.val.examples.size()
          << " val examples to " << synth_out.string() << " (classifier accuracy "
          << world.classifier_accuracy(world.train) << ")\n";
      return kExitOk;
    }

    if (*train) {
      TrainConfig c = train_config_path
                          ? training::train_config_from_json(json::parse(read_file(*train_config_path)))
                          : TrainConfig{};
      if (alpha) c.alpha = *alpha;
      if (gamma) c.gamma = *gamma;
      if (beta) c.beta = *beta;
      if (n_expl) c.n_expl = *n_expl;
      if (b) c.b = *b;
      if (iters) c.iterations = *iters;
      if (max_len) c.max_len = *max_len;
      if (fixed_length) c.fixed_length = true;
      if (variable_length) c.fixed_length = false;
      if (batch) c.batch_size = *batch;
      if (sp_epochs) c.speaker_epochs = *sp_epochs;
      if (li_epochs) c.listener_epochs = *li_epochs;
      if (speaker_lr) c.speaker_optimizer.learning_rate = *speaker_lr;
      if (listener_lr) c.listener_optimizer.learning_rate = *listener_lr;
      if (sp_width) c.speaker_width = *sp_width;
      if (sp_layers) c.speaker_layers = *sp_layers;
      if (sp_heads) c.speaker_heads = *sp_heads;
      if (li_width) c.listener_width = *li_width;
      if (li_layers) c.listener_layers = *li_layers;
      if (li_heads) c.listener_heads = *li_heads;
      if (eval_samples) c.eval_samples = *eval_samples;
      if (paper_sizes) c.paper_sizes = true;
      if (retain) c.retain_candidates = true;
      if (train_seed) c.seed = *train_seed;
      if (prior_path) c.prior = agents::load_listener_prior(*prior_path);
      if (tau) {
        if (!c.prior) throw ConfigError("--tau needs a prior (--prior or config)");
        c.prior->tau = *tau;
      }
      c.validate();
      if (human_weight && !human_path) throw ConfigError("--human-weight needs --human-prefs");
      if (human_weight && !(*human_weight >= 0.0)) throw ConfigError("--human-weight must be >= 0");

      const Data data = load_data(train_data);
      if (c.prior) c.prior->validate(data.train.vocabulary);
      training::RunOptions options;
      std::vector<fs::path> inputs = data.inputs;
      if (train_config_path) inputs.push_back(*train_config_path);
      if (prior_path) inputs.push_back(*prior_path);
      if (human_path) {
        options.human = training::HumanPreferences{
            training::load_preferences(*human_path, static_cast<std::size_t>(c.max_len)),
            human_weight.value_or(1.0)};
        inputs.push_back(*human_path);
      }
      const json config_json = training::to_json(c);
      ensure_fresh_or_same(train_out, config_json);

      json hashes = json::object();
      for (const auto& p : inputs) hashes[p.string()] = fnv1a_hex(read_file(p));
      json manifest = {
          {"version", version()},
          {"config", config_json},
          {"seeds", {{"base", c.seed}}},
          {"inputs", hashes},
          {"human_weight", options.human ? json(options.human->weight) : json(nullptr)},
          {"layout",
           {{"manifest", "manifest.json"},
            {"reports", "reports.jsonl"},
            {"timings", "timings.jsonl"},
            {"checkpoints", "checkpoints/iter_NNNN/{speaker,listener}.{bin,json}, report.json"}}}};
      fs::create_directories(train_out);
      write_file_atomic(train_out / "manifest.json", manifest.dump(2) + "\n");

      options.out_dir = train_out;
      options.on_iteration = [&out](const training::IterationReport& r) {
        out << training::to_json(r).dump() << "\n" << std::flush;
        return true;
      };
      training::run(data.train, data.val, c, options);
      return kExitOk;
    }

    if (*eval) {
      if (eval_run && eval_config) throw ConfigError("--config is only for fresh agents (no --run)");
      if (no_prior && (eval_prior || eval_tau)) throw ConfigError("--no-prior excludes --prior/--tau");
      TrainConfig c = eval_run ? run_config(*eval_run)
                      : eval_config
                          ? training::train_config_from_json(json::parse(read_file(*eval_config)))
                          : TrainConfig{};
      if (eval_prior) c.prior = agents::load_listener_prior(*eval_prior);
      if (eval_tau) {
        if (!c.prior) throw ConfigError("--tau needs a prior");
        c.prior->tau = *eval_tau;
      }
      if (no_prior) c.prior.reset();
      c.validate();
      const Data data = load_data(eval_data);
      const Dataset& d = split == "val" ? data.val : data.train;
      if (d.examples.empty()) throw ConfigError("split '" + split + "' has no examples");
      if (c.prior) c.prior->validate(d.vocabulary);
      int loaded = 0;
      training::Models models = eval_run ? run_models(*eval_run, c, data.train, eval_iter, &loaded)
                                         : training::initial_models(c, data.train);
      if (zero_listener)
        models.listener = agents::ListenerModel(models.listener.config(), agents::InitMode::kZero, 0);
      metrics::EvalOptions opts;
      opts.per_example = per_example;
      opts.seed = eval_seed;
      opts.kl_cap = c.kl_cap;
      opts.kl_baseline = kl_baseline;
      if (baseline_run) {
        if (kl_baseline) throw ConfigError("--kl-baseline excludes --baseline-run");
        if (!c.prior) throw ConfigError("--baseline-run needs a prior");
        TrainConfig bc = run_config(*baseline_run);
        const training::Models base = run_models(*baseline_run, bc, data.train, std::nullopt, nullptr);
        const auto samples = agents::sample_for_examples(base.speaker, d.examples, per_example, eval_seed);
        opts.kl_baseline = metrics::kl_alignment(c.prior->pi, samples, d.vocabulary, c.kl_cap).mean;
      }
      const metrics::EvalReport report = metrics::evaluate(
          models.speaker, models.listener, c.prior ? &*c.prior : nullptr, d, opts);
      json j = metrics::to_json(report);
      j["split"] = split;
      j["iteration"] = loaded;
      j["samples_per_example"] = per_example;
      j["seed"] = eval_seed;
      if (opts.kl_baseline) j["kl_baseline"] = *opts.kl_baseline;
      fs::create_directories(eval_out);
      write_file_atomic(eval_out / "eval.json", j.dump(2) + "\n");
      write_file_atomic(eval_out / "per_class.csv", metrics::per_class_csv(report, d.class_names));
      out << "listener_accuracy " << report.listener_accuracy << "\n";
      if (report.kl) out << "kl_alignment " << report.kl->mean << "\n";
      if (report.normalized_kl) out << "normalized_kl " << *report.normalized_kl << "\n";
      return kExitOk;
    }

    if (*explain) {
      const TrainConfig c = run_config(*explain_run);
      const Data data = load_data(explain_data);
      const training::Models models = run_models(*explain_run, c, data.train, explain_iter, nullptr);
      std::vector<Example> all = data.train.examples;
      all.insert(all.end(), data.val.examples.begin(), data.val.examples.end());
      const training::ExampleIndex index(all);
      for (const auto& id : ids)
        if (!index.contains(id)) throw ConfigError("unknown example id '" + id + "'");
      for (std::size_t i = 0; i < ids.size(); ++i) {
        const Example& e = index.at(ids[i]);
        out << e.id << " prediction=" << data.train.class_names[static_cast<std::size_t>(e.prediction)]
            << "\n";
        for (int s = 0; s < explain_samples; ++s) {
          Rng rng(derive_seed(explain_seed, {i, static_cast<std::uint64_t>(s)}));
          const Utterance u = agents::speaker_sample(models.speaker, e.embedding, rng);
          const auto fid = fidelity(u, e.semantics, c.gamma);
          out << "  " << render(u, data.train.vocabulary) << "  [fidelity " << fid.score << "]\n";
        }
      }
      return kExitOk;
    }

    if (*rsa_cmd) {
      const rsa::ReferenceGame game = rsa::load_game(game_path);
      const auto tables = rsa::rsa_chain(game, depth);
      if (rsa_json) {
        json j = json::array();
        for (const auto& t : tables) j.push_back(rsa::table_to_json(t, game));
        out << j.dump(2) << "\n";
      } else {
        for (const auto& t : tables) out << rsa::format_table(t, game) << "\n";
      }
      return kExitOk;
    }

    if (*serve) {
      service_config.train_config = run_config(serve_run);
      const char* token = std::getenv("PRAGMATIX_ADMIN_TOKEN");
      service_config.admin_token = token ? token : "";
      service_config.event_log = event_log ? *event_log : serve_run / "events.jsonl";
      service_config.run_dir = serve_run;
      const Data data = load_data(serve_data);
      int loaded = 0;
      training::Models models =
          run_models(serve_run, service_config.train_config, data.train, std::nullopt, &loaded);
      service::Service svc(service_config, data.train, data.val, std::move(models), loaded);
      auto server = service::make_http_server(svc);
      if (service_config.admin_token.empty())
        err << "warning: PRAGMATIX_ADMIN_TOKEN unset; admin routes are disabled\n";
      out << "serving snapshot " << svc.snapshot()->id() << " on http://" << host << ":" << port << "\n"
          << std::flush;
      if (!server->listen(host, port)) throw Error("cannot listen on " + host + ":" + std::to_string(port));
      return kExitOk;
    }

    if (*export_cmd) {
      if (!fs::exists(export_log)) throw ConfigError("no event log at " + export_log.string());
      const auto pairs =
          service::Service::export_from_log(export_log, static_cast<std::size_t>(export_max_len));
      if (export_out) {
        training::save_preferences(pairs, *export_out);
      } else {
        for (const auto& p : pairs) out << training::preference_to_json(p).dump() << "\n";
      }
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const SchemaMismatch& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const json::exception& e) {
    err << "error: malformed JSON input: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace pragmatix::cli
