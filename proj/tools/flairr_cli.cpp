// flairr: command-line entry point.
//
// Exit codes: 0 ok, 1 config, 2 data, 3 backend, 4 reply parse failure after
// retries. Secrets are read from FLAIRR_API_KEY only.

#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "flairr/bench.hpp"

namespace {

using namespace flairr;
using nlohmann::json;

enum Exit : int { kOk = 0, kConfig = 1, kData = 2, kBackend = 3, kParse = 4 };

struct BackendFlags {
  std::string kind = "scripted";
  std::string script;
  std::string script_mode;
  std::string endpoint;
  std::string model;
  int timeout_s = 120;
  std::string record;
};

struct Flags {
  std::string config;
  std::string data;
  std::string target = "OT";
  std::string timestamp_column = "date";
  std::string name;
  std::string description;
  std::string templates;
  std::string out;
  std::string run_name;
  std::string strategy = "simple";
  std::size_t context = 96;
  std::size_t horizon = 24;
  std::size_t m = kDefaultAnalogCount;
  std::size_t max_iter = kDefaultMaxIterations;
  double stop_threshold = kDefaultStopThreshold;
  std::size_t sample_size = kDefaultSampleSize;
  int precision = kDefaultPrecision;
  int parse_retries = kDefaultParseRetries;
  std::uint64_t seed = 0;
  double train_fraction = kDefaultTrainFraction;
  std::size_t runs = kDefaultRuns;
  std::size_t max_test_windows = kDefaultMaxTestWindows;
  std::size_t jobs = 1;
  std::vector<std::size_t> horizons;
  std::vector<std::string> methods;
  std::optional<std::size_t> t;
  bool no_retrieval = false;
  int verbose = 0;
  BackendFlags backend;
};

// Values from --config; flags given on the command line win.
struct Merged {
  ExperimentConfig experiment;
  BackendFlags backend;
  std::string templates;
};

bool given(const CLI::App& app, const std::string& name) {
  const CLI::Option* opt = app.get_option_no_throw(name);
  return opt != nullptr && opt->count() > 0;
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
}

BackendFlags backend_from_json(const json& doc, BackendFlags b) {
  if (!doc.is_object()) throw ConfigError("'backend' must be a JSON object");
  for (const auto& [key, value] : doc.items()) {
    if (key == "api_key") throw ConfigError("API keys are read from FLAIRR_API_KEY, never from config files");
    if (key != "kind" && key != "script" && key != "mode" && key != "endpoint_url" && key != "model_name" &&
        key != "timeout_s" && key != "record") {
      throw ConfigError("unknown key '" + key + "' in backend config");
    }
  }
  try {
    b.kind = doc.value("kind", b.kind);
    b.script = doc.value("script", b.script);
    b.script_mode = doc.value("mode", b.script_mode);
    b.endpoint = doc.value("endpoint_url", b.endpoint);
    b.model = doc.value("model_name", b.model);
    b.timeout_s = doc.value("timeout_s", b.timeout_s);
    b.record = doc.value("record", b.record);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("backend config: ") + e.what());
  }
  return b;
}

Merged merge(const CLI::App& app, const Flags& f) {
  Merged m;
  std::filesystem::path base_dir;
  if (!f.config.empty()) {
    const json doc = read_json_file(f.config);
    base_dir = std::filesystem::path(f.config).parent_path();
    m.experiment = experiment_config_from_json(doc, base_dir);
    if (doc.contains("backend")) m.backend = backend_from_json(doc["backend"], m.backend);
    if (!m.backend.script.empty() && std::filesystem::path(m.backend.script).is_relative() && !base_dir.empty()) {
      m.backend.script = (base_dir / m.backend.script).string();
    }
    if (doc.contains("templates")) {
      if (!doc["templates"].is_string()) throw ConfigError("'templates' must be a directory path");
      const std::filesystem::path dir = doc["templates"].get<std::string>();
      m.templates = (dir.is_relative() ? base_dir / dir : dir).string();
    }
  }
  ExperimentConfig& e = m.experiment;
  SessionConfig& s = e.session;
  if (given(app, "--data")) e.dataset.path = f.data;
  if (given(app, "--target")) e.dataset.target = f.target;
  if (given(app, "--timestamp-column")) e.dataset.timestamp_column = f.timestamp_column;
  if (given(app, "--name")) e.dataset.name = f.name;
  if (given(app, "--description")) e.dataset.description = f.description;
  if (given(app, "--context")) s.context_length = f.context;
  if (given(app, "--horizon")) {
    s.horizon = f.horizon;
    e.horizons = {f.horizon};
  }
  if (given(app, "--horizons")) e.horizons = f.horizons;
  if (given(app, "--m")) s.analog_count = f.m;
  if (given(app, "--max-iter")) s.max_iterations = f.max_iter;
  if (given(app, "--stop-threshold")) s.stop_threshold = f.stop_threshold;
  if (given(app, "--sample-size")) s.sample_size = f.sample_size;
  if (given(app, "--precision")) s.precision = f.precision;
  if (given(app, "--parse-retries")) s.parse_retries = f.parse_retries;
  if (given(app, "--seed")) s.seed = f.seed;
  if (given(app, "--train-fraction")) e.train_fraction = f.train_fraction;
  if (given(app, "--runs")) e.runs = f.runs;
  if (given(app, "--max-test-windows")) e.max_test_windows = f.max_test_windows;
  if (given(app, "--jobs")) e.jobs = f.jobs;
  if (given(app, "--methods")) {
    e.methods.clear();
    for (const auto& name : f.methods) e.methods.push_back(Method::parse(name));
  }
  if (given(app, "--out")) e.output = f.out;
  if (given(app, "--run-name")) e.run_name = f.run_name;
  if (given(app, "--templates")) m.templates = f.templates;

  BackendFlags& b = m.backend;
  if (given(app, "--backend")) b.kind = f.backend.kind;
  if (given(app, "--script")) b.script = f.backend.script;
  if (given(app, "--script-mode")) b.script_mode = f.backend.script_mode;
  if (given(app, "--endpoint")) b.endpoint = f.backend.endpoint;
  if (given(app, "--model")) b.model = f.backend.model;
  if (given(app, "--timeout")) b.timeout_s = f.backend.timeout_s;
  if (given(app, "--record")) b.record = f.backend.record;
  return m;
}

std::shared_ptr<Backend> make_backend(const BackendFlags& b) {
  std::shared_ptr<Backend> backend;
  if (b.kind == "scripted") {
    if (b.script.empty()) throw ConfigError("--backend scripted needs --script");
    std::optional<ScriptMode> mode;
    if (b.script_mode == "ordinal") {
      mode = ScriptMode::ordinal;
    } else if (b.script_mode == "pattern") {
      mode = ScriptMode::pattern;
    } else if (!b.script_mode.empty()) {
      throw ConfigError("--script-mode must be ordinal or pattern");
    }
    backend = ScriptedBackend::from_file(b.script, mode);
  } else if (b.kind == "http") {
    HttpConfig cfg;
    cfg.endpoint_url = b.endpoint;
    cfg.model_name = b.model;
    cfg.timeout_s = b.timeout_s;
    backend = std::make_shared<HttpBackend>(std::move(cfg));
  } else {
    throw ConfigError("--backend must be scripted or http, got '" + b.kind + "'");
  }
  if (!b.record.empty()) backend = record(backend, b.record);
  return backend;
}

Agents make_agents(const BackendFlags& b) {
  auto backend = make_backend(b);
  return Agents{backend, backend};
}

const TemplateLibrary& templates_for(const Merged& m) {
  if (m.templates.empty()) return TemplateLibrary::builtin();
  static const TemplateLibrary lib = TemplateLibrary::load(m.templates);
  return lib;
}

DatasetMeta meta_for(const ExperimentConfig& e, const TimeSeries& series) {
  return DatasetMeta{e.dataset.name.empty() ? series.name() : e.dataset.name, e.dataset.description,
                     series.target()};
}

TimeSeries load_dataset(const ExperimentConfig& e) {
  if (e.dataset.path.empty()) throw ConfigError("--data is required");
  return load_csv(e.dataset.path, e.dataset.target, e.dataset.timestamp_column);
}

// Forecast origin: --t, else the end of the series.
std::size_t origin_for(const Flags& f, const PreparedTarget& p, std::size_t context) {
  const std::size_t t = f.t.value_or(p.values.size());
  if (t < context || t > p.values.size()) {
    throw DataError("origin t=" + std::to_string(t) + " needs " + std::to_string(context) +
                    " points of context within a series of length " + std::to_string(p.values.size()));
  }
  return t;
}

WindowPair window_ending_at(const PreparedTarget& p, std::size_t t, std::size_t context, std::size_t horizon) {
  WindowPair w;
  w.origin = t;
  w.context.assign(p.values.begin() + static_cast<std::ptrdiff_t>(t - context),
                   p.values.begin() + static_cast<std::ptrdiff_t>(t));
  if (t + horizon <= p.values.size()) {
    w.truth.assign(p.values.begin() + static_cast<std::ptrdiff_t>(t),
                   p.values.begin() + static_cast<std::ptrdiff_t>(t + horizon));
  }
  return w;
}

int cmd_forecast(const CLI::App& app, const Flags& f) {
  Merged m = merge(app, f);
  SessionConfig cfg = m.experiment.session;
  cfg.retrieval_enabled = !f.no_retrieval;
  cfg.refinement_enabled = false;
  cfg.validate();
  const TemplateLibrary& lib = templates_for(m);
  const auto instructions = asp_instructions(lib, f.strategy, cfg.horizon);

  const TimeSeries series = load_dataset(m.experiment);
  const PreparedTarget p = prepare_target(series, m.experiment.train_fraction);
  const std::size_t t = origin_for(f, p, cfg.context_length);
  const WindowPair w = window_ending_at(p, t, cfg.context_length, cfg.horizon);

  const Agents agents = make_agents(m.backend);
  const DatasetMeta meta = meta_for(m.experiment, series);
  std::optional<HistDB> db;
  if (cfg.retrieval_enabled) db.emplace(build_hist_db(p.train(), cfg.context_length, cfg.horizon));
  const SessionContext ctx{cfg, meta, lib, agents, db ? &*db : nullptr};
  const ForecastAttempt a = forecast_window(instructions, w, ctx);

  std::vector<double> original;
  for (double v : invert_scaler(p.scaler, a.reply.values)) original.push_back(v);
  std::cout << "strategy: " << f.strategy << "\n";
  std::cout << "origin: " << t << "\n";
  std::cout << "Predicted Values (scaled): [" << format_numbers(a.reply.values, cfg.precision) << "]\n";
  std::cout << "Predicted Values: [" << format_numbers(original, cfg.precision) << "]\n";
  if (!w.truth.empty()) std::cout << "MAE (scaled): " << format_number(mae(a.reply.values, w.truth), 6) << "\n";
  std::cout << "Reasoning: " << a.reply.reasoning << "\n";
  if (a.reply.certainty) std::cout << "Certainty: " << format_number(*a.reply.certainty, 2) << "\n";
  if (a.reply.certainty_reasoning) std::cout << "Certainty Reasoning: " << *a.reply.certainty_reasoning << "\n";
  if (f.verbose > 0) std::cerr << "parse retries used: " << a.parse_failures << "\n";
  return kOk;
}

int cmd_refine(const CLI::App& app, const Flags& f) {
  Merged m = merge(app, f);
  SessionConfig cfg = m.experiment.session;
  cfg.retrieval_enabled = !f.no_retrieval;
  cfg.refinement_enabled = true;
  cfg.validate();
  const TemplateLibrary& lib = templates_for(m);
  std::optional<InstructionBlock> initial;
  if (given(app, "--strategy")) initial = asp_instructions(lib, f.strategy, cfg.horizon);

  const TimeSeries series = load_dataset(m.experiment);
  const PreparedTarget p = prepare_target(series, m.experiment.train_fraction);
  const auto train = p.train();
  const auto validation = validation_windows(train, cfg.context_length, cfg.horizon, cfg.sample_size);
  const Agents agents = make_agents(m.backend);
  const DatasetMeta meta = meta_for(m.experiment, series);

  std::unique_ptr<SessionLog> log;
  if (!m.experiment.output.empty()) log = std::make_unique<SessionLog>(m.experiment.output / "session.jsonl");
  const SessionResult r = run_session(cfg, train, validation, agents, lib, meta, SessionOptions{initial, log.get()});

  std::cout << "early_stop: " << (r.early_stop ? "true" : "false") << "\n";
  std::cout << "iterations: " << r.history.size() << "\n";
  for (const auto& rec : r.history) {
    std::cout << "iteration " << rec.iteration << " batch_mae: " << format_number(rec.batch_mae, 6) << "\n";
  }
  std::cout << "best_iteration: " << r.best_iteration << "\n";
  std::cout << "best_mae: " << format_number(r.best_mae, 6) << "\n";
  std::cout << "selected_iteration: " << r.selected_iteration << "\n";
  if (log) std::cout << "session_log: " << log->path().string() << "\n";
  std::cout << "P_out:\n" << (r.prompt_out.instructions ? r.prompt_out.instructions->text() : std::string(kNoInstructionsText)) << "\n";
  return kOk;
}

BackendFactory factory_for(const BackendFlags& b) {
  // Validate eagerly so config mistakes surface before any cell runs.
  make_backend(BackendFlags{b.kind, b.script, b.script_mode, b.endpoint, b.model, b.timeout_s, {}});
  return [b](const RunKey&) { return make_agents(b); };
}

ExperimentHooks hooks_for(const Flags& f, const Merged& m) {
  ExperimentHooks hooks;
  hooks.templates = &templates_for(m);
  if (f.verbose > 0) {
    hooks.on_run = [](const RunOutcome& o) {
      std::cerr << "done h=" << o.key.horizon << " method=" << o.key.method.label() << " run=" << o.key.run + 1
                << " mae=" << o.test_mae << "\n";
    };
  }
  return hooks;
}

int cmd_bench(const CLI::App& app, const Flags& f) {
  Merged m = merge(app, f);
  const Report report = run_experiment(m.experiment, factory_for(m.backend), hooks_for(f, m));
  std::cout << report_csv(report.rows);
  if (!report.run_dir.empty()) std::cerr << "report: " << (report.run_dir / "report.csv").string() << "\n";
  return kOk;
}

int cmd_ablate(const CLI::App& app, const Flags& f) {
  Merged m = merge(app, f);
  const auto tables = run_ablation(m.experiment, factory_for(m.backend), hooks_for(f, m));
  std::cout << ablation_csv(tables);
  return kOk;
}

int cmd_retrieve(const CLI::App& app, const Flags& f) {
  Merged m = merge(app, f);
  const SessionConfig& cfg = m.experiment.session;
  cfg.validate();
  const TimeSeries series = load_dataset(m.experiment);
  const PreparedTarget p = prepare_target(series, m.experiment.train_fraction);
  const std::size_t t = origin_for(f, p, cfg.context_length);
  const WindowPair w = window_ending_at(p, t, cfg.context_length, cfg.horizon);
  const HistDB db = build_hist_db(p.train(), cfg.context_length, cfg.horizon);
  const RetrievalResult r = retrieve(db, w.context, cfg.analog_count, RetrieveOptions{t});
  if (r.diagnostic) std::cerr << "note: " << *r.diagnostic << "\n";
  std::cout << "rank,start,score,context,outcome\n";
  for (std::size_t i = 0; i < r.segments.size(); ++i) {
    const auto& s = r.segments[i];
    std::cout << i + 1 << ',' << s.start << ',' << format_number(s.score, 6) << ",\""
              << format_numbers(s.context, cfg.precision) << "\",\"" << format_numbers(s.outcome, cfg.precision)
              << "\"\n";
  }
  return kOk;
}

void add_data_flags(CLI::App* sub, Flags& f) {
  sub->add_option("--data", f.data, "CSV dataset path");
  sub->add_option("--target", f.target, "Target column")->capture_default_str();
  sub->add_option("--timestamp-column", f.timestamp_column, "Timestamp column to skip")->capture_default_str();
  sub->add_option("--name", f.name, "Dataset name shown in prompts (default: file stem)");
  sub->add_option("--description", f.description, "Dataset description shown in prompts");
  sub->add_option("--train-fraction", f.train_fraction, "Chronological train fraction")->capture_default_str();
}

void add_window_flags(CLI::App* sub, Flags& f) {
  sub->add_option("--context", f.context, "Context length L")->capture_default_str();
  sub->add_option("--horizon", f.horizon, "Forecast horizon H")->capture_default_str();
  sub->add_option("--m", f.m, "Retrieved analogs M")->capture_default_str();
  sub->add_option("--precision", f.precision, "Decimal places in prompts")->capture_default_str();
}

void add_session_flags(CLI::App* sub, Flags& f) {
  sub->add_option("--max-iter", f.max_iter, "Refinement iterations N_iter")->capture_default_str();
  sub->add_option("--stop-threshold", f.stop_threshold, "Early-stop threshold tau_stop, percent")
      ->capture_default_str();
  sub->add_option("--sample-size", f.sample_size, "Validation windows per iteration")->capture_default_str();
  sub->add_option("--parse-retries", f.parse_retries, "Re-asks after a malformed reply")->capture_default_str();
  sub->add_option("--seed", f.seed, "Seed passed to backends")->capture_default_str();
}

void add_backend_flags(CLI::App* sub, Flags& f) {
  sub->add_option("--backend", f.backend.kind, "scripted or http")->capture_default_str();
  sub->add_option("--script", f.backend.script, "JSONL script for the scripted backend");
  sub->add_option("--script-mode", f.backend.script_mode, "ordinal or pattern (default: inferred)");
  sub->add_option("--endpoint", f.backend.endpoint, "Chat-completion endpoint URL");
  sub->add_option("--model", f.backend.model, "Model name for the http backend");
  sub->add_option("--timeout", f.backend.timeout_s, "HTTP timeout, seconds")->capture_default_str();
  sub->add_option("--record", f.backend.record, "Append every exchange to this JSONL file");
  sub->add_option("--templates", f.templates, "Template directory (default: built-in v1)");
  sub->add_option("--config", f.config, "JSON config; flags override its values");
  sub->add_flag("-v,--verbose", f.verbose, "Progress on stderr");
}

void add_grid_flags(CLI::App* sub, Flags& f) {
  sub->add_option("--horizons", f.horizons, "Horizons to evaluate");
  sub->add_option("--methods", f.methods, "simple, retrieval-only, ir-only, flairr, asp:<name>");
  sub->add_option("--runs", f.runs, "Independent runs per cell")->capture_default_str();
  sub->add_option("--max-test-windows", f.max_test_windows, "Test windows per run (0 = all)")
      ->capture_default_str();
  sub->add_option("--jobs", f.jobs, "Parallel cells")->capture_default_str();
  sub->add_option("--out", f.out, "Output directory");
  sub->add_option("--run-name", f.run_name, "Run directory under --out (default: UTC timestamp)");
}

int exit_code_for(const SessionAborted& e) {
  switch (e.cause()) {
    case SessionAborted::Cause::backend: return kBackend;
    case SessionAborted::Cause::parse: return kParse;
    case SessionAborted::Cause::data: return kData;
  }
  return kData;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FLAIRR-TS: retrieval-augmented, refinement-driven LLM forecasting"};
  app.require_subcommand(1);
  Flags f;

  auto* forecast = app.add_subcommand("forecast", "Single forecast with a fixed strategy");
  add_data_flags(forecast, f);
  add_window_flags(forecast, f);
  add_backend_flags(forecast, f);
  forecast->add_option("--strategy", f.strategy, "Strategy from the prompt library")->capture_default_str();
  forecast->add_option("--t", f.t, "Forecast origin index (default: series end)");
  forecast->add_option("--seed", f.seed, "Seed passed to backends")->capture_default_str();
  forecast->add_option("--parse-retries", f.parse_retries, "Re-asks after a malformed reply")->capture_default_str();
  forecast->add_flag("--no-retrieval", f.no_retrieval, "Skip analog retrieval");

  auto* refine = app.add_subcommand("refine", "Run one refinement session on the training split");
  add_data_flags(refine, f);
  add_window_flags(refine, f);
  add_session_flags(refine, f);
  add_backend_flags(refine, f);
  refine->add_option("--strategy", f.strategy, "Initial instructions from the prompt library");
  refine->add_option("--out", f.out, "Directory for session.jsonl");
  refine->add_flag("--no-retrieval", f.no_retrieval, "Skip analog retrieval");

  auto* bench = app.add_subcommand("bench", "Run the benchmark grid");
  add_data_flags(bench, f);
  add_window_flags(bench, f);
  add_session_flags(bench, f);
  add_backend_flags(bench, f);
  add_grid_flags(bench, f);

  auto* ablate = app.add_subcommand("ablate", "Run the four-condition ablation");
  add_data_flags(ablate, f);
  add_window_flags(ablate, f);
  add_session_flags(ablate, f);
  add_backend_flags(ablate, f);
  add_grid_flags(ablate, f);

  auto* retrieve_cmd = app.add_subcommand("retrieve", "Print the top-M analogs for one origin as CSV");
  add_data_flags(retrieve_cmd, f);
  add_window_flags(retrieve_cmd, f);
  retrieve_cmd->add_option("--t", f.t, "Forecast origin index (default: series end)");
  retrieve_cmd->add_option("--config", f.config, "JSON config; flags override its values");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*forecast) return cmd_forecast(*forecast, f);
    if (*refine) return cmd_refine(*refine, f);
    if (*bench) return cmd_bench(*bench, f);
    if (*ablate) return cmd_ablate(*ablate, f);
    if (*retrieve_cmd) return cmd_retrieve(*retrieve_cmd, f);
  } catch (const SessionAborted& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const TemplateError& e) {
    std::cerr << "template error: " << e.what() << "\n";
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const BackendError& e) {
    std::cerr << "backend error: " << e.what() << "\n";
    return kBackend;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kParse;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kConfig;
}
