#include "flairr/bench.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <exception>
#include <fstream>
#include <thread>

namespace flairr {

using nlohmann::json;

Method Method::parse(std::string_view text) {
  if (text == "simple") return {MethodKind::simple, {}};
  if (text == "retrieval-only") return {MethodKind::retrieval_only, {}};
  if (text == "ir-only") return {MethodKind::ir_only, {}};
  if (text == "flairr") return {MethodKind::flairr, {}};
  if (text.substr(0, 4) == "asp:" && text.size() > 4) return {MethodKind::asp, std::string(text.substr(4))};
  throw ConfigError("unknown method '" + std::string(text) +
                    "'; expected simple, retrieval-only, ir-only, flairr or asp:<name>");
}

std::string Method::label() const {
  switch (kind) {
    case MethodKind::simple: return "simple";
    case MethodKind::retrieval_only: return "retrieval-only";
    case MethodKind::ir_only: return "ir-only";
    case MethodKind::flairr: return "flairr";
    case MethodKind::asp: return "asp:" + asp_name;
  }
  return "unknown";
}

SessionConfig Method::configure(SessionConfig base) const {
  switch (kind) {
    case MethodKind::simple:
      base.retrieval_enabled = false;
      base.refinement_enabled = false;
      break;
    case MethodKind::retrieval_only:
      base.retrieval_enabled = true;
      base.refinement_enabled = false;
      break;
    case MethodKind::ir_only:
      base.retrieval_enabled = false;
      base.refinement_enabled = true;
      break;
    case MethodKind::flairr:
      base.retrieval_enabled = true;
      base.refinement_enabled = true;
      break;
    case MethodKind::asp:
      base.retrieval_enabled = true;
      base.refinement_enabled = false;
      break;
  }
  return base;
}

const std::vector<Method>& ablation_methods() {
  static const std::vector<Method> methods{{MethodKind::simple, {}},
                                           {MethodKind::retrieval_only, {}},
                                           {MethodKind::ir_only, {}},
                                           {MethodKind::flairr, {}}};
  return methods;
}

void ExperimentConfig::validate() const {
  if (dataset.path.empty()) throw ConfigError("experiment needs dataset.path");
  if (horizons.empty()) throw ConfigError("experiment needs at least one horizon");
  if (std::any_of(horizons.begin(), horizons.end(), [](std::size_t h) { return h == 0; })) {
    throw ConfigError("horizons must be >= 1");
  }
  if (methods.empty()) throw ConfigError("experiment needs at least one method");
  if (runs < 1) throw ConfigError("runs must be >= 1");
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train_fraction must be in (0, 1)");
  session.validate();
}

// ---------------------------------------------------------------------------
// Config files

namespace {

template <typename T>
void read_key(const json& obj, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

void reject_unknown(const json& obj, std::initializer_list<std::string_view> allowed, std::string_view where) {
  for (const auto& [key, value] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError("unknown key '" + key + "' in " + std::string(where));
    }
  }
}

}  // namespace

SessionConfig session_config_from_json(const json& doc, SessionConfig c) {
  if (!doc.is_object()) throw ConfigError("session config must be a JSON object");
  reject_unknown(doc,
                 {"context_length", "horizon", "analog_count", "max_iterations", "stop_threshold",
                  "sample_size", "precision", "parse_retries", "retrieval_enabled", "refinement_enabled",
                  "seed", "temperatures", "max_tokens", "prompt_char_budget"},
                 "session config");
  read_key(doc, "context_length", c.context_length);
  read_key(doc, "horizon", c.horizon);
  read_key(doc, "analog_count", c.analog_count);
  read_key(doc, "max_iterations", c.max_iterations);
  read_key(doc, "stop_threshold", c.stop_threshold);
  read_key(doc, "sample_size", c.sample_size);
  read_key(doc, "precision", c.precision);
  read_key(doc, "parse_retries", c.parse_retries);
  read_key(doc, "retrieval_enabled", c.retrieval_enabled);
  read_key(doc, "refinement_enabled", c.refinement_enabled);
  read_key(doc, "seed", c.seed);
  read_key(doc, "max_tokens", c.max_tokens);
  read_key(doc, "prompt_char_budget", c.prompt_char_budget);
  if (doc.contains("temperatures")) {
    const json& t = doc["temperatures"];
    reject_unknown(t, {"forecaster", "refiner", "synthesis"}, "session.temperatures");
    read_key(t, "forecaster", c.forecaster_temperature);
    read_key(t, "refiner", c.refiner_temperature);
    read_key(t, "synthesis", c.synthesis_temperature);
  }
  return c;
}

json session_config_to_json(const SessionConfig& c) {
  return json{{"context_length", c.context_length},
              {"horizon", c.horizon},
              {"analog_count", c.analog_count},
              {"max_iterations", c.max_iterations},
              {"stop_threshold", c.stop_threshold},
              {"sample_size", c.sample_size},
              {"precision", c.precision},
              {"parse_retries", c.parse_retries},
              {"retrieval_enabled", c.retrieval_enabled},
              {"refinement_enabled", c.refinement_enabled},
              {"seed", c.seed},
              {"temperatures",
               {{"forecaster", c.forecaster_temperature},
                {"refiner", c.refiner_temperature},
                {"synthesis", c.synthesis_temperature}}},
              {"max_tokens", c.max_tokens},
              {"prompt_char_budget", c.prompt_char_budget}};
}

ExperimentConfig experiment_config_from_json(const json& doc, const std::filesystem::path& base_dir) {
  if (!doc.is_object()) throw ConfigError("experiment config must be a JSON object");
  reject_unknown(doc,
                 {"dataset", "horizons", "methods", "runs", "train_fraction", "max_test_windows", "jobs",
                  "session", "output", "run_name", "backend", "templates"},
                 "experiment config");
  ExperimentConfig c;
  const json d = doc.value("dataset", json::object());
  if (!d.is_object()) throw ConfigError("'dataset' must be a JSON object");
  reject_unknown(d, {"path", "target", "name", "description", "timestamp_column"}, "dataset config");
  std::string path;
  read_key(d, "path", path);
  c.dataset.path = path;
  if (!c.dataset.path.empty() && c.dataset.path.is_relative() && !base_dir.empty()) {
    c.dataset.path = base_dir / c.dataset.path;
  }
  read_key(d, "target", c.dataset.target);
  read_key(d, "name", c.dataset.name);
  read_key(d, "description", c.dataset.description);
  read_key(d, "timestamp_column", c.dataset.timestamp_column);

  read_key(doc, "horizons", c.horizons);
  std::vector<std::string> methods;
  read_key(doc, "methods", methods);
  for (const auto& m : methods) c.methods.push_back(Method::parse(m));
  if (c.methods.empty()) c.methods = {Method{MethodKind::flairr, {}}};
  read_key(doc, "runs", c.runs);
  read_key(doc, "train_fraction", c.train_fraction);
  read_key(doc, "max_test_windows", c.max_test_windows);
  read_key(doc, "jobs", c.jobs);
  if (doc.contains("session")) c.session = session_config_from_json(doc["session"], c.session);
  std::string output;
  read_key(doc, "output", output);
  c.output = output;
  if (!c.output.empty() && c.output.is_relative() && !base_dir.empty()) c.output = base_dir / c.output;
  read_key(doc, "run_name", c.run_name);
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return experiment_config_from_json(doc, path.parent_path());
}

// ---------------------------------------------------------------------------
// Aggregation

double median(std::vector<double> values) {
  if (values.empty()) throw DataError("median of an empty list");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

ReportRow aggregate_runs(std::span<const RunOutcome> runs, const std::string& dataset) {
  if (runs.empty()) throw DataError("cannot aggregate zero runs");
  ReportRow row;
  row.dataset = dataset;
  row.horizon = runs.front().key.horizon;
  row.method = runs.front().key.method.label();
  double iterations = 0.0;
  std::size_t early = 0;
  for (const auto& r : runs) {
    row.run_maes.push_back(r.test_mae);
    iterations += static_cast<double>(r.iterations);
    early += r.early_stop ? 1 : 0;
    row.tokens += r.forecaster_tokens.total() + r.refiner_tokens.total();
    row.refiner_tokens += r.refiner_tokens.total();
  }
  row.median_mae = median(row.run_maes);
  row.iterations = iterations / static_cast<double>(runs.size());
  row.early_stop_rate = static_cast<double>(early) / static_cast<double>(runs.size());
  return row;
}

// ---------------------------------------------------------------------------
// Experiment driver

namespace {

std::string utc_stamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

std::string file_safe(std::string s) {
  for (char& c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
  }
  return s;
}

struct Prepared {
  PreparedTarget target;
  DatasetMeta meta;
};

RunOutcome run_cell(const ExperimentConfig& config, const Prepared& data, const RunKey& key,
                    const BackendFactory& factory, const TemplateLibrary& templates,
                    const std::filesystem::path& run_dir) {
  SessionConfig cfg = key.method.configure(config.session);
  cfg.horizon = key.horizon;
  cfg.seed = key.seed;
  cfg.validate();

  const auto train = data.target.train();
  const auto validation = validation_windows(train, cfg.context_length, cfg.horizon, cfg.sample_size);
  const auto tests = test_windows(data.target.values, data.target.train_size, cfg.context_length, cfg.horizon,
                                  config.max_test_windows);
  if (tests.empty()) {
    throw DataError("test split of length " + std::to_string(data.target.test().size()) +
                    " holds no window with H=" + std::to_string(cfg.horizon));
  }

  const Agents agents = factory(key);
  std::optional<InstructionBlock> initial;
  if (key.method.kind == MethodKind::asp) initial = asp_instructions(templates, key.method.asp_name, cfg.horizon);

  std::unique_ptr<SessionLog> log;
  if (!run_dir.empty()) {
    log = std::make_unique<SessionLog>(run_dir / "sessions" /
                                       ("h" + std::to_string(key.horizon) + "_" + file_safe(key.method.label()) +
                                        "_run" + std::to_string(key.run + 1) + ".jsonl"));
  }
  const SessionResult session =
      run_session(cfg, train, validation, agents, templates, data.meta, SessionOptions{initial, log.get()});

  std::optional<HistDB> db;
  if (cfg.retrieval_enabled) db.emplace(build_hist_db(train, cfg.context_length, cfg.horizon));
  const SessionContext ctx{cfg, data.meta, templates, agents, db ? &*db : nullptr};

  RunOutcome out;
  out.key = key;
  out.iterations = session.history.size();
  out.early_stop = session.early_stop;
  out.forecaster_tokens = session.forecaster_tokens;
  out.refiner_tokens = session.refiner_tokens;
  out.prompt_out = session.prompt_out;
  out.test_windows = tests.size();

  double sum = 0.0;
  std::optional<ParseError> last;
  for (const auto& w : tests) {
    try {
      ForecastAttempt a = forecast_window(session.prompt_out.instructions, w, ctx);
      out.forecaster_tokens.input += a.tokens.input;
      out.forecaster_tokens.output += a.tokens.output;
      sum += mae(a.reply.values, w.truth);
    } catch (const ParseError& e) {
      ++out.failed_windows;
      last = e;
    }
  }
  if (out.failed_windows == tests.size()) {
    throw ParseError(last->kind(), "every test window failed to parse; last: " + std::string(last->what()),
                     last->offending());
  }
  out.test_mae = sum / static_cast<double>(tests.size() - out.failed_windows);
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

}  // namespace

Report run_experiment(const ExperimentConfig& config, const BackendFactory& factory,
                      const ExperimentHooks& hooks) {
  config.validate();
  const TemplateLibrary& templates = hooks.templates ? *hooks.templates : TemplateLibrary::builtin();
  for (const auto& m : config.methods) {
    if (m.kind == MethodKind::asp) templates.get_asp(m.asp_name);
  }

  std::optional<TimeSeries> loaded;
  if (!hooks.preloaded) {
    loaded.emplace(load_csv(config.dataset.path, config.dataset.target, config.dataset.timestamp_column));
  }
  const TimeSeries& series = hooks.preloaded ? *hooks.preloaded : *loaded;

  Prepared data{prepare_target(series, config.train_fraction),
                DatasetMeta{config.dataset.name.empty() ? series.name() : config.dataset.name,
                            config.dataset.description, series.target()}};

  Report report;
  report.meta.scaler = data.target.scaler;
  report.meta.train_fraction = config.train_fraction;
  report.meta.max_test_windows = config.max_test_windows;
  report.meta.runs = config.runs;
  report.meta.template_version = templates.version();
  report.meta.run_variation =
      "scripted backends vary across runs only through seed-dependent scripts; live backends through "
      "sampling temperature";
  if (!config.output.empty()) {
    report.run_dir = config.output / (config.run_name.empty() ? utc_stamp() : config.run_name);
  }

  std::vector<RunKey> keys;
  for (std::size_t h : config.horizons) {
    for (const auto& m : config.methods) {
      for (std::size_t r = 0; r < config.runs; ++r) keys.push_back(RunKey{h, m, r, config.session.seed + r});
    }
  }

  std::vector<std::optional<RunOutcome>> outcomes(keys.size());
  std::vector<std::exception_ptr> errors(keys.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < keys.size(); i = next++) {
      try {
        outcomes[i] = run_cell(config, data, keys[i], factory, templates, report.run_dir);
        if (hooks.on_run) hooks.on_run(*outcomes[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::min(config.jobs, keys.size());
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }

  for (std::size_t i = 0; i < keys.size(); i += config.runs) {
    std::vector<RunOutcome> group;
    for (std::size_t r = 0; r < config.runs; ++r) {
      if (outcomes[i + r]) group.push_back(*outcomes[i + r]);
    }
    if (group.size() == config.runs) report.rows.push_back(aggregate_runs(group, data.meta.name));
  }
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (outcomes[i]) {
      report.meta.backend = factory(keys[i]).forecaster->id();
      break;
    }
  }

  const auto first_error = std::find_if(errors.begin(), errors.end(), [](const auto& e) { return e != nullptr; });
  if (!report.run_dir.empty() && (first_error == errors.end() || !report.rows.empty())) {
    emit_report(report, ReportFormat::csv, report.run_dir / "report.csv");
    emit_report(report, ReportFormat::json, report.run_dir / "report.json");
  }
  if (first_error != errors.end()) std::rethrow_exception(*first_error);
  return report;
}

std::vector<AblationTable> run_ablation(ExperimentConfig config, const BackendFactory& factory,
                                        const ExperimentHooks& hooks) {
  config.methods = ablation_methods();
  const Report report = run_experiment(config, factory, hooks);
  std::vector<AblationTable> tables;
  for (std::size_t h : config.horizons) {
    AblationTable t;
    t.horizon = h;
    for (const auto& m : ablation_methods()) {
      const auto it = std::find_if(report.rows.begin(), report.rows.end(), [&](const ReportRow& r) {
        return r.horizon == h && r.method == m.label();
      });
      if (it != report.rows.end()) {
        t.dataset = it->dataset;
        t.rows.push_back(*it);
      }
    }
    tables.push_back(std::move(t));
  }
  if (!report.run_dir.empty()) write_text(report.run_dir / "ablation.csv", ablation_csv(tables));
  return tables;
}

// ---------------------------------------------------------------------------
// Report emission

std::string report_csv(std::span<const ReportRow> rows) {
  std::size_t runs = 0;
  for (const auto& r : rows) runs = std::max(runs, r.run_maes.size());
  std::string out = "dataset,horizon,method";
  for (std::size_t i = 0; i < runs; ++i) out += ",run_" + std::to_string(i + 1);
  out += ",median,iterations,early_stop_rate,tokens,refiner_tokens\n";
  for (const auto& r : rows) {
    out += csv_field(r.dataset) + ',' + std::to_string(r.horizon) + ',' + csv_field(r.method);
    for (std::size_t i = 0; i < runs; ++i) out += ',' + (i < r.run_maes.size() ? fixed(r.run_maes[i], 6) : "");
    out += ',' + fixed(r.median_mae, 6) + ',' + fixed(r.iterations, 2) + ',' + fixed(r.early_stop_rate, 2) + ',' +
           std::to_string(r.tokens) + ',' + std::to_string(r.refiner_tokens) + '\n';
  }
  return out;
}

std::string ablation_csv(std::span<const AblationTable> tables) {
  std::vector<ReportRow> rows;
  for (const auto& t : tables) rows.insert(rows.end(), t.rows.begin(), t.rows.end());
  return report_csv(rows);
}

json report_json(const Report& report) {
  json rows = json::array();
  for (const auto& r : report.rows) {
    rows.push_back(json{{"dataset", r.dataset},
                        {"horizon", r.horizon},
                        {"method", r.method},
                        {"run_maes", r.run_maes},
                        {"median", r.median_mae},
                        {"iterations", r.iterations},
                        {"early_stop_rate", r.early_stop_rate},
                        {"tokens", r.tokens},
                        {"refiner_tokens", r.refiner_tokens}});
  }
  const ReportMeta& m = report.meta;
  return json{{"meta",
               {{"mae_space", m.mae_space},
                {"scaler", {{"mean", m.scaler.mean}, {"std", m.scaler.std}}},
                {"train_fraction", m.train_fraction},
                {"max_test_windows", m.max_test_windows},
                {"runs", m.runs},
                {"backend", m.backend},
                {"template_version", m.template_version},
                {"retrieval_policy", m.retrieval_policy},
                {"run_variation", m.run_variation},
                {"order", "lower MAE is better"}}},
              {"rows", std::move(rows)}};
}

Report report_from_json(const json& doc) {
  Report report;
  try {
    for (const auto& r : doc.at("rows")) {
      ReportRow row;
      row.dataset = r.at("dataset").get<std::string>();
      row.horizon = r.at("horizon").get<std::size_t>();
      row.method = r.at("method").get<std::string>();
      row.run_maes = r.at("run_maes").get<std::vector<double>>();
      row.median_mae = r.at("median").get<double>();
      row.iterations = r.at("iterations").get<double>();
      row.early_stop_rate = r.at("early_stop_rate").get<double>();
      row.tokens = r.at("tokens").get<std::int64_t>();
      row.refiner_tokens = r.at("refiner_tokens").get<std::int64_t>();
      report.rows.push_back(std::move(row));
    }
    if (doc.contains("meta")) {
      const json& m = doc["meta"];
      report.meta.mae_space = m.value("mae_space", report.meta.mae_space);
      if (m.contains("scaler")) {
        report.meta.scaler = Scaler{m["scaler"].at("mean").get<double>(), m["scaler"].at("std").get<double>()};
      }
      report.meta.train_fraction = m.value("train_fraction", report.meta.train_fraction);
      report.meta.max_test_windows = m.value("max_test_windows", report.meta.max_test_windows);
      report.meta.runs = m.value("runs", report.meta.runs);
      report.meta.backend = m.value("backend", std::string());
      report.meta.template_version = m.value("template_version", std::string());
      report.meta.retrieval_policy = m.value("retrieval_policy", report.meta.retrieval_policy);
      report.meta.run_variation = m.value("run_variation", std::string());
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed report JSON: ") + e.what());
  }
  return report;
}

void emit_report(const Report& report, ReportFormat format, const std::filesystem::path& path) {
  if (report.rows.empty()) throw DataError("refusing to emit an empty report");
  write_text(path, format == ReportFormat::csv ? report_csv(report.rows) : report_json(report).dump(2) + "\n");
}

}  // namespace flairr
