#include "flairr/session.hpp"

#include <cmath>
#include <limits>

#include <json.hpp>

namespace flairr {

using nlohmann::json;

void SessionConfig::validate() const {
  const auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (context_length < 2) fail("context length must be >= 2");
  if (horizon < 1) fail("horizon must be >= 1");
  if (max_iterations < 1) fail("max iterations must be >= 1");
  if (!(stop_threshold > 0.0)) fail("stop threshold must be > 0");
  if (sample_size < 1) fail("sample size must be >= 1");
  if (precision < 0 || precision > kMaxPrecision) fail("precision must be in 0..10");
  if (parse_retries < 0) fail("parse retries must be >= 0");
  if (retrieval_enabled && analog_count < 1) fail("retrieval needs an analog count M >= 1");
  if (forecaster_temperature < 0 || refiner_temperature < 0 || synthesis_temperature < 0) {
    fail("temperatures must be >= 0");
  }
  if (max_tokens < 1) fail("max tokens must be >= 1");
}

namespace {

TokenCounts& operator+=(TokenCounts& a, const TokenCounts& b) {
  a.input += b.input;
  a.output += b.output;
  return a;
}

json to_json(const std::optional<InstructionBlock>& block) {
  if (!block) return nullptr;
  return json{{"items", block->items},
              {"source_iteration", block->source_iteration},
              {"over_limit", block->over_limit}};
}

json to_json(const TokenCounts& t) { return json{{"input", t.input}, {"output", t.output}}; }

json to_json(const RefinementRecord& r) {
  json samples = json::array();
  for (const auto& s : r.per_sample) {
    json js{{"origin", s.origin},
            {"mae", s.skipped ? json(nullptr) : json(s.mae)},
            {"predictions", s.predictions},
            {"truth", s.truth},
            {"parse_failures", s.parse_failures},
            {"skipped", s.skipped},
            {"prompt", s.prompt}};
    if (!s.error.empty()) js["error"] = s.error;
    samples.push_back(std::move(js));
  }
  json refiner = nullptr;
  if (r.refiner_reply) {
    refiner = json{{"learnings", r.refiner_reply->learnings},
                   {"done", r.refiner_reply->done},
                   {"confidence", r.refiner_reply->confidence
                                      ? json(std::string(to_string(*r.refiner_reply->confidence)))
                                      : json(nullptr)},
                   {"rationale", r.refiner_reply->rationale ? json(*r.refiner_reply->rationale) : json(nullptr)}};
  }
  return json{{"type", "iteration"},
              {"iteration", r.iteration},
              {"instructions", to_json(r.instructions)},
              {"batch_mae", r.batch_mae},
              {"samples", std::move(samples)},
              {"refiner_reply", std::move(refiner)},
              {"done_overridden", r.done_overridden},
              {"parse_failures", r.parse_failures},
              {"tokens", {{"forecaster", to_json(r.forecaster_tokens)}, {"refiner", to_json(r.refiner_tokens)}}}};
}

template <typename Parse>
auto complete_with_retries(Backend& backend, CompletionRequest request, int retries, Parse&& parse,
                           int& failures, TokenCounts& tokens) {
  const std::string base_prompt = request.prompt;
  std::optional<ParseError> last;
  for (int attempt = 0; attempt <= retries; ++attempt) {
    if (last) {
      request.prompt = base_prompt + std::string(last->kind() == ParseErrorKind::placeholder
                                                      ? kPlaceholderCorrection
                                                      : kCorrectiveSuffix);
    }
    const CompletionReply reply = backend.complete(request);
    if (reply.tokens) tokens += *reply.tokens;
    try {
      return parse(reply.text);
    } catch (const ParseError& e) {
      ++failures;
      last = e;
    }
  }
  throw *last;
}

}  // namespace

SessionLog::SessionLog(const std::filesystem::path& path) : path_(path) {
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  out_.open(path_, std::ios::binary | std::ios::trunc);
  if (!out_) throw ConfigError("cannot write session log '" + path_.string() + "'");
}

void SessionLog::write_line(const std::string& line) {
  std::lock_guard lock(mutex_);
  out_ << line << '\n';
  out_.flush();
}

void SessionLog::start(const SessionConfig& c, const DatasetMeta& meta) {
  write_line(json{{"type", "session_start"},
                  {"dataset", meta.name},
                  {"target", meta.target},
                  {"mae_space", "scaled"},
                  {"config",
                   {{"context_length", c.context_length},
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
                    {"max_tokens", c.max_tokens}}}}
                 .dump());
}

void SessionLog::iteration(const RefinementRecord& record) { write_line(to_json(record).dump()); }

void SessionLog::finish(const SessionResult& r) {
  write_line(json{{"type", "session_end"},
                  {"early_stop", r.early_stop},
                  {"selected_iteration", r.selected_iteration},
                  {"best_iteration", r.best_iteration},
                  {"best_mae", r.best_mae},
                  {"iterations", r.history.size()},
                  {"prompt_out", {{"base_template", r.prompt_out.base_template_id},
                                  {"instructions", to_json(r.prompt_out.instructions)}}},
                  {"tokens", {{"forecaster", to_json(r.forecaster_tokens)}, {"refiner", to_json(r.refiner_tokens)}}}}
                 .dump());
}

std::vector<WindowPair> validation_windows(std::span<const double> train, std::size_t context_length,
                                           std::size_t horizon, std::size_t count) {
  std::vector<WindowPair> windows;
  const std::size_t stride = context_length + horizon;
  if (train.size() < horizon + context_length) {
    throw DataError("training split of length " + std::to_string(train.size()) +
                    " is shorter than one context + horizon window");
  }
  std::size_t origin = train.size() - horizon;
  while (windows.size() < count) {
    windows.push_back(window_at(train, origin, context_length, horizon));
    if (origin < stride + context_length) break;
    origin -= stride;
  }
  if (windows.size() < count) {
    throw DataError("training split of length " + std::to_string(train.size()) + " holds only " +
                    std::to_string(windows.size()) + " non-overlapping validation windows, need " +
                    std::to_string(count));
  }
  return {windows.rbegin(), windows.rend()};
}

std::vector<WindowPair> test_windows(std::span<const double> values, std::size_t train_size,
                                     std::size_t context_length, std::size_t horizon,
                                     std::size_t max_windows) {
  std::vector<WindowPair> windows;
  for (std::size_t origin = std::max(train_size, context_length); origin + horizon <= values.size();
       origin += horizon) {
    if (max_windows != 0 && windows.size() >= max_windows) break;
    windows.push_back(window_at(values, origin, context_length, horizon));
  }
  return windows;
}

ForecastAttempt forecast_window(const std::optional<InstructionBlock>& instructions,
                                const WindowPair& window, const SessionContext& ctx) {
  const SessionConfig& cfg = ctx.config;
  ForecasterPromptInputs in;
  in.meta = ctx.meta;
  in.horizon = cfg.horizon;
  in.history_text = format_numbers(window.context, cfg.precision);
  in.instructions = instructions;
  if (cfg.retrieval_enabled) {
    if (!ctx.db) throw ConfigError("retrieval is enabled but no retrieval database was built");
    const RetrievalResult r =
        retrieve(*ctx.db, window.context, cfg.analog_count, RetrieveOptions{window.origin});
    if (!r.segments.empty()) {
      in.raft_context = format_analogs(r.segments, cfg.precision);
      in.segment_count = r.segments.size();
    }
  }

  ForecastAttempt attempt;
  attempt.prompt = render_forecaster_prompt(ctx.templates, in);
  CompletionRequest request{attempt.prompt, cfg.forecaster_temperature, cfg.max_tokens,
                            AgentTag::forecaster, cfg.seed};
  attempt.reply = complete_with_retries(
      *ctx.agents.forecaster, std::move(request), cfg.parse_retries,
      [&](const std::string& text) { return parse_forecast_reply(text, cfg.horizon); },
      attempt.parse_failures, attempt.tokens);
  return attempt;
}

EvaluationResult evaluate_prompt(const std::optional<InstructionBlock>& instructions,
                                 std::span<const WindowPair> windows, const SessionContext& ctx) {
  if (windows.empty()) throw DataError("evaluation needs at least one window");
  EvaluationResult result;
  double sum = 0.0;
  std::size_t ok = 0;
  std::optional<ParseError> last_error;
  for (const WindowPair& w : windows) {
    SampleRecord s;
    s.origin = w.origin;
    s.truth = w.truth;
    try {
      ForecastAttempt a = forecast_window(instructions, w, ctx);
      s.prompt = std::move(a.prompt);
      s.predictions = std::move(a.reply.values);
      s.parse_failures = a.parse_failures;
      s.mae = mae(s.predictions, s.truth);
      result.tokens += a.tokens;
      sum += s.mae;
      ++ok;
    } catch (const ParseError& e) {
      s.skipped = true;
      s.parse_failures = ctx.config.parse_retries + 1;
      s.error = e.what();
      last_error = e;
    }
    result.parse_failures += s.parse_failures;
    result.samples.push_back(std::move(s));
  }
  if (ok == 0) {
    throw ParseError(last_error->kind(),
                     "all " + std::to_string(windows.size()) + " samples failed to parse; last: " +
                         last_error->what(),
                     last_error->offending());
  }
  result.batch_mae = sum / static_cast<double>(ok);
  return result;
}

RefineStepResult refine_step(std::span<const RefinementRecord> history, const SessionContext& ctx,
                             const RefineStepOptions& options) {
  if (history.empty()) throw DataError("refine step needs at least one evaluated iteration");
  const SessionConfig& cfg = ctx.config;
  const RefinementRecord& latest = history.back();

  RefinerPromptInputs in;
  in.iteration = latest.iteration - 1;
  in.current_instructions = latest.instructions;
  in.batch_mae = latest.batch_mae;
  for (const auto& r : history) in.history.push_back(HistoryEntry{r.instructions, r.batch_mae});
  for (const auto& s : latest.per_sample) {
    if (!s.skipped) in.samples.push_back(RefinerSample{s.origin, s.prompt, s.predictions, s.truth, s.mae});
  }
  in.stop_threshold = cfg.stop_threshold;
  in.target = ctx.meta.target;
  in.precision = cfg.precision;
  in.prompt_char_budget = cfg.prompt_char_budget;

  RefineStepResult result;
  result.reply = complete_with_retries(
      *ctx.agents.refiner,
      CompletionRequest{render_refiner_prompt(ctx.templates, in), cfg.refiner_temperature, cfg.max_tokens,
                        AgentTag::refiner, cfg.seed},
      cfg.parse_retries, [](const std::string& text) { return parse_refiner_reply(text); },
      result.parse_failures, result.tokens);

  if (result.reply.done && !options.allow_done) {
    result.done_overridden = true;
  } else if (result.reply.done) {
    result.done = true;
    return result;
  }
  if (!options.synthesize) return result;

  const bool has_learnings = result.reply.learnings.find_first_not_of(" \t\r\n") != std::string::npos;
  if (!has_learnings) {
    // Overridden Done with nothing to learn from: keep the current block.
    result.next = latest.instructions;
    return result;
  }
  const std::size_t next_iteration = latest.iteration + 1;
  result.next = complete_with_retries(
      *ctx.agents.refiner,
      CompletionRequest{render_synthesis_prompt(ctx.templates, result.reply.learnings),
                        cfg.synthesis_temperature, cfg.max_tokens, AgentTag::synthesis, cfg.seed},
      cfg.parse_retries,
      [&](const std::string& text) { return parse_instructions_reply(text, next_iteration); },
      result.parse_failures, result.tokens);
  return result;
}

SessionResult run_session(const SessionConfig& config, std::span<const double> train,
                          std::span<const WindowPair> validation, const Agents& agents,
                          const TemplateLibrary& templates, const DatasetMeta& meta,
                          const SessionOptions& options) {
  config.validate();
  if (!agents.forecaster || (config.refinement_enabled && !agents.refiner)) {
    throw ConfigError("session needs a forecaster backend and, with refinement, a refiner backend");
  }
  if (validation.size() < config.sample_size) {
    throw DataError("session needs " + std::to_string(config.sample_size) + " validation windows, got " +
                    std::to_string(validation.size()));
  }
  const auto windows = validation.last(config.sample_size);

  std::optional<HistDB> db;
  if (config.retrieval_enabled) {
    db.emplace(build_hist_db(train, config.context_length, config.horizon));
    if (db->window_count() == 0) {
      throw DataError("training split of length " + std::to_string(train.size()) +
                      " is too short for a retrieval database with L=" +
                      std::to_string(config.context_length) + ", H=" + std::to_string(config.horizon));
    }
  }
  const SessionContext ctx{config, meta, templates, agents, db ? &*db : nullptr};

  SessionResult result;
  std::optional<InstructionBlock> current = options.initial_instructions;
  std::optional<InstructionBlock> best_instructions = current;
  double best_mae = std::numeric_limits<double>::infinity();
  if (options.log) options.log->start(config, meta);

  const auto abort_with = [&](SessionAborted::Cause cause, const std::exception& e) {
    throw SessionAborted(cause, e.what(), result.history);
  };

  for (std::size_t k = 1; k <= config.max_iterations; ++k) {
    RefinementRecord record;
    record.iteration = k;
    record.instructions = current;
    try {
      EvaluationResult eval = evaluate_prompt(current, windows, ctx);
      record.batch_mae = eval.batch_mae;
      record.per_sample = std::move(eval.samples);
      record.parse_failures = eval.parse_failures;
      record.forecaster_tokens = eval.tokens;
    } catch (const ParseError& e) {
      abort_with(SessionAborted::Cause::parse, e);
    } catch (const BackendError& e) {
      abort_with(SessionAborted::Cause::backend, e);
    }
    result.forecaster_tokens += record.forecaster_tokens;

    if (record.batch_mae < best_mae) {
      best_mae = record.batch_mae;
      best_instructions = current;
      result.best_iteration = k;
      result.best_forecast.clear();
      for (const auto& s : record.per_sample) result.best_forecast.push_back(s.predictions);
    }

    result.history.push_back(std::move(record));
    // A lone iteration can neither stop early nor use new instructions.
    if (!config.refinement_enabled || config.max_iterations == 1) {
      if (options.log) options.log->iteration(result.history.back());
      break;
    }

    RefineStepResult step;
    try {
      step = refine_step(result.history, ctx, RefineStepOptions{k > 1, k < config.max_iterations});
    } catch (const ParseError& e) {
      abort_with(SessionAborted::Cause::parse, e);
    } catch (const BackendError& e) {
      abort_with(SessionAborted::Cause::backend, e);
    }
    RefinementRecord& latest = result.history.back();
    latest.refiner_reply = step.reply;
    latest.done_overridden = step.done_overridden;
    latest.parse_failures += step.parse_failures;
    latest.refiner_tokens = step.tokens;
    result.refiner_tokens += step.tokens;
    if (options.log) options.log->iteration(latest);

    if (step.done) {
      result.prompt_out.instructions = current;
      result.early_stop = true;
      result.selected_iteration = k;
      break;
    }
    if (step.next) current = std::move(step.next);
  }

  if (!result.early_stop) {
    result.prompt_out.instructions = best_instructions;
    result.selected_iteration = result.best_iteration;
  }
  result.best_mae = best_mae;
  if (options.log) options.log->finish(result);
  return result;
}

std::vector<double> forecast_with(const SelectedPrompt& prompt, const WindowPair& window,
                                  const SessionContext& ctx) {
  return forecast_window(prompt.instructions, window, ctx).reply.values;
}

}  // namespace flairr
