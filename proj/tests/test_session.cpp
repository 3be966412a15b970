#include <doctest.h>

#include <json.hpp>

#include "agents.hpp"
#include "flairr/errors.hpp"
#include "flairr/session.hpp"
#include "support.hpp"

using namespace flairr;
using flairr::testing::SequenceAgents;
using flairr::testing::TempDir;
using flairr::testing::wavy_train;
using flairr::testing::zero_truth_windows;

namespace {

const DatasetMeta kMeta{"synthetic", "test series", "OT"};

SessionConfig small_config() {
  SessionConfig c;
  c.context_length = 12;
  c.horizon = 4;
  return c;
}

SessionResult run(SequenceAgents& a, const SessionConfig& c, const SessionOptions& o = {}) {
  const auto train = wavy_train(600);
  const auto windows = zero_truth_windows(c.sample_size, c.context_length, c.horizon);
  return run_session(c, train, windows, a.agents(), TemplateLibrary::builtin(), kMeta, o);
}

std::string rule(std::size_t n) { return "- rule " + std::to_string(n); }

}  // namespace

TEST_CASE("session defaults") {
  const SessionConfig c;
  CHECK(c.max_iterations == 5);
  CHECK(c.stop_threshold == 5.0);
  CHECK(c.sample_size == 3);
  CHECK(c.analog_count == 2);
  CHECK(c.precision == 4);
  CHECK(c.parse_retries == 3);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("config validation") {
  const auto bad = [](auto mutate) {
    SessionConfig c;
    mutate(c);
    CHECK_THROWS_AS(c.validate(), ConfigError);
  };
  bad([](SessionConfig& c) { c.max_iterations = 0; });
  bad([](SessionConfig& c) { c.stop_threshold = 0.0; });
  bad([](SessionConfig& c) { c.sample_size = 0; });
  bad([](SessionConfig& c) { c.precision = 11; });
  bad([](SessionConfig& c) { c.context_length = 1; });
  bad([](SessionConfig& c) { c.analog_count = 0; });
  SessionConfig no_retrieval;
  no_retrieval.retrieval_enabled = false;
  no_retrieval.analog_count = 0;
  CHECK_NOTHROW(no_retrieval.validate());
  CHECK(no_retrieval.effective_analog_count() == 0);
}

TEST_CASE("Done at iteration 2 stops early with the current instructions") {
  SequenceAgents a({0.9, 0.8, 0.7, 0.6, 0.5}, 2);
  const auto r = run(a, small_config());
  CHECK(r.early_stop);
  CHECK(r.history.size() == 2);
  REQUIRE(r.prompt_out.instructions);
  CHECK(r.prompt_out.instructions->text() == rule(1));
  CHECK(r.prompt_out.base_template_id == "forecaster-base");
  CHECK(r.selected_iteration == 2);
  CHECK(r.best_iteration == 2);
  CHECK(a.synthesis_calls == 1);
}

TEST_CASE("without Done the best-MAE instructions win") {
  SequenceAgents a({0.9, 0.5, 0.7, 0.6, 0.8});
  const auto r = run(a, small_config());
  CHECK_FALSE(r.early_stop);
  REQUIRE(r.history.size() == 5);
  CHECK(r.best_iteration == 2);
  CHECK(r.best_mae == doctest::Approx(0.5).epsilon(1e-12));
  REQUIRE(r.prompt_out.instructions);
  CHECK(r.prompt_out.instructions->text() == rule(1));
  CHECK(r.selected_iteration == 2);
  const double want[] = {0.9, 0.5, 0.7, 0.6, 0.8};
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(r.history[i].iteration == i + 1);
    CHECK(r.history[i].batch_mae == doctest::Approx(want[i]).epsilon(1e-12));
  }
  CHECK_FALSE(r.history[0].instructions.has_value());
  CHECK(r.history[4].instructions->text() == rule(4));
  // The refiner runs every iteration; synthesis is skipped on the last.
  CHECK(a.refiner_prompts.size() == 5);
  CHECK(a.synthesis_calls == 4);
  CHECK(r.best_forecast.size() == 3);
  CHECK(r.best_forecast[0][0] == doctest::Approx(0.5));
}

TEST_CASE("the first best survives later ties") {
  SequenceAgents a({0.7, 0.4, 0.4, 0.4, 0.9});
  const auto r = run(a, small_config());
  CHECK(r.best_iteration == 2);
  CHECK(r.prompt_out.instructions->text() == rule(1));
}

TEST_CASE("iteration 1 best falls back to the initial prompt") {
  SequenceAgents a({0.1, 0.5, 0.7, 0.6, 0.8});
  const auto r = run(a, small_config());
  CHECK(r.best_iteration == 1);
  CHECK_FALSE(r.prompt_out.instructions.has_value());

  const InstructionBlock p0 = InstructionBlock::from_text("- start here");
  SequenceAgents b({0.1, 0.5, 0.7, 0.6, 0.8});
  const auto r2 = run(b, small_config(), SessionOptions{p0, nullptr});
  REQUIRE(r2.prompt_out.instructions);
  CHECK(r2.prompt_out.instructions->text() == "- start here");
}

TEST_CASE("Done at iteration 1 is overruled") {
  SequenceAgents a({0.9, 0.5, 0.7, 0.6, 0.8}, 1);
  const auto r = run(a, small_config());
  CHECK_FALSE(r.early_stop);
  CHECK(r.history.size() == 5);
  CHECK(r.history[0].done_overridden);
  CHECK_FALSE(r.history[1].done_overridden);
}

TEST_CASE("iterations never exceed the cap") {
  for (std::size_t cap : {1u, 2u, 3u, 5u, 8u}) {
    SequenceAgents a({0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2});
    SessionConfig c = small_config();
    c.max_iterations = cap;
    const auto r = run(a, c);
    CHECK(r.history.size() == cap);
    CHECK(a.refiner_prompts.size() == (cap == 1 ? 0 : cap));
  }
}

TEST_CASE("refinement off evaluates once without a refiner") {
  SequenceAgents a({0.3});
  SessionConfig c = small_config();
  c.refinement_enabled = false;
  const auto train = wavy_train(600);
  const auto windows = zero_truth_windows(3, 12, 4);
  Agents agents = a.agents();
  agents.refiner.reset();
  const auto r = run_session(c, train, windows, agents, TemplateLibrary::builtin(), kMeta);
  CHECK(r.history.size() == 1);
  CHECK(r.best_mae == doctest::Approx(0.3));
  CHECK(a.forecaster_calls == 3);
}

TEST_CASE("the refiner sees every earlier attempt") {
  SequenceAgents a({0.9, 0.5, 0.7, 0.6, 0.8});
  run(a, small_config());
  REQUIRE(a.refiner_prompts.size() == 5);
  for (std::size_t k = 1; k <= 5; ++k) {
    const std::string& p = a.refiner_prompts[k - 1];
    std::size_t attempts = 0;
    for (auto pos = p.find("--- Attempt "); pos != std::string::npos; pos = p.find("--- Attempt ", pos + 1)) {
      ++attempts;
    }
    CHECK(attempts == k);
    CHECK(p.find("for this Iteration " + std::to_string(k) + ":") != std::string::npos);
    CHECK(p.find("--- Attempt 1 (batch MAE 0.9000) ---\n(none: base prompt only)\n") != std::string::npos);
    if (k >= 2) CHECK(p.find("--- Attempt 2 (batch MAE 0.5000) ---\n- rule 1\n") != std::string::npos);
    CHECK(p.find("=== Sample 3 of 3") != std::string::npos);
  }
}

TEST_CASE("malformed forecasts are re-asked with a corrective suffix") {
  std::vector<std::string> prompts;
  auto forecaster = std::make_shared<CallbackBackend>([&](const CompletionRequest& r) {
    prompts.push_back(r.prompt);
    return prompts.size() % 2 == 1 ? std::string("no idea")
                                   : flairr::testing::forecast_text(std::vector<double>(4, 0.25));
  });
  SessionConfig c = small_config();
  c.refinement_enabled = false;
  const auto train = wavy_train(600);
  const auto windows = zero_truth_windows(3, 12, 4);
  const auto r = run_session(c, train, windows, Agents{forecaster, nullptr}, TemplateLibrary::builtin(), kMeta);
  CHECK(r.best_mae == doctest::Approx(0.25));
  CHECK(r.history[0].parse_failures == 3);
  REQUIRE(prompts.size() == 6);
  CHECK(prompts[1] == prompts[0] + std::string(kCorrectiveSuffix));
}

TEST_CASE("a sample that never parses is skipped") {
  auto forecaster = std::make_shared<CallbackBackend>([](const CompletionRequest& r) {
    // Origin 300 is the second window; its context starts with -4.
    if (r.prompt.find("Historical Data:\n-4.0000") != std::string::npos) return std::string("garbage");
    return flairr::testing::forecast_text(std::vector<double>(4, 0.5));
  });
  SessionConfig c = small_config();
  c.refinement_enabled = false;
  const auto train = wavy_train(600);
  const auto windows = zero_truth_windows(3, 12, 4);
  const auto r = run_session(c, train, windows, Agents{forecaster, nullptr}, TemplateLibrary::builtin(), kMeta);
  REQUIRE(r.history[0].per_sample.size() == 3);
  CHECK(r.history[0].per_sample[1].skipped);
  CHECK(r.history[0].parse_failures == 4);
  CHECK(r.best_mae == doctest::Approx(0.5));
}

TEST_CASE("sessions abort with a cause when nothing parses or the backend fails") {
  const auto train = wavy_train(600);
  const auto windows = zero_truth_windows(3, 12, 4);
  SessionConfig c = small_config();
  c.parse_retries = 1;

  auto garbage = std::make_shared<CallbackBackend>([](const CompletionRequest&) { return std::string("?"); });
  try {
    run_session(c, train, windows, Agents{garbage, garbage}, TemplateLibrary::builtin(), kMeta);
    FAIL("expected SessionAborted");
  } catch (const SessionAborted& e) {
    CHECK(e.cause() == SessionAborted::Cause::parse);
    CHECK(e.partial_history().empty());
  }

  SequenceAgents ok({0.5, 0.4, 0.3});
  Agents agents = ok.agents();
  agents.refiner = std::make_shared<ScriptedBackend>(std::vector<ScriptEntry>{}, ScriptMode::ordinal);
  try {
    run_session(c, train, windows, agents, TemplateLibrary::builtin(), kMeta);
    FAIL("expected SessionAborted");
  } catch (const SessionAborted& e) {
    CHECK(e.cause() == SessionAborted::Cause::backend);
    REQUIRE(e.partial_history().size() == 1);
    CHECK(e.partial_history()[0].batch_mae == doctest::Approx(0.5));
  }
}

TEST_CASE("placeholder leaks in synthesis trigger the placeholder correction") {
  std::vector<std::string> synth_prompts;
  SequenceAgents seq({0.9, 0.5});
  Agents agents = seq.agents();
  agents.refiner = std::make_shared<CallbackBackend>([&](const CompletionRequest& r) -> std::string {
    if (r.tag == AgentTag::synthesis) {
      synth_prompts.push_back(r.prompt);
      return synth_prompts.size() == 1 ? "- Use {previous_data} wisely." : "- rule 1";
    }
    return "Learnings:\n- x\nDone: False";
  });
  SessionConfig c = small_config();
  c.max_iterations = 2;
  const auto train = wavy_train(600);
  const auto windows = zero_truth_windows(3, 12, 4);
  const auto r = run_session(c, train, windows, agents, TemplateLibrary::builtin(), kMeta);
  REQUIRE(synth_prompts.size() == 2);
  CHECK(synth_prompts[1] == synth_prompts[0] + std::string(kPlaceholderCorrection));
  CHECK(r.history[1].instructions->text() == "- rule 1");
}

TEST_CASE("forecaster prompts carry retrieved analogs from before the origin only") {
  std::vector<std::string> prompts;
  auto forecaster = std::make_shared<CallbackBackend>([&](const CompletionRequest& r) {
    prompts.push_back(r.prompt);
    return flairr::testing::forecast_text(std::vector<double>(4, 0.0));
  });
  SessionConfig c = small_config();
  c.refinement_enabled = false;
  const auto train = wavy_train(600);
  const auto windows = zero_truth_windows(3, 12, 4);
  run_session(c, train, windows, Agents{forecaster, nullptr}, TemplateLibrary::builtin(), kMeta);
  REQUIRE(prompts.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t origin = windows[i].origin;
    CHECK(prompts[i].find("Retrieved Historical Analogs") != std::string::npos);
    CHECK(prompts[i].find("the 2 retrieved historical segments") != std::string::npos);
    const std::string tag = "(start index ";
    for (auto pos = prompts[i].find(tag); pos != std::string::npos; pos = prompts[i].find(tag, pos + 1)) {
      const std::size_t start = std::stoul(prompts[i].substr(pos + tag.size()));
      CHECK(start + c.context_length + c.horizon <= origin - c.context_length);
    }
  }
}

TEST_CASE("session log records start, iterations and end") {
  TempDir dir("log");
  SequenceAgents a({0.9, 0.5, 0.7});
  SessionConfig c = small_config();
  c.max_iterations = 3;
  SessionLog log(dir / "s.jsonl");
  run(a, c, SessionOptions{std::nullopt, &log});
  const std::string text = flairr::testing::slurp(dir / "s.jsonl");
  std::vector<nlohmann::json> lines;
  std::size_t pos = 0;
  for (auto nl = text.find('\n'); nl != std::string::npos; pos = nl + 1, nl = text.find('\n', pos)) {
    lines.push_back(nlohmann::json::parse(text.substr(pos, nl - pos)));
  }
  REQUIRE(lines.size() == 5);
  CHECK(lines.front()["type"] == "session_start");
  CHECK(lines[1]["iteration"] == 1);
  CHECK(lines[2]["instructions"]["items"] == nlohmann::json::array({"rule 1"}));
  CHECK(lines[2]["batch_mae"].get<double>() == doctest::Approx(0.5));
  CHECK(lines.back()["type"] == "session_end");
  CHECK(lines.back()["best_iteration"] == 2);
}

TEST_CASE("validation windows are the most recent non-overlapping ones") {
  std::vector<double> train(100);
  for (std::size_t i = 0; i < train.size(); ++i) train[i] = static_cast<double>(i);
  const auto w = validation_windows(train, 10, 5, 3);
  REQUIRE(w.size() == 3);
  CHECK(w[2].origin == 95);
  CHECK(w[1].origin == 80);
  CHECK(w[0].origin == 65);
  CHECK(w[2].truth.back() == 99.0);
  CHECK(w[0].context.front() == 55.0);
  CHECK_THROWS_AS(validation_windows(train, 10, 5, 7), DataError);
  CHECK_NOTHROW(validation_windows(train, 10, 5, 6));
  CHECK_THROWS_AS(validation_windows(std::vector<double>(10, 1.0), 10, 5, 1), DataError);
}

TEST_CASE("test windows tile the test split") {
  std::vector<double> v(50);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
  const auto w = test_windows(v, 35, 10, 5, 0);
  REQUIRE(w.size() == 3);
  CHECK(w[0].origin == 35);
  CHECK(w[0].context.front() == 25.0);
  CHECK(w[2].origin == 45);
  CHECK(test_windows(v, 35, 10, 5, 2).size() == 2);
  CHECK(test_windows(v, 48, 10, 5, 0).empty());
}

TEST_CASE("sessions are deterministic") {
  SequenceAgents a({0.9, 0.5, 0.7, 0.6, 0.8});
  SequenceAgents b({0.9, 0.5, 0.7, 0.6, 0.8});
  const auto r1 = run(a, small_config());
  const auto r2 = run(b, small_config());
  CHECK(a.refiner_prompts == b.refiner_prompts);
  CHECK(r1.best_mae == r2.best_mae);
  CHECK(r1.prompt_out.instructions == r2.prompt_out.instructions);
}
