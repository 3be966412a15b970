#include <doctest.h>

#include <fstream>
#include <random>

#include <json.hpp>

#include "flairr/errors.hpp"
#include "flairr/numbers.hpp"
#include "flairr/prompts.hpp"
#include "flairr/replies.hpp"
#include "flairr/templates.hpp"
#include "support.hpp"

using namespace flairr;
using flairr::testing::TempDir;

namespace {

ParseErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const ParseError& e) {
    return e.kind();
  }
  FAIL("expected a ParseError");
  return ParseErrorKind::grammar;
}

std::string kind_name(ParseErrorKind k) {
  switch (k) {
    case ParseErrorKind::missing_marker: return "missing_marker";
    case ParseErrorKind::unbalanced_bracket: return "unbalanced_bracket";
    case ParseErrorKind::non_numeric: return "non_numeric";
    case ParseErrorKind::count_mismatch: return "count_mismatch";
    case ParseErrorKind::bad_boolean: return "bad_boolean";
    case ParseErrorKind::placeholder: return "placeholder";
    case ParseErrorKind::empty_body: return "empty_body";
    case ParseErrorKind::grammar: return "grammar";
  }
  return "?";
}

std::size_t count(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = hay.find(needle); p != std::string::npos; p = hay.find(needle, p + 1)) ++n;
  return n;
}

}  // namespace

// ---------------------------------------------------------------------------
// numbers

TEST_CASE("format_number rounds half away from zero") {
  CHECK(format_number(0.5, 0) == "1");
  CHECK(format_number(-0.5, 0) == "-1");
  CHECK(format_number(2.5, 0) == "3");
  CHECK(format_number(1.23456, 4) == "1.2346");
  CHECK(format_number(-1.23455, 4) == "-1.2346");
  CHECK(format_number(0.125, 2) == "0.13");
  CHECK(format_number(3.0, 4) == "3.0000");
}

TEST_CASE("format_number never prints negative zero") {
  CHECK(format_number(-0.0, 2) == "0.00");
  CHECK(format_number(-0.00001, 4) == "0.0000");
}

TEST_CASE("format_number rejects bad precision and non-finite values") {
  CHECK_THROWS_AS(format_number(1.0, -1), ConfigError);
  CHECK_THROWS_AS(format_number(1.0, kMaxPrecision + 1), ConfigError);
  CHECK_THROWS_AS(format_number(std::nan(""), 2), DataError);
  CHECK_THROWS_AS(format_number(HUGE_VAL, 2), DataError);
  CHECK(format_numbers(std::vector<double>{1, -2.5}, 1) == "1.0, -2.5");
  CHECK(format_numbers(std::vector<double>{}, 1).empty());
}

// ---------------------------------------------------------------------------
// templates

TEST_CASE("render_template substitutes once and never rescans") {
  CHECK(render_template("a {x} b", {{"x", "{y}"}}) == "a {y} b");
  CHECK(render_template("{x}{x}", {{"x", "1"}}) == "11");
  CHECK(render_template("json {\"k\": 1} and {1, 2}", {}) == "json {\"k\": 1} and {1, 2}");
  CHECK_THROWS_AS(render_template("{missing}", {}), TemplateError);
}

TEST_CASE("conditional blocks need a non-empty binding") {
  const std::string body = "A{?x}[{x}]{/x}B";
  CHECK(render_template(body, {{"x", "1"}}) == "A[1]B");
  CHECK(render_template(body, {{"x", ""}}) == "AB");
  CHECK(render_template(body, {}) == "AB");
  CHECK(render_template("{?a}{?a}x{/a}{/a}", {{"a", "1"}}) == "x");
  CHECK_THROWS_AS(render_template("{?x}never closed", {{"x", "1"}}), TemplateError);
  CHECK_THROWS_AS(render_template("stray {/x}", {}), TemplateError);
}

TEST_CASE("contains_placeholder looks for lowercase snake-case names") {
  std::string found;
  CHECK(contains_placeholder("use {previous_data} here", &found));
  CHECK(found == "{previous_data}");
  CHECK_FALSE(contains_placeholder("{1, 2} {Upper} {} {?x}"));
  CHECK_FALSE(contains_placeholder("no braces"));
}

TEST_CASE("builtin library holds the v1 templates") {
  const TemplateLibrary& lib = TemplateLibrary::builtin();
  CHECK(lib.version() == "v1");
  CHECK(lib.forecaster().kind == TemplateKind::forecaster_base);
  CHECK(lib.refiner().kind == TemplateKind::refiner);
  CHECK(lib.synthesis().kind == TemplateKind::synthesis);
  const auto asps = lib.list_asps();
  CHECK(asps.size() == 13);
  for (const char* name : {"simple", "many-worlds-ensemble", "dungeon-master", "deep-stl", "haiku-seeded"}) {
    CHECK(std::find(asps.begin(), asps.end(), name) != asps.end());
  }
  for (const auto& name : asps) {
    for (const auto& p : lib.get_asp(name).placeholders()) {
      CHECK(known_placeholders().contains(p));
    }
  }
  CHECK(lib.forecaster().body.find("Output Format") != std::string::npos);
  CHECK(lib.refiner().body.find("Done: <True or False>") != std::string::npos);
  CHECK(lib.synthesis().body.find("Do not include template placeholders") != std::string::npos);
}

TEST_CASE("unknown strategy lists the library") {
  try {
    TemplateLibrary::builtin().get_asp("foo");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    CHECK(what.find("foo") != std::string::npos);
    CHECK(what.find("dungeon-master") != std::string::npos);
  }
  CHECK_THROWS_AS(TemplateLibrary::builtin().get_asp("refiner"), ConfigError);
}

TEST_CASE("TemplateLibrary::load validates the manifest") {
  TempDir dir("tpl");
  const auto write_lib = [&](const std::string& extra_body) {
    dir.write("f.txt", "Forecast {prediction_length} {previous_sequence_length_data}" + extra_body);
    dir.write("r.txt", "Refine {samples}");
    dir.write("s.txt", "Synth {current_learnings}");
    dir.write("a.txt", "- go {sequence_length}");
    dir.write("manifest.json", R"({"version": "t1", "templates": [
      {"id": "forecaster-base", "kind": "forecaster-base", "file": "f.txt"},
      {"id": "refiner", "kind": "refiner", "file": "r.txt"},
      {"id": "synthesis", "kind": "synthesis", "file": "s.txt"},
      {"id": "mine", "kind": "asp-strategy", "file": "a.txt"}]})");
  };
  write_lib("");
  const TemplateLibrary lib = TemplateLibrary::load(dir.path());
  CHECK(lib.version() == "t1");
  CHECK(lib.list_asps() == std::vector<std::string>{"mine"});
  const auto instr = asp_instructions(lib, "mine", 7);
  REQUIRE(instr);
  CHECK(instr->items == std::vector<std::string>{"go 7"});

  write_lib(" {made_up_name}");
  CHECK_THROWS_AS(TemplateLibrary::load(dir.path()), TemplateError);

  dir.write("manifest.json", R"({"version": "t2", "templates": []})");
  CHECK_THROWS_AS(TemplateLibrary::load(dir.path()), TemplateError);
  CHECK_THROWS_AS(TemplateLibrary::load(dir / "nowhere"), TemplateError);
}

TEST_CASE("ASP instructions substitute the horizon") {
  const TemplateLibrary& lib = TemplateLibrary::builtin();
  CHECK_FALSE(asp_instructions(lib, "simple", 24).has_value());
  const auto dm = asp_instructions(lib, "dungeon-master", 48);
  REQUIRE(dm);
  CHECK(dm->text().find("next 48 turns") != std::string::npos);
  for (const auto& name : lib.list_asps()) {
    if (const auto block = asp_instructions(lib, name, 12)) CHECK_FALSE(contains_placeholder(block->text()));
  }
}

// ---------------------------------------------------------------------------
// forecast replies

TEST_CASE("forecast reply in the documented format") {
  const auto r = parse_forecast_reply(
      "Predicted Values: [1.5, -2, 3.25]\n"
      "Reasoning: trend up\nwith a dip\n"
      "Certainty Estimate: 85%\n"
      "Certainty Reasoning: stable pattern",
      3);
  CHECK(r.values == std::vector<double>{1.5, -2.0, 3.25});
  CHECK(r.reasoning == "trend up\nwith a dip");
  REQUIRE(r.certainty);
  CHECK(*r.certainty == 85.0);
  CHECK(r.certainty_reasoning == std::optional<std::string>("stable pattern"));
}

TEST_CASE("forecast reply tolerates markdown, line breaks and the unicode minus") {
  const auto r = parse_forecast_reply(
      "Let me think.\n**Predicted Values:** [\n  1.0,\n  \xE2\x88\x92" "2.5 ,\n +3\n]\n", 3);
  CHECK(r.values == std::vector<double>{1.0, -2.5, 3.0});
  CHECK_FALSE(r.certainty.has_value());
}

TEST_CASE("the last Predicted Values marker wins") {
  const auto r = parse_forecast_reply(
      "Predicted Values: [predicted_value_1, ...]\nDraft done.\nPredicted Values: [4, 5]\n", 2);
  CHECK(r.values == std::vector<double>{4.0, 5.0});
}

TEST_CASE("forecast reply errors carry their kind") {
  CHECK(kind_of([] { parse_forecast_reply("Values: [1, 2]", 2); }) == ParseErrorKind::missing_marker);
  CHECK(kind_of([] { parse_forecast_reply("Predicted Values: 1, 2", 2); }) == ParseErrorKind::unbalanced_bracket);
  CHECK(kind_of([] { parse_forecast_reply("Predicted Values: [1, 2", 2); }) == ParseErrorKind::unbalanced_bracket);
  CHECK(kind_of([] { parse_forecast_reply("Predicted Values: [1, two]", 2); }) == ParseErrorKind::non_numeric);
  CHECK(kind_of([] { parse_forecast_reply("Predicted Values: [1, nan]", 2); }) == ParseErrorKind::non_numeric);
  CHECK(kind_of([] { parse_forecast_reply("Predicted Values: [1, 2, 3]", 2); }) ==
        ParseErrorKind::count_mismatch);
  CHECK(kind_of([] { parse_forecast_reply("Predicted Values: []", 2); }) == ParseErrorKind::count_mismatch);
  CHECK(kind_of([] { parse_forecast_reply("Predicted Values: [1,, 2]", 2); }) == ParseErrorKind::non_numeric);
}

TEST_CASE("out-of-range certainty is dropped, not fatal") {
  const auto r = parse_forecast_reply("Predicted Values: [1]\nCertainty Estimate: 140\n", 1);
  CHECK_FALSE(r.certainty.has_value());
}

TEST_CASE("forecast values round-trip through the output format") {
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<std::size_t> hd(1, 96);
  std::uniform_real_distribution<double> vd(-50.0, 50.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(hd(rng));
    for (double& x : v) x = vd(rng);
    const std::string text = "Predicted Values: [" + format_numbers(v, 4) +
                             "]\nReasoning: r\nCertainty Estimate: 50\nCertainty Reasoning: c\n";
    const auto back = parse_forecast_reply(text, v.size());
    REQUIRE(back.values.size() == v.size());
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(std::fabs(back.values[i] - v[i]) <= 5e-5);
  }
}

// ---------------------------------------------------------------------------
// refiner replies

TEST_CASE("refiner reply corpus") {
  std::ifstream in(flairr::testing::fixture("refiner_corpus.json"));
  const auto corpus = nlohmann::json::parse(in);
  REQUIRE(corpus.size() == 30);
  for (const auto& c : corpus) {
    const std::string name = c["name"];
    const std::string reply = c["reply"];
    CAPTURE(name);
    if (c["expect"] == "accept") {
      RefinerReply r;
      REQUIRE_NOTHROW(r = parse_refiner_reply(reply));
      CHECK(r.done == c["done"].get<bool>());
      if (c.contains("learnings")) CHECK(r.learnings == c["learnings"].get<std::string>());
      if (c.contains("confidence")) {
        REQUIRE(r.confidence);
        CHECK(doctest::String(std::string(to_string(*r.confidence)).c_str()) ==
              doctest::String(c["confidence"] == "high" ? "High" : c["confidence"] == "medium" ? "Medium" : "Low"));
      }
      if (c.contains("rationale")) CHECK(r.rationale == std::optional<std::string>(c["rationale"].get<std::string>()));
    } else {
      const auto k = kind_of([&] { parse_refiner_reply(reply); });
      CHECK(kind_name(k) == c["error"].get<std::string>());
    }
  }
}

// ---------------------------------------------------------------------------
// instructions

TEST_CASE("instruction replies split into items") {
  const auto b = parse_instructions_reply(
      "Refined Prompt Forecasting Instructions:\n- Damp the trend.\n  Keep it short.\n2. Use weekly cycle.\n", 3);
  CHECK(b.items == std::vector<std::string>{"Damp the trend.\nKeep it short.", "Use weekly cycle."});
  CHECK(b.source_iteration == 3);
  CHECK_FALSE(b.over_limit);
  CHECK(b.text() == "- Damp the trend.\n  Keep it short.\n- Use weekly cycle.");
  CHECK(InstructionBlock::from_text(b.text(), 3) == b);
}

TEST_CASE("paragraphs become items when there are no bullets") {
  const auto b = InstructionBlock::from_text("\"First idea\nspans lines.\"\n\nSecond idea.");
  CHECK(b.items == std::vector<std::string>{"First idea\nspans lines.", "Second idea."});
}

TEST_CASE("more than three items is flagged, not rejected") {
  const auto b = parse_instructions_reply("- a\n- b\n- c\n- d");
  CHECK(b.items.size() == 4);
  CHECK(b.over_limit);
}

TEST_CASE("instruction reply errors") {
  CHECK(kind_of([] { parse_instructions_reply("- Use {previous_data} as the base."); }) ==
        ParseErrorKind::placeholder);
  CHECK(kind_of([] { parse_instructions_reply("Refined Prompt Forecasting Instructions:\n  \n"); }) ==
        ParseErrorKind::empty_body);
  CHECK(kind_of([] { parse_instructions_reply(""); }) == ParseErrorKind::empty_body);
}

// ---------------------------------------------------------------------------
// prompt rendering

TEST_CASE("forecaster prompt with and without optional sections") {
  const TemplateLibrary& lib = TemplateLibrary::builtin();
  ForecasterPromptInputs in;
  in.meta = {"ETTh1", "hourly oil temperature", "OT"};
  in.horizon = 24;
  in.history_text = "1.0000, 2.0000";
  const std::string bare = render_forecaster_prompt(lib, in);
  CHECK(bare.find("next 24 steps") != std::string::npos);
  CHECK(bare.find("Dataset: ETTh1, hourly oil temperature") != std::string::npos);
  CHECK(bare.find("1.0000, 2.0000") != std::string::npos);
  CHECK(bare.find("Forecasting Instructions:") == std::string::npos);
  CHECK(bare.find("Retrieved Historical Analogs") == std::string::npos);
  CHECK_FALSE(contains_placeholder(bare));

  in.instructions = InstructionBlock{{"Damp the trend."}, 1, false};
  in.raft_context = "Segment 1 (start index 0, Pearson r = 1.0000):\ncontext: 1\noutcome: 2\n";
  in.segment_count = 1;
  const std::string full = render_forecaster_prompt(lib, in);
  CHECK(full.find("Forecasting Instructions:\n- Damp the trend.") != std::string::npos);
  CHECK(full.find("the 1 retrieved historical segments") != std::string::npos);
  CHECK(full.find("Segment 1 (start index 0") != std::string::npos);
  CHECK(full.find("Output Format") != std::string::npos);

  in.history_text.clear();
  CHECK_THROWS_AS(render_forecaster_prompt(lib, in), DataError);
}

TEST_CASE("free text that looks like a placeholder cannot leak") {
  const TemplateLibrary& lib = TemplateLibrary::builtin();
  ForecasterPromptInputs in;
  in.meta = {"d", "x", "OT"};
  in.horizon = 2;
  in.history_text = "1, 2";
  in.instructions = InstructionBlock{{"Mention {previous_data} verbatim."}, 1, false};
  CHECK_THROWS_AS(render_forecaster_prompt(lib, in), TemplateError);

  const std::string synth = render_synthesis_prompt(lib, "- look at {previous_data}");
  CHECK(synth.find("look at previous_data") != std::string::npos);
  CHECK_FALSE(contains_placeholder(synth));
  CHECK_THROWS_AS(render_synthesis_prompt(lib, "  \n"), DataError);
}

TEST_CASE("refiner prompt carries the whole session history") {
  const TemplateLibrary& lib = TemplateLibrary::builtin();
  for (std::size_t k = 1; k <= 5; ++k) {
    RefinerPromptInputs in;
    in.iteration = k - 1;
    for (std::size_t i = 0; i < k; ++i) {
      std::optional<InstructionBlock> block;
      if (i > 0) block = InstructionBlock{{"rule " + std::to_string(i)}, i, false};
      in.history.push_back({block, 0.1 * static_cast<double>(i + 1)});
    }
    in.current_instructions = in.history.back().instructions;
    in.batch_mae = in.history.back().batch_mae;
    in.samples.push_back({100, "the prompt", {1, 2}, {1, 3}, 0.5});
    const std::string text = render_refiner_prompt(lib, in);
    CHECK(count(text, "--- Attempt ") == k);
    for (std::size_t i = 0; i < k; ++i) {
      const std::string header =
          "--- Attempt " + std::to_string(i + 1) + " (batch MAE " + format_number(0.1 * (i + 1), 4) + ") ---\n";
      const std::string body = i == 0 ? std::string(kNoInstructionsText) : "- rule " + std::to_string(i);
      CHECK(text.find(header + body + "\n") != std::string::npos);
    }
    CHECK(text.find("for this Iteration " + std::to_string(k) + ":") != std::string::npos);
    CHECK(text.find("(tau_stop = 5%)") != std::string::npos);
    CHECK(text.find("=== Sample 1 of 1 (forecast origin 100) ===\nPrompt:\nthe prompt\n"
                    "Predictions: [1.0000, 2.0000]\nGround-Truth: [1.0000, 3.0000]\nSample MAE: 0.5000\n") !=
          std::string::npos);
    CHECK_FALSE(contains_placeholder(text));
  }
}

TEST_CASE("long sample prompts are elided in the middle") {
  const std::string text(1000, 'x');
  const std::string cut = truncate_middle(text, 100);
  CHECK(cut.size() < 200);
  CHECK(cut.find("[... 900 characters omitted ...]") != std::string::npos);
  CHECK(truncate_middle(text, 0) == text);
  CHECK(truncate_middle("short", 100) == "short");

  // Never splits a multi-byte character.
  std::string utf;
  for (int i = 0; i < 100; ++i) utf += "\xC3\xA9";
  const std::string u = truncate_middle(utf, 51);
  const auto marker = u.find("\n[...");
  REQUIRE(marker != std::string::npos);
  CHECK(marker % 2 == 0);
}
