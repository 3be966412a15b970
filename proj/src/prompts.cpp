#include "flairr/prompts.hpp"

#include <cstdio>

#include "flairr/errors.hpp"

namespace flairr {

namespace {

void assert_resolved(const std::string& text, std::string_view which) {
  std::string token;
  if (contains_placeholder(text, &token)) {
    throw TemplateError(std::string(which) + " prompt contains unresolved placeholder " + token);
  }
}

std::string format_percent(double value) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", value);
  return buf;
}

bool is_continuation_byte(char c) { return (static_cast<unsigned char>(c) & 0xC0) == 0x80; }

// Turns `{name}` into `name` so free text cannot smuggle placeholders into a
// rendered prompt.
std::string defuse_placeholders(std::string text) {
  std::string token;
  while (contains_placeholder(text, &token)) {
    const std::size_t pos = text.find(token);
    text.replace(pos, token.size(), token.substr(1, token.size() - 2));
  }
  return text;
}

}  // namespace

std::string render_forecaster_prompt(const TemplateLibrary& lib, const ForecasterPromptInputs& in) {
  if (in.history_text.empty()) throw DataError("forecaster prompt needs non-empty history");
  TemplateVars vars{
      {"target_variable", in.meta.target},
      {"data_name", in.meta.name},
      {"data_description", in.meta.description},
      {"prediction_length", std::to_string(in.horizon)},
      {"instructions", in.instructions ? in.instructions->text() : std::string()},
      {"raft_context", in.raft_context.value_or(std::string())},
      {"segment_count", std::to_string(in.segment_count)},
      {"previous_sequence_length_data", in.history_text},
  };
  std::string out = render_template(lib.forecaster().body, vars);
  assert_resolved(out, "forecaster");
  return out;
}

std::string truncate_middle(const std::string& text, std::size_t budget) {
  if (budget == 0 || text.size() <= budget) return text;
  std::size_t head = budget / 2;
  std::size_t tail_begin = text.size() - (budget - head);
  while (head > 0 && is_continuation_byte(text[head])) --head;
  while (tail_begin < text.size() && is_continuation_byte(text[tail_begin])) ++tail_begin;
  return text.substr(0, head) + "\n[... " + std::to_string(tail_begin - head) +
         " characters omitted ...]\n" + text.substr(tail_begin);
}

std::string render_refiner_prompt(const TemplateLibrary& lib, const RefinerPromptInputs& in) {
  if (in.samples.empty()) throw DataError("refiner prompt needs at least one sample");

  const auto instructions_text = [](const std::optional<InstructionBlock>& block) {
    return block ? block->text() : std::string(kNoInstructionsText);
  };

  std::string history;
  for (std::size_t i = 0; i < in.history.size(); ++i) {
    if (i > 0) history += '\n';
    history += "--- Attempt " + std::to_string(i + 1) + " (batch MAE " +
               format_number(in.history[i].batch_mae, in.precision) + ") ---\n";
    history += instructions_text(in.history[i].instructions) + '\n';
  }

  std::string samples;
  for (std::size_t j = 0; j < in.samples.size(); ++j) {
    const auto& s = in.samples[j];
    if (j > 0) samples += '\n';
    samples += "=== Sample " + std::to_string(j + 1) + " of " + std::to_string(in.samples.size()) +
               " (forecast origin " + std::to_string(s.origin) + ") ===\n";
    samples += "Prompt:\n" + truncate_middle(s.prompt, in.prompt_char_budget) + '\n';
    samples += "Predictions: [" + format_numbers(s.predictions, in.precision) + "]\n";
    samples += "Ground-Truth: [" + format_numbers(s.truth, in.precision) + "]\n";
    samples += "Sample MAE: " + format_number(s.mae, in.precision) + '\n';
  }

  TemplateVars vars{
      {"iteration", std::to_string(in.iteration + 1)},
      {"current_instructions_under_review", instructions_text(in.current_instructions)},
      {"mae_to_report_to_teacher", format_number(in.batch_mae, in.precision)},
      {"refinement_history", history},
      {"samples", samples},
      {"target_variable", in.target},
      {"tau_stop", format_percent(in.stop_threshold)},
  };
  std::string out = render_template(lib.refiner().body, vars);
  assert_resolved(out, "refiner");
  return out;
}

std::string render_synthesis_prompt(const TemplateLibrary& lib, const std::string& learnings) {
  if (learnings.find_first_not_of(" \t\r\n") == std::string::npos) {
    throw DataError("synthesis prompt needs non-empty learnings");
  }
  std::string out =
      render_template(lib.synthesis().body, {{"current_learnings", defuse_placeholders(learnings)}});
  assert_resolved(out, "synthesis");
  return out;
}

std::optional<InstructionBlock> asp_instructions(const TemplateLibrary& lib, std::string_view name,
                                                 std::size_t horizon) {
  const PromptTemplate& tpl = lib.get_asp(name);
  const std::string body = render_template(tpl.body, {{"sequence_length", std::to_string(horizon)}});
  if (body.find_first_not_of(" \t\r\n") == std::string::npos) return std::nullopt;
  return InstructionBlock::from_text(body, 0);
}

}  // namespace flairr
