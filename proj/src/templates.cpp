#include "flairr/templates.hpp"

#include <fstream>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "flairr/errors.hpp"

namespace flairr {

namespace {

bool is_name_start(char c) { return (c >= 'a' && c <= 'z') || c == '_'; }
bool is_name_char(char c) { return is_name_start(c) || (c >= '0' && c <= '9'); }

enum class TokenType { plain, open, close };

struct Token {
  TokenType type;
  std::string_view name;
  std::size_t begin;  // position of '{'
  std::size_t end;    // one past '}'
};

// Parses a placeholder token starting at body[pos] == '{'.
std::optional<Token> token_at(std::string_view body, std::size_t pos) {
  std::size_t i = pos + 1;
  TokenType type = TokenType::plain;
  if (i < body.size() && (body[i] == '?' || body[i] == '/')) {
    type = body[i] == '?' ? TokenType::open : TokenType::close;
    ++i;
  }
  if (i >= body.size() || !is_name_start(body[i])) return std::nullopt;
  const std::size_t name_begin = i;
  while (i < body.size() && is_name_char(body[i])) ++i;
  if (i >= body.size() || body[i] != '}') return std::nullopt;
  return Token{type, body.substr(name_begin, i - name_begin), pos, i + 1};
}

// Position of the `{/name}` that closes the block opened just before `from`.
std::size_t find_close(std::string_view body, std::string_view name, std::size_t from) {
  int depth = 1;
  for (std::size_t pos = body.find('{', from); pos != std::string_view::npos;
       pos = body.find('{', pos + 1)) {
    const auto tok = token_at(body, pos);
    if (!tok || tok->name != name) continue;
    if (tok->type == TokenType::open) ++depth;
    if (tok->type == TokenType::close && --depth == 0) return pos;
  }
  throw TemplateError("conditional block {?" + std::string(name) + "} is never closed");
}

void render_into(std::string_view body, const TemplateVars& vars, std::string& out) {
  std::size_t pos = 0;
  while (pos < body.size()) {
    const std::size_t brace = body.find('{', pos);
    if (brace == std::string_view::npos) {
      out.append(body.substr(pos));
      return;
    }
    out.append(body.substr(pos, brace - pos));
    const auto tok = token_at(body, brace);
    if (!tok) {
      out.push_back('{');
      pos = brace + 1;
      continue;
    }
    switch (tok->type) {
      case TokenType::plain: {
        const auto it = vars.find(tok->name);
        if (it == vars.end()) {
          throw TemplateError("unresolved placeholder {" + std::string(tok->name) + "}");
        }
        out.append(it->second);
        pos = tok->end;
        break;
      }
      case TokenType::open: {
        const std::size_t close = find_close(body, tok->name, tok->end);
        const auto it = vars.find(tok->name);
        if (it != vars.end() && !it->second.empty()) {
          render_into(body.substr(tok->end, close - tok->end), vars, out);
        }
        pos = close + tok->name.size() + 3;  // skip "{/name}"
        break;
      }
      case TokenType::close:
        throw TemplateError("stray {/" + std::string(tok->name) + "} without a matching {?" +
                            std::string(tok->name) + "}");
    }
  }
}

TemplateKind parse_kind(const std::string& text) {
  if (text == "forecaster-base") return TemplateKind::forecaster_base;
  if (text == "refiner") return TemplateKind::refiner;
  if (text == "synthesis") return TemplateKind::synthesis;
  if (text == "asp-strategy") return TemplateKind::asp_strategy;
  throw TemplateError("unknown template kind '" + text + "'");
}

const std::unordered_map<std::string, std::string_view>& embedded_files() {
  static const std::unordered_map<std::string, std::string_view> files{
#include "flairr/builtin_templates.inc"
  };
  return files;
}

}  // namespace

std::string_view to_string(TemplateKind kind) {
  switch (kind) {
    case TemplateKind::forecaster_base: return "forecaster-base";
    case TemplateKind::refiner: return "refiner";
    case TemplateKind::synthesis: return "synthesis";
    case TemplateKind::asp_strategy: return "asp-strategy";
  }
  return "unknown";
}

std::set<std::string> PromptTemplate::placeholders() const {
  std::set<std::string> names;
  for (std::size_t pos = body.find('{'); pos != std::string::npos; pos = body.find('{', pos + 1)) {
    if (const auto tok = token_at(body, pos)) names.emplace(tok->name);
  }
  return names;
}

const std::set<std::string, std::less<>>& known_placeholders() {
  static const std::set<std::string, std::less<>> names{
      // forecaster
      "target_variable", "data_name", "data_description", "prediction_length", "instructions",
      "raft_context", "segment_count", "previous_sequence_length_data",
      // refiner
      "iteration", "current_instructions_under_review", "mae_to_report_to_teacher",
      "refinement_history", "samples", "tau_stop",
      // synthesis
      "current_learnings",
      // strategies
      "sequence_length"};
  return names;
}

std::string render_template(std::string_view body, const TemplateVars& vars) {
  std::string out;
  out.reserve(body.size() + 256);
  render_into(body, vars, out);
  return out;
}

bool contains_placeholder(std::string_view text, std::string* found) {
  for (std::size_t pos = text.find('{'); pos != std::string_view::npos; pos = text.find('{', pos + 1)) {
    const auto tok = token_at(text, pos);
    if (tok && tok->type == TokenType::plain) {
      if (found) *found = std::string(text.substr(tok->begin, tok->end - tok->begin));
      return true;
    }
  }
  return false;
}

template <typename ReadFile>
TemplateLibrary TemplateLibrary::from_manifest(std::string_view manifest_text, ReadFile&& read_file) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(manifest_text);
  } catch (const nlohmann::json::exception& e) {
    throw TemplateError(std::string("bad template manifest: ") + e.what());
  }
  TemplateLibrary lib;
  lib.version_ = doc.value("version", "unversioned");
  if (!doc.contains("templates") || !doc["templates"].is_array()) {
    throw TemplateError("template manifest has no 'templates' array");
  }
  for (const auto& entry : doc["templates"]) {
    PromptTemplate tpl;
    tpl.id = entry.at("id").get<std::string>();
    tpl.kind = parse_kind(entry.at("kind").get<std::string>());
    tpl.body = read_file(entry.at("file").get<std::string>());
    for (const auto& name : tpl.placeholders()) {
      if (!known_placeholders().contains(name)) {
        throw TemplateError("template '" + tpl.id + "' uses undocumented placeholder {" + name + "}");
      }
    }
    if (!lib.templates_.emplace(tpl.id, std::move(tpl)).second) {
      throw TemplateError("duplicate template id '" + entry.at("id").get<std::string>() + "'");
    }
  }
  const std::pair<const char*, TemplateKind> required[] = {
      {"forecaster-base", TemplateKind::forecaster_base},
      {"refiner", TemplateKind::refiner},
      {"synthesis", TemplateKind::synthesis}};
  for (const auto& [id, kind] : required) {
    const auto it = lib.templates_.find(std::string_view(id));
    if (it == lib.templates_.end() || it->second.kind != kind) {
      throw TemplateError(std::string("template library lacks '") + id + "' of kind " +
                          std::string(to_string(kind)));
    }
  }
  return lib;
}

const TemplateLibrary& TemplateLibrary::builtin() {
  static const TemplateLibrary lib = [] {
    const auto& files = embedded_files();
    const auto read = [&](const std::string& rel) -> std::string {
      const auto it = files.find(rel);
      if (it == files.end()) throw TemplateError("built-in template file '" + rel + "' missing");
      return std::string(it->second);
    };
    return from_manifest(read("manifest.json"), read);
  }();
  return lib;
}

TemplateLibrary TemplateLibrary::load(const std::filesystem::path& dir) {
  const auto read = [&](const std::string& rel) -> std::string {
    std::ifstream in(dir / rel, std::ios::binary);
    if (!in) throw TemplateError("cannot read template file '" + (dir / rel).string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  return from_manifest(read("manifest.json"), read);
}

const PromptTemplate& TemplateLibrary::get(std::string_view id) const {
  const auto it = templates_.find(id);
  if (it == templates_.end()) throw TemplateError("unknown template '" + std::string(id) + "'");
  return it->second;
}

const PromptTemplate& TemplateLibrary::forecaster() const { return get("forecaster-base"); }
const PromptTemplate& TemplateLibrary::refiner() const { return get("refiner"); }
const PromptTemplate& TemplateLibrary::synthesis() const { return get("synthesis"); }

const PromptTemplate& TemplateLibrary::get_asp(std::string_view name) const {
  const auto it = templates_.find(name);
  if (it == templates_.end() || it->second.kind != TemplateKind::asp_strategy) {
    std::string names;
    for (const auto& n : list_asps()) names += (names.empty() ? "" : ", ") + n;
    throw ConfigError("unknown strategy '" + std::string(name) + "'; available: " + names);
  }
  return it->second;
}

std::vector<std::string> TemplateLibrary::list_asps() const {
  std::vector<std::string> names;
  for (const auto& [id, tpl] : templates_) {
    if (tpl.kind == TemplateKind::asp_strategy) names.push_back(id);
  }
  return names;
}

}  // namespace flairr
