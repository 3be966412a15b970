#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace flairr {

enum class TemplateKind { forecaster_base, refiner, synthesis, asp_strategy };

std::string_view to_string(TemplateKind kind);

struct PromptTemplate {
  std::string id;
  TemplateKind kind = TemplateKind::asp_strategy;
  std::string body;

  // Placeholder names referenced by the body, including conditional guards.
  std::set<std::string> placeholders() const;
};

using TemplateVars = std::map<std::string, std::string, std::less<>>;

// Placeholder names a template body may reference.
const std::set<std::string, std::less<>>& known_placeholders();

// Substitutes `{name}` tokens in one pass. A `{?name}...{/name}` block is
// kept only when `name` is bound to a non-empty value. Substituted values are
// inserted verbatim and never rescanned. Throws TemplateError when the body
// references a name that is not bound.
std::string render_template(std::string_view body, const TemplateVars& vars);

// True when `text` contains a brace-wrapped lowercase snake-case token.
bool contains_placeholder(std::string_view text, std::string* found = nullptr);

// Versioned library of prompt templates described by a manifest.json that maps
// each id to a file and kind.
class TemplateLibrary {
 public:
  // The v1 library compiled into the binary.
  static const TemplateLibrary& builtin();
  static TemplateLibrary load(const std::filesystem::path& dir);

  const std::string& version() const noexcept { return version_; }
  const PromptTemplate& get(std::string_view id) const;
  const PromptTemplate& forecaster() const;
  const PromptTemplate& refiner() const;
  const PromptTemplate& synthesis() const;

  // Throws ConfigError listing the available names when `name` is unknown.
  const PromptTemplate& get_asp(std::string_view name) const;
  std::vector<std::string> list_asps() const;

 private:
  template <typename ReadFile>
  static TemplateLibrary from_manifest(std::string_view manifest_text, ReadFile&& read_file);

  std::string version_;
  std::map<std::string, PromptTemplate, std::less<>> templates_;
};

}  // namespace flairr
