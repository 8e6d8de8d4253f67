#pragma once

// Multiparallel concept lexicons: concept -> language -> accepted surface
// forms, plus the exact-match metric and its any-non-source-language variant.

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tlens/errors.hpp"
#include "tlens/languages.hpp"
#include "tlens/unicode.hpp"

namespace tlens {

enum class NormalizeMode {
  standard,  ///< NFC, trim, casefold, strip edge punctuation
  strict,    ///< NFC only
};

/// Canonical form used for all matching.
///
/// Standard mode: NFC, trim whitespace, full case folding, then strip
/// punctuation (category P) and whitespace from both ends, then NFC again
/// so the result is a fixed point. Interior punctuation and spaces are kept.
inline std::string normalize_surface(std::string_view text,
                                     NormalizeMode mode = NormalizeMode::standard) {
  std::string composed = unicode::nfc(text);
  if (mode == NormalizeMode::strict) return composed;

  std::vector<char32_t> cps = unicode::decode(composed);
  auto first = std::find_if_not(cps.begin(), cps.end(), unicode::is_whitespace);
  auto last = std::find_if_not(cps.rbegin(), std::make_reverse_iterator(first),
                               unicode::is_whitespace)
                  .base();
  std::string folded = unicode::casefold(unicode::encode(std::vector<char32_t>(first, last)));

  cps = unicode::decode(folded);
  auto is_edge = [](char32_t c) { return unicode::is_whitespace(c) || unicode::is_punctuation(c); };
  first = std::find_if_not(cps.begin(), cps.end(), is_edge);
  last = std::find_if_not(cps.rbegin(), std::make_reverse_iterator(first), is_edge).base();
  return unicode::nfc(unicode::encode(std::vector<char32_t>(first, last)));
}

/// FLORES+-style language tag: <iso639-3>_<Script>, e.g. "spa_Latn".
class LanguageCode {
 public:
  LanguageCode() = default;

  static bool is_valid(std::string_view code) {
    if (code.size() != 8 || code[3] != '_') return false;
    for (size_t i = 0; i < 3; ++i) {
      if (code[i] < 'a' || code[i] > 'z') return false;
    }
    if (code[4] < 'A' || code[4] > 'Z') return false;
    for (size_t i = 5; i < 8; ++i) {
      if (code[i] < 'a' || code[i] > 'z') return false;
    }
    return unicode::is_known_script_name(code.substr(4));
  }

  static LanguageCode parse(std::string_view code) {
    if (!is_valid(code)) {
      throw ValidationError("invalid language code '" + std::string(code) +
                            "' (expected <iso639-3>_<Script> with a known ISO 15924 script)");
    }
    LanguageCode lc;
    lc.code_ = std::string(code);
    return lc;
  }

  const std::string& str() const { return code_; }
  std::string_view language() const { return std::string_view(code_).substr(0, 3); }
  std::string_view script() const { return std::string_view(code_).substr(4); }
  bool empty() const { return code_.empty(); }

  friend auto operator<=>(const LanguageCode&, const LanguageCode&) = default;

 private:
  std::string code_;
};

enum class PartOfSpeech { noun, verb, adjective, adverb, other };

inline std::string_view to_string(PartOfSpeech pos) {
  switch (pos) {
    case PartOfSpeech::noun: return "noun";
    case PartOfSpeech::verb: return "verb";
    case PartOfSpeech::adjective: return "adjective";
    case PartOfSpeech::adverb: return "adverb";
    case PartOfSpeech::other: return "other";
  }
  return "other";
}

inline std::optional<PartOfSpeech> parse_pos(std::string_view s) {
  if (s == "noun") return PartOfSpeech::noun;
  if (s == "verb") return PartOfSpeech::verb;
  if (s == "adjective") return PartOfSpeech::adjective;
  if (s == "adverb") return PartOfSpeech::adverb;
  if (s == "other") return PartOfSpeech::other;
  return std::nullopt;
}

struct Concept {
  std::string id;
  PartOfSpeech pos = PartOfSpeech::other;
  /// Normalized, de-duplicated forms in file order.
  std::map<LanguageCode, std::vector<std::string>> forms;
  /// Missing coverage for some lexicon language; such pairs are skipped.
  bool partial = false;

  bool covers(const LanguageCode& lang) const {
    auto it = forms.find(lang);
    return it != forms.end() && !it->second.empty();
  }

  const std::vector<std::string>& forms_for(const LanguageCode& lang) const {
    auto it = forms.find(lang);
    if (it == forms.end()) {
      throw LookupError("concept '" + id + "' has no forms for language " + lang.str());
    }
    return it->second;
  }

  friend bool operator==(const Concept&, const Concept&) = default;
};

/// M: binary exact match of a candidate against the reference forms of
/// `lang`. Both sides are compared in normalized form.
inline bool exact_match(std::string_view candidate, const Concept& entry, const LanguageCode& lang,
                        NormalizeMode mode = NormalizeMode::standard) {
  const auto& forms = entry.forms_for(lang);
  std::string norm = normalize_surface(candidate, mode);
  if (norm.empty()) return false;
  return std::find(forms.begin(), forms.end(), norm) != forms.end();
}

/// M': every language other than `source_lang` whose forms contain the
/// candidate. M' = 1 iff the result is non-empty.
inline std::set<LanguageCode> task_match(std::string_view candidate, const Concept& entry,
                                         const LanguageCode& source_lang,
                                         NormalizeMode mode = NormalizeMode::standard) {
  std::set<LanguageCode> out;
  std::string norm = normalize_surface(candidate, mode);
  if (norm.empty()) return out;
  for (const auto& [lang, forms] : entry.forms) {
    if (lang == source_lang) continue;
    if (std::find(forms.begin(), forms.end(), norm) != forms.end()) out.insert(lang);
  }
  return out;
}

class Lexicon {
 public:
  static constexpr std::string_view kFormat = "tlens-lexicon";
  static constexpr std::string_view kSchemaVersion = "1.0";

  Lexicon() = default;

  /// Validates invariants, normalizes forms and builds the reverse index.
  Lexicon(std::string version, std::vector<LanguageCode> languages, std::vector<Concept> concepts,
          std::map<LanguageCode, std::string> names = {},
          NormalizeMode mode = NormalizeMode::standard)
      : version_(std::move(version)),
        languages_(std::move(languages)),
        concepts_(std::move(concepts)),
        names_(std::move(names)),
        mode_(mode) {
    finalize();
  }

  const std::string& version() const { return version_; }
  const std::vector<LanguageCode>& languages() const { return languages_; }
  const std::vector<Concept>& concepts() const { return concepts_; }
  NormalizeMode mode() const { return mode_; }
  const std::vector<std::string>& warnings() const { return warnings_; }
  const std::map<LanguageCode, std::string>& names() const { return names_; }

  bool has_language(const LanguageCode& lang) const { return language_index(lang).has_value(); }

  std::optional<size_t> language_index(const LanguageCode& lang) const {
    auto it = std::find(languages_.begin(), languages_.end(), lang);
    if (it == languages_.end()) return std::nullopt;
    return static_cast<size_t>(it - languages_.begin());
  }

  const Concept* find(std::string_view concept_id) const {
    auto it = by_id_.find(std::string(concept_id));
    return it == by_id_.end() ? nullptr : &concepts_[it->second];
  }

  const Concept& at(std::string_view concept_id) const {
    const Concept* c = find(concept_id);
    if (!c) throw LookupError("unknown concept id '" + std::string(concept_id) + "'");
    return *c;
  }

  /// Display name for prompts: lexicon-provided, then built-in, then the code.
  std::string display_name(const LanguageCode& lang) const {
    if (auto it = names_.find(lang); it != names_.end()) return it->second;
    if (auto n = builtin_language_name(lang.str())) return *n;
    return lang.str();
  }

  /// Concepts usable for a (source, target) pair: both languages covered.
  std::vector<const Concept*> concepts_for_pair(const LanguageCode& source,
                                                const LanguageCode& target) const {
    std::vector<const Concept*> out;
    for (const auto& c : concepts_) {
      if (c.covers(source) && c.covers(target)) out.push_back(&c);
    }
    return out;
  }

  bool exact_match(std::string_view candidate, const Concept& entry,
                   const LanguageCode& lang) const {
    return tlens::exact_match(candidate, entry, lang, mode_);
  }

  /// task_match ordered by this lexicon's language order.
  std::vector<LanguageCode> task_match(std::string_view candidate, const Concept& entry,
                                       const LanguageCode& source_lang) const {
    if (!has_language(source_lang)) {
      throw LookupError("source language " + source_lang.str() + " not in lexicon");
    }
    auto found = tlens::task_match(candidate, entry, source_lang, mode_);
    std::vector<LanguageCode> out;
    for (const auto& lang : languages_) {
      if (found.count(lang)) out.push_back(lang);
    }
    return out;
  }

  /// Reverse index: concept ids listing `form` (normalized here) under `lang`.
  std::vector<std::string> lookup(std::string_view form, const LanguageCode& lang) const {
    std::vector<std::string> out;
    auto it = reverse_.find(normalize_surface(form, mode_));
    if (it == reverse_.end()) return out;
    for (const auto& [concept_idx, lang_code] : it->second) {
      if (lang_code == lang) out.push_back(concepts_[concept_idx].id);
    }
    return out;
  }

  size_t reverse_index_size() const {
    size_t n = 0;
    for (const auto& [_, entries] : reverse_) n += entries.size();
    return n;
  }

  friend bool operator==(const Lexicon& a, const Lexicon& b) {
    return a.version_ == b.version_ && a.languages_ == b.languages_ &&
           a.concepts_ == b.concepts_ && a.names_ == b.names_ && a.mode_ == b.mode_;
  }

 private:
  void finalize() {
    std::set<LanguageCode> seen_langs;
    for (const auto& l : languages_) {
      if (!seen_langs.insert(l).second) {
        throw ValidationError("duplicate language code " + l.str() + " in lexicon header");
      }
    }
    for (size_t ci = 0; ci < concepts_.size(); ++ci) {
      Concept& c = concepts_[ci];
      if (c.id.empty()) {
        throw ValidationError("concepts[" + std::to_string(ci) + "].id: empty concept id");
      }
      if (!by_id_.emplace(c.id, ci).second) {
        throw ValidationError("concepts[" + std::to_string(ci) + "].id: duplicate concept id '" +
                              c.id + "'");
      }
      for (auto& [lang, forms] : c.forms) {
        if (!seen_langs.count(lang)) {
          throw ValidationError("concept '" + c.id + "': language " + lang.str() +
                                " not declared in lexicon header");
        }
        std::vector<std::string> normalized;
        for (const auto& f : forms) {
          std::string n = normalize_surface(f, mode_);
          if (n.empty()) {
            throw ValidationError("concept '" + c.id + "'.forms." + lang.str() +
                                  ": empty form after normalization ('" + f + "')");
          }
          if (std::find(normalized.begin(), normalized.end(), n) == normalized.end()) {
            normalized.push_back(std::move(n));
          }
        }
        if (normalized.empty()) {
          throw ValidationError("concept '" + c.id + "'.forms." + lang.str() + ": empty form set");
        }
        forms = std::move(normalized);
      }
      std::vector<std::string> missing;
      for (const auto& l : languages_) {
        if (!c.covers(l)) missing.push_back(l.str());
      }
      if (!missing.empty()) {
        std::string list;
        for (const auto& m : missing) list += (list.empty() ? "" : ",") + m;
        if (!c.partial) {
          throw ValidationError("concept '" + c.id + "' lacks forms for " + list +
                                " and is not flagged partial");
        }
        warnings_.push_back("concept '" + c.id + "' is partial (missing " + list +
                            "); excluded from pairs involving those languages");
      }
      for (const auto& [lang, forms] : c.forms) {
        for (const auto& f : forms) reverse_[f].emplace_back(ci, lang);
      }
    }
    for (const auto& [lang, _] : names_) {
      if (!seen_langs.count(lang)) {
        throw ValidationError("language_names." + lang.str() + ": language not in header");
      }
    }
  }

  std::string version_{kSchemaVersion};
  std::vector<LanguageCode> languages_;
  std::vector<Concept> concepts_;
  std::map<LanguageCode, std::string> names_;
  NormalizeMode mode_ = NormalizeMode::standard;
  std::vector<std::string> warnings_;
  std::unordered_map<std::string, size_t> by_id_;
  std::unordered_map<std::string, std::vector<std::pair<size_t, LanguageCode>>> reverse_;
};

namespace detail {

inline size_t line_of_offset(std::string_view text, size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + static_cast<size_t>(std::count(text.begin(), text.begin() + static_cast<long>(offset), '\n'));
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw IoError("write failed for " + path.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw IoError("cannot move " + tmp.string() + " into place: " + ec.message());
  }
}

}  // namespace detail

/// Parse a lexicon document. Syntax errors name the line; schema errors
/// name the offending field path.
inline Lexicon parse_lexicon(std::string_view text, NormalizeMode mode = NormalizeMode::standard) {
  using nlohmann::json;
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError("lexicon: syntax error at line " +
                     std::to_string(detail::line_of_offset(text, e.byte)) + ": " + e.what());
  }
  auto field_error = [](const std::string& field, const std::string& msg) {
    return ParseError("lexicon: field '" + field + "': " + msg);
  };
  if (!doc.is_object()) throw field_error("<root>", "expected an object");
  if (!doc.contains("format") || doc["format"] != std::string(Lexicon::kFormat)) {
    throw field_error("format", "expected \"" + std::string(Lexicon::kFormat) + "\"");
  }
  if (!doc.contains("schema_version") || !doc["schema_version"].is_string()) {
    throw field_error("schema_version", "missing or not a string");
  }
  std::string version = doc["schema_version"];
  if (version.substr(0, version.find('.')) != "1") {
    throw field_error("schema_version", "unsupported version " + version);
  }
  if (!doc.contains("languages") || !doc["languages"].is_array()) {
    throw field_error("languages", "missing or not an array");
  }
  std::vector<LanguageCode> languages;
  for (size_t i = 0; i < doc["languages"].size(); ++i) {
    const auto& l = doc["languages"][i];
    if (!l.is_string()) throw field_error("languages[" + std::to_string(i) + "]", "not a string");
    try {
      languages.push_back(LanguageCode::parse(l.get<std::string>()));
    } catch (const ValidationError& e) {
      throw field_error("languages[" + std::to_string(i) + "]", e.what());
    }
  }
  std::map<LanguageCode, std::string> names;
  if (doc.contains("language_names")) {
    if (!doc["language_names"].is_object()) throw field_error("language_names", "not an object");
    for (const auto& [k, v] : doc["language_names"].items()) {
      if (!v.is_string()) throw field_error("language_names." + k, "not a string");
      names[LanguageCode::parse(k)] = v.get<std::string>();
    }
  }
  if (!doc.contains("concepts") || !doc["concepts"].is_array()) {
    throw field_error("concepts", "missing or not an array");
  }
  std::vector<Concept> concepts;
  for (size_t i = 0; i < doc["concepts"].size(); ++i) {
    const auto& rec = doc["concepts"][i];
    const std::string where = "concepts[" + std::to_string(i) + "]";
    if (!rec.is_object()) throw field_error(where, "not an object");
    Concept c;
    if (!rec.contains("id") || !rec["id"].is_string()) throw field_error(where + ".id", "missing or not a string");
    c.id = rec["id"];
    if (!rec.contains("pos") || !rec["pos"].is_string()) throw field_error(where + ".pos", "missing or not a string");
    auto pos = parse_pos(rec["pos"].get<std::string>());
    if (!pos) throw field_error(where + ".pos", "unknown part of speech '" + rec["pos"].get<std::string>() + "'");
    c.pos = *pos;
    if (rec.contains("partial")) {
      if (!rec["partial"].is_boolean()) throw field_error(where + ".partial", "not a boolean");
      c.partial = rec["partial"];
    }
    if (!rec.contains("forms") || !rec["forms"].is_object()) throw field_error(where + ".forms", "missing or not an object");
    for (const auto& [lang, list] : rec["forms"].items()) {
      const std::string fw = where + ".forms." + lang;
      if (!LanguageCode::is_valid(lang)) throw field_error(fw, "invalid language code");
      if (!list.is_array()) throw field_error(fw, "not an array");
      std::vector<std::string> forms;
      for (const auto& f : list) {
        if (!f.is_string()) throw field_error(fw, "form is not a string");
        forms.push_back(f.get<std::string>());
      }
      c.forms[LanguageCode::parse(lang)] = std::move(forms);
    }
    concepts.push_back(std::move(c));
  }
  return Lexicon(std::move(version), std::move(languages), std::move(concepts), std::move(names), mode);
}

inline Lexicon load_lexicon(const std::filesystem::path& path,
                            NormalizeMode mode = NormalizeMode::standard) {
  if (!std::filesystem::exists(path)) throw IoError("lexicon file not found: " + path.string());
  return parse_lexicon(detail::read_file(path), mode);
}

/// Canonical serialization; forms come out in normalized form.
inline std::string serialize_lexicon(const Lexicon& lex) {
  using nlohmann::ordered_json;
  ordered_json doc;
  doc["format"] = Lexicon::kFormat;
  doc["schema_version"] = lex.version();
  doc["languages"] = ordered_json::array();
  for (const auto& l : lex.languages()) doc["languages"].push_back(l.str());
  if (!lex.names().empty()) {
    ordered_json names = ordered_json::object();
    for (const auto& l : lex.languages()) {
      if (auto it = lex.names().find(l); it != lex.names().end()) names[l.str()] = it->second;
    }
    doc["language_names"] = names;
  }
  doc["concepts"] = ordered_json::array();
  for (const auto& c : lex.concepts()) {
    ordered_json rec;
    rec["id"] = c.id;
    rec["pos"] = to_string(c.pos);
    if (c.partial) rec["partial"] = true;
    ordered_json forms = ordered_json::object();
    for (const auto& l : lex.languages()) {
      if (auto it = c.forms.find(l); it != c.forms.end()) forms[l.str()] = it->second;
    }
    rec["forms"] = forms;
    doc["concepts"].push_back(rec);
  }
  return doc.dump(2) + "\n";
}

inline void save_lexicon(const Lexicon& lex, const std::filesystem::path& path) {
  detail::write_file_atomic(path, serialize_lexicon(lex));
}

/// Tab-separated variant: header "id<TAB>pos<TAB><lang>...", one row per
/// concept, forms within a cell separated by '|'. Empty cells mark the
/// concept partial.
inline Lexicon parse_lexicon_tsv(std::string_view text, NormalizeMode mode = NormalizeMode::standard) {
  auto split = [](std::string_view s, char sep) {
    std::vector<std::string> out;
    size_t start = 0;
    while (true) {
      size_t pos = s.find(sep, start);
      out.emplace_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
      if (pos == std::string_view::npos) break;
      start = pos + 1;
    }
    return out;
  };
  std::vector<std::string> lines;
  for (auto& line : split(text, '\n')) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  if (lines.empty()) throw ParseError("lexicon tsv: empty input");
  auto header = split(lines[0], '\t');
  if (header.size() < 3 || header[0] != "id" || header[1] != "pos") {
    throw ParseError("lexicon tsv: line 1: header must be id<TAB>pos<TAB><language>...");
  }
  std::vector<LanguageCode> languages;
  for (size_t i = 2; i < header.size(); ++i) {
    try {
      languages.push_back(LanguageCode::parse(header[i]));
    } catch (const ValidationError& e) {
      throw ParseError("lexicon tsv: line 1, column " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  std::vector<Concept> concepts;
  for (size_t li = 1; li < lines.size(); ++li) {
    if (lines[li].empty()) continue;
    auto cells = split(lines[li], '\t');
    const std::string where = "lexicon tsv: line " + std::to_string(li + 1);
    if (cells.size() != header.size()) {
      throw ParseError(where + ": expected " + std::to_string(header.size()) + " columns, got " +
                       std::to_string(cells.size()));
    }
    Concept c;
    c.id = cells[0];
    auto pos = parse_pos(cells[1]);
    if (!pos) throw ParseError(where + ", field pos: unknown part of speech '" + cells[1] + "'");
    c.pos = *pos;
    for (size_t k = 0; k < languages.size(); ++k) {
      const std::string& cell = cells[k + 2];
      std::vector<std::string> forms;
      for (auto& f : split(cell, '|')) {
        if (!normalize_surface(f, mode).empty()) forms.push_back(f);
      }
      if (forms.empty()) {
        c.partial = true;
        continue;
      }
      c.forms[languages[k]] = std::move(forms);
    }
    concepts.push_back(std::move(c));
  }
  return Lexicon(std::string(Lexicon::kSchemaVersion), std::move(languages), std::move(concepts), {}, mode);
}

inline Lexicon load_lexicon_tsv(const std::filesystem::path& path,
                                NormalizeMode mode = NormalizeMode::standard) {
  return parse_lexicon_tsv(detail::read_file(path), mode);
}

}  // namespace tlens
