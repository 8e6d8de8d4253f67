#pragma once

// Short-text language identification: Cavnar–Trenkle rank-order profiles
// over character 1..4-grams, preceded by a Unicode script filter, with a
// gate that keeps only tags inside a configured candidate set.

#include <algorithm>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tlens/errors.hpp"
#include "tlens/lexicon.hpp"
#include "tlens/unicode.hpp"

namespace tlens {

inline constexpr size_t kDefaultProfileSize = 400;
inline constexpr int kMaxNgram = 4;
/// A script counts toward a profile when it makes up at least this share of
/// the training characters (keeps stray loanwords from widening the filter).
inline constexpr double kScriptShareFloor = 0.05;

namespace lid_detail {

/// Ranked n-grams of normalized text, most frequent first; ties broken by
/// byte order so profiles are deterministic.
inline std::vector<std::string> ranked_ngrams(const std::vector<std::string>& texts, size_t limit) {
  std::unordered_map<std::string, size_t> counts;
  for (const auto& raw : texts) {
    const auto cps = unicode::decode(normalize_surface(raw));
    std::vector<std::vector<char32_t>> words(1);
    for (char32_t c : cps) {
      if (unicode::is_whitespace(c) || unicode::is_punctuation(c) || (c >= '0' && c <= '9')) {
        if (!words.back().empty()) words.emplace_back();
      } else {
        words.back().push_back(c);
      }
    }
    for (const auto& w : words) {
      if (w.empty()) continue;
      std::vector<char32_t> padded;
      padded.push_back(U'_');
      padded.insert(padded.end(), w.begin(), w.end());
      padded.push_back(U'_');
      for (int n = 1; n <= kMaxNgram; ++n) {
        for (size_t i = 0; i + static_cast<size_t>(n) <= padded.size(); ++i) {
          std::vector<char32_t> gram(padded.begin() + static_cast<long>(i), padded.begin() + static_cast<long>(i) + n);
          if (std::all_of(gram.begin(), gram.end(), [](char32_t c) { return c == U'_'; })) continue;
          ++counts[unicode::encode(gram)];
        }
      }
    }
  }
  std::vector<std::pair<std::string, size_t>> items(counts.begin(), counts.end());
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  if (items.size() > limit) items.resize(limit);
  std::vector<std::string> out;
  out.reserve(items.size());
  for (auto& [g, _] : items) out.push_back(std::move(g));
  return out;
}

/// Specific-script character counts by ISO 15924 short name.
inline std::map<std::string, size_t> script_counts(std::string_view text) {
  std::map<std::string, size_t> out;
  for (char32_t c : unicode::decode(text)) {
    auto code = unicode::script_of(c);
    if (unicode::is_specific_script(code)) ++out[unicode::script_name(code)];
  }
  return out;
}

}  // namespace lid_detail

class LanguageProfile {
 public:
  LanguageProfile() = default;
  LanguageProfile(LanguageCode lang, std::vector<std::string> ngrams, std::map<std::string, size_t> script_counts)
      : lang_(std::move(lang)), ngrams_(std::move(ngrams)), script_counts_(std::move(script_counts)) {
    if (ngrams_.empty()) throw ValidationError("language profile " + lang_.str() + ": empty rank table");
    for (size_t i = 0; i < ngrams_.size(); ++i) rank_.emplace(ngrams_[i], i);
    size_t total = 0;
    for (const auto& [_, n] : script_counts_) total += n;
    for (const auto& [s, n] : script_counts_) {
      if (total > 0 && static_cast<double>(n) / static_cast<double>(total) >= kScriptShareFloor) scripts_.insert(s);
    }
  }

  const LanguageCode& lang() const { return lang_; }
  const std::vector<std::string>& ngrams() const { return ngrams_; }
  const std::map<std::string, size_t>& script_counts() const { return script_counts_; }
  /// Scripts this language is written in (share >= kScriptShareFloor).
  const std::set<std::string>& scripts() const { return scripts_; }

  std::optional<size_t> rank(const std::string& gram) const {
    auto it = rank_.find(gram);
    if (it == rank_.end()) return std::nullopt;
    return it->second;
  }

  friend bool operator==(const LanguageProfile& a, const LanguageProfile& b) {
    return a.lang_ == b.lang_ && a.ngrams_ == b.ngrams_ && a.script_counts_ == b.script_counts_;
  }

 private:
  LanguageCode lang_;
  std::vector<std::string> ngrams_;
  std::map<std::string, size_t> script_counts_;
  std::unordered_map<std::string, size_t> rank_;
  std::set<std::string> scripts_;
};

class ProfileSet {
 public:
  static constexpr std::string_view kFormat = "tlens-lid-profiles";
  static constexpr std::string_view kSchemaVersion = "1.0";

  ProfileSet() = default;
  /// `profiles` keep their given order, which is the tie-break order.
  /// An empty candidate set means "every profiled language".
  ProfileSet(std::vector<LanguageProfile> profiles, std::set<LanguageCode> candidate_set, size_t top_k)
      : profiles_(std::move(profiles)), candidates_(std::move(candidate_set)), top_k_(top_k) {
    std::set<LanguageCode> seen;
    for (const auto& p : profiles_) {
      if (!seen.insert(p.lang()).second) throw ValidationError("duplicate profile for " + p.lang().str());
    }
    if (candidates_.empty()) candidates_ = seen;
    for (const auto& c : candidates_) {
      if (!seen.count(c)) throw ValidationError("candidate language " + c.str() + " has no profile");
    }
  }

  const std::vector<LanguageProfile>& profiles() const { return profiles_; }
  const std::set<LanguageCode>& candidate_set() const { return candidates_; }
  size_t top_k() const { return top_k_; }

  const LanguageProfile* find(const LanguageCode& lang) const {
    for (const auto& p : profiles_) {
      if (p.lang() == lang) return &p;
    }
    return nullptr;
  }

  ProfileSet with_candidates(std::set<LanguageCode> candidates) const {
    return ProfileSet(profiles_, std::move(candidates), top_k_);
  }

  friend bool operator==(const ProfileSet& a, const ProfileSet& b) {
    return a.profiles_ == b.profiles_ && a.candidates_ == b.candidates_ && a.top_k_ == b.top_k_;
  }

 private:
  std::vector<LanguageProfile> profiles_;
  std::set<LanguageCode> candidates_;
  size_t top_k_ = kDefaultProfileSize;
};

using LidCorpus = std::vector<std::pair<LanguageCode, std::vector<std::string>>>;

inline ProfileSet train_profiles(const LidCorpus& corpus, std::set<LanguageCode> candidate_set = {},
                                 size_t top_k = kDefaultProfileSize) {
  if (corpus.empty()) throw ValidationError("train_profiles: empty corpus");
  if (top_k == 0) throw ArgumentError("train_profiles: profile size must be positive");
  std::vector<LanguageProfile> profiles;
  for (const auto& [lang, texts] : corpus) {
    if (texts.empty()) throw ValidationError("train_profiles: no training text for " + lang.str());
    auto grams = lid_detail::ranked_ngrams(texts, top_k);
    if (grams.empty()) throw ValidationError("train_profiles: training text for " + lang.str() + " has no letters");
    std::map<std::string, size_t> scripts;
    for (const auto& t : texts) {
      for (const auto& [s, n] : lid_detail::script_counts(t)) scripts[s] += n;
    }
    profiles.emplace_back(lang, std::move(grams), std::move(scripts));
  }
  return ProfileSet(std::move(profiles), std::move(candidate_set), top_k);
}

/// Every lexicon form as training text, in lexicon language order.
inline LidCorpus lexicon_corpus(const Lexicon& lex) {
  LidCorpus out;
  for (const auto& lang : lex.languages()) {
    std::vector<std::string> texts;
    for (const auto& c : lex.concepts()) {
      if (!c.covers(lang)) continue;
      for (const auto& f : c.forms_for(lang)) texts.push_back(f);
    }
    out.emplace_back(lang, std::move(texts));
  }
  return out;
}

struct LidResult {
  LanguageCode lang;
  double distance = 0.0;                ///< normalized out-of-place distance in [0, 1]
  std::optional<double> runner_up;      ///< second-best distance, if any
  bool covers_scripts = true;           ///< best profile covers every script of the text

  /// Relative gap to the runner-up; 1 when no other language competed.
  double margin() const {
    if (!runner_up || *runner_up <= 0.0) return runner_up ? 0.0 : 1.0;
    return (*runner_up - distance) / *runner_up;
  }
};

/// Closed-set identification over all profiles. Throws NoSignalError for
/// text without script-bearing characters or when no profile shares a
/// script with the text.
inline LidResult identify(std::string_view text, const ProfileSet& profiles) {
  const std::string norm = normalize_surface(text);
  const auto text_scripts = lid_detail::script_counts(norm);
  if (norm.empty() || text_scripts.empty()) throw NoSignalError("no language signal in text");
  const auto grams = lid_detail::ranked_ngrams({norm}, profiles.top_k());
  if (grams.empty()) throw NoSignalError("no language signal in text");

  const double k = static_cast<double>(profiles.top_k());
  std::optional<LidResult> best;
  for (const auto& p : profiles.profiles()) {
    bool overlaps = false;
    bool covers = true;
    for (const auto& [s, _] : text_scripts) {
      if (p.scripts().count(s)) {
        overlaps = true;
      } else {
        covers = false;
      }
    }
    if (!overlaps) continue;
    double total = 0.0;
    for (size_t i = 0; i < grams.size(); ++i) {
      auto r = p.rank(grams[i]);
      total += r ? std::min(k, std::abs(static_cast<double>(*r) - static_cast<double>(i))) : k;
    }
    const double d = total / (static_cast<double>(grams.size()) * k);
    if (!best) {
      best = LidResult{p.lang(), d, std::nullopt, covers};
    } else if (d < best->distance) {
      best = LidResult{p.lang(), d, best->distance, covers};
    } else if (!best->runner_up || d < *best->runner_up) {
      best->runner_up = d;
    }
  }
  if (!best) throw NoSignalError("no profile shares a script with the text");
  return *best;
}

struct LidOptions {
  /// Abstain when (d2 - d1) / d2 falls below this.
  double min_margin = 0.05;
};

/// Gated tag: a caller-supplied lexicon tag short-circuits the classifier;
/// otherwise identify() is used and the result is kept only when it is
/// confident, script-consistent and inside `candidate_set`.
inline std::optional<LanguageCode> gated_identify(std::string_view text, const ProfileSet& profiles,
                                                  const std::set<LanguageCode>& candidate_set,
                                                  const std::optional<LanguageCode>& lexicon_tag = std::nullopt,
                                                  const LidOptions& options = {}) {
  if (lexicon_tag) {
    if (candidate_set.count(*lexicon_tag)) return lexicon_tag;
    return std::nullopt;
  }
  try {
    auto r = identify(text, profiles);
    if (!r.covers_scripts || r.margin() < options.min_margin) return std::nullopt;
    if (!candidate_set.count(r.lang)) return std::nullopt;
    return r.lang;
  } catch (const NoSignalError&) {
    return std::nullopt;
  }
}

inline std::optional<LanguageCode> gated_identify(std::string_view text, const ProfileSet& profiles,
                                                  const LidOptions& options = {}) {
  return gated_identify(text, profiles, profiles.candidate_set(), std::nullopt, options);
}

struct LidEvaluation {
  struct PerLanguage {
    size_t total = 0;
    size_t correct = 0;
    size_t abstained = 0;
  };
  std::map<LanguageCode, PerLanguage> per_language;
  size_t total = 0;
  size_t correct = 0;
  size_t abstained = 0;

  /// Accuracy over the strings that received a tag.
  double precision() const {
    const size_t tagged = total - abstained;
    return tagged == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(tagged);
  }
  double accuracy() const { return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total); }
};

inline LidEvaluation evaluate_profiles(const ProfileSet& profiles, const LidCorpus& held_out,
                                       const LidOptions& options = {}) {
  LidEvaluation ev;
  for (const auto& [lang, texts] : held_out) {
    auto& pl = ev.per_language[lang];
    for (const auto& t : texts) {
      auto tag = gated_identify(t, profiles, options);
      ++pl.total;
      ++ev.total;
      if (!tag) {
        ++pl.abstained;
        ++ev.abstained;
      } else if (*tag == lang) {
        ++pl.correct;
        ++ev.correct;
      }
    }
  }
  return ev;
}

inline std::string serialize_profiles(const ProfileSet& set) {
  nlohmann::ordered_json j;
  j["format"] = ProfileSet::kFormat;
  j["schema_version"] = ProfileSet::kSchemaVersion;
  j["top_k"] = set.top_k();
  j["candidate_set"] = nlohmann::ordered_json::array();
  for (const auto& c : set.candidate_set()) j["candidate_set"].push_back(c.str());
  j["profiles"] = nlohmann::ordered_json::array();
  for (const auto& p : set.profiles()) {
    nlohmann::ordered_json jp;
    jp["lang"] = p.lang().str();
    jp["scripts"] = nlohmann::ordered_json::object();
    for (const auto& [s, n] : p.script_counts()) jp["scripts"][s] = n;
    jp["ngrams"] = p.ngrams();
    j["profiles"].push_back(std::move(jp));
  }
  return j.dump(1) + "\n";
}

inline ProfileSet parse_profiles(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("profile store: line " + std::to_string(detail::line_of_offset(text, e.byte)) +
                     ": malformed JSON");
  }
  auto field = [](const std::string& f, const std::string& msg) {
    return ParseError("profile store: field '" + f + "': " + msg);
  };
  if (!j.is_object() || j.value("format", std::string()) != ProfileSet::kFormat) {
    throw field("format", "expected \"tlens-lid-profiles\"");
  }
  const std::string version = j.value("schema_version", std::string());
  if (version.substr(0, version.find('.')) != "1") throw field("schema_version", "unsupported '" + version + "'");
  try {
    std::vector<LanguageProfile> profiles;
    for (size_t i = 0; i < j.at("profiles").size(); ++i) {
      const auto& jp = j["profiles"][i];
      const std::string code = jp.at("lang").get<std::string>();
      if (!LanguageCode::is_valid(code)) throw field("profiles[" + std::to_string(i) + "].lang", "invalid code");
      profiles.emplace_back(LanguageCode::parse(code), jp.at("ngrams").get<std::vector<std::string>>(),
                            jp.at("scripts").get<std::map<std::string, size_t>>());
    }
    std::set<LanguageCode> candidates;
    for (const auto& c : j.at("candidate_set")) {
      const auto code = c.get<std::string>();
      if (!LanguageCode::is_valid(code)) throw field("candidate_set", "invalid code '" + code + "'");
      candidates.insert(LanguageCode::parse(code));
    }
    return ProfileSet(std::move(profiles), std::move(candidates), j.at("top_k").get<size_t>());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("profile store: ") + e.what());
  }
}

inline void save_profiles(const ProfileSet& set, const std::filesystem::path& path) {
  detail::write_file_atomic(path, serialize_profiles(set));
}

inline ProfileSet load_profiles(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("profile store not found: " + path.string());
  return parse_profiles(detail::read_file(path));
}

}  // namespace tlens
