#pragma once

// End-to-end orchestration: prompt construction, trace generation on the
// reference model, and the analysis pass from traces to a report.
// Work is spread over a worker pool; every result lands in an
// index-addressed slot, so output is identical for any worker count.

#include <algorithm>
#include <array>
#include <atomic>
#include <cctype>
#include <cstdio>
#include <exception>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "tlens/errors.hpp"
#include "tlens/langid.hpp"
#include "tlens/lexicon.hpp"
#include "tlens/logitlens.hpp"
#include "tlens/metrics.hpp"
#include "tlens/model.hpp"
#include "tlens/report.hpp"
#include "tlens/trace_io.hpp"
#include "tlens/trainer.hpp"

namespace tlens {

// ---- worker pool ----

/// Runs fn(i) for i in [0, n) on `workers` threads. The exception from the
/// lowest failing index is rethrown.
template <typename Fn>
void parallel_for(size_t n, size_t workers, Fn&& fn) {
  workers = std::max<size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::mutex mu;
  std::optional<size_t> failed_at;
  std::exception_ptr failure;
  auto body = [&] {
    while (true) {
      const size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failed_at || i < *failed_at) {
          failed_at = i;
          failure = std::current_exception();
        }
      }
    }
  };
  std::vector<std::thread> pool;
  for (size_t w = 0; w < workers; ++w) pool.emplace_back(body);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

// ---- prompts ----

struct PromptTemplate {
  std::string_view id;
  std::string_view text;  ///< {Source}, {Target}, {source}, {target}, {w}
};

/// The instruction is always English, whatever the source language.
inline constexpr std::array<PromptTemplate, 4> kPromptTemplates{{
    {"word-translate",
     "Translate the following word from {Source} to {Target}. Respond with a single word.\nWord: {w}\nTranslation: "},
    {"word-translate-codes",
     "Translate the following word from {source} to {target}. Respond with a single word.\nWord: {w}\nTranslation: "},
    {"one-word",
     "Give a one-word translation of the following word from {Source} to {Target}.\nWord: {w}\nTranslation: "},
    {"into", "Translate the following word into {Target}:\n{w}\n"},
}};

inline const PromptTemplate& prompt_template(std::string_view id) {
  for (const auto& t : kPromptTemplates) {
    if (t.id == id) return t;
  }
  std::string known;
  for (const auto& t : kPromptTemplates) known += (known.empty() ? "" : ", ") + std::string(t.id);
  throw ArgumentError("unknown prompt template '" + std::string(id) + "' (known: " + known + ")");
}

inline std::string render_prompt(std::string_view template_id, const Lexicon& lex, const LanguageCode& source,
                                 const LanguageCode& target, std::string_view word) {
  const std::string_view text = prompt_template(template_id).text;
  const std::map<std::string, std::string> vars{{"{Source}", lex.display_name(source)},
                                                {"{Target}", lex.display_name(target)},
                                                {"{source}", source.str()},
                                                {"{target}", target.str()},
                                                {"{w}", std::string(word)}};
  std::string out;
  for (size_t i = 0; i < text.size();) {
    bool replaced = false;
    if (text[i] == '{') {
      for (const auto& [key, value] : vars) {
        if (text.substr(i, key.size()) == key) {
          out += value;
          i += key.size();
          replaced = true;
          break;
        }
      }
    }
    if (!replaced) out += text[i++];
  }
  return out;
}

inline std::vector<TokenId> prompt_tokens(const Tokenizer& tok, std::string_view prompt) {
  std::vector<TokenId> ids{kBosId};
  auto body = tok.encode(prompt);
  ids.insert(ids.end(), body.begin(), body.end());
  return ids;
}

// ---- language pairs ----

/// Language code given on the command line or in a config file.
inline LanguageCode parse_language_arg(std::string_view s) {
  try {
    return LanguageCode::parse(s);
  } catch (const ValidationError& e) {
    throw ArgumentError(e.what());
  }
}

using LanguagePair = std::pair<LanguageCode, LanguageCode>;

/// Full sources x targets grid, in the given order (3 x 36 gives 108).
inline std::vector<LanguagePair> expand_pairs(const std::vector<LanguageCode>& sources,
                                              const std::vector<LanguageCode>& targets) {
  std::vector<LanguagePair> out;
  for (const auto& s : sources) {
    for (const auto& t : targets) out.emplace_back(s, t);
  }
  return out;
}

/// "spa_Latn:deu_Latn,hin_Deva:mar_Deva"
// Comma-separated items, surrounding blanks trimmed, empty items dropped.
inline std::vector<std::string_view> split_list(std::string_view spec) {
  std::vector<std::string_view> out;
  size_t start = 0;
  while (start <= spec.size()) {
    size_t end = spec.find(',', start);
    if (end == std::string_view::npos) end = spec.size();
    std::string_view item = spec.substr(start, end - start);
    while (!item.empty() && std::isspace(static_cast<unsigned char>(item.front()))) item.remove_prefix(1);
    while (!item.empty() && std::isspace(static_cast<unsigned char>(item.back()))) item.remove_suffix(1);
    if (!item.empty()) out.push_back(item);
    start = end + 1;
  }
  return out;
}

inline std::vector<LanguagePair> parse_pair_list(std::string_view spec) {
  std::vector<LanguagePair> out;
  for (auto item : split_list(spec)) {
    auto colon = item.find(':');
    if (colon == std::string_view::npos) throw ArgumentError("pair '" + std::string(item) + "': expected SRC:TGT");
    try {
      auto src = parse_language_arg(item.substr(0, colon));
      out.emplace_back(std::move(src), parse_language_arg(item.substr(colon + 1)));
    } catch (const ArgumentError& e) {
      throw ArgumentError("pair '" + std::string(item) + "': " + e.what());
    }
  }
  if (out.empty()) throw ArgumentError("empty pair list");
  return out;
}

inline std::vector<LanguageCode> parse_language_list(std::string_view spec) {
  std::vector<LanguageCode> out;
  for (auto item : split_list(spec)) out.push_back(parse_language_arg(item));
  return out;
}

inline std::string instance_id(const LanguagePair& pair, std::string_view concept_id) {
  return pair.first.str() + ":" + pair.second.str() + ":" + std::string(concept_id);
}

inline uint64_t fnv1a(std::string_view bytes) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---- run ----

struct RunOptions {
  std::vector<LanguagePair> pairs;
  std::string template_id = "word-translate";
  std::string layer_spec = "last:10";
  size_t max_steps = 8;
  size_t workers = 1;
  /// Use at most this many concepts per pair (lexicon order).
  std::optional<size_t> concept_limit;
};

struct RunResult {
  TraceMeta meta;
  std::vector<InstanceTrace> traces;
  size_t skipped_partial = 0;  ///< (concept, pair) combinations without coverage
};

inline RunResult run_traces(const ModelBundle& bundle, const Lexicon& lex, const RunOptions& options) {
  if (options.pairs.empty()) throw ArgumentError("run: no language pairs");
  prompt_template(options.template_id);
  for (const auto& [s, t] : options.pairs) {
    for (const auto* lang : {&s, &t}) {
      if (!lex.has_language(*lang)) throw ArgumentError("run: language " + lang->str() + " not in lexicon");
    }
  }
  const auto layers = parse_layer_spec(options.layer_spec, bundle.config().n_layers);
  RunResult result;
  result.meta = make_trace_meta(bundle, layers);
  auto& prov = result.meta.provenance;
  prov["template"] = options.template_id;
  prov["layer_spec"] = options.layer_spec;
  prov["max_steps"] = options.max_steps;
  prov["model_checksum"] = hex64(bundle.checksum());
  prov["lexicon_checksum"] = hex64(fnv1a(serialize_lexicon(lex)));
  prov["pairs"] = nlohmann::ordered_json::array();
  for (const auto& [s, t] : options.pairs) prov["pairs"].push_back(s.str() + ":" + t.str());

  struct Job {
    const LanguagePair* pair;
    const Concept* entry;
  };
  std::vector<Job> jobs;
  std::set<std::string> ids;
  for (const auto& pair : options.pairs) {
    size_t taken = 0;
    for (const auto& c : lex.concepts()) {
      if (!c.covers(pair.first) || !c.covers(pair.second)) {
        ++result.skipped_partial;
        continue;
      }
      if (options.concept_limit && taken >= *options.concept_limit) break;
      if (!ids.insert(instance_id(pair, c.id)).second) {
        throw ArgumentError("run: pair " + pair.first.str() + ":" + pair.second.str() + " listed twice");
      }
      jobs.push_back({&pair, &c});
      ++taken;
    }
  }
  const auto stops = default_stop_tokens(bundle.tokenizer());
  result.traces.resize(jobs.size());
  parallel_for(jobs.size(), options.workers, [&](size_t i) {
    const auto& [pair, entry] = jobs[i];
    const std::string prompt =
        render_prompt(options.template_id, lex, pair->first, pair->second, entry->forms_for(pair->first).front());
    const auto tokens = prompt_tokens(bundle.tokenizer(), prompt);
    InstanceTrace t = iterative_lens_decode(bundle, tokens, layers, options.max_steps, stops);
    t.instance_id = instance_id(*pair, entry->id);
    t.concept_id = entry->id;
    t.source_lang = pair->first;
    t.target_lang = pair->second;
    t.prompt = prompt;
    t.meta = result.meta;
    result.traces[i] = std::move(t);
  });
  return result;
}

// ---- analyze ----

struct AnalyzeOptions {
  LabelOptions label;
  PairOptions pair;
  size_t workers = 1;
};

/// Full metrics pass. Throws ValidationError naming offending instance ids
/// when traces reference unknown concepts or languages, or when no
/// instance is left to analyze.
inline AnalysisReport analyze_traces(const TraceMeta& meta, const std::vector<InstanceTrace>& traces,
                                     const Lexicon& lex, const ProfileSet* profiles,
                                     const AnalyzeOptions& options = {}) {
  if (traces.empty()) throw ValidationError("analyze: trace stream is empty");
  std::vector<std::string> bad;
  AnalysisReport rep;
  std::vector<const InstanceTrace*> usable;
  for (const auto& t : traces) {
    const Concept* c = lex.find(t.concept_id);
    if (!c || !lex.has_language(t.source_lang) || !lex.has_language(t.target_lang)) {
      bad.push_back(t.instance_id);
      continue;
    }
    if (!c->covers(t.source_lang) || !c->covers(t.target_lang)) {
      rep.excluded.push_back({t.instance_id, "concept lacks forms for the source or target language"});
      continue;
    }
    usable.push_back(&t);
  }
  if (!bad.empty()) {
    std::string list;
    for (size_t i = 0; i < bad.size() && i < 20; ++i) list += (i ? ", " : "") + bad[i];
    if (bad.size() > 20) list += ", ... (" + std::to_string(bad.size()) + " total)";
    throw ValidationError("analyze: instances reference concepts or languages missing from the lexicon: " + list);
  }
  if (usable.empty()) throw ValidationError("analyze: no instance left after excluding partial concepts");
  std::sort(usable.begin(), usable.end(),
            [](const InstanceTrace* a, const InstanceTrace* b) { return a->instance_id < b->instance_id; });
  std::sort(rep.excluded.begin(), rep.excluded.end(),
            [](const Exclusion& a, const Exclusion& b) { return a.instance_id < b.instance_id; });

  std::vector<LabeledTrace> labeled(usable.size());
  parallel_for(usable.size(), options.workers,
               [&](size_t i) { labeled[i] = label_trace(*usable[i], lex, profiles, options.label); });

  std::map<LanguagePair, std::vector<size_t>> groups;
  for (size_t i = 0; i < labeled.size(); ++i) groups[{labeled[i].source_lang, labeled[i].target_lang}].push_back(i);
  for (const auto& [pair, idx] : groups) {
    std::vector<LabeledTrace> lt;
    std::vector<InstanceResult> results;
    for (size_t i : idx) {
      lt.push_back(labeled[i]);
      results.push_back(instance_tl(labeled[i]));
    }
    rep.pairs.push_back(pair_report(results, lt, options.pair));
  }
  rep.aggregates = aggregate_by_source(rep.pairs);

  auto& p = rep.provenance;
  p["model_name"] = meta.model_name;
  p["n_layers"] = meta.n_layers;
  p["tracked_layers"] = meta.tracked_layers;
  p["tokenizer_id"] = meta.tokenizer_id;
  p["norm_kind"] = to_string(meta.norm_kind);
  p["trace_schema_version"] = meta.schema_version;
  p["run"] = meta.provenance;
  p["lexicon_checksum"] = hex64(fnv1a(serialize_lexicon(lex)));
  p["profiles_checksum"] = profiles ? nlohmann::ordered_json(hex64(fnv1a(serialize_profiles(*profiles))))
                                    : nlohmann::ordered_json(nullptr);
  p["instances"] = traces.size();
  nlohmann::ordered_json o;
  o["attribution"] = to_string(options.pair.attribution);
  o["precedence"] = nlohmann::ordered_json::array();
  for (const auto& l : options.label.precedence.empty() ? lex.languages() : options.label.precedence) {
    o["precedence"].push_back(l.str());
  }
  o["candidate_set"] = nlohmann::ordered_json::array();
  if (options.label.candidate_set.empty()) {
    for (const auto& l : lex.languages()) o["candidate_set"].push_back(l.str());
  } else {
    for (const auto& l : options.label.candidate_set) o["candidate_set"].push_back(l.str());
  }
  o["use_external_lid"] = options.label.use_external_lid;
  o["lid_min_margin"] = options.label.lid.min_margin;
  o["cutoff"] = options.pair.cutoff ? nlohmann::ordered_json(*options.pair.cutoff)
                                    : nlohmann::ordered_json("L-4");
  o["std"] = "population";
  p["options"] = std::move(o);
  return rep;
}

// ---- synthetic training corpus ----

struct CorpusTask {
  LanguagePair pair;
  /// Keep concept i (lexicon order) when i % modulus != 0; modulus 0 keeps all.
  size_t holdout_modulus = 0;
};

/// Prompt + answer + eos examples; the loss covers the answer and eos.
inline std::vector<TrainExample> build_translation_corpus(const Lexicon& lex, const Tokenizer& tok,
                                                          const std::vector<CorpusTask>& tasks,
                                                          std::string_view template_id) {
  std::vector<TrainExample> out;
  for (const auto& task : tasks) {
    const auto& [s, t] = task.pair;
    for (size_t i = 0; i < lex.concepts().size(); ++i) {
      const auto& c = lex.concepts()[i];
      if (!c.covers(s) || !c.covers(t)) continue;
      if (task.holdout_modulus && i % task.holdout_modulus == 0) continue;
      TrainExample ex;
      ex.tokens = prompt_tokens(tok, render_prompt(template_id, lex, s, t, c.forms_for(s).front()));
      ex.loss_from = ex.tokens.size();
      auto ans = tok.encode(c.forms_for(t).front());
      ex.tokens.insert(ex.tokens.end(), ans.begin(), ans.end());
      ex.tokens.push_back(kEosId);
      out.push_back(std::move(ex));
    }
  }
  return out;
}

/// Text the tokenizer is trained on: every prompt and answer of the tasks.
inline std::vector<std::string> tokenizer_corpus(const Lexicon& lex, const std::vector<CorpusTask>& tasks,
                                                 std::string_view template_id) {
  std::vector<std::string> out;
  for (const auto& task : tasks) {
    const auto& [s, t] = task.pair;
    for (const auto& c : lex.concepts()) {
      if (!c.covers(s) || !c.covers(t)) continue;
      out.push_back(render_prompt(template_id, lex, s, t, c.forms_for(s).front()));
      out.push_back(c.forms_for(t).front());
    }
  }
  return out;
}

/// Demo curriculum: each evaluated pair is trained directly on most
/// concepts (every `holdout`-th concept is held out); every source and
/// target is also paired with a pivot language on all concepts, and each
/// language gets a copy task (source = target), so held-out items can be
/// reached through the pivot.
inline std::vector<CorpusTask> demo_tasks(const std::vector<LanguagePair>& pairs, const LanguageCode& pivot,
                                          size_t holdout = 4, bool copy = true) {
  std::vector<CorpusTask> tasks;
  std::set<LanguagePair> seen;
  auto add = [&](LanguagePair p, size_t mod) {
    if (!seen.insert(p).second) return;
    tasks.push_back({std::move(p), mod});
  };
  for (const auto& p : pairs) add(p, p.first == p.second ? 0 : holdout);
  for (const auto& p : pairs) {
    if (p.first != pivot) add({p.first, pivot}, 0);
  }
  for (const auto& p : pairs) {
    if (p.second != pivot) add({pivot, p.second}, 0);
  }
  if (copy) {
    std::vector<LanguageCode> langs{pivot};
    for (const auto& p : pairs) {
      for (const auto& l : {p.first, p.second}) {
        if (std::find(langs.begin(), langs.end(), l) == langs.end()) langs.push_back(l);
      }
    }
    for (const auto& l : langs) add({l, l}, 0);
  }
  return tasks;
}

// ---- demo setup ----

// Small enough to train in well under a minute on one core.
inline ModelConfig demo_model_config() {
  ModelConfig c;
  c.n_layers = 6;
  c.d_model = 32;
  c.n_heads = 4;
  c.vocab_size = 512;
  c.max_context = 64;
  c.seed = 7;
  c.name = "tlens-demo";
  return c;
}

inline TrainConfig demo_train_config() {
  TrainConfig tc;
  tc.epochs = 14;
  tc.learning_rate = 8e-3;
  return tc;
}

inline std::vector<LanguagePair> demo_pairs() {
  return parse_pair_list("spa_Latn:deu_Latn,spa_Latn:hin_Deva,hin_Deva:mar_Deva,tel_Telu:amh_Ethi");
}

inline const LanguageCode& demo_pivot() {
  static const LanguageCode pivot = LanguageCode::parse("eng_Latn");
  return pivot;
}

/// Seeded, untrained bundle whose BPE vocabulary is learned from the
/// curriculum text.
inline ModelBundle init_for_tasks(const ModelConfig& config, const Lexicon& lex, const std::vector<CorpusTask>& tasks,
                                  std::string_view template_id) {
  config.validate();
  auto tok = Tokenizer::train_bpe(tokenizer_corpus(lex, tasks, template_id), static_cast<size_t>(config.vocab_size));
  return init_seeded(config, std::move(tok));
}

}  // namespace tlens
