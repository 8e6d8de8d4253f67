#pragma once

// Layer labeling (lexicon match first, gated LID fallback) and every
// dataset-level quantity computed from it: translation loss, TLP, layer
// profiles, layer of switch, task-solving language distribution,
// non-target recall and per-source aggregates.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tlens/errors.hpp"
#include "tlens/langid.hpp"
#include "tlens/lexicon.hpp"
#include "tlens/logitlens.hpp"

namespace tlens {

enum class AttributionMode { precedence, fractional };

inline std::string_view to_string(AttributionMode m) {
  return m == AttributionMode::precedence ? "precedence" : "fractional";
}

inline AttributionMode parse_attribution_mode(std::string_view s) {
  if (s == "precedence") return AttributionMode::precedence;
  if (s == "fractional") return AttributionMode::fractional;
  throw ArgumentError("unknown attribution mode '" + std::string(s) + "' (expected precedence|fractional)");
}

struct LabelOptions {
  /// Tie-break order for multi-language matches; empty = lexicon order.
  std::vector<LanguageCode> precedence;
  /// Gate set for LID tags; empty = every lexicon language.
  std::set<LanguageCode> candidate_set;
  /// Use the trace's externally produced tags instead of the in-repo classifier.
  bool use_external_lid = false;
  LidOptions lid;
};

struct LabeledLayerOutput {
  int layer = 0;
  std::string text;
  std::vector<LanguageCode> matched_langs;  ///< task_match, lexicon order; never the source
  bool target_match = false;
  bool source_match = false;
  std::optional<LanguageCode> lid_tag;      ///< only when matched_langs is empty
  std::optional<LanguageCode> attribution;

  bool correct() const { return !matched_langs.empty(); }
  bool matches(const LanguageCode& lang) const {
    return std::find(matched_langs.begin(), matched_langs.end(), lang) != matched_langs.end();
  }

  friend bool operator==(const LabeledLayerOutput&, const LabeledLayerOutput&) = default;
};

struct LabeledTrace {
  std::string instance_id;
  std::string concept_id;
  LanguageCode source_lang;
  LanguageCode target_lang;
  int n_layers = 0;
  std::vector<LabeledLayerOutput> layers;  ///< tracked order

  const LabeledLayerOutput* at(int layer) const {
    for (const auto& l : layers) {
      if (l.layer == layer) return &l;
    }
    return nullptr;
  }

  friend bool operator==(const LabeledTrace&, const LabeledTrace&) = default;
};

/// Single attribution for a set of matched languages: the target when it
/// matched, otherwise the first language in precedence order.
inline std::optional<LanguageCode> attribute(const std::vector<LanguageCode>& matched, const LanguageCode& target,
                                             const std::vector<LanguageCode>& precedence) {
  if (matched.empty()) return std::nullopt;
  if (std::find(matched.begin(), matched.end(), target) != matched.end()) return target;
  for (const auto& lang : precedence) {
    if (std::find(matched.begin(), matched.end(), lang) != matched.end()) return lang;
  }
  return matched.front();
}

inline LabeledTrace label_trace(const InstanceTrace& trace, const Lexicon& lexicon, const ProfileSet* profiles,
                                const LabelOptions& options = {}) {
  const Concept& entry = lexicon.at(trace.concept_id);
  for (const auto* lang : {&trace.source_lang, &trace.target_lang}) {
    if (!lexicon.has_language(*lang)) {
      throw LookupError("instance '" + trace.instance_id + "': language " + lang->str() + " not in lexicon");
    }
  }
  const auto& precedence = options.precedence.empty() ? lexicon.languages() : options.precedence;
  std::set<LanguageCode> candidates = options.candidate_set;
  if (candidates.empty()) candidates.insert(lexicon.languages().begin(), lexicon.languages().end());

  LabeledTrace out;
  out.instance_id = trace.instance_id;
  out.concept_id = trace.concept_id;
  out.source_lang = trace.source_lang;
  out.target_lang = trace.target_lang;
  out.n_layers = trace.meta.n_layers;
  for (int layer : trace.meta.tracked_layers) {
    LabeledLayerOutput lo;
    lo.layer = layer;
    lo.text = layer_output(trace, layer);
    lo.matched_langs = lexicon.task_match(lo.text, entry, trace.source_lang);
    lo.target_match = entry.covers(trace.target_lang) && lexicon.exact_match(lo.text, entry, trace.target_lang);
    lo.source_match = entry.covers(trace.source_lang) && lexicon.exact_match(lo.text, entry, trace.source_lang);
    if (lo.matched_langs.empty()) {
      if (lo.source_match) {
        lo.lid_tag = gated_identify(lo.text, ProfileSet(), candidates, trace.source_lang);
      } else if (options.use_external_lid) {
        auto it = trace.external_lid.find(layer);
        if (it != trace.external_lid.end() && LanguageCode::is_valid(it->second)) {
          auto tag = LanguageCode::parse(it->second);
          if (candidates.count(tag)) lo.lid_tag = tag;
        }
      } else if (profiles) {
        lo.lid_tag = gated_identify(lo.text, *profiles, candidates, std::nullopt, options.lid);
      }
    }
    lo.attribution = lo.correct() ? attribute(lo.matched_langs, trace.target_lang, precedence) : lo.lid_tag;
    out.layers.push_back(std::move(lo));
  }
  return out;
}

struct InstanceResult {
  std::string instance_id;
  bool final_correct = false;
  bool intermediate_correct = false;
  std::optional<int> best_layer;
  int tl = 0;

  friend bool operator==(const InstanceResult&, const InstanceResult&) = default;
};

/// TL(x) = max_{i<L} M'(O(l_i)) - M(O(l_L)). Only layers strictly below L count.
inline InstanceResult instance_tl(const LabeledTrace& labeled, bool final_correct) {
  InstanceResult r;
  r.instance_id = labeled.instance_id;
  r.final_correct = final_correct;
  for (const auto& lo : labeled.layers) {
    if (lo.layer < labeled.n_layers && lo.correct()) {
      r.intermediate_correct = true;
      if (!r.best_layer || lo.layer < *r.best_layer) r.best_layer = lo.layer;
    }
  }
  r.tl = (r.intermediate_correct ? 1 : 0) - (r.final_correct ? 1 : 0);
  return r;
}

/// Final verdict M at layer L against the target language.
inline InstanceResult instance_tl(const LabeledTrace& labeled) {
  const LabeledLayerOutput* last = labeled.at(labeled.n_layers);
  if (!last) throw LookupError("instance '" + labeled.instance_id + "': final layer not tracked");
  return instance_tl(labeled, last->target_match);
}

struct LayerProfileRow {
  int layer = 0;
  size_t labeled_count = 0;  ///< outputs with an attribution
  size_t on_target_correct = 0;
  size_t on_target_incorrect = 0;
  size_t off_target_correct = 0;
  size_t off_target_incorrect = 0;
  size_t accurate_count = 0;           ///< M' = 1, tagged or not
  size_t accurate_on_target = 0;
  size_t correct_count = 0;            ///< M' = 1 (same as accurate_count; kept for per-layer accuracy)
  size_t total = 0;                    ///< all outputs at this layer

  bool empty() const { return labeled_count == 0; }
  double fraction(size_t count) const {
    return labeled_count == 0 ? 0.0 : static_cast<double>(count) / static_cast<double>(labeled_count);
  }
  /// Target presence among accurate outputs; nullopt when none are accurate.
  std::optional<double> target_presence() const {
    if (accurate_count == 0) return std::nullopt;
    return static_cast<double>(accurate_on_target) / static_cast<double>(accurate_count);
  }

  friend bool operator==(const LayerProfileRow&, const LayerProfileRow&) = default;
};

/// One row per layer present in the traces (ascending). Category fractions
/// cover only outputs with an attribution.
inline std::vector<LayerProfileRow> layer_profiles(const std::vector<LabeledTrace>& traces) {
  std::map<int, LayerProfileRow> rows;
  for (const auto& t : traces) {
    for (const auto& lo : t.layers) {
      auto& row = rows[lo.layer];
      row.layer = lo.layer;
      ++row.total;
      if (lo.correct()) {
        ++row.accurate_count;
        ++row.correct_count;
        if (lo.attribution == t.target_lang) ++row.accurate_on_target;
      }
      if (!lo.attribution) continue;
      ++row.labeled_count;
      const bool on_target = *lo.attribution == t.target_lang;
      if (on_target) {
        ++(lo.correct() ? row.on_target_correct : row.on_target_incorrect);
      } else {
        ++(lo.correct() ? row.off_target_correct : row.off_target_incorrect);
      }
    }
  }
  std::vector<LayerProfileRow> out;
  for (auto& [_, row] : rows) out.push_back(row);
  return out;
}

/// Layer with the largest successive increase in target presence. Layers
/// with no accurate outputs are skipped; ties go to the later layer; absent
/// when final_acc <= 0.05 or when presence never increases.
inline std::optional<int> layer_of_switch(const std::vector<LayerProfileRow>& profile, double final_acc) {
  if (final_acc <= 0.05) return std::nullopt;
  std::optional<int> best_layer;
  double best = 0.0;
  std::optional<double> prev;
  for (const auto& row : profile) {
    auto p = row.target_presence();
    if (!p) continue;
    if (prev) {
      const double inc = *p - *prev;
      if (inc > 0.0 && (!best_layer || inc >= best)) {
        best = inc;
        best_layer = row.layer;
      }
    }
    prev = p;
  }
  return best_layer;
}

/// Layer of switch relative to the output: layer L is -1.
inline int relative_layer(int layer, int n_layers) { return layer - n_layers - 1; }

struct LanguageDistribution {
  std::map<LanguageCode, double> fractions;
  double total_weight = 0.0;  ///< number of qualifying outputs
  bool empty() const { return fractions.empty(); }
};

/// Languages of correct off-target outputs at tracked layers <= cutoff.
inline LanguageDistribution task_language_distribution(const std::vector<LabeledTrace>& traces, int cutoff,
                                                       AttributionMode mode = AttributionMode::precedence) {
  std::map<LanguageCode, double> weight;
  double total = 0.0;
  for (const auto& t : traces) {
    if (cutoff > t.n_layers) throw ArgumentError("task_language_distribution: cutoff beyond L");
    for (const auto& lo : t.layers) {
      if (lo.layer > cutoff || !lo.correct() || lo.attribution == t.target_lang) continue;
      total += 1.0;
      if (mode == AttributionMode::precedence) {
        weight[*lo.attribution] += 1.0;
      } else {
        const double share = 1.0 / static_cast<double>(lo.matched_langs.size());
        for (const auto& lang : lo.matched_langs) weight[lang] += share;
      }
    }
  }
  LanguageDistribution out;
  out.total_weight = total;
  if (total > 0.0) {
    for (const auto& [lang, w] : weight) out.fractions[lang] = w / total;
  }
  return out;
}

/// Among final-correct instances, the share with a correct intermediate
/// output (i < L) matching some non-target language. nullopt when no
/// instance is final-correct.
inline std::optional<double> nontarget_recall(const std::vector<InstanceResult>& results,
                                              const std::vector<LabeledTrace>& traces) {
  std::map<std::string, const LabeledTrace*> by_id;
  for (const auto& t : traces) by_id[t.instance_id] = &t;
  size_t final_correct = 0, hit = 0;
  for (const auto& r : results) {
    if (!r.final_correct) continue;
    ++final_correct;
    auto it = by_id.find(r.instance_id);
    if (it == by_id.end()) throw LookupError("no labeled trace for instance '" + r.instance_id + "'");
    const LabeledTrace& t = *it->second;
    const bool found = std::any_of(t.layers.begin(), t.layers.end(), [&](const LabeledLayerOutput& lo) {
      return lo.layer < t.n_layers &&
             std::any_of(lo.matched_langs.begin(), lo.matched_langs.end(),
                         [&](const LanguageCode& l) { return l != t.target_lang; });
    });
    if (found) ++hit;
  }
  if (final_correct == 0) return std::nullopt;
  return static_cast<double>(hit) / static_cast<double>(final_correct);
}

struct PairReport {
  LanguageCode source_lang;
  LanguageCode target_lang;
  size_t n = 0;
  size_t final_correct = 0;
  size_t intermediate_correct = 0;
  double final_acc = 0.0;
  double intermediate_acc = 0.0;
  size_t d_F = 0;
  long tl_sum = 0;
  size_t tl_clamped_sum = 0;
  std::optional<double> tlp;          ///< undefined when d_F = 0
  std::optional<double> tlp_clamped;
  std::vector<LayerProfileRow> layers;
  std::optional<int> switch_layer;
  std::optional<int> switch_layer_relative;
  int cutoff = 0;
  LanguageDistribution lang_distribution;
  std::optional<double> nontarget_recall;

  friend bool operator==(const PairReport& a, const PairReport& b) {
    return a.source_lang == b.source_lang && a.target_lang == b.target_lang && a.n == b.n &&
           a.final_correct == b.final_correct && a.intermediate_correct == b.intermediate_correct &&
           a.final_acc == b.final_acc && a.intermediate_acc == b.intermediate_acc && a.d_F == b.d_F &&
           a.tl_sum == b.tl_sum && a.tl_clamped_sum == b.tl_clamped_sum && a.tlp == b.tlp &&
           a.tlp_clamped == b.tlp_clamped && a.layers == b.layers && a.switch_layer == b.switch_layer &&
           a.cutoff == b.cutoff && a.lang_distribution.fractions == b.lang_distribution.fractions &&
           a.nontarget_recall == b.nontarget_recall;
  }
};

struct PairOptions {
  /// Highest layer counted for the language distribution; nullopt = L - 4.
  std::optional<int> cutoff;
  AttributionMode attribution = AttributionMode::precedence;
};

/// Aggregate one language pair. `results` and `traces` describe the same
/// instances; both are processed in instance_id order.
inline PairReport pair_report(const std::vector<InstanceResult>& results, const std::vector<LabeledTrace>& traces,
                              const PairOptions& options = {}) {
  if (results.empty() || traces.empty()) throw ValidationError("pair_report: no instances");
  if (results.size() != traces.size()) throw ValidationError("pair_report: results and traces differ in size");
  PairReport rep;
  rep.source_lang = traces.front().source_lang;
  rep.target_lang = traces.front().target_lang;
  const int n_layers = traces.front().n_layers;
  for (const auto& t : traces) {
    if (t.source_lang != rep.source_lang || t.target_lang != rep.target_lang || t.n_layers != n_layers) {
      throw ValidationError("pair_report: instance '" + t.instance_id + "' belongs to a different pair or model");
    }
  }
  std::vector<const InstanceResult*> sorted;
  for (const auto& r : results) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(),
            [](const InstanceResult* a, const InstanceResult* b) { return a->instance_id < b->instance_id; });

  rep.n = sorted.size();
  for (const auto* r : sorted) {
    if (r->final_correct) ++rep.final_correct;
    if (r->intermediate_correct) ++rep.intermediate_correct;
    rep.tl_sum += r->tl;
    if (r->tl > 0) rep.tl_clamped_sum += static_cast<size_t>(r->tl);
  }
  rep.d_F = rep.n - rep.final_correct;
  rep.final_acc = static_cast<double>(rep.final_correct) / static_cast<double>(rep.n);
  rep.intermediate_acc = static_cast<double>(rep.intermediate_correct) / static_cast<double>(rep.n);
  if (rep.d_F > 0) {
    rep.tlp = static_cast<double>(rep.tl_sum) / static_cast<double>(rep.d_F);
    rep.tlp_clamped = static_cast<double>(rep.tl_clamped_sum) / static_cast<double>(rep.d_F);
  }
  rep.layers = layer_profiles(traces);
  rep.switch_layer = layer_of_switch(rep.layers, rep.final_acc);
  if (rep.switch_layer) rep.switch_layer_relative = relative_layer(*rep.switch_layer, n_layers);
  rep.cutoff = options.cutoff.value_or(n_layers - 4);
  rep.lang_distribution = task_language_distribution(traces, rep.cutoff, options.attribution);
  rep.nontarget_recall = nontarget_recall(results, traces);
  return rep;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  ///< population standard deviation
  size_t count = 0;
};

inline std::optional<MeanStd> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return std::nullopt;
  MeanStd m;
  m.count = xs.size();
  for (double x : xs) m.mean += x;
  m.mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - m.mean) * (x - m.mean);
  m.std = std::sqrt(var / static_cast<double>(xs.size()));
  return m;
}

struct SourceAggregate {
  LanguageCode source_lang;
  size_t n_targets = 0;
  std::optional<MeanStd> final_acc;
  std::optional<MeanStd> intermediate_acc;
  std::optional<MeanStd> tlp;          ///< over pairs with defined TLP
  std::optional<MeanStd> tlp_clamped;
  size_t tlp_undefined = 0;            ///< pairs left out of the TLP statistics
};

struct GrandAverage {
  std::optional<double> final_acc;
  std::optional<double> intermediate_acc;
  std::optional<double> tlp;
  std::optional<double> tlp_clamped;
};

struct SourceAggregates {
  std::vector<SourceAggregate> per_source;  ///< sorted by source code
  GrandAverage average;                     ///< mean of the per-source means
};

inline GrandAverage grand_average(const std::vector<SourceAggregate>& rows) {
  auto avg = [&](auto member) -> std::optional<double> {
    std::vector<double> xs;
    for (const auto& r : rows) {
      if (r.*member) xs.push_back((r.*member)->mean);
    }
    auto m = mean_std(xs);
    return m ? std::optional<double>(m->mean) : std::nullopt;
  };
  return {avg(&SourceAggregate::final_acc), avg(&SourceAggregate::intermediate_acc), avg(&SourceAggregate::tlp),
          avg(&SourceAggregate::tlp_clamped)};
}

/// Per-source mean and population std over target languages.
inline SourceAggregates aggregate_by_source(const std::vector<PairReport>& reports) {
  std::map<LanguageCode, std::vector<const PairReport*>> by_source;
  for (const auto& r : reports) by_source[r.source_lang].push_back(&r);
  SourceAggregates out;
  for (auto& [source, list] : by_source) {
    std::sort(list.begin(), list.end(),
              [](const PairReport* a, const PairReport* b) { return a->target_lang < b->target_lang; });
    SourceAggregate agg;
    agg.source_lang = source;
    agg.n_targets = list.size();
    std::vector<double> fin, inter, tlp, tlpc;
    for (const auto* r : list) {
      fin.push_back(r->final_acc);
      inter.push_back(r->intermediate_acc);
      if (r->tlp) {
        tlp.push_back(*r->tlp);
        tlpc.push_back(*r->tlp_clamped);
      } else {
        ++agg.tlp_undefined;
      }
    }
    agg.final_acc = mean_std(fin);
    agg.intermediate_acc = mean_std(inter);
    agg.tlp = mean_std(tlp);
    agg.tlp_clamped = mean_std(tlpc);
    out.per_source.push_back(std::move(agg));
  }
  out.average = grand_average(out.per_source);
  return out;
}

}  // namespace tlens
