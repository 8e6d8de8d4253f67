#pragma once

// Analysis report (one JSON document per run) and flat CSV tables.
//
// pairs.csv   source,target,n,final_acc,int_acc,d_F,tl_sum,tlp,tlp_clamped,switch_layer,nontarget_recall
// layers.csv  source,target,layer,relative_layer,total,labeled,on_target_correct,on_target_incorrect,
//             off_target_correct,off_target_incorrect,accurate,target_presence
//
// Numbers use the shortest round-trip decimal form; undefined values are "NA".

#include <charconv>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tlens/errors.hpp"
#include "tlens/metrics.hpp"

namespace tlens {

inline constexpr std::string_view kReportVersion = "1.0";

struct Exclusion {
  std::string instance_id;
  std::string reason;
  friend bool operator==(const Exclusion&, const Exclusion&) = default;
};

struct AnalysisReport {
  nlohmann::ordered_json provenance = nlohmann::ordered_json::object();
  std::vector<PairReport> pairs;  ///< sorted by (source, target)
  SourceAggregates aggregates;
  std::vector<Exclusion> excluded;
};

inline std::string format_number(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw Error("number formatting failed");
  return std::string(buf, end);
}

template <typename T>
std::string format_number(const std::optional<T>& v) {
  if (!v) return "NA";
  if constexpr (std::is_floating_point_v<T>) {
    return format_number(static_cast<double>(*v));
  } else {
    return std::to_string(*v);
  }
}

namespace report_detail {

using ojson = nlohmann::ordered_json;

template <typename T>
ojson opt(const std::optional<T>& v) {
  return v ? ojson(*v) : ojson(nullptr);
}

inline ojson mean_std_json(const std::optional<MeanStd>& m) {
  if (!m) return nullptr;
  ojson j;
  j["mean"] = m->mean;
  j["std"] = m->std;
  j["count"] = m->count;
  return j;
}

inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string csv_row(const std::vector<std::string>& cells) {
  std::string out;
  for (size_t i = 0; i < cells.size(); ++i) {
    if (i) out += ',';
    out += csv_field(cells[i]);
  }
  return out + "\n";
}

inline std::string num_or_na(const nlohmann::json& j) {
  if (j.is_null()) return "NA";
  if (j.is_number_integer()) return std::to_string(j.get<long long>());
  return format_number(j.get<double>());
}

}  // namespace report_detail

inline nlohmann::ordered_json pair_to_json(const PairReport& p) {
  using report_detail::opt;
  report_detail::ojson j;
  j["source"] = p.source_lang.str();
  j["target"] = p.target_lang.str();
  j["n"] = p.n;
  j["final_correct"] = p.final_correct;
  j["intermediate_correct"] = p.intermediate_correct;
  j["final_acc"] = p.final_acc;
  j["intermediate_acc"] = p.intermediate_acc;
  j["d_F"] = p.d_F;
  j["tl_sum"] = p.tl_sum;
  j["tl_clamped_sum"] = p.tl_clamped_sum;
  j["tlp_defined"] = p.tlp.has_value();
  j["tlp"] = opt(p.tlp);
  j["tlp_clamped"] = opt(p.tlp_clamped);
  j["switch_layer"] = opt(p.switch_layer);
  j["switch_layer_relative"] = opt(p.switch_layer_relative);
  j["nontarget_recall_defined"] = p.nontarget_recall.has_value();
  j["nontarget_recall"] = opt(p.nontarget_recall);
  j["cutoff"] = p.cutoff;
  j["lang_distribution_weight"] = p.lang_distribution.total_weight;
  j["lang_distribution"] = report_detail::ojson::object();
  for (const auto& [lang, f] : p.lang_distribution.fractions) j["lang_distribution"][lang.str()] = f;
  j["layers"] = report_detail::ojson::array();
  for (const auto& r : p.layers) {
    report_detail::ojson jr;
    jr["layer"] = r.layer;
    jr["total"] = r.total;
    jr["labeled"] = r.labeled_count;
    jr["on_target_correct"] = r.on_target_correct;
    jr["on_target_incorrect"] = r.on_target_incorrect;
    jr["off_target_correct"] = r.off_target_correct;
    jr["off_target_incorrect"] = r.off_target_incorrect;
    jr["accurate"] = r.accurate_count;
    jr["accurate_on_target"] = r.accurate_on_target;
    jr["target_presence"] = opt(r.target_presence());
    j["layers"].push_back(std::move(jr));
  }
  return j;
}

inline nlohmann::ordered_json report_to_json(const AnalysisReport& rep) {
  using report_detail::opt;
  report_detail::ojson j;
  j["report_version"] = kReportVersion;
  j["provenance"] = rep.provenance;
  j["pairs"] = report_detail::ojson::array();
  for (const auto& p : rep.pairs) j["pairs"].push_back(pair_to_json(p));
  j["by_source"] = report_detail::ojson::array();
  for (const auto& s : rep.aggregates.per_source) {
    report_detail::ojson js;
    js["source"] = s.source_lang.str();
    js["n_targets"] = s.n_targets;
    js["final_acc"] = report_detail::mean_std_json(s.final_acc);
    js["intermediate_acc"] = report_detail::mean_std_json(s.intermediate_acc);
    js["tlp"] = report_detail::mean_std_json(s.tlp);
    js["tlp_clamped"] = report_detail::mean_std_json(s.tlp_clamped);
    js["tlp_undefined"] = s.tlp_undefined;
    j["by_source"].push_back(std::move(js));
  }
  const auto& a = rep.aggregates.average;
  j["average"]["final_acc"] = opt(a.final_acc);
  j["average"]["intermediate_acc"] = opt(a.intermediate_acc);
  j["average"]["tlp"] = opt(a.tlp);
  j["average"]["tlp_clamped"] = opt(a.tlp_clamped);
  j["excluded"] = report_detail::ojson::array();
  for (const auto& e : rep.excluded) {
    report_detail::ojson je;
    je["instance_id"] = e.instance_id;
    je["reason"] = e.reason;
    j["excluded"].push_back(std::move(je));
  }
  return j;
}

inline std::string serialize_report(const AnalysisReport& rep) { return report_to_json(rep).dump(2) + "\n"; }

inline std::string pairs_csv(const std::vector<PairReport>& pairs) {
  std::string out = report_detail::csv_row({"source", "target", "n", "final_acc", "int_acc", "d_F", "tl_sum", "tlp",
                                            "tlp_clamped", "switch_layer", "nontarget_recall"});
  for (const auto& p : pairs) {
    out += report_detail::csv_row({p.source_lang.str(), p.target_lang.str(), std::to_string(p.n),
                                   format_number(p.final_acc), format_number(p.intermediate_acc),
                                   std::to_string(p.d_F), std::to_string(p.tl_sum), format_number(p.tlp),
                                   format_number(p.tlp_clamped), format_number(p.switch_layer),
                                   format_number(p.nontarget_recall)});
  }
  return out;
}

inline std::string layers_csv(const std::vector<PairReport>& pairs, int n_layers) {
  std::string out = report_detail::csv_row({"source", "target", "layer", "relative_layer", "total", "labeled",
                                            "on_target_correct", "on_target_incorrect", "off_target_correct",
                                            "off_target_incorrect", "accurate", "target_presence"});
  for (const auto& p : pairs) {
    for (const auto& r : p.layers) {
      out += report_detail::csv_row(
          {p.source_lang.str(), p.target_lang.str(), std::to_string(r.layer),
           std::to_string(relative_layer(r.layer, n_layers)), std::to_string(r.total), std::to_string(r.labeled_count),
           std::to_string(r.on_target_correct), std::to_string(r.on_target_incorrect),
           std::to_string(r.off_target_correct), std::to_string(r.off_target_incorrect),
           std::to_string(r.accurate_count), format_number(r.target_presence())});
    }
  }
  return out;
}

// ---- exports from a saved report ----

inline nlohmann::json parse_report(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("report: line " + std::to_string(detail::line_of_offset(text, e.byte)) + ": malformed JSON");
  }
  if (!j.is_object() || !j.contains("report_version") || !j["report_version"].is_string()) {
    throw ParseError("report: field 'report_version' missing");
  }
  const std::string v = j["report_version"];
  if (v.substr(0, v.find('.')) != "1") throw ParseError("report: unknown report version '" + v + "'");
  for (const char* key : {"provenance", "pairs", "by_source", "average"}) {
    if (!j.contains(key)) throw ParseError(std::string("report: field '") + key + "' missing");
  }
  return j;
}

inline int report_n_layers(const nlohmann::json& report) {
  return report["provenance"].value("n_layers", 0);
}

/// One row per (pair, layer): the four category fractions over tagged outputs.
inline std::string export_fig2(const nlohmann::json& report) {
  const int L = report_n_layers(report);
  std::string out = report_detail::csv_row({"source", "target", "layer", "relative_layer", "labeled",
                                            "on_target_correct", "on_target_incorrect", "off_target_correct",
                                            "off_target_incorrect"});
  for (const auto& p : report["pairs"]) {
    for (const auto& r : p["layers"]) {
      const double n = r["labeled"].get<double>();
      auto frac = [&](const char* k) { return n > 0 ? format_number(r[k].get<double>() / n) : std::string("NA"); };
      out += report_detail::csv_row({p["source"], p["target"], std::to_string(r["layer"].get<int>()),
                                     std::to_string(relative_layer(r["layer"].get<int>(), L)),
                                     std::to_string(r["labeled"].get<long long>()), frac("on_target_correct"),
                                     frac("on_target_incorrect"), frac("off_target_correct"),
                                     frac("off_target_incorrect")});
    }
  }
  return out;
}

/// Target presence among accurate outputs per (target, layer), averaged over sources.
inline std::string export_fig3(const nlohmann::json& report) {
  const int L = report_n_layers(report);
  std::map<std::pair<std::string, int>, std::vector<double>> acc;
  for (const auto& p : report["pairs"]) {
    for (const auto& r : p["layers"]) {
      auto& v = acc[{p["target"].get<std::string>(), r["layer"].get<int>()}];
      if (!r["target_presence"].is_null()) v.push_back(r["target_presence"].get<double>());
    }
  }
  std::string out =
      report_detail::csv_row({"target", "layer", "relative_layer", "target_presence_mean", "n_sources"});
  for (const auto& [key, xs] : acc) {
    auto m = mean_std(xs);
    out += report_detail::csv_row({key.first, std::to_string(key.second),
                                   std::to_string(relative_layer(key.second, L)),
                                   m ? format_number(m->mean) : "NA", std::to_string(xs.size())});
  }
  return out;
}

/// Task-solving language distribution per pair, plus rows pooled over
/// targets ("*") and over everything ("*", "*"), weighted by output counts.
inline std::string export_fig4(const nlohmann::json& report) {
  std::string out = report_detail::csv_row({"source", "target", "language", "fraction", "weight"});
  std::map<std::string, std::map<std::string, double>> pooled_src;
  std::map<std::string, double> pooled_src_w;
  std::map<std::string, double> pooled_all;
  double pooled_all_w = 0.0;
  for (const auto& p : report["pairs"]) {
    const double w = p["lang_distribution_weight"].get<double>();
    const std::string src = p["source"];
    for (const auto& [lang, f] : p["lang_distribution"].items()) {
      out += report_detail::csv_row({src, p["target"], lang, format_number(f.get<double>()), format_number(w)});
      pooled_src[src][lang] += f.get<double>() * w;
      pooled_all[lang] += f.get<double>() * w;
    }
    pooled_src_w[src] += w;
    pooled_all_w += w;
  }
  for (const auto& [src, langs] : pooled_src) {
    for (const auto& [lang, cw] : langs) {
      out += report_detail::csv_row({src, "*", lang, format_number(cw / pooled_src_w[src]),
                                     format_number(pooled_src_w[src])});
    }
  }
  for (const auto& [lang, cw] : pooled_all) {
    out += report_detail::csv_row({"*", "*", lang, format_number(cw / pooled_all_w), format_number(pooled_all_w)});
  }
  return out;
}

/// Per-target means over sources, sorted ascending by mean TLP (targets
/// without any defined TLP last, then by code).
inline std::string export_fig5(const nlohmann::json& report) {
  struct Acc {
    std::vector<double> fin, inter, tlp;
  };
  std::map<std::string, Acc> by_target;
  for (const auto& p : report["pairs"]) {
    auto& a = by_target[p["target"].get<std::string>()];
    a.fin.push_back(p["final_acc"].get<double>());
    a.inter.push_back(p["intermediate_acc"].get<double>());
    if (!p["tlp"].is_null()) a.tlp.push_back(p["tlp"].get<double>());
  }
  struct Row {
    std::string target;
    std::optional<double> tlp, fin, inter;
    size_t n;
  };
  std::vector<Row> rows;
  for (const auto& [t, a] : by_target) {
    auto tm = mean_std(a.tlp);
    rows.push_back({t, tm ? std::optional<double>(tm->mean) : std::nullopt, mean_std(a.fin)->mean,
                    mean_std(a.inter)->mean, a.fin.size()});
  }
  std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    if (a.tlp.has_value() != b.tlp.has_value()) return a.tlp.has_value();
    if (a.tlp && *a.tlp != *b.tlp) return *a.tlp < *b.tlp;
    return a.target < b.target;
  });
  std::string out =
      report_detail::csv_row({"target", "mean_tlp", "mean_final_acc", "mean_int_acc", "n_sources"});
  for (const auto& r : rows) {
    out += report_detail::csv_row(
        {r.target, format_number(r.tlp), format_number(r.fin), format_number(r.inter), std::to_string(r.n)});
  }
  return out;
}

/// Per-source mean and population std, then the Avg row (mean of source means).
inline std::string export_table1(const nlohmann::json& report) {
  std::string out = report_detail::csv_row({"source", "n_targets", "final_acc_mean", "final_acc_std",
                                            "int_acc_mean", "int_acc_std", "tlp_mean", "tlp_std",
                                            "tlp_undefined"});
  auto ms = [](const nlohmann::json& j, const char* k) {
    if (j.is_null()) return std::string("NA");
    return report_detail::num_or_na(j[k]);
  };
  for (const auto& s : report["by_source"]) {
    out += report_detail::csv_row({s["source"], std::to_string(s["n_targets"].get<long long>()),
                                   ms(s["final_acc"], "mean"), ms(s["final_acc"], "std"),
                                   ms(s["intermediate_acc"], "mean"), ms(s["intermediate_acc"], "std"),
                                   ms(s["tlp"], "mean"), ms(s["tlp"], "std"),
                                   std::to_string(s["tlp_undefined"].get<long long>())});
  }
  const auto& a = report["average"];
  out += report_detail::csv_row({"Avg", "", report_detail::num_or_na(a["final_acc"]), "",
                                 report_detail::num_or_na(a["intermediate_acc"]), "",
                                 report_detail::num_or_na(a["tlp"]), "", ""});
  return out;
}

}  // namespace tlens
