#pragma once

// Trace files: newline-delimited JSON. Line 1 is the header
//   {"format":"tlens-trace","schema_version":"1.0","meta":{...}}
// and every following line is one InstanceTrace record. Paths ending in
// ".gz" are gzip-compressed; the reader also accepts plain files through
// the same zlib interface.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include <zlib.h>

#include <json.hpp>

#include "tlens/errors.hpp"
#include "tlens/logitlens.hpp"

namespace tlens {

inline constexpr std::string_view kTraceFormat = "tlens-trace";
inline constexpr int kTraceMajorVersion = 1;

namespace trace_detail {

using ojson = nlohmann::ordered_json;

inline std::string to_hex(std::string_view bytes) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned char b : bytes) {
    out.push_back(kHex[b >> 4]);
    out.push_back(kHex[b & 15]);
  }
  return out;
}

inline std::optional<std::string> from_hex(std::string_view hex) {
  if (hex.size() % 2 != 0) return std::nullopt;
  auto nib = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    return -1;
  };
  std::string out;
  for (size_t i = 0; i < hex.size(); i += 2) {
    int hi = nib(hex[i]), lo = nib(hex[i + 1]);
    if (hi < 0 || lo < 0) return std::nullopt;
    out.push_back(static_cast<char>(hi * 16 + lo));
  }
  return out;
}

inline bool ends_with_gz(const std::filesystem::path& p) { return p.extension() == ".gz"; }

/// Parse "MAJOR.MINOR"; nullopt when malformed.
inline std::optional<int> major_version(const std::string& v) {
  auto dot = v.find('.');
  if (dot == std::string::npos || dot == 0) return std::nullopt;
  try {
    size_t used = 0;
    int major = std::stoi(v.substr(0, dot), &used);
    if (used != dot) return std::nullopt;
    std::stoi(v.substr(dot + 1));
    return major;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

}  // namespace trace_detail

inline nlohmann::ordered_json meta_to_json(const TraceMeta& meta) {
  trace_detail::ojson m;
  m["model_name"] = meta.model_name;
  m["n_layers"] = meta.n_layers;
  m["tracked_layers"] = meta.tracked_layers;
  m["tokenizer_id"] = meta.tokenizer_id;
  m["norm_kind"] = to_string(meta.norm_kind);
  m["provenance"] = meta.provenance;
  return m;
}

inline std::string header_line(const TraceMeta& meta) {
  trace_detail::ojson h;
  h["format"] = kTraceFormat;
  h["schema_version"] = meta.schema_version;
  h["meta"] = meta_to_json(meta);
  return h.dump();
}

inline nlohmann::ordered_json trace_to_json(const InstanceTrace& t) {
  trace_detail::ojson r;
  r["instance_id"] = t.instance_id;
  r["concept_id"] = t.concept_id;
  r["source_lang"] = t.source_lang.str();
  r["target_lang"] = t.target_lang.str();
  r["prompt"] = t.prompt;
  r["steps"] = trace_detail::ojson::array();
  for (const auto& s : t.steps) {
    trace_detail::ojson js;
    js["step"] = s.step_index;
    js["final"] = s.final_token;
    js["layers"] = trace_detail::ojson::array();
    for (const auto& lr : s.per_layer) {
      trace_detail::ojson jl;
      jl["layer"] = lr.layer;
      jl["id"] = lr.token;
      if (unicode::is_valid_utf8(lr.text)) {
        jl["text"] = lr.text;
      } else {
        jl["hex"] = trace_detail::to_hex(lr.text);
      }
      jl["p"] = lr.prob;
      js["layers"].push_back(std::move(jl));
    }
    r["steps"].push_back(std::move(js));
  }
  if (!t.external_lid.empty()) {
    r["ext_lid"] = trace_detail::ojson::array();
    for (const auto& [layer, tag] : t.external_lid) {
      trace_detail::ojson e;
      e["layer"] = layer;
      e["lang"] = tag;
      r["ext_lid"].push_back(std::move(e));
    }
  }
  return r;
}

/// Parse header JSON into meta. Throws ParseError naming the field; a
/// missing/unknown/newer schema version is reported as fatal via `fatal`.
inline TraceMeta meta_from_header(const nlohmann::ordered_json& h, bool* fatal = nullptr) {
  auto fail = [&](const std::string& field, const std::string& msg, bool is_fatal = false) {
    if (fatal) *fatal = is_fatal;
    return ParseError("header: field '" + field + "': " + msg);
  };
  if (!h.is_object()) throw fail("<root>", "expected an object");
  if (h.value("format", std::string()) != kTraceFormat) throw fail("format", "expected \"tlens-trace\"");
  if (!h.contains("schema_version") || !h["schema_version"].is_string()) {
    throw fail("schema_version", "missing", true);
  }
  const std::string version = h["schema_version"];
  auto major = trace_detail::major_version(version);
  if (!major || *major != kTraceMajorVersion) {
    throw fail("schema_version", "unsupported schema version '" + version + "' (reader supports " +
                                     std::to_string(kTraceMajorVersion) + ".x)",
               true);
  }
  if (!h.contains("meta") || !h["meta"].is_object()) throw fail("meta", "missing or not an object");
  const auto& m = h["meta"];
  TraceMeta meta;
  meta.schema_version = version;
  try {
    meta.model_name = m.at("model_name").get<std::string>();
    meta.n_layers = m.at("n_layers").get<int>();
    meta.tracked_layers = m.at("tracked_layers").get<std::vector<int>>();
    meta.tokenizer_id = m.at("tokenizer_id").get<std::string>();
    meta.norm_kind = parse_norm_kind(m.at("norm_kind").get<std::string>());
    if (m.contains("provenance")) meta.provenance = m["provenance"];
  } catch (const nlohmann::json::exception& e) {
    throw fail("meta", e.what());
  } catch (const ArgumentError& e) {
    throw fail("meta.norm_kind", e.what());
  }
  try {
    validate_tracked_layers(meta.tracked_layers, meta.n_layers);
  } catch (const ArgumentError& e) {
    throw fail("meta.tracked_layers", e.what());
  }
  return meta;
}

/// Parse and validate one record against `meta`. Errors carry the record
/// number (1-based) and field path.
inline InstanceTrace trace_from_json(const nlohmann::json& r, const TraceMeta& meta, size_t record_no) {
  const std::string where = "record " + std::to_string(record_no);
  auto fail = [&](const std::string& field, const std::string& msg) {
    return ValidationError(where + ": field '" + field + "': " + msg);
  };
  if (!r.is_object()) throw fail("<root>", "expected an object");
  auto str_field = [&](const char* key) -> std::string {
    if (!r.contains(key) || !r[key].is_string()) throw fail(key, "missing or not a string");
    return r[key].get<std::string>();
  };
  InstanceTrace t;
  t.meta = meta;
  t.instance_id = str_field("instance_id");
  if (t.instance_id.empty()) throw fail("instance_id", "empty");
  t.concept_id = str_field("concept_id");
  if (t.concept_id.empty()) throw fail("concept_id", "empty");
  for (const char* key : {"source_lang", "target_lang"}) {
    std::string code = str_field(key);
    if (!LanguageCode::is_valid(code)) throw fail(key, "invalid language code '" + code + "'");
    (std::string_view(key) == "source_lang" ? t.source_lang : t.target_lang) = LanguageCode::parse(code);
  }
  t.prompt = str_field("prompt");
  if (!r.contains("steps") || !r["steps"].is_array()) throw fail("steps", "missing or not an array");
  const auto& steps = r["steps"];
  for (size_t si = 0; si < steps.size(); ++si) {
    const std::string sw = "steps[" + std::to_string(si) + "]";
    const auto& js = steps[si];
    if (!js.is_object()) throw fail(sw, "not an object");
    if (!js.contains("step") || !js["step"].is_number_unsigned() || js["step"].get<size_t>() != si) {
      throw fail(sw + ".step", "step indices must be contiguous from 0");
    }
    if (!js.contains("final") || !js["final"].is_number_integer() || js["final"].get<int64_t>() < 0) {
      throw fail(sw + ".final", "missing or not a non-negative integer");
    }
    LensStep ls;
    ls.step_index = si;
    ls.final_token = js["final"].get<TokenId>();
    if (!js.contains("layers") || !js["layers"].is_array()) throw fail(sw + ".layers", "missing or not an array");
    const auto& layers = js["layers"];
    if (layers.size() != meta.tracked_layers.size()) {
      throw fail(sw + ".layers", "has " + std::to_string(layers.size()) + " entries, tracked_layers has " +
                                     std::to_string(meta.tracked_layers.size()));
    }
    for (size_t li = 0; li < layers.size(); ++li) {
      const std::string lw = sw + ".layers[" + std::to_string(li) + "]";
      const auto& jl = layers[li];
      if (!jl.is_object()) throw fail(lw, "not an object");
      if (!jl.contains("layer") || !jl["layer"].is_number_integer()) throw fail(lw + ".layer", "missing");
      const int layer = jl["layer"].get<int>();
      if (!meta.tracks(layer)) throw fail(lw + ".layer", "layer " + std::to_string(layer) + " is not in tracked_layers");
      if (layer != meta.tracked_layers[li]) throw fail(lw + ".layer", "layers out of tracked order");
      if (!jl.contains("id") || !jl["id"].is_number_integer() || jl["id"].get<int64_t>() < 0) {
        throw fail(lw + ".id", "missing or not a non-negative integer");
      }
      LayerReading rd;
      rd.layer = layer;
      rd.token = jl["id"].get<TokenId>();
      if (jl.contains("text")) {
        if (!jl["text"].is_string()) throw fail(lw + ".text", "not a string");
        rd.text = jl["text"].get<std::string>();
      } else if (jl.contains("hex")) {
        auto bytes = jl["hex"].is_string() ? trace_detail::from_hex(jl["hex"].get<std::string>()) : std::nullopt;
        if (!bytes) throw fail(lw + ".hex", "not a lowercase hex string");
        rd.text = *bytes;
      } else {
        throw fail(lw, "needs 'text' or 'hex'");
      }
      if (!jl.contains("p") || !jl["p"].is_number()) throw fail(lw + ".p", "missing or not a number");
      rd.prob = jl["p"].get<double>();
      if (!(rd.prob > 0.0 && rd.prob <= 1.0)) throw fail(lw + ".p", "probability outside (0, 1]");
      ls.per_layer.push_back(std::move(rd));
    }
    if (meta.tracks(meta.n_layers)) {
      const LayerReading* last = ls.reading(meta.n_layers);
      if (last && last->token != ls.final_token) {
        throw fail(sw + ".final", "final token differs from the final layer's token");
      }
    }
    t.steps.push_back(std::move(ls));
  }
  if (r.contains("ext_lid")) {
    if (!r["ext_lid"].is_array()) throw fail("ext_lid", "not an array");
    for (size_t i = 0; i < r["ext_lid"].size(); ++i) {
      const auto& e = r["ext_lid"][i];
      const std::string ew = "ext_lid[" + std::to_string(i) + "]";
      if (!e.is_object() || !e.contains("layer") || !e["layer"].is_number_integer()) throw fail(ew + ".layer", "missing");
      const int layer = e["layer"].get<int>();
      if (!meta.tracks(layer)) throw fail(ew + ".layer", "layer " + std::to_string(layer) + " is not in tracked_layers");
      if (!e.contains("lang") || !e["lang"].is_string() || e["lang"].get<std::string>().empty()) {
        throw fail(ew + ".lang", "missing or empty");
      }
      if (!t.external_lid.emplace(layer, e["lang"].get<std::string>()).second) {
        throw fail(ew + ".layer", "duplicate layer");
      }
    }
  }
  return t;
}

/// Streaming reader: holds one record at a time.
class TraceReader {
 public:
  explicit TraceReader(const std::filesystem::path& path) : path_(path) {
    if (!std::filesystem::exists(path)) throw IoError("trace file not found: " + path.string());
    file_ = gzopen(path.string().c_str(), "rb");
    if (!file_) throw IoError("cannot open trace file " + path.string());
    auto line = next_line();
    if (!line) throw ParseError("header: file is empty");
    nlohmann::ordered_json h;
    try {
      h = nlohmann::ordered_json::parse(*line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("header: line 1 is not valid JSON: ") + e.what());
    }
    meta_ = meta_from_header(h);
  }

  TraceReader(const TraceReader&) = delete;
  TraceReader& operator=(const TraceReader&) = delete;
  ~TraceReader() {
    if (file_) gzclose(file_);
  }

  const TraceMeta& meta() const { return meta_; }

  /// Next record, or nullopt at end of file.
  std::optional<InstanceTrace> next() {
    auto line = next_line();
    while (line && line->empty()) line = next_line();
    if (!line) return std::nullopt;
    ++record_;
    nlohmann::json r;
    try {
      r = nlohmann::json::parse(*line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError("record " + std::to_string(record_) + " (line " + std::to_string(line_no_) +
                       "): malformed JSON: " + e.what());
    }
    return trace_from_json(r, meta_, record_);
  }

  size_t line_number() const { return line_no_; }
  size_t record_number() const { return record_; }

 private:
  std::optional<std::string> next_line() {
    std::string line;
    char buf[8192];
    bool got = false;
    while (gzgets(file_, buf, sizeof(buf))) {
      got = true;
      line += buf;
      if (!line.empty() && line.back() == '\n') break;
    }
    int err = 0;
    gzerror(file_, &err);
    if (err != Z_OK && err != Z_STREAM_END) {
      throw ParseError("line " + std::to_string(line_no_ + 1) + ": decompression error");
    }
    if (!got) return std::nullopt;
    ++line_no_;
    if (!line.empty() && line.back() == '\n') line.pop_back();
    return line;
  }

  std::filesystem::path path_;
  gzFile file_ = nullptr;
  TraceMeta meta_;
  size_t line_no_ = 0;
  size_t record_ = 0;
};

/// Read everything into memory (convenience for analysis).
inline std::pair<TraceMeta, std::vector<InstanceTrace>> read_traces(const std::filesystem::path& path) {
  TraceReader reader(path);
  std::vector<InstanceTrace> out;
  while (auto t = reader.next()) out.push_back(std::move(*t));
  return {reader.meta(), std::move(out)};
}

/// Serialize header + records exactly as written to disk.
inline std::string encode_traces(const TraceMeta& meta, const std::vector<InstanceTrace>& traces) {
  validate_tracked_layers(meta.tracked_layers, meta.n_layers);
  std::string out = header_line(meta) + "\n";
  std::unordered_set<std::string> ids;
  for (size_t i = 0; i < traces.size(); ++i) {
    const auto& t = traces[i];
    if (!ids.insert(t.instance_id).second) {
      throw ValidationError("record " + std::to_string(i + 1) + ": field 'instance_id': duplicate id '" +
                            t.instance_id + "'");
    }
    auto j = trace_to_json(t);
    trace_from_json(nlohmann::json::parse(j.dump()), meta, i + 1);
    out += j.dump();
    out += "\n";
  }
  return out;
}

/// Atomic write (temp file + rename). Equal inputs give byte-identical files.
inline void write_traces(const std::filesystem::path& path, const TraceMeta& meta,
                         const std::vector<InstanceTrace>& traces) {
  const std::string bytes = encode_traces(meta, traces);
  if (!trace_detail::ends_with_gz(path)) {
    detail::write_file_atomic(path, bytes);
    return;
  }
  auto tmp = path;
  tmp += ".tmp";
  gzFile f = gzopen(tmp.string().c_str(), "wb9");
  if (!f) throw IoError("cannot write " + tmp.string());
  const int wrote = bytes.empty() ? 0 : gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
  const int closed = gzclose(f);
  if (wrote != static_cast<int>(bytes.size()) || closed != Z_OK) {
    std::filesystem::remove(tmp);
    throw IoError("write failed for " + path.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw IoError("cannot move " + tmp.string() + " into place: " + ec.message());
  }
}

struct Finding {
  size_t record = 0;  ///< 0 for the header
  size_t line = 0;
  std::string message;
  bool fatal = false;
};

struct ValidationReport {
  std::vector<Finding> findings;
  size_t records = 0;
  std::optional<TraceMeta> meta;

  bool ok() const { return findings.empty(); }
  bool fatal() const {
    return std::any_of(findings.begin(), findings.end(), [](const Finding& f) { return f.fatal; });
  }
};

/// Full scan listing every problem. A bad or unsupported header is fatal
/// and stops the scan.
inline ValidationReport validate_trace_file(const std::filesystem::path& path) {
  ValidationReport report;
  if (!std::filesystem::exists(path)) {
    report.findings.push_back({0, 0, "file not found: " + path.string(), true});
    return report;
  }
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) {
    report.findings.push_back({0, 0, "cannot open " + path.string(), true});
    return report;
  }
  std::vector<std::string> pending;
  std::string line;
  char buf[8192];
  size_t line_no = 0;
  std::unordered_set<std::string> ids;
  auto process = [&](const std::string& l) {
    ++line_no;
    if (line_no == 1) {
      try {
        bool fatal = true;
        try {
          report.meta = meta_from_header(nlohmann::ordered_json::parse(l), &fatal);
        } catch (const ParseError& e) {
          report.findings.push_back({0, 1, e.what(), true});
        }
      } catch (const nlohmann::json::parse_error& e) {
        report.findings.push_back({0, 1, std::string("header is not valid JSON: ") + e.what(), true});
      }
      return;
    }
    if (!report.meta || l.empty()) return;
    const size_t rec = ++report.records;
    try {
      auto t = trace_from_json(nlohmann::json::parse(l), *report.meta, rec);
      if (!ids.insert(t.instance_id).second) {
        report.findings.push_back({rec, line_no, "record " + std::to_string(rec) +
                                                    ": field 'instance_id': duplicate id '" + t.instance_id + "'"});
      }
    } catch (const nlohmann::json::parse_error& e) {
      report.findings.push_back({rec, line_no, "record " + std::to_string(rec) + ": malformed JSON: " + e.what()});
    } catch (const Error& e) {
      report.findings.push_back({rec, line_no, e.what()});
    }
  };
  while (gzgets(f, buf, sizeof(buf))) {
    line += buf;
    if (!line.empty() && line.back() == '\n') {
      line.pop_back();
      process(line);
      line.clear();
      if (report.fatal()) break;
    }
  }
  if (!line.empty() && !report.fatal()) process(line);
  int err = 0;
  gzerror(f, &err);
  if (err != Z_OK && err != Z_STREAM_END) {
    report.findings.push_back({report.records, line_no, "decompression error (truncated archive?)", false});
  }
  gzclose(f);
  if (line_no == 0) report.findings.push_back({0, 0, "file is empty (no header)", true});
  return report;
}

}  // namespace tlens
