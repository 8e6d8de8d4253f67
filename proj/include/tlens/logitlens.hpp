#pragma once

// Logit lens over the reference model and iterative multi-token lens
// decoding: the final layer's greedy token drives the context, and every
// tracked layer is read out through the shared final norm + unembedding at
// each step.

#include <algorithm>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tlens/errors.hpp"
#include "tlens/lexicon.hpp"
#include "tlens/model.hpp"

namespace tlens {

inline constexpr std::string_view kTraceSchemaVersion = "1.0";

struct LayerReading {
  int layer = 0;
  TokenId token = 0;
  std::string text;  ///< raw token bytes (may be a partial UTF-8 sequence)
  double prob = 0.0; ///< top-1 probability under the lens distribution

  friend bool operator==(const LayerReading&, const LayerReading&) = default;
};

struct LensStep {
  size_t step_index = 0;
  TokenId final_token = 0;
  std::vector<LayerReading> per_layer;  ///< one per tracked layer, in tracked order

  const LayerReading* reading(int layer) const {
    for (const auto& r : per_layer) {
      if (r.layer == layer) return &r;
    }
    return nullptr;
  }

  friend bool operator==(const LensStep&, const LensStep&) = default;
};

struct TraceMeta {
  std::string schema_version{kTraceSchemaVersion};
  std::string model_name;
  int n_layers = 0;
  std::vector<int> tracked_layers;
  std::string tokenizer_id;
  NormKind norm_kind = NormKind::rms;
  /// Free-form run provenance (prompt template, max_steps, ...).
  nlohmann::ordered_json provenance = nlohmann::ordered_json::object();

  bool tracks(int layer) const {
    return std::find(tracked_layers.begin(), tracked_layers.end(), layer) != tracked_layers.end();
  }

  friend bool operator==(const TraceMeta&, const TraceMeta&) = default;
};

struct InstanceTrace {
  std::string instance_id;
  std::string concept_id;
  LanguageCode source_lang;
  LanguageCode target_lang;
  std::string prompt;
  std::vector<LensStep> steps;
  /// Language tags produced by an external LID model, keyed by layer.
  std::map<int, std::string> external_lid;
  TraceMeta meta;

  friend bool operator==(const InstanceTrace&, const InstanceTrace&) = default;
};

/// Tracked layers must be strictly increasing, within [1, L] and include L.
inline void validate_tracked_layers(std::span<const int> layers, int n_layers) {
  if (layers.empty()) throw ArgumentError("tracked layers: empty");
  for (size_t i = 0; i < layers.size(); ++i) {
    if (layers[i] < 1 || layers[i] > n_layers) {
      throw ArgumentError("tracked layers: layer " + std::to_string(layers[i]) + " outside [1, " +
                          std::to_string(n_layers) + "]");
    }
    if (i > 0 && layers[i] <= layers[i - 1]) throw ArgumentError("tracked layers: not strictly increasing");
  }
  if (layers.back() != n_layers) throw ArgumentError("tracked layers: must include the final layer " + std::to_string(n_layers));
}

/// Parse a layer spec against a model depth: "last:K", "all", or a comma
/// list of layers and ranges ("1,4-8"). "last:K" with K > L tracks all layers.
inline std::vector<int> parse_layer_spec(std::string_view spec, int n_layers) {
  std::vector<int> out;
  auto to_int = [&](std::string_view s) {
    try {
      size_t used = 0;
      int v = std::stoi(std::string(s), &used);
      if (used != s.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw ArgumentError("layer spec '" + std::string(spec) + "': bad number '" + std::string(s) + "'");
    }
  };
  if (spec == "all") {
    for (int l = 1; l <= n_layers; ++l) out.push_back(l);
  } else if (spec.starts_with("last:")) {
    const int k = to_int(spec.substr(5));
    if (k < 1) throw ArgumentError("layer spec '" + std::string(spec) + "': K must be >= 1");
    for (int l = std::max(1, n_layers - k + 1); l <= n_layers; ++l) out.push_back(l);
  } else {
    std::string s(spec);
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) {
      auto dash = part.find('-');
      if (dash == std::string::npos) {
        out.push_back(to_int(part));
      } else {
        const int a = to_int(std::string_view(part).substr(0, dash));
        const int b = to_int(std::string_view(part).substr(dash + 1));
        for (int l = a; l <= b; ++l) out.push_back(l);
      }
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
  }
  validate_tracked_layers(out, n_layers);
  return out;
}

/// p_i(. | x) = softmax(W_u . norm(h_i(x))).
inline std::vector<double> lens_distribution(std::span<const float> hidden, const FinalHead& head) {
  auto logits = head_logits(head, hidden);
  return softmax(logits);
}

inline std::vector<double> lens_distribution(std::span<const float> hidden, const ModelBundle& bundle) {
  return lens_distribution(hidden, bundle.head());
}

/// Greedy read-out of one hidden state: (argmax token, its probability).
inline std::pair<TokenId, double> lens_token(std::span<const float> hidden, const FinalHead& head) {
  auto p = lens_distribution(hidden, head);
  const size_t best = argmax(std::span<const double>(p));
  return {static_cast<TokenId>(best), p[best]};
}

inline std::pair<TokenId, double> lens_token(std::span<const float> hidden, const ModelBundle& bundle) {
  return lens_token(hidden, bundle.head());
}

inline TraceMeta make_trace_meta(const ModelBundle& bundle, std::vector<int> tracked_layers) {
  TraceMeta meta;
  meta.model_name = bundle.config().name;
  meta.n_layers = bundle.config().n_layers;
  meta.tracked_layers = std::move(tracked_layers);
  meta.tokenizer_id = bundle.tokenizer().id();
  meta.norm_kind = bundle.config().norm_kind;
  return meta;
}

/// Default stop set for word tasks: eos plus every newline-bearing token.
inline std::vector<TokenId> default_stop_tokens(const Tokenizer& tok) {
  std::vector<TokenId> out{kEosId};
  for (TokenId t : tok.newline_tokens()) out.push_back(t);
  return out;
}

/// Iterative lens decoding. Step t sees prompt + final tokens 0..t-1; the
/// run ends before a stop token, or after `max_steps`. All tracked layers
/// share the final output's step count. Identity fields (instance id,
/// languages, prompt text) are left for the caller.
inline InstanceTrace iterative_lens_decode(const ModelBundle& bundle, std::span<const TokenId> prompt_tokens,
                                           std::span<const int> tracked_layers, size_t max_steps,
                                           std::span<const TokenId> stop_tokens) {
  if (max_steps < 1) throw ArgumentError("iterative_lens_decode: max_steps must be >= 1");
  const auto& config = bundle.config();
  validate_tracked_layers(tracked_layers, config.n_layers);
  check_decode_budget(config, prompt_tokens.size(), max_steps);

  InstanceTrace trace;
  trace.meta = make_trace_meta(bundle, std::vector<int>(tracked_layers.begin(), tracked_layers.end()));
  const FinalHead head = bundle.head();
  const Tokenizer& tok = bundle.tokenizer();

  DecodeSession session(bundle);
  StepOutput out;
  for (TokenId t : prompt_tokens) out = session.append(t);
  for (size_t step = 0; step < max_steps; ++step) {
    const auto final_token = static_cast<TokenId>(argmax(std::span<const double>(out.logits)));
    if (is_stop(final_token, stop_tokens)) break;
    LensStep ls;
    ls.step_index = step;
    ls.final_token = final_token;
    for (int layer : tracked_layers) {
      auto [id, prob] = lens_token(out.hidden[static_cast<size_t>(layer - 1)], head);
      ls.per_layer.push_back(LayerReading{layer, id, tok.valid_id(id) ? tok.text(id) : std::string(), prob});
    }
    trace.steps.push_back(std::move(ls));
    if (step + 1 < max_steps) out = session.append(final_token);
  }
  return trace;
}

/// Raw byte concatenation of one layer's tokens across all steps.
inline std::string layer_output_bytes(const InstanceTrace& trace, int layer) {
  if (!trace.meta.tracks(layer)) {
    throw LookupError("layer " + std::to_string(layer) + " is not tracked in trace '" + trace.instance_id + "'");
  }
  std::string out;
  for (const auto& step : trace.steps) {
    const LayerReading* r = step.reading(layer);
    if (!r) {
      throw LookupError("trace '" + trace.instance_id + "' step " + std::to_string(step.step_index) +
                        " lacks layer " + std::to_string(layer));
    }
    out += r->text;
  }
  return out;
}

/// O(l_i): the layer's detokenized text (ill-formed UTF-8 replaced by U+FFFD).
inline std::string layer_output(const InstanceTrace& trace, int layer) {
  return unicode::sanitize(layer_output_bytes(trace, layer));
}

inline std::vector<TokenId> final_tokens(const InstanceTrace& trace) {
  std::vector<TokenId> out;
  out.reserve(trace.steps.size());
  for (const auto& s : trace.steps) out.push_back(s.final_token);
  return out;
}

}  // namespace tlens
