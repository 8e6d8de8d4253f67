#pragma once

// Desk-scale pre-norm decoder-only transformer with per-layer hidden state
// exposure. Weights are float; norms, attention weights and softmax
// accumulate in double. Every position is computed by the same routine, so
// a full forward pass and incremental decoding agree bit for bit.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "tlens/errors.hpp"
#include "tlens/tokenizer.hpp"

namespace tlens {

enum class NormKind { rms, layer };

inline std::string_view to_string(NormKind k) { return k == NormKind::rms ? "rms" : "layer"; }

inline NormKind parse_norm_kind(std::string_view s) {
  if (s == "rms") return NormKind::rms;
  if (s == "layer") return NormKind::layer;
  throw ArgumentError("unknown norm kind '" + std::string(s) + "' (expected rms or layer)");
}

struct ModelConfig {
  int n_layers = 8;
  int d_model = 128;
  int n_heads = 4;
  int vocab_size = 512;
  int max_context = 256;
  int d_ff = 0;  ///< 0 means 4 * d_model
  NormKind norm_kind = NormKind::rms;
  uint64_t seed = 0;
  double norm_eps = 1e-6;
  std::string name = "tlens-ref";

  int ffn_dim() const { return d_ff > 0 ? d_ff : 4 * d_model; }
  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers < 2) throw ArgumentError("model config: n_layers must be >= 2");
    if (d_model <= 0 || n_heads <= 0) throw ArgumentError("model config: d_model and n_heads must be positive");
    if (d_model % n_heads != 0) {
      throw ArgumentError("model config: d_model (" + std::to_string(d_model) +
                          ") is not divisible by n_heads (" + std::to_string(n_heads) + ")");
    }
    if (vocab_size < kNumSpecial) throw ArgumentError("model config: vocab_size must be >= 4");
    if (max_context <= 0) throw ArgumentError("model config: max_context must be positive");
    if (d_ff < 0) throw ArgumentError("model config: d_ff must be >= 0");
    if (!(norm_eps > 0.0)) throw ArgumentError("model config: norm_eps must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct TensorSpec {
  std::string name;
  std::vector<size_t> shape;
  size_t offset = 0;  ///< in floats, into the bundle's flat buffer
  size_t count = 0;

  friend bool operator==(const TensorSpec&, const TensorSpec&) = default;
};

/// The final normalization and unembedding, as used by both the model head
/// and the logit lens.
struct FinalHead {
  NormKind kind = NormKind::rms;
  double eps = 1e-6;
  std::span<const float> gain;
  std::span<const float> bias;  ///< empty for rms
  std::span<const float> unembedding;  ///< vocab x d, row-major
  size_t vocab = 0;
  size_t d_model = 0;
};

struct LayerView {
  std::span<const float> attn_norm_gain, attn_norm_bias;
  std::span<const float> wq, wk, wv, wo;  ///< d x d, [in][out]
  std::span<const float> mlp_norm_gain, mlp_norm_bias;
  std::span<const float> w_in;   ///< d x ff
  std::span<const float> w_out;  ///< ff x d
};

class ModelBundle {
 public:
  ModelBundle() = default;

  /// Zero-filled bundle with the tensor layout implied by `config`.
  ModelBundle(ModelConfig config, Tokenizer tokenizer)
      : config_(std::move(config)), tokenizer_(std::move(tokenizer)) {
    config_.validate();
    config_.d_ff = config_.ffn_dim();
    if (tokenizer_.vocab_size() > static_cast<size_t>(config_.vocab_size)) {
      throw ArgumentError("model config: tokenizer has " + std::to_string(tokenizer_.vocab_size()) +
                          " tokens but vocab_size is " + std::to_string(config_.vocab_size));
    }
    const size_t d = static_cast<size_t>(config_.d_model);
    const size_t v = static_cast<size_t>(config_.vocab_size);
    const size_t ff = static_cast<size_t>(config_.ffn_dim());
    const bool with_bias = config_.norm_kind == NormKind::layer;
    add("tok_embedding", {v, d});
    add("pos_embedding", {static_cast<size_t>(config_.max_context), d});
    for (int l = 0; l < config_.n_layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      add(p + "attn_norm.gain", {d});
      if (with_bias) add(p + "attn_norm.bias", {d});
      add(p + "attn.wq", {d, d});
      add(p + "attn.wk", {d, d});
      add(p + "attn.wv", {d, d});
      add(p + "attn.wo", {d, d});
      add(p + "mlp_norm.gain", {d});
      if (with_bias) add(p + "mlp_norm.bias", {d});
      add(p + "mlp.w_in", {d, ff});
      add(p + "mlp.w_out", {ff, d});
    }
    add("final_norm.gain", {d});
    if (with_bias) add("final_norm.bias", {d});
    add("unembedding", {v, d});
    data_.assign(total_, 0.0f);
    for (const auto& t : tensors_) {
      if (t.name.ends_with(".gain")) std::fill_n(data_.begin() + static_cast<long>(t.offset), t.count, 1.0f);
    }
  }

  const ModelConfig& config() const { return config_; }
  const Tokenizer& tokenizer() const { return tokenizer_; }
  const std::vector<TensorSpec>& tensors() const { return tensors_; }
  std::span<const float> data() const { return data_; }
  std::span<float> mutable_data() { return data_; }

  bool has_tensor(const std::string& name) const { return index_.count(name) > 0; }

  const TensorSpec& spec(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw LookupError("model has no tensor '" + name + "'");
    return tensors_[it->second];
  }

  std::span<const float> tensor(const std::string& name) const {
    const auto& s = spec(name);
    return std::span<const float>(data_).subspan(s.offset, s.count);
  }

  std::span<float> mutable_tensor(const std::string& name) {
    const auto& s = spec(name);
    return std::span<float>(data_).subspan(s.offset, s.count);
  }

  std::span<const float> tensor_or_empty(const std::string& name) const {
    return has_tensor(name) ? tensor(name) : std::span<const float>{};
  }

  LayerView layer(int l) const {
    const std::string p = "layers." + std::to_string(l) + ".";
    return LayerView{tensor(p + "attn_norm.gain"), tensor_or_empty(p + "attn_norm.bias"),
                     tensor(p + "attn.wq"),         tensor(p + "attn.wk"),
                     tensor(p + "attn.wv"),         tensor(p + "attn.wo"),
                     tensor(p + "mlp_norm.gain"),  tensor_or_empty(p + "mlp_norm.bias"),
                     tensor(p + "mlp.w_in"),        tensor(p + "mlp.w_out")};
  }

  FinalHead head() const {
    return FinalHead{config_.norm_kind,
                     config_.norm_eps,
                     tensor("final_norm.gain"),
                     tensor_or_empty("final_norm.bias"),
                     tensor("unembedding"),
                     static_cast<size_t>(config_.vocab_size),
                     static_cast<size_t>(config_.d_model)};
  }

  /// FNV-1a over the raw weight bytes.
  uint64_t checksum() const {
    uint64_t h = 1469598103934665603ULL;
    const auto* bytes = reinterpret_cast<const unsigned char*>(data_.data());
    for (size_t i = 0; i < data_.size() * sizeof(float); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
    return h;
  }

 private:
  void add(std::string name, std::vector<size_t> shape) {
    size_t count = std::accumulate(shape.begin(), shape.end(), size_t{1}, std::multiplies<>());
    index_.emplace(name, tensors_.size());
    tensors_.push_back(TensorSpec{std::move(name), std::move(shape), total_, count});
    total_ += count;
  }

  ModelConfig config_;
  Tokenizer tokenizer_;
  std::vector<TensorSpec> tensors_;
  std::unordered_map<std::string, size_t> index_;
  std::vector<float> data_;
  size_t total_ = 0;
};

// ---------------------------------------------------------------------------
// Kernels

/// Normalize `x` (RMSNorm or LayerNorm) and apply gain/bias, in double.
inline std::vector<double> apply_norm(NormKind kind, double eps, std::span<const float> x,
                                      std::span<const float> gain, std::span<const float> bias) {
  const size_t d = x.size();
  if (gain.size() != d || (!bias.empty() && bias.size() != d)) {
    throw ShapeError("norm: parameter width does not match input width " + std::to_string(d));
  }
  std::vector<double> out(d);
  if (kind == NormKind::rms) {
    double ms = 0.0;
    for (float v : x) ms += static_cast<double>(v) * v;
    ms /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(ms + eps);
    for (size_t i = 0; i < d; ++i) out[i] = static_cast<double>(x[i]) * inv * gain[i];
  } else {
    double mean = 0.0;
    for (float v : x) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (float v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (size_t i = 0; i < d; ++i) {
      out[i] = (static_cast<double>(x[i]) - mean) * inv * gain[i] + (bias.empty() ? 0.0 : bias[i]);
    }
  }
  return out;
}

/// Numerically stable softmax in double.
inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.size());
  if (logits.empty()) return p;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

/// Index of the largest entry; ties resolve to the lowest index.
template <typename T>
inline size_t argmax(std::span<const T> values) {
  size_t best = 0;
  for (size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

/// W_u . norm(h), with the final-norm parameters of `head`.
inline std::vector<double> head_logits(const FinalHead& head, std::span<const float> h) {
  if (h.size() != head.d_model) {
    throw ShapeError("hidden state has width " + std::to_string(h.size()) + ", expected " +
                     std::to_string(head.d_model));
  }
  std::vector<double> normed = apply_norm(head.kind, head.eps, h, head.gain, head.bias);
  std::vector<double> logits(head.vocab, 0.0);
  for (size_t v = 0; v < head.vocab; ++v) {
    const float* row = head.unembedding.data() + v * head.d_model;
    double acc = 0.0;
    for (size_t k = 0; k < head.d_model; ++k) acc += static_cast<double>(row[k]) * normed[k];
    logits[v] = acc;
  }
  return logits;
}

namespace detail {

/// y = x W for W stored [in][out]; accumulation order is fixed (k ascending).
inline void matvec(std::span<const float> x, std::span<const float> w, size_t out_dim, float* y) {
  std::fill_n(y, out_dim, 0.0f);
  for (size_t k = 0; k < x.size(); ++k) {
    const float xk = x[k];
    const float* row = w.data() + k * out_dim;
    for (size_t j = 0; j < out_dim; ++j) y[j] += xk * row[j];
  }
}

inline float gelu(float x) {
  constexpr float kC = 0.7978845608028654f;  // sqrt(2/pi)
  return 0.5f * x * (1.0f + std::tanh(kC * (x + 0.044715f * x * x * x)));
}

inline std::vector<float> to_float(const std::vector<double>& v) {
  return std::vector<float>(v.begin(), v.end());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Inference

/// Outputs of one position: the residual stream after every layer and the
/// model's next-token logits.
struct StepOutput {
  std::vector<std::vector<float>> hidden;  ///< n_layers x d_model
  std::vector<double> logits;              ///< vocab
};

/// Incremental decoder owning its key/value cache. Sessions are independent;
/// the bundle is only read.
class DecodeSession {
 public:
  explicit DecodeSession(const ModelBundle& bundle) : bundle_(&bundle) {
    const auto& c = bundle.config();
    const size_t per_layer = static_cast<size_t>(c.max_context) * static_cast<size_t>(c.d_model);
    keys_.assign(static_cast<size_t>(c.n_layers), std::vector<float>(per_layer));
    values_.assign(static_cast<size_t>(c.n_layers), std::vector<float>(per_layer));
    for (int l = 0; l < c.n_layers; ++l) layers_.push_back(bundle.layer(l));
  }

  size_t length() const { return length_; }

  StepOutput append(TokenId token) {
    const auto& c = bundle_->config();
    if (length_ >= static_cast<size_t>(c.max_context)) {
      throw ContextLengthError("sequence exceeds max_context " + std::to_string(c.max_context));
    }
    if (token < 0 || token >= c.vocab_size) {
      throw VocabularyError("token id " + std::to_string(token) + " outside vocabulary of size " +
                            std::to_string(c.vocab_size));
    }
    const size_t d = static_cast<size_t>(c.d_model);
    const size_t ff = static_cast<size_t>(c.ffn_dim());
    const size_t nh = static_cast<size_t>(c.n_heads);
    const size_t hd = d / nh;
    const size_t pos = length_;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    auto tok = bundle_->tensor("tok_embedding").subspan(static_cast<size_t>(token) * d, d);
    auto pe = bundle_->tensor("pos_embedding").subspan(pos * d, d);
    std::vector<float> x(d);
    for (size_t i = 0; i < d; ++i) x[i] = tok[i] + pe[i];

    StepOutput out;
    out.hidden.reserve(layers_.size());
    std::vector<float> q(d), tmp(d), attn(d), hidden_ff(ff);
    std::vector<double> scores(pos + 1);
    for (size_t l = 0; l < layers_.size(); ++l) {
      const LayerView& w = layers_[l];
      auto a = detail::to_float(apply_norm(c.norm_kind, c.norm_eps, x, w.attn_norm_gain, w.attn_norm_bias));
      float* kp = keys_[l].data() + pos * d;
      float* vp = values_[l].data() + pos * d;
      detail::matvec(a, w.wq, d, q.data());
      detail::matvec(a, w.wk, d, kp);
      detail::matvec(a, w.wv, d, vp);
      for (size_t h = 0; h < nh; ++h) {
        const size_t off = h * hd;
        for (size_t j = 0; j <= pos; ++j) {
          const float* kj = keys_[l].data() + j * d + off;
          double acc = 0.0;
          for (size_t e = 0; e < hd; ++e) acc += static_cast<double>(q[off + e]) * kj[e];
          scores[j] = acc * scale;
        }
        auto probs = softmax(std::span<const double>(scores.data(), pos + 1));
        for (size_t e = 0; e < hd; ++e) {
          double acc = 0.0;
          for (size_t j = 0; j <= pos; ++j) acc += probs[j] * values_[l][j * d + off + e];
          attn[off + e] = static_cast<float>(acc);
        }
      }
      detail::matvec(attn, w.wo, d, tmp.data());
      for (size_t i = 0; i < d; ++i) x[i] += tmp[i];

      auto b = detail::to_float(apply_norm(c.norm_kind, c.norm_eps, x, w.mlp_norm_gain, w.mlp_norm_bias));
      detail::matvec(b, w.w_in, ff, hidden_ff.data());
      for (float& u : hidden_ff) u = detail::gelu(u);
      detail::matvec(hidden_ff, w.w_out, d, tmp.data());
      for (size_t i = 0; i < d; ++i) x[i] += tmp[i];
      out.hidden.push_back(x);
    }
    out.logits = head_logits(bundle_->head(), x);
    ++length_;
    return out;
  }

 private:
  const ModelBundle* bundle_;
  std::vector<LayerView> layers_;
  std::vector<std::vector<float>> keys_, values_;
  size_t length_ = 0;
};

/// Per-layer outputs h_1..h_L over all positions; layer L is the residual
/// stream before the final norm.
class HiddenStates {
 public:
  HiddenStates(size_t n_layers, size_t n_positions, size_t d_model)
      : n_layers_(n_layers), n_positions_(n_positions), d_model_(d_model),
        data_(n_layers * n_positions * d_model) {}

  size_t n_layers() const { return n_layers_; }
  size_t n_positions() const { return n_positions_; }
  size_t d_model() const { return d_model_; }

  /// `layer` is 1-based.
  std::span<const float> at(size_t layer, size_t position) const {
    check(layer, position);
    return std::span<const float>(data_).subspan(offset(layer, position), d_model_);
  }

  std::span<float> at(size_t layer, size_t position) {
    check(layer, position);
    return std::span<float>(data_).subspan(offset(layer, position), d_model_);
  }

 private:
  void check(size_t layer, size_t position) const {
    if (layer < 1 || layer > n_layers_ || position >= n_positions_) {
      throw LookupError("hidden state index (layer " + std::to_string(layer) + ", position " +
                        std::to_string(position) + ") out of range");
    }
  }
  size_t offset(size_t layer, size_t position) const {
    return ((layer - 1) * n_positions_ + position) * d_model_;
  }

  size_t n_layers_, n_positions_, d_model_;
  std::vector<float> data_;
};

struct ForwardResult {
  HiddenStates hidden;
  std::vector<double> final_logits;  ///< next-token logits after the last position
};

inline ForwardResult forward(const ModelBundle& bundle, std::span<const TokenId> tokens) {
  const auto& c = bundle.config();
  if (tokens.empty()) throw ArgumentError("forward: empty token sequence");
  if (tokens.size() > static_cast<size_t>(c.max_context)) {
    throw ContextLengthError("forward: " + std::to_string(tokens.size()) + " tokens exceed max_context " +
                             std::to_string(c.max_context));
  }
  for (TokenId t : tokens) {
    if (t < 0 || t >= c.vocab_size) {
      throw VocabularyError("forward: token id " + std::to_string(t) + " outside vocabulary");
    }
  }
  DecodeSession session(bundle);
  ForwardResult result{HiddenStates(static_cast<size_t>(c.n_layers), tokens.size(),
                                    static_cast<size_t>(c.d_model)),
                       {}};
  for (size_t p = 0; p < tokens.size(); ++p) {
    StepOutput step = session.append(tokens[p]);
    for (size_t l = 0; l < step.hidden.size(); ++l) {
      std::copy(step.hidden[l].begin(), step.hidden[l].end(), result.hidden.at(l + 1, p).begin());
    }
    if (p + 1 == tokens.size()) result.final_logits = std::move(step.logits);
  }
  return result;
}

inline bool is_stop(TokenId t, std::span<const TokenId> stop_tokens) {
  return std::find(stop_tokens.begin(), stop_tokens.end(), t) != stop_tokens.end();
}

inline void check_decode_budget(const ModelConfig& c, size_t prompt_len, size_t max_new) {
  if (prompt_len == 0) throw ArgumentError("decode: empty prompt");
  if (prompt_len + max_new > static_cast<size_t>(c.max_context)) {
    throw ContextLengthError("decode: prompt of " + std::to_string(prompt_len) + " tokens plus " +
                             std::to_string(max_new) + " new tokens exceeds max_context " +
                             std::to_string(c.max_context));
  }
}

/// Greedy continuation of `prompt`. Stops before emitting a stop token or
/// after `max_new` tokens; the stop token is not part of the result.
inline std::vector<TokenId> greedy_decode(const ModelBundle& bundle, std::span<const TokenId> prompt,
                                          size_t max_new,
                                          std::span<const TokenId> stop_tokens = std::span<const TokenId>(&kEosId, 1)) {
  check_decode_budget(bundle.config(), prompt.size(), max_new);
  std::vector<TokenId> out;
  if (max_new == 0) return out;
  DecodeSession session(bundle);
  StepOutput step;
  for (TokenId t : prompt) step = session.append(t);
  while (true) {
    const auto next = static_cast<TokenId>(argmax(std::span<const double>(step.logits)));
    if (is_stop(next, stop_tokens)) break;
    out.push_back(next);
    if (out.size() == max_new) break;
    step = session.append(next);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Initialization

/// Deterministic weights from config.seed. Uses mt19937_64 (fully specified
/// by the standard) and uniform draws, so bundles match across platforms.
inline ModelBundle init_seeded(const ModelConfig& config, Tokenizer tokenizer = Tokenizer::byte_level()) {
  ModelBundle bundle(config, std::move(tokenizer));
  std::mt19937_64 rng(config.seed);
  auto fill = [&](const std::string& name, double stddev) {
    const double a = stddev * std::sqrt(3.0);
    for (float& v : bundle.mutable_tensor(name)) {
      const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
      v = static_cast<float>((2.0 * u - 1.0) * a);
    }
  };
  const double d = config.d_model;
  const double ff = config.ffn_dim();
  const double resid = 1.0 / std::sqrt(2.0 * config.n_layers);
  fill("tok_embedding", 1.0);
  fill("pos_embedding", 0.1);
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    fill(p + "attn.wq", 1.0 / std::sqrt(d));
    fill(p + "attn.wk", 1.0 / std::sqrt(d));
    fill(p + "attn.wv", 1.0 / std::sqrt(d));
    fill(p + "attn.wo", resid / std::sqrt(d));
    fill(p + "mlp.w_in", 1.0 / std::sqrt(d));
    fill(p + "mlp.w_out", resid / std::sqrt(ff));
  }
  fill("unembedding", 1.0 / std::sqrt(d));
  return bundle;
}

}  // namespace tlens
