#pragma once

// Small next-token trainer for the reference model: manual backprop over
// the exact architecture of model.hpp, Adam, loss on answer tokens only.
// Parameters live in one flat buffer with the bundle's tensor layout, so
// export is a cast. Templated on the scalar type: float for training
// speed, double for finite-difference gradient checks.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tlens/errors.hpp"
#include "tlens/model.hpp"

namespace tlens {

struct TrainExample {
  std::vector<TokenId> tokens;
  /// Index of the first token that is scored (the answer start). Every
  /// token from here on contributes one next-token prediction loss.
  size_t loss_from = 1;
};

struct TrainConfig {
  int epochs = 10;
  size_t batch_size = 16;
  double learning_rate = 3e-3;
  double warmup_fraction = 0.05;
  double min_lr_fraction = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;
  uint64_t shuffle_seed = 0;
};

template <typename S>
class Trainer {
 public:
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
  using MapM = Eigen::Map<Mat>;
  using CMapM = Eigen::Map<const Mat>;
  using MapV = Eigen::Map<Vec>;

  explicit Trainer(const ModelBundle& init) : bundle_(init), config_(init.config()) {
    const auto data = init.data();
    params_.assign(data.begin(), data.end());
    grads_.assign(params_.size(), S(0));
    m_.assign(params_.size(), 0.0);
    v_.assign(params_.size(), 0.0);
  }

  const ModelConfig& config() const { return config_; }
  std::vector<S>& params() { return params_; }
  const std::vector<S>& grads() const { return grads_; }

  /// Copy the trained parameters into a bundle (float32).
  ModelBundle export_bundle() const {
    ModelBundle out = bundle_;
    auto data = out.mutable_data();
    for (size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(params_[i]);
    return out;
  }

  void zero_grad() { std::fill(grads_.begin(), grads_.end(), S(0)); }

  /// Forward + backward over a batch; gradients accumulate into grads()
  /// scaled so the total is the mean loss over scored tokens. Returns
  /// (summed loss, scored token count).
  std::pair<double, size_t> accumulate(const std::vector<const TrainExample*>& batch) {
    Batch b = make_batch(batch);
    if (b.targets.empty()) return {0.0, 0};
    const double loss = run(b, S(1) / static_cast<S>(b.targets.size()), true);
    return {loss, b.targets.size()};
  }

  /// Mean loss of one example without touching gradients.
  double loss(const TrainExample& ex) {
    Batch b = make_batch({&ex});
    return run(b, S(1), false) / static_cast<double>(b.targets.size());
  }

  /// Logits at every position of `tokens` (rows = positions).
  Mat logits(const std::vector<TokenId>& tokens) {
    TrainExample ex{tokens, tokens.size()};
    Batch b = make_batch({&ex});
    Cache c = forward(b);
    Mat nf, xhat;
    Vec r;
    norm_fwd(c.x.back(), final_gain(), final_bias(), nf, xhat, r);
    return nf * tensor("unembedding", vocab(), d()).transpose();
  }

  /// One Adam step over accumulated gradients with global-norm clipping.
  void step(double lr, const TrainConfig& tc) {
    double norm2 = 0.0;
    for (S g : grads_) norm2 += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(norm2);
    const double scale = (tc.clip_norm > 0 && norm > tc.clip_norm) ? tc.clip_norm / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(tc.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(tc.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      const double g = static_cast<double>(grads_[i]) * scale;
      m_[i] = tc.beta1 * m_[i] + (1.0 - tc.beta1) * g;
      v_[i] = tc.beta2 * v_[i] + (1.0 - tc.beta2) * g * g;
      const double upd = lr * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + tc.adam_eps);
      params_[i] = static_cast<S>(static_cast<double>(params_[i]) - upd);
    }
  }

 private:
  /// Examples stacked row-wise; attention stays within each segment.
  struct Batch {
    std::vector<TokenId> tokens;
    std::vector<size_t> positions;
    std::vector<std::pair<size_t, size_t>> segments;  ///< (first row, length)
    std::vector<size_t> rows;                         ///< rows whose next token is scored
    std::vector<TokenId> targets;
  };
  struct LayerCache {
    Mat xhat1, a, q, k, v, o, xhat2, b, hpre, t, h;
    Vec r1, r2;
    std::vector<Mat> probs;  ///< segment-major, then head
  };
  struct Cache {
    std::vector<Mat> x;  ///< residual stream: x[0] embeddings, x[l+1] after layer l
    std::vector<LayerCache> layers;
  };

  size_t d() const { return static_cast<size_t>(config_.d_model); }
  size_t ff() const { return static_cast<size_t>(config_.ffn_dim()); }
  size_t vocab() const { return static_cast<size_t>(config_.vocab_size); }
  bool has_bias() const { return config_.norm_kind == NormKind::layer; }

  MapM tensor(const std::string& name, size_t rows, size_t cols) {
    return MapM(params_.data() + bundle_.spec(name).offset, static_cast<long>(rows), static_cast<long>(cols));
  }
  MapM grad(const std::string& name, size_t rows, size_t cols) {
    return MapM(grads_.data() + bundle_.spec(name).offset, static_cast<long>(rows), static_cast<long>(cols));
  }
  S* ptr(std::vector<S>& buf, const std::string& name) { return buf.data() + bundle_.spec(name).offset; }
  S* maybe_ptr(std::vector<S>& buf, const std::string& name) {
    return bundle_.has_tensor(name) ? ptr(buf, name) : nullptr;
  }
  S* final_gain() { return ptr(params_, "final_norm.gain"); }
  S* final_bias() { return maybe_ptr(params_, "final_norm.bias"); }
  static std::string lp(size_t l) { return "layers." + std::to_string(l) + "."; }

  void check_tokens(const std::vector<TokenId>& tokens) const {
    if (tokens.empty()) throw ArgumentError("trainer: empty example");
    if (tokens.size() > static_cast<size_t>(config_.max_context)) {
      throw ContextLengthError("trainer: example of " + std::to_string(tokens.size()) + " tokens exceeds max_context");
    }
    for (TokenId t : tokens) {
      if (t < 0 || t >= config_.vocab_size) throw VocabularyError("trainer: token id out of range");
    }
  }
  void check(const TrainExample& ex) const {
    check_tokens(ex.tokens);
    if (ex.loss_from < 1 || ex.loss_from > ex.tokens.size()) throw ArgumentError("trainer: bad loss_from");
  }

  void norm_fwd(const Mat& x, const S* gain, const S* bias, Mat& y, Mat& xhat, Vec& r) const {
    const long n = x.rows(), dd = x.cols();
    const S eps = static_cast<S>(config_.norm_eps);
    xhat.resize(n, dd);
    y.resize(n, dd);
    r.resize(n);
    for (long i = 0; i < n; ++i) {
      if (config_.norm_kind == NormKind::rms) {
        const S ms = x.row(i).squaredNorm() / static_cast<S>(dd);
        r(i) = S(1) / std::sqrt(ms + eps);
        xhat.row(i) = x.row(i) * r(i);
      } else {
        const S mean = x.row(i).mean();
        const S var = (x.row(i).array() - mean).square().mean();
        r(i) = S(1) / std::sqrt(var + eps);
        xhat.row(i) = (x.row(i).array() - mean) * r(i);
      }
      for (long j = 0; j < dd; ++j) y(i, j) = xhat(i, j) * gain[j] + (bias ? bias[j] : S(0));
    }
  }

  /// dx from dy for y = norm(x) * gain + bias; accumulates dgain/dbias.
  Mat norm_bwd(const Mat& dy, const Mat& xhat, const Vec& r, const S* gain, S* dgain, S* dbias) const {
    const long n = dy.rows(), dd = dy.cols();
    Mat dx(n, dd);
    Vec dxhat(dd);
    for (long i = 0; i < n; ++i) {
      for (long j = 0; j < dd; ++j) {
        dgain[j] += dy(i, j) * xhat(i, j);
        if (dbias) dbias[j] += dy(i, j);
        dxhat(j) = dy(i, j) * gain[j];
      }
      const S dot = dxhat.dot(xhat.row(i).transpose()) / static_cast<S>(dd);
      if (config_.norm_kind == NormKind::rms) {
        dx.row(i) = r(i) * (dxhat.transpose() - xhat.row(i) * dot);
      } else {
        const S mean = dxhat.mean();
        dx.row(i) = r(i) * ((dxhat.transpose().array() - mean).matrix() - xhat.row(i) * dot);
      }
    }
    return dx;
  }

  Batch make_batch(const std::vector<const TrainExample*>& examples) const {
    Batch b;
    for (const auto* ex : examples) {
      check(*ex);
      const size_t first = b.tokens.size();
      b.segments.emplace_back(first, ex->tokens.size());
      for (size_t p = 0; p < ex->tokens.size(); ++p) {
        b.tokens.push_back(ex->tokens[p]);
        b.positions.push_back(p);
        if (p + 1 >= ex->loss_from && p + 1 < ex->tokens.size()) {
          b.rows.push_back(first + p);
          b.targets.push_back(ex->tokens[p + 1]);
        }
      }
    }
    return b;
  }

  Cache forward(const Batch& batch) {
    const long N = static_cast<long>(batch.tokens.size());
    const size_t D = d(), F = ff();
    const size_t nh = static_cast<size_t>(config_.n_heads), hd = D / nh;
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
    const S c0 = static_cast<S>(0.7978845608028654), c1 = static_cast<S>(0.044715);
    Cache c;
    auto E = tensor("tok_embedding", vocab(), D);
    auto P = tensor("pos_embedding", static_cast<size_t>(config_.max_context), D);
    Mat x(N, static_cast<long>(D));
    for (long i = 0; i < N; ++i) {
      x.row(i) = E.row(batch.tokens[static_cast<size_t>(i)]) + P.row(static_cast<long>(batch.positions[static_cast<size_t>(i)]));
    }
    c.x.push_back(std::move(x));
    for (size_t l = 0; l < static_cast<size_t>(config_.n_layers); ++l) {
      const std::string pre = lp(l);
      LayerCache lc;
      norm_fwd(c.x.back(), ptr(params_, pre + "attn_norm.gain"), maybe_ptr(params_, pre + "attn_norm.bias"), lc.a,
               lc.xhat1, lc.r1);
      lc.q.noalias() = lc.a * tensor(pre + "attn.wq", D, D);
      lc.k.noalias() = lc.a * tensor(pre + "attn.wk", D, D);
      lc.v.noalias() = lc.a * tensor(pre + "attn.wv", D, D);
      lc.o.resize(N, static_cast<long>(D));
      for (const auto& [first, len] : batch.segments) {
        const long r0 = static_cast<long>(first), T = static_cast<long>(len);
        for (size_t h = 0; h < nh; ++h) {
          const long off = static_cast<long>(h * hd), w = static_cast<long>(hd);
          Mat s = lc.q.block(r0, off, T, w) * lc.k.block(r0, off, T, w).transpose() * scale;
          for (long i = 0; i < T; ++i) {
            const S mx = s.row(i).head(i + 1).maxCoeff();
            s.row(i).head(i + 1) = (s.row(i).head(i + 1).array() - mx).exp().matrix();
            s.row(i).tail(T - i - 1).setZero();
            s.row(i) /= s.row(i).sum();
          }
          lc.o.block(r0, off, T, w).noalias() = s * lc.v.block(r0, off, T, w);
          lc.probs.push_back(std::move(s));
        }
      }
      Mat mid = c.x.back();
      mid.noalias() += lc.o * tensor(pre + "attn.wo", D, D);
      norm_fwd(mid, ptr(params_, pre + "mlp_norm.gain"), maybe_ptr(params_, pre + "mlp_norm.bias"), lc.b, lc.xhat2,
               lc.r2);
      lc.hpre.noalias() = lc.b * tensor(pre + "mlp.w_in", D, F);
      lc.t = (c0 * (lc.hpre.array() + c1 * lc.hpre.array().cube())).tanh().matrix();
      lc.h = (S(0.5) * lc.hpre.array() * (S(1) + lc.t.array())).matrix();
      mid.noalias() += lc.h * tensor(pre + "mlp.w_out", F, D);
      c.x.push_back(std::move(mid));
      c.layers.push_back(std::move(lc));
    }
    return c;
  }

  /// Returns the summed loss over scored tokens; with `backward`, adds
  /// weight * dloss into grads_.
  double run(const Batch& batch, S weight, bool backward) {
    const long N = static_cast<long>(batch.tokens.size());
    const size_t D = d(), F = ff(), V = vocab();
    const size_t nh = static_cast<size_t>(config_.n_heads), hd = D / nh;
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
    const S c0 = static_cast<S>(0.7978845608028654), c1 = static_cast<S>(0.044715);
    Cache c = forward(batch);

    const long n = static_cast<long>(batch.rows.size());
    Mat xs(n, static_cast<long>(D));
    for (long i = 0; i < n; ++i) xs.row(i) = c.x.back().row(static_cast<long>(batch.rows[static_cast<size_t>(i)]));
    Mat nf, xhatf;
    Vec rf;
    norm_fwd(xs, final_gain(), final_bias(), nf, xhatf, rf);
    auto U = tensor("unembedding", V, D);
    Mat logits = nf * U.transpose();
    double loss = 0.0;
    Mat dlogits(n, static_cast<long>(V));
    for (long i = 0; i < n; ++i) {
      const TokenId target = batch.targets[static_cast<size_t>(i)];
      const S mx = logits.row(i).maxCoeff();
      auto e = (logits.row(i).array() - mx).exp();
      const S sum = e.sum();
      loss += static_cast<double>(std::log(sum) + mx - logits(i, target));
      dlogits.row(i) = (e / sum * weight).matrix();
      dlogits(i, target) -= weight;
    }
    if (!backward) return loss;

    grad("unembedding", V, D).noalias() += dlogits.transpose() * nf;
    Mat dnf = dlogits * U;
    Mat dxs = norm_bwd(dnf, xhatf, rf, final_gain(), ptr(grads_, "final_norm.gain"),
                       maybe_ptr(grads_, "final_norm.bias"));
    Mat dx = Mat::Zero(N, static_cast<long>(D));
    for (long i = 0; i < n; ++i) dx.row(static_cast<long>(batch.rows[static_cast<size_t>(i)])) += dxs.row(i);

    for (size_t li = static_cast<size_t>(config_.n_layers); li-- > 0;) {
      const std::string pre = lp(li);
      LayerCache& lc = c.layers[li];
      // MLP block
      grad(pre + "mlp.w_out", F, D).noalias() += lc.h.transpose() * dx;
      Mat dh = dx * tensor(pre + "mlp.w_out", F, D).transpose();
      const auto& x = lc.hpre.array();
      const auto& t = lc.t.array();
      dh.array() *= S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * c0 * (S(1) + S(3) * c1 * x * x);
      grad(pre + "mlp.w_in", D, F).noalias() += lc.b.transpose() * dh;
      Mat db = dh * tensor(pre + "mlp.w_in", D, F).transpose();
      Mat dmid = dx + norm_bwd(db, lc.xhat2, lc.r2, ptr(params_, pre + "mlp_norm.gain"),
                               ptr(grads_, pre + "mlp_norm.gain"), maybe_ptr(grads_, pre + "mlp_norm.bias"));
      // Attention block
      grad(pre + "attn.wo", D, D).noalias() += lc.o.transpose() * dmid;
      Mat dout = dmid * tensor(pre + "attn.wo", D, D).transpose();
      Mat dq(N, static_cast<long>(D)), dk(N, static_cast<long>(D)), dv(N, static_cast<long>(D));
      size_t pi = 0;
      for (const auto& [first, len] : batch.segments) {
        const long r0 = static_cast<long>(first), T = static_cast<long>(len);
        for (size_t h = 0; h < nh; ++h, ++pi) {
          const long off = static_cast<long>(h * hd), w = static_cast<long>(hd);
          const Mat& p = lc.probs[pi];
          Mat doh = dout.block(r0, off, T, w);
          Mat dp = doh * lc.v.block(r0, off, T, w).transpose();
          dv.block(r0, off, T, w).noalias() = p.transpose() * doh;
          Vec rowdot = (p.array() * dp.array()).rowwise().sum();
          Mat ds = (p.array() * (dp.array().colwise() - rowdot.array())).matrix();
          dq.block(r0, off, T, w).noalias() = ds * lc.k.block(r0, off, T, w) * scale;
          dk.block(r0, off, T, w).noalias() = ds.transpose() * lc.q.block(r0, off, T, w) * scale;
        }
      }
      grad(pre + "attn.wq", D, D).noalias() += lc.a.transpose() * dq;
      grad(pre + "attn.wk", D, D).noalias() += lc.a.transpose() * dk;
      grad(pre + "attn.wv", D, D).noalias() += lc.a.transpose() * dv;
      Mat da = dq * tensor(pre + "attn.wq", D, D).transpose();
      da.noalias() += dk * tensor(pre + "attn.wk", D, D).transpose();
      da.noalias() += dv * tensor(pre + "attn.wv", D, D).transpose();
      dx = dmid + norm_bwd(da, lc.xhat1, lc.r1, ptr(params_, pre + "attn_norm.gain"),
                           ptr(grads_, pre + "attn_norm.gain"), maybe_ptr(grads_, pre + "attn_norm.bias"));
    }
    auto dE = grad("tok_embedding", V, D);
    auto dP = grad("pos_embedding", static_cast<size_t>(config_.max_context), D);
    for (long i = 0; i < N; ++i) {
      dE.row(batch.tokens[static_cast<size_t>(i)]) += dx.row(i);
      dP.row(static_cast<long>(batch.positions[static_cast<size_t>(i)])) += dx.row(i);
    }
    return loss;
  }

  ModelBundle bundle_;
  ModelConfig config_;
  std::vector<S> params_, grads_;
  std::vector<double> m_, v_;
  uint64_t t_ = 0;
};

struct TrainReport {
  std::vector<double> epoch_loss;  ///< mean loss per scored token
  size_t steps = 0;
};

/// Train `init` on `examples`; deterministic for fixed inputs.
inline ModelBundle train_model(const ModelBundle& init, const std::vector<TrainExample>& examples,
                               const TrainConfig& tc, TrainReport* report = nullptr,
                               const std::function<void(int, double)>& on_epoch = {}) {
  if (examples.empty()) throw ArgumentError("train_model: no examples");
  if (tc.epochs < 0 || tc.batch_size == 0) throw ArgumentError("train_model: bad epochs/batch size");
  Trainer<float> trainer(init);
  std::mt19937_64 rng(tc.shuffle_seed);
  std::vector<size_t> order(examples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  const size_t per_epoch = (examples.size() + tc.batch_size - 1) / tc.batch_size;
  const size_t total = per_epoch * static_cast<size_t>(tc.epochs);
  const size_t warmup = static_cast<size_t>(tc.warmup_fraction * static_cast<double>(total));
  size_t step = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    double loss = 0.0;
    size_t scored = 0;
    for (size_t b = 0; b < order.size(); b += tc.batch_size) {
      std::vector<const TrainExample*> batch;
      for (size_t j = b; j < std::min(order.size(), b + tc.batch_size); ++j) batch.push_back(&examples[order[j]]);
      trainer.zero_grad();
      auto [l, n] = trainer.accumulate(batch);
      loss += l;
      scored += n;
      double lr = tc.learning_rate;
      if (step < warmup) {
        lr *= static_cast<double>(step + 1) / static_cast<double>(warmup + 1);
      } else if (total > warmup) {
        const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
        lr *= tc.min_lr_fraction + (1.0 - tc.min_lr_fraction) * 0.5 * (1.0 + std::cos(M_PI * progress));
      }
      trainer.step(lr, tc);
      ++step;
    }
    const double mean = scored ? loss / static_cast<double>(scored) : 0.0;
    if (report) report->epoch_loss.push_back(mean);
    if (on_epoch) on_epoch(epoch, mean);
  }
  if (report) report->steps = step;
  return trainer.export_bundle();
}

}  // namespace tlens
