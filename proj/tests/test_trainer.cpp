#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support/synthetic.hpp"

using namespace tlens;

namespace {

ModelConfig tiny(NormKind kind) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.vocab_size = 260;
  c.max_context = 16;
  c.norm_kind = kind;
  c.seed = 5;
  return c;
}

TrainExample example(const std::string& prompt, const std::string& answer) {
  auto tok = Tokenizer::byte_level();
  TrainExample ex;
  ex.tokens = prompt_tokens(tok, prompt);
  ex.loss_from = ex.tokens.size();
  auto a = tok.encode(answer);
  ex.tokens.insert(ex.tokens.end(), a.begin(), a.end());
  ex.tokens.push_back(kEosId);
  return ex;
}

}  // namespace

TEST(Trainer, GradientsMatchFiniteDifferences) {
  for (auto kind : {NormKind::rms, NormKind::layer}) {
    auto bundle = init_seeded(tiny(kind));
    Trainer<double> tr(bundle);
    const auto ex = example("ab c", "xy");
    tr.zero_grad();
    tr.accumulate({&ex});
    const auto grads = tr.grads();
    std::mt19937_64 rng(1);
    const double h = 1e-6;
    int checked = 0;
    for (int k = 0; k < 400 && checked < 60; ++k) {
      const size_t i = rng() % tr.params().size();
      const double g = grads[i];
      if (std::abs(g) < 1e-7 && rng() % 4) continue;  // mostly probe parameters that matter
      const double orig = tr.params()[i];
      tr.params()[i] = orig + h;
      const double up = tr.loss(ex);
      tr.params()[i] = orig - h;
      const double down = tr.loss(ex);
      tr.params()[i] = orig;
      const double fd = (up - down) / (2 * h);
      EXPECT_NEAR(g, fd, 1e-6 + 1e-4 * std::abs(fd)) << "param " << i << " norm " << to_string(kind);
      ++checked;
    }
    EXPECT_GE(checked, 30);
  }
}

TEST(Trainer, LogitsMatchTheInferenceForward) {
  auto bundle = init_seeded(tiny(NormKind::rms));
  Trainer<float> tr(bundle);
  const std::vector<TokenId> toks{kBosId, 70, 71, 72, 100};
  auto logits = tr.logits(toks);
  auto ref = forward(bundle, toks);
  ASSERT_EQ(static_cast<size_t>(logits.cols()), ref.final_logits.size());
  for (size_t v = 0; v < ref.final_logits.size(); ++v) {
    EXPECT_NEAR(logits(static_cast<long>(toks.size() - 1), static_cast<long>(v)), ref.final_logits[v], 1e-4);
  }
  // Earlier rows are the logits of the prefixes.
  std::vector<TokenId> prefix(toks.begin(), toks.begin() + 3);
  auto ref2 = forward(bundle, prefix);
  for (size_t v = 0; v < ref2.final_logits.size(); ++v) EXPECT_NEAR(logits(2, static_cast<long>(v)), ref2.final_logits[v], 1e-4);
}

TEST(Trainer, LossDecreasesAndIsDeterministic) {
  auto bundle = init_seeded(tiny(NormKind::rms));
  std::vector<TrainExample> exs{example("ab", "c"), example("de", "f"), example("gh", "i"), example("jk", "l")};
  TrainConfig tc;
  tc.epochs = 30;
  tc.batch_size = 2;
  tc.learning_rate = 1e-2;
  TrainReport r1, r2;
  auto a = train_model(bundle, exs, tc, &r1);
  auto b = train_model(bundle, exs, tc, &r2);
  EXPECT_EQ(a.checksum(), b.checksum());
  EXPECT_EQ(r1.epoch_loss, r2.epoch_loss);
  ASSERT_EQ(r1.epoch_loss.size(), 30u);
  EXPECT_LT(r1.epoch_loss.back(), 0.5 * r1.epoch_loss.front());
  EXPECT_EQ(r1.steps, 60u);
  // The trained model reproduces the memorized answer.
  auto tok = Tokenizer::byte_level();
  auto out = greedy_decode(a, prompt_tokens(tok, "ab"), 3);
  EXPECT_EQ(tok.decode(out), "c");
  EXPECT_THROW(train_model(bundle, {}, tc), ArgumentError);
}
