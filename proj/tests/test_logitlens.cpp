#include <gtest/gtest.h>

#include <random>

#include "support/synthetic.hpp"

using namespace tlens;

namespace {

ModelConfig small() {
  ModelConfig c;
  c.n_layers = 4;
  c.d_model = 16;
  c.n_heads = 4;
  c.vocab_size = 260;
  c.max_context = 48;
  c.seed = 9;
  return c;
}

std::vector<TokenId> prompt_of(std::mt19937_64& rng, size_t n) {
  std::vector<TokenId> p{kBosId};
  for (size_t i = 0; i < n; ++i) p.push_back(static_cast<TokenId>('a' + kNumSpecial + rng() % 26));
  return p;
}

}  // namespace

// h = (1, 0), W_u = I, RMS norm with unit gain: normed = (1/sqrt(0.5 + eps), 0).
// Reference values from a 30-digit recomputation.
TEST(LensDistribution, TwoDimensionalToy) {
  const std::vector<float> gain{1.0f, 1.0f}, wu{1.0f, 0.0f, 0.0f, 1.0f}, h{1.0f, 0.0f};
  FinalHead head{NormKind::rms, 1e-6, gain, {}, wu, 2, 2};
  auto p = lens_distribution(h, head);
  ASSERT_EQ(p.size(), 2u);
  EXPECT_NEAR(p[0], 0.80442946001948493819, 1e-12);
  EXPECT_NEAR(p[1], 0.19557053998051506181, 1e-12);
  auto [id, prob] = lens_token(h, head);
  EXPECT_EQ(id, 0);
  EXPECT_NEAR(prob, 0.80442946001948493819, 1e-12);
}

TEST(LensDistribution, SumsToOne) {
  auto b = init_seeded(small());
  std::mt19937_64 rng(1);
  std::normal_distribution<float> g(0.0f, 5.0f);
  for (int i = 0; i < 50; ++i) {
    std::vector<float> h(16);
    for (auto& v : h) v = g(rng);
    auto p = lens_distribution(h, b);
    double s = 0;
    for (double v : p) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  std::vector<float> wrong(15, 1.0f);
  EXPECT_THROW(lens_distribution(wrong, b), ShapeError);
}

TEST(LensDistribution, LastLayerEqualsModelOutput) {
  for (auto kind : {NormKind::rms, NormKind::layer}) {
    ModelConfig c = small();
    c.norm_kind = kind;
    auto b = init_seeded(c);
    std::mt19937_64 rng(2);
    for (int i = 0; i < 10; ++i) {
      auto toks = prompt_of(rng, 1 + rng() % 20);
      auto r = forward(b, toks);
      auto lens = lens_distribution(r.hidden.at(4, toks.size() - 1), b);
      auto model = softmax(std::span<const double>(r.final_logits));
      for (size_t v = 0; v < lens.size(); ++v) EXPECT_NEAR(lens[v], model[v], 1e-5);
      EXPECT_EQ(lens_token(r.hidden.at(4, toks.size() - 1), b).first,
                static_cast<TokenId>(argmax(std::span<const double>(r.final_logits))));
    }
  }
}

TEST(LensToken, PeakAndTie) {
  const std::vector<float> gain{1.0f, 1.0f};
  // Rows 0 and 1 identical: an exact tie, resolved to the lower id.
  const std::vector<float> wu{0.0f, 0.0f, 1.0f, 1.0f, 1.0f, 1.0f, 0.0f, 0.0f};
  FinalHead head{NormKind::rms, 1e-6, gain, {}, wu, 4, 2};
  std::vector<float> h{1.0f, 2.0f};
  EXPECT_EQ(lens_token(h, head).first, 1);
  // Peak at id 3.
  const std::vector<float> wu2{0.0f, 0.0f, 0.1f, 0.0f, 0.0f, 0.2f, 3.0f, 3.0f};
  FinalHead head2{NormKind::rms, 1e-6, gain, {}, wu2, 4, 2};
  auto [id, p] = lens_token(h, head2);
  EXPECT_EQ(id, 3);
  EXPECT_EQ(p, lens_distribution(h, head2)[3]);
}

TEST(LensToken, RiggedRowAlwaysWins) {
  ModelConfig c = small();
  ModelBundle b(c, Tokenizer::byte_level());
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(0.5f, 1.5f);
  // Positive embeddings keep every normalized state in the positive
  // orthant, where a large positive row dominates.
  for (float& v : b.mutable_tensor("tok_embedding")) v = u(rng);
  auto wu = b.mutable_tensor("unembedding");
  for (size_t k = 0; k < 16; ++k) wu[42 * 16 + k] = 10.0f;
  auto toks = prompt_of(rng, 8);
  auto r = forward(b, toks);
  for (size_t l = 1; l <= 4; ++l) {
    for (size_t p = 0; p < toks.size(); ++p) EXPECT_EQ(lens_token(r.hidden.at(l, p), b).first, 42);
  }
}

TEST(LayerSpec, Forms) {
  EXPECT_EQ(parse_layer_spec("all", 4), (std::vector<int>{1, 2, 3, 4}));
  EXPECT_EQ(parse_layer_spec("last:2", 4), (std::vector<int>{3, 4}));
  EXPECT_EQ(parse_layer_spec("last:10", 8), (std::vector<int>{1, 2, 3, 4, 5, 6, 7, 8}));
  EXPECT_EQ(parse_layer_spec("last:10", 32), (std::vector<int>{23, 24, 25, 26, 27, 28, 29, 30, 31, 32}));
  EXPECT_EQ(parse_layer_spec("1,3-4", 4), (std::vector<int>{1, 3, 4}));
  EXPECT_THROW(parse_layer_spec("1,2", 4), ArgumentError);
  EXPECT_THROW(parse_layer_spec("0,4", 4), ArgumentError);
  EXPECT_THROW(parse_layer_spec("last:x", 4), ArgumentError);
  EXPECT_THROW(parse_layer_spec("2,5", 4), ArgumentError);
}

TEST(IterativeDecode, ShapeAndCoupling) {
  auto b = init_seeded(small());
  std::mt19937_64 rng(4);
  const std::vector<int> layers{2, 3, 4};
  const std::vector<TokenId> no_stop{};
  for (int i = 0; i < 10; ++i) {
    auto prompt = prompt_of(rng, 5 + rng() % 10);
    auto t = iterative_lens_decode(b, prompt, layers, 3, no_stop);
    ASSERT_EQ(t.steps.size(), 3u);
    for (size_t s = 0; s < 3; ++s) {
      EXPECT_EQ(t.steps[s].step_index, s);
      ASSERT_EQ(t.steps[s].per_layer.size(), 3u);
      EXPECT_EQ(t.steps[s].final_token, t.steps[s].reading(4)->token);
      for (const auto& r : t.steps[s].per_layer) {
        EXPECT_GT(r.prob, 0.0);
        EXPECT_LE(r.prob, 1.0);
      }
    }
    EXPECT_EQ(final_tokens(t), greedy_decode(b, prompt, 3, no_stop));
  }
  auto prompt = prompt_of(rng, 4);
  EXPECT_THROW(iterative_lens_decode(b, prompt, layers, 0, no_stop), ArgumentError);
  const std::vector<int> bad{2, 3};
  EXPECT_THROW(iterative_lens_decode(b, prompt, bad, 3, no_stop), ArgumentError);
}

// Every per-layer reading at step t is reproduced by a fresh forward pass
// over prompt + final tokens 0..t-1.
TEST(IterativeDecode, ContextDriveInvariance) {
  auto b = init_seeded(small());
  std::mt19937_64 rng(5);
  const std::vector<int> layers{1, 2, 3, 4};
  const std::vector<TokenId> no_stop{};
  for (int i = 0; i < 5; ++i) {
    auto prompt = prompt_of(rng, 6);
    auto t = iterative_lens_decode(b, prompt, layers, 4, no_stop);
    std::vector<TokenId> ctx = prompt;
    for (const auto& step : t.steps) {
      auto r = forward(b, ctx);
      for (const auto& reading : step.per_layer) {
        auto [id, p] = lens_token(r.hidden.at(static_cast<size_t>(reading.layer), ctx.size() - 1), b);
        EXPECT_EQ(id, reading.token);
        EXPECT_EQ(p, reading.prob);
        EXPECT_EQ(reading.text, b.tokenizer().text(id));
      }
      ctx.push_back(step.final_token);
    }
  }
}

// Using the third greedy token as the stop token truncates every layer at
// two steps.
TEST(IterativeDecode, StopTokenTruncatesAllLayers) {
  auto b = init_seeded(small());
  std::mt19937_64 rng(6);
  const std::vector<int> layers{3, 4};
  int checked = 0;
  for (int i = 0; i < 50 && checked < 5; ++i) {
    auto prompt = prompt_of(rng, 6);
    const std::vector<TokenId> no_stop{};
    auto g = greedy_decode(b, prompt, 3, no_stop);
    if (g[2] == g[0] || g[2] == g[1]) continue;
    const std::vector<TokenId> stop{g[2]};
    auto t = iterative_lens_decode(b, prompt, layers, 8, stop);
    ASSERT_EQ(t.steps.size(), 2u);
    for (const auto& s : t.steps) EXPECT_EQ(s.per_layer.size(), 2u);
    EXPECT_EQ(final_tokens(t), greedy_decode(b, prompt, 8, stop));
    ++checked;
  }
  EXPECT_EQ(checked, 5);
}

TEST(LayerOutput, ConcatenatesTokenText) {
  auto meta = tlens::testing::toy_meta(2, {1, 2});
  InstanceTrace t;
  t.meta = meta;
  auto tok = Tokenizer::byte_level();
  auto ch = tok.encode("c");
  for (const char* piece : {"ch", "at"}) {
    LensStep s;
    s.step_index = t.steps.size();
    s.per_layer.push_back({1, kUnkId, piece, 0.4});
    s.per_layer.push_back({2, kUnkId, "x", 0.9});
    s.final_token = kUnkId;
    t.steps.push_back(s);
  }
  EXPECT_EQ(layer_output(t, 1), "chat");
  EXPECT_EQ(layer_output(t, 2), "xx");
  EXPECT_THROW(layer_output(t, 3), LookupError);
  t.steps.resize(1);
  EXPECT_EQ(layer_output(t, 1), "ch");
}

TEST(LayerOutput, SplitMultibyteCharactersReassemble) {
  auto meta = tlens::testing::toy_meta(2, {1, 2});
  const std::string word = "नमस्ते";
  auto t = tlens::testing::text_trace(meta, "c", tlens::testing::lc("hin_Deva"), tlens::testing::lc("mar_Deva"),
                                      {word, word});
  EXPECT_EQ(normalize_surface(layer_output(t, 1)), word);
  // A dangling lead byte becomes U+FFFD instead of invalid UTF-8.
  t.steps.resize(1);
  EXPECT_EQ(layer_output(t, 1), "\xEF\xBF\xBD");
}

TEST(LayerOutput, FinalLayerIsTheGreedyText) {
  auto b = init_seeded(small());
  std::mt19937_64 rng(7);
  const std::vector<int> layers{2, 4};
  auto stops = default_stop_tokens(b.tokenizer());
  for (int i = 0; i < 10; ++i) {
    auto prompt = prompt_of(rng, 6);
    auto t = iterative_lens_decode(b, prompt, layers, 6, stops);
    EXPECT_EQ(layer_output_bytes(t, 4), b.tokenizer().decode(greedy_decode(b, prompt, 6, stops)));
  }
}
