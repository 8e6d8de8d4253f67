#include <gtest/gtest.h>

#include <random>

#include "support/synthetic.hpp"

using namespace tlens;
using tlens::testing::lc;

namespace {

const std::string kData = TLENS_TEST_DATA;

struct Out {
  int layer;
  std::vector<std::string> matched;
  std::optional<std::string> tag = std::nullopt;
};

/// Hand-made labeled trace; attribution follows the labeling rules with
/// the given precedence order.
LabeledTrace labeled(const std::string& id, const std::string& src, const std::string& tgt, int n_layers,
                     const std::vector<Out>& outs,
                     const std::vector<std::string>& order = {"eng_Latn", "spa_Latn", "fra_Latn", "deu_Latn"}) {
  LabeledTrace t;
  t.instance_id = id;
  t.concept_id = "c";
  t.source_lang = lc(src);
  t.target_lang = lc(tgt);
  t.n_layers = n_layers;
  std::vector<LanguageCode> prec;
  for (const auto& o : order) prec.push_back(lc(o));
  for (const auto& o : outs) {
    LabeledLayerOutput lo;
    lo.layer = o.layer;
    for (const auto& m : o.matched) lo.matched_langs.push_back(lc(m));
    lo.target_match = lo.matches(t.target_lang);
    if (o.tag) lo.lid_tag = lc(*o.tag);
    lo.attribution = lo.correct() ? attribute(lo.matched_langs, t.target_lang, prec) : lo.lid_tag;
    t.layers.push_back(lo);
  }
  return t;
}

/// Instance i of the ten-instance hand check: (intermediate, final).
std::vector<LabeledTrace> ten_instances() {
  const std::vector<std::pair<bool, bool>> flags{{true, false}, {true, false}, {true, false}, {true, false},
                                                 {true, false}, {false, false}, {true, true},  {true, true},
                                                 {true, true},  {false, true}};
  std::vector<LabeledTrace> out;
  for (size_t i = 0; i < flags.size(); ++i) {
    auto [inter, fin] = flags[i];
    std::vector<Out> outs;
    outs.push_back({2, inter ? std::vector<std::string>{"eng_Latn"} : std::vector<std::string>{}});
    outs.push_back({4, fin ? std::vector<std::string>{"deu_Latn"} : std::vector<std::string>{}});
    out.push_back(labeled("i" + std::to_string(i), "spa_Latn", "deu_Latn", 4, outs));
  }
  return out;
}

}  // namespace

TEST(InstanceTl, Cases) {
  auto t = labeled("a", "spa_Latn", "deu_Latn", 4, {{1, {"eng_Latn"}}, {3, {}}, {4, {"deu_Latn"}}});
  auto r = instance_tl(t);
  EXPECT_TRUE(r.final_correct);
  EXPECT_TRUE(r.intermediate_correct);
  EXPECT_EQ(r.tl, 0);
  EXPECT_EQ(r.best_layer, 1);
  // Final-layer correctness never counts as intermediate.
  t = labeled("b", "spa_Latn", "deu_Latn", 4, {{3, {}}, {4, {"deu_Latn"}}});
  EXPECT_EQ(instance_tl(t).tl, -1);
  t = labeled("c", "spa_Latn", "deu_Latn", 4, {{3, {"fra_Latn"}}, {4, {"fra_Latn"}}});
  r = instance_tl(t);
  EXPECT_FALSE(r.final_correct);
  EXPECT_EQ(r.tl, 1);
  t = labeled("d", "spa_Latn", "deu_Latn", 4, {{3, {}}, {4, {}}});
  EXPECT_EQ(instance_tl(t).tl, 0);
  t = labeled("e", "spa_Latn", "deu_Latn", 4, {{3, {}}});
  EXPECT_THROW(instance_tl(t), LookupError);
}

TEST(PairReportTest, TenInstanceHandCheck) {
  auto rep = tlens::testing::library_pair(ten_instances());
  EXPECT_EQ(rep.n, 10u);
  EXPECT_EQ(rep.final_correct, 4u);
  EXPECT_EQ(rep.d_F, 6u);
  EXPECT_EQ(rep.tl_sum, 4);
  EXPECT_EQ(rep.tl_clamped_sum, 5u);
  EXPECT_NEAR(*rep.tlp, 4.0 / 6.0, 1e-12);
  EXPECT_NEAR(*rep.tlp_clamped, 5.0 / 6.0, 1e-12);
  EXPECT_NEAR(rep.final_acc, 0.4, 1e-12);
  EXPECT_NEAR(rep.intermediate_acc, 0.8, 1e-12);
}

TEST(PairReportTest, UndefinedTlpWhenAllFinalCorrect) {
  std::vector<LabeledTrace> ts{labeled("a", "spa_Latn", "deu_Latn", 4, {{2, {}}, {4, {"deu_Latn"}}})};
  auto rep = tlens::testing::library_pair(ts);
  EXPECT_EQ(rep.d_F, 0u);
  EXPECT_FALSE(rep.tlp);
  EXPECT_FALSE(rep.tlp_clamped);
}

TEST(PairReportTest, RejectsMixedPairs) {
  std::vector<LabeledTrace> ts{labeled("a", "spa_Latn", "deu_Latn", 4, {{4, {}}}),
                               labeled("b", "spa_Latn", "fra_Latn", 4, {{4, {}}})};
  EXPECT_THROW(tlens::testing::library_pair(ts), ValidationError);
  EXPECT_THROW(pair_report({}, {}), ValidationError);
}

TEST(PairReportTest, OrderIndependent) {
  std::mt19937_64 rng(8);
  auto sp = tlens::testing::random_pair(rng);
  auto a = tlens::testing::library_pair(sp.traces);
  std::reverse(sp.traces.begin(), sp.traces.end());
  EXPECT_EQ(tlens::testing::library_pair(sp.traces), a);
}

TEST(LayerProfile, TargetPresence) {
  // Four accurate outputs at layer 3, three of them attributed to the target.
  std::vector<LabeledTrace> ts{
      labeled("a", "spa_Latn", "deu_Latn", 4, {{3, {"deu_Latn"}}, {4, {}}}),
      labeled("b", "spa_Latn", "deu_Latn", 4, {{3, {"deu_Latn", "eng_Latn"}}, {4, {}}}),
      labeled("c", "spa_Latn", "deu_Latn", 4, {{3, {"deu_Latn"}}, {4, {}}}),
      labeled("d", "spa_Latn", "deu_Latn", 4, {{3, {"eng_Latn"}}, {4, {}}}),
      labeled("e", "spa_Latn", "deu_Latn", 4, {{3, {}, "fra_Latn"}, {4, {}}}),
      labeled("f", "spa_Latn", "deu_Latn", 4, {{3, {}}, {4, {}}}),
  };
  auto rows = layer_profiles(ts);
  ASSERT_EQ(rows.size(), 2u);
  const auto& r = rows[0];
  EXPECT_EQ(r.layer, 3);
  EXPECT_EQ(r.total, 6u);
  EXPECT_EQ(r.accurate_count, 4u);
  EXPECT_NEAR(*r.target_presence(), 0.75, 1e-12);
  EXPECT_EQ(r.labeled_count, 5u);
  EXPECT_EQ(r.on_target_correct, 3u);
  EXPECT_EQ(r.off_target_correct, 1u);
  EXPECT_EQ(r.off_target_incorrect, 1u);
  EXPECT_EQ(r.on_target_incorrect, 0u);
  EXPECT_FALSE(rows[1].target_presence());
  EXPECT_TRUE(rows[1].empty());
}

TEST(LayerOfSwitch, LargestIncrease) {
  const std::vector<double> presence{0.0, 0.05, 0.10, 0.60, 0.90};
  std::vector<LayerProfileRow> rows;
  for (size_t i = 0; i < presence.size(); ++i) {
    LayerProfileRow r;
    r.layer = static_cast<int>(i) + 1;
    r.accurate_count = 20;
    r.accurate_on_target = static_cast<size_t>(std::lround(presence[i] * 20));
    rows.push_back(r);
  }
  EXPECT_EQ(layer_of_switch(rows, 0.5), 4);
  EXPECT_EQ(relative_layer(4, 5), -2);
  EXPECT_EQ(relative_layer(5, 5), -1);
  EXPECT_FALSE(layer_of_switch(rows, 0.03));
  EXPECT_FALSE(layer_of_switch(rows, 0.05));
}

TEST(LayerOfSwitch, SkipsLayersWithoutAccurateOutputsAndPrefersLaterTies) {
  auto row = [](int layer, size_t acc, size_t on) {
    LayerProfileRow r;
    r.layer = layer;
    r.accurate_count = acc;
    r.accurate_on_target = on;
    return r;
  };
  // Layer 2 is skipped, so layer 3 rises 0.5 over layer 1; layer 4 ties it.
  std::vector<LayerProfileRow> rows{row(1, 4, 0), row(2, 0, 0), row(3, 4, 2), row(4, 4, 4)};
  EXPECT_EQ(layer_of_switch(rows, 1.0), 4);
  // Never increasing: absent.
  rows = {row(1, 4, 4), row(2, 4, 2)};
  EXPECT_FALSE(layer_of_switch(rows, 1.0));
}

TEST(Distribution, PrecedenceAndFractional) {
  // L = 8, cutoff 4: only layers <= 4 count.
  std::vector<LabeledTrace> ts{
      labeled("a", "spa_Latn", "fra_Latn", 8, {{3, {"deu_Latn"}}, {5, {"eng_Latn"}}, {8, {"fra_Latn"}}}),
      labeled("b", "spa_Latn", "fra_Latn", 8, {{4, {"fra_Latn"}}, {8, {}}}),
  };
  auto d = task_language_distribution(ts, 4);
  EXPECT_EQ(d.fractions, (std::map<LanguageCode, double>{{lc("deu_Latn"), 1.0}}));
  EXPECT_EQ(tlens::testing::library_pair(ts).cutoff, 4);

  std::vector<LabeledTrace> shared{
      labeled("a", "spa_Latn", "deu_Latn", 8, {{2, {"eng_Latn", "fra_Latn"}}, {8, {}}}),
  };
  auto frac = task_language_distribution(shared, 4, AttributionMode::fractional);
  EXPECT_NEAR(frac.fractions.at(lc("eng_Latn")), 0.5, 1e-12);
  EXPECT_NEAR(frac.fractions.at(lc("fra_Latn")), 0.5, 1e-12);
  auto prec = task_language_distribution(shared, 4);
  EXPECT_EQ(prec.fractions, (std::map<LanguageCode, double>{{lc("eng_Latn"), 1.0}}));
  EXPECT_THROW(task_language_distribution(shared, 9), ArgumentError);
  EXPECT_TRUE(task_language_distribution(shared, 1).empty());
}

TEST(Recall, Cases) {
  std::vector<LabeledTrace> ts{
      labeled("a", "spa_Latn", "deu_Latn", 4, {{2, {"eng_Latn"}}, {4, {"deu_Latn"}}}),
      labeled("b", "spa_Latn", "deu_Latn", 4, {{2, {"deu_Latn"}}, {4, {"deu_Latn"}}}),
      labeled("c", "spa_Latn", "deu_Latn", 4, {{2, {"deu_Latn", "fra_Latn"}}, {4, {"deu_Latn"}}}),
      labeled("d", "spa_Latn", "deu_Latn", 4, {{2, {"eng_Latn"}}, {4, {}}}),
  };
  std::vector<InstanceResult> rs;
  for (const auto& t : ts) rs.push_back(instance_tl(t));
  EXPECT_NEAR(*nontarget_recall(rs, ts), 2.0 / 3.0, 1e-12);
  std::vector<InstanceResult> none{instance_tl(ts[3])};
  EXPECT_FALSE(nontarget_recall(none, ts));
}

TEST(Aggregate, MeanAndPopulationStd) {
  auto m = mean_std({0.4, 0.8});
  EXPECT_NEAR(m->mean, 0.6, 1e-12);
  EXPECT_NEAR(m->std, 0.2, 1e-12);
  EXPECT_FALSE(mean_std({}));
}

TEST(Aggregate, BySourceSkipsUndefinedTlp) {
  PairReport a;
  a.source_lang = lc("spa_Latn");
  a.target_lang = lc("deu_Latn");
  a.final_acc = 0.4;
  a.intermediate_acc = 0.5;
  a.tlp = 0.2;
  a.tlp_clamped = 0.3;
  PairReport b = a;
  b.target_lang = lc("fra_Latn");
  b.final_acc = 0.8;
  b.tlp.reset();
  b.tlp_clamped.reset();
  PairReport c = a;
  c.source_lang = lc("eng_Latn");
  c.final_acc = 1.0;
  auto agg = aggregate_by_source({a, b, c});
  ASSERT_EQ(agg.per_source.size(), 2u);
  EXPECT_EQ(agg.per_source[0].source_lang, lc("eng_Latn"));
  const auto& spa = agg.per_source[1];
  EXPECT_EQ(spa.n_targets, 2u);
  EXPECT_EQ(spa.tlp_undefined, 1u);
  EXPECT_NEAR(spa.final_acc->mean, 0.6, 1e-12);
  EXPECT_EQ(spa.tlp->count, 1u);
  // Average of per-source means, not of pairs.
  EXPECT_NEAR(*agg.average.final_acc, (1.0 + 0.6) / 2, 1e-12);
}

// Published per-source means reproduce the published averages.
TEST(Aggregate, GrandAverageOfPublishedMeans) {
  struct Case {
    std::vector<double> means;
    double avg;
  };
  const std::vector<Case> cases{{{42.0, 37.4, 9.5}, 29.6},  {{84.6, 76.1, 25.3}, 62.0}, {{71.6, 59.6, 17.5}, 49.6},
                                {{39.8, 33.7, 31.6}, 35.0}, {{84.2, 75.2, 69.4}, 76.3}, {{68.0, 58.2, 52.1}, 59.4}};
  for (const auto& c : cases) {
    std::vector<SourceAggregate> rows;
    for (double m : c.means) {
      SourceAggregate s;
      s.final_acc = MeanStd{m, 0.0, 36};
      rows.push_back(s);
    }
    EXPECT_NEAR(*grand_average(rows).final_acc, c.avg, 0.05 + 1e-9);
  }
}

TEST(Oracle, AgreesOnRandomSets) {
  std::mt19937_64 rng(2024);
  for (int i = 0; i < 40; ++i) {
    auto sp = tlens::testing::random_pair(rng);
    for (auto mode : {AttributionMode::precedence, AttributionMode::fractional}) {
      PairOptions opts;
      opts.attribution = mode;
      if (sp.n_layers > 4 && i % 2) opts.cutoff = sp.n_layers - 1;
      auto diff = tlens::testing::compare_with_oracle(tlens::testing::library_pair(sp.traces, opts),
                                                      tlens::testing::oracle_pair(sp.traces, opts.cutoff, mode));
      EXPECT_TRUE(diff.empty()) << "set " << i << ": " << diff;
    }
  }
}

TEST(Invariants, HoldOnRandomSets) {
  std::mt19937_64 rng(77);
  for (int i = 0; i < 200; ++i) {
    auto sp = tlens::testing::random_pair(rng, 60);
    auto rep = tlens::testing::library_pair(sp.traces);
    std::vector<InstanceResult> rs;
    for (const auto& t : sp.traces) rs.push_back(instance_tl(t));
    // Accounting.
    EXPECT_EQ(rep.tl_sum, long(rep.intermediate_correct) - long(rep.final_correct));
    // Clamped intermediate accuracy never falls below final accuracy.
    EXPECT_GE(double(rep.final_correct + rep.tl_clamped_sum) / double(rep.n), rep.final_acc);
    // Complement: never-correct instances make up the rest of d_F.
    size_t neither = 0;
    for (const auto& r : rs) neither += !r.final_correct && !r.intermediate_correct;
    if (rep.d_F) EXPECT_NEAR(double(neither) / double(rep.d_F), 1.0 - *rep.tlp_clamped, 1e-12);
    // Partition of labeled outputs.
    for (const auto& row : rep.layers) {
      EXPECT_EQ(row.on_target_correct + row.on_target_incorrect + row.off_target_correct + row.off_target_incorrect,
                row.labeled_count);
      EXPECT_LE(row.labeled_count, row.total);
    }
    // Distribution sums to one when non-empty.
    if (!rep.lang_distribution.empty()) {
      double s = 0;
      for (const auto& [_, x] : rep.lang_distribution.fractions) s += x;
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
    if (rep.tlp) {
      EXPECT_GE(*rep.tlp, -double(rep.final_correct) / double(rep.d_F) - 1e-12);
      EXPECT_LE(*rep.tlp, 1.0);
      EXPECT_GE(*rep.tlp_clamped, 0.0);
      EXPECT_LE(*rep.tlp_clamped, 1.0);
    }
  }
}

// Making one more intermediate output correct never lowers the detected
// intermediate accuracy or TL.
TEST(Invariants, MonotoneDetection) {
  std::mt19937_64 rng(99);
  for (int i = 0; i < 100; ++i) {
    auto sp = tlens::testing::random_pair(rng, 30);
    auto before = tlens::testing::library_pair(sp.traces);
    auto& t = sp.traces[rng() % sp.traces.size()];
    auto& lo = t.layers[rng() % t.layers.size()];
    if (lo.layer == t.n_layers || lo.correct()) continue;
    const auto r0 = instance_tl(t);
    lo.matched_langs = {sp.target};
    lo.target_match = true;
    lo.lid_tag.reset();
    lo.attribution = sp.target;
    const auto r1 = instance_tl(t);
    EXPECT_GE(r1.tl, r0.tl);
    auto after = tlens::testing::library_pair(sp.traces);
    EXPECT_GE(after.intermediate_correct, before.intermediate_correct);
    EXPECT_GE(after.tl_sum, before.tl_sum);
  }
}

TEST(LabelTrace, FixtureExamples) {
  auto lex = load_lexicon(kData + "/fixture_lexicon.json");
  auto [meta, traces] = tlens::testing::golden_traces();
  // spa->deu cat: gato / cat / katze / Katze
  auto l0 = label_trace(traces[0], lex, nullptr);
  ASSERT_EQ(l0.layers.size(), 4u);
  EXPECT_TRUE(l0.layers[0].source_match);
  EXPECT_TRUE(l0.layers[0].matched_langs.empty());
  EXPECT_EQ(l0.layers[0].lid_tag, lc("spa_Latn"));
  EXPECT_EQ(l0.layers[0].attribution, lc("spa_Latn"));
  EXPECT_EQ(l0.layers[1].matched_langs, std::vector<LanguageCode>{lc("eng_Latn")});
  EXPECT_EQ(l0.layers[1].attribution, lc("eng_Latn"));
  EXPECT_TRUE(l0.layers[3].target_match);
  EXPECT_EQ(l0.layers[3].attribution, lc("deu_Latn"));
  EXPECT_TRUE(instance_tl(l0).final_correct);

  // spa->deu table: "table" matches eng and fra; lexicon order picks eng.
  auto l1 = label_trace(traces[1], lex, nullptr);
  EXPECT_EQ(l1.layers[1].matched_langs, (std::vector<LanguageCode>{lc("eng_Latn"), lc("fra_Latn")}));
  EXPECT_EQ(l1.layers[1].attribution, lc("eng_Latn"));
  EXPECT_TRUE(l1.layers[3].target_match);  // "tisch." normalizes to "tisch"
  LabelOptions opts;
  opts.precedence = {lc("fra_Latn"), lc("eng_Latn")};
  EXPECT_EQ(label_trace(traces[1], lex, nullptr, opts).layers[1].attribution, lc("fra_Latn"));

  // spa->fra table: "table" matches target fra and eng; the target wins.
  auto l3 = label_trace(traces[3], lex, nullptr);
  EXPECT_EQ(l3.layers[3].attribution, lc("fra_Latn"));
  EXPECT_FALSE(l3.layers[0].attribution);
}

TEST(LabelTrace, ExternalTagsAreGated) {
  auto lex = load_lexicon(kData + "/fixture_lexicon.json");
  auto [meta, traces] = tlens::testing::golden_traces();
  LabelOptions opts;
  opts.use_external_lid = true;
  auto l = label_trace(traces[2], lex, nullptr, opts);
  EXPECT_FALSE(l.layers[0].lid_tag);  // ita_Latn is outside the lexicon languages
  EXPECT_EQ(l.layers[3].lid_tag, lc("fra_Latn"));
  EXPECT_EQ(l.layers[3].attribution, lc("fra_Latn"));
  EXPECT_FALSE(l.layers[3].correct());
  opts.candidate_set = {lc("deu_Latn")};
  EXPECT_FALSE(label_trace(traces[2], lex, nullptr, opts).layers[3].lid_tag);
  // Without the flag the external tags are ignored.
  EXPECT_FALSE(label_trace(traces[2], lex, nullptr).layers[3].lid_tag);
}

TEST(LabelTrace, ClassifierFallback) {
  auto lex = load_lexicon(kData + "/demo_lexicon.json");
  auto profiles = train_profiles(lexicon_corpus(lex));
  auto meta = tlens::testing::toy_meta(4, {2, 4});
  // "eau" is French for water: correct but off-target for spa->mar.
  auto t = tlens::testing::text_trace(meta, "water", lc("spa_Latn"), lc("mar_Deva"), {"eau", "ఇల్లు"});
  auto l = label_trace(t, lex, &profiles);
  EXPECT_EQ(l.layers[0].matched_langs, std::vector<LanguageCode>{lc("fra_Latn")});
  EXPECT_FALSE(l.layers[0].target_match);
  EXPECT_EQ(l.layers[0].attribution, lc("fra_Latn"));
  EXPECT_FALSE(l.layers[1].correct());
  EXPECT_EQ(l.layers[1].lid_tag, lc("tel_Telu"));
  LabelOptions gate;
  gate.candidate_set = {lc("mar_Deva"), lc("spa_Latn")};
  EXPECT_FALSE(label_trace(t, lex, &profiles, gate).layers[1].lid_tag);
  auto bad = t;
  bad.concept_id = "unicorn";
  EXPECT_THROW(label_trace(bad, lex, &profiles), LookupError);
}
