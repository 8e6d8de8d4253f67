#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "support/synthetic.hpp"

using namespace tlens;
using tlens::testing::lc;

namespace {

const std::string kData = TLENS_TEST_DATA;

Lexicon fixture() { return load_lexicon(kData + "/fixture_lexicon.json"); }

std::string doc_with(const std::string& concepts) {
  return R"({"format":"tlens-lexicon","schema_version":"1.0","languages":["eng_Latn","deu_Latn","fra_Latn"],"concepts":)" +
         concepts + "}";
}

}  // namespace

TEST(Normalize, TrimAndCasefold) { EXPECT_EQ(normalize_surface("  Katze\n"), "katze"); }

TEST(Normalize, EdgePunctuation) {
  EXPECT_EQ(normalize_surface("gato."), "gato");
  EXPECT_EQ(normalize_surface("¿qué?"), "qué");
  EXPECT_EQ(normalize_surface("rock-n-roll"), "rock-n-roll");
  EXPECT_EQ(normalize_surface("ice cream"), "ice cream");
}

TEST(Normalize, DecomposedEqualsPrecomposed) {
  EXPECT_EQ(normalize_surface("e\xCC\x81"), normalize_surface("\xC3\xA9"));
  EXPECT_EQ(normalize_surface("Caf\x65\xCC\x81"), "café");
}

TEST(Normalize, FullCaseFolding) { EXPECT_EQ(normalize_surface("STRASSE"), normalize_surface("straße")); }

TEST(Normalize, StrictModeOnlyComposes) {
  EXPECT_EQ(normalize_surface(" Gato. ", NormalizeMode::strict), " Gato. ");
  EXPECT_EQ(normalize_surface("e\xCC\x81", NormalizeMode::strict), "\xC3\xA9");
}

TEST(Normalize, IsIdempotentOnRandomInput) {
  const std::vector<std::string> pieces{" ", ".", "¿", "A", "é", "e\xCC\x81", "ß", "Σ", "नमस्ते", "!", "\t", "x", "-"};
  std::mt19937_64 rng(5);
  for (int i = 0; i < 2000; ++i) {
    std::string s;
    const int len = static_cast<int>(rng() % 8);
    for (int k = 0; k < len; ++k) s += pieces[rng() % pieces.size()];
    const std::string once = normalize_surface(s);
    EXPECT_EQ(normalize_surface(once), once) << "input: " << s;
  }
}

TEST(LanguageCodeTest, ParsesFloresTags) {
  EXPECT_EQ(lc("spa_Latn").str(), "spa_Latn");
  EXPECT_TRUE(LanguageCode::is_valid("tel_Telu"));
  EXPECT_FALSE(LanguageCode::is_valid("spa"));
  EXPECT_FALSE(LanguageCode::is_valid("spa_Xyzw"));
  EXPECT_FALSE(LanguageCode::is_valid("SPA_Latn"));
  EXPECT_THROW(LanguageCode::parse("es_Latn"), ValidationError);
}

TEST(LoadLexicon, Fixture) {
  auto lex = fixture();
  EXPECT_EQ(lex.concepts().size(), 2u);
  EXPECT_EQ(lex.languages().size(), 4u);
  // cat: 5 forms, table: 4 (table listed under eng and fra).
  EXPECT_EQ(lex.reverse_index_size(), 9u);
  EXPECT_EQ(lex.lookup("Table", lc("fra_Latn")), std::vector<std::string>{"table"});
  EXPECT_EQ(lex.at("cat").forms_for(lc("deu_Latn")), std::vector<std::string>{"katze"});
}

TEST(LoadLexicon, TwoConceptsThreeLanguages) {
  auto lex = parse_lexicon(doc_with(
      R"([{"id":"a","pos":"noun","forms":{"eng_Latn":["dog"],"deu_Latn":["Hund"],"fra_Latn":["chien"]}},
          {"id":"b","pos":"verb","forms":{"eng_Latn":["eat"],"deu_Latn":["essen"],"fra_Latn":["manger"]}}])"));
  EXPECT_EQ(lex.concepts().size(), 2u);
  EXPECT_GE(lex.reverse_index_size(), 6u);
}

TEST(LoadLexicon, DuplicateConceptId) {
  EXPECT_THROW(parse_lexicon(doc_with(
                   R"([{"id":"a","pos":"noun","forms":{"eng_Latn":["x"],"deu_Latn":["y"],"fra_Latn":["z"]}},
                       {"id":"a","pos":"noun","forms":{"eng_Latn":["x"],"deu_Latn":["y"],"fra_Latn":["z"]}}])")),
               ValidationError);
}

TEST(LoadLexicon, EmptyFormSet) {
  EXPECT_THROW(parse_lexicon(doc_with(
                   R"([{"id":"a","pos":"noun","forms":{"eng_Latn":[],"deu_Latn":["y"],"fra_Latn":["z"]}}])")),
               ValidationError);
  EXPECT_THROW(parse_lexicon(doc_with(
                   R"([{"id":"a","pos":"noun","forms":{"eng_Latn":[" . "],"deu_Latn":["y"],"fra_Latn":["z"]}}])")),
               ValidationError);
}

TEST(LoadLexicon, MissingLanguageNeedsPartialFlag) {
  EXPECT_THROW(parse_lexicon(doc_with(R"([{"id":"a","pos":"noun","forms":{"eng_Latn":["x"],"deu_Latn":["y"]}}])")),
               ValidationError);
  auto lex = parse_lexicon(
      doc_with(R"([{"id":"a","pos":"noun","partial":true,"forms":{"eng_Latn":["x"],"deu_Latn":["y"]}}])"));
  ASSERT_EQ(lex.warnings().size(), 1u);
  EXPECT_NE(lex.warnings()[0].find("fra_Latn"), std::string::npos);
  EXPECT_TRUE(lex.concepts_for_pair(lc("fra_Latn"), lc("eng_Latn")).empty());
  EXPECT_EQ(lex.concepts_for_pair(lc("deu_Latn"), lc("eng_Latn")).size(), 1u);
}

TEST(LoadLexicon, SchemaErrorsNameTheField) {
  try {
    parse_lexicon(doc_with(R"([{"id":"a","pos":"thing","forms":{}}])"));
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("concepts[0].pos"), std::string::npos);
  }
  try {
    parse_lexicon("{\n\"format\": \"tlens-lexicon\",\n oops\n}");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_lexicon(R"({"format":"other"})"), ParseError);
  EXPECT_THROW(load_lexicon(kData + "/does_not_exist.json"), IoError);
}

TEST(LoadLexicon, DemoShape) {
  auto lex = load_lexicon(kData + "/demo_lexicon.json");
  EXPECT_EQ(lex.concepts().size(), 50u);
  EXPECT_EQ(lex.languages().size(), 9u);
  EXPECT_TRUE(lex.warnings().empty());
}

TEST(LoadLexicon, RoundTrip) {
  for (const char* name : {"/fixture_lexicon.json", "/demo_lexicon.json"}) {
    auto lex = load_lexicon(kData + name);
    const std::string text = serialize_lexicon(lex);
    auto again = parse_lexicon(text);
    EXPECT_EQ(again, lex);
    EXPECT_EQ(serialize_lexicon(again), text);
  }
}

TEST(LoadLexicon, TsvVariant) {
  auto lex = parse_lexicon_tsv("id\tpos\teng_Latn\tspa_Latn\tdeu_Latn\ncat\tnoun\tcat\tgato|gata\tKatze\n"
                               "run\tverb\trun\tcorrer\t\n");
  ASSERT_EQ(lex.concepts().size(), 2u);
  EXPECT_EQ(lex.at("cat").forms_for(lc("spa_Latn")).size(), 2u);
  EXPECT_TRUE(lex.at("run").partial);
  EXPECT_THROW(parse_lexicon_tsv("id\tpos\teng_Latn\ncat\tnoun\n"), ParseError);
  EXPECT_THROW(parse_lexicon_tsv("name\tpos\teng_Latn\n"), ParseError);
}

TEST(ExactMatch, FixtureLookups) {
  auto lex = fixture();
  const auto& cat = lex.at("cat");
  EXPECT_TRUE(lex.exact_match("Katze", cat, lc("deu_Latn")));
  EXPECT_FALSE(lex.exact_match("chat", cat, lc("deu_Latn")));
  EXPECT_FALSE(lex.exact_match("", cat, lc("deu_Latn")));
  EXPECT_TRUE(lex.exact_match(" GATA!", cat, lc("spa_Latn")));
  EXPECT_THROW(exact_match("x", cat, lc("hin_Deva")), LookupError);
}

TEST(ExactMatch, StrictModeIsCaseSensitive) {
  auto lex = load_lexicon(kData + "/fixture_lexicon.json", NormalizeMode::strict);
  const auto& cat = lex.at("cat");
  EXPECT_TRUE(lex.exact_match("Katze", cat, lc("deu_Latn")));
  EXPECT_FALSE(lex.exact_match("katze", cat, lc("deu_Latn")));
}

TEST(TaskMatch, SharedFormMatchesSeveralLanguages) {
  auto lex = fixture();
  const auto& table = lex.at("table");
  EXPECT_EQ(lex.task_match("table", table, lc("spa_Latn")), (std::vector<LanguageCode>{lc("eng_Latn"), lc("fra_Latn")}));
}

TEST(TaskMatch, SourceIsExcluded) {
  auto lex = fixture();
  EXPECT_TRUE(lex.task_match("gato", lex.at("cat"), lc("spa_Latn")).empty());
  EXPECT_EQ(lex.task_match("mesa", lex.at("table"), lc("eng_Latn")), std::vector<LanguageCode>{lc("spa_Latn")});
}

TEST(TaskMatch, TargetOnly) {
  auto lex = fixture();
  EXPECT_EQ(lex.task_match("Katze", lex.at("cat"), lc("spa_Latn")), std::vector<LanguageCode>{lc("deu_Latn")});
  EXPECT_THROW(lex.task_match("x", lex.at("cat"), lc("hin_Deva")), LookupError);
}

// Properties over the demo lexicon: every stored form matches its own
// language from any other source; matching commutes with normalization;
// the source never appears.
TEST(TaskMatch, Properties) {
  auto lex = load_lexicon(kData + "/demo_lexicon.json");
  const std::vector<std::string> noise{"", " ", ".", "!", "  ", "?"};
  std::mt19937_64 rng(11);
  for (const auto& c : lex.concepts()) {
    for (const auto& [t, forms] : c.forms) {
      for (const auto& f : forms) {
        for (const auto& s : lex.languages()) {
          auto m = lex.task_match(f, c, s);
          EXPECT_EQ(std::count(m.begin(), m.end(), s), 0);
          if (s != t) EXPECT_TRUE(std::count(m.begin(), m.end(), t)) << c.id << " " << f;
        }
        const std::string noisy = noise[rng() % noise.size()] + f + noise[rng() % noise.size()];
        for (const auto& l : lex.languages()) {
          EXPECT_EQ(lex.exact_match(noisy, c, l), lex.exact_match(normalize_surface(noisy), c, l));
        }
      }
    }
  }
}
