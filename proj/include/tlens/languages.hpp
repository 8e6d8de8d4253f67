#pragma once

// FLORES+ codes and English names for the 36 studied languages, used for
// prompt construction when a lexicon does not carry its own display names.

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace tlens {

struct LanguageInfo {
  std::string_view code;
  std::string_view name;
};

inline constexpr std::array<LanguageInfo, 36> kStudiedLanguages{{
    {"eng_Latn", "English"},     {"ceb_Latn", "Cebuano"},
    {"deu_Latn", "German"},      {"fra_Latn", "French"},
    {"nld_Latn", "Dutch"},       {"rus_Cyrl", "Russian"},
    {"spa_Latn", "Spanish"},     {"ita_Latn", "Italian"},
    {"pol_Latn", "Polish"},      {"zho_Hans", "Chinese (Simplified)"},
    {"zho_Hant", "Chinese (Traditional)"}, {"jpn_Jpan", "Japanese"},
    {"ukr_Cyrl", "Ukrainian"},   {"vie_Latn", "Vietnamese"},
    {"arb_Arab", "Arabic"},      {"por_Latn", "Portuguese"},
    {"pes_Arab", "Persian"},     {"cat_Latn", "Catalan"},
    {"ind_Latn", "Indonesian"},  {"kor_Hang", "Korean"},
    {"tur_Latn", "Turkish"},     {"ces_Latn", "Czech"},
    {"ron_Latn", "Romanian"},    {"heb_Hebr", "Hebrew"},
    {"uzn_Latn", "Uzbek"},       {"ell_Grek", "Greek"},
    {"tam_Taml", "Tamil"},       {"tha_Thai", "Thai"},
    {"hin_Deva", "Hindi"},       {"tel_Telu", "Telugu"},
    {"swh_Latn", "Swahili"},     {"mar_Deva", "Marathi"},
    {"bos_Latn", "Bosnian"},     {"yor_Latn", "Yoruba"},
    {"nep_Deva", "Nepali"},      {"amh_Ethi", "Amharic"},
}};

inline std::optional<std::string> builtin_language_name(std::string_view code) {
  for (const auto& info : kStudiedLanguages) {
    if (info.code == code) return std::string(info.name);
  }
  return std::nullopt;
}

}  // namespace tlens
