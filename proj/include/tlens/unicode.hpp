#pragma once

// Thin ICU wrappers: UTF-8 decoding, normalization, case folding and
// script classification. Everything else in the library talks UTF-8
// std::string and goes through here for Unicode semantics.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/uscript.h>
#include <unicode/unistr.h>
#include <unicode/utf8.h>

namespace tlens::unicode {

/// Decode UTF-8 to code points. Ill-formed sequences become U+FFFD.
inline std::vector<char32_t> decode(std::string_view text) {
  std::vector<char32_t> out;
  out.reserve(text.size());
  const auto* s = reinterpret_cast<const uint8_t*>(text.data());
  const int32_t len = static_cast<int32_t>(text.size());
  int32_t i = 0;
  while (i < len) {
    UChar32 c;
    U8_NEXT(s, i, len, c);
    out.push_back(c < 0 ? char32_t{0xFFFD} : static_cast<char32_t>(c));
  }
  return out;
}

inline void append_utf8(std::string& out, char32_t cp) {
  uint8_t buf[4];
  int32_t n = 0;
  UBool err = false;
  U8_APPEND(buf, n, 4, static_cast<UChar32>(cp), err);
  if (err) {
    append_utf8(out, 0xFFFD);
    return;
  }
  out.append(reinterpret_cast<const char*>(buf), static_cast<size_t>(n));
}

inline std::string encode(const std::vector<char32_t>& cps) {
  std::string out;
  out.reserve(cps.size());
  for (char32_t c : cps) append_utf8(out, c);
  return out;
}

inline bool is_valid_utf8(std::string_view text) {
  const auto* s = reinterpret_cast<const uint8_t*>(text.data());
  const int32_t len = static_cast<int32_t>(text.size());
  int32_t i = 0;
  while (i < len) {
    UChar32 c;
    U8_NEXT(s, i, len, c);
    if (c < 0) return false;
  }
  return true;
}

/// Replace ill-formed UTF-8 with U+FFFD; valid input is returned unchanged.
inline std::string sanitize(std::string_view text) {
  if (is_valid_utf8(text)) return std::string(text);
  return encode(decode(text));
}

inline std::string nfc(std::string_view text) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* norm = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status)) throw std::runtime_error("ICU NFC normalizer unavailable");
  icu::UnicodeString in = icu::UnicodeString::fromUTF8(
      icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
  icu::UnicodeString result = norm->normalize(in, status);
  if (U_FAILURE(status)) throw std::runtime_error("ICU NFC normalization failed");
  std::string out;
  result.toUTF8String(out);
  return out;
}

/// Full Unicode case folding (e.g. "Straße" -> "strasse").
inline std::string casefold(std::string_view text) {
  icu::UnicodeString s = icu::UnicodeString::fromUTF8(
      icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
  s.foldCase(U_FOLD_CASE_DEFAULT);
  std::string out;
  s.toUTF8String(out);
  return out;
}

inline bool is_whitespace(char32_t c) { return u_isUWhiteSpace(static_cast<UChar32>(c)); }

/// General category P* (connector, dash, open, close, initial, final, other).
inline bool is_punctuation(char32_t c) { return u_ispunct(static_cast<UChar32>(c)); }

inline bool is_letter(char32_t c) { return u_isalpha(static_cast<UChar32>(c)); }

/// ISO 15924 script code for a code point. Common, Inherited and Unknown
/// come back as "Zyyy", "Zinh" and "Zzzz".
inline UScriptCode script_of(char32_t c) {
  UErrorCode status = U_ZERO_ERROR;
  UScriptCode code = uscript_getScript(static_cast<UChar32>(c), &status);
  if (U_FAILURE(status)) return USCRIPT_UNKNOWN;
  return code;
}

/// True for scripts that carry a language signal.
inline bool is_specific_script(UScriptCode code) {
  return code != USCRIPT_COMMON && code != USCRIPT_INHERITED && code != USCRIPT_UNKNOWN &&
         code != USCRIPT_INVALID_CODE;
}

inline std::string script_name(UScriptCode code) {
  const char* name = uscript_getShortName(code);
  return name ? std::string(name) : std::string("Zzzz");
}

/// Whether `name` is a recognized ISO 15924 script code (e.g. "Latn", "Hans").
inline bool is_known_script_name(std::string_view name) {
  if (name.size() != 4) return false;
  std::string key(name);
  UScriptCode codes[8];
  UErrorCode status = U_ZERO_ERROR;
  int32_t n = uscript_getCode(key.c_str(), codes, 8, &status);
  if (U_FAILURE(status) || n <= 0) return false;
  // uscript_getCode also accepts locale names; insist on the 4-letter short name.
  for (int32_t i = 0; i < n; ++i) {
    const char* short_name = uscript_getShortName(codes[i]);
    if (short_name && key == short_name) return true;
  }
  return false;
}

/// Script names that the Han-derived codes in language tags expand to.
/// "Hans"/"Hant"/"Jpan"/"Kore" tag text written in several ICU scripts.
inline std::vector<std::string> scripts_for_tag(std::string_view tag) {
  if (tag == "Hans" || tag == "Hant") return {"Hani"};
  if (tag == "Jpan") return {"Hani", "Hira", "Kana"};
  if (tag == "Kore") return {"Hang", "Hani"};
  return {std::string(tag)};
}

}  // namespace tlens::unicode
