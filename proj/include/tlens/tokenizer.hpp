#pragma once

// Byte-level BPE tokenizer. Ids 0..3 are reserved (pad, bos, eos, unk);
// base units are single bytes, merged units are concatenations. Any UTF-8
// string over the covered bytes round-trips through encode/decode.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "tlens/errors.hpp"
#include "tlens/unicode.hpp"

namespace tlens {

using TokenId = int32_t;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kBosId = 1;
inline constexpr TokenId kEosId = 2;
inline constexpr TokenId kUnkId = 3;
inline constexpr TokenId kNumSpecial = 4;

class Tokenizer {
 public:
  struct Merge {
    TokenId left;
    TokenId right;
    TokenId result;
    friend bool operator==(const Merge&, const Merge&) = default;
  };

  Tokenizer() : Tokenizer(byte_level()) {}

  /// All 256 bytes, no merges: vocab size 260.
  static Tokenizer byte_level() {
    std::vector<std::string> units;
    for (int b = 0; b < 256; ++b) units.emplace_back(1, static_cast<char>(b));
    return Tokenizer(std::move(units), {});
  }

  /// `units` are the non-special token strings (ids start at 4). Each merge
  /// result must be the concatenation of its operands.
  Tokenizer(std::vector<std::string> units, std::vector<Merge> merges)
      : units_(std::move(units)), merges_(std::move(merges)) {
    for (size_t i = 0; i < units_.size(); ++i) {
      if (units_[i].empty()) throw ValidationError("tokenizer: empty unit at id " + std::to_string(i + kNumSpecial));
      if (units_[i].size() == 1) {
        auto b = static_cast<unsigned char>(units_[i][0]);
        if (!byte_to_id_.count(b)) byte_to_id_[b] = static_cast<TokenId>(i) + kNumSpecial;
      }
    }
    for (size_t r = 0; r < merges_.size(); ++r) {
      const Merge& m = merges_[r];
      if (!valid_id(m.left) || !valid_id(m.right) || !valid_id(m.result) ||
          m.left < kNumSpecial || m.right < kNumSpecial || m.result < kNumSpecial) {
        throw ValidationError("tokenizer: merge " + std::to_string(r) + " references an invalid id");
      }
      if (text(m.result) != text(m.left) + text(m.right)) {
        throw ValidationError("tokenizer: merge " + std::to_string(r) + " result is not the concatenation of its operands");
      }
      merge_rank_.emplace(pair_key(m.left, m.right), r);
    }
  }

  /// Learn merges from a corpus until `vocab_size` is reached or no pair
  /// occurs twice. Most frequent pair first; ties go to the smallest ids.
  static Tokenizer train_bpe(const std::vector<std::string>& corpus, size_t vocab_size) {
    Tokenizer base = byte_level();
    if (vocab_size < base.vocab_size()) {
      throw ArgumentError("tokenizer: vocab_size must be at least " + std::to_string(base.vocab_size()));
    }
    std::map<std::string, int64_t> chunk_counts;
    for (const auto& text : corpus) {
      for (auto chunk : pretokenize(text)) ++chunk_counts[std::string(chunk)];
    }
    std::vector<std::pair<std::vector<TokenId>, int64_t>> words;
    for (const auto& [chunk, count] : chunk_counts) {
      std::vector<TokenId> ids;
      for (unsigned char b : chunk) ids.push_back(base.byte_to_id_.at(b));
      words.emplace_back(std::move(ids), count);
    }
    std::vector<std::string> units = base.units_;
    std::vector<Merge> merges;
    while (units.size() + kNumSpecial < vocab_size) {
      std::map<std::pair<TokenId, TokenId>, int64_t> pair_counts;
      for (const auto& [ids, count] : words) {
        for (size_t i = 0; i + 1 < ids.size(); ++i) pair_counts[{ids[i], ids[i + 1]}] += count;
      }
      std::pair<TokenId, TokenId> best{};
      int64_t best_count = 1;
      for (const auto& [p, c] : pair_counts) {
        if (c > best_count) {
          best = p;
          best_count = c;
        }
      }
      if (best_count < 2) break;
      const TokenId new_id = static_cast<TokenId>(units.size()) + kNumSpecial;
      units.push_back(units[best.first - kNumSpecial] + units[best.second - kNumSpecial]);
      merges.push_back({best.first, best.second, new_id});
      for (auto& [ids, _] : words) apply_merge(ids, best.first, best.second, new_id);
    }
    return Tokenizer(std::move(units), std::move(merges));
  }

  size_t vocab_size() const { return units_.size() + kNumSpecial; }
  const std::vector<std::string>& units() const { return units_; }
  const std::vector<Merge>& merges() const { return merges_; }

  bool valid_id(TokenId id) const { return id >= 0 && static_cast<size_t>(id) < vocab_size(); }

  /// Raw bytes of a token; specials decode to the empty string.
  std::string text(TokenId id) const {
    if (!valid_id(id)) throw LookupError("token id " + std::to_string(id) + " out of range");
    if (id < kNumSpecial) return {};
    return units_[static_cast<size_t>(id - kNumSpecial)];
  }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> out;
    for (auto chunk : pretokenize(text)) {
      std::vector<TokenId> ids;
      ids.reserve(chunk.size());
      for (unsigned char b : chunk) {
        auto it = byte_to_id_.find(b);
        ids.push_back(it == byte_to_id_.end() ? kUnkId : it->second);
      }
      while (ids.size() > 1) {
        size_t best_rank = merges_.size();
        for (size_t i = 0; i + 1 < ids.size(); ++i) {
          auto it = merge_rank_.find(pair_key(ids[i], ids[i + 1]));
          if (it != merge_rank_.end() && it->second < best_rank) best_rank = it->second;
        }
        if (best_rank == merges_.size()) break;
        const Merge& m = merges_[best_rank];
        apply_merge(ids, m.left, m.right, m.result);
      }
      out.insert(out.end(), ids.begin(), ids.end());
    }
    return out;
  }

  std::string decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (TokenId id : ids) out += text(id);
    return out;
  }

  /// Tokens whose text contains a newline; used as generation stop points.
  std::vector<TokenId> newline_tokens() const {
    std::vector<TokenId> out;
    for (size_t i = 0; i < units_.size(); ++i) {
      if (units_[i].find('\n') != std::string::npos) out.push_back(static_cast<TokenId>(i) + kNumSpecial);
    }
    return out;
  }

  /// Text sidecar format:
  ///   tlens-tokenizer 1
  ///   units <n>
  ///   <hex bytes>            (n lines, ids 4..)
  ///   merges <m>
  ///   <left> <right> <result>  (m lines, in rank order)
  std::string serialize() const {
    std::ostringstream out;
    out << "tlens-tokenizer 1\nunits " << units_.size() << "\n";
    static constexpr char kHex[] = "0123456789abcdef";
    for (const auto& u : units_) {
      for (unsigned char b : u) out << kHex[b >> 4] << kHex[b & 15];
      out << "\n";
    }
    out << "merges " << merges_.size() << "\n";
    for (const auto& m : merges_) out << m.left << " " << m.right << " " << m.result << "\n";
    return out.str();
  }

  static Tokenizer deserialize(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string line;
    size_t line_no = 0;
    auto next = [&]() -> std::string& {
      if (!std::getline(in, line)) throw ParseError("tokenizer: unexpected end of file after line " + std::to_string(line_no));
      ++line_no;
      return line;
    };
    if (next() != "tlens-tokenizer 1") throw ParseError("tokenizer: line 1: bad magic/version");
    auto count_after = [&](std::string_view key) {
      const std::string& l = next();
      if (l.rfind(std::string(key) + " ", 0) != 0) {
        throw ParseError("tokenizer: line " + std::to_string(line_no) + ": expected '" + std::string(key) + " <n>'");
      }
      try {
        return static_cast<size_t>(std::stoull(l.substr(key.size() + 1)));
      } catch (const std::exception&) {
        throw ParseError("tokenizer: line " + std::to_string(line_no) + ": bad count");
      }
    };
    const size_t n_units = count_after("units");
    std::vector<std::string> units;
    units.reserve(n_units);
    for (size_t i = 0; i < n_units; ++i) {
      const std::string& hex = next();
      if (hex.empty() || hex.size() % 2 != 0) throw ParseError("tokenizer: line " + std::to_string(line_no) + ": bad hex unit");
      std::string bytes;
      for (size_t k = 0; k < hex.size(); k += 2) {
        auto nib = [&](char c) -> int {
          if (c >= '0' && c <= '9') return c - '0';
          if (c >= 'a' && c <= 'f') return c - 'a' + 10;
          throw ParseError("tokenizer: line " + std::to_string(line_no) + ": bad hex digit");
        };
        bytes.push_back(static_cast<char>(nib(hex[k]) * 16 + nib(hex[k + 1])));
      }
      units.push_back(std::move(bytes));
    }
    const size_t n_merges = count_after("merges");
    std::vector<Merge> merges;
    for (size_t i = 0; i < n_merges; ++i) {
      std::istringstream ls(next());
      Merge m{};
      if (!(ls >> m.left >> m.right >> m.result)) throw ParseError("tokenizer: line " + std::to_string(line_no) + ": bad merge");
      merges.push_back(m);
    }
    return Tokenizer(std::move(units), std::move(merges));
  }

  /// Stable identifier derived from the serialized table (FNV-1a 64).
  std::string id() const {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : serialize()) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out = "bpe-";
    for (int shift = 60; shift >= 0; shift -= 4) out.push_back(kHex[(h >> shift) & 15]);
    return out;
  }

  friend bool operator==(const Tokenizer& a, const Tokenizer& b) {
    return a.units_ == b.units_ && a.merges_ == b.merges_;
  }

  /// Split before every space and around every newline, so merges never
  /// cross word boundaries and "\n" stays its own chunk.
  static std::vector<std::string_view> pretokenize(std::string_view text) {
    std::vector<std::string_view> out;
    size_t start = 0;
    for (size_t i = 0; i < text.size(); ++i) {
      const char c = text[i];
      if ((c == ' ' || c == '\n') && i > start) {
        out.push_back(text.substr(start, i - start));
        start = i;
      }
      if (c == '\n') {
        size_t j = i;
        while (j < text.size() && text[j] == '\n') ++j;
        out.push_back(text.substr(i, j - i));
        start = j;
        i = j - 1;
      }
    }
    if (start < text.size()) out.push_back(text.substr(start));
    return out;
  }

 private:
  static uint64_t pair_key(TokenId a, TokenId b) {
    return (static_cast<uint64_t>(static_cast<uint32_t>(a)) << 32) | static_cast<uint32_t>(b);
  }

  static void apply_merge(std::vector<TokenId>& ids, TokenId left, TokenId right, TokenId result) {
    size_t w = 0;
    for (size_t r = 0; r < ids.size(); ++r) {
      if (r + 1 < ids.size() && ids[r] == left && ids[r + 1] == right) {
        ids[w++] = result;
        ++r;
      } else {
        ids[w++] = ids[r];
      }
    }
    ids.resize(w);
  }

  std::vector<std::string> units_;
  std::vector<Merge> merges_;
  std::unordered_map<unsigned char, TokenId> byte_to_id_;
  std::unordered_map<uint64_t, size_t> merge_rank_;
};

}  // namespace tlens
