#pragma once

// Weight container:
//
//   offset 0   8 bytes   magic "TLENSWTS"
//   offset 8   u32 LE    container version (1)
//   offset 12  u64 LE    header length H
//   offset 20  H bytes   UTF-8 JSON header: model name, config, dtype,
//                        tensor table (name, shape, byte offset, count),
//                        tokenizer id
//   offset 20+H          payload: float32 little-endian tensors, in table order
//
// The tokenizer table lives next to the weights in "<path>.tok".

#include <bit>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "tlens/errors.hpp"
#include "tlens/lexicon.hpp"
#include "tlens/model.hpp"

namespace tlens {

inline constexpr char kWeightMagic[8] = {'T', 'L', 'E', 'N', 'S', 'W', 'T', 'S'};
inline constexpr uint32_t kWeightVersion = 1;

inline std::filesystem::path tokenizer_sidecar(const std::filesystem::path& weights) {
  auto p = weights;
  p += ".tok";
  return p;
}

namespace detail {

template <typename T>
void put_le(std::string& out, T value) {
  for (size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(const std::string& in, size_t offset) {
  T v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<T>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  }
  return v;
}

inline nlohmann::ordered_json config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["n_layers"] = c.n_layers;
  j["d_model"] = c.d_model;
  j["n_heads"] = c.n_heads;
  j["vocab_size"] = c.vocab_size;
  j["max_context"] = c.max_context;
  j["d_ff"] = c.ffn_dim();
  j["norm_kind"] = to_string(c.norm_kind);
  j["norm_eps"] = c.norm_eps;
  j["seed"] = c.seed;
  return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j, const std::string& name) {
  ModelConfig c;
  c.name = name;
  c.n_layers = j.at("n_layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_context = j.at("max_context").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.norm_kind = parse_norm_kind(j.at("norm_kind").get<std::string>());
  c.norm_eps = j.at("norm_eps").get<double>();
  c.seed = j.at("seed").get<uint64_t>();
  return c;
}

}  // namespace detail

/// Serialize the weights container into bytes (tokenizer excluded).
inline std::string encode_weights(const ModelBundle& bundle) {
  nlohmann::ordered_json header;
  header["name"] = bundle.config().name;
  header["config"] = detail::config_to_json(bundle.config());
  header["dtype"] = "f32";
  header["tensors"] = nlohmann::ordered_json::array();
  for (const auto& t : bundle.tensors()) {
    nlohmann::ordered_json e;
    e["name"] = t.name;
    e["shape"] = t.shape;
    e["offset"] = t.offset * sizeof(float);
    e["count"] = t.count;
    header["tensors"].push_back(e);
  }
  header["tokenizer"] = bundle.tokenizer().id();
  const std::string h = header.dump();

  std::string out(kWeightMagic, sizeof(kWeightMagic));
  detail::put_le<uint32_t>(out, kWeightVersion);
  detail::put_le<uint64_t>(out, h.size());
  out += h;
  out.reserve(out.size() + bundle.data().size() * sizeof(float));
  for (float f : bundle.data()) detail::put_le<uint32_t>(out, std::bit_cast<uint32_t>(f));
  return out;
}

inline ModelBundle decode_weights(const std::string& bytes, const Tokenizer& tokenizer) {
  constexpr size_t kFixed = 20;
  if (bytes.size() < kFixed) throw FormatError("weights: file shorter than fixed header", bytes.size());
  if (std::memcmp(bytes.data(), kWeightMagic, sizeof(kWeightMagic)) != 0) {
    throw FormatError("weights: bad magic", 0);
  }
  const auto version = detail::get_le<uint32_t>(bytes, 8);
  if (version != kWeightVersion) {
    throw FormatError("weights: unsupported container version " + std::to_string(version), 8);
  }
  const auto header_len = detail::get_le<uint64_t>(bytes, 12);
  if (header_len > bytes.size() - kFixed) {
    throw FormatError("weights: header length " + std::to_string(header_len) + " runs past end of file",
                      bytes.size());
  }
  nlohmann::json header;
  ModelConfig config;
  try {
    header = nlohmann::json::parse(bytes.substr(kFixed, header_len));
    config = detail::config_from_json(header.at("config"), header.at("name").get<std::string>());
    if (header.at("dtype") != "f32") throw FormatError("weights: unsupported dtype", kFixed);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("weights: corrupt header: ") + e.what(), kFixed);
  }
  if (header.value("tokenizer", std::string()) != tokenizer.id()) {
    throw FormatError("weights: tokenizer sidecar does not match header tokenizer id", kFixed);
  }
  ModelBundle bundle;
  try {
    bundle = ModelBundle(config, tokenizer);
  } catch (const ArgumentError& e) {
    throw FormatError(std::string("weights: invalid config: ") + e.what(), kFixed);
  }
  const auto& table = header.at("tensors");
  if (!table.is_array() || table.size() != bundle.tensors().size()) {
    throw FormatError("weights: tensor table does not match config", kFixed);
  }
  for (size_t i = 0; i < table.size(); ++i) {
    const auto& expect = bundle.tensors()[i];
    try {
      if (table[i].at("name").get<std::string>() != expect.name ||
          table[i].at("shape").get<std::vector<size_t>>() != expect.shape ||
          table[i].at("offset").get<size_t>() != expect.offset * sizeof(float) ||
          table[i].at("count").get<size_t>() != expect.count) {
        throw FormatError("weights: tensor entry " + std::to_string(i) + " ('" + expect.name +
                              "') does not match config layout",
                          kFixed);
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("weights: corrupt tensor table: ") + e.what(), kFixed);
    }
  }
  const size_t payload = kFixed + header_len;
  const size_t need = bundle.data().size() * sizeof(float);
  if (bytes.size() < payload + need) {
    throw FormatError("weights: payload truncated, expected " + std::to_string(need) + " bytes",
                      bytes.size());
  }
  if (bytes.size() > payload + need) {
    throw FormatError("weights: trailing bytes after payload", payload + need);
  }
  auto data = bundle.mutable_data();
  for (size_t i = 0; i < data.size(); ++i) {
    data[i] = std::bit_cast<float>(detail::get_le<uint32_t>(bytes, payload + i * sizeof(float)));
  }
  return bundle;
}

/// Writes the container and its tokenizer sidecar, each atomically.
inline void save_weights(const ModelBundle& bundle, const std::filesystem::path& path) {
  detail::write_file_atomic(tokenizer_sidecar(path), bundle.tokenizer().serialize());
  detail::write_file_atomic(path, encode_weights(bundle));
}

inline ModelBundle load_weights(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("model weights not found: " + path.string());
  const auto side = tokenizer_sidecar(path);
  if (!std::filesystem::exists(side)) throw IoError("tokenizer sidecar not found: " + side.string());
  Tokenizer tok = Tokenizer::deserialize(detail::read_file(side));
  return decode_weights(detail::read_file(path), tok);
}

}  // namespace tlens
