#pragma once

// Single-file model checkpoints: one UTF-8 JSON header line (format
// version, model hyperparameters, vocabulary, tensor index), then a '\n',
// then raw little-endian float32 blobs in index order.  The writer is
// canonical — same state, same bytes — so saving a loaded checkpoint
// reproduces the original file exactly.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "oodlm/common.hpp"
#include "oodlm/model.hpp"
#include "oodlm/tensor.hpp"
#include "oodlm/text.hpp"

namespace oodlm {

inline constexpr int kCheckpointFormatVersion = 1;

namespace detail {

inline void append_le_f32(std::string& out, float v) {
  const auto u = std::bit_cast<std::uint32_t>(v);
  out.push_back(static_cast<char>(u & 0xff));
  out.push_back(static_cast<char>((u >> 8) & 0xff));
  out.push_back(static_cast<char>((u >> 16) & 0xff));
  out.push_back(static_cast<char>((u >> 24) & 0xff));
}

inline float read_le_f32(const unsigned char* p) {
  const std::uint32_t u = static_cast<std::uint32_t>(p[0]) |
                          (static_cast<std::uint32_t>(p[1]) << 8) |
                          (static_cast<std::uint32_t>(p[2]) << 16) |
                          (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(u);
}

// Write via a temp file in the same directory plus rename, so a crash
// mid-write never leaves a truncated file at the destination.
inline void atomic_write_file(const std::string& path,
                              const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("write failed: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed: " + tmp + " -> " + path + ": " +
                        ec.message());
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path);
  return bytes;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Generic named-tensor container (shared by model and distillation-extra
// files).  `extra` supplies the non-tensor header fields.

inline void save_tensor_file(
    const std::vector<std::pair<std::string, Tensor<float>>>& tensors,
    nlohmann::json extra, const std::string& path) {
  nlohmann::json index = nlohmann::json::array();
  std::string payload;
  for (const auto& [name, t] : tensors) {
    nlohmann::json entry;
    entry["name"] = name;
    entry["shape"] = t.shape();
    entry["byte_offset"] = payload.size();
    entry["byte_len"] = t.numel() * 4;
    index.push_back(std::move(entry));
    for (float v : t.values()) detail::append_le_f32(payload, v);
  }
  extra["format_version"] = kCheckpointFormatVersion;
  extra["tensor_index"] = std::move(index);
  std::string bytes = extra.dump();
  bytes.push_back('\n');
  bytes += payload;
  detail::atomic_write_file(path, bytes);
}

struct TensorFile {
  nlohmann::json header;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
};

inline TensorFile load_tensor_file(const std::string& path) {
  const std::string bytes = detail::read_file_bytes(path);
  const auto newline = bytes.find('\n');
  if (newline == std::string::npos)
    throw LoadError(path + ": missing header line");
  TensorFile file;
  try {
    file.header = nlohmann::json::parse(bytes.substr(0, newline));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path + ": invalid header JSON: " + e.what());
  }
  int version = -1;
  try {
    version = file.header.at("format_version").get<int>();
  } catch (const nlohmann::json::exception&) {
    throw LoadError(path + ": header lacks format_version");
  }
  if (version != kCheckpointFormatVersion)
    throw LoadError(path + ": unsupported format_version " +
                    std::to_string(version));
  if (!file.header.contains("tensor_index") ||
      !file.header.at("tensor_index").is_array())
    throw LoadError(path + ": header lacks tensor_index");

  const std::size_t payload_begin = newline + 1;
  const std::size_t payload_size = bytes.size() - payload_begin;
  const auto* base =
      reinterpret_cast<const unsigned char*>(bytes.data()) + payload_begin;

  std::size_t expected_total = 0;
  for (const auto& entry : file.header.at("tensor_index")) {
    std::string name;
    std::vector<std::size_t> shape;
    std::size_t offset = 0, len = 0;
    try {
      name = entry.at("name").get<std::string>();
      shape = entry.at("shape").get<std::vector<std::size_t>>();
      offset = entry.at("byte_offset").get<std::size_t>();
      len = entry.at("byte_len").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(path + ": malformed tensor_index entry: " + e.what());
    }
    std::size_t numel = 1;
    for (std::size_t d : shape) numel *= d;
    if (len != numel * 4)
      throw LoadError(path + ": tensor '" + name +
                      "' byte_len does not match its shape");
    if (offset + len > payload_size)
      throw LoadError(path + ": tensor '" + name +
                      "' extends past end of file");
    Tensor<float> t = Tensor<float>::zeros(shape);
    auto& vals = t.values();
    for (std::size_t i = 0; i < numel; ++i)
      vals[i] = detail::read_le_f32(base + offset + i * 4);
    file.tensors.emplace_back(std::move(name), std::move(t));
    expected_total += len;
  }
  if (expected_total != payload_size)
    throw LoadError(path + ": payload size mismatch (expected " +
                    std::to_string(expected_total) + " bytes, found " +
                    std::to_string(payload_size) + ")");
  return file;
}

// ---------------------------------------------------------------------------
// Model checkpoints.

namespace detail {

inline nlohmann::json model_config_json(const ModelConfig& cfg) {
  return nlohmann::json{{"n_layers", cfg.n_layers},
                        {"d_model", cfg.d_model},
                        {"n_heads", cfg.n_heads},
                        {"d_ff", cfg.d_ff},
                        {"vocab_size", cfg.vocab_size},
                        {"max_len", cfg.max_len},
                        {"seed", cfg.seed},
                        {"dropout", cfg.dropout}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j,
                                          const std::string& path) {
  ModelConfig cfg;
  try {
    cfg.n_layers = j.at("n_layers").get<int>();
    cfg.d_model = j.at("d_model").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.d_ff = j.at("d_ff").get<int>();
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.max_len = j.at("max_len").get<int>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.dropout = j.at("dropout").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path + ": malformed model_config: " + e.what());
  }
  return cfg;
}

}  // namespace detail

inline void save_checkpoint(const TransformerLM<float>& model,
                            const Vocab& vocab, const std::string& path) {
  nlohmann::json extra;
  extra["model_config"] = detail::model_config_json(model.config());
  extra["vocab"] = nlohmann::json{
      {"mode", tokenizer_mode_str(vocab.mode())},
      {"tokens", vocab.tokens()},
  };
  save_tensor_file(model.named_parameters(), std::move(extra), path);
}

struct LoadedModel {
  TransformerLM<float> model;
  Vocab vocab;
};

inline LoadedModel load_checkpoint(const std::string& path) {
  TensorFile file = load_tensor_file(path);
  if (!file.header.contains("model_config") || !file.header.contains("vocab"))
    throw LoadError(path + ": not a model checkpoint (missing model_config "
                    "or vocab)");
  const ModelConfig cfg =
      detail::model_config_from_json(file.header.at("model_config"), path);
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw LoadError(path + ": invalid model_config: " + e.what());
  }

  TokenizerMode mode;
  std::vector<std::string> tokens;
  try {
    mode = parse_tokenizer_mode(
        file.header.at("vocab").at("mode").get<std::string>());
    tokens = file.header.at("vocab").at("tokens")
                 .get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path + ": malformed vocab: " + e.what());
  } catch (const Error& e) {
    throw LoadError(path + ": malformed vocab: " + e.what());
  }
  Vocab vocab = Vocab::from_tokens(tokens, mode);
  if (static_cast<int>(vocab.size()) != cfg.vocab_size)
    throw LoadError(path + ": vocab has " + std::to_string(vocab.size()) +
                    " tokens but model_config.vocab_size is " +
                    std::to_string(cfg.vocab_size));

  LoadedModel out{TransformerLM<float>(cfg), std::move(vocab)};
  auto params = out.model.named_parameters();
  std::size_t cursor = 0;
  for (auto& [name, stored] : file.tensors) {
    if (cursor >= params.size() || params[cursor].first != name)
      throw LoadError(path + ": unexpected tensor '" + name + "'");
    Tensor<float>& dst = params[cursor].second;
    if (dst.shape() != stored.shape())
      throw LoadError(path + ": tensor '" + name + "' has shape " +
                      detail::shape_str(stored.shape()) + ", expected " +
                      detail::shape_str(dst.shape()));
    dst.values() = stored.values();
    ++cursor;
  }
  if (cursor != params.size())
    throw LoadError(path + ": tensor '" + params[cursor].first +
                    "' missing from checkpoint");
  return out;
}

// Header line only (for inspection); validates the format version.
inline nlohmann::json checkpoint_header(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::string line;
  if (!std::getline(in, line)) throw LoadError(path + ": missing header line");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path + ": invalid header JSON: " + e.what());
  }
  if (!header.contains("format_version") ||
      !header.at("format_version").is_number_integer() ||
      header.at("format_version").get<int>() != kCheckpointFormatVersion)
    throw LoadError(path + ": unsupported format_version");
  return header;
}

}  // namespace oodlm
