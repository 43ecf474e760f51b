#pragma once

// Checkpoint layout:
//   "FRML" | u8 version | u32 LE header length | JSON header | f32 LE blobs
// The header holds the training config, model dims and, per parameter,
// its name, shape and byte offset into the blob section.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "frmil/bag_data.hpp"
#include "frmil/config.hpp"
#include "frmil/model.hpp"

namespace frmil {

inline constexpr char kCheckpointMagic[4] = {'F', 'R', 'M', 'L'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelParams<float> params;
  TrainConfig config;
};

inline void save_checkpoint(const ModelParams<float>& params, const TrainConfig& config, const fs::path& path) {
  nlohmann::ordered_json header;
  header["config"] = config;
  header["dim"] = params.dim;
  header["heads"] = params.heads;
  header["params"] = nlohmann::ordered_json::array();
  std::vector<float> blob;
  params.for_each([&](const char* name, const Tensor<float>& t) {
    header["params"].push_back({{"name", name}, {"shape", t.shape}, {"offset", blob.size() * 4}});
    blob.insert(blob.end(), t.data.begin(), t.data.end());
  });
  header["data_bytes"] = blob.size() * 4;
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, 4);
  out.put(static_cast<char>(kCheckpointVersion));
  const auto len = static_cast<std::uint32_t>(text.size());
  for (int b = 0; b < 4; ++b) out.put(static_cast<char>((len >> (8 * b)) & 0xffu));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  detail::write_f32_le(out, blob);
  if (!out) throw IoError("short write to checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  using Kind = CheckpointError::Kind;
  if (!fs::exists(path)) throw CheckpointError(Kind::Missing, "checkpoint not found: " + path.string());
  const auto bytes = detail::read_file(path);
  if (bytes.size() < 4 || !std::equal(kCheckpointMagic, kCheckpointMagic + 4, bytes.begin())) {
    throw CheckpointError(Kind::BadMagic, "not a checkpoint (bad magic): " + path.string());
  }
  if (bytes.size() < 9) throw CheckpointError(Kind::Truncated, "checkpoint truncated in preamble: " + path.string());
  const auto version = static_cast<std::uint8_t>(bytes[4]);
  if (version != kCheckpointVersion) {
    throw CheckpointError(Kind::VersionMismatch, "checkpoint version " + std::to_string(version) + ", expected " +
                                                     std::to_string(kCheckpointVersion) + ": " + path.string());
  }
  std::uint32_t len = 0;
  for (int b = 0; b < 4; ++b) len |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[5 + b])) << (8 * b);
  if (bytes.size() < 9 + std::size_t{len}) {
    throw CheckpointError(Kind::Truncated, "checkpoint truncated in header: " + path.string());
  }

  Checkpoint ck;
  std::vector<std::pair<std::string, Shape>> declared;
  std::vector<std::size_t> offsets;
  std::size_t data_bytes = 0;
  try {
    const auto header = nlohmann::json::parse(bytes.begin() + 9, bytes.begin() + 9 + len);
    ck.config = config_from_json(header.at("config"));
    ck.params.dim = header.at("dim").get<std::size_t>();
    ck.params.heads = header.at("heads").get<std::size_t>();
    for (const auto& p : header.at("params")) {
      declared.emplace_back(p.at("name").get<std::string>(), p.at("shape").get<Shape>());
      offsets.push_back(p.at("offset").get<std::size_t>());
    }
    data_bytes = header.at("data_bytes").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::BadHeader, "malformed checkpoint header in " + path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(Kind::BadHeader, "bad config in checkpoint " + path.string() + ": " + e.what());
  }

  if (ck.params.heads == 0 || ck.params.dim % ck.params.heads != 0) {
    throw CheckpointError(Kind::ShapeMismatch, "checkpoint dims are inconsistent: " + path.string());
  }
  const auto expected = model_param_shapes(ck.params.dim);
  if (declared != expected) {
    throw CheckpointError(Kind::ShapeMismatch,
                          "checkpoint parameter names/shapes do not match a dim-" + std::to_string(ck.params.dim) +
                              " model: " + path.string());
  }
  const std::size_t base = 9 + std::size_t{len};
  if (bytes.size() < base + data_bytes) {
    throw CheckpointError(Kind::Truncated, "checkpoint truncated in parameter data: " + path.string());
  }
  std::size_t k = 0;
  bool finite = true;
  ck.params.for_each([&](const char*, Tensor<float>& t) {
    const Shape& shape = expected[k].second;
    const std::size_t count = shape_numel(shape);
    if (offsets[k] + count * 4 > data_bytes) {
      throw CheckpointError(Kind::Truncated, "parameter '" + expected[k].first + "' runs past the data section");
    }
    t = Tensor<float>(shape, detail::decode_f32_le(bytes.data() + base + offsets[k], count));
    finite = finite && t.all_finite();
    ++k;
  });
  if (!finite) throw CheckpointError(Kind::NonFinite, "checkpoint holds non-finite parameters: " + path.string());
  return ck;
}

}  // namespace frmil
