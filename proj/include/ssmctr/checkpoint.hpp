#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "ssmctr/config.hpp"
#include "ssmctr/models.hpp"

namespace ssmctr {

/// Unreadable, corrupt, or misused checkpoint.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Layout:
//   8 bytes   magic "SSMCTRCK"
//   u32 LE    format version
//   u64 LE    header length
//   header    UTF-8 JSON: model kind, schema (+ hash), run config, tensor list
//   payload   every tensor's values as IEEE-754 binary64 LE, header order
inline constexpr char kCheckpointMagic[8] = {'S', 'S', 'M', 'C', 'T', 'R', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

struct Checkpoint {
  RunConfig config;
  CtrModel model;
  std::uint64_t schema_hash = 0;
};

inline void save_checkpoint(const std::string& path, CtrModel& model, const RunConfig& config) {
  nlohmann::json header;
  header["format"] = "ssmctr-checkpoint";
  header["model_kind"] = std::string(name_of(model.kind()));
  header["schema"] = model.schema().to_json();
  header["schema_hash"] = hex64(model.schema().hash());
  header["config"] = config.to_json();
  nlohmann::json tensors = nlohmann::json::array();
  auto params = model.parameters(Phase::Full);
  for (const auto& p : params) tensors.push_back({{"name", p.name}, {"shape", p.tensor->shape()}});
  header["tensors"] = tensors;
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path);
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : params) {
    out.write(reinterpret_cast<const char*>(p.tensor->raw()),
              static_cast<std::streamsize>(p.tensor->size() * sizeof(double)));
  }
  if (!out) throw CheckpointError("short write to " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw CheckpointError(path + " is not a checkpoint");
  }
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  if (len > (std::uint64_t{1} << 32)) throw CheckpointError("corrupt checkpoint header");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw CheckpointError("truncated checkpoint header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
    RunConfig config = RunConfig::from_json(header.at("config"));
    FeatureSchema schema = FeatureSchema::from_json(header.at("schema"));
    const std::string kind = header.at("model_kind").get<std::string>();
    if (kind != name_of(config.model.kind)) {
      throw CheckpointError("model kind mismatch inside checkpoint");
    }
    if (header.at("schema_hash").get<std::string>() != hex64(schema.hash())) {
      throw CheckpointError("schema hash mismatch inside checkpoint");
    }
    Checkpoint ck{config, CtrModel(schema, config.model, 0), schema.hash()};
    auto params = ck.model.parameters(Phase::Full);
    const auto& list = header.at("tensors");
    if (list.size() != params.size()) throw CheckpointError("tensor count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto name = list[i].at("name").get<std::string>();
      const auto shape = list[i].at("shape").get<Shape>();
      if (name != params[i].name || shape != params[i].tensor->shape()) {
        throw CheckpointError("tensor " + name + " " + to_string(shape) +
                              " does not match model tensor " + params[i].name + " " +
                              to_string(params[i].tensor->shape()));
      }
      in.read(reinterpret_cast<char*>(params[i].tensor->raw()),
              static_cast<std::streamsize>(params[i].tensor->size() * sizeof(double)));
      if (!in) throw CheckpointError("truncated tensor data for " + name);
    }
    if (in.peek() != std::char_traits<char>::eof()) {
      throw CheckpointError("trailing bytes after tensor data in " + path);
    }
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("invalid configuration in checkpoint: ") + e.what());
  }
}

}  // namespace ssmctr
