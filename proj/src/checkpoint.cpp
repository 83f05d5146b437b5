#include "moa/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "moa/errors.hpp"

namespace moa {

namespace {

constexpr char kMagic[4] = {'M', 'O', 'A', '1'};

template <typename T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const std::string& in, std::size_t pos) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<T>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  return v;
}

}  // namespace

std::string encode_checkpoint(const RunConfig& config, const ParamStore& params) {
  nlohmann::ordered_json header;
  nlohmann::ordered_json cfg = nlohmann::ordered_json::object();
  for (const auto& [k, v] : config.to_pairs()) cfg[k] = v;
  header["config"] = cfg;
  nlohmann::ordered_json table = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  for (const auto& e : params.entries()) {
    table.push_back({{"name", e.name},
                     {"shape", {e.value.rows(), e.value.cols()}},
                     {"frozen", e.frozen},
                     {"offset", offset}});
    offset += 8 * e.value.size();
  }
  header["params"] = table;
  header["payload_bytes"] = offset;
  const std::string text = header.dump();

  std::string out(kMagic, 4);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& e : params.entries())
    for (double v : e.value.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CheckpointError("not a checkpoint (bad magic or truncated preamble)");
  }
  const auto version = get_le<std::uint32_t>(bytes, 4);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto header_len = get_le<std::uint64_t>(bytes, 8);
  if (header_len > bytes.size() - 16) throw CheckpointError("truncated checkpoint header");
  const std::size_t payload_start = 16 + header_len;

  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(bytes.begin() + 16,
                                           bytes.begin() + static_cast<std::ptrdiff_t>(payload_start));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
  }

  Checkpoint ck;
  try {
    std::vector<std::pair<std::string, std::string>> pairs;
    for (const auto& [k, v] : header.at("config").items()) pairs.emplace_back(k, v.get<std::string>());
    ck.config = RunConfig::from_pairs(pairs);

    const auto payload_bytes = header.at("payload_bytes").get<std::uint64_t>();
    if (bytes.size() - payload_start != payload_bytes) {
      throw CheckpointError("payload holds " + std::to_string(bytes.size() - payload_start) +
                            " bytes, header declares " + std::to_string(payload_bytes));
    }
    std::uint64_t expected = 0;
    for (const auto& row : header.at("params")) {
      const auto name = row.at("name").get<std::string>();
      const auto rows = row.at("shape").at(0).get<std::size_t>();
      const auto cols = row.at("shape").at(1).get<std::size_t>();
      const auto offset = row.at("offset").get<std::uint64_t>();
      if (offset != expected) throw CheckpointError("parameter '" + name + "' has a misplaced offset");
      if (rows == 0 || cols == 0) throw CheckpointError("parameter '" + name + "' has an empty shape");
      const std::uint64_t len = 8ull * rows * cols;
      if (offset + len > payload_bytes) throw CheckpointError("parameter '" + name + "' overruns the payload");
      std::vector<double> values(rows * cols);
      for (std::size_t i = 0; i < values.size(); ++i) {
        values[i] = std::bit_cast<double>(get_le<std::uint64_t>(bytes, payload_start + offset + 8 * i));
      }
      ck.params.add(name, Tensor(rows, cols, std::move(values)), row.at("frozen").get<bool>());
      expected = offset + len;
    }
    if (expected != payload_bytes) throw CheckpointError("parameter table does not cover the payload");
  } catch (const CheckpointError&) {
    throw;
  } catch (const ConfigError& e) {
    throw CheckpointError("checkpoint config key '" + e.key() + "': " + e.what());
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const RunConfig& config,
                     const ParamStore& params) {
  const std::string bytes = encode_checkpoint(config, params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing checkpoint '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

ViTModel restore_model(const Checkpoint& ck) {
  ViTModel model(ck.config.vit_config(), ck.config.seed, ck.config.freeze_policy);
  if (!model.params().same_layout(ck.params)) {
    throw CheckpointError("stored parameters do not match the configured architecture");
  }
  model.params() = ck.params;
  return model;
}

}  // namespace moa
