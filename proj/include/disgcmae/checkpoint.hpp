// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "disgcmae/encoders.hpp"

namespace disgcmae {

/// Raised for unreadable/unwritable files; carries the offending path.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised for files that exist but do not parse as expected.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline nlohmann::json to_json(const EncoderConfig& c) {
  return {{"family", to_string(c.family)},
          {"tier", c.tier},
          {"layers", c.layers},
          {"hidden", c.hidden},
          {"heads", c.heads},
          {"position_embedding", c.position_embedding},
          {"dyn_threshold", c.dyn_threshold},
          {"contrastive_dim", c.contrastive_dim},
          {"in_dim", c.in_dim},
          {"n_positions", c.n_positions},
          {"n_classes", c.n_classes}};
}

/// Missing keys keep the defaults of `base`.
inline EncoderConfig encoder_config_from_json(const nlohmann::json& j, EncoderConfig base = {}) {
  if (j.contains("family")) base.family = family_from_string(j.at("family").get<std::string>());
  base.tier = j.value("tier", base.tier);
  base.layers = j.value("layers", base.layers);
  base.hidden = j.value("hidden", base.hidden);
  base.heads = j.value("heads", base.heads);
  base.position_embedding = j.value("position_embedding", base.position_embedding);
  base.dyn_threshold = j.value("dyn_threshold", base.dyn_threshold);
  base.contrastive_dim = j.value("contrastive_dim", base.contrastive_dim);
  base.in_dim = j.value("in_dim", base.in_dim);
  base.n_positions = j.value("n_positions", base.n_positions);
  base.n_classes = j.value("n_classes", base.n_classes);
  return base;
}

struct Checkpoint {
  EncoderConfig config;
  ParamSet params;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
};

namespace detail {

inline void put_f64(std::ostream& out, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline double get_f64(const unsigned char* b) {
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}
}  // namespace detail

/// Writes `path` (JSON manifest) and `path + ".bin"` (little-endian f64 blob).
inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const std::string blob_path = path + ".bin";
  nlohmann::json index = nlohmann::json::array();
  std::ofstream blob(blob_path, std::ios::binary | std::ios::trunc);
  if (!blob) throw IoError("cannot write checkpoint blob " + blob_path);
  std::size_t offset = 0;
  for (const auto& e : ck.params.entries()) {
    index.push_back({{"name", e.name}, {"offset", offset}, {"shape", e.tensor.shape}});
    for (double v : e.tensor.values) detail::put_f64(blob, v);
    offset += e.tensor.size();
  }
  if (!blob) throw IoError("failed writing checkpoint blob " + blob_path);
  nlohmann::json j = {{"config", to_json(ck.config)},
                      {"step", ck.step},
                      {"seed", ck.seed},
                      {"blob", std::filesystem::path(blob_path).filename().string()},
                      {"count", offset},
                      {"params", index}};
  std::ofstream man(path, std::ios::trunc);
  if (!man) throw IoError("cannot write checkpoint manifest " + path);
  man << j.dump(1) << "\n";
  if (!man) throw IoError("failed writing checkpoint manifest " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream man(path);
  if (!man) throw IoError("cannot open checkpoint " + path);
  nlohmann::json j;
  Checkpoint ck;
  std::vector<unsigned char> bytes;
  try {
    man >> j;
    ck.config = encoder_config_from_json(j.at("config"));
    ck.step = j.at("step").get<std::uint64_t>();
    ck.seed = j.at("seed").get<std::uint64_t>();
    const auto blob_path =
        (std::filesystem::path(path).parent_path() / j.at("blob").get<std::string>()).string();
    std::ifstream blob(blob_path, std::ios::binary);
    if (!blob) throw IoError("cannot open checkpoint blob " + blob_path);
    bytes.assign(std::istreambuf_iterator<char>(blob), std::istreambuf_iterator<char>());
    const auto count = j.at("count").get<std::size_t>();
    if (bytes.size() != 8 * count)
      throw DataError("checkpoint blob " + blob_path + " has " + std::to_string(bytes.size()) +
                      " bytes, expected " + std::to_string(8 * count));
    for (const auto& p : j.at("params")) {
      Tensor t;
      t.shape = p.at("shape").get<Shape>();
      const auto off = p.at("offset").get<std::size_t>();
      const std::size_t sz = shape_size(t.shape);
      if (off + sz > count) throw DataError("checkpoint " + path + ": parameter extends past blob");
      t.values.resize(sz);
      for (std::size_t i = 0; i < sz; ++i) t.values[i] = detail::get_f64(&bytes[8 * (off + i)]);
      ck.params.add(p.at("name").get<std::string>(), std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint " + path + ": " + e.what());
  } catch (const ContractViolation& e) {
    throw DataError("invalid checkpoint " + path + ": " + e.what());
  }
  return ck;
}

}  // namespace disgcmae
