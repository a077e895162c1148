#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "moelab/encoder.hpp"
#include "moelab/errors.hpp"
#include "moelab/moe.hpp"

namespace moelab {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian");

using json = nlohmann::ordered_json;

// Checkpoints are a two-file pair: <path>.json (manifest) and <path>.blob
// (concatenated row-major little-endian f32 arrays, offsets ascending with
// no gaps).
namespace ckpt {

constexpr int kFormatVersion = 1;

struct TensorRef {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> data;
};

template <typename T>
void save_raw(const std::string& path, const std::string& kind, const json& config,
              const std::vector<std::pair<std::string, const Mat<T>*>>& tensors) {
  json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["kind"] = kind;
  manifest["config"] = config;
  json tlist = json::array();
  std::size_t offset = 0;
  std::vector<float> blob;
  for (const auto& [name, mat] : tensors) {
    const std::size_t bytes = mat->size() * sizeof(float);
    json t;
    t["name"] = name;
    t["shape"] = json::array({mat->rows(), mat->cols()});
    t["dtype"] = "f32";
    t["byte_offset"] = offset;
    t["byte_length"] = bytes;
    tlist.push_back(std::move(t));
    offset += bytes;
    for (std::size_t i = 0; i < mat->size(); ++i) blob.push_back(float((*mat)[i]));
  }
  manifest["tensors"] = std::move(tlist);

  std::ofstream mf(path + ".json", std::ios::binary);
  if (!mf) throw IoError("cannot write manifest: " + path + ".json");
  mf << manifest.dump(2) << "\n";
  if (!mf) throw IoError("manifest write failed: " + path + ".json");

  std::ofstream bf(path + ".blob", std::ios::binary);
  if (!bf) throw IoError("cannot write blob: " + path + ".blob");
  bf.write(reinterpret_cast<const char*>(blob.data()),
           std::streamsize(blob.size() * sizeof(float)));
  if (!bf) throw IoError("blob write failed: " + path + ".blob");
}

struct Loaded {
  json config;
  std::string kind;
  std::vector<TensorRef> tensors;
  std::map<std::string, std::size_t> by_name;
};

inline Loaded load_raw(const std::string& path, const std::string& expected_kind) {
  std::ifstream mf(path + ".json", std::ios::binary);
  if (!mf) throw IoError("cannot open manifest: " + path + ".json");
  json manifest;
  try {
    manifest = json::parse(mf);
  } catch (const json::exception& e) {
    throw CorruptManifestError("manifest parse failure in " + path + ".json: " + e.what());
  }
  Loaded out;
  try {
    if (int(manifest.at("format_version")) != kFormatVersion)
      throw CorruptManifestError("unsupported format_version in " + path + ".json");
    out.kind = manifest.at("kind").get<std::string>();
    out.config = manifest.at("config");
    if (out.kind != expected_kind)
      throw CorruptManifestError("checkpoint kind '" + out.kind + "' in " + path +
                                 ", expected '" + expected_kind + "'");
    std::size_t expected_offset = 0;
    for (const auto& t : manifest.at("tensors")) {
      TensorRef ref;
      ref.name = t.at("name").get<std::string>();
      for (const auto& s : t.at("shape")) ref.shape.push_back(s.get<std::size_t>());
      if (t.at("dtype").get<std::string>() != "f32")
        throw CorruptManifestError("unsupported dtype for tensor " + ref.name);
      const std::size_t off = t.at("byte_offset").get<std::size_t>();
      const std::size_t len = t.at("byte_length").get<std::size_t>();
      if (off != expected_offset)
        throw CorruptManifestError("tensor " + ref.name + " offset " + std::to_string(off) +
                                   " leaves a gap (expected " +
                                   std::to_string(expected_offset) + ")");
      std::size_t count = 1;
      for (std::size_t s : ref.shape) count *= s;
      if (len != count * sizeof(float))
        throw ShapeMismatchError("tensor " + ref.name + ": declared shape needs " +
                                 std::to_string(count * sizeof(float)) + " bytes, got " +
                                 std::to_string(len));
      expected_offset = off + len;
      ref.data.resize(count);
      out.by_name[ref.name] = out.tensors.size();
      out.tensors.push_back(std::move(ref));
    }

    std::ifstream bf(path + ".blob", std::ios::binary);
    if (!bf) throw IoError("cannot open blob: " + path + ".blob");
    bf.seekg(0, std::ios::end);
    const std::size_t blob_size = std::size_t(bf.tellg());
    if (blob_size < expected_offset)
      throw TruncatedBlobError("blob " + path + ".blob has " + std::to_string(blob_size) +
                               " bytes, manifest declares " +
                               std::to_string(expected_offset));
    bf.seekg(0);
    for (auto& t : out.tensors) {
      bf.read(reinterpret_cast<char*>(t.data.data()),
              std::streamsize(t.data.size() * sizeof(float)));
      if (!bf) throw TruncatedBlobError("blob read failed for tensor " + t.name);
    }
  } catch (const json::exception& e) {
    throw CorruptManifestError("malformed manifest " + path + ".json: " + e.what());
  }
  return out;
}

template <typename T>
void fill_param(const Loaded& loaded, Parameter<T>& p) {
  auto it = loaded.by_name.find(p.name);
  if (it == loaded.by_name.end())
    throw CorruptManifestError("manifest missing tensor " + p.name);
  const TensorRef& ref = loaded.tensors[it->second];
  if (ref.shape.size() != 2 || ref.shape[0] != p.value().rows() ||
      ref.shape[1] != p.value().cols())
    throw ShapeMismatchError("tensor " + p.name + " has unexpected shape");
  for (std::size_t i = 0; i < p.value().size(); ++i) p.value()[i] = T(ref.data[i]);
}

}  // namespace ckpt

inline json encoder_config_json(const EncoderConfig& cfg) {
  json j;
  j["input_dim_image"] = cfg.input_dim_image;
  j["input_dim_text"] = cfg.input_dim_text;
  j["dim"] = cfg.dim;
  j["ffn_hidden"] = cfg.ffn_hidden;
  j["blocks_image"] = cfg.blocks_image;
  j["blocks_text"] = cfg.blocks_text;
  j["temperature"] = cfg.temperature;
  return j;
}

inline EncoderConfig encoder_config_from_json(const json& j) {
  EncoderConfig cfg;
  cfg.input_dim_image = j.at("input_dim_image").get<std::size_t>();
  cfg.input_dim_text = j.at("input_dim_text").get<std::size_t>();
  cfg.dim = j.at("dim").get<std::size_t>();
  cfg.ffn_hidden = j.at("ffn_hidden").get<std::size_t>();
  cfg.blocks_image = j.at("blocks_image").get<std::size_t>();
  cfg.blocks_text = j.at("blocks_text").get<std::size_t>();
  cfg.temperature = j.at("temperature").get<double>();
  return cfg;
}

template <typename T>
void save_checkpoint(DualEncoder<T>& model, const std::string& path) {
  std::vector<std::pair<std::string, const Mat<T>*>> tensors;
  for (Parameter<T>* p : model.all_params()) tensors.emplace_back(p->name, &p->value());
  ckpt::save_raw(path, "dual_encoder", encoder_config_json(model.config()), tensors);
}

template <typename T>
DualEncoder<T> load_dual_encoder(const std::string& path) {
  auto loaded = ckpt::load_raw(path, "dual_encoder");
  EncoderConfig cfg;
  try {
    cfg = encoder_config_from_json(loaded.config);
  } catch (const json::exception& e) {
    throw CorruptManifestError("bad encoder config in " + path + ".json: " + e.what());
  }
  DualEncoder<T> model(cfg, 0);
  auto params = model.all_params();
  if (params.size() != loaded.tensors.size())
    throw CorruptManifestError("manifest lists " + std::to_string(loaded.tensors.size()) +
                               " tensors, model has " + std::to_string(params.size()));
  for (Parameter<T>* p : params) ckpt::fill_param(loaded, *p);
  return model;
}

template <typename T>
void save_snapshot(const FfnSnapshot<T>& snap, const std::string& path) {
  json cfg;
  cfg["stage_id"] = snap.stage_id;
  cfg["num_blocks"] = snap.blocks.size();
  if (!snap.blocks.empty()) {
    cfg["dim"] = snap.blocks[0].w1.rows();
    cfg["ffn_hidden"] = snap.blocks[0].w1.cols();
  }
  std::vector<std::pair<std::string, const Mat<T>*>> tensors;
  for (std::size_t i = 0; i < snap.blocks.size(); ++i) {
    std::string base = "block_" + std::to_string(i) + ".";
    tensors.emplace_back(base + "ffn_w1", &snap.blocks[i].w1);
    tensors.emplace_back(base + "ffn_b1", &snap.blocks[i].b1);
    tensors.emplace_back(base + "ffn_w2", &snap.blocks[i].w2);
    tensors.emplace_back(base + "ffn_b2", &snap.blocks[i].b2);
  }
  ckpt::save_raw(path, "ffn_snapshot", cfg, tensors);
}

template <typename T>
FfnSnapshot<T> load_snapshot(const std::string& path) {
  auto loaded = ckpt::load_raw(path, "ffn_snapshot");
  FfnSnapshot<T> snap;
  try {
    snap.stage_id = loaded.config.at("stage_id").get<int>();
    const std::size_t nb = loaded.config.at("num_blocks").get<std::size_t>();
    if (loaded.tensors.size() != 4 * nb)
      throw CorruptManifestError("snapshot " + path + " tensor count mismatch");
    auto take = [&](const std::string& name) -> Mat<T> {
      auto it = loaded.by_name.find(name);
      if (it == loaded.by_name.end())
        throw CorruptManifestError("snapshot missing tensor " + name);
      const auto& ref = loaded.tensors[it->second];
      Mat<T> m(ref.shape[0], ref.shape[1]);
      for (std::size_t i = 0; i < m.size(); ++i) m[i] = T(ref.data[i]);
      return m;
    };
    for (std::size_t i = 0; i < nb; ++i) {
      std::string base = "block_" + std::to_string(i) + ".";
      snap.blocks.push_back(FfnWeights<T>{take(base + "ffn_w1"), take(base + "ffn_b1"),
                                          take(base + "ffn_w2"), take(base + "ffn_b2")});
    }
  } catch (const json::exception& e) {
    throw CorruptManifestError("bad snapshot config in " + path + ".json: " + e.what());
  }
  return snap;
}

template <typename T>
void save_moe(MoEModel<T>& moe, const std::string& path) {
  json cfg = encoder_config_json(moe.config());
  cfg["num_experts"] = moe.num_experts();
  cfg["top_k"] = moe.top_k();
  std::vector<std::pair<std::string, const Mat<T>*>> tensors;
  for (Parameter<T>* p : moe.all_params()) tensors.emplace_back(p->name, &p->value());
  ckpt::save_raw(path, "moe", cfg, tensors);
}

template <typename T>
MoEModel<T> load_moe(const std::string& path) {
  auto loaded = ckpt::load_raw(path, "moe");
  EncoderConfig cfg;
  std::size_t experts = 0, top_k = 0;
  try {
    cfg = encoder_config_from_json(loaded.config);
    experts = loaded.config.at("num_experts").get<std::size_t>();
    top_k = loaded.config.at("top_k").get<std::size_t>();
  } catch (const json::exception& e) {
    throw CorruptManifestError("bad moe config in " + path + ".json: " + e.what());
  }
  MoEModel<T> moe(cfg, experts, top_k);
  auto params = moe.all_params();
  if (params.size() != loaded.tensors.size())
    throw CorruptManifestError("manifest lists " + std::to_string(loaded.tensors.size()) +
                               " tensors, model has " + std::to_string(params.size()));
  for (Parameter<T>* p : params) ckpt::fill_param(loaded, *p);
  return moe;
}

}  // namespace moelab
