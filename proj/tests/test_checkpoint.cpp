#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "moelab/checkpoint.hpp"

using namespace moelab;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("ckpt_test_" + std::to_string(::getpid()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

EncoderConfig tiny_config() {
  EncoderConfig cfg;
  cfg.input_dim_image = 6;
  cfg.input_dim_text = 6;
  cfg.dim = 8;
  cfg.ffn_hidden = 12;
  cfg.blocks_image = 2;
  cfg.blocks_text = 2;
  return cfg;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void spit(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  out << content;
}

}  // namespace

TEST_CASE("dual encoder round trip is value-exact and save is deterministic") {
  TempDir tmp;
  DualEncoder<float> model(tiny_config(), 7);
  save_checkpoint(model, tmp.file("a"));
  auto loaded = load_dual_encoder<float>(tmp.file("a"));

  auto pa = model.all_params();
  auto pb = loaded.all_params();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->name == pb[i]->name);
    CHECK(pa[i]->value().bit_equal(pb[i]->value()));
  }

  // saving the loaded model reproduces both files byte for byte
  save_checkpoint(loaded, tmp.file("b"));
  CHECK(slurp(tmp.file("a.json")) == slurp(tmp.file("b.json")));
  CHECK(slurp(tmp.file("a.blob")) == slurp(tmp.file("b.blob")));
}

TEST_CASE("manifest structure: ascending offsets without gaps, f32 dtype") {
  TempDir tmp;
  DualEncoder<float> model(tiny_config(), 3);
  save_checkpoint(model, tmp.file("m"));
  auto manifest = json::parse(slurp(tmp.file("m.json")));
  CHECK(manifest.at("format_version") == 1);
  CHECK(manifest.at("kind") == "dual_encoder");
  std::size_t expected = 0, total = 0;
  for (const auto& t : manifest.at("tensors")) {
    CHECK(t.at("dtype") == "f32");
    CHECK(t.at("byte_offset").get<std::size_t>() == expected);
    std::size_t count = 1;
    for (const auto& s : t.at("shape")) count *= s.get<std::size_t>();
    CHECK(t.at("byte_length").get<std::size_t>() == count * 4);
    expected += count * 4;
    total += count * 4;
  }
  CHECK(std::filesystem::file_size(tmp.file("m.blob")) == total);
}

TEST_CASE("snapshot round trip") {
  TempDir tmp;
  DualEncoder<float> model(tiny_config(), 5);
  auto snap = model.extract_ffn_snapshot(2);
  save_snapshot(snap, tmp.file("s"));
  auto loaded = load_snapshot<float>(tmp.file("s"));
  CHECK(loaded.stage_id == 2);
  REQUIRE(loaded.blocks.size() == snap.blocks.size());
  for (std::size_t i = 0; i < snap.blocks.size(); ++i) {
    CHECK(loaded.blocks[i].w1.bit_equal(snap.blocks[i].w1));
    CHECK(loaded.blocks[i].b1.bit_equal(snap.blocks[i].b1));
    CHECK(loaded.blocks[i].w2.bit_equal(snap.blocks[i].w2));
    CHECK(loaded.blocks[i].b2.bit_equal(snap.blocks[i].b2));
  }
}

TEST_CASE("moe round trip preserves weights, expert count and K") {
  TempDir tmp;
  DualEncoder<float> base(tiny_config(), 9);
  auto moe = assemble_upcycled(base, 4, 2, 11);
  moe.blocks()[0].router.value()(0, 0) = 0.5f;  // make it non-trivial
  save_moe(moe, tmp.file("moe"));
  auto loaded = load_moe<float>(tmp.file("moe"));
  CHECK(loaded.num_experts() == 4);
  CHECK(loaded.top_k() == 2);
  auto pa = moe.all_params();
  auto pb = loaded.all_params();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i)
    CHECK(pa[i]->value().bit_equal(pb[i]->value()));
  // routers stay trainable after a load, everything else frozen
  for (auto* p : loaded.all_params())
    CHECK(p->frozen == (p->name.find("router") == std::string::npos));
}

TEST_CASE("float64 models save as f32 and reload") {
  TempDir tmp;
  DualEncoder<double> model(tiny_config(), 13);
  save_checkpoint(model, tmp.file("d"));
  auto as_f32 = load_dual_encoder<float>(tmp.file("d"));
  auto as_f64 = load_dual_encoder<double>(tmp.file("d"));
  auto pa = as_f32.all_params();
  auto pb = as_f64.all_params();
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::size_t j = 0; j < pa[i]->value().size(); ++j)
      CHECK(double(pa[i]->value()[j]) == pb[i]->value()[j]);
}

TEST_CASE("missing files raise IoError") {
  TempDir tmp;
  CHECK_THROWS_AS(load_dual_encoder<float>(tmp.file("absent")), IoError);

  DualEncoder<float> model(tiny_config(), 1);
  save_checkpoint(model, tmp.file("noblob"));
  std::filesystem::remove(tmp.file("noblob.blob"));
  CHECK_THROWS_AS(load_dual_encoder<float>(tmp.file("noblob")), IoError);
}

TEST_CASE("corrupt manifest JSON") {
  TempDir tmp;
  DualEncoder<float> model(tiny_config(), 1);
  save_checkpoint(model, tmp.file("c"));
  spit(tmp.file("c.json"), "{not json");
  CHECK_THROWS_AS(load_dual_encoder<float>(tmp.file("c")), CorruptManifestError);
}

TEST_CASE("wrong kind is a corrupt manifest") {
  TempDir tmp;
  DualEncoder<float> model(tiny_config(), 1);
  save_checkpoint(model, tmp.file("k"));
  CHECK_THROWS_AS(load_snapshot<float>(tmp.file("k")), CorruptManifestError);
}

TEST_CASE("offset gap is a corrupt manifest") {
  TempDir tmp;
  DualEncoder<float> model(tiny_config(), 1);
  save_checkpoint(model, tmp.file("g"));
  auto manifest = json::parse(slurp(tmp.file("g.json")));
  manifest["tensors"][1]["byte_offset"] =
      manifest["tensors"][1]["byte_offset"].get<std::size_t>() + 4;
  spit(tmp.file("g.json"), manifest.dump(2));
  CHECK_THROWS_WITH_AS(load_dual_encoder<float>(tmp.file("g")),
                       doctest::Contains("gap"), CorruptManifestError);
}

TEST_CASE("shape and byte_length disagreement") {
  TempDir tmp;
  DualEncoder<float> model(tiny_config(), 1);
  save_checkpoint(model, tmp.file("s"));
  auto manifest = json::parse(slurp(tmp.file("s.json")));
  manifest["tensors"][0]["shape"] = json::array({3, 3});
  spit(tmp.file("s.json"), manifest.dump(2));
  CHECK_THROWS_AS(load_dual_encoder<float>(tmp.file("s")), ShapeMismatchError);
}

TEST_CASE("tensor shape mismatch against the model") {
  TempDir tmp;
  DualEncoder<float> model(tiny_config(), 1);
  save_checkpoint(model, tmp.file("w"));
  auto manifest = json::parse(slurp(tmp.file("w.json")));
  // keep shape/byte_length self-consistent but wrong for the model
  std::size_t off = 0;
  for (auto& t : manifest["tensors"]) {
    if (t["name"] == "image_proj") t["shape"] = json::array({4, 12});
    std::size_t count = 1;
    for (const auto& s : t["shape"]) count *= s.get<std::size_t>();
    t["byte_offset"] = off;
    t["byte_length"] = count * 4;
    off += count * 4;
  }
  spit(tmp.file("w.json"), manifest.dump(2));
  CHECK_THROWS_AS(load_dual_encoder<float>(tmp.file("w")), ShapeMismatchError);
}

TEST_CASE("truncated blob") {
  TempDir tmp;
  DualEncoder<float> model(tiny_config(), 1);
  save_checkpoint(model, tmp.file("t"));
  auto blob = slurp(tmp.file("t.blob"));
  spit(tmp.file("t.blob"), blob.substr(0, blob.size() - 8));
  CHECK_THROWS_AS(load_dual_encoder<float>(tmp.file("t")), TruncatedBlobError);
}

TEST_CASE("missing tensor entry is a corrupt manifest") {
  TempDir tmp;
  DualEncoder<float> model(tiny_config(), 1);
  save_checkpoint(model, tmp.file("x"));
  auto manifest = json::parse(slurp(tmp.file("x.json")));
  auto& tensors = manifest["tensors"];
  tensors.erase(tensors.size() - 1);
  spit(tmp.file("x.json"), manifest.dump(2));
  CHECK_THROWS_AS(load_dual_encoder<float>(tmp.file("x")), CorruptManifestError);
}

TEST_CASE("unsupported format version") {
  TempDir tmp;
  DualEncoder<float> model(tiny_config(), 1);
  save_checkpoint(model, tmp.file("v"));
  auto manifest = json::parse(slurp(tmp.file("v.json")));
  manifest["format_version"] = 99;
  spit(tmp.file("v.json"), manifest.dump(2));
  CHECK_THROWS_AS(load_dual_encoder<float>(tmp.file("v")), CorruptManifestError);
}
