#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <unistd.h>

#include "moelab/eval.hpp"
#include "moelab/synthdata.hpp"

using namespace moelab;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("synthdata_test_" + std::to_string(::getpid()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("spec validation") {
  AttributeSpec spec;
  CHECK_NOTHROW(spec.validate());
  CHECK(spec.code_dim() == 12);
  CHECK(spec.view_dim() == 24);

  spec.salience = {1.0, 2.0, 3.0};  // not decreasing
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec.salience = {4.0, 2.0};  // wrong length
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = AttributeSpec{};
  spec.noise_sigma = -0.1;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
}

TEST_CASE("generation is deterministic and shapes line up") {
  AttributeSpec spec;
  auto a = generate_dataset<double>(50, 20, spec, 7);
  auto b = generate_dataset<double>(50, 20, spec, 7);
  CHECK(a.train.images.bit_equal(b.train.images));
  CHECK(a.train.texts.bit_equal(b.train.texts));
  CHECK(a.eval.images.bit_equal(b.eval.images));
  CHECK(a.train.attributes == b.train.attributes);

  CHECK(a.train.size() == 50);
  CHECK(a.eval.size() == 20);
  CHECK(a.train.images.rows() == 50);
  CHECK(a.train.images.cols() == spec.view_dim());
  CHECK(a.eval.texts.cols() == spec.view_dim());
  // ids: train 0..49, eval continues
  CHECK(a.train.sample_ids.front() == 0);
  CHECK(a.train.sample_ids.back() == 49);
  CHECK(a.eval.sample_ids.front() == 50);
  CHECK(a.eval.sample_ids.back() == 69);

  auto c = generate_dataset<double>(50, 20, spec, 8);
  CHECK_FALSE(a.train.images.bit_equal(c.train.images));
}

TEST_CASE("per-sample streams: prefix stability under different split sizes") {
  AttributeSpec spec;
  auto small = generate_dataset<double>(30, 5, spec, 3);
  auto large = generate_dataset<double>(60, 5, spec, 3);
  // sample ids 0..29 identical regardless of how many more are drawn
  for (std::size_t s = 0; s < 30; ++s) {
    CHECK(small.train.attributes[s] == large.train.attributes[s]);
    for (std::size_t d = 0; d < spec.view_dim(); ++d) {
      CHECK(small.train.images(s, d) == large.train.images(s, d));
      CHECK(small.train.texts(s, d) == large.train.texts(s, d));
    }
  }
}

TEST_CASE("attribute marginals are roughly uniform") {
  AttributeSpec spec;
  auto split = generate_dataset<double>(2000, 10, spec, 11);
  for (std::size_t a = 0; a < spec.num_attributes; ++a) {
    std::map<int, int> counts;
    for (const auto& attrs : split.train.attributes) counts[attrs[a]]++;
    CHECK(counts.size() == spec.values_per_attribute);
    // chi-squared against uniform; df = 3, 99.9% critical value ~16.3
    double expected = 2000.0 / double(spec.values_per_attribute);
    double chi2 = 0;
    for (const auto& [v, c] : counts) chi2 += (c - expected) * (c - expected) / expected;
    CHECK(chi2 < 16.3);
  }
}

TEST_CASE("zero noise: views are a deterministic function of attributes") {
  AttributeSpec spec;
  spec.noise_sigma = 0.0;
  auto split = generate_dataset<double>(200, 10, spec, 13);
  std::map<std::vector<int>, std::size_t> rep;
  for (std::size_t s = 0; s < split.train.size(); ++s) {
    auto [it, fresh] = rep.emplace(split.train.attributes[s], s);
    if (fresh) continue;
    for (std::size_t d = 0; d < spec.view_dim(); ++d) {
      CHECK(split.train.images(s, d) == doctest::Approx(split.train.images(it->second, d)));
      CHECK(split.train.texts(s, d) == doctest::Approx(split.train.texts(it->second, d)));
    }
  }
  CHECK(rep.size() > 1);
  CHECK(rep.size() < split.train.size());  // 64 tuples, 200 samples: collisions exist
}

TEST_CASE("zero noise: view norm equals code norm (orthonormal mixing)") {
  AttributeSpec spec;
  spec.noise_sigma = 0.0;
  auto split = generate_dataset<double>(20, 5, spec, 17);
  double expected = 0;
  for (double s : spec.salience) expected += s * s;
  expected = std::sqrt(expected);
  for (std::size_t s = 0; s < split.train.size(); ++s) {
    double n_img = 0, n_txt = 0;
    for (std::size_t d = 0; d < spec.view_dim(); ++d) {
      n_img += split.train.images(s, d) * split.train.images(s, d);
      n_txt += split.train.texts(s, d) * split.train.texts(s, d);
    }
    CHECK(std::sqrt(n_img) == doctest::Approx(expected).epsilon(1e-9));
    CHECK(std::sqrt(n_txt) == doctest::Approx(expected).epsilon(1e-9));
  }
}

TEST_CASE("salience ordering: raw-view probes separate attribute 0 best") {
  AttributeSpec spec;
  auto split = generate_dataset<double>(600, 10, spec, 19);
  std::vector<double> acc(spec.num_attributes);
  for (std::size_t a = 0; a < spec.num_attributes; ++a) {
    auto labels = attribute_labels(split.train, a);
    acc[a] = linear_probe(split.train.images, labels, spec.values_per_attribute, 5);
  }
  // all attributes are linearly decodable from the clean mixed views, but
  // the highest-salience one must not be the worst
  CHECK(acc[0] >= acc[spec.num_attributes - 1] - 1e-9);
  CHECK(acc[0] > 0.9);
}

TEST_CASE("dataset too small is a config error") {
  AttributeSpec spec;
  CHECK_THROWS_AS(generate_dataset<double>(1, 5, spec, 0), ConfigError);
  CHECK_THROWS_AS(generate_dataset<double>(10, 0, spec, 0), ConfigError);
}

TEST_CASE("csv round trip preserves the dataset") {
  TempDir tmp;
  AttributeSpec spec;
  auto split = generate_dataset<float>(40, 10, spec, 23);
  save_dataset_csv(split, tmp.file("d.csv"));
  auto loaded = load_dataset_csv<float>(tmp.file("d.csv"), 40, spec, 23);

  CHECK(loaded.train.size() == 40);
  CHECK(loaded.eval.size() == 10);
  CHECK(loaded.train.sample_ids == split.train.sample_ids);
  CHECK(loaded.eval.sample_ids == split.eval.sample_ids);
  CHECK(loaded.train.attributes == split.train.attributes);
  // f32 shortest round-trip strings reload bit-exactly
  CHECK(loaded.train.images.bit_equal(split.train.images));
  CHECK(loaded.train.texts.bit_equal(split.train.texts));
  CHECK(loaded.eval.images.bit_equal(split.eval.images));
}

TEST_CASE("csv header matches the documented layout") {
  TempDir tmp;
  AttributeSpec spec;
  auto split = generate_dataset<float>(3, 1, spec, 29);
  save_dataset_csv(split, tmp.file("d.csv"));
  std::ifstream in(tmp.file("d.csv"));
  std::string header;
  std::getline(in, header);
  CHECK(header.substr(0, 30) == "sample_id,attr_0,attr_1,attr_2");
  CHECK(header.find(",img_0,") != std::string::npos);
  CHECK(header.find(",txt_0,") != std::string::npos);
  CHECK(header.find("img_23") != std::string::npos);
  CHECK(header.find("txt_23") != std::string::npos);
}

TEST_CASE("csv load rejects malformed rows") {
  TempDir tmp;
  {
    std::ofstream out(tmp.file("bad.csv"));
    out << "sample_id,attr_0\n0,1,2,3\n";
  }
  AttributeSpec spec;
  CHECK_THROWS_AS(load_dataset_csv<float>(tmp.file("bad.csv"), 1, spec, 0), DataError);
  CHECK_THROWS_AS(load_dataset_csv<float>(tmp.file("missing.csv"), 1, spec, 0), IoError);

  // fewer rows than n_train
  auto split = generate_dataset<float>(3, 1, spec, 1);
  save_dataset_csv(split, tmp.file("short.csv"));
  CHECK_THROWS_AS(load_dataset_csv<float>(tmp.file("short.csv"), 10, spec, 1), DataError);
}

TEST_CASE("attribute_labels bounds") {
  AttributeSpec spec;
  auto split = generate_dataset<double>(5, 2, spec, 31);
  CHECK(attribute_labels(split.train, 0).size() == 5);
  CHECK_THROWS_AS(attribute_labels(split.train, 3), ConfigError);
}
