#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "moelab/errors.hpp"
#include "moelab/mat.hpp"
#include "moelab/rng.hpp"

namespace moelab {

// Latent generative spec for paired two-view samples. Each sample is a
// discrete attribute tuple; each attribute contributes a one-hot block
// scaled by its salience, so earlier attributes dominate the signal and a
// contrastive learner picks them up first.
struct AttributeSpec {
  std::size_t num_attributes = 3;
  std::size_t values_per_attribute = 4;
  std::vector<double> salience = {4.0, 2.0, 1.0};
  double noise_sigma = 0.7;

  void validate() const {
    if (num_attributes < 1 || values_per_attribute < 2)
      throw ConfigError("data: need >= 1 attribute with >= 2 values");
    if (salience.size() != num_attributes)
      throw ConfigError("data: salience length must equal num_attributes");
    for (std::size_t a = 0; a < salience.size(); ++a) {
      if (!(salience[a] > 0)) throw ConfigError("data: salience must be positive");
      if (a > 0 && !(salience[a] < salience[a - 1]))
        throw ConfigError("data: salience must be strictly decreasing");
    }
    if (noise_sigma < 0) throw ConfigError("data: noise_sigma must be nonnegative");
  }

  std::size_t code_dim() const { return num_attributes * values_per_attribute; }
  // Each view mixes the code into twice its dimension.
  std::size_t view_dim() const { return 2 * code_dim(); }
};

// One half (train or eval) of a generated dataset, stored columnar:
// attribute tuples plus the two view matrices, row-aligned by sample.
template <typename T>
struct SampleSet {
  std::vector<int> sample_ids;
  std::vector<std::vector<int>> attributes;  // [sample][attribute]
  Mat<T> images;                             // n x view_dim
  Mat<T> texts;                              // n x view_dim

  std::size_t size() const { return sample_ids.size(); }
};

template <typename T>
struct DatasetSplit {
  AttributeSpec spec;
  std::uint64_t seed = 0;
  SampleSet<T> train;
  SampleSet<T> eval;
};

namespace detail {

// Random matrix with orthonormal columns (Gram-Schmidt on Gaussian draws).
inline std::vector<std::vector<double>> orthonormal_columns(std::size_t rows,
                                                            std::size_t cols,
                                                            std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<std::vector<double>> q;
  for (std::size_t c = 0; c < cols; ++c) {
    std::vector<double> v(rows);
    for (auto& x : v) x = gauss(rng);
    for (const auto& u : q) {
      double dot = 0;
      for (std::size_t r = 0; r < rows; ++r) dot += v[r] * u[r];
      for (std::size_t r = 0; r < rows; ++r) v[r] -= dot * u[r];
    }
    double nrm = 0;
    for (double x : v) nrm += x * x;
    nrm = std::sqrt(nrm);
    for (auto& x : v) x /= nrm;
    q.push_back(std::move(v));
  }
  return q;  // q[c][r]
}

}  // namespace detail

// Deterministic paired-view generator. View mixing matrices are drawn once
// from the seed; each sample's attributes and noise come from a stream
// keyed by (seed, sample_id), so generation order does not matter.
template <typename T>
DatasetSplit<T> generate_dataset(std::size_t n_train, std::size_t n_eval,
                                 const AttributeSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (n_train < 2 || n_eval < 1) throw ConfigError("data: dataset too small");

  const std::size_t cdim = spec.code_dim();
  const std::size_t vdim = spec.view_dim();

  auto rng_img = make_rng(seed, 0x1111);
  auto rng_txt = make_rng(seed, 0x2222);
  auto m_img = detail::orthonormal_columns(vdim, cdim, rng_img);
  auto m_txt = detail::orthonormal_columns(vdim, cdim, rng_txt);

  DatasetSplit<T> split;
  split.spec = spec;
  split.seed = seed;

  auto fill = [&](SampleSet<T>& set, std::size_t count, std::size_t id_base) {
    set.sample_ids.resize(count);
    set.attributes.assign(count, std::vector<int>(spec.num_attributes));
    set.images = Mat<T>(count, vdim);
    set.texts = Mat<T>(count, vdim);
    for (std::size_t s = 0; s < count; ++s) {
      const int id = int(id_base + s);
      set.sample_ids[s] = id;
      auto rng = make_rng(seed, 0x5A3D0000ULL + std::uint64_t(id));
      std::uniform_int_distribution<int> attr_dist(0, int(spec.values_per_attribute) - 1);
      std::vector<double> code(cdim, 0.0);
      for (std::size_t a = 0; a < spec.num_attributes; ++a) {
        int v = attr_dist(rng);
        set.attributes[s][a] = v;
        code[a * spec.values_per_attribute + std::size_t(v)] = spec.salience[a];
      }
      std::normal_distribution<double> noise(0.0, spec.noise_sigma);
      for (std::size_t r = 0; r < vdim; ++r) {
        double v = 0;
        for (std::size_t c = 0; c < cdim; ++c) v += m_img[c][r] * code[c];
        set.images(s, r) = T(v + (spec.noise_sigma > 0 ? noise(rng) : 0.0));
      }
      for (std::size_t r = 0; r < vdim; ++r) {
        double v = 0;
        for (std::size_t c = 0; c < cdim; ++c) v += m_txt[c][r] * code[c];
        set.texts(s, r) = T(v + (spec.noise_sigma > 0 ? noise(rng) : 0.0));
      }
    }
  };

  fill(split.train, n_train, 0);
  fill(split.eval, n_eval, n_train);
  return split;
}

template <typename T>
std::vector<int> attribute_labels(const SampleSet<T>& set, std::size_t attribute_index) {
  if (set.attributes.empty() || attribute_index >= set.attributes[0].size())
    throw ConfigError("attribute_labels: attribute index out of range");
  std::vector<int> out(set.size());
  for (std::size_t s = 0; s < set.size(); ++s) out[s] = set.attributes[s][attribute_index];
  return out;
}

namespace detail {

// Shortest round-trip decimal for a float.
inline std::string f32_to_string(float v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace detail

template <typename T>
void save_dataset_csv(const DatasetSplit<T>& split, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  const std::size_t na = split.spec.num_attributes;
  const std::size_t vd = split.spec.view_dim();
  out << "sample_id";
  for (std::size_t a = 0; a < na; ++a) out << ",attr_" << a;
  for (std::size_t d = 0; d < vd; ++d) out << ",img_" << d;
  for (std::size_t d = 0; d < vd; ++d) out << ",txt_" << d;
  out << "\n";
  auto write_set = [&](const SampleSet<T>& set) {
    for (std::size_t s = 0; s < set.size(); ++s) {
      out << set.sample_ids[s];
      for (std::size_t a = 0; a < na; ++a) out << ',' << set.attributes[s][a];
      for (std::size_t d = 0; d < vd; ++d)
        out << ',' << detail::f32_to_string(float(set.images(s, d)));
      for (std::size_t d = 0; d < vd; ++d)
        out << ',' << detail::f32_to_string(float(set.texts(s, d)));
      out << "\n";
    }
  };
  write_set(split.train);
  write_set(split.eval);
  if (!out) throw IoError("write failed: " + path);
}

// Reads a dataset CSV back. The first n_train rows are the train split.
template <typename T>
DatasetSplit<T> load_dataset_csv(const std::string& path, std::size_t n_train,
                                 const AttributeSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset: " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("dataset CSV empty: " + path);

  const std::size_t na = spec.num_attributes;
  const std::size_t vd = spec.view_dim();
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 1 + na + 2 * vd)
      throw DataError("dataset CSV row has " + std::to_string(cells.size()) +
                      " cells, expected " + std::to_string(1 + na + 2 * vd));
    rows.push_back(std::move(cells));
  }
  if (rows.size() <= n_train) throw DataError("dataset CSV smaller than n_train");

  DatasetSplit<T> split;
  split.spec = spec;
  split.seed = seed;
  auto fill = [&](SampleSet<T>& set, std::size_t begin, std::size_t end) {
    const std::size_t n = end - begin;
    set.sample_ids.resize(n);
    set.attributes.assign(n, std::vector<int>(na));
    set.images = Mat<T>(n, vd);
    set.texts = Mat<T>(n, vd);
    for (std::size_t s = 0; s < n; ++s) {
      const auto& cells = rows[begin + s];
      set.sample_ids[s] = std::stoi(cells[0]);
      for (std::size_t a = 0; a < na; ++a) set.attributes[s][a] = std::stoi(cells[1 + a]);
      for (std::size_t d = 0; d < vd; ++d)
        set.images(s, d) = T(std::stof(cells[1 + na + d]));
      for (std::size_t d = 0; d < vd; ++d)
        set.texts(s, d) = T(std::stof(cells[1 + na + vd + d]));
    }
  };
  fill(split.train, 0, n_train);
  fill(split.eval, n_train, rows.size());
  return split;
}

}  // namespace moelab
