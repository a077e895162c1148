#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <set>
#include <vector>

#include "moelab/errors.hpp"
#include "moelab/mat.hpp"
#include "moelab/rng.hpp"

namespace moelab {

// Fraction of queries whose positive (gallery row i for query i) ranks in
// the top k by cosine similarity. Ties favor the lower gallery index.
template <typename T>
double recall_at_k(const Mat<T>& queries, const Mat<T>& gallery, std::size_t k) {
  const std::size_t n = queries.rows();
  if (gallery.rows() != n || gallery.cols() != queries.cols())
    throw ShapeError("recall_at_k: query " + queries.shape_str() + " vs gallery " +
                     gallery.shape_str());
  if (k < 1 || k > n)
    throw ContractError("recall_at_k: k=" + std::to_string(k) + " out of range for n=" +
                        std::to_string(n));
  std::size_t hits = 0;
  std::vector<double> scores(n);
  for (std::size_t q = 0; q < n; ++q) {
    for (std::size_t g = 0; g < n; ++g) {
      double s = 0;
      for (std::size_t c = 0; c < queries.cols(); ++c)
        s += double(queries(q, c)) * double(gallery(g, c));
      scores[g] = s;
    }
    std::size_t rank = 0;  // number of gallery rows strictly ahead of the positive
    for (std::size_t g = 0; g < n; ++g) {
      if (g == q) continue;
      if (scores[g] > scores[q] || (scores[g] == scores[q] && g < q)) ++rank;
    }
    if (rank < k) ++hits;
  }
  return double(hits) / double(n);
}

// Held-out accuracy of a multinomial logistic regression probe: 80/20
// split, full-batch gradient descent, 500 iterations at lr 0.5.
template <typename T>
double linear_probe(const Mat<T>& embeddings, const std::vector<int>& labels,
                    std::size_t n_classes, std::uint64_t seed) {
  const std::size_t n = embeddings.rows(), d = embeddings.cols();
  if (labels.size() != n) throw ContractError("linear_probe: label count mismatch");
  if (n < 5 * n_classes)
    throw ContractError("linear_probe: need at least 5 samples per class slot");
  for (int l : labels)
    if (l < 0 || std::size_t(l) >= n_classes)
      throw ContractError("linear_probe: label out of range");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t(0));
  auto rng = make_rng(seed, 0x9B0BE);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_test = n / 5;
  const std::size_t n_train = n - n_test;

  std::set<int> seen;
  for (std::size_t i = 0; i < n_train; ++i) seen.insert(labels[order[i]]);
  if (seen.size() != n_classes)
    throw DataError("linear_probe: some class absent from the train split");

  // weights (d+1) x C, last row is the bias
  std::vector<double> w((d + 1) * n_classes, 0.0);
  std::vector<double> grad(w.size());
  std::vector<double> logits(n_classes);
  const double lr = 0.5;
  const int iters = 500;

  for (int it = 0; it < iters; ++it) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t i = 0; i < n_train; ++i) {
      const std::size_t row = order[i];
      for (std::size_t c = 0; c < n_classes; ++c) {
        double s = w[d * n_classes + c];
        for (std::size_t j = 0; j < d; ++j)
          s += double(embeddings(row, j)) * w[j * n_classes + c];
        logits[c] = s;
      }
      double mx = *std::max_element(logits.begin(), logits.end());
      double denom = 0;
      for (auto& v : logits) {
        v = std::exp(v - mx);
        denom += v;
      }
      for (std::size_t c = 0; c < n_classes; ++c) {
        double p = logits[c] / denom;
        double delta = p - (int(c) == labels[row] ? 1.0 : 0.0);
        for (std::size_t j = 0; j < d; ++j)
          grad[j * n_classes + c] += delta * double(embeddings(row, j));
        grad[d * n_classes + c] += delta;
      }
    }
    const double scale = lr / double(n_train);
    for (std::size_t j = 0; j < w.size(); ++j) w[j] -= scale * grad[j];
  }

  std::size_t correct = 0;
  for (std::size_t i = n_train; i < n; ++i) {
    const std::size_t row = order[i];
    int best = 0;
    double bs = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n_classes; ++c) {
      double s = w[d * n_classes + c];
      for (std::size_t j = 0; j < d; ++j)
        s += double(embeddings(row, j)) * w[j * n_classes + c];
      if (s > bs) {
        bs = s;
        best = int(c);
      }
    }
    if (best == labels[row]) ++correct;
  }
  return n_test ? double(correct) / double(n_test) : 0.0;
}

}  // namespace moelab
