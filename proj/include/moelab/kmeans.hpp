#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "moelab/errors.hpp"
#include "moelab/mat.hpp"
#include "moelab/rng.hpp"

namespace moelab {

template <typename T>
struct KmeansResult {
  std::vector<int> labels;
  Mat<T> centroids;  // k x d
  int iterations_run = 0;
  double inertia = 0.0;
};

namespace detail {

template <typename T>
double sq_dist(const Mat<T>& pts, std::size_t row, const std::vector<double>& c) {
  double s = 0;
  for (std::size_t j = 0; j < pts.cols(); ++j) {
    double diff = double(pts(row, j)) - c[j];
    s += diff * diff;
  }
  return s;
}

}  // namespace detail

// Lloyd's algorithm with k-means++ seeding. Stops on stable assignments or
// after 100 iterations. Empty clusters are refilled with the point
// currently farthest from its own centroid.
template <typename T>
KmeansResult<T> kmeans(const Mat<T>& points, std::size_t k, std::uint64_t seed) {
  const std::size_t n = points.rows(), d = points.cols();
  if (n < k) {
    throw ContractError("kmeans: " + std::to_string(n) + " points infeasible for k=" +
                        std::to_string(k));
  }
  if (k < 1) throw ContractError("kmeans: k must be >= 1");
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!std::isfinite(double(points[i]))) throw DataError("kmeans: non-finite point");
  }

  auto rng = make_rng(seed, 0x4B4D);
  std::vector<std::vector<double>> centroids(k, std::vector<double>(d));

  // k-means++ seeding
  {
    std::uniform_int_distribution<std::size_t> first(0, n - 1);
    std::size_t c0 = first(rng);
    for (std::size_t j = 0; j < d; ++j) centroids[0][j] = double(points(c0, j));
    std::vector<double> best(n);
    for (std::size_t c = 1; c < k; ++c) {
      double total = 0;
      for (std::size_t i = 0; i < n; ++i) {
        double b = detail::sq_dist(points, i, centroids[0]);
        for (std::size_t cc = 1; cc < c; ++cc)
          b = std::min(b, detail::sq_dist(points, i, centroids[cc]));
        best[i] = b;
        total += b;
      }
      std::size_t pick = 0;
      if (total > 0) {
        std::uniform_real_distribution<double> u(0.0, total);
        double target = u(rng), acc = 0;
        for (std::size_t i = 0; i < n; ++i) {
          acc += best[i];
          if (acc >= target) {
            pick = i;
            break;
          }
        }
      } else {
        std::uniform_int_distribution<std::size_t> any(0, n - 1);
        pick = any(rng);
      }
      for (std::size_t j = 0; j < d; ++j) centroids[c][j] = double(points(pick, j));
    }
  }

  std::vector<int> labels(n, -1);
  std::vector<int> prev_labels;
  double inertia = 0;
  int iters = 0;

  for (iters = 1; iters <= 100; ++iters) {
    // assignment
    std::vector<double> dist_to_own(n);
    inertia = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double bd = std::numeric_limits<double>::infinity();
      int bc = 0;
      for (std::size_t c = 0; c < k; ++c) {
        double dd = detail::sq_dist(points, i, centroids[c]);
        if (dd < bd) {
          bd = dd;
          bc = int(c);
        }
      }
      labels[i] = bc;
      dist_to_own[i] = bd;
      inertia += bd;
    }

    // refill empty clusters with the farthest point
    std::vector<std::size_t> counts(k, 0);
    for (int l : labels) counts[std::size_t(l)]++;
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      std::size_t far = 0;
      double fd = -1;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[std::size_t(labels[i])] > 1 && dist_to_own[i] > fd) {
          fd = dist_to_own[i];
          far = i;
        }
      }
      counts[std::size_t(labels[far])]--;
      inertia -= dist_to_own[far];
      labels[far] = int(c);
      dist_to_own[far] = 0;
      counts[c] = 1;
      for (std::size_t j = 0; j < d; ++j) centroids[c][j] = double(points(far, j));
    }

    if (labels == prev_labels) break;
    prev_labels = labels;

    // update
    for (std::size_t c = 0; c < k; ++c) std::fill(centroids[c].begin(), centroids[c].end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      counts[std::size_t(labels[i])]++;
      for (std::size_t j = 0; j < d; ++j) centroids[std::size_t(labels[i])][j] += double(points(i, j));
    }
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t j = 0; j < d; ++j) centroids[c][j] /= double(counts[c]);
  }

  KmeansResult<T> res;
  res.labels = std::move(labels);
  res.iterations_run = std::min(iters, 100);
  res.inertia = inertia;
  res.centroids = Mat<T>(k, d);
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t j = 0; j < d; ++j) res.centroids(c, j) = T(centroids[c][j]);
  return res;
}

}  // namespace moelab
