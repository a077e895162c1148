#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "moelab/autodiff.hpp"
#include "moelab/encoder.hpp"
#include "moelab/errors.hpp"
#include "moelab/kmeans.hpp"
#include "moelab/rng.hpp"
#include "moelab/synthdata.hpp"

namespace moelab {

// Per-sample record of all clustering rounds so far. Two samples share an
// accumulated cluster iff their full label prefixes match.
struct ClusterAssignment {
  int sample_id = 0;
  std::vector<std::pair<int, int>> labels;  // (image_label, text_label) per stage
};

struct StageConfig {
  std::size_t k_image = 3;
  std::size_t k_text = 3;
  std::size_t epochs = 4;
  double lr = 1e-3;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const {
    if (k_image < 1 || k_text < 1) throw ConfigError("stage: cluster counts must be >= 1");
    if (batch_size < 2) throw ConfigError("stage: batch_size must be >= 2");
  }
};

inline std::vector<ClusterAssignment> accumulate_clusters(
    const std::vector<ClusterAssignment>& prev, const std::vector<int>& sample_ids,
    const std::vector<int>& img_labels, const std::vector<int>& txt_labels) {
  if (sample_ids.size() != img_labels.size() || sample_ids.size() != txt_labels.size())
    throw DataError("accumulate_clusters: label lists misaligned with sample ids");
  std::vector<ClusterAssignment> out;
  out.reserve(sample_ids.size());
  if (prev.empty()) {
    for (std::size_t i = 0; i < sample_ids.size(); ++i)
      out.push_back({sample_ids[i], {{img_labels[i], txt_labels[i]}}});
    return out;
  }
  if (prev.size() != sample_ids.size())
    throw DataError("accumulate_clusters: previous assignments cover " +
                    std::to_string(prev.size()) + " samples, labels cover " +
                    std::to_string(sample_ids.size()));
  for (std::size_t i = 0; i < sample_ids.size(); ++i) {
    if (prev[i].sample_id != sample_ids[i])
      throw DataError("accumulate_clusters: sample id mismatch at position " +
                      std::to_string(i));
    ClusterAssignment a = prev[i];
    a.labels.emplace_back(img_labels[i], txt_labels[i]);
    out.push_back(std::move(a));
  }
  return out;
}

// Compact integer key per distinct accumulated cluster. An empty
// assignment list keys every sample identically (stage 0: all in-batch
// negatives, i.e. plain InfoNCE).
inline std::vector<int> accumulated_keys(const std::vector<ClusterAssignment>& assignments,
                                         std::size_t n_samples) {
  if (assignments.empty()) return std::vector<int>(n_samples, 0);
  if (assignments.size() != n_samples)
    throw DataError("accumulated_keys: assignment count mismatch");
  std::map<std::vector<std::pair<int, int>>, int> ids;
  std::vector<int> keys(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) {
    auto [it, inserted] = ids.emplace(assignments[i].labels, int(ids.size()));
    keys[i] = it->second;
  }
  return keys;
}

namespace detail {

template <typename T>
void check_unit_rows(const Mat<T>& m, const char* who) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double s = 0;
    for (std::size_t c = 0; c < m.cols(); ++c) s += double(m(r, c)) * double(m(r, c));
    if (std::abs(std::sqrt(s) - 1.0) > 1e-3)
      throw ContractError(std::string(who) + ": row " + std::to_string(r) +
                          " is not unit-norm");
  }
}

// Pair (a,b) participates in the denominator of anchor a iff b is the
// positive (b == a) or a negative from the same accumulated cluster.
template <typename T>
Mat<T> build_key_mask(const std::vector<int>& keys) {
  const std::size_t n = keys.size();
  Mat<T> mask(n, n, ad::kNegInf<T>);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) {
      if (a == b || keys[a] == keys[b]) mask(a, b) = T(0);
    }
  }
  return mask;
}

}  // namespace detail

// Symmetric InfoNCE over cosine similarities where in-batch negatives are
// restricted to the anchor's accumulated cluster. Anchors with no same-key
// negatives contribute 0. A constant key list recovers the standard
// contrastive loss.
template <typename T>
ad::Var<T> masked_infonce(const ad::Var<T>& img_emb, const ad::Var<T>& txt_emb,
                          const std::vector<int>& keys, double tau) {
  const std::size_t n = img_emb->value.rows();
  if (n < 2) throw ContractError("masked_infonce: batch must have >= 2 samples");
  if (!img_emb->value.same_shape(txt_emb->value))
    throw ShapeError("masked_infonce: embedding shape mismatch");
  if (keys.size() != n) throw ContractError("masked_infonce: keys length mismatch");
  detail::check_unit_rows(img_emb->value, "masked_infonce(img)");
  detail::check_unit_rows(txt_emb->value, "masked_infonce(txt)");

  Mat<T> mask = detail::build_key_mask<T>(keys);
  const T inv_tau = T(1.0 / tau);

  auto s_i2t = ad::scale(ad::matmul_nt(img_emb, txt_emb), inv_tau);
  auto s_t2i = ad::scale(ad::matmul_nt(txt_emb, img_emb), inv_tau);
  auto nll_i2t = ad::sum_all(ad::diag(ad::masked_log_softmax_rows(s_i2t, mask)));
  auto nll_t2i = ad::sum_all(ad::diag(ad::masked_log_softmax_rows(s_t2i, mask)));
  return ad::scale(ad::add(nll_i2t, nll_t2i), T(-0.5) / T(n));
}

// Plain symmetric InfoNCE (all in-batch negatives).
template <typename T>
ad::Var<T> infonce(const ad::Var<T>& img_emb, const ad::Var<T>& txt_emb, double tau) {
  return masked_infonce(img_emb, txt_emb,
                        std::vector<int>(img_emb->value.rows(), 0), tau);
}

template <typename T>
struct StageResult {
  FfnSnapshot<T> snapshot;
  std::vector<ClusterAssignment> assignments;
  std::vector<double> epoch_losses;
  KmeansResult<T> kmeans_image;
  KmeansResult<T> kmeans_text;
};

namespace detail {

template <typename T>
Mat<T> gather_input_rows(const Mat<T>& m, const std::vector<std::size_t>& idx) {
  Mat<T> out(idx.size(), m.cols());
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) out(r, c) = m(idx[r], c);
  return out;
}

// Encode a sample set in inference chunks; returns plain value matrices.
template <typename T>
std::pair<Mat<T>, Mat<T>> encode_all(DualEncoder<T>& model, const SampleSet<T>& set,
                                     std::size_t chunk = 256) {
  const std::size_t n = set.size(), d = model.config().dim;
  Mat<T> img(n, d), txt(n, d);
  for (std::size_t begin = 0; begin < n; begin += chunk) {
    std::size_t end = std::min(n, begin + chunk);
    std::vector<std::size_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    auto ei = model.encode_image(gather_input_rows(set.images, idx));
    auto et = model.encode_text(gather_input_rows(set.texts, idx));
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < d; ++c) {
        img(idx[r], c) = ei->value(r, c);
        txt(idx[r], c) = et->value(r, c);
      }
  }
  return {std::move(img), std::move(txt)};
}

}  // namespace detail

// Loss callback: (phase_tag, epoch, mean_loss).
using EpochCallback = std::function<void(const std::string&, std::size_t, double)>;

// One FFN-only contrastive training pass over the train set with the given
// per-sample keys. Returns the per-epoch mean losses.
template <typename T>
std::vector<double> train_contrastive(DualEncoder<T>& model, const SampleSet<T>& train,
                                      const std::vector<int>& keys, std::size_t epochs,
                                      double lr, std::size_t batch_size,
                                      std::uint64_t seed, const std::string& phase_tag,
                                      const EpochCallback& on_epoch = nullptr) {
  AdamWConfig ocfg;
  ocfg.lr = lr;
  AdamW<T> opt(ocfg);
  auto params = model.all_params();
  const double tau = model.config().temperature;
  std::vector<double> losses;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t(0));

  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    auto rng = make_rng(seed, 0xE90C0000ULL + epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin + 2 <= train.size(); begin += batch_size) {
      std::size_t end = std::min(train.size(), begin + batch_size);
      if (end - begin < 2) break;
      std::vector<std::size_t> idx(order.begin() + begin, order.begin() + end);
      std::vector<int> batch_keys(idx.size());
      for (std::size_t r = 0; r < idx.size(); ++r) batch_keys[r] = keys[idx[r]];

      auto img = model.encode_image(detail::gather_input_rows(train.images, idx));
      auto txt = model.encode_text(detail::gather_input_rows(train.texts, idx));
      auto loss = masked_infonce(img, txt, batch_keys, tau);
      double lv = double(loss->value[0]);
      if (std::isnan(lv))
        throw DivergenceError(phase_tag + ": NaN loss at epoch " + std::to_string(epoch));
      loss_sum += lv;
      ++batches;
      opt.zero_grad(params);
      ad::backward(loss);
      opt.step(params);
    }
    double mean = batches ? loss_sum / double(batches) : 0.0;
    losses.push_back(mean);
    if (on_epoch) on_epoch(phase_tag, epoch, mean);
  }
  return losses;
}

// One MCL stage: cluster current embeddings, extend accumulated labels,
// fine-tune the FFNs with the key-masked loss, snapshot.
template <typename T>
StageResult<T> run_mcl_stage(DualEncoder<T>& model, const SampleSet<T>& train,
                             const std::vector<ClusterAssignment>& prev_assignments,
                             const StageConfig& cfg, int stage_id,
                             const EpochCallback& on_epoch = nullptr) {
  cfg.validate();
  if (!prev_assignments.empty() && prev_assignments.size() != train.size())
    throw DataError("run_mcl_stage: assignments do not cover the dataset");

  StageResult<T> result;
  {
    auto [img_emb, txt_emb] = detail::encode_all(model, train);
    result.kmeans_image = kmeans(img_emb, cfg.k_image, derive_seed(cfg.seed, 0xC1));
    result.kmeans_text = kmeans(txt_emb, cfg.k_text, derive_seed(cfg.seed, 0xC2));
  }
  result.assignments = accumulate_clusters(prev_assignments, train.sample_ids,
                                           result.kmeans_image.labels,
                                           result.kmeans_text.labels);
  auto keys = accumulated_keys(result.assignments, train.size());

  model.set_phase(Phase::ffn_only);
  result.epoch_losses =
      train_contrastive(model, train, keys, cfg.epochs, cfg.lr, cfg.batch_size,
                        derive_seed(cfg.seed, 0x57A6E000ULL + std::uint64_t(stage_id)),
                        "mcl_stage_" + std::to_string(stage_id), on_epoch);
  result.snapshot = model.extract_ffn_snapshot(stage_id);
  return result;
}

template <typename T>
struct MclResult {
  std::vector<FfnSnapshot<T>> snapshots;  // index 0 = base FFNs
  std::vector<ClusterAssignment> assignments;
  std::vector<std::vector<double>> stage_losses;
};

template <typename T>
MclResult<T> run_mcl(DualEncoder<T>& model, const SampleSet<T>& train,
                     std::size_t num_stages, const StageConfig& cfg,
                     const EpochCallback& on_epoch = nullptr) {
  if (num_stages < 1) throw ConfigError("run_mcl: num_stages must be >= 1");
  MclResult<T> result;
  result.snapshots.push_back(model.extract_ffn_snapshot(0));
  for (std::size_t j = 1; j <= num_stages; ++j) {
    StageConfig stage_cfg = cfg;
    stage_cfg.seed = derive_seed(cfg.seed, 0x9A6E0000ULL + j);
    auto stage = run_mcl_stage(model, train, result.assignments, stage_cfg, int(j), on_epoch);
    result.snapshots.push_back(std::move(stage.snapshot));
    result.assignments = std::move(stage.assignments);
    result.stage_losses.push_back(std::move(stage.epoch_losses));
  }
  return result;
}

}  // namespace moelab
