#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "moelab/autodiff.hpp"
#include "moelab/encoder.hpp"
#include "moelab/errors.hpp"
#include "moelab/mcl.hpp"
#include "moelab/optim.hpp"
#include "moelab/rng.hpp"
#include "moelab/synthdata.hpp"

namespace moelab {

// One block of the sparse model: frozen mixer, E frozen expert FFNs, and a
// trainable router. The router is the only parameter that ever trains.
template <typename T>
struct MoEBlock {
  Parameter<T> mixer;  // d x d, frozen
  struct Expert {
    Parameter<T> w1, b1, w2, b2;
  };
  std::vector<Expert> experts;
  Parameter<T> router;  // d x E
  std::size_t top_k = 2;

  std::vector<Parameter<T>*> expert_params() {
    std::vector<Parameter<T>*> out;
    for (auto& e : experts) {
      out.push_back(&e.w1);
      out.push_back(&e.b1);
      out.push_back(&e.w2);
      out.push_back(&e.b2);
    }
    return out;
  }
};

// Per-block routing usage on some dataset: fraction of (sample, choice
// slot) pairs landing on each expert, and the mean full-softmax
// probability per expert.
struct BlockRoutingStats {
  std::vector<double> topk_fraction;
  std::vector<double> mean_probability;
};

struct RoutingStats {
  std::vector<BlockRoutingStats> blocks;
};

// Mutable accumulation state used while a forward pass runs.
struct RoutingCounters {
  std::vector<std::vector<std::size_t>> slot_counts;  // [block][expert]
  std::vector<std::vector<double>> prob_sums;         // [block][expert]
  std::vector<std::size_t> samples_seen;              // [block]
};

// Routing decision for one batch through one block.
template <typename T>
struct RouteResult {
  std::vector<std::vector<std::size_t>> indices;  // [row][k], ascending
  Mat<T> weights;                                 // n x K, aligned with indices
};

// Top-K choice + softmax over the chosen logits. Ties break toward the
// lower expert index.
template <typename T>
RouteResult<T> route(const Mat<T>& x, const Mat<T>& router, std::size_t k) {
  if (x.cols() != router.rows())
    throw ShapeError("route: input dim " + x.shape_str() + " vs router " +
                     router.shape_str());
  const std::size_t e = router.cols();
  if (k < 1 || k > e) throw ShapeError("route: K out of range");
  const std::size_t n = x.rows();
  RouteResult<T> res;
  res.indices.assign(n, {});
  res.weights = Mat<T>(n, k);
  std::vector<T> logits(e);
  std::vector<std::size_t> order(e);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < e; ++j) {
      T s = 0;
      for (std::size_t c = 0; c < x.cols(); ++c) s += x(r, c) * router(c, j);
      logits[j] = s;
    }
    std::iota(order.begin(), order.end(), std::size_t(0));
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
    auto& sel = res.indices[r];
    sel.assign(order.begin(), order.begin() + k);
    std::sort(sel.begin(), sel.end());
    T mx = logits[sel[0]];
    for (std::size_t j : sel) mx = std::max(mx, logits[j]);
    T denom = 0;
    for (std::size_t s = 0; s < k; ++s) {
      res.weights(r, s) = std::exp(logits[sel[s]] - mx);
      denom += res.weights(r, s);
    }
    for (std::size_t s = 0; s < k; ++s) res.weights(r, s) /= denom;
  }
  return res;
}

// Switch-style balance penalty from full-softmax router probabilities.
// The argmax histogram f is a constant; gradient flows only through the
// mean probabilities.
template <typename T>
ad::Var<T> balancing_loss(const ad::Var<T>& probs) {
  const std::size_t n = probs->value.rows(), e = probs->value.cols();
  if (n == 0) throw ContractError("balancing_loss: empty batch");
  if (e == 1) return ad::scalar(T(0));
  std::vector<T> f(e, T(0));
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < e; ++j)
      if (probs->value(r, j) > probs->value(r, best)) best = j;
    f[best] += T(1);
  }
  for (auto& v : f) v /= T(n);
  return ad::weighted_sum(ad::mean_rows(probs), f, T(e - 1));
}

// Dual-tower model whose FFN sublayers are expert mixtures. Blocks are
// indexed like the dense model: image tower first.
template <typename T>
class MoEModel {
 public:
  MoEModel() = default;

  // Zero-weight skeleton with the right shapes (used by checkpoint load).
  MoEModel(EncoderConfig cfg, std::size_t num_experts, std::size_t top_k) : cfg_(cfg) {
    cfg_.validate();
    if (num_experts < 2) throw ConfigError("moe: need at least 2 experts");
    if (top_k < 1 || top_k > num_experts) throw ConfigError("moe: K out of range");
    num_experts_ = num_experts;
    top_k_ = top_k;
    image_proj_ = Parameter<T>("image_proj", Mat<T>(cfg_.input_dim_image, cfg_.dim), true);
    text_proj_ = Parameter<T>("text_proj", Mat<T>(cfg_.input_dim_text, cfg_.dim), true);
    for (std::size_t i = 0; i < cfg_.num_blocks(); ++i) {
      MoEBlock<T> blk;
      std::string base = "block_" + std::to_string(i) + ".";
      blk.top_k = top_k;
      blk.mixer = Parameter<T>(base + "mixer", Mat<T>(cfg_.dim, cfg_.dim), true);
      for (std::size_t j = 0; j < num_experts; ++j) {
        std::string eb = base + "expert_" + std::to_string(j) + ".";
        typename MoEBlock<T>::Expert ex;
        ex.w1 = Parameter<T>(eb + "ffn_w1", Mat<T>(cfg_.dim, cfg_.ffn_hidden), true);
        ex.b1 = Parameter<T>(eb + "ffn_b1", Mat<T>(1, cfg_.ffn_hidden), true);
        ex.w2 = Parameter<T>(eb + "ffn_w2", Mat<T>(cfg_.ffn_hidden, cfg_.dim), true);
        ex.b2 = Parameter<T>(eb + "ffn_b2", Mat<T>(1, cfg_.dim), true);
        blk.experts.push_back(std::move(ex));
      }
      blk.router = Parameter<T>(base + "router", Mat<T>(cfg_.dim, num_experts), false);
      blocks_.push_back(std::move(blk));
    }
  }

  const EncoderConfig& config() const { return cfg_; }
  std::size_t num_experts() const { return num_experts_; }
  std::size_t top_k() const { return top_k_; }
  std::vector<MoEBlock<T>>& blocks() { return blocks_; }
  const std::vector<MoEBlock<T>>& blocks() const { return blocks_; }
  Parameter<T>& image_proj() { return image_proj_; }
  Parameter<T>& text_proj() { return text_proj_; }

  // forced_expert < 0 routes normally; otherwise all weight goes to that
  // expert in every block.
  struct Forward {
    ad::Var<T> emb;
    std::vector<ad::Var<T>> balance_terms;  // one per block traversed
  };

  Forward encode_image(const Mat<T>& batch, int forced_expert = -1,
                       RoutingCounters* counters = nullptr) {
    return encode_tower(batch, image_proj_, 0, cfg_.blocks_image, forced_expert, counters,
                        cfg_.input_dim_image, "encode_image");
  }

  Forward encode_text(const Mat<T>& batch, int forced_expert = -1,
                      RoutingCounters* counters = nullptr) {
    return encode_tower(batch, text_proj_, cfg_.blocks_image, cfg_.blocks_text,
                        forced_expert, counters, cfg_.input_dim_text, "encode_text");
  }

  std::vector<Parameter<T>*> all_params() {
    std::vector<Parameter<T>*> out{&image_proj_, &text_proj_};
    for (auto& blk : blocks_) {
      out.push_back(&blk.mixer);
      for (Parameter<T>* p : blk.expert_params()) out.push_back(p);
      out.push_back(&blk.router);
    }
    return out;
  }

  std::vector<Parameter<T>*> router_params() {
    std::vector<Parameter<T>*> out;
    for (auto& blk : blocks_) out.push_back(&blk.router);
    return out;
  }

  RoutingCounters make_counters() const {
    RoutingCounters c;
    c.slot_counts.assign(blocks_.size(), std::vector<std::size_t>(num_experts_, 0));
    c.prob_sums.assign(blocks_.size(), std::vector<double>(num_experts_, 0.0));
    c.samples_seen.assign(blocks_.size(), 0);
    return c;
  }

 private:
  ad::Var<T> moe_block(ad::Var<T> x, std::size_t block_idx, int forced_expert,
                       RoutingCounters* counters) {
    MoEBlock<T>& blk = blocks_[block_idx];
    auto h = ad::add(x, ad::matmul(x, blk.mixer.var));
    const std::size_t n = h->value.rows();

    if (forced_expert >= 0) {
      if (std::size_t(forced_expert) >= num_experts_)
        throw ContractError("force_expert: index " + std::to_string(forced_expert) +
                            " out of range for " + std::to_string(num_experts_) +
                            " experts");
      auto& ex = blk.experts[std::size_t(forced_expert)];
      return ad::add(h, ffn_apply(h, ex));
    }

    auto logits = ad::matmul(h, blk.router.var);
    auto weights = ad::topk_softmax(logits, top_k_);

    if (counters) {
      auto probs_now = ad::softmax_rows(logits);
      auto& sc = counters->slot_counts[block_idx];
      auto& ps = counters->prob_sums[block_idx];
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < num_experts_; ++j) {
          if (weights->value(r, j) > T(0)) sc[j]++;
          ps[j] += double(probs_now->value(r, j));
        }
      }
      counters->samples_seen[block_idx] += n;
    }

    auto out = h;
    for (std::size_t j = 0; j < num_experts_; ++j) {
      std::vector<std::size_t> idx;
      for (std::size_t r = 0; r < n; ++r)
        if (weights->value(r, j) > T(0)) idx.push_back(r);
      if (idx.empty()) continue;
      auto hj = ad::gather_rows(h, idx);
      auto fj = ffn_apply(hj, blk.experts[j]);
      auto wj = ad::gather_rows(ad::col(weights, j), idx);
      out = ad::add(out, ad::scatter_rows(ad::mul_rows(fj, wj), idx, n));
    }
    last_balance_ = balancing_loss(ad::softmax_rows(logits));
    return out;
  }

  ad::Var<T> ffn_apply(const ad::Var<T>& h, typename MoEBlock<T>::Expert& ex) {
    auto a = ad::add_rowvec(ad::matmul(h, ex.w1.var), ex.b1.var);
    return ad::add_rowvec(ad::matmul(ad::gelu(a), ex.w2.var), ex.b2.var);
  }

  Forward encode_tower(const Mat<T>& batch, Parameter<T>& proj, std::size_t first_block,
                       std::size_t count, int forced_expert, RoutingCounters* counters,
                       std::size_t expect_dim, const char* who) {
    if (batch.cols() != expect_dim)
      throw ConfigError(std::string(who) + ": batch has " + std::to_string(batch.cols()) +
                        " columns, config expects " + std::to_string(expect_dim));
    Forward fwd;
    auto x = ad::matmul(ad::constant(batch), proj.var);
    for (std::size_t i = 0; i < count; ++i) {
      last_balance_ = nullptr;
      x = moe_block(x, first_block + i, forced_expert, counters);
      if (last_balance_) fwd.balance_terms.push_back(last_balance_);
    }
    fwd.emb = ad::l2_normalize_rows(x);
    return fwd;
  }

  EncoderConfig cfg_;
  std::size_t num_experts_ = 0;
  std::size_t top_k_ = 2;
  Parameter<T> image_proj_;
  Parameter<T> text_proj_;
  std::vector<MoEBlock<T>> blocks_;
  ad::Var<T> last_balance_;
};

// Build an MoE model whose expert j in block i is snapshot j's FFN for
// block i. Routers are freshly seeded; everything else is frozen copies of
// the base model.
template <typename T>
MoEModel<T> assemble_moe(DualEncoder<T>& base, const std::vector<FfnSnapshot<T>>& snapshots,
                         std::size_t top_k, std::uint64_t seed) {
  if (snapshots.size() < 2) throw ConfigError("assemble_moe: need at least 2 snapshots");
  const EncoderConfig& cfg = base.config();
  MoEModel<T> moe(cfg, snapshots.size(), top_k);
  moe.image_proj().value() = base.image_proj().value();
  moe.text_proj().value() = base.text_proj().value();
  auto rng = make_rng(seed, 0x7027E7);
  const double rb = 1.0 / std::sqrt(double(cfg.dim));
  for (std::size_t i = 0; i < cfg.num_blocks(); ++i) {
    MoEBlock<T>& blk = moe.blocks()[i];
    blk.mixer.value() = base.blocks()[i].mixer.value();
    for (std::size_t j = 0; j < snapshots.size(); ++j) {
      if (snapshots[j].blocks.size() != cfg.num_blocks() ||
          !snapshots[j].blocks[i].w1.same_shape(blk.experts[j].w1.value()))
        throw ShapeError("assemble_moe: snapshot " + std::to_string(j) +
                         " incompatible with block " + std::to_string(i));
      blk.experts[j].w1.value() = snapshots[j].blocks[i].w1;
      blk.experts[j].b1.value() = snapshots[j].blocks[i].b1;
      blk.experts[j].w2.value() = snapshots[j].blocks[i].w2;
      blk.experts[j].b2.value() = snapshots[j].blocks[i].b2;
    }
    blk.router.value() = detail::uniform_init<T>(cfg.dim, snapshots.size(), rb, rng);
  }
  return moe;
}

// Sparse-upcycling baseline: every expert is a copy of the base FFNs.
template <typename T>
MoEModel<T> assemble_upcycled(DualEncoder<T>& base, std::size_t num_experts,
                              std::size_t top_k, std::uint64_t seed) {
  std::vector<FfnSnapshot<T>> copies(num_experts, base.extract_ffn_snapshot(0));
  return assemble_moe(base, copies, top_k, seed);
}

// Plain CLIP loss plus the alpha-weighted mean of per-block balance
// penalties.
template <typename T>
ad::Var<T> total_loss(const ad::Var<T>& img_emb, const ad::Var<T>& txt_emb, double tau,
                      const std::vector<ad::Var<T>>& balance_terms, double alpha) {
  auto loss = infonce(img_emb, txt_emb, tau);
  if (balance_terms.empty() || alpha == 0.0) return loss;
  auto sum = balance_terms[0];
  for (std::size_t i = 1; i < balance_terms.size(); ++i)
    sum = ad::add(sum, balance_terms[i]);
  return ad::add(loss, ad::scale(sum, T(alpha / double(balance_terms.size()))));
}

// Router-only fine-tuning with the balanced contrastive objective.
template <typename T>
std::vector<double> train_router(MoEModel<T>& moe, const SampleSet<T>& train,
                                 std::size_t epochs, double lr, double alpha,
                                 std::uint64_t seed, std::size_t batch_size = 64,
                                 const EpochCallback& on_epoch = nullptr) {
  AdamWConfig ocfg;
  ocfg.lr = lr;
  AdamW<T> opt(ocfg);
  auto routers = moe.router_params();
  std::vector<Parameter<T>*> params(routers.begin(), routers.end());
  const double tau = moe.config().temperature;
  std::vector<double> losses;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t(0));
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    auto rng = make_rng(seed, 0x70E70000ULL + epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin + 2 <= train.size(); begin += batch_size) {
      std::size_t end = std::min(train.size(), begin + batch_size);
      if (end - begin < 2) break;
      std::vector<std::size_t> idx(order.begin() + begin, order.begin() + end);
      Mat<T> ib(idx.size(), train.images.cols()), tb(idx.size(), train.texts.cols());
      for (std::size_t r = 0; r < idx.size(); ++r) {
        for (std::size_t c = 0; c < ib.cols(); ++c) ib(r, c) = train.images(idx[r], c);
        for (std::size_t c = 0; c < tb.cols(); ++c) tb(r, c) = train.texts(idx[r], c);
      }
      auto fi = moe.encode_image(ib);
      auto ft = moe.encode_text(tb);
      std::vector<ad::Var<T>> balance = fi.balance_terms;
      balance.insert(balance.end(), ft.balance_terms.begin(), ft.balance_terms.end());
      auto loss = total_loss(fi.emb, ft.emb, tau, balance, alpha);
      double lv = double(loss->value[0]);
      if (std::isnan(lv))
        throw DivergenceError("train_router: NaN loss at epoch " + std::to_string(epoch));
      loss_sum += lv;
      ++batches;
      opt.zero_grad(params);
      ad::backward(loss);
      opt.step(params);
    }
    double mean = batches ? loss_sum / double(batches) : 0.0;
    losses.push_back(mean);
    if (on_epoch) on_epoch("router", epoch, mean);
  }
  return losses;
}

// Usage statistics over a sample set; image blocks see image inputs, text
// blocks text inputs.
template <typename T>
RoutingStats routing_stats(MoEModel<T>& moe, const SampleSet<T>& set,
                           std::size_t chunk = 256) {
  RoutingCounters counters = moe.make_counters();
  for (std::size_t begin = 0; begin < set.size(); begin += chunk) {
    std::size_t end = std::min(set.size(), begin + chunk);
    Mat<T> ib(end - begin, set.images.cols()), tb(end - begin, set.texts.cols());
    for (std::size_t r = 0; r < end - begin; ++r) {
      for (std::size_t c = 0; c < ib.cols(); ++c) ib(r, c) = set.images(begin + r, c);
      for (std::size_t c = 0; c < tb.cols(); ++c) tb(r, c) = set.texts(begin + r, c);
    }
    moe.encode_image(ib, -1, &counters);
    moe.encode_text(tb, -1, &counters);
  }
  RoutingStats stats;
  for (std::size_t i = 0; i < counters.slot_counts.size(); ++i) {
    BlockRoutingStats bs;
    const double slots = double(counters.samples_seen[i]) * double(moe.top_k());
    for (std::size_t j = 0; j < moe.num_experts(); ++j) {
      bs.topk_fraction.push_back(slots > 0 ? double(counters.slot_counts[i][j]) / slots : 0.0);
      bs.mean_probability.push_back(
          counters.samples_seen[i] > 0
              ? counters.prob_sums[i][j] / double(counters.samples_seen[i])
              : 0.0);
    }
    stats.blocks.push_back(std::move(bs));
  }
  return stats;
}

}  // namespace moelab
