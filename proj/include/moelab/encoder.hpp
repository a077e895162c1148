#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "moelab/autodiff.hpp"
#include "moelab/errors.hpp"
#include "moelab/optim.hpp"
#include "moelab/rng.hpp"

namespace moelab {

struct EncoderConfig {
  std::size_t input_dim_image = 24;
  std::size_t input_dim_text = 24;
  std::size_t dim = 12;        // embedding width d
  std::size_t ffn_hidden = 64;
  std::size_t blocks_image = 2;  // A
  std::size_t blocks_text = 2;   // B
  double temperature = 0.07;

  void validate() const {
    if (blocks_image < 1 || blocks_text < 1)
      throw ConfigError("encoder: need at least one block per tower");
    if (dim < 2) throw ConfigError("encoder: dim must be >= 2");
    if (ffn_hidden < dim) throw ConfigError("encoder: ffn_hidden must be >= dim");
    if (!(temperature > 0)) throw ConfigError("encoder: temperature must be positive");
  }
  std::size_t num_blocks() const { return blocks_image + blocks_text; }
};

enum class Phase { base_training, ffn_only, all_frozen };

// The FFN parameter values of one block, detached from the tape.
template <typename T>
struct FfnWeights {
  Mat<T> w1, b1, w2, b2;
};

// Deep copy of every block's FFN at the end of one training stage.
// Block order: image tower blocks first, then text tower blocks.
template <typename T>
struct FfnSnapshot {
  int stage_id = 0;
  std::vector<FfnWeights<T>> blocks;
};

// One residual block: a permanently frozen linear mixer followed by a
// trainable two-layer GELU FFN, both on residual paths.
template <typename T>
struct Block {
  Parameter<T> mixer;  // d x d, frozen in every phase
  Parameter<T> ffn_w1; // d x h
  Parameter<T> ffn_b1; // 1 x h
  Parameter<T> ffn_w2; // h x d
  Parameter<T> ffn_b2; // 1 x d

  std::vector<Parameter<T>*> ffn_params() {
    return {&ffn_w1, &ffn_b1, &ffn_w2, &ffn_b2};
  }
};

namespace detail {

template <typename T>
Mat<T> uniform_init(std::size_t rows, std::size_t cols, double bound,
                    std::mt19937_64& rng) {
  Mat<T> m(rows, cols);
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = T(dist(rng));
  return m;
}

}  // namespace detail

// FFN applied on top of an activations Var: h + gelu(h*W1 + b1)*W2 + b2.
template <typename T>
ad::Var<T> ffn_residual(const ad::Var<T>& h, Block<T>& blk) {
  auto a = ad::add_rowvec(ad::matmul(h, blk.ffn_w1.var), blk.ffn_b1.var);
  auto f = ad::add_rowvec(ad::matmul(ad::gelu(a), blk.ffn_w2.var), blk.ffn_b2.var);
  return ad::add(h, f);
}

// Same computation from raw weight mats (used for MoE experts).
template <typename T>
ad::Var<T> ffn_residual_weights(const ad::Var<T>& h, const ad::Var<T>& w1,
                                const ad::Var<T>& b1, const ad::Var<T>& w2,
                                const ad::Var<T>& b2) {
  auto a = ad::add_rowvec(ad::matmul(h, w1), b1);
  auto f = ad::add_rowvec(ad::matmul(ad::gelu(a), w2), b2);
  return ad::add(h, f);
}

template <typename T>
ad::Var<T> block_forward(const ad::Var<T>& x, Block<T>& blk) {
  auto h = ad::add(x, ad::matmul(x, blk.mixer.var));
  return ffn_residual(h, blk);
}

// Two towers of residual blocks over pre-featurized inputs; encode output
// is the L2-normalized final activation.
template <typename T>
class DualEncoder {
 public:
  DualEncoder() = default;

  DualEncoder(EncoderConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    auto rng = make_rng(seed, /*tag=*/0xE0C0DE);
    const double pb = 1.0 / std::sqrt(double(cfg_.dim));
    image_proj_ = Parameter<T>(
        "image_proj", detail::uniform_init<T>(cfg_.input_dim_image, cfg_.dim, pb, rng));
    text_proj_ = Parameter<T>(
        "text_proj", detail::uniform_init<T>(cfg_.input_dim_text, cfg_.dim, pb, rng));
    const double w1b = 1.0 / std::sqrt(double(cfg_.dim));
    const double w2b = 1.0 / std::sqrt(double(cfg_.ffn_hidden));
    for (std::size_t i = 0; i < cfg_.num_blocks(); ++i) {
      Block<T> blk;
      std::string base = "block_" + std::to_string(i) + ".";
      blk.mixer = Parameter<T>(base + "mixer",
                               detail::uniform_init<T>(cfg_.dim, cfg_.dim, pb, rng),
                               /*frozen=*/true);
      blk.ffn_w1 = Parameter<T>(base + "ffn_w1",
                                detail::uniform_init<T>(cfg_.dim, cfg_.ffn_hidden, w1b, rng));
      blk.ffn_b1 = Parameter<T>(base + "ffn_b1", Mat<T>(1, cfg_.ffn_hidden));
      blk.ffn_w2 = Parameter<T>(base + "ffn_w2",
                                detail::uniform_init<T>(cfg_.ffn_hidden, cfg_.dim, w2b, rng));
      blk.ffn_b2 = Parameter<T>(base + "ffn_b2", Mat<T>(1, cfg_.dim));
      blocks_.push_back(std::move(blk));
    }
    set_phase(Phase::base_training);
  }

  const EncoderConfig& config() const { return cfg_; }

  ad::Var<T> encode_image(const Mat<T>& batch) {
    return encode_image(ad::constant(batch));
  }
  ad::Var<T> encode_text(const Mat<T>& batch) { return encode_text(ad::constant(batch)); }

  ad::Var<T> encode_image(const ad::Var<T>& batch) {
    if (batch->value.cols() != cfg_.input_dim_image) {
      throw ConfigError("encode_image: batch has " +
                        std::to_string(batch->value.cols()) + " columns, config expects " +
                        std::to_string(cfg_.input_dim_image));
    }
    auto x = ad::matmul(batch, image_proj_.var);
    for (std::size_t i = 0; i < cfg_.blocks_image; ++i) x = block_forward(x, blocks_[i]);
    return ad::l2_normalize_rows(x);
  }

  ad::Var<T> encode_text(const ad::Var<T>& batch) {
    if (batch->value.cols() != cfg_.input_dim_text) {
      throw ConfigError("encode_text: batch has " + std::to_string(batch->value.cols()) +
                        " columns, config expects " + std::to_string(cfg_.input_dim_text));
    }
    auto x = ad::matmul(batch, text_proj_.var);
    for (std::size_t i = 0; i < cfg_.blocks_text; ++i)
      x = block_forward(x, blocks_[cfg_.blocks_image + i]);
    return ad::l2_normalize_rows(x);
  }

  void set_phase(Phase phase) {
    phase_ = phase;
    const bool proj_trainable = (phase == Phase::base_training);
    const bool ffn_trainable = (phase != Phase::all_frozen);
    image_proj_.set_frozen(!proj_trainable);
    text_proj_.set_frozen(!proj_trainable);
    for (auto& blk : blocks_) {
      blk.mixer.set_frozen(true);
      for (Parameter<T>* p : blk.ffn_params()) p->set_frozen(!ffn_trainable);
    }
  }
  Phase phase() const { return phase_; }

  FfnSnapshot<T> extract_ffn_snapshot(int stage_id) const {
    FfnSnapshot<T> snap;
    snap.stage_id = stage_id;
    for (const auto& blk : blocks_) {
      snap.blocks.push_back(FfnWeights<T>{blk.ffn_w1.value(), blk.ffn_b1.value(),
                                          blk.ffn_w2.value(), blk.ffn_b2.value()});
    }
    return snap;
  }

  void load_ffn_snapshot(const FfnSnapshot<T>& snap) {
    if (snap.blocks.size() != blocks_.size())
      throw ShapeError("load_ffn_snapshot: block count mismatch");
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      check_same_shape(blocks_[i].ffn_w1.value(), snap.blocks[i].w1, "load_ffn_snapshot");
      blocks_[i].ffn_w1.value() = snap.blocks[i].w1;
      blocks_[i].ffn_b1.value() = snap.blocks[i].b1;
      blocks_[i].ffn_w2.value() = snap.blocks[i].w2;
      blocks_[i].ffn_b2.value() = snap.blocks[i].b2;
    }
  }

  std::vector<Parameter<T>*> all_params() {
    std::vector<Parameter<T>*> out{&image_proj_, &text_proj_};
    for (auto& blk : blocks_) {
      out.push_back(&blk.mixer);
      for (Parameter<T>* p : blk.ffn_params()) out.push_back(p);
    }
    return out;
  }

  std::vector<Parameter<T>*> trainable_params() {
    std::vector<Parameter<T>*> out;
    for (Parameter<T>* p : all_params())
      if (!p->frozen) out.push_back(p);
    return out;
  }

  Parameter<T>& image_proj() { return image_proj_; }
  Parameter<T>& text_proj() { return text_proj_; }
  std::vector<Block<T>>& blocks() { return blocks_; }
  const std::vector<Block<T>>& blocks() const { return blocks_; }

 private:
  EncoderConfig cfg_;
  Phase phase_ = Phase::base_training;
  Parameter<T> image_proj_;
  Parameter<T> text_proj_;
  std::vector<Block<T>> blocks_;
};

}  // namespace moelab
