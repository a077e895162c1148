#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "moelab/checkpoint.hpp"
#include "moelab/encoder.hpp"
#include "moelab/eval.hpp"
#include "moelab/mcl.hpp"
#include "moelab/moe.hpp"
#include "moelab/synthdata.hpp"

namespace moelab {

struct TrainConfig {
  std::size_t epochs = 10;
  double lr = 1e-3;
  std::size_t batch_size = 64;
};

struct PipelineConfig {
  AttributeSpec data;
  std::size_t n_train = 2000;
  std::size_t n_eval = 250;
  EncoderConfig encoder;
  TrainConfig base{4, 1e-3, 64};
  StageConfig stage{3, 3, 20, 3e-3, 256, 0};
  std::size_t num_stages = 3;
  std::size_t top_k = 2;
  double alpha = 0.01;
  TrainConfig router{10, 1e-2, 64};
  std::uint64_t seed = 0;
  std::string out_dir;  // empty: keep everything in memory
  int threads = 1;

  std::size_t num_experts() const { return num_stages + 1; }

  void validate() const {
    data.validate();
    encoder.validate();
    stage.validate();
    if (num_stages < 1) throw ConfigError("pipeline: num_stages must be >= 1");
    if (top_k < 1 || top_k > num_experts())
      throw ConfigError("pipeline: top_k out of range for " +
                        std::to_string(num_experts()) + " experts");
    if (n_eval < 10) throw ConfigError("pipeline: n_eval must be >= 10");
    if (encoder.input_dim_image != data.view_dim() ||
        encoder.input_dim_text != data.view_dim())
      throw ConfigError("pipeline: encoder input dims must equal data view dim " +
                        std::to_string(data.view_dim()));
    if (threads < 1) throw ConfigError("pipeline: threads must be >= 1");
  }
};

struct RetrievalMetrics {
  double i2t_r1 = 0, i2t_r5 = 0, i2t_r10 = 0;
  double t2i_r1 = 0, t2i_r5 = 0, t2i_r10 = 0;

  double mean_r1() const { return 0.5 * (i2t_r1 + t2i_r1); }
};

struct EvalReport {
  RetrievalMetrics base, dmu, upcycled;
  // probe accuracy per MCL snapshot (index 0 = base) per attribute
  std::vector<std::vector<double>> stage_probe_acc;
  // probe accuracy per forced expert per attribute
  std::vector<std::vector<double>> expert_probe_acc;
  std::vector<double> expert_forced_recall1;  // mean of I2T@1 and T2I@1
  RoutingStats routing_dmu;
  RoutingStats routing_upcycled;
  std::vector<double> base_losses;
  std::vector<std::vector<double>> stage_losses;
  std::vector<double> router_losses_dmu;
  std::vector<double> router_losses_upcycled;
  // wall-clock seconds per phase; reported separately so report JSON stays
  // run-to-run deterministic
  std::map<std::string, double> timings;
};

using MetricEmitter = std::function<void(const json&)>;

inline json routing_stats_json(const RoutingStats& stats) {
  json blocks = json::array();
  for (const auto& b : stats.blocks) {
    json jb;
    jb["topk_fraction"] = b.topk_fraction;
    jb["mean_probability"] = b.mean_probability;
    blocks.push_back(std::move(jb));
  }
  return blocks;
}

inline json retrieval_json(const RetrievalMetrics& m) {
  json j;
  j["i2t"] = {{"r1", m.i2t_r1}, {"r5", m.i2t_r5}, {"r10", m.i2t_r10}};
  j["t2i"] = {{"r1", m.t2i_r1}, {"r5", m.t2i_r5}, {"r10", m.t2i_r10}};
  return j;
}

// Deterministic machine rendering; timings are deliberately excluded.
inline json report_json(const EvalReport& r) {
  json j;
  j["retrieval"] = {{"base", retrieval_json(r.base)},
                    {"dmu_moe", retrieval_json(r.dmu)},
                    {"upcycled_moe", retrieval_json(r.upcycled)}};
  j["stage_probe_accuracy"] = r.stage_probe_acc;
  j["expert_probe_accuracy"] = r.expert_probe_acc;
  j["expert_forced_recall1"] = r.expert_forced_recall1;
  j["routing"] = {{"dmu_moe", routing_stats_json(r.routing_dmu)},
                  {"upcycled_moe", routing_stats_json(r.routing_upcycled)}};
  j["losses"] = {{"base", r.base_losses},
                 {"mcl_stages", r.stage_losses},
                 {"router_dmu", r.router_losses_dmu},
                 {"router_upcycled", r.router_losses_upcycled}};
  return j;
}

void emit_report(const EvalReport& report, const std::string& dir);

inline void save_assignments_csv(const std::vector<ClusterAssignment>& assignments,
                                 const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write assignments: " + path);
  out << "sample_id,stage,image_label,text_label\n";
  for (const auto& a : assignments) {
    for (std::size_t s = 0; s < a.labels.size(); ++s) {
      out << a.sample_id << ',' << s << ',' << a.labels[s].first << ','
          << a.labels[s].second << "\n";
    }
  }
}

inline void save_routing_stats_csv(const RoutingStats& stats, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write routing stats: " + path);
  out << "block,expert,topk_fraction,mean_probability\n";
  for (std::size_t b = 0; b < stats.blocks.size(); ++b) {
    for (std::size_t e = 0; e < stats.blocks[b].topk_fraction.size(); ++e) {
      out << b << ',' << e << ',' << stats.blocks[b].topk_fraction[e] << ','
          << stats.blocks[b].mean_probability[e] << "\n";
    }
  }
}

namespace detail {

template <typename T>
RetrievalMetrics retrieval_from_embeddings(const Mat<T>& img, const Mat<T>& txt) {
  RetrievalMetrics m;
  const std::size_t n = img.rows();
  m.i2t_r1 = recall_at_k(img, txt, 1);
  m.i2t_r5 = recall_at_k(img, txt, std::min<std::size_t>(5, n));
  m.i2t_r10 = recall_at_k(img, txt, std::min<std::size_t>(10, n));
  m.t2i_r1 = recall_at_k(txt, img, 1);
  m.t2i_r5 = recall_at_k(txt, img, std::min<std::size_t>(5, n));
  m.t2i_r10 = recall_at_k(txt, img, std::min<std::size_t>(10, n));
  return m;
}

template <typename T>
std::pair<Mat<T>, Mat<T>> moe_encode_all(MoEModel<T>& moe, const SampleSet<T>& set,
                                         int forced_expert = -1, std::size_t chunk = 256) {
  const std::size_t n = set.size(), d = moe.config().dim;
  Mat<T> img(n, d), txt(n, d);
  for (std::size_t begin = 0; begin < n; begin += chunk) {
    std::size_t end = std::min(n, begin + chunk);
    Mat<T> ib(end - begin, set.images.cols()), tb(end - begin, set.texts.cols());
    for (std::size_t r = 0; r < end - begin; ++r) {
      for (std::size_t c = 0; c < ib.cols(); ++c) ib(r, c) = set.images(begin + r, c);
      for (std::size_t c = 0; c < tb.cols(); ++c) tb(r, c) = set.texts(begin + r, c);
    }
    auto fi = moe.encode_image(ib, forced_expert);
    auto ft = moe.encode_text(tb, forced_expert);
    for (std::size_t r = 0; r < end - begin; ++r)
      for (std::size_t c = 0; c < d; ++c) {
        img(begin + r, c) = fi.emb->value(r, c);
        txt(begin + r, c) = ft.emb->value(r, c);
      }
  }
  return {std::move(img), std::move(txt)};
}

}  // namespace detail

// Per-expert probe accuracies and forced retrieval, the specialization
// matrix. Probes run on forced image-tower embeddings of the eval split.
template <typename T>
void specialization_report(MoEModel<T>& moe, const SampleSet<T>& eval_set,
                           const AttributeSpec& spec, std::uint64_t seed,
                           std::vector<std::vector<double>>& probe_acc,
                           std::vector<double>& forced_recall1) {
  probe_acc.clear();
  forced_recall1.clear();
  for (std::size_t j = 0; j < moe.num_experts(); ++j) {
    auto [img, txt] = detail::moe_encode_all(moe, eval_set, int(j));
    std::vector<double> accs;
    for (std::size_t a = 0; a < spec.num_attributes; ++a) {
      accs.push_back(linear_probe(img, attribute_labels(eval_set, a),
                                  spec.values_per_attribute, derive_seed(seed, 100 + a)));
    }
    probe_acc.push_back(std::move(accs));
    forced_recall1.push_back(0.5 * (recall_at_k(img, txt, 1) + recall_at_k(txt, img, 1)));
  }
}

template <typename T>
EvalReport run_pipeline(const PipelineConfig& cfg, const MetricEmitter& emit = nullptr) {
  cfg.validate();
  namespace fs = std::filesystem;
  const bool persist = !cfg.out_dir.empty();
  if (persist) fs::create_directories(cfg.out_dir);
  auto artifact = [&](const std::string& name) { return cfg.out_dir + "/" + name; };

  EvalReport report;
  auto now = [] { return std::chrono::steady_clock::now(); };
  auto secs = [](auto a, auto b) { return std::chrono::duration<double>(b - a).count(); };
  auto emit_json = [&](json j) {
    if (emit) emit(std::move(j));
  };
  EpochCallback on_epoch = [&](const std::string& phase, std::size_t epoch, double loss) {
    emit_json({{"kind", "epoch"}, {"phase", phase}, {"epoch", epoch}, {"loss", loss}});
  };

  // data
  auto t0 = now();
  auto split = generate_dataset<T>(cfg.n_train, cfg.n_eval, cfg.data, cfg.seed);
  if (persist) save_dataset_csv(split, artifact("dataset.csv"));
  report.timings["gen_data"] = secs(t0, now());

  // base contrastive training
  t0 = now();
  DualEncoder<T> model(cfg.encoder, derive_seed(cfg.seed, 0xB45E));
  model.set_phase(Phase::base_training);
  report.base_losses = train_contrastive(
      model, split.train, std::vector<int>(split.train.size(), 0), cfg.base.epochs,
      cfg.base.lr, cfg.base.batch_size, derive_seed(cfg.seed, 0xBA5E), "base", on_epoch);
  if (persist) save_checkpoint(model, artifact("base"));
  report.timings["train_base"] = secs(t0, now());

  // base retrieval metrics
  t0 = now();
  {
    auto [img, txt] = detail::encode_all(model, split.eval);
    report.base = detail::retrieval_from_embeddings(img, txt);
    emit_json({{"kind", "retrieval"}, {"model", "base"}, {"metrics", retrieval_json(report.base)}});
  }
  report.timings["eval_base"] = secs(t0, now());

  // MCL stages
  t0 = now();
  StageConfig stage_cfg = cfg.stage;
  stage_cfg.seed = cfg.seed;
  auto mcl = run_mcl(model, split.train, cfg.num_stages, stage_cfg, on_epoch);
  report.stage_losses = mcl.stage_losses;
  if (persist) {
    for (std::size_t j = 0; j < mcl.snapshots.size(); ++j)
      save_snapshot(mcl.snapshots[j], artifact("stage_" + std::to_string(j) + ".snapshot"));
    save_assignments_csv(mcl.assignments, artifact("assignments.csv"));
  }
  report.timings["mcl"] = secs(t0, now());

  // per-stage probes on eval image embeddings
  t0 = now();
  model.set_phase(Phase::all_frozen);
  for (std::size_t s = 0; s < mcl.snapshots.size(); ++s) {
    model.load_ffn_snapshot(mcl.snapshots[s]);
    auto [img, txt] = detail::encode_all(model, split.eval);
    std::vector<double> accs;
    for (std::size_t a = 0; a < cfg.data.num_attributes; ++a) {
      accs.push_back(linear_probe(img, attribute_labels(split.eval, a),
                                  cfg.data.values_per_attribute,
                                  derive_seed(cfg.seed, 100 + a)));
    }
    emit_json({{"kind", "stage_probe"}, {"stage", s}, {"accuracy", accs}});
    report.stage_probe_acc.push_back(std::move(accs));
  }
  report.timings["stage_probes"] = secs(t0, now());

  // assemble + router fine-tuning, identical budget for both constructions
  t0 = now();
  auto dmu = assemble_moe(model, mcl.snapshots, cfg.top_k, derive_seed(cfg.seed, 0xD0));
  report.router_losses_dmu =
      train_router(dmu, split.train, cfg.router.epochs, cfg.router.lr, cfg.alpha,
                   derive_seed(cfg.seed, 0xD1), cfg.router.batch_size, on_epoch);
  if (persist) save_moe(dmu, artifact("moe_dmu"));
  report.timings["router_dmu"] = secs(t0, now());

  t0 = now();
  auto upcycled =
      assemble_upcycled(model, cfg.num_experts(), cfg.top_k, derive_seed(cfg.seed, 0xD0));
  report.router_losses_upcycled =
      train_router(upcycled, split.train, cfg.router.epochs, cfg.router.lr, cfg.alpha,
                   derive_seed(cfg.seed, 0xD1), cfg.router.batch_size, on_epoch);
  if (persist) save_moe(upcycled, artifact("moe_upcycled"));
  report.timings["router_upcycled"] = secs(t0, now());

  // retrieval + routing + specialization
  t0 = now();
  {
    auto [img, txt] = detail::moe_encode_all(dmu, split.eval);
    report.dmu = detail::retrieval_from_embeddings(img, txt);
    emit_json({{"kind", "retrieval"}, {"model", "dmu_moe"}, {"metrics", retrieval_json(report.dmu)}});
  }
  {
    auto [img, txt] = detail::moe_encode_all(upcycled, split.eval);
    report.upcycled = detail::retrieval_from_embeddings(img, txt);
    emit_json({{"kind", "retrieval"},
               {"model", "upcycled_moe"},
               {"metrics", retrieval_json(report.upcycled)}});
  }
  report.routing_dmu = routing_stats(dmu, split.eval);
  report.routing_upcycled = routing_stats(upcycled, split.eval);
  emit_json({{"kind", "routing"}, {"model", "dmu_moe"},
             {"blocks", routing_stats_json(report.routing_dmu)}});
  specialization_report(dmu, split.eval, cfg.data, cfg.seed, report.expert_probe_acc,
                        report.expert_forced_recall1);
  emit_json({{"kind", "specialization"},
             {"probe_accuracy", report.expert_probe_acc},
             {"forced_recall1", report.expert_forced_recall1}});
  if (persist) save_routing_stats_csv(report.routing_dmu, artifact("routing_stats.csv"));
  report.timings["evaluation"] = secs(t0, now());

  if (persist) emit_report(report, cfg.out_dir);
  return report;
}

}  // namespace moelab
