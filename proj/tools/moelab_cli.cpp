// Command-line driver for the dual-encoder MoE pipeline: data generation,
// base contrastive training, multistage cluster-and-contrast fine-tuning,
// MoE assembly, router fine-tuning and evaluation. All metrics stream to
// stdout as newline-delimited JSON records with a "kind" field.

#include <CLI11.hpp>

#include <iostream>
#include <string>

#include "moelab/checkpoint.hpp"
#include "moelab/config.hpp"
#include "moelab/pipeline.hpp"

using namespace moelab;

namespace {

struct CliOptions {
  std::string config_path;
  std::string out_dir = "out";
  std::string dtype = "f32";
  std::string model = "dmu";  // for eval/train-router/routing-stats/specialize
  long long seed = -1;
  int threads = 0;
  std::string command;
};

void emit_line(const json& j) { std::cout << j.dump() << "\n"; }

PipelineConfig make_config(const CliOptions& opt) {
  PipelineConfig cfg;
  if (!opt.config_path.empty()) {
    cfg = load_pipeline_config(opt.config_path);
  } else {
    cfg.encoder.input_dim_image = cfg.data.view_dim();
    cfg.encoder.input_dim_text = cfg.data.view_dim();
  }
  if (opt.seed >= 0) cfg.seed = std::uint64_t(opt.seed);
  if (opt.threads > 0) cfg.threads = opt.threads;
  if (!opt.out_dir.empty()) cfg.out_dir = opt.out_dir;
  cfg.validate();
  return cfg;
}

template <typename T>
DatasetSplit<T> load_data(const PipelineConfig& cfg) {
  return load_dataset_csv<T>(cfg.out_dir + "/dataset.csv", cfg.n_train, cfg.data, cfg.seed);
}

template <typename T>
int run_command(const CliOptions& opt) {
  PipelineConfig cfg = make_config(opt);
  std::filesystem::create_directories(cfg.out_dir);
  auto artifact = [&](const std::string& name) { return cfg.out_dir + "/" + name; };
  EpochCallback on_epoch = [](const std::string& phase, std::size_t epoch, double loss) {
    emit_line({{"kind", "epoch"}, {"phase", phase}, {"epoch", epoch}, {"loss", loss}});
  };

  if (opt.command == "gen-data") {
    auto split = generate_dataset<T>(cfg.n_train, cfg.n_eval, cfg.data, cfg.seed);
    save_dataset_csv(split, artifact("dataset.csv"));
    emit_line({{"kind", "dataset"},
               {"path", artifact("dataset.csv")},
               {"n_train", split.train.size()},
               {"n_eval", split.eval.size()}});
    return 0;
  }

  if (opt.command == "train-base") {
    auto split = load_data<T>(cfg);
    DualEncoder<T> model(cfg.encoder, derive_seed(cfg.seed, 0xB45E));
    model.set_phase(Phase::base_training);
    train_contrastive(model, split.train, std::vector<int>(split.train.size(), 0),
                      cfg.base.epochs, cfg.base.lr, cfg.base.batch_size,
                      derive_seed(cfg.seed, 0xBA5E), "base", on_epoch);
    save_checkpoint(model, artifact("base"));
    emit_line({{"kind", "checkpoint"}, {"path", artifact("base")}});
    return 0;
  }

  if (opt.command == "mcl") {
    auto split = load_data<T>(cfg);
    auto model = load_dual_encoder<T>(artifact("base"));
    StageConfig stage_cfg = cfg.stage;
    stage_cfg.seed = cfg.seed;
    auto mcl = run_mcl(model, split.train, cfg.num_stages, stage_cfg, on_epoch);
    for (std::size_t j = 0; j < mcl.snapshots.size(); ++j) {
      std::string p = artifact("stage_" + std::to_string(j) + ".snapshot");
      save_snapshot(mcl.snapshots[j], p);
      emit_line({{"kind", "snapshot"}, {"stage", j}, {"path", p}});
    }
    save_assignments_csv(mcl.assignments, artifact("assignments.csv"));
    save_checkpoint(model, artifact("mcl_final"));
    return 0;
  }

  if (opt.command == "assemble" || opt.command == "assemble-upcycled") {
    auto base = load_dual_encoder<T>(artifact("base"));
    MoEModel<T> moe;
    std::string name;
    if (opt.command == "assemble") {
      std::vector<FfnSnapshot<T>> snaps;
      for (std::size_t j = 0; j <= cfg.num_stages; ++j)
        snaps.push_back(load_snapshot<T>(artifact("stage_" + std::to_string(j) + ".snapshot")));
      moe = assemble_moe(base, snaps, cfg.top_k, derive_seed(cfg.seed, 0xD0));
      name = "dmu";
    } else {
      moe = assemble_upcycled(base, cfg.num_experts(), cfg.top_k, derive_seed(cfg.seed, 0xD0));
      name = "upcycled";
    }
    save_moe(moe, artifact("moe_" + name));
    emit_line({{"kind", "checkpoint"}, {"path", artifact("moe_" + name)},
               {"experts", moe.num_experts()}, {"top_k", moe.top_k()}});
    return 0;
  }

  if (opt.command == "train-router") {
    auto split = load_data<T>(cfg);
    auto moe = load_moe<T>(artifact("moe_" + opt.model));
    train_router(moe, split.train, cfg.router.epochs, cfg.router.lr, cfg.alpha,
                 derive_seed(cfg.seed, 0xD1), cfg.router.batch_size, on_epoch);
    save_moe(moe, artifact("moe_" + opt.model));
    emit_line({{"kind", "checkpoint"}, {"path", artifact("moe_" + opt.model)}});
    return 0;
  }

  if (opt.command == "eval") {
    auto split = load_data<T>(cfg);
    RetrievalMetrics m;
    if (opt.model == "base") {
      auto model = load_dual_encoder<T>(artifact("base"));
      model.set_phase(Phase::all_frozen);
      auto [img, txt] = moelab::detail::encode_all(model, split.eval);
      m = moelab::detail::retrieval_from_embeddings(img, txt);
    } else {
      auto moe = load_moe<T>(artifact("moe_" + opt.model));
      auto [img, txt] = moelab::detail::moe_encode_all(moe, split.eval);
      m = moelab::detail::retrieval_from_embeddings(img, txt);
    }
    emit_line({{"kind", "retrieval"}, {"model", opt.model}, {"metrics", retrieval_json(m)}});
    return 0;
  }

  if (opt.command == "specialize") {
    auto split = load_data<T>(cfg);
    auto moe = load_moe<T>(artifact("moe_" + opt.model));
    std::vector<std::vector<double>> probe_acc;
    std::vector<double> forced_r1;
    specialization_report(moe, split.eval, cfg.data, cfg.seed, probe_acc, forced_r1);
    emit_line({{"kind", "specialization"}, {"model", opt.model},
               {"probe_accuracy", probe_acc}, {"forced_recall1", forced_r1}});
    return 0;
  }

  if (opt.command == "routing-stats") {
    auto split = load_data<T>(cfg);
    auto moe = load_moe<T>(artifact("moe_" + opt.model));
    auto stats = routing_stats(moe, split.eval);
    save_routing_stats_csv(stats, artifact("routing_stats.csv"));
    emit_line({{"kind", "routing"}, {"model", opt.model},
               {"blocks", routing_stats_json(stats)},
               {"csv", artifact("routing_stats.csv")}});
    return 0;
  }

  if (opt.command == "pipeline") {
    auto report = run_pipeline<T>(cfg, emit_line);
    emit_line({{"kind", "report"}, {"path", cfg.out_dir + "/report.json"}});
    return 0;
  }

  throw ConfigError("unknown command: " + opt.command);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dual-encoder mixture-of-experts trainer and evaluator"};
  app.require_subcommand(1);

  CliOptions opt;
  app.add_option("--config", opt.config_path, "key = value config file");
  app.add_option("--seed", opt.seed, "RNG seed (overrides config)");
  app.add_option("--out", opt.out_dir, "artifact directory");
  app.add_option("--threads", opt.threads, "worker threads (1 = deterministic mode)");
  app.add_option("--dtype", opt.dtype, "f32 or f64")
      ->check(CLI::IsMember({"f32", "f64"}));

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gen-data", "generate the synthetic paired dataset"},
      {"train-base", "contrastive training of the dense dual encoder"},
      {"mcl", "multistage cluster-and-contrast FFN fine-tuning"},
      {"assemble", "build the MoE from stage snapshots"},
      {"assemble-upcycled", "build the duplicate-expert baseline MoE"},
      {"train-router", "router-only fine-tuning"},
      {"eval", "retrieval metrics for a model"},
      {"specialize", "per-expert probe and retrieval matrix"},
      {"routing-stats", "expert usage statistics"},
      {"pipeline", "run everything end to end"},
  };
  for (const auto& [name, desc] : commands) {
    auto* sub = app.add_subcommand(name, desc);
    sub->fallthrough();
    if (name == "eval" || name == "train-router" || name == "specialize" ||
        name == "routing-stats") {
      sub->add_option("--model", opt.model, "base, dmu or upcycled");
    }
  }

  try {
    app.parse(argc, argv);
    opt.command = app.get_subcommands().front()->get_name();
    if (opt.dtype == "f64") return run_command<double>(opt);
    return run_command<float>(opt);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DivergenceError& e) {
    std::cerr << "numerical divergence: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
