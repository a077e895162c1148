// Python bindings for the f32 pipeline: dataset generation, dense and MoE
// encoders, stage training, routing and evaluation. Matrices cross the
// boundary as numpy float32 arrays; report structures cross as dicts.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "moelab/checkpoint.hpp"
#include "moelab/config.hpp"
#include "moelab/pipeline.hpp"

namespace py = pybind11;
using namespace moelab;

namespace {

Mat<float> to_mat(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-d array");
  Mat<float> m(std::size_t(a.shape(0)), std::size_t(a.shape(1)));
  std::memcpy(m.data(), a.data(), sizeof(float) * m.size());
  return m;
}

py::array_t<float> to_numpy(const Mat<float>& m) {
  py::array_t<float> a({m.rows(), m.cols()});
  std::memcpy(a.mutable_data(), m.data(), sizeof(float) * m.size());
  return a;
}

py::object json_to_py(const json& j) {
  auto loads = py::module_::import("json").attr("loads");
  return loads(j.dump());
}

py::dict report_to_dict(const EvalReport& r) {
  py::dict d = json_to_py(report_json(r));
  py::dict timings;
  for (const auto& [k, v] : r.timings) timings[py::str(k)] = v;
  d["timings"] = timings;
  return d;
}

py::list stats_to_py(const RoutingStats& stats) {
  py::list blocks;
  for (const auto& b : stats.blocks) {
    py::dict d;
    d["topk_fraction"] = b.topk_fraction;
    d["mean_probability"] = b.mean_probability;
    blocks.append(d);
  }
  return blocks;
}

}  // namespace

PYBIND11_MODULE(_moelab, m) {
  m.doc() = "dual-encoder mixture-of-experts trainer (float32 core)";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_RuntimeError);
  py::register_exception<LoadError>(m, "LoadError", PyExc_RuntimeError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  py::class_<AttributeSpec>(m, "AttributeSpec")
      .def(py::init<>())
      .def_readwrite("num_attributes", &AttributeSpec::num_attributes)
      .def_readwrite("values_per_attribute", &AttributeSpec::values_per_attribute)
      .def_readwrite("salience", &AttributeSpec::salience)
      .def_readwrite("noise_sigma", &AttributeSpec::noise_sigma)
      .def("validate", &AttributeSpec::validate)
      .def_property_readonly("view_dim", &AttributeSpec::view_dim);

  py::class_<EncoderConfig>(m, "EncoderConfig")
      .def(py::init<>())
      .def_readwrite("input_dim_image", &EncoderConfig::input_dim_image)
      .def_readwrite("input_dim_text", &EncoderConfig::input_dim_text)
      .def_readwrite("dim", &EncoderConfig::dim)
      .def_readwrite("ffn_hidden", &EncoderConfig::ffn_hidden)
      .def_readwrite("blocks_image", &EncoderConfig::blocks_image)
      .def_readwrite("blocks_text", &EncoderConfig::blocks_text)
      .def_readwrite("temperature", &EncoderConfig::temperature);

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_readwrite("lr", &TrainConfig::lr)
      .def_readwrite("batch_size", &TrainConfig::batch_size);

  py::class_<StageConfig>(m, "StageConfig")
      .def(py::init<>())
      .def_readwrite("k_image", &StageConfig::k_image)
      .def_readwrite("k_text", &StageConfig::k_text)
      .def_readwrite("epochs", &StageConfig::epochs)
      .def_readwrite("lr", &StageConfig::lr)
      .def_readwrite("batch_size", &StageConfig::batch_size)
      .def_readwrite("seed", &StageConfig::seed);

  py::class_<PipelineConfig>(m, "PipelineConfig")
      .def(py::init([] {
        PipelineConfig cfg;
        cfg.encoder.input_dim_image = cfg.data.view_dim();
        cfg.encoder.input_dim_text = cfg.data.view_dim();
        return cfg;
      }))
      .def_readwrite("data", &PipelineConfig::data)
      .def_readwrite("n_train", &PipelineConfig::n_train)
      .def_readwrite("n_eval", &PipelineConfig::n_eval)
      .def_readwrite("encoder", &PipelineConfig::encoder)
      .def_readwrite("base", &PipelineConfig::base)
      .def_readwrite("stage", &PipelineConfig::stage)
      .def_readwrite("num_stages", &PipelineConfig::num_stages)
      .def_readwrite("top_k", &PipelineConfig::top_k)
      .def_readwrite("alpha", &PipelineConfig::alpha)
      .def_readwrite("router", &PipelineConfig::router)
      .def_readwrite("seed", &PipelineConfig::seed)
      .def_readwrite("out_dir", &PipelineConfig::out_dir)
      .def_readwrite("threads", &PipelineConfig::threads)
      .def("validate", &PipelineConfig::validate);

  m.def("load_pipeline_config", &load_pipeline_config, py::arg("path"));

  py::class_<SampleSet<float>>(m, "SampleSet")
      .def_readonly("sample_ids", &SampleSet<float>::sample_ids)
      .def_readonly("attributes", &SampleSet<float>::attributes)
      .def_property_readonly("images",
                             [](const SampleSet<float>& s) { return to_numpy(s.images); })
      .def_property_readonly("texts",
                             [](const SampleSet<float>& s) { return to_numpy(s.texts); })
      .def("__len__", &SampleSet<float>::size);

  py::class_<DatasetSplit<float>>(m, "DatasetSplit")
      .def_readonly("train", &DatasetSplit<float>::train)
      .def_readonly("eval", &DatasetSplit<float>::eval)
      .def_readonly("seed", &DatasetSplit<float>::seed);

  m.def("generate_dataset", &generate_dataset<float>, py::arg("n_train"),
        py::arg("n_eval"), py::arg("spec"), py::arg("seed"));
  m.def("save_dataset_csv", &save_dataset_csv<float>, py::arg("split"), py::arg("path"));
  m.def("load_dataset_csv", &load_dataset_csv<float>, py::arg("path"),
        py::arg("n_train"), py::arg("spec"), py::arg("seed"));
  m.def("attribute_labels", &attribute_labels<float>, py::arg("sample_set"),
        py::arg("attribute_index"));

  py::class_<FfnSnapshot<float>>(m, "FfnSnapshot")
      .def_readonly("stage_id", &FfnSnapshot<float>::stage_id)
      .def("__len__",
           [](const FfnSnapshot<float>& s) { return s.blocks.size(); });

  py::class_<DualEncoder<float>>(m, "DualEncoder")
      .def(py::init<EncoderConfig, std::uint64_t>(), py::arg("config"), py::arg("seed"))
      .def("encode_image",
           [](DualEncoder<float>& self, const py::array_t<float>& batch) {
             return to_numpy(self.encode_image(to_mat(batch))->value);
           })
      .def("encode_text",
           [](DualEncoder<float>& self, const py::array_t<float>& batch) {
             return to_numpy(self.encode_text(to_mat(batch))->value);
           })
      .def("set_phase",
           [](DualEncoder<float>& self, const std::string& phase) {
             if (phase == "base_training") self.set_phase(Phase::base_training);
             else if (phase == "ffn_only") self.set_phase(Phase::ffn_only);
             else if (phase == "all_frozen") self.set_phase(Phase::all_frozen);
             else throw ConfigError("unknown phase: " + phase);
           })
      .def("extract_ffn_snapshot", &DualEncoder<float>::extract_ffn_snapshot,
           py::arg("stage_id"))
      .def("load_ffn_snapshot", &DualEncoder<float>::load_ffn_snapshot,
           py::arg("snapshot"));

  m.def(
      "train_contrastive",
      [](DualEncoder<float>& model, const SampleSet<float>& train,
         const std::vector<int>& keys, std::size_t epochs, double lr,
         std::size_t batch_size, std::uint64_t seed, const std::string& tag) {
        return train_contrastive(model, train, keys, epochs, lr, batch_size, seed, tag);
      },
      py::arg("model"), py::arg("train"), py::arg("keys"), py::arg("epochs"),
      py::arg("lr"), py::arg("batch_size"), py::arg("seed"),
      py::arg("tag") = std::string("train"));

  m.def(
      "run_mcl",
      [](DualEncoder<float>& model, const SampleSet<float>& train,
         std::size_t num_stages, const StageConfig& cfg) {
        auto res = run_mcl(model, train, num_stages, cfg);
        py::list assignments;
        for (const auto& a : res.assignments) {
          py::dict d;
          d["sample_id"] = a.sample_id;
          d["labels"] = a.labels;
          assignments.append(d);
        }
        py::dict out;
        out["snapshots"] = py::cast(std::move(res.snapshots));
        out["assignments"] = assignments;
        out["stage_losses"] = res.stage_losses;
        return out;
      },
      py::arg("model"), py::arg("train"), py::arg("num_stages"), py::arg("stage_config"));

  m.def(
      "masked_infonce",
      [](const py::array_t<float>& img, const py::array_t<float>& txt,
         const std::vector<int>& keys, double tau) {
        return double(
            masked_infonce(ad::constant(to_mat(img)), ad::constant(to_mat(txt)), keys,
                           float(tau))->value[0]);
      },
      py::arg("img_emb"), py::arg("txt_emb"), py::arg("keys"), py::arg("tau") = 0.07);

  py::class_<MoEModel<float>>(m, "MoEModel")
      .def_property_readonly("num_experts", &MoEModel<float>::num_experts)
      .def_property_readonly("top_k", &MoEModel<float>::top_k)
      .def(
          "encode_image",
          [](MoEModel<float>& self, const py::array_t<float>& batch, int forced_expert) {
            return to_numpy(self.encode_image(to_mat(batch), forced_expert).emb->value);
          },
          py::arg("batch"), py::arg("forced_expert") = -1)
      .def(
          "encode_text",
          [](MoEModel<float>& self, const py::array_t<float>& batch, int forced_expert) {
            return to_numpy(self.encode_text(to_mat(batch), forced_expert).emb->value);
          },
          py::arg("batch"), py::arg("forced_expert") = -1);

  m.def("assemble_moe", &assemble_moe<float>, py::arg("base"), py::arg("snapshots"),
        py::arg("top_k"), py::arg("seed"));
  m.def("assemble_upcycled", &assemble_upcycled<float>, py::arg("base"),
        py::arg("num_experts"), py::arg("top_k"), py::arg("seed"));

  m.def(
      "train_router",
      [](MoEModel<float>& moe, const SampleSet<float>& train, std::size_t epochs,
         double lr, double alpha, std::uint64_t seed, std::size_t batch_size) {
        return train_router(moe, train, epochs, lr, alpha, seed, batch_size);
      },
      py::arg("moe"), py::arg("train"), py::arg("epochs"), py::arg("lr"),
      py::arg("alpha"), py::arg("seed"), py::arg("batch_size") = 64);

  m.def(
      "routing_stats",
      [](MoEModel<float>& moe, const SampleSet<float>& set) {
        return stats_to_py(routing_stats(moe, set));
      },
      py::arg("moe"), py::arg("sample_set"));

  m.def(
      "route",
      [](const py::array_t<float>& x, const py::array_t<float>& router, std::size_t k) {
        auto res = route(to_mat(x), to_mat(router), k);
        return py::make_tuple(res.indices, to_numpy(res.weights));
      },
      py::arg("x"), py::arg("router"), py::arg("k"));

  m.def(
      "recall_at_k",
      [](const py::array_t<float>& queries, const py::array_t<float>& gallery,
         std::size_t k) { return recall_at_k(to_mat(queries), to_mat(gallery), k); },
      py::arg("queries"), py::arg("gallery"), py::arg("k"));
  m.def(
      "linear_probe",
      [](const py::array_t<float>& embeddings, const std::vector<int>& labels,
         std::size_t n_classes, std::uint64_t seed) {
        return linear_probe(to_mat(embeddings), labels, n_classes, seed);
      },
      py::arg("embeddings"), py::arg("labels"), py::arg("n_classes"), py::arg("seed"));

  m.def("save_checkpoint", &save_checkpoint<float>, py::arg("model"), py::arg("path"));
  m.def("load_dual_encoder", &load_dual_encoder<float>, py::arg("path"));
  m.def("save_snapshot", &save_snapshot<float>, py::arg("snapshot"), py::arg("path"));
  m.def("load_snapshot", &load_snapshot<float>, py::arg("path"));
  m.def("save_moe", &save_moe<float>, py::arg("moe"), py::arg("path"));
  m.def("load_moe", &load_moe<float>, py::arg("path"));

  m.def(
      "run_pipeline",
      [](const PipelineConfig& cfg) { return report_to_dict(run_pipeline<float>(cfg)); },
      py::arg("config"));
}
