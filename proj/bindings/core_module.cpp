// Python bindings for the streaming adaptation core. Thin wrappers over the
// C++ operations; matrices cross the boundary as numpy arrays.

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "ottabp/adapt.hpp"
#include "ottabp/buffer.hpp"
#include "ottabp/config.hpp"
#include "ottabp/eval.hpp"
#include "ottabp/model.hpp"
#include "ottabp/signal.hpp"

namespace py = pybind11;
using namespace ottabp;

namespace {

MaskSpec mask_from_indices(double ratio, const std::vector<int>& masked) {
  return MaskSpec{ratio, masked};
}

std::vector<TrainItem> build_items(
    const std::vector<std::tuple<Eigen::MatrixXd, std::optional<Eigen::Vector2d>,
                                 std::vector<int>>>& raw) {
  std::vector<TrainItem> items;
  items.reserve(raw.size());
  for (const auto& [tokens, label, masked] : raw) {
    TrainItem item;
    item.tokens = tokens;
    item.label = label;
    item.mask.masked = masked;
    items.push_back(std::move(item));
  }
  return items;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Online test-time adaptation engine for streaming blood pressure "
            "regression: dual-queue buffer, weighted batch sampling, dual-head "
            "masked-reconstruction model, and the evaluation sweep.";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  // ------------------------------------------------------------- signal
  py::class_<BPLabel>(m, "BPLabel")
      .def(py::init<double, double>(), py::arg("sbp"), py::arg("dbp"))
      .def_readwrite("sbp", &BPLabel::sbp)
      .def_readwrite("dbp", &BPLabel::dbp)
      .def("__repr__", [](const BPLabel& l) {
        return "BPLabel(sbp=" + std::to_string(l.sbp) + ", dbp=" + std::to_string(l.dbp) + ")";
      });

  py::class_<SignalSegment>(m, "SignalSegment")
      .def(py::init([](const Eigen::VectorXd& values, const std::string& subject_id,
                       int index) {
             return SignalSegment{values, subject_id, index};
           }),
           py::arg("values"), py::arg("subject_id") = "", py::arg("index") = 0)
      .def_readwrite("values", &SignalSegment::values)
      .def_readwrite("subject_id", &SignalSegment::subject_id)
      .def_readwrite("index", &SignalSegment::index);

  py::class_<StreamEvent>(m, "StreamEvent")
      .def(py::init<>())
      .def_readwrite("segment", &StreamEvent::segment)
      .def_readwrite("label", &StreamEvent::label)
      .def_readwrite("truth", &StreamEvent::truth);

  py::class_<SubjectStream>(m, "SubjectStream")
      .def(py::init<>())
      .def_readwrite("subject_id", &SubjectStream::subject_id)
      .def_readwrite("init_labeled", &SubjectStream::init_labeled)
      .def_readwrite("events", &SubjectStream::events);

  py::class_<NormStats>(m, "NormStats")
      .def(py::init<>())
      .def_readwrite("signal_mean", &NormStats::signal_mean)
      .def_readwrite("signal_std", &NormStats::signal_std)
      .def_readwrite("sbp_mean", &NormStats::sbp_mean)
      .def_readwrite("sbp_std", &NormStats::sbp_std)
      .def_readwrite("dbp_mean", &NormStats::dbp_mean)
      .def_readwrite("dbp_std", &NormStats::dbp_std);

  py::enum_<Domain>(m, "Domain")
      .value("SOURCE", Domain::Source)
      .value("TARGET", Domain::Target);

  py::class_<SynthConfig>(m, "SynthConfig")
      .def(py::init<>())
      .def_readwrite("L", &SynthConfig::L)
      .def_readwrite("d", &SynthConfig::d)
      .def_readwrite("T", &SynthConfig::T)
      .def_readwrite("n_init", &SynthConfig::n_init)
      .def_readwrite("n_harmonics", &SynthConfig::n_harmonics)
      .def_readwrite("source_amp", &SynthConfig::source_amp)
      .def_readwrite("target_amp", &SynthConfig::target_amp)
      .def_readwrite("noise_sigma", &SynthConfig::noise_sigma)
      .def_readwrite("drift_delta", &SynthConfig::drift_delta)
      .def_readwrite("heart_cycles", &SynthConfig::heart_cycles)
      .def_readwrite("seed", &SynthConfig::seed);

  m.def("tokenize",
        py::overload_cast<const Eigen::VectorXd&, int>(&tokenize),
        py::arg("values"), py::arg("d"),
        "Split a window of length L into S = L/d rows of width d.");
  m.def("flatten_tokens", &flatten_tokens, py::arg("tokens"));
  m.def("fit_norm",
        py::overload_cast<const std::vector<SubjectStream>&>(&fit_norm),
        py::arg("source"));
  m.def("normalize_signal", &normalize_signal, py::arg("values"), py::arg("stats"));
  m.def("denormalize_signal", &denormalize_signal, py::arg("values"), py::arg("stats"));
  m.def("normalize_label", &normalize_label, py::arg("label"), py::arg("stats"));
  m.def("denormalize_label", &denormalize_label, py::arg("normalized"), py::arg("stats"));
  m.def("synth_subject", &synth_subject, py::arg("cfg"), py::arg("domain"),
        py::arg("subject_seed"));
  m.def("load_stream_csv", &load_stream_csv, py::arg("path"));
  m.def("write_events_csv", &write_events_csv, py::arg("path"), py::arg("streams"));
  m.def("write_init_csv", &write_init_csv, py::arg("path"), py::arg("streams"));
  m.def("attach_init", &attach_init, py::arg("streams"), py::arg("init"));

  // ------------------------------------------------------------- model
  py::class_<ModelGeometry>(m, "ModelGeometry")
      .def(py::init([](int d, int h, int S, int E) {
             return ModelGeometry{d, h, S, E};
           }),
           py::arg("d") = 16, py::arg("h") = 32, py::arg("S") = 16, py::arg("E") = 2)
      .def_readwrite("d", &ModelGeometry::d)
      .def_readwrite("h", &ModelGeometry::h)
      .def_readwrite("S", &ModelGeometry::S)
      .def_readwrite("E", &ModelGeometry::E)
      .def("window_length", &ModelGeometry::window_length);

  py::class_<ModelParams>(m, "ModelParams")
      .def_readonly("geo", &ModelParams::geo)
      .def("tensors", [](ModelParams& p) {
        py::dict out;
        for_each_tensor(p, [&](const std::string& name, Eigen::MatrixXd& t) {
          out[py::str(name)] = t;
        });
        return out;
      });

  py::class_<MaskSpec>(m, "MaskSpec")
      .def(py::init(&mask_from_indices), py::arg("ratio"), py::arg("masked"))
      .def_readwrite("ratio", &MaskSpec::ratio)
      .def_readwrite("masked", &MaskSpec::masked);

  py::class_<ShrinkageParams>(m, "ShrinkageParams")
      .def(py::init<double, double>(), py::arg("a") = 10.0, py::arg("c") = 0.2)
      .def_readwrite("a", &ShrinkageParams::a)
      .def_readwrite("c", &ShrinkageParams::c);

  py::class_<LossWeights>(m, "LossWeights")
      .def(py::init<double>(), py::arg("lambda_pred") = 1.0)
      .def_readwrite("lambda_pred", &LossWeights::lambda_pred);

  m.def("init_params", &init_params, py::arg("geo"), py::arg("seed"));
  m.def("forward_recon", &forward_recon, py::arg("params"), py::arg("tokens"),
        py::arg("mask"));
  m.def("forward_predict", &forward_predict, py::arg("params"), py::arg("tokens"));
  m.def("masked_mse", &masked_mse, py::arg("recon"), py::arg("target"), py::arg("mask"));
  m.def("shrinkage", &shrinkage, py::arg("pred"), py::arg("target"),
        py::arg("sp") = ShrinkageParams{});
  m.def("combined_loss", &combined_loss, py::arg("recon_loss"), py::arg("pred_loss"),
        py::arg("w") = LossWeights{});
  m.def(
      "backward",
      [](const ModelParams& params,
         const std::vector<std::tuple<Eigen::MatrixXd, std::optional<Eigen::Vector2d>,
                                      std::vector<int>>>& batch,
         const LossWeights& w, const ShrinkageParams& sp) {
        auto [grads, loss] = backward(params, build_items(batch), w, sp);
        py::dict out;
        for_each_tensor(grads, [&](const std::string& name, Eigen::MatrixXd& t) {
          out[py::str(name)] = t;
        });
        return py::make_tuple(out, loss);
      },
      py::arg("params"), py::arg("batch"), py::arg("w") = LossWeights{},
      py::arg("sp") = ShrinkageParams{},
      "Batch entries are (tokens, label-or-None, masked-indices) tuples; "
      "returns ({tensor name: gradient}, batch loss).");
  m.def("sgd_step", &sgd_step, py::arg("params"), py::arg("grads"), py::arg("lr"));

  py::class_<PretrainConfig>(m, "PretrainConfig")
      .def(py::init<>())
      .def_readwrite("epochs", &PretrainConfig::epochs)
      .def_readwrite("batch_size", &PretrainConfig::batch_size)
      .def_readwrite("lr_ssl", &PretrainConfig::lr_ssl)
      .def_readwrite("lr_sl", &PretrainConfig::lr_sl)
      .def_readwrite("mask_ratio", &PretrainConfig::mask_ratio);

  m.def(
      "pretrain",
      [](const ModelParams& params, const std::vector<SubjectStream>& source,
         const PretrainConfig& cfg, std::uint64_t seed) {
        return pretrain(params, source, cfg, seed);
      },
      py::arg("params"), py::arg("source"), py::arg("cfg"), py::arg("seed"));

  py::class_<Checkpoint>(m, "Checkpoint")
      .def(py::init<>())
      .def_readwrite("params", &Checkpoint::params)
      .def_readwrite("stats", &Checkpoint::stats);
  m.def("save_checkpoint", &save_checkpoint, py::arg("path"), py::arg("ckpt"));
  m.def("load_checkpoint", &load_checkpoint, py::arg("path"));

  // ------------------------------------------------------------- engine
  py::class_<BatchComposition>(m, "BatchComposition")
      .def(py::init<int, int>(), py::arg("n_unlabel") = 24, py::arg("n_label") = 8)
      .def_readwrite("n_unlabel", &BatchComposition::n_unlabel)
      .def_readwrite("n_label", &BatchComposition::n_label);

  py::class_<AdaptConfig>(m, "AdaptConfig")
      .def(py::init<>())
      .def_readwrite("injection_frequency", &AdaptConfig::injection_frequency)
      .def_readwrite("init_labels", &AdaptConfig::init_labels)
      .def_readwrite("reps_per_batch", &AdaptConfig::reps_per_batch)
      .def_readwrite("lr_test", &AdaptConfig::lr_test)
      .def_readwrite("comp", &AdaptConfig::comp)
      .def_readwrite("cap_unlabel", &AdaptConfig::cap_unlabel)
      .def_readwrite("cap_label", &AdaptConfig::cap_label)
      .def_readwrite("mask_ratio", &AdaptConfig::mask_ratio)
      .def_readwrite("loss_weights", &AdaptConfig::loss_weights)
      .def_readwrite("shrinkage", &AdaptConfig::shrinkage)
      .def_readwrite("init_finetune_epochs", &AdaptConfig::init_finetune_epochs)
      .def_readwrite("resample_per_rep", &AdaptConfig::resample_per_rep)
      .def_readwrite("seed", &AdaptConfig::seed);

  py::class_<PredEntry>(m, "PredEntry")
      .def_readonly("index", &PredEntry::index)
      .def_readonly("pred_sbp", &PredEntry::pred_sbp)
      .def_readonly("pred_dbp", &PredEntry::pred_dbp)
      .def_readonly("truth", &PredEntry::truth);

  py::class_<PredictionLog>(m, "PredictionLog")
      .def_readonly("subject_id", &PredictionLog::subject_id)
      .def_readonly("entries", &PredictionLog::entries)
      .def_readonly("labeled_indices", &PredictionLog::labeled_indices);

  m.def("label_schedule", &label_schedule, py::arg("T"), py::arg("F"));
  m.def("attach_labels", &attach_labels, py::arg("stream"), py::arg("schedule"));
  m.def("initial_finetune", &initial_finetune, py::arg("params"), py::arg("init_labeled"),
        py::arg("stats"), py::arg("cfg"));
  m.def("run_subject", &run_subject, py::arg("pretrained"), py::arg("stats"),
        py::arg("stream"), py::arg("cfg"));
  m.def("write_prediction_jsonl", &write_prediction_jsonl, py::arg("log"), py::arg("path"));

  // ------------------------------------------------------------- eval
  py::class_<RunMetrics>(m, "RunMetrics")
      .def_readonly("mae_sbp", &RunMetrics::mae_sbp)
      .def_readonly("mae_dbp", &RunMetrics::mae_dbp)
      .def_readonly("corr_sbp", &RunMetrics::corr_sbp)
      .def_readonly("corr_dbp", &RunMetrics::corr_dbp)
      .def_readonly("n_eval", &RunMetrics::n_eval);

  py::class_<SweepGrid>(m, "SweepGrid")
      .def(py::init<>())
      .def_readwrite("frequencies", &SweepGrid::frequencies)
      .def_readwrite("init_label_counts", &SweepGrid::init_label_counts)
      .def_readwrite("seeds", &SweepGrid::seeds);

  py::class_<CellStats>(m, "CellStats")
      .def_readonly("n_runs", &CellStats::n_runs)
      .def_readonly("mae_sbp", &CellStats::mae_sbp)
      .def_readonly("mae_dbp", &CellStats::mae_dbp)
      .def_readonly("corr_sbp", &CellStats::corr_sbp)
      .def_readonly("corr_dbp", &CellStats::corr_dbp)
      .def_readonly("n_eval_mean", &CellStats::n_eval_mean)
      .def_readonly("errors", &CellStats::errors);

  py::class_<ReportTable>(m, "ReportTable")
      .def_readonly("cells", &ReportTable::cells)
      .def_readonly("baseline", &ReportTable::baseline)
      .def_readwrite("config_hash", &ReportTable::config_hash)
      .def_readwrite("seed", &ReportTable::seed)
      .def("any_failed", &ReportTable::any_failed);

  m.def("mae", &mae, py::arg("preds"), py::arg("truths"));
  m.def("pearson", &pearson, py::arg("preds"), py::arg("truths"));
  m.def("evaluate", &evaluate, py::arg("log"));
  m.def("baseline_log", &baseline_log, py::arg("params"), py::arg("stats"), py::arg("stream"));
  m.def("baseline_no_adapt", &baseline_no_adapt, py::arg("params"), py::arg("stats"),
        py::arg("streams"));
  m.def("sweep", &sweep, py::arg("grid"), py::arg("pretrained"), py::arg("stats"),
        py::arg("streams"), py::arg("cfg_template"), py::arg("jobs") = 1,
        py::arg("predictions_dir") = "",
        py::call_guard<py::gil_scoped_release>());
  m.def("write_report_csv", &write_report_csv, py::arg("table"), py::arg("path"));
  m.def("write_report_text",
        py::overload_cast<const ReportTable&, const std::string&>(&write_report_text),
        py::arg("table"), py::arg("path"));

  m.attr("__version__") = "0.1.0";
}
