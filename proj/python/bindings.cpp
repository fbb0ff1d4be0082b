#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "capsct/capsule.hpp"
#include "capsct/checkpoint.hpp"
#include "capsct/config.hpp"
#include "capsct/crossval.hpp"
#include "capsct/error.hpp"
#include "capsct/gradcam.hpp"
#include "capsct/phantom.hpp"
#include "capsct/rng.hpp"
#include "capsct/stats.hpp"

namespace py = pybind11;
using namespace capsct;
using nlohmann::json;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

RunConfig config_from(const std::string& text) {
  RunConfig c = text.empty() ? RunConfig{} : run_config_from_json(json::parse(text));
  c.validate();
  return c;
}

// Models saved by the command-line tool or a crossval fold directory.
class Classifier {
 public:
  Classifier(const std::filesystem::path& dir, const std::string& config_text)
      : config_(config_from(config_text)) {
    auto s1 = load_checkpoint(dir / "stage1.cvcp");
    auto s2 = load_checkpoint(dir / "stage2.cvcp");
    auto f = load_checkpoint(dir / "fusion.cvcp");
    config_.stage1 = stage1_from_json(s1.config);
    config_.stage2 = stage2_from_json(s2.config);
    models_.stage1 = std::move(s1.params);
    models_.stage2 = std::move(s2.params);
    models_.fusion = std::move(f.params);
    models_.scaler = scaler_from_checkpoint(f.config);
  }

  std::string predict(const std::filesystem::path& data_dir) {
    json out = json::array();
    for (const auto& p : prepare_patients(load_dataset(data_dir), config_.stage1.input_side)) {
      const auto r = predict_one(p);
      out.push_back({{"id", r.id},
                     {"truth", r.truth},
                     {"candidates", r.candidates.slice_index},
                     {"stage2_probabilities", r.stage2.probabilities},
                     {"stage2_decision", r.stage2.decision},
                     {"fusion_probabilities", r.fusion.probabilities},
                     {"fusion_decision", r.fusion.decision}});
    }
    return out.dump();
  }

  Array gradcam_stage1(const Array& slice, const std::string& target, const std::string& layer) {
    Tensor t = to_tensor(slice);
    if (t.rank() == 2) t = reshape(t, {1, t.dim(0), t.dim(1)});
    const Heatmap h = capsct::gradcam_stage1(models_.stage1, config_.stage1, t, parse_label(target), layer);
    return to_array(Tensor({h.height, h.width}, h.values));
  }

 private:
  PatientPrediction predict_one(const PreparedPatient& p) { return capsct::predict(models_, config_, p); }

  RunConfig config_;
  Models models_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Two-stage capsule network CT classifier";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<ContractError>(m, "ContractError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());

  m.def("derive_seed", &derive_seed, py::arg("seed"), py::arg("stream"));

  m.def("squash", [](std::vector<double> s) { return squash(s); }, py::arg("s"));
  m.def(
      "routing",
      [](const Array& predictions, std::size_t iterations) {
        NoGrad off;
        auto r = routing(to_tensor(predictions), iterations);
        std::vector<Array> history;
        for (const auto& c : r.state.history) history.push_back(to_array(c));
        return py::make_tuple(to_array(r.output.values), to_array(r.state.couplings), history);
      },
      py::arg("predictions"), py::arg("iterations") = kDefaultRoutingIterations,
      "Routing by agreement over [in×out×dim] predictions; returns (outputs, couplings, history).");

  m.def("mcnemar_exact", &mcnemar_exact, py::arg("b"), py::arg("c"));
  m.def("format_p_value", &format_p_value, py::arg("p"));
  m.def(
      "roc_auc",
      [](std::vector<double> scores, std::vector<int> positive) {
        auto r = roc_auc(scores, positive);
        std::vector<std::tuple<double, double, double>> pts;
        for (const auto& p : r.points) pts.emplace_back(p.threshold, p.fpr, p.tpr);
        return py::make_tuple(r.auc, pts);
      },
      py::arg("scores"), py::arg("positive"));
  m.def(
      "stratified_kfold",
      [](std::vector<int> labels, std::size_t k, std::uint64_t seed) {
        return stratified_kfold(labels, k, seed).folds;
      },
      py::arg("labels"), py::arg("k"), py::arg("seed"));
  m.def(
      "compute_metrics",
      [](std::vector<int> decisions, std::vector<int> truths, std::vector<double> covid_scores) {
        return to_json(compute_metrics(decisions, truths, covid_scores)).dump();
      },
      py::arg("decisions"), py::arg("truths"), py::arg("covid_scores") = std::vector<double>{});
  m.def(
      "logistic_fit",
      [](const Eigen::MatrixXd& x, const Eigen::VectorXd& y, std::vector<std::string> names) {
        auto f = logistic_fit(x, y, std::move(names));
        py::dict d;
        d["names"] = f.names;
        d["coefficients"] = f.coefficients;
        d["std_errors"] = f.std_errors;
        d["z"] = f.z;
        d["p_values"] = f.p_values ? py::cast(*f.p_values) : py::none();
        d["converged"] = f.converged;
        d["separated"] = f.separated;
        d["iterations"] = f.iterations;
        return d;
      },
      py::arg("x"), py::arg("y"), py::arg("names") = std::vector<std::string>{});

  m.def(
      "gate_and_pool",
      [](std::vector<std::array<double, 3>> norms, std::vector<double> p_inf) {
        auto g = gate_and_pool(norms, p_inf);
        return py::make_tuple(g.scores, g.probabilities, g.decision);
      },
      py::arg("norms"), py::arg("p_inf"), "Returns (scores, probabilities, decision).");
  m.def("decide", [](std::vector<double> scores) { return decide(scores); }, py::arg("scores"));
  m.def(
      "select_candidates",
      [](std::vector<double> p_infs, std::size_t k) { return select_candidates(p_infs, k).slice_index; },
      py::arg("p_infs"), py::arg("k"));

  m.def(
      "gradcam_map",
      [](const Array& activation, std::vector<double> gradient) {
        const Heatmap h = gradcam_map(to_tensor(activation), gradient);
        return to_array(Tensor({h.height, h.width}, h.values));
      },
      py::arg("activation"), py::arg("gradient"));
  m.def(
      "render_heatmap",
      [](const Array& values, std::size_t side) {
        if (values.ndim() != 2) throw DimensionError("heatmap must be 2-D");
        Heatmap h;
        h.height = static_cast<std::size_t>(values.shape(0));
        h.width = static_cast<std::size_t>(values.shape(1));
        h.values.assign(values.data(), values.data() + values.size());
        auto px = render_heatmap(h, side);
        py::array_t<std::uint8_t> out({static_cast<py::ssize_t>(side), static_cast<py::ssize_t>(side)});
        std::copy(px.begin(), px.end(), out.mutable_data());
        return out;
      },
      py::arg("values"), py::arg("side"));

  m.def("default_config", [] { return to_json(RunConfig{}).dump(); });
  m.def("resolve_config", [](const std::string& text) { return to_json(config_from(text)).dump(); },
        py::arg("config_json"), "Overlays a JSON config on the defaults and validates it.");
  m.def(
      "write_phantom",
      [](const std::filesystem::path& out_dir, const std::string& config_text) {
        write_dataset(out_dir, generate_phantom(config_from(config_text).phantom).dataset);
      },
      py::arg("out_dir"), py::arg("config_json") = "");
  m.def(
      "crossval",
      [](const std::filesystem::path& data_dir, const std::string& config_text,
         std::optional<std::filesystem::path> out_dir) {
        const RunConfig c = config_from(config_text);
        auto patients = prepare_patients(load_dataset(data_dir), c.stage1.input_side);
        py::gil_scoped_release release;
        return run_crossval(patients, c, out_dir).aggregate.dump();
      },
      py::arg("data_dir"), py::arg("config_json") = "", py::arg("out_dir") = std::nullopt);

  py::class_<Classifier>(m, "Classifier")
      .def(py::init<const std::filesystem::path&, const std::string&>(), py::arg("model_dir"),
           py::arg("config_json") = "")
      .def("predict", &Classifier::predict, py::arg("data_dir"))
      .def("gradcam_stage1", &Classifier::gradcam_stage1, py::arg("slice"), py::arg("target") = "covid",
           py::arg("layer") = "");
}
