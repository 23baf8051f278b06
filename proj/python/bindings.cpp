#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <fmt/format.h>

#include "embolite/errors.hpp"
#include "embolite/harness.hpp"

namespace py = pybind11;
using namespace embolite;

namespace {

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.ptr(), t.ptr() + t.numel(), out.mutable_data());
  return out;
}

Tensor from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  Tensor t(shape);
  std::copy(a.data(), a.data() + a.size(), t.ptr());
  return t;
}

RunConfig config_from(const py::object& cfg) {
  if (py::isinstance<py::dict>(cfg)) {
    const std::string text = py::module_::import("json").attr("dumps")(cfg).cast<std::string>();
    return run_config_from_json(nlohmann::json::parse(text));
  }
  return load_run_config(cfg.cast<std::string>());
}

py::object json_to_py(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

}  // namespace

PYBIND11_MODULE(_embolite, m) {
  m.doc() = "Bindings for the embolite pulmonary embolism pipeline";

  static py::exception<Error> base(m, "EmboliteError");
  static py::exception<ConfigError> config_error(m, "ConfigError", base.ptr());
  static py::exception<DataError> data_error(m, "DataError", base.ptr());
  static py::exception<DimensionError> dim_error(m, "DimensionError", base.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ConfigError& e) {
      config_error(e.what());
    } catch (const DataError& e) {
      data_error(e.what());
    } catch (const DimensionError& e) {
      dim_error(e.what());
    } catch (const Error& e) {
      base(e.what());
    }
  });

  m.def("load_config", [](const py::object& cfg) { return json_to_py(to_json(config_from(cfg))); }, py::arg("config"),
        "Parse a config path or dict and return it with every default filled in.");

  m.def(
      "run",
      [](const std::string& command, const py::object& cfg_in, bool force, int jobs, std::optional<std::string> out,
         bool verbose) {
        RunConfig cfg = config_from(cfg_in);
        if (out) cfg.output_dir = *out;
        CommandOptions opt;
        opt.force = force;
        opt.jobs = jobs;
        if (verbose) {
          opt.log = [](const std::string& s) {
            py::gil_scoped_acquire gil;
            py::print(s);
          };
        }
        py::dict result;
        py::gil_scoped_release release;
        if (command == "gen-data") {
          const auto s = cmd_gen_data(cfg, opt);
          py::gil_scoped_acquire gil;
          result["studies"] = s.entries.size();
        } else if (command == "train-stage1") {
          const auto r = cmd_train_stage1(cfg, opt);
          py::gil_scoped_acquire gil;
          result["best_val_dice"] = r.best_val_dice;
          result["best_epoch"] = r.best_epoch;
          result["epochs"] = r.history.size();
        } else if (command == "train-stage2") {
          const auto r = cmd_train_stage2(cfg, opt);
          py::gil_scoped_acquire gil;
          result["best_val_auroc"] = r.best_val_auroc;
          result["best_val_loss"] = r.best_val_loss;
          result["best_epoch"] = r.best_epoch;
          result["epochs"] = r.history.size();
        } else if (command == "eval") {
          const auto r = cmd_eval(cfg, opt);
          py::gil_scoped_acquire gil;
          py::dict strata;
          for (const auto& row : r.report) {
            strata[py::str(row.stratum)] = py::dict(py::arg("n_pos") = row.n_pos, py::arg("n_neg") = row.n_neg,
                                                     py::arg("auc") = row.auc, py::arg("f1") = row.f1,
                                                     py::arg("acc") = row.acc);
          }
          result["report"] = strata;
          result["studies"] = r.predictions.size();
        } else if (command == "ablate") {
          const auto r = cmd_ablate(cfg, opt);
          py::gil_scoped_acquire gil;
          auto rows = [](const std::vector<AblationRow>& v) {
            py::list l;
            for (const auto& a : v) {
              l.append(py::dict(py::arg("variant") = a.variant, py::arg("T") = a.T, py::arg("accuracy") = a.accuracy,
                                py::arg("auc") = a.auc, py::arg("f1") = a.f1, py::arg("parameters") = a.parameters));
            }
            return l;
          };
          result["variants"] = rows(r.variants);
          result["t_sweep"] = rows(r.t_sweep);
        } else {
          throw ConfigError("unknown command '" + command + "'");
        }
        return result;
      },
      py::arg("command"), py::arg("config"), py::arg("force") = false, py::arg("jobs") = 1,
      py::arg("out") = py::none(), py::arg("verbose") = false,
      "Run one of gen-data, train-stage1, train-stage2, eval, ablate.");

  m.def(
      "auroc",
      [](const std::vector<double>& scores, const std::vector<int>& labels) {
        const RocCurve c = auroc(scores, labels);
        std::vector<double> fpr, tpr;
        for (const auto& p : c.points) {
          fpr.push_back(p.fpr);
          tpr.push_back(p.tpr);
        }
        return py::make_tuple(c.auc, fpr, tpr);
      },
      py::arg("scores"), py::arg("labels"), "Returns (auc, fpr, tpr).");
  m.def(
      "dice_coefficient",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& pred,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& target) {
        return dice_coefficient(from_numpy(pred), from_numpy(target));
      },
      py::arg("pred"), py::arg("target"));
  m.def("bce_loss", &bce_value, py::arg("y_hat"), py::arg("y"));
  m.def("focal_loss", &focal_value, py::arg("y_hat"), py::arg("y"), py::arg("gamma") = 2.0);
  m.def(
      "plan_windows",
      [](int span, int T, int overlap) {
        std::vector<std::tuple<int, int, bool>> out;
        for (const auto& w : plan_windows(span, T, overlap).windows) out.emplace_back(w.start, w.end, w.padded);
        return out;
      },
      py::arg("span"), py::arg("T"), py::arg("overlap"), "List of (start, end, padded).");
  m.def(
      "parameter_counts",
      [](const py::object& cfg_in) {
        const RunConfig cfg = config_from(cfg_in);
        const ParameterAudit a = audit_parameters(cfg.unet, cfg.detector_config());
        return py::dict(py::arg("unet") = a.unet, py::arg("detector") = a.detector);
      },
      py::arg("config"));
  m.def(
      "generate_phantom",
      [](std::uint64_t seed, const std::string& severity, int size, int emboli, double noise_sigma) {
        PhantomSpec spec;
        spec.depth = spec.height = spec.width = size;
        spec.seed = seed;
        spec.noise_sigma = noise_sigma;
        spec.severity = severity_from_string(severity);
        if (spec.severity != Severity::none) {
          spec.embolus_count = emboli;
          severity_radius_range(spec.severity, spec.embolus_radius_min, spec.embolus_radius_max);
        }
        const Phantom p = generate_phantom(spec);
        py::dict ann;
        for (const auto& [z, mask] : p.annotation.slices) ann[py::int_(z)] = to_numpy(mask);
        return py::dict(py::arg("volume") = to_numpy(p.volume.voxels), py::arg("embolus_mask") = to_numpy(p.embolus_mask),
                        py::arg("annotation") = ann, py::arg("positive") = p.label.positive,
                        py::arg("severity") = to_string(p.label.severity));
      },
      py::arg("seed") = 0, py::arg("severity") = "none", py::arg("size") = 64, py::arg("emboli") = 2,
      py::arg("noise_sigma") = 20.0, "Synthetic CT phantom as numpy arrays (HU).");
}
