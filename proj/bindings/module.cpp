#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

#include "deqfuse/checkpoint.hpp"
#include "deqfuse/gradcheck.hpp"

namespace py = pybind11;
using namespace deqfuse;

namespace {

Tensor2 tensor_from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& arr) {
  if (arr.ndim() != 2) throw ShapeError("expected a 2-D array");
  Tensor2 t(static_cast<std::size_t>(arr.shape(0)), static_cast<std::size_t>(arr.shape(1)));
  std::memcpy(t.data(), arr.data(), t.size() * sizeof(double));
  return t;
}

py::array_t<double> tensor_to_numpy(const Tensor2& t) {
  py::array_t<double> arr({t.rows(), t.cols()});
  std::memcpy(arr.mutable_data(), t.data(), t.size() * sizeof(double));
  return arr;
}

ModalityBundle bundle_from_list(const std::vector<py::array_t<double, py::array::c_style | py::array::forcecast>>& xs) {
  ModalityBundle x;
  for (const auto& arr : xs) x.features.push_back(tensor_from_numpy(arr));
  x.validate();
  return x;
}

SolverConfig solver_config(const std::string& method, double tol, std::size_t max_steps,
                           std::size_t memory, double beta, double ridge_lambda,
                           bool early_stop) {
  SolverConfig cfg;
  cfg.method = method == "naive" ? SolverMethod::kNaive : SolverMethod::kAnderson;
  if (method != "naive" && method != "anderson") {
    throw ConfigError("solver must be 'naive' or 'anderson'");
  }
  cfg.tol = tol;
  cfg.max_steps = max_steps;
  cfg.anderson_memory = memory;
  cfg.beta = beta;
  cfg.ridge_lambda = ridge_lambda;
  cfg.early_stop = early_stop;
  return cfg;
}

py::dict params_to_dict(const FusionParams& p) {
  py::dict out;
  visit_params(p, [&out](const std::string& name, const Tensor2& t) {
    out[py::str(name)] = tensor_to_numpy(t);
  });
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "deep-equilibrium multimodal fusion core";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_ArithmeticError);

  py::class_<FusionParams>(m, "FusionParams")
      .def_property_readonly("width", [](const FusionParams& p) { return p.width; })
      .def_property_readonly("n_modalities",
                             [](const FusionParams& p) { return p.n_modalities; })
      .def_property_readonly("gate_mode",
                             [](const FusionParams& p) { return gate_mode_name(p.gate_mode); })
      .def("to_dict", &params_to_dict)
      .def("save", [](const FusionParams& p, const std::string& path, std::uint64_t seed) {
        Checkpoint ckpt;
        ckpt.seed = seed;
        ckpt.params = p;
        save_checkpoint(path, ckpt);
      }, py::arg("path"), py::arg("seed") = 0);

  m.def("init_params",
        [](std::uint64_t seed, std::size_t width, std::size_t n_modalities,
           std::size_t groups, const std::string& gate_mode) {
          RngState rng(seed);
          return init_fusion_params(rng, width, n_modalities, groups,
                                    gate_mode_from_name(gate_mode));
        },
        py::arg("seed"), py::arg("width"), py::arg("n_modalities"),
        py::arg("groups") = 1, py::arg("gate_mode") = "affine");

  m.def("load_params", [](const std::string& path) { return load_checkpoint(path).params; });

  m.def("rel_diff_norm",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& b) {
          return rel_diff_norm(tensor_from_numpy(a), tensor_from_numpy(b));
        });

  m.def("solve",
        [](const FusionParams& params,
           const std::vector<py::array_t<double, py::array::c_style | py::array::forcecast>>& xs,
           const std::string& method, double tol, std::size_t max_steps, std::size_t memory,
           double beta, double ridge_lambda, bool early_stop) {
          const ModalityBundle x = bundle_from_list(xs);
          const SolverConfig cfg =
              solver_config(method, tol, max_steps, memory, beta, ridge_lambda, early_stop);
          const EquilibriumState eq = solve_equilibrium(x, params, cfg);
          py::list z_list;
          for (const Tensor2& z : eq.state.z) z_list.append(tensor_to_numpy(z));
          py::dict out;
          out["z"] = z_list;
          out["z_fuse"] = tensor_to_numpy(eq.state.z_fuse);
          out["trace"] = eq.trace.rel_diffs;
          out["converged"] = eq.trace.converged;
          out["steps"] = eq.trace.steps_taken;
          return out;
        },
        py::arg("params"), py::arg("x"), py::arg("method") = "anderson",
        py::arg("tol") = 1e-4, py::arg("max_steps") = 100, py::arg("memory") = 5,
        py::arg("beta") = 1.0, py::arg("ridge_lambda") = 1e-4, py::arg("early_stop") = true);

  m.def("backward",
        [](const FusionParams& params,
           const std::vector<py::array_t<double, py::array::c_style | py::array::forcecast>>& xs,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& dl_dzfuse,
           double forward_tol) {
          const ModalityBundle x = bundle_from_list(xs);
          SolverConfig cfg;
          cfg.tol = forward_tol;
          cfg.max_steps = 500;
          const EquilibriumState eq = solve_equilibrium(x, params, cfg);
          const GradientBundle g = backward(eq, x, params, tensor_from_numpy(dl_dzfuse));
          py::dict out;
          visit_params(g.params, [&out](const std::string& name, const Tensor2& t) {
            out[py::str(name)] = tensor_to_numpy(t);
          });
          py::list dx;
          for (const Tensor2& t : g.inputs) dx.append(tensor_to_numpy(t));
          out["x"] = dx;
          return out;
        },
        py::arg("params"), py::arg("x"), py::arg("dl_dzfuse"), py::arg("forward_tol") = 1e-8);

  m.def("jacobian_reg_estimate",
        [](const FusionParams& params,
           const std::vector<py::array_t<double, py::array::c_style | py::array::forcecast>>& xs,
           std::size_t probes, std::uint64_t seed, double forward_tol) {
          const ModalityBundle x = bundle_from_list(xs);
          SolverConfig cfg;
          cfg.tol = forward_tol;
          cfg.max_steps = 500;
          const EquilibriumState eq = solve_equilibrium(x, params, cfg);
          RngState rng(seed);
          return jacobian_reg(params, x, eq, rng, probes);
        },
        py::arg("params"), py::arg("x"), py::arg("probes") = 100, py::arg("seed") = 0,
        py::arg("forward_tol") = 1e-8);

  m.def("gen_signproduct",
        [](std::uint64_t seed, std::size_t n_train, std::size_t n_test, std::size_t width,
           double sigma) {
          SyntheticTaskSpec spec;
          spec.width = width;
          spec.sigma = sigma;
          spec.n_train = n_train;
          spec.n_test = n_test;
          RngState rng(seed);
          const SignProductData data = gen_signproduct(spec, rng);
          auto split = [](const Dataset& d) {
            py::dict out;
            py::list xs;
            for (const Tensor2& f : d.x.features) xs.append(tensor_to_numpy(f));
            out["x"] = xs;
            out["labels"] = d.labels;
            return out;
          };
          py::dict out;
          out["train"] = split(data.train);
          out["test"] = split(data.test);
          return out;
        },
        py::arg("seed"), py::arg("n_train") = 2000, py::arg("n_test") = 1000,
        py::arg("width") = 16, py::arg("sigma") = 0.3);

  m.def("metrics",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& logits,
           const std::vector<int>& labels) {
          const MetricsResult r = compute_metrics(tensor_from_numpy(logits), labels);
          return py::make_tuple(r.accuracy, r.macro_f1, r.weighted_f1);
        });

  m.def("gradcheck",
        [](std::size_t width, std::size_t n_modalities, std::uint64_t seed) {
          GradCheckOptions opts;
          opts.width = width;
          opts.n_modalities = n_modalities;
          opts.seed = seed;
          const GradCheckReport report = run_gradcheck(opts);
          py::dict out;
          for (const GradCheckGroup& g : report.groups) out[py::str(g.name)] = g.max_rel_err;
          out["unrolled_vs_implicit"] = report.unrolled_deviation;
          return out;
        },
        py::arg("width") = 6, py::arg("n_modalities") = 2, py::arg("seed") = 0);

  m.def("train_signproduct",
        [](const std::string& variant, std::uint64_t seed, std::size_t epochs,
           std::size_t width, double lr, double gamma, double sigma, std::size_t n_train,
           std::size_t n_test, std::size_t batch_size) {
          SyntheticTaskSpec spec;
          spec.width = width;
          spec.sigma = sigma;
          spec.n_train = n_train;
          spec.n_test = n_test;
          RngState data_rng(seed ^ 0x5d7a9f4b2c6e31ULL);
          const SignProductData data = gen_signproduct(spec, data_rng);
          TrainConfig cfg;
          cfg.epochs = epochs;
          cfg.batch_size = batch_size;
          cfg.lr = lr;
          cfg.jacobian_reg_weight = gamma;
          cfg.seed = seed;
          cfg.variant = variant_from_name(variant);
          const TrainResult r = train(data.train, data.test, cfg);
          py::list history;
          for (const EpochStats& e : r.history) {
            py::dict row;
            row["epoch"] = e.epoch;
            row["train_loss"] = e.train_loss;
            row["test_acc"] = e.test_accuracy;
            row["macro_f1"] = e.macro_f1;
            row["weighted_f1"] = e.weighted_f1;
            history.append(row);
          }
          py::dict out;
          out["history"] = history;
          out["params"] = r.params;
          return out;
        },
        py::arg("variant") = "full", py::arg("seed") = 0, py::arg("epochs") = 30,
        py::arg("width") = 16, py::arg("lr") = 1e-3, py::arg("gamma") = 0.5,
        py::arg("sigma") = 0.3, py::arg("n_train") = 2000, py::arg("n_test") = 1000,
        py::arg("batch_size") = 32);
}
