#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "eptq/bn_fold.hpp"
#include "eptq/calibration.hpp"
#include "eptq/hessian.hpp"
#include "eptq/model_io.hpp"
#include "eptq/optimizer.hpp"
#include "eptq/pipeline.hpp"
#include "eptq/tape.hpp"

namespace py = pybind11;
using namespace eptq;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  std::vector<std::size_t> shape(static_cast<std::size_t>(a.ndim()));
  for (py::ssize_t i = 0; i < a.ndim(); ++i) {
    shape[static_cast<std::size_t>(i)] = static_cast<std::size_t>(a.shape(i));
  }
  std::vector<double> data(a.data(), a.data() + a.size());
  return Tensor(std::move(shape), std::move(data));
}

py::array_t<double> array_from_tensor(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data(), t.data() + t.size(), out.mutable_data());
  return out;
}

py::array_t<double> array_from_matrix(const Matrix& m) {
  py::array_t<double> out({static_cast<py::ssize_t>(m.rows), static_cast<py::ssize_t>(m.cols)});
  std::copy(m.a.begin(), m.a.end(), out.mutable_data());
  return out;
}

WeightQuantParams make_weight_params(const std::vector<double>& thresholds, int bits,
                                     const py::object& rounding, bool hard) {
  WeightQuantParams p;
  p.bits = bits;
  p.thresholds = thresholds;
  p.hard = hard;
  if (!rounding.is_none()) {
    p.rounding = tensor_from_array(rounding.cast<py::array_t<double>>());
  }
  return p;
}

LossHessianModel make_loss(const std::string& kind, double sigma2) {
  return LossHessianModel{loss_kind_from_name(kind), sigma2};
}

Dataset dataset_from_lists(const std::vector<py::array_t<double>>& inputs) {
  Dataset data;
  for (const auto& a : inputs) data.inputs.push_back(tensor_from_array(a));
  return data;
}

}  // namespace

PYBIND11_MODULE(_eptq, m) {
  m.doc() = "Hessian-guided post-training quantization engine";

  py::class_<LoadedModel>(m, "Model")
      .def_property_readonly("input_shape",
                             [](const LoadedModel& lm) { return lm.graph.input_shape; })
      .def_property_readonly("num_layers",
                             [](const LoadedModel& lm) { return lm.graph.layers.size(); })
      .def_property_readonly("comparison_points",
                             [](const LoadedModel& lm) { return lm.graph.comparison_points; })
      .def_property_readonly("weighted_layers",
                             [](const LoadedModel& lm) { return lm.graph.weighted_layers(); })
      .def_property_readonly("layer_names",
                             [](const LoadedModel& lm) {
                               std::vector<std::string> names;
                               for (const auto& l : lm.graph.layers) names.push_back(l.name);
                               return names;
                             })
      .def_property_readonly("is_quantized",
                             [](const LoadedModel& lm) { return lm.quant.has_value(); })
      .def("layer_weights",
           [](const LoadedModel& lm, int layer) {
             const auto& w = lm.graph.layers.at(static_cast<std::size_t>(layer)).weights;
             if (!w) throw py::value_error("layer has no weights");
             return array_from_tensor(*w);
           })
      .def("forward",
           [](const LoadedModel& lm, const py::array_t<double>& x, bool quantized) {
             const QuantState* q = (quantized && lm.quant.has_value()) ? &*lm.quant : nullptr;
             return array_from_tensor(forward_record(lm.graph, tensor_from_array(x), q).output);
           },
           py::arg("x"), py::arg("quantized") = true)
      .def("activations", [](const LoadedModel& lm, const py::array_t<double>& x) {
        std::map<int, py::array_t<double>> out;
        for (auto& [layer, t] : forward_record(lm.graph, tensor_from_array(x)).activations) {
          out[layer] = array_from_tensor(t);
        }
        return out;
      });

  m.def("load_model", &load_model, py::arg("path"));
  m.def("fold_batchnorm", [](const LoadedModel& lm) {
    LoadedModel out;
    out.graph = fold_batchnorm(lm.graph);
    out.quant = lm.quant;
    return out;
  });
  m.def("load_dataset",
        [](const std::string& path, std::size_t limit) {
          Dataset data = load_dataset(path, limit == 0 ? SIZE_MAX : limit);
          std::vector<py::array_t<double>> inputs;
          for (const Tensor& t : data.inputs) inputs.push_back(array_from_tensor(t));
          return py::make_tuple(inputs, data.labels);
        },
        py::arg("path"), py::arg("limit") = 0);

  // quantizers
  m.def("quantize_weights_nearest",
        [](const py::array_t<double>& w, const std::vector<double>& thresholds, int bits) {
          return array_from_tensor(quantize_weights_nearest(
              tensor_from_array(w), make_weight_params(thresholds, bits, py::none(), false)));
        },
        py::arg("w"), py::arg("thresholds"), py::arg("bits"));
  m.def("quantize_weights_soft",
        [](const py::array_t<double>& w, const std::vector<double>& thresholds, int bits,
           const py::array_t<double>& rounding, bool hard) {
          return array_from_tensor(quantize_weights_soft(
              tensor_from_array(w),
              make_weight_params(thresholds, bits, py::cast<py::object>(rounding), hard), hard));
        },
        py::arg("w"), py::arg("thresholds"), py::arg("bits"), py::arg("rounding"),
        py::arg("hard") = false);
  m.def("init_rounding",
        [](const py::array_t<double>& w, const std::vector<double>& thresholds, int bits) {
          return array_from_tensor(init_rounding_from_weights(
              tensor_from_array(w), make_weight_params(thresholds, bits, py::none(), false)));
        },
        py::arg("w"), py::arg("thresholds"), py::arg("bits"));
  m.def("quantize_activation",
        [](const py::array_t<double>& z, double lo, double hi, int bits) {
          return array_from_tensor(
              quantize_activation(tensor_from_array(z), ActQuantParams{bits, lo, hi}));
        },
        py::arg("z"), py::arg("lo"), py::arg("hi"), py::arg("bits"));
  m.def("gradual_mix",
        [](const py::array_t<double>& z_float, const py::array_t<double>& z_quant, double p) {
          return array_from_tensor(
              gradual_mix(tensor_from_array(z_float), tensor_from_array(z_quant), p));
        },
        py::arg("z_float"), py::arg("z_quant"), py::arg("p"));
  m.def("schedule_p",
        [](double p0, int n_decay, int iteration) {
          return schedule_p(GradualSchedule{p0, n_decay}, iteration);
        },
        py::arg("p0"), py::arg("n_decay"), py::arg("iteration"));

  // hessian machinery
  m.def("loss_hessian",
        [](const std::string& kind, const py::array_t<double>& r, double sigma2) {
          return array_from_matrix(loss_hessian(make_loss(kind, sigma2), tensor_from_array(r)));
        },
        py::arg("kind"), py::arg("r"), py::arg("sigma2") = 1.0);
  m.def("loss_bound",
        [](const std::string& kind, std::size_t output_dim, double sigma2) {
          return loss_bound(make_loss(kind, sigma2), output_dim);
        },
        py::arg("kind"), py::arg("output_dim"), py::arg("sigma2") = 1.0);
  m.def("lfh_weight_diag",
        [](const LoadedModel& lm, const std::vector<py::array_t<double>>& inputs, int layer,
           int probes, std::uint64_t seed) {
          return lfh_weight_diag(lm.graph, dataset_from_lists(inputs), layer, probes, seed);
        },
        py::arg("model"), py::arg("inputs"), py::arg("layer"), py::arg("probes") = 50,
        py::arg("seed") = 0);
  m.def("sla_scores",
        [](const LoadedModel& lm, const std::vector<py::array_t<double>>& inputs, int probes,
           std::uint64_t seed) {
          const auto raw = sla_scores(lm.graph, dataset_from_lists(inputs), probes, seed);
          py::dict out;
          for (const auto& [key, u] : raw) out[py::make_tuple(key.first, key.second)] = u;
          return out;
        },
        py::arg("model"), py::arg("inputs"), py::arg("probes") = 50, py::arg("seed") = 0);
  m.def("exact_gn_hessian",
        [](const LoadedModel& lm, const py::array_t<double>& x, int layer,
           const std::string& kind, double sigma2) {
          return array_from_matrix(exact_gn_hessian(
              lm.graph, tensor_from_array(x), TargetRef::weight(layer), make_loss(kind, sigma2)));
        },
        py::arg("model"), py::arg("x"), py::arg("layer"), py::arg("kind") = "ce_softmax",
        py::arg("sigma2") = 1.0);
  m.def("finite_diff_jacobian",
        [](const LoadedModel& lm, const py::array_t<double>& x, int layer, double step) {
          return array_from_matrix(finite_diff_jacobian(lm.graph, tensor_from_array(x),
                                                        TargetRef::weight(layer), step));
        },
        py::arg("model"), py::arg("x"), py::arg("layer"), py::arg("step") = 1e-5);
  m.def("log_normalize", &log_normalize, py::arg("scores"));
  m.def("spearman", &spearman, py::arg("a"), py::arg("b"));

  // calibration
  m.def("hmse",
        [](const py::array_t<double>& w, const py::array_t<double>& w_q,
           const std::vector<double>& h) {
          return hmse(tensor_from_array(w), tensor_from_array(w_q), h);
        },
        py::arg("w"), py::arg("w_q"), py::arg("h"));
  m.def("select_threshold",
        [](const py::array_t<double>& w, const py::object& h, int bits, int n_steps) {
          ThresholdSearchSpec spec;
          spec.n_steps = n_steps;
          std::vector<double> h_vec;
          const std::vector<double>* hp = nullptr;
          if (!h.is_none()) {
            h_vec = h.cast<std::vector<double>>();
            hp = &h_vec;
            spec.metric = ThresholdMetric::HMSE;
          } else {
            spec.metric = ThresholdMetric::MSE;
          }
          const auto sel = select_threshold(tensor_from_array(w), hp, bits, spec);
          return py::make_tuple(sel.thresholds, sel.degenerate_channels);
        },
        py::arg("w"), py::arg("h") = py::none(), py::arg("bits") = 8, py::arg("n_steps") = 96);
  m.def("select_activation_range",
        [](const std::vector<py::array_t<double>>& samples, int bits, int n_steps) {
          std::vector<Tensor> tensors;
          for (const auto& a : samples) tensors.push_back(tensor_from_array(a));
          const auto sel = select_activation_range(tensors, bits, n_steps);
          return py::make_tuple(sel.params.lo, sel.params.hi, sel.degenerate);
        },
        py::arg("samples"), py::arg("bits") = 8, py::arg("n_steps") = 96);

  // pipeline commands
  m.def("quantize",
        [](const std::string& model, const std::string& data, const std::string& out_dir,
           const py::kwargs& kwargs) {
          RunConfig cfg;
          cfg.model_path = model;
          cfg.data_path = data;
          cfg.out_dir = out_dir;
          for (const auto& item : kwargs) {
            apply_config_line(cfg, py::str(item.first).cast<std::string>(),
                              py::str(item.second).cast<std::string>());
          }
          const auto artifacts = run_quantize(cfg);
          py::dict out;
          out["model_json"] = artifacts.model_json;
          out["metrics_json"] = artifacts.metrics_json;
          out["train_log"] = artifacts.train_log;
          out["initial_distill_loss"] = artifacts.initial_distill_loss;
          out["final_distill_loss"] = artifacts.final_distill_loss;
          out["diverged"] = artifacts.diverged;
          return out;
        },
        py::arg("model"), py::arg("data"), py::arg("out_dir") = "eptq-out");
  m.def("evaluate",
        [](const std::string& model, const std::string& data, const std::string& reference,
           const std::string& loss, std::size_t limit) {
          RunConfig cfg;
          cfg.model_path = model;
          cfg.data_path = data;
          cfg.reference_path = reference;
          cfg.eval_loss = loss;
          cfg.eval_limit = limit;
          const auto report = run_evaluate(cfg);
          py::dict out;
          out["samples"] = report.samples;
          if (report.accuracy) out["accuracy"] = *report.accuracy;
          if (report.mean_loss) out["mean_loss"] = *report.mean_loss;
          py::dict pp;
          for (const auto& [layer, d] : report.per_point_mse) pp[py::int_(layer)] = d;
          out["per_point_mse"] = pp;
          return out;
        },
        py::arg("model"), py::arg("data"), py::arg("reference") = "", py::arg("loss") = "auto",
        py::arg("limit") = 0);
  m.def("hessian_report",
        [](const std::string& model, const std::string& data, int probes, std::uint64_t seed,
           bool with_oracle) {
          RunConfig cfg;
          cfg.model_path = model;
          cfg.data_path = data;
          cfg.eptq.hessian_probes = probes;
          cfg.eptq.seed = seed;
          cfg.with_oracle = with_oracle;
          return run_hessian_report(cfg).to_json();
        },
        py::arg("model"), py::arg("data"), py::arg("probes") = 50, py::arg("seed") = 0,
        py::arg("with_oracle") = false);
}
