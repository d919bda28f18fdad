// Python surface: the mean-recovery primitives, the continual training
// pipeline, the property suite, and the linear-model theory experiments.
// Tensors cross the boundary as float64 numpy arrays (copied).

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <algorithm>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "confit/bn.hpp"
#include "confit/conv.hpp"
#include "confit/datagen.hpp"
#include "confit/error.hpp"
#include "confit/metrics.hpp"
#include "confit/model.hpp"
#include "confit/pool.hpp"
#include "confit/theory.hpp"
#include "confit/train.hpp"
#include "confit/verify.hpp"

namespace py = pybind11;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

confit::Tensor to_tensor(const Array& arr) {
  std::vector<std::size_t> shape(static_cast<std::size_t>(arr.ndim()));
  for (py::ssize_t i = 0; i < arr.ndim(); ++i) {
    shape[static_cast<std::size_t>(i)] =
        static_cast<std::size_t>(arr.shape(i));
  }
  confit::Tensor t(shape);
  std::copy(arr.data(), arr.data() + arr.size(), t.data());
  return t;
}

py::array_t<double> to_numpy(const confit::Tensor& t) {
  std::vector<py::ssize_t> shape(t.rank());
  for (std::size_t i = 0; i < t.rank(); ++i) {
    shape[i] = static_cast<py::ssize_t>(t.dim(i));
  }
  py::array_t<double> arr(shape);
  std::copy(t.data(), t.data() + t.size(), arr.mutable_data());
  return arr;
}

confit::ConvSpec make_spec(const confit::Tensor& weight, std::size_t stride,
                           std::size_t padding, bool has_bias) {
  if (weight.rank() != 4) {
    throw confit::ShapeError("weight must be (out, in, K, K)");
  }
  confit::ConvSpec spec{weight.dim(0), weight.dim(1), weight.dim(2), stride,
                        padding};
  spec.has_bias = has_bias;
  return spec;
}

py::dict property_to_dict(const confit::verify::PropertyResult& r) {
  py::dict d;
  d["name"] = r.name;
  d["cases"] = r.cases;
  d["failures"] = r.failures;
  d["worst"] = r.worst;
  d["limit"] = r.limit;
  d["passed"] = r.passed();
  return d;
}

py::dict record_to_dict(const confit::theory::BoundRecord& r) {
  py::dict d;
  d["seed"] = r.seed;
  d["flavor"] = confit::theory::start_flavor_to_string(r.flavor);
  d["sigma_k"] = r.sigma_k;
  d["phi"] = r.phi;
  d["eps_hat"] = r.eps_hat;
  d["bound"] = r.bound;
  d["measured_sqrt_loss"] = r.measured_sqrt_loss;
  d["precondition_ok"] = r.precondition_ok;
  d["converged"] = r.converged;
  d["checked"] = r.checked;
  d["satisfied"] = r.satisfied;
  return d;
}

// Dense (T, T) matrix with NaN in the never-measured lower triangle.
py::array_t<double> matrix_to_numpy(const confit::AccuracyMatrix& m) {
  const std::size_t T = m.num_tasks();
  py::array_t<double> arr({static_cast<py::ssize_t>(T),
                           static_cast<py::ssize_t>(T)});
  double* out = arr.mutable_data();
  for (std::size_t i = 0; i < T; ++i) {
    for (std::size_t j = 0; j < T; ++j) {
      out[i * T + j] = (j >= i && m.has(i, j))
                           ? m.get(i, j)
                           : std::numeric_limits<double>::quiet_NaN();
    }
  }
  return arr;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() =
      "Continual fine-tuning laboratory: recoverable normalization "
      "statistics, hierarchical schedules, and the linear-model theory "
      "experiments.";
  m.attr("__version__") = "1.0.0";

  py::register_exception<confit::ConfigError>(m, "ConfigError",
                                              PyExc_ValueError);
  py::register_exception<confit::ShapeError>(m, "ShapeError",
                                             PyExc_ValueError);
  py::register_exception<confit::DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<confit::IoError>(m, "IoError", PyExc_OSError);

  m.def(
      "conv2d",
      [](const Array& x, const Array& w, py::object bias, std::size_t stride,
         std::size_t padding) {
        const confit::Tensor a = to_tensor(x);
        const confit::Tensor weight = to_tensor(w);
        confit::Tensor b;
        const bool has_bias = !bias.is_none();
        if (has_bias) b = to_tensor(bias.cast<Array>());
        const confit::ConvSpec spec = make_spec(weight, stride, padding,
                                                has_bias);
        return to_numpy(confit::conv2d_forward(a, spec, weight,
                                               has_bias ? &b : nullptr));
      },
      py::arg("x"), py::arg("weight"), py::arg("bias") = py::none(),
      py::arg("stride") = 1, py::arg("padding") = 0,
      "2D convolution, NCHW layout.");

  m.def(
      "avg_pool",
      [](const Array& x) { return to_numpy(confit::avg_pool(to_tensor(x))); },
      py::arg("x"), "Per-channel mean over batch and spatial axes.");

  m.def(
      "avg_pool_broadcast",
      [](const Array& x) {
        return to_numpy(confit::avg_pool_dp(to_tensor(x)));
      },
      py::arg("x"), "Per-channel mean broadcast back to the input shape.");

  m.def(
      "polyphase_conv_sum",
      [](const Array& x, const Array& w, std::size_t stride) {
        const confit::Tensor a = to_tensor(x);
        const confit::Tensor weight = to_tensor(w);
        const confit::ConvSpec spec = make_spec(weight, stride, 0, false);
        return to_numpy(confit::polyphase_conv_sum(a, spec, weight));
      },
      py::arg("x"), py::arg("weight"), py::arg("stride"),
      "Stride-m convolution computed as the sum of its m*m phase "
      "convolutions.");

  m.def(
      "recover_mean",
      [](const Array& pre_means, const Array& w, std::size_t in_h,
         std::size_t in_w, std::size_t stride, std::size_t padding,
         py::object bias, const std::string& path) {
        const confit::Tensor weight = to_tensor(w);
        confit::Tensor b;
        const bool has_bias = !bias.is_none();
        if (has_bias) b = to_tensor(bias.cast<Array>());
        const confit::ConvSpec spec = make_spec(weight, stride, padding,
                                                has_bias);

        confit::Tensor means = to_tensor(pre_means);
        if (means.rank() == 1) {
          means = means.reshaped({1, means.dim(0)});
        }
        if (means.rank() != 2 || means.dim(0) != stride * stride ||
            means.dim(1) != spec.in_channels) {
          throw confit::ShapeError(
              "pre_means must be (stride*stride, in_channels)");
        }
        confit::XconvTaskRecord rec = confit::XconvTaskRecord::init(
            spec.out_channels, spec.in_channels, stride);
        for (std::size_t p = 0; p < stride * stride; ++p) {
          for (std::size_t c = 0; c < spec.in_channels; ++c) {
            rec.pre_means[p][c] = means.at2(p, c);
          }
        }
        rec.in_h = in_h;
        rec.in_w = in_w;
        rec.has_spatial = true;

        confit::RecoveryPath rp;
        if (path == "broadcast") {
          rp = confit::RecoveryPath::broadcast;
        } else if (path == "closed_form") {
          rp = confit::RecoveryPath::closed_form;
        } else {
          throw confit::ConfigError("unknown recovery path '" + path + "'");
        }
        return to_numpy(confit::xconv_recover_mean(
            rec, spec, weight, has_bias ? &b : nullptr, rp));
      },
      py::arg("pre_means"), py::arg("weight"), py::arg("in_h"),
      py::arg("in_w"), py::arg("stride") = 1, py::arg("padding") = 0,
      py::arg("bias") = py::none(), py::arg("path") = "broadcast",
      "Post-convolution channel mean recovered from stored pre-convolution "
      "phase means through the given weights.");

  m.def(
      "verify_suite",
      [](std::size_t cases, std::uint64_t seed) {
        const auto results = confit::verify::run_property_suite(cases, seed);
        py::list props;
        for (const auto& r : results) props.append(property_to_dict(r));
        py::dict d;
        d["all_passed"] = confit::verify::all_passed(results);
        d["report"] = confit::verify::format_report(results);
        d["properties"] = props;
        return d;
      },
      py::arg("cases") = 100, py::arg("seed") = 0,
      "Run the numerical property suite.");

  m.def(
      "theory_sweep",
      [](std::size_t k, std::size_t n, std::size_t d, std::size_t instances,
         std::uint64_t seed) {
        const auto records = confit::theory::bound_sweep(k, n, d, instances,
                                                         seed);
        py::list recs;
        std::size_t checked = 0, violations = 0;
        for (const auto& r : records) {
          recs.append(record_to_dict(r));
          checked += r.checked ? 1 : 0;
          violations += (r.checked && !r.satisfied) ? 1 : 0;
        }
        py::dict out;
        out["records"] = recs;
        out["checked"] = checked;
        out["violations"] = violations;
        return out;
      },
      py::arg("k") = 3, py::arg("n") = 10, py::arg("d") = 50,
      py::arg("instances") = 100, py::arg("seed") = 0,
      "Sweep the forgetting lower bound over random two-task instances.");

  m.def(
      "drift_experiment",
      [](std::size_t k, std::size_t n, std::size_t d, std::size_t tasks,
         std::uint64_t seed, bool probe_init, std::uint64_t head_seed) {
        const confit::theory::LinearCLInstance inst =
            confit::theory::make_realizable_instance(k, n, d, tasks, seed);
        const confit::theory::DriftReport rep =
            confit::theory::drift_experiment(inst, probe_init, head_seed);
        py::dict out;
        out["drift"] = rep.drift;
        out["worst_prev_loss"] = rep.worst_prev_loss;
        out["max_drift"] = rep.max_drift;
        out["max_prev_loss"] = rep.max_prev_loss;
        out["all_converged"] = rep.all_converged;
        return out;
      },
      py::arg("k") = 3, py::arg("n") = 10, py::arg("d") = 50,
      py::arg("tasks") = 5, py::arg("seed") = 0,
      py::arg("probe_init") = true, py::arg("head_seed") = 0,
      "Feature-extractor drift across a realizable task sequence, with the "
      "head started from a linear probe or at random.");

  m.def(
      "continual_run",
      [](std::size_t num_tasks, std::size_t classes_per_task,
         std::size_t train_per_class, std::size_t test_per_class,
         std::size_t height, std::size_t width, std::uint64_t data_seed,
         const std::string& schedule, const std::string& bn_mode, double lr,
         std::size_t batch_size, std::size_t epochs, std::uint64_t seed,
         const std::string& moments, double noise_scale,
         double task_offset_scale) {
        confit::TaskSequenceSpec dspec;
        dspec.num_tasks = num_tasks;
        dspec.classes_per_task = classes_per_task;
        dspec.train_per_class = train_per_class;
        dspec.test_per_class = test_per_class;
        dspec.height = height;
        dspec.width = width;
        dspec.seed = data_seed;
        if (noise_scale >= 0) dspec.noise_scale = noise_scale;
        if (task_offset_scale >= 0) dspec.task_offset_scale = task_offset_scale;
        dspec.validate();
        const confit::TaskSequence seq = confit::generate(dspec);

        confit::TrainConfig cfg;
        cfg.lr = lr;
        cfg.batch_size = batch_size;
        cfg.seed = seed;
        cfg.schedule.total_epochs = epochs;
        cfg.schedule.mode = confit::schedule_mode_from_string(schedule);
        cfg.norm_mode = confit::norm_mode_from_string(bn_mode);
        cfg.eval_moments = confit::moment_mode_from_string(moments);
        cfg.validate();

        const confit::ModelSpec mspec = confit::ModelSpec::synth_default(
            dspec.channels, dspec.height, dspec.width,
            dspec.classes_per_task);
        const confit::RunResult res = confit::continual_run(seq, mspec, cfg);

        py::list deltas;
        for (const confit::DeltaRow& row : res.deltas) {
          py::dict r;
          r["layer"] = row.layer;
          r["d0"] = row.d0;
          r["d1"] = row.d1;
          r["d2"] = row.d2;
          deltas.append(r);
        }
        py::list logs;
        for (const confit::TrainLog& log : res.logs) {
          py::dict l;
          l["task_id"] = log.task_id;
          l["stage_epochs"] = log.stage_epochs;
          l["epoch_losses"] = log.epoch_losses;
          logs.append(l);
        }
        py::dict out;
        out["acc"] = res.acc_value;
        out["fgt"] = res.fgt_value.value;
        out["fgt_defined"] = res.fgt_value.defined;
        out["matrix"] = matrix_to_numpy(res.matrix);
        out["deltas"] = deltas;
        out["logs"] = logs;
        return out;
      },
      py::arg("num_tasks") = 5, py::arg("classes_per_task") = 4,
      py::arg("train_per_class") = 100, py::arg("test_per_class") = 50,
      py::arg("height") = 16, py::arg("width") = 16, py::arg("data_seed") = 0,
      py::arg("schedule") = "hierarchical", py::arg("bn_mode") = "xconv",
      py::arg("lr") = 0.01, py::arg("batch_size") = 16,
      py::arg("epochs") = 10, py::arg("seed") = 0,
      py::arg("moments") = "running", py::arg("noise_scale") = -1.0,
      py::arg("task_offset_scale") = -1.0,
      "Generate a synthetic task sequence and run the continual pipeline; "
      "returns metrics, the accuracy matrix, and the shift diagnostics. "
      "Negative noise/offset scales keep the generator defaults.");
}
