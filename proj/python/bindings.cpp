#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>

#include "merlot/harness.hpp"

namespace py = pybind11;
using namespace merlot;
namespace hs = merlot::harness;
namespace t1 = merlot::task1d;
namespace mz = merlot::maze;
namespace md = merlot::model;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& arr,
                         std::size_t expect_cols) {
  if (arr.ndim() == 1) {
    if (expect_cols != 1) throw ShapeError("expected a 2-d array");
    std::vector<double> v(arr.data(), arr.data() + arr.size());
    return Tensor({static_cast<std::size_t>(arr.shape(0)), 1}, std::move(v));
  }
  if (arr.ndim() != 2 || static_cast<std::size_t>(arr.shape(1)) != expect_cols)
    throw ShapeError("expected an array with " + std::to_string(expect_cols) + " columns");
  std::vector<double> v(arr.data(), arr.data() + arr.size());
  return Tensor({static_cast<std::size_t>(arr.shape(0)), expect_cols}, std::move(v));
}

py::array_t<double> array_from(const std::vector<double>& v, std::vector<py::ssize_t> shape) {
  py::array_t<double> out(shape);
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

struct PyModel {
  md::Model model;

  static PyModel build(const std::string& preset, std::size_t d_x, std::size_t d_y,
                       std::size_t d_r, std::size_t heads, std::size_t adapt_steps, double alpha,
                       bool gaussian, std::uint64_t seed) {
    md::Config cfg = md::preset(preset);
    cfg.d_x = d_x;
    cfg.d_y = d_y;
    cfg.d_r = d_r;
    cfg.heads = heads;
    cfg.steps = adapt_steps;
    cfg.alpha = alpha;
    cfg.gaussian_output = gaussian;
    return PyModel{md::build_model(cfg, seed)};
  }

  static PyModel load(const std::string& path) {
    return PyModel{hs::model_from_checkpoint(hs::load_checkpoint(path))};
  }

  py::dict predict(py::array_t<double> ctx_x, py::array_t<double> ctx_y,
                   py::array_t<double> query_x) const {
    md::Task task;
    task.ctx_x = tensor_from_array(ctx_x, model.cfg.d_x);
    task.ctx_y = tensor_from_array(ctx_y, model.cfg.d_y);
    task.query_x = tensor_from_array(query_x, model.cfg.d_x);
    task.query_y = Tensor::zeros({task.query_x.rows(), model.cfg.d_y});
    const auto mixtures = md::predict(model, task);
    const auto n = static_cast<py::ssize_t>(mixtures.size());
    const auto L = static_cast<py::ssize_t>(mixtures.empty() ? 0 : mixtures[0].weights.size());
    const auto d_y = static_cast<py::ssize_t>(model.cfg.d_y);
    py::array_t<double> weights({n, L});
    py::array_t<double> mu({n, L, d_y});
    py::array_t<double> sigma({n, L, d_y});
    const bool gaussian = model.cfg.gaussian_output;
    for (py::ssize_t j = 0; j < n; ++j)
      for (py::ssize_t i = 0; i < L; ++i) {
        weights.mutable_at(j, i) = mixtures[j].weights[i];
        for (py::ssize_t d = 0; d < d_y; ++d) {
          mu.mutable_at(j, i, d) = mixtures[j].mu[i][d];
          sigma.mutable_at(j, i, d) = gaussian ? mixtures[j].sigma[i][d] : 0.0;
        }
      }
    py::dict out;
    out["weights"] = weights;
    out["mu"] = mu;
    if (gaussian) out["sigma"] = sigma;
    return out;
  }

  double nll(py::array_t<double> ctx_x, py::array_t<double> ctx_y, py::array_t<double> query_x,
             py::array_t<double> query_y) const {
    md::Task task;
    task.ctx_x = tensor_from_array(ctx_x, model.cfg.d_x);
    task.ctx_y = tensor_from_array(ctx_y, model.cfg.d_y);
    task.query_x = tensor_from_array(query_x, model.cfg.d_x);
    task.query_y = tensor_from_array(query_y, model.cfg.d_y);
    const auto mixtures = md::predict(model, task);
    double total = 0.0;
    for (std::size_t j = 0; j < mixtures.size(); ++j) {
      std::vector<double> y(model.cfg.d_y);
      for (std::size_t d = 0; d < model.cfg.d_y; ++d) y[d] = task.query_y.at(j, d);
      total += md::nll_value(mixtures[j], y);
    }
    return total / static_cast<double>(mixtures.size());
  }

  py::array_t<double> point_predictions(py::array_t<double> ctx_x, py::array_t<double> ctx_y,
                                        py::array_t<double> query_x, std::size_t n_samples,
                                        std::uint64_t seed) const {
    md::Task task;
    task.ctx_x = tensor_from_array(ctx_x, model.cfg.d_x);
    task.ctx_y = tensor_from_array(ctx_y, model.cfg.d_y);
    task.query_x = tensor_from_array(query_x, model.cfg.d_x);
    task.query_y = Tensor::zeros({task.query_x.rows(), model.cfg.d_y});
    const auto mixtures = md::predict(model, task);
    Rng rng(seed);
    py::array_t<double> out({static_cast<py::ssize_t>(mixtures.size()),
                             static_cast<py::ssize_t>(model.cfg.d_y)});
    for (std::size_t j = 0; j < mixtures.size(); ++j) {
      const auto point = md::point_prediction(mixtures[j], n_samples, rng);
      for (std::size_t d = 0; d < model.cfg.d_y; ++d)
        out.mutable_at(static_cast<py::ssize_t>(j), static_cast<py::ssize_t>(d)) = point[d];
    }
    return out;
  }

  std::size_t param_count() const { return md::param_count(model); }
  std::string preset_name() const { return model.cfg.preset_name(); }
};

py::dict task_to_dict(const t1::RegressionTask& task) {
  py::dict out;
  out["id"] = task.id;
  out["split"] = t1::split_name(task.split);
  out["protocol"] = t1::protocol_name(task.protocol);
  out["ctx_x"] = array_from(task.ctx_x, {static_cast<py::ssize_t>(task.ctx_x.size())});
  out["ctx_y"] = array_from(task.ctx_y, {static_cast<py::ssize_t>(task.ctx_y.size())});
  out["query_x"] = array_from(task.query_x, {static_cast<py::ssize_t>(task.query_x.size())});
  out["query_y"] = array_from(task.query_y, {static_cast<py::ssize_t>(task.query_y.size())});
  return out;
}

}  // namespace

PYBIND11_MODULE(_merlot, m) {
  m.doc() = "Local nonparametric meta-regression: models, task generators and evaluation";
  m.attr("__version__") = "0.1.0";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_IOError);

  py::class_<PyModel>(m, "Model")
      .def_static("build", &PyModel::build, py::arg("preset") = "merlot", py::arg("d_x") = 1,
                  py::arg("d_y") = 1, py::arg("d_r") = 128, py::arg("heads") = 8,
                  py::arg("adapt_steps") = 3, py::arg("alpha") = 0.01,
                  py::arg("gaussian") = true, py::arg("seed") = 0)
      .def_static("load", &PyModel::load, py::arg("path"))
      .def("predict", &PyModel::predict, py::arg("ctx_x"), py::arg("ctx_y"), py::arg("query_x"),
           "Per-query mixture weights, means and scales")
      .def("nll", &PyModel::nll, py::arg("ctx_x"), py::arg("ctx_y"), py::arg("query_x"),
           py::arg("query_y"), "Mean query negative log-likelihood")
      .def("point_predictions", &PyModel::point_predictions, py::arg("ctx_x"), py::arg("ctx_y"),
           py::arg("query_x"), py::arg("n_samples") = 30, py::arg("seed") = 0)
      .def("param_count", &PyModel::param_count)
      .def("preset_name", &PyModel::preset_name);

  m.def(
      "sample_task_1d",
      [](const std::string& split, const std::string& protocol, std::size_t context_size,
         std::uint64_t seed) {
        Rng rng(seed);
        t1::RegressionTask task;
        if (t1::protocol_from_name(protocol) == t1::Protocol::kRangeShift)
          task = t1::sample_range_shift_task(t1::split_from_name(split), rng);
        else
          task = t1::sample_scale_shift_task(context_size, rng);
        return task_to_dict(task);
      },
      py::arg("split") = "train", py::arg("protocol") = "range_shift",
      py::arg("context_size") = 10, py::arg("seed") = 0);

  m.def(
      "train_1d",
      [](const std::string& model, std::size_t steps, std::size_t batch_size, std::uint64_t seed,
         std::size_t d_r, std::size_t heads, std::size_t adapt_steps, double outer_lr,
         const std::string& split, const std::string& protocol, std::size_t workers) {
        hs::TrainConfig cfg;
        cfg.model = model;
        cfg.steps = steps;
        cfg.batch_size = batch_size;
        cfg.seed = seed;
        cfg.d_r = d_r;
        cfg.heads = heads;
        cfg.adapt_steps = adapt_steps;
        cfg.outer_lr = outer_lr;
        cfg.split = split;
        cfg.protocol = protocol;
        auto result = hs::train(cfg, workers);
        py::dict out;
        out["model"] = PyModel{std::move(result.model)};
        out["loss_trace"] = array_from(result.loss_trace,
                                       {static_cast<py::ssize_t>(result.loss_trace.size())});
        return out;
      },
      py::arg("model") = "merlot", py::arg("steps") = 100, py::arg("batch_size") = 16,
      py::arg("seed") = 0, py::arg("d_r") = 16, py::arg("heads") = 4, py::arg("adapt_steps") = 3,
      py::arg("outer_lr") = 5e-5, py::arg("split") = "train",
      py::arg("protocol") = "range_shift", py::arg("workers") = 1);

  m.def(
      "evaluate_1d",
      [](const PyModel& model, const std::string& split, const std::string& protocol,
         std::size_t n_tasks, std::size_t context_size, std::uint64_t seed, std::size_t workers) {
        const auto report =
            hs::evaluate_1d(model.model, t1::split_from_name(split),
                            t1::protocol_from_name(protocol), n_tasks, context_size, seed, workers);
        std::vector<double> nll, rmse;
        for (const auto& row : report.rows) {
          nll.push_back(row.nll);
          rmse.push_back(row.rmse);
        }
        py::dict out;
        out["mean_nll"] = report.mean_nll;
        out["mean_rmse"] = report.mean_rmse;
        out["nll"] = array_from(nll, {static_cast<py::ssize_t>(nll.size())});
        out["rmse"] = array_from(rmse, {static_cast<py::ssize_t>(rmse.size())});
        return out;
      },
      py::arg("model"), py::arg("split") = "interpolation", py::arg("protocol") = "range_shift",
      py::arg("n_tasks") = 100, py::arg("context_size") = 0, py::arg("seed") = 0,
      py::arg("workers") = 1);

  m.def(
      "gen_maze_dataset",
      [](const std::string& path, std::size_t mazes, std::size_t episodes, std::size_t length,
         std::uint64_t seed) {
        Rng rng(seed);
        mz::save_dataset(path, mz::gen_dataset(mazes, episodes, length, rng));
      },
      py::arg("path"), py::arg("mazes") = 10, py::arg("episodes") = 10, py::arg("length") = 60,
      py::arg("seed") = 0);

  m.def(
      "maze_rollout_rmse",
      [](const std::optional<PyModel>& model, const std::string& dataset_path,
         std::size_t n_mazes, std::size_t horizon, std::uint64_t seed,
         const std::string& baseline) {
        mz::RolloutOptions opts;
        opts.n_mazes = n_mazes;
        opts.horizon = horizon;
        opts.seed = seed;
        if (model) {
          const mz::Dataset data = mz::load_dataset(dataset_path);
          mz::ModelDynamics dyn(model->model, data.x_std, data.y_std);
          return mz::rollout_rmse(dyn, opts);
        }
        if (baseline == "oracle") {
          mz::OracleDynamics dyn;
          return mz::rollout_rmse(dyn, opts);
        }
        mz::ZeroDynamics dyn;
        return mz::rollout_rmse(dyn, opts);
      },
      py::arg("model") = py::none(), py::arg("dataset_path") = "", py::arg("n_mazes") = 10,
      py::arg("horizon") = 15, py::arg("seed") = 0, py::arg("baseline") = "zero");

  m.def(
      "maze_wall_accuracy",
      [](const std::optional<PyModel>& model, const std::string& dataset_path,
         std::size_t n_mazes, std::uint64_t seed, const std::string& baseline) {
        mz::WallTestOptions opts;
        opts.n_mazes = n_mazes;
        opts.seed = seed;
        mz::WallTestResult result;
        if (model) {
          const mz::Dataset data = mz::load_dataset(dataset_path);
          mz::ModelDynamics dyn(model->model, data.x_std, data.y_std);
          result = mz::wall_inference_test(dyn, opts);
        } else if (baseline == "oracle") {
          mz::OracleDynamics dyn;
          result = mz::wall_inference_test(dyn, opts);
        } else {
          mz::ZeroDynamics dyn;
          result = mz::wall_inference_test(dyn, opts);
        }
        py::dict out;
        out["accuracy"] = result.accuracy;
        out["majority_baseline"] = result.majority_baseline;
        out["tested"] = result.tested;
        return out;
      },
      py::arg("model") = py::none(), py::arg("dataset_path") = "", py::arg("n_mazes") = 5,
      py::arg("seed") = 0, py::arg("baseline") = "oracle");
}
