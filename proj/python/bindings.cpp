#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "geocascade/cascade_tiler.hpp"
#include "geocascade/degradation.hpp"
#include "geocascade/diffusion_math.hpp"
#include "geocascade/engine.hpp"
#include "geocascade/evaluation.hpp"

namespace py = pybind11;
namespace gc = geocascade;

namespace {

using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using U8Array = py::array_t<uint8_t, py::array::c_style | py::array::forcecast>;

torch::Tensor to_torch(const F64Array& a) {
  std::vector<int64_t> shape(a.shape(), a.shape() + a.ndim());
  return torch::from_blob(const_cast<double*>(a.data()), shape, torch::kFloat64).clone();
}

F64Array to_numpy(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat64).contiguous();
  std::vector<py::ssize_t> shape(c.sizes().begin(), c.sizes().end());
  F64Array out(shape);
  std::memcpy(out.mutable_data(), c.data_ptr<double>(), sizeof(double) * static_cast<size_t>(c.numel()));
  return out;
}

cv::Mat to_mat(const U8Array& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw std::invalid_argument("expected an H x W x 3 uint8 array");
  cv::Mat m(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), CV_8UC3,
            const_cast<uint8_t*>(a.data()));
  return m.clone();
}

U8Array from_mat(const cv::Mat& m) {
  U8Array out({static_cast<py::ssize_t>(m.rows), static_cast<py::ssize_t>(m.cols), py::ssize_t{3}});
  cv::Mat dst(m.rows, m.cols, CV_8UC3, out.mutable_data());
  m.copyTo(dst);
  return out;
}

Eigen::VectorXd to_vector(const F64Array& a) {
  return Eigen::Map<const Eigen::VectorXd>(a.data(), a.size());
}

Eigen::MatrixXd to_matrix(const F64Array& a) {
  if (a.ndim() != 2) throw std::invalid_argument("expected a 2-D covariance");
  return Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>>(a.data(), a.shape(0), a.shape(1));
}

}  // namespace

PYBIND11_MODULE(geocascade_core, m) {
  m.doc() = "Native core of geocascade: diffusion math, tiling, degradation and metrics.";

  py::class_<gc::NoiseSchedule>(m, "NoiseSchedule")
      .def(py::init<std::vector<double>>(), py::arg("betas"))
      .def_property_readonly("T", &gc::NoiseSchedule::T)
      .def("beta", &gc::NoiseSchedule::beta)
      .def("alpha_cum", &gc::NoiseSchedule::alpha_cum)
      .def("posterior_var", &gc::NoiseSchedule::posterior_var)
      .def("sigma2", &gc::NoiseSchedule::sigma2)
      .def("lam", &gc::NoiseSchedule::lambda)
      .def("snr", &gc::NoiseSchedule::snr);
  m.def("make_linear_schedule", &gc::make_linear_schedule, py::arg("T") = 1000,
        py::arg("beta_min") = 0.0015, py::arg("beta_max") = 0.0155);
  m.def("ddim_timesteps", &gc::ddim_timesteps);
  m.def("ddim_sigma", &gc::ddim_sigma, py::arg("t"), py::arg("t_prev"), py::arg("eta"), py::arg("sched"));
  m.def(
      "p2_weight",
      [](int64_t t, const gc::NoiseSchedule& s, double k, double gamma) {
        return gc::p2_weight(t, s, {k, gamma});
      },
      py::arg("t"), py::arg("sched"), py::arg("k") = 1.0, py::arg("gamma") = 1.0);
  m.def(
      "q_sample",
      [](const F64Array& x0, int64_t t, const F64Array& eps, const gc::NoiseSchedule& s) {
        return to_numpy(gc::q_sample(to_torch(x0), t, to_torch(eps), s));
      },
      py::arg("x0"), py::arg("t"), py::arg("eps"), py::arg("sched"));
  m.def(
      "ddim_step",
      [](const F64Array& xt, const F64Array& eps, int64_t t, int64_t t_prev,
         const gc::NoiseSchedule& s, double clip_x0) {
        return to_numpy(gc::ddim_step(to_torch(xt), to_torch(eps), t, t_prev, {0.0, 1, clip_x0}, s));
      },
      py::arg("xt"), py::arg("eps_pred"), py::arg("t"), py::arg("t_prev"), py::arg("sched"),
      py::arg("clip_x0") = 1.0);

  py::class_<gc::TileGrid>(m, "TileGrid")
      .def_readonly("canvas_h", &gc::TileGrid::canvas_h)
      .def_readonly("canvas_w", &gc::TileGrid::canvas_w)
      .def_readonly("window", &gc::TileGrid::window)
      .def_readonly("stride", &gc::TileGrid::stride)
      .def_readonly("rows", &gc::TileGrid::rows)
      .def_readonly("cols", &gc::TileGrid::cols)
      .def_property_readonly("origins",
                             [](const gc::TileGrid& g) {
                               std::vector<std::pair<int64_t, int64_t>> o;
                               for (const auto& t : g.tiles) o.emplace_back(t.y0, t.x0);
                               return o;
                             })
      .def("seam_columns", &gc::TileGrid::seam_columns)
      .def("seam_rows", &gc::TileGrid::seam_rows);
  m.def(
      "plan_tiles",
      [](int64_t h, int64_t w, int64_t window, std::optional<int64_t> stride) {
        return stride ? gc::plan_tiles(h, w, window, *stride) : gc::plan_tiles(h, w, window);
      },
      py::arg("canvas_h"), py::arg("canvas_w"), py::arg("window"), py::arg("stride") = py::none());
  m.def(
      "noise_plan",
      [](const gc::TileGrid& grid, const std::string& mode, uint64_t seed) {
        std::vector<F64Array> out;
        for (const auto& t : gc::NoisePlan(grid, gc::parse_noise_mode(mode), seed).assignments()) {
          out.push_back(to_numpy(t.squeeze(0)));
        }
        return out;
      },
      py::arg("grid"), py::arg("mode"), py::arg("seed"));
  m.def(
      "axis_weights",
      [](int64_t window, int64_t stride, int64_t index, int64_t count, const std::string& mode) {
        return gc::axis_weights(window, stride, index, count, gc::parse_stitch_mode(mode));
      },
      py::arg("window"), py::arg("stride"), py::arg("index"), py::arg("count"),
      py::arg("mode") = "crossfade");
  m.def(
      "stitch",
      [](const std::vector<F64Array>& tiles, const gc::TileGrid& grid, const std::string& mode) {
        std::vector<torch::Tensor> ts;
        for (const auto& t : tiles) ts.push_back(to_torch(t));
        return to_numpy(gc::stitch(ts, grid, gc::parse_stitch_mode(mode)).squeeze(0));
      },
      py::arg("tiles"), py::arg("grid"), py::arg("mode") = "crossfade");

  m.def(
      "degrade",
      [](const U8Array& hr, const std::string& config_json, uint64_t seed) {
        auto cfg = gc::config_from_json(nlohmann::json::parse(config_json)).degradation;
        auto pair = gc::degrade_pair(to_mat(hr), cfg, seed);
        return py::make_tuple(from_mat(pair.lr), gc::pair_record(pair).dump());
      },
      py::arg("hr"), py::arg("config_json") = "{}", py::arg("seed") = 0);
  m.def("make_texture", [](int size, uint64_t seed) { return from_mat(gc::make_texture(size, seed)); },
        py::arg("size"), py::arg("seed"));

  m.def(
      "fid",
      [](const F64Array& mu_a, const F64Array& sigma_a, const F64Array& mu_b,
         const F64Array& sigma_b) {
        return gc::fid({to_vector(mu_a), to_matrix(sigma_a), 2}, {to_vector(mu_b), to_matrix(sigma_b), 2});
      },
      py::arg("mu_a"), py::arg("sigma_a"), py::arg("mu_b"), py::arg("sigma_b"));
  m.def(
      "seam_gradient",
      [](const F64Array& intensity, const gc::TileGrid& grid) {
        auto s = gc::seam_gradient(to_torch(intensity), grid);
        return py::dict(py::arg("horizontal") = s.horizontal, py::arg("vertical") = s.vertical,
                        py::arg("average") = s.average);
      },
      py::arg("intensity"), py::arg("grid"));

  m.def("default_config", [] { return gc::to_json(gc::EngineConfig{}).dump(); });
  m.def("normalize_config", [](const std::string& j) {
    return gc::to_json(gc::config_from_json(nlohmann::json::parse(j))).dump();
  });
  m.def("count_parameters", [](const std::string& j) {
    return gc::count_parameters(gc::config_from_json(nlohmann::json::parse(j)).model);
  });
  m.def("reference_parameter_count", [] { return gc::count_parameters(gc::reference_scale_config()); });

  py::register_exception<gc::ConfigError>(m, "ConfigError", PyExc_ValueError);
}
