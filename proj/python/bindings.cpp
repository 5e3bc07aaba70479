#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "conceptlab/dgp.hpp"
#include "conceptlab/diffusion.hpp"
#include "conceptlab/experiment.hpp"
#include "conceptlab/interventions.hpp"
#include "conceptlab/landscape.hpp"
#include "conceptlab/probe.hpp"
#include "conceptlab/trajectory.hpp"

namespace py = pybind11;
using namespace conceptlab;

namespace {

py::array_t<double> tensor_to_numpy(const Tensor& t) {
  py::array_t<double> out({t.n, t.c, t.h, t.w});
  std::copy(t.v.begin(), t.v.end(), out.mutable_data());
  return out;
}

Tensor numpy_to_tensor(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 4) throw std::invalid_argument("expected an (n, c, h, w) array");
  Tensor t(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)),
           static_cast<int>(a.shape(2)), static_cast<int>(a.shape(3)));
  std::copy(a.data(), a.data() + t.size(), t.v.begin());
  return t;
}

Vec list_to_vec(const std::vector<double>& v) {
  Vec out(v.size());
  for (size_t i = 0; i < v.size(); ++i) out[i] = v[i];
  return out;
}

std::vector<double> vec_to_list(const Vec& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

py::dict traj_to_dict(const landscape::FlowTrajectory& t) {
  py::list times, z1, z2;
  for (size_t i = 0; i < t.times.size(); ++i) {
    times.append(t.times[i]);
    z1.append(t.states[i][0]);
    z2.append(t.states[i][1]);
  }
  py::dict d;
  d["t"] = times;
  d["z1"] = z1;
  d["z2"] = z2;
  return d;
}

trajectory::Trajectory traj_from_py(const std::vector<long>& steps,
                                    const std::vector<std::vector<double>>& coords) {
  trajectory::Trajectory t;
  for (size_t i = 0; i < steps.size(); ++i) {
    trajectory::TrajectoryPoint p;
    p.step = steps[i];
    p.coords = list_to_vec(coords[i]);
    p.per_axis_acc = Vec::Zero(p.coords.size());
    t.points.push_back(p);
  }
  return t;
}

}  // namespace

PYBIND11_MODULE(_conceptlab, m) {
  m.doc() = "concept-space learning-dynamics laboratory";
  m.attr("__version__") = experiment::kToolVersion;

  // ---- concept space / data generation ----
  py::class_<dgp::ConceptAxis>(m, "ConceptAxis")
      .def_static("color", &dgp::ConceptAxis::color, py::arg("separation"),
                  py::arg("spread_ratio") = dgp::ConceptAxis::kSpreadRatio)
      .def_static("size", &dgp::ConceptAxis::size, py::arg("separation"),
                  py::arg("spread_ratio") = dgp::ConceptAxis::kSpreadRatio)
      .def_static("shape", &dgp::ConceptAxis::shape)
      .def_static("background", &dgp::ConceptAxis::background, py::arg("separation"),
                  py::arg("spread_ratio") = dgp::ConceptAxis::kSpreadRatio)
      .def_readonly("name", &dgp::ConceptAxis::name)
      .def_readonly("spread", &dgp::ConceptAxis::spread);

  py::class_<dgp::ConceptSpaceSpec>(m, "ConceptSpaceSpec")
      .def(py::init([](const std::vector<dgp::ConceptAxis>& axes, int height, int width) {
             dgp::ConceptSpaceSpec s;
             s.axes = axes;
             s.height = height;
             s.width = width;
             s.validate();
             return s;
           }),
           py::arg("axes"), py::arg("height") = 32, py::arg("width") = 32)
      .def_property_readonly("d", &dgp::ConceptSpaceSpec::active_axis_count)
      .def_property_readonly("cond_dims", &dgp::ConceptSpaceSpec::cond_dims)
      .def("class_labels", &dgp::ConceptSpaceSpec::all_class_labels)
      .def("to_json", &dgp::ConceptSpaceSpec::to_json)
      .def_static("from_json", &dgp::ConceptSpaceSpec::from_json)
      .def("with_max_diversity", &dgp::ConceptSpaceSpec::with_max_diversity);

  m.def(
      "sample_concept_vector",
      [](const std::string& label, const dgp::ConceptSpaceSpec& spec, uint64_t seed) {
        Rng rng(seed);
        return vec_to_list(dgp::sample_concept_vector(label, spec, rng).values);
      },
      py::arg("class_label"), py::arg("spec"), py::arg("seed"));

  m.def(
      "render",
      [](const std::string& label, const dgp::ConceptSpaceSpec& spec, uint64_t seed) {
        Rng rng(seed);
        const auto z = dgp::sample_concept_vector(label, spec, rng);
        const auto s = dgp::render(z, spec, rng);
        py::dict d;
        d["image"] = tensor_to_numpy(s.image);
        d["z"] = vec_to_list(s.z.values);
        d["h"] = vec_to_list(s.h);
        d["position"] = py::make_tuple(s.pos_x, s.pos_y);
        return d;
      },
      py::arg("class_label"), py::arg("spec"), py::arg("seed"),
      "Sample a concept vector for the class and render it at a random position.");

  m.def(
      "build_dataset",
      [](const dgp::ConceptSpaceSpec& spec, const std::vector<std::string>& classes,
         int n_per_class, uint64_t seed, const std::string& save_to) {
        const auto ds = dgp::build_dataset(spec, classes, n_per_class, seed);
        if (!save_to.empty()) dgp::save_dataset(ds, save_to);
        return static_cast<int>(ds.samples.size());
      },
      py::arg("spec"), py::arg("classes"), py::arg("n_per_class"), py::arg("seed"),
      py::arg("save_to") = "");

  m.def(
      "empirical_concept_signal",
      [](const dgp::ConceptSpaceSpec& spec, const std::string& axis, int n_pairs,
         uint64_t seed) {
        Rng rng(seed);
        return dgp::empirical_concept_signal(spec, axis, n_pairs, rng);
      },
      py::arg("spec"), py::arg("axis"), py::arg("n_pairs") = 64, py::arg("seed") = 0);

  // ---- landscape simulations ----
  py::class_<landscape::LandscapeParams>(m, "LandscapeParams")
      .def(py::init<>())
      .def_static("from_signals", &landscape::LandscapeParams::from_signals,
                  py::arg("sigma1"), py::arg("sigma2"))
      .def_readwrite("sigma1", &landscape::LandscapeParams::sigma1)
      .def_readwrite("sigma2", &landscape::LandscapeParams::sigma2)
      .def_readwrite("a", &landscape::LandscapeParams::a)
      .def_readwrite("t_hat1", &landscape::LandscapeParams::t_hat1)
      .def_readwrite("t_hat2", &landscape::LandscapeParams::t_hat2)
      .def_readwrite("s", &landscape::LandscapeParams::s)
      .def_readwrite("alpha", &landscape::LandscapeParams::alpha);

  m.def("target_d", &landscape::target_d, py::arg("t"), py::arg("t_hat"), py::arg("z_tilde"),
        py::arg("z_hat"));

  m.def(
      "simulate_ood",
      [](const landscape::LandscapeParams& p, const std::string& cls, double dt, double t_max) {
        return traj_to_dict(landscape::simulate_ood(p, cls, {0.5, 0.5}, dt, t_max));
      },
      py::arg("params"), py::arg("class_label"), py::arg("dt") = 0.01,
      py::arg("t_max") = 120.0);

  m.def(
      "simulate_underspec",
      [](double s, const std::vector<double>& alphas, double dt, double t_max) {
        landscape::LandscapeParams p;
        p.s = s;
        py::list out;
        for (const auto& t : landscape::simulate_underspec(p, alphas, dt, t_max))
          out.append(traj_to_dict(t));
        return out;
      },
      py::arg("s") = 0.01, py::arg("alphas") = std::vector<double>{0, 25, 50, 75, 100},
      py::arg("dt") = 0.01, py::arg("t_max") = 20.0);

  // ---- diffusion model ----
  py::class_<diffusion::NoiseSchedule>(m, "NoiseSchedule")
      .def(py::init([](double g_start, double g_end) {
             auto s = std::make_unique<diffusion::NoiseSchedule>();
             s->init(g_start, g_end);
             return s;
           }),
           py::arg("gamma_start") = -5.0, py::arg("gamma_end") = 10.0)
      .def("gamma", &diffusion::NoiseSchedule::gamma)
      .def_static("alpha_of_gamma", &diffusion::NoiseSchedule::alpha_of_gamma)
      .def_static("sigma_of_gamma", &diffusion::NoiseSchedule::sigma_of_gamma);

  py::class_<diffusion::DenoiserState>(m, "DenoiserState")
      .def_static("load", &diffusion::DenoiserState::load_file, py::arg("path"))
      .def_property_readonly("step", [](const diffusion::DenoiserState& s) { return s.step; })
      .def("save", &diffusion::DenoiserState::save_file, py::arg("path"))
      .def(
          "sample",
          [](diffusion::DenoiserState& st, const std::vector<std::vector<double>>& conds,
             int steps, double w_cfg, uint64_t seed) {
            Mat cond(st.net_cfg.cond_dim, static_cast<Eigen::Index>(conds.size()));
            for (size_t i = 0; i < conds.size(); ++i)
              cond.col(static_cast<Eigen::Index>(i)) = list_to_vec(conds[i]);
            Rng rng(seed);
            return tensor_to_numpy(diffusion::sample(st, cond, steps, w_cfg, rng));
          },
          py::arg("conditionings"), py::arg("steps") = 50, py::arg("w_cfg") = 1.0,
          py::arg("seed") = 0);

  m.def(
      "train_denoiser",
      [](const std::string& data_dir, const std::string& out_dir,
         const std::vector<int>& channels, long total_steps, int batch_size, uint64_t seed,
         long checkpoint_every) {
        const auto data = dgp::load_dataset(data_dir);
        nn::UNetConfig net;
        net.channels_per_level = channels;
        net.time_hidden = 64;
        net.cond_hidden = 64;
        net.cond_dim = data.spec.cond_dims();
        net.height = data.spec.height;
        net.width = data.spec.width;
        diffusion::TrainConfig cfg;
        cfg.total_steps = total_steps;
        cfg.batch_size = batch_size;
        cfg.checkpoint_every = checkpoint_every;
        const auto res = diffusion::train(data, net, cfg, seed, out_dir);
        return res.checkpoint_paths;
      },
      py::arg("data_dir"), py::arg("out_dir"),
      py::arg("channels") = std::vector<int>{8, 16, 32}, py::arg("total_steps") = 1000,
      py::arg("batch_size") = 32, py::arg("seed") = 1, py::arg("checkpoint_every") = 250);

  // ---- probes and trajectory metrics ----
  py::class_<probe::ProbeState>(m, "Probe")
      .def_static(
          "train",
          [](const dgp::ConceptSpaceSpec& spec, int images_per_class, long train_steps,
             uint64_t seed) {
            probe::ProbeConfig cfg;
            cfg.images_per_class = images_per_class;
            cfg.train_steps = train_steps;
            return probe::train_probe(spec, cfg, seed);
          },
          py::arg("spec"), py::arg("images_per_class") = 1024, py::arg("train_steps") = 10000,
          py::arg("seed") = 9001)
      .def_static("load", &probe::ProbeState::load_file, py::arg("path"))
      .def("save", &probe::ProbeState::save_file, py::arg("path"))
      .def_property_readonly("held_out_accuracy",
                             [](const probe::ProbeState& p) { return p.held_out_accuracy; })
      .def(
          "coordinates",
          [](probe::ProbeState& p, const py::array_t<double>& images) {
            return vec_to_list(probe::concept_coordinates(numpy_to_tensor(images), p));
          },
          py::arg("images"))
      .def(
          "evaluate",
          [](probe::ProbeState& p, const py::array_t<double>& images, const std::string& target) {
            const auto ev = probe::evaluate(numpy_to_tensor(images), p, target);
            py::dict d;
            d["coordinates"] = vec_to_list(ev.coordinates);
            d["per_axis_accuracy"] = vec_to_list(ev.per_axis_accuracy);
            d["joint_accuracy"] = ev.joint_accuracy;
            return d;
          },
          py::arg("images"), py::arg("target_class"));

  m.def(
      "learning_speed",
      [](const std::vector<long>& steps, const std::vector<double>& joint_acc,
         double threshold) -> py::object {
        trajectory::Trajectory t;
        for (size_t i = 0; i < steps.size(); ++i) {
          trajectory::TrajectoryPoint p;
          p.step = steps[i];
          p.coords = Vec::Zero(2);
          p.per_axis_acc = Vec::Zero(2);
          p.joint_acc = joint_acc[i];
          t.points.push_back(p);
        }
        const auto s = trajectory::learning_speed(t, threshold);
        if (!s) return py::none();
        return py::float_(*s);
      },
      py::arg("steps"), py::arg("joint_accuracy"), py::arg("threshold") = 0.8);

  m.def(
      "detect_turn",
      [](const std::vector<long>& steps, const std::vector<std::vector<double>>& coords,
         double angle_threshold_deg, int smoothing_window) -> py::object {
        const auto t = traj_from_py(steps, coords);
        const auto turn = trajectory::detect_turn(t, angle_threshold_deg, smoothing_window);
        if (!turn) return py::none();
        return py::int_(*turn);
      },
      py::arg("steps"), py::arg("coords"), py::arg("angle_threshold_deg") = 60.0,
      py::arg("smoothing_window") = 3);

  m.def(
      "memorization_target",
      [](const std::vector<long>& steps, const std::vector<std::vector<double>>& coords,
         const std::vector<std::string>& training_classes) {
        const auto t = traj_from_py(steps, coords);
        const auto mem = trajectory::memorization_target(t, training_classes);
        return py::make_tuple(mem.class_label, mem.distance);
      },
      py::arg("steps"), py::arg("coords"), py::arg("training_classes"));

  m.def("first_sustained_crossing", &interventions::first_sustained_crossing, py::arg("steps"),
        py::arg("accuracy"), py::arg("threshold") = 0.5, py::arg("persistence") = 2);

  // ---- experiment presets ----
  m.def(
      "preset_toml",
      [](const std::string& name, const std::string& profile) {
        return experiment::preset(name, profile).to_toml().dump();
      },
      py::arg("name"), py::arg("profile") = "desk");
  m.def("preset_names", &experiment::preset_names);
}
