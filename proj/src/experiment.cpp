#include "conceptlab/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <nlohmann/json.hpp>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "conceptlab/interventions.hpp"
#include "conceptlab/io.hpp"
#include "conceptlab/trajectory.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace conceptlab::experiment {

// ---- config ----

void ExperimentConfig::apply_profile() {
  if (profile == "desk") {
    resolution = 16;
    net.channels_per_level = {8, 16, 32};
    net.time_hidden = 64;
    net.cond_hidden = 64;
    train.batch_size = 32;
    train.total_steps = std::min<long>(train.total_steps, 20000);
    n_per_class = 1024;
    probe_cfg.images_per_class = 1024;
    sampler_steps = 50;
  } else if (profile == "paper") {
    resolution = 32;
    net.channels_per_level = {64, 128, 256};
    train.batch_size = 128;
    train.total_steps = 20000;
    n_per_class = 2048;
    probe_cfg.images_per_class = 4096;
    sampler_steps = 250;
  } else {
    throw std::invalid_argument("unknown profile '" + profile + "' (desk|paper)");
  }
  net.height = resolution;
  net.width = resolution;
}

void ExperimentConfig::validate() const {
  static const std::vector<std::string> kinds{"gen-data",  "train",    "probe-train",
                                              "evaluate",  "intervene", "simulate",
                                              "report"};
  if (std::find(kinds.begin(), kinds.end(), kind) == kinds.end())
    throw std::invalid_argument("unknown kind '" + kind + "'");
  if (seeds.empty()) throw std::invalid_argument("seeds must be nonempty");
  if (out_dir.empty()) throw std::invalid_argument("out_dir must be set");
  for (double m : masking_sweep)
    if (m < 0.0 || m > 100.0)
      throw std::invalid_argument("masking percentages must lie in [0,100]");
  if (!signal_sweep.empty() && !masking_sweep.empty())
    throw std::invalid_argument("signal and masking sweeps are mutually exclusive");
}

dgp::ConceptSpaceSpec ExperimentConfig::make_spec(double color_sep, double) const {
  dgp::ConceptSpaceSpec spec;
  spec.height = resolution;
  spec.width = resolution;
  for (const std::string& a : axes) {
    if (a == "color") spec.axes.push_back(dgp::ConceptAxis::color(color_sep));
    else if (a == "size") spec.axes.push_back(dgp::ConceptAxis::size(size_separation));
    else if (a == "shape") spec.axes.push_back(dgp::ConceptAxis::shape());
    else if (a == "background_color")
      spec.axes.push_back(dgp::ConceptAxis::background(background_separation));
    else throw std::invalid_argument("unknown axis '" + a + "'");
  }
  // when shape is not a concept, objects are circles; no extra axis needed
  spec.validate();
  return spec;
}

std::vector<std::string> ExperimentConfig::variants() const {
  std::vector<std::string> out;
  char buf[32];
  if (!signal_sweep.empty()) {
    for (double s : signal_sweep) {
      std::snprintf(buf, sizeof(buf), "sig%04.2f", s);
      out.push_back(buf);
    }
  } else if (!masking_sweep.empty()) {
    for (double m : masking_sweep) {
      std::snprintf(buf, sizeof(buf), "mask%03d", static_cast<int>(std::lround(m)));
      out.push_back(buf);
    }
  } else {
    out.push_back("base");
  }
  return out;
}

double ExperimentConfig::variant_color_separation(const std::string& variant) const {
  if (variant.rfind("sig", 0) == 0) return std::stod(variant.substr(3));
  return color_separation;
}

double ExperimentConfig::variant_mask_fraction(const std::string& variant) const {
  if (variant.rfind("mask", 0) == 0) return std::stod(variant.substr(4)) / 100.0;
  return mask_fraction;
}

namespace {

std::vector<double> to_doubles(const std::vector<uint64_t>& v) {
  std::vector<double> out;
  for (uint64_t x : v) out.push_back(static_cast<double>(x));
  return out;
}

std::vector<double> to_doubles_i(const std::vector<int>& v) {
  return std::vector<double>(v.begin(), v.end());
}

std::vector<int> to_ints(const std::vector<double>& v) {
  std::vector<int> out;
  for (double x : v) out.push_back(static_cast<int>(std::lround(x)));
  return out;
}

}  // namespace

toml::Table ExperimentConfig::to_toml() const {
  toml::Table t;
  t.set("", "kind", {kind});
  t.set("", "name", {name});
  t.set("", "profile", {profile});
  t.set("", "out_dir", {out_dir});
  t.set("", "seeds", {to_doubles(seeds)});
  t.set("", "probe_seed", {static_cast<double>(probe_seed)});

  t.set("dgp", "axes", {axes});
  t.set("dgp", "color_separation", {color_separation});
  t.set("dgp", "size_separation", {size_separation});
  t.set("dgp", "background_separation", {background_separation});
  t.set("dgp", "resolution", {static_cast<double>(resolution)});
  t.set("dgp", "n_per_class", {static_cast<double>(n_per_class)});
  t.set("dgp", "train_classes", {train_classes});
  t.set("dgp", "eval_classes", {eval_classes});
  t.set("dgp", "ood_class", {ood_class});

  t.set("sweep", "signal", {signal_sweep});
  t.set("sweep", "masking", {masking_sweep});
  t.set("sweep", "cfg", {cfg_sweep});

  t.set("masking", "fraction", {mask_fraction});
  t.set("masking", "class", {mask_class});
  t.set("masking", "axis", {mask_axis});

  t.set("train", "learning_rate", {train.learning_rate});
  t.set("train", "weight_decay", {train.weight_decay});
  t.set("train", "beta1", {train.beta1});
  t.set("train", "beta2", {train.beta2});
  t.set("train", "total_steps", {static_cast<double>(train.total_steps)});
  t.set("train", "batch_size", {static_cast<double>(train.batch_size)});
  t.set("train", "cond_drop_prob", {train.cond_drop_prob});
  t.set("train", "null_fill", {train.null_fill});
  t.set("train", "reconstruction_sigma", {train.reconstruction_sigma});
  t.set("train", "checkpoint_every", {static_cast<double>(train.checkpoint_every)});
  t.set("train", "log_every", {static_cast<double>(train.log_every)});

  t.set("model", "channels", {to_doubles_i(net.channels_per_level)});
  t.set("model", "res_blocks_per_level", {static_cast<double>(net.res_blocks_per_level)});
  t.set("model", "bottleneck_attention", {net.bottleneck_attention});
  t.set("model", "time_embed_dim", {static_cast<double>(net.time_embed_dim)});
  t.set("model", "time_hidden", {static_cast<double>(net.time_hidden)});
  t.set("model", "cond_hidden", {static_cast<double>(net.cond_hidden)});

  t.set("probe", "channels", {to_doubles_i(probe_cfg.channels)});
  t.set("probe", "train_steps", {static_cast<double>(probe_cfg.train_steps)});
  t.set("probe", "images_per_class", {static_cast<double>(probe_cfg.images_per_class)});
  t.set("probe", "batch_size", {static_cast<double>(probe_cfg.batch_size)});
  t.set("probe", "learning_rate", {probe_cfg.learning_rate});
  t.set("probe", "weight_decay", {probe_cfg.weight_decay});
  t.set("probe", "accuracy_target", {probe_cfg.accuracy_target});
  t.set("probe", "max_pooling", {probe_cfg.max_pooling});

  t.set("eval", "n_samples", {static_cast<double>(eval_samples)});
  t.set("eval", "sampler_steps", {static_cast<double>(sampler_steps)});
  t.set("eval", "w_cfg", {w_cfg});
  t.set("eval", "protocols", {protocols});
  t.set("eval", "protocol_stride", {static_cast<double>(protocol_stride)});
  t.set("eval", "capability_threshold", {capability_threshold});
  t.set("eval", "accuracy_threshold", {accuracy_threshold});

  t.set("landscape", "sigma_pairs", {sigma_pairs});
  t.set("landscape", "underspec_alphas", {underspec_alphas});
  t.set("landscape", "dt", {landscape_dt});
  t.set("landscape", "t_max", {landscape_t_max});
  return t;
}

ExperimentConfig ExperimentConfig::from_toml(const toml::Table& t) {
  ExperimentConfig c;
  c.kind = t.get_string("", "kind", c.kind);
  c.name = t.get_string("", "name", c.name);
  c.profile = t.get_string("", "profile", c.profile);
  c.out_dir = t.get_string("", "out_dir", c.out_dir);
  if (t.has("", "seeds")) {
    c.seeds.clear();
    for (double s : t.get("", "seeds").as_numbers())
      c.seeds.push_back(static_cast<uint64_t>(s));
  }
  c.probe_seed = static_cast<uint64_t>(t.get_number("", "probe_seed", 9001));

  c.axes = t.get_strings("dgp", "axes", c.axes);
  c.color_separation = t.get_number("dgp", "color_separation", c.color_separation);
  c.size_separation = t.get_number("dgp", "size_separation", c.size_separation);
  c.background_separation =
      t.get_number("dgp", "background_separation", c.background_separation);
  c.resolution = static_cast<int>(t.get_number("dgp", "resolution", c.resolution));
  c.n_per_class = static_cast<int>(t.get_number("dgp", "n_per_class", c.n_per_class));
  c.train_classes = t.get_strings("dgp", "train_classes", c.train_classes);
  c.eval_classes = t.get_strings("dgp", "eval_classes", c.eval_classes);
  c.ood_class = t.get_string("dgp", "ood_class", c.ood_class);

  c.signal_sweep = t.get_numbers("sweep", "signal", c.signal_sweep);
  c.masking_sweep = t.get_numbers("sweep", "masking", c.masking_sweep);
  c.cfg_sweep = t.get_numbers("sweep", "cfg", c.cfg_sweep);

  c.mask_fraction = t.get_number("masking", "fraction", c.mask_fraction);
  c.mask_class = t.get_string("masking", "class", c.mask_class);
  c.mask_axis = t.get_string("masking", "axis", c.mask_axis);

  c.train.learning_rate = t.get_number("train", "learning_rate", c.train.learning_rate);
  c.train.weight_decay = t.get_number("train", "weight_decay", c.train.weight_decay);
  c.train.beta1 = t.get_number("train", "beta1", c.train.beta1);
  c.train.beta2 = t.get_number("train", "beta2", c.train.beta2);
  c.train.total_steps =
      static_cast<long>(t.get_number("train", "total_steps", c.train.total_steps));
  c.train.batch_size =
      static_cast<int>(t.get_number("train", "batch_size", c.train.batch_size));
  c.train.cond_drop_prob = t.get_number("train", "cond_drop_prob", c.train.cond_drop_prob);
  c.train.null_fill = t.get_number("train", "null_fill", c.train.null_fill);
  c.train.reconstruction_sigma =
      t.get_number("train", "reconstruction_sigma", c.train.reconstruction_sigma);
  c.train.checkpoint_every =
      static_cast<long>(t.get_number("train", "checkpoint_every", c.train.checkpoint_every));
  c.train.log_every = static_cast<long>(t.get_number("train", "log_every", c.train.log_every));

  if (t.has("model", "channels"))
    c.net.channels_per_level = to_ints(t.get("model", "channels").as_numbers());
  c.net.res_blocks_per_level =
      static_cast<int>(t.get_number("model", "res_blocks_per_level", c.net.res_blocks_per_level));
  c.net.bottleneck_attention =
      t.get_bool("model", "bottleneck_attention", c.net.bottleneck_attention);
  c.net.time_embed_dim =
      static_cast<int>(t.get_number("model", "time_embed_dim", c.net.time_embed_dim));
  c.net.time_hidden = static_cast<int>(t.get_number("model", "time_hidden", c.net.time_hidden));
  c.net.cond_hidden = static_cast<int>(t.get_number("model", "cond_hidden", c.net.cond_hidden));

  if (t.has("probe", "channels"))
    c.probe_cfg.channels = to_ints(t.get("probe", "channels").as_numbers());
  c.probe_cfg.train_steps =
      static_cast<long>(t.get_number("probe", "train_steps", c.probe_cfg.train_steps));
  c.probe_cfg.images_per_class = static_cast<int>(
      t.get_number("probe", "images_per_class", c.probe_cfg.images_per_class));
  c.probe_cfg.batch_size =
      static_cast<int>(t.get_number("probe", "batch_size", c.probe_cfg.batch_size));
  c.probe_cfg.learning_rate =
      t.get_number("probe", "learning_rate", c.probe_cfg.learning_rate);
  c.probe_cfg.weight_decay = t.get_number("probe", "weight_decay", c.probe_cfg.weight_decay);
  c.probe_cfg.accuracy_target =
      t.get_number("probe", "accuracy_target", c.probe_cfg.accuracy_target);
  c.probe_cfg.max_pooling = t.get_bool("probe", "max_pooling", c.probe_cfg.max_pooling);

  c.eval_samples = static_cast<int>(t.get_number("eval", "n_samples", c.eval_samples));
  c.sampler_steps = static_cast<int>(t.get_number("eval", "sampler_steps", c.sampler_steps));
  c.w_cfg = t.get_number("eval", "w_cfg", c.w_cfg);
  c.protocols = t.get_strings("eval", "protocols", c.protocols);
  c.protocol_stride =
      static_cast<int>(t.get_number("eval", "protocol_stride", c.protocol_stride));
  c.capability_threshold =
      t.get_number("eval", "capability_threshold", c.capability_threshold);
  c.accuracy_threshold = t.get_number("eval", "accuracy_threshold", c.accuracy_threshold);

  c.sigma_pairs = t.get_numbers("landscape", "sigma_pairs", c.sigma_pairs);
  c.underspec_alphas = t.get_numbers("landscape", "underspec_alphas", c.underspec_alphas);
  c.landscape_dt = t.get_number("landscape", "dt", c.landscape_dt);
  c.landscape_t_max = t.get_number("landscape", "t_max", c.landscape_t_max);

  // the config file records resolved values, so the profile is not re-applied
  c.net.height = c.resolution;
  c.net.width = c.resolution;
  return c;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  return from_toml(toml::parse_file(path));
}

std::string ExperimentConfig::config_hash() const {
  ExperimentConfig c = *this;
  c.kind = "";
  return io::fnv1a_hex(c.to_toml().dump());
}

// ---- presets ----

std::vector<std::string> preset_names() {
  return {"fig3", "fig4", "fig5", "fig6", "fig8", "fig10b", "appd5", "appd6"};
}

ExperimentConfig preset(const std::string& name, const std::string& profile) {
  ExperimentConfig c;
  c.name = name;
  c.profile = profile;
  c.out_dir = "runs/" + name;
  c.apply_profile();
  c.train.checkpoint_every = (profile == "paper") ? 500 : 250;
  c.train.total_steps = (profile == "paper") ? 20000 : 10000;

  if (name == "fig3" || name == "fig4") {
    // learning-speed / generalization-dynamics sweep over color signal
    c.signal_sweep = {0.2, 0.35, 0.5, 0.65, 0.8};
    c.size_separation = 0.5;
    c.eval_classes = (name == "fig4") ? std::vector<std::string>{"00", "01", "10", "11"}
                                      : std::vector<std::string>{"11"};
    c.protocols = {"naive"};
  } else if (name == "fig5") {
    c.kind = "simulate";
    c.sigma_pairs = {1.0, 0.5, 0.5, 1.0};  // clockwise and counterclockwise
    c.underspec_alphas.clear();
  } else if (name == "fig6") {
    // imbalanced concept signal; all four elicitation protocols
    c.color_separation = 0.2;
    c.size_separation = 0.6;
    c.eval_classes = {"11"};
    c.train.checkpoint_every = std::min<long>(c.train.checkpoint_every, 500);
  } else if (name == "fig8") {
    c.axes = {"color", "shape"};
    c.color_separation = 0.8;
    c.masking_sweep = {0.0, 25.0, 50.0, 75.0, 100.0};
    c.mask_class = "01";  // red triangle
    c.mask_axis = "color";
    c.n_per_class = 1000;
    c.eval_classes = {"11"};
    c.protocols = {"naive", "overprompt"};
    c.train.total_steps = (profile == "paper") ? 20000 : 4000;
    c.train.checkpoint_every = (profile == "paper") ? 500 : 200;
  } else if (name == "fig10b") {
    c.kind = "simulate";
    c.sigma_pairs.clear();
    c.underspec_alphas = {0.0, 25.0, 50.0, 75.0, 100.0};
    c.landscape_t_max = 20.0;
  } else if (name == "appd5") {
    c.axes = {"color", "size", "background_color"};
    c.color_separation = 0.8;
    c.size_separation = 0.5;
    c.background_separation = 0.5;
    c.train_classes = {"000", "001", "010", "100"};
    c.eval_classes = {"011", "101", "110", "111"};
    c.ood_class = "111";
    c.protocols = {"naive"};
  } else if (name == "appd6") {
    c.color_separation = 0.5;
    c.size_separation = 0.5;
    c.cfg_sweep = {1.0, 2.0, 5.0};
    c.eval_classes = {"00", "01", "10", "11"};
    c.protocols = {"naive"};
  } else {
    throw std::invalid_argument("unknown preset '" + name + "'");
  }
  return c;
}

// ---- manifest ----

namespace {

json load_manifest(const std::string& run_dir) {
  const std::string path = run_dir + "/manifest.json";
  if (!fs::exists(path)) return json{{"tool_version", kToolVersion}, {"stages", json::object()},
                                     {"files", json::object()}};
  return json::parse(io::read_text_file(path));
}

void save_manifest(const std::string& run_dir, const json& m) {
  io::write_text_file(run_dir + "/manifest.json", m.dump(2));
}

void refresh_checksums(const std::string& run_dir, json& manifest) {
  json files = json::object();
  for (const auto& entry : fs::recursive_directory_iterator(run_dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string rel = fs::relative(entry.path(), run_dir).string();
    if (rel == "manifest.json") continue;
    files[rel] = io::file_checksum(entry.path().string());
  }
  manifest["files"] = files;
}

void require_path(const std::string& path, const std::string& stage) {
  if (!fs::exists(path))
    throw std::runtime_error("missing " + path + "; run the '" + stage + "' stage first");
}

std::vector<std::string> list_checkpoints(const std::string& model_dir) {
  std::vector<std::string> out;
  if (!fs::exists(model_dir)) return out;
  for (const auto& entry : fs::directory_iterator(model_dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("ckpt_", 0) == 0 && name.size() > 4 &&
        name.substr(name.size() - 4) == ".bin")
      out.push_back(entry.path().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

void run_jobs(std::vector<std::function<void()>> jobs, int n_workers) {
  if (n_workers <= 1 || jobs.size() <= 1) {
    for (auto& j : jobs) j();
    return;
  }
  // one core per job: disable Eigen's inner GEMM threading while jobs run
  const int eigen_threads = Eigen::nbThreads();
  Eigen::setNbThreads(1);
  std::atomic<size_t> next{0};
  std::vector<std::string> errors;
  std::mutex err_mu;
  auto worker = [&] {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      try {
        jobs[i]();
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(err_mu);
        errors.push_back(e.what());
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < std::min<int>(n_workers, static_cast<int>(jobs.size())); ++w)
    pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  Eigen::setNbThreads(eigen_threads);
  if (!errors.empty()) {
    std::string joined;
    for (const auto& e : errors) joined += e + "\n";
    throw std::runtime_error("job failures:\n" + joined);
  }
}

std::string seed_dir(const std::string& base, const std::string& variant, uint64_t seed) {
  return base + "/" + variant + "/seed" + std::to_string(seed);
}

// ---- stages ----

void stage_gen_data(const ExperimentConfig& cfg, const RunOptions& opts) {
  std::vector<std::function<void()>> jobs;
  for (const std::string& variant : cfg.variants()) {
    const dgp::ConceptSpaceSpec spec = cfg.make_spec(cfg.variant_color_separation(variant));
    const double mask = cfg.variant_mask_fraction(variant);
    for (uint64_t seed : cfg.seeds) {
      jobs.push_back([=, &cfg] {
        const std::string dir = seed_dir(cfg.out_dir + "/data", variant, seed);
        std::optional<dgp::MixingConfig> mixing;
        if (mask > 0.0 || !cfg.masking_sweep.empty()) {
          dgp::MixingConfig mc;
          mc.mask_fraction = mask;
          mc.mask_class = cfg.mask_class;
          mc.mask_axis = cfg.mask_axis;
          mc.null_fill = cfg.train.null_fill;
          mixing = mc;
        }
        const dgp::Dataset ds =
            dgp::build_dataset(spec, cfg.train_classes, cfg.n_per_class, seed, mixing);
        dgp::save_dataset(ds, dir);
      });
    }
  }
  run_jobs(std::move(jobs), opts.jobs);
}

void stage_probe_train(const ExperimentConfig& cfg, const RunOptions& opts) {
  fs::create_directories(cfg.out_dir + "/probes");
  std::vector<std::function<void()>> jobs;
  for (const std::string& variant : cfg.variants()) {
    jobs.push_back([=, &cfg] {
      const dgp::ConceptSpaceSpec spec = cfg.make_spec(cfg.variant_color_separation(variant));
      auto probe_state = probe::train_probe(spec, cfg.probe_cfg, cfg.probe_seed);
      probe_state->save_file(cfg.out_dir + "/probes/" + variant + ".bin");
    });
  }
  run_jobs(std::move(jobs), opts.jobs);
}

void stage_train(const ExperimentConfig& cfg, const RunOptions& opts) {
  std::vector<std::function<void()>> jobs;
  for (const std::string& variant : cfg.variants()) {
    for (uint64_t seed : cfg.seeds) {
      jobs.push_back([=, &cfg] {
        const std::string data_dir = seed_dir(cfg.out_dir + "/data", variant, seed);
        require_path(data_dir + "/manifest.jsonl", "gen-data");
        const dgp::Dataset ds = dgp::load_dataset(data_dir);
        nn::UNetConfig net = cfg.net;
        net.cond_dim = ds.spec.cond_dims();
        net.height = ds.spec.height;
        net.width = ds.spec.width;
        diffusion::train(ds, net, cfg.train, seed,
                         seed_dir(cfg.out_dir + "/models", variant, seed));
      });
    }
  }
  run_jobs(std::move(jobs), opts.jobs);
}

void stage_evaluate(const ExperimentConfig& cfg, const RunOptions& opts) {
  std::vector<std::function<void()>> jobs;
  for (const std::string& variant : cfg.variants()) {
    for (uint64_t seed : cfg.seeds) {
      jobs.push_back([=, &cfg] {
        const std::string probe_path = cfg.out_dir + "/probes/" + variant + ".bin";
        require_path(probe_path, "probe-train");
        auto probe_state = probe::ProbeState::load_file(probe_path);
        const std::string model_dir = seed_dir(cfg.out_dir + "/models", variant, seed);
        const auto ckpts = list_checkpoints(model_dir);
        if (ckpts.empty())
          throw std::runtime_error("missing checkpoints in " + model_dir +
                                   "; run the 'train' stage first");
        const dgp::ConceptSpaceSpec spec =
            cfg.make_spec(cfg.variant_color_separation(variant));
        std::vector<double> ws = cfg.cfg_sweep.empty() ? std::vector<double>{cfg.w_cfg}
                                                       : cfg.cfg_sweep;
        for (double w : ws) {
          std::string eval_dir = seed_dir(cfg.out_dir + "/eval", variant, seed);
          if (!cfg.cfg_sweep.empty()) {
            char suffix[32];
            std::snprintf(suffix, sizeof(suffix), "/cfg%g", w);
            eval_dir += suffix;
          }
          fs::create_directories(eval_dir);
          json summary;
          summary["variant"] = variant;
          summary["seed"] = seed;
          summary["w_cfg"] = w;
          for (const std::string& cls : cfg.eval_classes) {
            trajectory::Trajectory traj;
            traj.class_label = cls;
            traj.seed = seed;
            traj.signal_level = cfg.variant_color_separation(variant);
            for (const std::string& cpath : ckpts) {
              auto ckpt = diffusion::DenoiserState::load_file(cpath);
              Rng rng = Rng::derive(seed, "record:" + variant + ":" + cls,
                                    static_cast<uint64_t>(ckpt->step));
              const dgp::ConceptVector mean = dgp::class_mean_vector(cls, spec);
              Mat cond = dgp::conditioning_of(mean, spec).replicate(1, cfg.eval_samples);
              Tensor images = diffusion::sample(*ckpt, cond, cfg.sampler_steps, w, rng);
              const probe::Evaluation ev = probe::evaluate(images, *probe_state, cls);
              trajectory::TrajectoryPoint p;
              p.step = ckpt->step;
              p.coords = ev.coordinates;
              p.per_axis_acc = ev.per_axis_accuracy;
              p.joint_acc = ev.joint_accuracy;
              traj.points.push_back(p);
              if (cls == cfg.ood_class) {
                char grid_name[64];
                std::snprintf(grid_name, sizeof(grid_name), "grid_%s_%07ld.png", cls.c_str(),
                              ckpt->step);
                io::write_png(eval_dir + "/" + grid_name,
                              io::tile_grid(images, 4, (cfg.eval_samples + 3) / 4));
              }
            }
            trajectory::save_trajectory_csv(traj, eval_dir + "/traj_" + cls + ".csv");
            json cls_summary;
            const auto speed = trajectory::learning_speed(traj, cfg.accuracy_threshold);
            cls_summary["learning_speed"] = speed ? json(*speed) : json(nullptr);
            if (static_cast<int>(traj.points.size()) >= 5) {
              const auto turn = trajectory::detect_turn(traj);
              cls_summary["turn_step"] = turn ? json(*turn) : json(nullptr);
              const auto mem = trajectory::memorization_target(traj, cfg.train_classes);
              cls_summary["memorization_class"] = mem.class_label;
              cls_summary["memorization_distance"] = mem.distance;
            }
            cls_summary["final_joint_acc"] = traj.points.back().joint_acc;
            summary["classes"][cls] = cls_summary;
          }
          io::write_text_file(eval_dir + "/summary.json", summary.dump(2));
        }
      });
    }
  }
  run_jobs(std::move(jobs), opts.jobs);
}

void stage_intervene(const ExperimentConfig& cfg, const RunOptions& opts) {
  std::vector<std::function<void()>> jobs;
  for (const std::string& variant : cfg.variants()) {
    for (uint64_t seed : cfg.seeds) {
      jobs.push_back([=, &cfg] {
        const std::string probe_path = cfg.out_dir + "/probes/" + variant + ".bin";
        require_path(probe_path, "probe-train");
        auto probe_state = probe::ProbeState::load_file(probe_path);
        const std::string model_dir = seed_dir(cfg.out_dir + "/models", variant, seed);
        const auto ckpts = list_checkpoints(model_dir);
        if (ckpts.empty())
          throw std::runtime_error("missing checkpoints in " + model_dir +
                                   "; run the 'train' stage first");
        const std::string dir = seed_dir(cfg.out_dir + "/intervene", variant, seed);
        fs::create_directories(dir);

        interventions::ElicitationInputs inputs;
        const int stride = std::max(1, cfg.protocol_stride);
        for (size_t i = 0; i < ckpts.size(); i += stride) inputs.checkpoint_paths.push_back(ckpts[i]);
        if ((ckpts.size() - 1) % stride != 0) inputs.checkpoint_paths.push_back(ckpts.back());
        inputs.final_checkpoint_path = ckpts.back();
        inputs.spec = cfg.make_spec(cfg.variant_color_separation(variant));
        inputs.target_class = cfg.ood_class;
        inputs.capability_threshold = cfg.capability_threshold;
        interventions::EvalParams ev;
        ev.n_samples = cfg.eval_samples;
        ev.sampler_steps = cfg.sampler_steps;
        ev.w_cfg = cfg.w_cfg;
        ev.eval_seed = Rng::derive(seed, "intervene:" + variant).next_u64();

        io::CsvWriter csv(dir + "/elicitation.csv",
                          {"step", "protocol", "best_accuracy", "best_params"});
        json capability = json::object();
        for (const std::string& proto_name : cfg.protocols) {
          const auto protocol = interventions::protocol_from_string(proto_name);
          const auto curve =
              interventions::elicitation_curve(inputs, protocol, *probe_state, ev);
          for (size_t i = 0; i < curve.steps.size(); ++i) {
            const std::string params =
                i < curve.best_params.size() ? curve.best_params[i] : "";
            csv.row({std::to_string(curve.steps[i]), proto_name,
                     io::fmt_double(curve.accuracy[i]), params});
          }
          capability[proto_name] =
              curve.capability ? json(curve.capability->step) : json(nullptr);
        }
        io::write_text_file(dir + "/capability.json", capability.dump(2));
        json grid;
        grid["interval"] = stride * cfg.train.checkpoint_every;
        grid["n_checkpoints"] = inputs.checkpoint_paths.size();
        io::write_text_file(dir + "/grid.json", grid.dump(2));
      });
    }
  }
  run_jobs(std::move(jobs), opts.jobs);
}

void stage_simulate(const ExperimentConfig& cfg) {
  const std::string dir = cfg.out_dir + "/sim";
  fs::create_directories(dir);
  if (cfg.sigma_pairs.size() % 2 != 0)
    throw std::invalid_argument("sigma_pairs must hold (sigma1, sigma2) pairs");
  if (!cfg.sigma_pairs.empty()) {
    for (const std::string& cls : {"00", "11"}) {
      io::CsvWriter csv(dir + "/two_phase_class" + cls + ".csv", {"variant", "t", "z1", "z2"});
      for (size_t p = 0; p + 1 < cfg.sigma_pairs.size(); p += 2) {
        const auto params = landscape::LandscapeParams::from_signals(cfg.sigma_pairs[p],
                                                                     cfg.sigma_pairs[p + 1]);
        const std::string variant =
            params.sigma1 > params.sigma2 ? "sigma1_gt" : "sigma1_lt";
        const auto traj = landscape::simulate_ood(params, cls, {0.5, 0.5}, cfg.landscape_dt,
                                                  cfg.landscape_t_max);
        for (size_t i = 0; i < traj.times.size(); ++i)
          csv.row({variant, io::fmt_double(traj.times[i]), io::fmt_double(traj.states[i][0]),
                   io::fmt_double(traj.states[i][1])});
      }
    }
  }
  if (!cfg.underspec_alphas.empty()) {
    landscape::LandscapeParams params;
    params.s = 0.01;
    const auto trajs = landscape::simulate_underspec(params, cfg.underspec_alphas,
                                                     cfg.landscape_dt,
                                                     std::min(cfg.landscape_t_max, 20.0));
    io::CsvWriter endpoints(dir + "/underspec_endpoints.csv", {"alpha", "z1", "z2"});
    for (size_t k = 0; k < trajs.size(); ++k) {
      char name[64];
      std::snprintf(name, sizeof(name), "underspec_alpha%03d.csv",
                    static_cast<int>(std::lround(cfg.underspec_alphas[k])));
      io::CsvWriter csv(dir + "/" + std::string(name), {"t", "z1", "z2"});
      for (size_t i = 0; i < trajs[k].times.size(); ++i)
        csv.row({io::fmt_double(trajs[k].times[i]), io::fmt_double(trajs[k].states[i][0]),
                 io::fmt_double(trajs[k].states[i][1])});
      endpoints.row({io::fmt_double(cfg.underspec_alphas[k]),
                     io::fmt_double(trajs[k].back()[0]), io::fmt_double(trajs[k].back()[1])});
    }
  }
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2)
    throw std::invalid_argument("spearman: need two equal-length series");
  auto ranks = [](const std::vector<double>& v) {
    const size_t n = v.size();
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](size_t i, size_t j) { return v[i] < v[j]; });
    std::vector<double> r(n);
    size_t i = 0;
    while (i < n) {
      size_t j = i;
      while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = (static_cast<double>(i) + j) / 2.0 + 1.0;
      for (size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  double ma = 0, mb = 0;
  for (size_t i = 0; i < ra.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= ra.size();
  mb /= rb.size();
  double num = 0, da = 0, db = 0;
  for (size_t i = 0; i < ra.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - mb) * (rb[i] - mb);
  }
  if (da == 0 || db == 0) return 0.0;
  return num / std::sqrt(da * db);
}

void write_report(const std::string& run_dir) {
  require_path(run_dir + "/config.toml", "any");
  const ExperimentConfig cfg = ExperimentConfig::from_file(run_dir + "/config.toml");
  const std::string report_dir = run_dir + "/report";

  std::vector<std::string> missing;
  json summary;
  summary["name"] = cfg.name;
  summary["profile"] = cfg.profile;

  if (fs::exists(run_dir + "/sim")) {
    summary["simulate"] = json::object();
    for (const auto& entry : fs::directory_iterator(run_dir + "/sim"))
      summary["simulate"][entry.path().filename().string()] = true;
  }

  const bool wants_training = cfg.kind != "simulate";
  json speeds = json::array();
  json capabilities = json::array();
  std::vector<double> sweep_values;
  std::vector<double> sweep_mean_speeds;
  if (wants_training) {
    for (const std::string& variant : cfg.variants()) {
      double speed_sum = 0.0;
      int speed_n = 0;
      for (uint64_t seed : cfg.seeds) {
        const std::string eval_dir = seed_dir(run_dir + "/eval", variant, seed);
        const std::string summary_path = eval_dir + "/summary.json";
        if (!fs::exists(summary_path)) {
          missing.push_back("evaluate: " + summary_path);
          continue;
        }
        const json s = json::parse(io::read_text_file(summary_path));
        if (s.contains("classes") && s["classes"].contains(cfg.ood_class)) {
          const json& cls = s["classes"][cfg.ood_class];
          json row;
          row["variant"] = variant;
          row["seed"] = seed;
          row["learning_speed"] = cls.value("learning_speed", json(nullptr));
          row["turn_step"] = cls.value("turn_step", json(nullptr));
          row["memorization_class"] = cls.value("memorization_class", "");
          row["final_joint_acc"] = cls.value("final_joint_acc", 0.0);
          speeds.push_back(row);
          const double sp = cls["learning_speed"].is_null()
                                ? 0.0
                                : cls["learning_speed"].get<double>();
          speed_sum += sp;
          ++speed_n;
        }
        const std::string cap_path =
            seed_dir(run_dir + "/intervene", variant, seed) + "/capability.json";
        if (fs::exists(cap_path)) {
          json cap = json::parse(io::read_text_file(cap_path));
          cap["variant"] = variant;
          cap["seed"] = seed;
          capabilities.push_back(cap);
        }
      }
      if (speed_n > 0) {
        if (variant.rfind("sig", 0) == 0) sweep_values.push_back(std::stod(variant.substr(3)));
        else if (variant.rfind("mask", 0) == 0)
          sweep_values.push_back(std::stod(variant.substr(4)));
        else sweep_values.push_back(0.0);
        sweep_mean_speeds.push_back(speed_sum / speed_n);
      }
    }
  }
  if (wants_training && !speeds.empty()) {
    summary["learning_speeds"] = speeds;
    if (sweep_values.size() >= 2) {
      const double rho = spearman(sweep_values, sweep_mean_speeds);
      if (!cfg.signal_sweep.empty()) {
        summary["spearman_signal_vs_speed"] = rho;
        summary["monotone_increasing"] = rho >= 0.9;
      } else if (!cfg.masking_sweep.empty()) {
        summary["spearman_masking_vs_speed"] = rho;
        summary["monotone_decreasing"] = rho <= -0.9;
      }
    }
  }
  if (!capabilities.empty()) summary["capability_points"] = capabilities;
  if (wants_training && speeds.empty() && capabilities.empty() &&
      !fs::exists(run_dir + "/sim")) {
    std::string msg = "report: no evaluation artifacts found; missing stages:";
    for (const auto& m : missing) msg += "\n  " + m;
    if (missing.empty()) msg += " evaluate, intervene";
    throw std::runtime_error(msg);
  }

  fs::create_directories(report_dir);
  // plot-ready learning-speed table
  if (!speeds.empty()) {
    io::CsvWriter csv(report_dir + "/learning_speed.csv",
                      {"variant", "seed", "learning_speed", "turn_step",
                       "memorization_class", "final_joint_acc"});
    for (const auto& row : speeds) {
      csv.row({row["variant"].get<std::string>(), std::to_string(row["seed"].get<uint64_t>()),
               row["learning_speed"].is_null()
                   ? "nan"
                   : io::fmt_double(row["learning_speed"].get<double>()),
               row["turn_step"].is_null() ? "nan"
                                          : std::to_string(row["turn_step"].get<long>()),
               row["memorization_class"].get<std::string>(),
               io::fmt_double(row["final_joint_acc"].get<double>())});
    }
  }
  if (!missing.empty()) summary["missing"] = missing;
  io::write_text_file(report_dir + "/summary.json", summary.dump(2));
}

int run(const ExperimentConfig& cfg, const RunOptions& opts) {
  cfg.validate();  // throws before any directory mutation
  fs::create_directories(cfg.out_dir);
  json manifest = load_manifest(cfg.out_dir);
  const std::string hash = cfg.config_hash();

  if (!opts.force && manifest["stages"].contains(cfg.kind)) {
    const json& st = manifest["stages"][cfg.kind];
    if (st.value("completed", false) && st.value("config_hash", "") == hash) {
      std::cout << "stage '" << cfg.kind << "' already completed for this config; use --force"
                << " to re-run\n";
      return 0;
    }
  }

  io::write_text_file(cfg.out_dir + "/config.toml", cfg.to_toml().dump());
  const RunOptions run_opts = opts;
  if (cfg.kind == "gen-data") stage_gen_data(cfg, run_opts);
  else if (cfg.kind == "probe-train") stage_probe_train(cfg, run_opts);
  else if (cfg.kind == "train") stage_train(cfg, run_opts);
  else if (cfg.kind == "evaluate") stage_evaluate(cfg, run_opts);
  else if (cfg.kind == "intervene") stage_intervene(cfg, run_opts);
  else if (cfg.kind == "simulate") stage_simulate(cfg);
  else if (cfg.kind == "report") write_report(cfg.out_dir);

  manifest["tool_version"] = kToolVersion;
  manifest["config_hash"] = hash;
  manifest["stages"][cfg.kind] = {
      {"completed", true},
      {"config_hash", hash},
      {"timestamp",
       std::chrono::duration_cast<std::chrono::seconds>(
           std::chrono::system_clock::now().time_since_epoch())
           .count()}};
  refresh_checksums(cfg.out_dir, manifest);
  save_manifest(cfg.out_dir, manifest);
  return 0;
}

}  // namespace conceptlab::experiment
