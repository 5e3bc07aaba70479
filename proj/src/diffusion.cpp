#include "conceptlab/diffusion.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <stdexcept>

#include "conceptlab/archive.hpp"
#include "conceptlab/io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace conceptlab::diffusion {

namespace {

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
double softplus_inv(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

void NoiseSchedule::init(double g_start, double g_end) {
  if (g_end <= g_start)
    throw std::invalid_argument("schedule: gamma_end must exceed gamma_start");
  gamma_start.init("schedule.gamma_start", 1);
  slope_raw.init("schedule.slope_raw", 1);
  gamma_start.w[0] = g_start;
  slope_raw.w[0] = softplus_inv(g_end - g_start);
}

double NoiseSchedule::slope() const { return softplus(slope_raw.w[0]); }

double NoiseSchedule::slope_raw_grad_factor() const { return sigmoid(slope_raw.w[0]); }

double NoiseSchedule::gamma(double t) const {
  if (t < 0.0 || t > 1.0) throw std::invalid_argument("gamma: t must lie in [0,1]");
  return gamma_start.w[0] + t * slope();
}

double NoiseSchedule::alpha_of_gamma(double g) { return std::sqrt(sigmoid(-g)); }
double NoiseSchedule::sigma_of_gamma(double g) { return std::sqrt(sigmoid(g)); }

void NoiseSchedule::collect(nn::ParamList& out) {
  out.push_back(&gamma_start);
  out.push_back(&slope_raw);
}

void TrainConfig::validate() const {
  if (cond_drop_prob < 0.0 || cond_drop_prob >= 1.0)
    throw std::invalid_argument("cond_drop_prob must lie in [0,1)");
  if (total_steps < 1) throw std::invalid_argument("total_steps must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (reconstruction_sigma <= 0.0)
    throw std::invalid_argument("reconstruction_sigma must be positive");
}

Tensor diffuse(const Tensor& x0, double t, const Tensor& noise, const NoiseSchedule& sched) {
  if (!x0.same_shape(noise)) throw std::invalid_argument("diffuse: shape mismatch");
  const double g = sched.gamma(t);
  const double a = NoiseSchedule::alpha_of_gamma(g);
  const double s = NoiseSchedule::sigma_of_gamma(g);
  Tensor xt = x0;
  for (size_t i = 0; i < xt.v.size(); ++i) xt.v[i] = a * x0.v[i] + s * noise.v[i];
  return xt;
}

// ---- DenoiserState ----

std::unique_ptr<DenoiserState> DenoiserState::create(const nn::UNetConfig& net_cfg,
                                                     const TrainConfig& train_cfg,
                                                     uint64_t seed) {
  train_cfg.validate();
  auto st = std::make_unique<DenoiserState>();
  st->net_cfg = net_cfg;
  st->train_cfg = train_cfg;
  st->run_seed = seed;
  Rng init_rng = Rng::derive(seed, "init");
  st->net.build(net_cfg, init_rng);
  st->schedule.init();
  nn::AdamW::Config oc;
  oc.lr = train_cfg.learning_rate;
  oc.weight_decay = train_cfg.weight_decay;
  oc.beta1 = train_cfg.beta1;
  oc.beta2 = train_cfg.beta2;
  st->opt.attach(st->all_params(), oc);
  st->rng = Rng::derive(seed, "train");
  return st;
}

nn::ParamList DenoiserState::all_params() {
  nn::ParamList out = net.params();
  schedule.collect(out);
  return out;
}

namespace {

json net_cfg_to_json(const nn::UNetConfig& c) {
  return json{{"channels_per_level", c.channels_per_level},
              {"res_blocks_per_level", c.res_blocks_per_level},
              {"bottleneck_attention", c.bottleneck_attention},
              {"time_embed_dim", c.time_embed_dim},
              {"time_hidden", c.time_hidden},
              {"cond_hidden", c.cond_hidden},
              {"image_channels", c.image_channels},
              {"cond_dim", c.cond_dim},
              {"height", c.height},
              {"width", c.width}};
}

nn::UNetConfig net_cfg_from_json(const json& j) {
  nn::UNetConfig c;
  c.channels_per_level = j.at("channels_per_level").get<std::vector<int>>();
  c.res_blocks_per_level = j.at("res_blocks_per_level").get<int>();
  c.bottleneck_attention = j.at("bottleneck_attention").get<bool>();
  c.time_embed_dim = j.at("time_embed_dim").get<int>();
  c.time_hidden = j.at("time_hidden").get<int>();
  c.cond_hidden = j.at("cond_hidden").get<int>();
  c.image_channels = j.at("image_channels").get<int>();
  c.cond_dim = j.at("cond_dim").get<int>();
  c.height = j.at("height").get<int>();
  c.width = j.at("width").get<int>();
  return c;
}

json train_cfg_to_json(const TrainConfig& c) {
  return json{{"learning_rate", c.learning_rate},
              {"weight_decay", c.weight_decay},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"total_steps", c.total_steps},
              {"batch_size", c.batch_size},
              {"cond_drop_prob", c.cond_drop_prob},
              {"null_fill", c.null_fill},
              {"reconstruction_sigma", c.reconstruction_sigma},
              {"checkpoint_every", c.checkpoint_every},
              {"log_every", c.log_every}};
}

TrainConfig train_cfg_from_json(const json& j) {
  TrainConfig c;
  c.learning_rate = j.at("learning_rate").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.total_steps = j.at("total_steps").get<long>();
  c.batch_size = j.at("batch_size").get<int>();
  c.cond_drop_prob = j.at("cond_drop_prob").get<double>();
  c.null_fill = j.at("null_fill").get<double>();
  c.reconstruction_sigma = j.at("reconstruction_sigma").get<double>();
  c.checkpoint_every = j.at("checkpoint_every").get<long>();
  c.log_every = j.at("log_every").get<long>();
  return c;
}

}  // namespace

void DenoiserState::save(std::ostream& out) const {
  auto* self = const_cast<DenoiserState*>(this);
  json meta;
  meta["kind"] = "denoiser_checkpoint";
  meta["net_cfg"] = net_cfg_to_json(net_cfg);
  meta["train_cfg"] = train_cfg_to_json(train_cfg);
  meta["step"] = step;
  meta["run_seed"] = run_seed;
  meta["adam_t"] = self->opt.step_count();
  const auto rs = rng.state();
  meta["rng_state"] = {std::to_string(rs[0]), std::to_string(rs[1]), std::to_string(rs[2]),
                       std::to_string(rs[3])};
  std::vector<archive::TensorRef> tensors;
  const auto params = self->all_params();
  for (const nn::Param* p : params)
    tensors.push_back({p->name, p->w.data(), p->w.size()});
  auto& ms = self->opt.moments_m();
  auto& vs = self->opt.moments_v();
  for (size_t i = 0; i < params.size(); ++i) {
    tensors.push_back({"adam.m." + params[i]->name, ms[i].data(), ms[i].size()});
    tensors.push_back({"adam.v." + params[i]->name, vs[i].data(), vs[i].size()});
  }
  archive::save(out, meta, tensors);
}

void DenoiserState::save_file(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  save(f);
}

std::unique_ptr<DenoiserState> DenoiserState::load(std::istream& in) {
  archive::Loaded ar = archive::load(in);
  const json& meta = ar.meta;
  if (meta.at("kind") != "denoiser_checkpoint")
    throw std::runtime_error("checkpoint: wrong archive kind");
  auto st = create(net_cfg_from_json(meta.at("net_cfg")),
                   train_cfg_from_json(meta.at("train_cfg")),
                   meta.at("run_seed").get<uint64_t>());
  st->step = meta.at("step").get<long>();
  st->opt.set_step_count(meta.at("adam_t").get<long>());
  std::array<uint64_t, 4> rs;
  for (int i = 0; i < 4; ++i)
    rs[i] = std::stoull(meta.at("rng_state")[i].get<std::string>());
  st->rng.set_state(rs);

  const auto params = st->all_params();
  auto& ms = st->opt.moments_m();
  auto& vs = st->opt.moments_v();
  for (size_t i = 0; i < params.size(); ++i) {
    auto fetch = [&](const std::string& name) -> std::vector<double>& {
      auto it = ar.tensors.find(name);
      if (it == ar.tensors.end())
        throw std::runtime_error("checkpoint: missing tensor " + name);
      return it->second;
    };
    auto& w = fetch(params[i]->name);
    if (w.size() != params[i]->w.size())
      throw std::runtime_error("checkpoint: size mismatch for " + params[i]->name);
    params[i]->w.assign(w.begin(), w.end());
    const auto& m = fetch("adam.m." + params[i]->name);
    ms[i].assign(m.begin(), m.end());
    const auto& v = fetch("adam.v." + params[i]->name);
    vs[i].assign(v.begin(), v.end());
  }
  return st;
}

std::unique_ptr<DenoiserState> DenoiserState::load_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  return load(f);
}

std::unique_ptr<DenoiserState> DenoiserState::clone() const {
  std::stringstream ss;
  save(ss);
  ss.seekg(0);
  return load(ss);
}

// ---- loss ----

LossParts training_loss(const Tensor& x0, const Mat& cond, DenoiserState& state, Rng& rng,
                        bool compute_grads) {
  const int N = x0.n;
  if (N < 1) throw std::invalid_argument("training_loss: empty batch");
  if (cond.cols() != N) throw std::invalid_argument("training_loss: cond/batch mismatch");
  const int D = x0.per_image();
  const TrainConfig& cfg = state.train_cfg;
  NoiseSchedule& sched = state.schedule;
  const double slope = sched.slope();
  const double g0 = sched.gamma_start.w[0];

  std::vector<double> t(N), alpha(N), sigma(N);
  std::vector<char> dropped(N, 0);
  Tensor eps(x0.n, x0.c, x0.h, x0.w);
  Mat cond_used = cond;
  LossParts parts;
  for (int i = 0; i < N; ++i) {
    t[i] = rng.uniform();
    const double g = g0 + t[i] * slope;
    alpha[i] = NoiseSchedule::alpha_of_gamma(g);
    sigma[i] = NoiseSchedule::sigma_of_gamma(g);
    if (rng.bernoulli(cfg.cond_drop_prob)) {
      dropped[i] = 1;
      cond_used.col(i).setConstant(cfg.null_fill);
      ++parts.dropped_cond;
    }
    for (int d = 0; d < D; ++d) eps.image(i)[d] = rng.normal();
  }

  Tensor zt(x0.n, x0.c, x0.h, x0.w);
  for (int i = 0; i < N; ++i)
    for (int d = 0; d < D; ++d)
      zt.image(i)[d] = alpha[i] * x0.image(i)[d] + sigma[i] * eps.image(i)[d];

  Tensor eps_hat = state.net.forward(zt, t, cond_used);

  std::vector<double> mse(N, 0.0);
  for (int i = 0; i < N; ++i) {
    const double* eh = eps_hat.image(i);
    const double* e = eps.image(i);
    double acc = 0.0;
    for (int d = 0; d < D; ++d) {
      const double r = eh[d] - e[d];
      acc += r * r;
    }
    mse[i] = acc;
    parts.diffusion += 0.5 * slope * acc;
  }
  parts.diffusion /= N;

  // first-step reconstruction NLL under N(x, sigma_rec^2), in closed form
  const double sr2 = cfg.reconstruction_sigma * cfg.reconstruction_sigma;
  parts.reconstruction = std::exp(g0) * D / (2.0 * sr2) +
                         D * std::log(cfg.reconstruction_sigma * std::sqrt(2.0 * M_PI));

  // prior KL at t=1 keeps the learned endpoint compatible with sampling from
  // a standard normal
  const double g1 = g0 + slope;
  const double s1sq = 1.0 / (1.0 + std::exp(-g1));
  const double a1sq = 1.0 - s1sq;
  double x2_mean = 0.0;
  for (size_t q = 0; q < x0.v.size(); ++q) x2_mean += x0.v[q] * x0.v[q];
  x2_mean /= N;
  parts.prior = 0.5 * (D * (s1sq - 1.0 - std::log(s1sq)) + a1sq * x2_mean);

  parts.total = parts.diffusion + parts.reconstruction + parts.prior;
  if (!std::isfinite(parts.total))
    throw std::runtime_error("training_loss: non-finite loss (diffusion=" +
                             std::to_string(parts.diffusion) + ")");

  if (!compute_grads) return parts;

  Tensor gy(x0.n, x0.c, x0.h, x0.w);
  const double wscale = slope / N;
  for (size_t q = 0; q < gy.v.size(); ++q) gy.v[q] = wscale * (eps_hat.v[q] - eps.v[q]);
  Tensor gz = state.net.backward(gy);

  double g_g0 = 0.0, g_raw = 0.0;
  const double sp_grad = sched.slope_raw_grad_factor();
  for (int i = 0; i < N; ++i) {
    const double da = -0.5 * alpha[i] * sigma[i] * sigma[i];
    const double ds = 0.5 * sigma[i] * alpha[i] * alpha[i];
    const double* gzi = gz.image(i);
    const double* xi = x0.image(i);
    const double* ei = eps.image(i);
    double dgamma = 0.0;
    for (int d = 0; d < D; ++d) dgamma += gzi[d] * (da * xi[d] + ds * ei[d]);
    g_g0 += dgamma;
    g_raw += dgamma * t[i] * sp_grad;
    g_raw += 0.5 * mse[i] * sp_grad / N;
  }
  // reconstruction: d/d g0 of exp(g0) * D / (2 sr2)
  g_g0 += std::exp(g0) * D / (2.0 * sr2);
  // prior: d/d gamma1, gamma1 = g0 + softplus(raw)
  double dprior = 0.0;
  {
    const double da1 = s1sq * a1sq;  // d s1sq / d gamma1
    // 0.5 * (D*(s1sq - 1 - log s1sq) + a1sq * x2_mean)
    dprior = 0.5 * (D * (da1 - da1 / s1sq) - da1 * x2_mean);
  }
  g_g0 += dprior;
  g_raw += dprior * sp_grad;

  sched.gamma_start.g[0] += g_g0;
  sched.slope_raw.g[0] += g_raw;
  return parts;
}

// ---- training loop ----

TrainResult train(const dgp::Dataset& data, const nn::UNetConfig& net_cfg,
                  const TrainConfig& train_cfg, uint64_t seed, const std::string& out_dir,
                  const std::string& resume_path) {
  train_cfg.validate();
  if (data.samples.empty()) throw std::invalid_argument("train: empty dataset");
  fs::create_directories(out_dir);

  std::unique_ptr<DenoiserState> state;
  if (!resume_path.empty()) {
    state = DenoiserState::load_file(resume_path);
  } else {
    state = DenoiserState::create(net_cfg, train_cfg, seed);
  }

  // fixed 10% validation split by sample index
  std::vector<int> train_idx, val_idx;
  for (size_t i = 0; i < data.samples.size(); ++i)
    ((i % 10 == 9) ? val_idx : train_idx).push_back(static_cast<int>(i));
  if (train_idx.empty()) train_idx.push_back(0);
  if (val_idx.empty()) val_idx.push_back(static_cast<int>(data.samples.size()) - 1);

  const int H = data.spec.height, W = data.spec.width;
  const int cond_dim = data.spec.cond_dims();
  if (cond_dim != net_cfg.cond_dim && resume_path.empty())
    throw std::invalid_argument("train: net cond_dim does not match dataset");

  auto assemble = [&](const std::vector<int>& pool, Rng& r, int bs, Tensor& x, Mat& c) {
    x = Tensor(bs, 3, H, W);
    c.resize(cond_dim, bs);
    for (int b = 0; b < bs; ++b) {
      const int idx = pool[r.uniform_index(pool.size())];
      const dgp::RenderedSample& s = data.samples[idx];
      std::copy_n(s.image.v.data(), x.per_image(), x.image(b));
      c.col(b) = s.h;
    }
  };

  TrainResult result;
  auto checkpoint = [&](long at_step) {
    char name[64];
    std::snprintf(name, sizeof(name), "ckpt_%07ld.bin", at_step);
    const std::string path = out_dir + "/" + name;
    state->step = at_step;
    state->save_file(path);
    result.checkpoint_paths.push_back(path);
    result.checkpoint_steps.push_back(at_step);
  };

  io::CsvWriter log_csv(out_dir + "/train_log.csv",
                        {"step", "train_loss", "val_loss", "wall_time"});
  const auto t_start = std::chrono::steady_clock::now();
  const auto params = state->all_params();

  if (state->step == 0) checkpoint(0);
  const int val_bs = std::min<int>(train_cfg.batch_size, static_cast<int>(val_idx.size()));

  for (long s = state->step + 1; s <= train_cfg.total_steps; ++s) {
    Tensor x;
    Mat c;
    assemble(train_idx, state->rng, train_cfg.batch_size, x, c);
    nn::zero_grads(params);
    LossParts parts;
    try {
      parts = training_loss(x, c, *state, state->rng, true);
      state->opt.step();
      state->step = s;

      const bool log_now =
          (s % train_cfg.log_every == 0) || s == 1 || s == train_cfg.total_steps;
      if (log_now) {
        Tensor vx;
        Mat vc;
        Rng vr = Rng::derive(state->run_seed, "val", static_cast<uint64_t>(s));
        assemble(val_idx, vr, val_bs, vx, vc);
        nn::zero_grads(params);
        const LossParts vparts = training_loss(vx, vc, *state, vr, false);
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
        log_csv.row({std::to_string(s), io::fmt_double(parts.total),
                     io::fmt_double(vparts.total), io::fmt_double(wall)});
        result.log.push_back({s, parts.total, vparts.total, wall});
      }
    } catch (const std::runtime_error& e) {
      // divergence: keep the last good checkpoint and report
      throw std::runtime_error("train: diverged at step " + std::to_string(s) + " (" +
                               e.what() + "); last checkpoint preserved in " + out_dir);
    }
    if (s % train_cfg.checkpoint_every == 0 && s != train_cfg.total_steps) checkpoint(s);
    if (s == train_cfg.total_steps) checkpoint(s);
  }
  nn::zero_grads(params);
  return result;
}

// ---- sampling ----

Mat null_conditioning(int cond_dim, int n, double fill) {
  return Mat::Constant(cond_dim, n, fill);
}

Tensor sample(DenoiserState& state, const Mat& cond, int steps, double w_cfg, Rng& rng,
              const nn::CondIntervention* intervention) {
  if (steps < 1) throw std::invalid_argument("sample: steps must be >= 1");
  const int N = static_cast<int>(cond.cols());
  const nn::UNetConfig& ncfg = state.net_cfg;
  const int H = ncfg.height, W = ncfg.width, C = ncfg.image_channels;
  const NoiseSchedule& sched = state.schedule;

  Tensor z(N, C, H, W);
  for (double& v : z.v) v = rng.normal();
  const Mat null_cond = null_conditioning(ncfg.cond_dim, N, state.train_cfg.null_fill);

  for (int i = steps; i >= 1; --i) {
    const double t = static_cast<double>(i) / steps;
    const double s = static_cast<double>(i - 1) / steps;
    const std::vector<double> tv(N, t);

    Tensor eps_hat = state.net.forward(z, tv, cond, intervention);
    if (w_cfg != 1.0) {
      // guided estimate f(phi) + w * (f(h) - f(phi)); the conditional pass
      // above applies any intervention, the unconditional one never does
      Tensor eps_null = state.net.forward(z, tv, null_cond);
      for (size_t q = 0; q < eps_hat.v.size(); ++q)
        eps_hat.v[q] = eps_null.v[q] + w_cfg * (eps_hat.v[q] - eps_null.v[q]);
    }

    const double gt = sched.gamma(t);
    const double at = NoiseSchedule::alpha_of_gamma(gt);
    const double st = NoiseSchedule::sigma_of_gamma(gt);

    if (i == 1) {
      // posterior mean at the last step, mapped to data space
      for (size_t q = 0; q < z.v.size(); ++q) {
        double x = (z.v[q] - st * eps_hat.v[q]) / at;
        z.v[q] = x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x);
      }
      break;
    }

    const double gs = sched.gamma(s);
    const double as = NoiseSchedule::alpha_of_gamma(gs);
    const double ss = NoiseSchedule::sigma_of_gamma(gs);
    const double st2 = st * st, ss2 = ss * ss;
    const double var_ts = -st2 * std::expm1(gs - gt);  // sigma^2_{t|s}
    const double mean_z = (at / as) * ss2 / st2;
    const double mean_x = as * var_ts / st2;
    const double post_std = std::sqrt(var_ts * ss2 / st2);

    for (size_t q = 0; q < z.v.size(); ++q) {
      const double xhat = (z.v[q] - st * eps_hat.v[q]) / at;
      z.v[q] = mean_z * z.v[q] + mean_x * xhat + post_std * rng.normal();
    }
    if (!z.all_finite())
      throw std::runtime_error("sample: non-finite state at step " + std::to_string(i));
  }
  return z;
}

// ---- embedding module ----

namespace {

std::string embedding_signature(const nn::UNetConfig& c) {
  return io::fnv1a_hex(net_cfg_to_json(c).dump());
}

}  // namespace

EmbeddingModule get_embedding_module(DenoiserState& state) {
  EmbeddingModule mod;
  mod.signature = embedding_signature(state.net_cfg);
  for (const nn::Param* p : state.net.embedding_params())
    mod.tensors.emplace_back(p->name, std::vector<double>(p->w.begin(), p->w.end()));
  return mod;
}

void set_embedding_module(DenoiserState& state, const EmbeddingModule& module) {
  if (module.signature != embedding_signature(state.net_cfg))
    throw std::invalid_argument("set_embedding_module: config mismatch between donor and recipient");
  nn::ParamList params = state.net.embedding_params();
  if (params.size() != module.tensors.size())
    throw std::invalid_argument("set_embedding_module: tensor count mismatch");
  for (size_t i = 0; i < params.size(); ++i) {
    if (params[i]->name != module.tensors[i].first ||
        params[i]->w.size() != module.tensors[i].second.size())
      throw std::invalid_argument("set_embedding_module: shape mismatch at " +
                                  module.tensors[i].first);
    params[i]->w.assign(module.tensors[i].second.begin(), module.tensors[i].second.end());
  }
}

}  // namespace conceptlab::diffusion
