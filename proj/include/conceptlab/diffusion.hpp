#pragma once
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "conceptlab/dgp.hpp"
#include "conceptlab/nn.hpp"
#include "conceptlab/rng.hpp"
#include "conceptlab/tensor.hpp"

namespace conceptlab::diffusion {

// Learned linear noise schedule of the continuous-time variational diffusion
// model: gamma(t) = gamma_start + t * softplus(slope_raw). The softplus keeps
// gamma_end strictly above gamma_start throughout training.
struct NoiseSchedule {
  nn::Param gamma_start;  // scalar
  nn::Param slope_raw;    // scalar, softplus(slope_raw) = gamma_end - gamma_start

  void init(double g_start = -5.0, double g_end = 10.0);
  double slope() const;
  double slope_raw_grad_factor() const;  // d softplus / d raw
  double gamma(double t) const;          // t in [0,1], throws otherwise
  double gamma_end() const { return gamma_start.w[0] + slope(); }
  // alpha_t^2 = sigmoid(-gamma), sigma_t^2 = sigmoid(gamma)
  static double alpha_of_gamma(double g);
  static double sigma_of_gamma(double g);
  void collect(nn::ParamList& out);
};

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  long total_steps = 20000;
  int batch_size = 128;
  double cond_drop_prob = 0.2;
  double null_fill = -1.0;
  double reconstruction_sigma = 1e-3;
  long checkpoint_every = 1000;
  long log_every = 100;

  void validate() const;
};

// x_t = alpha_t * x0 + sigma_t * noise (variance preserving).
Tensor diffuse(const Tensor& x0, double t, const Tensor& noise, const NoiseSchedule& sched);

// Full denoiser state: network, schedule, optimizer moments, step counter and
// training rng stream. Not copyable; clone() round-trips through the
// serializer so copies are bit-exact.
class DenoiserState {
 public:
  DenoiserState() = default;
  DenoiserState(const DenoiserState&) = delete;
  DenoiserState& operator=(const DenoiserState&) = delete;

  static std::unique_ptr<DenoiserState> create(const nn::UNetConfig& net_cfg,
                                               const TrainConfig& train_cfg, uint64_t seed);
  std::unique_ptr<DenoiserState> clone() const;

  void save(std::ostream& out) const;
  void save_file(const std::string& path) const;
  static std::unique_ptr<DenoiserState> load(std::istream& in);
  static std::unique_ptr<DenoiserState> load_file(const std::string& path);

  nn::UNetConfig net_cfg;
  TrainConfig train_cfg;
  nn::UNet net;
  NoiseSchedule schedule;
  nn::AdamW opt;
  long step = 0;
  uint64_t run_seed = 0;
  Rng rng;

  nn::ParamList all_params();  // network then schedule, fixed order
};

struct LossParts {
  double diffusion = 0.0;
  double reconstruction = 0.0;
  double prior = 0.0;
  double total = 0.0;
  int dropped_cond = 0;  // samples whose conditioning was replaced by the null vector
};

// VDM loss on one batch: diffusion term 0.5 * gamma'(t) * |eps_hat - eps|^2
// (per-sample t ~ U[0,1], conditioning dropped to the null vector with
// probability cond_drop_prob), plus the first-step reconstruction NLL under
// N(x, reconstruction_sigma^2) and the prior KL at t = 1 that anchors the
// learnable schedule endpoint. Accumulates parameter gradients (network and
// schedule) when compute_grads is set. Throws on a non-finite loss.
LossParts training_loss(const Tensor& x0, const Mat& cond, DenoiserState& state,
                        Rng& rng, bool compute_grads);

struct TrainLogRow {
  long step;
  double train_loss;
  double val_loss;
  double wall_time;
};

struct TrainResult {
  std::vector<std::string> checkpoint_paths;  // step 0, every checkpoint_every, final
  std::vector<long> checkpoint_steps;
  std::vector<TrainLogRow> log;
};

// Runs AdamW to total_steps, checkpointing into out_dir and writing
// train_log.csv. A 10% split of the data (by index) is held out for the
// validation loss. Resumes from resume_path when given; a non-finite loss
// aborts after the last good checkpoint.
TrainResult train(const dgp::Dataset& data, const nn::UNetConfig& net_cfg,
                  const TrainConfig& train_cfg, uint64_t seed, const std::string& out_dir,
                  const std::string& resume_path = "");

// Ancestral sampler with classifier-free guidance:
//   eps_hat = f(x_t | null) + w_cfg * (f(x_t | h) - f(x_t | null))
// over T uniform time steps; the final step returns the posterior mean,
// clipped to [0,1]. cond has one column per requested sample.
Tensor sample(DenoiserState& state, const Mat& cond, int steps, double w_cfg, Rng& rng,
              const nn::CondIntervention* intervention = nullptr);

// The per-block conditioning MLPs treated as one unit.
struct EmbeddingModule {
  std::string signature;  // derived from the network config
  std::vector<std::pair<std::string, std::vector<double>>> tensors;
};

EmbeddingModule get_embedding_module(DenoiserState& state);
void set_embedding_module(DenoiserState& state, const EmbeddingModule& module);

Mat null_conditioning(int cond_dim, int n, double fill = -1.0);

}  // namespace conceptlab::diffusion
