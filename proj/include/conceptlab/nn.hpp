#pragma once
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "conceptlab/rng.hpp"
#include "conceptlab/tensor.hpp"

// Minimal double-precision layer library with hand-written backward passes.
// Layers cache what they need during forward; backward accumulates parameter
// gradients and returns the input gradient. All randomness is injected via
// Rng so that training runs are reproducible bit for bit.
namespace conceptlab::nn {

struct Param {
  std::string name;
  DVec w;
  DVec g;

  void init(const std::string& n, size_t size) {
    name = n;
    w.assign(size, 0.0);
    g.assign(size, 0.0);
  }
  void zero_grad() { std::fill(g.begin(), g.end(), 0.0); }
};

using ParamList = std::vector<Param*>;

void gaussian_init(Param& p, double std, Rng& rng);

// ---- elementwise ----

double gelu(double x);
double gelu_grad(double x);

struct GeluT {
  Tensor x_cache;
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& gy) const;
};

struct GeluM {
  Mat x_cache;
  Mat forward(const Mat& x);
  Mat backward(const Mat& gy) const;
};

// ---- dense ----

struct Linear {
  int in = 0, out = 0;
  Param W, b;  // W stored as [out x in], column-major
  Mat x_cache;

  void build(const std::string& name, int in_dim, int out_dim, Rng& rng,
             double init_scale = 1.0);
  Mat forward(const Mat& x);           // x: [in x N] -> [out x N]
  Mat forward_const(const Mat& x) const;  // no cache (inference helpers)
  Mat backward(const Mat& gy);
  void collect(ParamList& out_params);
};

// ---- conv ----

struct Conv2d {
  int in_c = 0, out_c = 0, k = 3, stride = 1, pad = 1;
  Param W, b;  // W: [out_c x in_c*k*k]
  Tensor x_cache;
  Mat colsT_cache;  // im2col matrix kept between forward and backward

  void build(const std::string& name, int in_channels, int out_channels, int kernel,
             int stride_, int pad_, Rng& rng, double init_scale = 1.0);
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& gy);
  void collect(ParamList& out_params);
  int out_h(int h) const { return (h + 2 * pad - k) / stride + 1; }
  int out_w(int w) const { return (w + 2 * pad - k) / stride + 1; }
};

// Layer normalization over the channel dimension at each (n, y, x).
struct LayerNorm {
  int c = 0;
  double eps = 1e-6;
  Param gamma, beta;
  Tensor xhat_cache;
  DVec inv_std_cache;

  void build(const std::string& name, int channels);
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& gy);
  void collect(ParamList& out_params);
};

struct UpsampleNearest2x {
  Tensor forward(const Tensor& x) const;
  Tensor backward(const Tensor& gy) const;
};

// Single-head self-attention over spatial positions with pre-norm and a
// residual connection.
struct SelfAttention {
  int c = 0;
  LayerNorm ln;
  Linear q_proj, k_proj, v_proj, o_proj;
  // caches (per forward)
  Tensor x_cache;
  Mat q_cache, k_cache, v_cache;
  std::vector<Mat> attn_cache;  // per batch image, [P x P]

  void build(const std::string& name, int channels, Rng& rng);
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& gy);
  void collect(ParamList& out_params);
};

// Optional inference-time edit of every block's conditioning embedding:
//   e <- e + alpha * proj(e, d_plus) - beta * proj(e, d_minus)
// where d_plus/d_minus are the block's embeddings of two designated
// conditioning vectors. Throws if a direction embeds to (near) zero norm.
struct CondIntervention {
  double alpha = 0.0;
  double beta = 0.0;
  Vec cond_plus;   // conditioning-layout vector, e.g. "very blue"
  Vec cond_minus;  // e.g. "very large"
};

struct ResBlock {
  int in_c = 0, out_c = 0;
  LayerNorm ln1, ln2;
  GeluT act1, act2;
  Conv2d conv1, conv2;
  Linear temb_proj;           // time feature -> per-channel shift
  GeluM temb_act;
  Linear cond_fc1, cond_fc2;  // conditioning embedding MLP (per-block)
  GeluM cond_act;
  std::optional<Conv2d> skip;  // 1x1 when in_c != out_c
  Mat cbias_cache;             // (tb + cb) actually added, for backward

  void build(const std::string& name, int in_channels, int out_channels, int time_dim,
             int cond_dim, int cond_hidden, Rng& rng);
  // temb: [time_dim x N] shared time feature; cond: raw conditioning [cond_dim x N].
  // g_temb accumulates the gradient w.r.t. the shared time feature.
  Tensor forward(const Tensor& x, const Mat& temb, const Mat& cond,
                 const CondIntervention* iv = nullptr);
  Tensor backward(const Tensor& gy, Mat& g_temb);
  void collect(ParamList& out_params);
  void collect_cond(ParamList& out_params);  // embedding submodule only

  Mat cond_embed(const Mat& cond) const;  // inference helper, no caches
};

struct UNetConfig {
  std::vector<int> channels_per_level{64, 128, 256};
  int res_blocks_per_level = 2;
  bool bottleneck_attention = true;
  int time_embed_dim = 64;  // sinusoidal width (even)
  int time_hidden = 256;    // time MLP hidden and output width
  int cond_hidden = 256;    // conditioning MLP hidden width
  int image_channels = 3;
  int cond_dim = 4;
  int height = 32;  // training resolution; also the sampler's output size
  int width = 32;
};

// Conditional denoiser. forward() consumes the noisy batch, per-sample times
// in [0,1] and the conditioning matrix [cond_dim x N].
class UNet {
 public:
  void build(const UNetConfig& cfg, Rng& rng);
  Tensor forward(const Tensor& x, const std::vector<double>& t, const Mat& cond,
                 const CondIntervention* iv = nullptr);
  // Returns the gradient w.r.t. the input batch (needed for schedule grads).
  Tensor backward(const Tensor& gy);

  const ParamList& params() { return params_; }
  ParamList embedding_params();  // all per-block conditioning MLPs
  const UNetConfig& config() const { return cfg_; }
  size_t param_count() const;

  Mat time_features(const std::vector<double>& t);  // sinusoidal + MLP
  static Mat sinusoidal(const std::vector<double>& t, int dim);

 private:
  UNetConfig cfg_;
  Linear time_fc1_, time_fc2_;
  GeluM time_act_;
  Mat time_sin_cache_;
  Conv2d stem_;
  std::vector<std::vector<ResBlock>> enc_;
  std::vector<Conv2d> down_;
  ResBlock mid1_, mid2_;
  SelfAttention attn_;
  std::vector<std::vector<ResBlock>> dec_;
  std::vector<UpsampleNearest2x> up_;
  std::vector<Conv2d> up_conv_;
  LayerNorm out_ln_;
  GeluT out_act_;
  Conv2d out_conv_;
  std::vector<Tensor> skip_cache_;
  int levels_ = 0;
  ParamList params_;

  void register_params();
};

// Decoupled weight decay Adam. step() updates every parameter in place.
class AdamW {
 public:
  struct Config {
    double lr = 1e-3;
    double weight_decay = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  void attach(const ParamList& params, const Config& cfg);
  void step();
  long step_count() const { return t_; }

  // serialization support
  std::vector<DVec>& moments_m() { return m_; }
  std::vector<DVec>& moments_v() { return v_; }
  void set_step_count(long t) { t_ = t; }
  const Config& config() const { return cfg_; }

 private:
  Config cfg_;
  ParamList params_;
  std::vector<DVec> m_, v_;
  long t_ = 0;
};

void zero_grads(const ParamList& params);

}  // namespace conceptlab::nn
