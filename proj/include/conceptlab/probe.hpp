#pragma once
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "conceptlab/dgp.hpp"
#include "conceptlab/nn.hpp"
#include "conceptlab/rng.hpp"
#include "conceptlab/tensor.hpp"

namespace conceptlab::probe {

struct ProbeConfig {
  std::vector<int> channels{16, 32, 64};  // encoder widths; last one is the output width
  long train_steps = 10000;
  int images_per_class = 4096;
  int batch_size = 64;
  double learning_rate = 1e-3;
  double weight_decay = 1e-5;
  double accuracy_target = 0.99;  // required held-out per-axis accuracy
  long eval_every = 200;
  bool max_pooling = false;  // average pooling by default
};

// Global pooling over spatial dims, average or max.
struct GlobalPool {
  bool use_max = false;
  Tensor x_cache;
  std::vector<int> argmax_cache;
  Mat forward(const Tensor& x);  // -> [C x N]
  Tensor backward(const Mat& gy);
};

// Reduced-width encoder (conv/LN/GELU blocks with stride-2 downsampling)
// followed by global pooling and one linear head per concept axis.
class ProbeNet {
 public:
  void build(const ProbeConfig& cfg, int n_axes, Rng& rng);
  Mat features(const Tensor& x);                  // pooled [C x N]
  std::vector<Mat> forward(const Tensor& x);      // per-axis logits [2 x N]
  void backward(const std::vector<Mat>& g_logits);
  const nn::ParamList& params() { return params_; }

 private:
  ProbeConfig cfg_;
  int n_axes_ = 0;
  nn::Conv2d stem_;
  std::vector<nn::Conv2d> convs_;
  std::vector<nn::LayerNorm> norms_;
  std::vector<nn::GeluT> acts_;
  std::vector<nn::Conv2d> downs_;
  std::vector<int> layout_;  // per level: number of conv blocks
  GlobalPool pool_;
  std::vector<nn::Linear> heads_;
  nn::ParamList params_;
};

class ProbeState {
 public:
  ProbeState() = default;
  ProbeState(const ProbeState&) = delete;
  ProbeState& operator=(const ProbeState&) = delete;

  ProbeConfig cfg;
  dgp::ConceptSpaceSpec spec;            // the spec the probe was trained for
  std::vector<std::string> axis_names;   // active axes, in order
  ProbeNet net;
  double held_out_accuracy = 0.0;
  uint64_t seed = 0;

  void save_file(const std::string& path) const;
  static std::unique_ptr<ProbeState> load_file(const std::string& path);
};

// Trains per-concept heads on maximally diverse data sampled from the spec
// (all 2^d classes). Stops early once every axis reaches accuracy_target on
// the 10% held-out split; throws with per-axis confusion counts if the target
// is not reached within train_steps.
std::unique_ptr<ProbeState> train_probe(const dgp::ConceptSpaceSpec& spec,
                                        const ProbeConfig& cfg, uint64_t seed);

struct Evaluation {
  Vec coordinates;        // [d]: mean P(axis value = 1) over the batch
  Vec per_axis_accuracy;  // [d]
  double joint_accuracy = 0.0;
};

// Coordinates are target-independent; accuracies compare argmax labels to the
// target class bits.
Vec concept_coordinates(const Tensor& images, ProbeState& probe);
Evaluation evaluate(const Tensor& images, ProbeState& probe, const std::string& target_class);

}  // namespace conceptlab::probe
