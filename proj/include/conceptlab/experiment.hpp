#pragma once
#include <string>
#include <vector>

#include "conceptlab/diffusion.hpp"
#include "conceptlab/landscape.hpp"
#include "conceptlab/probe.hpp"
#include "conceptlab/toml.hpp"

namespace conceptlab::experiment {

inline constexpr const char* kToolVersion = "0.1.0";

// One resolved experiment: data-generating geometry, training and probe
// configuration, sweeps, evaluation knobs and landscape-simulation inputs.
// Stages consume the same config and are idempotent per (stage, config hash).
struct ExperimentConfig {
  std::string kind = "train";  // gen-data|train|probe-train|evaluate|intervene|simulate|report
  std::string name = "custom";
  std::string profile = "desk";  // desk | paper
  std::string out_dir;
  std::vector<uint64_t> seeds{1, 2, 3, 4, 5};
  uint64_t probe_seed = 9001;

  // concept-space geometry
  std::vector<std::string> axes{"color", "size"};
  double color_separation = 0.5;
  double size_separation = 0.5;
  double background_separation = 0.5;
  int resolution = 16;
  int n_per_class = 1024;
  std::vector<std::string> train_classes{"00", "01", "10"};
  std::vector<std::string> eval_classes{"00", "01", "10", "11"};
  std::string ood_class = "11";

  // sweeps; empty means a single "base" variant
  std::vector<double> signal_sweep;   // color separations
  std::vector<double> masking_sweep;  // masked-prompt percentages in [0,100]
  std::vector<double> cfg_sweep;      // evaluation-time guidance scales

  // masking target (used when masking_sweep is set or mask_fraction > 0)
  double mask_fraction = 0.0;
  std::string mask_class = "01";
  std::string mask_axis = "color";

  diffusion::TrainConfig train;
  nn::UNetConfig net;
  probe::ProbeConfig probe_cfg;

  int eval_samples = 32;
  int sampler_steps = 50;
  double w_cfg = 1.0;
  std::vector<std::string> protocols{"naive", "overprompt", "latent", "patch"};
  int protocol_stride = 1;  // run protocols on every k-th checkpoint protocols on every k-th checkpoint
  double capability_threshold = 0.5;
  double accuracy_threshold = 0.8;

  // landscape simulation inputs
  std::vector<double> sigma_pairs{1.0, 0.5, 0.5, 1.0};  // flattened (sigma1, sigma2)
  std::vector<double> underspec_alphas{0.0, 25.0, 50.0, 75.0, 100.0};
  double landscape_dt = 0.01;
  double landscape_t_max = 120.0;

  void apply_profile();
  void validate() const;
  dgp::ConceptSpaceSpec make_spec(double color_sep, double mask_pct_unused = -1.0) const;
  std::vector<std::string> variants() const;  // "base", "sigXX", "maskXXX"
  double variant_color_separation(const std::string& variant) const;
  double variant_mask_fraction(const std::string& variant) const;

  toml::Table to_toml() const;
  static ExperimentConfig from_toml(const toml::Table& t);
  static ExperimentConfig from_file(const std::string& path);
  std::string config_hash() const;  // hash of the canonical TOML dump, kind excluded
};

// Known presets: fig3, fig4, fig5, fig6, fig8, fig10b, appd5, appd6.
ExperimentConfig preset(const std::string& name, const std::string& profile = "desk");
std::vector<std::string> preset_names();

struct RunOptions {
  bool force = false;
  int jobs = 1;
};

// Executes the config's stage. Returns 0 on success; stage completion and
// file checksums are tracked in <out_dir>/manifest.json.
int run(const ExperimentConfig& cfg, const RunOptions& opts = {});

// Consolidated report over a populated run directory (summary.json plus
// plot-ready CSVs). Throws listing missing stages when inputs are absent.
void write_report(const std::string& run_dir);

// Spearman rank correlation (average ranks on ties).
double spearman(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace conceptlab::experiment
