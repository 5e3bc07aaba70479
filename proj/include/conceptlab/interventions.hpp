#pragma once
#include <optional>
#include <string>
#include <vector>

#include "conceptlab/diffusion.hpp"
#include "conceptlab/probe.hpp"
#include "conceptlab/trajectory.hpp"

namespace conceptlab::interventions {

// Shared sampling/eval knobs for all elicitation protocols. Every protocol
// entry draws its own rng stream derived from (eval_seed, "eval", index), so
// enlarging a sweep never changes earlier entries and a singleton sweep or an
// identity intervention reproduces the naive evaluation bit for bit.
struct EvalParams {
  int n_samples = 32;
  int sampler_steps = 250;
  double w_cfg = 1.0;
  uint64_t eval_seed = 0;
};

double naive_accuracy(diffusion::DenoiserState& checkpoint, probe::ProbeState& probe,
                      const Vec& conditioning, const std::string& target_class,
                      const EvalParams& ev);

struct OverpromptSpec {
  Vec base_conditioning;
  Vec direction;           // m1 - m0 on the swept axis, zero elsewhere
  std::vector<Vec> sweep;  // full conditioning vectors to evaluate

  // The five color conditionings used for overprompting toward blue,
  // substituted into the class's mean conditioning.
  static OverpromptSpec blue_defaults(const dgp::ConceptSpaceSpec& spec,
                                      const std::string& target_class);
  // Generic: axis value set to m_target + c * (m1 - m0) for each c.
  static OverpromptSpec along_direction(const dgp::ConceptSpaceSpec& spec,
                                        const std::string& target_class,
                                        const std::string& axis,
                                        const std::vector<double>& extrapolations);
};

struct SweepResult {
  double best_accuracy = 0.0;
  Vec best_conditioning;
  int best_index = -1;
  std::vector<double> accuracies;
};

// Evaluates every sweep entry and reports the maximum joint accuracy. Entries
// whose sampler fails are skipped with a warning; throws if all fail.
SweepResult overprompt(diffusion::DenoiserState& checkpoint, const OverpromptSpec& spec,
                       probe::ProbeState& probe, const std::string& target_class,
                       const EvalParams& ev);

struct LatentInterventionSpec {
  Vec cond_plus;   // embedded per block to form the "+" concept direction
  Vec cond_minus;  // the "-" concept direction
  std::vector<double> alpha_grid{0.1, 1.0, 2.0, 4.0};
  std::vector<double> beta_grid{0.1, 0.25, 0.5, 1.0};

  // Blue direction from RGB (0.05, 0.05, 0.95) and large direction from
  // size 0.7, substituted into the class's mean conditioning.
  static LatentInterventionSpec defaults(const dgp::ConceptSpaceSpec& spec,
                                         const std::string& target_class);
};

struct LatentResult {
  double best_accuracy = 0.0;
  double best_alpha = 0.0;
  double best_beta = 0.0;
  std::vector<double> accuracies;  // row-major over (alpha, beta)
};

// Grid search over (alpha, beta); each point edits every residual block's
// conditioning embedding via projections onto the two concept directions.
LatentResult latent_intervene(diffusion::DenoiserState& checkpoint, const Vec& conditioning,
                              const LatentInterventionSpec& spec, probe::ProbeState& probe,
                              const std::string& target_class, const EvalParams& ev);

// Replaces the intermediate checkpoint's conditioning-embedding submodule
// with the final checkpoint's (on a private copy) and scores naive prompting.
double patch_and_evaluate(const diffusion::DenoiserState& intermediate,
                          diffusion::DenoiserState& final_checkpoint,
                          probe::ProbeState& probe, const Vec& conditioning,
                          const std::string& target_class, const EvalParams& ev);

enum class Protocol { Naive, Overprompt, Latent, Patch };
Protocol protocol_from_string(const std::string& name);
std::string protocol_name(Protocol p);

struct ElicitationCurve {
  Protocol protocol = Protocol::Naive;
  std::vector<long> steps;
  std::vector<double> accuracy;
  std::vector<std::string> best_params;  // human-readable argmax per checkpoint
  std::optional<trajectory::CapabilityPoint> capability;
};

struct ElicitationInputs {
  std::vector<std::string> checkpoint_paths;  // step-ordered
  std::string final_checkpoint_path;          // donor for the patch protocol
  dgp::ConceptSpaceSpec spec;
  std::string target_class;
  double capability_threshold = 0.5;
  int persistence = 2;  // consecutive checkpoints required to sustain
};

// Applies the protocol at every checkpoint and finds the first sustained
// threshold crossing. Per-checkpoint rng streams derive from
// (eval_seed, "ckpt", step).
ElicitationCurve elicitation_curve(const ElicitationInputs& in, Protocol protocol,
                                   probe::ProbeState& probe, const EvalParams& ev);

// First step whose accuracy stays at or above the threshold for `persistence`
// consecutive entries; -1 when never sustained.
long first_sustained_crossing(const std::vector<long>& steps,
                              const std::vector<double>& accuracy, double threshold,
                              int persistence);

}  // namespace conceptlab::interventions
