#include "conceptlab/interventions.hpp"

#include <cmath>
#include <iostream>
#include <stdexcept>

namespace conceptlab::interventions {

namespace {

double eval_conditioning(diffusion::DenoiserState& ckpt, probe::ProbeState& probe,
                         const Vec& cond, const std::string& target_class,
                         const EvalParams& ev, uint64_t entry_index,
                         const nn::CondIntervention* iv = nullptr) {
  Rng rng = Rng::derive(ev.eval_seed, "eval", entry_index);
  Mat cond_batch = cond.replicate(1, ev.n_samples);
  Tensor images = diffusion::sample(ckpt, cond_batch, ev.sampler_steps, ev.w_cfg, rng, iv);
  return probe::evaluate(images, probe, target_class).joint_accuracy;
}

// offsets of an axis inside the conditioning layout
struct AxisSpan {
  int offset = -1;
  int dims = 0;
};

AxisSpan cond_span(const dgp::ConceptSpaceSpec& spec, const std::string& axis) {
  AxisSpan span;
  int off = 0;
  for (int i : spec.active_axis_indices()) {
    const dgp::ConceptAxis& a = spec.axes[i];
    if (a.name == axis) {
      span.offset = off;
      span.dims = a.cond_dims();
      return span;
    }
    off += a.cond_dims();
  }
  throw std::invalid_argument("axis " + axis + " is not active in this spec");
}

Vec mean_conditioning(const dgp::ConceptSpaceSpec& spec, const std::string& target_class) {
  return dgp::conditioning_of(dgp::class_mean_vector(target_class, spec), spec);
}

}  // namespace

double naive_accuracy(diffusion::DenoiserState& checkpoint, probe::ProbeState& probe,
                      const Vec& conditioning, const std::string& target_class,
                      const EvalParams& ev) {
  return eval_conditioning(checkpoint, probe, conditioning, target_class, ev, 0);
}

OverpromptSpec OverpromptSpec::blue_defaults(const dgp::ConceptSpaceSpec& spec,
                                             const std::string& target_class) {
  const AxisSpan span = cond_span(spec, "color");
  OverpromptSpec os;
  os.base_conditioning = mean_conditioning(spec, target_class);
  const dgp::ConceptAxis* axis = spec.find_axis("color");
  os.direction = Vec::Zero(os.base_conditioning.size());
  os.direction.segment(span.offset, span.dims) = axis->value_means[1] - axis->value_means[0];
  const double triples[5][3] = {{0.40, 0.40, 0.60},
                                {0.35, 0.35, 0.65},
                                {0.25, 0.25, 0.75},
                                {0.15, 0.15, 0.85},
                                {0.05, 0.05, 0.95}};
  for (const auto& t : triples) {
    Vec h = os.base_conditioning;
    for (int j = 0; j < 3; ++j) h[span.offset + j] = t[j];
    os.sweep.push_back(h);
  }
  return os;
}

OverpromptSpec OverpromptSpec::along_direction(const dgp::ConceptSpaceSpec& spec,
                                               const std::string& target_class,
                                               const std::string& axis,
                                               const std::vector<double>& extrapolations) {
  const AxisSpan span = cond_span(spec, axis);
  const dgp::ConceptAxis* a = spec.find_axis(axis);
  if (a->categorical)
    throw std::invalid_argument("overprompt: cannot extrapolate a categorical axis");
  OverpromptSpec os;
  os.base_conditioning = mean_conditioning(spec, target_class);
  os.direction = Vec::Zero(os.base_conditioning.size());
  const Vec dir = a->value_means[1] - a->value_means[0];
  os.direction.segment(span.offset, span.dims) = dir;
  const int k = spec.active_index_of(axis);
  const Vec m_target = a->value_means[target_class.at(k) - '0'];
  for (double c : extrapolations) {
    Vec h = os.base_conditioning;
    h.segment(span.offset, span.dims) = m_target + c * dir;
    os.sweep.push_back(h);
  }
  return os;
}

SweepResult overprompt(diffusion::DenoiserState& checkpoint, const OverpromptSpec& spec,
                       probe::ProbeState& probe, const std::string& target_class,
                       const EvalParams& ev) {
  if (spec.sweep.empty()) throw std::invalid_argument("overprompt: empty sweep");
  SweepResult result;
  result.accuracies.assign(spec.sweep.size(), std::nan(""));
  int failures = 0;
  for (size_t i = 0; i < spec.sweep.size(); ++i) {
    double acc;
    try {
      acc = eval_conditioning(checkpoint, probe, spec.sweep[i], target_class, ev,
                              static_cast<uint64_t>(i));
    } catch (const std::exception& e) {
      std::cerr << "overprompt: sweep entry " << i << " failed: " << e.what() << "\n";
      ++failures;
      continue;
    }
    result.accuracies[i] = acc;
    if (result.best_index < 0 || acc > result.best_accuracy) {
      result.best_accuracy = acc;
      result.best_conditioning = spec.sweep[i];
      result.best_index = static_cast<int>(i);
    }
  }
  if (failures == static_cast<int>(spec.sweep.size()))
    throw std::runtime_error("overprompt: every sweep entry failed");
  return result;
}

LatentInterventionSpec LatentInterventionSpec::defaults(const dgp::ConceptSpaceSpec& spec,
                                                        const std::string& target_class) {
  LatentInterventionSpec ls;
  const Vec base = mean_conditioning(spec, target_class);
  ls.cond_plus = base;
  ls.cond_minus = base;
  const AxisSpan color = cond_span(spec, "color");
  ls.cond_plus[color.offset] = 0.05;
  ls.cond_plus[color.offset + 1] = 0.05;
  ls.cond_plus[color.offset + 2] = 0.95;
  const AxisSpan size = cond_span(spec, "size");
  ls.cond_minus[size.offset] = 0.7;
  return ls;
}

LatentResult latent_intervene(diffusion::DenoiserState& checkpoint, const Vec& conditioning,
                              const LatentInterventionSpec& spec, probe::ProbeState& probe,
                              const std::string& target_class, const EvalParams& ev) {
  if (spec.alpha_grid.empty() || spec.beta_grid.empty())
    throw std::invalid_argument("latent_intervene: empty grid");
  if (spec.cond_plus.size() != conditioning.size() ||
      spec.cond_minus.size() != conditioning.size())
    throw std::invalid_argument("latent_intervene: direction dimensionality mismatch");
  LatentResult result;
  bool first = true;
  uint64_t idx = 0;
  for (double alpha : spec.alpha_grid) {
    for (double beta : spec.beta_grid) {
      nn::CondIntervention iv;
      iv.alpha = alpha;
      iv.beta = beta;
      iv.cond_plus = spec.cond_plus;
      iv.cond_minus = spec.cond_minus;
      const double acc =
          eval_conditioning(checkpoint, probe, conditioning, target_class, ev, idx, &iv);
      result.accuracies.push_back(acc);
      if (first || acc > result.best_accuracy) {
        result.best_accuracy = acc;
        result.best_alpha = alpha;
        result.best_beta = beta;
        first = false;
      }
      ++idx;
    }
  }
  return result;
}

double patch_and_evaluate(const diffusion::DenoiserState& intermediate,
                          diffusion::DenoiserState& final_checkpoint,
                          probe::ProbeState& probe, const Vec& conditioning,
                          const std::string& target_class, const EvalParams& ev) {
  auto patched = intermediate.clone();
  diffusion::set_embedding_module(*patched, diffusion::get_embedding_module(final_checkpoint));
  return eval_conditioning(*patched, probe, conditioning, target_class, ev, 0);
}

Protocol protocol_from_string(const std::string& name) {
  if (name == "naive") return Protocol::Naive;
  if (name == "overprompt") return Protocol::Overprompt;
  if (name == "latent") return Protocol::Latent;
  if (name == "patch") return Protocol::Patch;
  throw std::invalid_argument("unknown protocol " + name);
}

std::string protocol_name(Protocol p) {
  switch (p) {
    case Protocol::Naive: return "naive";
    case Protocol::Overprompt: return "overprompt";
    case Protocol::Latent: return "latent";
    case Protocol::Patch: return "patch";
  }
  return "?";
}

ElicitationCurve elicitation_curve(const ElicitationInputs& in, Protocol protocol,
                                   probe::ProbeState& probe, const EvalParams& ev) {
  if (in.checkpoint_paths.empty())
    throw std::invalid_argument("elicitation_curve: no checkpoints");
  ElicitationCurve curve;
  curve.protocol = protocol;
  const Vec base = mean_conditioning(in.spec, in.target_class);

  std::unique_ptr<diffusion::DenoiserState> final_ckpt;
  if (protocol == Protocol::Patch) {
    const std::string& fp =
        in.final_checkpoint_path.empty() ? in.checkpoint_paths.back() : in.final_checkpoint_path;
    final_ckpt = diffusion::DenoiserState::load_file(fp);
  }

  long last_step = -1;
  for (const std::string& path : in.checkpoint_paths) {
    auto ckpt = diffusion::DenoiserState::load_file(path);
    if (ckpt->step <= last_step)
      throw std::invalid_argument("elicitation_curve: checkpoints must be step-ordered");
    last_step = ckpt->step;
    EvalParams step_ev = ev;
    step_ev.eval_seed = Rng::derive(ev.eval_seed, "ckpt", static_cast<uint64_t>(ckpt->step)).next_u64();
    double acc = 0.0;
    std::string params;
    switch (protocol) {
      case Protocol::Naive:
        acc = naive_accuracy(*ckpt, probe, base, in.target_class, step_ev);
        break;
      case Protocol::Overprompt: {
        const auto os = OverpromptSpec::blue_defaults(in.spec, in.target_class);
        const auto res = overprompt(*ckpt, os, probe, in.target_class, step_ev);
        acc = res.best_accuracy;
        params = "sweep_index=" + std::to_string(res.best_index);
        break;
      }
      case Protocol::Latent: {
        const auto ls = LatentInterventionSpec::defaults(in.spec, in.target_class);
        const auto res = latent_intervene(*ckpt, base, ls, probe, in.target_class, step_ev);
        acc = res.best_accuracy;
        params = "alpha=" + std::to_string(res.best_alpha) +
                 ";beta=" + std::to_string(res.best_beta);
        break;
      }
      case Protocol::Patch:
        acc = patch_and_evaluate(*ckpt, *final_ckpt, probe, base, in.target_class, step_ev);
        break;
    }
    curve.steps.push_back(ckpt->step);
    curve.accuracy.push_back(acc);
    curve.best_params.push_back(params);
  }

  const long cap = first_sustained_crossing(curve.steps, curve.accuracy,
                                            in.capability_threshold, in.persistence);
  if (cap >= 0)
    curve.capability =
        trajectory::CapabilityPoint{cap, protocol_name(protocol), in.capability_threshold};
  return curve;
}

long first_sustained_crossing(const std::vector<long>& steps,
                              const std::vector<double>& accuracy, double threshold,
                              int persistence) {
  const int need = std::max(1, persistence);
  for (size_t i = 0; i + need <= accuracy.size(); ++i) {
    bool ok = true;
    for (int k = 0; k < need; ++k)
      if (accuracy[i + k] < threshold) ok = false;
    if (ok) return steps[i];
  }
  return -1;
}

}  // namespace conceptlab::interventions
