#pragma once
#include <optional>
#include <string>
#include <vector>

#include "conceptlab/diffusion.hpp"
#include "conceptlab/probe.hpp"

namespace conceptlab::trajectory {

struct TrajectoryPoint {
  long step = 0;
  Vec coords;        // [0,1]^d concept-space coordinates
  Vec per_axis_acc;  // [0,1]^d
  double joint_acc = 0.0;
  std::optional<double> loss_train;
  std::optional<double> loss_val;
};

struct Trajectory {
  std::string class_label;
  uint64_t seed = 0;
  double signal_level = 0.0;  // metadata for sweep reporting
  std::vector<TrajectoryPoint> points;
};

struct CapabilityPoint {
  long step = 0;
  std::string protocol;
  double threshold = 0.5;
};

// Samples n_samples images conditioned on the class's mean conditioning
// vector and scores them with the probe.
TrajectoryPoint record(diffusion::DenoiserState& checkpoint, probe::ProbeState& probe,
                       const dgp::ConceptSpaceSpec& spec, const std::string& target_class,
                       int n_samples, int sampler_steps, double w_cfg, Rng& rng);

// 1 / (first step whose joint accuracy reaches threshold); nullopt if never.
std::optional<double> learning_speed(const Trajectory& traj, double threshold = 0.8);

// Step at the sharpest smoothed turning angle if it exceeds the threshold.
std::optional<long> detect_turn(const Trajectory& traj, double angle_threshold_deg = 60.0,
                                int smoothing_window = 3);

struct MemorizationTarget {
  std::string class_label;
  double distance = 0.0;
};

// Training-class corner closest to the trajectory over its pre-turn segment
// (first half when no turn is detected).
MemorizationTarget memorization_target(const Trajectory& traj,
                                       const std::vector<std::string>& training_classes,
                                       double angle_threshold_deg = 60.0,
                                       int smoothing_window = 3);

struct AggregateTrajectory {
  std::string class_label;
  std::vector<long> steps;
  std::vector<Vec> mean_coords;
  std::vector<Vec> sem_coords;  // sample-stddev / sqrt(n)
  std::vector<double> mean_joint_acc;
  std::vector<double> sem_joint_acc;
  int n = 0;
};

AggregateTrajectory aggregate_seeds(const std::vector<Trajectory>& trajectories);

void save_trajectory_csv(const Trajectory& traj, const std::string& path);
Trajectory load_trajectory_csv(const std::string& path);
void save_aggregate_csv(const AggregateTrajectory& agg, const std::string& path);

}  // namespace conceptlab::trajectory
