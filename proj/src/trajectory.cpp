#include "conceptlab/trajectory.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "conceptlab/io.hpp"

namespace conceptlab::trajectory {

TrajectoryPoint record(diffusion::DenoiserState& checkpoint, probe::ProbeState& probe,
                       const dgp::ConceptSpaceSpec& spec, const std::string& target_class,
                       int n_samples, int sampler_steps, double w_cfg, Rng& rng) {
  if (n_samples < 1) throw std::invalid_argument("record: n_samples must be >= 1");
  const dgp::ConceptVector mean = dgp::class_mean_vector(target_class, spec);
  const Vec h = dgp::conditioning_of(mean, spec);
  Mat cond = h.replicate(1, n_samples);
  Tensor images = diffusion::sample(checkpoint, cond, sampler_steps, w_cfg, rng);
  const probe::Evaluation ev = probe::evaluate(images, *&probe, target_class);
  TrajectoryPoint p;
  p.step = checkpoint.step;
  p.coords = ev.coordinates;
  p.per_axis_acc = ev.per_axis_accuracy;
  p.joint_acc = ev.joint_accuracy;
  return p;
}

std::optional<double> learning_speed(const Trajectory& traj, double threshold) {
  for (const TrajectoryPoint& p : traj.points)
    if (p.joint_acc >= threshold) return 1.0 / std::max<long>(p.step, 1);
  return std::nullopt;
}

std::optional<long> detect_turn(const Trajectory& traj, double angle_threshold_deg,
                                int smoothing_window) {
  const int n = static_cast<int>(traj.points.size());
  if (smoothing_window < 1) smoothing_window = 1;
  if (n < smoothing_window + 2)
    throw std::invalid_argument("detect_turn: need at least smoothing_window + 2 points");

  // collapse dwells: runs of points within a small radius of the run start
  // become one vertex whose step is the dwell's exit, so a long pause at a
  // memorized corner is attributed to the moment the trajectory departs
  double lo = 1e18, hi = -1e18;
  for (const auto& p : traj.points) {
    lo = std::min(lo, p.coords.minCoeff());
    hi = std::max(hi, p.coords.maxCoeff());
  }
  const double thr = std::max(1e-9, 0.02 * (hi - lo));
  std::vector<Vec> pos;
  std::vector<long> exit_step;
  for (const auto& p : traj.points) {
    if (!pos.empty() && (p.coords - pos.back()).norm() < thr) {
      exit_step.back() = p.step;  // still dwelling
      continue;
    }
    pos.push_back(p.coords);
    exit_step.push_back(p.step);
  }

  // direction horizon: at each vertex compare the displacement over the
  // previous w vertices with the next w; this averages noise without
  // blunting corner angles the way a moving average would
  const int m = static_cast<int>(pos.size());
  const int w = std::max(1, std::min(smoothing_window, (m - 1) / 2));
  double best_angle = -1.0;
  long best_step = -1;
  for (int i = w; i + w < m; ++i) {
    const Vec in = pos[i] - pos[i - w];
    const Vec out = pos[i + w] - pos[i];
    const double ni = in.norm(), no = out.norm();
    if (ni < 1e-12 || no < 1e-12) continue;
    double c = in.dot(out) / (ni * no);
    c = std::max(-1.0, std::min(1.0, c));
    const double angle = std::acos(c) * 180.0 / M_PI;
    if (angle > best_angle) {
      best_angle = angle;
      best_step = exit_step[i];
    }
  }
  if (best_angle > angle_threshold_deg) return best_step;
  return std::nullopt;
}

MemorizationTarget memorization_target(const Trajectory& traj,
                                       const std::vector<std::string>& training_classes,
                                       double angle_threshold_deg, int smoothing_window) {
  if (training_classes.empty())
    throw std::invalid_argument("memorization_target: no training classes");
  std::optional<long> turn;
  if (static_cast<int>(traj.points.size()) >= smoothing_window + 2)
    turn = detect_turn(traj, angle_threshold_deg, smoothing_window);

  std::vector<const TrajectoryPoint*> segment;
  if (turn) {
    for (const auto& p : traj.points)
      if (p.step < *turn) segment.push_back(&p);
  } else {
    const size_t half = (traj.points.size() + 1) / 2;
    for (size_t i = 0; i < half; ++i) segment.push_back(&traj.points[i]);
  }
  if (segment.empty())
    throw std::invalid_argument("memorization_target: empty pre-turn segment");

  // the bias is sustained proximity: the corner is chosen by mean distance
  // over the segment (a single transient excursion should not win), and the
  // reported distance is that corner's closest approach
  MemorizationTarget best;
  best.distance = std::numeric_limits<double>::infinity();
  double best_mean = std::numeric_limits<double>::infinity();
  for (const std::string& label : training_classes) {
    const Vec corner = dgp::class_corner(label);
    double mean = 0.0, closest = std::numeric_limits<double>::infinity();
    for (const TrajectoryPoint* p : segment) {
      const double d = (p->coords - corner).norm();
      mean += d;
      closest = std::min(closest, d);
    }
    mean /= segment.size();
    if (mean < best_mean) {
      best_mean = mean;
      best.distance = closest;
      best.class_label = label;
    }
  }
  return best;
}

AggregateTrajectory aggregate_seeds(const std::vector<Trajectory>& trajectories) {
  if (trajectories.empty()) throw std::invalid_argument("aggregate_seeds: no trajectories");
  const size_t n_pts = trajectories[0].points.size();
  for (const Trajectory& t : trajectories) {
    if (t.class_label != trajectories[0].class_label)
      throw std::invalid_argument("aggregate_seeds: class mismatch");
    if (t.points.size() != n_pts)
      throw std::invalid_argument("aggregate_seeds: mismatched step grids");
    for (size_t i = 0; i < n_pts; ++i)
      if (t.points[i].step != trajectories[0].points[i].step)
        throw std::invalid_argument("aggregate_seeds: mismatched step grids");
  }
  const int n = static_cast<int>(trajectories.size());
  const int d = static_cast<int>(trajectories[0].points[0].coords.size());
  AggregateTrajectory agg;
  agg.class_label = trajectories[0].class_label;
  agg.n = n;
  for (size_t i = 0; i < n_pts; ++i) {
    agg.steps.push_back(trajectories[0].points[i].step);
    Vec mean = Vec::Zero(d), sem = Vec::Zero(d);
    double jmean = 0.0, jsem = 0.0;
    for (const Trajectory& t : trajectories) {
      mean += t.points[i].coords;
      jmean += t.points[i].joint_acc;
    }
    mean /= n;
    jmean /= n;
    if (n > 1) {
      for (const Trajectory& t : trajectories) {
        sem += (t.points[i].coords - mean).cwiseAbs2();
        jsem += (t.points[i].joint_acc - jmean) * (t.points[i].joint_acc - jmean);
      }
      sem = (sem / (n - 1)).cwiseSqrt() / std::sqrt(static_cast<double>(n));
      jsem = std::sqrt(jsem / (n - 1)) / std::sqrt(static_cast<double>(n));
    }
    agg.mean_coords.push_back(mean);
    agg.sem_coords.push_back(sem);
    agg.mean_joint_acc.push_back(jmean);
    agg.sem_joint_acc.push_back(jsem);
  }
  return agg;
}

void save_trajectory_csv(const Trajectory& traj, const std::string& path) {
  const int d = traj.points.empty() ? 0 : static_cast<int>(traj.points[0].coords.size());
  std::vector<std::string> header{"step"};
  for (int a = 0; a < d; ++a) header.push_back("coord_" + std::to_string(a + 1));
  for (int a = 0; a < d; ++a) header.push_back("acc_" + std::to_string(a + 1));
  header.push_back("joint_acc");
  io::CsvWriter csv(path, header);
  for (const auto& p : traj.points) {
    std::vector<std::string> row{std::to_string(p.step)};
    for (int a = 0; a < d; ++a) row.push_back(io::fmt_double(p.coords[a]));
    for (int a = 0; a < d; ++a) row.push_back(io::fmt_double(p.per_axis_acc[a]));
    row.push_back(io::fmt_double(p.joint_acc));
    csv.row(row);
  }
}

Trajectory load_trajectory_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error("empty trajectory csv " + path);
  int cols = 1;
  for (char c : line) cols += c == ',';
  const int d = (cols - 2) / 2;
  Trajectory traj;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string field;
    TrajectoryPoint p;
    std::getline(ss, field, ',');
    p.step = std::stol(field);
    p.coords.resize(d);
    p.per_axis_acc.resize(d);
    for (int a = 0; a < d; ++a) {
      std::getline(ss, field, ',');
      p.coords[a] = std::stod(field);
    }
    for (int a = 0; a < d; ++a) {
      std::getline(ss, field, ',');
      p.per_axis_acc[a] = std::stod(field);
    }
    std::getline(ss, field, ',');
    p.joint_acc = std::stod(field);
    traj.points.push_back(std::move(p));
  }
  return traj;
}

void save_aggregate_csv(const AggregateTrajectory& agg, const std::string& path) {
  const int d = agg.mean_coords.empty() ? 0 : static_cast<int>(agg.mean_coords[0].size());
  std::vector<std::string> header{"step"};
  for (int a = 0; a < d; ++a) header.push_back("coord_" + std::to_string(a + 1));
  for (int a = 0; a < d; ++a) header.push_back("sem_coord_" + std::to_string(a + 1));
  header.push_back("joint_acc");
  header.push_back("sem_joint_acc");
  io::CsvWriter csv(path, header);
  for (size_t i = 0; i < agg.steps.size(); ++i) {
    std::vector<std::string> row{std::to_string(agg.steps[i])};
    for (int a = 0; a < d; ++a) row.push_back(io::fmt_double(agg.mean_coords[i][a]));
    for (int a = 0; a < d; ++a) row.push_back(io::fmt_double(agg.sem_coords[i][a]));
    row.push_back(io::fmt_double(agg.mean_joint_acc[i]));
    row.push_back(io::fmt_double(agg.sem_joint_acc[i]));
    csv.row(row);
  }
}

}  // namespace conceptlab::trajectory
