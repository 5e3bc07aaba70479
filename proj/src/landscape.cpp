#include "conceptlab/landscape.hpp"

#include <cmath>
#include <stdexcept>

namespace conceptlab::landscape {

LandscapeParams LandscapeParams::from_signals(double s1, double s2) {
  LandscapeParams p;
  p.sigma1 = s1;
  p.sigma2 = s2;
  p.a = 1.0 + std::abs(s1 - s2);
  return p;
}

void LandscapeParams::validate() const {
  if (a <= 0.0) throw std::invalid_argument("landscape: a must be positive");
  if (sigma1 < 0.0 || sigma2 < 0.0)
    throw std::invalid_argument("landscape: signals must be non-negative");
  for (double v : {z_tilde[0], z_tilde[1], z_hat[0], z_hat[1]})
    if (v < 0.0 || v > 1.0)
      throw std::invalid_argument("landscape: targets must lie in [0,1]^2");
}

double target_d(double t, double t_hat, double z_tilde, double z_hat) {
  return z_tilde + (z_hat - z_tilde) / (1.0 + std::exp(-(t - t_hat)));
}

Point grad_two_phase(const Point& z, double t, const LandscapeParams& p) {
  if (p.sigma1 > p.sigma2) {
    // concept 1 strong: fixed target z_hat1, rate a; concept 2 weak: sigmoid
    // target switching at t_hat2, rate 1/a
    const double d2 = target_d(t, p.t_hat2, p.z_tilde[1], p.z_hat[1]);
    return {p.a * (z[0] - p.z_hat[0]), (z[1] - d2) / p.a};
  }
  const double d1 = target_d(t, p.t_hat1, p.z_tilde[0], p.z_hat[0]);
  return {(z[0] - d1) / p.a, p.a * (z[1] - p.z_hat[1])};
}

double loss_two_phase(const Point& z, double t, const LandscapeParams& p) {
  if (p.sigma1 > p.sigma2) {
    const double d2 = target_d(t, p.t_hat2, p.z_tilde[1], p.z_hat[1]);
    const double e1 = z[0] - p.z_hat[0], e2 = z[1] - d2;
    return 0.5 * p.a * e1 * e1 + 0.5 / p.a * e2 * e2;
  }
  const double d1 = target_d(t, p.t_hat1, p.z_tilde[0], p.z_hat[0]);
  const double e1 = z[0] - d1, e2 = z[1] - p.z_hat[1];
  return 0.5 / p.a * e1 * e1 + 0.5 * p.a * e2 * e2;
}

Point grad_underspec(const Point& z, const LandscapeParams& p) {
  return {2.0 * (z[0] - (1.0 - p.s * p.alpha)), 2.0 * (z[1] - 1.0)};
}

double FlowTrajectory::min_distance_to(const Point& q) const {
  double best = std::numeric_limits<double>::infinity();
  for (const Point& z : states)
    best = std::min(best, std::hypot(z[0] - q[0], z[1] - q[1]));
  return best;
}

int FlowTrajectory::first_entry(const Point& q, double radius) const {
  for (size_t i = 0; i < states.size(); ++i)
    if (std::hypot(states[i][0] - q[0], states[i][1] - q[1]) <= radius)
      return static_cast<int>(i);
  return -1;
}

FlowTrajectory integrate(const GradFn& grad, const Point& z0, double dt, double t_max,
                         const LandscapeParams& p) {
  if (dt <= 0.0 || t_max <= 0.0)
    throw std::invalid_argument("integrate: dt and t_max must be positive");
  FlowTrajectory traj;
  traj.params = p;
  const size_t n_steps = static_cast<size_t>(std::llround(t_max / dt));
  traj.times.reserve(n_steps + 1);
  traj.states.reserve(n_steps + 1);
  Point z = z0;
  double t = 0.0;
  traj.times.push_back(t);
  traj.states.push_back(z);
  for (size_t k = 0; k < n_steps; ++k) {
    const Point g = grad(z, t, p);
    z = {z[0] - dt * g[0], z[1] - dt * g[1]};
    t = (k + 1) * dt;
    if (!std::isfinite(z[0]) || !std::isfinite(z[1]))
      throw std::runtime_error("integrate: non-finite state at step " + std::to_string(k + 1));
    traj.times.push_back(t);
    traj.states.push_back(z);
  }
  return traj;
}

FlowTrajectory simulate_ood(const LandscapeParams& p, const std::string& class_label,
                            const Point& z0, double dt, double t_max) {
  LandscapeParams q = p;
  q.validate();
  Point start = z0;
  if (class_label == "00") {
    q.z_tilde = {0.0, 0.0};
    q.z_hat = {0.0, 0.0};
  } else if (class_label == "11") {
    q.z_hat = {1.0, 1.0};
    q.z_tilde = (q.sigma1 > q.sigma2) ? Point{1.0, 0.0} : Point{0.0, 1.0};
  } else {
    throw std::invalid_argument("simulate_ood: unsupported class " + class_label);
  }
  return integrate([](const Point& z, double t, const LandscapeParams& pp) {
    return grad_two_phase(z, t, pp);
  }, start, dt, t_max, q);
}

std::vector<FlowTrajectory> simulate_underspec(const LandscapeParams& p,
                                               const std::vector<double>& alphas,
                                               double dt, double t_max) {
  std::vector<FlowTrajectory> out;
  for (double alpha : alphas) {
    if (alpha < 0.0 || alpha > 100.0)
      throw std::invalid_argument("simulate_underspec: alpha must lie in [0,100]");
    LandscapeParams q = p;
    q.alpha = alpha;
    out.push_back(integrate([](const Point& z, double, const LandscapeParams& pp) {
      return grad_underspec(z, pp);
    }, {0.0, 0.0}, dt, t_max, q));
  }
  return out;
}

}  // namespace conceptlab::landscape
