#pragma once
#include <array>
#include <functional>
#include <string>
#include <vector>

namespace conceptlab::landscape {

using Point = std::array<double, 2>;

// Parameters of the phenomenological gradient flows. sigma1/sigma2 are the
// concept-signal magnitudes of the two coordinates; the asymmetry a is mapped
// from them as a = 1 + |sigma1 - sigma2| unless set explicitly.
struct LandscapeParams {
  double sigma1 = 1.0;
  double sigma2 = 0.5;
  double a = 1.5;
  double t_hat1 = 30.0;
  double t_hat2 = 60.0;
  Point z_tilde{0.0, 0.0};  // initial, biased target
  Point z_hat{1.0, 1.0};    // true target
  double s = 0.01;          // underspecification impact
  double alpha = 0.0;       // masked-prompt percentage in [0, 100]

  static LandscapeParams from_signals(double sigma1, double sigma2);
  void validate() const;
};

// Sigmoid interpolation from z_tilde to z_hat centered at t_hat.
double target_d(double t, double t_hat, double z_tilde, double z_hat);

// Gradient of the two-phase loss. The stronger concept relaxes to its true
// target at rate a; the weaker one tracks the delayed sigmoid target at rate
// 1/a, which produces the near-corner excursion and the sudden turn.
Point grad_two_phase(const Point& z, double t, const LandscapeParams& p);

// Gradient of the underspecification loss: quadratic well at (1 - s*alpha, 1).
Point grad_underspec(const Point& z, const LandscapeParams& p);

struct FlowTrajectory {
  std::vector<double> times;
  std::vector<Point> states;
  LandscapeParams params;

  const Point& back() const { return states.back(); }
  double min_distance_to(const Point& q) const;
  // first index whose state lies within radius of q, or -1
  int first_entry(const Point& q, double radius) const;
};

using GradFn = std::function<Point(const Point&, double, const LandscapeParams&)>;

// Explicit Euler: z <- z - dt * grad(z, t). Throws on a non-finite state,
// naming the offending step. Stability requires dt * max curvature < 2.
FlowTrajectory integrate(const GradFn& grad, const Point& z0, double dt, double t_max,
                         const LandscapeParams& p);

// Configures (z_tilde, z_hat) for the class and integrates the two-phase flow.
// class 00: (0,0) -> (0,0). class 11: biased corner -> (1,1), where the
// biased corner is (1,0) if sigma1 > sigma2 and (0,1) otherwise.
FlowTrajectory simulate_ood(const LandscapeParams& p, const std::string& class_label,
                            const Point& z0 = {0.5, 0.5}, double dt = 0.01,
                            double t_max = 120.0);

// Integrates the underspecification flow from (0,0) for each masking percentage.
std::vector<FlowTrajectory> simulate_underspec(const LandscapeParams& p,
                                               const std::vector<double>& alphas,
                                               double dt = 0.01, double t_max = 20.0);

// Frozen-time loss value of the two-phase flow (energy-descent checks).
double loss_two_phase(const Point& z, double t, const LandscapeParams& p);

}  // namespace conceptlab::landscape
