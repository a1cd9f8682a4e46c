#pragma once

#include <cmath>
#include <cstdint>
#include <utility>

#include "gdk/common.hpp"
#include "gdk/diffusion.hpp"
#include "gdk/layout.hpp"
#include "gdk/motion.hpp"
#include "gdk/net.hpp"
#include "gdk/rng.hpp"

// Power-interpolated noise schedule and the deterministic second-order Heun
// integrator for the probability-flow ODE, both directions.

namespace gdk {

struct ScheduleConfig {
  int n_steps = 16;
  double rho = 9.0;
  double t_min = 0.02;
  double t_max = 80.0;

  void validate() const {
    require(n_steps >= 2, "schedule: need at least two levels");
    require(rho > 0.0, "schedule: rho must be positive");
    require(t_min > 0.0 && t_min < t_max, "schedule: need 0 < t_min < t_max");
  }
};

// Noise levels in strictly decreasing order, levels(0) = t_max and
// levels(n-1) = t_min exactly. Generation schedules additionally carry a
// terminal exact zero, which never appears in levels itself.
struct SigmaSchedule {
  ScheduleConfig params;
  VecD levels;
  bool terminal_zero = false;

  Index step_count() const { return levels.size() - 1 + (terminal_zero ? 1 : 0); }
};

enum class SolveDirection { NoiseToData, DataToNoise };

inline SigmaSchedule build_schedule(const ScheduleConfig& cfg, bool terminal_zero = false) {
  cfg.validate();
  const int n = cfg.n_steps;
  const double a = std::pow(cfg.t_max, 1.0 / cfg.rho);
  const double b = std::pow(cfg.t_min, 1.0 / cfg.rho);
  SigmaSchedule s;
  s.params = cfg;
  s.terminal_zero = terminal_zero;
  s.levels.resize(n);
  for (int i = 0; i < n; ++i) {
    const double frac = static_cast<double>(i) / static_cast<double>(n - 1);
    s.levels(i) = std::pow(a + frac * (b - a), cfg.rho);
  }
  // The power round trip misses the ends by an ulp or two; the endpoints are
  // part of the contract, so pin them.
  s.levels(0) = cfg.t_max;
  s.levels(n - 1) = cfg.t_min;
  for (int i = 0; i + 1 < n; ++i)
    check(s.levels(i) > s.levels(i + 1), "schedule: levels must decrease strictly");
  return s;
}

inline SigmaSchedule build_schedule(int n_steps, double rho, double t_min, double t_max,
                                    bool terminal_zero = false) {
  return build_schedule(ScheduleConfig{n_steps, rho, t_min, t_max}, terminal_zero);
}

// The level sequence one solve walks through, in traversal order. Only the
// noise-to-data direction may carry the terminal zero.
inline VecD integration_times(const SigmaSchedule& s, SolveDirection dir) {
  require(s.levels.size() >= 2, "schedule: need at least two levels");
  if (dir == SolveDirection::NoiseToData) {
    if (!s.terminal_zero) return s.levels;
    VecD t(s.levels.size() + 1);
    t.head(s.levels.size()) = s.levels;
    t(t.size() - 1) = 0.0;
    return t;
  }
  require(!s.terminal_zero, "schedule: data-to-noise cannot pass through zero");
  return s.levels.reverse();
}

template <typename Scalar>
Mat<Scalar> pf_ode_drift(const Mat<Scalar>& x, const Mat<Scalar>& d, double t) {
  require(t > 0.0, "pf_ode_drift: t must be positive");
  require(d.rows() == x.rows() && d.cols() == x.cols(), "pf_ode_drift: shape mismatch");
  return (x - d) / static_cast<Scalar>(t);
}

// Drift field of a denoiser with an exact input Jacobian: value(x, t) is the
// PF-ODE drift and vjp(x, t, v) its transposed-Jacobian product. vjp is only
// valid immediately after value at the same (x, t); stateless denoisers do
// not care, the network-backed one replays its tape.
template <typename Den, typename Scalar = double>
struct DenoiserDrift {
  Den& den;

  Mat<Scalar> value(const Mat<Scalar>& x, double t) const {
    return pf_ode_drift<Scalar>(x, den.value(x, t), t);
  }
  Mat<Scalar> vjp(const Mat<Scalar>& x, double t, const Mat<Scalar>& v) const {
    require(t > 0.0, "pf_ode_drift: t must be positive");
    return (v - den.vjp(x, t, v)) / static_cast<Scalar>(t);
  }
};

// Trained-model denoiser over full-valid (trimmed) states: every column of x
// is a real frame. The group weights shape only the network input, so the
// state and the returned denoised estimate live in plain normalized space
// for every mode.
template <typename Scalar>
struct NetDenoiser {
  DenoiserNet<Scalar>& net;
  const FeatureLayout& layout;
  VecD w;
  Preconditioner pc;

  Mat<Scalar> value(const Mat<Scalar>& x, double t) {
    last = precondition_coeffs(t, pc.sigma_data, pc.c_noise_scale);
    MotionSample<Scalar> xt{x, x.cols()};
    const auto model = [&](const MotionSample<Scalar>& in, double c_noise) {
      return net.forward(in.frames, in.valid_len, c_noise);
    };
    return denoise(model, xt, t, layout, w, pc).frames;
  }

  // Valid right after value at the same (x, t); reusable across probes.
  Mat<Scalar> vjp(const Mat<Scalar>& x, double t, const Mat<Scalar>& v) {
    (void)x;
    (void)t;
    Mat<Scalar> dz = net.input_vjp(static_cast<Scalar>(last.c_out) * v);
    const Vec<Scalar> scale = expand_per_group<Scalar>(layout, w);
    dz.array().colwise() *= (static_cast<Scalar>(last.c_in) * scale).array();
    return static_cast<Scalar>(last.c_skip) * v + dz;
  }

  PrecondCoeffs last{};
};

// Euler predictor plus trapezoidal corrector per interval; the corrector is
// dropped only on a terminal exact-zero interval, where the drift is
// undefined. Two evaluations per ordinary interval, one on the zero tail.
template <typename Scalar, typename DriftFn>
Mat<Scalar> heun_solve(DriftFn&& drift, Mat<Scalar> x, const SigmaSchedule& sched,
                       SolveDirection dir, long* nfe = nullptr) {
  const VecD times = integration_times(sched, dir);
  long evals = 0;
  for (Index i = 0; i + 1 < times.size(); ++i) {
    const double t0 = times(i), t1 = times(i + 1);
    const Scalar h = static_cast<Scalar>(t1 - t0);
    const Mat<Scalar> d0 = drift.value(x, t0);
    ++evals;
    if (t1 == 0.0) {
      x += h * d0;
    } else {
      const Mat<Scalar> d1 = drift.value(Mat<Scalar>(x + h * d0), t1);
      ++evals;
      x += (h / Scalar(2)) * (d0 + d1);
    }
    check(x.allFinite(), "heun_solve: state became non-finite");
  }
  if (nfe) *nfe += evals;
  return x;
}

// Prior draws, ODE solve to zero, denormalize. The solver state never
// carries the group weights (they act inside the drift), so denormalization
// is the only post-processing. Each sequence gets its own stream keyed by
// (seed, index), making the batch independent of generation order.
template <typename Scalar>
MotionBatch<Scalar> generate(DenoiserNet<Scalar>& net, const FeatureLayout& layout,
                             const NormStats& stats, const VecD& w, const Preconditioner& pc,
                             const SigmaSchedule& sched, int count, Index length,
                             std::uint64_t seed, long* nfe = nullptr) {
  require(sched.terminal_zero, "generate: schedule must end at zero");
  require(count > 0, "generate: count must be positive");
  require(length > 0 && length % 2 == 0 && length <= net.l_max(),
          "generate: length must be even and fit the network");
  MotionBatch<Scalar> out;
  out.samples.reserve(static_cast<std::size_t>(count));
  for (int s = 0; s < count; ++s) {
    Rng rng = Rng::stream(seed, {static_cast<std::uint64_t>(s)});
    MotionSample<Scalar> x{Mat<Scalar>::Zero(layout.feature_dim(), length), length};
    x.frames = static_cast<Scalar>(sched.params.t_max) * noise_like(x, rng);
    NetDenoiser<Scalar> den{net, layout, w, pc};
    DenoiserDrift<NetDenoiser<Scalar>, Scalar> drift{den};
    x.frames = heun_solve(drift, x.frames, sched, SolveDirection::NoiseToData, nfe);
    out.samples.push_back(denormalize(x, layout, stats));
  }
  return out;
}

}  // namespace gdk
