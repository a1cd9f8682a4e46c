#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "gdk/common.hpp"
#include "gdk/diffusion.hpp"
#include "gdk/layout.hpp"
#include "gdk/motion.hpp"
#include "gdk/net.hpp"
#include "gdk/rng.hpp"
#include "gdk/sampler.hpp"

// Exact likelihood through the instantaneous change of variables: the state
// and the log-density accumulator are integrated jointly with the same Heun
// predictor-corrector, the divergence coming from a Skilling-Hutchinson
// estimator with Rademacher probes. Round-trip experiments reuse the solver.

namespace gdk {

enum class ReportSpace { Normalized, Unnormalized };

struct NLLConfig {
  int probes = 16;     // 1 is allowed but high-variance
  double eps = 1e-5;   // lowest noise level any drift is evaluated at
  ScheduleConfig schedule{65, 9.0, 1e-5, 80.0};
  ReportSpace report = ReportSpace::Unnormalized;

  void validate() const {
    schedule.validate();
    require(probes >= 1, "nll config: need at least one probe");
    require(eps > 0.0 && eps <= schedule.t_min,
            "nll config: eps floor must not exceed the lowest level");
  }
};

// (1/k) sum_j v_j . (df/dx)^T v_j over pre-drawn probes. The field's vjp must
// be fresh for (x, t), i.e. value(x, t) was the last evaluation.
template <typename Scalar, typename Field>
double divergence_probes(Field&& field, const Mat<Scalar>& x, double t,
                         const std::vector<Mat<Scalar>>& probes) {
  require(!probes.empty(), "divergence: need at least one probe");
  double acc = 0.0;
  for (const Mat<Scalar>& v : probes)
    acc += static_cast<double>(field.vjp(x, t, v).cwiseProduct(v).sum());
  return acc / static_cast<double>(probes.size());
}

template <typename Scalar, typename Field>
double divergence_estimate(Field&& field, const Mat<Scalar>& x, double t, Rng& rng,
                           int n_probes) {
  require(n_probes >= 1, "divergence: need at least one probe");
  std::vector<Mat<Scalar>> probes;
  probes.reserve(static_cast<std::size_t>(n_probes));
  for (int j = 0; j < n_probes; ++j) {
    Mat<Scalar> v(x.rows(), x.cols());
    for (Index c = 0; c < v.cols(); ++c)
      for (Index r = 0; r < v.rows(); ++r) v(r, c) = static_cast<Scalar>(rng.rademacher());
    probes.push_back(std::move(v));
  }
  field.value(x, t);
  return divergence_probes(field, x, t, probes);
}

// Exact trace via one vjp per basis vector; test mode for small states.
template <typename Scalar, typename Field>
double divergence_exact(Field&& field, const Mat<Scalar>& x, double t) {
  require(x.size() <= 64, "divergence_exact: capped at 64 dims");
  field.value(x, t);
  double tr = 0.0;
  Mat<Scalar> e = Mat<Scalar>::Zero(x.rows(), x.cols());
  for (Index c = 0; c < x.cols(); ++c)
    for (Index r = 0; r < x.rows(); ++r) {
      e(r, c) = Scalar(1);
      tr += static_cast<double>(field.vjp(x, t, e)(r, c));
      e(r, c) = Scalar(0);
    }
  return tr;
}

struct NllResult {
  double total_normalized = 0.0;
  double total_unnormalized = 0.0;
  double per_dim_normalized = 0.0;
  double per_dim_unnormalized = 0.0;
  double prior_nll = 0.0;      // -log density of the end state under the prior
  double div_integral = 0.0;   // estimated integral of the drift divergence
  Index dims = 0;
  long nfe = 0;

  double reported(ReportSpace s) const {
    return s == ReportSpace::Normalized ? per_dim_normalized : per_dim_unnormalized;
  }
};

// Integrates the trimmed state from the lowest level up to t_max, trapezoidal
// in both the state and the accumulated divergence, then adds the Gaussian
// prior term. One fixed Rademacher probe set per solve, keyed by
// (seed, sample id, probe index), is reused at every evaluation point.
template <typename Scalar, typename Field>
NllResult nll(Field&& field, const Mat<Scalar>& x0, const NLLConfig& cfg,
              std::uint64_t seed = 0, std::uint64_t sample_id = 0,
              double log_abs_det = 0.0) {
  cfg.validate();
  require(x0.size() > 0, "nll: empty state");
  const SigmaSchedule sched = build_schedule(cfg.schedule);
  const VecD times = integration_times(sched, SolveDirection::DataToNoise);

  std::vector<Mat<Scalar>> probes;
  probes.reserve(static_cast<std::size_t>(cfg.probes));
  for (int j = 0; j < cfg.probes; ++j) {
    Rng rng = Rng::stream(seed, {sample_id, static_cast<std::uint64_t>(j)});
    Mat<Scalar> v(x0.rows(), x0.cols());
    for (Index c = 0; c < v.cols(); ++c)
      for (Index r = 0; r < v.rows(); ++r) v(r, c) = static_cast<Scalar>(rng.rademacher());
    probes.push_back(std::move(v));
  }

  Mat<Scalar> x = x0;
  double acc = 0.0;
  long nfe = 0;
  for (Index i = 0; i + 1 < times.size(); ++i) {
    const double t0 = times(i), t1 = times(i + 1);
    const Scalar h = static_cast<Scalar>(t1 - t0);
    const Mat<Scalar> d0 = field.value(x, t0);
    ++nfe;
    const double g0 = divergence_probes(field, x, t0, probes);
    const Mat<Scalar> xp = x + h * d0;
    const Mat<Scalar> d1 = field.value(xp, t1);
    ++nfe;
    const double g1 = divergence_probes(field, xp, t1, probes);
    x += (h / Scalar(2)) * (d0 + d1);
    acc += 0.5 * static_cast<double>(h) * (g0 + g1);
    check(x.allFinite() && std::isfinite(acc), "nll: integration became non-finite");
  }

  NllResult r;
  r.dims = x0.size();
  r.nfe = nfe;
  r.div_integral = acc;
  const double t_max = cfg.schedule.t_max;
  r.prior_nll = 0.5 * static_cast<double>(r.dims) * std::log(2.0 * M_PI * t_max * t_max) +
                static_cast<double>(x.squaredNorm()) / (2.0 * t_max * t_max);
  r.total_normalized = r.prior_nll - acc;
  r.total_unnormalized = r.total_normalized + log_abs_det;
  r.per_dim_normalized = r.total_normalized / static_cast<double>(r.dims);
  r.per_dim_unnormalized = r.total_unnormalized / static_cast<double>(r.dims);
  check(std::isfinite(r.total_normalized), "nll: non-finite result");
  return r;
}

template <typename Scalar>
NllResult nll(DenoiserNet<Scalar>& net, const FeatureLayout& layout, const VecD& w,
              const Preconditioner& pc, const NormStats& stats,
              const MotionSample<Scalar>& sample, const NLLConfig& cfg,
              std::uint64_t seed, std::uint64_t sample_id) {
  require(sample.valid_len > 0, "nll: empty sample");
  const Mat<Scalar> x0 = sample.frames.leftCols(sample.valid_len);
  NetDenoiser<Scalar> den{net, layout, w, pc};
  DenoiserDrift<NetDenoiser<Scalar>, Scalar> drift{den};
  return nll(drift, x0, cfg, seed, sample_id,
             log_abs_det_normalization(stats, layout, sample.valid_len));
}

// Data to the prior with one schedule, back with the other, mean absolute
// error over the trimmed state. Both schedules share their endpoints, so the
// eps floor holds on both legs.
template <typename Scalar, typename Field>
double round_trip_error(Field&& field, const Mat<Scalar>& x0, const SigmaSchedule& fwd,
                        const SigmaSchedule& bwd, long* nfe = nullptr) {
  require(!fwd.terminal_zero && !bwd.terminal_zero,
          "round trip: schedules must not pass through zero");
  require(fwd.params.t_min == bwd.params.t_min && fwd.params.t_max == bwd.params.t_max,
          "round trip: schedule endpoints must match");
  const Mat<Scalar> xT = heun_solve(field, x0, fwd, SolveDirection::DataToNoise, nfe);
  const Mat<Scalar> xr = heun_solve(field, xT, bwd, SolveDirection::NoiseToData, nfe);
  return static_cast<double>((xr - x0).cwiseAbs().mean());
}

template <typename Scalar>
double round_trip_error(DenoiserNet<Scalar>& net, const FeatureLayout& layout, const VecD& w,
                        const Preconditioner& pc, const MotionSample<Scalar>& sample,
                        const SigmaSchedule& fwd, const SigmaSchedule& bwd,
                        long* nfe = nullptr) {
  require(sample.valid_len > 0, "round trip: empty sample");
  const Mat<Scalar> x0 = sample.frames.leftCols(sample.valid_len);
  NetDenoiser<Scalar> den{net, layout, w, pc};
  DenoiserDrift<NetDenoiser<Scalar>, Scalar> drift{den};
  return round_trip_error(drift, x0, fwd, bwd, nfe);
}

}  // namespace gdk
