#pragma once

#include <cmath>
#include <utility>

#include "gdk/common.hpp"
#include "gdk/layout.hpp"
#include "gdk/motion.hpp"
#include "gdk/rng.hpp"

// Forward noising process x(t) = x(0) + t*eps, expected-magnitude
// preconditioning of the denoiser, score conversion, lognormal noise-level
// sampling, and the exact Gaussian-data denoiser used as an oracle.

namespace gdk {

struct Preconditioner {
  double sigma_data = 1.0;     // expected magnitude of the normalized data
  double p_mean = -1.2;        // ln(t) ~ N(p_mean, p_std^2)
  double p_std = 1.2;
  double c_noise_scale = 0.25; // c_noise = c_noise_scale * ln(t)

  void validate() const {
    require(sigma_data > 0.0, "sigma_data must be positive");
    require(p_std > 0.0, "p_std must be positive");
  }
};

struct PrecondCoeffs {
  double c_in = 0.0;
  double c_skip = 0.0;
  double c_out = 0.0;
  double c_noise = 0.0;
  double lambda = 0.0;  // 1 / c_out^2
};

// c_in keeps the network input at unit expected magnitude, c_skip/c_out keep
// the effective training target at unit expected magnitude, lambda is the
// matching loss normalizer.
inline PrecondCoeffs precondition_coeffs(double t, double sigma_data,
                                         double c_noise_scale = 0.25) {
  require(t > 0.0, "precondition_coeffs: t must be positive");
  require(sigma_data > 0.0, "precondition_coeffs: sigma_data must be positive");
  const double s2 = sigma_data * sigma_data;
  const double v = s2 + t * t;
  PrecondCoeffs c;
  c.c_in = 1.0 / std::sqrt(v);
  c.c_skip = s2 / v;
  c.c_out = t * sigma_data / std::sqrt(v);
  c.c_noise = c_noise_scale * std::log(t);
  c.lambda = 1.0 / (c.c_out * c.c_out);
  return c;
}

inline double sample_noise_level(Rng& rng, double p_mean, double p_std) {
  require(p_std > 0.0, "sample_noise_level: p_std must be positive");
  return std::exp(p_mean + p_std * rng.normal());
}

inline double sample_noise_level(Rng& rng, const Preconditioner& pc) {
  return sample_noise_level(rng, pc.p_mean, pc.p_std);
}

// Standard normal on valid frames, exactly zero on padding. Draw order is
// fixed (frame by frame, element by element) so streams stay reproducible.
template <typename Scalar>
Mat<Scalar> noise_like(const MotionSample<Scalar>& s, Rng& rng) {
  Mat<Scalar> eps = Mat<Scalar>::Zero(s.feature_dim(), s.padded_len());
  for (Index j = 0; j < s.valid_len; ++j)
    for (Index i = 0; i < s.feature_dim(); ++i)
      eps(i, j) = static_cast<Scalar>(rng.normal());
  return eps;
}

template <typename Scalar>
MotionSample<Scalar> perturb(const MotionSample<Scalar>& x0, double t,
                             const Mat<Scalar>& eps) {
  require(t >= 0.0, "perturb: t must be non-negative");
  require(eps.rows() == x0.frames.rows() && eps.cols() == x0.frames.cols(),
          "perturb: noise shape mismatch");
  MotionSample<Scalar> xt = x0;
  xt.frames += static_cast<Scalar>(t) * eps;
  return xt;
}

// D = c_skip * x(t) + c_out * F(c_in * W x(t), c_noise). The skip path uses
// the unweighted x(t): the group weights only shape the network input, D
// lives in the plain normalized space. The model is any callable
// (const MotionSample<Scalar>&, double c_noise) -> Mat<Scalar> that returns
// zero on padded frames.
template <typename Scalar, typename Model>
MotionSample<Scalar> denoise(Model&& model, const MotionSample<Scalar>& xt, double t,
                             const FeatureLayout& layout, const VecD& w,
                             const Preconditioner& pc) {
  const PrecondCoeffs c = precondition_coeffs(t, pc.sigma_data, pc.c_noise_scale);
  MotionSample<Scalar> in = apply_group_weights(xt, layout, w);
  in.frames *= static_cast<Scalar>(c.c_in);
  const Mat<Scalar> f = std::forward<Model>(model)(in, c.c_noise);
  require(f.rows() == xt.frames.rows() && f.cols() == xt.frames.cols(),
          "denoise: model output shape mismatch");
  MotionSample<Scalar> d = xt;
  d.frames = static_cast<Scalar>(c.c_skip) * xt.frames + static_cast<Scalar>(c.c_out) * f;
  return d;
}

template <typename Scalar>
Mat<Scalar> score_from_denoiser(const Mat<Scalar>& d, const Mat<Scalar>& xt, double t) {
  require(t > 0.0, "score_from_denoiser: t must be positive");
  return (d - xt) / static_cast<Scalar>(t * t);
}

// Exact posterior mean under p_data = N(mu, sigma2 I); the minimizer of the
// denoising objective, used as an oracle for samplers and likelihoods.
template <typename Scalar>
Mat<Scalar> analytic_gaussian_denoiser(const Mat<Scalar>& xt, double t, double mu,
                                       double sigma2) {
  require(sigma2 > 0.0, "analytic_gaussian_denoiser: sigma2 must be positive");
  const double v = sigma2 + t * t;
  return (sigma2 / v) * xt + Mat<Scalar>::Constant(xt.rows(), xt.cols(),
                                                   static_cast<Scalar>(t * t * mu / v));
}

// Per-feature Gaussian oracle with the exact Jacobian diag(sigma2/(sigma2+t^2)).
struct GaussianDenoiser {
  VecD mu;
  VecD sigma2;

  GaussianDenoiser(VecD mu_in, VecD sigma2_in) : mu(std::move(mu_in)), sigma2(std::move(sigma2_in)) {
    require(mu.size() == sigma2.size(), "GaussianDenoiser: parameter size mismatch");
    require((sigma2.array() > 0.0).all(), "GaussianDenoiser: sigma2 must be positive");
  }
  GaussianDenoiser(Index dim, double mu_in, double sigma2_in)
      : GaussianDenoiser(VecD::Constant(dim, mu_in), VecD::Constant(dim, sigma2_in)) {}

  MatD value(const MatD& xt, double t) const {
    require(xt.rows() == mu.size(), "GaussianDenoiser: feature dim mismatch");
    const VecD g = sigma2.array() / (sigma2.array() + t * t);
    MatD d = xt.array().colwise() * g.array();
    d.colwise() += VecD((1.0 - g.array()) * mu.array());
    return d;
  }

  MatD vjp(const MatD& xt, double t, const MatD& cot) const {
    require(xt.rows() == mu.size() && cot.rows() == mu.size(),
            "GaussianDenoiser: feature dim mismatch");
    const VecD g = sigma2.array() / (sigma2.array() + t * t);
    return cot.array().colwise() * g.array();
  }
};

}  // namespace gdk
