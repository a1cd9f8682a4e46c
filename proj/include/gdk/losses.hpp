#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "gdk/common.hpp"
#include "gdk/diffusion.hpp"
#include "gdk/layout.hpp"
#include "gdk/motion.hpp"
#include "gdk/net.hpp"

// The training objectives, from a single jointly-trained uncertainty weight
// up to gradient-balanced per-group weighting with dimensionality
// compensation. All reductions follow the masked form
//   sum(loss * mask) / (sum(mask) * N)
// so padded frames never contribute and a batch with padding equals the same
// batch trimmed to valid lengths.

namespace gdk {

enum class LossMode { Baseline, GradBalanced, PerGroup, Final };

inline const char* to_string(LossMode m) {
  switch (m) {
    case LossMode::Baseline: return "baseline";
    case LossMode::GradBalanced: return "grad_balanced";
    case LossMode::PerGroup: return "per_group";
    case LossMode::Final: return "final";
  }
  return "?";
}

inline LossMode loss_mode_from_string(const std::string& s) {
  if (s == "baseline") return LossMode::Baseline;
  if (s == "grad_balanced") return LossMode::GradBalanced;
  if (s == "per_group") return LossMode::PerGroup;
  if (s == "final") return LossMode::Final;
  throw std::invalid_argument("unknown loss mode: " + s);
}

// Baseline and GradBalanced share one uncertainty head across all features;
// the per-group modes give each feature group its own head.
inline int head_count(LossMode m, const FeatureLayout& layout) {
  return (m == LossMode::Baseline || m == LossMode::GradBalanced)
             ? 1
             : layout.group_count();
}

struct LossConfig {
  LossMode mode = LossMode::Final;
  bool uses_group_weights = true;  // weighted network inputs + per-group multipliers
  Preconditioner precond{};

  void validate() const {
    precond.validate();
    require(mode != LossMode::Final || uses_group_weights,
            "loss config: Final mode requires group weights");
  }
};

inline LossConfig loss_config(LossMode m, const Preconditioner& pc = {}) {
  return LossConfig{m, m == LossMode::Final, pc};
}

// The trainable bundle: one denoiser plus its uncertainty heads.
template <typename Scalar>
struct DiffusionModel {
  DenoiserNet<Scalar> net;
  std::vector<UncertaintyHead<Scalar>> heads;

  DiffusionModel(const NetConfig& nc, const FeatureLayout& layout, int l_max,
                 LossMode mode, double c_noise_scale = 0.25, int u_fourier = 64,
                 int u_hidden = 64)
      : net(nc, static_cast<int>(layout.feature_dim()), l_max) {
    const int h = head_count(mode, layout);
    heads.reserve(static_cast<std::size_t>(h));
    for (int i = 0; i < h; ++i)
      heads.emplace_back(u_fourier, u_hidden, nc.fourier_scale, c_noise_scale);
  }

  DiffusionModel(DenoiserNet<Scalar> n, std::vector<UncertaintyHead<Scalar>> h)
      : net(std::move(n)), heads(std::move(h)) {}

  void init_weights(Rng& rng) {
    net.init_weights(rng);
    for (auto& h : heads) h.init_weights(rng);
  }

  void zero_grad() {
    net.zero_grad();
    for (auto& h : heads) h.zero_grad();
  }

  Index param_count() const {
    Index n = net.param_count();
    for (const auto& h : heads) n += h.param_count();
    return n;
  }

  // Parameter/gradient pairs in a fixed order, for optimizers and probes.
  std::vector<std::pair<Vec<Scalar>*, Vec<Scalar>*>> parameter_blocks() {
    std::vector<std::pair<Vec<Scalar>*, Vec<Scalar>*>> out;
    out.push_back({&net.params(), &net.grads()});
    for (auto& h : heads) out.push_back({&h.params(), &h.grads()});
    return out;
  }

  template <typename T>
  DiffusionModel<T> cast() const {
    DiffusionModel<T> out{net.template cast<T>(), {}};
    out.heads.reserve(heads.size());
    for (const auto& h : heads) out.heads.push_back(h.template cast<T>());
    return out;
  }
};

// Per-group sum of squared residuals over valid frames, with the element
// counts needed to turn them into masked means.
struct GroupResiduals {
  VecD ssq;
  VecD count;  // group dim x valid frames

  GroupResiduals& operator+=(const GroupResiduals& o) {
    ssq += o.ssq;
    count += o.count;
    return *this;
  }
};

template <typename Scalar>
GroupResiduals masked_residuals(const Mat<Scalar>& d, const Mat<Scalar>& x0,
                                Index valid, const FeatureLayout& layout) {
  require(d.rows() == layout.feature_dim() && d.rows() == x0.rows() &&
              d.cols() == x0.cols(),
          "masked residuals: shape mismatch");
  require(valid > 0 && valid <= d.cols(), "masked residuals: no valid frames");
  GroupResiduals r;
  r.ssq = VecD::Zero(layout.group_count());
  r.count = VecD::Zero(layout.group_count());
  for (int g = 0; g < layout.group_count(); ++g) {
    const Index off = layout.group_offset(g), dim = layout.group_dim(g);
    r.ssq[g] = static_cast<double>(
        (d.block(off, 0, dim, valid) - x0.block(off, 0, dim, valid))
            .template cast<double>()
            .squaredNorm());
    r.count[g] = static_cast<double>(dim) * static_cast<double>(valid);
  }
  return r;
}

struct LossBreakdown {
  VecD group_mean_sq;  // pooled masked mean squared residual per group
  VecD group_u_mean;   // batch mean of u per group (shared head repeated)
  double theta = 0.0;  // scalar the denoiser trains on (Baseline: joint loss)
  double psi = 0.0;    // scalar the heads train on (Baseline: same joint loss)

  void validate() const {
    check(std::isfinite(theta) && std::isfinite(psi),
          "loss breakdown: non-finite total");
    check((group_mean_sq.array() >= 0.0).all(),
          "loss breakdown: negative residual");
  }
};

// One pass over a batch: forward, both objective scalars, and (optionally)
// exact gradients. The stop-gradients in the two-term modes are realized by
// routing: the theta scalar backpropagates only into the net and the psi
// scalar only into the heads, which is exact because the parameter sets are
// disjoint. Baseline is a joint objective and feeds both.
//
// t holds one noise level per sequence; eps one noise draw per sequence,
// zero on padded frames.
template <typename Scalar>
LossBreakdown diffusion_loss(DiffusionModel<Scalar>& model,
                             const FeatureLayout& layout, const LossConfig& cfg,
                             const std::vector<MotionSample<Scalar>>& x0,
                             const std::vector<double>& t,
                             const std::vector<Mat<Scalar>>& eps,
                             bool grad_theta = false, bool grad_psi = false) {
  cfg.validate();
  const std::size_t b = x0.size();
  require(b > 0 && t.size() == b && eps.size() == b,
          "diffusion loss: batch arrays disagree");
  const int k = layout.group_count();
  require(static_cast<int>(model.heads.size()) == head_count(cfg.mode, layout),
          "diffusion loss: head count does not match mode");

  const double n = static_cast<double>(layout.feature_dim());
  double v = 0.0;
  for (const auto& s : x0) v += static_cast<double>(s.valid_len);
  require(v > 0.0, "diffusion loss: batch has no valid frames");
  const double denom = n * v;

  const VecD w =
      cfg.uses_group_weights ? group_weights(layout) : VecD::Ones(k);
  const bool shared_head = model.heads.size() == 1;

  LossBreakdown out;
  out.group_mean_sq = VecD::Zero(k);
  out.group_u_mean = VecD::Zero(k);
  VecD count_total = VecD::Zero(k);

  auto net_fn = [&model](const MotionSample<Scalar>& in, double c_noise) {
    return model.net.forward(in.frames, in.valid_len, c_noise);
  };

  // Every sample is evaluated at the net's full width: only valid frames are
  // copied in and the rest is zero. Matrix kernels round differently at
  // different widths, so this is what makes a trimmed sequence equal its
  // padded form bit for bit, and it enforces the masking contract at the
  // loss site.
  const Index lw = model.net.l_max();
  const Index rows = layout.feature_dim();

  for (std::size_t s = 0; s < b; ++s) {
    require(x0[s].valid_len > 0 && x0[s].valid_len <= lw &&
                x0[s].frames.rows() == rows &&
                eps[s].rows() == rows && eps[s].cols() == x0[s].frames.cols() &&
                x0[s].valid_len <= x0[s].frames.cols(),
            "diffusion loss: sample shape mismatch");
    MotionSample<Scalar> x0w{Mat<Scalar>::Zero(rows, lw), x0[s].valid_len};
    x0w.frames.leftCols(x0[s].valid_len) =
        x0[s].frames.leftCols(x0[s].valid_len);
    Mat<Scalar> epsw = Mat<Scalar>::Zero(rows, lw);
    epsw.leftCols(x0[s].valid_len) = eps[s].leftCols(x0[s].valid_len);

    const PrecondCoeffs c = precondition_coeffs(t[s], cfg.precond.sigma_data,
                                                cfg.precond.c_noise_scale);
    const MotionSample<Scalar> xt = perturb(x0w, t[s], epsw);
    const MotionSample<Scalar> d =
        denoise(net_fn, xt, t[s], layout, w, cfg.precond);
    const GroupResiduals gr =
        masked_residuals(d.frames, x0w.frames, x0w.valid_len, layout);
    const double ls = static_cast<double>(x0w.valid_len);

    std::vector<double> u(model.heads.size()), eu(model.heads.size());
    for (std::size_t h = 0; h < model.heads.size(); ++h) {
      u[h] = model.heads[h].forward(t[s]);
      eu[h] = std::exp(u[h]);
    }

    if (cfg.mode == LossMode::Baseline) {
      const double joint =
          (c.lambda / eu[0]) * gr.ssq.sum() + n * ls * u[0];
      out.theta += joint;
      out.psi += joint;
    } else {
      for (int g = 0; g < k; ++g) {
        const std::size_t h = shared_head ? 0 : static_cast<std::size_t>(g);
        out.theta += std::sqrt(c.lambda) * w[g] / std::sqrt(eu[h]) * gr.ssq[g];
        out.psi += gr.ssq[g] / eu[h] +
                   static_cast<double>(layout.group_dim(g)) * ls * u[h];
      }
    }

    out.group_mean_sq += gr.ssq;
    count_total += gr.count;
    for (int g = 0; g < k; ++g)
      out.group_u_mean[g] += u[shared_head ? 0 : static_cast<std::size_t>(g)];

    if (grad_theta) {
      // dL/dF = c_out * dL/dD; the skip path holds no parameters.
      Mat<Scalar> up = Mat<Scalar>::Zero(d.frames.rows(), d.frames.cols());
      for (int g = 0; g < k; ++g) {
        const std::size_t h = shared_head ? 0 : static_cast<std::size_t>(g);
        const double coef =
            cfg.mode == LossMode::Baseline
                ? 2.0 * c.lambda / eu[0]
                : 2.0 * std::sqrt(c.lambda) * w[g] / std::sqrt(eu[h]);
        const Index off = layout.group_offset(g), dim = layout.group_dim(g);
        up.block(off, 0, dim, x0w.valid_len) =
            static_cast<Scalar>(coef * c.c_out / denom) *
            (d.frames.block(off, 0, dim, x0w.valid_len) -
             x0w.frames.block(off, 0, dim, x0w.valid_len));
      }
      model.net.backward(up);
    }
    if (grad_psi) {
      for (std::size_t h = 0; h < model.heads.size(); ++h) {
        double du = 0.0;
        if (cfg.mode == LossMode::Baseline) {
          du = (-(c.lambda / eu[0]) * gr.ssq.sum() + n * ls) / denom;
        } else {
          for (int g = 0; g < k; ++g)
            if ((shared_head ? 0 : static_cast<std::size_t>(g)) == h)
              du += (-gr.ssq[g] / eu[h] +
                     static_cast<double>(layout.group_dim(g)) * ls) /
                    denom;
        }
        model.heads[h].backward(du);
      }
    }
  }

  out.theta /= denom;
  out.psi /= denom;
  out.group_mean_sq.array() /= count_total.array();
  out.group_u_mean /= static_cast<double>(b);
  out.validate();
  return out;
}

// Joint objective with a single shared uncertainty weight; gradients flow
// into both the denoiser and the head.
template <typename Scalar>
double loss_baseline(DiffusionModel<Scalar>& model, const FeatureLayout& layout,
                     const LossConfig& cfg,
                     const std::vector<MotionSample<Scalar>>& x0,
                     const std::vector<double>& t,
                     const std::vector<Mat<Scalar>>& eps) {
  require(cfg.mode == LossMode::Baseline, "loss_baseline: wrong mode");
  return diffusion_loss(model, layout, cfg, x0, t, eps).theta;
}

// Head objective: residuals enter detached, so only the heads learn from it.
template <typename Scalar>
double loss_u_heads(DiffusionModel<Scalar>& model, const FeatureLayout& layout,
                    const LossConfig& cfg,
                    const std::vector<MotionSample<Scalar>>& x0,
                    const std::vector<double>& t,
                    const std::vector<Mat<Scalar>>& eps) {
  require(cfg.mode != LossMode::Baseline, "loss_u_heads: wrong mode");
  return diffusion_loss(model, layout, cfg, x0, t, eps).psi;
}

// Denoiser objective: the uncertainty weights enter detached, so only the
// denoiser learns from it.
template <typename Scalar>
double loss_theta(DiffusionModel<Scalar>& model, const FeatureLayout& layout,
                  const LossConfig& cfg,
                  const std::vector<MotionSample<Scalar>>& x0,
                  const std::vector<double>& t,
                  const std::vector<Mat<Scalar>>& eps) {
  require(cfg.mode != LossMode::Baseline, "loss_theta: wrong mode");
  return diffusion_loss(model, layout, cfg, x0, t, eps).theta;
}

// The stationary point of the head objective at one noise level: the masked
// per-element mean squared residual, lambda-weighted in Baseline mode, pooled
// across groups when the head is shared. One entry per head.
inline VecD optimal_e_u(LossMode mode, const GroupResiduals& pooled,
                        double lambda) {
  require((pooled.count.array() > 0.0).all(), "optimal_e_u: empty pool");
  if (mode == LossMode::Baseline)
    return VecD::Constant(1, lambda * pooled.ssq.sum() / pooled.count.sum());
  if (mode == LossMode::GradBalanced)
    return VecD::Constant(1, pooled.ssq.sum() / pooled.count.sum());
  return (pooled.ssq.array() / pooled.count.array()).matrix();
}

// Per-group L2 norm of dL/dF at one noise level, using exactly the
// elementwise factors the training backward applies. `pooled` aggregates a
// probe batch drawn at this t; `e_u` holds one entry per head; `denom` is
// the batch normalizer N * total-valid-frames the probe batch trains with.
inline VecD grad_probe_norms(LossMode mode, double t, const Preconditioner& pc,
                             const FeatureLayout& layout,
                             const GroupResiduals& pooled, const VecD& e_u,
                             const VecD& w, double denom) {
  const PrecondCoeffs c =
      precondition_coeffs(t, pc.sigma_data, pc.c_noise_scale);
  const int k = layout.group_count();
  require(w.size() == k, "grad_probe_norms: weight count mismatch");
  require(denom > 0.0, "grad_probe_norms: bad denominator");
  VecD out(k);
  for (int g = 0; g < k; ++g) {
    const Index h = e_u.size() == 1 ? 0 : g;
    const double coef = mode == LossMode::Baseline
                            ? 2.0 * c.lambda / e_u[h]
                            : 2.0 * std::sqrt(c.lambda) * w[g] / std::sqrt(e_u[h]);
    out[g] = coef * c.c_out * std::sqrt(pooled.ssq[g]) / denom;
  }
  return out;
}

}  // namespace gdk
