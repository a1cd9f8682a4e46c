#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <string>
#include <vector>

#include "gdk/checkpoint.hpp"
#include "gdk/common.hpp"
#include "gdk/layout.hpp"
#include "gdk/losses.hpp"
#include "gdk/motion.hpp"
#include "gdk/rng.hpp"
#include "gdk/synth.hpp"

// The optimization loop: bias-corrected Adam, linear warmup into a cosine
// decay that reaches exactly zero, up-axis-rotation and mirror augmentation,
// per-epoch train/validation logging, a trailing checkpoint window, and
// gradient-norm probes over a noise grid. Every random draw comes from a
// stream keyed by (seed, epoch, sample index), so the result is independent
// of batch partitioning and bitwise reproducible.

namespace gdk {

struct TrainConfig {
  int batch_size = 64;
  int epochs = 200;
  double max_lr = 1e-2;
  int warmup_epochs = 10;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps_adam = 1e-8;
  LossMode mode = LossMode::Final;
  std::uint64_t seed = 0;
  int keep_checkpoints = 10;  // checkpoint the trailing epochs only

  void validate() const {
    require(batch_size > 0, "train config: batch size must be positive");
    require(epochs >= 0, "train config: negative epoch count");
    require(max_lr > 0.0, "train config: LR must be positive");
    require(warmup_epochs >= 0, "train config: negative warmup");
    require(epochs == 0 || warmup_epochs < epochs,
            "train config: warmup must end before the last epoch");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
            "train config: betas must lie in [0, 1)");
    require(eps_adam > 0.0, "train config: eps must be positive");
    require(keep_checkpoints >= 0, "train config: negative checkpoint window");
  }

  nlohmann::json to_json() const {
    return {{"batch_size", batch_size},   {"epochs", epochs},
            {"max_lr", max_lr},           {"warmup_epochs", warmup_epochs},
            {"beta1", beta1},             {"beta2", beta2},
            {"eps_adam", eps_adam},       {"mode", to_string(mode)},
            {"seed", seed},               {"keep_checkpoints", keep_checkpoints}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.max_lr = j.value("max_lr", c.max_lr);
    c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps_adam = j.value("eps_adam", c.eps_adam);
    if (j.contains("mode")) c.mode = loss_mode_from_string(j.at("mode").get<std::string>());
    c.seed = j.value("seed", c.seed);
    c.keep_checkpoints = j.value("keep_checkpoints", c.keep_checkpoints);
    return c;
  }
};

// Linear 0 -> max over the warmup steps, then cosine to exactly zero at the
// final step, zero beyond it.
inline double lr_schedule(long step, long total_steps, long warmup_steps,
                          double max_lr) {
  require(step >= 0, "lr schedule: negative step");
  require(total_steps > 0 && warmup_steps >= 0 && warmup_steps < total_steps,
          "lr schedule: warmup must end before the schedule does");
  require(max_lr > 0.0, "lr schedule: LR must be positive");
  if (step >= total_steps) return 0.0;
  if (step <= warmup_steps && warmup_steps > 0)
    return max_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - warmup_steps);
  return max_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// One bias-corrected Adam update on a single parameter block. `step` is the
// 1-based update count the moments have seen, including this one.
template <typename Scalar>
void adam_step(Vec<Scalar>& p, const Vec<Scalar>& g, Vec<Scalar>& m, Vec<Scalar>& v,
               long step, double lr, double beta1, double beta2, double eps_adam) {
  require(p.size() == g.size() && p.size() == m.size() && p.size() == v.size(),
          "adam: block size mismatch");
  require(step >= 1, "adam: step must be 1-based");
  check(g.allFinite(), "adam: non-finite gradient");
  const Scalar b1 = static_cast<Scalar>(beta1), b2 = static_cast<Scalar>(beta2);
  m = b1 * m + (Scalar(1) - b1) * g;
  v = b2 * v + (Scalar(1) - b2) * g.cwiseProduct(g);
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  p -= (static_cast<Scalar>(lr / bc1) * m.array() /
        ((v.array() / static_cast<Scalar>(bc2)).sqrt() + static_cast<Scalar>(eps_adam)))
           .matrix();
}

template <typename Scalar>
struct AdamState {
  std::vector<Vec<Scalar>> m, v;
  long step = 0;

  static AdamState zeros(DiffusionModel<Scalar>& model) {
    AdamState st;
    for (auto& blk : model.parameter_blocks()) {
      st.m.push_back(Vec<Scalar>::Zero(blk.first->size()));
      st.v.push_back(Vec<Scalar>::Zero(blk.first->size()));
    }
    return st;
  }

  // Checkpoint form of the moments; lossless for float and double training.
  std::vector<VecD> m_as_double() const {
    std::vector<VecD> out;
    for (const auto& b : m) out.push_back(b.template cast<double>());
    return out;
  }
  std::vector<VecD> v_as_double() const {
    std::vector<VecD> out;
    for (const auto& b : v) out.push_back(b.template cast<double>());
    return out;
  }
};

template <typename Scalar>
void adam_step(DiffusionModel<Scalar>& model, AdamState<Scalar>& st, double lr,
               const TrainConfig& cfg) {
  auto blocks = model.parameter_blocks();
  require(blocks.size() == st.m.size(), "adam: state does not match model");
  ++st.step;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    auto [p, g] = blocks[b];
    check(g->allFinite(),
          "adam: non-finite gradient in block " + std::to_string(b) + " at step " +
              std::to_string(st.step));
    adam_step(*p, *g, st.m[b], st.v[b], st.step, lr, cfg.beta1, cfg.beta2,
              cfg.eps_adam);
  }
}

struct EpochLog {
  int epoch = 0;
  std::string split;
  VecD group_loss;  // pooled masked mean squared residual per group
  double theta = 0.0;
  double psi = 0.0;
  double lr = 0.0;  // last LR used in the epoch; 0 for validation rows
};

struct TrainResult {
  std::vector<EpochLog> log;
  std::vector<std::filesystem::path> checkpoints;  // trailing window, oldest first
  long steps = 0;
};

namespace detail {

// Stream tags; the leading constant keeps trainer draws disjoint from every
// other subsystem that shares the run seed.
constexpr std::uint64_t kShuffleTag = 0x7261;
constexpr std::uint64_t kSampleTag = 0x7262;
constexpr std::uint64_t kValTag = 0x7263;
constexpr std::uint64_t kProbeTag = 0x7264;

template <typename Scalar>
struct PreparedSample {
  MotionSample<Scalar> x0;
  double t = 0.0;
  Mat<Scalar> eps;
};

// Augment (optionally), normalize, and draw this sample's noise level and
// noise, all from one keyed stream.
template <typename Scalar>
PreparedSample<Scalar> prepare_sample(const MotionSample<Scalar>& raw,
                                      const FeatureLayout& layout,
                                      const NormStats& stats, const Preconditioner& pc,
                                      Rng& rng, bool augmented) {
  PreparedSample<Scalar> out;
  const MotionSample<Scalar> aug = augmented ? augment(raw, layout, rng) : raw;
  out.x0 = normalize(aug, layout, stats);
  out.t = std::exp(pc.p_mean + pc.p_std * rng.normal());
  out.eps = Mat<Scalar>::Zero(raw.frames.rows(), raw.frames.cols());
  for (Index c = 0; c < raw.valid_len; ++c)
    for (Index r = 0; r < out.eps.rows(); ++r)
      out.eps(r, c) = static_cast<Scalar>(rng.normal());
  return out;
}

inline void write_train_log_csv(const std::filesystem::path& p,
                                const FeatureLayout& layout,
                                const std::vector<EpochLog>& log) {
  std::ofstream os(p);
  check(bool(os), "cannot open for write: " + p.string());
  os << "epoch,split";
  for (int g = 0; g < layout.group_count(); ++g)
    os << ",loss_" << layout.group(static_cast<std::size_t>(g)).name;
  os << ",theta,psi,lr\n";
  os << std::setprecision(10);
  for (const auto& e : log) {
    os << e.epoch << "," << e.split;
    for (Index g = 0; g < e.group_loss.size(); ++g) os << "," << e.group_loss(g);
    os << "," << e.theta << "," << e.psi << "," << e.lr << "\n";
  }
  check(bool(os), "write failed: " + p.string());
}

}  // namespace detail

// Geometric grid used for the uncertainty curves and gradient probes.
inline VecD noise_grid(int points = 33, double lo = 0.02, double hi = 80.0) {
  require(points >= 2 && lo > 0.0 && lo < hi, "noise grid: bad range");
  VecD g(points);
  const double a = std::log(lo), b = std::log(hi);
  for (int i = 0; i < points; ++i)
    g(i) = std::exp(a + (b - a) * static_cast<double>(i) /
                            static_cast<double>(points - 1));
  return g;
}

template <typename Scalar>
void write_u_curves_csv(const std::filesystem::path& p,
                        DiffusionModel<Scalar>& model, const VecD& t_grid,
                        int epoch, bool append) {
  std::ofstream os(p, append ? std::ios::app : std::ios::out);
  check(bool(os), "cannot open for write: " + p.string());
  if (!append) os << "epoch,t,head,u,e_u\n";
  os << std::setprecision(10);
  for (Index i = 0; i < t_grid.size(); ++i)
    for (std::size_t h = 0; h < model.heads.size(); ++h) {
      const double u = model.heads[h].forward(t_grid(i));
      os << epoch << "," << t_grid(i) << "," << h << "," << u << "," << std::exp(u)
         << "\n";
    }
  check(bool(os), "write failed: " + p.string());
}

// Full training pass over raw (denormalized) splits. Augmentation and
// normalization happen inside, per sample per epoch. With a non-empty
// out_dir, emits train_log.csv, u_curves.csv and the trailing checkpoint
// window.
template <typename Scalar>
TrainResult train(DiffusionModel<Scalar>& model, const FeatureLayout& layout,
                  const NormStats& stats, const MotionBatch<Scalar>& train_raw,
                  const MotionBatch<Scalar>& val_raw, const TrainConfig& cfg,
                  const std::filesystem::path& out_dir = {}) {
  cfg.validate();
  require(!train_raw.empty(), "train: empty training set");

  Preconditioner pc;
  pc.sigma_data = stats.sigma_data;
  const LossConfig lcfg = loss_config(cfg.mode, pc);
  lcfg.validate();
  require(static_cast<int>(model.heads.size()) == head_count(cfg.mode, layout),
          "train: model head count does not match loss mode");

  const Index n_train = train_raw.size();
  const long spb = (n_train + cfg.batch_size - 1) / cfg.batch_size;
  const long total_steps = spb * cfg.epochs;
  const long warmup_steps = spb * cfg.warmup_epochs;

  AdamState<Scalar> st = AdamState<Scalar>::zeros(model);
  TrainResult res;
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
  const VecD t_grid = noise_grid();

  // Fixed validation noise, independent of the epoch, so epochs compare on
  // identical draws.
  std::vector<detail::PreparedSample<Scalar>> val;
  val.reserve(static_cast<std::size_t>(val_raw.size()));
  for (Index j = 0; j < val_raw.size(); ++j) {
    Rng rng = Rng::stream(cfg.seed,
                          {detail::kValTag, static_cast<std::uint64_t>(j)});
    val.push_back(detail::prepare_sample(val_raw.samples[static_cast<std::size_t>(j)],
                                         layout, stats, pc, rng, false));
  }

  std::vector<Index> order(static_cast<std::size_t>(n_train));
  std::iota(order.begin(), order.end(), Index(0));

  long global_step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng = Rng::stream(
        cfg.seed, {detail::kShuffleTag, static_cast<std::uint64_t>(epoch)});
    shuffle_rng.shuffle(order.begin(), order.end());

    EpochLog tl;
    tl.epoch = epoch;
    tl.split = "train";
    tl.group_loss = VecD::Zero(layout.group_count());
    VecD count = VecD::Zero(layout.group_count());
    long batches = 0;

    for (Index start = 0; start < n_train; start += cfg.batch_size) {
      const Index bs = std::min<Index>(cfg.batch_size, n_train - start);
      std::vector<MotionSample<Scalar>> xb;
      std::vector<double> tb;
      std::vector<Mat<Scalar>> eb;
      xb.reserve(static_cast<std::size_t>(bs));
      for (Index k = 0; k < bs; ++k) {
        const Index idx = order[static_cast<std::size_t>(start + k)];
        Rng rng = Rng::stream(cfg.seed,
                              {detail::kSampleTag, static_cast<std::uint64_t>(epoch),
                               static_cast<std::uint64_t>(idx)});
        auto ps = detail::prepare_sample(train_raw.samples[static_cast<std::size_t>(idx)],
                                         layout, stats, pc, rng, true);
        xb.push_back(std::move(ps.x0));
        tb.push_back(ps.t);
        eb.push_back(std::move(ps.eps));
      }

      model.zero_grad();
      const LossBreakdown bd =
          diffusion_loss(model, layout, lcfg, xb, tb, eb, true, true);
      tl.lr = lr_schedule(global_step, total_steps, warmup_steps, cfg.max_lr);
      adam_step(model, st, tl.lr, cfg);
      ++global_step;
      ++batches;

      double vtot = 0.0;
      for (const auto& s : xb) vtot += static_cast<double>(s.valid_len);
      for (int g = 0; g < layout.group_count(); ++g) {
        const double cg = static_cast<double>(layout.group_dim(g)) * vtot;
        tl.group_loss(g) += bd.group_mean_sq(g) * cg;
        count(g) += cg;
      }
      tl.theta += bd.theta;
      tl.psi += bd.psi;

      for (auto& blk : model.parameter_blocks())
        check(blk.first->allFinite(),
              "train: parameters became non-finite at epoch " +
                  std::to_string(epoch) + " step " + std::to_string(global_step));
    }

    tl.group_loss.array() /= count.array();
    tl.theta /= static_cast<double>(batches);
    tl.psi /= static_cast<double>(batches);
    res.log.push_back(tl);

    if (!val.empty()) {
      EpochLog vl;
      vl.epoch = epoch;
      vl.split = "val";
      vl.group_loss = VecD::Zero(layout.group_count());
      VecD vcount = VecD::Zero(layout.group_count());
      long vbatches = 0;
      for (std::size_t start = 0; start < val.size();
           start += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t stop =
            std::min(val.size(), start + static_cast<std::size_t>(cfg.batch_size));
        std::vector<MotionSample<Scalar>> xb;
        std::vector<double> tb;
        std::vector<Mat<Scalar>> eb;
        for (std::size_t k = start; k < stop; ++k) {
          xb.push_back(val[k].x0);
          tb.push_back(val[k].t);
          eb.push_back(val[k].eps);
        }
        const LossBreakdown bd = diffusion_loss(model, layout, lcfg, xb, tb, eb);
        double vtot = 0.0;
        for (const auto& s : xb) vtot += static_cast<double>(s.valid_len);
        for (int g = 0; g < layout.group_count(); ++g) {
          const double cg = static_cast<double>(layout.group_dim(g)) * vtot;
          vl.group_loss(g) += bd.group_mean_sq(g) * cg;
          vcount(g) += cg;
        }
        vl.theta += bd.theta;
        vl.psi += bd.psi;
        ++vbatches;
      }
      vl.group_loss.array() /= vcount.array();
      vl.theta /= static_cast<double>(vbatches);
      vl.psi /= static_cast<double>(vbatches);
      res.log.push_back(vl);
    }

    if (!out_dir.empty()) {
      write_u_curves_csv(out_dir / "u_curves.csv", model, t_grid, epoch, epoch > 0);
      if (epoch >= cfg.epochs - cfg.keep_checkpoints) {
        char name[32];
        std::snprintf(name, sizeof name, "checkpoint-%04d.gdkw", epoch);
        const auto path = out_dir / name;
        const std::vector<VecD> md = st.m_as_double(), vd = st.v_as_double();
        save_checkpoint(path, model, layout, stats, cfg.mode, pc, epoch, &md, &vd,
                        st.step);
        res.checkpoints.push_back(path);
      }
    }
  }

  res.steps = global_step;
  if (!out_dir.empty())
    detail::write_train_log_csv(out_dir / "train_log.csv", layout, res.log);
  return res;
}

struct GradProbeRow {
  double t = 0.0;
  VecD per_group;
  double overall = 0.0;
};

// For each grid level: perturb the probe set at that level, run the
// denoiser, and convert the pooled residuals into the per-group L2 norms of
// the loss gradient w.r.t. the network output, averaged over fixed-size
// batches. The dataset comes in raw; heads are read, not trained.
template <typename Scalar>
std::vector<GradProbeRow> probe_gradient_norms(
    DiffusionModel<Scalar>& model, const FeatureLayout& layout, const LossConfig& lcfg,
    const NormStats& stats, const MotionBatch<Scalar>& raw, const VecD& t_grid,
    int probe_batch = 32, std::uint64_t seed = 0) {
  lcfg.validate();
  require(probe_batch > 0, "grad probe: batch size must be positive");
  require(raw.size() >= probe_batch,
          "grad probe: dataset smaller than the probe batch");
  const int k = layout.group_count();
  const VecD w = lcfg.uses_group_weights ? group_weights(layout) : VecD::Ones(k);
  const double n = static_cast<double>(layout.feature_dim());
  const Index chunks = raw.size() / probe_batch;  // fixed batch size: drop the tail
  const Index lw = model.net.l_max();

  std::vector<GradProbeRow> out;
  out.reserve(static_cast<std::size_t>(t_grid.size()));
  for (Index ti = 0; ti < t_grid.size(); ++ti) {
    const double t = t_grid(ti);
    VecD e_u(model.heads.size());
    for (std::size_t h = 0; h < model.heads.size(); ++h)
      e_u(static_cast<Index>(h)) = std::exp(model.heads[h].forward(t));

    GradProbeRow row;
    row.t = t;
    row.per_group = VecD::Zero(k);
    for (Index c = 0; c < chunks; ++c) {
      GroupResiduals pooled;
      pooled.ssq = VecD::Zero(k);
      pooled.count = VecD::Zero(k);
      double vtot = 0.0;
      for (Index j = 0; j < probe_batch; ++j) {
        const Index idx = c * probe_batch + j;
        Rng rng = Rng::stream(seed, {detail::kProbeTag, static_cast<std::uint64_t>(ti),
                                     static_cast<std::uint64_t>(idx)});
        const MotionSample<Scalar> xs =
            normalize(raw.samples[static_cast<std::size_t>(idx)], layout, stats);
        MotionSample<Scalar> x0w{Mat<Scalar>::Zero(xs.frames.rows(), lw), xs.valid_len};
        x0w.frames.leftCols(xs.valid_len) = xs.frames.leftCols(xs.valid_len);
        Mat<Scalar> eps = Mat<Scalar>::Zero(xs.frames.rows(), lw);
        for (Index cc = 0; cc < xs.valid_len; ++cc)
          for (Index r = 0; r < eps.rows(); ++r)
            eps(r, cc) = static_cast<Scalar>(rng.normal());
        const MotionSample<Scalar> xt = perturb(x0w, t, eps);
        auto net_fn = [&model](const MotionSample<Scalar>& in, double c_noise) {
          return model.net.forward(in.frames, in.valid_len, c_noise);
        };
        const MotionSample<Scalar> d = denoise(net_fn, xt, t, layout, w, lcfg.precond);
        pooled += masked_residuals(d.frames, x0w.frames, x0w.valid_len, layout);
        vtot += static_cast<double>(x0w.valid_len);
      }
      const VecD norms = grad_probe_norms(lcfg.mode, t, lcfg.precond, layout, pooled,
                                          e_u, w, n * vtot);
      row.per_group += norms;
      row.overall += norms.norm();
    }
    row.per_group /= static_cast<double>(chunks);
    row.overall /= static_cast<double>(chunks);
    out.push_back(std::move(row));
  }
  return out;
}

inline void write_grad_probe_csv(const std::filesystem::path& p,
                                 const FeatureLayout& layout,
                                 const std::vector<GradProbeRow>& rows) {
  std::ofstream os(p);
  check(bool(os), "cannot open for write: " + p.string());
  os << "t";
  for (int g = 0; g < layout.group_count(); ++g)
    os << ",grad_" << layout.group(static_cast<std::size_t>(g)).name;
  os << ",overall\n";
  os << std::setprecision(10);
  for (const auto& r : rows) {
    os << r.t;
    for (Index g = 0; g < r.per_group.size(); ++g) os << "," << r.per_group(g);
    os << "," << r.overall << "\n";
  }
  check(bool(os), "write failed: " + p.string());
}

}  // namespace gdk
