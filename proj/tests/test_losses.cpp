#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "gdk/losses.hpp"
#include "gdk/rng.hpp"

using namespace gdk;

namespace {

FeatureLayout make_layout(const std::vector<int>& dims, int l_max) {
  std::vector<GroupSpec> gs;
  char name = 'a';
  for (int d : dims)
    gs.push_back({std::string(1, name++), d, NormKind::ElementwiseZScore, {}});
  return FeatureLayout(std::move(gs), l_max);
}

MotionSample<double> random_sample(const FeatureLayout& lay, Index valid,
                                   Rng& rng) {
  MotionSample<double> s;
  s.frames = MatD::Zero(lay.feature_dim(), lay.l_max());
  s.valid_len = valid;
  for (Index j = 0; j < valid; ++j)
    for (Index i = 0; i < s.frames.rows(); ++i) s.frames(i, j) = rng.normal();
  return s;
}

template <typename M>
void set_param(M& m, const std::string& name, double v) {
  for (const auto& o : m.param_infos())
    if (o.name == name) {
      m.params().segment(o.offset, o.rows * o.cols).setConstant(v);
      return;
    }
  REQUIRE(false);
}

// Head that outputs a constant u regardless of t.
template <typename Scalar>
void pin_head(UncertaintyHead<Scalar>& h, double u) {
  h.params().setZero();
  set_param(h, "gain", 1.0);
  set_param(h, "b2", u);
}

template <typename M>
double get_grad(const M& m, const std::string& name) {
  for (const auto& o : m.param_infos())
    if (o.name == name) {
      REQUIRE(o.rows * o.cols == 1);
      return double(m.grads()[o.offset]);
    }
  REQUIRE(false);
  return 0.0;
}

struct TestRig {
  FeatureLayout layout;
  LossConfig cfg;
  DiffusionModel<double> model;
  std::vector<MotionSample<double>> x0;
  std::vector<double> t;
  std::vector<MatD> eps;
};

TestRig make_rig(LossMode mode, const std::vector<int>& dims = {2, 1, 2, 1},
                 int l_max = 8, std::vector<Index> valids = {6, 4},
                 unsigned long long seed = 7) {
  TestRig r{make_layout(dims, l_max),
            loss_config(mode),
            DiffusionModel<double>(NetConfig{8, 1, false, 8, 1.0},
                                   make_layout(dims, l_max), l_max, mode, 0.25,
                                   8, 8),
            {},
            {},
            {}};
  Rng rng(seed);
  r.model.init_weights(rng);
  const std::vector<double> ts = {0.4, 1.7, 0.09, 3.1};
  for (std::size_t s = 0; s < valids.size(); ++s) {
    r.x0.push_back(random_sample(r.layout, valids[s], rng));
    r.t.push_back(ts[s % ts.size()]);
    r.eps.push_back(noise_like(r.x0.back(), rng));
  }
  return r;
}

}  // namespace

TEST_CASE("masked residuals: zeros, single element, trimmed equality") {
  const FeatureLayout lay = make_layout({2, 3}, 6);
  Rng rng(3);
  MotionSample<double> a = random_sample(lay, 4, rng);

  const GroupResiduals same = masked_residuals(a.frames, a.frames, 4, lay);
  CHECK(same.ssq.isZero(0.0));
  CHECK(same.count[0] == 8.0);
  CHECK(same.count[1] == 12.0);

  MatD d = MatD::Zero(5, 1), x = MatD::Zero(5, 1);
  d(3, 0) = 1.75;
  const GroupResiduals one = masked_residuals(d, x, 1, lay);
  CHECK(one.ssq[0] == 0.0);
  CHECK(one.ssq[1] / one.count[1] == doctest::Approx(1.75 * 1.75 / 3.0));

  // Padding never contributes: garbage beyond valid_len changes nothing, and
  // trimming the matrices to the valid frames gives bit-identical sums.
  MotionSample<double> b = random_sample(lay, 4, rng);
  MatD dp = a.frames, xp = b.frames;
  const GroupResiduals clean = masked_residuals(dp, xp, 4, lay);
  dp.rightCols(2).setConstant(1e9);
  xp.rightCols(2).setConstant(-3e7);
  const GroupResiduals dirty = masked_residuals(dp, xp, 4, lay);
  const GroupResiduals trim = masked_residuals(MatD(a.frames.leftCols(4)),
                                               MatD(b.frames.leftCols(4)), 4, lay);
  for (int g = 0; g < 2; ++g) {
    CHECK(clean.ssq[g] == dirty.ssq[g]);
    CHECK(clean.ssq[g] == trim.ssq[g]);
  }

  CHECK_THROWS_AS(masked_residuals(dp, xp, 0, lay), std::invalid_argument);
  CHECK_THROWS_AS(masked_residuals(dp, xp, 7, lay), std::invalid_argument);
  const MatD wrong = MatD::Zero(4, 6);
  CHECK_THROWS_AS(masked_residuals(wrong, xp, 4, lay), std::invalid_argument);
}

TEST_CASE("baseline with zero network reduces to the skip-path closed form") {
  TestRig r = make_rig(LossMode::Baseline);
  r.model.net.params().setZero();
  pin_head(r.model.heads[0], 0.0);

  const LossBreakdown got =
      diffusion_loss(r.model, r.layout, r.cfg, r.x0, r.t, r.eps);
  CHECK(got.theta == got.psi);

  // D = c_skip * x(t) when F = 0, so the weighted term is
  // lambda * ||c_skip*x(t) - x0||^2 pooled over valid frames; u = 0 adds 0.
  double num = 0.0, v = 0.0;
  const double n = double(r.layout.feature_dim());
  for (std::size_t s = 0; s < r.x0.size(); ++s) {
    const PrecondCoeffs c = precondition_coeffs(r.t[s], 1.0);
    const MatD xt = r.x0[s].frames + r.t[s] * r.eps[s];
    const MatD res = c.c_skip * xt - r.x0[s].frames;
    num += c.lambda * res.leftCols(r.x0[s].valid_len).squaredNorm();
    v += double(r.x0[s].valid_len);
  }
  CHECK(got.theta == doctest::Approx(num / (n * v)).epsilon(1e-12));

  // Per-group means in the breakdown match a direct computation.
  for (int g = 0; g < r.layout.group_count(); ++g) {
    double ssq = 0.0, cnt = 0.0;
    for (std::size_t s = 0; s < r.x0.size(); ++s) {
      const PrecondCoeffs c = precondition_coeffs(r.t[s], 1.0);
      const MatD xt = r.x0[s].frames + r.t[s] * r.eps[s];
      const MatD res = c.c_skip * xt - r.x0[s].frames;
      ssq += res.block(r.layout.group_offset(g), 0, r.layout.group_dim(g),
                       r.x0[s].valid_len)
                 .squaredNorm();
      cnt += double(r.layout.group_dim(g)) * double(r.x0[s].valid_len);
    }
    CHECK(got.group_mean_sq[g] == doctest::Approx(ssq / cnt).epsilon(1e-12));
  }
}

TEST_CASE("uncertainty weight optimum: closed form, convexity, halving") {
  // Zero network and x0 = 0 make the residual c_skip * t * eps exactly, so
  // the optimum of u has a closed form to compare against.
  TestRig r = make_rig(LossMode::Baseline);
  r.model.net.params().setZero();
  for (auto& s : r.x0) {
    s.frames.setZero();
  }
  for (std::size_t s = 0; s < r.eps.size(); ++s) {
    r.eps[s].setZero();
    r.eps[s].leftCols(r.x0[s].valid_len).setConstant(1.0);
  }

  const double n = double(r.layout.feature_dim());
  double v = 0.0, opt_num = 0.0;
  for (std::size_t s = 0; s < r.x0.size(); ++s) {
    const PrecondCoeffs c = precondition_coeffs(r.t[s], 1.0);
    const double elem = c.c_skip * r.t[s];
    opt_num += c.lambda * n * double(r.x0[s].valid_len) * elem * elem;
    v += double(r.x0[s].valid_len);
  }
  const double e_u_star = opt_num / (n * v);

  auto joint_at = [&](double u) {
    pin_head(r.model.heads[0], u);
    return diffusion_loss(r.model, r.layout, r.cfg, r.x0, r.t, r.eps).theta;
  };

  // Golden-section minimum lands on the closed form.
  double lo = std::log(e_u_star) - 3.0, hi = std::log(e_u_star) + 3.0;
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double m1 = hi - phi * (hi - lo), m2 = lo + phi * (hi - lo);
  double f1 = joint_at(m1), f2 = joint_at(m2);
  for (int it = 0; it < 80; ++it) {
    if (f1 < f2) {
      hi = m2; m2 = m1; f2 = f1;
      m1 = hi - phi * (hi - lo); f1 = joint_at(m1);
    } else {
      lo = m1; m1 = m2; f1 = f2;
      m2 = lo + phi * (hi - lo); f2 = joint_at(m2);
    }
  }
  const double u_min = 0.5 * (lo + hi);
  CHECK(std::exp(u_min) == doctest::Approx(e_u_star).epsilon(1e-6));
  CHECK(joint_at(u_min) < joint_at(u_min + 0.1));
  CHECK(joint_at(u_min) < joint_at(u_min - 0.1));

  // Doubling e^u halves the weighted term; the +u term absorbs the rest.
  const double u0 = std::log(e_u_star) + 0.37;
  const double w0 = joint_at(u0) - u0;
  const double w1 = joint_at(u0 + std::log(2.0)) - (u0 + std::log(2.0));
  CHECK(w1 == doctest::Approx(0.5 * w0).epsilon(1e-12));

  // optimal_e_u agrees: pool the residuals of the single-t sub-batches.
  const std::vector<double> one_t = {r.t[0]};
  const PrecondCoeffs c0 = precondition_coeffs(r.t[0], 1.0);
  const MatD d0 = c0.c_skip * (r.x0[0].frames + r.t[0] * r.eps[0]);
  const GroupResiduals g0 =
      masked_residuals(d0, r.x0[0].frames, r.x0[0].valid_len, r.layout);
  const VecD eo = optimal_e_u(LossMode::Baseline, g0, c0.lambda);
  const double elem0 = c0.c_skip * r.t[0];
  CHECK(eo.size() == 1);
  CHECK(eo[0] == doctest::Approx(c0.lambda * elem0 * elem0).epsilon(1e-12));
}

TEST_CASE("per-group heads settle on per-group means, not the pooled one") {
  TestRig r = make_rig(LossMode::PerGroup, {2, 1, 2, 1}, 8, {6, 4}, 11);
  r.model.net.params().setZero();
  const std::vector<double> scale = {0.3, 1.0, 2.5, 0.8};
  r.t = {0.7, 0.7};
  for (std::size_t s = 0; s < r.x0.size(); ++s) {
    r.x0[s].frames.setZero();
    r.eps[s].setZero();
    for (int g = 0; g < r.layout.group_count(); ++g)
      r.eps[s]
          .block(r.layout.group_offset(g), 0, r.layout.group_dim(g),
                 r.x0[s].valid_len)
          .setConstant(scale[g]);
  }
  const PrecondCoeffs c = precondition_coeffs(0.7, 1.0);

  // Heads pinned at the per-group optimum: psi gradients vanish.
  for (int g = 0; g < 4; ++g) {
    const double elem = c.c_skip * 0.7 * scale[g];
    pin_head(r.model.heads[g], std::log(elem * elem));
  }
  r.model.zero_grad();
  diffusion_loss(r.model, r.layout, r.cfg, r.x0, r.t, r.eps, false, true);
  for (int g = 0; g < 4; ++g)
    CHECK(r.model.heads[g].grads().cwiseAbs().maxCoeff() < 1e-12);

  // Heads pinned at the pooled mean: the balance terms push each head toward
  // its own group, with the sign of (group mean - pooled mean).
  double pooled_num = 0.0, pooled_cnt = 0.0;
  for (int g = 0; g < 4; ++g) {
    const double elem = c.c_skip * 0.7 * scale[g];
    pooled_num += double(r.layout.group_dim(g)) * 10.0 * elem * elem;
    pooled_cnt += double(r.layout.group_dim(g)) * 10.0;
  }
  const double pooled = pooled_num / pooled_cnt;
  for (int g = 0; g < 4; ++g) pin_head(r.model.heads[g], std::log(pooled));
  r.model.zero_grad();
  diffusion_loss(r.model, r.layout, r.cfg, r.x0, r.t, r.eps, false, true);
  for (int g = 0; g < 4; ++g) {
    const double elem = c.c_skip * 0.7 * scale[g];
    // du/db2 = gain = 1, so the b2 gradient is the raw du.
    const double db2 = get_grad(r.model.heads[g], "b2");
    if (elem * elem > pooled) CHECK(db2 < 0.0);
    if (elem * elem < pooled) CHECK(db2 > 0.0);
  }

  // optimal_e_u returns the per-group means for the per-group modes.
  const MatD d0 = c.c_skip * (r.x0[0].frames + 0.7 * r.eps[0]);
  GroupResiduals pool =
      masked_residuals(d0, r.x0[0].frames, r.x0[0].valid_len, r.layout);
  const VecD eo = optimal_e_u(LossMode::PerGroup, pool, c.lambda);
  for (int g = 0; g < 4; ++g) {
    const double elem = c.c_skip * 0.7 * scale[g];
    CHECK(eo[g] == doctest::Approx(elem * elem).epsilon(1e-12));
  }
}

TEST_CASE("finite differences confirm every gradient in every mode") {
  const double h = 1e-4;
  for (LossMode mode : {LossMode::Baseline, LossMode::GradBalanced,
                        LossMode::PerGroup, LossMode::Final}) {
    CAPTURE(to_string(mode));
    TestRig r = make_rig(mode, {2, 1, 2, 1}, 8, {6, 4}, 21);

    r.model.zero_grad();
    diffusion_loss(r.model, r.layout, r.cfg, r.x0, r.t, r.eps, true, true);
    std::vector<VecD> an;
    for (auto [p, g] : r.model.parameter_blocks()) an.push_back(*g);

    // The net trains on the theta scalar and the heads on the psi scalar;
    // in Baseline mode both equal the joint loss. Matching both against
    // central differences also proves the detach routing: leakage from the
    // other objective would break the match.
    auto value = [&](bool theta) {
      const LossBreakdown b =
          diffusion_loss(r.model, r.layout, r.cfg, r.x0, r.t, r.eps);
      return theta ? b.theta : b.psi;
    };

    double worst = 0.0;
    const auto blocks = r.model.parameter_blocks();
    for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
      const bool theta = bi == 0;
      VecD& p = *blocks[bi].first;
      for (Index j = 0; j < p.size(); ++j) {
        const double save = p[j];
        p[j] = save + h;
        const double fp = value(theta);
        p[j] = save - h;
        const double fm = value(theta);
        p[j] = save;
        const double fd = (fp - fm) / (2.0 * h);
        const double rel = std::abs(fd - an[bi][j]) /
                           std::max({std::abs(fd), std::abs(an[bi][j]), 1e-7});
        worst = std::max(worst, rel);
      }
    }
    CHECK(worst < 2e-4);
  }
}

TEST_CASE("gradient routing: each objective touches only its parameters") {
  TestRig r = make_rig(LossMode::Final);

  r.model.zero_grad();
  diffusion_loss(r.model, r.layout, r.cfg, r.x0, r.t, r.eps, false, true);
  CHECK(r.model.net.grads().isZero(0.0));
  bool head_nonzero = false;
  for (auto& hd : r.model.heads)
    head_nonzero = head_nonzero || hd.grads().cwiseAbs().maxCoeff() > 0.0;
  CHECK(head_nonzero);

  r.model.zero_grad();
  diffusion_loss(r.model, r.layout, r.cfg, r.x0, r.t, r.eps, true, false);
  CHECK(r.model.net.grads().cwiseAbs().maxCoeff() > 0.0);
  for (auto& hd : r.model.heads) CHECK(hd.grads().isZero(0.0));
}

TEST_CASE("padded batch equals the trimmed batch bit for bit") {
  for (LossMode mode : {LossMode::Baseline, LossMode::Final}) {
    CAPTURE(to_string(mode));
    TestRig r = make_rig(mode, {2, 1, 2, 1}, 8, {6, 4}, 33);

    std::vector<MotionSample<double>> x0t;
    std::vector<MatD> epst;
    for (std::size_t s = 0; s < r.x0.size(); ++s) {
      x0t.push_back({MatD(r.x0[s].frames.leftCols(r.x0[s].valid_len)),
                     r.x0[s].valid_len});
      epst.push_back(MatD(r.eps[s].leftCols(r.x0[s].valid_len)));
    }

    r.model.zero_grad();
    const LossBreakdown pad =
        diffusion_loss(r.model, r.layout, r.cfg, r.x0, r.t, r.eps, true, true);
    const VecD net_g_pad = r.model.net.grads();

    r.model.zero_grad();
    const LossBreakdown trim =
        diffusion_loss(r.model, r.layout, r.cfg, x0t, r.t, epst, true, true);

    CHECK(pad.theta == trim.theta);
    CHECK(pad.psi == trim.psi);
    CHECK((pad.group_mean_sq.array() == trim.group_mean_sq.array()).all());
    CHECK((net_g_pad.array() == r.model.net.grads().array()).all());
  }
}

TEST_CASE("equal group dims collapse Final onto PerGroup and a shared head") {
  // With equal dims the dimensionality weights are exactly one, so the Final
  // formulas reduce to PerGroup term by term.
  TestRig rf = make_rig(LossMode::Final, {2, 2, 2, 2}, 8, {6, 4}, 13);
  TestRig rp = make_rig(LossMode::PerGroup, {2, 2, 2, 2}, 8, {6, 4}, 13);
  REQUIRE((rf.model.net.params().array() == rp.model.net.params().array()).all());
  REQUIRE(group_weights(rf.layout).isOnes(0.0));

  rf.model.zero_grad();
  rp.model.zero_grad();
  const LossBreakdown bf =
      diffusion_loss(rf.model, rf.layout, rf.cfg, rf.x0, rf.t, rf.eps, true, true);
  const LossBreakdown bp =
      diffusion_loss(rp.model, rp.layout, rp.cfg, rp.x0, rp.t, rp.eps, true, true);
  CHECK(bf.theta == bp.theta);
  CHECK(bf.psi == bp.psi);
  CHECK((rf.model.net.grads().array() == rp.model.net.grads().array()).all());

  // Four heads pinned to one value reproduce the shared-head objective.
  for (auto& hd : rp.model.heads) pin_head(hd, -0.42);
  const double theta_pinned =
      diffusion_loss(rp.model, rp.layout, rp.cfg, rp.x0, rp.t, rp.eps).theta;

  DiffusionModel<double> shared(NetConfig{8, 1, false, 8, 1.0}, rp.layout, 8,
                                LossMode::GradBalanced, 0.25, 8, 8);
  shared.net.params() = rp.model.net.params();
  shared.net.fourier() = rp.model.net.fourier();
  shared.heads[0].fourier() = rp.model.heads[0].fourier();
  pin_head(shared.heads[0], -0.42);
  const LossConfig cfg_gb = loss_config(LossMode::GradBalanced);
  const double theta_shared =
      diffusion_loss(shared, rp.layout, cfg_gb, rp.x0, rp.t, rp.eps).theta;
  CHECK(theta_pinned == doctest::Approx(theta_shared).epsilon(1e-14));

  // Unequal dims must not collapse (guards against dead weight paths).
  TestRig uf = make_rig(LossMode::Final, {2, 1, 2, 1}, 8, {6, 4}, 13);
  TestRig up = make_rig(LossMode::PerGroup, {2, 1, 2, 1}, 8, {6, 4}, 13);
  const double tf =
      diffusion_loss(uf.model, uf.layout, uf.cfg, uf.x0, uf.t, uf.eps).theta;
  const double tp =
      diffusion_loss(up.model, up.layout, up.cfg, up.x0, up.t, up.eps).theta;
  CHECK(tf != tp);
}

TEST_CASE("scalar rescaling and batch duplication preserve direction") {
  TestRig r = make_rig(LossMode::Final);

  r.model.zero_grad();
  const LossBreakdown one =
      diffusion_loss(r.model, r.layout, r.cfg, r.x0, r.t, r.eps, true, true);
  const VecD g1 = r.model.net.grads();

  // Duplicating every sequence leaves the masked mean and its gradient
  // unchanged: the reduction is a mean over valid frames, not a sum.
  std::vector<MotionSample<double>> x2(r.x0);
  std::vector<double> t2(r.t);
  std::vector<MatD> e2(r.eps);
  x2.insert(x2.end(), r.x0.begin(), r.x0.end());
  t2.insert(t2.end(), r.t.begin(), r.t.end());
  e2.insert(e2.end(), r.eps.begin(), r.eps.end());
  r.model.zero_grad();
  const LossBreakdown two =
      diffusion_loss(r.model, r.layout, r.cfg, x2, t2, e2, true, true);
  CHECK(two.theta == doctest::Approx(one.theta).epsilon(1e-12));
  CHECK(two.psi == doctest::Approx(one.psi).epsilon(1e-12));
  const VecD g2 = r.model.net.grads();
  CHECK((g2 - g1).cwiseAbs().maxCoeff() <=
        1e-12 * std::max(1.0, g1.cwiseAbs().maxCoeff()));

  // Scaling the group multipliers scales the probe linearly: equivalent
  // formulations differing by a constant keep the gradient direction.
  GroupResiduals pool;
  pool.ssq = VecD::Constant(4, 3.7);
  pool.count = VecD::Constant(4, 20.0);
  const VecD w = group_weights(r.layout);
  const VecD a = grad_probe_norms(LossMode::Final, 0.8, r.cfg.precond,
                                  r.layout, pool, VecD::Constant(4, 0.9), w,
                                  60.0);
  const VecD b = grad_probe_norms(LossMode::Final, 0.8, r.cfg.precond,
                                  r.layout, pool, VecD::Constant(4, 0.9),
                                  VecD(3.0 * w), 60.0);
  for (int g = 0; g < 4; ++g)
    CHECK(b[g] == doctest::Approx(3.0 * a[g]).epsilon(1e-14));
}

TEST_CASE("probe patterns: rising baseline, flat rebalanced, final collapse") {
  const FeatureLayout lay = make_layout({2, 1, 2, 1}, 8);
  const Preconditioner pc{};
  const double v = 10.0;
  const double n = double(lay.feature_dim());
  const double denom = n * v;
  VecD counts(4);
  for (int g = 0; g < 4; ++g) counts[g] = double(lay.group_dim(g)) * v;
  const VecD ones = VecD::Ones(4);

  // Central 80% of the lognormal noise-level mass.
  std::vector<double> ts;
  for (int i = 0; i < 9; ++i) {
    const double z = -1.2816 + 2.0 * 1.2816 * double(i) / 8.0;
    ts.push_back(std::exp(-1.2 + 1.2 * z));
  }

  auto pool_uniform = [&](double rho) {
    GroupResiduals p;
    p.count = counts;
    p.ssq = (counts.array() * rho * rho).matrix();
    return p;
  };

  // Baseline with u at its optimum: the total gradient norm doubles when the
  // residuals halve, and it sweeps with c_out across t instead of staying
  // flat. GradBalanced removes both effects exactly.
  for (double t : ts) {
    const PrecondCoeffs c = precondition_coeffs(t, pc.sigma_data);
    for (double rho : {0.9, 0.45}) {
      const GroupResiduals p = pool_uniform(rho);
      const VecD eb = optimal_e_u(LossMode::Baseline, p, c.lambda);
      const VecD nb = grad_probe_norms(LossMode::Baseline, t, pc, lay, p, eb,
                                       ones, denom);
      const VecD eg = optimal_e_u(LossMode::GradBalanced, p, c.lambda);
      const VecD ng = grad_probe_norms(LossMode::GradBalanced, t, pc, lay, p,
                                       eg, ones, denom);
      if (rho == 0.45) {
        const GroupResiduals p0 = pool_uniform(0.9);
        const VecD eb0 = optimal_e_u(LossMode::Baseline, p0, c.lambda);
        const VecD nb0 = grad_probe_norms(LossMode::Baseline, t, pc, lay, p0,
                                          eb0, ones, denom);
        CHECK(nb.sum() == doctest::Approx(2.0 * nb0.sum()).epsilon(1e-12));
        const VecD ng0 = grad_probe_norms(
            LossMode::GradBalanced, t, pc, lay, p0,
            optimal_e_u(LossMode::GradBalanced, p0, c.lambda), ones, denom);
        CHECK(ng.sum() == doctest::Approx(ng0.sum()).epsilon(1e-12));
      }
    }
  }
  double base_min = 1e300, base_max = 0.0, gb_min = 1e300, gb_max = 0.0;
  for (double t : ts) {
    const PrecondCoeffs c = precondition_coeffs(t, pc.sigma_data);
    const GroupResiduals p = pool_uniform(0.9);
    base_min = std::min(base_min,
                        grad_probe_norms(LossMode::Baseline, t, pc, lay, p,
                                         optimal_e_u(LossMode::Baseline, p,
                                                     c.lambda),
                                         ones, denom)
                            .sum());
    base_max = std::max(base_max,
                        grad_probe_norms(LossMode::Baseline, t, pc, lay, p,
                                         optimal_e_u(LossMode::Baseline, p,
                                                     c.lambda),
                                         ones, denom)
                            .sum());
    gb_min = std::min(gb_min,
                      grad_probe_norms(LossMode::GradBalanced, t, pc, lay, p,
                                       optimal_e_u(LossMode::GradBalanced, p,
                                                   c.lambda),
                                       ones, denom)
                          .sum());
    gb_max = std::max(gb_max,
                      grad_probe_norms(LossMode::GradBalanced, t, pc, lay, p,
                                       optimal_e_u(LossMode::GradBalanced, p,
                                                   c.lambda),
                                       ones, denom)
                          .sum());
  }
  CHECK(base_max / base_min > 5.0);
  CHECK(gb_max / gb_min < 1.0 + 1e-9);

  // Imbalanced groups: a shared head leaves the per-group norms spread wide,
  // per-group heads cut the spread to the dimensionality factor, and the
  // group weights cancel that too.
  const std::vector<double> rho = {0.3, 1.0, 2.5, 0.8};
  GroupResiduals mix;
  mix.count = counts;
  mix.ssq = VecD(4);
  for (int g = 0; g < 4; ++g) mix.ssq[g] = counts[g] * rho[g] * rho[g];
  const double t0 = 0.55;
  const PrecondCoeffs c0 = precondition_coeffs(t0, pc.sigma_data);
  const VecD w = group_weights(lay);

  const VecD spread = grad_probe_norms(
      LossMode::GradBalanced, t0, pc, lay, mix,
      optimal_e_u(LossMode::GradBalanced, mix, c0.lambda), ones, denom);
  CHECK(spread.maxCoeff() / spread.minCoeff() > 3.0);

  const VecD pg = grad_probe_norms(
      LossMode::PerGroup, t0, pc, lay, mix,
      optimal_e_u(LossMode::PerGroup, mix, c0.lambda), ones, denom);
  CHECK(pg.maxCoeff() / pg.minCoeff() ==
        doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));

  const VecD fin = grad_probe_norms(
      LossMode::Final, t0, pc, lay, mix,
      optimal_e_u(LossMode::Final, mix, c0.lambda), w, denom);
  CHECK(fin.maxCoeff() / fin.minCoeff() < 1.0 + 1e-12);
}

TEST_CASE("probe norms equal the training backward seen at out_proj bias") {
  // Zero weights with unit gain make dL/d(out_proj.b) the column sum of the
  // exact upstream, which ties the probe formula to the real backward.
  TestRig r = make_rig(LossMode::Final, {2, 1, 2, 1}, 8, {6, 4}, 55);
  r.model.net.params().setZero();
  set_param(r.model.net, "gain", 1.0);
  const std::vector<double> rho = {0.3, 1.0, 2.5, 0.8};
  r.t = {0.55, 0.55};
  for (std::size_t s = 0; s < r.x0.size(); ++s) {
    r.x0[s].frames.setZero();
    r.eps[s].setZero();
    for (int g = 0; g < 4; ++g)
      r.eps[s]
          .block(r.layout.group_offset(g), 0, r.layout.group_dim(g),
                 r.x0[s].valid_len)
          .setConstant(rho[g]);
  }
  const std::vector<double> us = {-0.7, 0.2, 1.1, -0.1};
  for (int g = 0; g < 4; ++g) pin_head(r.model.heads[g], us[g]);

  r.model.zero_grad();
  diffusion_loss(r.model, r.layout, r.cfg, r.x0, r.t, r.eps, true, false);

  const PrecondCoeffs c = precondition_coeffs(0.55, 1.0);
  const double v = 10.0, n = 6.0;
  GroupResiduals pool;
  pool.count = VecD(4);
  pool.ssq = VecD(4);
  for (int g = 0; g < 4; ++g) {
    pool.count[g] = double(r.layout.group_dim(g)) * v;
    const double elem = c.c_skip * 0.55 * rho[g];
    pool.ssq[g] = pool.count[g] * elem * elem;
  }
  VecD e_u(4);
  for (int g = 0; g < 4; ++g) e_u[g] = std::exp(us[g]);
  const VecD norms =
      grad_probe_norms(LossMode::Final, 0.55, r.cfg.precond, r.layout, pool,
                       e_u, group_weights(r.layout), n * v);

  const auto& infos = r.model.net.param_infos();
  for (const auto& o : infos)
    if (o.name == "out_proj.b")
      for (int g = 0; g < 4; ++g) {
        const double row_grad =
            r.model.net.grads()[o.offset + r.layout.group_offset(g)];
        // One constant upstream element per group: |column sum| over the
        // batch is V * element, and the probe norm is sqrt(count) * element.
        const double elem = std::abs(row_grad) / v;
        CHECK(norms[g] ==
              doctest::Approx(elem * std::sqrt(pool.count[g])).epsilon(1e-12));
      }
}

TEST_CASE("loss argument validation") {
  TestRig r = make_rig(LossMode::Final);
  CHECK_THROWS_AS(loss_baseline(r.model, r.layout, r.cfg, r.x0, r.t, r.eps),
                  std::invalid_argument);

  TestRig rb = make_rig(LossMode::Baseline);
  CHECK_THROWS_AS(loss_theta(rb.model, rb.layout, rb.cfg, rb.x0, rb.t, rb.eps),
                  std::invalid_argument);
  CHECK_THROWS_AS(loss_u_heads(rb.model, rb.layout, rb.cfg, rb.x0, rb.t, rb.eps),
                  std::invalid_argument);

  // Head count has to match the mode.
  LossConfig cfg_gb = loss_config(LossMode::GradBalanced);
  CHECK_THROWS_AS(
      diffusion_loss(r.model, r.layout, cfg_gb, r.x0, r.t, r.eps),
      std::invalid_argument);

  // Final without group weights violates the config contract.
  LossConfig bad = r.cfg;
  bad.uses_group_weights = false;
  CHECK_THROWS_AS(diffusion_loss(r.model, r.layout, bad, r.x0, r.t, r.eps),
                  std::invalid_argument);

  std::vector<double> short_t = {0.5};
  CHECK_THROWS_AS(diffusion_loss(r.model, r.layout, r.cfg, r.x0, short_t, r.eps),
                  std::invalid_argument);

  std::vector<double> bad_t = r.t;
  bad_t[0] = 0.0;
  CHECK_THROWS_AS(diffusion_loss(r.model, r.layout, r.cfg, r.x0, bad_t, r.eps),
                  std::invalid_argument);
}
