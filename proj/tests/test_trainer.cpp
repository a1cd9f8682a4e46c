#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "gdk/checkpoint.hpp"
#include "gdk/trainer.hpp"

using namespace gdk;

namespace {

struct TinyRun {
  SynthDataset data;
  NormStats stats;
  NetConfig nc;

  TinyRun() {
    SynthConfig sc;
    sc.train_count = 12;
    sc.val_count = 4;
    sc.test_count = 1;
    sc.l_max = 32;
    sc.raw_len_min = 36;
    sc.raw_len_max = 56;
    data = generate_dataset(sc, 5);
    stats = fit_stats(data.train.data, data.layout);
    nc.channels = 8;
    nc.blocks = 1;
    nc.attention = false;
    nc.fourier_dim = 8;
  }

  DiffusionModel<float> fresh_model(LossMode mode, std::uint64_t seed) const {
    DiffusionModel<float> m(nc, data.layout, 32, mode);
    Rng init(seed);
    m.init_weights(init);
    return m;
  }
};

std::uint64_t param_checksum(DiffusionModel<float>& m) {
  std::uint64_t h = 1469598103934665603ull;
  for (auto& blk : m.parameter_blocks())
    h = fnv1a64(blk.first->data(),
                sizeof(float) * static_cast<std::size_t>(blk.first->size()), h);
  return h;
}

std::filesystem::path fresh_dir(const char* tag) {
  const auto dir = std::filesystem::temp_directory_path() / tag;
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("learning rate: warmup ramp, cosine tail, exact endpoints") {
  const long total = 1000, warmup = 100;
  const double max = 1e-2;
  CHECK(lr_schedule(0, total, warmup, max) == 0.0);
  CHECK(lr_schedule(50, total, warmup, max) == doctest::Approx(0.5 * max));
  CHECK(lr_schedule(warmup, total, warmup, max) == max);
  CHECK(lr_schedule(550, total, warmup, max) == doctest::Approx(0.5 * max));
  CHECK(lr_schedule(total, total, warmup, max) == 0.0);
  CHECK(lr_schedule(5 * total, total, warmup, max) == 0.0);

  double prev = max;
  for (long s = warmup + 1; s <= total; s += 90) {
    const double lr = lr_schedule(s, total, warmup, max);
    CHECK(lr < prev);
    prev = lr;
  }

  SUBCASE("no warmup starts at max") {
    CHECK(lr_schedule(0, total, 0, max) == max);
  }
  SUBCASE("validation") {
    CHECK_THROWS(lr_schedule(-1, total, warmup, max));
    CHECK_THROWS(lr_schedule(0, 0, 0, max));
    CHECK_THROWS(lr_schedule(0, total, total, max));
    CHECK_THROWS(lr_schedule(0, total, warmup, 0.0));
  }
}

TEST_CASE("adam: first-step geometry and scale invariance") {
  const double lr = 1e-2, b1 = 0.9, b2 = 0.95, eps = 1e-8;
  VecD p(3), g(3);
  p << 1.0, -2.0, 0.5;
  g << 3.0, -4.0, 1e-3;
  VecD m = VecD::Zero(3), v = VecD::Zero(3);
  VecD p1 = p;
  adam_step(p1, g, m, v, 1, lr, b1, b2, eps);
  for (Index i = 0; i < 3; ++i) {
    const double delta = p1(i) - p(i);
    CHECK(std::abs(delta + lr * (g(i) > 0 ? 1.0 : -1.0)) < 1e-5 * lr);
  }

  SUBCASE("scaling all gradients leaves the first update unchanged") {
    VecD m2 = VecD::Zero(3), v2 = VecD::Zero(3);
    VecD p2 = p;
    adam_step(p2, VecD(10.0 * g), m2, v2, 1, lr, b1, b2, eps);
    // deviation is O(lr * eps / |g|), largest on the 1e-3 component
    CHECK((p2 - p1).cwiseAbs().maxCoeff() < 1e-6);
  }

  SUBCASE("zero gradient is a no-op forever") {
    VecD mz = VecD::Zero(3), vz = VecD::Zero(3), pz = p;
    const VecD zero = VecD::Zero(3);
    for (long s = 1; s <= 5; ++s) adam_step(pz, zero, mz, vz, s, lr, b1, b2, eps);
    CHECK((pz.array() == p.array()).all());
  }

  SUBCASE("non-finite gradient aborts") {
    VecD gb = g;
    gb(1) = std::nan("");
    VecD mb = VecD::Zero(3), vb = VecD::Zero(3), pb = p;
    CHECK_THROWS(adam_step(pb, gb, mb, vb, 1, lr, b1, b2, eps));
  }
}

TEST_CASE("training is deterministic and a zero-epoch run is the identity") {
  const TinyRun run;
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.epochs = 2;
  cfg.warmup_epochs = 1;
  cfg.seed = 11;
  cfg.mode = LossMode::Final;

  auto m1 = run.fresh_model(cfg.mode, 7);
  const TrainResult r1 = train(m1, run.data.layout, run.stats, run.data.train.data,
                               run.data.val.data, cfg);
  auto m2 = run.fresh_model(cfg.mode, 7);
  const TrainResult r2 = train(m2, run.data.layout, run.stats, run.data.train.data,
                               run.data.val.data, cfg);
  CHECK(param_checksum(m1) == param_checksum(m2));
  REQUIRE(r1.log.size() == r2.log.size());
  for (std::size_t i = 0; i < r1.log.size(); ++i)
    CHECK(r1.log[i].theta == r2.log[i].theta);
  CHECK(r1.steps == 2 * 3);  // 12 samples / batch 4 = 3 steps per epoch
  CHECK(r1.log.size() == 4);  // train + val rows per epoch

  SUBCASE("another seed trains to different weights") {
    TrainConfig other = cfg;
    other.seed = 12;
    auto m3 = run.fresh_model(cfg.mode, 7);
    train(m3, run.data.layout, run.stats, run.data.train.data, run.data.val.data,
          other);
    CHECK(param_checksum(m3) != param_checksum(m1));
  }

  SUBCASE("zero epochs") {
    TrainConfig zed = cfg;
    zed.epochs = 0;
    auto m0 = run.fresh_model(cfg.mode, 7);
    auto mref = run.fresh_model(cfg.mode, 7);
    const TrainResult r0 = train(m0, run.data.layout, run.stats, run.data.train.data,
                                 run.data.val.data, zed);
    CHECK(r0.steps == 0);
    CHECK(r0.log.empty());
    CHECK(param_checksum(m0) == param_checksum(mref));
  }

  SUBCASE("config validation") {
    TrainConfig bad = cfg;
    bad.warmup_epochs = 2;
    CHECK_THROWS(bad.validate());
    bad = cfg;
    bad.max_lr = 0.0;
    CHECK_THROWS(bad.validate());
    bad = cfg;
    bad.batch_size = 0;
    CHECK_THROWS(bad.validate());
  }
}

TEST_CASE("a short run reduces the training objective") {
  const TinyRun run;
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.epochs = 8;
  cfg.warmup_epochs = 2;
  cfg.max_lr = 3e-3;
  cfg.seed = 3;
  cfg.mode = LossMode::Final;

  auto m = run.fresh_model(cfg.mode, 7);
  const TrainResult r = train(m, run.data.layout, run.stats, run.data.train.data,
                              run.data.val.data, cfg);
  double first = 0.0, last = 0.0;
  int seen = 0;
  for (const auto& e : r.log)
    if (e.split == "train") {
      if (seen < 2) first += e.psi;
      if (e.epoch >= cfg.epochs - 2) last += e.psi;
      ++seen;
    }
  CHECK(seen == cfg.epochs);
  CHECK(last < first);
}

TEST_CASE("checkpoints: trailing window and an exact round trip") {
  const TinyRun run;
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.epochs = 3;
  cfg.warmup_epochs = 1;
  cfg.seed = 9;
  cfg.mode = LossMode::Final;
  cfg.keep_checkpoints = 2;

  const auto dir = fresh_dir("gdk_trainer_ckpt_test");
  auto m = run.fresh_model(cfg.mode, 7);
  const TrainResult r = train(m, run.data.layout, run.stats, run.data.train.data,
                              run.data.val.data, cfg, dir);

  REQUIRE(r.checkpoints.size() == 2);
  CHECK(r.checkpoints[0].filename() == "checkpoint-0001.gdkw");
  CHECK(r.checkpoints[1].filename() == "checkpoint-0002.gdkw");
  CHECK(std::filesystem::exists(dir / "train_log.csv"));
  CHECK(std::filesystem::exists(dir / "u_curves.csv"));

  LoadedCheckpoint ck = load_checkpoint(r.checkpoints[1], run.data.layout);
  CHECK(ck.epoch == 2);
  CHECK(ck.mode == LossMode::Final);
  CHECK(ck.precond.sigma_data == run.stats.sigma_data);
  CHECK(ck.stats.sigma_data == run.stats.sigma_data);
  CHECK(ck.has_optimizer);
  CHECK(ck.opt_step == r.steps);
  CHECK(param_checksum(ck.model) == param_checksum(m));
  CHECK((ck.model.net.fourier().freqs.array() == m.net.fourier().freqs.array()).all());

  // bitwise-equal parameters and buffers give a bitwise-equal forward pass
  const MotionSample<float> probe = normalize(
      run.data.val.data.samples[0], run.data.layout, run.stats);
  const MatF a = m.net.forward(probe.frames, probe.valid_len, 0.0);
  const MatF b = ck.model.net.forward(probe.frames, probe.valid_len, 0.0);
  CHECK((a.array() == b.array()).all());

  SUBCASE("a different layout is rejected") {
    const FeatureLayout other = skeleton_layout(run.data.skeleton, 64);
    CHECK_THROWS(load_checkpoint(r.checkpoints[1], other));
  }
  SUBCASE("a corrupted file is rejected") {
    const auto bad = dir / "bad.gdkw";
    std::ofstream os(bad, std::ios::binary);
    os << "GDKXancient";
    os.close();
    CHECK_THROWS(load_checkpoint(bad, run.data.layout));
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("gradient probe matches the closed form on a zeroed network") {
  SynthConfig sc;
  sc.train_count = 128;
  sc.val_count = 1;
  sc.test_count = 1;
  sc.l_max = 32;
  sc.raw_len_min = 36;
  sc.raw_len_max = 56;
  const SynthDataset data = generate_dataset(sc, 17);
  const NormStats stats = fit_stats(data.train.data, data.layout);
  const FeatureLayout& layout = data.layout;

  NetConfig nc;
  nc.channels = 8;
  nc.blocks = 1;
  nc.fourier_dim = 8;
  DiffusionModel<float> model(nc, layout, 32, LossMode::Baseline);
  Rng init(4);
  model.init_weights(init);
  for (auto& blk : model.parameter_blocks()) blk.first->setZero();

  Preconditioner pc;
  pc.sigma_data = stats.sigma_data;
  const LossConfig lcfg = loss_config(LossMode::Baseline, pc);

  VecD t_grid(5);
  t_grid << 0.05, 0.3, 1.0, 5.0, 20.0;
  const auto rows =
      probe_gradient_norms(model, layout, lcfg, stats, data.train.data, t_grid, 32, 2);
  REQUIRE(rows.size() == 5);

  // With F = 0 the denoised estimate is c_skip * x(t), so the expected
  // pooled residual is (c_skip-1)^2 ||x0||^2 + c_skip^2 t^2 count, which
  // feeds the same norm formula the probe applies.
  const int k = layout.group_count();
  const int chunks = 128 / 32;
  const double n = static_cast<double>(layout.feature_dim());
  for (Index ti = 0; ti < t_grid.size(); ++ti) {
    const double t = t_grid(ti);
    const PrecondCoeffs c = precondition_coeffs(t, pc.sigma_data, pc.c_noise_scale);
    VecD expected = VecD::Zero(k);
    double overall = 0.0;
    for (int ch = 0; ch < chunks; ++ch) {
      GroupResiduals pooled;
      pooled.ssq = VecD::Zero(k);
      pooled.count = VecD::Zero(k);
      double vtot = 0.0;
      for (int j = 0; j < 32; ++j) {
        const auto& raws = data.train.data.samples[static_cast<std::size_t>(ch * 32 + j)];
        const MotionSample<float> xs = normalize(raws, layout, stats);
        for (int g = 0; g < k; ++g) {
          const Index off = layout.group_offset(g), dim = layout.group_dim(g);
          const double s0 = xs.frames.block(off, 0, dim, xs.valid_len)
                                .cast<double>()
                                .squaredNorm();
          const double cnt = static_cast<double>(dim) * static_cast<double>(xs.valid_len);
          pooled.ssq(g) += (c.c_skip - 1.0) * (c.c_skip - 1.0) * s0 +
                           c.c_skip * c.c_skip * t * t * cnt;
          pooled.count(g) += cnt;
        }
        vtot += static_cast<double>(xs.valid_len);
      }
      const VecD norms = grad_probe_norms(lcfg.mode, t, pc, layout, pooled,
                                          VecD::Ones(1), VecD::Ones(k), n * vtot);
      expected += norms;
      overall += norms.norm();
    }
    expected /= chunks;
    overall /= chunks;
    for (int g = 0; g < k; ++g)
      CHECK(rows[static_cast<std::size_t>(ti)].per_group(g) ==
            doctest::Approx(expected(g)).epsilon(0.01));
    CHECK(rows[static_cast<std::size_t>(ti)].overall ==
          doctest::Approx(overall).epsilon(0.01));
  }

  SUBCASE("probe validation") {
    CHECK_THROWS(probe_gradient_norms(model, layout, lcfg, stats, data.val.data,
                                      t_grid, 32, 2));
  }
}
