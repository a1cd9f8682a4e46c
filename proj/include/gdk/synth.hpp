#pragma once

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include <json.hpp>

#include "gdk/common.hpp"
#include "gdk/layout.hpp"
#include "gdk/motion.hpp"
#include "gdk/rng.hpp"
#include "gdk/skeleton.hpp"

namespace gdk {

struct SynthConfig {
  int train_count = 2000;
  int val_count = 200;
  int test_count = 200;
  int l_max = 64;
  int raw_len_min = 36;
  int raw_len_max = 120;
  double fps = 30.0;
  double skate_prob = 0.3;           // fraction of sequences with a scripted slide
  double contact_height_thresh = 0.05;  // meters
  double skate_dist_thresh = 0.0025;    // meters per frame

  nlohmann::json to_json() const {
    return {{"train_count", train_count},   {"val_count", val_count},
            {"test_count", test_count},     {"l_max", l_max},
            {"raw_len_min", raw_len_min},   {"raw_len_max", raw_len_max},
            {"fps", fps},                   {"skate_prob", skate_prob},
            {"contact_height_thresh", contact_height_thresh},
            {"skate_dist_thresh", skate_dist_thresh}};
  }

  static SynthConfig from_json(const nlohmann::json& j) {
    SynthConfig c;
    c.train_count = j.value("train_count", c.train_count);
    c.val_count = j.value("val_count", c.val_count);
    c.test_count = j.value("test_count", c.test_count);
    c.l_max = j.value("l_max", c.l_max);
    c.raw_len_min = j.value("raw_len_min", c.raw_len_min);
    c.raw_len_max = j.value("raw_len_max", c.raw_len_max);
    c.fps = j.value("fps", c.fps);
    c.skate_prob = j.value("skate_prob", c.skate_prob);
    c.contact_height_thresh = j.value("contact_height_thresh", c.contact_height_thresh);
    c.skate_dist_thresh = j.value("skate_dist_thresh", c.skate_dist_thresh);
    return c;
  }
};

// Crops to l_max (or down to the nearest multiple of 16) and zero-pads.
// Raw clips shorter than 32 frames are dropped, not an error.
template <typename Scalar>
std::optional<MotionSample<Scalar>> crop_and_pad(const Mat<Scalar>& raw, int l_max) {
  require(raw.cols() >= 1, "crop_and_pad: empty clip");
  require(l_max >= 32 && l_max % 16 == 0, "crop_and_pad: l_max must be >=32, divisible by 16");
  Index len = raw.cols();
  if (len < 32) return std::nullopt;
  len = std::min<Index>(len, l_max);
  len -= len % 16;
  MotionSample<Scalar> out;
  out.frames = Mat<Scalar>::Zero(raw.rows(), l_max);
  out.frames.leftCols(len) = raw.leftCols(len);
  out.valid_len = len;
  return out;
}

// Per-foot contact/skate frame counts under the thresholded rule used by the
// foot-skating metric: frame i is a contact if the foot height is below
// contact_height_thresh, and a skate if additionally the horizontal move to
// frame i+1 exceeds skate_dist_thresh. The last frame has no successor and
// never counts.
struct ContactCounts {
  std::int64_t contact = 0;
  std::int64_t skate = 0;
};

inline ContactCounts count_contacts(const std::vector<std::vector<Vec3>>& foot_tracks,
                                    Index valid_len, double h_thresh, double v_thresh) {
  ContactCounts c;
  for (const auto& track : foot_tracks) {
    for (Index i = 0; i + 1 < valid_len; ++i) {
      const auto t = static_cast<std::size_t>(i);
      if (track[t].z() >= h_thresh) continue;
      ++c.contact;
      if ((track[t + 1].head<2>() - track[t].head<2>()).norm() > v_thresh) ++c.skate;
    }
  }
  return c;
}

namespace detail {

inline Eigen::Vector2d heading_dir(double theta) {
  return {-std::sin(theta), std::cos(theta)};
}

inline Eigen::Vector2d heading_side(double theta) {
  return {std::cos(theta), std::sin(theta)};
}

inline double smoothstep(double u) { return u * u * (3.0 - 2.0 * u); }

struct SinOsc {
  double amp = 0.0, omega = 0.0, phase = 0.0;
  static SinOsc random(Rng& rng, double amp_lo, double amp_hi, double fps) {
    SinOsc o;
    o.amp = rng.uniform(amp_lo, amp_hi);
    o.omega = 2.0 * M_PI * rng.uniform(0.5, 1.5) / fps;
    o.phase = rng.uniform(0.0, 2.0 * M_PI);
    return o;
  }
  double at(double t) const { return amp * std::sin(omega * t + phase); }
};

}  // namespace detail

struct GeneratedSequence {
  MotionSample<double> sample;      // cropped, padded, start canonicalized to (0,0,z)
  ContactCounts truth;              // counted on the analytic foot tracks
};

// One walking sequence. Alternating single support: the planted foot tracks
// its plant point exactly (root height keeps the leg exactly reachable), the
// swing foot follows a smoothstep arc to the next plant. Scripted skating
// phases slide the plant point itself faster than the skate threshold.
inline std::optional<GeneratedSequence> generate_sequence(const Skeleton& skel,
                                                          const SynthConfig& cfg, Rng& rng) {
  const int raw_len = cfg.raw_len_min +
                      static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(
                          cfg.raw_len_max - cfg.raw_len_min + 1)));

  VecD beta = rng.normal_vector<double>(skel.shape_dim());
  const VecD scales = shape_scales(skel, beta);
  const int hip_l = 2, foot_l = 3, hip_r = 4, foot_r = 5;
  const double s_hip = scales(hip_l);
  const double leg_len = scales(foot_l) *
                         skel.joints()[static_cast<std::size_t>(foot_l)].offset.norm();
  const double hip_lat = s_hip * skel.joints()[static_cast<std::size_t>(hip_l)].offset.x();
  const double hip_drop = s_hip * skel.joints()[static_cast<std::size_t>(hip_l)].offset.z();

  const int step_frames = 8 + static_cast<int>(rng.uniform_int(7));
  const double speed = rng.uniform(0.6, 1.2);
  const double stride = std::min(speed * step_frames / cfg.fps, 0.45 * leg_len);
  const double turn_sigma = rng.uniform(0.02, 0.10);
  const double swing_clear = 0.12;  // mid-swing foot clearance above ground
  const int start_side = rng.bernoulli(0.5) ? 1 : -1;  // +1 = left plants even steps

  const int n_steps = raw_len / step_frames + 4;
  std::vector<double> theta(static_cast<std::size_t>(n_steps));
  std::vector<Eigen::Vector2d> center(static_cast<std::size_t>(n_steps));
  std::vector<Eigen::Vector2d> plant(static_cast<std::size_t>(n_steps));
  theta[0] = rng.uniform(0.0, 2.0 * M_PI);
  center[0] = Eigen::Vector2d::Zero();
  for (int k = 0; k < n_steps; ++k) {
    if (k > 0) {
      theta[static_cast<std::size_t>(k)] =
          theta[static_cast<std::size_t>(k - 1)] + turn_sigma * rng.normal();
      center[static_cast<std::size_t>(k)] =
          center[static_cast<std::size_t>(k - 1)] +
          stride * detail::heading_dir(theta[static_cast<std::size_t>(k - 1)]);
    }
    const int side = (k % 2 == 0) ? start_side : -start_side;
    const double lat = side * (std::abs(hip_lat) + rng.uniform(-0.01, 0.01));
    plant[static_cast<std::size_t>(k)] =
        center[static_cast<std::size_t>(k)] +
        lat * detail::heading_side(theta[static_cast<std::size_t>(k)]);
  }

  int skate_from = -1, skate_until = -1;
  double skate_speed = 0.0;
  if (rng.bernoulli(cfg.skate_prob) && n_steps > 6) {
    skate_from = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n_steps - 5)));
    skate_until = skate_from + 2 + static_cast<int>(rng.uniform_int(2));
    skate_speed = rng.uniform(0.004, 0.012);
  }

  detail::SinOsc foot_osc[2] = {detail::SinOsc::random(rng, 0.05, 0.20, cfg.fps),
                                detail::SinOsc::random(rng, 0.05, 0.20, cfg.fps)};
  detail::SinOsc spine_z = detail::SinOsc::random(rng, 0.03, 0.15, cfg.fps);
  detail::SinOsc spine_x = detail::SinOsc::random(rng, 0.03, 0.12, cfg.fps);
  detail::SinOsc neck_z = detail::SinOsc::random(rng, 0.02, 0.08, cfg.fps);
  detail::SinOsc head_x = detail::SinOsc::random(rng, 0.02, 0.08, cfg.fps);

  // Carried plant drift per side so a foot that skated resumes its swing
  // from where it actually stopped.
  Eigen::Vector2d carry[2] = {Eigen::Vector2d::Zero(), Eigen::Vector2d::Zero()};

  Mat<double> raw(skel.feature_dim(), raw_len);
  std::vector<std::vector<Vec3>> foot_tracks(2, std::vector<Vec3>(
                                                    static_cast<std::size_t>(raw_len)));
  Pose pose;
  pose.joint_rot.assign(static_cast<std::size_t>(skel.rotating_joint_count()),
                        Mat3::Identity());

  for (int t = 0; t < raw_len; ++t) {
    const int kk = t / step_frames;
    const double u = static_cast<double>(t - kk * step_frames) / step_frames;
    const auto sk = static_cast<std::size_t>(kk);
    const int support_side = ((kk + 1) % 2 == 0) ? start_side : -start_side;
    const int sup = support_side > 0 ? 0 : 1;  // 0 = left foot, 1 = right foot
    const int swg = 1 - sup;

    const double th = theta[sk + 1] + u * (theta[sk + 2] - theta[sk + 1]);
    const Mat3 rz = Eigen::AngleAxisd(th, Vec3::UnitZ()).toRotationMatrix();

    const Eigen::Vector2d root_a = 0.5 * (plant[sk] + plant[sk + 1]);
    const Eigen::Vector2d root_b = 0.5 * (plant[sk + 1] + plant[sk + 2]);
    const Eigen::Vector2d root_xy = root_a + u * (root_b - root_a);

    // A foot landing on its plant consumes any drift carried from its last
    // support phase.
    if (u == 0.0) carry[sup].setZero();

    Eigen::Vector2d support_plant = plant[sk + 1];
    const bool skating_now = kk + 1 >= skate_from && kk + 1 < skate_until;
    if (skating_now) {
      const double drift = skate_speed * (t - kk * step_frames);
      support_plant += drift * detail::heading_dir(th);
      carry[sup] = support_plant - plant[sk + 1];
    }

    // Hip world xy positions; hip x offset points left in the root frame.
    const auto hip_xy = [&](int side_sign) -> Eigen::Vector2d {
      return root_xy + side_sign * std::abs(hip_lat) * detail::heading_side(th);
    };
    const Eigen::Vector2d hip_sup_xy = hip_xy(sup == 0 ? 1 : -1);
    const Eigen::Vector2d hip_swg_xy = hip_xy(swg == 0 ? 1 : -1);

    const double dxy = std::min((support_plant - hip_sup_xy).norm(), 0.98 * leg_len);
    const double root_z = std::sqrt(leg_len * leg_len - dxy * dxy) - hip_drop;
    const Vec3 root_pos(root_xy.x(), root_xy.y(), root_z);

    const double hip_z = root_z + hip_drop;
    const Vec3 hip_sup(hip_sup_xy.x(), hip_sup_xy.y(), hip_z);
    const Vec3 hip_swg(hip_swg_xy.x(), hip_swg_xy.y(), hip_z);

    // Swing leg. The leg is a rigid segment, so the foot always lies on a
    // sphere of radius leg_len around the hip and height is coupled to the
    // horizontal offset. The swing therefore circumducts: the bearing sweeps
    // from the liftoff point to the next plant around the outside of the
    // stance line, and the radius widens mid-swing to gain clearance. The
    // foot dwells at both ends so liftoff and landing have no horizontal
    // motion; only scripted phases drag a planted foot.
    const Eigen::Vector2d swing_from = plant[sk] + carry[swg];
    const Eigen::Vector2d swing_to = plant[sk + 2];
    const double su = detail::smoothstep(std::clamp((u - 0.20) / 0.60, 0.0, 1.0));
    const double bump = detail::smoothstep(std::clamp((u - 0.04) / 0.10, 0.0, 1.0)) *
                        detail::smoothstep(std::clamp((0.96 - u) / 0.10, 0.0, 1.0));
    const Eigen::Vector2d rel0 = swing_from - hip_swg_xy;
    const Eigen::Vector2d rel1 = swing_to - hip_swg_xy;
    const double th0 = std::atan2(rel0.y(), rel0.x());
    double dth = std::remainder(std::atan2(rel1.y(), rel1.x()) - th0, 2.0 * M_PI);
    const int outward = swg == 0 ? 1 : -1;
    if (dth * outward < 0.0) dth += outward * 2.0 * M_PI;
    const double thf = th0 + su * dth;
    const double r_ends = (1.0 - su) * rel0.norm() + su * rel1.norm();
    const double hc = hip_z - swing_clear;
    const double r_clear = std::sqrt(leg_len * leg_len - hc * hc);
    const double r_sw = std::clamp(r_ends + bump * (r_clear - r_ends), 0.05 * leg_len,
                                   0.98 * leg_len);
    const double swing_z = hip_z - std::sqrt(leg_len * leg_len - r_sw * r_sw);
    const Vec3 swing_target(hip_swg_xy.x() + r_sw * std::cos(thf),
                            hip_swg_xy.y() + r_sw * std::sin(thf), swing_z);

    const auto leg_pose = [&](const Vec3& hip, const Vec3& target) {
      const Vec3 d = target - hip;
      const Vec3 dir = d / d.norm();
      const Mat3 g_hip = rotation_between(Vec3(0, 0, -1), dir);
      const Vec3 foot = hip + leg_len * dir;
      return std::make_pair(g_hip, foot);
    };

    const Vec3 support_target(support_plant.x(), support_plant.y(), 0.0);
    auto [g_hip_sup, foot_sup] = leg_pose(hip_sup, support_target);
    auto [g_hip_swg, foot_swg] = leg_pose(hip_swg, swing_target);

    pose.root_orient = rz;
    pose.root_pos = root_pos;
    const Mat3 rzT = rz.transpose();
    pose.joint_rot[static_cast<std::size_t>(hip_l - 1)] = rzT * (sup == 0 ? g_hip_sup : g_hip_swg);
    pose.joint_rot[static_cast<std::size_t>(hip_r - 1)] = rzT * (sup == 1 ? g_hip_sup : g_hip_swg);
    pose.joint_rot[static_cast<std::size_t>(foot_l - 1)] =
        Eigen::AngleAxisd(foot_osc[0].at(t), Vec3::UnitX()).toRotationMatrix();
    pose.joint_rot[static_cast<std::size_t>(foot_r - 1)] =
        Eigen::AngleAxisd(foot_osc[1].at(t), Vec3::UnitX()).toRotationMatrix();
    pose.joint_rot[0] = (Eigen::AngleAxisd(spine_z.at(t), Vec3::UnitZ()) *
                         Eigen::AngleAxisd(spine_x.at(t), Vec3::UnitX()))
                            .toRotationMatrix();  // spine
    pose.joint_rot[5] = Eigen::AngleAxisd(neck_z.at(t), Vec3::UnitZ()).toRotationMatrix();
    pose.joint_rot[6] = Eigen::AngleAxisd(head_x.at(t), Vec3::UnitX()).toRotationMatrix();

    raw.col(t) = pack_frame(skel, pose, beta);
    foot_tracks[0][static_cast<std::size_t>(t)] = sup == 0 ? foot_sup : foot_swg;
    foot_tracks[1][static_cast<std::size_t>(t)] = sup == 1 ? foot_sup : foot_swg;
  }

  auto cropped = crop_and_pad(raw, cfg.l_max);
  if (!cropped) return std::nullopt;

  GeneratedSequence out;
  out.sample = std::move(*cropped);
  // Canonicalize: the sequence starts at (0, 0, z).
  const int tra_off = 6 * skel.rotating_joint_count() + 6;
  const double x0 = out.sample.frames(tra_off, 0);
  const double y0 = out.sample.frames(tra_off + 1, 0);
  out.sample.frames.row(tra_off).leftCols(out.sample.valid_len).array() -= x0;
  out.sample.frames.row(tra_off + 1).leftCols(out.sample.valid_len).array() -= y0;
  out.truth = count_contacts(foot_tracks, out.sample.valid_len, cfg.contact_height_thresh,
                             cfg.skate_dist_thresh);
  return out;
}

struct SynthSplit {
  MotionBatchF data;
  std::vector<ContactCounts> truth;
};

struct SynthDataset {
  Skeleton skeleton;
  FeatureLayout layout;
  SynthSplit train, val, test;
};

// Deterministic given the seed: every sample draws from its own stream keyed
// by (seed, split, index). Dropped clips are re-rolled on a follow-up key.
inline SynthDataset generate_dataset(const SynthConfig& cfg, std::uint64_t seed) {
  require(cfg.train_count > 0 && cfg.val_count > 0 && cfg.test_count > 0,
          "generate_dataset: counts must be positive");
  require(cfg.raw_len_min >= 32 && cfg.raw_len_max >= cfg.raw_len_min,
          "generate_dataset: bad raw length range");

  SynthDataset out;
  out.skeleton = Skeleton::canonical_biped();
  out.layout = skeleton_layout(out.skeleton, cfg.l_max);

  const auto fill = [&](SynthSplit& split, std::uint64_t split_id, int count) {
    for (int i = 0; i < count; ++i) {
      for (std::uint64_t attempt = 0;; ++attempt) {
        Rng rng = Rng::stream(seed, {split_id, static_cast<std::uint64_t>(i), attempt});
        auto seq = generate_sequence(out.skeleton, cfg, rng);
        if (!seq) continue;
        split.data.samples.push_back(seq->sample.cast<float>());
        split.truth.push_back(seq->truth);
        break;
      }
    }
  };
  fill(out.train, 1, cfg.train_count);
  fill(out.val, 2, cfg.val_count);
  fill(out.test, 3, cfg.test_count);
  return out;
}

// Training-time augmentation: uniform rotation about the up axis applied to
// root orientation and translation, then mirroring with probability 1/2.
template <typename Scalar>
MotionSample<Scalar> augment(const MotionSample<Scalar>& x, const FeatureLayout& layout,
                             Rng& rng) {
  const double angle = rng.uniform(0.0, 2.0 * M_PI);
  const bool mirror = rng.bernoulli(0.5);
  MotionSample<Scalar> out = rotate_sample_z(x, layout, angle);
  if (mirror) out = mirror_sample(out, layout);
  return out;
}

}  // namespace gdk
