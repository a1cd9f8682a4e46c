#pragma once

#include <Eigen/Dense>
#include <Eigen/Geometry>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "gdk/common.hpp"
#include "gdk/layout.hpp"
#include "gdk/motion.hpp"

namespace gdk {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;

// 6D rotation encoding: the first two columns of the matrix, stacked.
// Decoding runs Gram-Schmidt, so any full-rank 6D vector maps to a valid
// rotation; near-degenerate inputs are an error instead of a garbage frame.
inline Vec6 matrix_to_rot6d(const Mat3& r) {
  Vec6 v;
  v.head<3>() = r.col(0);
  v.tail<3>() = r.col(1);
  return v;
}

inline Mat3 rot6d_to_matrix(const Vec6& v) {
  constexpr double kTol = 1e-8;
  Vec3 a = v.head<3>();
  const double na = a.norm();
  check(na > kTol, "rot6d: first column has near-zero norm");
  a /= na;
  Vec3 b = v.tail<3>();
  b -= a.dot(b) * a;
  const double nb = b.norm();
  check(nb > kTol, "rot6d: columns are near-collinear");
  b /= nb;
  Mat3 r;
  r.col(0) = a;
  r.col(1) = b;
  r.col(2) = a.cross(b);
  return r;
}

// Minimal rotation taking unit vector u to unit vector v (Rodrigues form
// R = I + K + K^2/(1+c) with K = skew(u x v), c = u.v). Antiparallel inputs
// (c near -1) are an error: the axis is ill-defined there.
inline Mat3 rotation_between(const Vec3& u, const Vec3& v) {
  const double c = u.dot(v);
  check(c > -1.0 + 1e-9, "rotation_between: vectors are antiparallel");
  const Vec3 a = u.cross(v);
  Mat3 k;
  k << 0, -a.z(), a.y(), a.z(), 0, -a.x(), -a.y(), a.x(), 0;
  return Mat3::Identity() + k + k * k / (1.0 + c);
}

struct Joint {
  std::string name;
  int parent = -1;            // -1 for the root
  Vec3 offset = Vec3::Zero(); // rest offset from the parent, in its frame
};

// Articulated skeleton. Joint 0 is the root (free translation + orientation);
// joints 1..K-1 carry local rotations. Parents precede children.
class Skeleton {
 public:
  Skeleton() = default;
  Skeleton(std::vector<Joint> joints, std::vector<int> feet,
           std::vector<std::pair<int, int>> mirror_pairs, int shape_dim)
      : joints_(std::move(joints)),
        feet_(std::move(feet)),
        mirror_pairs_(std::move(mirror_pairs)),
        shape_dim_(shape_dim) {
    validate();
  }

  const std::vector<Joint>& joints() const { return joints_; }
  int joint_count() const { return static_cast<int>(joints_.size()); }
  int rotating_joint_count() const { return joint_count() - 1; }
  const std::vector<int>& feet() const { return feet_; }
  const std::vector<std::pair<int, int>>& mirror_pairs() const { return mirror_pairs_; }
  int shape_dim() const { return shape_dim_; }

  // Frame feature dimension: 6 per rotating joint, 6 root orientation,
  // 3 root translation, shape_dim coefficients.
  int feature_dim() const { return 6 * rotating_joint_count() + 6 + 3 + shape_dim_; }

  void validate() const {
    require(joints_.size() >= 2, "skeleton: need a root and at least one joint");
    require(joints_[0].parent == -1, "skeleton: joint 0 must be the root");
    for (std::size_t j = 1; j < joints_.size(); ++j)
      require(joints_[j].parent >= 0 && joints_[j].parent < static_cast<int>(j),
              "skeleton: parents must precede children");
    for (int f : feet_)
      require(f > 0 && f < joint_count(), "skeleton: foot index out of range");
    std::vector<int> partner(joints_.size(), -1);
    for (auto [a, b] : mirror_pairs_) {
      require(a > 0 && b > 0 && a < joint_count() && b < joint_count() && a != b,
              "skeleton: bad mirror pair");
      require(partner[static_cast<std::size_t>(a)] == -1 &&
                  partner[static_cast<std::size_t>(b)] == -1,
              "skeleton: joint in two mirror pairs");
      partner[static_cast<std::size_t>(a)] = b;
      partner[static_cast<std::size_t>(b)] = a;
    }
    require(shape_dim_ > 0, "skeleton: shape_dim must be positive");
  }

  // Mirror partner of a joint, or the joint itself if it sits on the plane.
  int mirror_of(int j) const {
    for (auto [a, b] : mirror_pairs_) {
      if (a == j) return b;
      if (b == j) return a;
    }
    return j;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["version"] = 1;
    j["joints"] = nlohmann::json::array();
    for (const auto& joint : joints_) {
      j["joints"].push_back({{"name", joint.name},
                             {"parent", joint.parent},
                             {"offset", {joint.offset.x(), joint.offset.y(), joint.offset.z()}}});
    }
    j["feet"] = feet_;
    auto pairs = nlohmann::json::array();
    for (auto [a, b] : mirror_pairs_) pairs.push_back({a, b});
    j["mirror_pairs"] = pairs;
    j["shape_dim"] = shape_dim_;
    return j;
  }

  static Skeleton from_json(const nlohmann::json& j) {
    std::vector<Joint> joints;
    for (const auto& jj : j.at("joints")) {
      Joint joint;
      joint.name = jj.at("name").get<std::string>();
      joint.parent = jj.at("parent").get<int>();
      auto off = jj.at("offset").get<std::vector<double>>();
      joint.offset = Vec3(off.at(0), off.at(1), off.at(2));
      joints.push_back(std::move(joint));
    }
    std::vector<std::pair<int, int>> pairs;
    for (const auto& p : j.at("mirror_pairs"))
      pairs.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
    return Skeleton(std::move(joints), j.at("feet").get<std::vector<int>>(), std::move(pairs),
                    j.at("shape_dim").get<int>());
  }

  // Eight-joint biped used by the synthetic dataset. The mirror plane is
  // x = 0 and the up axis is +z. Legs are the only paired chains; spine,
  // neck and head sit on the plane.
  static Skeleton canonical_biped() {
    std::vector<Joint> joints = {
        {"root", -1, Vec3(0, 0, 0)},
        {"spine", 0, Vec3(0, 0, 0.25)},
        {"hip_l", 0, Vec3(0.10, 0, -0.05)},
        {"foot_l", 2, Vec3(0, 0, -0.80)},
        {"hip_r", 0, Vec3(-0.10, 0, -0.05)},
        {"foot_r", 4, Vec3(0, 0, -0.80)},
        {"neck", 1, Vec3(0, 0, 0.30)},
        {"head", 6, Vec3(0, 0, 0.15)},
    };
    return Skeleton(std::move(joints), {3, 5}, {{2, 4}, {3, 5}}, 4);
  }

 private:
  std::vector<Joint> joints_;
  std::vector<int> feet_;
  std::vector<std::pair<int, int>> mirror_pairs_;
  int shape_dim_ = 0;
};

// Per-joint bone scale from shape coefficients: a global term plus
// mirror-symmetric per-chain terms. Coefficients are clamped so scales stay
// strictly positive.
inline VecD shape_scales(const Skeleton& skel, const VecD& beta) {
  require(beta.size() == skel.shape_dim(), "shape_scales: beta size mismatch");
  VecD b = beta.cwiseMax(-2.0).cwiseMin(2.0);
  VecD s = VecD::Ones(skel.joint_count());
  for (int j = 1; j < skel.joint_count(); ++j) {
    const std::string& name = skel.joints()[static_cast<std::size_t>(j)].name;
    double v = 1.0 + 0.1 * b(0);
    if (b.size() > 1 && (name == "hip_l" || name == "hip_r" || name == "foot_l" ||
                         name == "foot_r"))
      v += 0.1 * b(1);
    if (b.size() > 2 && (name == "neck" || name == "head")) v += 0.1 * b(2);
    if (b.size() > 3 && name == "spine") v += 0.1 * b(3);
    s(j) = v;
  }
  return s;
}

struct Pose {
  Mat3 root_orient = Mat3::Identity();
  Vec3 root_pos = Vec3::Zero();
  std::vector<Mat3> joint_rot;  // one per rotating joint, index j-1
};

// Global joint positions. p_0 = root_pos, G_0 = root_orient,
// G_j = G_parent R_j, p_j = p_parent + G_parent (scale_j * offset_j).
inline std::vector<Vec3> forward_kinematics(const Skeleton& skel, const Pose& pose,
                                            const VecD& scales) {
  require(static_cast<int>(pose.joint_rot.size()) == skel.rotating_joint_count(),
          "fk: pose joint count mismatch");
  require(scales.size() == skel.joint_count(), "fk: scales size mismatch");
  std::vector<Vec3> pos(static_cast<std::size_t>(skel.joint_count()));
  std::vector<Mat3> glob(static_cast<std::size_t>(skel.joint_count()));
  pos[0] = pose.root_pos;
  glob[0] = pose.root_orient;
  for (int j = 1; j < skel.joint_count(); ++j) {
    const Joint& joint = skel.joints()[static_cast<std::size_t>(j)];
    const auto p = static_cast<std::size_t>(joint.parent);
    pos[static_cast<std::size_t>(j)] = pos[p] + glob[p] * (scales(j) * joint.offset);
    glob[static_cast<std::size_t>(j)] =
        glob[p] * pose.joint_rot[static_cast<std::size_t>(j - 1)];
  }
  return pos;
}

// Feature packing for one frame: [joint 6D rotations | root 6D | root
// translation | shape]. The shape block repeats the sequence's coefficients
// on every frame.
inline VecD pack_frame(const Skeleton& skel, const Pose& pose, const VecD& beta) {
  require(beta.size() == skel.shape_dim(), "pack_frame: beta size mismatch");
  VecD f(skel.feature_dim());
  int off = 0;
  for (int j = 1; j < skel.joint_count(); ++j, off += 6)
    f.segment<6>(off) = matrix_to_rot6d(pose.joint_rot[static_cast<std::size_t>(j - 1)]);
  f.segment<6>(off) = matrix_to_rot6d(pose.root_orient);
  off += 6;
  f.segment<3>(off) = pose.root_pos;
  off += 3;
  f.segment(off, beta.size()) = beta;
  return f;
}

inline void unpack_frame(const Skeleton& skel, const VecD& f, Pose& pose, VecD& beta) {
  require(f.size() == skel.feature_dim(), "unpack_frame: feature size mismatch");
  pose.joint_rot.resize(static_cast<std::size_t>(skel.rotating_joint_count()));
  int off = 0;
  for (int j = 1; j < skel.joint_count(); ++j, off += 6)
    pose.joint_rot[static_cast<std::size_t>(j - 1)] = rot6d_to_matrix(f.segment<6>(off));
  pose.root_orient = rot6d_to_matrix(f.segment<6>(off));
  off += 6;
  pose.root_pos = f.segment<3>(off);
  off += 3;
  beta = f.segment(off, skel.shape_dim());
}

namespace detail {

// 6D image of R -> M R M with M = diag(-1,1,1): per-element signs on the
// stacked first two columns.
inline const double kMirrorSign6[6] = {1, -1, -1, -1, 1, 1};

}  // namespace detail

// Feature layout induced by a skeleton: joint rotations (one Rotation6D
// group), root orientation, root translation, shape. Mirror maps encode
// reflection across x = 0 (paired joints swap, rotations conjugate by
// diag(-1,1,1), translation flips x).
inline FeatureLayout skeleton_layout(const Skeleton& skel, int l_max) {
  const int nj = skel.rotating_joint_count();

  GroupSpec rot{"joint_rotations", 6 * nj, NormKind::Rotation6D, {}};
  rot.mirror.perm.resize(static_cast<std::size_t>(6 * nj));
  rot.mirror.sign.resize(static_cast<std::size_t>(6 * nj));
  for (int j = 1; j < skel.joint_count(); ++j) {
    const int src = skel.mirror_of(j);
    for (int e = 0; e < 6; ++e) {
      rot.mirror.perm[static_cast<std::size_t>(6 * (j - 1) + e)] = 6 * (src - 1) + e;
      rot.mirror.sign[static_cast<std::size_t>(6 * (j - 1) + e)] = detail::kMirrorSign6[e];
    }
  }

  GroupSpec ori{"root_orientation", 6, NormKind::Rotation6D, {}};
  ori.mirror.perm = {0, 1, 2, 3, 4, 5};
  ori.mirror.sign.assign(detail::kMirrorSign6, detail::kMirrorSign6 + 6);

  GroupSpec tra{"root_translation", 3, NormKind::IsotropicZScore, {{0, 1, 2}, {-1, 1, 1}}};
  GroupSpec sha{"shape", skel.shape_dim(), NormKind::ElementwiseZScore, {}};

  return FeatureLayout({rot, ori, tra, sha}, l_max);
}

// Mirrors an unnormalized sample across x = 0 using the layout's per-group
// maps. Groups without a map (shape) pass through unchanged.
template <typename Scalar>
MotionSample<Scalar> mirror_sample(const MotionSample<Scalar>& x, const FeatureLayout& layout) {
  require(x.frames.rows() == layout.feature_dim(), "mirror_sample: dimension mismatch");
  MotionSample<Scalar> out = x;
  for (int g = 0; g < layout.group_count(); ++g) {
    const auto& m = layout.group(static_cast<std::size_t>(g)).mirror;
    if (m.empty()) continue;
    const int off = layout.group_offset(static_cast<std::size_t>(g));
    const int dim = layout.group_dim(static_cast<std::size_t>(g));
    for (int i = 0; i < dim; ++i)
      out.frames.row(off + i) =
          static_cast<Scalar>(m.sign[static_cast<std::size_t>(i)]) *
          x.frames.row(off + m.perm[static_cast<std::size_t>(i)]);
  }
  return out;
}

// Rotates an unnormalized sample about the up axis (+z): the root
// orientation becomes Rz * orientation and the translation Rz * t. Local
// joint rotations and shape are unchanged.
template <typename Scalar>
MotionSample<Scalar> rotate_sample_z(const MotionSample<Scalar>& x, const FeatureLayout& layout,
                                     double angle) {
  require(x.frames.rows() == layout.feature_dim(), "rotate_sample_z: dimension mismatch");
  const int gor = layout.find_group("root_orientation");
  const int gtr = layout.find_group("root_translation");
  require(gor >= 0 && gtr >= 0, "rotate_sample_z: layout lacks root groups");
  const Mat3 rz = Eigen::AngleAxisd(angle, Vec3::UnitZ()).toRotationMatrix();

  MotionSample<Scalar> out = x;
  const int oor = layout.group_offset(static_cast<std::size_t>(gor));
  const int otr = layout.group_offset(static_cast<std::size_t>(gtr));
  for (Index c = 0; c < x.valid_len; ++c) {
    const Vec6 v = x.frames.template block<6, 1>(oor, c).template cast<double>();
    Vec6 rv;
    rv.template head<3>() = rz * v.template head<3>();
    rv.template tail<3>() = rz * v.template tail<3>();
    out.frames.template block<6, 1>(oor, c) = rv.template cast<Scalar>();
    const Vec3 t = x.frames.template block<3, 1>(otr, c).template cast<double>();
    out.frames.template block<3, 1>(otr, c) = (rz * t).template cast<Scalar>();
  }
  return out;
}

}  // namespace gdk
