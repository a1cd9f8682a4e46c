#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "gdk/common.hpp"
#include "gdk/motion.hpp"

namespace gdk {

// How one feature group is standardized.
//   Rotation6D       : parameter-free scale by sqrt(3); keeps rotation frames
//                      orthogonal because every column is scaled uniformly.
//   IsotropicZScore  : scalar mean/std over all coordinates (no skew of 3D space).
//   ElementwiseZScore: per-element mean/std.
//   BaselineZScore   : per-element mean, one shared std per group (the mean of
//                      the per-element stds). Ablation baseline only.
enum class NormKind { Rotation6D, IsotropicZScore, ElementwiseZScore, BaselineZScore };

inline const char* to_string(NormKind k) {
  switch (k) {
    case NormKind::Rotation6D: return "rotation6d";
    case NormKind::IsotropicZScore: return "isotropic_zscore";
    case NormKind::ElementwiseZScore: return "elementwise_zscore";
    case NormKind::BaselineZScore: return "baseline_zscore";
  }
  return "?";
}

inline NormKind norm_kind_from_string(const std::string& s) {
  if (s == "rotation6d") return NormKind::Rotation6D;
  if (s == "isotropic_zscore") return NormKind::IsotropicZScore;
  if (s == "elementwise_zscore") return NormKind::ElementwiseZScore;
  if (s == "baseline_zscore") return NormKind::BaselineZScore;
  throw std::invalid_argument("unknown normalization kind: " + s);
}

// Index permutation plus sign flips applied to a group when a motion is
// mirrored. new[i] = sign[i] * old[perm[i]]. Empty perm means identity.
struct MirrorMap {
  std::vector<int> perm;
  std::vector<double> sign;

  bool empty() const { return perm.empty(); }
};

struct GroupSpec {
  std::string name;
  int dim = 0;
  NormKind kind = NormKind::ElementwiseZScore;
  MirrorMap mirror;
};

class FeatureLayout {
 public:
  FeatureLayout() = default;
  FeatureLayout(std::vector<GroupSpec> groups, int l_max)
      : groups_(std::move(groups)), l_max_(l_max) {
    offsets_.resize(groups_.size());
    int off = 0;
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      offsets_[g] = off;
      off += groups_[g].dim;
    }
    total_dim_ = off;
    validate();
  }

  const std::vector<GroupSpec>& groups() const { return groups_; }
  const GroupSpec& group(std::size_t g) const { return groups_[g]; }
  int group_count() const { return static_cast<int>(groups_.size()); }
  int group_offset(std::size_t g) const { return offsets_[g]; }
  int group_dim(std::size_t g) const { return groups_[g].dim; }
  int feature_dim() const { return total_dim_; }
  int l_max() const { return l_max_; }

  int find_group(const std::string& name) const {
    for (std::size_t g = 0; g < groups_.size(); ++g)
      if (groups_[g].name == name) return static_cast<int>(g);
    return -1;
  }

  void validate() const {
    require(!groups_.empty(), "layout: at least one group required");
    require(l_max_ > 0, "layout: l_max must be positive");
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      const auto& gs = groups_[g];
      require(gs.dim > 0, "layout: group dim must be positive: " + gs.name);
      require(gs.kind != NormKind::Rotation6D || gs.dim % 6 == 0,
              "layout: Rotation6D group dim must be divisible by 6: " + gs.name);
      if (!gs.mirror.empty()) {
        require(static_cast<int>(gs.mirror.perm.size()) == gs.dim &&
                    gs.mirror.sign.size() == gs.mirror.perm.size(),
                "layout: mirror map size mismatch: " + gs.name);
        std::vector<bool> seen(gs.mirror.perm.size(), false);
        for (std::size_t i = 0; i < gs.mirror.perm.size(); ++i) {
          int p = gs.mirror.perm[i];
          require(p >= 0 && p < gs.dim && !seen[static_cast<std::size_t>(p)],
                  "layout: mirror perm is not a permutation: " + gs.name);
          seen[static_cast<std::size_t>(p)] = true;
          require(gs.mirror.sign[i] == 1.0 || gs.mirror.sign[i] == -1.0,
                  "layout: mirror signs must be +-1: " + gs.name);
        }
      }
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["version"] = 1;
    j["l_max"] = l_max_;
    j["groups"] = nlohmann::json::array();
    for (const auto& g : groups_) {
      nlohmann::json jg;
      jg["name"] = g.name;
      jg["dim"] = g.dim;
      jg["kind"] = to_string(g.kind);
      if (!g.mirror.empty()) {
        jg["mirror"] = {{"perm", g.mirror.perm}, {"sign", g.mirror.sign}};
      }
      j["groups"].push_back(jg);
    }
    return j;
  }

  static FeatureLayout from_json(const nlohmann::json& j) {
    std::vector<GroupSpec> groups;
    for (const auto& jg : j.at("groups")) {
      GroupSpec g;
      g.name = jg.at("name").get<std::string>();
      g.dim = jg.at("dim").get<int>();
      g.kind = norm_kind_from_string(jg.at("kind").get<std::string>());
      if (jg.contains("mirror")) {
        g.mirror.perm = jg["mirror"].at("perm").get<std::vector<int>>();
        g.mirror.sign = jg["mirror"].at("sign").get<std::vector<double>>();
      }
      groups.push_back(std::move(g));
    }
    return FeatureLayout(std::move(groups), j.at("l_max").get<int>());
  }

  std::uint64_t hash() const { return fnv1a64(to_json().dump()); }

 private:
  std::vector<GroupSpec> groups_;
  std::vector<int> offsets_;
  int total_dim_ = 0;
  int l_max_ = 0;
};

// Which per-group normalization kinds fit_stats uses.
enum class NormScheme { Structured, Baseline };

inline const char* to_string(NormScheme s) {
  return s == NormScheme::Structured ? "structured" : "baseline";
}

inline NormScheme norm_scheme_from_string(const std::string& s) {
  if (s == "structured") return NormScheme::Structured;
  if (s == "baseline") return NormScheme::Baseline;
  throw std::invalid_argument("unknown normalization scheme: " + s);
}

struct GroupStats {
  NormKind kind = NormKind::ElementwiseZScore;
  VecD mean;   // scalar kinds store one entry
  VecD std;    // scalar kinds store one entry
  double fit_m = 1.0;  // measured expected magnitude on the fit set, normalized

  // Per-element denormalization scale (x = sigma * xhat + mu).
  double denorm_scale(int elem) const {
    switch (kind) {
      case NormKind::Rotation6D: return 1.0 / std::sqrt(3.0);
      case NormKind::IsotropicZScore: return std(0);
      case NormKind::ElementwiseZScore: return std(elem);
      case NormKind::BaselineZScore: return std(0);
    }
    return 1.0;
  }

  double denorm_shift(int elem) const {
    switch (kind) {
      case NormKind::Rotation6D: return 0.0;
      case NormKind::IsotropicZScore: return mean(0);
      case NormKind::ElementwiseZScore: return mean(elem);
      case NormKind::BaselineZScore: return mean(elem);
    }
    return 0.0;
  }
};

struct NormStats {
  std::vector<GroupStats> groups;
  double sigma_data = 1.0;  // expected magnitude of the normalized fit set

  nlohmann::json to_json(const FeatureLayout& layout) const {
    nlohmann::json jg;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      nlohmann::json e;
      e["kind"] = to_string(groups[g].kind);
      if (groups[g].kind == NormKind::Rotation6D) {
        e["scale"] = std::sqrt(3.0);
      } else {
        e["mean"] = std::vector<double>(groups[g].mean.data(),
                                        groups[g].mean.data() + groups[g].mean.size());
        e["std"] = std::vector<double>(groups[g].std.data(),
                                       groups[g].std.data() + groups[g].std.size());
      }
      e["fit_m"] = groups[g].fit_m;
      jg[layout.group(g).name] = e;
    }
    return nlohmann::json{{"version", 1}, {"sigma_data", sigma_data}, {"groups", jg}};
  }

  static NormStats from_json(const nlohmann::json& j, const FeatureLayout& layout) {
    NormStats stats;
    stats.sigma_data = j.at("sigma_data").get<double>();
    const auto& jg = j.at("groups");
    for (int g = 0; g < layout.group_count(); ++g) {
      const auto& e = jg.at(layout.group(g).name);
      GroupStats gs;
      gs.kind = norm_kind_from_string(e.at("kind").get<std::string>());
      if (gs.kind != NormKind::Rotation6D) {
        auto mean = e.at("mean").get<std::vector<double>>();
        auto std_ = e.at("std").get<std::vector<double>>();
        gs.mean = Eigen::Map<const VecD>(mean.data(), static_cast<Index>(mean.size()));
        gs.std = Eigen::Map<const VecD>(std_.data(), static_cast<Index>(std_.size()));
      }
      gs.fit_m = e.value("fit_m", 1.0);
      stats.groups.push_back(std::move(gs));
    }
    return stats;
  }
};

namespace detail {

template <typename Scalar>
void check_conforms(const FeatureLayout& layout, const MotionSample<Scalar>& x) {
  require(x.frames.rows() == layout.feature_dim(),
          "sample feature dimension does not match layout");
}

}  // namespace detail

template <typename Scalar>
MotionSample<Scalar> normalize(const MotionSample<Scalar>& x, const FeatureLayout& layout,
                               const NormStats& stats);

// Fits normalization statistics over the valid frames of a dataset.
// Population std (1/n) so that z-scored groups have expected magnitude
// exactly 1 on the fit set. Zero-variance elements are an error.
template <typename Scalar>
NormStats fit_stats(const MotionBatch<Scalar>& data, const FeatureLayout& layout,
                    NormScheme scheme = NormScheme::Structured) {
  require(!data.empty(), "fit_stats: empty dataset");
  const Index n_frames = data.total_valid_frames();
  require(n_frames > 0, "fit_stats: no valid frames");
  const int n = layout.feature_dim();

  VecD sum = VecD::Zero(n);
  VecD sumsq = VecD::Zero(n);
  for (const auto& s : data.samples) {
    detail::check_conforms(layout, s);
    const auto valid = s.frames.leftCols(s.valid_len).template cast<double>();
    sum += valid.rowwise().sum();
    sumsq += valid.array().square().matrix().rowwise().sum();
  }

  constexpr double kDegenerate = 1e-12;
  NormStats stats;
  for (int g = 0; g < layout.group_count(); ++g) {
    const int off = layout.group_offset(static_cast<std::size_t>(g));
    const int dim = layout.group_dim(static_cast<std::size_t>(g));
    GroupStats gs;
    gs.kind = scheme == NormScheme::Baseline ? NormKind::BaselineZScore
                                             : layout.group(static_cast<std::size_t>(g)).kind;
    const double cnt = static_cast<double>(n_frames);
    switch (gs.kind) {
      case NormKind::Rotation6D:
        break;
      case NormKind::IsotropicZScore: {
        const double mu = sum.segment(off, dim).sum() / (cnt * dim);
        const double var =
            sumsq.segment(off, dim).sum() / (cnt * dim) - mu * mu;
        check(var > kDegenerate, "fit_stats: degenerate std in group " +
                                     layout.group(static_cast<std::size_t>(g)).name);
        gs.mean = VecD::Constant(1, mu);
        gs.std = VecD::Constant(1, std::sqrt(var));
        break;
      }
      case NormKind::ElementwiseZScore:
      case NormKind::BaselineZScore: {
        VecD mu = sum.segment(off, dim) / cnt;
        VecD var = ((sumsq.segment(off, dim) / cnt).array() - mu.array().square()).cwiseMax(0.0);
        gs.mean = mu;
        if (gs.kind == NormKind::ElementwiseZScore) {
          for (int i = 0; i < dim; ++i)
            check(var(i) > kDegenerate,
                  "fit_stats: degenerate std in group " +
                      layout.group(static_cast<std::size_t>(g)).name);
          gs.std = var.array().sqrt();
        } else {
          // Shared scale per group: constant elements are fine as long as
          // the group as a whole has spread.
          const double s = var.array().sqrt().mean();
          check(s > kDegenerate, "fit_stats: degenerate std in group " +
                                     layout.group(static_cast<std::size_t>(g)).name);
          gs.std = VecD::Constant(1, s);
        }
        break;
      }
    }
    stats.groups.push_back(std::move(gs));
  }

  // Measure the per-group expected magnitude of the normalized fit set.
  VecD m2 = VecD::Zero(layout.group_count());
  for (const auto& s : data.samples) {
    MotionSample<Scalar> norm = normalize(s, layout, stats);
    for (int g = 0; g < layout.group_count(); ++g) {
      const auto block = norm.frames
                             .block(layout.group_offset(static_cast<std::size_t>(g)), 0,
                                    layout.group_dim(static_cast<std::size_t>(g)), s.valid_len)
                             .template cast<double>();
      m2(g) += block.array().square().sum();
    }
  }
  double total = 0.0;
  for (int g = 0; g < layout.group_count(); ++g) {
    total += m2(g);
    stats.groups[static_cast<std::size_t>(g)].fit_m = std::sqrt(
        m2(g) / (static_cast<double>(n_frames) * layout.group_dim(static_cast<std::size_t>(g))));
  }
  stats.sigma_data = std::sqrt(total / (static_cast<double>(n_frames) * n));
  return stats;
}

template <typename Scalar>
MotionSample<Scalar> normalize(const MotionSample<Scalar>& x, const FeatureLayout& layout,
                               const NormStats& stats) {
  detail::check_conforms(layout, x);
  require(static_cast<int>(stats.groups.size()) == layout.group_count(),
          "normalize: stats group count mismatch");
  MotionSample<Scalar> out = x;
  for (int g = 0; g < layout.group_count(); ++g) {
    const auto& gs = stats.groups[static_cast<std::size_t>(g)];
    const int off = layout.group_offset(static_cast<std::size_t>(g));
    const int dim = layout.group_dim(static_cast<std::size_t>(g));
    auto block = out.frames.block(off, 0, dim, x.valid_len);
    for (int i = 0; i < dim; ++i) {
      const auto scale = static_cast<Scalar>(1.0 / gs.denorm_scale(i));
      const auto shift = static_cast<Scalar>(gs.denorm_shift(i));
      block.row(i) = (block.row(i).array() - shift) * scale;
    }
  }
  return out;
}

template <typename Scalar>
MotionSample<Scalar> denormalize(const MotionSample<Scalar>& xhat, const FeatureLayout& layout,
                                 const NormStats& stats) {
  detail::check_conforms(layout, xhat);
  require(static_cast<int>(stats.groups.size()) == layout.group_count(),
          "denormalize: stats group count mismatch");
  MotionSample<Scalar> out = xhat;
  for (int g = 0; g < layout.group_count(); ++g) {
    const auto& gs = stats.groups[static_cast<std::size_t>(g)];
    const int off = layout.group_offset(static_cast<std::size_t>(g));
    const int dim = layout.group_dim(static_cast<std::size_t>(g));
    auto block = out.frames.block(off, 0, dim, xhat.valid_len);
    for (int i = 0; i < dim; ++i) {
      const auto scale = static_cast<Scalar>(gs.denorm_scale(i));
      const auto shift = static_cast<Scalar>(gs.denorm_shift(i));
      block.row(i) = block.row(i).array() * scale + shift;
    }
  }
  return out;
}

// Magnitude-preserving concatenation weights for G equally contributing
// groups: w_k = sqrt(sum_j N_j / G) / sqrt(N_k). Applying them to
// standardized groups keeps the concatenation standardized.
inline VecD group_weights(const FeatureLayout& layout) {
  const int G = layout.group_count();
  double total = 0.0;
  for (int g = 0; g < G; ++g) total += layout.group_dim(static_cast<std::size_t>(g));
  VecD w(G);
  for (int g = 0; g < G; ++g)
    w(g) = std::sqrt(total / G) / std::sqrt(static_cast<double>(
               layout.group_dim(static_cast<std::size_t>(g))));
  return w;
}

// Per-element expansion of per-group scalars (weights, scales).
template <typename Scalar>
Vec<Scalar> expand_per_group(const FeatureLayout& layout, const VecD& per_group) {
  require(per_group.size() == layout.group_count(),
          "per-group vector size does not match group count");
  Vec<Scalar> out(layout.feature_dim());
  for (int g = 0; g < layout.group_count(); ++g)
    out.segment(layout.group_offset(static_cast<std::size_t>(g)),
                layout.group_dim(static_cast<std::size_t>(g)))
        .setConstant(static_cast<Scalar>(per_group(g)));
  return out;
}

template <typename Scalar>
MotionSample<Scalar> apply_group_weights(const MotionSample<Scalar>& xhat,
                                         const FeatureLayout& layout, const VecD& w) {
  detail::check_conforms(layout, xhat);
  MotionSample<Scalar> out = xhat;
  const Vec<Scalar> scale = expand_per_group<Scalar>(layout, w);
  out.frames.array().colwise() *= scale.array();
  return out;
}

template <typename Scalar>
MotionSample<Scalar> remove_group_weights(const MotionSample<Scalar>& xw,
                                          const FeatureLayout& layout, const VecD& w) {
  return apply_group_weights(xw, layout, VecD(w.cwiseInverse()));
}

// Log |det| of the denormalization map over valid-frame elements:
// sum_i log sigma_i. NLL in unnormalized space = normalized-space NLL plus
// this value.
inline double log_abs_det_normalization(const NormStats& stats, const FeatureLayout& layout,
                                        Index valid_frames) {
  double per_frame = 0.0;
  for (int g = 0; g < layout.group_count(); ++g) {
    const auto& gs = stats.groups[static_cast<std::size_t>(g)];
    for (int i = 0; i < layout.group_dim(static_cast<std::size_t>(g)); ++i)
      per_frame += std::log(gs.denorm_scale(i));
  }
  return per_frame * static_cast<double>(valid_frames);
}

}  // namespace gdk
