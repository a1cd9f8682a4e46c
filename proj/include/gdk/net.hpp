#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gdk/common.hpp"
#include "gdk/rng.hpp"

// Compact 1D U-Net denoiser with exact reverse-mode gradients, plus the
// per-group uncertainty heads. Parameters live in one flat vector with a
// named-view registry so optimizers, finite-difference checks, and
// checkpoints all see the same storage.
//
// Variable length is handled by masking: every kernel-3 convolution input is
// masked, attention never attends to padded keys, and the final output is
// masked, so padded input columns influence nothing and padded outputs (and
// their input gradients) are exactly zero.

namespace gdk {

struct NetConfig {
  int channels = 64;
  int blocks = 2;  // residual blocks per level
  bool attention = false;
  int fourier_dim = 64;
  double fourier_scale = 1.0;
};

inline void to_json(nlohmann::json& j, const NetConfig& c) {
  j = nlohmann::json{{"channels", c.channels},
                     {"blocks", c.blocks},
                     {"attention", c.attention},
                     {"fourier_dim", c.fourier_dim},
                     {"fourier_scale", c.fourier_scale}};
}

inline void from_json(const nlohmann::json& j, NetConfig& c) {
  c.channels = j.value("channels", 64);
  c.blocks = j.value("blocks", 2);
  c.attention = j.value("attention", false);
  c.fourier_dim = j.value("fourier_dim", 64);
  c.fourier_scale = j.value("fourier_scale", 1.0);
}

struct ParamInfo {
  std::string name;
  Index offset = 0;
  Index rows = 0;
  Index cols = 0;
  Index size() const { return rows * cols; }
};

namespace detail {

template <typename Scalar>
Scalar silu(Scalar z) {
  const Scalar s = Scalar(1) / (Scalar(1) + std::exp(-z));
  return z * s;
}

template <typename Scalar>
Scalar dsilu(Scalar z) {
  const Scalar s = Scalar(1) / (Scalar(1) + std::exp(-z));
  return s * (Scalar(1) + z * (Scalar(1) - s));
}

template <typename Scalar>
Mat<Scalar> silu_mat(const Mat<Scalar>& z) {
  return z.unaryExpr([](Scalar v) { return silu(v); });
}

template <typename Scalar>
Mat<Scalar> dsilu_mat(const Mat<Scalar>& z) {
  return z.unaryExpr([](Scalar v) { return dsilu(v); });
}

template <typename M>
void zero_padded(M&& m, Index valid) {
  if (valid < m.cols()) m.rightCols(m.cols() - valid).setZero();
}

}  // namespace detail

// sqrt(2) * cos(2*pi*(f*c + phi)) with fixed (untrained) f ~ N(0, scale^2)
// and phi ~ U(0, 1). Buffers are kept in double so casts are lossless.
struct FourierBank {
  VecD freqs;
  VecD phases;

  void init(Rng& rng, int dim, double scale) {
    freqs = rng.normal_vector<double>(dim, scale);
    phases.resize(dim);
    for (Index i = 0; i < phases.size(); ++i) phases(i) = rng.uniform();
  }

  template <typename Scalar>
  Vec<Scalar> embed(double c) const {
    const VecD e =
        std::sqrt(2.0) * ((2.0 * M_PI) * (freqs.array() * c + phases.array())).cos();
    return e.cast<Scalar>();
  }
};

template <typename Scalar>
class DenoiserNet {
 public:
  DenoiserNet(const NetConfig& cfg, int feature_dim, int l_max)
      : cfg_(cfg), n_(feature_dim), l_(l_max) {
    require(cfg_.channels > 0 && cfg_.blocks > 0 && cfg_.fourier_dim > 0,
            "net: config dimensions must be positive");
    require(n_ > 0 && l_ > 0 && l_ % 2 == 0, "net: feature dim and even length required");
    const Index c = cfg_.channels, f = cfg_.fourier_dim;
    add_param("in_proj.w", c, n_);
    add_param("in_proj.b", c, 1);
    for (const char* lvl : {"enc0", "enc1", "dec0"})
      for (int b = 0; b < cfg_.blocks; ++b) {
        const std::string p = std::string(lvl) + "." + std::to_string(b);
        add_param(p + ".conv1.wl", c, c);
        add_param(p + ".conv1.wc", c, c);
        add_param(p + ".conv1.wr", c, c);
        add_param(p + ".conv1.b", c, 1);
        add_param(p + ".time.w", c, f);
        add_param(p + ".time.b", c, 1);
        add_param(p + ".conv2.wl", c, c);
        add_param(p + ".conv2.wc", c, c);
        add_param(p + ".conv2.wr", c, c);
        add_param(p + ".conv2.b", c, 1);
      }
    if (cfg_.attention)
      for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) add_param(w, c, c);
    add_param("out_proj.w", n_, c);
    add_param("out_proj.b", n_, 1);
    add_param("gain", 1, 1);
    params_ = Vec<Scalar>::Zero(total_);
    grads_ = Vec<Scalar>::Zero(total_);
  }

  const NetConfig& config() const { return cfg_; }
  int feature_dim() const { return n_; }
  int l_max() const { return l_; }
  Index param_count() const { return total_; }
  const std::vector<ParamInfo>& param_infos() const { return infos_; }
  Vec<Scalar>& params() { return params_; }
  const Vec<Scalar>& params() const { return params_; }
  Vec<Scalar>& grads() { return grads_; }
  const Vec<Scalar>& grads() const { return grads_; }
  void zero_grad() { grads_.setZero(); }
  FourierBank& fourier() { return fourier_; }
  const FourierBank& fourier() const { return fourier_; }

  std::size_t param_index(const std::string& name) const {
    const auto it = index_.find(name);
    require(it != index_.end(), "net: unknown parameter " + name);
    return it->second;
  }

  // Weights ~ N(0, 1/fan_in), biases 0, gain 1; Fourier buffers drawn first.
  void init_weights(Rng& rng) {
    fourier_.init(rng, cfg_.fourier_dim, cfg_.fourier_scale);
    for (const ParamInfo& o : infos_) {
      auto v = view_of(params_, o);
      if (o.name == "gain") {
        v.setConstant(Scalar(1));
      } else if (o.name.size() >= 2 && o.name.compare(o.name.size() - 2, 2, ".b") == 0) {
        v.setZero();
      } else {
        v = rng.normal_matrix<Scalar>(o.rows, o.cols, 1.0 / std::sqrt(fan_in(o)));
      }
    }
  }

  // x: N x L with zero padding; returns N x L with padded columns zero.
  // Weights carry no length dependence, so L may be any even length up to
  // l_max: a sequence trimmed to its valid length evaluates identically.
  Mat<Scalar> forward(const Mat<Scalar>& x, Index valid, double c_noise) {
    require(x.rows() == n_ && x.cols() > 0 && x.cols() <= l_ && x.cols() % 2 == 0,
            "net forward: input shape mismatch");
    require(valid > 0 && valid <= x.cols() && valid % 2 == 0,
            "net forward: valid length must be even and in range");
    require(fourier_.freqs.size() == cfg_.fourier_dim,
            "net forward: fourier bank not initialized");
    tape_.v0 = valid;
    tape_.v1 = valid / 2;
    tape_.x_in = x;
    tape_.emb = fourier_.template embed<Scalar>(c_noise);

    Mat<Scalar> h = cview("in_proj.w") * x;
    h.colwise() += cvec("in_proj.b");
    tape_.blocks.assign(static_cast<std::size_t>(3 * cfg_.blocks), BlockTape{});

    std::size_t bi = 0;
    for (int b = 0; b < cfg_.blocks; ++b) h = block_forward(bi++, h, tape_.v0);
    tape_.skip = h;

    Mat<Scalar> d(h.rows(), h.cols() / 2);  // pairwise mean; valid pairs are homogeneous
    for (Index j = 0; j < d.cols(); ++j)
      d.col(j) = Scalar(0.5) * (h.col(2 * j) + h.col(2 * j + 1));
    h = std::move(d);
    for (int b = 0; b < cfg_.blocks; ++b) h = block_forward(bi++, h, tape_.v1);
    if (cfg_.attention) h = attention_forward(h, tape_.v1);

    Mat<Scalar> u(h.rows(), 2 * h.cols());
    for (Index j = 0; j < h.cols(); ++j) {
      u.col(2 * j) = h.col(j);
      u.col(2 * j + 1) = h.col(j);
    }
    h = u + tape_.skip;
    for (int b = 0; b < cfg_.blocks; ++b) h = block_forward(bi++, h, tape_.v0);

    tape_.dec_out = h;
    tape_.pre_out = cview("out_proj.w") * h;
    tape_.pre_out.colwise() += cvec("out_proj.b");
    Mat<Scalar> y = cview("gain")(0, 0) * tape_.pre_out;
    detail::zero_padded(y, valid);
    tape_.ok = true;
    return y;
  }

  // Accumulates parameter gradients into grads(); returns the input gradient.
  // Padded columns of the input gradient are exactly zero. Consumes the tape.
  Mat<Scalar> backward(const Mat<Scalar>& upstream) {
    Mat<Scalar> dx = backward_impl<true>(upstream);
    tape_.ok = false;
    return dx;
  }

  // Input gradient only, off the most recent forward. Touches no parameter
  // gradients and keeps the tape, so repeated products against one recorded
  // forward are cheap (the divergence probes rely on this).
  Mat<Scalar> input_vjp(const Mat<Scalar>& upstream) { return backward_impl<false>(upstream); }

  template <typename T>
  DenoiserNet<T> cast() const {
    DenoiserNet<T> out(cfg_, n_, l_);
    out.params() = params_.template cast<T>();
    out.fourier() = fourier_;
    return out;
  }

 private:
  struct BlockTape {
    Mat<Scalar> x, am, h2, bm;
    Index valid = 0;
  };
  struct Tape {
    bool ok = false;
    Index v0 = 0, v1 = 0;
    Mat<Scalar> x_in, skip, dec_out, pre_out;
    Vec<Scalar> emb;
    std::vector<BlockTape> blocks;
    // attention
    Mat<Scalar> attn_in, q, k, v, a;
  };

  void add_param(const std::string& name, Index rows, Index cols) {
    index_[name] = infos_.size();
    infos_.push_back(ParamInfo{name, total_, rows, cols});
    total_ += rows * cols;
  }

  double fan_in(const ParamInfo& o) const {
    if (o.name.find("conv") != std::string::npos) return 3.0 * o.cols;
    return static_cast<double>(o.cols);
  }

  static Eigen::Map<Mat<Scalar>> view_of(Vec<Scalar>& s, const ParamInfo& o) {
    return Eigen::Map<Mat<Scalar>>(s.data() + o.offset, o.rows, o.cols);
  }
  Eigen::Map<const Mat<Scalar>> cview(const std::string& name) const {
    const ParamInfo& o = infos_[index_.at(name)];
    return Eigen::Map<const Mat<Scalar>>(params_.data() + o.offset, o.rows, o.cols);
  }
  Eigen::Map<const Vec<Scalar>> cvec(const std::string& name) const {
    const ParamInfo& o = infos_[index_.at(name)];
    return Eigen::Map<const Vec<Scalar>>(params_.data() + o.offset, o.size());
  }
  Eigen::Map<Mat<Scalar>> gview(const std::string& name) {
    const ParamInfo& o = infos_[index_.at(name)];
    return Eigen::Map<Mat<Scalar>>(grads_.data() + o.offset, o.rows, o.cols);
  }
  Eigen::Map<Vec<Scalar>> gvec(const std::string& name) {
    const ParamInfo& o = infos_[index_.at(name)];
    return Eigen::Map<Vec<Scalar>>(grads_.data() + o.offset, o.size());
  }

  std::string block_prefix(std::size_t bi) const {
    static const char* lvls[3] = {"enc0", "enc1", "dec0"};
    const std::size_t lvl = bi / static_cast<std::size_t>(cfg_.blocks);
    const std::size_t b = bi % static_cast<std::size_t>(cfg_.blocks);
    return std::string(lvls[lvl]) + "." + std::to_string(b);
  }

  // y = wl * shift_right(x) + wc * x + wr * shift_left(x) + b, zero borders.
  template <typename WL, typename WC, typename WR, typename B>
  static Mat<Scalar> conv3(const WL& wl, const WC& wc, const WR& wr, const B& b,
                           const Mat<Scalar>& x) {
    const Index l = x.cols();
    Mat<Scalar> y = wc * x;
    y.rightCols(l - 1).noalias() += wl * x.leftCols(l - 1);
    y.leftCols(l - 1).noalias() += wr * x.rightCols(l - 1);
    y.colwise() += b;
    return y;
  }

  Mat<Scalar> block_forward(std::size_t bi, const Mat<Scalar>& x, Index valid) {
    const std::string p = block_prefix(bi);
    BlockTape& t = tape_.blocks[bi];
    t.x = x;
    t.valid = valid;
    t.am = detail::silu_mat(x);
    detail::zero_padded(t.am, valid);
    Mat<Scalar> h1 =
        conv3(cview(p + ".conv1.wl"), cview(p + ".conv1.wc"), cview(p + ".conv1.wr"),
              cvec(p + ".conv1.b"), t.am);
    const Vec<Scalar> tb = cview(p + ".time.w") * tape_.emb + cvec(p + ".time.b");
    t.h2 = h1;
    t.h2.colwise() += tb;
    t.bm = detail::silu_mat(t.h2);
    detail::zero_padded(t.bm, valid);
    Mat<Scalar> h3 =
        conv3(cview(p + ".conv2.wl"), cview(p + ".conv2.wc"), cview(p + ".conv2.wr"),
              cvec(p + ".conv2.b"), t.bm);
    return x + h3;
  }

  template <bool WithParamGrads>
  Mat<Scalar> backward_impl(const Mat<Scalar>& upstream) {
    check(tape_.ok, "net backward: no recorded forward");
    require(upstream.rows() == n_ && upstream.cols() == tape_.x_in.cols(),
            "net backward: upstream shape mismatch");
    Mat<Scalar> dy = upstream;
    detail::zero_padded(dy, tape_.v0);

    if constexpr (WithParamGrads)
      gview("gain")(0, 0) += dy.cwiseProduct(tape_.pre_out).sum();
    Mat<Scalar> dpre = cview("gain")(0, 0) * dy;
    if constexpr (WithParamGrads) {
      gview("out_proj.w").noalias() += dpre * tape_.dec_out.transpose();
      gvec("out_proj.b") += dpre.rowwise().sum();
    }
    Mat<Scalar> dh = cview("out_proj.w").transpose() * dpre;

    std::size_t bi = tape_.blocks.size();
    for (int b = 0; b < cfg_.blocks; ++b) dh = block_backward<WithParamGrads>(--bi, dh);

    Mat<Scalar> dskip = dh;  // skip add fans out
    Mat<Scalar> dupsample(dh.rows(), dh.cols() / 2);  // nearest-up backward: sum the pair
    for (Index j = 0; j < dupsample.cols(); ++j)
      dupsample.col(j) = dh.col(2 * j) + dh.col(2 * j + 1);
    dh = std::move(dupsample);

    if (cfg_.attention) dh = attention_backward<WithParamGrads>(dh);
    for (int b = 0; b < cfg_.blocks; ++b) dh = block_backward<WithParamGrads>(--bi, dh);

    Mat<Scalar> dpool(dh.rows(), 2 * dh.cols());  // pair-mean backward: split evenly
    for (Index j = 0; j < dh.cols(); ++j) {
      dpool.col(2 * j) = Scalar(0.5) * dh.col(j);
      dpool.col(2 * j + 1) = Scalar(0.5) * dh.col(j);
    }
    dh = dpool + dskip;
    for (int b = 0; b < cfg_.blocks; ++b) dh = block_backward<WithParamGrads>(--bi, dh);

    if constexpr (WithParamGrads) {
      gview("in_proj.w").noalias() += dh * tape_.x_in.transpose();
      gvec("in_proj.b") += dh.rowwise().sum();
    }
    Mat<Scalar> dx = cview("in_proj.w").transpose() * dh;
    detail::zero_padded(dx, tape_.v0);
    return dx;
  }

  template <bool WithParamGrads>
  Mat<Scalar> block_backward(std::size_t bi, const Mat<Scalar>& dy) {
    const std::string p = block_prefix(bi);
    const BlockTape& t = tape_.blocks[bi];
    const Index l = dy.cols();

    // conv2
    if constexpr (WithParamGrads) {
      gview(p + ".conv2.wc").noalias() += dy * t.bm.transpose();
      gview(p + ".conv2.wl").noalias() +=
          dy.rightCols(l - 1) * t.bm.leftCols(l - 1).transpose();
      gview(p + ".conv2.wr").noalias() +=
          dy.leftCols(l - 1) * t.bm.rightCols(l - 1).transpose();
      gvec(p + ".conv2.b") += dy.rowwise().sum();
    }
    Mat<Scalar> dbm = cview(p + ".conv2.wc").transpose() * dy;
    dbm.leftCols(l - 1).noalias() += cview(p + ".conv2.wl").transpose() * dy.rightCols(l - 1);
    dbm.rightCols(l - 1).noalias() += cview(p + ".conv2.wr").transpose() * dy.leftCols(l - 1);

    detail::zero_padded(dbm, t.valid);
    Mat<Scalar> dh2 = dbm.cwiseProduct(detail::dsilu_mat(t.h2));

    if constexpr (WithParamGrads) {
      const Vec<Scalar> dtb = dh2.rowwise().sum();
      gview(p + ".time.w").noalias() += dtb * tape_.emb.transpose();
      gvec(p + ".time.b") += dtb;
    }

    // conv1
    if constexpr (WithParamGrads) {
      gview(p + ".conv1.wc").noalias() += dh2 * t.am.transpose();
      gview(p + ".conv1.wl").noalias() +=
          dh2.rightCols(l - 1) * t.am.leftCols(l - 1).transpose();
      gview(p + ".conv1.wr").noalias() +=
          dh2.leftCols(l - 1) * t.am.rightCols(l - 1).transpose();
      gvec(p + ".conv1.b") += dh2.rowwise().sum();
    }
    Mat<Scalar> dam = cview(p + ".conv1.wc").transpose() * dh2;
    dam.leftCols(l - 1).noalias() += cview(p + ".conv1.wl").transpose() * dh2.rightCols(l - 1);
    dam.rightCols(l - 1).noalias() += cview(p + ".conv1.wr").transpose() * dh2.leftCols(l - 1);

    detail::zero_padded(dam, t.valid);
    return dy + dam.cwiseProduct(detail::dsilu_mat(t.x));
  }

  Mat<Scalar> attention_forward(const Mat<Scalar>& x, Index valid) {
    tape_.attn_in = x;
    tape_.q.noalias() = cview("attn.wq") * x;
    tape_.k.noalias() = cview("attn.wk") * x;
    tape_.v.noalias() = cview("attn.wv") * x;
    const Index v = valid;
    const Scalar scale = Scalar(1) / std::sqrt(Scalar(cfg_.channels));
    Mat<Scalar> s = scale * (tape_.q.leftCols(v).transpose() * tape_.k.leftCols(v));
    for (Index i = 0; i < v; ++i) {
      const Scalar m = s.row(i).maxCoeff();
      s.row(i) = (s.row(i).array() - m).exp().matrix();
      s.row(i) /= s.row(i).sum();
    }
    tape_.a = std::move(s);
    Mat<Scalar> o = Mat<Scalar>::Zero(x.rows(), x.cols());
    o.leftCols(v).noalias() = tape_.v.leftCols(v) * tape_.a.transpose();
    return x + cview("attn.wo") * o;
  }

  template <bool WithParamGrads>
  Mat<Scalar> attention_backward(const Mat<Scalar>& dy) {
    const Index v = tape_.v1;
    const Scalar scale = Scalar(1) / std::sqrt(Scalar(cfg_.channels));
    Mat<Scalar> o = Mat<Scalar>::Zero(dy.rows(), dy.cols());
    o.leftCols(v).noalias() = tape_.v.leftCols(v) * tape_.a.transpose();
    if constexpr (WithParamGrads) gview("attn.wo").noalias() += dy * o.transpose();
    Mat<Scalar> dov = (cview("attn.wo").transpose() * dy).leftCols(v);

    Mat<Scalar> dvv = dov * tape_.a;                              // C x v
    Mat<Scalar> da = dov.transpose() * tape_.v.leftCols(v);       // v x v
    Mat<Scalar> ds(v, v);
    for (Index i = 0; i < v; ++i) {
      const Scalar dot = da.row(i).dot(tape_.a.row(i));
      ds.row(i) = tape_.a.row(i).cwiseProduct((da.row(i).array() - dot).matrix());
    }
    Mat<Scalar> dqv = scale * (tape_.k.leftCols(v) * ds.transpose());
    Mat<Scalar> dkv = scale * (tape_.q.leftCols(v) * ds);

    Mat<Scalar> dx = dy;
    Mat<Scalar> dfull = Mat<Scalar>::Zero(dy.rows(), dy.cols());
    dfull.leftCols(v) = dqv;
    if constexpr (WithParamGrads)
      gview("attn.wq").noalias() += dfull * tape_.attn_in.transpose();
    dx.noalias() += cview("attn.wq").transpose() * dfull;
    dfull.leftCols(v) = dkv;
    if constexpr (WithParamGrads)
      gview("attn.wk").noalias() += dfull * tape_.attn_in.transpose();
    dx.noalias() += cview("attn.wk").transpose() * dfull;
    dfull.leftCols(v) = dvv;
    if constexpr (WithParamGrads)
      gview("attn.wv").noalias() += dfull * tape_.attn_in.transpose();
    dx.noalias() += cview("attn.wv").transpose() * dfull;
    return dx;
  }

  NetConfig cfg_;
  int n_ = 0, l_ = 0;
  FourierBank fourier_;
  std::vector<ParamInfo> infos_;
  std::unordered_map<std::string, std::size_t> index_;
  Index total_ = 0;
  Vec<Scalar> params_, grads_;
  Tape tape_;
};

// u(t) = gain * (w2 . silu(W1 * fourier(c_noise(t)) + b1) + b2); one head per
// feature group, trained jointly with the denoiser.
template <typename Scalar>
class UncertaintyHead {
 public:
  UncertaintyHead(int fourier_dim = 64, int hidden = 64, double fourier_scale = 1.0,
                  double c_noise_scale = 0.25)
      : f_(fourier_dim), h_(hidden), fourier_scale_(fourier_scale),
        c_noise_scale_(c_noise_scale) {
    require(f_ > 0 && h_ > 0, "uncertainty head: dimensions must be positive");
    add_param("w1", h_, f_);
    add_param("b1", h_, 1);
    add_param("w2", h_, 1);
    add_param("b2", 1, 1);
    add_param("gain", 1, 1);
    params_ = Vec<Scalar>::Zero(total_);
    grads_ = Vec<Scalar>::Zero(total_);
  }

  Index param_count() const { return total_; }
  const std::vector<ParamInfo>& param_infos() const { return infos_; }
  Vec<Scalar>& params() { return params_; }
  const Vec<Scalar>& params() const { return params_; }
  Vec<Scalar>& grads() { return grads_; }
  const Vec<Scalar>& grads() const { return grads_; }
  void zero_grad() { grads_.setZero(); }
  FourierBank& fourier() { return fourier_; }
  const FourierBank& fourier() const { return fourier_; }
  double c_noise_scale() const { return c_noise_scale_; }
  int fourier_dim() const { return f_; }
  int hidden_dim() const { return h_; }
  double fourier_scale() const { return fourier_scale_; }

  void init_weights(Rng& rng) {
    fourier_.init(rng, f_, fourier_scale_);
    view("w1") = rng.normal_matrix<Scalar>(h_, f_, 1.0 / std::sqrt(double(f_)));
    view("b1").setZero();
    view("w2") = rng.normal_matrix<Scalar>(h_, 1, 1.0 / std::sqrt(double(h_)));
    view("b2").setZero();
    view("gain").setConstant(Scalar(1));
  }

  double forward(double t) {
    require(t > 0.0, "uncertainty head: t must be positive");
    require(fourier_.freqs.size() == f_,
            "uncertainty head: fourier bank not initialized");
    tape_.emb = fourier_.template embed<Scalar>(c_noise_scale_ * std::log(t));
    tape_.z = view("w1") * tape_.emb + Vec<Scalar>(view("b1"));
    tape_.h = detail::silu_mat(Mat<Scalar>(tape_.z));
    tape_.inner = view("w2").col(0).dot(tape_.h.col(0)) + view("b2")(0, 0);
    tape_.ok = true;
    return static_cast<double>(view("gain")(0, 0) * tape_.inner);
  }

  void backward(double du) {
    check(tape_.ok, "uncertainty head backward: no recorded forward");
    const Scalar d = static_cast<Scalar>(du);
    gview("gain")(0, 0) += d * tape_.inner;
    const Scalar di = d * view("gain")(0, 0);
    gview("w2").col(0) += di * tape_.h.col(0);
    gview("b2")(0, 0) += di;
    const Vec<Scalar> dz =
        (di * view("w2").col(0).array() * detail::dsilu_mat(Mat<Scalar>(tape_.z)).col(0).array())
            .matrix();
    gview("w1").noalias() += dz * tape_.emb.transpose();
    gview("b1").col(0) += dz;
    tape_.ok = false;
  }

  template <typename T>
  UncertaintyHead<T> cast() const {
    UncertaintyHead<T> out(f_, h_, fourier_scale_, c_noise_scale_);
    out.params() = params_.template cast<T>();
    out.fourier() = fourier_;
    return out;
  }

 private:
  struct Tape {
    bool ok = false;
    Vec<Scalar> emb;
    Vec<Scalar> z;
    Mat<Scalar> h;
    Scalar inner = 0;
  };

  void add_param(const std::string& name, Index rows, Index cols) {
    index_[name] = infos_.size();
    infos_.push_back(ParamInfo{name, total_, rows, cols});
    total_ += rows * cols;
  }
  Eigen::Map<Mat<Scalar>> view(const std::string& name) {
    const ParamInfo& o = infos_[index_.at(name)];
    return Eigen::Map<Mat<Scalar>>(params_.data() + o.offset, o.rows, o.cols);
  }
  Eigen::Map<Mat<Scalar>> gview(const std::string& name) {
    const ParamInfo& o = infos_[index_.at(name)];
    return Eigen::Map<Mat<Scalar>>(grads_.data() + o.offset, o.rows, o.cols);
  }

  int f_ = 0, h_ = 0;
  double fourier_scale_ = 1.0, c_noise_scale_ = 0.25;
  FourierBank fourier_;
  std::vector<ParamInfo> infos_;
  std::unordered_map<std::string, std::size_t> index_;
  Index total_ = 0;
  Vec<Scalar> params_, grads_;
  Tape tape_;
};

}  // namespace gdk
