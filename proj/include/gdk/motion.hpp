#pragma once

#include <vector>

#include "gdk/common.hpp"

namespace gdk {

// One padded motion sequence. Frames are stored feature-major: an N x L
// matrix whose column i is frame i. Columns at or beyond valid_len are
// exactly zero.
template <typename Scalar>
struct MotionSample {
  Mat<Scalar> frames;  // N x L
  Index valid_len = 0;

  Index feature_dim() const { return frames.rows(); }
  Index padded_len() const { return frames.cols(); }

  Vec<Scalar> mask() const { return frame_mask<Scalar>(padded_len(), valid_len); }

  void zero_padding() {
    if (valid_len < frames.cols())
      frames.rightCols(frames.cols() - valid_len).setZero();
  }

  bool padding_is_zero() const {
    if (valid_len >= frames.cols()) return true;
    return (frames.rightCols(frames.cols() - valid_len).array() == Scalar(0)).all();
  }

  template <typename T>
  MotionSample<T> cast() const {
    return MotionSample<T>{frames.template cast<T>(), valid_len};
  }
};

template <typename Scalar>
struct MotionBatch {
  std::vector<MotionSample<Scalar>> samples;

  Index size() const { return static_cast<Index>(samples.size()); }
  bool empty() const { return samples.empty(); }

  Index total_valid_frames() const {
    Index n = 0;
    for (const auto& s : samples) n += s.valid_len;
    return n;
  }
};

using MotionSampleF = MotionSample<float>;
using MotionBatchF = MotionBatch<float>;

}  // namespace gdk
