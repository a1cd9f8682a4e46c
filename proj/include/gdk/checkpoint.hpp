#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gdk/common.hpp"
#include "gdk/dataset_io.hpp"
#include "gdk/layout.hpp"
#include "gdk/losses.hpp"
#include "gdk/net.hpp"

// Model checkpoint, one binary file: magic "GDKW", version, a JSON meta
// block (model configuration, loss mode, preconditioner, layout hash,
// normalization stats, epoch), every parameter block as f32, the fixed
// Fourier buffers at full precision (they are untrained and their doubles
// must survive a round trip), then optionally the Adam moments.

namespace gdk {

inline std::uint64_t layout_hash(const FeatureLayout& layout) {
  return fnv1a64(layout.to_json().dump());
}

namespace detail {

inline void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  check(bool(is), "checkpoint: truncated file");
  return v;
}

template <typename Scalar>
void write_block_f32(std::ostream& os, const Vec<Scalar>& v) {
  write_u64(os, static_cast<std::uint64_t>(v.size()));
  const Vec<float> f = v.template cast<float>();
  os.write(reinterpret_cast<const char*>(f.data()),
           static_cast<std::streamsize>(sizeof(float) * f.size()));
}

inline Vec<float> read_block_f32(std::istream& is, Index expected) {
  const auto n = static_cast<Index>(read_u64(is));
  check(n == expected, "checkpoint: parameter block size mismatch");
  Vec<float> f(n);
  is.read(reinterpret_cast<char*>(f.data()),
          static_cast<std::streamsize>(sizeof(float) * n));
  check(bool(is), "checkpoint: truncated parameter block");
  return f;
}

inline void write_vecd(std::ostream& os, const VecD& v) {
  write_u64(os, static_cast<std::uint64_t>(v.size()));
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(sizeof(double) * v.size()));
}

inline VecD read_vecd(std::istream& is) {
  const auto n = static_cast<Index>(read_u64(is));
  VecD v(n);
  is.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(sizeof(double) * n));
  check(bool(is), "checkpoint: truncated buffer");
  return v;
}

}  // namespace detail

struct LoadedCheckpoint {
  DiffusionModel<float> model;
  NormStats stats;
  LossMode mode = LossMode::Final;
  Preconditioner precond;
  int epoch = 0;
  std::uint64_t layout_hash = 0;

  bool has_optimizer = false;
  std::vector<VecD> opt_m, opt_v;  // one entry per parameter block
  long opt_step = 0;
};

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path,
                     const DiffusionModel<Scalar>& model, const FeatureLayout& layout,
                     const NormStats& stats, LossMode mode, const Preconditioner& pc,
                     int epoch, const std::vector<VecD>* opt_m = nullptr,
                     const std::vector<VecD>* opt_v = nullptr, long opt_step = 0) {
  const bool with_opt = opt_m != nullptr && opt_v != nullptr;
  require(!with_opt || (opt_m->size() == 1 + model.heads.size() &&
                        opt_v->size() == opt_m->size()),
          "checkpoint: optimizer block count mismatch");
  require(static_cast<int>(model.heads.size()) == head_count(mode, layout),
          "checkpoint: head count does not match mode");

  nlohmann::json meta;
  meta["epoch"] = epoch;
  meta["mode"] = to_string(mode);
  meta["layout_hash"] = layout_hash(layout);
  nlohmann::json jnet;
  to_json(jnet, model.net.config());
  meta["net"] = jnet;
  meta["feature_dim"] = model.net.feature_dim();
  meta["l_max"] = model.net.l_max();
  const auto& h0 = model.heads.front();
  meta["heads"] = {{"count", model.heads.size()},
                   {"fourier_dim", h0.fourier_dim()},
                   {"hidden", h0.hidden_dim()},
                   {"fourier_scale", h0.fourier_scale()},
                   {"c_noise_scale", h0.c_noise_scale()}};
  meta["precond"] = {{"sigma_data", pc.sigma_data},
                     {"p_mean", pc.p_mean},
                     {"p_std", pc.p_std},
                     {"c_noise_scale", pc.c_noise_scale}};
  meta["stats"] = stats.to_json(layout);
  meta["optimizer"] = with_opt;
  const std::string ms = meta.dump();

  std::ofstream os(path, std::ios::binary);
  check(bool(os), "checkpoint: cannot open for write: " + path.string());
  os.write("GDKW", 4);
  detail::write_u32(os, 1);
  detail::write_u64(os, ms.size());
  os.write(ms.data(), static_cast<std::streamsize>(ms.size()));

  detail::write_u32(os, static_cast<std::uint32_t>(1 + model.heads.size()));
  detail::write_block_f32(os, model.net.params());
  for (const auto& h : model.heads) detail::write_block_f32(os, h.params());

  detail::write_vecd(os, model.net.fourier().freqs);
  detail::write_vecd(os, model.net.fourier().phases);
  for (const auto& h : model.heads) {
    detail::write_vecd(os, h.fourier().freqs);
    detail::write_vecd(os, h.fourier().phases);
  }

  if (with_opt) {
    for (std::size_t b = 0; b < opt_m->size(); ++b) {
      detail::write_vecd(os, (*opt_m)[b]);
      detail::write_vecd(os, (*opt_v)[b]);
    }
    detail::write_u64(os, static_cast<std::uint64_t>(opt_step));
  }
  check(bool(os), "checkpoint: write failed: " + path.string());
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                        const FeatureLayout& layout) {
  std::ifstream is(path, std::ios::binary);
  check(bool(is), "checkpoint: cannot open: " + path.string());
  char magic[4] = {};
  is.read(magic, 4);
  check(bool(is) && std::string(magic, 4) == "GDKW", "checkpoint: bad magic");
  check(detail::read_u32(is) == 1, "checkpoint: unsupported version");

  const auto meta_len = detail::read_u64(is);
  std::string ms(meta_len, '\0');
  is.read(ms.data(), static_cast<std::streamsize>(meta_len));
  check(bool(is), "checkpoint: truncated meta");
  const nlohmann::json meta = nlohmann::json::parse(ms);

  check(meta.at("layout_hash").get<std::uint64_t>() == layout_hash(layout),
        "checkpoint: layout does not match the one it was trained with");
  check(meta.at("feature_dim").get<int>() == layout.feature_dim(),
        "checkpoint: feature dim mismatch");

  NetConfig nc;
  from_json(meta.at("net"), nc);
  const LossMode mode = loss_mode_from_string(meta.at("mode").get<std::string>());
  const auto& jh = meta.at("heads");
  check(jh.at("count").get<int>() == head_count(mode, layout),
        "checkpoint: head count does not match mode");

  LoadedCheckpoint out{
      DiffusionModel<float>(nc, layout, meta.at("l_max").get<int>(), mode,
                            jh.at("c_noise_scale").get<double>(),
                            jh.at("fourier_dim").get<int>(), jh.at("hidden").get<int>()),
      NormStats::from_json(meta.at("stats"), layout)};
  out.mode = mode;
  out.epoch = meta.at("epoch").get<int>();
  out.layout_hash = meta.at("layout_hash").get<std::uint64_t>();
  const auto& jp = meta.at("precond");
  out.precond.sigma_data = jp.at("sigma_data").get<double>();
  out.precond.p_mean = jp.at("p_mean").get<double>();
  out.precond.p_std = jp.at("p_std").get<double>();
  out.precond.c_noise_scale = jp.at("c_noise_scale").get<double>();

  const auto blocks = detail::read_u32(is);
  check(blocks == 1 + out.model.heads.size(), "checkpoint: block count mismatch");
  out.model.net.params() = detail::read_block_f32(is, out.model.net.param_count());
  for (auto& h : out.model.heads)
    h.params() = detail::read_block_f32(is, h.param_count());

  out.model.net.fourier().freqs = detail::read_vecd(is);
  out.model.net.fourier().phases = detail::read_vecd(is);
  for (auto& h : out.model.heads) {
    h.fourier().freqs = detail::read_vecd(is);
    h.fourier().phases = detail::read_vecd(is);
  }

  out.has_optimizer = meta.at("optimizer").get<bool>();
  if (out.has_optimizer) {
    for (std::size_t b = 0; b < blocks; ++b) {
      out.opt_m.push_back(detail::read_vecd(is));
      out.opt_v.push_back(detail::read_vecd(is));
    }
    out.opt_step = static_cast<long>(detail::read_u64(is));
  }
  return out;
}

}  // namespace gdk
