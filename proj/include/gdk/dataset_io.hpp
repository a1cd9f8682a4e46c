#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gdk/common.hpp"
#include "gdk/layout.hpp"
#include "gdk/motion.hpp"
#include "gdk/skeleton.hpp"

namespace gdk {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian and written verbatim");

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  check(bool(is), "dataset: truncated file");
  return v;
}

inline void write_json_file(const std::filesystem::path& p, const nlohmann::json& j) {
  std::ofstream os(p);
  check(bool(os), "cannot open for write: " + p.string());
  os << j.dump(2) << "\n";
  check(bool(os), "write failed: " + p.string());
}

inline nlohmann::json read_json_file(const std::filesystem::path& p) {
  std::ifstream is(p);
  check(bool(is), "cannot open: " + p.string());
  return nlohmann::json::parse(is);
}

}  // namespace detail

// Dataset directory: layout.json, skeleton.json and data.bin. data.bin is
// little-endian: magic "GDK1", u32 version, count, l_max, n, then per sample
// a u32 valid_len and l_max*n f32 values frame by frame.
inline void save_dataset(const std::filesystem::path& dir, const Skeleton& skel,
                         const FeatureLayout& layout, const MotionBatchF& data) {
  std::filesystem::create_directories(dir);
  detail::write_json_file(dir / "layout.json", layout.to_json());
  detail::write_json_file(dir / "skeleton.json", skel.to_json());

  std::ofstream os(dir / "data.bin", std::ios::binary);
  check(bool(os), "cannot open for write: " + (dir / "data.bin").string());
  os.write("GDK1", 4);
  detail::write_u32(os, 1);
  detail::write_u32(os, static_cast<std::uint32_t>(data.size()));
  detail::write_u32(os, static_cast<std::uint32_t>(layout.l_max()));
  detail::write_u32(os, static_cast<std::uint32_t>(layout.feature_dim()));
  for (const auto& s : data.samples) {
    require(s.frames.rows() == layout.feature_dim() && s.frames.cols() == layout.l_max(),
            "save_dataset: sample shape does not match layout");
    detail::write_u32(os, static_cast<std::uint32_t>(s.valid_len));
    // Column-major N x L storage is exactly frame-major on disk.
    os.write(reinterpret_cast<const char*>(s.frames.data()),
             static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(
                                                              s.frames.size())));
  }
  check(bool(os), "write failed: " + (dir / "data.bin").string());
}

struct LoadedDataset {
  Skeleton skeleton;
  FeatureLayout layout;
  MotionBatchF data;
};

inline LoadedDataset load_dataset(const std::filesystem::path& dir) {
  LoadedDataset out;
  out.layout = FeatureLayout::from_json(detail::read_json_file(dir / "layout.json"));
  out.skeleton = Skeleton::from_json(detail::read_json_file(dir / "skeleton.json"));

  std::ifstream is(dir / "data.bin", std::ios::binary);
  check(bool(is), "cannot open: " + (dir / "data.bin").string());
  char magic[4];
  is.read(magic, 4);
  check(bool(is) && std::memcmp(magic, "GDK1", 4) == 0, "dataset: bad magic");
  check(detail::read_u32(is) == 1, "dataset: unsupported version");
  const std::uint32_t count = detail::read_u32(is);
  const std::uint32_t l_max = detail::read_u32(is);
  const std::uint32_t n = detail::read_u32(is);
  check(static_cast<int>(l_max) == out.layout.l_max() &&
            static_cast<int>(n) == out.layout.feature_dim(),
        "dataset: header does not match layout.json");

  out.data.samples.resize(count);
  for (auto& s : out.data.samples) {
    s.valid_len = static_cast<Index>(detail::read_u32(is));
    check(s.valid_len >= 0 && s.valid_len <= static_cast<Index>(l_max),
          "dataset: valid_len out of range");
    s.frames.resize(n, l_max);
    is.read(reinterpret_cast<char*>(s.frames.data()),
            static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(
                                                             s.frames.size())));
    check(bool(is), "dataset: truncated sample data");
  }
  return out;
}

inline std::uint64_t file_hash(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  check(bool(is), "cannot open: " + p.string());
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[65536];
  while (is) {
    is.read(buf, sizeof buf);
    h = fnv1a64(buf, static_cast<std::size_t>(is.gcount()), h);
  }
  return h;
}

inline std::uint64_t dataset_hash(const std::filesystem::path& dir) {
  std::uint64_t h = file_hash(dir / "data.bin");
  h = fnv1a64(FeatureLayout::from_json(detail::read_json_file(dir / "layout.json"))
                  .to_json()
                  .dump(),
              h);
  return h;
}

}  // namespace gdk
