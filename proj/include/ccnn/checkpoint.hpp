#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "ccnn/model.hpp"

namespace ccnn {

// Self-describing parameter container (little endian):
//   magic "CCNNCKPT" | u32 version | u32 scalar width (4 or 8)
//   i32 cascades, input_side, heatmap_side, landmarks, channel_scale | f64 sigma
//   u32 tensor count, then per tensor:
//     u32 name length | name bytes | 4 x i32 dims (n, h, w, c) | raw values
namespace detail {

constexpr char ckpt_magic[8] = {'C', 'C', 'N', 'N', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t ckpt_version = 1;

template <typename V>
void write_pod(std::ostream& out, const V& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::istream& in) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!in) throw error("checkpoint: truncated file");
  return v;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, ccnn_params<T>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw error("checkpoint: cannot write " + path);
  out.write(detail::ckpt_magic, 8);
  detail::write_pod(out, detail::ckpt_version);
  detail::write_pod(out, static_cast<std::uint32_t>(sizeof(T)));
  const ccnn_config& c = params.config;
  for (int v : {c.cascades, c.input_side, c.heatmap_side, c.landmarks, c.channel_scale})
    detail::write_pod(out, static_cast<std::int32_t>(v));
  detail::write_pod(out, c.sigma);

  std::uint32_t count = 0;
  params.for_each_param([&](param_ref<T>) { ++count; });
  detail::write_pod(out, count);
  params.for_each_param([&](param_ref<T> p) {
    detail::write_pod(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    for (int d : {p.value->n, p.value->h, p.value->w, p.value->c})
      detail::write_pod(out, static_cast<std::int32_t>(d));
    out.write(reinterpret_cast<const char*>(p.value->data()),
              static_cast<std::streamsize>(p.value->size() * sizeof(T)));
  });
  if (!out) throw error("checkpoint: write failed for " + path);
}

template <typename T>
ccnn_params<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw error("checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, detail::ckpt_magic, 8) != 0)
    throw error("checkpoint: bad magic in " + path);
  auto version = detail::read_pod<std::uint32_t>(in);
  if (version != detail::ckpt_version)
    throw error("checkpoint: unsupported version " + std::to_string(version));
  auto width = detail::read_pod<std::uint32_t>(in);
  if (width != 4 && width != 8) throw error("checkpoint: unsupported scalar width");

  ccnn_config cfg;
  cfg.cascades = detail::read_pod<std::int32_t>(in);
  cfg.input_side = detail::read_pod<std::int32_t>(in);
  cfg.heatmap_side = detail::read_pod<std::int32_t>(in);
  cfg.landmarks = detail::read_pod<std::int32_t>(in);
  cfg.channel_scale = detail::read_pod<std::int32_t>(in);
  cfg.sigma = detail::read_pod<double>(in);

  ccnn_params<T> params = ccnn_params<T>::init(cfg, 0);
  auto count = detail::read_pod<std::uint32_t>(in);

  std::vector<param_ref<T>> refs = params.params();
  size_t next = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name_len = detail::read_pod<std::uint32_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    int dims[4];
    for (int& d : dims) d = detail::read_pod<std::int32_t>(in);
    if (next >= refs.size() || refs[next].name != name)
      throw error("checkpoint: unexpected tensor '" + name + "' in " + path);
    tensor<T>& dst = *refs[next].value;
    if (dst.n != dims[0] || dst.h != dims[1] || dst.w != dims[2] || dst.c != dims[3])
      throw error("checkpoint: shape mismatch for '" + name + "'");
    if (width == sizeof(T)) {
      in.read(reinterpret_cast<char*>(dst.data()),
              static_cast<std::streamsize>(dst.size() * sizeof(T)));
    } else if (width == 4) {
      std::vector<float> tmp(dst.size());
      in.read(reinterpret_cast<char*>(tmp.data()),
              static_cast<std::streamsize>(tmp.size() * sizeof(float)));
      for (size_t j = 0; j < tmp.size(); ++j) dst.v[j] = static_cast<T>(tmp[j]);
    } else {
      std::vector<double> tmp(dst.size());
      in.read(reinterpret_cast<char*>(tmp.data()),
              static_cast<std::streamsize>(tmp.size() * sizeof(double)));
      for (size_t j = 0; j < tmp.size(); ++j) dst.v[j] = static_cast<T>(tmp[j]);
    }
    if (!in) throw error("checkpoint: truncated tensor data in " + path);
    ++next;
  }
  if (next != refs.size())
    throw error("checkpoint: missing tensors in " + path);
  return params;
}

}  // namespace ccnn
