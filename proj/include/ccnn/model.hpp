#pragma once

#include <array>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ccnn/autodiff.hpp"
#include "ccnn/heatmap_codec.hpp"
#include "ccnn/optimizer.hpp"
#include "ccnn/rng.hpp"

namespace ccnn {

struct ccnn_config {
  int cascades = 4;       // number of heatmap/regression unit pairs
  int input_side = 256;
  int heatmap_side = 64;  // always input_side / 4
  int landmarks = 68;
  int channel_scale = 1;  // divisor applied to all interior channel counts
  double sigma = 1.3;     // Gaussian label width, in heatmap cells

  void validate() const {
    require(cascades >= 1, "config: cascades must be >= 1");
    require(input_side > 0 && input_side % 4 == 0, "config: input_side must be a multiple of 4");
    require(heatmap_side * 4 == input_side, "config: heatmap_side must be input_side / 4");
    require(heatmap_side >= 8, "config: heatmap_side too small");
    require(landmarks >= 1, "config: landmarks must be >= 1");
    require(channel_scale >= 1 && 64 % channel_scale == 0,
            "config: channel_scale must divide the channel counts");
    require(sigma > 0.0, "config: sigma must be positive");
  }

  double stride() const { return static_cast<double>(input_side) / heatmap_side; }
  int ch(int full_channels) const { return full_channels / channel_scale; }

  static ccnn_config full_scale() { return ccnn_config{}; }

  static ccnn_config toy(int cascades_ = 2) {
    ccnn_config c;
    c.cascades = cascades_;
    c.input_side = 64;
    c.heatmap_side = 16;
    c.landmarks = 5;
    c.channel_scale = 8;
    return c;
  }
};

namespace arch {

// One conv stage: conv (stride 1, shape-preserving pad floor(k/2)), optional
// batchnorm + relu, optional 2x2/2 max pool and dropout after. Channel counts
// are full-scale; n_channels means "one channel per landmark". Output heads
// use a damped init_gain so predictions start near the target scale.
struct block {
  const char* name;
  int kernel;
  int out_ch;
  bool n_channels;
  bool bn, relu;
  bool pool_after;
  bool dropout_after;
  double init_gain = 1.0;
};

inline constexpr std::array<block, 7> base_features{{
    {"conv1", 3, 64, false, true, true, false, false},
    {"conv2", 3, 64, false, true, true, true, false},
    {"conv3", 3, 64, false, true, true, false, false},
    {"conv4", 3, 128, false, true, true, true, false},
    {"conv5", 3, 128, false, true, true, false, false},
    {"conv6", 3, 128, false, true, true, false, false},
    {"conv7", 1, 128, false, false, false, false, false},
}};

// Output heads (hconv5 / conv4 below) keep their activation but skip the
// batch normalization: normalizing a head channel-wide lets the all-zero
// background solution kill the whole channel through its rectifier.
inline constexpr std::array<block, 5> base_heatmap_head{{
    {"hconv1", 9, 128, false, true, true, false, false},
    {"hconv2", 9, 128, false, true, true, false, false},
    {"hconv3", 1, 256, false, true, true, false, false},
    {"hconv4", 1, 256, false, true, true, false, true},
    {"hconv5", 1, 0, true, false, true, false, false, 0.1},
}};

inline constexpr std::array<block, 4> heatmap_unit{{
    {"conv1", 7, 64, false, true, true, false, false},
    {"conv2", 13, 64, false, true, true, false, false},
    {"conv3", 1, 128, false, true, true, false, false},
    {"conv4", 1, 0, true, false, true, false, false, 0.1},
}};

// The regression stages carry no activations; the pools do the downsampling.
inline constexpr std::array<block, 3> regression_reduce{{
    {"conv1", 7, 64, false, true, false, true, false},
    {"conv2", 5, 128, false, true, false, true, false},
    {"conv3", 3, 256, false, true, false, true, false},
}};

inline constexpr std::array<block, 2> regression_fuse{{
    {"conv4", 3, 512, false, true, false, true, false},
    {"conv5", 3, 1024, false, true, false, true, false},
}};

inline constexpr double dropout_rate = 0.5;

// Spatial side of the regression feature block E_k. Pools that would shrink a
// dimension below one cell are skipped.
inline int regression_feature_side(int heatmap_side) {
  int side = heatmap_side;
  for (const auto& d : regression_reduce)
    if (d.pool_after && side >= 2) side /= 2;
  return side;
}

}  // namespace arch

template <typename T>
struct conv_block_params {
  std::string name;
  conv_spec spec;
  bool has_bn = false, has_relu = false, pool_after = false, dropout_after = false;
  tensor<T> w;  // (kh, kw, in_c, out_c)
  tensor<T> b;  // only when !has_bn
  tensor<T> gamma, beta, run_mean, run_var;

  int out_channels() const { return w.c; }
};

namespace detail {

template <typename T>
conv_block_params<T> make_block(const arch::block& d, const std::string& name, int in_ch,
                                const ccnn_config& cfg, rng& r) {
  conv_block_params<T> p;
  p.name = name;
  int out_ch = d.n_channels ? cfg.landmarks : cfg.ch(d.out_ch);
  p.spec = conv_spec{d.kernel, d.kernel, 1, 1, d.kernel / 2, d.kernel / 2};
  p.has_bn = d.bn;
  p.has_relu = d.relu;
  p.pool_after = d.pool_after;
  p.dropout_after = d.dropout_after;
  p.w = tensor<T>(d.kernel, d.kernel, in_ch, out_ch);
  double fan_in = static_cast<double>(d.kernel) * d.kernel * in_ch;
  double stddev = d.init_gain * std::sqrt((d.relu ? 2.0 : 1.0) / fan_in);
  for (auto& e : p.w.v) e = static_cast<T>(r.normal(0.0, stddev));
  if (p.has_bn) {
    p.gamma = tensor<T>::flat(out_ch);
    p.gamma.fill(T(1));
    p.beta = tensor<T>::flat(out_ch);
    p.run_mean = tensor<T>::flat(out_ch);
    p.run_var = tensor<T>::flat(out_ch);
    p.run_var.fill(T(1));
  } else {
    p.b = tensor<T>::flat(out_ch);
  }
  return p;
}

template <typename T, size_t M>
std::vector<conv_block_params<T>> make_blocks(const std::array<arch::block, M>& descs,
                                              const std::string& prefix, int in_ch,
                                              const ccnn_config& cfg, rng& r) {
  std::vector<conv_block_params<T>> out;
  out.reserve(M);
  for (const auto& d : descs) {
    out.push_back(make_block<T>(d, prefix + "." + d.name, in_ch, cfg, r));
    in_ch = out.back().out_channels();
  }
  return out;
}

}  // namespace detail

// All learnable state. The two base networks and every cascade unit hold
// independent parameters (non-weight-sharing). base1 carries only the feature
// stage: its heatmap head would receive no training signal, since only the
// second base network's initial heatmap estimate enters the losses.
template <typename T>
struct ccnn_params {
  ccnn_config config;

  std::vector<conv_block_params<T>> base1;       // feature stage only
  std::vector<conv_block_params<T>> base2;       // feature stage
  std::vector<conv_block_params<T>> base2_head;  // initial heatmap estimate

  std::vector<std::vector<conv_block_params<T>>> heatmap_units;  // K x 4 blocks

  struct regression_unit {
    std::vector<conv_block_params<T>> reduce;  // conv1..conv3 (+pools)
    std::vector<conv_block_params<T>> fuse;    // conv4..conv5 (+pools)
    tensor<T> fc_w;                            // (1, 1, flattened, 2N)
    tensor<T> fc_b;
  };
  std::vector<regression_unit> regression_units;  // K

  static ccnn_params init(const ccnn_config& cfg, std::uint64_t seed) {
    cfg.validate();
    rng r(seed);
    ccnn_params p;
    p.config = cfg;
    const int feat_ch = cfg.ch(128);
    p.base1 = detail::make_blocks<T>(arch::base_features, "base1", 3, cfg, r);
    p.base2 = detail::make_blocks<T>(arch::base_features, "base2", 3, cfg, r);
    p.base2_head = detail::make_blocks<T>(arch::base_heatmap_head, "base2", feat_ch, cfg, r);
    const int hm_in = feat_ch + cfg.landmarks;
    const int reg_in = 2 * feat_ch + 2 * cfg.landmarks;
    for (int k = 1; k <= cfg.cascades; ++k) {
      p.heatmap_units.push_back(
          detail::make_blocks<T>(arch::heatmap_unit, "hm" + std::to_string(k), hm_in, cfg, r));
      regression_unit u;
      std::string prefix = "reg" + std::to_string(k);
      u.reduce = detail::make_blocks<T>(arch::regression_reduce, prefix, reg_in, cfg, r);
      u.fuse = detail::make_blocks<T>(arch::regression_fuse, prefix,
                                      2 * u.reduce.back().out_channels(), cfg, r);
      int side = cfg.heatmap_side;
      for (const auto& blk : u.reduce)
        if (blk.pool_after && side >= 2) side /= 2;
      for (const auto& blk : u.fuse)
        if (blk.pool_after && side >= 2) side /= 2;
      int fc_in = side * side * u.fuse.back().out_channels();
      u.fc_w = tensor<T>(1, 1, fc_in, 2 * cfg.landmarks);
      double stddev = 0.1 * std::sqrt(1.0 / fc_in);
      for (auto& e : u.fc_w.v) e = static_cast<T>(r.normal(0.0, stddev));
      u.fc_b = tensor<T>::flat(2 * cfg.landmarks);
      p.regression_units.push_back(std::move(u));
    }
    return p;
  }

  void for_each_param(const std::function<void(param_ref<T>)>& fn) {
    auto visit_block = [&](conv_block_params<T>& blk) {
      fn({blk.name + ".w", &blk.w, true});
      if (blk.has_bn) {
        fn({blk.name + ".bn.gamma", &blk.gamma, true});
        fn({blk.name + ".bn.beta", &blk.beta, true});
        fn({blk.name + ".bn.run_mean", &blk.run_mean, false});
        fn({blk.name + ".bn.run_var", &blk.run_var, false});
      } else {
        fn({blk.name + ".b", &blk.b, true});
      }
    };
    for (auto& blk : base1) visit_block(blk);
    for (auto& blk : base2) visit_block(blk);
    for (auto& blk : base2_head) visit_block(blk);
    for (auto& unit : heatmap_units)
      for (auto& blk : unit) visit_block(blk);
    for (size_t k = 0; k < regression_units.size(); ++k) {
      auto& u = regression_units[k];
      for (auto& blk : u.reduce) visit_block(blk);
      for (auto& blk : u.fuse) visit_block(blk);
      std::string prefix = "reg" + std::to_string(k + 1);
      fn({prefix + ".fc.w", &u.fc_w, true});
      fn({prefix + ".fc.b", &u.fc_b, true});
    }
  }

  std::vector<param_ref<T>> params() {
    std::vector<param_ref<T>> out;
    for_each_param([&](param_ref<T> p) { out.push_back(p); });
    return out;
  }
};

// ---- forward ----------------------------------------------------------------

template <typename T>
struct forward_trace {
  using var = typename tape<T>::var;
  var input;
  var features1, features2;  // F1, F2
  var base_heatmap;          // initial heatmap estimate fed to every unit
  std::vector<var> heatmaps;       // one per cascade unit
  std::vector<var> reg_features;   // E_k
  std::vector<var> deltas;         // raw outputs, units of input pixels / input_side
  std::vector<std::vector<landmark_set>> decoded;  // [unit][sample], input-frame pixels
  std::vector<coordinate_vector> final_delta;      // [sample], input-frame pixels
  std::vector<landmark_set> final_landmarks;       // [sample]
};

namespace detail {

template <typename T>
typename tape<T>::var run_blocks(tape<T>& tp, typename tape<T>::var x,
                                 std::vector<conv_block_params<T>>& blocks) {
  using var = typename tape<T>::var;
  for (auto& blk : blocks) {
    var w = tp.leaf(blk.w, true);
    var b = blk.has_bn ? var{} : tp.leaf(blk.b, true);
    x = tp.conv2d(x, w, b, blk.spec, blk.name);
    if (blk.has_bn) {
      var gamma = tp.leaf(blk.gamma, true);
      var beta = tp.leaf(blk.beta, true);
      x = tp.batchnorm(x, gamma, beta, blk.run_mean, blk.run_var, T(0.1), T(1e-5),
                       blk.name + ".bn");
    }
    if (blk.has_relu) x = tp.relu(x);
    if (blk.pool_after) {
      const tensor<T>& cur = tp.val(x);
      if (cur.h >= 2 && cur.w >= 2) x = tp.maxpool(x, pool_spec{2, 2}, blk.name + ".pool");
    }
    if (blk.dropout_after) x = tp.dropout(x, static_cast<T>(arch::dropout_rate));
  }
  return x;
}

}  // namespace detail

// Feature stage (and heatmap head when present) of one base network.
// Returns {F, H}; H is invalid for the feature-only network.
template <typename T>
std::pair<typename tape<T>::var, typename tape<T>::var> base_forward(
    tape<T>& tp, typename tape<T>::var input, std::vector<conv_block_params<T>>& features,
    std::vector<conv_block_params<T>>* head) {
  auto f = detail::run_blocks(tp, input, features);
  typename tape<T>::var h{};
  if (head) h = detail::run_blocks(tp, f, *head);
  return {f, h};
}

// One heatmap estimation unit: input F2 (+) previous heatmap.
template <typename T>
typename tape<T>::var hmsu_forward(tape<T>& tp, typename tape<T>::var f2,
                                   typename tape<T>::var h_prev,
                                   std::vector<conv_block_params<T>>& unit,
                                   const std::string& name) {
  std::array<typename tape<T>::var, 2> in{f2, h_prev};
  auto x = tp.concat(std::span<const typename tape<T>::var>(in.data(), in.size()),
                     name + ".concat");
  return detail::run_blocks(tp, x, unit);
}

// One regression unit: F1 (+) F2 (+) H_k (+) H_E reduced to a feature block,
// then fused with the previous unit's block and mapped to 2N residuals.
template <typename T>
std::pair<typename tape<T>::var, typename tape<T>::var> crcnn_forward(
    tape<T>& tp, typename tape<T>::var f1, typename tape<T>::var f2,
    typename tape<T>::var h_k, typename tape<T>::var h_e, typename tape<T>::var e_prev,
    typename ccnn_params<T>::regression_unit& unit, const std::string& name) {
  using var = typename tape<T>::var;
  std::array<var, 4> in{f1, f2, h_k, h_e};
  var x = tp.concat(std::span<const var>(in.data(), in.size()), name + ".concat");
  var e_k = detail::run_blocks(tp, x, unit.reduce);
  std::array<var, 2> fuse_in{e_k, e_prev};
  var y = tp.concat(std::span<const var>(fuse_in.data(), fuse_in.size()), name + ".fuse_concat");
  y = detail::run_blocks(tp, y, unit.fuse);
  var w = tp.leaf(unit.fc_w, true);
  var b = tp.leaf(unit.fc_b, true);
  var delta = tp.dense(y, w, b, name + ".fc");
  return {e_k, delta};
}

// Full cascade pass. Input must be a normalized (batch, side, side, 3) tensor.
template <typename T>
forward_trace<T> ccnn_forward(tape<T>& tp, typename tape<T>::var input, ccnn_params<T>& P) {
  using var = typename tape<T>::var;
  const ccnn_config& cfg = P.config;
  const tensor<T>& in = tp.val(input);
  require(in.h == cfg.input_side && in.w == cfg.input_side && in.c == 3,
          "ccnn_forward: input must be " + std::to_string(cfg.input_side) + "x" +
              std::to_string(cfg.input_side) + "x3, got " + in.shape_str());
  const int batch = in.n;  // copied now: node references go stale as ops append
  forward_trace<T> trace;
  trace.input = input;
  auto [f1, h_unused] = base_forward<T>(tp, input, P.base1, nullptr);
  auto [f2, h_e] = base_forward<T>(tp, input, P.base2, &P.base2_head);
  trace.features1 = f1;
  trace.features2 = f2;
  trace.base_heatmap = h_e;

  const double stride = cfg.stride();
  var h_prev = h_e;
  // First unit sees zero previous regression features.
  const int e_side = arch::regression_feature_side(cfg.heatmap_side);
  var e_prev = tp.constant(tensor<T>(batch, e_side, e_side, cfg.ch(256)));
  for (int k = 1; k <= cfg.cascades; ++k) {
    var h_k = hmsu_forward(tp, f2, h_prev, P.heatmap_units[k - 1], "hm" + std::to_string(k));
    trace.heatmaps.push_back(h_k);
    auto [e_k, delta] = crcnn_forward(tp, f1, f2, h_k, h_e, e_prev,
                                      P.regression_units[k - 1], "reg" + std::to_string(k));
    trace.reg_features.push_back(e_k);
    trace.deltas.push_back(delta);

    std::vector<landmark_set> dec(batch);
    for (int s = 0; s < batch; ++s) {
      dec[s] = decode_heatmaps(tp.val(h_k), s, stride);
      dec[s].frame_w = dec[s].frame_h = cfg.input_side;
    }
    trace.decoded.push_back(std::move(dec));
    h_prev = h_k;
    e_prev = e_k;
  }

  // Final localization: last decoded heatmap estimate plus the last unit's
  // residual, rescaled from normalized units back to pixels.
  const tensor<T>& last_delta = tp.val(trace.deltas.back());
  trace.final_delta.resize(batch);
  trace.final_landmarks.resize(batch);
  for (int s = 0; s < batch; ++s) {
    coordinate_vector d(static_cast<size_t>(cfg.landmarks) * 2);
    const T* row = last_delta.row(s, 0, 0);
    for (size_t i = 0; i < d.size(); ++i)
      d[i] = static_cast<double>(row[i]) * cfg.input_side;
    trace.final_delta[s] = d;
    trace.final_landmarks[s] = apply_residual(trace.decoded.back()[s], d);
  }
  return trace;
}

// ---- loss ---------------------------------------------------------------------

struct loss_breakdown {
  double total = 0.0;
  double base_heatmap = 0.0;
  std::vector<double> heatmap_terms;
  std::vector<double> regression_terms;
};

// Sum of: l2(initial heatmap, target), l2(H_k, target) for every unit, and
// l2(delta_k, residual target) for every unit, with equal weights. Residual
// targets are the decoded-argmax errors, treated as constants (the argmax is
// outside the differentiable path) and expressed in pixels / input_side.
template <typename T>
typename tape<T>::var total_loss(tape<T>& tp, const forward_trace<T>& trace,
                                 std::span<const landmark_set> gt, const ccnn_config& cfg,
                                 loss_breakdown* breakdown = nullptr) {
  using var = typename tape<T>::var;
  const int batch = static_cast<int>(gt.size());
  require(batch == tp.val(trace.input).n, "total_loss: batch size mismatch");

  tensor<T> hm_target(batch, cfg.heatmap_side, cfg.heatmap_side, cfg.landmarks);
  for (int s = 0; s < batch; ++s)
    encode_heatmaps_into(gt[s], cfg.sigma, cfg.stride(), hm_target, s);
  var target = tp.constant(std::move(hm_target));

  loss_breakdown bd;
  var total = tp.l2_loss(trace.base_heatmap, target, "loss.base_heatmap");
  bd.base_heatmap = static_cast<double>(tp.val(total).v[0]);

  for (int k = 0; k < cfg.cascades; ++k) {
    var term = tp.l2_loss(trace.heatmaps[k], target, "loss.heatmap" + std::to_string(k + 1));
    bd.heatmap_terms.push_back(static_cast<double>(tp.val(term).v[0]));
    total = tp.add(total, term);
  }
  for (int k = 0; k < cfg.cascades; ++k) {
    tensor<T> reg_target(batch, 1, 1, 2 * cfg.landmarks);
    for (int s = 0; s < batch; ++s) {
      coordinate_vector r = residual(gt[s], trace.decoded[k][s]);
      T* row = reg_target.row(s, 0, 0);
      for (size_t i = 0; i < r.size(); ++i)
        row[i] = static_cast<T>(r[i] / cfg.input_side);
    }
    var rt = tp.constant(std::move(reg_target));
    var term = tp.l2_loss(trace.deltas[k], rt, "loss.regression" + std::to_string(k + 1));
    bd.regression_terms.push_back(static_cast<double>(tp.val(term).v[0]));
    total = tp.add(total, term);
  }
  bd.total = static_cast<double>(tp.val(total).v[0]);
  if (breakdown) *breakdown = bd;
  return total;
}

// ---- layer manifest -----------------------------------------------------------

struct manifest_row {
  std::string name;
  std::string kind;     // conv / batchnorm / relu / maxpool / dropout / concat / dense / output
  std::string kernel;   // "3x3" or "-"
  std::string stride;
  std::string pad;
  std::string in_shape;   // "64x64x196" (HxWxC)
  std::string out_shape;
  std::string note;
};

namespace detail {

struct shape3 {
  int h = 0, w = 0, c = 0;
  std::string str() const {
    return std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(c);
  }
};

inline void manifest_blocks(std::vector<manifest_row>& rows, const std::string& prefix,
                            std::span<const arch::block> blocks, shape3& s,
                            const ccnn_config& cfg) {
  for (const auto& d : blocks) {
    int out_c = d.n_channels ? cfg.landmarks : cfg.ch(d.out_ch);
    int pad = d.kernel / 2;
    shape3 out{conv_out_dim(s.h, d.kernel, 1, pad), conv_out_dim(s.w, d.kernel, 1, pad), out_c};
    std::string k = std::to_string(d.kernel) + "x" + std::to_string(d.kernel);
    std::string p = std::to_string(pad) + "x" + std::to_string(pad);
    std::string name = prefix + "." + d.name;
    rows.push_back({name, "conv", k, "1x1", p, s.str(), out.str(), ""});
    s = out;
    if (d.bn) rows.push_back({name + ".bn", "batchnorm", "-", "-", "-", s.str(), s.str(), ""});
    if (d.relu) rows.push_back({name + ".relu", "relu", "-", "-", "-", s.str(), s.str(), ""});
    if (d.pool_after) {
      if (s.h >= 2 && s.w >= 2) {
        shape3 pooled{conv_out_dim(s.h, 2, 2, 0), conv_out_dim(s.w, 2, 2, 0), s.c};
        rows.push_back({name + ".pool", "maxpool", "2x2", "2x2", "0x0", s.str(), pooled.str(), ""});
        s = pooled;
      } else {
        rows.push_back({name + ".pool", "maxpool", "2x2", "2x2", "0x0", s.str(), s.str(),
                        "skipped: input smaller than window"});
      }
    }
    if (d.dropout_after)
      rows.push_back({name + ".dropout", "dropout", "-", "-", "-", s.str(), s.str(),
                      "rate 0.5, training only"});
  }
}

}  // namespace detail

// Enumerates every layer of the network at the given configuration with its
// kernel/stride/pad and input -> output shapes, in execution order.
inline std::vector<manifest_row> layer_manifest(const ccnn_config& cfg) {
  cfg.validate();
  std::vector<manifest_row> rows;
  using detail::shape3;
  const int fc = cfg.ch(128);
  const int n = cfg.landmarks;

  shape3 input{cfg.input_side, cfg.input_side, 3};
  rows.push_back({"input", "input", "-", "-", "-", input.str(), input.str(), "normalized image"});

  for (const std::string base : {"base1", "base2"}) {
    shape3 s = input;
    detail::manifest_blocks(rows, base, std::span<const arch::block>(arch::base_features), s, cfg);
    rows.push_back({base + ".features", "output", "-", "-", "-", s.str(), s.str(),
                    base == "base1" ? "feature map F1" : "feature map F2"});
    if (base == "base2") {
      detail::manifest_blocks(rows, base, std::span<const arch::block>(arch::base_heatmap_head),
                              s, cfg);
      rows.push_back({"base2.heatmap", "output", "-", "-", "-", s.str(), s.str(),
                      "initial heatmap estimate"});
    }
  }

  shape3 fmap{cfg.heatmap_side, cfg.heatmap_side, fc};
  shape3 hm{cfg.heatmap_side, cfg.heatmap_side, n};
  for (int k = 1; k <= cfg.cascades; ++k) {
    std::string prefix = "hm" + std::to_string(k);
    shape3 s{cfg.heatmap_side, cfg.heatmap_side, fc + n};
    rows.push_back({prefix + ".concat", "concat", "-", "-", "-",
                    fmap.str() + " (+) " + hm.str(), s.str(),
                    "F2 (+) previous heatmap (initial estimate when k = 1)"});
    detail::manifest_blocks(rows, prefix, std::span<const arch::block>(arch::heatmap_unit), s,
                            cfg);
    rows.push_back({prefix + ".heatmap", "output", "-", "-", "-", s.str(), s.str(), ""});
  }

  for (int k = 1; k <= cfg.cascades; ++k) {
    std::string prefix = "reg" + std::to_string(k);
    shape3 s{cfg.heatmap_side, cfg.heatmap_side, 2 * fc + 2 * n};
    rows.push_back({prefix + ".concat", "concat", "-", "-", "-",
                    "2x" + fmap.str() + " (+) 2x" + hm.str(), s.str(),
                    "F1 (+) F2 (+) unit heatmap (+) initial heatmap"});
    detail::manifest_blocks(rows, prefix, std::span<const arch::block>(arch::regression_reduce),
                            s, cfg);
    rows.push_back({prefix + ".features", "output", "-", "-", "-", s.str(), s.str(),
                    "regression features"});
    shape3 f{s.h, s.w, s.c * 2};
    rows.push_back({prefix + ".fuse_concat", "concat", "-", "-", "-",
                    s.str() + " (+) " + s.str(), f.str(),
                    "unit features (+) previous unit features (zero when k = 1)"});
    s = f;
    detail::manifest_blocks(rows, prefix, std::span<const arch::block>(arch::regression_fuse), s,
                            cfg);
    shape3 d{1, 1, 2 * n};
    rows.push_back({prefix + ".fc", "dense", "-", "-", "-", s.str(), d.str(),
                    "flattened, residual output"});
    rows.push_back({prefix + ".delta", "output", "-", "-", "-", d.str(), d.str(),
                    "coordinate residual, length " + std::to_string(2 * n)});
  }
  return rows;
}

inline std::string format_layer_manifest(const ccnn_config& cfg) {
  auto rows = layer_manifest(cfg);
  size_t name_w = 4, kind_w = 4, in_w = 2, out_w = 3;
  for (const auto& r : rows) {
    name_w = std::max(name_w, r.name.size());
    kind_w = std::max(kind_w, r.kind.size());
    in_w = std::max(in_w, r.in_shape.size());
    out_w = std::max(out_w, r.out_shape.size());
  }
  auto pad = [](const std::string& s, size_t w) {
    return s + std::string(w - s.size(), ' ');
  };
  std::string out;
  out += pad("name", name_w) + "  " + pad("kind", kind_w) + "  kernel  stride  pad   " +
         pad("in", in_w) + "  " + pad("out", out_w) + "  note\n";
  for (const auto& r : rows) {
    out += pad(r.name, name_w) + "  " + pad(r.kind, kind_w) + "  " + pad(r.kernel, 6) + "  " +
           pad(r.stride, 6) + "  " + pad(r.pad, 4) + "  " + pad(r.in_shape, in_w) + "  " +
           pad(r.out_shape, out_w) + "  " + r.note + "\n";
  }
  return out;
}

}  // namespace ccnn
