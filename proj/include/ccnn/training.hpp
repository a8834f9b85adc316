#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ccnn/data.hpp"
#include "ccnn/eval.hpp"
#include "ccnn/model.hpp"
#include "ccnn/optimizer.hpp"

namespace ccnn {

struct lr_stage {
  int start_epoch = 0;
  double lr = 0.0;
};

struct augment_config {
  double rotation_deg = 15.0;   // rotation sampled in +-rotation_deg
  double scale = 0.1;           // scale sampled in [1 - scale, 1 + scale]
  double translate_frac = 0.05; // translation sampled in +-frac * side
  double color_gain = 0.2;      // per-channel gain in [1 - g, 1 + g]
};

struct train_config {
  int epochs = 200;
  std::vector<lr_stage> lr_schedule{{0, 0.05}};
  int batch_size = 16;
  double momentum = 0.9;
  augment_config augment;
  std::uint64_t seed = 1;
  double validation_fraction = 0.1;
  norm_mode val_mode = norm_mode::inter_ocular;
  bool log_to_stderr = false;

  // Full-scale schedule: 1e-5 for the first 30 epochs, 5e-6 for the next
  // five, 1e-6 afterwards.
  static std::vector<lr_stage> full_scale_schedule() {
    return {{0, 1e-5}, {30, 5e-6}, {35, 1e-6}};
  }

  void validate() const {
    require(epochs >= 0, "train_config: epochs must be >= 0");
    require(batch_size >= 1, "train_config: batch_size must be >= 1");
    require(!lr_schedule.empty(), "train_config: empty lr schedule");
    require(lr_schedule.front().start_epoch == 0, "train_config: schedule must start at epoch 0");
    double prev = lr_schedule.front().lr;
    int prev_epoch = -1;
    for (const auto& s : lr_schedule) {
      require(s.lr > 0.0, "train_config: learning rates must be positive");
      require(s.lr <= prev, "train_config: learning rates must be non-increasing");
      require(s.start_epoch > prev_epoch, "train_config: schedule epochs must increase");
      prev = s.lr;
      prev_epoch = s.start_epoch;
    }
    require(validation_fraction >= 0.0 && validation_fraction < 1.0,
            "train_config: validation_fraction must be in [0, 1)");
    require(momentum >= 0.0 && momentum < 1.0, "train_config: momentum must be in [0, 1)");
  }
};

// Step function over epochs defined by the schedule.
inline double lr_at(const std::vector<lr_stage>& schedule, int epoch) {
  require(!schedule.empty(), "lr_at: empty schedule");
  double lr = schedule.front().lr;
  for (const auto& s : schedule)
    if (epoch >= s.start_epoch) lr = s.lr;
  return lr;
}

struct augment_result {
  image img;
  landmark_set landmarks;
  bool clamped = false;
};

// Rotation/scale about the image center, translation, per-channel color gain.
// Landmarks follow the identical spatial map; points pushed outside are
// clamped to the frame and flagged.
inline augment_result augment(const image& img, const landmark_set& lms,
                              const augment_config& cfg, rng& r) {
  static const double pi = 3.14159265358979323846;
  const double theta = r.uniform(-cfg.rotation_deg, cfg.rotation_deg) * pi / 180.0;
  const double s = r.uniform(1.0 - cfg.scale, 1.0 + cfg.scale);
  const double tx = r.uniform(-cfg.translate_frac, cfg.translate_frac) * img.w;
  const double ty = r.uniform(-cfg.translate_frac, cfg.translate_frac) * img.h;
  std::vector<double> gain(img.c);
  for (auto& g : gain) g = r.uniform(1.0 - cfg.color_gain, 1.0 + cfg.color_gain);

  const double cx = img.w / 2.0, cy = img.h / 2.0;
  const double ca = std::cos(theta) * s, sa = std::sin(theta) * s;
  // Inverse map for resampling: p = Minv (q - c - t) + c.
  const double inv_det = 1.0 / (ca * ca + sa * sa);
  const double ia = ca * inv_det, ib = sa * inv_det;

  augment_result out;
  out.img = image(img.h, img.w, img.c, img.range_lo, img.range_hi);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      double qx = x + 0.5 - cx - tx, qy = y + 0.5 - cy - ty;
      double sx = ia * qx + ib * qy + cx;
      double sy = -ib * qx + ia * qy + cy;
      for (int ch = 0; ch < img.c; ++ch) {
        double v = sample_bilinear(img, sx, sy, ch) * gain[ch];
        v = std::clamp(v, static_cast<double>(img.range_lo), static_cast<double>(img.range_hi));
        out.img.at(y, x, ch) = static_cast<float>(v);
      }
    }

  out.landmarks = lms;
  for (auto& p : out.landmarks.pts) {
    double dx = p.x - cx, dy = p.y - cy;
    double nx = ca * dx - sa * dy + cx + tx;
    double ny = sa * dx + ca * dy + cy + ty;
    if (nx < 0.0 || nx > img.w || ny < 0.0 || ny > img.h) out.clamped = true;
    p.x = std::clamp(nx, 0.0, static_cast<double>(img.w));
    p.y = std::clamp(ny, 0.0, static_cast<double>(img.h));
  }
  return out;
}

struct epoch_log {
  int epoch = 0;
  double lr = 0.0;
  loss_breakdown loss;
  double val_nle = 0.0;
};

template <typename T = float>
struct train_result {
  ccnn_params<T> params;  // after the last epoch
  ccnn_params<T> best;    // best validation NLE
  int best_epoch = -1;
  double best_val_nle = 0.0;
  std::vector<epoch_log> log;
  bool aborted = false;
  std::string abort_reason;
};

namespace detail {

template <typename T>
tensor<T> batch_to_tensor(const std::vector<image>& imgs) {
  const image& first = imgs.front();
  tensor<T> t(static_cast<int>(imgs.size()), first.h, first.w, first.c);
  for (size_t s = 0; s < imgs.size(); ++s)
    for (size_t i = 0; i < imgs[s].v.size(); ++i)
      t.v[s * imgs[s].v.size() + i] = static_cast<T>(imgs[s].v[i]);
  return t;
}

}  // namespace detail

// Eval-mode pass over a sample list; returns mean NLE of the final outputs.
template <typename T>
double evaluate_nle(ccnn_params<T>& params, const std::vector<sample>& samples,
                    const std::vector<int>& indices, const landmark_convention& conv,
                    norm_mode mode, int batch_size, std::vector<double>* per_image = nullptr) {
  const ccnn_config& cfg = params.config;
  double sum = 0.0;
  size_t done = 0;
  while (done < indices.size()) {
    size_t take = std::min<size_t>(batch_size, indices.size() - done);
    std::vector<image> imgs;
    std::vector<landmark_set> gts;
    for (size_t i = 0; i < take; ++i) {
      const sample& s = samples[indices[done + i]];
      image crop = crop_and_resize(s.img, s.box, cfg.input_side);
      landmark_set gt = transform_landmarks(s.landmarks, square_extend(s.box), cfg.input_side);
      imgs.push_back(normalize_pixels(crop));
      gts.push_back(std::move(gt));
    }
    tape<T> tp(false);
    auto input = tp.constant(detail::batch_to_tensor<T>(imgs));
    auto trace = ccnn_forward(tp, input, params);
    for (size_t i = 0; i < take; ++i) {
      double e = nle(trace.final_landmarks[i], gts[i], mode, conv);
      sum += e;
      if (per_image) per_image->push_back(e);
    }
    done += take;
  }
  return sum / static_cast<double>(indices.size());
}

// Shuffled-minibatch training with the epoch-indexed learning-rate schedule,
// per-sample seeded augmentation, disjoint validation split and
// best-validation checkpointing. Aborts (keeping the last state) if the loss
// stops being finite.
template <typename T = float>
train_result<T> train(const dataset& ds, const ccnn_config& model_cfg, const train_config& cfg) {
  model_cfg.validate();
  cfg.validate();
  require(ds.count() > 0, "train: empty dataset");

  train_result<T> result{ccnn_params<T>::init(model_cfg, cfg.seed),
                         ccnn_params<T>::init(model_cfg, cfg.seed)};

  // Validation split, disjoint from training batches.
  std::vector<int> order(ds.samples.size());
  std::iota(order.begin(), order.end(), 0);
  rng split_rng = rng::derive(cfg.seed, 0xA11CE);
  for (size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[split_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1)]);
  int val_count = static_cast<int>(std::lround(cfg.validation_fraction * ds.count()));
  val_count = std::min(val_count, ds.count() - 1);
  std::vector<int> val_idx(order.begin(), order.begin() + val_count);
  std::vector<int> train_idx(order.begin() + val_count, order.end());

  sgd<T> opt(static_cast<T>(lr_at(cfg.lr_schedule, 0)), static_cast<T>(cfg.momentum));
  std::vector<param_ref<T>> refs = result.params.params();

  // Crop once; augmentation operates on the cropped frame.
  std::vector<image> cropped(ds.samples.size());
  std::vector<landmark_set> cropped_lms(ds.samples.size());
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    const sample& s = ds.samples[i];
    cropped[i] = crop_and_resize(s.img, s.box, model_cfg.input_side);
    cropped_lms[i] = transform_landmarks(s.landmarks, square_extend(s.box), model_cfg.input_side);
  }

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = lr_at(cfg.lr_schedule, epoch);
    opt.set_lr(static_cast<T>(lr));

    rng shuffle_rng = rng::derive(cfg.seed, 0x5u + static_cast<std::uint64_t>(epoch) * 2654435761u);
    std::vector<int> idx = train_idx;
    for (size_t i = idx.size(); i > 1; --i)
      std::swap(idx[i - 1], idx[shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1)]);

    loss_breakdown epoch_loss;
    epoch_loss.heatmap_terms.assign(model_cfg.cascades, 0.0);
    epoch_loss.regression_terms.assign(model_cfg.cascades, 0.0);
    int batches = 0;

    for (size_t start = 0; start < idx.size(); start += cfg.batch_size) {
      size_t take = std::min<size_t>(cfg.batch_size, idx.size() - start);
      std::vector<image> imgs;
      std::vector<landmark_set> gts;
      imgs.reserve(take);
      gts.reserve(take);
      for (size_t i = 0; i < take; ++i) {
        int si = idx[start + i];
        rng ar = rng::derive(cfg.seed ^ 0xAEDBEEFull,
                             (static_cast<std::uint64_t>(epoch) << 32) ^
                                 static_cast<std::uint64_t>(si));
        augment_result a = augment(cropped[si], cropped_lms[si], cfg.augment, ar);
        imgs.push_back(normalize_pixels(a.img));
        gts.push_back(std::move(a.landmarks));
      }

      tape<T> tp(true, rng::derive(cfg.seed ^ 0xD409u,
                                   (static_cast<std::uint64_t>(epoch) << 32) ^ start)
                           .next_u64());
      auto input = tp.constant(detail::batch_to_tensor<T>(imgs));
      auto trace = ccnn_forward(tp, input, result.params);
      loss_breakdown bd;
      auto loss = total_loss(tp, trace, std::span<const landmark_set>(gts), model_cfg, &bd);

      if (!std::isfinite(bd.total)) {
        result.aborted = true;
        result.abort_reason = "non-finite training loss at epoch " + std::to_string(epoch);
        return result;
      }
      tp.backward(loss);

      std::vector<const tensor<T>*> grads;
      grads.reserve(refs.size());
      for (const auto& ref : refs) grads.push_back(tp.grad_for(*ref.value));
      try {
        opt.step(refs, grads);
      } catch (const error& e) {
        result.aborted = true;
        result.abort_reason = e.what();
        return result;
      }

      epoch_loss.total += bd.total;
      epoch_loss.base_heatmap += bd.base_heatmap;
      for (int k = 0; k < model_cfg.cascades; ++k) {
        epoch_loss.heatmap_terms[k] += bd.heatmap_terms[k];
        epoch_loss.regression_terms[k] += bd.regression_terms[k];
      }
      ++batches;
    }

    epoch_loss.total /= batches;
    epoch_loss.base_heatmap /= batches;
    for (auto& v : epoch_loss.heatmap_terms) v /= batches;
    for (auto& v : epoch_loss.regression_terms) v /= batches;

    double val = 0.0;
    if (!val_idx.empty())
      val = evaluate_nle(result.params, ds.samples, val_idx, ds.convention, cfg.val_mode,
                         cfg.batch_size);

    result.log.push_back({epoch, lr, epoch_loss, val});
    if (!val_idx.empty() && (result.best_epoch < 0 || val < result.best_val_nle)) {
      result.best_epoch = epoch;
      result.best_val_nle = val;
      result.best = result.params;
    }
    if (cfg.log_to_stderr) {
      std::string terms = "base " + std::to_string(epoch_loss.base_heatmap);
      for (int k = 0; k < model_cfg.cascades; ++k)
        terms += " hm" + std::to_string(k + 1) + " " + std::to_string(epoch_loss.heatmap_terms[k]);
      for (int k = 0; k < model_cfg.cascades; ++k)
        terms += " reg" + std::to_string(k + 1) + " " +
                 std::to_string(epoch_loss.regression_terms[k]);
      std::fprintf(stderr, "epoch %d lr %.3g loss %.6f [%s] val_nle %.5f\n", epoch, lr,
                   epoch_loss.total, terms.c_str(), val);
    }
  }
  if (result.best_epoch < 0) result.best = result.params;
  return result;
}

// epoch, lr, loss_total, loss_base, loss_heatmap[1..K], loss_reg[1..K], val_nle
inline void write_metrics_csv(const std::string& path, const std::vector<epoch_log>& log,
                              int cascades) {
  std::ofstream out(path);
  if (!out) throw error("cannot write metrics csv: " + path);
  out << "epoch,lr,loss_total,loss_base";
  for (int k = 1; k <= cascades; ++k) out << ",loss_heatmap_" << k;
  for (int k = 1; k <= cascades; ++k) out << ",loss_reg_" << k;
  out << ",val_nle\n";
  for (const auto& e : log) {
    out << e.epoch << "," << format_double(e.lr) << "," << format_double(e.loss.total) << ","
        << format_double(e.loss.base_heatmap);
    for (double v : e.loss.heatmap_terms) out << "," << format_double(v);
    for (double v : e.loss.regression_terms) out << "," << format_double(v);
    out << "," << format_double(e.val_nle) << "\n";
  }
}

}  // namespace ccnn
