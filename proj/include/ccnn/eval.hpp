#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "ccnn/geometry.hpp"

#include <json.hpp>

namespace ccnn {

// Normalized localization error: mean point-to-point distance over the
// normalization distance d of the ground truth.
inline double nle(const landmark_set& est, const landmark_set& gt, norm_mode mode,
                  const landmark_convention& conv) {
  require(est.count() == gt.count(), "nle: landmark counts differ");
  double d = normalization_distance(gt, mode, conv);
  if (!(d > 0.0)) throw error("nle: degenerate annotation, normalization distance is zero");
  double sum = 0.0;
  for (int i = 0; i < gt.count(); ++i) sum += distance(est.pts[i], gt.pts[i]);
  return sum / (gt.count() * d);
}

inline double nle(const landmark_set& est, const landmark_set& gt, norm_mode mode) {
  require(est.count() == gt.count(), "nle: landmark counts differ");
  double d = normalization_distance(gt, mode);
  if (!(d > 0.0)) throw error("nle: degenerate annotation, normalization distance is zero");
  double sum = 0.0;
  for (int i = 0; i < gt.count(); ++i) sum += distance(est.pts[i], gt.pts[i]);
  return sum / (gt.count() * d);
}

// Empirical CDF as its jump points: (error value, cumulative fraction), right
// continuous. The curve starts implicitly at fraction 0 below the first error.
inline std::vector<std::pair<double, double>> ced(const std::vector<double>& per_image_nle) {
  require(!per_image_nle.empty(), "ced: empty error list");
  std::vector<double> sorted = per_image_nle;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::pair<double, double>> curve;
  const double n = static_cast<double>(sorted.size());
  for (size_t i = 0; i < sorted.size(); ++i) {
    double frac = static_cast<double>(i + 1) / n;
    if (!curve.empty() && curve.back().first == sorted[i])
      curve.back().second = frac;
    else
      curve.push_back({sorted[i], frac});
  }
  return curve;
}

inline double ced_at(const std::vector<std::pair<double, double>>& curve, double e) {
  double frac = 0.0;
  for (const auto& [err, f] : curve) {
    if (err <= e) frac = f;
    else break;
  }
  return frac;
}

// 100/alpha * integral of the step CDF over [0, alpha], integrated exactly.
inline double auc_alpha(const std::vector<double>& per_image_nle, double alpha = 0.08) {
  require(alpha > 0.0, "auc_alpha: alpha must be positive");
  require(!per_image_nle.empty(), "auc_alpha: empty error list");
  std::vector<double> sorted = per_image_nle;
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  double integral = 0.0;
  double prev_e = 0.0;
  size_t i = 0;
  while (i < sorted.size() && sorted[i] <= 0.0) ++i;  // CDF already covers them at e = 0
  double frac = static_cast<double>(i) / n;
  for (; i < sorted.size() && sorted[i] < alpha; ++i) {
    integral += frac * (sorted[i] - prev_e);
    prev_e = sorted[i];
    frac = static_cast<double>(i + 1) / n;
  }
  integral += frac * (alpha - prev_e);
  return 100.0 * integral / alpha;
}

// Percentage of images with error strictly greater than the threshold.
inline double failure_rate(const std::vector<double>& per_image_nle, double threshold = 0.08) {
  require(threshold > 0.0, "failure_rate: threshold must be positive");
  require(!per_image_nle.empty(), "failure_rate: empty error list");
  size_t failures = 0;
  for (double e : per_image_nle)
    if (e > threshold) ++failures;
  return 100.0 * static_cast<double>(failures) / static_cast<double>(per_image_nle.size());
}

struct eval_report {
  std::vector<double> per_image_nle;
  norm_mode mode = norm_mode::inter_ocular;
  double alpha = 0.08;
  double failure_threshold = 0.08;
  double mean_nle = 0.0;
  double auc = 0.0;           // percent
  double failures = 0.0;      // percent
  std::vector<std::pair<double, double>> curve;
};

inline eval_report make_report(std::vector<double> per_image_nle, norm_mode mode,
                               double alpha = 0.08, double failure_threshold = 0.08) {
  eval_report r;
  r.per_image_nle = std::move(per_image_nle);
  r.mode = mode;
  r.alpha = alpha;
  r.failure_threshold = failure_threshold;
  double sum = 0.0;
  for (double e : r.per_image_nle) sum += e;
  r.mean_nle = sum / static_cast<double>(r.per_image_nle.size());
  r.auc = auc_alpha(r.per_image_nle, alpha);
  r.failures = failure_rate(r.per_image_nle, failure_threshold);
  r.curve = ced(r.per_image_nle);
  return r;
}

inline nlohmann::json report_to_json(const eval_report& r) {
  nlohmann::json j;
  j["mode"] = to_string(r.mode);
  j["alpha"] = r.alpha;
  j["failure_threshold"] = r.failure_threshold;
  j["mean_nle"] = r.mean_nle;
  j["mean_nle_percent"] = r.mean_nle * 100.0;
  j["auc_alpha_percent"] = r.auc;
  j["failure_rate_percent"] = r.failures;
  j["count"] = r.per_image_nle.size();
  j["per_image_nle"] = r.per_image_nle;
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& [e, f] : r.curve) curve.push_back({e, f});
  j["ced"] = curve;
  return j;
}

inline void write_report_json(const std::string& path, const eval_report& r) {
  std::ofstream out(path);
  if (!out) throw error("cannot write report: " + path);
  out << report_to_json(r).dump(2) << "\n";
}

inline void write_ced_csv(const std::string& path, const eval_report& r) {
  std::ofstream out(path);
  if (!out) throw error("cannot write CED csv: " + path);
  out << "error,fraction\n";
  for (const auto& [e, f] : r.curve) out << format_double(e) << "," << format_double(f) << "\n";
}

// Published full-scale reference results, kept for side-by-side documentation.
// Desk-scale runs are not expected to approach them.
struct reference_results {
  struct nle_row {
    const char* method;
    double common, challenging, full;  // percent; negative = not reported
  };
  struct auc_row {
    const char* test_set;
    double auc, failures;  // percent
  };
  static std::vector<nle_row> nle_inter_pupil() {
    return {{"CCNN (full scale)", 4.55, 5.67, 4.85}};
  }
  static std::vector<nle_row> nle_inter_ocular() {
    return {{"CCNN (full scale)", 3.23, 3.99, 3.44}};
  }
  static std::vector<auc_row> auc_inter_ocular() {
    return {{"300-W public", 57.88, 0.58}, {"300-W private", 58.67, 0.83}};
  }
};

// Text table in the reporting layout used for the full-scale results, with
// this run appended for comparison.
inline std::string render_results_table(const eval_report& r, const std::string& run_label) {
  char buf[160];
  std::string out;
  out += "NLE (%), " + to_string(r.mode) + " normalization\n";
  out += "  method                      common   challenging   full/set\n";
  auto rows = r.mode == norm_mode::inter_pupil ? reference_results::nle_inter_pupil()
                                               : reference_results::nle_inter_ocular();
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof(buf), "  %-26s  %6.2f   %11.2f   %8.2f   (published reference)\n",
                  row.method, row.common, row.challenging, row.full);
    out += buf;
  }
  std::snprintf(buf, sizeof(buf), "  %-26s  %6s   %11s   %8.2f   (this run)\n",
                run_label.c_str(), "-", "-", r.mean_nle * 100.0);
  out += buf;
  out += "\nAUC_" + format_double(r.alpha) + " and failure rate (%)\n";
  out += "  test set                    AUC      failure\n";
  for (const auto& row : reference_results::auc_inter_ocular()) {
    std::snprintf(buf, sizeof(buf), "  %-26s  %6.2f   %7.2f   (published reference)\n",
                  row.test_set, row.auc, row.failures);
    out += buf;
  }
  std::snprintf(buf, sizeof(buf), "  %-26s  %6.2f   %7.2f   (this run)\n", run_label.c_str(),
                r.auc, r.failures);
  out += buf;
  return out;
}

}  // namespace ccnn
