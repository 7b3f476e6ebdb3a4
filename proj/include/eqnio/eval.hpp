#pragma once

#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "eqnio/core.hpp"

// Trajectory reconstruction and the MSE / ATE / RTE / AYE metric suite.
// Default convention is RMSE (squares inside the mean); the `literal`
// variants drop the inner square for comparison against sources that print
// the formulas without it.

namespace eqnio::eval {

/// Prefix sums: the reconstructed track starts at `start` and appends one
/// position per displacement.
inline std::vector<Vec3> cumulate(const std::vector<Vec3>& displacements,
                                  const Vec3& start = Vec3::Zero()) {
  std::vector<Vec3> out;
  out.reserve(displacements.size() + 1);
  out.push_back(start);
  for (const auto& d : displacements) out.push_back(out.back() + d);
  return out;
}

namespace detail {

inline void check_lengths(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw std::invalid_argument(std::string(what) + ": length mismatch");
  if (a == 0) throw std::invalid_argument(std::string(what) + ": empty input");
}

}  // namespace detail

/// Per-sample displacement error, averaged per axis (squared error / 3).
inline double mse(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt,
                  bool literal = false) {
  detail::check_lengths(pred.size(), gt.size(), "mse");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double n2 = (pred[i] - gt[i]).squaredNorm();
    acc += literal ? std::sqrt(n2) : n2 / 3.0;
  }
  return acc / double(pred.size());
}

/// Absolute translation error over the whole trajectory (RMSE by default).
inline double ate(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt,
                  bool literal = false) {
  detail::check_lengths(pred.size(), gt.size(), "ate");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double n = (pred[i] - gt[i]).norm();
    acc += literal ? n : n * n;
  }
  return std::sqrt(acc / double(pred.size()));
}

/// Relative translation error over windows of `window_samples` steps.
inline double rte(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt,
                  std::size_t window_samples, bool literal = false) {
  detail::check_lengths(pred.size(), gt.size(), "rte");
  if (window_samples == 0 || window_samples >= pred.size())
    throw std::invalid_argument("rte: window must be shorter than the sequence");
  double acc = 0.0;
  const std::size_t count = pred.size() - window_samples;
  for (std::size_t i = 0; i < count; ++i) {
    const Vec3 rel_gt = gt[i + window_samples] - gt[i];
    const Vec3 rel_pred = pred[i + window_samples] - pred[i];
    const double n = (rel_pred - rel_gt).norm();
    acc += literal ? n : n * n;
  }
  return std::sqrt(acc / double(count));
}

/// Absolute yaw error in degrees; inputs in radians, differences wrapped to
/// (-pi, pi].
inline double aye_deg(const std::vector<double>& pred_yaw,
                      const std::vector<double>& gt_yaw) {
  detail::check_lengths(pred_yaw.size(), gt_yaw.size(), "aye");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred_yaw.size(); ++i) {
    const double d = wrap_angle(pred_yaw[i] - gt_yaw[i]);
    acc += d * d;
  }
  return std::sqrt(acc / double(pred_yaw.size())) * 180.0 / kPi;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct SequenceMetrics {
  std::string name;
  double mse = 0.0;   // m^2
  double ate = 0.0;   // m
  double rte = 0.0;   // m
  double aye = 0.0;   // degrees
};

struct MetricsReport {
  std::vector<SequenceMetrics> rows;

  SequenceMetrics aggregate() const {
    SequenceMetrics agg;
    agg.name = "mean";
    if (rows.empty()) return agg;
    for (const auto& r : rows) {
      agg.mse += r.mse;
      agg.ate += r.ate;
      agg.rte += r.rte;
      agg.aye += r.aye;
    }
    const double n = double(rows.size());
    agg.mse /= n;
    agg.ate /= n;
    agg.rte /= n;
    agg.aye /= n;
    return agg;
  }
};

inline void write_metrics_csv(const std::string& path, const MetricsReport& report) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << "sequence,mse_m2,ate_m,rte_m,aye_deg\n";
  char buf[160];
  const auto row = [&](const SequenceMetrics& m) {
    std::snprintf(buf, sizeof(buf), "%s,%.9g,%.9g,%.9g,%.9g\n", m.name.c_str(), m.mse,
                  m.ate, m.rte, m.aye);
    f << buf;
  };
  for (const auto& m : report.rows) row(m);
  if (report.rows.size() > 1) row(report.aggregate());
}

inline std::string format_metrics_table(const MetricsReport& report) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-20s %12s %12s %12s %12s\n", "sequence", "MSE(m^2)",
                "ATE(m)", "RTE(m)", "AYE(deg)");
  os << buf;
  const auto row = [&](const SequenceMetrics& m) {
    std::snprintf(buf, sizeof(buf), "%-20s %12.6g %12.6g %12.6g %12.6g\n",
                  m.name.c_str(), m.mse, m.ate, m.rte, m.aye);
    os << buf;
  };
  for (const auto& m : report.rows) row(m);
  if (report.rows.size() > 1) row(report.aggregate());
  return os.str();
}

}  // namespace eqnio::eval
