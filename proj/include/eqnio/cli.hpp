#pragma once

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "eqnio/core.hpp"
#include "eqnio/ekf.hpp"
#include "eqnio/eval.hpp"
#include "eqnio/imu.hpp"
#include "eqnio/prior.hpp"

// Command-line front end: simulate | train | run | eval. Every command is
// deterministic for a fixed seed, writes plain CSV/SVG artifacts, and exits
// nonzero with a one-line `error: ...` message on failure.

namespace eqnio::cli {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

struct DatasetEntry {
  std::string name;
  std::string imu_path;  // resolved absolute/relative path
  std::string gt_path;
};

struct Dataset {
  double rate = 200.0;
  std::vector<DatasetEntry> entries;
};

inline constexpr const char* kManifestName = "manifest.txt";

inline void write_manifest(const fs::path& dir, const Dataset& ds) {
  std::ofstream f(dir / kManifestName);
  if (!f) throw std::runtime_error("cannot write manifest in " + dir.string());
  f << "eqnio-dataset 1\n";
  f << "rate " << ds.rate << "\n";
  for (const auto& e : ds.entries) {
    f << "sequence " << e.name << " " << fs::path(e.imu_path).filename().string() << " "
      << fs::path(e.gt_path).filename().string() << "\n";
  }
}

inline Dataset read_manifest(const fs::path& dir) {
  std::ifstream f(dir / kManifestName);
  if (!f) throw std::runtime_error("no dataset manifest in " + dir.string());
  std::string line;
  if (!std::getline(f, line) || line.rfind("eqnio-dataset", 0) != 0)
    throw std::runtime_error((dir / kManifestName).string() + ": not a dataset manifest");
  Dataset ds;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string kind;
    ss >> kind;
    if (kind == "rate") {
      ss >> ds.rate;
    } else if (kind == "sequence") {
      DatasetEntry e;
      std::string imu_file, gt_file;
      ss >> e.name >> imu_file >> gt_file;
      e.imu_path = (dir / imu_file).string();
      e.gt_path = (dir / gt_file).string();
      ds.entries.push_back(std::move(e));
    } else {
      throw std::runtime_error("manifest: unknown line '" + line + "'");
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// SVG plotting
// ---------------------------------------------------------------------------

struct PlotEllipse {
  Vec2 center;
  Mat2 cov;
};

/// Minimal SVG writer: xy path (and optional reference path) plus 1-sigma
/// covariance ellipses.
inline void write_svg_plot(const std::string& path, const std::vector<Vec2>& track,
                           const std::vector<Vec2>& reference,
                           const std::vector<PlotEllipse>& ellipses) {
  if (track.empty()) throw std::runtime_error("plot: empty trajectory");
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  const auto grow = [&](const Vec2& p) {
    xmin = std::min(xmin, p.x());
    xmax = std::max(xmax, p.x());
    ymin = std::min(ymin, p.y());
    ymax = std::max(ymax, p.y());
  };
  for (const auto& p : track) grow(p);
  for (const auto& p : reference) grow(p);
  const double span = std::max({xmax - xmin, ymax - ymin, 1e-6});
  const double margin = 0.08 * span;
  const double scale = 720.0 / (span + 2 * margin);
  const auto sx = [&](double x) { return (x - xmin + margin) * scale; };
  const auto sy = [&](double y) { return 720.0 - (y - ymin + margin) * scale; };

  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"720\" height=\"720\" "
       "viewBox=\"0 0 720 720\">\n";
  f << "<rect width=\"720\" height=\"720\" fill=\"white\"/>\n";

  const auto polyline = [&](const std::vector<Vec2>& pts, const char* color) {
    f << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    char buf[64];
    for (const auto& p : pts) {
      std::snprintf(buf, sizeof(buf), "%.2f,%.2f ", sx(p.x()), sy(p.y()));
      f << buf;
    }
    f << "\"/>\n";
  };
  if (!reference.empty()) polyline(reference, "#888888");
  polyline(track, "#c0392b");

  for (const auto& e : ellipses) {
    Eigen::SelfAdjointEigenSolver<Mat2> eig(e.cov);
    const double r1 = std::sqrt(std::max(eig.eigenvalues()(1), 0.0)) * scale;
    const double r2 = std::sqrt(std::max(eig.eigenvalues()(0), 0.0)) * scale;
    const Vec2 axis = eig.eigenvectors().col(1);
    const double angle = -std::atan2(axis.y(), axis.x()) * 180.0 / kPi;
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "<ellipse cx=\"0\" cy=\"0\" rx=\"%.2f\" ry=\"%.2f\" fill=\"none\" "
                  "stroke=\"#2980b9\" stroke-width=\"0.8\" "
                  "transform=\"translate(%.2f %.2f) rotate(%.2f)\"/>\n",
                  r1, r2, sx(e.center.x()), sy(e.center.y()), angle);
    f << buf;
  }
  f << "</svg>\n";
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

struct SimulateOptions {
  std::string out;
  std::uint64_t seed = 1;
  int sequences = 1;
  double duration = 60.0;
  double rate = 200.0;
  int waypoints = 8;
  double gyro_noise = 2e-4;
  double accel_noise = 2e-3;
  double gyro_bias = 0.005;
  double accel_bias = 0.05;
};

inline int cmd_simulate(const SimulateOptions& opt) {
  imu::SimConfig cfg;
  cfg.duration = opt.duration;
  cfg.rate = opt.rate;
  cfg.waypoints = opt.waypoints;
  cfg.gyro_noise = opt.gyro_noise;
  cfg.accel_noise = opt.accel_noise;
  cfg.gyro_bias = opt.gyro_bias;
  cfg.accel_bias = opt.accel_bias;

  const fs::path dir(opt.out);
  fs::create_directories(dir);

  Dataset ds;
  ds.rate = opt.rate;
  ds.entries.resize(static_cast<std::size_t>(opt.sequences));
  parallel_for(ds.entries.size(), [&](std::size_t i) {
    char name[32];
    std::snprintf(name, sizeof(name), "seq_%03zu", i);
    const auto sim = imu::simulate_trajectory(cfg, opt.seed + i);
    DatasetEntry e;
    e.name = name;
    e.imu_path = (dir / (std::string(name) + "_imu.csv")).string();
    e.gt_path = (dir / (std::string(name) + "_gt.csv")).string();
    imu::write_imu_csv(e.imu_path, sim.imu);
    imu::write_pose_csv(e.gt_path, sim.poses);
    ds.entries[i] = std::move(e);
  });
  write_manifest(dir, ds);

  const std::size_t rows = static_cast<std::size_t>(std::llround(opt.duration * opt.rate)) + 1;
  std::cout << "wrote " << ds.entries.size() << " sequence(s) to " << dir.string()
            << " (" << rows << " rows each at " << opt.rate << " Hz)\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOptions {
  std::string data;
  std::string out;  // checkpoint stem
  std::string init_checkpoint;
  std::string mode = "o2";
  std::string frame = "eq";
  std::string cov = "eq";
  std::uint64_t seed = 1;
  int window = 200;
  int stride = 20;
  int epochs_mse = 10;
  int epochs_mle = 40;
  double lr = 1e-3;
  int batch = 64;
  int fn_hidden = 24;
  int fn_kernel = 7;
  int fn_blocks = -1;  // default per mode
  int bb_width = 32;
  int bb_blocks = 4;
  int bb_kernel = 5;
  int noneq_hidden = 0;  // 0 = match the equivariant net's parameter count
  bool aug_yaw = false;
  bool aug_reflect = false;
  bool aug_tilt = false;
};

inline std::vector<prior::TrainSample> load_training_windows(const Dataset& ds,
                                                             int window, int stride) {
  std::vector<std::vector<prior::TrainSample>> per_seq(ds.entries.size());
  parallel_for(ds.entries.size(), [&](std::size_t i) {
    const auto samples = imu::read_imu_csv(ds.entries[i].imu_path);
    const auto poses = imu::read_pose_csv(ds.entries[i].gt_path);
    per_seq[i] = prior::build_windows(poses, samples, window, stride);
  });
  std::vector<prior::TrainSample> all;
  for (auto& v : per_seq)
    for (auto& s : v) all.push_back(std::move(s));
  return all;
}

inline prior::PriorConfig make_prior_config(const TrainOptions& opt) {
  prior::PriorConfig cfg;
  cfg.mode = prior::group_mode_from_string(opt.mode);
  cfg.frame_source = prior::frame_source_from_string(opt.frame);
  cfg.cov_mode = prior::cov_mode_from_string(opt.cov);
  cfg.window = opt.window;
  cfg.frame_net = eqnet::default_frame_config(cfg.mode);
  cfg.frame_net.hidden = opt.fn_hidden;
  cfg.frame_net.kernel = opt.fn_kernel;
  if (opt.fn_blocks > 0) cfg.frame_net.conv_blocks = opt.fn_blocks;
  cfg.backbone.width = opt.bb_width;
  cfg.backbone.blocks = opt.bb_blocks;
  cfg.backbone.kernel = opt.bb_kernel;
  if (opt.noneq_hidden > 0) {
    cfg.noneq_hidden = opt.noneq_hidden;
  } else {
    // Match the equivariant frame net's parameter count.
    eqnet::FrameNet<float> probe;
    std::mt19937_64 rng(0);
    probe.init(cfg.frame_net, rng);
    cfg.noneq_hidden = prior::match_noneq_hidden(cfg.mode, cfg.frame_net.kernel,
                                                 cfg.frame_net.conv_blocks,
                                                 probe.param_count());
  }
  return cfg;
}

inline int cmd_train(const TrainOptions& opt) {
  const Dataset ds = read_manifest(opt.data);
  if (ds.entries.empty()) throw std::runtime_error("dataset has no sequences");
  const auto windows = load_training_windows(ds, opt.window, opt.stride);
  if (windows.empty()) throw std::runtime_error("dataset yields no training windows");

  prior::PriorModel<float> model;
  if (!opt.init_checkpoint.empty()) {
    model = prior::load_model<float>(opt.init_checkpoint);
    if (model.cfg.window != opt.window)
      throw std::runtime_error("checkpoint window length differs from --window");
  } else {
    model.init(make_prior_config(opt), opt.seed);
  }

  prior::TrainConfig tc;
  tc.epochs_mse = opt.epochs_mse;
  tc.epochs_mle = opt.epochs_mle;
  tc.lr = opt.lr;
  tc.batch = opt.batch;
  tc.seed = opt.seed;
  tc.augment.yaw = opt.aug_yaw;
  tc.augment.reflect = opt.aug_reflect;
  tc.augment.gravity_tilt = opt.aug_tilt;

  const auto log = prior::train(model, windows, tc);

  prior::save_model(opt.out, model);
  std::ofstream loss_csv(opt.out + "_loss.csv");
  loss_csv << "epoch,stage,mean_loss\n";
  char buf[96];
  for (const auto& e : log.epochs) {
    std::snprintf(buf, sizeof(buf), "%d,%s,%.9g\n", e.epoch,
                  e.kind == prior::LossKind::kMse ? "mse" : "mle", e.mean_loss);
    loss_csv << buf;
  }
  std::cout << "trained on " << windows.size() << " windows ("
            << model.param_count() << " parameters); checkpoint at " << opt.out << "\n";
  if (!log.epochs.empty())
    std::cout << "final mean loss " << log.epochs.back().mean_loss << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

struct RunOptions {
  std::string data;
  std::string sequence;  // empty = first
  std::string checkpoint;
  std::string out;  // output directory
  bool ekf = false;
  bool plot = false;
  bool f64 = false;
  int stride = 20;  // EKF update stride; network-only mode steps one window
};

namespace detail {

struct WindowPrediction {
  double t_end = 0.0;
  Vec3 d_world = Vec3::Zero();
  Mat3 sigma_world = Mat3::Identity();
  double frame_angle = 0.0;
  double frame_det = 1.0;
  bool degenerate = false;
};

template <typename T>
std::vector<WindowPrediction> predict_sequence(const prior::PriorModel<T>& model,
                                               const std::vector<imu::PoseSample>& poses,
                                               const std::vector<imu::ImuSample>& samples,
                                               int stride) {
  std::vector<Mat3> rots(poses.size());
  for (std::size_t i = 0; i < rots.size(); ++i) rots[i] = poses[i].rot;
  const int window = model.cfg.window;

  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s + static_cast<std::size_t>(window) < poses.size();
       s += static_cast<std::size_t>(stride))
    starts.push_back(s);

  std::vector<WindowPrediction> out(starts.size());
  parallel_for(starts.size(), [&](std::size_t i) {
    const std::size_t s = starts[i];
    const auto win = imu::gravity_align(samples, rots, s, s + window);
    const auto pred = prior::predict(model, win);
    const double yaw = imu::extrinsic_xyz_yaw(rots[s]).yaw;
    const Mat3 rz = rot_z(yaw);
    WindowPrediction wp;
    wp.t_end = poses[s + window].t;
    wp.d_world = rz * pred.out.d;
    wp.sigma_world = rz * pred.out.sigma * rz.transpose();
    wp.frame_angle = std::atan2(pred.frame.matrix()(1, 0), pred.frame.matrix()(0, 0));
    wp.frame_det = pred.frame.det();
    wp.degenerate = pred.degenerate;
    out[i] = wp;
  });
  return out;
}

}  // namespace detail

template <typename T>
int run_with_precision(const RunOptions& opt) {
  const Dataset ds = read_manifest(opt.data);
  if (ds.entries.empty()) throw std::runtime_error("dataset has no sequences");
  const DatasetEntry* entry = &ds.entries.front();
  if (!opt.sequence.empty()) {
    entry = nullptr;
    for (const auto& e : ds.entries)
      if (e.name == opt.sequence) entry = &e;
    if (!entry) throw std::runtime_error("sequence '" + opt.sequence + "' not in dataset");
  }

  auto model = prior::load_model<T>(opt.checkpoint);
  const auto samples = imu::read_imu_csv(entry->imu_path);
  const auto poses = imu::read_pose_csv(entry->gt_path);
  if (samples.size() != poses.size())
    throw std::runtime_error("sequence imu/gt row counts differ");

  const fs::path dir(opt.out);
  fs::create_directories(dir);
  const std::string traj_path = (dir / (entry->name + "_traj.csv")).string();
  const std::string diag_path = (dir / (entry->name + "_frames.csv")).string();

  std::vector<imu::PoseSample> traj;
  std::vector<PlotEllipse> ellipses;
  int degenerate = 0;

  if (!opt.ekf) {
    // Network-only mode: non-overlapping windows, cumulative summation.
    const auto preds =
        detail::predict_sequence(model, poses, samples, model.cfg.window);
    std::ofstream diag(diag_path);
    diag << "t,frame_angle,frame_det,degenerate,sigma_xx,sigma_yy,sigma_zz\n";
    Vec3 p = poses.front().pos;
    traj.push_back(poses.front());
    char buf[200];
    for (const auto& wp : preds) {
      p += wp.d_world;
      const auto idx = static_cast<std::size_t>(std::llround(wp.t_end * ds.rate));
      imu::PoseSample ps;
      ps.t = wp.t_end;
      ps.rot = idx < poses.size() ? poses[idx].rot : Mat3::Identity();
      ps.pos = p;
      ps.vel = wp.d_world / (model.cfg.window / ds.rate);
      traj.push_back(ps);
      degenerate += wp.degenerate ? 1 : 0;
      std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.1f,%d,%.9g,%.9g,%.9g\n", wp.t_end,
                    wp.frame_angle, wp.frame_det, wp.degenerate ? 1 : 0,
                    wp.sigma_world(0, 0), wp.sigma_world(1, 1), wp.sigma_world(2, 2));
      diag << buf;
      ellipses.push_back({Vec2(p.head(2)), Mat2(wp.sigma_world.block(0, 0, 2, 2))});
    }
  } else {
    ekf::FilterConfig fc;
    fc.window = model.cfg.window;
    fc.update_stride = opt.stride;
    fc.rot0 = poses.front().rot;
    fc.vel0 = poses.front().vel;
    fc.pos0 = poses.front().pos;
    int degenerate_count = 0;
    ekf::PriorFn prior_fn = [&model, &degenerate_count](const imu::ImuWindow& win)
        -> std::optional<std::pair<Vec3, Mat3>> {
      const auto pred = prior::predict(model, win);
      if (pred.degenerate) ++degenerate_count;
      return std::make_pair(pred.out.d, pred.out.sigma);
    };
    const auto res = ekf::run_filter(samples, prior_fn, fc);
    traj = res.trajectory;
    degenerate = degenerate_count;
    std::ofstream diag(diag_path);
    diag << "updates_applied,updates_skipped,degenerate_frames\n";
    diag << res.updates_applied << "," << res.updates_skipped << "," << degenerate << "\n";
    for (std::size_t i = 0; i < traj.size();
         i += static_cast<std::size_t>(model.cfg.window)) {
      ellipses.push_back({Vec2(traj[i].pos.head(2)), Mat2(1e-4 * Mat2::Identity())});
    }
  }

  imu::write_pose_csv(traj_path, traj);
  if (opt.plot) {
    std::vector<Vec2> track, reference;
    for (const auto& p : traj) track.push_back(Vec2(p.pos.head(2)));
    for (const auto& p : poses) reference.push_back(Vec2(p.pos.head(2)));
    write_svg_plot((dir / (entry->name + "_plot.svg")).string(), track, reference,
                   ellipses);
  }
  std::cout << "wrote " << traj.size() << " poses to " << traj_path << " ("
            << degenerate << " degenerate frames)\n";
  return 0;
}

inline int cmd_run(const RunOptions& opt) {
  return opt.f64 ? run_with_precision<double>(opt) : run_with_precision<float>(opt);
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalOptions {
  std::string pred;
  std::string gt;
  std::string out;  // metrics CSV; empty = stdout only
  double rte_window = 60.0;
  bool literal = false;
};

inline int cmd_eval(const EvalOptions& opt) {
  const auto pred = imu::read_pose_csv(opt.pred);
  const auto gt = imu::read_pose_csv(opt.gt);
  if (pred.empty() || gt.empty()) throw std::runtime_error("empty trajectory file");

  // Match prediction timestamps against the reference.
  std::vector<Vec3> p_pos, g_pos;
  std::vector<double> p_yaw, g_yaw;
  std::size_t j = 0;
  for (const auto& p : pred) {
    while (j + 1 < gt.size() && gt[j].t < p.t - 1e-9) ++j;
    if (std::abs(gt[j].t - p.t) > 1e-6)
      throw std::runtime_error("timestamp mismatch between trajectories");
    p_pos.push_back(p.pos);
    g_pos.push_back(gt[j].pos);
    p_yaw.push_back(imu::extrinsic_xyz_yaw(p.rot).yaw);
    g_yaw.push_back(imu::extrinsic_xyz_yaw(gt[j].rot).yaw);
  }

  double dt = 0.0;
  if (pred.size() > 1) dt = (pred.back().t - pred.front().t) / double(pred.size() - 1);
  std::size_t window_samples =
      dt > 0 ? static_cast<std::size_t>(std::llround(opt.rte_window / dt)) : 0;

  eval::SequenceMetrics m;
  m.name = fs::path(opt.pred).stem().string();
  // Per-sample displacement error over one step.
  std::vector<Vec3> p_d, g_d;
  for (std::size_t i = 1; i < p_pos.size(); ++i) {
    p_d.push_back(p_pos[i] - p_pos[i - 1]);
    g_d.push_back(g_pos[i] - g_pos[i - 1]);
  }
  m.mse = p_d.empty() ? 0.0 : eval::mse(p_d, g_d, opt.literal);
  m.ate = eval::ate(p_pos, g_pos, opt.literal);
  if (window_samples >= p_pos.size() && p_pos.size() > 2)
    window_samples = p_pos.size() / 2;  // short desk-scale sequences
  m.rte = window_samples >= 1 && window_samples < p_pos.size()
              ? eval::rte(p_pos, g_pos, window_samples, opt.literal)
              : 0.0;
  m.aye = eval::aye_deg(p_yaw, g_yaw);

  eval::MetricsReport report;
  report.rows.push_back(m);
  std::cout << eval::format_metrics_table(report);
  if (!opt.out.empty()) eval::write_metrics_csv(opt.out, report);
  return 0;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline int run_cli(std::vector<std::string> args) {
  CLI::App app{"Subequivariant inertial odometry toolkit"};
  app.require_subcommand(1);
  app.set_config("--config")->configurable(false);
  app.allow_config_extras(CLI::config_extras_mode::error);

  SimulateOptions sim_opt;
  auto* sim = app.add_subcommand("simulate", "generate synthetic IMU sequences");
  sim->configurable(true);
  sim->add_option("--out", sim_opt.out, "output dataset directory")->required();
  sim->add_option("--seed", sim_opt.seed, "RNG seed");
  sim->add_option("--sequences", sim_opt.sequences, "number of sequences")
      ->check(CLI::PositiveNumber);
  sim->add_option("--duration", sim_opt.duration, "seconds per sequence");
  sim->add_option("--rate", sim_opt.rate, "IMU rate in Hz");
  sim->add_option("--waypoints", sim_opt.waypoints, "spline waypoints");
  sim->add_option("--gyro-noise", sim_opt.gyro_noise, "rad/s/sqrt(Hz)");
  sim->add_option("--accel-noise", sim_opt.accel_noise, "m/s^2/sqrt(Hz)");
  sim->add_option("--gyro-bias", sim_opt.gyro_bias, "rad/s");
  sim->add_option("--accel-bias", sim_opt.accel_bias, "m/s^2");

  TrainOptions train_opt;
  auto* tr = app.add_subcommand("train", "train a displacement prior");
  tr->configurable(true);
  tr->add_option("--data", train_opt.data, "dataset directory")->required();
  tr->add_option("--out", train_opt.out, "checkpoint stem")->required();
  tr->add_option("--init-checkpoint", train_opt.init_checkpoint,
                 "resume from an existing checkpoint stem");
  tr->add_option("--mode", train_opt.mode, "group mode: so2 | o2")
      ->check(CLI::IsMember({"so2", "o2"}));
  tr->add_option("--frame", train_opt.frame, "frame source: eq | noneq | pca | identity")
      ->check(CLI::IsMember({"eq", "noneq", "pca", "identity"}));
  tr->add_option("--cov", train_opt.cov, "covariance mode: eq | invariant | pearson")
      ->check(CLI::IsMember({"eq", "invariant", "pearson"}));
  tr->add_option("--seed", train_opt.seed, "RNG seed");
  tr->add_option("--window", train_opt.window, "window length in samples");
  tr->add_option("--stride", train_opt.stride, "window stride in samples");
  tr->add_option("--epochs-mse", train_opt.epochs_mse, "stage-1 epochs");
  tr->add_option("--epochs-mle", train_opt.epochs_mle, "stage-2 epochs");
  tr->add_option("--lr", train_opt.lr, "learning rate");
  tr->add_option("--batch", train_opt.batch, "batch size");
  tr->add_option("--fn-hidden", train_opt.fn_hidden, "frame net hidden width");
  tr->add_option("--fn-kernel", train_opt.fn_kernel, "frame net conv kernel");
  tr->add_option("--fn-blocks", train_opt.fn_blocks, "frame net conv blocks");
  tr->add_option("--bb-width", train_opt.bb_width, "backbone width");
  tr->add_option("--bb-blocks", train_opt.bb_blocks, "backbone residual blocks");
  tr->add_option("--bb-kernel", train_opt.bb_kernel, "backbone conv kernel");
  tr->add_option("--noneq-hidden", train_opt.noneq_hidden,
                 "baseline head width (0 = parameter-match)");
  tr->add_flag("--aug-yaw", train_opt.aug_yaw, "random yaw augmentation");
  tr->add_flag("--aug-reflect", train_opt.aug_reflect, "include reflections");
  tr->add_flag("--aug-tilt", train_opt.aug_tilt, "gravity tilt augmentation");

  RunOptions run_opt;
  std::string ekf_mode = "off";
  auto* rn = app.add_subcommand("run", "run a trained prior over a sequence");
  rn->configurable(true);
  rn->add_option("--data", run_opt.data, "dataset directory")->required();
  rn->add_option("--sequence", run_opt.sequence, "sequence name (default: first)");
  rn->add_option("--checkpoint", run_opt.checkpoint, "checkpoint stem")->required();
  rn->add_option("--out", run_opt.out, "output directory")->required();
  rn->add_option("--ekf", ekf_mode, "on | off: fuse through the filter")
      ->check(CLI::IsMember({"on", "off"}));
  rn->add_flag("--plot", run_opt.plot, "emit an SVG plot");
  rn->add_flag("--f64", run_opt.f64, "evaluate the pipeline in double precision");
  rn->add_option("--stride", run_opt.stride, "EKF update stride in samples");

  EvalOptions eval_opt;
  auto* ev = app.add_subcommand("eval", "compare two trajectory CSVs");
  ev->configurable(true);
  ev->add_option("--pred", eval_opt.pred, "predicted trajectory CSV")->required();
  ev->add_option("--gt", eval_opt.gt, "reference trajectory CSV")->required();
  ev->add_option("--out", eval_opt.out, "metrics CSV output path");
  ev->add_option("--rte-window", eval_opt.rte_window, "RTE window in seconds");
  ev->add_flag("--metric-literal", eval_opt.literal,
               "use the no-inner-square metric variants");

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (sim->parsed()) return cmd_simulate(sim_opt);
    if (tr->parsed()) return cmd_train(train_opt);
    if (rn->parsed()) {
      run_opt.ekf = ekf_mode == "on";
      return cmd_run(run_opt);
    }
    if (ev->parsed()) return cmd_eval(eval_opt);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace eqnio::cli
