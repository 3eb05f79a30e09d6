#include "vinkit/eval.hpp"
#include "vinkit/manifold.hpp"
#include "vinkit/pipeline.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

using namespace vinkit;

namespace {

// Exit codes, one per failure class, so scripts can tell a bad config from a
// broken file from an estimator that fell apart.
constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitEstimation = 4;
constexpr int kExitContract = 5;

int log_level() {
  static const int level = [] {
    const char* env = std::getenv("VINKIT_LOG");
    if (env == nullptr) return 1;
    const std::string v(env);
    if (v == "quiet") return 0;
    if (v == "debug") return 2;
    return 1;
  }();
  return level;
}

void log_info(const std::string& msg) {
  if (log_level() >= 1) std::fprintf(stderr, "%s\n", msg.c_str());
}

void log_debug(const std::string& msg) {
  if (log_level() >= 2) std::fprintf(stderr, "%s\n", msg.c_str());
}

std::string join(const std::string& dir, const char* name) {
  return (std::filesystem::path(dir) / name).string();
}

// Everything a run needs, resolved from one config file. The scenario seed is
// the only randomness in the pipeline, so simulate and run share this type.
struct RunConfig {
  Scenario scenario;
  std::string estimator;  // "filter" or "smoother"; may come from the flag
  Integrator integrator = Integrator::kRk4;
  NoiseParams noise;  // estimator-side model, scenario noise plus overrides
  int window_keyframes = kDefaultKeyframeWindow;
  int window_recent = kDefaultRecentWindow;
  bool has_window = false;
  int max_landmarks = 0;  // 0 keeps the estimator default
  std::string output;
};

double want_number(const nlohmann::json& j, const std::string& key) {
  if (!j.is_number()) throw ConfigError("key '" + key + "' must be a number");
  return j.get<double>();
}

int want_positive_int(const nlohmann::json& j, const std::string& key) {
  if (!j.is_number_integer() || j.get<std::int64_t>() <= 0) {
    throw ConfigError("key '" + key + "' must be a positive integer");
  }
  return static_cast<int>(j.get<std::int64_t>());
}

RunConfig parse_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("invalid JSON in " + path + ": " + std::string(e.what()));
  }
  if (!j.is_object()) throw ConfigError("run config must be an object");

  RunConfig cfg;
  bool scenario_seen = false;
  std::optional<std::uint64_t> seed;
  nlohmann::json noise_patch = nlohmann::json::object();
  for (const auto& [key, value] : j.items()) {
    if (key == "scenario") {
      if (!value.is_string()) {
        throw ConfigError("key 'scenario' must be a path string");
      }
      const auto scenario_path =
          std::filesystem::path(path).parent_path() / value.get<std::string>();
      cfg.scenario = read_scenario_json(scenario_path.string());
      scenario_seen = true;
    } else if (key == "estimator") {
      if (!value.is_string()) throw ConfigError("key 'estimator' must be a string");
      cfg.estimator = value.get<std::string>();
      if (cfg.estimator != "filter" && cfg.estimator != "smoother") {
        throw ConfigError("key 'estimator' must be 'filter' or 'smoother', got '" +
                          cfg.estimator + "'");
      }
    } else if (key == "integrator") {
      if (!value.is_string()) throw ConfigError("key 'integrator' must be a string");
      try {
        cfg.integrator = integrator_from_string(value.get<std::string>());
      } catch (const ContractViolation&) {
        throw ConfigError("key 'integrator' has unknown value '" +
                          value.get<std::string>() + "'");
      }
    } else if (key == "window") {
      if (!value.is_object()) throw ConfigError("key 'window' must be an object");
      for (const auto& [wk, wv] : value.items()) {
        if (wk == "keyframes") {
          cfg.window_keyframes = want_positive_int(wv, "window.keyframes");
          if (cfg.window_keyframes < 2) {
            throw ConfigError("key 'window.keyframes' must be at least 2");
          }
        } else if (wk == "recent") {
          cfg.window_recent = want_positive_int(wv, "window.recent");
        } else {
          throw ConfigError("unknown key '" + wk + "' in window config");
        }
      }
      cfg.has_window = true;
    } else if (key == "max_landmarks") {
      cfg.max_landmarks = want_positive_int(value, "max_landmarks");
    } else if (key == "noise") {
      if (!value.is_object()) throw ConfigError("key 'noise' must be an object");
      noise_patch = value;
    } else if (key == "output") {
      if (!value.is_string()) throw ConfigError("key 'output' must be a string");
      cfg.output = value.get<std::string>();
    } else if (key == "seed") {
      if (!value.is_number_unsigned()) {
        throw ConfigError("key 'seed' must be a non-negative integer");
      }
      seed = value.get<std::uint64_t>();
    } else {
      throw ConfigError("unknown key '" + key + "' in run config");
    }
  }
  if (!scenario_seen) throw ConfigError("key 'scenario' is required in run config");
  if (cfg.estimator == "filter" && cfg.has_window) {
    throw ConfigError("key 'window' applies to the smoother estimator only");
  }
  if (seed.has_value()) cfg.scenario.seed = *seed;

  cfg.noise = cfg.scenario.noise;
  for (const auto& [nk, nv] : noise_patch.items()) {
    if (nk == "sigma_g") {
      cfg.noise.sigma_g = want_number(nv, "noise.sigma_g");
    } else if (nk == "sigma_a") {
      cfg.noise.sigma_a = want_number(nv, "noise.sigma_a");
    } else if (nk == "sigma_bg") {
      cfg.noise.sigma_bg = want_number(nv, "noise.sigma_bg");
    } else if (nk == "sigma_ba") {
      cfg.noise.sigma_ba = want_number(nv, "noise.sigma_ba");
    } else if (nk == "gravity") {
      cfg.noise.gravity = want_number(nv, "noise.gravity");
    } else {
      throw ConfigError("unknown key '" + nk + "' in noise config");
    }
  }
  return cfg;
}

void validate_estimator(const RunConfig& cfg) {
  if (cfg.estimator.empty()) {
    throw ConfigError("key 'estimator' is required (config or --estimator)");
  }
  // Inconsistent configs were rejected at parse time; a flag override that
  // makes a key inapplicable just leaves it unused.
  if (cfg.estimator == "filter" && cfg.has_window) {
    log_debug("window config ignored by the filter estimator");
  }
}

int cmd_simulate(const std::string& config_path, std::string out_dir,
                 const std::optional<std::uint64_t>& seed_flag) {
  RunConfig cfg = parse_run_config(config_path);
  if (seed_flag.has_value()) cfg.scenario.seed = *seed_flag;
  if (out_dir.empty()) out_dir = cfg.output.empty() ? "dataset" : cfg.output;

  const SimulationResult sim = generate(cfg.scenario);
  save_dataset(out_dir, sim, cfg.scenario.camera);
  // Stored next to the data so a dataset is reproducible from itself.
  write_scenario_json(join(out_dir, "scenario.json"), cfg.scenario);
  log_info("simulate: " + std::to_string(sim.imu.size()) + " imu samples, " +
           std::to_string(sim.features.size()) + " features, " +
           std::to_string(sim.landmarks.size()) + " landmarks -> " + out_dir);
  return kExitOk;
}

int cmd_run(const std::string& config_path, const std::string& data_dir,
            std::string out_dir, const std::string& estimator_flag) {
  RunConfig cfg = parse_run_config(config_path);
  if (!estimator_flag.empty()) {
    if (estimator_flag != "filter" && estimator_flag != "smoother") {
      throw ConfigError("--estimator must be 'filter' or 'smoother', got '" +
                        estimator_flag + "'");
    }
    cfg.estimator = estimator_flag;
  }
  validate_estimator(cfg);
  if (out_dir.empty()) out_dir = cfg.output.empty() ? "results" : cfg.output;

  const Dataset data = load_dataset(data_dir);
  log_debug("run: dataset has " + std::to_string(data.imu.samples.size()) +
            " imu samples and " + std::to_string(data.features.size()) + " features");

  RunResult res;
  if (cfg.estimator == "filter") {
    FilterOptions opt;
    opt.integrator = cfg.integrator;
    opt.noise = cfg.noise;
    if (cfg.max_landmarks > 0) opt.max_landmarks = cfg.max_landmarks;
    res = run_filter(data, opt);
  } else {
    SmootherOptions opt;
    opt.integrator = cfg.integrator;
    opt.noise = cfg.noise;
    opt.max_keyframes = cfg.window_keyframes;
    opt.max_recent = cfg.window_recent;
    if (cfg.max_landmarks > 0) opt.max_landmarks = cfg.max_landmarks;
    res = run_smoother(data, opt);
  }

  std::filesystem::create_directories(out_dir);
  write_trajectory_csv(join(out_dir, "trajectory.csv"), res.trajectory);
  if (cfg.estimator == "smoother") {
    write_diagnostics_json(join(out_dir, "diagnostics.json"), res.diagnostics);
  }
  log_info("run: " + cfg.estimator + " produced " +
           std::to_string(res.trajectory.size()) + " rows -> " + out_dir);
  if (res.diverged) {
    log_info("run: estimator diverged: " + res.message);
    return kExitEstimation;
  }
  if (!res.message.empty()) log_info("run: " + res.message);
  return kExitOk;
}

int cmd_evaluate(const std::string& estimate_path, const std::string& truth_path,
                 std::string out_dir, const std::string& metric) {
  AlignMode mode;
  if (metric == "se3") {
    mode = AlignMode::kSe3;
  } else if (metric == "four_dof") {
    mode = AlignMode::kFourDof;
  } else {
    throw ConfigError("--metric must be 'se3' or 'four_dof', got '" + metric + "'");
  }
  if (out_dir.empty()) out_dir = "eval";

  const std::vector<TrajectoryRow> est_rows = read_trajectory_csv(estimate_path);
  const std::vector<TrajectoryRow> truth_rows = read_trajectory_csv(truth_path);
  const TrajectoryPair pair =
      associate(to_timed_states(est_rows), to_timed_states(truth_rows));
  if (pair.size() < 2) {
    throw EstimationError("fewer than two associated samples between estimate and truth");
  }
  log_debug("evaluate: " + std::to_string(pair.size()) + " associated samples");

  // Consistency is judged in the estimator's own frame, before alignment.
  double avg_nees = std::numeric_limits<double>::quiet_NaN();
  const bool have_cov =
      !est_rows.empty() &&
      std::all_of(est_rows.begin(), est_rows.end(), [](const TrajectoryRow& r) {
        return r.covariance_diagonal.has_value();
      });
  if (have_cov) {
    std::map<std::int64_t, Vec15> cov_by_ts;
    for (const TrajectoryRow& r : est_rows) {
      cov_by_ts[r.timestamp_ns] = *r.covariance_diagonal;
    }
    std::vector<Mat15> covs;
    covs.reserve(pair.size());
    for (const std::int64_t ts : pair.timestamps_ns) {
      Mat15 c = Mat15::Zero();
      c.diagonal() = cov_by_ts.at(ts);
      covs.push_back(c);
    }
    avg_nees = nees(pair, covs, NeesVariant::kFull15).average;
  }

  const TrajectoryPair aligned = apply_alignment(pair, align(pair, mode));

  MetricsSummary metrics;
  metrics.ate_rmse_m = ate(aligned);
  metrics.avg_nees = avg_nees;
  for (const double seconds : {1.0, 2.0, 5.0}) {
    RpeDelta delta;
    delta.unit = RpeDelta::Unit::kSeconds;
    delta.value = seconds;
    const RpeResult r = rpe(aligned, delta);
    metrics.rpe_trans_segments.push_back(r.translation_rmse);
    metrics.rpe_rot_segments.push_back(r.rotation_rmse);
  }
  metrics.rpe_trans_rmse = metrics.rpe_trans_segments.front();
  metrics.rpe_rot_rmse_rad = metrics.rpe_rot_segments.front();

  std::filesystem::create_directories(out_dir);
  write_metrics_json(join(out_dir, "metrics.json"), metrics);
  write_error_csv(join(out_dir, "errors.csv"), aligned);
  log_info("evaluate: ate_rmse_m=" + std::to_string(metrics.ate_rmse_m) +
           " rpe_trans_rmse=" + std::to_string(metrics.rpe_trans_rmse) + " -> " +
           out_dir);
  return kExitOk;
}

void st_require(bool cond, const std::string& what) {
  if (!cond) throw std::runtime_error(what);
}

void selftest_manifold() {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 0.6);
  for (int i = 0; i < 200; ++i) {
    const Vec3 theta(n(rng), n(rng), n(rng));
    st_require((quat_log(quat_exp(theta)) - theta).norm() < 1e-12,
               "log(exp(theta)) drifted from theta");
    ImuState s;
    s.position = Vec3(n(rng), n(rng), n(rng));
    s.orientation = quat_exp(Vec3(n(rng), n(rng), n(rng)));
    Vec15 d;
    for (int k = 0; k < 15; ++k) d(k) = 0.1 * n(rng);
    st_require((boxminus(boxplus(s, d), s) - d).norm() < 1e-12,
               "state chart roundtrip drifted");
  }
}

void selftest_preintegration() {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<ImuSample> samples;
  for (int k = 0; k <= 200; ++k) {
    ImuSample s;
    s.t = 5e-3 * k;
    s.gyro = 0.4 * Vec3(n(rng), n(rng), n(rng));
    s.accel = Vec3(n(rng), n(rng), 9.81 + 0.5 * n(rng));
    samples.push_back(s);
  }
  const std::vector<ImuSample> first(samples.begin(), samples.begin() + 101);
  const std::vector<ImuSample> second(samples.begin() + 100, samples.end());
  const NoiseParams noise;
  const Vec3 bg = Vec3::Zero();
  const Vec3 ba = Vec3::Zero();
  ImuState start;
  start.velocity = Vec3(0.3, -0.2, 0.1);

  const ImuState direct =
      predict(start, preintegrate(samples, bg, ba, noise, Integrator::kRk4), noise);
  const ImuState stepped = predict(
      predict(start, preintegrate(first, bg, ba, noise, Integrator::kRk4), noise),
      preintegrate(second, bg, ba, noise, Integrator::kRk4), noise);
  st_require((direct.position - stepped.position).norm() < 1e-9,
             "composed preintegration missed the direct position");
  st_require(quat_log(quat_mul(direct.orientation.conjugate(), stepped.orientation))
                     .norm() < 1e-10,
             "composed preintegration missed the direct attitude");
}

void selftest_camera() {
  const CameraModel cam = forward_camera();
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-0.6, 0.6);
  int checked = 0;
  for (int i = 0; i < 100; ++i) {
    ImuState s;
    s.orientation = quat_exp(Vec3(0.2 * u(rng), 0.2 * u(rng), 0.2 * u(rng)));
    const Vec3 l = s.position + quat_to_rotmat(s.orientation) * Vec3(4.0, u(rng), u(rng));
    const Observation with_lens = observe(s, l, cam, true);
    const Observation plain = observe(s, l, cam, false);
    if (!with_lens.ok() || !plain.ok()) continue;
    st_require((undistort_pixel(cam, with_lens.pixel) - plain.pixel).norm() < 1e-9,
               "undistortion disagrees with the lens-free projection");
    ++checked;
  }
  st_require(checked > 50, "too few projections landed in the image");
}

void selftest_filter() {
  const CameraModel cam = forward_camera();
  FilterState fs;
  fs.covariance = MatX::Zero(kStateDim + 3, kStateDim + 3);
  fs.covariance.diagonal().head(kStateDim) = Vec15::Constant(1e-4);
  fs.covariance.diagonal().tail(3) = Vec3::Constant(1e-4);
  const Vec3 l(5.0, 0.4, -0.3);
  fs.landmarks[7] = l;
  const Observation px = observe(fs.imu, l, cam, false);
  st_require(px.ok(), "test landmark fell outside the image");
  FeatureObservation obs;
  obs.landmark_id = 7;
  obs.pixel = px.pixel;
  UpdateReport rep;
  const FilterState updated = filter_update(fs, {obs}, cam, &rep);
  st_require(rep.accepted == 1 && rep.gated == 0, "perfect measurement was gated");
  st_require((updated.imu.position - fs.imu.position).norm() < 1e-9,
             "perfect measurement moved the state");
  st_require(updated.covariance.trace() <= fs.covariance.trace() + 1e-12,
             "update increased total uncertainty");
}

void selftest_end_to_end() {
  Scenario sc;
  sc.emit_noise = false;
  sc.duration_s = 1.5;
  const SimulationResult sim = generate(sc);
  Dataset d;
  d.imu.samples = sim.imu;
  d.imu.timestamps_ns = sim.imu_timestamps_ns;
  d.features = sim.features;
  d.camera = sc.camera;
  for (const TimedState& s : sim.ground_truth) {
    TrajectoryRow row;
    row.timestamp_ns = s.timestamp_ns;
    row.state = s.state;
    d.ground_truth.push_back(row);
  }
  std::map<std::int64_t, ImuState> truth;
  for (const TimedState& s : sim.ground_truth) truth[s.timestamp_ns] = s.state;

  const RunResult filter_res = run_filter(d);
  st_require(!filter_res.diverged && !filter_res.trajectory.empty(),
             "filter run failed on a noise-free dataset");
  const RunResult smoother_res = run_smoother(d);
  st_require(!smoother_res.diverged && !smoother_res.trajectory.empty(),
             "smoother run failed on a noise-free dataset");
  for (const TrajectoryRow& r : filter_res.trajectory) {
    st_require((r.state.position - truth.at(r.timestamp_ns).position).norm() < 1e-5,
               "filter drifted on a noise-free dataset");
  }
  for (const TrajectoryRow& r : smoother_res.trajectory) {
    st_require((r.state.position - truth.at(r.timestamp_ns).position).norm() < 1e-6,
               "smoother drifted on a noise-free dataset");
  }
}

void selftest_chi2() {
  st_require(std::abs(chi2_quantile(0.95, 6) - 12.591587243743977) < 1e-6,
             "chi-square quantile missed the reference value");
  st_require(std::abs(chi2_cdf(chi2_quantile(0.5, 15), 15) - 0.5) < 1e-9,
             "chi-square cdf/quantile roundtrip drifted");
}

void selftest_io() {
  const std::string path =
      (std::filesystem::temp_directory_path() / "vinkit_selftest_imu.csv").string();
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<ImuSample> samples(25);
  std::vector<std::int64_t> stamps;
  for (int i = 0; i < 25; ++i) {
    samples[i].gyro = Vec3(n(rng), n(rng), n(rng));
    samples[i].accel = Vec3(n(rng), n(rng), n(rng));
    stamps.push_back(5000000LL * i);
  }
  write_imu_csv(path, samples, stamps);
  const ImuCsv back = read_imu_csv(path);
  std::filesystem::remove(path);
  st_require(back.timestamps_ns == stamps, "imu timestamps changed on disk");
  for (int i = 0; i < 25; ++i) {
    st_require((back.samples[i].gyro - samples[i].gyro).norm() == 0.0 &&
                   (back.samples[i].accel - samples[i].accel).norm() == 0.0,
               "imu values changed on disk");
  }
}

int cmd_selftest() {
  struct Check {
    const char* name;
    std::function<void()> fn;
  };
  const std::vector<Check> checks = {
      {"manifold charts", selftest_manifold},
      {"imu preintegration", selftest_preintegration},
      {"camera distortion chain", selftest_camera},
      {"filter update", selftest_filter},
      {"chi-square helpers", selftest_chi2},
      {"file roundtrips", selftest_io},
      {"noise-free end to end", selftest_end_to_end},
  };
  int failed = 0;
  for (const Check& c : checks) {
    try {
      c.fn();
      std::printf("    ok  %s\n", c.name);
    } catch (const std::exception& e) {
      std::printf("FAILED  %s: %s\n", c.name, e.what());
      ++failed;
    }
  }
  std::printf("%d/%zu checks passed\n", static_cast<int>(checks.size()) - failed,
              checks.size());
  return failed == 0 ? kExitOk : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"visual-inertial estimation toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::string data_dir;
  std::string estimator_flag;
  std::string estimate_path;
  std::string truth_path;
  std::string metric = "four_dof";
  std::uint64_t seed_flag = 0;

  CLI::App* sim_cmd = app.add_subcommand("simulate", "generate a synthetic dataset");
  sim_cmd->add_option("--config", config_path, "run config json")->required();
  sim_cmd->add_option("--out", out_dir, "dataset directory");
  CLI::Option* seed_opt =
      sim_cmd->add_option("--seed", seed_flag, "override the config seed");

  CLI::App* run_cmd =
      app.add_subcommand("run", "estimate a trajectory from a dataset");
  run_cmd->add_option("--config", config_path, "run config json")->required();
  run_cmd->add_option("--data", data_dir, "dataset directory")->required();
  run_cmd->add_option("--out", out_dir, "result directory");
  run_cmd->add_option("--estimator", estimator_flag,
                      "override the config estimator: filter or smoother");

  CLI::App* eval_cmd =
      app.add_subcommand("evaluate", "score an estimate against ground truth");
  eval_cmd->add_option("--estimate", estimate_path, "estimated trajectory csv")
      ->required();
  eval_cmd->add_option("--truth", truth_path, "ground-truth trajectory csv")
      ->required();
  eval_cmd->add_option("--out", out_dir, "metrics directory");
  eval_cmd->add_option("--metric", metric, "alignment for ate/rpe: se3 or four_dof");

  CLI::App* self_cmd = app.add_subcommand("selftest", "run built-in invariant checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (sim_cmd->parsed()) {
      std::optional<std::uint64_t> seed;
      if (seed_opt->count() > 0) seed = seed_flag;
      return cmd_simulate(config_path, out_dir, seed);
    }
    if (run_cmd->parsed()) return cmd_run(config_path, data_dir, out_dir, estimator_flag);
    if (eval_cmd->parsed()) return cmd_evaluate(estimate_path, truth_path, out_dir, metric);
    if (self_cmd->parsed()) return cmd_selftest();
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitUsage;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kExitIo;
  } catch (const EstimationError& e) {
    std::fprintf(stderr, "estimation error: %s\n", e.what());
    return kExitEstimation;
  } catch (const ContractViolation& e) {
    std::fprintf(stderr, "contract violation: %s\n", e.what());
    return kExitContract;
  }
}
