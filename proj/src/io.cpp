#include "vinkit/io.hpp"

#include "vinkit/manifold.hpp"

#include <json.hpp>

#include <Eigen/Geometry>

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>

namespace vinkit {
namespace {

using nlohmann::json;

// %.17g round-trips doubles exactly and keeps output byte-stable, which the
// determinism guarantee rides on.
std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  return out;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open for reading: " + path);
  return in;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.push_back("");
  return fields;
}

double parse_double(const std::string& s, const std::string& where) {
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0' || errno == ERANGE) {
    throw IoError("bad number '" + s + "' in " + where);
  }
  return v;
}

std::int64_t parse_int(const std::string& s, const std::string& where) {
  errno = 0;
  char* end = nullptr;
  const long long v = std::strtoll(s.c_str(), &end, 10);
  if (end == s.c_str() || *end != '\0' || errno == ERANGE) {
    throw IoError("bad integer '" + s + "' in " + where);
  }
  return v;
}

// Reads all non-empty data lines after validating the header verbatim.
std::vector<std::vector<std::string>> read_table(const std::string& path,
                                                 const std::string& header) {
  std::ifstream in = open_in(path);
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty file: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != header) {
    throw IoError("unexpected header in " + path + ": got '" + line + "'");
  }
  std::vector<std::vector<std::string>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    rows.push_back(split_csv(line));
    if (rows.back().empty()) {
      throw IoError(path + ":" + std::to_string(line_no) + ": empty row");
    }
  }
  return rows;
}

std::string row_context(const std::string& path, std::size_t idx) {
  return path + " row " + std::to_string(idx + 2);  // header is line 1
}

json load_json(const std::string& path) {
  std::ifstream in = open_in(path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("invalid JSON in " + path + ": " + e.what());
  }
  return j;
}

double want_double(const json& j, const std::string& key) {
  if (!j.is_number()) throw ConfigError("key '" + key + "' must be a number");
  return j.get<double>();
}

Vec3 want_vec3(const json& j, const std::string& key) {
  if (!j.is_array() || j.size() != 3) {
    throw ConfigError("key '" + key + "' must be an array of 3 numbers");
  }
  return Vec3(want_double(j[0], key), want_double(j[1], key), want_double(j[2], key));
}

json camera_to_json(const CameraModel& m) {
  Eigen::Quaterniond q(m.r_ci);
  if (q.w() < 0.0) q.coeffs() = -q.coeffs();
  json k = json::array();
  for (int i = 0; i < 6; ++i) k.push_back(m.k(i));
  return json{{"fx", m.fx},
              {"fy", m.fy},
              {"cx", m.cx},
              {"cy", m.cy},
              {"width", m.width},
              {"height", m.height},
              {"k", k},
              {"p", {m.p(0), m.p(1)}},
              {"q_ci", {q.w(), q.x(), q.y(), q.z()}},
              {"t_ci", {m.t_ci(0), m.t_ci(1), m.t_ci(2)}},
              {"sigma_px", m.sigma_px}};
}

CameraModel camera_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("camera config must be an object");
  CameraModel m;
  for (const auto& [key, value] : j.items()) {
    if (key == "fx") {
      m.fx = want_double(value, key);
    } else if (key == "fy") {
      m.fy = want_double(value, key);
    } else if (key == "cx") {
      m.cx = want_double(value, key);
    } else if (key == "cy") {
      m.cy = want_double(value, key);
    } else if (key == "width") {
      m.width = static_cast<int>(want_double(value, key));
    } else if (key == "height") {
      m.height = static_cast<int>(want_double(value, key));
    } else if (key == "k") {
      if (!value.is_array() || value.size() != 6) {
        throw ConfigError("key 'k' must be an array of 6 numbers");
      }
      for (int i = 0; i < 6; ++i) m.k(i) = want_double(value[i], key);
    } else if (key == "p") {
      if (!value.is_array() || value.size() != 2) {
        throw ConfigError("key 'p' must be an array of 2 numbers");
      }
      m.p(0) = want_double(value[0], key);
      m.p(1) = want_double(value[1], key);
    } else if (key == "q_ci") {
      if (!value.is_array() || value.size() != 4) {
        throw ConfigError("key 'q_ci' must be a wxyz array of 4 numbers");
      }
      const UnitQuaternion q(want_double(value[0], key), want_double(value[1], key),
                             want_double(value[2], key), want_double(value[3], key));
      m.r_ci = quat_to_rotmat(q);
    } else if (key == "t_ci") {
      m.t_ci = want_vec3(value, key);
    } else if (key == "sigma_px") {
      m.sigma_px = want_double(value, key);
      if (m.sigma_px <= 0.0) throw ConfigError("key 'sigma_px' must be positive");
    } else {
      throw ConfigError("unknown key '" + key + "' in camera config");
    }
  }
  return m;
}

std::string attitude_name(AttitudeMode mode) {
  return mode == AttitudeMode::kYawFollowing ? "yaw_following" : "fixed";
}

AttitudeMode attitude_from_name(const std::string& name) {
  if (name == "yaw_following") return AttitudeMode::kYawFollowing;
  if (name == "fixed") return AttitudeMode::kFixed;
  throw ConfigError("key 'attitude' must be 'yaw_following' or 'fixed', got '" +
                    name + "'");
}

}  // namespace

void write_imu_csv(const std::string& path, const std::vector<ImuSample>& samples,
                   const std::vector<std::int64_t>& timestamps_ns) {
  VINKIT_REQUIRE(samples.size() == timestamps_ns.size(),
                 "imu samples and timestamps must be parallel");
  for (std::size_t i = 1; i < timestamps_ns.size(); ++i) {
    VINKIT_REQUIRE(timestamps_ns[i] > timestamps_ns[i - 1],
                   "imu timestamps must be strictly increasing");
  }
  std::ofstream out = open_out(path);
  out << "timestamp_ns,wx,wy,wz,ax,ay,az\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const ImuSample& s = samples[i];
    out << timestamps_ns[i] << ',' << fmt(s.gyro(0)) << ',' << fmt(s.gyro(1)) << ','
        << fmt(s.gyro(2)) << ',' << fmt(s.accel(0)) << ',' << fmt(s.accel(1)) << ','
        << fmt(s.accel(2)) << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

ImuCsv read_imu_csv(const std::string& path) {
  const auto rows = read_table(path, "timestamp_ns,wx,wy,wz,ax,ay,az");
  ImuCsv result;
  result.samples.reserve(rows.size());
  result.timestamps_ns.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::string where = row_context(path, i);
    if (rows[i].size() != 7) throw IoError(where + ": expected 7 fields");
    const std::int64_t ts = parse_int(rows[i][0], where);
    if (!result.timestamps_ns.empty() && ts <= result.timestamps_ns.back()) {
      throw IoError(where + ": timestamps must be strictly increasing");
    }
    ImuSample s;
    s.t = static_cast<double>(ts) * 1e-9;
    for (int a = 0; a < 3; ++a) s.gyro(a) = parse_double(rows[i][1 + a], where);
    for (int a = 0; a < 3; ++a) s.accel(a) = parse_double(rows[i][4 + a], where);
    result.timestamps_ns.push_back(ts);
    result.samples.push_back(s);
  }
  return result;
}

void write_feature_csv(const std::string& path,
                       const std::vector<FeatureObservation>& features) {
  std::ofstream out = open_out(path);
  out << "timestamp_ns,frame_id,landmark_id,u_px,v_px\n";
  for (const FeatureObservation& f : features) {
    out << f.timestamp_ns << ',' << f.frame_id << ',' << f.landmark_id << ','
        << fmt(f.pixel(0)) << ',' << fmt(f.pixel(1)) << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

std::vector<FeatureObservation> read_feature_csv(const std::string& path) {
  const auto rows = read_table(path, "timestamp_ns,frame_id,landmark_id,u_px,v_px");
  std::vector<FeatureObservation> features;
  features.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::string where = row_context(path, i);
    if (rows[i].size() != 5) throw IoError(where + ": expected 5 fields");
    FeatureObservation f;
    f.timestamp_ns = parse_int(rows[i][0], where);
    f.frame_id = parse_int(rows[i][1], where);
    f.landmark_id = parse_int(rows[i][2], where);
    f.pixel(0) = parse_double(rows[i][3], where);
    f.pixel(1) = parse_double(rows[i][4], where);
    features.push_back(f);
  }
  return features;
}

namespace {
constexpr const char* kTrajectoryHeader =
    "timestamp_ns,tx,ty,tz,qw,qx,qy,qz,vx,vy,vz,bgx,bgy,bgz,bax,bay,baz";

std::string trajectory_header_with_cov() {
  std::string h = kTrajectoryHeader;
  for (int i = 0; i < kStateDim; ++i) h += ",cov" + std::to_string(i);
  return h;
}
}  // namespace

void write_trajectory_csv(const std::string& path,
                          const std::vector<TrajectoryRow>& rows) {
  const bool with_cov = !rows.empty() && rows.front().covariance_diagonal.has_value();
  for (const TrajectoryRow& r : rows) {
    VINKIT_REQUIRE(r.covariance_diagonal.has_value() == with_cov,
                   "covariance columns must appear on every row or on none");
  }
  std::ofstream out = open_out(path);
  out << (with_cov ? trajectory_header_with_cov() : std::string(kTrajectoryHeader))
      << '\n';
  for (const TrajectoryRow& r : rows) {
    const ImuState& x = r.state;
    out << r.timestamp_ns << ',' << fmt(x.position(0)) << ',' << fmt(x.position(1))
        << ',' << fmt(x.position(2)) << ',' << fmt(x.orientation.w()) << ','
        << fmt(x.orientation.x()) << ',' << fmt(x.orientation.y()) << ','
        << fmt(x.orientation.z()) << ',' << fmt(x.velocity(0)) << ','
        << fmt(x.velocity(1)) << ',' << fmt(x.velocity(2)) << ','
        << fmt(x.gyro_bias(0)) << ',' << fmt(x.gyro_bias(1)) << ','
        << fmt(x.gyro_bias(2)) << ',' << fmt(x.accel_bias(0)) << ','
        << fmt(x.accel_bias(1)) << ',' << fmt(x.accel_bias(2));
    if (with_cov) {
      for (int i = 0; i < kStateDim; ++i) out << ',' << fmt((*r.covariance_diagonal)(i));
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

std::vector<TrajectoryRow> read_trajectory_csv(const std::string& path) {
  std::ifstream probe = open_in(path);
  std::string header;
  if (!std::getline(probe, header)) throw IoError("empty file: " + path);
  if (!header.empty() && header.back() == '\r') header.pop_back();
  probe.close();

  bool with_cov = false;
  if (header == trajectory_header_with_cov()) {
    with_cov = true;
  } else if (header != kTrajectoryHeader) {
    throw IoError("unexpected header in " + path);
  }
  const auto rows = read_table(path, with_cov ? trajectory_header_with_cov()
                                              : std::string(kTrajectoryHeader));
  const std::size_t want = with_cov ? 17 + kStateDim : 17;
  std::vector<TrajectoryRow> result;
  result.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::string where = row_context(path, i);
    if (rows[i].size() != want) {
      throw IoError(where + ": expected " + std::to_string(want) + " fields");
    }
    TrajectoryRow r;
    r.timestamp_ns = parse_int(rows[i][0], where);
    auto at = [&](int col) { return parse_double(rows[i][col], where); };
    r.state.position = Vec3(at(1), at(2), at(3));
    r.state.orientation = UnitQuaternion(at(4), at(5), at(6), at(7));
    r.state.velocity = Vec3(at(8), at(9), at(10));
    r.state.gyro_bias = Vec3(at(11), at(12), at(13));
    r.state.accel_bias = Vec3(at(14), at(15), at(16));
    if (with_cov) {
      Vec15 d;
      for (int c = 0; c < kStateDim; ++c) d(c) = at(17 + c);
      r.covariance_diagonal = d;
    }
    result.push_back(r);
  }
  return result;
}

void write_landmarks_csv(const std::string& path,
                         const std::vector<std::pair<std::int64_t, Vec3>>& landmarks) {
  std::ofstream out = open_out(path);
  out << "id,x,y,z\n";
  for (const auto& [id, l] : landmarks) {
    out << id << ',' << fmt(l(0)) << ',' << fmt(l(1)) << ',' << fmt(l(2)) << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

std::vector<std::pair<std::int64_t, Vec3>> read_landmarks_csv(const std::string& path) {
  const auto rows = read_table(path, "id,x,y,z");
  std::vector<std::pair<std::int64_t, Vec3>> result;
  result.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::string where = row_context(path, i);
    if (rows[i].size() != 4) throw IoError(where + ": expected 4 fields");
    result.emplace_back(parse_int(rows[i][0], where),
                        Vec3(parse_double(rows[i][1], where),
                             parse_double(rows[i][2], where),
                             parse_double(rows[i][3], where)));
  }
  return result;
}

void write_camera_json(const std::string& path, const CameraModel& model) {
  std::ofstream out = open_out(path);
  out << camera_to_json(model).dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

CameraModel read_camera_json(const std::string& path) {
  return camera_from_json(load_json(path));
}

void write_scenario_json(const std::string& path, const Scenario& sc) {
  json j{{"family", to_string(sc.family)},
         {"radius_m", sc.radius_m},
         {"rate_rad_s", sc.rate_rad_s},
         {"amplitude_m", sc.amplitude_m},
         {"camera", camera_to_json(sc.camera)},
         {"noise",
          {{"sigma_g", sc.noise.sigma_g},
           {"sigma_a", sc.noise.sigma_a},
           {"sigma_bg", sc.noise.sigma_bg},
           {"sigma_ba", sc.noise.sigma_ba},
           {"gravity", sc.noise.gravity}}},
         {"emit_noise", sc.emit_noise},
         {"quantize_pixels", sc.quantize_pixels},
         {"imu_rate_hz", sc.imu_rate_hz},
         {"camera_rate_hz", sc.camera_rate_hz},
         {"duration_s", sc.duration_s},
         {"seed", sc.seed},
         {"landmark_count", sc.landmark_count},
         {"shell_inner_m", sc.shell_inner_m},
         {"shell_outer_m", sc.shell_outer_m},
         {"initial_gyro_bias",
          {sc.initial_gyro_bias(0), sc.initial_gyro_bias(1), sc.initial_gyro_bias(2)}},
         {"initial_accel_bias",
          {sc.initial_accel_bias(0), sc.initial_accel_bias(1),
           sc.initial_accel_bias(2)}}};
  if (sc.attitude.has_value()) j["attitude"] = attitude_name(*sc.attitude);
  std::ofstream out = open_out(path);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

Scenario read_scenario_json(const std::string& path) {
  const json j = load_json(path);
  if (!j.is_object()) throw ConfigError("scenario config must be an object");
  Scenario sc;
  for (const auto& [key, value] : j.items()) {
    if (key == "family") {
      if (!value.is_string()) throw ConfigError("key 'family' must be a string");
      try {
        sc.family = trajectory_family_from_string(value.get<std::string>());
      } catch (const ContractViolation&) {
        throw ConfigError("key 'family' has unknown value '" +
                          value.get<std::string>() + "'");
      }
    } else if (key == "radius_m") {
      sc.radius_m = want_double(value, key);
    } else if (key == "rate_rad_s") {
      sc.rate_rad_s = want_double(value, key);
    } else if (key == "amplitude_m") {
      sc.amplitude_m = want_double(value, key);
    } else if (key == "attitude") {
      if (!value.is_string()) throw ConfigError("key 'attitude' must be a string");
      sc.attitude = attitude_from_name(value.get<std::string>());
    } else if (key == "camera") {
      sc.camera = camera_from_json(value);
    } else if (key == "noise") {
      if (!value.is_object()) throw ConfigError("key 'noise' must be an object");
      for (const auto& [nk, nv] : value.items()) {
        if (nk == "sigma_g") {
          sc.noise.sigma_g = want_double(nv, nk);
        } else if (nk == "sigma_a") {
          sc.noise.sigma_a = want_double(nv, nk);
        } else if (nk == "sigma_bg") {
          sc.noise.sigma_bg = want_double(nv, nk);
        } else if (nk == "sigma_ba") {
          sc.noise.sigma_ba = want_double(nv, nk);
        } else if (nk == "gravity") {
          sc.noise.gravity = want_double(nv, nk);
        } else {
          throw ConfigError("unknown key '" + nk + "' in noise config");
        }
      }
    } else if (key == "emit_noise") {
      if (!value.is_boolean()) throw ConfigError("key 'emit_noise' must be a boolean");
      sc.emit_noise = value.get<bool>();
    } else if (key == "quantize_pixels") {
      if (!value.is_boolean()) {
        throw ConfigError("key 'quantize_pixels' must be a boolean");
      }
      sc.quantize_pixels = value.get<bool>();
    } else if (key == "imu_rate_hz") {
      sc.imu_rate_hz = want_double(value, key);
      if (sc.imu_rate_hz <= 0.0) throw ConfigError("key 'imu_rate_hz' must be positive");
    } else if (key == "camera_rate_hz") {
      sc.camera_rate_hz = want_double(value, key);
      if (sc.camera_rate_hz <= 0.0) {
        throw ConfigError("key 'camera_rate_hz' must be positive");
      }
    } else if (key == "duration_s") {
      sc.duration_s = want_double(value, key);
      if (sc.duration_s <= 0.0) throw ConfigError("key 'duration_s' must be positive");
    } else if (key == "seed") {
      if (!value.is_number_unsigned()) {
        throw ConfigError("key 'seed' must be a non-negative integer");
      }
      sc.seed = value.get<std::uint64_t>();
    } else if (key == "landmark_count") {
      if (!value.is_number_integer()) {
        throw ConfigError("key 'landmark_count' must be an integer");
      }
      sc.landmark_count = value.get<int>();
      if (sc.landmark_count < 0) {
        throw ConfigError("key 'landmark_count' must be non-negative");
      }
    } else if (key == "shell_inner_m") {
      sc.shell_inner_m = want_double(value, key);
    } else if (key == "shell_outer_m") {
      sc.shell_outer_m = want_double(value, key);
    } else if (key == "initial_gyro_bias") {
      sc.initial_gyro_bias = want_vec3(value, key);
    } else if (key == "initial_accel_bias") {
      sc.initial_accel_bias = want_vec3(value, key);
    } else {
      throw ConfigError("unknown key '" + key + "' in scenario config");
    }
  }
  return sc;
}

std::vector<TimedState> to_timed_states(const std::vector<TrajectoryRow>& rows) {
  std::vector<TimedState> out;
  out.reserve(rows.size());
  for (const TrajectoryRow& r : rows) out.push_back({r.timestamp_ns, r.state});
  return out;
}

}  // namespace vinkit
