#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "metassm/errors.hpp"
#include "metassm/util.hpp"

namespace metassm {

enum class PlantKind { kVanDerPol, kPendulum };

inline std::string to_string(PlantKind k) { return k == PlantKind::kVanDerPol ? "vdp" : "pendulum"; }

inline PlantKind plant_kind_from_string(const std::string& s) {
  if (s == "vdp") return PlantKind::kVanDerPol;
  if (s == "pendulum") return PlantKind::kPendulum;
  throw ConfigError("unknown plant kind '" + s + "' (expected vdp or pendulum)");
}

/// One member of a plant family. theta is the Van der Pol damping ratio; mass,
/// length, gravity and the limits describe the pendulum.
struct PlantParams {
  PlantKind kind = PlantKind::kVanDerPol;
  double theta = 1.0;
  double mass = 1.0;
  double length = 1.0;
  double gravity = 10.0;
  double max_torque = 2.0;
  double max_speed = 8.0;
  double dt = 0.05;

  int n_x() const { return 2; }
  int n_u() const { return 1; }
  int n_y() const { return kind == PlantKind::kVanDerPol ? 2 : 1; }

  void validate() const {
    if (!(dt > 0.0)) throw ConfigError("PlantParams.dt must be positive");
    if (kind == PlantKind::kPendulum && !(mass > 0.0)) {
      throw ConfigError("PlantParams.mass must be positive");
    }
    if (!(length > 0.0)) throw ConfigError("PlantParams.length must be positive");
  }

  bool operator==(const PlantParams&) const = default;
};

inline void to_json(nlohmann::json& j, const PlantParams& p) {
  j = nlohmann::json{{"kind", to_string(p.kind)}, {"theta", p.theta},
                     {"mass", p.mass},            {"length", p.length},
                     {"gravity", p.gravity},      {"max_torque", p.max_torque},
                     {"max_speed", p.max_speed},  {"dt", p.dt}};
}

inline void from_json(const nlohmann::json& j, PlantParams& p) {
  p.kind = plant_kind_from_string(j.at("kind").get<std::string>());
  p.theta = j.at("theta").get<double>();
  p.mass = j.at("mass").get<double>();
  p.length = j.at("length").get<double>();
  p.gravity = j.at("gravity").get<double>();
  p.max_torque = j.at("max_torque").get<double>();
  p.max_speed = j.at("max_speed").get<double>();
  p.dt = j.at("dt").get<double>();
}

// ---------------------------------------------------------------------------
// Steppers

/// Classical RK4 step of x1' = x2, x2' = theta x2 (1 - x1^2) - x1 + u, input held.
inline Eigen::Vector2d vdp_step(const Eigen::Vector2d& x, double u, double theta, double dt) {
  if (!(dt > 0.0)) throw ConfigError("vdp_step: dt must be positive");
  auto f = [&](const Eigen::Vector2d& s) {
    return Eigen::Vector2d(s[1], theta * s[1] * (1.0 - s[0] * s[0]) - s[0] + u);
  };
  const Eigen::Vector2d k1 = f(x);
  const Eigen::Vector2d k2 = f(x + 0.5 * dt * k1);
  const Eigen::Vector2d k3 = f(x + 0.5 * dt * k2);
  const Eigen::Vector2d k4 = f(x + dt * k3);
  Eigen::Vector2d next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  if (!next.allFinite()) throw NumericalError("vdp_step: state diverged (non-finite)");
  return next;
}

/// Wraps an angle into (-pi, pi].
inline double wrap_angle(double a) {
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  a -= kTwoPi * std::floor((a + std::numbers::pi) / kTwoPi);
  if (a <= -std::numbers::pi) a += kTwoPi;
  return a;
}

/// Semi-implicit Euler step of the swing pendulum; angle 0 is upright.
inline Eigen::Vector2d pendulum_step(const Eigen::Vector2d& x, double torque,
                                     const PlantParams& p) {
  if (!(p.dt > 0.0)) throw ConfigError("pendulum_step: dt must be positive");
  const double tau = std::clamp(torque, -p.max_torque, p.max_torque);
  const double accel = 3.0 * p.gravity / (2.0 * p.length) * std::sin(x[0]) +
                       3.0 / (p.mass * p.length * p.length) * tau;
  const double rate = std::clamp(x[1] + accel * p.dt, -p.max_speed, p.max_speed);
  return {wrap_angle(x[0] + rate * p.dt), rate};
}

/// Simulator for one plant instance in physical units.
class Plant {
 public:
  Plant(PlantParams params, Eigen::VectorXd x0) : p_(params), x_(std::move(x0)) {
    p_.validate();
    if (x_.size() != p_.n_x()) throw ConfigError("Plant: initial state has wrong dimension");
  }

  const PlantParams& params() const { return p_; }
  const Eigen::VectorXd& state() const { return x_; }

  /// Input actually applied for a requested input (the pendulum clips torque).
  Eigen::VectorXd applied(const Eigen::VectorXd& u) const {
    if (u.size() != p_.n_u()) throw ConfigError("Plant: input has wrong dimension");
    if (p_.kind == PlantKind::kPendulum) {
      return Eigen::VectorXd::Constant(1, std::clamp(u[0], -p_.max_torque, p_.max_torque));
    }
    return u;
  }

  Eigen::VectorXd output() const {
    if (p_.kind == PlantKind::kVanDerPol) return x_;
    return Eigen::VectorXd::Constant(1, x_[0]);
  }

  /// Advances one sample with input u and returns the new output.
  Eigen::VectorXd step(const Eigen::VectorXd& u) {
    const Eigen::VectorXd ua = applied(u);
    if (p_.kind == PlantKind::kVanDerPol) {
      x_ = vdp_step(x_, ua[0], p_.theta, p_.dt);
    } else {
      x_ = pendulum_step(x_, ua[0], p_);
    }
    return output();
  }

 private:
  PlantParams p_;
  Eigen::VectorXd x_;
};

// ---------------------------------------------------------------------------
// Sampling and excitation

/// i.i.d. family members: theta ~ N(0, 1) for vdp, mass ~ U[0.5, 1.5] for the pendulum.
inline std::vector<PlantParams> sample_params(PlantKind kind, int count, std::uint64_t seed,
                                              PlantParams base = {}) {
  if (count < 1) throw ConfigError("sample_params: count must be >= 1");
  base.kind = kind;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> mass(0.5, 1.5);
  std::vector<PlantParams> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    PlantParams p = base;
    if (kind == PlantKind::kVanDerPol) {
      p.theta = normal(rng);
    } else {
      p.mass = mass(rng);
    }
    out.push_back(p);
  }
  return out;
}

inline constexpr int kMinDwell = 5;
inline constexpr int kMaxDwell = 20;

/// Piecewise-constant random input (length x n_u). Each channel holds a level
/// drawn from U[-amplitude, amplitude] for a dwell drawn from {5, ..., 20}.
inline Eigen::MatrixXd excitation(Eigen::Index length, int n_u, double amplitude,
                                  std::uint64_t seed) {
  if (length < 0 || n_u < 1) throw ConfigError("excitation: bad shape");
  if (amplitude < 0.0) throw ConfigError("excitation: amplitude must be non-negative");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> level(-amplitude, amplitude);
  std::uniform_int_distribution<int> dwell(kMinDwell, kMaxDwell);
  Eigen::MatrixXd u(length, n_u);
  for (int c = 0; c < n_u; ++c) {
    Eigen::Index k = 0;
    while (k < length) {
      const double v = amplitude > 0.0 ? level(rng) : 0.0;
      const Eigen::Index d = dwell(rng);
      for (Eigen::Index j = 0; j < d && k < length; ++j, ++k) u(k, c) = v;
    }
  }
  return u;
}

// ---------------------------------------------------------------------------
// Datasets

/// Per-channel affine map x_std = (x - mean) / scale.
struct Scaler {
  Eigen::VectorXd u_mean, u_scale, y_mean, y_scale;

  static Scaler identity(int n_u, int n_y) {
    return {Eigen::VectorXd::Zero(n_u), Eigen::VectorXd::Ones(n_u), Eigen::VectorXd::Zero(n_y),
            Eigen::VectorXd::Ones(n_y)};
  }

  /// Rows are samples.
  Eigen::MatrixXd scale_u(const Eigen::MatrixXd& u) const {
    return (u.rowwise() - u_mean.transpose()).array().rowwise() / u_scale.transpose().array();
  }
  Eigen::MatrixXd scale_y(const Eigen::MatrixXd& y) const {
    return (y.rowwise() - y_mean.transpose()).array().rowwise() / y_scale.transpose().array();
  }
  Eigen::MatrixXd unscale_u(const Eigen::MatrixXd& u) const {
    return (u.array().rowwise() * u_scale.transpose().array()).matrix().rowwise() +
           u_mean.transpose();
  }
  Eigen::MatrixXd unscale_y(const Eigen::MatrixXd& y) const {
    return (y.array().rowwise() * y_scale.transpose().array()).matrix().rowwise() +
           y_mean.transpose();
  }
  Eigen::VectorXd scale_u_vec(const Eigen::VectorXd& u) const {
    return (u - u_mean).cwiseQuotient(u_scale);
  }
  Eigen::VectorXd scale_y_vec(const Eigen::VectorXd& y) const {
    return (y - y_mean).cwiseQuotient(y_scale);
  }
  Eigen::VectorXd unscale_u_vec(const Eigen::VectorXd& u) const {
    return u.cwiseProduct(u_scale) + u_mean;
  }
  Eigen::VectorXd unscale_y_vec(const Eigen::VectorXd& y) const {
    return y.cwiseProduct(y_scale) + y_mean;
  }

  bool operator==(const Scaler& o) const {
    return u_mean == o.u_mean && u_scale == o.u_scale && y_mean == o.y_mean &&
           y_scale == o.y_scale;
  }
};

inline nlohmann::json vec_json(const Eigen::VectorXd& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}
inline Eigen::VectorXd json_vec(const nlohmann::json& j) {
  const auto xs = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(xs.data(), Eigen::Index(xs.size()));
}

inline void to_json(nlohmann::json& j, const Scaler& s) {
  j = nlohmann::json{{"u_mean", vec_json(s.u_mean)},
                     {"u_scale", vec_json(s.u_scale)},
                     {"y_mean", vec_json(s.y_mean)},
                     {"y_scale", vec_json(s.y_scale)}};
}
inline void from_json(const nlohmann::json& j, Scaler& s) {
  s.u_mean = json_vec(j.at("u_mean"));
  s.u_scale = json_vec(j.at("u_scale"));
  s.y_mean = json_vec(j.at("y_mean"));
  s.y_scale = json_vec(j.at("y_scale"));
}

/// Input/output record of one plant. Row k holds the input u_k applied during
/// step k and the output y_k measured after it. `segments` lists the first row
/// of every contiguous piece; windows never straddle a segment start.
/// `final_state` is the true plant state after the last row (bookkeeping only).
struct TrajectoryDataset {
  Eigen::MatrixXd u;
  Eigen::MatrixXd y;
  PlantParams plant;
  Scaler scaler;
  std::vector<Eigen::Index> segments{0};
  Eigen::VectorXd final_state;

  Eigen::Index length() const { return u.rows(); }

  void check() const {
    if (u.rows() != y.rows()) throw ConfigError("dataset: u and y lengths differ");
    if (!u.allFinite() || !y.allFinite()) throw NumericalError("dataset: non-finite values");
    if (segments.empty() || segments.front() != 0) {
      throw ConfigError("dataset: segments must start at row 0");
    }
    for (std::size_t i = 1; i < segments.size(); ++i) {
      if (segments[i] <= segments[i - 1] || segments[i] >= length()) {
        throw ConfigError("dataset: segment starts must be increasing and inside the data");
      }
    }
  }

  /// Appends rows; a continuation extends the last segment.
  void append(const Eigen::MatrixXd& du, const Eigen::MatrixXd& dy, bool continuation) {
    if (du.rows() != dy.rows()) throw ConfigError("dataset append: length mismatch");
    if (du.rows() == 0) return;
    if (!continuation && length() > 0) segments.push_back(length());
    const Eigen::Index n = length();
    u.conservativeResize(n + du.rows(), du.cols());
    y.conservativeResize(n + dy.rows(), dy.cols());
    u.bottomRows(du.rows()) = du;
    y.bottomRows(dy.rows()) = dy;
  }
};

/// Input for step k given the step index and the current plant state.
using Policy = std::function<Eigen::VectorXd(Eigen::Index, const Eigen::VectorXd&)>;

/// Runs a plant under a policy; records applied inputs and noisy outputs.
inline TrajectoryDataset simulate(const PlantParams& params, const Policy& policy,
                                  Eigen::Index length, const Eigen::VectorXd& x0,
                                  double noise_std, std::uint64_t seed) {
  Plant plant(params, x0);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  TrajectoryDataset d;
  d.plant = params;
  d.scaler = Scaler::identity(params.n_u(), params.n_y());
  d.u.resize(length, params.n_u());
  d.y.resize(length, params.n_y());
  for (Eigen::Index k = 0; k < length; ++k) {
    const Eigen::VectorXd u = plant.applied(policy(k, plant.state()));
    Eigen::VectorXd y = plant.step(u);
    if (noise_std > 0.0) {
      for (Eigen::Index i = 0; i < y.size(); ++i) y[i] += noise_std * noise(rng);
    }
    d.u.row(k) = u.transpose();
    d.y.row(k) = y.transpose();
  }
  d.final_state = plant.state();
  return d;
}

/// Open-loop trajectory for a given input sequence (rows are steps).
inline TrajectoryDataset generate_trajectory(const PlantParams& params, const Eigen::MatrixXd& u,
                                             const Eigen::VectorXd& x0, double noise_std,
                                             std::uint64_t seed) {
  if (u.cols() != params.n_u()) throw ConfigError("generate_trajectory: input width mismatch");
  return simulate(
      params, [&](Eigen::Index k, const Eigen::VectorXd&) -> Eigen::VectorXd {
        return u.row(k).transpose();
      },
      u.rows(), x0, noise_std, seed);
}

inline constexpr double kScaleFloor = 1e-12;

/// Per-channel mean and population standard deviation over all rows of all datasets.
inline Scaler fit_scaler(const std::vector<TrajectoryDataset>& data) {
  if (data.empty()) throw ConfigError("fit_scaler: no data");
  const Eigen::Index nu = data.front().u.cols(), ny = data.front().y.cols();
  Eigen::VectorXd su = Eigen::VectorXd::Zero(nu), sy = Eigen::VectorXd::Zero(ny);
  double n = 0.0;
  for (const auto& d : data) {
    if (d.u.cols() != nu || d.y.cols() != ny) throw ConfigError("fit_scaler: channel mismatch");
    su += d.u.colwise().sum().transpose();
    sy += d.y.colwise().sum().transpose();
    n += double(d.length());
  }
  if (n < 1.0) throw ConfigError("fit_scaler: no rows");
  Scaler s;
  s.u_mean = su / n;
  s.y_mean = sy / n;
  Eigen::VectorXd vu = Eigen::VectorXd::Zero(nu), vy = Eigen::VectorXd::Zero(ny);
  for (const auto& d : data) {
    vu += (d.u.rowwise() - s.u_mean.transpose()).colwise().squaredNorm().transpose();
    vy += (d.y.rowwise() - s.y_mean.transpose()).colwise().squaredNorm().transpose();
  }
  auto to_scale = [&](const Eigen::VectorXd& v) {
    Eigen::VectorXd sd = (v / n).cwiseSqrt();
    for (auto& x : sd) {
      if (x < kScaleFloor) x = 1.0;
    }
    return sd;
  };
  s.u_scale = to_scale(vu);
  s.y_scale = to_scale(vy);
  return s;
}

/// Re-expresses a raw dataset in the units of `scaler`.
inline TrajectoryDataset apply_scaler(TrajectoryDataset d, const Scaler& scaler) {
  d.u = scaler.scale_u(d.u);
  d.y = scaler.scale_y(d.y);
  d.scaler = scaler;
  return d;
}

/// Fits a scaler on the collection and returns the scaled data with it.
inline std::pair<std::vector<TrajectoryDataset>, Scaler> standardize(
    std::vector<TrajectoryDataset> data) {
  const Scaler s = fit_scaler(data);
  for (auto& d : data) d = apply_scaler(std::move(d), s);
  return {std::move(data), s};
}

/// Returns the dataset in physical units.
inline TrajectoryDataset unscale(TrajectoryDataset d) {
  d.u = d.scaler.unscale_u(d.u);
  d.y = d.scaler.unscale_y(d.y);
  d.scaler = Scaler::identity(int(d.u.cols()), int(d.y.cols()));
  return d;
}

// ---------------------------------------------------------------------------
// Files: CSV `t,u_0..,y_0..` plus a JSON sidecar with the plant, scaler and segments.

inline std::string dataset_csv(const TrajectoryDataset& d) {
  std::ostringstream os;
  os << "t";
  for (Eigen::Index i = 0; i < d.u.cols(); ++i) os << ",u_" << i;
  for (Eigen::Index i = 0; i < d.y.cols(); ++i) os << ",y_" << i;
  os << '\n';
  for (Eigen::Index k = 0; k < d.length(); ++k) {
    os << k;
    for (Eigen::Index i = 0; i < d.u.cols(); ++i) os << ',' << format_double(d.u(k, i));
    for (Eigen::Index i = 0; i < d.y.cols(); ++i) os << ',' << format_double(d.y(k, i));
    os << '\n';
  }
  return os.str();
}

inline nlohmann::json dataset_sidecar(const TrajectoryDataset& d) {
  return {{"length", d.length()},
          {"n_u", d.u.cols()},
          {"n_y", d.y.cols()},
          {"plant", d.plant},
          {"scaler", d.scaler},
          {"segments", d.segments},
          {"final_state", vec_json(d.final_state)}};
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << text;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read '" + path.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

/// Writes `<stem>.csv` and `<stem>.json`.
inline void write_dataset(const std::filesystem::path& stem, const TrajectoryDataset& d) {
  write_text(stem.string() + ".csv", dataset_csv(d));
  write_text(stem.string() + ".json", dataset_sidecar(d).dump(2) + "\n");
}

inline TrajectoryDataset read_dataset(const std::filesystem::path& stem) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_text(stem.string() + ".json"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed dataset sidecar '" + stem.string() + ".json': " + e.what());
  }
  TrajectoryDataset d;
  Eigen::Index length = 0, nu = 0, ny = 0;
  try {
    length = meta.at("length").get<Eigen::Index>();
    nu = meta.at("n_u").get<Eigen::Index>();
    ny = meta.at("n_y").get<Eigen::Index>();
    d.plant = meta.at("plant").get<PlantParams>();
    d.scaler = meta.at("scaler").get<Scaler>();
    d.segments = meta.at("segments").get<std::vector<Eigen::Index>>();
    d.final_state = json_vec(meta.at("final_state"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed dataset sidecar '" + stem.string() + ".json': " + e.what());
  }

  std::istringstream in(read_text(stem.string() + ".csv"));
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("dataset csv is empty");
  std::string expected = "t";
  for (Eigen::Index i = 0; i < nu; ++i) expected += ",u_" + std::to_string(i);
  for (Eigen::Index i = 0; i < ny; ++i) expected += ",y_" + std::to_string(i);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != expected) throw ConfigError("dataset csv header '" + line + "' != '" + expected + "'");

  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      row.push_back(parse_double(std::string_view(line).substr(
          start, comma == std::string::npos ? std::string::npos : comma - start)));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (Eigen::Index(row.size()) != 1 + nu + ny) {
      throw ConfigError("dataset csv row " + std::to_string(rows.size()) + " has " +
                        std::to_string(row.size()) + " columns");
    }
    rows.push_back(std::move(row));
  }
  if (Eigen::Index(rows.size()) != length) {
    throw ConfigError("dataset length mismatch: csv has " + std::to_string(rows.size()) +
                      " rows, sidecar says " + std::to_string(length));
  }
  d.u.resize(length, nu);
  d.y.resize(length, ny);
  for (Eigen::Index k = 0; k < length; ++k) {
    for (Eigen::Index i = 0; i < nu; ++i) d.u(k, i) = rows[k][1 + i];
    for (Eigen::Index i = 0; i < ny; ++i) d.y(k, i) = rows[k][1 + nu + i];
  }
  d.check();
  return d;
}

}  // namespace metassm
