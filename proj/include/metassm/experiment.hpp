#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "metassm/errors.hpp"
#include "metassm/meta_train.hpp"
#include "metassm/mpc.hpp"
#include "metassm/nssm.hpp"
#include "metassm/plants.hpp"
#include "metassm/util.hpp"

namespace metassm {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

struct SourceSpec {
  int n_source = 32;
  int source_length = 500;
  int n_targets = 1;
  int target_points = 300;
  double amplitude = 2.0;  // excitation level on top of the bootstrap feedback
  double kp = 1.0;         // bootstrap feedback u = -kp x_0 - kd x_1 + excitation
  double kd = 1.0;
  double init_std = 0.5;   // spread of initial states
  double noise_std = 0.01; // output noise, standardized units

  bool operator==(const SourceSpec&) const = default;
};

struct MpcScalars {
  int horizon = 20;
  double q = 1.0;
  double r = 0.1;
  double u_min = -5.0;
  double u_max = 5.0;
  int qp_iters = 500;
  double qp_tol = 1e-8;
  double dare_tol = 1e-10;
  int dare_max_iters = 10000;

  MpcSpec spec(int n_u, int n_y) const {
    MpcSpec s;
    s.horizon = horizon;
    s.Q = q * Eigen::MatrixXd::Identity(n_y, n_y);
    s.R = r * Eigen::MatrixXd::Identity(n_u, n_u);
    s.u_min = Eigen::VectorXd::Constant(n_u, u_min);
    s.u_max = Eigen::VectorXd::Constant(n_u, u_max);
    s.qp_iters = qp_iters;
    s.qp_tol = qp_tol;
    s.dare_tol = dare_tol;
    s.dare_max_iters = dare_max_iters;
    return s;
  }

  bool operator==(const MpcScalars&) const = default;
};

struct AdaptSpec {
  std::vector<int> checkpoints{0, 10, 100, 1000, 3000};
  double beta = 1e-3;

  int steps() const { return checkpoints.empty() ? 0 : checkpoints.back(); }
  bool operator==(const AdaptSpec&) const = default;
};

/// "circle": radius * (cos(omega0 t dt), -sin(omega0 t dt)); "zero": origin.
/// Clockwise at unit rate the circle is an orbit of the oscillator (x_1' = x_2),
/// so it can be tracked exactly with bounded input.
struct ReferenceSpec {
  std::string kind = "circle";
  double radius = 2.0;
  double omega0 = 1.0;

  bool operator==(const ReferenceSpec&) const = default;
};

struct ExperimentConfig {
  PlantKind plant = PlantKind::kVanDerPol;
  PlantParams plant_base;
  SourceSpec source;
  NssmConfig nssm;
  MetaConfig meta;
  MpcScalars mpc;
  AdaptSpec adapt;
  ReferenceSpec collect_reference;
  ReferenceSpec track_reference;
  double collect_abort = 3.0;   // physical output bound during collection; 0 disables
  double track_abort = 10.0;  // physical output bound while tracking; 0 disables
  int track_episode = 100;
  int checkpoint_every = 100;
  bool timing = false;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::string out_dir = "runs";

  /// Plant-dependent defaults.
  static ExperimentConfig defaults(PlantKind kind) {
    ExperimentConfig c;
    c.plant = kind;
    c.plant_base.kind = kind;
    c.nssm.n_u = 1;
    c.nssm.n_y = c.plant_base.n_y();
    if (kind == PlantKind::kPendulum) {
      c.source.n_targets = 5;
      c.source.amplitude = 0.5;  // 1.0 tumbles heavy masses out of the torque box
      c.source.kp = 10.0;
      c.source.kd = 2.0;
      c.source.init_std = 0.05;  // 2 N m cannot hold m = 1.5 beyond about 0.27 rad
      c.mpc.u_min = -2.0;
      c.mpc.u_max = 2.0;
      c.collect_abort = 0.5;  // rad; beyond this the 2 N m box cannot recover heavy masses
      c.track_abort = 0.0;
      c.collect_reference.kind = "zero";
      c.track_reference.kind = "zero";
    }
    return c;
  }

  void validate() const {
    plant_base.validate();
    if (plant_base.kind != plant) throw ConfigError("plant_base.kind must match plant");
    nssm.validate();
    meta.validate();
    if (nssm.n_u != plant_base.n_u() || nssm.n_y != plant_base.n_y()) {
      throw ConfigError("nssm.n_u / n_y must match the plant (" + std::to_string(plant_base.n_u()) +
                        ", " + std::to_string(plant_base.n_y()) + ")");
    }
    if (source.n_source < meta.batch_size) {
      throw ConfigError("source.n_source must be >= meta.batch_size");
    }
    const int span = nssm.history + nssm.horizon;
    if (source.source_length < span || source.target_points < span) {
      throw ConfigError("source and target lengths must cover one window (history + horizon)");
    }
    if (source.n_targets < 1) throw ConfigError("source.n_targets must be >= 1");
    if (source.amplitude < 0.0 || source.init_std < 0.0 || source.noise_std < 0.0) {
      throw ConfigError("source amplitude, init_std and noise_std must be >= 0");
    }
    mpc.spec(nssm.n_u, nssm.n_y).validate(nssm.n_u, nssm.n_y);
    if (!std::is_sorted(adapt.checkpoints.begin(), adapt.checkpoints.end()) ||
        (!adapt.checkpoints.empty() && adapt.checkpoints.front() < 0) ||
        std::adjacent_find(adapt.checkpoints.begin(), adapt.checkpoints.end()) !=
            adapt.checkpoints.end()) {
      throw ConfigError("adapt.checkpoints must be strictly increasing and >= 0");
    }
    if (!(adapt.beta > 0.0)) throw ConfigError("adapt.beta must be positive");
    for (const auto* r : {&collect_reference, &track_reference}) {
      if (r->kind != "circle" && r->kind != "zero") {
        throw ConfigError("reference kind must be circle or zero");
      }
      if (r->kind == "circle" && nssm.n_y != 2) {
        throw ConfigError("circle reference needs two outputs");
      }
    }
    if (!(collect_abort >= 0.0)) throw ConfigError("collect_abort must be >= 0");
    if (!(track_abort >= 0.0)) throw ConfigError("track_abort must be >= 0");
    if (track_episode < 0) throw ConfigError("track_episode must be >= 0");
    if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
    if (seeds.empty()) throw ConfigError("seeds must list at least one seed");
  }

  bool operator==(const ExperimentConfig&) const = default;
};

/// Strict object reader: missing keys keep their defaults, unknown keys are errors.
class JsonReader {
 public:
  JsonReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError("'" + path_ + "' must be a JSON object");
  }

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("bad value for '" + path_ + "." + key + "': " + e.what());
    }
  }

  const nlohmann::json* sub(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string child(const std::string& key) const { return path_ + "." + key; }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw ConfigError("unknown key '" + path_ + "." + item.key() + "'");
    }
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json plant_base = c.plant_base;
  plant_base.erase("kind");
  return {
      {"plant", to_string(c.plant)},
      {"plant_base", plant_base},
      {"source",
       {{"n_source", c.source.n_source},
        {"source_length", c.source.source_length},
        {"n_targets", c.source.n_targets},
        {"target_points", c.source.target_points},
        {"amplitude", c.source.amplitude},
        {"kp", c.source.kp},
        {"kd", c.source.kd},
        {"init_std", c.source.init_std},
        {"noise_std", c.source.noise_std}}},
      {"nssm", c.nssm},
      {"meta", c.meta},
      {"mpc",
       {{"horizon", c.mpc.horizon},
        {"q", c.mpc.q},
        {"r", c.mpc.r},
        {"u_min", c.mpc.u_min},
        {"u_max", c.mpc.u_max},
        {"qp_iters", c.mpc.qp_iters},
        {"qp_tol", c.mpc.qp_tol},
        {"dare_tol", c.mpc.dare_tol},
        {"dare_max_iters", c.mpc.dare_max_iters}}},
      {"adapt", {{"checkpoints", c.adapt.checkpoints}, {"beta", c.adapt.beta}}},
      {"collect_reference",
       {{"kind", c.collect_reference.kind},
        {"radius", c.collect_reference.radius},
        {"omega0", c.collect_reference.omega0}}},
      {"track_reference",
       {{"kind", c.track_reference.kind},
        {"radius", c.track_reference.radius},
        {"omega0", c.track_reference.omega0}}},
      {"collect_abort", c.collect_abort},
      {"track_abort", c.track_abort},
      {"track_episode", c.track_episode},
      {"checkpoint_every", c.checkpoint_every},
      {"timing", c.timing},
      {"seeds", c.seeds},
      {"out_dir", c.out_dir},
  };
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  JsonReader root(j, "config");
  std::string plant = "vdp";
  root.get("plant", plant);
  ExperimentConfig c = ExperimentConfig::defaults(plant_kind_from_string(plant));

  if (const auto* p = root.sub("plant_base")) {
    JsonReader r(*p, root.child("plant_base"));
    r.get("theta", c.plant_base.theta);
    r.get("mass", c.plant_base.mass);
    r.get("length", c.plant_base.length);
    r.get("gravity", c.plant_base.gravity);
    r.get("max_torque", c.plant_base.max_torque);
    r.get("max_speed", c.plant_base.max_speed);
    r.get("dt", c.plant_base.dt);
    r.finish();
  }
  if (const auto* p = root.sub("source")) {
    JsonReader r(*p, root.child("source"));
    r.get("n_source", c.source.n_source);
    r.get("source_length", c.source.source_length);
    r.get("n_targets", c.source.n_targets);
    r.get("target_points", c.source.target_points);
    r.get("amplitude", c.source.amplitude);
    r.get("kp", c.source.kp);
    r.get("kd", c.source.kd);
    r.get("init_std", c.source.init_std);
    r.get("noise_std", c.source.noise_std);
    r.finish();
  }
  if (const auto* p = root.sub("nssm")) {
    JsonReader r(*p, root.child("nssm"));
    r.get("n_u", c.nssm.n_u);
    r.get("n_y", c.nssm.n_y);
    r.get("n_z", c.nssm.n_z);
    r.get("history", c.nssm.history);
    r.get("horizon", c.nssm.horizon);
    r.get("hidden_width", c.nssm.hidden_width);
    r.get("hidden_layers", c.nssm.hidden_layers);
    r.finish();
  }
  if (const auto* p = root.sub("meta")) {
    JsonReader r(*p, root.child("meta"));
    r.get("gamma", c.meta.gamma);
    r.get("beta_out", c.meta.beta_out);
    r.get("beta_in", c.meta.beta_in);
    r.get("inner_steps", c.meta.inner_steps);
    r.get("cg_iters", c.meta.cg_iters);
    r.get("cg_tol", c.meta.cg_tol);
    r.get("batch_size", c.meta.batch_size);
    r.get("outer_iters", c.meta.outer_iters);
    r.get("explore_std", c.meta.explore_std);
    r.get("windows_per_task", c.meta.windows_per_task);
    r.get("train_fraction", c.meta.train_fraction);
    r.get("episode_len", c.meta.episode_len);
    r.get("clip_norm", c.meta.clip_norm);
    r.finish();
  }
  if (const auto* p = root.sub("mpc")) {
    JsonReader r(*p, root.child("mpc"));
    r.get("horizon", c.mpc.horizon);
    r.get("q", c.mpc.q);
    r.get("r", c.mpc.r);
    r.get("u_min", c.mpc.u_min);
    r.get("u_max", c.mpc.u_max);
    r.get("qp_iters", c.mpc.qp_iters);
    r.get("qp_tol", c.mpc.qp_tol);
    r.get("dare_tol", c.mpc.dare_tol);
    r.get("dare_max_iters", c.mpc.dare_max_iters);
    r.finish();
  }
  if (const auto* p = root.sub("adapt")) {
    JsonReader r(*p, root.child("adapt"));
    r.get("checkpoints", c.adapt.checkpoints);
    r.get("beta", c.adapt.beta);
    r.finish();
  }
  for (auto [key, ref] : {std::pair{"collect_reference", &c.collect_reference},
                          std::pair{"track_reference", &c.track_reference}}) {
    if (const auto* p = root.sub(key)) {
      JsonReader r(*p, root.child(key));
      r.get("kind", ref->kind);
      r.get("radius", ref->radius);
      r.get("omega0", ref->omega0);
      r.finish();
    }
  }
  root.get("collect_abort", c.collect_abort);
  root.get("track_abort", c.track_abort);
  root.get("track_episode", c.track_episode);
  root.get("checkpoint_every", c.checkpoint_every);
  root.get("timing", c.timing);
  root.get("seeds", c.seeds);
  root.get("out_dir", c.out_dir);
  root.finish();
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config '" + path.string() + "': " + e.what());
  }
  return config_from_json(j);
}

inline void save_config(const fs::path& path, const ExperimentConfig& c) {
  write_text(path, to_json(c).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Layout of a run directory: <out>/seed_<s>/{source,target,<algorithm>}

inline fs::path seed_dir(const fs::path& out, std::uint64_t seed) {
  return out / ("seed_" + std::to_string(seed));
}

inline std::string indexed(const std::string& stem, std::size_t i) {
  std::ostringstream os;
  os << stem << '_';
  os.width(3);
  os.fill('0');
  os << i;
  return os.str();
}

inline std::vector<TrajectoryDataset> read_dataset_dir(const fs::path& dir,
                                                       const std::string& stem) {
  std::vector<TrajectoryDataset> out;
  for (std::size_t i = 0;; ++i) {
    const fs::path p = dir / indexed(stem, i);
    if (!fs::exists(p.string() + ".json")) break;
    out.push_back(read_dataset(p));
  }
  if (out.empty()) throw ConfigError("no datasets named " + stem + "_* in '" + dir.string() + "'");
  return out;
}

inline void write_dataset_dir(const fs::path& dir, const std::string& stem,
                              const std::vector<TrajectoryDataset>& data) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < data.size(); ++i) write_dataset(dir / indexed(stem, i), data[i]);
}

inline Reference make_reference(const ReferenceSpec& r, double dt, int n_y) {
  if (r.kind == "circle") {
    return [r, dt](Eigen::Index t) -> Eigen::VectorXd {
      const double a = r.omega0 * double(t) * dt;
      return Eigen::Vector2d(r.radius * std::cos(a), -r.radius * std::sin(a));
    };
  }
  return [n_y](Eigen::Index) -> Eigen::VectorXd { return Eigen::VectorXd::Zero(n_y); };
}

/// Excitation on top of a stabilizing state feedback, clipped to the input box.
inline TrajectoryDataset bootstrap_trajectory(const PlantParams& p, const SourceSpec& s,
                                              double u_min, double u_max, Eigen::Index length,
                                              std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, 0));
  std::normal_distribution<double> normal(0.0, s.init_std);
  const Eigen::Vector2d x0(normal(rng), p.kind == PlantKind::kVanDerPol ? normal(rng) : 0.0);
  const Eigen::MatrixXd e = excitation(length, p.n_u(), s.amplitude, derive_seed(seed, 1));
  const Policy policy = [&](Eigen::Index k, const Eigen::VectorXd& x) -> Eigen::VectorXd {
    return Eigen::VectorXd::Constant(1, std::clamp(-s.kp * x[0] - s.kd * x[1] + e(k, 0), u_min, u_max));
  };
  return simulate(p, policy, length, x0, 0.0, 0);
}

inline void add_output_noise(TrajectoryDataset& d, double std_physical_scale,
                             const Eigen::VectorXd& y_scale, std::uint64_t seed) {
  if (std_physical_scale <= 0.0) return;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index k = 0; k < d.y.rows(); ++k) {
    for (Eigen::Index i = 0; i < d.y.cols(); ++i) {
      d.y(k, i) += std_physical_scale * y_scale[i] * normal(rng);
    }
  }
}

// ---------------------------------------------------------------------------
// Commands

/// Source and target datasets for one seed, standardized with the source scaler.
inline void cmd_make_source(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& out) {
  cfg.validate();
  const fs::path dir = seed_dir(out, seed);
  // Stale task files from a larger earlier run would otherwise be picked up.
  fs::remove_all(dir / "source");
  fs::remove_all(dir / "target");
  fs::create_directories(dir);
  save_config(dir / "config.json", cfg);
  const auto src_params =
      sample_params(cfg.plant, cfg.source.n_source, derive_seed(seed, 1), cfg.plant_base);
  const auto tgt_params =
      sample_params(cfg.plant, cfg.source.n_targets, derive_seed(seed, 2), cfg.plant_base);

  std::vector<TrajectoryDataset> src, tgt;
  for (std::size_t i = 0; i < src_params.size(); ++i) {
    src.push_back(bootstrap_trajectory(src_params[i], cfg.source, cfg.mpc.u_min, cfg.mpc.u_max,
                                       cfg.source.source_length, derive_seed(seed, 10, i)));
  }
  for (std::size_t i = 0; i < tgt_params.size(); ++i) {
    tgt.push_back(bootstrap_trajectory(tgt_params[i], cfg.source, cfg.mpc.u_min, cfg.mpc.u_max,
                                       cfg.source.target_points, derive_seed(seed, 20, i)));
  }
  const Scaler scaler = fit_scaler(src);
  for (std::size_t i = 0; i < src.size(); ++i) {
    add_output_noise(src[i], cfg.source.noise_std, scaler.y_scale, derive_seed(seed, 11, i));
    src[i] = apply_scaler(std::move(src[i]), scaler);
  }
  for (std::size_t i = 0; i < tgt.size(); ++i) {
    add_output_noise(tgt[i], cfg.source.noise_std, scaler.y_scale, derive_seed(seed, 21, i));
    tgt[i] = apply_scaler(std::move(tgt[i]), scaler);
  }
  write_dataset_dir(dir / "source", "task", src);
  write_dataset_dir(dir / "target", "target", tgt);
}

inline const char* kMetricsHeader = "outer_iter,algorithm,mean_test_loss,grad_norm,wall_ms\n";

inline CollectSpec collect_spec(const ExperimentConfig& cfg) {
  CollectSpec c;
  c.mpc = cfg.mpc.spec(cfg.nssm.n_u, cfg.nssm.n_y);
  c.reference = make_reference(cfg.collect_reference, cfg.plant_base.dt, cfg.nssm.n_y);
  c.noise_std = cfg.source.noise_std;
  c.abort_norm = cfg.collect_abort;
  const Eigen::Index len = cfg.nssm.history + cfg.nssm.horizon;
  c.reset = [cfg, len](const TrajectoryDataset& d, std::uint64_t seed) {
    TrajectoryDataset fresh =
        bootstrap_trajectory(d.plant, cfg.source, cfg.mpc.u_min, cfg.mpc.u_max, len, seed);
    add_output_noise(fresh, cfg.source.noise_std, d.scaler.y_scale, derive_seed(seed, 2));
    return apply_scaler(std::move(fresh), d.scaler);
  };
  return c;
}

inline ParamVector initial_params(const Nssm& model, std::uint64_t seed) {
  return model.init(derive_seed(seed, 3));
}

/// Meta-training from scratch, or from `<alg>/iter_<resume>` when given.
/// Writes metrics.csv, checkpoint.json and a resumable state every checkpoint_every iterations.
inline void cmd_meta_train(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& out,
                           Algorithm alg, std::optional<int> resume = std::nullopt) {
  cfg.validate();
  if (alg == Algorithm::kSupervised) throw ConfigError("meta-train needs --algorithm imaml or maml");
  const fs::path dir = seed_dir(out, seed);
  const fs::path adir = dir / to_string(alg);
  fs::create_directories(adir);
  const Nssm model(cfg.nssm);
  const CollectSpec collect = collect_spec(cfg);

  ParamVector omega = initial_params(model, seed);
  std::vector<TrajectoryDataset> tasks;
  std::string metrics = kMetricsHeader;
  int start = 0;
  if (resume) {
    const fs::path state = adir / ("iter_" + std::to_string(*resume));
    const Checkpoint ck = read_checkpoint((state / "checkpoint.json").string());
    if (!(ck.config == cfg.nssm)) throw ConfigError("resume checkpoint has a different nssm config");
    omega = ck.params;
    tasks = read_dataset_dir(state / "source", "task");
    std::istringstream in(read_text(adir / "metrics.csv"));
    std::string line;
    std::getline(in, line);
    for (int i = 0; i < *resume && std::getline(in, line); ++i) metrics += line + "\n";
    start = *resume;
  } else {
    tasks = read_dataset_dir(dir / "source", "task");
  }
  if (int(tasks.size()) < cfg.meta.batch_size) {
    throw ConfigError("fewer source tasks than meta.batch_size");
  }

  for (int it = start; it < cfg.meta.outer_iters; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    OuterMetrics m;
    omega = outer_step(model, omega, tasks, cfg.meta, alg, collect, seed, std::uint64_t(it), m);
    const double ms =
        cfg.timing ? std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                         .count()
                   : 0.0;
    metrics += std::to_string(it) + "," + to_string(alg) + "," + format_double(m.mean_test_loss) +
               "," + format_double(m.grad_norm) + "," + format_double(std::round(ms)) + "\n";
    if ((it + 1) % cfg.checkpoint_every == 0 && it + 1 < cfg.meta.outer_iters) {
      const fs::path state = adir / ("iter_" + std::to_string(it + 1));
      fs::create_directories(state);
      write_checkpoint((state / "checkpoint.json").string(), cfg.nssm, omega);
      write_dataset_dir(state / "source", "task", tasks);
      write_text(adir / "metrics.csv", metrics);
    }
  }
  write_text(adir / "metrics.csv", metrics);
  write_checkpoint((adir / "checkpoint.json").string(), cfg.nssm, omega);
}

inline fs::path target_dir(const fs::path& out, std::uint64_t seed, Algorithm alg,
                           std::size_t target) {
  return seed_dir(out, seed) / to_string(alg) / indexed("target", target);
}

inline std::string step_name(int step) { return "step_" + std::to_string(step); }

/// Adapts to every target dataset: proximal descent from the meta-trained
/// weights (imaml), plain descent from them (maml), or plain descent from the
/// initial random weights (supervised).
inline void cmd_adapt(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& out,
                      Algorithm alg) {
  cfg.validate();
  const fs::path dir = seed_dir(out, seed);
  const Nssm model(cfg.nssm);
  ParamVector start = initial_params(model, seed);
  if (alg != Algorithm::kSupervised) {
    const Checkpoint ck = read_checkpoint((dir / to_string(alg) / "checkpoint.json").string());
    if (!(ck.config == cfg.nssm)) throw ConfigError("checkpoint has a different nssm config");
    start = ck.params;
  }
  const double gamma = alg == Algorithm::kImaml ? cfg.meta.gamma : 0.0;
  const auto targets = read_dataset_dir(dir / "target", "target");
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const WindowBatch batch = all_windows(targets[t], cfg.nssm.history, cfg.nssm.horizon);
    const fs::path tdir = target_dir(out, seed, alg, t);
    fs::create_directories(tdir);
    std::string csv = "step,loss\n";
    ParamVector psi = start;
    int done = 0;
    for (int k : cfg.adapt.checkpoints) {
      psi = proximal_descent(model, start, std::move(psi), batch, gamma, cfg.adapt.beta, k - done);
      done = k;
      const double loss = model.loss(psi, batch);
      if (!std::isfinite(loss)) throw NumericalError("adapt: non-finite target loss at step " + std::to_string(k));
      csv += std::to_string(k) + "," + format_double(loss) + "\n";
      write_checkpoint((tdir / (step_name(k) + ".json")).string(), cfg.nssm, psi);
    }
    write_text(tdir / "adapt_loss.csv", csv);
  }
}

inline std::string tracking_csv(const TrackResult& r) {
  std::ostringstream os;
  os << "t";
  for (Eigen::Index i = 0; i < r.y.cols(); ++i) os << ",y_" << i;
  for (Eigen::Index i = 0; i < r.yref.cols(); ++i) os << ",yref_" << i;
  for (Eigen::Index i = 0; i < r.u.cols(); ++i) os << ",u_" << i;
  os << ",err\n";
  for (Eigen::Index k = 0; k < r.y.rows(); ++k) {
    os << k;
    for (Eigen::Index i = 0; i < r.y.cols(); ++i) os << ',' << format_double(r.y(k, i));
    for (Eigen::Index i = 0; i < r.yref.cols(); ++i) os << ',' << format_double(r.yref(k, i));
    for (Eigen::Index i = 0; i < r.u.cols(); ++i) os << ',' << format_double(r.u(k, i));
    os << ',' << format_double(r.err[k]) << '\n';
  }
  return os.str();
}

inline int constraint_violations(const TrackResult& r, const MpcSpec& spec) {
  int n = 0;
  for (Eigen::Index k = 0; k < r.u.rows(); ++k) {
    for (Eigen::Index i = 0; i < r.u.cols(); ++i) {
      n += (r.u(k, i) < spec.u_min[i] || r.u(k, i) > spec.u_max[i]) ? 1 : 0;
    }
  }
  return n;
}

/// Episode errors. A diverged episode is charged the error of the step that
/// left the envelope for every remaining step, which understates the true error.
inline std::pair<double, double> scored_errors(const TrackResult& r, Eigen::Index episode_len) {
  if (!r.aborted) return {r.mean_err(), r.final_err()};
  const double tail = r.abort_err * double(episode_len - r.err.size());
  return {(r.err.sum() + tail) / double(episode_len), r.abort_err};
}

/// Tracks the configured reference on each target plant with every adapted
/// checkpoint, continuing from the end of the target dataset.
inline void cmd_track(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& out,
                      Algorithm alg) {
  cfg.validate();
  const fs::path dir = seed_dir(out, seed);
  const Nssm model(cfg.nssm);
  const MpcSpec spec = cfg.mpc.spec(cfg.nssm.n_u, cfg.nssm.n_y);
  const Reference ref = make_reference(cfg.track_reference, cfg.plant_base.dt, cfg.nssm.n_y);
  const auto targets = read_dataset_dir(dir / "target", "target");
  const Eigen::Index H = cfg.nssm.history;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const TrajectoryDataset& d = targets[t];
    const fs::path tdir = target_dir(out, seed, alg, t);
    for (int k : cfg.adapt.checkpoints) {
      const Checkpoint ck = read_checkpoint((tdir / (step_name(k) + ".json")).string());
      if (!(ck.config == cfg.nssm)) throw ConfigError("adapted checkpoint has a different nssm config");
      Plant plant(d.plant, d.final_state);
      TrackOptions opt;
      opt.abort_norm = cfg.track_abort;
      const TrackResult r = receding_horizon_track(
          model, ck.params, d.scaler, plant, d.scaler.unscale_u(d.u.bottomRows(H)),
          d.scaler.unscale_y(d.y.bottomRows(H)), spec, ref, cfg.track_episode, opt);
      write_text(tdir / ("track_" + step_name(k) + ".csv"), tracking_csv(r));
      const auto [mean_err, final_err] = scored_errors(r, cfg.track_episode);
      const nlohmann::json summary = {{"mean_err", mean_err},
                                      {"final_err", final_err},
                                      {"constraint_violations", constraint_violations(r, spec)},
                                      {"dare_fallback", r.dare_fallback},
                                      {"diverged", r.aborted},
                                      {"steps", r.err.size()}};
      write_text(tdir / ("track_" + step_name(k) + ".json"), summary.dump(2) + "\n");
    }
  }
}

// ---------------------------------------------------------------------------
// Report

struct Aggregate {
  std::size_t n = 0;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
  double median = 0.0;
};

inline Aggregate aggregate(std::vector<double> v) {
  Aggregate a;
  a.n = v.size();
  if (v.empty()) return a;
  for (double x : v) a.mean += x;
  a.mean /= double(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - a.mean) * (x - a.mean);
    a.std = std::sqrt(ss / double(v.size() - 1));
  }
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  a.median = v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
  return a;
}

/// Reads a small numeric CSV with a header; returns the rows as strings.
inline std::vector<std::vector<std::string>> read_csv_rows(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  std::vector<std::vector<std::string>> rows;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

/// Per seed: target metrics averaged over targets. Key is (algorithm, steps, metric);
/// steps = -1 marks meta-training metrics.
using SeedMetrics = std::map<std::tuple<std::string, int, std::string>, double>;

inline SeedMetrics collect_seed_metrics(const fs::path& sdir) {
  std::map<std::tuple<std::string, int, std::string>, std::vector<double>> acc;
  for (Algorithm alg : {Algorithm::kImaml, Algorithm::kMaml, Algorithm::kSupervised}) {
    const std::string name = to_string(alg);
    const fs::path adir = sdir / name;
    if (!fs::is_directory(adir)) continue;
    if (fs::exists(adir / "metrics.csv")) {
      const auto rows = read_csv_rows(adir / "metrics.csv");
      if (!rows.empty()) {
        acc[{name, -1, "initial_test_loss"}].push_back(parse_double(rows.front().at(2)));
        acc[{name, -1, "final_test_loss"}].push_back(parse_double(rows.back().at(2)));
        acc[{name, -1, "final_log_test_loss"}].push_back(std::log(parse_double(rows.back().at(2))));
      }
    }
    for (std::size_t t = 0;; ++t) {
      const fs::path tdir = adir / indexed("target", t);
      if (!fs::is_directory(tdir)) break;
      if (fs::exists(tdir / "adapt_loss.csv")) {
        for (const auto& row : read_csv_rows(tdir / "adapt_loss.csv")) {
          acc[{name, std::stoi(row.at(0)), "target_loss"}].push_back(parse_double(row.at(1)));
        }
      }
      for (const auto& entry : fs::directory_iterator(tdir)) {
        const std::string fn = entry.path().filename().string();
        if (fn.rfind("track_step_", 0) != 0 || entry.path().extension() != ".json") continue;
        const int step = std::stoi(fn.substr(11));
        const auto j = nlohmann::json::parse(read_text(entry.path()));
        acc[{name, step, "mean_err"}].push_back(j.at("mean_err").get<double>());
        acc[{name, step, "final_err"}].push_back(j.at("final_err").get<double>());
        if (j.contains("diverged")) {
          acc[{name, step, "diverged"}].push_back(j.at("diverged").get<bool>() ? 1.0 : 0.0);
        }
      }
    }
  }
  SeedMetrics out;
  for (const auto& [key, v] : acc) out[key] = aggregate(v).mean;
  return out;
}

/// Aggregates every seed_* directory under `out` into report.csv.
inline std::string cmd_report(const fs::path& out) {
  if (!fs::is_directory(out)) throw ConfigError("no run directory '" + out.string() + "'");
  std::vector<fs::path> seeds;
  for (const auto& e : fs::directory_iterator(out)) {
    if (e.is_directory() && e.path().filename().string().rfind("seed_", 0) == 0) {
      seeds.push_back(e.path());
    }
  }
  std::sort(seeds.begin(), seeds.end());
  if (seeds.empty()) throw ConfigError("no seed_* directories in '" + out.string() + "'");
  std::map<std::tuple<std::string, int, std::string>, std::vector<double>> all;
  for (const auto& s : seeds) {
    for (const auto& [key, v] : collect_seed_metrics(s)) all[key].push_back(v);
  }
  std::string csv = "algorithm,steps,metric,n,mean,std,median\n";
  for (const auto& [key, v] : all) {
    const Aggregate a = aggregate(v);
    csv += std::get<0>(key) + "," + std::to_string(std::get<1>(key)) + "," + std::get<2>(key) +
           "," + std::to_string(a.n) + "," + format_double(a.mean) + "," + format_double(a.std) +
           "," + format_double(a.median) + "\n";
  }
  write_text(out / "report.csv", csv);
  return csv;
}

}  // namespace metassm
