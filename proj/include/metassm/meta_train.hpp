#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "metassm/descent.hpp"
#include "metassm/errors.hpp"
#include "metassm/mpc.hpp"
#include "metassm/nssm.hpp"
#include "metassm/plants.hpp"
#include "metassm/util.hpp"

namespace metassm {

struct MetaConfig {
  double gamma = 1.0;
  double beta_out = 0.1;
  double beta_in = 1e-3;
  int inner_steps = 10;
  int cg_iters = 20;
  double cg_tol = 1e-6;
  int batch_size = 16;
  int outer_iters = 500;
  double explore_std = 0.1;
  int windows_per_task = 32;
  double train_fraction = 0.5;
  int episode_len = 50;
  // Rescales the averaged meta-gradient to at most this norm; 0 keeps plain steps.
  double clip_norm = 0.0;

  void validate() const {
    if (!(gamma > 0.0)) throw ConfigError("meta.gamma must be positive");
    if (!(beta_out > 0.0) || !(beta_in > 0.0)) throw ConfigError("meta learning rates must be positive");
    if (inner_steps < 1) throw ConfigError("meta.inner_steps must be >= 1");
    if (cg_iters < 1 || !(cg_tol > 0.0)) throw ConfigError("meta CG settings must be positive");
    if (batch_size < 1) throw ConfigError("meta.batch_size must be >= 1");
    if (outer_iters < 0) throw ConfigError("meta.outer_iters must be >= 0");
    if (explore_std < 0.0) throw ConfigError("meta.explore_std must be >= 0");
    if (windows_per_task < 2) throw ConfigError("meta.windows_per_task must be >= 2");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
      throw ConfigError("meta.train_fraction must lie in (0, 1)");
    }
    if (episode_len < 0) throw ConfigError("meta.episode_len must be >= 0");
    if (!(clip_norm >= 0.0)) throw ConfigError("meta.clip_norm must be >= 0");
  }

  bool operator==(const MetaConfig&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(MetaConfig, gamma, beta_out, beta_in, inner_steps, cg_iters,
                                   cg_tol, batch_size, outer_iters, explore_std, windows_per_task,
                                   train_fraction, episode_len, clip_norm)

enum class Algorithm { kImaml, kMaml, kSupervised };

inline std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::kImaml: return "imaml";
    case Algorithm::kMaml: return "maml";
    case Algorithm::kSupervised: return "supervised";
  }
  return "?";
}

inline Algorithm algorithm_from_string(const std::string& s) {
  if (s == "imaml") return Algorithm::kImaml;
  if (s == "maml") return Algorithm::kMaml;
  if (s == "supervised") return Algorithm::kSupervised;
  throw ConfigError("unknown algorithm '" + s + "' (expected imaml, maml or supervised)");
}

// ---------------------------------------------------------------------------
// Windows

/// First rows of every window of H + T rows that fits inside one segment.
inline std::vector<Eigen::Index> window_starts(const TrajectoryDataset& d, int H, int T) {
  std::vector<Eigen::Index> starts;
  const Eigen::Index span = H + T;
  for (std::size_t s = 0; s < d.segments.size(); ++s) {
    const Eigen::Index begin = d.segments[s];
    const Eigen::Index end = s + 1 < d.segments.size() ? d.segments[s + 1] : d.length();
    for (Eigen::Index k = begin; k + span <= end; ++k) starts.push_back(k);
  }
  return starts;
}

/// Windows at the given start rows, in order.
inline WindowBatch extract_windows(const TrajectoryDataset& d, int H, int T,
                                   const std::vector<Eigen::Index>& starts) {
  const Eigen::Index nu = d.u.cols(), ny = d.y.cols(), n = Eigen::Index(starts.size());
  WindowBatch b;
  b.history_u.resize(H * nu, n);
  b.history_y.resize(H * ny, n);
  b.future_u.resize(T * nu, n);
  b.future_y.resize(T * ny, n);
  for (Eigen::Index c = 0; c < n; ++c) {
    const Eigen::Index s = starts[std::size_t(c)];
    for (int k = 0; k < H; ++k) {
      b.history_u.block(k * nu, c, nu, 1) = d.u.row(s + k).transpose();
      b.history_y.block(k * ny, c, ny, 1) = d.y.row(s + k).transpose();
    }
    for (int k = 0; k < T; ++k) {
      b.future_u.block(k * nu, c, nu, 1) = d.u.row(s + H + k).transpose();
      b.future_y.block(k * ny, c, ny, 1) = d.y.row(s + H + k).transpose();
    }
  }
  return b;
}

/// Every window of the dataset.
inline WindowBatch all_windows(const TrajectoryDataset& d, int H, int T) {
  const auto starts = window_starts(d, H, T);
  if (starts.empty()) throw ConfigError("dataset too short for one window of H + T steps");
  return extract_windows(d, H, T, starts);
}

/// Uniformly sampled windows; without replacement while distinct starts remain.
inline WindowBatch sample_windows(const TrajectoryDataset& d, int H, int T, int count,
                                  std::uint64_t seed,
                                  std::vector<Eigen::Index>* starts_out = nullptr) {
  if (count < 1) throw ConfigError("sample_windows: count must be >= 1");
  std::vector<Eigen::Index> all = window_starts(d, H, T);
  if (all.empty()) {
    throw ConfigError("dataset too short: " + std::to_string(d.length()) + " rows, need " +
                      std::to_string(H + T));
  }
  std::mt19937_64 rng(seed);
  std::shuffle(all.begin(), all.end(), rng);
  std::vector<Eigen::Index> picked(all.begin(),
                                   all.begin() + std::min<std::ptrdiff_t>(count, all.size()));
  std::uniform_int_distribution<std::size_t> any(0, all.size() - 1);
  while (picked.size() < std::size_t(count)) picked.push_back(all[any(rng)]);
  if (starts_out) *starts_out = picked;
  return extract_windows(d, H, T, picked);
}

template <class Batch>
struct TaskSplit {
  Batch train;
  Batch test;
  std::vector<Eigen::Index> train_idx;
  std::vector<Eigen::Index> test_idx;
};

/// Random disjoint split: ceil(f * count) windows train, the rest test.
inline TaskSplit<WindowBatch> partition(const WindowBatch& batch, double train_fraction,
                                        std::uint64_t seed) {
  const Eigen::Index n = batch.count();
  if (n < 2) throw ConfigError("partition: need at least 2 windows");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ConfigError("partition: train_fraction must lie in (0, 1)");
  }
  const Eigen::Index n_tr =
      std::clamp<Eigen::Index>(Eigen::Index(std::ceil(train_fraction * double(n))), 1, n - 1);
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Eigen::Index(0));
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  TaskSplit<WindowBatch> s;
  s.train_idx.assign(idx.begin(), idx.begin() + n_tr);
  s.test_idx.assign(idx.begin() + n_tr, idx.end());
  s.train = batch.select(s.train_idx);
  s.test = batch.select(s.test_idx);
  return s;
}

// ---------------------------------------------------------------------------
// Inner loops and the implicit meta-gradient

template <Objective O>
ParamVector inner_adapt_imaml(const O& obj, const ParamVector& omega,
                              const typename O::Batch& train, const MetaConfig& cfg) {
  if (cfg.inner_steps < 1) throw ConfigError("inner_steps must be >= 1");
  return proximal_descent(obj, omega, train, cfg.gamma, cfg.beta_in, cfg.inner_steps);
}

template <Objective O>
ParamVector inner_adapt_maml(const O& obj, const ParamVector& omega,
                             const typename O::Batch& train, const MetaConfig& cfg) {
  if (cfg.inner_steps < 1) throw ConfigError("inner_steps must be >= 1");
  return proximal_descent(obj, omega, train, 0.0, cfg.beta_in, cfg.inner_steps);
}

template <Objective O>
ParamVector supervised_train(const O& obj, const ParamVector& omega0,
                             const typename O::Batch& data, int steps, double beta) {
  return proximal_descent(obj, omega0, data, 0.0, beta, steps);
}

struct CgResult {
  ParamVector g;
  int iterations = 0;
  double residual_norm = 0.0;
  double test_loss = 0.0;
  /// 0.5 phi^T Q phi - phi^T P after each iteration.
  std::vector<double> objective;
};

/// Solves (I + H_tr / gamma) phi = grad loss(test) at omega_b by conjugate gradient.
template <Objective O>
CgResult cg_solve_meta_gradient(const O& obj, const ParamVector& omega_b,
                                const TaskSplit<typename O::Batch>& split,
                                const MetaConfig& cfg) {
  if (!(cfg.gamma > 0.0)) throw ConfigError("cg_solve_meta_gradient: gamma must be positive");
  CgResult out;
  const ParamVector P = obj.loss_and_gradient(omega_b, split.test, out.test_loss);
  if (!std::isfinite(out.test_loss) || !P.values().allFinite()) {
    throw NumericalError("cg_solve_meta_gradient: non-finite test loss");
  }
  const double p_norm = norm(P);
  ParamVector phi = ParamVector::zeros(P.layout());
  out.g = phi;
  if (p_norm == 0.0) return out;
  ParamVector r = P;
  ParamVector dir = r;
  double rs = dot(r, r);
  for (int i = 0; i < cfg.cg_iters; ++i) {
    const ParamVector Qd = axpy(1.0 / cfg.gamma, obj.hvp(omega_b, split.train, dir), dir);
    const double curv = dot(dir, Qd);
    if (!(curv > 0.0)) throw NumericalError("Q^b not positive definite; increase gamma");
    const double alpha = rs / curv;
    phi = axpy(alpha, dir, phi);
    r = axpy(-alpha, Qd, r);
    const double rs_new = dot(r, r);
    out.iterations = i + 1;
    out.objective.push_back(-0.5 * (dot(phi, P) + dot(phi, r)));
    if (std::sqrt(rs_new) <= cfg.cg_tol * p_norm) {
      rs = rs_new;
      break;
    }
    dir = axpy(rs_new / rs, dir, r);
    rs = rs_new;
  }
  out.residual_norm = std::sqrt(rs);
  out.g = std::move(phi);
  return out;
}

template <class Batch>
struct TaskOutcome {
  ParamVector omega_b;
  ParamVector g;
  double test_loss = 0.0;
};

/// Adaptation and meta-gradient of one task.
template <Objective O>
TaskOutcome<typename O::Batch> task_meta_gradient(const O& obj, const ParamVector& omega,
                                                  const TaskSplit<typename O::Batch>& split,
                                                  const MetaConfig& cfg, Algorithm alg) {
  TaskOutcome<typename O::Batch> t;
  if (alg == Algorithm::kImaml) {
    t.omega_b = inner_adapt_imaml(obj, omega, split.train, cfg);
    CgResult cg = cg_solve_meta_gradient(obj, t.omega_b, split, cfg);
    t.g = std::move(cg.g);
    t.test_loss = cg.test_loss;
  } else if (alg == Algorithm::kMaml) {
    t.omega_b = inner_adapt_maml(obj, omega, split.train, cfg);
    t.g = obj.loss_and_gradient(t.omega_b, split.test, t.test_loss);
    if (!std::isfinite(t.test_loss)) throw NumericalError("non-finite test loss");
  } else {
    throw ConfigError("meta-training needs algorithm imaml or maml");
  }
  return t;
}

struct OuterMetrics {
  double mean_test_loss = 0.0;
  double grad_norm = 0.0;
  int dare_fallbacks = 0;
};

/// omega <- omega - beta_out * mean(g_b) over already-split tasks.
template <Objective O>
ParamVector outer_update(const O& obj, const ParamVector& omega,
                         const std::vector<TaskSplit<typename O::Batch>>& splits,
                         const MetaConfig& cfg, Algorithm alg, OuterMetrics& metrics,
                         std::vector<ParamVector>* adapted = nullptr) {
  if (splits.empty()) throw ConfigError("outer step needs at least one task");
  ParamVector mean_g = ParamVector::zeros(omega.layout());
  double loss = 0.0;
  for (std::size_t b = 0; b < splits.size(); ++b) {
    try {
      auto t = task_meta_gradient(obj, omega, splits[b], cfg, alg);
      mean_g += t.g;
      loss += t.test_loss;
      if (adapted) adapted->push_back(std::move(t.omega_b));
    } catch (const NumericalError& e) {
      throw NumericalError("task " + std::to_string(b) + ": " + e.what());
    }
  }
  mean_g *= 1.0 / double(splits.size());
  metrics.mean_test_loss = loss / double(splits.size());
  metrics.grad_norm = norm(mean_g);
  if (cfg.clip_norm > 0.0 && metrics.grad_norm > cfg.clip_norm) {
    mean_g *= cfg.clip_norm / metrics.grad_norm;
  }
  return axpy(-cfg.beta_out, mean_g, omega);
}

// ---------------------------------------------------------------------------
// Source tasks and closed-loop augmentation

struct CollectSpec {
  MpcSpec mpc;             // box in physical units
  Reference reference;     // physical units, indexed from the episode start
  double noise_std = 0.0;  // output noise, standardized units
  // Safe envelope on the physical outputs; an episode that leaves it is cut
  // short and the task restarts from a fresh segment produced by `reset`.
  double abort_norm = 0.0;
  std::function<TrajectoryDataset(const TrajectoryDataset&, std::uint64_t)> reset;  // standardized
};

/// Runs the MPC on omega_b against the task's true plant, continuing from the
/// dataset's final state, and appends the episode.
inline TrajectoryDataset collect_closed_loop(const Nssm& model, const ParamVector& omega_b,
                                             TrajectoryDataset data, const CollectSpec& spec,
                                             const MetaConfig& cfg, std::uint64_t seed,
                                             bool* dare_fallback = nullptr) {
  const int H = model.config().history;
  if (data.length() < H) throw ConfigError("collect_closed_loop: dataset shorter than H");
  if (data.final_state.size() != data.plant.n_x()) {
    throw ConfigError("collect_closed_loop: dataset has no final plant state");
  }
  if (cfg.episode_len == 0) return data;
  Plant plant(data.plant, data.final_state);
  TrackOptions opt;
  opt.explore_std = cfg.explore_std;
  opt.noise_std = spec.noise_std;
  opt.seed = seed;
  opt.abort_norm = spec.abort_norm;
  const TrackResult r = receding_horizon_track(
      model, omega_b, data.scaler, plant, data.scaler.unscale_u(data.u.bottomRows(H)),
      data.scaler.unscale_y(data.y.bottomRows(H)), spec.mpc, spec.reference, cfg.episode_len, opt);
  if (dare_fallback) *dare_fallback = r.dare_fallback;
  if (r.u.rows() > 0) data.append(data.scaler.scale_u(r.u), data.scaler.scale_y(r.y), true);
  data.final_state = r.final_state;
  if (r.aborted) {
    if (!spec.reset) throw NumericalError("closed-loop episode left the safe region");
    const TrajectoryDataset fresh = spec.reset(data, derive_seed(seed, 7));
    if (fresh.length() < H) throw ConfigError("collect_closed_loop: reset segment shorter than H");
    data.append(fresh.u, fresh.y, false);
    data.final_state = fresh.final_state;
  }
  return data;
}

/// B distinct task indices out of n.
inline std::vector<std::size_t> sample_tasks(std::size_t n, int B, std::uint64_t seed) {
  if (std::size_t(B) > n) throw ConfigError("batch_size exceeds the number of source tasks");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t(0));
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::size_t(B));
  return idx;
}

/// One outer iteration of meta-training on NSSM source tasks. Task datasets
/// grow in place through closed-loop collection. Randomness derives from
/// (seed, iter, task index).
inline ParamVector outer_step(const Nssm& model, const ParamVector& omega,
                              std::vector<TrajectoryDataset>& tasks, const MetaConfig& cfg,
                              Algorithm alg, const CollectSpec& collect, std::uint64_t seed,
                              std::uint64_t iter, OuterMetrics& metrics) {
  cfg.validate();
  const auto& nc = model.config();
  const auto picked = sample_tasks(tasks.size(), cfg.batch_size, derive_seed(seed, iter));
  std::vector<TaskSplit<WindowBatch>> splits;
  splits.reserve(picked.size());
  for (std::size_t b = 0; b < picked.size(); ++b) {
    const std::size_t k = picked[b];
    try {
      const WindowBatch w = sample_windows(tasks[k], nc.history, nc.horizon,
                                           cfg.windows_per_task, derive_seed(seed, iter, k, 1));
      splits.push_back(partition(w, cfg.train_fraction, derive_seed(seed, iter, k, 2)));
    } catch (const ConfigError& e) {
      throw ConfigError("task " + std::to_string(k) + ": " + e.what());
    }
  }
  std::vector<ParamVector> adapted;
  const ParamVector next = outer_update(model, omega, splits, cfg, alg, metrics, &adapted);
  metrics.dare_fallbacks = 0;
  for (std::size_t b = 0; b < picked.size(); ++b) {
    const std::size_t k = picked[b];
    bool fallback = false;
    try {
      tasks[k] = collect_closed_loop(model, adapted[b], std::move(tasks[k]), collect, cfg,
                                     derive_seed(seed, iter, k, 3), &fallback);
    } catch (const NumericalError& e) {
      throw NumericalError("task " + std::to_string(k) + ": " + e.what());
    }
    metrics.dare_fallbacks += fallback ? 1 : 0;
  }
  return next;
}

inline ParamVector outer_step_imaml(const Nssm& model, const ParamVector& omega,
                                    std::vector<TrajectoryDataset>& tasks, const MetaConfig& cfg,
                                    const CollectSpec& collect, std::uint64_t seed,
                                    std::uint64_t iter, OuterMetrics& metrics) {
  return outer_step(model, omega, tasks, cfg, Algorithm::kImaml, collect, seed, iter, metrics);
}

inline ParamVector outer_step_maml(const Nssm& model, const ParamVector& omega,
                                   std::vector<TrajectoryDataset>& tasks, const MetaConfig& cfg,
                                   const CollectSpec& collect, std::uint64_t seed,
                                   std::uint64_t iter, OuterMetrics& metrics) {
  return outer_step(model, omega, tasks, cfg, Algorithm::kMaml, collect, seed, iter, metrics);
}

}  // namespace metassm
