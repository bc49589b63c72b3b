#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <utility>

#include "metassm/descent.hpp"
#include "metassm/errors.hpp"
#include "metassm/nssm.hpp"
#include "metassm/plants.hpp"

namespace metassm {

/// Lifted linear model in s = [z; y]: s+ = A s + B u, y = S s.
struct CompactModel {
  Eigen::MatrixXd A;
  Eigen::MatrixXd B;
  Eigen::Index n_z = 0;
  Eigen::Index n_y = 0;

  Eigen::Index n_s() const { return n_z + n_y; }
  Eigen::Index n_u() const { return B.cols(); }

  /// Picks the last n_y components of s.
  Eigen::MatrixXd selector() const {
    Eigen::MatrixXd S = Eigen::MatrixXd::Zero(n_y, n_s());
    S.rightCols(n_y).setIdentity();
    return S;
  }
};

inline CompactModel lift(const Eigen::MatrixXd& A_z, const Eigen::MatrixXd& B_z,
                         const Eigen::MatrixXd& C_z) {
  const Eigen::Index nz = A_z.rows(), ny = C_z.rows(), nu = B_z.cols();
  if (A_z.cols() != nz || B_z.rows() != nz || C_z.cols() != nz) {
    throw ConfigError("lift: inconsistent latent matrix shapes");
  }
  CompactModel m;
  m.n_z = nz;
  m.n_y = ny;
  m.A = Eigen::MatrixXd::Zero(nz + ny, nz + ny);
  m.A.topLeftCorner(nz, nz) = A_z;
  m.A.bottomLeftCorner(ny, nz) = C_z * A_z;
  m.B.resize(nz + ny, nu);
  m.B.topRows(nz) = B_z;
  m.B.bottomRows(ny) = C_z * B_z;
  return m;
}

inline CompactModel lift(const Nssm& model, const ParamVector& w) {
  require_same_layout(model.layout(), w.layout());
  return lift(w.tensor("A_z"), w.tensor("B_z"), w.tensor("C_z"));
}

// ---------------------------------------------------------------------------
// Riccati

inline double dare_residual(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                            const Eigen::MatrixXd& Q, const Eigen::MatrixXd& R,
                            const Eigen::MatrixXd& P) {
  const Eigen::MatrixXd PB = P * B;
  const Eigen::MatrixXd G = (R + B.transpose() * PB).ldlt().solve(PB.transpose());
  const Eigen::MatrixXd rhs = A.transpose() * (P - PB * G) * A + Q;
  return (P - rhs).cwiseAbs().maxCoeff();
}

/// Fixed-point iteration from P = Q until successive iterates differ by at most tol.
inline Eigen::MatrixXd solve_dare(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                                  const Eigen::MatrixXd& Q, const Eigen::MatrixXd& R,
                                  double tol = 1e-10, int max_iters = 10000) {
  const Eigen::Index n = A.rows();
  if (A.cols() != n || B.rows() != n || Q.rows() != n || Q.cols() != n ||
      R.rows() != B.cols() || R.cols() != B.cols()) {
    throw ConfigError("solve_dare: dimension mismatch");
  }
  Eigen::MatrixXd P = Q;
  for (int it = 0; it < max_iters; ++it) {
    const Eigen::MatrixXd PB = P * B;
    const Eigen::MatrixXd G = (R + B.transpose() * PB).ldlt().solve(PB.transpose());
    Eigen::MatrixXd next = A.transpose() * (P - PB * G) * A + Q;
    next = 0.5 * (next + next.transpose()).eval();
    if (!next.allFinite()) break;
    const double diff = (next - P).cwiseAbs().maxCoeff();
    P = std::move(next);
    if (diff <= tol) return P;
  }
  throw NumericalError("solve_dare: no convergence in " + std::to_string(max_iters) +
                       " iterations");
}

struct TerminalWeight {
  Eigen::MatrixXd P_y;  // output block of the lifted Riccati solution
  bool fallback = false;
};

/// Solves the DARE with Q_s = S^T Q S and keeps the output block; on
/// non-convergence falls back to P_s = Q_s.
inline TerminalWeight terminal_weight(const CompactModel& m, const Eigen::MatrixXd& Q,
                                      const Eigen::MatrixXd& R, double tol, int max_iters) {
  const Eigen::MatrixXd S = m.selector();
  const Eigen::MatrixXd Qs = S.transpose() * Q * S;
  TerminalWeight t;
  try {
    t.P_y = solve_dare(m.A, m.B, Qs, R, tol, max_iters).bottomRightCorner(m.n_y, m.n_y);
  } catch (const NumericalError&) {
    t.P_y = Q;
    t.fallback = true;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Tracking QP

struct MpcSpec {
  int horizon = 20;
  Eigen::MatrixXd Q;
  Eigen::MatrixXd R;
  Eigen::VectorXd u_min;
  Eigen::VectorXd u_max;
  int qp_iters = 500;
  double qp_tol = 1e-8;
  double dare_tol = 1e-10;
  int dare_max_iters = 10000;

  static MpcSpec defaults(int n_u, int n_y, double box) {
    MpcSpec s;
    s.Q = Eigen::MatrixXd::Identity(n_y, n_y);
    s.R = 0.1 * Eigen::MatrixXd::Identity(n_u, n_u);
    s.u_min = Eigen::VectorXd::Constant(n_u, -box);
    s.u_max = Eigen::VectorXd::Constant(n_u, box);
    return s;
  }

  void validate(Eigen::Index n_u, Eigen::Index n_y) const {
    if (horizon < 1) throw ConfigError("mpc horizon must be >= 1");
    if (Q.rows() != n_y || Q.cols() != n_y) throw ConfigError("mpc Q must be n_y x n_y");
    if (R.rows() != n_u || R.cols() != n_u) throw ConfigError("mpc R must be n_u x n_u");
    if (u_min.size() != n_u || u_max.size() != n_u) throw ConfigError("mpc box has wrong size");
    if ((u_min.array() >= u_max.array()).any()) throw ConfigError("mpc box needs u_min < u_max");
    if (!Q.isApprox(Q.transpose()) || !R.isApprox(R.transpose())) {
      throw ConfigError("mpc Q and R must be symmetric");
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eq(Q), er(R);
    if (eq.eigenvalues().minCoeff() < -1e-12) throw ConfigError("mpc Q must be PSD");
    if (er.eigenvalues().minCoeff() <= 0.0) throw ConfigError("mpc R must be PD");
    if (qp_iters < 1 || !(qp_tol > 0.0)) throw ConfigError("mpc QP settings must be positive");
  }
};

/// min 0.5 U^T H U + f^T U subject to lower <= U <= upper.
struct BoxQp {
  Eigen::MatrixXd H;
  Eigen::VectorXd f;
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
};

/// Condensed tracking problem for a fixed model and weights. Decision vector
/// U = (u_1, ..., u_N); predictions Y = Phi s0 + Gamma U; Delta-u chain anchored at u_prev.
class TrackingQp {
 public:
  TrackingQp(CompactModel model, const MpcSpec& spec, Eigen::MatrixXd P_y)
      : m_(std::move(model)), N_(spec.horizon), Q_(spec.Q), R_(spec.R), P_y_(std::move(P_y)) {
    spec.validate(m_.n_u(), m_.n_y);
    const Eigen::Index ny = m_.n_y, nu = m_.n_u(), ns = m_.n_s();
    const Eigen::MatrixXd S = m_.selector();
    Phi_.resize(N_ * ny, ns);
    Gamma_ = Eigen::MatrixXd::Zero(N_ * ny, N_ * nu);
    // SAk[k] = S A^k
    std::vector<Eigen::MatrixXd> SAk(static_cast<std::size_t>(N_ + 1));
    SAk[0] = S;
    for (int k = 1; k <= N_; ++k) SAk[k] = SAk[k - 1] * m_.A;
    for (int k = 1; k <= N_; ++k) {
      Phi_.middleRows((k - 1) * ny, ny) = SAk[k];
      for (int j = 1; j <= k; ++j) {
        Gamma_.block((k - 1) * ny, (j - 1) * nu, ny, nu) = SAk[k - j] * m_.B;
      }
    }
    W_ = Eigen::MatrixXd::Zero(N_ * ny, N_ * ny);
    for (int k = 0; k < N_; ++k) W_.block(k * ny, k * ny, ny, ny) = k + 1 < N_ ? Q_ : P_y_;
    D_ = Eigen::MatrixXd::Identity(N_ * nu, N_ * nu);
    Rbar_ = Eigen::MatrixXd::Zero(N_ * nu, N_ * nu);
    for (int k = 0; k < N_; ++k) {
      if (k > 0) D_.block(k * nu, (k - 1) * nu, nu, nu) = -Eigen::MatrixXd::Identity(nu, nu);
      Rbar_.block(k * nu, k * nu, nu, nu) = R_;
    }
    H_ = 2.0 * (Gamma_.transpose() * W_ * Gamma_ + D_.transpose() * Rbar_ * D_);
    H_ = 0.5 * (H_ + H_.transpose()).eval();
  }

  int horizon() const { return N_; }
  const CompactModel& model() const { return m_; }
  const Eigen::MatrixXd& hessian() const { return H_; }
  const Eigen::MatrixXd& phi() const { return Phi_; }
  const Eigen::MatrixXd& gamma() const { return Gamma_; }

  /// ref holds y_ref for the N predicted steps as rows.
  Eigen::VectorXd linear_term(const Eigen::VectorXd& s0, const Eigen::VectorXd& u_prev,
                              const Eigen::MatrixXd& ref) const {
    check(s0, u_prev, ref);
    const Eigen::Index nu = m_.n_u();
    const Eigen::VectorXd e0 = Phi_ * s0 - stack(ref);
    Eigen::VectorXd d0 = Eigen::VectorXd::Zero(N_ * nu);
    d0.head(nu) = u_prev;
    return 2.0 * (Gamma_.transpose() * (W_ * e0) - D_.transpose() * (Rbar_ * d0));
  }

  BoxQp build(const Eigen::VectorXd& s0, const Eigen::VectorXd& u_prev,
              const Eigen::MatrixXd& ref, const Eigen::VectorXd& u_min,
              const Eigen::VectorXd& u_max) const {
    BoxQp qp;
    qp.H = H_;
    qp.f = linear_term(s0, u_prev, ref);
    qp.lower = u_min.replicate(N_, 1);
    qp.upper = u_max.replicate(N_, 1);
    return qp;
  }

  /// Cost by direct simulation of the lifted model (no condensing).
  double cost(const Eigen::VectorXd& s0, const Eigen::VectorXd& u_prev,
              const Eigen::MatrixXd& ref, const Eigen::VectorXd& U) const {
    check(s0, u_prev, ref);
    const Eigen::Index nu = m_.n_u(), ny = m_.n_y;
    Eigen::VectorXd s = s0, prev = u_prev;
    double c = 0.0;
    for (int k = 1; k <= N_; ++k) {
      const Eigen::VectorXd u = U.segment((k - 1) * nu, nu);
      s = m_.A * s + m_.B * u;
      const Eigen::VectorXd e = s.tail(ny) - ref.row(k - 1).transpose();
      c += e.dot((k < N_ ? Q_ : P_y_) * e);
      const Eigen::VectorXd du = u - prev;
      c += du.dot(R_ * du);
      prev = u;
    }
    return c;
  }

 private:
  void check(const Eigen::VectorXd& s0, const Eigen::VectorXd& u_prev,
             const Eigen::MatrixXd& ref) const {
    if (s0.size() != m_.n_s() || u_prev.size() != m_.n_u() || ref.rows() != N_ ||
        ref.cols() != m_.n_y) {
      throw ConfigError("tracking QP: dimension mismatch");
    }
  }

  Eigen::VectorXd stack(const Eigen::MatrixXd& ref) const {
    Eigen::VectorXd v(ref.size());
    for (Eigen::Index k = 0; k < ref.rows(); ++k) {
      v.segment(k * ref.cols(), ref.cols()) = ref.row(k).transpose();
    }
    return v;
  }

  CompactModel m_;
  int N_;
  Eigen::MatrixXd Q_, R_, P_y_;
  Eigen::MatrixXd Phi_, Gamma_, W_, D_, Rbar_, H_;
};

/// Condensed QP for a lifted model; the terminal weight comes from the DARE.
inline BoxQp build_qp(const CompactModel& model, const Eigen::VectorXd& s0,
                      const Eigen::VectorXd& u_prev, const MpcSpec& spec,
                      const Eigen::MatrixXd& ref) {
  const auto tw = terminal_weight(model, spec.Q, spec.R, spec.dare_tol, spec.dare_max_iters);
  return TrackingQp(model, spec, tw.P_y).build(s0, u_prev, ref, spec.u_min, spec.u_max);
}

// ---------------------------------------------------------------------------
// Box QP solver

struct QpResult {
  Eigen::VectorXd U;
  int iterations = 0;
  double pg_norm = 0.0;
};

inline Eigen::VectorXd project_box(const Eigen::VectorXd& x, const Eigen::VectorXd& lo,
                                   const Eigen::VectorXd& hi) {
  return x.cwiseMax(lo).cwiseMin(hi);
}

/// Norm of x - P(x - grad): zero exactly at a KKT point.
inline double projected_gradient_norm(const BoxQp& qp, const Eigen::VectorXd& x) {
  const Eigen::VectorXd g = qp.H * x + qp.f;
  return (x - project_box(x - g, qp.lower, qp.upper)).norm();
}

/// Upper bound on the largest eigenvalue of a symmetric PSD matrix.
inline double lipschitz_bound(const Eigen::MatrixXd& H) {
  const Eigen::Index n = H.rows();
  double gersh = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) gersh = std::max(gersh, H.row(i).cwiseAbs().sum());
  Eigen::VectorXd v = Eigen::VectorXd::Ones(n) / std::sqrt(double(n));
  double lambda = 0.0;
  for (int it = 0; it < 100; ++it) {
    const Eigen::VectorXd hv = H * v;
    const double nrm = hv.norm();
    if (nrm == 0.0) break;
    lambda = v.dot(hv);
    v = hv / nrm;
  }
  const double L = std::min(gersh, 1.1 * lambda);
  return L > 0.0 ? L : 1.0;
}

/// Accelerated projected gradient with adaptive restart, then an exact solve on
/// the final active set if that improves the optimality residual.
inline QpResult solve_qp_box(const BoxQp& qp, int iters = 500, double tol = 1e-8,
                             const Eigen::VectorXd* warm = nullptr, double L = 0.0) {
  const Eigen::Index n = qp.f.size();
  if (qp.H.rows() != n || qp.H.cols() != n || qp.lower.size() != n || qp.upper.size() != n) {
    throw ConfigError("solve_qp_box: dimension mismatch");
  }
  if ((qp.lower.array() > qp.upper.array()).any()) throw ConfigError("solve_qp_box: empty box");
  if (L <= 0.0) L = lipschitz_bound(qp.H);

  QpResult r;
  Eigen::VectorXd x = project_box(warm ? *warm : Eigen::VectorXd::Zero(n), qp.lower, qp.upper);
  Eigen::VectorXd y = x;
  double t = 1.0;
  r.pg_norm = projected_gradient_norm(qp, x);
  int it = 0;
  for (; it < iters && r.pg_norm > tol; ++it) {
    const Eigen::VectorXd g = qp.H * y + qp.f;
    const Eigen::VectorXd xn = project_box(y - g / L, qp.lower, qp.upper);
    if (g.dot(xn - x) > 0.0) {
      t = 1.0;
      y = x;
      continue;
    }
    const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    y = xn + ((t - 1.0) / tn) * (xn - x);
    x = xn;
    t = tn;
    r.pg_norm = projected_gradient_norm(qp, x);
  }
  r.iterations = it;

  if (r.pg_norm > tol) {
    // Fix coordinates sitting on a bound, solve the rest exactly.
    std::vector<Eigen::Index> free;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (x[i] > qp.lower[i] && x[i] < qp.upper[i]) free.push_back(i);
    }
    Eigen::VectorXd cand = x;
    if (!free.empty()) {
      const Eigen::Index nf = Eigen::Index(free.size());
      Eigen::MatrixXd Hff(nf, nf);
      Eigen::VectorXd rhs(nf);
      Eigen::VectorXd fixed = x;
      for (Eigen::Index a = 0; a < nf; ++a) fixed[free[a]] = 0.0;
      const Eigen::VectorXd coupling = qp.H * fixed + qp.f;
      for (Eigen::Index a = 0; a < nf; ++a) {
        rhs[a] = -coupling[free[a]];
        for (Eigen::Index b = 0; b < nf; ++b) Hff(a, b) = qp.H(free[a], free[b]);
      }
      const Eigen::VectorXd sol = Hff.ldlt().solve(rhs);
      for (Eigen::Index a = 0; a < nf; ++a) cand[free[a]] = sol[a];
      cand = project_box(cand, qp.lower, qp.upper);
    }
    const double pg = projected_gradient_norm(qp, cand);
    if (cand.allFinite() && pg < r.pg_norm) {
      x = cand;
      r.pg_norm = pg;
    }
  }
  r.U = x;
  return r;
}

// ---------------------------------------------------------------------------
// Receding horizon

/// Reference rows for steps start .. start + N - 1.
using Reference = std::function<Eigen::VectorXd(Eigen::Index)>;

/// Controller for one model: lift, Riccati and Hessian are computed once.
/// Works in the model's (standardized) units.
class MpcController {
 public:
  MpcController(const Nssm& model, ParamVector w, MpcSpec spec)
      : model_(model), w_(std::move(w)), spec_(std::move(spec)) {
    const CompactModel lifted = lift(model_, w_);
    const auto tw =
        terminal_weight(lifted, spec_.Q, spec_.R, spec_.dare_tol, spec_.dare_max_iters);
    dare_fallback_ = tw.fallback;
    qp_.emplace(lifted, spec_, tw.P_y);
    L_ = lipschitz_bound(qp_->hessian());
  }

  bool dare_fallback() const { return dare_fallback_; }
  const MpcSpec& spec() const { return spec_; }
  const TrackingQp& qp() const { return *qp_; }

  /// First planned input. History tensors are (H * dim) x 1, time-major; ref is N x n_y.
  Eigen::VectorXd action(const Eigen::MatrixXd& history_u, const Eigen::MatrixXd& history_y,
                         const Eigen::VectorXd& u_prev, const Eigen::MatrixXd& ref) const {
    const auto& cfg = model_.config();
    if (history_u.rows() < Eigen::Index(cfg.history) * cfg.n_u ||
        history_y.rows() < Eigen::Index(cfg.history) * cfg.n_y) {
      throw ConfigError("mpc_action: need at least " + std::to_string(cfg.history) +
                        " history steps");
    }
    const Eigen::VectorXd z = model_.encode(w_, history_u, history_y).col(0);
    Eigen::VectorXd s0(z.size() + cfg.n_y);
    s0 << z, w_.tensor("C_z") * z;
    BoxQp qp = qp_->build(s0, u_prev, ref, spec_.u_min, spec_.u_max);
    const Eigen::VectorXd warm = u_prev.replicate(spec_.horizon, 1);
    const QpResult r = solve_qp_box(qp, spec_.qp_iters, spec_.qp_tol, &warm, L_);
    return r.U.head(cfg.n_u);
  }

 private:
  const Nssm& model_;
  ParamVector w_;
  MpcSpec spec_;
  std::optional<TrackingQp> qp_;
  double L_ = 1.0;
  bool dare_fallback_ = false;
};

inline Eigen::VectorXd mpc_action(const Nssm& model, const ParamVector& w,
                                  const Eigen::MatrixXd& history_u,
                                  const Eigen::MatrixXd& history_y, const Eigen::VectorXd& u_prev,
                                  const MpcSpec& spec, const Eigen::MatrixXd& ref) {
  return MpcController(model, w, spec).action(history_u, history_y, u_prev, ref);
}

/// N x n_y window of a reference provider starting at `start`.
inline Eigen::MatrixXd reference_window(const Reference& ref, Eigen::Index start, int N,
                                        Eigen::Index n_y) {
  Eigen::MatrixXd out(N, n_y);
  for (int k = 0; k < N; ++k) out.row(k) = ref(start + k).transpose();
  return out;
}

struct TrackOptions {
  double explore_std = 0.0;  // standardized input units
  double noise_std = 0.0;    // standardized output units
  std::uint64_t seed = 0;
  // Episode stops once any physical output exceeds this in magnitude (0: never).
  double abort_norm = 0.0;
};

/// Traces in physical units. Row k: input u_k applied, output y_k measured after it.
struct TrackResult {
  Eigen::MatrixXd y;
  Eigen::MatrixXd yref;
  Eigen::MatrixXd u;
  Eigen::VectorXd err;
  Eigen::VectorXd final_state;
  bool dare_fallback = false;
  bool aborted = false;  // rows end before the step that left the safe region
  double abort_err = 0.0;  // error at that step; the bound itself if the state overflowed

  double mean_err() const { return err.size() ? err.mean() : 0.0; }
  double final_err() const { return err.size() ? err[err.size() - 1] : 0.0; }
};

/// Closed-loop tracking of `ref` (physical units). The input box in `spec` is in physical
/// units; Q and R weight standardized quantities. `hist_u`, `hist_y` are the
/// most recent physical-unit samples (rows are steps, at least H rows) and the
/// plant is in the state reached after the last of them.
inline TrackResult receding_horizon_track(const Nssm& model, const ParamVector& w,
                                          const Scaler& scaler, Plant& plant,
                                          const Eigen::MatrixXd& hist_u,
                                          const Eigen::MatrixXd& hist_y, const MpcSpec& spec,
                                          const Reference& ref, Eigen::Index episode_len,
                                          const TrackOptions& opt = {}) {
  const auto& cfg = model.config();
  const Eigen::Index H = cfg.history, nu = cfg.n_u, ny = cfg.n_y;
  if (hist_u.rows() < H || hist_y.rows() != hist_u.rows() || hist_u.cols() != nu ||
      hist_y.cols() != ny) {
    throw ConfigError("receding_horizon_track: need at least " + std::to_string(H) +
                      " history steps");
  }
  spec.validate(nu, ny);
  MpcSpec scaled = spec;
  scaled.u_min = scaler.scale_u_vec(spec.u_min);
  scaled.u_max = scaler.scale_u_vec(spec.u_max);
  const MpcController ctrl(model, w, scaled);

  // Rolling standardized history, time-major.
  Eigen::MatrixXd su = scaler.scale_u(hist_u.bottomRows(H));
  Eigen::MatrixXd sy = scaler.scale_y(hist_y.bottomRows(H));
  auto flat = [](const Eigen::MatrixXd& rows) {
    Eigen::MatrixXd v(rows.size(), 1);
    for (Eigen::Index k = 0; k < rows.rows(); ++k) {
      v.block(k * rows.cols(), 0, rows.cols(), 1) = rows.row(k).transpose();
    }
    return v;
  };

  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  TrackResult out;
  out.dare_fallback = ctrl.dare_fallback();
  out.y.resize(episode_len, ny);
  out.yref.resize(episode_len, ny);
  out.u.resize(episode_len, nu);
  out.err.resize(episode_len);
  Eigen::VectorXd u_prev = su.row(H - 1).transpose();
  for (Eigen::Index k = 0; k < episode_len; ++k) {
    Eigen::MatrixXd r(spec.horizon, ny);
    for (int j = 0; j < spec.horizon; ++j) r.row(j) = scaler.scale_y_vec(ref(k + j)).transpose();
    Eigen::VectorXd u = ctrl.action(flat(su), flat(sy), u_prev, r);
    if (opt.explore_std > 0.0) {
      for (Eigen::Index i = 0; i < nu; ++i) u[i] += opt.explore_std * normal(rng);
    }
    u = u.cwiseMax(scaled.u_min).cwiseMin(scaled.u_max);
    const Eigen::VectorXd u_phys = plant.applied(scaler.unscale_u_vec(u));
    Eigen::VectorXd y_phys;
    if (opt.abort_norm > 0.0) {
      try {
        y_phys = plant.step(u_phys);
      } catch (const NumericalError&) {
        y_phys = Eigen::VectorXd::Constant(ny, std::numeric_limits<double>::infinity());
      }
      if (!(y_phys.cwiseAbs().maxCoeff() <= opt.abort_norm)) {
        out.aborted = true;
        out.abort_err = (y_phys - ref(k)).norm();
        if (!std::isfinite(out.abort_err)) out.abort_err = opt.abort_norm;
        out.y.conservativeResize(k, ny);
        out.yref.conservativeResize(k, ny);
        out.u.conservativeResize(k, nu);
        out.err.conservativeResize(k);
        break;
      }
    } else {
      y_phys = plant.step(u_phys);
    }
    if (opt.noise_std > 0.0) {
      for (Eigen::Index i = 0; i < ny; ++i) {
        y_phys[i] += opt.noise_std * scaler.y_scale[i] * normal(rng);
      }
    }
    const Eigen::VectorXd yr = ref(k);
    out.u.row(k) = u_phys.transpose();
    out.y.row(k) = y_phys.transpose();
    out.yref.row(k) = yr.transpose();
    out.err[k] = (y_phys - yr).norm();

    u_prev = scaler.scale_u_vec(u_phys);
    if (H > 1) {
      su.topRows(H - 1) = su.bottomRows(H - 1).eval();
      sy.topRows(H - 1) = sy.bottomRows(H - 1).eval();
    }
    su.row(H - 1) = u_prev.transpose();
    sy.row(H - 1) = scaler.scale_y_vec(y_phys).transpose();
  }
  out.final_state = plant.state();
  return out;
}

/// Few-step proximal adaptation of the meta-trained weights to target data.
template <Objective O>
ParamVector meta_inference(const O& obj, const ParamVector& omega_inf,
                           const typename O::Batch& target, double gamma, double beta,
                           int steps) {
  return proximal_descent(obj, omega_inf, target, gamma, beta, steps);
}

}  // namespace metassm
