#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "metassm/meta_train.hpp"
#include "test_support.hpp"

namespace metassm {
namespace {

using test::QuadraticSurrogate;
using test::QuadTask;

TrajectoryDataset ramp_dataset(Eigen::Index length) {
  TrajectoryDataset d;
  d.u = Eigen::VectorXd::LinSpaced(length, 0.0, double(length - 1));
  d.y.resize(length, 2);
  d.y.col(0) = d.u.col(0) * 10.0;
  d.y.col(1) = -d.u.col(0);
  d.scaler = Scaler::identity(1, 2);
  d.final_state = Eigen::Vector2d::Zero();
  return d;
}

TEST(SampleWindows, UniqueWindowOfMinimalDataset) {
  const TrajectoryDataset d = ramp_dataset(7);
  const WindowBatch b = sample_windows(d, 3, 4, 1, 5);
  EXPECT_EQ(b.count(), 1);
  EXPECT_EQ(b.history_u.col(0), Eigen::Vector3d(0, 1, 2));
  EXPECT_EQ(b.future_u.col(0), Eigen::Vector4d(3, 4, 5, 6));
  EXPECT_EQ(b.future_y(2, 0), 40.0);
  EXPECT_EQ(b.future_y(3, 0), -4.0);
}

TEST(SampleWindows, DeterministicForSeed) {
  const TrajectoryDataset d = ramp_dataset(100);
  const WindowBatch a = sample_windows(d, 3, 4, 12, 8), b = sample_windows(d, 3, 4, 12, 8);
  EXPECT_EQ(a.history_u, b.history_u);
  EXPECT_EQ(a.future_y, b.future_y);
}

TEST(SampleWindows, ContiguousDistinctAndInsideSegments) {
  TrajectoryDataset d = ramp_dataset(60);
  d.segments = {0, 25};
  std::vector<Eigen::Index> starts;
  const WindowBatch b = sample_windows(d, 3, 4, 30, 2, &starts);
  EXPECT_EQ(std::set<Eigen::Index>(starts.begin(), starts.end()).size(), 30u);
  for (Eigen::Index c = 0; c < b.count(); ++c) {
    const double s = b.history_u(0, c);
    for (int k = 0; k < 3; ++k) EXPECT_EQ(b.history_u(k, c), s + k);
    for (int k = 0; k < 4; ++k) EXPECT_EQ(b.future_u(k, c), s + 3 + k);
    EXPECT_FALSE(s < 25 && s + 7 > 25) << "window at " << s << " straddles a segment start";
  }
}

TEST(SampleWindows, TooShortRaises) {
  EXPECT_THROW(sample_windows(ramp_dataset(6), 3, 4, 1, 0), ConfigError);
  TrajectoryDataset d = ramp_dataset(12);
  d.segments = {0, 6};
  EXPECT_THROW(sample_windows(d, 3, 4, 1, 0), ConfigError);
}

TEST(Partition, HalfSplitIsDisjointCover) {
  const WindowBatch b = sample_windows(ramp_dataset(40), 2, 2, 10, 1);
  const auto s = partition(b, 0.5, 3);
  EXPECT_EQ(s.train.count(), 5);
  EXPECT_EQ(s.test.count(), 5);
  std::set<Eigen::Index> all(s.train_idx.begin(), s.train_idx.end());
  for (auto i : s.test_idx) EXPECT_TRUE(all.insert(i).second);
  EXPECT_EQ(all.size(), 10u);
  EXPECT_EQ(*all.rbegin(), 9);
  const auto again = partition(b, 0.5, 3);
  EXPECT_EQ(again.train_idx, s.train_idx);
  EXPECT_EQ(partition(b, 0.31, 3).train.count(), 4);
  EXPECT_THROW(partition(b.select({0}), 0.5, 3), ConfigError);
}

MetaConfig quad_config() {
  MetaConfig c;
  c.gamma = 2.0;
  c.beta_in = 0.1;
  c.inner_steps = 2000;
  c.cg_iters = 50;
  c.cg_tol = 1e-14;
  c.beta_out = 0.5;
  return c;
}

TEST(InnerAdaptImaml, ConvergesToProximalPoint) {
  QuadraticSurrogate obj(3);
  const Eigen::Vector3d omega(1.0, -1.0, 2.0), c(0.5, 0.5, -0.5);
  const MetaConfig cfg = quad_config();
  const ParamVector r =
      inner_adapt_imaml(obj, obj.make(omega), test::quad_task(Eigen::Vector3d::Ones(), c), cfg);
  EXPECT_LE((r.values() - (cfg.gamma * omega + c) / (1.0 + cfg.gamma)).cwiseAbs().maxCoeff(),
            1e-8);
}

TEST(InnerAdaptImaml, HugeGammaStaysNearOmega) {
  QuadraticSurrogate obj(2);
  const ParamVector omega = obj.make(Eigen::Vector2d(1.0, 3.0));
  const QuadTask t = test::quad_task(Eigen::Vector2d::Ones(), Eigen::Vector2d::Zero());
  MetaConfig cfg;
  cfg.gamma = 1e8;
  cfg.beta_in = 1e-3;
  cfg.inner_steps = 1;
  const ParamVector one = inner_adapt_imaml(obj, omega, t, cfg);
  EXPECT_LE(norm(one - omega), cfg.beta_in * norm(obj.gradient(omega, t)) * (1 + 1e-12));
  cfg.beta_in = 1e-8;
  cfg.inner_steps = 50;
  EXPECT_LE(norm(inner_adapt_imaml(obj, omega, t, cfg) - omega), 1e-7);
}

TEST(InnerAdaptImaml, SingleStepByHand) {
  QuadraticSurrogate obj(2);
  MetaConfig cfg;
  cfg.beta_in = 0.1;
  cfg.inner_steps = 1;
  const ParamVector r = inner_adapt_imaml(
      obj, obj.make(Eigen::Vector2d(1.0, 2.0)),
      test::quad_task(Eigen::Vector2d::Ones(), Eigen::Vector2d(0.0, 1.0)), cfg);
  EXPECT_NEAR(r.values()[0], 0.9, 1e-15);
  EXPECT_NEAR(r.values()[1], 1.9, 1e-15);
  cfg.inner_steps = 0;
  EXPECT_THROW(inner_adapt_imaml(obj, obj.make(Eigen::Vector2d(1.0, 2.0)),
                                 test::quad_task(Eigen::Vector2d::Ones(), Eigen::Vector2d::Zero()),
                                 cfg),
               ConfigError);
}

TEST(InnerAdaptImaml, NonFiniteReportsStep) {
  QuadraticSurrogate obj(1);
  MetaConfig cfg;
  cfg.beta_in = 1e300;
  cfg.inner_steps = 5;
  try {
    inner_adapt_imaml(obj, obj.make(Eigen::VectorXd::Constant(1, 1e10)),
                      test::quad_task(Eigen::VectorXd::Ones(1), Eigen::VectorXd::Zero(1)), cfg);
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}

TaskSplit<QuadTask> quad_split(const QuadTask& train, const QuadTask& test) {
  TaskSplit<QuadTask> s;
  s.train = train;
  s.test = test;
  return s;
}

TEST(CgMetaGradient, LinearLossGivesTestGradientInOneIteration) {
  QuadraticSurrogate obj(4);
  QuadTask linear{Eigen::MatrixXd::Zero(4, 4), Eigen::VectorXd::Zero(4),
                  Eigen::Vector4d(1, -2, 3, 0.5)};
  MetaConfig cfg;
  const ParamVector w = obj.make(Eigen::Vector4d(0.1, 0.2, 0.3, 0.4));
  const auto r = cg_solve_meta_gradient(obj, w, quad_split(linear, linear), cfg);
  EXPECT_EQ(r.iterations, 1);
  EXPECT_LE((r.g.values() - linear.b).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(CgMetaGradient, DiagonalHessianMatchesDirectSolve) {
  QuadraticSurrogate obj(5);
  Eigen::VectorXd d(5), c(5), w(5);
  d << 0.5, 1.0, 2.0, 4.0, 8.0;
  c << 1, 2, 3, 4, 5;
  w << -1, 0, 1, 0.5, 2;
  const QuadTask train = test::quad_task(d, Eigen::VectorXd::Zero(5));
  const QuadTask test_task = test::quad_task(Eigen::VectorXd::Ones(5), c);
  const MetaConfig cfg = quad_config();
  const auto r = cg_solve_meta_gradient(obj, obj.make(w), quad_split(train, test_task), cfg);
  const Eigen::VectorXd P = w - c;
  Eigen::MatrixXd Q = Eigen::MatrixXd::Identity(5, 5);
  Q.diagonal() += d / cfg.gamma;
  const Eigen::VectorXd expected = Q.inverse() * P;
  EXPECT_LE((r.g.values() - expected).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(CgMetaGradient, NegativeCurvatureRaises) {
  QuadraticSurrogate obj(2);
  const QuadTask train = test::quad_task(Eigen::Vector2d(-4.0, 1.0), Eigen::Vector2d::Zero());
  const QuadTask test_task = test::quad_task(Eigen::Vector2d::Ones(), Eigen::Vector2d(1.0, 0.0));
  MetaConfig cfg;
  cfg.gamma = 1.0;
  try {
    cg_solve_meta_gradient(obj, obj.make(Eigen::Vector2d::Zero()), quad_split(train, test_task),
                           cfg);
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_STREQ(e.what(), "Q^b not positive definite; increase gamma");
  }
}

TEST(CgMetaGradient, ObjectiveDecreasesMonotonically) {
  std::mt19937_64 rng(12);
  QuadraticSurrogate obj(30);
  for (int trial = 0; trial < 10; ++trial) {
    const Eigen::MatrixXd L = test::normal_matrix(30, 30, rng);
    QuadTask train{L * L.transpose(), Eigen::VectorXd::Zero(30), Eigen::VectorXd::Zero(30)};
    QuadTask t{Eigen::MatrixXd::Identity(30, 30), test::normal_matrix(30, 1, rng),
               Eigen::VectorXd::Zero(30)};
    MetaConfig cfg;
    cfg.gamma = 0.5;
    cfg.cg_iters = 30;
    cfg.cg_tol = 1e-12;
    const auto r =
        cg_solve_meta_gradient(obj, obj.make(Eigen::VectorXd::Zero(30)), quad_split(train, t), cfg);
    ASSERT_FALSE(r.objective.empty());
    EXPECT_LT(r.objective.front(), 0.0);
    for (std::size_t i = 1; i < r.objective.size(); ++i) {
      EXPECT_LE(r.objective[i], r.objective[i - 1] + 1e-12 * std::abs(r.objective[i - 1]));
    }
  }
}

TEST(CgMetaGradient, TinyNssmMatchesDenseSolve) {
  NssmConfig cfg = test::tiny_config();
  cfg.hidden_width = 4;
  const Nssm model(cfg);
  ASSERT_LE(model.num_params(), 80);
  const ParamVector w = test::random_params(model, 4);
  TaskSplit<WindowBatch> split;
  split.train = test::random_batch(cfg, 6, 5);
  split.test = test::random_batch(cfg, 6, 6);
  MetaConfig mc;
  mc.gamma = 10.0;
  mc.cg_iters = 500;
  mc.cg_tol = 1e-14;
  const Eigen::Index n = model.num_params();
  Eigen::MatrixXd Hm(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    ParamVector e = ParamVector::zeros(model.layout());
    e.values()[i] = 1.0;
    Hm.col(i) = model.hvp(w, split.train, e).values();
  }
  const Eigen::MatrixXd Q = Eigen::MatrixXd::Identity(n, n) + Hm / mc.gamma;
  ASSERT_GT(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(0.5 * (Q + Q.transpose()))
                .eigenvalues()
                .minCoeff(),
            0.0);
  const Eigen::VectorXd expected = Q.lu().solve(model.gradient(w, split.test).values());
  const auto r = cg_solve_meta_gradient(model, w, split, mc);
  EXPECT_LE(relative_error(r.g.values(), expected), 1e-6);
}

TEST(ImplicitGradient, QuadraticTasksMatchClosedFormAndFiniteDifferences) {
  std::mt19937_64 rng(31);
  const Eigen::Index n = 6;
  QuadraticSurrogate obj(n);
  for (int trial = 0; trial < 5; ++trial) {
    const Eigen::MatrixXd L = test::normal_matrix(n, n, rng);
    const QuadTask train{L * L.transpose() / double(n), test::normal_matrix(n, 1, rng),
                         Eigen::VectorXd::Zero(n)};
    const Eigen::MatrixXd L2 = test::normal_matrix(n, n, rng);
    const QuadTask test_task{L2 * L2.transpose() / double(n) + Eigen::MatrixXd::Identity(n, n),
                             test::normal_matrix(n, 1, rng), Eigen::VectorXd::Zero(n)};
    MetaConfig cfg;
    cfg.gamma = 0.7;
    cfg.cg_iters = 100;
    cfg.cg_tol = 1e-15;
    const Eigen::VectorXd omega = test::normal_matrix(n, 1, rng);
    // Exact minimizer of loss_tr(psi) + gamma/2 ||psi - omega||^2.
    auto inner = [&](const Eigen::VectorXd& om) -> Eigen::VectorXd {
      const Eigen::MatrixXd A = train.D + cfg.gamma * Eigen::MatrixXd::Identity(n, n);
      return A.ldlt().solve(cfg.gamma * om + train.D * train.c);
    };
    const Eigen::VectorXd wb = inner(omega);
    const auto r = cg_solve_meta_gradient(obj, obj.make(wb), quad_split(train, test_task), cfg);

    const Eigen::MatrixXd Q = Eigen::MatrixXd::Identity(n, n) + train.D / cfg.gamma;
    const Eigen::VectorXd closed = Q.ldlt().solve(test_task.D * (wb - test_task.c));
    EXPECT_LE(relative_error(r.g.values(), closed), 1e-6);

    const ParamVector fd = fd_gradient(
        [&](const ParamVector& om) { return obj.loss(obj.make(inner(om.values())), test_task); },
        obj.make(omega));
    EXPECT_LE(relative_error(r.g.values(), fd.values()), 1e-6);
  }
}

TEST(InnerAdaptMaml, ZeroGradientLeavesOmega) {
  QuadraticSurrogate obj(2);
  const ParamVector w = obj.make(Eigen::Vector2d(0.5, 0.25));
  MetaConfig cfg;
  EXPECT_TRUE(inner_adapt_maml(obj, w, test::quad_task(Eigen::Vector2d::Ones(), w.values()), cfg)
                  .bitwise_equal(w));
}

TEST(InnerAdaptMaml, GeometricContraction) {
  QuadraticSurrogate obj(2);
  const Eigen::Vector2d w(1.0, -3.0), c(0.5, 2.0);
  MetaConfig cfg;
  cfg.beta_in = 0.05;
  cfg.inner_steps = 1;
  const QuadTask t = test::quad_task(Eigen::Vector2d::Ones(), c);
  EXPECT_LE((inner_adapt_maml(obj, obj.make(w), t, cfg).values() - (w - 0.05 * (w - c)))
                .cwiseAbs()
                .maxCoeff(),
            1e-15);
  cfg.inner_steps = 37;
  const Eigen::Vector2d expected = c + std::pow(1.0 - 0.05, 37) * (w - c);
  EXPECT_LE((inner_adapt_maml(obj, obj.make(w), t, cfg).values() - expected).cwiseAbs().maxCoeff(),
            1e-10);
}

TEST(OuterUpdate, StationaryTasksDoNotMove) {
  QuadraticSurrogate obj(3);
  const ParamVector w = obj.make(Eigen::Vector3d(1.0, 2.0, -1.0));
  const QuadTask t = test::quad_task(Eigen::Vector3d::Ones(), w.values());
  std::vector<TaskSplit<QuadTask>> splits(4, quad_split(t, t));
  OuterMetrics m;
  EXPECT_TRUE(outer_update(obj, w, splits, quad_config(), Algorithm::kImaml, m).bitwise_equal(w));
  EXPECT_EQ(m.grad_norm, 0.0);
  EXPECT_TRUE(outer_update(obj, w, splits, quad_config(), Algorithm::kMaml, m).bitwise_equal(w));
}

TEST(OuterUpdate, ImamlQuadraticClosedForm) {
  QuadraticSurrogate obj(2);
  const Eigen::Vector2d w(1.0, -1.0);
  const std::vector<Eigen::Vector2d> cs = {{0.0, 0.0}, {2.0, 1.0}, {-1.0, 3.0}};
  std::vector<TaskSplit<QuadTask>> splits;
  for (const auto& c : cs) {
    const QuadTask t = test::quad_task(Eigen::Vector2d::Ones(), c);
    splits.push_back(quad_split(t, t));
  }
  const MetaConfig cfg = quad_config();
  const double g = cfg.gamma;
  Eigen::Vector2d mean_g = Eigen::Vector2d::Zero();
  for (const auto& c : cs) {
    const Eigen::Vector2d wb = (g * w + c) / (1.0 + g);
    mean_g += (g / (1.0 + g)) * (wb - c);
  }
  mean_g /= double(cs.size());
  OuterMetrics m;
  const ParamVector next = outer_update(obj, obj.make(w), splits, cfg, Algorithm::kImaml, m);
  EXPECT_LE((next.values() - (w - cfg.beta_out * mean_g)).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_NEAR(m.grad_norm, mean_g.norm(), 1e-8);
  // Moves toward the mean task centre.
  const Eigen::Vector2d centre = (cs[0] + cs[1] + cs[2]) / 3.0;
  EXPECT_LT((next.values() - centre).norm(), (w - centre).norm());
}

TEST(OuterUpdate, MamlDirectionIsMeanAdaptedResidual) {
  QuadraticSurrogate obj(2);
  const Eigen::Vector2d w(1.0, -1.0);
  const std::vector<Eigen::Vector2d> cs = {{0.0, 0.0}, {2.0, 1.0}};
  std::vector<TaskSplit<QuadTask>> splits;
  for (const auto& c : cs) {
    const QuadTask t = test::quad_task(Eigen::Vector2d::Ones(), c);
    splits.push_back(quad_split(t, t));
  }
  MetaConfig cfg;
  cfg.beta_in = 0.1;
  cfg.inner_steps = 3;
  cfg.beta_out = 0.5;
  Eigen::Vector2d mean_g = Eigen::Vector2d::Zero();
  for (const auto& c : cs) mean_g += std::pow(0.9, 3) * (w - c);
  mean_g /= 2.0;
  OuterMetrics m;
  const ParamVector next = outer_update(obj, obj.make(w), splits, cfg, Algorithm::kMaml, m);
  EXPECT_LE((next.values() - (w - 0.5 * mean_g)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(SupervisedTrain, DescendsAndIsDeterministic) {
  QuadraticSurrogate obj(3);
  const ParamVector w0 = obj.make(Eigen::Vector3d(3.0, -2.0, 1.0));
  const QuadTask t = test::quad_task(Eigen::Vector3d(1.0, 2.0, 0.5), Eigen::Vector3d::Zero());
  EXPECT_TRUE(supervised_train(obj, w0, t, 0, 0.1).bitwise_equal(w0));
  double prev = obj.loss(w0, t);
  for (int k = 1; k <= 20; ++k) {
    const double l = obj.loss(supervised_train(obj, w0, t, k, 0.1), t);
    EXPECT_LE(l, prev);
    prev = l;
  }
  EXPECT_TRUE(supervised_train(obj, w0, t, 7, 0.1).bitwise_equal(supervised_train(obj, w0, t, 7, 0.1)));
}

struct SourceFixture {
  NssmConfig nc;
  std::unique_ptr<Nssm> model;
  std::vector<TrajectoryDataset> tasks;
  CollectSpec collect;

  SourceFixture() {
    nc = test::tiny_config();
    model = std::make_unique<Nssm>(nc);
    std::vector<TrajectoryDataset> raw;
    std::uint64_t i = 0;
    for (const auto& p : sample_params(PlantKind::kVanDerPol, 4, 17)) {
      raw.push_back(generate_trajectory(p, excitation(60, 1, 1.0, i), Eigen::Vector2d(0.5, 0.0),
                                        0.01, i + 50));
      ++i;
    }
    tasks = standardize(raw).first;
    collect.mpc = MpcSpec::defaults(1, 2, 5.0);
    collect.mpc.horizon = 5;
    collect.reference = [](Eigen::Index) -> Eigen::VectorXd { return Eigen::Vector2d::Zero(); };
    collect.noise_std = 0.01;
  }
};

MetaConfig tiny_meta() {
  MetaConfig c;
  c.batch_size = 3;
  c.windows_per_task = 8;
  c.inner_steps = 3;
  c.cg_iters = 5;
  c.episode_len = 10;
  c.gamma = 10.0;
  return c;
}

TEST(CollectClosedLoop, WithoutExplorationMatchesController) {
  SourceFixture f;
  MetaConfig cfg = tiny_meta();
  cfg.explore_std = 0.0;
  f.collect.noise_std = 0.0;
  const ParamVector w = f.model->init(1);
  const TrajectoryDataset& d = f.tasks[0];
  const TrajectoryDataset out = collect_closed_loop(*f.model, w, d, f.collect, cfg, 3);
  EXPECT_EQ(out.length(), d.length() + cfg.episode_len);
  EXPECT_EQ(out.segments, d.segments);
  EXPECT_TRUE(out.u.topRows(d.length()) == d.u);

  Plant plant(d.plant, d.final_state);
  const auto r = receding_horizon_track(*f.model, w, d.scaler, plant, d.scaler.unscale_u(d.u.bottomRows(3)),
                                        d.scaler.unscale_y(d.y.bottomRows(3)), f.collect.mpc,
                                        f.collect.reference, cfg.episode_len);
  EXPECT_LE((out.u.bottomRows(cfg.episode_len) - d.scaler.scale_u(r.u)).cwiseAbs().maxCoeff(),
            1e-12);
}

TEST(CollectClosedLoop, ExplorationReproducibleAndBoxed) {
  SourceFixture f;
  MetaConfig cfg = tiny_meta();
  cfg.explore_std = 3.0;
  const ParamVector w = f.model->init(1);
  const auto a = collect_closed_loop(*f.model, w, f.tasks[1], f.collect, cfg, 8);
  const auto b = collect_closed_loop(*f.model, w, f.tasks[1], f.collect, cfg, 8);
  EXPECT_EQ(a.u, b.u);
  EXPECT_EQ(a.y, b.y);
  const Eigen::MatrixXd phys = a.scaler.unscale_u(a.u.bottomRows(cfg.episode_len));
  EXPECT_LE(phys.cwiseAbs().maxCoeff(), 5.0 + 1e-12);
}

TEST(CollectClosedLoop, AbortAppendsSafePrefixThenResetSegment) {
  SourceFixture f;
  MetaConfig cfg = tiny_meta();
  cfg.explore_std = 0.0;
  f.collect.noise_std = 0.0;
  const ParamVector w = f.model->init(1);
  const TrajectoryDataset& d = f.tasks[2];
  const TrajectoryDataset free_run = collect_closed_loop(*f.model, w, d, f.collect, cfg, 3);
  const Eigen::MatrixXd phys = d.scaler.unscale_y(free_run.y.bottomRows(cfg.episode_len));
  f.collect.abort_norm = 0.5 * phys.cwiseAbs().maxCoeff();
  Eigen::Index prefix = 0;
  while (phys.row(prefix).cwiseAbs().maxCoeff() <= f.collect.abort_norm) ++prefix;

  EXPECT_THROW(collect_closed_loop(*f.model, w, d, f.collect, cfg, 3), NumericalError);

  TrajectoryDataset fresh = f.tasks[3];
  fresh.scaler = d.scaler;
  std::uint64_t reset_seed = 0;
  f.collect.reset = [&](const TrajectoryDataset&, std::uint64_t s) {
    reset_seed = s;
    return fresh;
  };
  const TrajectoryDataset out = collect_closed_loop(*f.model, w, d, f.collect, cfg, 3);
  EXPECT_EQ(reset_seed, derive_seed(3, 7));
  ASSERT_EQ(out.length(), d.length() + prefix + fresh.length());
  EXPECT_EQ(out.segments.back(), d.length() + prefix);
  EXPECT_EQ(out.segments.size(), d.segments.size() + 1);
  EXPECT_EQ(out.y.middleRows(d.length(), prefix), free_run.y.middleRows(d.length(), prefix));
  EXPECT_EQ(out.y.bottomRows(fresh.length()), fresh.y);
  EXPECT_EQ(out.final_state, fresh.final_state);
}

TEST(OuterStep, ReproducibleAndGrowsSampledTasks) {
  SourceFixture f1, f2;
  const MetaConfig cfg = tiny_meta();
  const ParamVector w = f1.model->init(3);
  OuterMetrics m1, m2;
  const ParamVector a = outer_step_imaml(*f1.model, w, f1.tasks, cfg, f1.collect, 42, 0, m1);
  const ParamVector b = outer_step_imaml(*f2.model, w, f2.tasks, cfg, f2.collect, 42, 0, m2);
  EXPECT_TRUE(a.bitwise_equal(b));
  EXPECT_EQ(m1.mean_test_loss, m2.mean_test_loss);
  EXPECT_TRUE(std::isfinite(m1.mean_test_loss));
  int grown = 0;
  for (std::size_t k = 0; k < f1.tasks.size(); ++k) {
    EXPECT_EQ(f1.tasks[k].y, f2.tasks[k].y);
    grown += f1.tasks[k].length() == 60 + cfg.episode_len ? 1 : 0;
  }
  EXPECT_EQ(grown, cfg.batch_size);
  const ParamVector c = outer_step_maml(*f1.model, w, f1.tasks, cfg, f1.collect, 42, 1, m1);
  EXPECT_FALSE(c.bitwise_equal(w));
}

}  // namespace
}  // namespace metassm
