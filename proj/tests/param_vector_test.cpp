#include <gtest/gtest.h>

#include <random>

#include "metassm/param_vector.hpp"
#include "metassm/util.hpp"

namespace metassm {
namespace {

LayoutPtr two_segment_layout() {
  auto l = std::make_shared<Layout>();
  l->add("a", 2, 3);
  l->add("b", 4, 1);
  return l;
}

LayoutPtr flat_layout(Eigen::Index n, const std::string& name = "w") {
  auto l = std::make_shared<Layout>();
  l->add(name, n, 1);
  return l;
}

ParamVector vec(const LayoutPtr& l, std::initializer_list<double> xs) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return {l, v};
}

TEST(Layout, TotalSizeIsSumOfShapes) {
  auto l = two_segment_layout();
  EXPECT_EQ(l->total_size(), 2 * 3 + 4);
  EXPECT_EQ(l->find("b").offset, 6);
  EXPECT_THROW(std::make_shared<Layout>()->add("x", 0, 1), ConfigError);
}

TEST(ParamVector, RejectsWrongLength) {
  EXPECT_THROW(ParamVector(two_segment_layout(), Eigen::VectorXd::Zero(9)), ConfigError);
}

TEST(ParamVector, FlattenUnflattenIsExact) {
  auto l = two_segment_layout();
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  Eigen::VectorXd v(l->total_size());
  for (auto& x : v) x = n(rng);
  const ParamVector p = ParamVector::unflatten(l, v);
  EXPECT_TRUE(ParamVector::unflatten(l, p.flatten()).bitwise_equal(p));
  EXPECT_EQ(p.tensor("a")(1, 2), v[5]);  // column-major
}

TEST(Axpy, ZeroScaleIsIdentity) {
  auto l = flat_layout(3);
  const auto y = vec(l, {1.5, -2.0, 7.0});
  EXPECT_TRUE(axpy(0.0, vec(l, {9, 9, 9}), y).bitwise_equal(y));
}

TEST(Axpy, AdditiveInverseIsZero) {
  auto l = flat_layout(3);
  const auto v = vec(l, {0.1, -0.3, 1e10});
  EXPECT_EQ(axpy(1.0, v, -v).values(), Eigen::VectorXd::Zero(3));
}

TEST(Axpy, Arithmetic) {
  auto l = flat_layout(2);
  const auto r = axpy(2.0, vec(l, {1, 2}), vec(l, {3, 4}));
  EXPECT_EQ(r.values()[0], 5.0);
  EXPECT_EQ(r.values()[1], 8.0);
}

TEST(Axpy, LayoutMismatchNamesSegment) {
  auto l1 = two_segment_layout();
  auto l2 = std::make_shared<Layout>();
  l2->add("a", 2, 3);
  l2->add("c", 4, 1);
  try {
    axpy(1.0, ParamVector::zeros(l1), ParamVector::zeros(l2));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("'b'"), std::string::npos) << e.what();
  }
}

TEST(Axpy, Deterministic) {
  auto l = flat_layout(64);
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n;
  Eigen::VectorXd a(64), b(64);
  for (auto& x : a) x = n(rng);
  for (auto& x : b) x = n(rng);
  const ParamVector x(l, a), y(l, b);
  EXPECT_TRUE(axpy(0.37, x, y).bitwise_equal(axpy(0.37, x, y)));
}

TEST(FdGradient, QuadraticGradientIsPoint) {
  auto l = flat_layout(2);
  const auto w = vec(l, {3, -1});
  const auto g = fd_gradient([](const ParamVector& p) { return 0.5 * p.values().squaredNorm(); },
                             w, 1e-5);
  EXPECT_NEAR(g.values()[0], 3.0, 1e-8);
  EXPECT_NEAR(g.values()[1], -1.0, 1e-8);
}

TEST(FdGradient, ConstantHasZeroGradient) {
  auto l = flat_layout(4);
  const auto g = fd_gradient([](const ParamVector&) { return 2.5; }, ParamVector::zeros(l));
  EXPECT_EQ(g.values(), Eigen::VectorXd::Zero(4));
}

TEST(FdGradient, NonFiniteReportsIndex) {
  auto l = flat_layout(3);
  try {
    fd_gradient(
        [](const ParamVector& p) {
          return p.values()[2] > 0.5 ? std::numeric_limits<double>::infinity() : 0.0;
        },
        vec(l, {0, 0, 0.5}));
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("index 2"), std::string::npos);
  }
}

TEST(FdHvp, IdentityHessian) {
  auto l = flat_layout(2);
  const auto hv = fd_hvp([](const ParamVector& p) { return p; }, vec(l, {0.3, 0.1}),
                         vec(l, {1, 2}));
  EXPECT_NEAR(hv.values()[0], 1.0, 1e-10);
  EXPECT_NEAR(hv.values()[1], 2.0, 1e-10);
}

TEST(FdHvp, DiagonalLinearMap) {
  auto l = flat_layout(2);
  auto g = [&](const ParamVector& p) {
    return ParamVector(l, Eigen::Vector2d(2.0 * p.values()[0], 5.0 * p.values()[1]));
  };
  const auto hv = fd_hvp(g, vec(l, {-1, 4}), vec(l, {1, 1}));
  EXPECT_NEAR(hv.values()[0], 2.0, 1e-9);
  EXPECT_NEAR(hv.values()[1], 5.0, 1e-9);
}

TEST(Base64, RoundTripsPackedDoubles) {
  Eigen::VectorXd v(5);
  v << 0.1, -0.0, 1e-308, std::numeric_limits<double>::max(), 3.0;
  for (int n = 0; n <= 5; ++n) {
    const Eigen::VectorXd head = v.head(n);
    const auto back = unpack_doubles(base64_decode(base64_encode(pack_doubles(head))));
    ASSERT_EQ(back.size(), n);
    for (int i = 0; i < n; ++i) {
      EXPECT_EQ(std::bit_cast<std::uint64_t>(back[i]), std::bit_cast<std::uint64_t>(head[i]));
    }
  }
  EXPECT_EQ(base64_encode("Man"), "TWFu");
  EXPECT_EQ(base64_encode("Ma"), "TWE=");
  EXPECT_THROW(base64_decode("abc"), ConfigError);
}

}  // namespace
}  // namespace metassm
