#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "metassm/errors.hpp"

namespace metassm {

/// One named tensor inside a flat parameter vector. Stored column-major.
struct Segment {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::Index offset = 0;

  Eigen::Index size() const { return rows * cols; }
  bool operator==(const Segment&) const = default;
};

/// Ordered description of how a flat vector maps onto named matrices.
class Layout {
 public:
  Layout() = default;

  void add(std::string name, Eigen::Index rows, Eigen::Index cols) {
    if (rows < 1 || cols < 1) {
      throw ConfigError("layout segment '" + name + "' has an empty shape");
    }
    for (const auto& s : segments_) {
      if (s.name == name) throw ConfigError("duplicate layout segment '" + name + "'");
    }
    segments_.push_back({std::move(name), rows, cols, total_});
    total_ += rows * cols;
  }

  Eigen::Index total_size() const { return total_; }
  const std::vector<Segment>& segments() const { return segments_; }

  const Segment& find(const std::string& name) const {
    for (const auto& s : segments_) {
      if (s.name == name) return s;
    }
    throw ConfigError("no layout segment named '" + name + "'");
  }

  bool operator==(const Layout& other) const { return segments_ == other.segments_; }

 private:
  std::vector<Segment> segments_;
  Eigen::Index total_ = 0;
};

using LayoutPtr = std::shared_ptr<const Layout>;

/// Throws ConfigError naming the first segment where the two layouts disagree.
inline void require_same_layout(const LayoutPtr& a, const LayoutPtr& b) {
  if (a == b) return;
  if (!a || !b) throw ConfigError("layout mismatch: missing layout");
  if (*a == *b) return;
  const auto& sa = a->segments();
  const auto& sb = b->segments();
  const std::size_t n = std::min(sa.size(), sb.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (!(sa[i] == sb[i])) {
      throw ConfigError("layout mismatch at segment '" + sa[i].name + "' vs '" + sb[i].name +
                        "'");
    }
  }
  const auto& extra = sa.size() > sb.size() ? sa[n] : sb[n];
  throw ConfigError("layout mismatch at segment '" + extra.name + "' (present on one side only)");
}

/// Dense parameter vector with a shared named layout.
class ParamVector {
 public:
  ParamVector() = default;

  ParamVector(LayoutPtr layout, Eigen::VectorXd values)
      : layout_(std::move(layout)), values_(std::move(values)) {
    if (!layout_) throw ConfigError("ParamVector requires a layout");
    if (values_.size() != layout_->total_size()) {
      throw ConfigError("ParamVector length " + std::to_string(values_.size()) +
                        " does not match layout size " + std::to_string(layout_->total_size()));
    }
  }

  static ParamVector zeros(const LayoutPtr& layout) {
    return {layout, Eigen::VectorXd::Zero(layout->total_size())};
  }

  static ParamVector unflatten(const LayoutPtr& layout, Eigen::VectorXd flat) {
    return {layout, std::move(flat)};
  }

  const Eigen::VectorXd& flatten() const { return values_; }
  const Eigen::VectorXd& values() const { return values_; }
  Eigen::VectorXd& values() { return values_; }
  const LayoutPtr& layout() const { return layout_; }
  Eigen::Index size() const { return values_.size(); }

  Eigen::Map<const Eigen::MatrixXd> tensor(const std::string& name) const {
    const Segment& s = layout_->find(name);
    return {values_.data() + s.offset, s.rows, s.cols};
  }
  Eigen::Map<Eigen::MatrixXd> tensor(const std::string& name) {
    const Segment& s = layout_->find(name);
    return {values_.data() + s.offset, s.rows, s.cols};
  }
  Eigen::Map<const Eigen::MatrixXd> tensor(const Segment& s) const {
    return {values_.data() + s.offset, s.rows, s.cols};
  }
  Eigen::Map<Eigen::MatrixXd> tensor(const Segment& s) {
    return {values_.data() + s.offset, s.rows, s.cols};
  }

  ParamVector& operator+=(const ParamVector& o) {
    require_same_layout(layout_, o.layout_);
    values_ += o.values_;
    return *this;
  }
  ParamVector& operator-=(const ParamVector& o) {
    require_same_layout(layout_, o.layout_);
    values_ -= o.values_;
    return *this;
  }
  ParamVector& operator*=(double a) {
    values_ *= a;
    return *this;
  }

  friend ParamVector operator+(ParamVector a, const ParamVector& b) { return a += b; }
  friend ParamVector operator-(ParamVector a, const ParamVector& b) { return a -= b; }
  friend ParamVector operator*(double s, ParamVector a) { return a *= s; }
  friend ParamVector operator-(ParamVector a) { return a *= -1.0; }

  bool bitwise_equal(const ParamVector& o) const {
    if (!layout_ || !o.layout_ || !(*layout_ == *o.layout_)) return false;
    return values_.size() == o.values_.size() &&
           std::equal(values_.data(), values_.data() + values_.size(), o.values_.data(),
                      [](double x, double y) { return std::bit_cast<std::uint64_t>(x) ==
                                                      std::bit_cast<std::uint64_t>(y); });
  }

 private:
  LayoutPtr layout_;
  Eigen::VectorXd values_;
};

/// a*x + y. Element-wise and exact.
inline ParamVector axpy(double a, const ParamVector& x, const ParamVector& y) {
  require_same_layout(x.layout(), y.layout());
  Eigen::VectorXd out(y.size());
  for (Eigen::Index i = 0; i < out.size(); ++i) out[i] = a * x.values()[i] + y.values()[i];
  return {y.layout(), std::move(out)};
}

inline double dot(const ParamVector& x, const ParamVector& y) {
  require_same_layout(x.layout(), y.layout());
  return x.values().dot(y.values());
}

inline double norm(const ParamVector& x) { return x.values().norm(); }

/// Relative error ||a - b|| / max(||b||, floor).
inline double relative_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b,
                             double floor = 1e-12) {
  return (a - b).norm() / std::max(b.norm(), floor);
}

inline constexpr double kFdGradientStep = 1e-5;
inline constexpr double kFdHvpStep = 1e-4;

/// Central-difference gradient of a scalar function of a ParamVector.
template <class F>
ParamVector fd_gradient(F&& f, const ParamVector& w, double h = kFdGradientStep) {
  if (!(h > 0.0)) throw ConfigError("fd_gradient: step must be positive");
  ParamVector probe = w;
  ParamVector grad = ParamVector::zeros(w.layout());
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    const double orig = probe.values()[i];
    probe.values()[i] = orig + h;
    const double fp = f(std::as_const(probe));
    probe.values()[i] = orig - h;
    const double fm = f(std::as_const(probe));
    probe.values()[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericalError("fd_gradient: non-finite function value at index " +
                           std::to_string(i));
    }
    grad.values()[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

/// Central-difference Hessian-vector product from a gradient function.
template <class G>
ParamVector fd_hvp(G&& g, const ParamVector& w, const ParamVector& v, double h = kFdHvpStep) {
  if (!(h > 0.0)) throw ConfigError("fd_hvp: step must be positive");
  require_same_layout(w.layout(), v.layout());
  const ParamVector gp = g(axpy(h, v, w));
  const ParamVector gm = g(axpy(-h, v, w));
  require_same_layout(gp.layout(), w.layout());
  ParamVector out = ParamVector::zeros(w.layout());
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    const double a = gp.values()[i];
    const double b = gm.values()[i];
    if (!std::isfinite(a) || !std::isfinite(b)) {
      throw NumericalError("fd_hvp: non-finite gradient value at index " + std::to_string(i));
    }
    out.values()[i] = (a - b) / (2.0 * h);
  }
  return out;
}

}  // namespace metassm
