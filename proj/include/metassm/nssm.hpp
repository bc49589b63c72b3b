#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <fstream>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "metassm/errors.hpp"
#include "metassm/param_vector.hpp"
#include "metassm/util.hpp"

namespace metassm {

/// Dimensions of a neural state-space model.
struct NssmConfig {
  int n_u = 1;
  int n_y = 1;
  int n_z = 5;
  int history = 10;  // H
  int horizon = 20;  // T
  int hidden_width = 128;
  int hidden_layers = 2;

  int encoder_input() const { return history * (n_u + n_y); }

  void validate() const {
    for (auto [v, name] : {std::pair{n_u, "n_u"}, {n_y, "n_y"}, {n_z, "n_z"}, {history, "history"},
                           {horizon, "horizon"}, {hidden_width, "hidden_width"},
                           {hidden_layers, "hidden_layers"}}) {
      if (v < 1) throw ConfigError(std::string("NssmConfig.") + name + " must be >= 1");
    }
  }

  bool operator==(const NssmConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const NssmConfig& c) {
  j = nlohmann::json{{"n_u", c.n_u},
                     {"n_y", c.n_y},
                     {"n_z", c.n_z},
                     {"history", c.history},
                     {"horizon", c.horizon},
                     {"hidden_width", c.hidden_width},
                     {"hidden_layers", c.hidden_layers}};
}

inline void from_json(const nlohmann::json& j, NssmConfig& c) {
  c.n_u = j.at("n_u").get<int>();
  c.n_y = j.at("n_y").get<int>();
  c.n_z = j.at("n_z").get<int>();
  c.history = j.at("history").get<int>();
  c.horizon = j.at("horizon").get<int>();
  c.hidden_width = j.at("hidden_width").get<int>();
  c.hidden_layers = j.at("hidden_layers").get<int>();
}

/// A batch of (history, future) windows. Each tensor is stored as a
/// (steps * dim) x count matrix: column b is window b, rows are time-major.
struct WindowBatch {
  Eigen::MatrixXd history_u;
  Eigen::MatrixXd history_y;
  Eigen::MatrixXd future_u;
  Eigen::MatrixXd future_y;

  Eigen::Index count() const { return history_u.cols(); }

  void check(const NssmConfig& cfg) const {
    const Eigen::Index b = count();
    if (b < 1) throw ConfigError("WindowBatch is empty");
    auto expect = [&](const Eigen::MatrixXd& m, Eigen::Index rows, const char* name) {
      if (m.rows() != rows || m.cols() != b) {
        throw ConfigError(std::string("WindowBatch.") + name + " has shape " +
                          std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                          ", expected " + std::to_string(rows) + "x" + std::to_string(b));
      }
    };
    expect(history_u, Eigen::Index(cfg.history) * cfg.n_u, "history_u");
    expect(history_y, Eigen::Index(cfg.history) * cfg.n_y, "history_y");
    expect(future_u, Eigen::Index(cfg.horizon) * cfg.n_u, "future_u");
    expect(future_y, Eigen::Index(cfg.horizon) * cfg.n_y, "future_y");
  }

  /// Windows at the given column indices, in order.
  WindowBatch select(const std::vector<Eigen::Index>& cols) const {
    WindowBatch out;
    auto pick = [&](const Eigen::MatrixXd& m) {
      Eigen::MatrixXd r(m.rows(), static_cast<Eigen::Index>(cols.size()));
      for (std::size_t i = 0; i < cols.size(); ++i) r.col(Eigen::Index(i)) = m.col(cols[i]);
      return r;
    };
    out.history_u = pick(history_u);
    out.history_y = pick(history_y);
    out.future_u = pick(future_u);
    out.future_y = pick(future_y);
    return out;
  }
};

/// Encoder MLP + linear latent dynamics. Holds only the configuration and the
/// parameter layout; parameters are passed in as ParamVector.
class Nssm {
 public:
  using Batch = WindowBatch;

  explicit Nssm(NssmConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    auto layout = std::make_shared<Layout>();
    int fan_in = cfg_.encoder_input();
    for (int l = 0; l < cfg_.hidden_layers; ++l) {
      layout->add("encoder." + std::to_string(l) + ".weight", cfg_.hidden_width, fan_in);
      layout->add("encoder." + std::to_string(l) + ".bias", cfg_.hidden_width, 1);
      fan_in = cfg_.hidden_width;
    }
    layout->add("encoder.out.weight", cfg_.n_z, fan_in);
    layout->add("encoder.out.bias", cfg_.n_z, 1);
    layout->add("A_z", cfg_.n_z, cfg_.n_z);
    layout->add("B_z", cfg_.n_z, cfg_.n_u);
    layout->add("C_z", cfg_.n_y, cfg_.n_z);
    layout_ = std::move(layout);
  }

  const NssmConfig& config() const { return cfg_; }
  const LayoutPtr& layout() const { return layout_; }
  Eigen::Index num_params() const { return layout_->total_size(); }

  /// Glorot-uniform encoder weights, zero biases, N(0, 0.1^2) latent matrices.
  ParamVector init(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    ParamVector w = ParamVector::zeros(layout_);
    const auto& segs = layout_->segments();
    const std::size_t n_enc = 2 * static_cast<std::size_t>(cfg_.hidden_layers) + 2;
    for (std::size_t i = 0; i < n_enc; i += 2) {
      auto m = w.tensor(segs[i]);
      const double bound = std::sqrt(6.0 / double(m.rows() + m.cols()));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = dist(rng);
    }
    std::normal_distribution<double> normal(0.0, 0.1);
    for (std::size_t i = n_enc; i < segs.size(); ++i) {
      auto m = w.tensor(segs[i]);
      for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = normal(rng);
    }
    return w;
  }

  /// Interleaved-by-time encoder input: column b = [u_1; y_1; u_2; y_2; ...].
  Eigen::MatrixXd encoder_input(const Eigen::MatrixXd& history_u,
                                const Eigen::MatrixXd& history_y) const {
    const Eigen::Index H = cfg_.history, nu = cfg_.n_u, ny = cfg_.n_y;
    if (history_u.rows() != H * nu || history_y.rows() != H * ny ||
        history_u.cols() != history_y.cols()) {
      throw ConfigError("encode: history must have exactly " + std::to_string(H) + " steps");
    }
    Eigen::MatrixXd x(H * (nu + ny), history_u.cols());
    for (Eigen::Index k = 0; k < H; ++k) {
      x.middleRows(k * (nu + ny), nu) = history_u.middleRows(k * nu, nu);
      x.middleRows(k * (nu + ny) + nu, ny) = history_y.middleRows(k * ny, ny);
    }
    return x;
  }

  /// Latent state per window (n_z x count).
  Eigen::MatrixXd encode(const ParamVector& w, const Eigen::MatrixXd& history_u,
                         const Eigen::MatrixXd& history_y) const {
    check_params(w);
    Forward f;
    run_encoder(w, encoder_input(history_u, history_y), f);
    return f.z.front();
  }

  /// Predicted outputs y_{t+1..t+T} ((T * n_y) x count) from latent z0 and future inputs.
  Eigen::MatrixXd rollout(const ParamVector& w, const Eigen::MatrixXd& z0,
                          const Eigen::MatrixXd& future_u) const {
    check_params(w);
    const Eigen::Index T = future_u.rows() / cfg_.n_u;
    if (z0.rows() != cfg_.n_z || future_u.rows() != T * cfg_.n_u || T < 1 ||
        future_u.cols() != z0.cols()) {
      throw ConfigError("rollout: shape mismatch");
    }
    const auto A = w.tensor(seg_a()), B = w.tensor(seg_b()), C = w.tensor(seg_c());
    Eigen::MatrixXd z = z0;
    Eigen::MatrixXd y(T * cfg_.n_y, z0.cols());
    for (Eigen::Index k = 0; k < T; ++k) {
      z = (A * z + B * future_u.middleRows(k * cfg_.n_u, cfg_.n_u)).eval();
      y.middleRows(k * cfg_.n_y, cfg_.n_y) = C * z;
    }
    return y;
  }

  /// Mean over windows of (1/T) * sum_k ||y_k - yhat_k||^2.
  double loss(const ParamVector& w, const WindowBatch& batch) const {
    batch.check(cfg_);
    check_params(w);
    Forward f;
    forward(w, batch, f);
    return f.residual.squaredNorm() / double(cfg_.horizon * batch.count());
  }

  ParamVector gradient(const ParamVector& w, const WindowBatch& batch) const {
    double unused = 0.0;
    return loss_and_gradient(w, batch, unused);
  }

  ParamVector loss_and_gradient(const ParamVector& w, const WindowBatch& batch,
                                double& loss_out) const {
    batch.check(cfg_);
    check_params(w);
    Forward f;
    forward(w, batch, f);
    loss_out = f.residual.squaredNorm() / double(cfg_.horizon * batch.count());
    Backward b;
    ParamVector g = ParamVector::zeros(layout_);
    backward(w, batch, f, b, g);
    return g;
  }

  /// Exact Hessian-vector product: forward-mode tangent of the reverse pass.
  ParamVector hvp(const ParamVector& w, const WindowBatch& batch, const ParamVector& v) const {
    batch.check(cfg_);
    check_params(w);
    require_same_layout(layout_, v.layout());
    Forward f;
    forward(w, batch, f);
    Backward b;
    ParamVector g = ParamVector::zeros(layout_);
    backward(w, batch, f, b, g);

    const int L = cfg_.hidden_layers;
    const Eigen::Index T = cfg_.horizon, nu = cfg_.n_u;
    const double scale = 2.0 / double(T * batch.count());
    ParamVector hv = ParamVector::zeros(layout_);

    // Forward tangents.
    std::vector<Eigen::MatrixXd> rh(L + 1);
    rh[0] = Eigen::MatrixXd::Zero(f.h[0].rows(), f.h[0].cols());
    for (int l = 0; l < L; ++l) {
      const auto W = w.tensor(seg_w(l));
      Eigen::MatrixXd ra = v.tensor(seg_w(l)) * f.h[l] + W * rh[l];
      ra.colwise() += v.tensor(seg_bias(l)).col(0);
      rh[l + 1] = ra.cwiseProduct(f.mask[l]);
    }
    const auto Wo = w.tensor(seg_wo());
    const auto dWo = v.tensor(seg_wo());
    const auto A = w.tensor(seg_a()), C = w.tensor(seg_c());
    const auto dA = v.tensor(seg_a()), dB = v.tensor(seg_b()), dC = v.tensor(seg_c());

    std::vector<Eigen::MatrixXd> rz(T + 1);
    rz[0] = dWo * f.h[L] + Wo * rh[L];
    rz[0].colwise() += v.tensor(seg_bo()).col(0);
    std::vector<Eigen::MatrixXd> rg(T + 1);
    for (Eigen::Index k = 1; k <= T; ++k) {
      const auto u = batch.future_u.middleRows((k - 1) * nu, nu);
      rz[k] = dA * f.z[k - 1] + A * rz[k - 1] + dB * u;
      rg[k] = scale * (dC * f.z[k] + C * rz[k]);
    }

    // Reverse tangents.
    auto hA = hv.tensor(seg_a());
    auto hB = hv.tensor(seg_b());
    auto hC = hv.tensor(seg_c());
    Eigen::MatrixXd rlam;
    for (Eigen::Index k = T; k >= 1; --k) {
      const auto& gk = b.g[k];
      Eigen::MatrixXd next = dC.transpose() * gk + C.transpose() * rg[k];
      if (k < T) next += dA.transpose() * b.lambda[k + 1] + A.transpose() * rlam;
      rlam = std::move(next);
      const auto u = batch.future_u.middleRows((k - 1) * nu, nu);
      hC.noalias() += rg[k] * f.z[k].transpose() + gk * rz[k].transpose();
      hA.noalias() += rlam * f.z[k - 1].transpose() + b.lambda[k] * rz[k - 1].transpose();
      hB.noalias() += rlam * u.transpose();
    }
    Eigen::MatrixXd rdelta = dA.transpose() * b.lambda[1] + A.transpose() * rlam;

    hv.tensor(seg_wo()) = rdelta * f.h[L].transpose() + b.delta_out * rh[L].transpose();
    hv.tensor(seg_bo()) = rdelta.rowwise().sum();
    Eigen::MatrixXd dh = Wo.transpose() * b.delta_out;
    Eigen::MatrixXd rdh = dWo.transpose() * b.delta_out + Wo.transpose() * rdelta;
    for (int l = L - 1; l >= 0; --l) {
      const Eigen::MatrixXd da = dh.cwiseProduct(f.mask[l]);
      const Eigen::MatrixXd rda = rdh.cwiseProduct(f.mask[l]);
      hv.tensor(seg_w(l)) = rda * f.h[l].transpose() + da * rh[l].transpose();
      hv.tensor(seg_bias(l)) = rda.rowwise().sum();
      if (l > 0) {
        const auto W = w.tensor(seg_w(l));
        rdh = v.tensor(seg_w(l)).transpose() * da + W.transpose() * rda;
        dh = W.transpose() * da;
      }
    }
    return hv;
  }

  /// Segment accessors, by position in the fixed layout order.
  const Segment& seg_w(int l) const { return layout_->segments()[2 * l]; }
  const Segment& seg_bias(int l) const { return layout_->segments()[2 * l + 1]; }
  const Segment& seg_wo() const { return layout_->segments()[2 * cfg_.hidden_layers]; }
  const Segment& seg_bo() const { return layout_->segments()[2 * cfg_.hidden_layers + 1]; }
  const Segment& seg_a() const { return layout_->segments()[2 * cfg_.hidden_layers + 2]; }
  const Segment& seg_b() const { return layout_->segments()[2 * cfg_.hidden_layers + 3]; }
  const Segment& seg_c() const { return layout_->segments()[2 * cfg_.hidden_layers + 4]; }

 private:
  struct Forward {
    std::vector<Eigen::MatrixXd> h;     // h[0] = input, h[l+1] = relu(a_l)
    std::vector<Eigen::MatrixXd> mask;  // 1 where a_l > 0
    std::vector<Eigen::MatrixXd> z;     // z[0] = encoder output, z[k] for k = 1..T
    Eigen::MatrixXd residual;           // stacked yhat - y, (T * n_y) x count
  };
  struct Backward {
    std::vector<Eigen::MatrixXd> g;       // dloss/dyhat_k
    std::vector<Eigen::MatrixXd> lambda;  // dloss/dz_k, k = 1..T
    Eigen::MatrixXd delta_out;            // dloss/dz_0
  };

  void check_params(const ParamVector& w) const { require_same_layout(layout_, w.layout()); }

  void run_encoder(const ParamVector& w, Eigen::MatrixXd x, Forward& f) const {
    const int L = cfg_.hidden_layers;
    f.h.assign(L + 1, {});
    f.mask.assign(L, {});
    f.h[0] = std::move(x);
    for (int l = 0; l < L; ++l) {
      Eigen::MatrixXd a = w.tensor(seg_w(l)) * f.h[l];
      a.colwise() += w.tensor(seg_bias(l)).col(0);
      f.mask[l] = (a.array() > 0.0).cast<double>().matrix();
      f.h[l + 1] = a.cwiseMax(0.0);
    }
    f.z.assign(1, w.tensor(seg_wo()) * f.h[L]);
    f.z[0].colwise() += w.tensor(seg_bo()).col(0);
  }

  void forward(const ParamVector& w, const WindowBatch& batch, Forward& f) const {
    run_encoder(w, encoder_input(batch.history_u, batch.history_y), f);
    const Eigen::Index T = cfg_.horizon, nu = cfg_.n_u, ny = cfg_.n_y;
    const auto A = w.tensor(seg_a()), B = w.tensor(seg_b()), C = w.tensor(seg_c());
    f.z.resize(T + 1);
    f.residual.resize(T * ny, batch.count());
    for (Eigen::Index k = 1; k <= T; ++k) {
      f.z[k] = A * f.z[k - 1] + B * batch.future_u.middleRows((k - 1) * nu, nu);
      f.residual.middleRows((k - 1) * ny, ny) =
          C * f.z[k] - batch.future_y.middleRows((k - 1) * ny, ny);
    }
  }

  void backward(const ParamVector& w, const WindowBatch& batch, const Forward& f, Backward& b,
                ParamVector& grad) const {
    const int L = cfg_.hidden_layers;
    const Eigen::Index T = cfg_.horizon, nu = cfg_.n_u, ny = cfg_.n_y;
    const double scale = 2.0 / double(T * batch.count());
    const auto A = w.tensor(seg_a()), C = w.tensor(seg_c());
    b.g.assign(T + 1, {});
    b.lambda.assign(T + 2, {});
    auto gA = grad.tensor(seg_a());
    auto gB = grad.tensor(seg_b());
    auto gC = grad.tensor(seg_c());
    for (Eigen::Index k = T; k >= 1; --k) {
      b.g[k] = scale * f.residual.middleRows((k - 1) * ny, ny);
      b.lambda[k] = C.transpose() * b.g[k];
      if (k < T) b.lambda[k] += A.transpose() * b.lambda[k + 1];
      gC.noalias() += b.g[k] * f.z[k].transpose();
      gA.noalias() += b.lambda[k] * f.z[k - 1].transpose();
      gB.noalias() += b.lambda[k] * batch.future_u.middleRows((k - 1) * nu, nu).transpose();
    }
    b.delta_out = A.transpose() * b.lambda[1];
    grad.tensor(seg_wo()) = b.delta_out * f.h[L].transpose();
    grad.tensor(seg_bo()) = b.delta_out.rowwise().sum();
    Eigen::MatrixXd dh = w.tensor(seg_wo()).transpose() * b.delta_out;
    for (int l = L - 1; l >= 0; --l) {
      const Eigen::MatrixXd da = dh.cwiseProduct(f.mask[l]);
      grad.tensor(seg_w(l)) = da * f.h[l].transpose();
      grad.tensor(seg_bias(l)) = da.rowwise().sum();
      if (l > 0) dh = w.tensor(seg_w(l)).transpose() * da;
    }
  }

  NssmConfig cfg_;
  LayoutPtr layout_;
};

// ---------------------------------------------------------------------------
// Checkpoints: {version, config, layout, values (base64 little-endian f64)}.

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json checkpoint_json(const NssmConfig& cfg, const ParamVector& w) {
  nlohmann::json layout = nlohmann::json::array();
  for (const auto& s : w.layout()->segments()) {
    layout.push_back({{"name", s.name}, {"shape", {s.rows, s.cols}}});
  }
  return {{"version", kCheckpointVersion},
          {"config", cfg},
          {"layout", layout},
          {"values", base64_encode(pack_doubles(w.values()))}};
}

struct Checkpoint {
  NssmConfig config;
  ParamVector params;
};

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (j.at("version").get<int>() != kCheckpointVersion) {
      throw ConfigError("unsupported checkpoint version " + j.at("version").dump());
    }
    Checkpoint ck{j.at("config").get<NssmConfig>(), {}};
    Nssm model(ck.config);
    const auto& segs = model.layout()->segments();
    const auto& jl = j.at("layout");
    if (jl.size() != segs.size()) throw ConfigError("checkpoint layout does not match config");
    for (std::size_t i = 0; i < segs.size(); ++i) {
      const auto& e = jl[i];
      if (e.at("name").get<std::string>() != segs[i].name ||
          e.at("shape")[0].get<Eigen::Index>() != segs[i].rows ||
          e.at("shape")[1].get<Eigen::Index>() != segs[i].cols) {
        throw ConfigError("checkpoint layout mismatch at segment '" + segs[i].name + "'");
      }
    }
    ck.params = ParamVector(model.layout(),
                            unpack_doubles(base64_decode(j.at("values").get<std::string>())));
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed checkpoint: ") + e.what());
  }
}

inline void write_checkpoint(const std::string& path, const NssmConfig& cfg,
                             const ParamVector& w) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write checkpoint '" + path + "'");
  out << checkpoint_json(cfg, w).dump(2) << '\n';
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read checkpoint '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed checkpoint '" + path + "': " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace metassm
