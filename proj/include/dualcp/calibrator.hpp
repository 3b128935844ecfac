#pragma once

// Coarse-to-fine calibrator. A coarse MLP maps an image feature x to x_C; the
// fine MLP of x's group maps [x; x_C] to x_F. Both outputs are L2-normalized
// and regressed onto their prototypes with the dual dot-regression loss
//   alpha (x_C.e_C - 1)^2 + (1 - alpha) (x_F.e_F - 1)^2.
// Gradients are derived by hand and flow through both normalizations and
// through x_C into the fine branch.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "dualcp/binary_io.hpp"
#include "dualcp/cpg.hpp"
#include "dualcp/error.hpp"
#include "dualcp/rng.hpp"

namespace dualcp {

inline constexpr double kMinOutputNorm = 1e-12;

enum class Activation { Gelu, Softplus };

inline std::string to_string(Activation a) { return a == Activation::Gelu ? "gelu" : "softplus"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "gelu") return Activation::Gelu;
  if (s == "softplus") return Activation::Softplus;
  fail(ErrorCode::BadConfig, "unknown activation '" + s + "'");
}

struct Architecture {
  int layers = 2;
  double hidden_mult = 1.0;
  Activation activation = Activation::Gelu;
  /// Adds the first d input entries (x itself) to the MLP output.
  bool residual = false;

  bool operator==(const Architecture&) const = default;
};

namespace detail {

inline double act(Activation a, double z) {
  if (a == Activation::Gelu) return 0.5 * z * (1.0 + std::erf(z * std::numbers::sqrt2 / 2.0));
  return z > 30.0 ? z : std::log1p(std::exp(z));
}

inline double act_grad(Activation a, double z) {
  if (a == Activation::Gelu) {
    const double cdf = 0.5 * (1.0 + std::erf(z * std::numbers::sqrt2 / 2.0));
    const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + z * pdf;
  }
  return 1.0 / (1.0 + std::exp(-z));
}

}  // namespace detail

struct Dense {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;
};

struct Mlp {
  std::vector<Dense> layers;

  Eigen::Index input_dim() const { return layers.front().weight.cols(); }
  Eigen::Index output_dim() const { return layers.back().weight.rows(); }

  /// Same shapes, all zeros; used as a gradient accumulator.
  Mlp zeros_like() const {
    Mlp out = *this;
    for (auto& l : out.layers) {
      l.weight.setZero();
      l.bias.setZero();
    }
    return out;
  }

  bool all_finite() const {
    for (const auto& l : layers)
      if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
    return true;
  }
};

struct MlpCache {
  std::vector<Eigen::MatrixXd> inputs;  // input to each layer
  std::vector<Eigen::MatrixXd> pre;     // pre-activation of each hidden layer
};

/// Batched forward: columns of `x` are samples.
inline Eigen::MatrixXd mlp_forward(const Mlp& mlp, const Architecture& arch, const Eigen::MatrixXd& x,
                                   MlpCache* cache = nullptr) {
  Eigen::MatrixXd a = x;
  const auto last = mlp.layers.size() - 1;
  for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
    const auto& layer = mlp.layers[l];
    if (cache) cache->inputs.push_back(a);
    Eigen::MatrixXd z = layer.weight * a;
    z.colwise() += layer.bias;
    if (l < last) {
      if (cache) cache->pre.push_back(z);
      a = z.unaryExpr([&](double v) { return detail::act(arch.activation, v); });
    } else {
      a = std::move(z);
    }
  }
  if (arch.residual) a += x.topRows(a.rows());
  return a;
}

/// Accumulates parameter gradients into `grad` and returns d(loss)/d(input).
inline Eigen::MatrixXd mlp_backward(const Mlp& mlp, const Architecture& arch, const MlpCache& cache,
                                    const Eigen::MatrixXd& d_out, Mlp& grad) {
  Eigen::MatrixXd delta = d_out;
  const auto last = mlp.layers.size() - 1;
  for (std::size_t l = mlp.layers.size(); l-- > 0;) {
    if (l < last) {
      delta.array() *=
          cache.pre[l].unaryExpr([&](double v) { return detail::act_grad(arch.activation, v); }).array();
    }
    grad.layers[l].weight.noalias() += delta * cache.inputs[l].transpose();
    grad.layers[l].bias += delta.rowwise().sum();
    delta = mlp.layers[l].weight.transpose() * delta;
  }
  if (arch.residual) delta.topRows(d_out.rows()) += d_out;
  return delta;
}

inline Eigen::MatrixXd normalize_columns(const Eigen::MatrixXd& u, Eigen::VectorXd* norms = nullptr) {
  Eigen::VectorXd n = u.colwise().norm().transpose();
  for (Eigen::Index j = 0; j < n.size(); ++j)
    require(n(j) > kMinOutputNorm, ErrorCode::DegenerateOutput, "calibrator output has (near) zero norm");
  Eigen::MatrixXd x = u * n.cwiseInverse().asDiagonal();
  if (norms) *norms = std::move(n);
  return x;
}

/// Backprop through x = u / |u|: du = (dx - x (x.dx)) / |u|, per column.
inline Eigen::MatrixXd normalize_backward(const Eigen::MatrixXd& x, const Eigen::VectorXd& norms,
                                          const Eigen::MatrixXd& dx) {
  const Eigen::RowVectorXd proj = (x.array() * dx.array()).colwise().sum();
  Eigen::MatrixXd du = dx - x * proj.asDiagonal();
  return du * norms.cwiseInverse().asDiagonal();
}

/// Calls f(double&) on every weight and bias, layer by layer (weights
/// column-major, then bias).
template <typename MlpT, typename F>
void for_each_parameter(MlpT& mlp, F&& f) {
  for (auto& l : mlp.layers) {
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) f(l.weight.data()[i]);
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) f(l.bias.data()[i]);
  }
}

struct CalibratorParams {
  Architecture arch;
  Mlp coarse;              // d -> d
  std::vector<Mlp> fine;   // 2d -> d, one per group

  Eigen::Index dim() const { return coarse.output_dim(); }
  std::size_t num_groups() const { return fine.size(); }
};

inline Eigen::Index hidden_width(const Architecture& arch, Eigen::Index d) {
  return std::max<Eigen::Index>(1, static_cast<Eigen::Index>(std::lround(arch.hidden_mult * static_cast<double>(d))));
}

inline Mlp init_mlp(Eigen::Index in, Eigen::Index hidden, Eigen::Index out, int layers, Rng& rng) {
  Mlp mlp;
  Eigen::Index fan_in = in;
  for (int l = 0; l < layers; ++l) {
    const Eigen::Index width = l + 1 == layers ? out : hidden;
    Dense dense{Eigen::MatrixXd(width, fan_in), Eigen::VectorXd::Zero(width)};
    const double bound = std::sqrt(3.0 / static_cast<double>(fan_in));
    for (Eigen::Index r = 0; r < width; ++r)
      for (Eigen::Index c = 0; c < fan_in; ++c) dense.weight(r, c) = rng.uniform(-bound, bound);
    mlp.layers.push_back(std::move(dense));
    fan_in = width;
  }
  return mlp;
}

/// Fresh parameters: uniform weights with variance 1/fan_in, zero biases.
inline CalibratorParams init_params(Eigen::Index d, std::size_t num_groups, const Architecture& arch, Rng& rng) {
  require(arch.layers >= 1, ErrorCode::BadConfig, "calibrator needs at least one layer");
  require(arch.hidden_mult > 0.0, ErrorCode::BadConfig, "hidden multiplier must be positive");
  require(num_groups >= 1, ErrorCode::BadConfig, "calibrator needs at least one group");
  const auto hidden = hidden_width(arch, d);
  CalibratorParams params;
  params.arch = arch;
  params.coarse = init_mlp(d, hidden, d, arch.layers, rng);
  for (std::size_t g = 0; g < num_groups; ++g) params.fine.push_back(init_mlp(2 * d, hidden, d, arch.layers, rng));
  return params;
}

struct CalibratedFeatures {
  Eigen::VectorXd coarse;
  Eigen::VectorXd fine;
};

/// Normalized coarse features for a batch (columns).
inline Eigen::MatrixXd coarse_features(const CalibratorParams& params, const Eigen::MatrixXd& x) {
  require(x.allFinite(), ErrorCode::NonFinite, "calibrator input contains NaN or Inf");
  return normalize_columns(mlp_forward(params.coarse, params.arch, x));
}

/// Normalized fine features of `group`'s head given inputs and their coarse features.
inline Eigen::MatrixXd fine_features(const CalibratorParams& params, const Eigen::MatrixXd& x,
                                     const Eigen::MatrixXd& x_coarse, std::size_t group) {
  require(group < params.fine.size(), ErrorCode::ShapeMismatch, "group index out of range");
  Eigen::MatrixXd in(2 * x.rows(), x.cols());
  in << x, x_coarse;
  return normalize_columns(mlp_forward(params.fine[group], params.arch, in));
}

inline CalibratedFeatures forward(const CalibratorParams& params, const Eigen::VectorXd& x, std::size_t group) {
  require(group < params.num_groups(), ErrorCode::ShapeMismatch, "group index out of range");
  const Eigen::MatrixXd xc = coarse_features(params, x);
  const Eigen::MatrixXd xf = fine_features(params, x, xc, group);
  return {xc.col(0), xf.col(0)};
}

inline double ddr_loss(const CalibratedFeatures& f, const Eigen::VectorXd& e_coarse, const Eigen::VectorXd& e_fine,
                       double alpha) {
  const double c = f.coarse.dot(e_coarse) - 1.0;
  const double m = f.fine.dot(e_fine) - 1.0;
  return alpha * c * c + (1.0 - alpha) * m * m;
}

struct Batch {
  Eigen::MatrixXd features;            // d x B
  std::vector<std::uint32_t> labels;   // B
};

struct Gradients {
  Mlp coarse;
  std::vector<Mlp> fine;
};

struct LossAndGradients {
  double loss = 0.0;
  Gradients grad;
};

/// Mean DDR loss over the batch and its exact gradient w.r.t. every parameter.
inline LossAndGradients loss_gradients(const CalibratorParams& params, const Batch& batch,
                                       const DualPrototypeBank& bank, double alpha) {
  const auto d = params.dim();
  const auto n = batch.features.cols();
  require(n >= 1 && static_cast<std::size_t>(n) == batch.labels.size(), ErrorCode::ShapeMismatch,
          "batch features and labels disagree");
  require(params.num_groups() == bank.num_groups(), ErrorCode::ShapeMismatch,
          "calibrator and bank disagree on the number of groups");
  const double scale = 1.0 / static_cast<double>(n);

  LossAndGradients out;
  out.grad.coarse = params.coarse.zeros_like();
  for (const auto& f : params.fine) out.grad.fine.push_back(f.zeros_like());

  MlpCache coarse_cache;
  const Eigen::MatrixXd u_c = mlp_forward(params.coarse, params.arch, batch.features, &coarse_cache);
  Eigen::VectorXd norms_c;
  const Eigen::MatrixXd x_c = normalize_columns(u_c, &norms_c);

  Eigen::MatrixXd dx_c(d, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const Eigen::VectorXd e = bank.coarse_target(batch.labels[static_cast<std::size_t>(j)]);
    const double r = x_c.col(j).dot(e) - 1.0;
    out.loss += alpha * r * r * scale;
    dx_c.col(j) = 2.0 * alpha * r * scale * e;
  }

  // Fine heads see only the samples of their own group.
  std::vector<std::vector<Eigen::Index>> members(bank.num_groups());
  for (Eigen::Index j = 0; j < n; ++j)
    members[bank.grouping.class_to_group[batch.labels[static_cast<std::size_t>(j)]].first].push_back(j);

  for (std::size_t g = 0; g < members.size(); ++g) {
    const auto& idx = members[g];
    if (idx.empty()) continue;
    const auto m = static_cast<Eigen::Index>(idx.size());
    Eigen::MatrixXd in(2 * d, m);
    for (Eigen::Index k = 0; k < m; ++k) {
      in.col(k).head(d) = batch.features.col(idx[static_cast<std::size_t>(k)]);
      in.col(k).tail(d) = x_c.col(idx[static_cast<std::size_t>(k)]);
    }
    MlpCache cache;
    const Eigen::MatrixXd u_f = mlp_forward(params.fine[g], params.arch, in, &cache);
    Eigen::VectorXd norms_f;
    const Eigen::MatrixXd x_f = normalize_columns(u_f, &norms_f);
    Eigen::MatrixXd dx_f(d, m);
    for (Eigen::Index k = 0; k < m; ++k) {
      const Eigen::VectorXd e = bank.fine_target(batch.labels[static_cast<std::size_t>(idx[static_cast<std::size_t>(k)])]);
      const double r = x_f.col(k).dot(e) - 1.0;
      out.loss += (1.0 - alpha) * r * r * scale;
      dx_f.col(k) = 2.0 * (1.0 - alpha) * r * scale * e;
    }
    const Eigen::MatrixXd d_in =
        mlp_backward(params.fine[g], params.arch, cache, normalize_backward(x_f, norms_f, dx_f), out.grad.fine[g]);
    for (Eigen::Index k = 0; k < m; ++k) dx_c.col(idx[static_cast<std::size_t>(k)]) += d_in.col(k).tail(d);
  }

  mlp_backward(params.coarse, params.arch, coarse_cache, normalize_backward(x_c, norms_c, dx_c), out.grad.coarse);
  return out;
}

struct TrainConfig {
  double alpha = 0.5;
  double lr0 = 0.1;
  int epochs = 20;
  int batch_size = 128;
  double weight_decay = 2e-4;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  Architecture arch;
  bool warm_start = false;
};

inline void validate(const TrainConfig& cfg) {
  require(cfg.alpha >= 0.0 && cfg.alpha <= 1.0, ErrorCode::BadConfig, "alpha must lie in [0, 1]");
  require(cfg.lr0 > 0.0 && std::isfinite(cfg.lr0), ErrorCode::BadConfig, "learning rate must be positive");
  require(cfg.epochs >= 1, ErrorCode::BadConfig, "epochs must be >= 1");
  require(cfg.batch_size >= 1, ErrorCode::BadConfig, "batch size must be >= 1");
  require(cfg.weight_decay >= 0.0, ErrorCode::BadConfig, "weight decay must be >= 0");
  require(cfg.momentum >= 0.0 && cfg.momentum < 1.0, ErrorCode::BadConfig, "momentum must lie in [0, 1)");
  require(cfg.arch.layers >= 1 && cfg.arch.hidden_mult > 0.0, ErrorCode::BadConfig, "invalid architecture");
}

/// Cosine-decayed learning rate for (0-based) epoch e.
inline double cosine_lr(double lr0, int epoch, int epochs) {
  return 0.5 * lr0 * (1.0 + std::cos(std::numbers::pi * epoch / static_cast<double>(epochs)));
}

/// Training rows of one domain, copied out of the full set. The trainer is
/// only ever handed this slice.
struct DomainSlice {
  std::uint32_t domain = 0;
  Eigen::MatrixXd features;  // d x N_t
  std::vector<std::uint32_t> labels;

  Eigen::Index size() const { return features.cols(); }
};

struct TrainResult {
  CalibratorParams params;
  std::vector<double> epoch_losses;  // running mean over each epoch's batches
  double final_loss = 0.0;           // mean loss of the trained params on the slice
};

inline double mean_loss(const CalibratorParams& params, const DomainSlice& data, const DualPrototypeBank& bank,
                        double alpha) {
  const Batch all{data.features, data.labels};
  return loss_gradients(params, all, bank, alpha).loss;
}

/// Mini-batch SGD with momentum, weight decay on weights (not biases) and a
/// cosine learning-rate schedule stepped once per epoch.
inline TrainResult train_domain(const DomainSlice& data, const DualPrototypeBank& bank, const TrainConfig& cfg,
                                const CalibratorParams* warm = nullptr) {
  validate(cfg);
  require(data.size() >= 1, ErrorCode::Empty, "no training rows for domain " + std::to_string(data.domain));
  require(data.features.rows() == bank.dim(), ErrorCode::ShapeMismatch, "feature dimension differs from bank");
  for (auto y : data.labels)
    require(y < bank.num_classes(), ErrorCode::LabelOutOfRange, "label not covered by the prototype bank");

  Rng rng(cfg.seed);
  TrainResult result;
  result.params = warm ? *warm : init_params(bank.dim(), bank.num_groups(), cfg.arch, rng);
  require(result.params.num_groups() == bank.num_groups(), ErrorCode::ShapeMismatch,
          "warm-start parameters built for a different bank");
  auto& params = result.params;

  Gradients velocity{params.coarse.zeros_like(), {}};
  for (const auto& f : params.fine) velocity.fine.push_back(f.zeros_like());

  auto step = [&](Mlp& p, const Mlp& g, Mlp& v, double lr) {
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      v.layers[l].weight = cfg.momentum * v.layers[l].weight + g.layers[l].weight + cfg.weight_decay * p.layers[l].weight;
      v.layers[l].bias = cfg.momentum * v.layers[l].bias + g.layers[l].bias;
      p.layers[l].weight -= lr * v.layers[l].weight;
      p.layers[l].bias -= lr * v.layers[l].bias;
    }
  };

  const auto n = static_cast<std::size_t>(data.size());
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(cfg.lr0, epoch, cfg.epochs);
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += bs) {
      const auto count = std::min(bs, n - start);
      Batch batch{Eigen::MatrixXd(data.features.rows(), static_cast<Eigen::Index>(count)), {}};
      batch.labels.reserve(count);
      for (std::size_t k = 0; k < count; ++k) {
        batch.features.col(static_cast<Eigen::Index>(k)) = data.features.col(static_cast<Eigen::Index>(order[start + k]));
        batch.labels.push_back(data.labels[order[start + k]]);
      }
      const auto lg = loss_gradients(params, batch, bank, cfg.alpha);
      require(std::isfinite(lg.loss), ErrorCode::Diverged, "loss became non-finite in epoch " + std::to_string(epoch));
      epoch_loss += lg.loss * static_cast<double>(count);
      step(params.coarse, lg.grad.coarse, velocity.coarse, lr);
      for (std::size_t g = 0; g < params.fine.size(); ++g) step(params.fine[g], lg.grad.fine[g], velocity.fine[g], lr);
    }
    result.epoch_losses.push_back(epoch_loss / static_cast<double>(n));
  }
  require(params.coarse.all_finite(), ErrorCode::Diverged, "parameters became non-finite");
  result.final_loss = mean_loss(params, data, bank, cfg.alpha);
  require(std::isfinite(result.final_loss), ErrorCode::Diverged, "final loss is non-finite");
  return result;
}

// Checkpoint ("DCPC"): magic, u32 version, u64 JSON length, JSON header
// {arch, N_g, d, seed, config, final_loss}, then f64 matrix blocks: for the
// coarse MLP and then each fine MLP in group order, every layer's weight
// followed by its bias (as a column).

inline constexpr char kCheckpointMagic[4] = {'D', 'C', 'P', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json to_json(const Architecture& a) {
  return {{"layers", a.layers}, {"hidden_mult", a.hidden_mult}, {"activation", to_string(a.activation)},
          {"residual", a.residual}};
}

inline Architecture architecture_from_json(const nlohmann::json& j) {
  Architecture a;
  a.layers = j.at("layers").get<int>();
  a.hidden_mult = j.at("hidden_mult").get<double>();
  a.activation = activation_from_string(j.at("activation").get<std::string>());
  a.residual = j.at("residual").get<bool>();
  return a;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"alpha", c.alpha},       {"lr0", c.lr0},
          {"epochs", c.epochs},     {"batch_size", c.batch_size},
          {"weight_decay", c.weight_decay}, {"momentum", c.momentum},
          {"seed", c.seed},         {"arch", to_json(c.arch)},
          {"warm_start", c.warm_start}};
}

inline std::string serialize_checkpoint(const CalibratorParams& params, const TrainConfig& cfg, double final_loss) {
  const nlohmann::json header = {{"arch", to_json(params.arch)}, {"N_g", params.num_groups()},
                                 {"d", params.dim()},            {"seed", cfg.seed},
                                 {"config", to_json(cfg)},       {"final_loss", final_loss}};
  const std::string text = header.dump();
  std::ostringstream out;
  io::put_bytes(out, std::string_view(kCheckpointMagic, 4));
  io::put_u32(out, kCheckpointVersion);
  io::put_u64(out, text.size());
  io::put_bytes(out, text);
  auto put_mlp = [&](const Mlp& mlp) {
    for (const auto& l : mlp.layers) {
      io::put_matrix(out, l.weight);
      io::put_matrix(out, l.bias);
    }
  };
  put_mlp(params.coarse);
  for (const auto& f : params.fine) put_mlp(f);
  return std::move(out).str();
}

struct Checkpoint {
  CalibratorParams params;
  nlohmann::json header;
};

inline Checkpoint read_checkpoint(io::Reader& in) {
  require(in.string(4) == std::string_view(kCheckpointMagic, 4), ErrorCode::BadMagic, "not a DCPC checkpoint");
  require(in.u32() == kCheckpointVersion, ErrorCode::CorruptHeader, "unsupported checkpoint version");
  const auto len = in.u64();
  require(len <= in.remaining(), ErrorCode::Truncated, "checkpoint header truncated");
  Checkpoint ck;
  std::size_t groups = 0;
  Eigen::Index d = 0;
  try {
    ck.header = nlohmann::json::parse(in.string(static_cast<std::size_t>(len)));
    ck.params.arch = architecture_from_json(ck.header.at("arch"));
    groups = ck.header.at("N_g").get<std::size_t>();
    d = ck.header.at("d").get<Eigen::Index>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidManifest, e.what());
  }
  const auto hidden = hidden_width(ck.params.arch, d);
  auto get_mlp = [&](Eigen::Index in_dim) {
    Mlp mlp;
    Eigen::Index fan_in = in_dim;
    for (int l = 0; l < ck.params.arch.layers; ++l) {
      const Eigen::Index width = l + 1 == ck.params.arch.layers ? d : hidden;
      Dense dense{io::get_matrix(in), {}};
      const Eigen::MatrixXd b = io::get_matrix(in);
      require(dense.weight.rows() == width && dense.weight.cols() == fan_in && b.rows() == width && b.cols() == 1,
              ErrorCode::ShapeMismatch, "checkpoint layer has unexpected shape");
      dense.bias = b.col(0);
      mlp.layers.push_back(std::move(dense));
      fan_in = width;
    }
    return mlp;
  };
  ck.params.coarse = get_mlp(d);
  for (std::size_t g = 0; g < groups; ++g) ck.params.fine.push_back(get_mlp(2 * d));
  return ck;
}

inline void save_checkpoint(const CalibratorParams& params, const TrainConfig& cfg, double final_loss,
                            const std::string& path) {
  io::write_file(path, serialize_checkpoint(params, cfg, final_loss));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  const auto bytes = io::read_file(path);
  io::Reader in(bytes);
  auto ck = read_checkpoint(in);
  require(in.remaining() == 0, ErrorCode::ShapeMismatch, "trailing bytes in checkpoint");
  return ck;
}

}  // namespace dualcp
