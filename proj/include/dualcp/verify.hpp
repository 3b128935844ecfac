#pragma once

// Self-checks run by `dualcp verify`: ETF geometry, the coarse/fine angle
// bound, analytic-vs-numeric loss gradients, and DFS grouping against a
// transitive-closure reference.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dualcp/calibrator.hpp"
#include "dualcp/cpg.hpp"
#include "dualcp/embedding_store.hpp"
#include "dualcp/rng.hpp"

namespace dualcp::verify {

struct SuiteResult {
  std::string name;
  bool passed = true;
  double worst = 0.0;  // worst observed error (suite-specific meaning)
  double seconds = 0.0;
  std::string detail;
};

inline std::vector<std::string> numbered_names(std::size_t k) {
  std::vector<std::string> names(k);
  for (std::size_t i = 0; i < k; ++i) names[i] = "c" + std::to_string(i);
  return names;
}

inline GuidanceMatrix gaussian_guidance(Eigen::Index d, Eigen::Index k, Rng& rng) {
  Eigen::MatrixXd y(d, k);
  for (Eigen::Index c = 0; c < k; ++c)
    for (Eigen::Index r = 0; r < d; ++r) y(r, c) = rng.normal();
  return make_guidance(std::move(y), numbered_names(static_cast<std::size_t>(k)));
}

/// Classes drawn around a few shared directions so that moderate thresholds
/// produce non-trivial groups.
inline GuidanceMatrix clustered_guidance(Eigen::Index d, Eigen::Index k, Rng& rng) {
  const auto clusters = static_cast<Eigen::Index>(1 + rng.below(static_cast<std::uint64_t>(k)));
  Eigen::MatrixXd centers(d, clusters);
  for (Eigen::Index c = 0; c < clusters; ++c)
    for (Eigen::Index r = 0; r < d; ++r) centers(r, c) = rng.normal();
  centers.colwise().normalize();
  const double spread = rng.uniform(0.05, 1.0);
  Eigen::MatrixXd y(d, k);
  for (Eigen::Index c = 0; c < k; ++c) {
    Eigen::VectorXd noise(d);
    for (Eigen::Index r = 0; r < d; ++r) noise(r) = rng.normal() / std::sqrt(static_cast<double>(d));
    y.col(c) = centers.col(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(clusters)))) + spread * noise;
  }
  return make_guidance(std::move(y), numbered_names(static_cast<std::size_t>(k)));
}

template <typename F>
SuiteResult timed(std::string name, F&& body) {
  SuiteResult r;
  r.name = std::move(name);
  const auto start = std::chrono::steady_clock::now();
  body(r);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

/// Max deviation of column norms from 1 and of off-diagonal Gram entries from -1/(K-1).
inline double etf_deviation(const Eigen::MatrixXd& e) {
  const auto k = e.cols();
  const Eigen::MatrixXd gram = e.transpose() * e;
  const double off = -1.0 / (static_cast<double>(k) - 1.0);
  double worst = 0.0;
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = 0; j < k; ++j) worst = std::max(worst, std::abs(gram(i, j) - (i == j ? 1.0 : off)));
  return worst;
}

inline SuiteResult etf_suite(std::uint64_t seed) {
  return timed("etf-geometry", [&](SuiteResult& r) {
    Rng rng(seed);
    for (Eigen::Index k : {2, 5, 50}) {
      const auto e = vanilla_prototypes(gaussian_guidance(512, k, rng));
      const double dev = etf_deviation(e);
      r.worst = std::max(r.worst, dev);
      if (dev > 1e-6) {
        r.passed = false;
        r.detail += "K=" + std::to_string(k) + " deviates by " + std::to_string(dev) + "; ";
      }
    }
  });
}

inline SuiteResult angle_bound_suite(std::uint64_t seed, int configs = 100) {
  return timed("angle-bound", [&](SuiteResult& r) {
    Rng rng(seed);
    int equality_cases = 0;
    for (int i = 0; i < configs; ++i) {
      const auto k = static_cast<Eigen::Index>(2 + rng.below(63));
      const double p = i == 0 ? 1.0 : rng.uniform(0.3, 1.0);
      const auto guidance = clustered_guidance(128, k, rng);
      const auto bank = build_dual_bank(guidance, p);
      const auto report = verify_angle_bound(bank);
      if (!report.holds) {
        r.passed = false;
        r.detail += "config " + std::to_string(i) + " violates the bound; ";
      }
      if (report.num_groups == report.num_classes) {
        ++equality_cases;
        const double gap = std::abs(*report.min_coarse_angle - report.vanilla_angle);
        r.worst = std::max(r.worst, gap);
        if (gap > 1e-9) {
          r.passed = false;
          r.detail += "config " + std::to_string(i) + " misses equality by " + std::to_string(gap) + "; ";
        }
      }
    }
    if (equality_cases == 0) {
      r.passed = false;
      r.detail += "no N_g = K configuration exercised; ";
    }
  });
}

inline std::vector<double> flatten(const Mlp& coarse, const std::vector<Mlp>& fine) {
  std::vector<double> out;
  for_each_parameter(coarse, [&](const double& v) { out.push_back(v); });
  for (const auto& f : fine) for_each_parameter(f, [&](const double& v) { out.push_back(v); });
  return out;
}

/// Norm-wise relative error between analytic and central-difference gradients.
inline double gradient_check(CalibratorParams params, const Batch& batch, const DualPrototypeBank& bank, double alpha,
                             double step = 1e-5) {
  const auto lg = loss_gradients(params, batch, bank, alpha);
  const auto analytic = flatten(lg.grad.coarse, lg.grad.fine);
  std::vector<double> numeric;
  auto probe = [&](double& v) {
    const double saved = v;
    v = saved + step;
    const double up = loss_gradients(params, batch, bank, alpha).loss;
    v = saved - step;
    const double down = loss_gradients(params, batch, bank, alpha).loss;
    v = saved;
    numeric.push_back((up - down) / (2.0 * step));
  };
  for_each_parameter(params.coarse, probe);
  for (auto& f : params.fine) for_each_parameter(f, probe);
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-300});
}

struct GradientInstance {
  CalibratorParams params;
  Batch batch;
  DualPrototypeBank bank;
  double alpha = 0.5;
};

/// Random small calibrator (d <= 8, <= 2 layers), bank and batch.
inline GradientInstance random_gradient_instance(Rng& rng) {
  GradientInstance inst;
  const auto d = static_cast<Eigen::Index>(2 + rng.below(7));
  const auto k = static_cast<std::size_t>(2 + rng.below(static_cast<std::uint64_t>(d - 1)));
  // Random partition of the classes into groups.
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t c = 0; c < k; ++c) {
    if (groups.empty() || rng.uniform() < 0.5) groups.push_back({c});
    else groups[rng.below(groups.size())].push_back(c);
  }
  auto guidance = gaussian_guidance(d, static_cast<Eigen::Index>(k), rng);
  inst.bank = build_bank_from_grouping(guidance, make_grouping(std::move(groups), k), 0.85, BankMode::Dual);
  Architecture arch;
  arch.layers = 1 + static_cast<int>(rng.below(2));
  const double mults[] = {0.5, 1.0, 2.0};
  arch.hidden_mult = mults[rng.below(3)];
  arch.activation = rng.uniform() < 0.5 ? Activation::Gelu : Activation::Softplus;
  arch.residual = rng.uniform() < 0.3;
  inst.params = init_params(d, inst.bank.num_groups(), arch, rng);
  auto jitter = [&](double& v) { v += 0.1 * rng.normal(); };
  for_each_parameter(inst.params.coarse, jitter);
  for (auto& f : inst.params.fine) for_each_parameter(f, jitter);
  const auto b = static_cast<Eigen::Index>(1 + rng.below(6));
  inst.batch.features.resize(d, b);
  for (Eigen::Index j = 0; j < b; ++j) {
    for (Eigen::Index i = 0; i < d; ++i) inst.batch.features(i, j) = rng.normal();
    inst.batch.labels.push_back(static_cast<std::uint32_t>(rng.below(k)));
  }
  inst.alpha = rng.uniform();
  return inst;
}

inline SuiteResult gradient_suite(std::uint64_t seed, int instances = 20) {
  return timed("ddr-gradients", [&](SuiteResult& r) {
    Rng rng(seed);
    for (int i = 0; i < instances; ++i) {
      auto inst = random_gradient_instance(rng);
      const double err = gradient_check(inst.params, inst.batch, inst.bank, inst.alpha);
      r.worst = std::max(r.worst, err);
      if (!(err < 1e-6)) {
        r.passed = false;
        r.detail += "instance " + std::to_string(i) + " relative error " + std::to_string(err) + "; ";
      }
    }
  });
}

/// Symmetric 0/1 adjacency with self-loops and a random edge density.
inline Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> random_graph(std::size_t n, Rng& rng) {
  Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> a =
      Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>::Zero(static_cast<Eigen::Index>(n),
                                                                         static_cast<Eigen::Index>(n));
  const double edge_p = rng.uniform(0.0, 3.0) / static_cast<double>(n);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    a(i, i) = 1;
    for (Eigen::Index j = i + 1; j < a.cols(); ++j)
      if (rng.uniform() < edge_p) a(i, j) = a(j, i) = 1;
  }
  return a;
}

/// Partition from Floyd-Warshall reachability.
inline std::vector<std::vector<std::size_t>> closure_partition(
    const Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>& a) {
  const auto n = static_cast<std::size_t>(a.rows());
  std::vector<std::vector<std::uint8_t>> reach(n, std::vector<std::uint8_t>(n, 0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      reach[i][j] = (i == j || a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))) ? 1 : 0;
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < n; ++i)
      if (reach[i][k])
        for (std::size_t j = 0; j < n; ++j) reach[i][j] |= reach[k][j];
  std::vector<std::vector<std::size_t>> parts;
  std::vector<bool> placed(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    if (placed[i]) continue;
    std::vector<std::size_t> part;
    for (std::size_t j = i; j < n; ++j)
      if (reach[i][j]) {
        part.push_back(j);
        placed[j] = true;
      }
    parts.push_back(std::move(part));
  }
  return parts;
}

inline SuiteResult grouping_suite(std::uint64_t seed, int graphs = 200, std::size_t max_nodes = 200) {
  return timed("grouping-closure", [&](SuiteResult& r) {
    Rng rng(seed);
    for (int i = 0; i < graphs; ++i) {
      const auto n = 1 + static_cast<std::size_t>(rng.below(max_nodes));
      const auto a = random_graph(n, rng);
      if (connected_groups_of(a).groups != closure_partition(a)) {
        r.passed = false;
        r.worst += 1.0;
        r.detail += "graph " + std::to_string(i) + " (" + std::to_string(n) + " nodes) differs; ";
      }
    }
  });
}

inline std::vector<SuiteResult> run_all(std::uint64_t seed) {
  return {etf_suite(seed), angle_bound_suite(seed + 1), gradient_suite(seed + 2), grouping_suite(seed + 3)};
}

}  // namespace dualcp::verify
