#pragma once

// Concept prototype generation: simplex ETF prototypes built on the
// orthonormal basis of semantic guidance features, and the dual-level
// (coarse per group, fine within group) variant driven by a similarity
// graph over classes.

#include <algorithm>
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
#include "dualcp/embedding_store.hpp"
#include "dualcp/error.hpp"

namespace dualcp {

inline constexpr double kRankTolerance = 1e-10;

struct OrthonormalBasis {
  Eigen::MatrixXd q;  // d x K, orthonormal columns
  Eigen::MatrixXd r;  // K x K upper triangular, positive diagonal
};

/// Thin QR of `y` with the sign convention diag(R) > 0, which makes Q unique.
inline OrthonormalBasis qr_decompose(const Eigen::MatrixXd& y) {
  const auto d = y.rows();
  const auto k = y.cols();
  require(k >= 1, ErrorCode::ShapeMismatch, "QR of an empty matrix");
  require(k <= d, ErrorCode::TooManyClassesForDim,
          std::to_string(k) + " columns cannot be independent in dimension " + std::to_string(d));

  Eigen::HouseholderQR<Eigen::MatrixXd> qr(y);
  OrthonormalBasis out;
  out.q = qr.householderQ() * Eigen::MatrixXd::Identity(d, k);
  out.r = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
  for (Eigen::Index i = 0; i < k; ++i) {
    if (out.r(i, i) < 0.0) {
      out.r.row(i) *= -1.0;
      out.q.col(i) *= -1.0;
    }
    require(std::abs(out.r(i, i)) >= kRankTolerance, ErrorCode::RankDeficient,
            "column " + std::to_string(i) + " is linearly dependent on earlier columns");
  }
  return out;
}

/// E = sqrt(K/(K-1)) Q (I - 11^T/K): column i is the scaled, centered q_i.
inline Eigen::MatrixXd etf_from_basis(const Eigen::MatrixXd& q) {
  const auto k = q.cols();
  require(k >= 2, ErrorCode::SingletonETF, "a simplex ETF needs at least two vertices");
  const double kd = static_cast<double>(k);
  const Eigen::MatrixXd centering =
      Eigen::MatrixXd::Identity(k, k) - Eigen::MatrixXd::Constant(k, k, 1.0 / kd);
  return std::sqrt(kd / (kd - 1.0)) * q * centering;
}

inline Eigen::MatrixXd vanilla_prototypes(const GuidanceMatrix& guidance) {
  return etf_from_basis(qr_decompose(guidance.columns).q);
}

struct SimilarityGraph {
  Eigen::MatrixXd similarity;                                        // K x K
  Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> adjacency;  // K x K, 0/1
  double threshold = 0.85;
};

/// S = Y^T Y, A_ij = [S_ij > p] (strict).
inline SimilarityGraph similarity_graph(const GuidanceMatrix& guidance, double p) {
  require(p > 0.0 && p <= 1.0, ErrorCode::BadThreshold, "threshold p must lie in (0, 1]");
  SimilarityGraph g;
  g.threshold = p;
  g.similarity = guidance.columns.transpose() * guidance.columns;
  g.adjacency = (g.similarity.array() > p).cast<std::uint8_t>();
  return g;
}

struct Grouping {
  std::vector<std::vector<std::size_t>> groups;
  /// class -> (group index, position within group)
  std::vector<std::pair<std::size_t, std::size_t>> class_to_group;

  std::size_t num_groups() const noexcept { return groups.size(); }
  std::size_t num_classes() const noexcept { return class_to_group.size(); }

  bool operator==(const Grouping&) const = default;
};

/// Builds the inverse map; groups must partition [0, K).
inline Grouping make_grouping(std::vector<std::vector<std::size_t>> groups, std::size_t num_classes) {
  Grouping out;
  out.groups = std::move(groups);
  out.class_to_group.assign(num_classes, {SIZE_MAX, SIZE_MAX});
  std::size_t covered = 0;
  for (std::size_t g = 0; g < out.groups.size(); ++g) {
    require(!out.groups[g].empty(), ErrorCode::InvalidManifest, "empty group");
    for (std::size_t m = 0; m < out.groups[g].size(); ++m) {
      const auto c = out.groups[g][m];
      require(c < num_classes && out.class_to_group[c].first == SIZE_MAX, ErrorCode::InvalidManifest,
              "groups do not partition the class set");
      out.class_to_group[c] = {g, m};
      ++covered;
    }
  }
  require(covered == num_classes, ErrorCode::InvalidManifest, "groups do not cover every class");
  return out;
}

/// Connected components of the adjacency graph by depth-first search.
/// Groups come out ordered by their smallest member, members ascending.
template <typename Adjacency>
Grouping connected_groups_of(const Adjacency& adjacency) {
  const auto k = static_cast<std::size_t>(adjacency.rows());
  std::vector<bool> visited(k, false);
  std::vector<std::vector<std::size_t>> groups;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < k; ++start) {
    if (visited[start]) continue;
    std::vector<std::size_t> group;
    visited[start] = true;
    stack.push_back(start);
    while (!stack.empty()) {
      const auto n = stack.back();
      stack.pop_back();
      group.push_back(n);
      for (std::size_t m = 0; m < k; ++m) {
        const auto i = static_cast<Eigen::Index>(n);
        const auto j = static_cast<Eigen::Index>(m);
        if (!visited[m] && (adjacency(i, j) != 0 || adjacency(j, i) != 0)) {
          visited[m] = true;
          stack.push_back(m);
        }
      }
    }
    std::sort(group.begin(), group.end());
    groups.push_back(std::move(group));
  }
  return make_grouping(std::move(groups), k);
}

inline Grouping connected_groups(const SimilarityGraph& graph) { return connected_groups_of(graph.adjacency); }

/// Column k is the plain average of the guidance columns in group k.
inline Eigen::MatrixXd group_means(const GuidanceMatrix& guidance, const Grouping& grouping) {
  require(grouping.num_classes() == static_cast<std::size_t>(guidance.num_classes()), ErrorCode::ShapeMismatch,
          "grouping and guidance disagree on K");
  Eigen::MatrixXd means = Eigen::MatrixXd::Zero(guidance.dim(), static_cast<Eigen::Index>(grouping.num_groups()));
  for (std::size_t g = 0; g < grouping.num_groups(); ++g) {
    auto col = means.col(static_cast<Eigen::Index>(g));
    for (auto c : grouping.groups[g]) col += guidance.columns.col(static_cast<Eigen::Index>(c));
    col /= static_cast<double>(grouping.groups[g].size());
  }
  return means;
}

enum class BankMode { Dual, Vanilla };

struct DualPrototypeBank {
  BankMode mode = BankMode::Dual;
  double threshold = 0.85;
  Grouping grouping;
  Eigen::MatrixXd coarse;             // d x N_g
  std::vector<Eigen::MatrixXd> fine;  // d x |g_k| each
  std::optional<Eigen::MatrixXd> vanilla;  // d x K, present when K <= d

  Eigen::Index dim() const noexcept { return coarse.rows(); }
  std::size_t num_groups() const noexcept { return grouping.num_groups(); }
  std::size_t num_classes() const noexcept { return grouping.num_classes(); }

  Eigen::VectorXd coarse_target(std::size_t cls) const {
    return coarse.col(static_cast<Eigen::Index>(grouping.class_to_group[cls].first));
  }
  Eigen::VectorXd fine_target(std::size_t cls) const {
    const auto [g, m] = grouping.class_to_group[cls];
    return fine[g].col(static_cast<Eigen::Index>(m));
  }
};

namespace detail {

/// ETF over the QR basis of `columns`; one column degenerates to its direction.
inline Eigen::MatrixXd level_prototypes(const Eigen::MatrixXd& columns) {
  if (columns.cols() == 1) {
    const double norm = columns.norm();
    require(norm >= kRankTolerance, ErrorCode::RankDeficient, "single prototype column is zero");
    return columns / norm;
  }
  return etf_from_basis(qr_decompose(columns).q);
}

}  // namespace detail

inline DualPrototypeBank build_bank_from_grouping(const GuidanceMatrix& guidance, Grouping grouping, double p,
                                                  BankMode mode) {
  DualPrototypeBank bank;
  bank.mode = mode;
  bank.threshold = p;
  bank.coarse = detail::level_prototypes(group_means(guidance, grouping));
  bank.fine.reserve(grouping.num_groups());
  for (const auto& members : grouping.groups) {
    Eigen::MatrixXd cols(guidance.dim(), static_cast<Eigen::Index>(members.size()));
    for (std::size_t m = 0; m < members.size(); ++m)
      cols.col(static_cast<Eigen::Index>(m)) = guidance.columns.col(static_cast<Eigen::Index>(members[m]));
    bank.fine.push_back(detail::level_prototypes(cols));
  }
  if (guidance.num_classes() >= 2 && guidance.num_classes() <= guidance.dim())
    bank.vanilla = vanilla_prototypes(guidance);
  bank.grouping = std::move(grouping);
  return bank;
}

/// Groups similar classes at threshold p and builds coarse + fine ETFs.
inline DualPrototypeBank build_dual_bank(const GuidanceMatrix& guidance, double p) {
  return build_bank_from_grouping(guidance, connected_groups(similarity_graph(guidance, p)), p, BankMode::Dual);
}

/// Single-level bank: every class its own group, so the coarse level is the
/// K-way vanilla ETF and the fine level is trivial.
inline DualPrototypeBank build_vanilla_bank(const GuidanceMatrix& guidance) {
  const auto k = static_cast<std::size_t>(guidance.num_classes());
  std::vector<std::vector<std::size_t>> singletons(k);
  for (std::size_t c = 0; c < k; ++c) singletons[c] = {c};
  return build_bank_from_grouping(guidance, make_grouping(std::move(singletons), k), 1.0, BankMode::Vanilla);
}

/// Angle between unit vectors, stable near 0 and pi.
inline double unit_angle(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return 2.0 * std::atan2((a - b).norm(), (a + b).norm());
}

struct AngleBoundReport {
  std::size_t num_classes = 0;
  std::size_t num_groups = 0;
  double vanilla_angle = 0.0;
  std::optional<double> min_coarse_angle;          // absent when N_g == 1
  std::vector<std::optional<double>> min_fine_angles;  // absent for singleton groups
  bool holds = true;
};

/// Pairwise-angle check: every coarse and fine ETF separates its vertices at
/// least as widely as a K-way ETF would.
inline AngleBoundReport verify_angle_bound(const DualPrototypeBank& bank, double tolerance = 1e-9) {
  const auto k = bank.num_classes();
  require(k >= 2, ErrorCode::SingletonETF, "angle check needs K >= 2");
  AngleBoundReport report;
  report.num_classes = k;
  report.num_groups = bank.num_groups();
  report.vanilla_angle = std::acos(-1.0 / (static_cast<double>(k) - 1.0));

  auto min_angle = [](const Eigen::MatrixXd& e) -> std::optional<double> {
    if (e.cols() < 2) return std::nullopt;
    double best = std::numbers::pi;
    for (Eigen::Index i = 0; i < e.cols(); ++i)
      for (Eigen::Index j = i + 1; j < e.cols(); ++j) best = std::min(best, unit_angle(e.col(i), e.col(j)));
    return best;
  };

  report.min_coarse_angle = min_angle(bank.coarse);
  if (report.min_coarse_angle && *report.min_coarse_angle < report.vanilla_angle - tolerance) report.holds = false;
  for (const auto& e : bank.fine) {
    report.min_fine_angles.push_back(min_angle(e));
    const auto& a = report.min_fine_angles.back();
    if (a && *a < report.vanilla_angle - tolerance) report.holds = false;
  }
  return report;
}

/// Guidance from base-domain image features: normalized per-class mean of
/// the rows of domain `base_domain`.
inline GuidanceMatrix class_mean_guidance(const EmbeddingSet& set, std::uint32_t base_domain = 0) {
  const auto k = set.num_classes();
  Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(set.dim()), static_cast<Eigen::Index>(k));
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (set.domain_ids[i] != base_domain) continue;
    sums.col(set.labels[i]) += set.row(i);
    ++counts[set.labels[i]];
  }
  for (std::size_t c = 0; c < k; ++c) {
    require(counts[c] > 0, ErrorCode::MissingClass,
            "class '" + set.class_names[c] + "' has no samples in the base domain");
    sums.col(static_cast<Eigen::Index>(c)) /= static_cast<double>(counts[c]);
  }
  return make_guidance(std::move(sums), set.class_names);
}

// Bank file ("DCPB"): magic, u32 version, u64 JSON length, JSON manifest
// {mode, p, K, N_g, d, groups, class_names}, then f64 matrix blocks in order
// coarse, fine[0..N_g), and vanilla when the manifest says has_vanilla.

inline constexpr char kBankMagic[4] = {'D', 'C', 'P', 'B'};
inline constexpr std::uint32_t kBankVersion = 1;

inline std::string serialize_bank(const DualPrototypeBank& bank, const std::vector<std::string>& class_names) {
  nlohmann::json manifest = {
      {"mode", bank.mode == BankMode::Dual ? "dual" : "vanilla"},
      {"p", bank.threshold},
      {"K", bank.num_classes()},
      {"N_g", bank.num_groups()},
      {"d", bank.dim()},
      {"groups", bank.grouping.groups},
      {"class_names", class_names},
      {"has_vanilla", bank.vanilla.has_value()},
  };
  const std::string text = manifest.dump();
  std::ostringstream out;
  io::put_bytes(out, std::string_view(kBankMagic, 4));
  io::put_u32(out, kBankVersion);
  io::put_u64(out, text.size());
  io::put_bytes(out, text);
  io::put_matrix(out, bank.coarse);
  for (const auto& f : bank.fine) io::put_matrix(out, f);
  if (bank.vanilla) io::put_matrix(out, *bank.vanilla);
  return std::move(out).str();
}

struct LoadedBank {
  DualPrototypeBank bank;
  std::vector<std::string> class_names;
};

inline LoadedBank deserialize_bank(std::span<const unsigned char> bytes) {
  io::Reader in(bytes);
  require(in.string(4) == std::string_view(kBankMagic, 4), ErrorCode::BadMagic, "not a DCPB bank file");
  require(in.u32() == kBankVersion, ErrorCode::CorruptHeader, "unsupported bank version");
  const auto len = in.u64();
  require(len <= in.remaining(), ErrorCode::Truncated, "bank manifest truncated");
  LoadedBank out;
  auto& bank = out.bank;
  bool has_vanilla = false;
  std::size_t d = 0;
  try {
    const auto manifest = nlohmann::json::parse(in.string(static_cast<std::size_t>(len)));
    bank.mode = manifest.at("mode").get<std::string>() == "vanilla" ? BankMode::Vanilla : BankMode::Dual;
    bank.threshold = manifest.at("p").get<double>();
    d = manifest.at("d").get<std::size_t>();
    out.class_names = manifest.at("class_names").get<std::vector<std::string>>();
    bank.grouping = make_grouping(manifest.at("groups").get<std::vector<std::vector<std::size_t>>>(),
                                  manifest.at("K").get<std::size_t>());
    has_vanilla = manifest.at("has_vanilla").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidManifest, e.what());
  }
  bank.coarse = io::get_matrix(in);
  require(bank.coarse.rows() == static_cast<Eigen::Index>(d) &&
              bank.coarse.cols() == static_cast<Eigen::Index>(bank.num_groups()),
          ErrorCode::ShapeMismatch, "coarse prototype block has the wrong shape");
  for (const auto& members : bank.grouping.groups) {
    bank.fine.push_back(io::get_matrix(in));
    require(bank.fine.back().rows() == static_cast<Eigen::Index>(d) &&
                bank.fine.back().cols() == static_cast<Eigen::Index>(members.size()),
            ErrorCode::ShapeMismatch, "fine prototype block has the wrong shape");
  }
  if (has_vanilla) bank.vanilla = io::get_matrix(in);
  require(in.remaining() == 0, ErrorCode::ShapeMismatch, "trailing bytes in bank file");
  require(out.class_names.size() == bank.num_classes(), ErrorCode::ShapeMismatch, "class names differ from K");
  return out;
}

inline void save_bank(const DualPrototypeBank& bank, const std::vector<std::string>& class_names,
                      const std::string& path) {
  io::write_file(path, serialize_bank(bank, class_names));
}

inline LoadedBank load_bank(const std::string& path) { return deserialize_bank(io::read_file(path)); }

}  // namespace dualcp
