#pragma once

// On-disk embedding container ("DCP1") and the in-memory EmbeddingSet.
//
// Layout, all little-endian:
//   "DCP1"  u32 version=1  u32 N  u32 d  u32 K  u32 T  u8 normalized
//   N*d f32 features (row-major)
//   N u32 labels
//   N u32 domain ids
//   u64 manifest length, then UTF-8 JSON {"class_names": [...], "domain_names": [...]}
//
// Features are stored as f32 and kept as f32 in memory so that save/load is
// bit-exact; every computation widens to f64.

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "dualcp/binary_io.hpp"
#include "dualcp/error.hpp"

namespace dualcp {

using FeatureMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr char kContainerMagic[4] = {'D', 'C', 'P', '1'};
inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr double kNormalizedTolerance = 1e-5;

struct EmbeddingSet {
  FeatureMatrix features;  // N x d
  std::vector<std::uint32_t> labels;
  std::vector<std::uint32_t> domain_ids;
  std::vector<std::string> class_names;
  std::vector<std::string> domain_names;
  bool normalized = false;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const noexcept { return static_cast<std::size_t>(features.cols()); }
  std::size_t num_classes() const noexcept { return class_names.size(); }
  std::size_t num_domains() const noexcept { return domain_names.size(); }

  Eigen::VectorXd row(std::size_t i) const {
    return features.row(static_cast<Eigen::Index>(i)).cast<double>().transpose();
  }

  bool operator==(const EmbeddingSet&) const = default;
};

/// Throws on the first violated EmbeddingSet invariant.
inline void validate(const EmbeddingSet& set) {
  const auto n = static_cast<Eigen::Index>(set.labels.size());
  require(n >= 1, ErrorCode::Empty, "embedding set has no rows");
  require(set.features.rows() == n && set.domain_ids.size() == set.labels.size(),
          ErrorCode::ShapeMismatch, "features, labels and domain ids disagree on N");
  require(set.features.cols() >= 2, ErrorCode::ShapeMismatch, "feature dimension must be >= 2");
  require(!set.class_names.empty(), ErrorCode::InvalidManifest, "no class names");
  require(!set.domain_names.empty(), ErrorCode::InvalidManifest, "no domain names");

  std::unordered_set<std::string> seen;
  for (const auto& name : set.class_names) {
    require(!name.empty(), ErrorCode::InvalidManifest, "empty class name");
    require(seen.insert(name).second, ErrorCode::InvalidManifest, "duplicate class name '" + name + "'");
  }

  const auto k = set.class_names.size();
  const auto t = set.domain_names.size();
  for (std::size_t i = 0; i < set.labels.size(); ++i) {
    require(set.labels[i] < k, ErrorCode::LabelOutOfRange,
            "row " + std::to_string(i) + " has label " + std::to_string(set.labels[i]) + " >= K=" +
                std::to_string(k));
    require(set.domain_ids[i] < t, ErrorCode::DomainOutOfRange,
            "row " + std::to_string(i) + " has domain " + std::to_string(set.domain_ids[i]) +
                " >= T=" + std::to_string(t));
  }
  require(set.features.allFinite(), ErrorCode::NonFinite, "features contain NaN or Inf");

  if (set.normalized) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double norm = set.features.row(i).cast<double>().norm();
      require(std::abs(norm - 1.0) <= kNormalizedTolerance, ErrorCode::NotNormalized,
              "row " + std::to_string(i) + " has norm " + std::to_string(norm) +
                  " but the set is flagged normalized");
    }
  }
}

inline std::string serialize(const EmbeddingSet& set) {
  validate(set);
  std::ostringstream out;
  io::put_bytes(out, std::string_view(kContainerMagic, 4));
  io::put_u32(out, kContainerVersion);
  io::put_u32(out, static_cast<std::uint32_t>(set.size()));
  io::put_u32(out, static_cast<std::uint32_t>(set.dim()));
  io::put_u32(out, static_cast<std::uint32_t>(set.num_classes()));
  io::put_u32(out, static_cast<std::uint32_t>(set.num_domains()));
  io::put_u8(out, set.normalized ? 1 : 0);
  for (Eigen::Index r = 0; r < set.features.rows(); ++r)
    for (Eigen::Index c = 0; c < set.features.cols(); ++c) io::put_f32(out, set.features(r, c));
  for (auto y : set.labels) io::put_u32(out, y);
  for (auto t : set.domain_ids) io::put_u32(out, t);
  const nlohmann::json manifest = {{"class_names", set.class_names}, {"domain_names", set.domain_names}};
  const std::string text = manifest.dump();
  io::put_u64(out, text.size());
  io::put_bytes(out, text);
  return std::move(out).str();
}

inline EmbeddingSet deserialize(std::span<const unsigned char> bytes) {
  io::Reader in(bytes);
  const std::string magic = in.string(4);
  require(magic == std::string_view(kContainerMagic, 4), ErrorCode::BadMagic, "not a DCP1 container");
  const auto version = in.u32();
  require(version == kContainerVersion, ErrorCode::CorruptHeader,
          "unsupported container version " + std::to_string(version));
  const std::uint64_t n = in.u32();
  const std::uint64_t d = in.u32();
  const std::uint64_t k = in.u32();
  const std::uint64_t t = in.u32();
  const auto flag = in.u8();
  require(n >= 1, ErrorCode::Empty, "container declares N=0");
  require(d >= 2 && k >= 1 && t >= 1, ErrorCode::CorruptHeader, "container declares d<2, K=0 or T=0");
  require(flag <= 1, ErrorCode::CorruptHeader, "normalized flag must be 0 or 1");
  require(in.remaining() >= n * d * 4 + n * 8 + 8, ErrorCode::Truncated,
          "payload shorter than the declared N*d features and labels");

  EmbeddingSet set;
  set.normalized = flag == 1;
  set.features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index r = 0; r < set.features.rows(); ++r)
    for (Eigen::Index c = 0; c < set.features.cols(); ++c) set.features(r, c) = in.f32();
  set.labels.resize(n);
  for (auto& y : set.labels) y = in.u32();
  set.domain_ids.resize(n);
  for (auto& id : set.domain_ids) id = in.u32();

  const auto len = in.u64();
  require(len <= in.remaining(), ErrorCode::Truncated, "manifest shorter than its declared length");
  const std::string text = in.string(static_cast<std::size_t>(len));
  require(in.remaining() == 0, ErrorCode::ShapeMismatch, "trailing bytes after manifest");
  try {
    const auto manifest = nlohmann::json::parse(text);
    set.class_names = manifest.at("class_names").get<std::vector<std::string>>();
    set.domain_names = manifest.at("domain_names").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidManifest, e.what());
  }
  require(set.class_names.size() == k, ErrorCode::ShapeMismatch, "manifest class count differs from header K");
  require(set.domain_names.size() == t, ErrorCode::ShapeMismatch, "manifest domain count differs from header T");

  validate(set);
  return set;
}

inline EmbeddingSet load(const std::string& path) { return deserialize(io::read_file(path)); }

inline void save(const EmbeddingSet& set, const std::string& path) { io::write_file(path, serialize(set)); }

/// Rows rescaled to unit L2 norm (computed in f64); sets the normalized flag.
inline EmbeddingSet normalize_rows(const EmbeddingSet& set) {
  EmbeddingSet out = set;
  for (Eigen::Index i = 0; i < set.features.rows(); ++i) {
    const Eigen::RowVectorXd row = set.features.row(i).cast<double>();
    const double norm = row.norm();
    require(norm > 0.0, ErrorCode::ZeroVector, "row " + std::to_string(i) + " has zero norm");
    out.features.row(i) = (row / norm).cast<float>();
  }
  out.normalized = true;
  return out;
}

/// Semantic guidance: one unit column per class, in manifest class order.
struct GuidanceMatrix {
  Eigen::MatrixXd columns;  // d x K
  std::vector<std::string> class_names;

  Eigen::Index dim() const noexcept { return columns.rows(); }
  Eigen::Index num_classes() const noexcept { return columns.cols(); }
};

/// Normalizes each column of `y`; a zero column is a hard error.
inline GuidanceMatrix make_guidance(Eigen::MatrixXd y, std::vector<std::string> class_names) {
  require(y.cols() >= 1 && y.rows() >= 2, ErrorCode::ShapeMismatch, "guidance must be d x K with d >= 2");
  require(class_names.size() == static_cast<std::size_t>(y.cols()), ErrorCode::ShapeMismatch,
          "class name count differs from guidance column count");
  require(y.allFinite(), ErrorCode::NonFinite, "guidance contains NaN or Inf");
  for (Eigen::Index j = 0; j < y.cols(); ++j) {
    const double norm = y.col(j).norm();
    require(norm > 0.0, ErrorCode::ZeroVector, "guidance column " + std::to_string(j) + " is zero");
    y.col(j) /= norm;
  }
  return GuidanceMatrix{std::move(y), std::move(class_names)};
}

/// Guidance is persisted as a DCP1 container with one row per class
/// (label = class index, single domain "guidance").
inline GuidanceMatrix guidance_from_set(const EmbeddingSet& set) {
  validate(set);
  const auto k = set.num_classes();
  require(set.size() == k, ErrorCode::ShapeMismatch, "guidance container must hold exactly one row per class");
  Eigen::MatrixXd y(static_cast<Eigen::Index>(set.dim()), static_cast<Eigen::Index>(k));
  std::vector<bool> seen(k, false);
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto c = set.labels[i];
    require(!seen[c], ErrorCode::ShapeMismatch, "guidance container repeats class " + set.class_names[c]);
    seen[c] = true;
    y.col(c) = set.row(i);
  }
  return make_guidance(std::move(y), set.class_names);
}

inline EmbeddingSet guidance_to_set(const GuidanceMatrix& g) {
  EmbeddingSet set;
  const auto k = g.num_classes();
  set.features = g.columns.transpose().cast<float>();
  set.labels.resize(static_cast<std::size_t>(k));
  for (Eigen::Index i = 0; i < k; ++i) set.labels[static_cast<std::size_t>(i)] = static_cast<std::uint32_t>(i);
  set.domain_ids.assign(static_cast<std::size_t>(k), 0);
  set.class_names = g.class_names;
  set.domain_names = {"guidance"};
  set.normalized = true;
  return set;
}

inline GuidanceMatrix load_guidance(const std::string& path) { return guidance_from_set(load(path)); }

inline void save_guidance(const GuidanceMatrix& g, const std::string& path) { save(guidance_to_set(g), path); }

}  // namespace dualcp
