#pragma once

// Synthetic multi-domain benchmark with a known class grouping.
//
// Guidance: each planned group k gets a direction u_k; a member c of a group
// with two or more classes is cos(theta) u_k + sin(theta) w_c, where all u and
// w vectors are mutually orthonormal. Members of one group then have cosine
// cos^2(theta) = intra_cosine, and classes of different groups have cosine 0,
// so any threshold between 0 and intra_cosine recovers the plan exactly.
//
// Features: x = M y_c + sigma_dom * r_t + sigma_cls * noise, with M a fixed
// random orthogonal map and r_t a random unit direction per domain.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dualcp/cpg.hpp"
#include "dualcp/embedding_store.hpp"
#include "dualcp/error.hpp"
#include "dualcp/rng.hpp"

namespace dualcp {

struct SynthSpec {
  std::size_t num_classes = 20;
  std::size_t num_domains = 3;
  std::size_t dim = 64;
  std::size_t per_class_domain = 50;
  std::vector<std::size_t> group_plan = {4, 3, 3, 2, 2, 2, 1, 1, 1, 1};
  double sigma_dom = 1.5;
  double sigma_cls = 0.08;
  double test_fraction = 0.2;
  /// Pairwise cosine inside a planned group; must exceed the grouping threshold.
  double intra_cosine = 0.925;
  std::uint64_t seed = 0;
};

struct SynthData {
  EmbeddingSet train;
  EmbeddingSet test;
  GuidanceMatrix guidance;
  Grouping planned;
};

inline std::size_t synth_basis_size(const SynthSpec& spec) {
  std::size_t needed = spec.group_plan.size();
  for (auto g : spec.group_plan)
    if (g >= 2) needed += g;
  return needed;
}

inline void validate(const SynthSpec& spec) {
  require(spec.num_classes >= 2 && spec.num_domains >= 1, ErrorCode::BadConfig, "need K >= 2 and T >= 1");
  require(std::accumulate(spec.group_plan.begin(), spec.group_plan.end(), std::size_t{0}) == spec.num_classes,
          ErrorCode::BadConfig, "group plan must sum to K");
  for (auto g : spec.group_plan) require(g >= 1, ErrorCode::BadConfig, "group plan entries must be >= 1");
  require(spec.sigma_dom >= 0.0 && spec.sigma_cls >= 0.0, ErrorCode::BadConfig, "noise scales must be >= 0");
  require(spec.test_fraction > 0.0 && spec.test_fraction < 1.0, ErrorCode::BadConfig, "test fraction must lie in (0, 1)");
  require(spec.intra_cosine > 0.0 && spec.intra_cosine < 1.0, ErrorCode::BadConfig, "intra cosine must lie in (0, 1)");
  require(spec.dim >= spec.num_classes, ErrorCode::Infeasible, "need d >= K");
  require(synth_basis_size(spec) <= spec.dim, ErrorCode::Infeasible,
          "group plan needs " + std::to_string(synth_basis_size(spec)) + " orthogonal directions, d = " +
              std::to_string(spec.dim));
}

inline std::size_t synth_test_count(const SynthSpec& spec) {
  const auto n = spec.per_class_domain;
  const auto t = static_cast<std::size_t>(std::lround(spec.test_fraction * static_cast<double>(n)));
  return std::clamp<std::size_t>(t, 1, n - 1);
}

inline Eigen::MatrixXd random_orthonormal(Eigen::Index d, Eigen::Index k, Rng& rng) {
  Eigen::MatrixXd g(d, k);
  for (Eigen::Index c = 0; c < k; ++c)
    for (Eigen::Index r = 0; r < d; ++r) g(r, c) = rng.normal();
  return qr_decompose(g).q;
}

inline SynthData generate(const SynthSpec& spec) {
  validate(spec);
  require(spec.per_class_domain >= 2, ErrorCode::BadConfig, "need at least two samples per class and domain");
  Rng rng(spec.seed);
  const auto d = static_cast<Eigen::Index>(spec.dim);
  const auto k = spec.num_classes;

  // Random class-to-group assignment so groups are not contiguous index ranges.
  std::vector<std::size_t> perm(k);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  rng.shuffle(perm);

  const Eigen::MatrixXd basis = random_orthonormal(d, static_cast<Eigen::Index>(synth_basis_size(spec)), rng);
  const double cos_t = std::sqrt(spec.intra_cosine);
  const double sin_t = std::sqrt(1.0 - spec.intra_cosine);
  Eigen::MatrixXd y(d, static_cast<Eigen::Index>(k));
  std::vector<std::vector<std::size_t>> groups;
  Eigen::Index next_w = static_cast<Eigen::Index>(spec.group_plan.size());
  std::size_t next_class = 0;
  for (std::size_t g = 0; g < spec.group_plan.size(); ++g) {
    std::vector<std::size_t> members;
    for (std::size_t m = 0; m < spec.group_plan[g]; ++m) {
      const auto c = perm[next_class++];
      members.push_back(c);
      const auto col = static_cast<Eigen::Index>(c);
      if (spec.group_plan[g] == 1) {
        y.col(col) = basis.col(static_cast<Eigen::Index>(g));
      } else {
        y.col(col) = cos_t * basis.col(static_cast<Eigen::Index>(g)) + sin_t * basis.col(next_w++);
      }
    }
    std::sort(members.begin(), members.end());
    groups.push_back(std::move(members));
  }
  std::sort(groups.begin(), groups.end(), [](const auto& a, const auto& b) { return a.front() < b.front(); });

  SynthData out;
  out.planned = make_grouping(std::move(groups), k);

  std::vector<std::string> class_names(k), domain_names(spec.num_domains);
  for (std::size_t c = 0; c < k; ++c) class_names[c] = "class_" + std::string(c < 10 ? "0" : "") + std::to_string(c);
  for (std::size_t t = 0; t < spec.num_domains; ++t) domain_names[t] = "domain_" + std::to_string(t);

  // Round-trip guidance through f32 so in-memory and on-disk guidance agree bit for bit.
  out.guidance = make_guidance(y.cast<float>().cast<double>(), class_names);

  const Eigen::MatrixXd map = random_orthonormal(d, d, rng);
  std::vector<Eigen::VectorXd> offsets;
  for (std::size_t t = 0; t < spec.num_domains; ++t) {
    Eigen::VectorXd r(d);
    for (Eigen::Index i = 0; i < d; ++i) r(i) = rng.normal();
    offsets.push_back(spec.sigma_dom * r.normalized());
  }

  const auto n = spec.per_class_domain;
  const auto n_test = synth_test_count(spec);
  const auto n_train = n - n_test;
  auto make_set = [&](std::size_t rows) {
    EmbeddingSet s;
    s.features.resize(static_cast<Eigen::Index>(rows), d);
    s.labels.reserve(rows);
    s.domain_ids.reserve(rows);
    s.class_names = class_names;
    s.domain_names = domain_names;
    return s;
  };
  out.train = make_set(n_train * k * spec.num_domains);
  out.test = make_set(n_test * k * spec.num_domains);

  Eigen::Index train_row = 0, test_row = 0;
  for (std::size_t t = 0; t < spec.num_domains; ++t) {
    for (std::size_t c = 0; c < k; ++c) {
      const Eigen::VectorXd center = map * out.guidance.columns.col(static_cast<Eigen::Index>(c)) + offsets[t];
      for (std::size_t s = 0; s < n; ++s) {
        Eigen::VectorXd x = center;
        for (Eigen::Index i = 0; i < d; ++i) x(i) += spec.sigma_cls * rng.normal();
        auto& set = s < n_train ? out.train : out.test;
        auto& row = s < n_train ? train_row : test_row;
        set.features.row(row++) = x.cast<float>().transpose();
        set.labels.push_back(static_cast<std::uint32_t>(c));
        set.domain_ids.push_back(static_cast<std::uint32_t>(t));
      }
    }
  }
  validate(out.train);
  validate(out.test);
  return out;
}

}  // namespace dualcp
