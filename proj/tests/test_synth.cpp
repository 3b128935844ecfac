#include <cmath>

#include <gtest/gtest.h>

#include "dualcp/dil_harness.hpp"
#include "dualcp/synth.hpp"

using namespace dualcp;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorCode::Io;
}

}  // namespace

TEST(Synth, DefaultShapes) {
  const SynthSpec spec;
  const auto data = generate(spec);
  EXPECT_EQ(data.train.size(), 40u * 20u * 3u);
  EXPECT_EQ(data.test.size(), 10u * 20u * 3u);
  EXPECT_EQ(data.train.dim(), 64u);
  EXPECT_EQ(data.guidance.columns.cols(), 20);
  EXPECT_EQ(data.planned.num_groups(), 10u);
}

TEST(Synth, SameSeedSameBytes) {
  SynthSpec spec;
  spec.seed = 3;
  const auto a = generate(spec), b = generate(spec);
  EXPECT_EQ(serialize(a.train), serialize(b.train));
  EXPECT_EQ(serialize(a.test), serialize(b.test));
  EXPECT_EQ(a.guidance.columns, b.guidance.columns);
  spec.seed = 4;
  EXPECT_NE(serialize(generate(spec).train), serialize(a.train));
}

TEST(Synth, GroupingIsRecoveredAtDefaultThreshold) {
  for (std::uint64_t seed : {0u, 1u, 2u, 3u}) {
    SynthSpec spec;
    spec.seed = seed;
    const auto data = generate(spec);
    const auto grouping = connected_groups(similarity_graph(data.guidance, 0.85));
    EXPECT_EQ(grouping, data.planned) << "seed " << seed;
  }
}

TEST(Synth, GuidanceCosinesAreAsPlanned) {
  const auto data = generate(SynthSpec{});
  const Eigen::MatrixXd s = data.guidance.columns.transpose() * data.guidance.columns;
  for (std::size_t a = 0; a < 20; ++a)
    for (std::size_t b = a + 1; b < 20; ++b) {
      const bool same = data.planned.class_to_group[a].first == data.planned.class_to_group[b].first;
      EXPECT_NEAR(s(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)), same ? 0.925 : 0.0, 1e-6);
    }
}

TEST(Synth, InfeasibleAndBadSpecs) {
  SynthSpec spec;
  spec.dim = 16;  // 10 group directions + 10 extra member directions do not fit
  EXPECT_EQ(code_of([&] { generate(spec); }), ErrorCode::Infeasible);
  spec = {};
  spec.group_plan = {4, 4};
  EXPECT_EQ(code_of([&] { generate(spec); }), ErrorCode::BadConfig);
  spec = {};
  spec.test_fraction = 1.0;
  EXPECT_EQ(code_of([&] { generate(spec); }), ErrorCode::BadConfig);
}

TEST(Synth, NoiselessSamplesRepeatTheirClassCenter) {
  SynthSpec spec;
  spec.sigma_cls = 0.0;
  spec.per_class_domain = 5;
  const auto data = generate(spec);
  for (std::size_t i = 0; i < data.train.size(); ++i)
    for (std::size_t j = i + 1; j < data.train.size(); ++j)
      if (data.train.labels[i] == data.train.labels[j] && data.train.domain_ids[i] == data.train.domain_ids[j])
        EXPECT_EQ(data.train.features.row(static_cast<Eigen::Index>(i)),
                  data.train.features.row(static_cast<Eigen::Index>(j)));
}

TEST(Synth, NoiselessDataIsFullySolved) {
  SynthSpec spec;
  spec.sigma_cls = 0.0;
  const auto data = generate(spec);
  const auto bank = build_dual_bank(data.guidance, 0.85);
  const auto run = run_protocol(data.train, data.test, bank, TrainConfig{});
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(run.evaluation.accuracy.at(i, 2), 1.0);
  for (double a : run.evaluation.domain_id_accuracy) EXPECT_EQ(a, 1.0);
}

TEST(Synth, DomainCentroidsAreSeparated) {
  // Each centroid sits near M * mean(y) + r_t; the domain offsets dominate.
  const auto data = generate(SynthSpec{});
  std::vector<Eigen::VectorXd> c;
  for (std::uint32_t t = 0; t < 3; ++t) c.push_back(domain_centroid(slice_domain(data.train, t)));
  for (std::size_t a = 0; a < 3; ++a) {
    for (std::size_t b = 0; b < 3; ++b) {
      const double cos_ab = c[a].dot(c[b]) / (c[a].norm() * c[b].norm());
      if (a == b) EXPECT_NEAR(cos_ab, 1.0, 1e-12);
      else EXPECT_LT(cos_ab, 0.95);
    }
  }
}
