#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>
#include <string>

#include <gtest/gtest.h>

#include "dualcp/embedding_store.hpp"
#include "dualcp/rng.hpp"

using namespace dualcp;

namespace {

EmbeddingSet small_set(std::uint64_t seed, std::size_t n = 6, Eigen::Index d = 4) {
  Rng rng(seed);
  EmbeddingSet s;
  s.features.resize(static_cast<Eigen::Index>(n), d);
  for (Eigen::Index i = 0; i < s.features.size(); ++i) s.features.data()[i] = static_cast<float>(rng.normal());
  for (std::size_t i = 0; i < n; ++i) {
    s.labels.push_back(static_cast<std::uint32_t>(i % 3));
    s.domain_ids.push_back(static_cast<std::uint32_t>(i % 2));
  }
  s.class_names = {"cat", "dog", "flower"};
  s.domain_names = {"photo", "sketch"};
  return s;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("dualcp_store_" + name);
}

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

TEST(EmbeddingStore, RoundTripPreservesShapesAndBits) {
  const auto set = small_set(1);
  const auto path = temp_path("roundtrip.dcp").string();
  save(set, path);
  const auto back = load(path);
  EXPECT_EQ(back.size(), 6u);
  EXPECT_EQ(back.dim(), 4u);
  EXPECT_EQ(back.num_classes(), 3u);
  EXPECT_EQ(back.num_domains(), 2u);
  EXPECT_TRUE(back == set);
  EXPECT_EQ(serialize(back), serialize(set));
}

TEST(EmbeddingStore, RoundTripIsIdentityForRandomSets) {
  Rng rng(7);
  for (int trial = 0; trial < 25; ++trial) {
    const auto n = 1 + rng.below(40);
    const auto d = static_cast<Eigen::Index>(2 + rng.below(20));
    auto set = small_set(rng.next_u64(), n, d);
    if (trial % 2 == 0) set = normalize_rows(set);
    const auto bytes = serialize(set);
    EXPECT_TRUE(deserialize(std::span(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size())) == set);
  }
}

TEST(EmbeddingStore, HeaderLayoutIsLittleEndian) {
  const auto bytes = serialize(small_set(2));
  ASSERT_GE(bytes.size(), 25u);
  EXPECT_EQ(bytes.substr(0, 4), "DCP1");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1);  // version
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 6);  // N
  EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 4); // d
  EXPECT_EQ(static_cast<unsigned char>(bytes[16]), 3); // K
  EXPECT_EQ(static_cast<unsigned char>(bytes[20]), 2); // T
  EXPECT_EQ(static_cast<unsigned char>(bytes[24]), 0); // normalized flag
  EXPECT_EQ(bytes.size(), 25u + 6 * 4 * 4 + 6 * 4 * 2 + 8 + std::string(R"({"class_names":["cat","dog","flower"],"domain_names":["photo","sketch"]})").size());
}

TEST(EmbeddingStore, LabelEqualToKIsRejected) {
  auto bytes = serialize(small_set(3));
  // First label sits right after the 25-byte header and N*d floats.
  bytes[25 + 6 * 4 * 4] = 3;
  const auto span = std::span(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size());
  EXPECT_EQ(code_of([&] { deserialize(span); }), ErrorCode::LabelOutOfRange);
}

TEST(EmbeddingStore, TruncatedFeatureBlockIsRejected) {
  const auto bytes = serialize(small_set(4));
  const auto cut = bytes.substr(0, 25 + 10);
  const auto span = std::span(reinterpret_cast<const unsigned char*>(cut.data()), cut.size());
  EXPECT_EQ(code_of([&] { deserialize(span); }), ErrorCode::Truncated);
}

TEST(EmbeddingStore, TruncatedManifestIsRejected) {
  const auto bytes = serialize(small_set(4));
  const auto cut = bytes.substr(0, bytes.size() - 5);
  const auto span = std::span(reinterpret_cast<const unsigned char*>(cut.data()), cut.size());
  EXPECT_EQ(code_of([&] { deserialize(span); }), ErrorCode::Truncated);
}

TEST(EmbeddingStore, CorruptHeadersAreDistinguished) {
  auto bytes = serialize(small_set(5));
  auto check = [](std::string b) {
    return code_of([&] { deserialize(std::span(reinterpret_cast<const unsigned char*>(b.data()), b.size())); });
  };
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_EQ(check(bad_magic), ErrorCode::BadMagic);
  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_EQ(check(bad_version), ErrorCode::CorruptHeader);
  auto bad_flag = bytes;
  bad_flag[24] = 7;
  EXPECT_EQ(check(bad_flag), ErrorCode::CorruptHeader);
  auto zero_n = bytes;
  zero_n[8] = 0;
  EXPECT_EQ(check(zero_n), ErrorCode::Empty);
  EXPECT_EQ(check(bytes + "x"), ErrorCode::ShapeMismatch);
  EXPECT_EQ(check(bytes.substr(0, 2)), ErrorCode::Truncated);
}

TEST(EmbeddingStore, NonFiniteFeaturesAreRejected) {
  auto set = small_set(6);
  set.features(2, 1) = std::numeric_limits<float>::quiet_NaN();
  EXPECT_EQ(code_of([&] { save(set, temp_path("nan.dcp").string()); }), ErrorCode::NonFinite);
  // The loader checks the same invariant on bytes written by someone else.
  auto good = serialize(small_set(6));
  const float inf = std::numeric_limits<float>::infinity();
  std::memcpy(good.data() + 25, &inf, 4);
  EXPECT_EQ(code_of([&] { deserialize(std::span(reinterpret_cast<const unsigned char*>(good.data()), good.size())); }),
            ErrorCode::NonFinite);
}

TEST(EmbeddingStore, EmptySetIsRejected) {
  EmbeddingSet set;
  set.features.resize(0, 4);
  set.class_names = {"a"};
  set.domain_names = {"d"};
  EXPECT_EQ(code_of([&] { save(set, temp_path("empty.dcp").string()); }), ErrorCode::Empty);
}

TEST(EmbeddingStore, ManifestInvariants) {
  auto dup = small_set(8);
  dup.class_names = {"cat", "cat", "dog"};
  EXPECT_EQ(code_of([&] { validate(dup); }), ErrorCode::InvalidManifest);
  auto blank = small_set(8);
  blank.class_names[1] = "";
  EXPECT_EQ(code_of([&] { validate(blank); }), ErrorCode::InvalidManifest);
  auto dom = small_set(8);
  dom.domain_ids[0] = 2;
  EXPECT_EQ(code_of([&] { validate(dom); }), ErrorCode::DomainOutOfRange);
  auto flagged = small_set(8);
  flagged.normalized = true;
  EXPECT_EQ(code_of([&] { validate(flagged); }), ErrorCode::NotNormalized);
}

TEST(EmbeddingStore, UnwritablePathIsAnIoError) {
  EXPECT_EQ(code_of([&] { save(small_set(9), "/nonexistent-dir/x/y.dcp"); }), ErrorCode::Io);
  EXPECT_EQ(code_of([&] { load("/nonexistent-dir/x/y.dcp"); }), ErrorCode::Io);
}

TEST(NormalizeRows, ThreeFourFive) {
  EmbeddingSet set;
  set.features.resize(1, 2);
  set.features << 3.0f, 4.0f;
  set.labels = {0};
  set.domain_ids = {0};
  set.class_names = {"a"};
  set.domain_names = {"d"};
  const auto out = normalize_rows(set);
  EXPECT_TRUE(out.normalized);
  EXPECT_FLOAT_EQ(out.features(0, 0), 0.6f);
  EXPECT_FLOAT_EQ(out.features(0, 1), 0.8f);
}

TEST(NormalizeRows, IsIdempotent) {
  const auto once = normalize_rows(small_set(10, 30, 16));
  const auto twice = normalize_rows(once);
  for (Eigen::Index i = 0; i < once.features.rows(); ++i) {
    EXPECT_NEAR(once.features.row(i).cast<double>().norm(), 1.0, 1e-6);
    for (Eigen::Index j = 0; j < once.features.cols(); ++j)
      EXPECT_NEAR(once.features(i, j), twice.features(i, j), 1e-7);
  }
}

TEST(NormalizeRows, ZeroRowIsAnError) {
  auto set = small_set(11);
  set.features.row(3).setZero();
  EXPECT_EQ(code_of([&] { normalize_rows(set); }), ErrorCode::ZeroVector);
}

TEST(Guidance, ContainerRoundTripGivesUnitColumns) {
  Rng rng(12);
  Eigen::MatrixXd y(5, 3);
  for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = rng.normal();
  const auto g = make_guidance(y, {"a", "b", "c"});
  const auto path = temp_path("guidance.dcp").string();
  save_guidance(g, path);
  const auto back = load_guidance(path);
  ASSERT_EQ(back.num_classes(), 3);
  for (Eigen::Index c = 0; c < 3; ++c) {
    EXPECT_NEAR(back.columns.col(c).norm(), 1.0, 1e-12);
    EXPECT_NEAR((back.columns.col(c) - g.columns.col(c)).norm(), 0.0, 1e-6);
  }
  EXPECT_EQ(back.class_names, g.class_names);
}

TEST(Guidance, ZeroColumnIsAHardError) {
  Eigen::MatrixXd y = Eigen::MatrixXd::Identity(3, 3);
  y.col(1).setZero();
  EXPECT_EQ(code_of([&] { make_guidance(y, {"a", "b", "c"}); }), ErrorCode::ZeroVector);
}
