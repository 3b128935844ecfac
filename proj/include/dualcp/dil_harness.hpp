#pragma once

// Rehearsal-free domain-incremental protocol. Domains arrive in order; each
// gets its own calibrator trained only on its own rows, plus a centroid of its
// raw training features. At test time a sample is routed to the domain whose
// centroid has the highest cosine similarity, then classified coarse-to-fine
// with that domain's calibrator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "dualcp/binary_io.hpp"
#include "dualcp/calibrator.hpp"
#include "dualcp/cpg.hpp"
#include "dualcp/embedding_store.hpp"
#include "dualcp/error.hpp"

namespace dualcp {

/// Counts training rows read per domain; lets tests prove that stage t
/// touched nothing but domain t.
struct AccessLog {
  std::vector<std::vector<std::size_t>> rows_read;  // [stage][domain]

  void begin_stage(std::size_t num_domains) { rows_read.emplace_back(num_domains, 0); }
};

inline DomainSlice slice_domain(const EmbeddingSet& set, std::uint32_t domain, AccessLog* log = nullptr) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < set.size(); ++i)
    if (set.domain_ids[i] == domain) rows.push_back(i);
  DomainSlice slice;
  slice.domain = domain;
  slice.features.resize(static_cast<Eigen::Index>(set.dim()), static_cast<Eigen::Index>(rows.size()));
  slice.labels.reserve(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    slice.features.col(static_cast<Eigen::Index>(k)) = set.row(rows[k]);
    slice.labels.push_back(set.labels[rows[k]]);
    if (log && !log->rows_read.empty()) ++log->rows_read.back()[set.domain_ids[rows[k]]];
  }
  return slice;
}

inline Eigen::VectorXd domain_centroid(const DomainSlice& slice, bool normalize_first = false) {
  require(slice.size() >= 1, ErrorCode::Empty, "centroid of an empty domain");
  if (!normalize_first) return slice.features.rowwise().mean();
  return normalize_columns(slice.features).rowwise().mean();
}

struct DomainMemory {
  std::vector<std::string> domain_names;
  std::vector<Eigen::VectorXd> centroids;
  std::vector<CalibratorParams> params;
  std::vector<TrainConfig> configs;
  std::vector<double> final_losses;

  std::size_t size() const noexcept { return centroids.size(); }
};

/// argmax_t cos(z, centroid_t) over the first `upto` domains; ties go to the lower index.
inline std::size_t identify_domain(const Eigen::VectorXd& z, const DomainMemory& memory,
                                   std::size_t upto = std::numeric_limits<std::size_t>::max()) {
  upto = std::min(upto, memory.size());
  require(upto >= 1, ErrorCode::Empty, "domain memory is empty");
  const double zn = z.norm();
  require(zn > 0.0, ErrorCode::ZeroVector, "cannot identify the domain of a zero feature");
  std::size_t best = 0;
  double best_cos = -std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < upto; ++t) {
    const double cn = memory.centroids[t].norm();
    const double c = cn > 0.0 ? z.dot(memory.centroids[t]) / (zn * cn) : -std::numeric_limits<double>::infinity();
    if (c > best_cos) {
      best_cos = c;
      best = t;
    }
  }
  return best;
}

/// argmax_i cos(v, prototypes.col(i)); lowest index wins ties.
inline std::size_t nearest_prototype(const Eigen::VectorXd& v, const Eigen::MatrixXd& prototypes) {
  const Eigen::VectorXd scores = (prototypes.transpose() * v).cwiseQuotient(prototypes.colwise().norm().transpose());
  std::size_t best = 0;
  for (Eigen::Index i = 1; i < scores.size(); ++i)
    if (scores(i) > scores(static_cast<Eigen::Index>(best))) best = static_cast<std::size_t>(i);
  return best;
}

struct Prediction {
  std::size_t cls = 0;
  std::size_t domain = 0;
  std::size_t group = 0;
};

/// Two-stage prediction for a batch of columns using the first `upto` domains.
inline std::vector<Prediction> predict_batch(const Eigen::MatrixXd& z, const DomainMemory& memory,
                                             const DualPrototypeBank& bank,
                                             std::size_t upto = std::numeric_limits<std::size_t>::max()) {
  const auto n = static_cast<std::size_t>(z.cols());
  std::vector<Prediction> out(n);
  std::vector<std::vector<Eigen::Index>> by_domain(std::min(upto, memory.size()));
  for (std::size_t j = 0; j < n; ++j) {
    out[j].domain = identify_domain(z.col(static_cast<Eigen::Index>(j)), memory, upto);
    by_domain[out[j].domain].push_back(static_cast<Eigen::Index>(j));
  }
  for (std::size_t t = 0; t < by_domain.size(); ++t) {
    const auto& idx = by_domain[t];
    if (idx.empty()) continue;
    const auto& params = memory.params[t];
    const Eigen::MatrixXd zt = z(Eigen::all, idx);
    const Eigen::MatrixXd zc = coarse_features(params, zt);
    std::vector<std::vector<Eigen::Index>> by_group(bank.num_groups());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto g = nearest_prototype(zc.col(static_cast<Eigen::Index>(k)), bank.coarse);
      out[static_cast<std::size_t>(idx[k])].group = g;
      by_group[g].push_back(static_cast<Eigen::Index>(k));
    }
    for (std::size_t g = 0; g < by_group.size(); ++g) {
      const auto& members = bank.grouping.groups[g];
      for (auto k : by_group[g]) {
        auto& pred = out[static_cast<std::size_t>(idx[static_cast<std::size_t>(k)])];
        pred.cls = members.front();
      }
      if (members.size() == 1 || by_group[g].empty()) continue;
      const Eigen::MatrixXd zf = fine_features(params, zt(Eigen::all, by_group[g]), zc(Eigen::all, by_group[g]), g);
      for (std::size_t m = 0; m < by_group[g].size(); ++m) {
        const auto f = nearest_prototype(zf.col(static_cast<Eigen::Index>(m)), bank.fine[g]);
        out[static_cast<std::size_t>(idx[static_cast<std::size_t>(by_group[g][m])])].cls = members[f];
      }
    }
  }
  return out;
}

inline Prediction predict(const Eigen::VectorXd& z, const DomainMemory& memory, const DualPrototypeBank& bank,
                          std::size_t upto = std::numeric_limits<std::size_t>::max()) {
  return predict_batch(z, memory, bank, upto).front();
}

/// Single-stage nearest-prototype prediction against the K-way vanilla ETF,
/// using the identified domain's coarse calibrator. Batched like predict_batch.
inline std::vector<std::size_t> predict_vanilla_batch(const Eigen::MatrixXd& z, const DomainMemory& memory,
                                                      const DualPrototypeBank& bank) {
  require(bank.vanilla.has_value(), ErrorCode::ShapeMismatch, "bank has no vanilla prototypes (K > d)");
  std::vector<std::size_t> out(static_cast<std::size_t>(z.cols()));
  std::vector<std::vector<Eigen::Index>> by_domain(memory.size());
  for (Eigen::Index j = 0; j < z.cols(); ++j) by_domain[identify_domain(z.col(j), memory)].push_back(j);
  for (std::size_t t = 0; t < by_domain.size(); ++t) {
    if (by_domain[t].empty()) continue;
    const Eigen::MatrixXd zc = coarse_features(memory.params[t], z(Eigen::all, by_domain[t]));
    for (std::size_t k = 0; k < by_domain[t].size(); ++k)
      out[static_cast<std::size_t>(by_domain[t][k])] = nearest_prototype(zc.col(static_cast<Eigen::Index>(k)), *bank.vanilla);
  }
  return out;
}

/// B(i, j) is the accuracy on test domain i after training through domain j;
/// entries below the diagonal are NaN.
struct AccuracyMatrix {
  Eigen::MatrixXd b;

  AccuracyMatrix() = default;
  explicit AccuracyMatrix(std::size_t t)
      : b(Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(t),
                                    std::numeric_limits<double>::quiet_NaN())) {}

  std::size_t size() const noexcept { return static_cast<std::size_t>(b.rows()); }
  double& at(std::size_t i, std::size_t j) { return b(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)); }
  double at(std::size_t i, std::size_t j) const { return b(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)); }
};

/// A_T: mean of the last column.
inline double average_accuracy(const AccuracyMatrix& m) {
  const auto t = m.size();
  require(t >= 1, ErrorCode::Undefined, "empty accuracy matrix");
  double sum = 0.0;
  for (std::size_t i = 0; i < t; ++i) sum += m.at(i, t - 1);
  return sum / static_cast<double>(t);
}

/// BWT_i (0-based i < T-1): mean of B(i, j) - B(i, i) over j > i.
inline double backward_transfer(const AccuracyMatrix& m, std::size_t i) {
  const auto t = m.size();
  require(i + 1 < t, ErrorCode::Undefined, "backward transfer needs a later domain");
  double sum = 0.0;
  for (std::size_t j = i + 1; j < t; ++j) sum += m.at(i, j) - m.at(i, i);
  return sum / static_cast<double>(t - i - 1);
}

/// F_T: mean of BWT_i over the first T-1 domains.
inline double forgetting(const AccuracyMatrix& m) {
  const auto t = m.size();
  require(t >= 2, ErrorCode::Undefined, "forgetting is undefined for a single domain");
  double sum = 0.0;
  for (std::size_t i = 0; i + 1 < t; ++i) sum += backward_transfer(m, i);
  return sum / static_cast<double>(t - 1);
}

struct ProtocolOptions {
  bool normalize_centroids = false;
  unsigned threads = 1;
};

struct StageEvaluation {
  std::vector<double> accuracy;           // per test domain < stage
  std::vector<double> domain_accuracy;    // fraction routed to the right domain
  std::vector<Prediction> predictions;    // per test row, NaN-free only for rows in evaluated domains
};

/// Evaluates the model made of the first `upto` domains on test rows whose
/// domain is < upto. Rows are split across threads; results do not depend
/// on the thread count.
inline StageEvaluation evaluate_stage(const DomainMemory& memory, const EmbeddingSet& test,
                                      const DualPrototypeBank& bank, std::size_t upto, unsigned threads = 1) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < test.size(); ++i)
    if (test.domain_ids[i] < upto) rows.push_back(i);

  std::vector<Prediction> preds(rows.size());
  const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(rows.size() / 64 + 1)));
  auto work = [&](std::size_t begin, std::size_t end) {
    if (begin >= end) return;
    Eigen::MatrixXd z(static_cast<Eigen::Index>(test.dim()), static_cast<Eigen::Index>(end - begin));
    for (std::size_t k = begin; k < end; ++k) z.col(static_cast<Eigen::Index>(k - begin)) = test.row(rows[k]);
    const auto part = predict_batch(z, memory, bank, upto);
    std::copy(part.begin(), part.end(), preds.begin() + static_cast<std::ptrdiff_t>(begin));
  };
  if (workers == 1) {
    work(0, rows.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (rows.size() + workers - 1) / workers;
    for (unsigned w = 0; w < workers; ++w)
      pool.emplace_back(work, std::min(rows.size(), w * chunk), std::min(rows.size(), (w + 1) * chunk));
    for (auto& th : pool) th.join();
  }

  StageEvaluation out;
  std::vector<std::size_t> correct(upto, 0), routed(upto, 0), total(upto, 0);
  out.predictions.assign(test.size(), Prediction{});
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto i = rows[k];
    const auto dom = test.domain_ids[i];
    ++total[dom];
    if (preds[k].cls == test.labels[i]) ++correct[dom];
    if (preds[k].domain == dom) ++routed[dom];
    out.predictions[i] = preds[k];
  }
  for (std::size_t t = 0; t < upto; ++t) {
    require(total[t] > 0, ErrorCode::MissingDomain, "test set has no rows for domain " + std::to_string(t));
    out.accuracy.push_back(static_cast<double>(correct[t]) / static_cast<double>(total[t]));
    out.domain_accuracy.push_back(static_cast<double>(routed[t]) / static_cast<double>(total[t]));
  }
  return out;
}

struct EvaluationResult {
  AccuracyMatrix accuracy;
  std::vector<double> domain_id_accuracy;  // final stage, per test domain
  std::vector<Prediction> final_predictions;
};

/// Fills B by evaluating every prefix of the memory. Because each stage's
/// calibrator is stored separately, prefix t is exactly the stage-t model.
inline EvaluationResult evaluate(const DomainMemory& memory, const EmbeddingSet& test, const DualPrototypeBank& bank,
                                 unsigned threads = 1) {
  const auto t = memory.size();
  require(t >= 1, ErrorCode::Empty, "domain memory is empty");
  require(test.num_domains() >= t, ErrorCode::MissingDomain, "test manifest has fewer domains than the memory");
  require(test.class_names.size() == bank.num_classes(), ErrorCode::ShapeMismatch, "test set and bank disagree on K");
  EvaluationResult out{AccuracyMatrix(t), {}, {}};
  for (std::size_t stage = 1; stage <= t; ++stage) {
    auto eval = evaluate_stage(memory, test, bank, stage, threads);
    for (std::size_t i = 0; i < stage; ++i) out.accuracy.at(i, stage - 1) = eval.accuracy[i];
    if (stage == t) {
      out.domain_id_accuracy = std::move(eval.domain_accuracy);
      out.final_predictions = std::move(eval.predictions);
    }
  }
  return out;
}

/// Per-domain seed so that each stage's init and shuffling differ but are fixed.
inline std::uint64_t stage_seed(std::uint64_t seed, std::size_t stage) {
  return seed ^ (0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(stage) + 1));
}

/// Sequential training only; the trainer for domain t sees only domain t's rows.
inline DomainMemory train_incremental(const EmbeddingSet& train, const DualPrototypeBank& bank, const TrainConfig& cfg,
                                      const ProtocolOptions& opts = {}, AccessLog* log = nullptr) {
  validate(cfg);
  validate(train);
  require(train.num_classes() == bank.num_classes(), ErrorCode::ShapeMismatch, "training set and bank disagree on K");
  require(static_cast<Eigen::Index>(train.dim()) == bank.dim(), ErrorCode::ShapeMismatch,
          "training set and bank disagree on d");
  DomainMemory memory;
  memory.domain_names = train.domain_names;
  for (std::size_t t = 0; t < train.num_domains(); ++t) {
    if (log) log->begin_stage(train.num_domains());
    const auto slice = slice_domain(train, static_cast<std::uint32_t>(t), log);
    require(slice.size() >= 1, ErrorCode::MissingDomain, "training set has no rows for domain " + train.domain_names[t]);
    TrainConfig stage_cfg = cfg;
    stage_cfg.seed = stage_seed(cfg.seed, t);
    const CalibratorParams* warm = cfg.warm_start && t > 0 ? &memory.params.back() : nullptr;
    auto result = train_domain(slice, bank, stage_cfg, warm);
    memory.centroids.push_back(domain_centroid(slice, opts.normalize_centroids));
    memory.params.push_back(std::move(result.params));
    memory.configs.push_back(stage_cfg);
    memory.final_losses.push_back(result.final_loss);
  }
  return memory;
}

struct ProtocolResult {
  DomainMemory memory;
  EvaluationResult evaluation;
};

/// Train on each domain in turn, evaluating on every seen test domain after each stage.
inline ProtocolResult run_protocol(const EmbeddingSet& train, const EmbeddingSet& test, const DualPrototypeBank& bank,
                                   const TrainConfig& cfg, const ProtocolOptions& opts = {}, AccessLog* log = nullptr) {
  require(train.class_names == test.class_names, ErrorCode::ShapeMismatch, "train and test manifests differ");
  require(test.num_domains() >= train.num_domains(), ErrorCode::MissingDomain, "test set lacks training domains");
  ProtocolResult out{train_incremental(train, bank, cfg, opts, log), {}};
  out.evaluation = evaluate(out.memory, test, bank, opts.threads);
  return out;
}

// Memory file ("DCPM"): magic, u32 version, u64 JSON length, JSON
// {T, d, domain_names}, centroid block (T x d, f64), then T checkpoints, each
// prefixed by its u64 byte length.

inline constexpr char kMemoryMagic[4] = {'D', 'C', 'P', 'M'};
inline constexpr std::uint32_t kMemoryVersion = 1;

inline std::string serialize_memory(const DomainMemory& memory) {
  const auto t = memory.size();
  require(t >= 1, ErrorCode::Empty, "cannot save an empty memory");
  const auto d = memory.centroids.front().size();
  const nlohmann::json header = {{"T", t}, {"d", d}, {"domain_names", memory.domain_names}};
  const std::string text = header.dump();
  std::ostringstream out;
  io::put_bytes(out, std::string_view(kMemoryMagic, 4));
  io::put_u32(out, kMemoryVersion);
  io::put_u64(out, text.size());
  io::put_bytes(out, text);
  Eigen::MatrixXd c(static_cast<Eigen::Index>(t), d);
  for (std::size_t i = 0; i < t; ++i) c.row(static_cast<Eigen::Index>(i)) = memory.centroids[i].transpose();
  io::put_matrix(out, c);
  for (std::size_t i = 0; i < t; ++i) {
    const auto ck = serialize_checkpoint(memory.params[i], memory.configs[i], memory.final_losses[i]);
    io::put_u64(out, ck.size());
    io::put_bytes(out, ck);
  }
  return std::move(out).str();
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.alpha = j.at("alpha").get<double>();
  c.lr0 = j.at("lr0").get<double>();
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.momentum = j.at("momentum").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.arch = architecture_from_json(j.at("arch"));
  c.warm_start = j.at("warm_start").get<bool>();
  return c;
}

inline DomainMemory deserialize_memory(std::span<const unsigned char> bytes) {
  io::Reader in(bytes);
  require(in.string(4) == std::string_view(kMemoryMagic, 4), ErrorCode::BadMagic, "not a DCPM memory file");
  require(in.u32() == kMemoryVersion, ErrorCode::CorruptHeader, "unsupported memory version");
  const auto len = in.u64();
  require(len <= in.remaining(), ErrorCode::Truncated, "memory header truncated");
  DomainMemory memory;
  std::size_t t = 0;
  try {
    const auto header = nlohmann::json::parse(in.string(static_cast<std::size_t>(len)));
    t = header.at("T").get<std::size_t>();
    memory.domain_names = header.at("domain_names").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidManifest, e.what());
  }
  const Eigen::MatrixXd c = io::get_matrix(in);
  require(static_cast<std::size_t>(c.rows()) == t, ErrorCode::ShapeMismatch, "centroid block has wrong row count");
  for (std::size_t i = 0; i < t; ++i) {
    memory.centroids.push_back(c.row(static_cast<Eigen::Index>(i)).transpose());
    const auto size = in.u64();
    require(size <= in.remaining(), ErrorCode::Truncated, "checkpoint truncated");
    io::Reader sub(in.take(static_cast<std::size_t>(size)));
    auto ck = read_checkpoint(sub);
    memory.params.push_back(std::move(ck.params));
    try {
      memory.configs.push_back(train_config_from_json(ck.header.at("config")));
      memory.final_losses.push_back(ck.header.at("final_loss").get<double>());
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::InvalidManifest, e.what());
    }
  }
  require(in.remaining() == 0, ErrorCode::ShapeMismatch, "trailing bytes in memory file");
  return memory;
}

inline void save_memory(const DomainMemory& memory, const std::string& path) {
  io::write_file(path, serialize_memory(memory));
}

inline DomainMemory load_memory(const std::string& path) { return deserialize_memory(io::read_file(path)); }

/// JSON report; contains no timing so identical runs give identical bytes.
inline nlohmann::json make_report(const EvaluationResult& eval, const DualPrototypeBank& bank,
                                  const std::vector<std::string>& domain_names) {
  const auto t = eval.accuracy.size();
  nlohmann::json b = nlohmann::json::array();
  for (std::size_t i = 0; i < t; ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t j = 0; j < t; ++j) {
      if (j >= i) row.push_back(eval.accuracy.at(i, j));
      else row.push_back(nullptr);
    }
    b.push_back(std::move(row));
  }
  nlohmann::json bwt = nlohmann::json::array();
  for (std::size_t i = 0; i + 1 < t; ++i) bwt.push_back(backward_transfer(eval.accuracy, i));
  double routed = 0.0;
  for (double a : eval.domain_id_accuracy) routed += a;
  nlohmann::json report = {
      {"mode", bank.mode == BankMode::Dual ? "dual" : "vanilla"},
      {"K", bank.num_classes()},
      {"N_g", bank.num_groups()},
      {"T", t},
      {"domains", std::vector<std::string>(domain_names.begin(), domain_names.begin() + static_cast<std::ptrdiff_t>(t))},
      {"B", b},
      {"A_T", average_accuracy(eval.accuracy)},
      {"F_T", t >= 2 ? nlohmann::json(forgetting(eval.accuracy)) : nlohmann::json(nullptr)},
      {"BWT", bwt},
      {"domain_id_accuracy", eval.domain_id_accuracy},
      {"domain_id_accuracy_mean", routed / static_cast<double>(eval.domain_id_accuracy.size())},
  };
  return report;
}

/// One line per evaluated test row: true label, predicted label, true and identified domain.
inline std::string predictions_csv(const EvaluationResult& eval, const EmbeddingSet& test) {
  std::ostringstream out;
  out << "row,true_label,predicted_label,true_domain,identified_domain\n";
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (test.domain_ids[i] >= eval.accuracy.size()) continue;
    const auto& p = eval.final_predictions[i];
    out << i << ',' << test.labels[i] << ',' << p.cls << ',' << test.domain_ids[i] << ',' << p.domain << '\n';
  }
  return std::move(out).str();
}

}  // namespace dualcp
