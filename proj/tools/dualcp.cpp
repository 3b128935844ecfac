// dualcp: synth / prototypes / train / eval / verify.
//
// Exit codes: 0 success, 1 runtime or suite failure, 2 bad arguments.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dualcp/dualcp.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  // paths
  std::string embeddings, test_embeddings, guidance, bank, memory, out;
  // prototypes
  double p = 0.85;
  bool vanilla = false;
  std::uint32_t base_domain = 0;
  // training
  dualcp::TrainConfig train;
  int layers = 2;
  double hidden_mult = 1.0;
  std::string activation = "gelu";
  bool residual = false;
  bool normalize_centroids = false;
  // eval
  bool csv = false;
  // synth
  dualcp::SynthSpec synth;
  std::string group_plan;
  std::uint64_t seed = 0;
};

unsigned eval_threads() {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("DUALCP_THREADS")) {
    try {
      const long cap = std::stol(env);
      if (cap >= 1) n = std::min<unsigned>(n, static_cast<unsigned>(cap));
    } catch (const std::exception&) {
      throw UsageError("DUALCP_THREADS must be a positive integer");
    }
  }
  return n;
}

fs::path out_dir(const Options& o) {
  fs::path dir(o.out);
  fs::create_directories(dir);
  return dir;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw dualcp::Error(dualcp::ErrorCode::Io, "cannot write " + path.string());
  f << j.dump(2) << '\n';
}

/// Every run leaves a manifest with its full configuration and provenance.
void write_manifest(const fs::path& dir, const std::string& command, json config,
                    std::chrono::steady_clock::time_point start) {
  json m = {
      {"command", command},
      {"config", std::move(config)},
      {"version", DUALCP_VERSION},
      {"git_describe", DUALCP_GIT_DESCRIBE},
      {"wall_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()},
  };
  write_json(dir / ("run_" + command + ".json"), m);
}

dualcp::TrainConfig train_config(const Options& o) {
  dualcp::TrainConfig cfg = o.train;
  cfg.seed = o.seed;
  cfg.arch.layers = o.layers;
  cfg.arch.hidden_mult = o.hidden_mult;
  cfg.arch.residual = o.residual;
  try {
    cfg.arch.activation = dualcp::activation_from_string(o.activation);
    dualcp::validate(cfg);
  } catch (const dualcp::Error& e) {
    throw UsageError(e.what());
  }
  return cfg;
}

std::vector<std::size_t> parse_plan(const std::string& text) {
  std::vector<std::size_t> plan;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      plan.push_back(std::stoul(item));
    } catch (const std::exception&) {
      throw UsageError("--groups must be a comma-separated list of sizes");
    }
  }
  return plan;
}

int cmd_synth(const Options& o) {
  const auto start = std::chrono::steady_clock::now();
  dualcp::SynthSpec spec = o.synth;
  spec.seed = o.seed;
  if (!o.group_plan.empty()) spec.group_plan = parse_plan(o.group_plan);
  const auto data = dualcp::generate(spec);
  const auto dir = out_dir(o);
  dualcp::save(data.train, (dir / "train.dcp").string());
  dualcp::save(data.test, (dir / "test.dcp").string());
  dualcp::save_guidance(data.guidance, (dir / "guidance.dcp").string());
  write_manifest(dir, "synth",
                 {{"K", spec.num_classes},
                  {"T", spec.num_domains},
                  {"d", spec.dim},
                  {"n", spec.per_class_domain},
                  {"group_plan", spec.group_plan},
                  {"sigma_dom", spec.sigma_dom},
                  {"sigma_cls", spec.sigma_cls},
                  {"test_fraction", spec.test_fraction},
                  {"intra_cosine", spec.intra_cosine},
                  {"seed", spec.seed},
                  {"planned_groups", data.planned.groups}},
                 start);
  std::cout << "wrote " << data.train.size() << " train / " << data.test.size() << " test rows, "
            << data.guidance.num_classes() << " classes to " << dir.string() << '\n';
  return 0;
}

int cmd_prototypes(const Options& o) {
  const auto start = std::chrono::steady_clock::now();
  if (o.guidance.empty() == o.embeddings.empty())
    throw UsageError("prototypes needs exactly one of --guidance or --embeddings");
  if (!(o.p > 0.0 && o.p <= 1.0)) throw UsageError("--p must lie in (0, 1]");
  const auto guidance = o.guidance.empty() ? dualcp::class_mean_guidance(dualcp::load(o.embeddings), o.base_domain)
                                           : dualcp::load_guidance(o.guidance);
  const auto bank = o.vanilla ? dualcp::build_vanilla_bank(guidance) : dualcp::build_dual_bank(guidance, o.p);
  const auto dir = out_dir(o);
  dualcp::save_bank(bank, guidance.class_names, (dir / "bank.dcpb").string());

  json config = {{"guidance", o.guidance},          {"embeddings", o.embeddings},
                 {"base_domain", o.base_domain},    {"p", o.p},
                 {"vanilla", o.vanilla},            {"K", bank.num_classes()},
                 {"N_g", bank.num_groups()},        {"groups", bank.grouping.groups}};
  if (bank.num_classes() >= 2) {
    const auto report = dualcp::verify_angle_bound(bank);
    config["angles"] = {{"vanilla", report.vanilla_angle},
                        {"min_coarse", report.min_coarse_angle ? json(*report.min_coarse_angle) : json(nullptr)},
                        {"bound_holds", report.holds}};
  }
  write_manifest(dir, "prototypes", config, start);
  std::cout << (o.vanilla ? "vanilla" : "dual") << " bank: K=" << bank.num_classes() << " N_g=" << bank.num_groups()
            << " -> " << (dir / "bank.dcpb").string() << '\n';
  return 0;
}

int cmd_train(const Options& o) {
  const auto start = std::chrono::steady_clock::now();
  const auto cfg = train_config(o);
  const auto train = dualcp::load(o.embeddings);
  const auto loaded = dualcp::load_bank(o.bank);
  if (loaded.class_names != train.class_names)
    throw dualcp::Error(dualcp::ErrorCode::ShapeMismatch, "bank and embeddings disagree on class names");
  dualcp::ProtocolOptions opts;
  opts.normalize_centroids = o.normalize_centroids;
  const auto memory = dualcp::train_incremental(train, loaded.bank, cfg, opts);
  const auto dir = out_dir(o);
  dualcp::save_memory(memory, (dir / "memory.dcpm").string());
  write_manifest(dir, "train",
                 {{"embeddings", o.embeddings},
                  {"bank", o.bank},
                  {"train", dualcp::to_json(cfg)},
                  {"normalize_centroids", o.normalize_centroids},
                  {"final_losses", memory.final_losses}},
                 start);
  for (std::size_t t = 0; t < memory.size(); ++t)
    std::cout << memory.domain_names[t] << ": final loss " << memory.final_losses[t] << '\n';
  return 0;
}

int cmd_eval(const Options& o) {
  const auto start = std::chrono::steady_clock::now();
  const auto test = dualcp::load(o.embeddings);
  const auto loaded = dualcp::load_bank(o.bank);
  if (loaded.class_names != test.class_names)
    throw dualcp::Error(dualcp::ErrorCode::ShapeMismatch, "bank and embeddings disagree on class names");
  const auto memory = dualcp::load_memory(o.memory);
  const auto threads = eval_threads();
  const auto result = dualcp::evaluate(memory, test, loaded.bank, threads);
  const auto dir = out_dir(o);
  const auto report = dualcp::make_report(result, loaded.bank, memory.domain_names);
  write_json(dir / "report.json", report);
  if (o.csv) dualcp::io::write_file((dir / "predictions.csv").string(), dualcp::predictions_csv(result, test));
  write_manifest(dir, "eval", {{"embeddings", o.embeddings}, {"bank", o.bank}, {"memory", o.memory},
                               {"threads", threads}, {"csv", o.csv}}, start);
  std::cout << "A_T = " << report["A_T"].get<double>();
  if (!report["F_T"].is_null()) std::cout << "  F_T = " << report["F_T"].get<double>();
  std::cout << "  domain-ID = " << report["domain_id_accuracy_mean"].get<double>() << '\n';
  return 0;
}

int cmd_verify(const Options& o) {
  bool ok = true;
  for (const auto& r : dualcp::verify::run_all(o.seed)) {
    std::cout << (r.passed ? "[PASS] " : "[FAIL] ") << r.name << "  worst=" << r.worst << "  " << r.seconds << "s";
    if (!r.detail.empty()) std::cout << "  " << r.detail;
    std::cout << '\n';
    ok = ok && r.passed;
  }
  return ok ? 0 : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-level concept prototypes for rehearsal-free domain-incremental learning"};
  app.require_subcommand(1);
  Options o;

  auto add_out = [&](CLI::App* sub) { sub->add_option("--out", o.out, "Output directory")->required(); };
  auto add_seed = [&](CLI::App* sub) { sub->add_option("--seed", o.seed, "PRNG seed")->capture_default_str(); };

  auto* synth = app.add_subcommand("synth", "Generate a synthetic multi-domain benchmark");
  add_out(synth);
  add_seed(synth);
  synth->add_option("--classes", o.synth.num_classes, "Number of classes K")->capture_default_str();
  synth->add_option("--domains", o.synth.num_domains, "Number of domains T")->capture_default_str();
  synth->add_option("--dim", o.synth.dim, "Feature dimension d")->capture_default_str();
  synth->add_option("--per-class", o.synth.per_class_domain, "Samples per class per domain")->capture_default_str();
  synth->add_option("--groups", o.group_plan, "Planned group sizes, comma separated (must sum to K)");
  synth->add_option("--sigma-dom", o.synth.sigma_dom, "Domain offset magnitude")->capture_default_str();
  synth->add_option("--sigma-cls", o.synth.sigma_cls, "Per-coordinate class noise")->capture_default_str();
  synth->add_option("--test-fraction", o.synth.test_fraction, "Held-out share of each class/domain cell")
      ->capture_default_str();

  auto* protos = app.add_subcommand("prototypes", "Build a dual-level (or vanilla) prototype bank");
  add_out(protos);
  protos->add_option("--guidance", o.guidance, "Guidance container (one unit row per class)");
  protos->add_option("--embeddings", o.embeddings, "Derive guidance from per-class means of a base domain instead");
  protos->add_option("--base-domain", o.base_domain, "Base domain index for --embeddings")->capture_default_str();
  protos->add_option("--p", o.p, "Similarity threshold for grouping")->capture_default_str();
  protos->add_flag("--vanilla", o.vanilla, "Single-level K-way ETF bank");

  auto* train = app.add_subcommand("train", "Train per-domain calibrators over the incremental sequence");
  add_out(train);
  add_seed(train);
  train->add_option("--embeddings", o.embeddings, "Training container")->required();
  train->add_option("--bank", o.bank, "Prototype bank")->required();
  train->add_option("--alpha", o.train.alpha, "Coarse weight in the loss")->capture_default_str();
  train->add_option("--lr", o.train.lr0, "Initial learning rate")->capture_default_str();
  train->add_option("--epochs", o.train.epochs, "Epochs per domain")->capture_default_str();
  train->add_option("--batch", o.train.batch_size, "Mini-batch size")->capture_default_str();
  train->add_option("--weight-decay", o.train.weight_decay, "Weight decay on weights")->capture_default_str();
  train->add_option("--momentum", o.train.momentum, "SGD momentum")->capture_default_str();
  train->add_option("--layers", o.layers, "MLP depth (1-3)")->capture_default_str();
  train->add_option("--hidden-mult", o.hidden_mult, "Hidden width as a multiple of d")->capture_default_str();
  train->add_option("--activation", o.activation, "gelu or softplus")->capture_default_str();
  train->add_flag("--residual", o.residual, "Add the input feature to the MLP output");
  train->add_flag("--warm-start", o.train.warm_start, "Initialize each domain from the previous domain");
  train->add_flag("--normalize-centroids", o.normalize_centroids, "Average unit-normalized features for centroids");

  auto* eval = app.add_subcommand("eval", "Evaluate a trained memory; writes report.json");
  add_out(eval);
  eval->add_option("--embeddings", o.embeddings, "Test container")->required();
  eval->add_option("--bank", o.bank, "Prototype bank")->required();
  eval->add_option("--memory", o.memory, "Memory file written by train")->required();
  eval->add_flag("--csv", o.csv, "Also write predictions.csv");

  auto* verify = app.add_subcommand("verify", "Run the built-in numerical self-checks");
  add_seed(verify);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*synth) return cmd_synth(o);
    if (*protos) return cmd_prototypes(o);
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o);
    if (*verify) return cmd_verify(o);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  } catch (const dualcp::Error& e) {
    if (e.code() == dualcp::ErrorCode::BadConfig || e.code() == dualcp::ErrorCode::BadThreshold) {
      std::cerr << "error: " << e.what() << '\n';
      return kExitUsage;
    }
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}
