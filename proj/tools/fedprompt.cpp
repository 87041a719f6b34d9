// Command line front end: train, evaluate, partition, gradcheck and
// ot-solve subcommands over the fedprompt library. Exit codes: 0 success,
// 2 configuration error, 3 numerical error, 4 I/O error, 5 protocol error,
// 1 anything else.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "fedprompt/config.hpp"
#include "fedprompt/dataset.hpp"
#include "fedprompt/experiment.hpp"
#include "fedprompt/gradcheck.hpp"
#include "fedprompt/ot.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitIo = 4;
constexpr int kExitProtocol = 5;

struct TrainOptions {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out_dir;
};

int cmd_train(const TrainOptions& opt) {
  fedprompt::ExperimentConfig cfg;
  if (!opt.config_path.empty()) {
    cfg = fedprompt::load_config_file(opt.config_path);
  }
  if (opt.seed_set) cfg.master_seed = opt.seed;
  if (!opt.out_dir.empty()) cfg.output_dir = opt.out_dir;
  fedprompt::RunResult res = fedprompt::run_experiment(cfg);
  std::cout << "run directory: " << res.run_dir.string() << "\n";
  std::cout << "rounds completed: "
            << (res.history.empty() ? 0 : res.history.back().round) << "\n";
  std::cout << "final mean test accuracy: "
            << fedprompt::format_double(res.final_mean_accuracy) << "\n";
  std::cout << "bytes up: " << res.bytes_up << ", bytes down: "
            << res.bytes_down << "\n";
  return kExitOk;
}

int cmd_evaluate(const std::string& run_dir) {
  fedprompt::EvalResult res = fedprompt::evaluate_run(run_dir);
  for (std::size_t i = 0; i < res.per_client.size(); ++i) {
    std::cout << "client " << i << " test accuracy: "
              << fedprompt::format_double(res.per_client[i]) << "\n";
  }
  std::cout << "mean test accuracy: " << fedprompt::format_double(res.mean)
            << "\n";
  std::cout << "prediction path: " << res.prediction_path << "\n";
  return kExitOk;
}

struct PartitionOptions {
  std::string preset = "synthetic";
  int clients = 5;
  std::uint64_t seed = 0;
  std::string out_dir;
  int classes_override = -1;
  int per_class_override = -1;
  double train_fraction_override = -1.0;
};

int cmd_partition(const PartitionOptions& opt) {
  fedprompt::DatasetShape shape = fedprompt::preset_shape(opt.preset);
  if (opt.classes_override > 0) shape.n_classes = opt.classes_override;
  if (opt.per_class_override > 0) {
    shape.images_per_class = opt.per_class_override;
  }
  if (opt.train_fraction_override >= 0.0) {
    shape.train_fraction = opt.train_fraction_override;
  }
  fedprompt::PartitionSpec spec;
  spec.n_classes = shape.n_classes;
  spec.images_per_class = shape.images_per_class;
  spec.train_fraction = shape.train_fraction;
  spec.n_clients = opt.clients;
  spec.seed = opt.seed;
  fedprompt::Partition part = fedprompt::partition_dataset(spec);

  std::ostringstream counts;
  counts << "client,train_count,test_count\n";
  for (int i = 0; i < opt.clients; ++i) {
    counts << i << ',' << part.train_indices[static_cast<std::size_t>(i)].size()
           << ',' << part.test_indices[static_cast<std::size_t>(i)].size()
           << "\n";
  }
  std::cout << counts.str();

  if (!opt.out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(opt.out_dir, ec);
    if (ec) {
      throw fedprompt::IoError("cannot create output directory " +
                               opt.out_dir + ": " + ec.message());
    }
    std::filesystem::path dir(opt.out_dir);
    {
      std::ofstream os(dir / "counts.csv");
      if (!os) throw fedprompt::IoError("cannot write counts.csv");
      os << counts.str();
    }
    {
      std::ofstream os(dir / "indices.csv");
      if (!os) throw fedprompt::IoError("cannot write indices.csv");
      os << "client,split,sample_index\n";
      for (int i = 0; i < opt.clients; ++i) {
        for (int idx : part.train_indices[static_cast<std::size_t>(i)]) {
          os << i << ",train," << idx << "\n";
        }
        for (int idx : part.test_indices[static_cast<std::size_t>(i)]) {
          os << i << ",test," << idx << "\n";
        }
      }
    }
    std::cout << "wrote " << (dir / "counts.csv").string() << " and "
              << (dir / "indices.csv").string() << "\n";
  }
  return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed) {
  fedprompt::GradCheckReport rep = fedprompt::run_gradcheck(seed);
  struct Row {
    const char* name;
    double value;
    double tol;
  };
  const Row rows[] = {
      {"softmax_ce shared block", rep.softmax_shared, 1e-4},
      {"softmax_ce private block", rep.softmax_private, 1e-4},
      {"alignment private block", rep.dpac_private, 1e-4},
      {"transport total shared block", rep.full_shared, 1e-3},
      {"transport total private block", rep.full_private, 1e-3},
  };
  bool ok = true;
  for (const Row& r : rows) {
    bool pass = r.value <= r.tol;
    ok = ok && pass;
    std::cout << (pass ? "[PASS] " : "[FAIL] ") << r.name
              << ": max relative error "
              << fedprompt::format_double(r.value) << " (tolerance "
              << fedprompt::format_double(r.tol) << ")\n";
  }
  if (!ok) {
    throw fedprompt::NumericalError(
        "gradcheck: analytic gradients disagree with finite differences");
  }
  return kExitOk;
}

int cmd_ot_solve(const std::string& in_path, const std::string& out_path) {
  std::ifstream is(in_path);
  if (!is) throw fedprompt::IoError("cannot open problem file: " + in_path);
  std::ostringstream buf;
  buf << is.rdbuf();
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(buf.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw fedprompt::ConfigError(in_path + ": " + e.what());
  }
  fedprompt::detail::require_known_keys(
      root, "problem", {"cost", "alpha", "beta", "lambda", "max_iters", "tol"});
  if (!root.contains("cost") || !root.at("cost").is_array()) {
    throw fedprompt::ConfigError("problem: cost must be an array of rows");
  }
  const auto& jc = root.at("cost");
  const auto v = static_cast<Eigen::Index>(jc.size());
  if (v < 1) throw fedprompt::ConfigError("problem: cost is empty");
  fedprompt::TransportProblem prob;
  prob.cost.resize(v, 2);
  for (Eigen::Index i = 0; i < v; ++i) {
    const auto& row = jc[static_cast<std::size_t>(i)];
    if (!row.is_array() || row.size() != 2) {
      throw fedprompt::ConfigError(
          "problem: each cost row must have exactly 2 entries");
    }
    prob.cost(i, 0) = row[0].get<double>();
    prob.cost(i, 1) = row[1].get<double>();
  }
  if (root.contains("alpha")) {
    const auto& ja = root.at("alpha");
    if (!ja.is_array() || static_cast<Eigen::Index>(ja.size()) != v) {
      throw fedprompt::ConfigError("problem: alpha must have one entry per row");
    }
    prob.alpha.resize(v);
    for (Eigen::Index i = 0; i < v; ++i) {
      prob.alpha(i) = ja[static_cast<std::size_t>(i)].get<double>();
    }
  } else {
    prob.alpha = Eigen::VectorXd::Constant(v, 2.0 / static_cast<double>(v));
  }
  if (root.contains("beta")) {
    const auto& jb = root.at("beta");
    if (!jb.is_array() || jb.size() != 2) {
      throw fedprompt::ConfigError("problem: beta must have 2 entries");
    }
    prob.beta << jb[0].get<double>(), jb[1].get<double>();
  }
  if (root.contains("lambda")) prob.lambda = root.at("lambda").get<double>();
  if (root.contains("max_iters")) {
    prob.max_iters = root.at("max_iters").get<int>();
  }
  if (root.contains("tol")) prob.tol = root.at("tol").get<double>();

  fedprompt::TransportPlan plan = fedprompt::solve_transport(prob);
  nlohmann::json out;
  out["plan"] = nlohmann::json::array();
  for (Eigen::Index i = 0; i < plan.plan.rows(); ++i) {
    out["plan"].push_back({plan.plan(i, 0), plan.plan(i, 1)});
  }
  out["u"] = std::vector<double>(plan.u.data(), plan.u.data() + plan.u.size());
  out["v"] = {plan.v(0), plan.v(1)};
  out["iterations"] = plan.iterations_used;
  out["converged"] = plan.converged;
  out["distance"] = fedprompt::transport_distance(prob, plan);
  std::string text = out.dump(2) + "\n";
  if (out_path.empty()) {
    std::cout << text;
  } else {
    std::ofstream os(out_path);
    if (!os) throw fedprompt::IoError("cannot open output file: " + out_path);
    os << text;
    std::cout << "wrote " << out_path << "\n";
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated prompt learning simulator"};
  app.require_subcommand(1);

  TrainOptions train_opt;
  CLI::App* train = app.add_subcommand("train", "Run a federated experiment");
  train->add_option("--config", train_opt.config_path,
                    "Experiment config JSON (defaults apply when omitted)");
  CLI::Option* seed_opt =
      train->add_option("--seed", train_opt.seed, "Master seed override");
  train->add_option("--out", train_opt.out_dir, "Output directory override");

  std::string eval_run_dir;
  CLI::App* evaluate =
      app.add_subcommand("evaluate", "Score the checkpoints of a finished run");
  evaluate->add_option("--run", eval_run_dir, "Run directory to evaluate")
      ->required();

  PartitionOptions part_opt;
  CLI::App* partition = app.add_subcommand(
      "partition", "Print the per-client dataset partition as CSV");
  partition->add_option("--preset", part_opt.preset,
                        "Dataset preset: synthetic, fed-optimal, "
                        "fed-ucmerced, fed-nwpu");
  partition->add_option("--clients", part_opt.clients, "Number of clients")
      ->required();
  partition->add_option("--seed", part_opt.seed, "Partition seed");
  partition->add_option("--out", part_opt.out_dir,
                        "Directory for counts.csv and indices.csv");
  partition->add_option("--classes", part_opt.classes_override,
                        "Override the class count");
  partition->add_option("--per-class", part_opt.per_class_override,
                        "Override the images per class");
  partition->add_option("--train-fraction", part_opt.train_fraction_override,
                        "Override the train fraction");

  std::uint64_t gradcheck_seed = 7;
  CLI::App* gradcheck = app.add_subcommand(
      "gradcheck", "Compare analytic gradients against finite differences");
  gradcheck->add_option("--seed", gradcheck_seed, "Problem seed");

  std::string ot_in, ot_out;
  CLI::App* ot_solve = app.add_subcommand(
      "ot-solve", "Solve one transport problem from a JSON file");
  ot_solve->add_option("--in", ot_in, "Problem JSON file")->required();
  ot_solve->add_option("--out", ot_out, "Plan JSON output (stdout if omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (train->parsed()) {
      train_opt.seed_set = seed_opt->count() > 0;
      return cmd_train(train_opt);
    }
    if (evaluate->parsed()) return cmd_evaluate(eval_run_dir);
    if (partition->parsed()) return cmd_partition(part_opt);
    if (gradcheck->parsed()) return cmd_gradcheck(gradcheck_seed);
    if (ot_solve->parsed()) return cmd_ot_solve(ot_in, ot_out);
    std::cerr << "no subcommand selected\n";
    return kExitConfig;
  } catch (const fedprompt::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const fedprompt::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const fedprompt::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fedprompt::ProtocolError& e) {
    std::cerr << "protocol error: " << e.what() << "\n";
    return kExitProtocol;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitOther;
  }
}
