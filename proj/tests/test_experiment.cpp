#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedprompt/config.hpp"
#include "fedprompt/experiment.hpp"

using namespace fedprompt;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::MessageMatches;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
  std::filesystem::path dir = std::filesystem::temp_directory_path() /
                              ("fedprompt_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  std::ostringstream buf;
  buf << is.rdbuf();
  return buf.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  REQUIRE(os.good());
  os << text;
}

// Small but complete experiment: three clients, three rounds, both prompt
// blocks and the transport path active.
ExperimentConfig small_config(const std::filesystem::path& out_dir) {
  ExperimentConfig cfg;
  cfg.clients = 3;
  cfg.rounds = 3;
  cfg.local_epochs = 1;
  cfg.batch_size = 8;
  cfg.lr = 0.01;
  cfg.temperature = 0.2;
  cfg.master_seed = 5;
  cfg.output_dir = out_dir.string();
  cfg.prompt = {2, 2, 8};
  cfg.encoder = {8, 4};
  cfg.data.classes = 4;
  cfg.data.per_class = 10;
  return cfg;
}

int run_tool(const std::string& args) {
  std::string cmd = std::string(FEDPROMPT_TOOL_PATH) + " " + args +
                    " >/dev/null 2>&1";
  int rc = std::system(cmd.c_str());
  REQUIRE(rc != -1);
  REQUIRE(WIFEXITED(rc));
  return WEXITSTATUS(rc);
}

}  // namespace

TEST_CASE("an empty config document yields the default configuration") {
  ExperimentConfig parsed = parse_config("{}", "inline");
  ExperimentConfig defaults;
  defaults.resolve_preset();
  REQUIRE(parsed.to_json().dump() == defaults.to_json().dump());
}

TEST_CASE("config validation names the offending field") {
  REQUIRE_THROWS_MATCHES(parse_config(R"({"lr": -1.0})", "inline"), ConfigError,
                         MessageMatches(ContainsSubstring("lr")));
  REQUIRE_THROWS_MATCHES(parse_config(R"({"temperature": 0.0})", "inline"),
                         ConfigError,
                         MessageMatches(ContainsSubstring("temperature")));
  REQUIRE_THROWS_MATCHES(
      parse_config(R"({"data": {"train_fraction": 1.0}})", "inline"),
      ConfigError, MessageMatches(ContainsSubstring("data.train_fraction")));
  REQUIRE_THROWS_MATCHES(parse_config(R"({"prompt": {"h_shared": 3}})",
                                      "inline"),
                         ConfigError,
                         MessageMatches(ContainsSubstring("h_shared")));
  REQUIRE_THROWS_MATCHES(parse_config(R"({"master_seed": -4})", "inline"),
                         ConfigError,
                         MessageMatches(ContainsSubstring("master_seed")));
  REQUIRE_THROWS_MATCHES(parse_config(R"({"clients": 2.5})", "inline"),
                         ConfigError,
                         MessageMatches(ContainsSubstring("clients")));
  REQUIRE_THROWS_MATCHES(parse_config(R"({"ot": {"lambda": true}})", "inline"),
                         ConfigError,
                         MessageMatches(ContainsSubstring("ot.lambda")));
  REQUIRE_THROWS_MATCHES(parse_config(R"({"ot": {"beta": [1.0]}})", "inline"),
                         ConfigError,
                         MessageMatches(ContainsSubstring("ot.beta")));
  REQUIRE_THROWS_MATCHES(parse_config(R"({"preset": "imagenet"})", "inline"),
                         ConfigError,
                         MessageMatches(ContainsSubstring("imagenet")));
}

TEST_CASE("unknown config keys are rejected by name") {
  REQUIRE_THROWS_MATCHES(parse_config(R"({"lern_rate": 0.1})", "inline"),
                         ConfigError,
                         MessageMatches(ContainsSubstring("lern_rate")));
  REQUIRE_THROWS_MATCHES(
      parse_config(R"({"ot": {"lamda": 0.1}})", "inline"), ConfigError,
      MessageMatches(ContainsSubstring("lamda")));
  REQUIRE_THROWS_MATCHES(
      parse_config(R"({"ablation": {"dpm": true}})", "inline"), ConfigError,
      MessageMatches(ContainsSubstring("dpm")));
}

TEST_CASE("config syntax errors report line and column") {
  const std::string text = "{\n  \"clients\": zz\n}";
  REQUIRE_THROWS_MATCHES(
      parse_config(text, "broken.json"), ConfigError,
      MessageMatches(ContainsSubstring("broken.json") &&
                     ContainsSubstring("line 2")));
}

TEST_CASE("configs round-trip through serialization") {
  ExperimentConfig cfg;
  cfg.preset = "fed-ucmerced";
  cfg.clients = 7;
  cfg.rounds = 12;
  cfg.lr = 0.25;
  cfg.master_seed = 999;
  cfg.aggregate_literal_mean = true;
  cfg.ot.beta << 0.4, 0.6;
  cfg.ablation.dpac = false;
  cfg.resolve_preset();
  cfg.validate();

  ExperimentConfig back = config_from_json(cfg.to_json());
  REQUIRE(back.to_json().dump() == cfg.to_json().dump());
  REQUIRE(back.data.classes == 21);  // pinned by the preset
  REQUIRE(back.data.per_class == 100);
}

TEST_CASE("config hash is stable and content sensitive") {
  ExperimentConfig a;
  ExperimentConfig b;
  std::string ha = config_hash(a);
  REQUIRE(ha == config_hash(b));
  REQUIRE(ha.rfind("fnv1a64:", 0) == 0);
  REQUIRE(ha.size() == 8 + 16);

  b.lr = 0.002;
  REQUIRE(config_hash(b) != ha);
  b = a;
  b.ablation.cmfac = false;
  REQUIRE(config_hash(b) != ha);
}

TEST_CASE("a zero-round run persists a complete, loadable artifact set") {
  std::filesystem::path dir = fresh_dir("zero_round");
  ExperimentConfig cfg = small_config(dir / "run");
  cfg.rounds = 0;
  RunResult res = run_experiment(cfg);
  REQUIRE(res.history.empty());
  REQUIRE(res.final_mean_accuracy == 0.0);

  RunPaths paths = run_paths(cfg.output_dir);
  REQUIRE(std::filesystem::exists(paths.config));
  REQUIRE(std::filesystem::exists(paths.manifest));
  REQUIRE(std::filesystem::exists(paths.history));
  REQUIRE(read_file(paths.history) ==
          std::string(history_csv_header()) + "\n");

  nlohmann::json manifest = nlohmann::json::parse(read_file(paths.manifest));
  ExperimentConfig resolved = cfg;
  resolved.resolve_preset();
  REQUIRE(manifest.at("schema_version").get<int>() == 1);
  REQUIRE(manifest.at("master_seed").get<std::uint64_t>() == cfg.master_seed);
  REQUIRE(manifest.at("config_hash").get<std::string>() ==
          config_hash(resolved));
  REQUIRE(manifest.at("config").dump() == resolved.to_json().dump());

  // The saved global prompt is still the seeded initial one.
  Environment env = build_environment(resolved);
  PromptBlob global =
      load_prompt_matrix(paths.checkpoints / "global_shared.fpk");
  REQUIRE((global.values.array() == env.initial_prompts.shared.array()).all());
  REQUIRE(global.n_classes == 4);
  REQUIRE(global.role == PromptRole::Shared);
  REQUIRE(std::filesystem::exists(paths.checkpoints / "class_embeddings.fpk"));
  for (int i = 0; i < 3; ++i) {
    REQUIRE(std::filesystem::exists(paths.checkpoints /
                                    client_checkpoint_name(i)));
  }

  EvalResult ev = evaluate_run(cfg.output_dir);
  REQUIRE(ev.per_client.size() == 3);
  REQUIRE(ev.mean >= 0.0);
  REQUIRE(ev.mean <= 1.0);
  REQUIRE(ev.prediction_path == "transport");
  REQUIRE(std::filesystem::exists(paths.metrics));
  std::filesystem::remove_all(dir);
}

TEST_CASE("identical configs produce byte-identical artifacts") {
  std::filesystem::path dir = fresh_dir("determinism");
  ExperimentConfig cfg_a = small_config(dir / "a");
  ExperimentConfig cfg_b = small_config(dir / "b");
  cfg_a.rounds = 2;
  cfg_b.rounds = 2;
  RunResult ra = run_experiment(cfg_a);
  RunResult rb = run_experiment(cfg_b);

  REQUIRE(ra.final_mean_accuracy == rb.final_mean_accuracy);
  for (std::size_t i = 0; i < ra.final_accuracy.size(); ++i) {
    REQUIRE(ra.final_accuracy[i] == rb.final_accuracy[i]);
  }
  REQUIRE(read_file(dir / "a" / "history.csv") ==
          read_file(dir / "b" / "history.csv"));
  REQUIRE(read_file(dir / "a" / "checkpoints" / "global_shared.fpk") ==
          read_file(dir / "b" / "checkpoints" / "global_shared.fpk"));
  for (int i = 0; i < 3; ++i) {
    REQUIRE(read_file(dir / "a" / "checkpoints" / client_checkpoint_name(i)) ==
            read_file(dir / "b" / "checkpoints" / client_checkpoint_name(i)));
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("evaluation of saved checkpoints reproduces the recorded accuracy") {
  std::filesystem::path dir = fresh_dir("eval_match");
  ExperimentConfig cfg = small_config(dir / "run");
  RunResult res = run_experiment(cfg);
  REQUIRE(res.history.size() == 9);

  EvalResult ev = evaluate_run(cfg.output_dir, false);
  REQUIRE(ev.per_client.size() == res.final_accuracy.size());
  for (std::size_t i = 0; i < ev.per_client.size(); ++i) {
    REQUIRE(ev.per_client[i] == res.final_accuracy[i]);
  }
  REQUIRE(ev.mean == res.final_mean_accuracy);
  std::filesystem::remove_all(dir);
}

TEST_CASE("evaluation rejects checkpoints with the wrong shape or role") {
  std::filesystem::path dir = fresh_dir("eval_reject");
  ExperimentConfig cfg = small_config(dir / "run");
  cfg.rounds = 0;
  run_experiment(cfg);
  RunPaths paths = run_paths(cfg.output_dir);

  SECTION("shape mismatch names the tensor") {
    save_prompt_matrix(paths.checkpoints / "global_shared.fpk",
                       Eigen::MatrixXd::Zero(2, 9), PromptRole::Shared, 4);
    REQUIRE_THROWS_MATCHES(
        evaluate_run(cfg.output_dir, false), ConfigError,
        MessageMatches(ContainsSubstring("global shared prompt")));
  }
  SECTION("role mismatch is caught") {
    PromptBlob priv =
        load_prompt_matrix(paths.checkpoints / client_checkpoint_name(0));
    save_prompt_matrix(paths.checkpoints / client_checkpoint_name(0),
                       priv.values, PromptRole::Shared, 4);
    REQUIRE_THROWS_MATCHES(
        evaluate_run(cfg.output_dir, false), ConfigError,
        MessageMatches(ContainsSubstring("client 0 private prompt") &&
                       ContainsSubstring("role")));
  }
  SECTION("missing checkpoint is an I/O error") {
    std::filesystem::remove(paths.checkpoints / "class_embeddings.fpk");
    REQUIRE_THROWS_AS(evaluate_run(cfg.output_dir, false), IoError);
  }
  SECTION("missing config is an I/O error") {
    std::filesystem::remove(paths.config);
    REQUIRE_THROWS_AS(evaluate_run(cfg.output_dir, false), IoError);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("evaluation consumes the class embedding checkpoint") {
  std::filesystem::path dir = fresh_dir("eval_embeddings");
  ExperimentConfig cfg = small_config(dir / "run");
  cfg.rounds = 0;
  run_experiment(cfg);
  RunPaths paths = run_paths(cfg.output_dir);

  // Collapse every class embedding onto class 0's: all text features tie
  // exactly, every prediction falls to class 0, and each client's accuracy
  // becomes its test-set fraction of label 0. That fraction is computable
  // from the partition alone, independent of any learned state.
  PromptBlob cls =
      load_prompt_matrix(paths.checkpoints / "class_embeddings.fpk");
  for (Eigen::Index k = 1; k < cls.values.rows(); ++k) {
    cls.values.row(k) = cls.values.row(0);
  }
  save_prompt_matrix(paths.checkpoints / "class_embeddings.fpk", cls.values,
                     PromptRole::ClassEmbeddings, 4);

  ExperimentConfig resolved = cfg;
  resolved.resolve_preset();
  Environment env = build_environment(resolved);
  EvalResult ev = evaluate_run(cfg.output_dir, false);
  for (std::size_t i = 0; i < ev.per_client.size(); ++i) {
    const auto& test = env.partition.test_indices[i];
    int zeros = 0;
    for (int idx : test) {
      if (env.data.label_of(idx) == 0) ++zeros;
    }
    double expected =
        static_cast<double>(zeros) / static_cast<double>(test.size());
    REQUIRE(ev.per_client[i] == expected);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("random checkpoints evaluate at chance level") {
  std::filesystem::path dir = fresh_dir("eval_chance");
  ExperimentConfig cfg;  // default 8-class synthetic task
  cfg.clients = 3;
  cfg.rounds = 1;
  cfg.data.per_class = 20;
  cfg.master_seed = 11;
  cfg.output_dir = (dir / "run").string();
  run_experiment(cfg);
  RunPaths paths = run_paths(cfg.output_dir);

  // Replace every stored tensor with fresh random draws: the evaluation
  // must collapse to chance, since no tensor carries label information
  // any more. Individual draws scatter widely (a random class-to-embedding
  // matching has lumpy fixed-point counts), so the check is on the mean
  // over five fixed draws; the seeds are frozen, so the value is exact.
  const int k = cfg.data.classes;
  const int hs = cfg.prompt.h_shared, hp = cfg.prompt.h_private;
  const int e = cfg.prompt.embed_dim;
  double sum = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    save_prompt_matrix(
        paths.checkpoints / "global_shared.fpk",
        gaussian_matrix(hs, e, 0.02, derive_seed(seed, "rand.shared")),
        PromptRole::Shared, static_cast<std::uint32_t>(k));
    save_prompt_matrix(
        paths.checkpoints / "class_embeddings.fpk",
        random_unit_rows(k, e, derive_seed(seed, "rand.embed")),
        PromptRole::ClassEmbeddings, static_cast<std::uint32_t>(k));
    for (int c = 0; c < cfg.clients; ++c) {
      save_prompt_matrix(
          paths.checkpoints / client_checkpoint_name(c),
          gaussian_matrix(hp, e, 0.02, derive_seed(seed, "rand.private",
                                                   static_cast<std::uint64_t>(c))),
          PromptRole::Private, static_cast<std::uint32_t>(k));
    }
    sum += evaluate_run(cfg.output_dir, false).mean;
  }
  double mean = sum / 5.0;
  REQUIRE(mean >= 0.125 - 0.10);
  REQUIRE(mean <= 0.125 + 0.10);
  std::filesystem::remove_all(dir);
}

TEST_CASE("command line partition reports counts and writes csv files") {
  std::filesystem::path dir = fresh_dir("cli_partition");
  int code = run_tool("partition --preset synthetic --clients 3 --seed 9 --out " +
                      (dir / "part").string());
  REQUIRE(code == 0);

  std::string counts = read_file(dir / "part" / "counts.csv");
  std::istringstream is(counts);
  std::string line;
  REQUIRE(std::getline(is, line));
  REQUIRE(line == "client,train_count,test_count");
  int train_sum = 0, test_sum = 0, rows = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    REQUIRE(std::getline(row, cell, ','));
    REQUIRE(std::getline(row, cell, ','));
    train_sum += std::stoi(cell);
    REQUIRE(std::getline(row, cell, ','));
    test_sum += std::stoi(cell);
    ++rows;
  }
  REQUIRE(rows == 3);
  REQUIRE(train_sum == 160);  // 8 classes * 40 images * 0.5
  REQUIRE(test_sum == 160);

  std::string indices = read_file(dir / "part" / "indices.csv");
  REQUIRE(indices.rfind("client,split,sample_index\n", 0) == 0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("command line exit codes distinguish failure classes") {
  std::filesystem::path dir = fresh_dir("cli_exit");
  REQUIRE(run_tool("train --config " + (dir / "missing.json").string()) == 4);

  write_file(dir / "bad.json", R"({"lr": -1.0})");
  REQUIRE(run_tool("train --config " + (dir / "bad.json").string()) == 2);

  write_file(dir / "broken.json", "{\"clients\": zz}");
  REQUIRE(run_tool("train --config " + (dir / "broken.json").string()) == 2);

  REQUIRE(run_tool("partition --preset nosuch --clients 3") == 2);
  REQUIRE(run_tool("bogus-subcommand") == 2);
  REQUIRE(run_tool("evaluate --run " + (dir / "nope").string()) == 4);
  std::filesystem::remove_all(dir);
}

TEST_CASE("command line gradcheck passes on its default problem") {
  REQUIRE(run_tool("gradcheck --seed 7") == 0);
}

TEST_CASE("command line transport solver round-trips a problem file") {
  std::filesystem::path dir = fresh_dir("cli_ot");
  nlohmann::json problem;
  problem["cost"] = {{0.0, 1.0}, {1.0, 0.0}, {0.5, 0.5}};
  problem["lambda"] = 0.05;
  problem["max_iters"] = 5000;
  problem["tol"] = 1e-12;
  write_file(dir / "problem.json", problem.dump(2));

  int code = run_tool("ot-solve --in " + (dir / "problem.json").string() +
                      " --out " + (dir / "plan.json").string());
  REQUIRE(code == 0);

  nlohmann::json out = nlohmann::json::parse(read_file(dir / "plan.json"));
  REQUIRE(out.at("converged").get<bool>());
  REQUIRE(out.at("iterations").get<int>() >= 1);
  auto plan = out.at("plan");
  REQUIRE(plan.size() == 3);
  double col0 = 0.0, col1 = 0.0;
  for (const auto& row : plan) {
    REQUIRE(row.size() == 2);
    double a = row[0].get<double>(), b = row[1].get<double>();
    REQUIRE(a >= 0.0);
    REQUIRE(b >= 0.0);
    REQUIRE(a + b <= 2.0 / 3.0 + 1e-9);  // default row capacity
    col0 += a;
    col1 += b;
  }
  REQUIRE(std::abs(col0 - 0.5) <= 1e-8);
  REQUIRE(std::abs(col1 - 0.5) <= 1e-8);

  // The reported distance matches an in-process solve of the same problem.
  TransportProblem prob;
  prob.cost.resize(3, 2);
  prob.cost << 0.0, 1.0, 1.0, 0.0, 0.5, 0.5;
  prob.alpha = Eigen::VectorXd::Constant(3, 2.0 / 3.0);
  prob.lambda = 0.05;
  prob.max_iters = 5000;
  prob.tol = 1e-12;
  TransportPlan local = solve_transport(prob);
  REQUIRE(std::abs(out.at("distance").get<double>() -
                   transport_distance(prob, local)) <= 1e-12);
  std::filesystem::remove_all(dir);
}

TEST_CASE("command line train and evaluate complete a full cycle") {
  std::filesystem::path dir = fresh_dir("cli_train");
  ExperimentConfig cfg = small_config(dir / "ignored");
  cfg.rounds = 1;
  cfg.clients = 2;
  nlohmann::json j = cfg.to_json();
  j.erase("output_dir");
  write_file(dir / "config.json", j.dump(2));

  int code = run_tool("train --config " + (dir / "config.json").string() +
                      " --seed 99 --out " + (dir / "run").string());
  REQUIRE(code == 0);

  nlohmann::json manifest =
      nlohmann::json::parse(read_file(dir / "run" / "manifest.json"));
  REQUIRE(manifest.at("master_seed").get<std::uint64_t>() == 99);

  std::string history = read_file(dir / "run" / "history.csv");
  REQUIRE(history.rfind(std::string(history_csv_header()) + "\n", 0) == 0);
  REQUIRE(std::count(history.begin(), history.end(), '\n') == 3);  // header + 2

  REQUIRE(run_tool("evaluate --run " + (dir / "run").string()) == 0);
  nlohmann::json metrics =
      nlohmann::json::parse(read_file(dir / "run" / "metrics.json"));
  REQUIRE(metrics.at("per_client").size() == 2);
  double mean = metrics.at("mean").get<double>();
  REQUIRE(mean >= 0.0);
  REQUIRE(mean <= 1.0);
  std::filesystem::remove_all(dir);
}
