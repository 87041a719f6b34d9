#ifndef FEDPROMPT_EXPERIMENT_HPP
#define FEDPROMPT_EXPERIMENT_HPP

#include <Eigen/Dense>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <string>
#include <system_error>
#include <vector>

#include "fedprompt/config.hpp"
#include "fedprompt/dataset.hpp"
#include "fedprompt/federation.hpp"
#include "fedprompt/prompts.hpp"

// End-to-end experiment orchestration: build the deterministic environment
// from a config, run federated rounds, and persist history, checkpoints and
// a manifest sufficient to reproduce the run bitwise. evaluate_run rebuilds
// the same environment and scores saved checkpoints with the exact code
// path the training loop used.

namespace fedprompt {

// Shortest round-trip decimal form of a double, so CSV values reload to the
// identical bit pattern.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  if (res.ec != std::errc()) throw NumericalError("double formatting failed");
  return std::string(buf, res.ptr);
}

struct RunPaths {
  std::filesystem::path dir;
  std::filesystem::path config;
  std::filesystem::path manifest;
  std::filesystem::path history;
  std::filesystem::path checkpoints;
  std::filesystem::path metrics;
};

inline RunPaths run_paths(const std::filesystem::path& dir) {
  RunPaths p;
  p.dir = dir;
  p.config = dir / "config.json";
  p.manifest = dir / "manifest.json";
  p.history = dir / "history.csv";
  p.checkpoints = dir / "checkpoints";
  p.metrics = dir / "metrics.json";
  return p;
}

// The frozen, seed-derived pieces every run and evaluation reconstructs:
// dataset, partition, encoder pair, and the initial prompt state with class
// embeddings bound to the dataset prototypes.
struct Environment {
  SyntheticDataset data;
  Partition partition;
  ImageEncoder image_encoder;
  TextEncoder text_encoder;
  PromptSet initial_prompts;  // shared = initial global, embeddings bound
};

// Class embeddings are the dataset prototypes shifted by one common seeded
// direction (scaled by data.text_offset) and renormalized. The shift is the
// same for every class, so it models a uniform text-image misalignment that
// prompt training can cancel; offset 0 starts the text tower fully aligned.
inline Eigen::MatrixXd derive_class_embeddings(const ExperimentConfig& cfg,
                                               const SyntheticDataset& data) {
  Eigen::MatrixXd emb = data.prototypes;
  if (cfg.data.text_offset != 0.0) {
    Eigen::VectorXd dir =
        random_unit_rows(1, cfg.prompt.embed_dim,
                         derive_seed(cfg.master_seed, "class.offset"))
            .row(0)
            .transpose();
    for (Eigen::Index k = 0; k < emb.rows(); ++k) {
      emb.row(k) += cfg.data.text_offset * dir.transpose();
    }
  }
  for (Eigen::Index k = 0; k < emb.rows(); ++k) {
    double n = emb.row(k).norm();
    if (n < 1e-300) {
      throw NumericalError("class embedding " + std::to_string(k) +
                           " vanished after offset");
    }
    emb.row(k) /= n;
  }
  return emb;
}

inline Environment build_environment(const ExperimentConfig& cfg) {
  cfg.validate();
  SyntheticDataset data =
      generate_synthetic(cfg.data.classes, cfg.data.per_class,
                         cfg.prompt.embed_dim, cfg.data.noise_sigma,
                         cfg.master_seed);
  PartitionSpec pspec;
  pspec.n_classes = cfg.data.classes;
  pspec.images_per_class = cfg.data.per_class;
  pspec.train_fraction = cfg.data.train_fraction;
  pspec.n_clients = cfg.clients;
  pspec.seed = cfg.master_seed;
  Partition part = partition_dataset(pspec);

  EncoderConfig ecfg;
  ecfg.feature_dim = cfg.encoder.feature_dim;
  ecfg.patch_count = cfg.encoder.patch_count;
  ecfg.embed_dim = cfg.prompt.embed_dim;
  ecfg.seed = derive_seed(cfg.master_seed, "encoders");
  auto [image_enc, text_enc] = build_encoders(ecfg);

  PromptSet initial =
      init_prompts(cfg.prompt.h_shared, cfg.prompt.h_private,
                   cfg.prompt.embed_dim, cfg.data.classes,
                   derive_seed(cfg.master_seed, "prompts.global"));
  bind_class_embeddings(initial, derive_class_embeddings(cfg, data));

  return Environment{std::move(data), std::move(part), std::move(image_enc),
                     std::move(text_enc), std::move(initial)};
}

inline TrainContext make_train_context(const ExperimentConfig& cfg,
                                       const Environment& env) {
  TrainContext tc;
  tc.image_encoder = &env.image_encoder;
  tc.text_encoder = &env.text_encoder;
  tc.data = &env.data;
  tc.prediction.temperature = cfg.temperature;
  tc.ot = cfg.ot;
  tc.align.scale = cfg.dpac_scale;
  tc.align.dpac_weight = cfg.dpac_weight;
  tc.align.dpac_enabled = cfg.ablation.dpac;
  tc.align.cmfac_enabled = cfg.ablation.cmfac;
  tc.dual_prompt = cfg.ablation.dual_prompt;
  tc.batch_size = cfg.batch_size;
  return tc;
}

inline std::vector<ClientState> make_clients(const ExperimentConfig& cfg,
                                             const Environment& env) {
  std::vector<ClientState> clients;
  clients.reserve(static_cast<std::size_t>(cfg.clients));
  for (int i = 0; i < cfg.clients; ++i) {
    ClientState c;
    c.id = i;
    c.prompts = env.initial_prompts;
    c.prompts.private_prompt = gaussian_matrix(
        cfg.prompt.h_private, cfg.prompt.embed_dim, 0.02,
        derive_seed(cfg.master_seed, "prompts.client",
                    static_cast<std::uint64_t>(i)));
    c.train_indices = env.partition.train_indices[static_cast<std::size_t>(i)];
    c.test_indices = env.partition.test_indices[static_cast<std::size_t>(i)];
    c.learning_rate = cfg.lr;
    c.seed = derive_seed(cfg.master_seed, "client.train",
                         static_cast<std::uint64_t>(i));
    clients.push_back(std::move(c));
  }
  return clients;
}

inline const char* history_csv_header() {
  return "round,client_id,accuracy,ce,dpac,bytes_up,bytes_down";
}

inline void write_history_csv(const std::filesystem::path& path,
                              const History& history) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open history file: " + path.string());
  os << history_csv_header() << "\n";
  for (const auto& r : history) {
    os << r.round << ',' << r.client_id << ',' << format_double(r.accuracy)
       << ',' << format_double(r.ce) << ',' << format_double(r.dpac) << ','
       << r.bytes_up << ',' << r.bytes_down << "\n";
  }
  if (!os) throw IoError("write failed: " + path.string());
}

inline void write_manifest(const std::filesystem::path& path,
                           const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["config"] = cfg.to_json();
  j["config_hash"] = config_hash(cfg);
  j["master_seed"] = cfg.master_seed;
  std::ofstream os(path);
  if (!os) throw IoError("cannot open manifest file: " + path.string());
  os << j.dump(2) << "\n";
  if (!os) throw IoError("write failed: " + path.string());
}

inline std::string client_checkpoint_name(int client_id) {
  std::string n = std::to_string(client_id);
  while (n.size() < 3) n.insert(n.begin(), '0');
  return "client_" + n + "_private.fpk";
}

struct RunResult {
  std::filesystem::path run_dir;
  History history;
  std::vector<double> final_accuracy;  // per client, last round
  double final_mean_accuracy = 0.0;
  std::uint64_t bytes_up = 0;
  std::uint64_t bytes_down = 0;
};

// Runs the configured experiment and persists everything under
// cfg.output_dir. write_outputs = false keeps the run purely in memory
// (used by sweeps and tests that only need the history).
inline RunResult run_experiment(const ExperimentConfig& cfg,
                                bool write_outputs = true) {
  ExperimentConfig resolved = cfg;
  resolved.resolve_preset();
  resolved.validate();
  Environment env = build_environment(resolved);
  TrainContext tc = make_train_context(resolved, env);
  std::vector<ClientState> clients = make_clients(resolved, env);
  ServerState server = make_server(clients, env.initial_prompts.shared);
  server.literal_mean_aggregation = resolved.aggregate_literal_mean;

  RunResult result;
  result.history =
      run_rounds(clients, server, resolved.rounds, resolved.local_epochs, tc);
  result.bytes_up = server.bytes_up;
  result.bytes_down = server.bytes_down;

  result.final_accuracy.assign(static_cast<std::size_t>(resolved.clients), 0.0);
  if (!result.history.empty()) {
    double sum = 0.0;
    std::size_t n = clients.size();
    for (std::size_t i = result.history.size() - n; i < result.history.size();
         ++i) {
      const auto& rec = result.history[i];
      result.final_accuracy[static_cast<std::size_t>(rec.client_id)] =
          rec.accuracy;
      sum += rec.accuracy;
    }
    result.final_mean_accuracy = sum / static_cast<double>(n);
  }

  if (write_outputs) {
    RunPaths paths = run_paths(resolved.output_dir);
    std::error_code ec;
    std::filesystem::create_directories(paths.checkpoints, ec);
    if (ec) {
      throw IoError("cannot create run directory " + paths.dir.string() +
                    ": " + ec.message());
    }
    {
      std::ofstream os(paths.config);
      if (!os) throw IoError("cannot write " + paths.config.string());
      os << resolved.to_json().dump(2) << "\n";
    }
    write_manifest(paths.manifest, resolved);
    write_history_csv(paths.history, result.history);
    const auto k = static_cast<std::uint32_t>(resolved.data.classes);
    save_prompt_matrix(paths.checkpoints / "global_shared.fpk",
                       server.global_shared, PromptRole::Shared, k);
    save_prompt_matrix(paths.checkpoints / "class_embeddings.fpk",
                       clients.front().prompts.class_embeddings,
                       PromptRole::ClassEmbeddings, k);
    for (const auto& c : clients) {
      save_prompt_matrix(paths.checkpoints / client_checkpoint_name(c.id),
                         c.prompts.private_prompt, PromptRole::Private, k);
    }
    result.run_dir = paths.dir;
  }
  return result;
}

struct EvalResult {
  std::vector<double> per_client;
  double mean = 0.0;
  std::string prediction_path;
};

// Loads a run directory's config and checkpoints, rebuilds the environment
// and scores every client on its test split. Checkpoint shape mismatches
// name the offending tensor.
inline EvalResult evaluate_run(const std::filesystem::path& run_dir,
                               bool write_metrics = true) {
  RunPaths paths = run_paths(run_dir);
  if (!std::filesystem::exists(paths.config)) {
    throw IoError("no config.json in run directory: " + run_dir.string());
  }
  ExperimentConfig cfg = load_config_file(paths.config.string());
  Environment env = build_environment(cfg);
  TrainContext tc = make_train_context(cfg, env);

  auto expect_shape = [](const PromptBlob& blob, Eigen::Index rows,
                         Eigen::Index cols, PromptRole role,
                         const std::string& name) {
    if (blob.values.rows() != rows || blob.values.cols() != cols) {
      throw ConfigError("checkpoint " + name + " has shape " +
                        std::to_string(blob.values.rows()) + "x" +
                        std::to_string(blob.values.cols()) + ", expected " +
                        std::to_string(rows) + "x" + std::to_string(cols));
    }
    if (blob.role != role) {
      throw ConfigError("checkpoint " + name + " has the wrong role tag");
    }
  };

  PromptBlob global = load_prompt_matrix(paths.checkpoints / "global_shared.fpk");
  expect_shape(global, cfg.prompt.h_shared, cfg.prompt.embed_dim,
               PromptRole::Shared, "global shared prompt");
  PromptBlob cls =
      load_prompt_matrix(paths.checkpoints / "class_embeddings.fpk");
  expect_shape(cls, cfg.data.classes, cfg.prompt.embed_dim,
               PromptRole::ClassEmbeddings, "class embeddings");

  EvalResult result;
  result.prediction_path = cfg.ablation.cmfac ? "transport" : "softmax";
  result.per_client.reserve(static_cast<std::size_t>(cfg.clients));
  double sum = 0.0;
  for (int i = 0; i < cfg.clients; ++i) {
    PromptBlob priv =
        load_prompt_matrix(paths.checkpoints / client_checkpoint_name(i));
    expect_shape(priv, cfg.prompt.h_private, cfg.prompt.embed_dim,
                 PromptRole::Private,
                 "client " + std::to_string(i) + " private prompt");
    PromptSet ps;
    ps.shared = global.values;
    ps.private_prompt = priv.values;
    ps.class_embeddings = cls.values;
    ObjectiveContext ctx = make_objective_context(tc, ps.shared, {});
    const auto& test =
        env.partition.test_indices[static_cast<std::size_t>(i)];
    double acc = test.empty()
                     ? 0.0
                     : evaluate_accuracy(ctx, ps, env.data.samples,
                                         env.data.labels, test);
    result.per_client.push_back(acc);
    sum += acc;
  }
  result.mean = sum / static_cast<double>(cfg.clients);

  if (write_metrics) {
    nlohmann::json j;
    j["per_client"] = result.per_client;
    j["mean"] = result.mean;
    j["prediction_path"] = result.prediction_path;
    std::ofstream os(paths.metrics);
    if (!os) throw IoError("cannot write " + paths.metrics.string());
    os << j.dump(2) << "\n";
  }
  return result;
}

}  // namespace fedprompt

#endif  // FEDPROMPT_EXPERIMENT_HPP
