#ifndef FEDPROMPT_FEDERATION_HPP
#define FEDPROMPT_FEDERATION_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "fedprompt/dataset.hpp"
#include "fedprompt/errors.hpp"
#include "fedprompt/objective.hpp"
#include "fedprompt/prompts.hpp"
#include "fedprompt/rng.hpp"

// Synchronous federated rounds with full participation. The message types
// carry shared prompts only: private prompts and class embeddings have no
// field to travel in, so the privacy boundary is structural, not a runtime
// check.

namespace fedprompt {

struct SharedPromptPayload {
  int source = -1;         // client id, or -1 for the global aggregate
  Eigen::MatrixXd values;  // h_s x e
};

struct RoundMessage {
  enum class Direction { Up, Down };
  Direction direction = Direction::Up;
  int client_id = -1;  // sender for Up, recipient for Down
  std::vector<SharedPromptPayload> payload;

  std::size_t value_count() const {
    std::size_t n = 0;
    for (const auto& p : payload) {
      n += static_cast<std::size_t>(p.values.size());
    }
    return n;
  }
  std::size_t byte_count() const { return value_count() * sizeof(double); }
};

struct ClientState {
  int id = 0;
  PromptSet prompts;
  std::vector<int> train_indices;
  std::vector<int> test_indices;
  double learning_rate = 0.001;
  std::uint64_t seed = 0;
  std::uint64_t epochs_trained = 0;  // feeds the per-epoch shuffle seed
};

struct ServerState {
  Eigen::MatrixXd global_shared;  // h_s x e
  Eigen::VectorXd client_weights;  // sums to 1
  std::vector<Eigen::MatrixXd> shared_snapshots;  // latest uplink per client
  int round = 0;
  std::uint64_t bytes_up = 0;
  std::uint64_t bytes_down = 0;
  // Aggregation rule: global = sum_i w_i s_i, or the same sum divided by
  // the client count when literal_mean_aggregation is set.
  bool literal_mean_aggregation = false;

  std::uint64_t bytes_transmitted() const { return bytes_up + bytes_down; }
};

// Server construction: weights proportional to client training set sizes,
// snapshots seeded with the initial global prompt so round 0 alignment
// references are well defined.
inline ServerState make_server(const std::vector<ClientState>& clients,
                               Eigen::MatrixXd global_shared) {
  if (clients.empty()) throw ConfigError("make_server: no clients");
  ServerState server;
  server.global_shared = std::move(global_shared);
  server.client_weights.resize(static_cast<Eigen::Index>(clients.size()));
  double total = 0.0;
  for (std::size_t i = 0; i < clients.size(); ++i) {
    auto m = static_cast<double>(clients[i].train_indices.size());
    if (m <= 0.0) {
      throw ConfigError("make_server: client " + std::to_string(clients[i].id) +
                        " has an empty training set");
    }
    server.client_weights(static_cast<Eigen::Index>(i)) = m;
    total += m;
  }
  server.client_weights /= total;
  server.shared_snapshots.assign(clients.size(), server.global_shared);
  return server;
}

// Everything shared by every client's local step in a round.
struct TrainContext {
  const ImageEncoder* image_encoder = nullptr;
  const TextEncoder* text_encoder = nullptr;
  const SyntheticDataset* data = nullptr;
  PredictionConfig prediction;
  OtParams ot;
  AlignmentConfig align;
  bool dual_prompt = true;
  int batch_size = 32;

  void validate() const {
    if (image_encoder == nullptr || text_encoder == nullptr ||
        data == nullptr) {
      throw ConfigError("train context: encoders or dataset not set");
    }
    prediction.validate();
    ot.validate();
    align.validate();
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  }
};

inline ObjectiveContext make_objective_context(
    const TrainContext& tc, const Eigen::MatrixXd& reference_shared,
    std::vector<Eigen::MatrixXd> other_shared) {
  ObjectiveContext ctx;
  ctx.image_encoder = tc.image_encoder;
  ctx.text_encoder = tc.text_encoder;
  ctx.prediction = tc.prediction;
  ctx.ot = tc.ot;
  ctx.align = tc.align;
  ctx.dual_prompt = tc.dual_prompt;
  ctx.dpac_reference_shared = reference_shared;
  ctx.dpac_other_shared = std::move(other_shared);
  return ctx;
}

// Fisher-Yates with an explicit index draw, so the visitation order is
// fully determined by the seed and not by library internals.
inline std::vector<int> shuffled(const std::vector<int>& indices,
                                 std::uint64_t seed) {
  std::vector<int> out = indices;
  std::mt19937_64 rng(seed);
  for (std::size_t i = out.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(out[i - 1], out[j]);
  }
  return out;
}

struct LocalTrainResult {
  RoundMessage message;  // uplink carrying the trained shared prompt
  double mean_ce = 0.0;
  double mean_dpac = 0.0;
  bool ce_clamped = false;
  bool ot_unconverged = false;
};

// One client's local step: adopt the broadcast shared prompt, run the given
// number of epochs of minibatch SGD on both prompt blocks, and emit the
// uplink message. snapshots holds every client's latest shared prompt in id
// order; the client's own entry is excluded from its alignment negatives.
inline LocalTrainResult local_train(
    ClientState& client, const Eigen::MatrixXd& global_shared,
    const std::vector<Eigen::MatrixXd>& snapshots, int epochs,
    const TrainContext& tc) {
  tc.validate();
  if (epochs < 0) throw ConfigError("local_train: epochs must be >= 0");
  if (client.train_indices.empty()) {
    throw ConfigError("local_train: client " + std::to_string(client.id) +
                      " has an empty training set");
  }
  if (global_shared.rows() != client.prompts.shared.rows() ||
      global_shared.cols() != client.prompts.shared.cols()) {
    throw ProtocolError("local_train: broadcast shared prompt shape mismatch");
  }
  client.prompts.shared = global_shared;

  std::vector<Eigen::MatrixXd> others;
  others.reserve(snapshots.size() > 0 ? snapshots.size() - 1 : 0);
  for (std::size_t j = 0; j < snapshots.size(); ++j) {
    if (static_cast<int>(j) != client.id) others.push_back(snapshots[j]);
  }
  ObjectiveContext ctx =
      make_objective_context(tc, global_shared, std::move(others));

  LocalTrainResult result;
  double ce_sum = 0.0, dpac_sum = 0.0;
  int batches = 0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::vector<int> order = shuffled(
        client.train_indices,
        derive_seed(client.seed, "epoch.shuffle", client.epochs_trained));
    ++client.epochs_trained;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(tc.batch_size)) {
      std::size_t stop = std::min(
          order.size(), start + static_cast<std::size_t>(tc.batch_size));
      Eigen::MatrixXd raw(static_cast<Eigen::Index>(stop - start),
                          tc.data->samples.cols());
      std::vector<int> labels(stop - start);
      for (std::size_t b = start; b < stop; ++b) {
        raw.row(static_cast<Eigen::Index>(b - start)) =
            tc.data->samples.row(order[b]);
        labels[b - start] = tc.data->label_of(order[b]);
      }
      LossReport report =
          total_loss_and_grad(ctx, client.prompts, raw, labels);
      sgd_step(client.prompts.shared, report.grad_shared,
               client.learning_rate);
      if (tc.dual_prompt) {
        sgd_step(client.prompts.private_prompt, report.grad_private,
                 client.learning_rate);
      }
      ce_sum += report.ce;
      dpac_sum += report.dpac;
      result.ce_clamped = result.ce_clamped || report.ce_clamped;
      result.ot_unconverged = result.ot_unconverged || report.ot_unconverged;
      ++batches;
    }
  }
  if (batches > 0) {
    result.mean_ce = ce_sum / batches;
    result.mean_dpac = dpac_sum / batches;
  }

  result.message.direction = RoundMessage::Direction::Up;
  result.message.client_id = client.id;
  result.message.payload.push_back({client.id, client.prompts.shared});
  return result;
}

// Weighted aggregation of the uplinked shared prompts, in ascending client
// id order so the floating point reduction is reproducible. Requires
// exactly one message per client.
inline void aggregate(ServerState& server,
                      const std::vector<RoundMessage>& messages) {
  const auto n = static_cast<std::size_t>(server.client_weights.size());
  if (messages.size() != n) {
    throw ProtocolError("aggregate: expected " + std::to_string(n) +
                        " uplink messages, got " +
                        std::to_string(messages.size()));
  }
  if (std::abs(server.client_weights.sum() - 1.0) > 1e-12) {
    throw ProtocolError("aggregate: client weights do not sum to 1");
  }
  std::vector<const Eigen::MatrixXd*> by_client(n, nullptr);
  for (const auto& msg : messages) {
    if (msg.direction != RoundMessage::Direction::Up ||
        msg.payload.size() != 1 || msg.payload[0].source != msg.client_id) {
      throw ProtocolError("aggregate: malformed uplink message");
    }
    if (msg.client_id < 0 || static_cast<std::size_t>(msg.client_id) >= n) {
      throw ProtocolError("aggregate: unknown client id " +
                          std::to_string(msg.client_id));
    }
    if (by_client[static_cast<std::size_t>(msg.client_id)] != nullptr) {
      throw ProtocolError("aggregate: duplicate uplink from client " +
                          std::to_string(msg.client_id));
    }
    const Eigen::MatrixXd& values = msg.payload[0].values;
    if (values.rows() != server.global_shared.rows() ||
        values.cols() != server.global_shared.cols()) {
      throw ProtocolError("aggregate: shared prompt shape mismatch from client " +
                          std::to_string(msg.client_id));
    }
    by_client[static_cast<std::size_t>(msg.client_id)] = &values;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (by_client[i] == nullptr) {
      throw ProtocolError("aggregate: missing uplink from client " +
                          std::to_string(i));
    }
  }

  Eigen::MatrixXd global = Eigen::MatrixXd::Zero(server.global_shared.rows(),
                                                 server.global_shared.cols());
  for (std::size_t i = 0; i < n; ++i) {
    global += server.client_weights(static_cast<Eigen::Index>(i)) *
              (*by_client[i]);
    server.shared_snapshots[i] = *by_client[i];
    server.bytes_up += by_client[i]->size() * sizeof(double);
  }
  if (server.literal_mean_aggregation) {
    global /= static_cast<double>(n);
  }
  server.global_shared = global;
  ++server.round;
}

// Downlink: every client receives the new global shared prompt plus all
// clients' latest shared snapshots (the alignment negatives). Also applies
// the broadcast, so afterwards every client's shared prompt equals the
// global one.
inline std::vector<RoundMessage> broadcast(ServerState& server,
                                           std::vector<ClientState>& clients) {
  std::vector<RoundMessage> messages;
  messages.reserve(clients.size());
  for (auto& client : clients) {
    RoundMessage msg;
    msg.direction = RoundMessage::Direction::Down;
    msg.client_id = client.id;
    msg.payload.push_back({-1, server.global_shared});
    for (std::size_t j = 0; j < server.shared_snapshots.size(); ++j) {
      msg.payload.push_back(
          {static_cast<int>(j), server.shared_snapshots[j]});
    }
    server.bytes_down += msg.byte_count();
    client.prompts.shared = server.global_shared;
    messages.push_back(std::move(msg));
  }
  return messages;
}

struct RoundRecord {
  int round = 0;  // 1-based, the value of server.round after aggregation
  int client_id = 0;
  double accuracy = 0.0;  // client's test accuracy after the broadcast
  double ce = 0.0;        // mean training cross entropy this round
  double dpac = 0.0;      // mean unweighted alignment term this round
  std::uint64_t bytes_up = 0;    // this client's uplink bytes this round
  std::uint64_t bytes_down = 0;  // this client's downlink bytes this round
};

using History = std::vector<RoundRecord>;

// The full synchronous loop: local training on every client, aggregation,
// broadcast, then per-client test evaluation. Returns one record per
// (round, client).
inline History run_rounds(std::vector<ClientState>& clients,
                          ServerState& server, int rounds,
                          int epochs_per_round, const TrainContext& tc) {
  tc.validate();
  if (rounds < 0) throw ConfigError("run_rounds: rounds must be >= 0");
  if (clients.empty()) throw ConfigError("run_rounds: no clients");
  History history;
  history.reserve(static_cast<std::size_t>(rounds) * clients.size());

  for (int r = 0; r < rounds; ++r) {
    std::vector<RoundMessage> ups;
    ups.reserve(clients.size());
    std::vector<double> ces(clients.size(), 0.0);
    std::vector<double> dpacs(clients.size(), 0.0);
    const std::vector<Eigen::MatrixXd> snapshots = server.shared_snapshots;
    for (auto& client : clients) {
      LocalTrainResult res = local_train(client, server.global_shared,
                                         snapshots, epochs_per_round, tc);
      ces[static_cast<std::size_t>(client.id)] = res.mean_ce;
      dpacs[static_cast<std::size_t>(client.id)] = res.mean_dpac;
      ups.push_back(std::move(res.message));
    }
    std::uint64_t up_before = server.bytes_up;
    aggregate(server, ups);
    std::uint64_t up_per_client =
        (server.bytes_up - up_before) / clients.size();
    std::uint64_t down_before = server.bytes_down;
    broadcast(server, clients);
    std::uint64_t down_per_client =
        (server.bytes_down - down_before) / clients.size();

    for (auto& client : clients) {
      ObjectiveContext ctx = make_objective_context(tc, server.global_shared, {});
      double acc = client.test_indices.empty()
                       ? 0.0
                       : evaluate_accuracy(ctx, client.prompts,
                                           tc.data->samples, tc.data->labels,
                                           client.test_indices);
      RoundRecord rec;
      rec.round = server.round;
      rec.client_id = client.id;
      rec.accuracy = acc;
      rec.ce = ces[static_cast<std::size_t>(client.id)];
      rec.dpac = dpacs[static_cast<std::size_t>(client.id)];
      rec.bytes_up = up_per_client;
      rec.bytes_down = down_per_client;
      history.push_back(rec);
    }
  }
  return history;
}

}  // namespace fedprompt

#endif  // FEDPROMPT_FEDERATION_HPP
