#ifndef FEDPROMPT_PROMPTS_HPP
#define FEDPROMPT_PROMPTS_HPP

#include <Eigen/Dense>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>

#include "fedprompt/errors.hpp"
#include "fedprompt/rng.hpp"

namespace fedprompt {

// A client's learnable state plus its frozen class embeddings. Plain value:
// copying a PromptSet copies the parameters. The shared prompt is the only
// part that ever leaves the client; the private prompt and class embeddings
// stay local by construction (see federation.hpp message types).
struct PromptSet {
  Eigen::MatrixXd shared;            // h_s x e, trained and aggregated
  Eigen::MatrixXd private_prompt;    // h_p x e, trained, never transmitted
  Eigen::MatrixXd class_embeddings;  // K x e, unit rows, frozen after binding
};

inline void check_prompt_length(Eigen::Index h, const char* name) {
  if (h < 2 || h % 2 != 0) {
    throw ConfigError(std::string(name) +
                      " prompt length must be even and >= 2, got " +
                      std::to_string(h));
  }
}

// Fresh prompt state: small Gaussian prompts (stddev 0.02, the usual scale
// for learnable context vectors) and random unit class embeddings. The
// class embeddings are placeholders until bind_class_embeddings ties them
// to a dataset.
inline PromptSet init_prompts(int h_shared, int h_private, int embed_dim,
                              int n_classes, std::uint64_t seed) {
  check_prompt_length(h_shared, "shared");
  check_prompt_length(h_private, "private");
  if (embed_dim < 1) throw ConfigError("init_prompts: embed_dim must be >= 1");
  if (n_classes < 2) {
    throw ConfigError("init_prompts: need at least 2 classes, got " +
                      std::to_string(n_classes));
  }
  PromptSet ps;
  ps.shared = gaussian_matrix(h_shared, embed_dim, 0.02,
                              derive_seed(seed, "prompts.shared"));
  ps.private_prompt = gaussian_matrix(h_private, embed_dim, 0.02,
                                      derive_seed(seed, "prompts.private"));
  ps.class_embeddings = random_unit_rows(n_classes, embed_dim,
                                         derive_seed(seed, "prompts.class"));
  return ps;
}

// Replaces the placeholder class embeddings with dataset-derived ones.
// Rows must be unit vectors; after this call the embeddings are treated as
// frozen constants everywhere.
inline void bind_class_embeddings(PromptSet& ps,
                                  const Eigen::MatrixXd& embeddings) {
  if (embeddings.rows() != ps.class_embeddings.rows() ||
      embeddings.cols() != ps.class_embeddings.cols()) {
    throw ConfigError("bind_class_embeddings: shape mismatch");
  }
  if (!embeddings.allFinite()) {
    throw ConfigError("bind_class_embeddings: non-finite entries");
  }
  for (Eigen::Index k = 0; k < embeddings.rows(); ++k) {
    if (std::abs(embeddings.row(k).norm() - 1.0) > 1e-6) {
      throw ConfigError("bind_class_embeddings: row " + std::to_string(k) +
                        " is not unit norm");
    }
  }
  ps.class_embeddings = embeddings;
}

enum class PromptRole : std::uint32_t {
  Shared = 0,
  Private = 1,
  ClassEmbeddings = 2,
};

// The prompt sequence for class k: the prompt rows with the class token
// spliced into the middle. Returned as (prompt rows, class embedding); the
// encoder owns the splice so both stay in their native layout.
inline std::pair<Eigen::MatrixXd, Eigen::VectorXd> assemble_prompt(
    const PromptSet& ps, int class_index, PromptRole role) {
  if (class_index < 0 || class_index >= ps.class_embeddings.rows()) {
    throw ConfigError("assemble_prompt: class index " +
                      std::to_string(class_index) + " out of range [0, " +
                      std::to_string(ps.class_embeddings.rows()) + ")");
  }
  switch (role) {
    case PromptRole::Shared:
      return {ps.shared, ps.class_embeddings.row(class_index).transpose()};
    case PromptRole::Private:
      return {ps.private_prompt,
              ps.class_embeddings.row(class_index).transpose()};
    default:
      throw ConfigError("assemble_prompt: role must be Shared or Private");
  }
}

struct PredictionConfig {
  double temperature = 0.01;  // softmax temperature tau

  void validate() const {
    if (!(temperature > 0.0)) {
      throw ConfigError("temperature must be > 0");
    }
  }
};

// Numerically stable softmax over logits.
inline Eigen::VectorXd stable_softmax(const Eigen::VectorXd& logits) {
  double m = logits.maxCoeff();
  Eigen::VectorXd p = (logits.array() - m).exp();
  return p / p.sum();
}

// Class posterior from cosine similarity: p_k proportional to
// exp(cos(t_k, f) / tau). text_features rows are per-class unit text
// features, image_feature the pooled unit image feature.
inline Eigen::VectorXd predict_softmax_cosine(
    const Eigen::MatrixXd& text_features, const Eigen::VectorXd& image_feature,
    const PredictionConfig& cfg) {
  cfg.validate();
  if (text_features.cols() != image_feature.size()) {
    throw ConfigError("predict: text/image feature dimension mismatch");
  }
  if (text_features.rows() < 1) {
    throw ConfigError("predict: need at least one class");
  }
  if (!text_features.allFinite() || !image_feature.allFinite()) {
    throw ConfigError("predict: non-finite input");
  }
  Eigen::VectorXd logits = (text_features * image_feature) / cfg.temperature;
  return stable_softmax(logits);
}

// ---------------------------------------------------------------------------
// Checkpoint format: 4-byte magic "FPK1", then u32 rows, u32 cols, u32
// n_classes, u32 role tag, then rows*cols float64 values row-major. All
// integers and floats little endian.

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline void write_f64(std::ostream& os, double d) {
  auto v = std::bit_cast<std::uint64_t>(d);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline double read_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(v);
}

}  // namespace detail

struct PromptBlob {
  Eigen::MatrixXd values;
  PromptRole role = PromptRole::Shared;
  std::uint32_t n_classes = 0;
};

inline void save_prompt_matrix(const std::filesystem::path& path,
                               const Eigen::MatrixXd& values, PromptRole role,
                               std::uint32_t n_classes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw IoError("cannot open checkpoint for writing: " + path.string());
  }
  os.write("FPK1", 4);
  detail::write_u32(os, static_cast<std::uint32_t>(values.rows()));
  detail::write_u32(os, static_cast<std::uint32_t>(values.cols()));
  detail::write_u32(os, n_classes);
  detail::write_u32(os, static_cast<std::uint32_t>(role));
  for (Eigen::Index i = 0; i < values.rows(); ++i) {
    for (Eigen::Index j = 0; j < values.cols(); ++j) {
      detail::write_f64(os, values(i, j));
    }
  }
  if (!os) throw IoError("write failed: " + path.string());
}

inline PromptBlob load_prompt_matrix(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw IoError("cannot open checkpoint for reading: " + path.string());
  }
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "FPK1", 4) != 0) {
    throw IoError("not a prompt checkpoint (bad magic): " + path.string());
  }
  std::uint32_t rows = detail::read_u32(is);
  std::uint32_t cols = detail::read_u32(is);
  std::uint32_t n_classes = detail::read_u32(is);
  std::uint32_t role = detail::read_u32(is);
  if (!is || role > 2) {
    throw IoError("corrupt checkpoint header: " + path.string());
  }
  if (rows < 1 || cols < 1 || rows > (1u << 20) || cols > (1u << 20)) {
    throw IoError("checkpoint shape out of range: " + path.string());
  }
  PromptBlob blob;
  blob.role = static_cast<PromptRole>(role);
  blob.n_classes = n_classes;
  blob.values.resize(rows, cols);
  for (std::uint32_t i = 0; i < rows; ++i) {
    for (std::uint32_t j = 0; j < cols; ++j) {
      blob.values(i, j) = detail::read_f64(is);
    }
  }
  if (!is) throw IoError("checkpoint truncated: " + path.string());
  return blob;
}

}  // namespace fedprompt

#endif  // FEDPROMPT_PROMPTS_HPP
