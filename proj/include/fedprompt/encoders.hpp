#ifndef FEDPROMPT_ENCODERS_HPP
#define FEDPROMPT_ENCODERS_HPP

#include <Eigen/Dense>
#include <cstdint>
#include <utility>
#include <vector>

#include "fedprompt/errors.hpp"
#include "fedprompt/rng.hpp"

// Frozen toy dual encoder standing in for a pretrained vision-language
// backbone. Both towers are fixed linear maps drawn once from a seed; only
// prompt vectors fed to the text tower ever train. The text projection is
// the average of the image patch projections, so features of matching
// image/text inputs land near each other out of the box, the way a
// pretrained contrastive backbone behaves.

namespace fedprompt {

struct EncoderConfig {
  int feature_dim = 32;  // d, dimension of the shared feature space
  int patch_count = 16;  // V, patches per image
  int embed_dim = 32;    // e, raw input and prompt token dimension
  std::uint64_t seed = 0;

  void validate() const {
    if (feature_dim < 1) throw ConfigError("encoder: feature_dim must be >= 1");
    if (patch_count < 1) throw ConfigError("encoder: patch_count must be >= 1");
    if (embed_dim < 1) throw ConfigError("encoder: embed_dim must be >= 1");
  }
};

struct ImageEncoding {
  Eigen::MatrixXd patch_features;  // V x d, unit rows
  Eigen::VectorXd pooled_feature;  // d, unit norm
};

struct TextEncoding {
  Eigen::VectorXd feature;   // d, unit norm
  Eigen::MatrixXd jacobian;  // d x (h*e), d feature wrt flattened prompt
};

class ImageEncoder {
 public:
  explicit ImageEncoder(const EncoderConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    patch_maps_.reserve(static_cast<std::size_t>(cfg_.patch_count));
    for (int i = 0; i < cfg_.patch_count; ++i) {
      std::uint64_t s = derive_seed(cfg_.seed, "encoder.patch_map",
                                    static_cast<std::uint64_t>(i));
      patch_maps_.push_back(gaussian_matrix(cfg_.feature_dim, cfg_.embed_dim,
                                            1.0 / std::sqrt(cfg_.embed_dim),
                                            s));
    }
  }

  const EncoderConfig& config() const { return cfg_; }

  // Mean of the patch projections. The text tower is built from this so the
  // two towers share an aligned feature space.
  Eigen::MatrixXd mean_patch_map() const {
    Eigen::MatrixXd m =
        Eigen::MatrixXd::Zero(cfg_.feature_dim, cfg_.embed_dim);
    for (const auto& w : patch_maps_) m += w;
    return m / static_cast<double>(cfg_.patch_count);
  }

  ImageEncoding encode(const Eigen::VectorXd& raw) const {
    if (raw.size() != cfg_.embed_dim) {
      throw ConfigError("encode_image: input has dimension " +
                        std::to_string(raw.size()) + ", expected " +
                        std::to_string(cfg_.embed_dim));
    }
    if (!raw.allFinite()) {
      throw ConfigError("encode_image: input has non-finite entries");
    }
    ImageEncoding out;
    out.patch_features.resize(cfg_.patch_count, cfg_.feature_dim);
    Eigen::VectorXd pooled = Eigen::VectorXd::Zero(cfg_.feature_dim);
    for (int i = 0; i < cfg_.patch_count; ++i) {
      Eigen::VectorXd r = patch_maps_[static_cast<std::size_t>(i)] * raw;
      double n = r.norm();
      if (n < 1e-300) {
        throw NumericalError("encode_image: patch " + std::to_string(i) +
                             " projects to zero, cannot normalize");
      }
      out.patch_features.row(i) = r.transpose() / n;
      pooled += out.patch_features.row(i).transpose();
    }
    pooled /= static_cast<double>(cfg_.patch_count);
    double n = pooled.norm();
    if (n < 1e-300) {
      throw NumericalError("encode_image: pooled feature is zero");
    }
    out.pooled_feature = pooled / n;
    return out;
  }

 private:
  EncoderConfig cfg_;
  std::vector<Eigen::MatrixXd> patch_maps_;  // V matrices, each d x e
};

class TextEncoder {
 public:
  TextEncoder(const EncoderConfig& cfg, Eigen::MatrixXd projection)
      : cfg_(cfg), projection_(std::move(projection)) {
    cfg_.validate();
    if (projection_.rows() != cfg_.feature_dim ||
        projection_.cols() != cfg_.embed_dim) {
      throw ConfigError("text encoder: projection shape mismatch");
    }
  }

  const EncoderConfig& config() const { return cfg_; }
  const Eigen::MatrixXd& projection() const { return projection_; }

  // Token sequence is [first h/2 prompt rows, class embedding, last h/2
  // prompt rows], mean pooled, projected, then L2 normalized. The jacobian
  // covers the prompt rows only (the class embedding is frozen): h identical
  // d x e blocks, block j in columns [j*e, (j+1)*e).
  TextEncoding encode(const Eigen::MatrixXd& prompt,
                      const Eigen::VectorXd& class_embedding) const {
    const Eigen::Index h = prompt.rows();
    const Eigen::Index e = cfg_.embed_dim;
    if (h < 2 || h % 2 != 0) {
      throw ConfigError("encode_text: prompt length must be even and >= 2, got " +
                        std::to_string(h));
    }
    if (prompt.cols() != e) {
      throw ConfigError("encode_text: prompt has width " +
                        std::to_string(prompt.cols()) + ", expected " +
                        std::to_string(e));
    }
    if (class_embedding.size() != e) {
      throw ConfigError("encode_text: class embedding has dimension " +
                        std::to_string(class_embedding.size()) +
                        ", expected " + std::to_string(e));
    }
    if (!prompt.allFinite() || !class_embedding.allFinite()) {
      throw ConfigError("encode_text: non-finite input");
    }

    Eigen::VectorXd mean =
        (prompt.colwise().sum().transpose() + class_embedding) /
        static_cast<double>(h + 1);
    Eigen::VectorXd z = projection_ * mean;
    double n = z.norm();
    if (n < 1e-300) {
      throw NumericalError("encode_text: pre-normalization feature is zero");
    }

    TextEncoding out;
    out.feature = z / n;
    // d normalize(z) / d z = (I - f f^T) / |z|, chained through the
    // projection and the 1/(h+1) pooling weight; identical for every row.
    Eigen::MatrixXd block =
        (Eigen::MatrixXd::Identity(cfg_.feature_dim, cfg_.feature_dim) -
         out.feature * out.feature.transpose()) *
        projection_ / (n * static_cast<double>(h + 1));
    out.jacobian.resize(cfg_.feature_dim, h * e);
    for (Eigen::Index j = 0; j < h; ++j) {
      out.jacobian.middleCols(j * e, e) = block;
    }
    return out;
  }

 private:
  EncoderConfig cfg_;
  Eigen::MatrixXd projection_;  // d x e
};

// Builds the frozen pair from one config. Both towers derive from the same
// seed, so a config reproduces the backbone bitwise.
inline std::pair<ImageEncoder, TextEncoder> build_encoders(
    const EncoderConfig& cfg) {
  ImageEncoder image(cfg);
  TextEncoder text(cfg, image.mean_patch_map());
  return {std::move(image), std::move(text)};
}

}  // namespace fedprompt

#endif  // FEDPROMPT_ENCODERS_HPP
