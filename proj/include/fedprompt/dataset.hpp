#ifndef FEDPROMPT_DATASET_HPP
#define FEDPROMPT_DATASET_HPP

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "fedprompt/errors.hpp"
#include "fedprompt/rng.hpp"

// Class-balanced dataset partitioning and the synthetic embedding dataset.
// Sample index convention: sample i of class c has global index
// c * images_per_class + i, matching the synthetic dataset's row layout.

namespace fedprompt {

struct PartitionSpec {
  int n_classes = 8;
  int images_per_class = 40;
  double train_fraction = 0.5;
  int n_clients = 5;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_classes < 1) throw ConfigError("partition: n_classes must be >= 1");
    if (images_per_class < 1) {
      throw ConfigError("partition: images_per_class must be >= 1");
    }
    if (!(train_fraction > 0.0) || !(train_fraction < 1.0)) {
      throw ConfigError("partition: train_fraction must lie strictly in (0, 1)");
    }
    if (n_clients < 1) throw ConfigError("partition: n_clients must be >= 1");
  }
};

struct Partition {
  std::vector<std::vector<int>> train_indices;  // per client, ascending
  std::vector<std::vector<int>> test_indices;

  std::vector<int> train_counts() const {
    std::vector<int> c;
    c.reserve(train_indices.size());
    for (const auto& v : train_indices) c.push_back(static_cast<int>(v.size()));
    return c;
  }
  std::vector<int> test_counts() const {
    std::vector<int> c;
    c.reserve(test_indices.size());
    for (const auto& v : test_indices) c.push_back(static_cast<int>(v.size()));
    return c;
  }
};

// Each class splits train/test first (round(images_per_class *
// train_fraction) samples to train, in index order), then each side deals
// its indices round-robin across clients. The dealing cursor starts at a
// seeded offset and carries over from class to class, so each side is one
// continuous round-robin stream: per-client totals differ by at most one
// overall, and per class by at most one as well.
inline Partition partition_dataset(const PartitionSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(derive_seed(spec.seed, "partition"));
  Partition out;
  out.train_indices.resize(static_cast<std::size_t>(spec.n_clients));
  out.test_indices.resize(static_cast<std::size_t>(spec.n_clients));

  const auto n = static_cast<std::uint64_t>(spec.n_clients);
  int train_cursor = static_cast<int>(rng() % n);
  int test_cursor = static_cast<int>(rng() % n);
  for (int c = 0; c < spec.n_classes; ++c) {
    const int base = c * spec.images_per_class;
    const int n_train = static_cast<int>(
        std::llround(spec.images_per_class * spec.train_fraction));
    for (int i = 0; i < spec.images_per_class; ++i) {
      if (i < n_train) {
        out.train_indices[static_cast<std::size_t>(train_cursor)].push_back(
            base + i);
        train_cursor = (train_cursor + 1) % spec.n_clients;
      } else {
        out.test_indices[static_cast<std::size_t>(test_cursor)].push_back(
            base + i);
        test_cursor = (test_cursor + 1) % spec.n_clients;
      }
    }
  }
  return out;
}

struct SyntheticDataset {
  Eigen::MatrixXd samples;     // (n_classes * per_class) x dim
  std::vector<int> labels;     // parallel to rows
  Eigen::MatrixXd prototypes;  // n_classes x dim, unit rows
  double noise_sigma = 0.0;

  int label_of(int index) const { return labels[static_cast<std::size_t>(index)]; }
};

// Unit prototypes with isotropic Gaussian noise of scale sigma. sigma = 0
// reproduces the prototypes exactly.
inline SyntheticDataset generate_synthetic(int n_classes, int per_class,
                                           int dim, double sigma,
                                           std::uint64_t seed) {
  if (n_classes < 1) throw ConfigError("synthetic: n_classes must be >= 1");
  if (per_class < 1) throw ConfigError("synthetic: per_class must be >= 1");
  if (dim < 1) throw ConfigError("synthetic: dim must be >= 1");
  if (sigma < 0.0 || !std::isfinite(sigma)) {
    throw ConfigError("synthetic: noise sigma must be finite and >= 0");
  }
  SyntheticDataset ds;
  ds.noise_sigma = sigma;
  ds.prototypes =
      random_unit_rows(n_classes, dim, derive_seed(seed, "synthetic.protos"));
  ds.samples.resize(static_cast<Eigen::Index>(n_classes) * per_class, dim);
  ds.labels.resize(static_cast<std::size_t>(n_classes) * per_class);
  std::mt19937_64 rng(derive_seed(seed, "synthetic.noise"));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (int c = 0; c < n_classes; ++c) {
    for (int i = 0; i < per_class; ++i) {
      Eigen::Index row = static_cast<Eigen::Index>(c) * per_class + i;
      for (int j = 0; j < dim; ++j) {
        ds.samples(row, j) = ds.prototypes(c, j) + sigma * dist(rng);
      }
      ds.labels[static_cast<std::size_t>(row)] = c;
    }
  }
  return ds;
}

// Named dataset shapes. The three fed-* presets reproduce the class counts,
// per-class image counts and train fractions of the public remote sensing
// classification benchmarks they are named after; samples themselves are
// synthetic embeddings.
struct DatasetShape {
  int n_classes = 8;
  int images_per_class = 40;
  double train_fraction = 0.5;
};

inline DatasetShape preset_shape(const std::string& name) {
  if (name == "fed-optimal") return {31, 60, 0.5};
  if (name == "fed-ucmerced") return {21, 100, 0.5};
  if (name == "fed-nwpu") return {45, 700, 0.2};
  if (name == "synthetic") return {8, 40, 0.5};
  throw ConfigError("unknown dataset preset: " + name);
}

inline bool is_known_preset(const std::string& name) {
  return name == "fed-optimal" || name == "fed-ucmerced" ||
         name == "fed-nwpu" || name == "synthetic";
}

}  // namespace fedprompt

#endif  // FEDPROMPT_DATASET_HPP
