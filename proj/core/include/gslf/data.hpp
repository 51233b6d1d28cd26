#pragma once

#include <cstdint>
#include <set>
#include <span>
#include <vector>

#include "gslf/tensor.hpp"

namespace gslf {

/// Synthetic classification task: each class is a random prototype sequence,
/// samples are the prototype plus Gaussian noise. Stands in for a real
/// dataset so full runs finish in minutes.
struct SyntheticDatasetConfig {
  std::size_t num_classes = 10;
  std::size_t train_per_class = 40;
  std::size_t test_per_class = 20;
  std::size_t seq_len = 4;
  std::size_t input_dim = 16;
  double noise_sigma = 0.6;

  void validate() const;
};

struct Dataset {
  std::size_t num_classes = 0;
  std::size_t seq_len = 0;
  std::size_t input_dim = 0;
  std::vector<double> inputs;  // size() * seq_len * input_dim, row-major
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_stride() const { return seq_len * input_dim; }

  /// Stacks the selected samples into a [n*seq_len x input_dim] tensor.
  Tensor gather(std::span<const std::size_t> indices) const;
  std::vector<int> gather_labels(std::span<const std::size_t> indices) const;

  std::vector<std::size_t> indices_of(const std::set<int>& classes) const;
  Dataset filter_classes(const std::set<int>& classes) const;
  std::set<int> all_classes() const;
};

struct DatasetSplits {
  Dataset train;
  Dataset test;
};

/// Deterministic given the seed: prototypes come from the "data-proto"
/// stream, per-split noise from "data-train" / "data-test".
DatasetSplits generate_dataset(const SyntheticDatasetConfig& cfg, std::uint64_t seed);

/// Nearest-centroid classifier on mean-pooled raw inputs; the sanity oracle
/// that the generated classes are learnable at all.
double centroid_probe_accuracy(const Dataset& train, const Dataset& test);

}  // namespace gslf
