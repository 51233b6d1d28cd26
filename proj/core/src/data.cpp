#include "gslf/data.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "gslf/rng.hpp"

namespace gslf {

void SyntheticDatasetConfig::validate() const {
  if (num_classes < 2) {
    throw ValidationError("dataset needs at least 2 classes, got " +
                          std::to_string(num_classes));
  }
  if (train_per_class == 0 || test_per_class == 0 || seq_len == 0 || input_dim == 0) {
    throw ValidationError("dataset sizes must be positive");
  }
  if (noise_sigma < 0.0) {
    throw ValidationError("noise_sigma must be nonnegative");
  }
}

Tensor Dataset::gather(std::span<const std::size_t> indices) const {
  if (indices.empty()) {
    throw ValidationError("gather called with no sample indices");
  }
  const std::size_t stride = sample_stride();
  std::vector<double> out(indices.size() * stride);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) {
      throw ValidationError("sample index " + std::to_string(indices[i]) +
                            " out of range for dataset of " + std::to_string(size()));
    }
    std::copy_n(inputs.data() + indices[i] * stride, stride, out.data() + i * stride);
  }
  return Tensor::from({indices.size() * seq_len, input_dim}, std::move(out));
}

std::vector<int> Dataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    out[i] = labels[indices[i]];
  }
  return out;
}

std::vector<std::size_t> Dataset::indices_of(const std::set<int>& classes) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (classes.count(labels[i]) != 0) {
      out.push_back(i);
    }
  }
  return out;
}

Dataset Dataset::filter_classes(const std::set<int>& classes) const {
  Dataset out;
  out.num_classes = num_classes;
  out.seq_len = seq_len;
  out.input_dim = input_dim;
  const std::size_t stride = sample_stride();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (classes.count(labels[i]) != 0) {
      out.inputs.insert(out.inputs.end(), inputs.begin() + i * stride,
                        inputs.begin() + (i + 1) * stride);
      out.labels.push_back(labels[i]);
    }
  }
  return out;
}

std::set<int> Dataset::all_classes() const {
  return std::set<int>(labels.begin(), labels.end());
}

DatasetSplits generate_dataset(const SyntheticDatasetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t stride = cfg.seq_len * cfg.input_dim;

  Rng proto_rng = Rng::stream(seed, "data-proto");
  std::vector<double> prototypes(cfg.num_classes * stride);
  for (double& v : prototypes) {
    v = proto_rng.gaussian();
  }

  auto fill = [&](Dataset& ds, std::size_t per_class, Rng rng) {
    ds.num_classes = cfg.num_classes;
    ds.seq_len = cfg.seq_len;
    ds.input_dim = cfg.input_dim;
    ds.inputs.resize(cfg.num_classes * per_class * stride);
    ds.labels.resize(cfg.num_classes * per_class);
    std::size_t s = 0;
    for (std::size_t c = 0; c < cfg.num_classes; ++c) {
      const double* proto = prototypes.data() + c * stride;
      for (std::size_t i = 0; i < per_class; ++i, ++s) {
        double* dst = ds.inputs.data() + s * stride;
        for (std::size_t j = 0; j < stride; ++j) {
          dst[j] = proto[j] + cfg.noise_sigma * rng.gaussian();
        }
        ds.labels[s] = static_cast<int>(c);
      }
    }
  };

  DatasetSplits splits;
  fill(splits.train, cfg.train_per_class, Rng::stream(seed, "data-train"));
  fill(splits.test, cfg.test_per_class, Rng::stream(seed, "data-test"));
  return splits;
}

double centroid_probe_accuracy(const Dataset& train, const Dataset& test) {
  const std::size_t dim = train.input_dim;
  std::vector<double> centroids(train.num_classes * dim, 0.0);
  std::vector<std::size_t> counts(train.num_classes, 0);

  auto pooled = [&](const Dataset& ds, std::size_t i, std::vector<double>& out) {
    std::fill(out.begin(), out.end(), 0.0);
    const double* s = ds.inputs.data() + i * ds.sample_stride();
    for (std::size_t t = 0; t < ds.seq_len; ++t) {
      for (std::size_t j = 0; j < dim; ++j) {
        out[j] += s[t * dim + j];
      }
    }
    for (double& v : out) {
      v /= static_cast<double>(ds.seq_len);
    }
  };

  std::vector<double> buf(dim);
  for (std::size_t i = 0; i < train.size(); ++i) {
    pooled(train, i, buf);
    const auto c = static_cast<std::size_t>(train.labels[i]);
    for (std::size_t j = 0; j < dim; ++j) {
      centroids[c * dim + j] += buf[j];
    }
    ++counts[c];
  }
  for (std::size_t c = 0; c < train.num_classes; ++c) {
    if (counts[c] > 0) {
      for (std::size_t j = 0; j < dim; ++j) {
        centroids[c * dim + j] /= static_cast<double>(counts[c]);
      }
    }
  }

  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    pooled(test, i, buf);
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < train.num_classes; ++c) {
      if (counts[c] == 0) {
        continue;
      }
      double d = 0.0;
      for (std::size_t j = 0; j < dim; ++j) {
        const double diff = buf[j] - centroids[c * dim + j];
        d += diff * diff;
      }
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    if (static_cast<int>(best) == test.labels[i]) {
      ++correct;
    }
  }
  return test.size() == 0 ? 0.0
                          : 100.0 * static_cast<double>(correct) /
                                static_cast<double>(test.size());
}

}  // namespace gslf
