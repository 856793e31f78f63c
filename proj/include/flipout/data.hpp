#pragma once

// Datasets: the IDX reader (MNIST-style files) and small synthetic tasks.

#include "flipout/core.hpp"
#include "flipout/net.hpp"
#include "flipout/prng.hpp"

#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

namespace flipout {

struct Dataset {
  Matrix inputs;            // [n x d]
  std::vector<int> labels;  // classification tasks
  Matrix targets;           // regression tasks
  int num_classes = 0;
  std::string split = "train";

  Index size() const { return inputs.rows(); }
  Index dim() const { return inputs.cols(); }
  bool is_classification() const { return !labels.empty(); }

  void validate() const {
    if (!inputs.allFinite()) throw FormatError("dataset: non-finite input");
    if (is_classification()) {
      require_shape(static_cast<Index>(labels.size()) == inputs.rows(), "dataset: label count does not match inputs");
      for (int y : labels)
        if (y < 0 || y >= num_classes) throw FormatError("dataset: label " + std::to_string(y) + " out of range");
    } else {
      require_shape(targets.rows() == inputs.rows(), "dataset: target count does not match inputs");
      if (!targets.allFinite()) throw FormatError("dataset: non-finite target");
    }
  }

  Matrix rows(const std::vector<Index>& idx) const {
    Matrix out(static_cast<Index>(idx.size()), inputs.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Index>(i)) = inputs.row(idx[i]);
    return out;
  }

  Targets targets_for(const std::vector<Index>& idx) const {
    Targets t;
    if (is_classification()) {
      for (Index i : idx) t.labels.push_back(labels[static_cast<std::size_t>(i)]);
    } else {
      t.values.resize(static_cast<Index>(idx.size()), targets.cols());
      for (std::size_t i = 0; i < idx.size(); ++i) t.values.row(static_cast<Index>(i)) = targets.row(idx[i]);
    }
    return t;
  }

  Targets all_targets() const {
    Targets t;
    if (is_classification())
      t.labels = labels;
    else
      t.values = targets;
    return t;
  }
};

/// `count` indices in [0, n). Without replacement this is a partial
/// Fisher-Yates shuffle and requires count <= n.
inline std::vector<Index> sample_indices(const RngKey& key, Index n, Index count, bool with_replacement) {
  if (count < 0) throw ConfigError("sample_indices: negative count");
  RngStream rng(key);
  std::vector<Index> out;
  out.reserve(static_cast<std::size_t>(count));
  if (with_replacement) {
    if (n <= 0 && count > 0) throw ConfigError("sample_indices: empty dataset");
    for (Index i = 0; i < count; ++i) out.push_back(static_cast<Index>(rng.below(static_cast<std::uint64_t>(n))));
    return out;
  }
  if (count > n)
    throw ConfigError("mini-batch of " + std::to_string(count) + " exceeds dataset size " + std::to_string(n) +
                      " (enable sampling with replacement)");
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  for (Index i = 0; i < count; ++i) {
    const auto j = i + static_cast<Index>(rng.below(static_cast<std::uint64_t>(n - i)));
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
    out.push_back(perm[static_cast<std::size_t>(i)]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// IDX files: big-endian u32 magic (0x00000803 for u8 images with three
// dimensions, 0x00000801 for u8 labels with one), then one big-endian u32
// per dimension, then the raw bytes.

namespace detail {

inline std::uint32_t read_be32(const std::string& b, std::size_t at) {
  return (static_cast<std::uint32_t>(static_cast<unsigned char>(b[at])) << 24) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + 1])) << 16) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + 2])) << 8) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + 3]));
}

inline std::vector<std::uint64_t> idx_header(const std::string& bytes, std::uint32_t magic, int ndims,
                                             const std::string& what) {
  if (bytes.size() < 4) throw FormatError(what + ": truncated file (no magic number)");
  const std::uint32_t got = read_be32(bytes, 0);
  if (got != magic) {
    std::ostringstream ss;
    ss << what << ": wrong magic 0x" << std::hex << got << ", expected 0x" << magic;
    throw FormatError(ss.str());
  }
  const std::size_t header = 4 + 4 * static_cast<std::size_t>(ndims);
  if (bytes.size() < header) throw FormatError(what + ": truncated header");
  std::vector<std::uint64_t> dims;
  std::uint64_t total = 1;
  for (int k = 0; k < ndims; ++k) {
    const std::uint64_t d = read_be32(bytes, 4 + 4 * static_cast<std::size_t>(k));
    if (d != 0 && total > std::numeric_limits<std::uint64_t>::max() / d)
      throw FormatError(what + ": dimension overflow");
    total *= d;
    dims.push_back(d);
  }
  if (total > static_cast<std::uint64_t>(std::numeric_limits<Index>::max()) ||
      total > std::numeric_limits<std::size_t>::max() - header)
    throw FormatError(what + ": dimension overflow");
  if (bytes.size() < header + total)
    throw FormatError(what + ": truncated data (" + std::to_string(bytes.size() - header) + " of " +
                      std::to_string(total) + " bytes)");
  return dims;
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("io", "cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace detail

/// Images as an [n x rows*cols] matrix with pixels scaled by 1/255.
inline Matrix parse_idx_images(const std::string& bytes) {
  const auto dims = detail::idx_header(bytes, 0x00000803u, 3, "idx images");
  const Index n = static_cast<Index>(dims[0]), d = static_cast<Index>(dims[1] * dims[2]);
  Matrix out(n, d);
  const std::size_t at = 16;
  for (Index i = 0; i < out.size(); ++i)
    out.data()[i] = static_cast<Real>(static_cast<unsigned char>(bytes[at + static_cast<std::size_t>(i)])) / Real(255);
  return out;
}

inline std::vector<int> parse_idx_labels(const std::string& bytes) {
  const auto dims = detail::idx_header(bytes, 0x00000801u, 1, "idx labels");
  std::vector<int> out(dims[0]);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<unsigned char>(bytes[8 + i]);
  return out;
}

inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  Dataset ds;
  ds.inputs = parse_idx_images(detail::read_file(images_path));
  ds.labels = parse_idx_labels(detail::read_file(labels_path));
  if (static_cast<Index>(ds.labels.size()) != ds.inputs.rows())
    throw FormatError("idx: " + std::to_string(ds.inputs.rows()) + " images but " + std::to_string(ds.labels.size()) +
                      " labels");
  ds.num_classes = ds.labels.empty() ? 0 : *std::max_element(ds.labels.begin(), ds.labels.end()) + 1;
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic tasks.

enum class SyntheticKind { blobs, xor_, regression };

inline SyntheticKind parse_synthetic_kind(std::string_view s) {
  if (s == "blobs") return SyntheticKind::blobs;
  if (s == "xor") return SyntheticKind::xor_;
  if (s == "regression") return SyntheticKind::regression;
  throw ConfigError("unknown synthetic dataset '" + std::string(s) + "'");
}

struct SyntheticOptions {
  int classes = 10;          // blobs
  double separation = 4.0;   // blobs: distance between class centres in noise std units
  double noise_std = 1.0;    // blobs: within-class std; xor/regression: additive noise
  int outputs = 1;           // regression
  double offset = 0.0;       // blobs/xor: constant added to every input coordinate
};

/// Regression ground truth [d x outputs]; a pure function of (d, outputs, seed).
inline Matrix regression_weights(Index d, int outputs, std::uint64_t seed) {
  return sample_gaussian(RngKey(seed).split(1), d, outputs);
}

/// blobs: class k is N(c_k, noise_std^2 I) with c_k = (separation * noise_std
/// / sqrt 2) e_k, so any two centres are `separation` stds apart; needs d >=
/// classes. xor: the first two coordinates are uniform on [-1, 1]^2 plus
/// noise, label = sign(x0) xor sign(x1); further coordinates are pure noise.
/// regression: X ~ N(0, I), y = X w_true + noise_std * z. `offset` shifts
/// classification inputs, e.g. to mimic non-negative pixel features.
inline Dataset make_synthetic(SyntheticKind kind, Index n, Index d, std::uint64_t seed,
                              const SyntheticOptions& opt = {}) {
  if (n <= 0 || d <= 0) throw ConfigError("make_synthetic: n and d must be positive");
  Dataset ds;
  const RngKey root(seed);
  switch (kind) {
    case SyntheticKind::blobs: {
      if (opt.classes < 2) throw ConfigError("blobs: need at least 2 classes");
      if (d < opt.classes) throw ConfigError("blobs: dimension must be >= number of classes");
      ds.num_classes = opt.classes;
      RngStream rng(root.split(0));
      ds.inputs = sample_gaussian(root.split(2), n, d) * opt.noise_std;
      const double offset = opt.separation * opt.noise_std / std::sqrt(2.0);
      for (Index i = 0; i < n; ++i) {
        const int y = static_cast<int>(rng.below(static_cast<std::uint64_t>(opt.classes)));
        ds.labels.push_back(y);
        ds.inputs(i, y) += static_cast<Real>(offset);
      }
      break;
    }
    case SyntheticKind::xor_: {
      if (d < 2) throw ConfigError("xor: dimension must be >= 2");
      ds.num_classes = 2;
      RngStream rng(root.split(0));
      ds.inputs = sample_gaussian(root.split(2), n, d) * opt.noise_std;
      for (Index i = 0; i < n; ++i) {
        const double a = 2 * rng.uniform() - 1, b = 2 * rng.uniform() - 1;
        ds.inputs(i, 0) += static_cast<Real>(a);
        ds.inputs(i, 1) += static_cast<Real>(b);
        ds.labels.push_back((a > 0) != (b > 0) ? 1 : 0);
      }
      break;
    }
    case SyntheticKind::regression: {
      ds.inputs = sample_gaussian(root.split(0), n, d);
      const Matrix w = regression_weights(d, opt.outputs, seed);
      ds.targets = ds.inputs * w;
      if (opt.noise_std > 0) ds.targets += sample_gaussian(root.split(2), n, opt.outputs) * opt.noise_std;
      break;
    }
  }
  if (ds.is_classification() && opt.offset != 0) ds.inputs.array() += static_cast<Real>(opt.offset);
  ds.validate();
  return ds;
}

}  // namespace flipout
