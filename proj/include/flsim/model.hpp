/*
 * Copyright 2026 The flsim Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Parameter representation, the two small model families (softmax
// regression and a one-hidden-layer tanh MLP), minibatch SGD and metrics.
//
// Canonical flattening of parameters: layer by layer, each layer's weight
// matrix row-major (output unit major) followed by its bias vector.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "flsim/common.hpp"

namespace flsim {

enum class ModelKind { logistic, mlp };

inline std::string to_string(ModelKind k) { return k == ModelKind::logistic ? "logistic" : "mlp"; }

struct ArchDescriptor {
  ModelKind kind = ModelKind::logistic;
  int input_dim = 1;
  int hidden_dim = 0;
  int num_classes = 2;

  static ArchDescriptor logistic(int input_dim, int num_classes) {
    ArchDescriptor a{ModelKind::logistic, input_dim, 0, num_classes};
    a.validate();
    return a;
  }

  static ArchDescriptor mlp(int input_dim, int hidden_dim, int num_classes) {
    ArchDescriptor a{ModelKind::mlp, input_dim, hidden_dim, num_classes};
    a.validate();
    return a;
  }

  void validate() const {
    if (input_dim < 1) throw ShapeError("arch: input_dim must be positive");
    if (num_classes < 2) throw ShapeError("arch: num_classes must be >= 2");
    if (kind == ModelKind::logistic && hidden_dim != 0)
      throw ShapeError("arch: logistic requires hidden_dim = 0");
    if (kind == ModelKind::mlp && hidden_dim < 1)
      throw ShapeError("arch: mlp requires hidden_dim >= 1");
  }

  std::size_t parameter_count() const noexcept {
    const auto f = static_cast<std::size_t>(input_dim);
    const auto h = static_cast<std::size_t>(hidden_dim);
    const auto k = static_cast<std::size_t>(num_classes);
    if (kind == ModelKind::logistic) return k * f + k;
    return h * f + h + k * h + k;
  }

  /// Parameters of every layer except the final linear head. Zero for logistic.
  std::size_t body_count() const noexcept {
    if (kind == ModelKind::logistic) return 0;
    const auto f = static_cast<std::size_t>(input_dim);
    const auto h = static_cast<std::size_t>(hidden_dim);
    return h * f + h;
  }

  friend bool operator==(const ArchDescriptor&, const ArchDescriptor&) = default;
};

/// Flat, fixed-length vector of finite doubles.
class ParameterVector {
 public:
  ParameterVector() = default;

  explicit ParameterVector(std::vector<double> values) : values_(std::move(values)) {
    for (std::size_t i = 0; i < values_.size(); ++i) {
      if (!std::isfinite(values_[i]))
        throw ValidationError("parameter vector: non-finite entry at index " + std::to_string(i));
    }
  }

  static ParameterVector zeros(std::size_t n) { return ParameterVector(std::vector<double>(n, 0.0)); }

  std::size_t size() const noexcept { return values_.size(); }
  std::span<const double> values() const noexcept { return values_; }
  double operator[](std::size_t i) const noexcept { return values_[i]; }
  const std::vector<double>& vec() const noexcept { return values_; }

  friend bool operator==(const ParameterVector&, const ParameterVector&) = default;

 private:
  std::vector<double> values_;
};

struct Hyperparameters {
  double learning_rate = 0.1;
  int epochs = 1;
  int batch_size = 16;
  double l2 = 0.0;
  std::uint64_t seed = 0;

  Hyperparameters() = default;
  Hyperparameters(double lr, int epochs_, int batch, double l2_, std::uint64_t seed_)
      : learning_rate(lr), epochs(epochs_), batch_size(batch), l2(l2_), seed(seed_) {
    validate();
  }

  void validate() const {
    // Zero is accepted as a degenerate step size (output = input).
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
      throw ValidationError("hyperparameters: learning_rate must be a finite non-negative number");
    if (epochs < 1) throw ValidationError("hyperparameters: epochs must be positive");
    if (batch_size < 1) throw ValidationError("hyperparameters: batch_size must be positive");
    if (!(l2 >= 0.0) || !std::isfinite(l2)) throw ValidationError("hyperparameters: l2 must be non-negative");
  }

  friend bool operator==(const Hyperparameters&, const Hyperparameters&) = default;
};

/// Dense row-major matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

/// Labelled samples. Rows are finite; labels lie in [0, num_classes).
class Dataset {
 public:
  Dataset() = default;
  Dataset(int input_dim, int num_classes) : dim_(input_dim), num_classes_(num_classes) {
    if (input_dim < 1) throw ShapeError("dataset: input_dim must be positive");
    if (num_classes < 2) throw ShapeError("dataset: num_classes must be >= 2");
  }

  void add(std::span<const double> x, int label) {
    if (static_cast<int>(x.size()) != dim_)
      throw ShapeError("dataset: row has " + std::to_string(x.size()) + " features, expected " +
                       std::to_string(dim_));
    if (label < 0 || label >= num_classes_)
      throw ValidationError("dataset: label " + std::to_string(label) + " out of range");
    for (const double v : x) {
      if (!std::isfinite(v)) throw ValidationError("dataset: non-finite feature");
    }
    features_.insert(features_.end(), x.begin(), x.end());
    labels_.push_back(label);
  }

  std::size_t size() const noexcept { return labels_.size(); }
  bool empty() const noexcept { return labels_.empty(); }
  int dim() const noexcept { return dim_; }
  int num_classes() const noexcept { return num_classes_; }

  std::span<const double> row(std::size_t i) const {
    return {features_.data() + i * static_cast<std::size_t>(dim_), static_cast<std::size_t>(dim_)};
  }
  int label(std::size_t i) const { return labels_[i]; }
  const std::vector<int>& labels() const noexcept { return labels_; }
  const std::vector<double>& features() const noexcept { return features_; }

  Dataset subset(std::span<const std::size_t> indices) const {
    Dataset out(dim_, num_classes_);
    for (const std::size_t i : indices) out.add(row(i), label(i));
    return out;
  }

  /// Copy with labels replaced; used for drift injection.
  Dataset relabeled(std::span<const int> new_labels) const {
    if (new_labels.size() != size()) throw ShapeError("dataset: relabel size mismatch");
    Dataset out(dim_, num_classes_);
    for (std::size_t i = 0; i < size(); ++i) out.add(row(i), new_labels[i]);
    return out;
  }

  std::vector<int> label_histogram() const {
    std::vector<int> h(static_cast<std::size_t>(num_classes_), 0);
    for (const int y : labels_) ++h[static_cast<std::size_t>(y)];
    return h;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;

 private:
  int dim_ = 1;
  int num_classes_ = 2;
  std::vector<double> features_;
  std::vector<int> labels_;
};

struct EvalReport {
  double loss = 0.0;
  double accuracy = 0.0;
  int n_samples = 0;
  std::vector<int> per_class_counts;
  bool degenerate = false;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

struct LossAndGradient {
  double loss = 0.0;
  ParameterVector grad;
};

namespace detail {

inline void check_params(std::span<const double> w, const ArchDescriptor& arch) {
  if (w.size() != arch.parameter_count())
    throw ShapeError("parameter vector has " + std::to_string(w.size()) + " entries, arch expects " +
                     std::to_string(arch.parameter_count()));
}

inline void check_input_dim(int dim, const ArchDescriptor& arch) {
  if (dim != arch.input_dim)
    throw ShapeError("input has " + std::to_string(dim) + " features, arch expects " +
                     std::to_string(arch.input_dim));
}

/// Forward pass for one row. Writes logits (size K) and, for the MLP, the
/// hidden activations (size H).
inline void forward(std::span<const double> w, const ArchDescriptor& arch, std::span<const double> x,
                    std::span<double> logits, std::span<double> hidden) {
  const auto f = static_cast<std::size_t>(arch.input_dim);
  const auto k = static_cast<std::size_t>(arch.num_classes);
  if (arch.kind == ModelKind::logistic) {
    const double* W = w.data();
    const double* b = W + k * f;
    for (std::size_t c = 0; c < k; ++c) {
      double z = 0.0;
      for (std::size_t j = 0; j < f; ++j) z += W[c * f + j] * x[j];
      logits[c] = z + b[c];
    }
    return;
  }
  const auto h = static_cast<std::size_t>(arch.hidden_dim);
  const double* W1 = w.data();
  const double* b1 = W1 + h * f;
  const double* W2 = b1 + h;
  const double* b2 = W2 + k * h;
  for (std::size_t u = 0; u < h; ++u) {
    double z = 0.0;
    for (std::size_t j = 0; j < f; ++j) z += W1[u * f + j] * x[j];
    hidden[u] = std::tanh(z + b1[u]);
  }
  for (std::size_t c = 0; c < k; ++c) {
    double z = 0.0;
    for (std::size_t u = 0; u < h; ++u) z += W2[c * h + u] * hidden[u];
    logits[c] = z + b2[c];
  }
}

inline double log_sum_exp(std::span<const double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (const double v : z) s += std::exp(v - m);
  return m + std::log(s);
}

inline void softmax(std::span<const double> z, std::span<double> out) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (std::size_t c = 0; c < z.size(); ++c) {
    out[c] = std::exp(z[c] - m);
    s += out[c];
  }
  for (double& v : out) v /= s;
}

inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < v.size(); ++c) {
    if (v[c] > v[best]) best = c;
  }
  return best;
}

/// Squared norm of weight coordinates (biases excluded).
inline double weight_sq_norm(std::span<const double> w, const ArchDescriptor& arch) {
  const auto f = static_cast<std::size_t>(arch.input_dim);
  const auto k = static_cast<std::size_t>(arch.num_classes);
  double s = 0.0;
  auto acc = [&](std::size_t begin, std::size_t count) {
    for (std::size_t i = begin; i < begin + count; ++i) s += w[i] * w[i];
  };
  if (arch.kind == ModelKind::logistic) {
    acc(0, k * f);
  } else {
    const auto h = static_cast<std::size_t>(arch.hidden_dim);
    acc(0, h * f);
    acc(h * f + h, k * h);
  }
  return s;
}

/// Mean cross-entropy + (l2/2)|w|^2 over the rows in `idx`, with its gradient
/// written into `grad` (resized to the parameter count).
inline double loss_grad(std::span<const double> w, const ArchDescriptor& arch, const Dataset& data,
                        std::span<const std::size_t> idx, double l2, std::vector<double>& grad) {
  const auto f = static_cast<std::size_t>(arch.input_dim);
  const auto k = static_cast<std::size_t>(arch.num_classes);
  const auto h = static_cast<std::size_t>(arch.hidden_dim);
  grad.assign(w.size(), 0.0);
  std::vector<double> logits(k), probs(k), hidden(h), dhidden(h);
  const double inv_n = 1.0 / static_cast<double>(idx.size());
  double loss = 0.0;

  for (const std::size_t i : idx) {
    const auto x = data.row(i);
    const auto y = static_cast<std::size_t>(data.label(i));
    forward(w, arch, x, logits, hidden);
    loss += log_sum_exp(logits) - logits[y];
    softmax(logits, probs);
    probs[y] -= 1.0;  // dL/dlogits
    if (arch.kind == ModelKind::logistic) {
      double* gW = grad.data();
      double* gb = gW + k * f;
      for (std::size_t c = 0; c < k; ++c) {
        const double d = probs[c] * inv_n;
        for (std::size_t j = 0; j < f; ++j) gW[c * f + j] += d * x[j];
        gb[c] += d;
      }
    } else {
      const double* W2 = w.data() + h * f + h;
      double* gW1 = grad.data();
      double* gb1 = gW1 + h * f;
      double* gW2 = gb1 + h;
      double* gb2 = gW2 + k * h;
      std::fill(dhidden.begin(), dhidden.end(), 0.0);
      for (std::size_t c = 0; c < k; ++c) {
        const double d = probs[c] * inv_n;
        for (std::size_t u = 0; u < h; ++u) {
          gW2[c * h + u] += d * hidden[u];
          dhidden[u] += d * W2[c * h + u];
        }
        gb2[c] += d;
      }
      for (std::size_t u = 0; u < h; ++u) {
        const double dz = dhidden[u] * (1.0 - hidden[u] * hidden[u]);
        for (std::size_t j = 0; j < f; ++j) gW1[u * f + j] += dz * x[j];
        gb1[u] += dz;
      }
    }
  }
  loss *= inv_n;

  if (l2 > 0.0) {
    loss += 0.5 * l2 * weight_sq_norm(w, arch);
    auto reg = [&](std::size_t begin, std::size_t count) {
      for (std::size_t i = begin; i < begin + count; ++i) grad[i] += l2 * w[i];
    };
    if (arch.kind == ModelKind::logistic) {
      reg(0, k * f);
    } else {
      reg(0, h * f);
      reg(h * f + h, k * h);
    }
  }
  return loss;
}

inline std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

}  // namespace detail

/// Class-probability matrix, one row per input row.
inline Matrix predict(const ParameterVector& params, const ArchDescriptor& arch, const Matrix& features) {
  arch.validate();
  detail::check_params(params.values(), arch);
  detail::check_input_dim(static_cast<int>(features.cols), arch);
  const auto k = static_cast<std::size_t>(arch.num_classes);
  Matrix out(features.rows, k);
  std::vector<double> logits(k), hidden(static_cast<std::size_t>(arch.hidden_dim));
  for (std::size_t i = 0; i < features.rows; ++i) {
    detail::forward(params.values(), arch, features.row(i), logits, hidden);
    detail::softmax(logits, out.row(i));
  }
  return out;
}

inline Matrix features_of(const Dataset& data) {
  Matrix m(data.size(), static_cast<std::size_t>(data.dim()));
  std::copy(data.features().begin(), data.features().end(), m.data.begin());
  return m;
}

inline LossAndGradient loss_and_gradient(const ParameterVector& params, const ArchDescriptor& arch,
                                         const Dataset& batch, double l2) {
  detail::check_params(params.values(), arch);
  if (batch.empty()) throw EmptyInputError("loss_and_gradient: empty batch");
  detail::check_input_dim(batch.dim(), arch);
  std::vector<double> grad;
  const auto idx = detail::iota_indices(batch.size());
  const double loss = detail::loss_grad(params.values(), arch, batch, idx, l2, grad);
  return {loss, ParameterVector(std::move(grad))};
}

/// `hp.epochs` passes of minibatch SGD. Each epoch visits the shard in a
/// freshly shuffled order drawn from a stream seeded by `hp.seed`. A batch
/// size larger than the shard means full-batch descent.
inline ParameterVector local_train(const ParameterVector& params, const ArchDescriptor& arch,
                                   const Dataset& shard, const Hyperparameters& hp) {
  hp.validate();
  detail::check_params(params.values(), arch);
  if (shard.empty()) throw EmptyInputError("model trainer: empty shard");
  detail::check_input_dim(shard.dim(), arch);

  std::vector<double> w = params.vec();
  std::vector<double> grad;
  auto order = detail::iota_indices(shard.size());
  const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(hp.batch_size), shard.size());
  Rng rng(mix_seed(hp.seed, 0x7261696eULL));

  for (int epoch = 0; epoch < hp.epochs; ++epoch) {
    rng.shuffle(order);
    int batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += batch, ++batch_index) {
      const std::size_t len = std::min(batch, order.size() - start);
      const std::span<const std::size_t> idx(order.data() + start, len);
      const double loss = detail::loss_grad(w, arch, shard, idx, hp.l2, grad);
      if (!std::isfinite(loss)) throw DivergenceError(epoch, batch_index);
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= hp.learning_rate * grad[i];
      if (!std::all_of(w.begin(), w.end(), [](double v) { return std::isfinite(v); }))
        throw DivergenceError(epoch, batch_index);
    }
  }
  return ParameterVector(std::move(w));
}

/// Mean cross-entropy (no regularizer) and accuracy. Argmax ties go to the
/// lowest class index. Empty data yields a zeroed, degenerate report.
inline EvalReport evaluate(const ParameterVector& params, const ArchDescriptor& arch, const Dataset& data) {
  detail::check_params(params.values(), arch);
  EvalReport r;
  r.per_class_counts.assign(static_cast<std::size_t>(arch.num_classes), 0);
  if (data.empty()) {
    r.degenerate = true;
    return r;
  }
  detail::check_input_dim(data.dim(), arch);
  if (data.num_classes() != arch.num_classes) throw ShapeError("evaluate: class count mismatch");
  const auto k = static_cast<std::size_t>(arch.num_classes);
  std::vector<double> logits(k), hidden(static_cast<std::size_t>(arch.hidden_dim));
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto y = static_cast<std::size_t>(data.label(i));
    detail::forward(params.values(), arch, data.row(i), logits, hidden);
    loss += detail::log_sum_exp(logits) - logits[y];
    if (detail::argmax(logits) == y) ++correct;
    ++r.per_class_counts[y];
  }
  r.n_samples = static_cast<int>(data.size());
  r.loss = loss / static_cast<double>(data.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return r;
}

/// Central differences of an arbitrary scalar function.
template <typename F>
std::vector<double> finite_difference_gradient(F&& f, std::span<const double> x, double eps) {
  if (!(eps > 0.0)) throw ValidationError("finite difference: eps must be positive");
  std::vector<double> probe(x.begin(), x.end());
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = f(std::span<const double>(probe));
    probe[i] = orig - eps;
    const double down = f(std::span<const double>(probe));
    probe[i] = orig;
    g[i] = (up - down) / (2.0 * eps);
  }
  return g;
}

inline ParameterVector finite_difference_gradient(const ParameterVector& params, const ArchDescriptor& arch,
                                                  const Dataset& batch, double eps, double l2 = 0.0) {
  if (!(eps > 0.0)) throw ValidationError("finite difference: eps must be positive");
  detail::check_params(params.values(), arch);
  if (batch.empty()) throw EmptyInputError("finite difference: empty batch");
  const auto idx = detail::iota_indices(batch.size());
  std::vector<double> scratch;
  auto loss = [&](std::span<const double> w) { return detail::loss_grad(w, arch, batch, idx, l2, scratch); };
  return ParameterVector(finite_difference_gradient(loss, params.values(), eps));
}

enum class InitMode { zeros, seeded_uniform };

inline ParameterVector init_params(const ArchDescriptor& arch, InitMode mode, std::uint64_t seed) {
  arch.validate();
  const std::size_t n = arch.parameter_count();
  if (mode == InitMode::zeros) return ParameterVector::zeros(n);
  Rng rng(mix_seed(seed, 0x696e6974ULL));
  std::vector<double> w(n);
  for (double& v : w) v = rng.uniform(-0.05, 0.05);
  return ParameterVector(std::move(w));
}

}  // namespace flsim
