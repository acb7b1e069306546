#pragma once

// Two-hidden-layer MLP over a flat parameter vector.
//
// Parameter layout, layer by layer (input->h1, h1->h2, h2->output):
//   weights W[in][out] row-major (W[i][j] connects input i to unit j),
//   followed by the layer's `out` biases.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "scei/common.hpp"

namespace scei {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

// Flat vector of model weights and biases. The length is fixed at
// construction; only element values may change.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::size_t n, double fill = 0.0) : values_(n, fill) {}
  explicit ParamVector(std::vector<double> values) : values_(std::move(values)) {}
  ParamVector(std::initializer_list<double> values) : values_(values) {}

  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  double* data() noexcept { return values_.data(); }
  const double* data() const noexcept { return values_.data(); }

  double& operator[](std::size_t i) noexcept { return values_[i]; }
  double operator[](std::size_t i) const noexcept { return values_[i]; }

  auto begin() noexcept { return values_.begin(); }
  auto end() noexcept { return values_.end(); }
  auto begin() const noexcept { return values_.begin(); }
  auto end() const noexcept { return values_.end(); }

  std::span<double> span() noexcept { return values_; }
  std::span<const double> span() const noexcept { return values_; }
  const std::vector<double>& values() const noexcept { return values_; }

  bool all_finite() const noexcept {
    return std::all_of(values_.begin(), values_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const ParamVector&, const ParamVector&) = default;

 private:
  std::vector<double> values_;
};

struct MlpArchitecture {
  std::size_t input_dim = 784;
  std::array<std::size_t, 2> hidden_dims{200, 200};
  std::size_t output_dim = 10;

  void validate() const {
    if (input_dim < 1 || hidden_dims[0] < 1 || hidden_dims[1] < 1 || output_dim < 1)
      throw InvalidInput("MLP dimensions must all be >= 1");
  }

  std::array<std::pair<std::size_t, std::size_t>, 3> layers() const {
    return {{{input_dim, hidden_dims[0]},
             {hidden_dims[0], hidden_dims[1]},
             {hidden_dims[1], output_dim}}};
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (auto [in, out] : layers()) n += in * out + out;
    return n;
  }

  friend bool operator==(const MlpArchitecture&, const MlpArchitecture&) = default;
};

struct TrainingConfig {
  std::size_t batch_size = 10;
  std::size_t local_epochs = 5;
  double learning_rate = 0.01;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (batch_size < 1) throw InvalidInput("batch size must be >= 1");
    if (local_epochs < 1) throw InvalidInput("local epochs must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
      throw InvalidInput("learning rate must be a finite non-negative value");
  }
};

namespace detail {

struct LayerView {
  Eigen::Map<const Matrix> w;
  Eigen::Map<const RowVector> b;
};

struct LayerGrad {
  Eigen::Map<Matrix> w;
  Eigen::Map<RowVector> b;
};

inline std::array<LayerView, 3> layer_views(const MlpArchitecture& arch, const double* p) {
  auto ls = arch.layers();
  std::size_t off = 0;
  auto next = [&](std::size_t l) {
    auto [in, out] = ls[l];
    LayerView v{Eigen::Map<const Matrix>(p + off, Eigen::Index(in), Eigen::Index(out)),
                Eigen::Map<const RowVector>(p + off + in * out, Eigen::Index(out))};
    off += in * out + out;
    return v;
  };
  auto a = next(0);
  auto b = next(1);
  auto c = next(2);
  return {a, b, c};
}

inline std::array<LayerGrad, 3> layer_grads(const MlpArchitecture& arch, double* p) {
  auto ls = arch.layers();
  std::size_t off = 0;
  auto next = [&](std::size_t l) {
    auto [in, out] = ls[l];
    LayerGrad v{Eigen::Map<Matrix>(p + off, Eigen::Index(in), Eigen::Index(out)),
                Eigen::Map<RowVector>(p + off + in * out, Eigen::Index(out))};
    off += in * out + out;
    return v;
  };
  auto a = next(0);
  auto b = next(1);
  auto c = next(2);
  return {a, b, c};
}

inline void check_shapes(const ParamVector& params, const MlpArchitecture& arch,
                         Eigen::Index cols) {
  if (params.size() != arch.param_count())
    throw InvalidInput("parameter vector length does not match architecture");
  if (cols != Eigen::Index(arch.input_dim))
    throw InvalidInput("batch column count does not match input dimension");
}

struct Activations {
  Matrix h1;
  Matrix h2;
  Matrix logits;
};

template <typename Batch>
Activations forward_logits(const std::array<LayerView, 3>& L, const Batch& x) {
  Activations a;
  a.h1 = ((x * L[0].w).rowwise() + L[0].b).cwiseMax(0.0);
  a.h2 = ((a.h1 * L[1].w).rowwise() + L[1].b).cwiseMax(0.0);
  a.logits = (a.h2 * L[2].w).rowwise() + L[2].b;
  return a;
}

// In-place row softmax; returns per-row log-sum-exp.
inline Eigen::VectorXd softmax_rows(Matrix& z) {
  Eigen::VectorXd lse(z.rows());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double m = z.row(i).maxCoeff();
    z.row(i) = (z.row(i).array() - m).exp().matrix();
    const double s = z.row(i).sum();
    z.row(i) /= s;
    lse(i) = m + std::log(s);
  }
  return lse;
}

}  // namespace detail

// Weights ~ U[-1/sqrt(fan_in), +1/sqrt(fan_in)], biases zero.
inline ParamVector init_params(const MlpArchitecture& arch, std::uint64_t seed) {
  arch.validate();
  ParamVector p(arch.param_count(), 0.0);
  std::mt19937_64 rng(seed);
  std::size_t off = 0;
  for (auto [in, out] : arch.layers()) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::size_t i = 0; i < in * out; ++i) p[off + i] = dist(rng);
    off += in * out + out;
  }
  return p;
}

// Class probabilities, one row per example.
inline Matrix forward(const ParamVector& params, const MlpArchitecture& arch,
                      const Matrix& batch) {
  detail::check_shapes(params, arch, batch.cols());
  auto a = detail::forward_logits(detail::layer_views(arch, params.data()), batch);
  detail::softmax_rows(a.logits);
  return std::move(a.logits);
}

struct LossAndGrad {
  double loss = 0.0;
  ParamVector grad;
};

namespace detail {

template <typename Batch>
LossAndGrad loss_and_grad_impl(const ParamVector& params, const MlpArchitecture& arch,
                               const Batch& x, std::span<const int> labels) {
  const Eigen::Index n = x.rows();
  if (n == 0) throw InvalidInput("loss_and_grad requires a non-empty batch");
  if (std::size_t(n) != labels.size())
    throw InvalidInput("batch row count does not match label count");
  check_shapes(params, arch, x.cols());

  auto L = layer_views(arch, params.data());
  Activations a = forward_logits(L, x);
  Matrix& p = a.logits;
  Matrix z = p;
  Eigen::VectorXd lse = softmax_rows(p);

  double loss = 0.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[std::size_t(i)];
    if (y < 0 || std::size_t(y) >= arch.output_dim)
      throw InvalidInput("label out of range");
    loss += lse(i) - z(i, y);
    p(i, y) -= 1.0;
  }
  loss *= inv_n;
  p *= inv_n;  // dL/dlogits

  LossAndGrad out{loss, ParamVector(params.size(), 0.0)};
  auto G = layer_grads(arch, out.grad.data());

  G[2].w.noalias() = a.h2.transpose() * p;
  G[2].b = p.colwise().sum();
  Matrix d2 = (p * L[2].w.transpose()).cwiseProduct((a.h2.array() > 0.0).cast<double>().matrix());
  G[1].w.noalias() = a.h1.transpose() * d2;
  G[1].b = d2.colwise().sum();
  Matrix d1 = (d2 * L[1].w.transpose()).cwiseProduct((a.h1.array() > 0.0).cast<double>().matrix());
  G[0].w.noalias() = x.transpose() * d1;
  G[0].b = d1.colwise().sum();
  return out;
}

}  // namespace detail

// Mean softmax cross-entropy over the batch and its gradient.
inline LossAndGrad loss_and_grad(const ParamVector& params, const MlpArchitecture& arch,
                                 const Matrix& batch, std::span<const int> labels) {
  return detail::loss_and_grad_impl(params, arch, batch, labels);
}

// Minimal labelled-example view used by the trainer.
struct Examples {
  const Matrix& features;
  std::span<const int> labels;
};

// E epochs of mini-batch SGD. Each epoch visits the examples in a fresh
// seeded permutation; the final batch of an epoch may be short.
inline ParamVector sgd_train(ParamVector params, const MlpArchitecture& arch,
                             const TrainingConfig& cfg, Examples data) {
  cfg.validate();
  const std::size_t n = data.labels.size();
  if (n == 0) throw InvalidInput("sgd_train requires a non-empty dataset");
  if (std::size_t(data.features.rows()) != n)
    throw InvalidInput("feature rows do not match label count");
  detail::check_shapes(params, arch, data.features.cols());

  std::vector<std::size_t> order(n);
  Matrix batch;
  std::vector<int> batch_labels;
  for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(derive_seed(cfg.rng_seed, {epoch}));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t m = std::min(cfg.batch_size, n - start);
      batch.resize(Eigen::Index(m), data.features.cols());
      batch_labels.resize(m);
      for (std::size_t i = 0; i < m; ++i) {
        batch.row(Eigen::Index(i)) = data.features.row(Eigen::Index(order[start + i]));
        batch_labels[i] = data.labels[order[start + i]];
      }
      auto g = loss_and_grad(params, arch, batch, batch_labels);
      for (std::size_t k = 0; k < params.size(); ++k)
        params[k] -= cfg.learning_rate * g.grad[k];
    }
  }
  return params;
}

// Index of the largest entry of each row; ties go to the lowest index.
inline std::vector<int> predict(const ParamVector& params, const MlpArchitecture& arch,
                                const Matrix& features) {
  Matrix probs = forward(params, arch, features);
  std::vector<int> out(std::size_t(probs.rows()));
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < probs.cols(); ++c)
      if (probs(i, c) > probs(i, best)) best = c;
    out[std::size_t(i)] = int(best);
  }
  return out;
}

inline double evaluate(const ParamVector& params, const MlpArchitecture& arch,
                       Examples test) {
  if (test.labels.empty()) throw InvalidInput("evaluate requires a non-empty test set");
  auto pred = predict(params, arch, test.features);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == test.labels[i];
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

}  // namespace scei
