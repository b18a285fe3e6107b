#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace gotcha {

class Rng;

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

/// Named view of one trainable block. Vectors have cols == 1.
struct TensorRef {
  std::string name;
  std::size_t rows;
  std::size_t cols;
  std::span<double> values;
};

struct ConstTensorRef {
  std::string name;
  std::size_t rows;
  std::size_t cols;
  std::span<const double> values;
};

/// y = W x + b with W of shape (out, in).
struct Affine {
  Matrix weight;
  Vector bias;

  Affine() = default;
  Affine(std::size_t in, std::size_t out) : weight(out, in), bias(out, 0.0) {}

  std::size_t in_dim() const { return weight.cols; }
  std::size_t out_dim() const { return weight.rows; }

  /// Uniform on (-1/sqrt(in), 1/sqrt(in)); bias stays zero.
  void init_uniform(Rng& rng);

  friend bool operator==(const Affine&, const Affine&) = default;
};

Vector affine_forward(const Affine& layer, std::span<const double> input);

/// Accumulates dL/dW and dL/db into `grad`; adds dL/dx into `grad_input` when
/// it is non-empty.
void affine_backward(const Affine& layer, std::span<const double> input,
                     std::span<const double> grad_out, Affine& grad,
                     std::span<double> grad_input);

/// Gated recurrent unit:
///   z = sigmoid(Uz x + Vz h + bz), r = sigmoid(Ur x + Vr h + br)
///   c = tanh(Uc x + Vc (r * h) + bc), h' = (1 - z) * h + z * c
struct GruParams {
  Matrix update_in, update_hidden;
  Vector update_bias;
  Matrix reset_in, reset_hidden;
  Vector reset_bias;
  Matrix cand_in, cand_hidden;
  Vector cand_bias;

  GruParams() = default;
  GruParams(std::size_t input_dim, std::size_t hidden_dim);

  std::size_t input_dim() const { return update_in.cols; }
  std::size_t hidden_dim() const { return update_in.rows; }

  void init_uniform(Rng& rng);

  friend bool operator==(const GruParams&, const GruParams&) = default;
};

struct GruCache {
  Vector input;
  Vector h_prev;
  Vector update;     // z
  Vector reset;      // r
  Vector candidate;  // c
  Vector h;          // also the cell output
};

GruCache gru_forward(const GruParams& params, std::span<const double> input,
                     std::span<const double> h_prev);

/// Backpropagates dL/dh' through one step. Parameter gradients accumulate into
/// `grad`; input and previous-state gradients are added into the spans when
/// they are non-empty.
void gru_backward(const GruParams& params, const GruCache& cache, std::span<const double> grad_h,
                  GruParams& grad, std::span<double> grad_input, std::span<double> grad_h_prev);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

/// Bias-corrected Adam moments, one buffer per parameter block.
struct AdamState {
  std::uint64_t step = 0;
  std::vector<Vector> first;
  std::vector<Vector> second;
  AdamConfig config;

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// One Adam update with zero weight decay. Throws NumericError before touching
/// anything if a gradient is non-finite.
void adam_step(std::span<const TensorRef> params, std::span<const ConstTensorRef> grads,
               AdamState& state, double lr);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Central-difference check of `analytic` against f around `theta`. Relative
/// error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
GradCheckResult grad_check(const std::function<double(std::span<const double>)>& f,
                           std::span<const double> theta, std::span<const double> analytic,
                           double h = 1e-5);

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace gotcha
