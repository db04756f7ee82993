#pragma once

#include <functional>
#include <span>
#include <vector>

#include "ssctl/tensor.hpp"

namespace ssctl {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Fully connected layer, weight stored input-major (in x out).
struct Linear {
  Parameter w;
  Parameter b;

  Linear() = default;
  Linear(std::string name, std::size_t in, std::size_t out);

  std::size_t in_dim() const { return w.value.shape[0]; }
  std::size_t out_dim() const { return w.value.shape[1]; }

  void init_xavier(Rng& rng);
  void init_zero();

  /// x [B x in] -> x.w + b [B x out]
  Tensor forward(const Tensor& x) const;
  /// Accumulates into w.grad / b.grad, returns gradient w.r.t. x.
  Tensor backward(const Tensor& upstream, const Tensor& x);
};

Tensor relu(const Tensor& x);
Tensor relu_backward(const Tensor& upstream, const Tensor& x);

Tensor sigmoid(const Tensor& x);
double sigmoid(double x);
/// y is the cached forward output.
Tensor sigmoid_backward(const Tensor& upstream, const Tensor& y);

/// Row-wise softmax on a 2-D tensor, stabilized by row-max subtraction.
Tensor softmax_rows(const Tensor& x);
Tensor softmax_rows_backward(const Tensor& upstream, const Tensor& y);

/// Row gather. field_name only flavors the out-of-range error message.
Tensor embedding_forward(const Tensor& table, std::span<const std::size_t> ids,
                         const std::string& field_name);
void embedding_backward(const Tensor& upstream, std::span<const std::size_t> ids,
                        Tensor& table_grad);

/// Inverted dropout: training mode zeroes with probability `rate` and scales
/// survivors by 1/(1-rate); eval mode is the identity (mask left empty).
Tensor dropout_forward(const Tensor& x, double rate, Rng& rng, bool training, Tensor& mask_out);
Tensor dropout_backward(const Tensor& upstream, const Tensor& mask);

/// Batch normalization over rows of a 2-D tensor. Optional layer, off by
/// default in the model configs.
struct BatchNorm {
  Parameter gamma;  // scale
  Parameter beta;   // shift
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.9;
  double eps = 1e-5;

  struct Cache {
    Tensor x_hat;
    Tensor mean;
    Tensor var;
    Tensor x;
  };

  BatchNorm() = default;
  BatchNorm(std::string name, std::size_t width);
  Tensor forward(const Tensor& x, bool training, Cache& cache);
  Tensor backward(const Tensor& upstream, const Cache& cache);
};

/// Central finite differences on a sampled subset of coordinates (at most
/// `max_coords` per parameter) against the analytic gradients produced by
/// `loss(true)`. `loss(false)` must evaluate the same loss without touching
/// the gradients. Returns the max relative error over sampled coordinates.
double grad_check(const std::function<double(bool with_grad)>& loss,
                  std::span<Parameter* const> params, double epsilon = 1e-5,
                  std::size_t max_coords = 200, std::uint64_t seed = 7);

/// |a-f| / max(|a|, |f|, 1e-3)
double grad_rel_err(double analytic, double numeric);

}  // namespace ssctl
