#include "ssctl/ops.hpp"

#include <algorithm>
#include <cmath>

namespace ssctl {

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw DimError("matmul: incompatible shapes " + a.shape_str() + " x " + b.shape_str());
  }
  const std::size_t m = a.rows(), k = a.cols(), p = b.cols();
  Tensor out({m, p});
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = &a.data[i * k];
    double* orow = &out.data[i * p];
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      if (av == 0.0) continue;
      const double* brow = &b.data[kk * p];
      for (std::size_t j = 0; j < p; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

Linear::Linear(std::string name, std::size_t in, std::size_t out)
    : w(name + "/w", Tensor({in, out})), b(name + "/b", Tensor({out})) {}

void Linear::init_xavier(Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in_dim() + out_dim()));
  for (double& v : w.value.data) v = rng.uniform(-bound, bound);
  std::fill(b.value.data.begin(), b.value.data.end(), 0.0);
}

void Linear::init_zero() {
  std::fill(w.value.data.begin(), w.value.data.end(), 0.0);
  std::fill(b.value.data.begin(), b.value.data.end(), 0.0);
}

Tensor Linear::forward(const Tensor& x) const {
  if (x.rank() != 2 || x.cols() != in_dim()) {
    throw DimError("linear " + w.name + ": input " + x.shape_str() + " vs weight " +
                   w.value.shape_str());
  }
  Tensor out = matmul(x, w.value);
  const std::size_t o = out_dim();
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < o; ++j) out.at(i, j) += b.value[j];
  return out;
}

Tensor Linear::backward(const Tensor& upstream, const Tensor& x) {
  if (!upstream.same_shape(Tensor({x.rows(), out_dim()}))) {
    throw DimError("linear backward " + w.name + ": upstream " + upstream.shape_str());
  }
  // dw += x^T . upstream ; db += column sums ; dx = upstream . w^T
  const std::size_t bsz = x.rows(), in = in_dim(), out = out_dim();
  for (std::size_t i = 0; i < bsz; ++i) {
    const double* xr = &x.data[i * in];
    const double* ur = &upstream.data[i * out];
    for (std::size_t a = 0; a < in; ++a) {
      const double xv = xr[a];
      if (xv == 0.0) continue;
      double* gr = &w.grad.data[a * out];
      for (std::size_t j = 0; j < out; ++j) gr[j] += xv * ur[j];
    }
    for (std::size_t j = 0; j < out; ++j) b.grad[j] += ur[j];
  }
  Tensor dx({bsz, in});
  for (std::size_t i = 0; i < bsz; ++i) {
    const double* ur = &upstream.data[i * out];
    double* dr = &dx.data[i * in];
    for (std::size_t a = 0; a < in; ++a) {
      const double* wr = &w.value.data[a * out];
      double acc = 0.0;
      for (std::size_t j = 0; j < out; ++j) acc += ur[j] * wr[j];
      dr[a] = acc;
    }
  }
  return dx;
}

Tensor relu(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return out;
}

Tensor relu_backward(const Tensor& upstream, const Tensor& x) {
  if (!upstream.same_shape(x)) throw DimError("relu backward: shape mismatch");
  Tensor dx = upstream;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] <= 0.0) dx[i] = 0.0;
  }
  return dx;
}

double sigmoid(double x) {
  // branch-wise to avoid overflow for large |x|
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor sigmoid(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.data) v = sigmoid(v);
  return out;
}

Tensor sigmoid_backward(const Tensor& upstream, const Tensor& y) {
  if (!upstream.same_shape(y)) throw DimError("sigmoid backward: shape mismatch");
  Tensor dx = upstream;
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] *= y[i] * (1.0 - y[i]);
  return dx;
}

Tensor softmax_rows(const Tensor& x) {
  if (x.rank() != 2) throw DimError("softmax_rows: expected 2-D, got " + x.shape_str());
  const std::size_t n = x.rows(), c = x.cols();
  Tensor out({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    double mx = x.at(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x.at(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double e = std::exp(x.at(i, j) - mx);
      out.at(i, j) = e;
      sum += e;
    }
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) /= sum;
  }
  return out;
}

Tensor softmax_rows_backward(const Tensor& upstream, const Tensor& y) {
  if (!upstream.same_shape(y)) throw DimError("softmax backward: shape mismatch");
  const std::size_t n = y.rows(), c = y.cols();
  Tensor dx({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < c; ++j) dot += upstream.at(i, j) * y.at(i, j);
    for (std::size_t j = 0; j < c; ++j) {
      dx.at(i, j) = y.at(i, j) * (upstream.at(i, j) - dot);
    }
  }
  return dx;
}

Tensor embedding_forward(const Tensor& table, std::span<const std::size_t> ids,
                         const std::string& field_name) {
  const std::size_t v = table.rows(), d = table.cols();
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= v) {
      throw IndexError("embedding lookup for field '" + field_name + "': id " +
                       std::to_string(ids[i]) + " out of range [0, " + std::to_string(v) + ")");
    }
    const double* row = &table.data[ids[i] * d];
    std::copy(row, row + d, &out.data[i * d]);
  }
  return out;
}

void embedding_backward(const Tensor& upstream, std::span<const std::size_t> ids,
                        Tensor& table_grad) {
  const std::size_t d = table_grad.cols();
  if (upstream.rows() != ids.size() || upstream.cols() != d) {
    throw DimError("embedding backward: upstream " + upstream.shape_str());
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    double* grow = &table_grad.data[ids[i] * d];
    const double* urow = &upstream.data[i * d];
    for (std::size_t j = 0; j < d; ++j) grow[j] += urow[j];
  }
}

Tensor dropout_forward(const Tensor& x, double rate, Rng& rng, bool training, Tensor& mask_out) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ConfigError("dropout rate must be in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) {
    mask_out = Tensor();
    return x;
  }
  const double keep = 1.0 - rate;
  mask_out = Tensor(x.shape);
  Tensor out = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double m = rng.uniform() < rate ? 0.0 : 1.0 / keep;
    mask_out[i] = m;
    out[i] *= m;
  }
  return out;
}

Tensor dropout_backward(const Tensor& upstream, const Tensor& mask) {
  if (mask.empty()) return upstream;
  if (!upstream.same_shape(mask)) throw DimError("dropout backward: shape mismatch");
  Tensor dx = upstream;
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= mask[i];
  return dx;
}

BatchNorm::BatchNorm(std::string name, std::size_t width)
    : gamma(name + "/gamma", Tensor::full({width}, 1.0)),
      beta(name + "/beta", Tensor({width})),
      running_mean(Tensor({width})),
      running_var(Tensor::full({width}, 1.0)) {}

Tensor BatchNorm::forward(const Tensor& x, bool training, Cache& cache) {
  const std::size_t n = x.rows(), c = x.cols();
  Tensor mean({c}), var({c});
  if (training) {
    for (std::size_t j = 0; j < c; ++j) {
      double m = 0.0;
      for (std::size_t i = 0; i < n; ++i) m += x.at(i, j);
      m /= static_cast<double>(n);
      double v = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = x.at(i, j) - m;
        v += d * d;
      }
      v /= static_cast<double>(n);
      mean[j] = m;
      var[j] = v;
      running_mean[j] = momentum * running_mean[j] + (1.0 - momentum) * m;
      running_var[j] = momentum * running_var[j] + (1.0 - momentum) * v;
    }
  } else {
    mean = running_mean;
    var = running_var;
  }
  Tensor x_hat({n, c}), out({n, c});
  for (std::size_t j = 0; j < c; ++j) {
    const double inv = 1.0 / std::sqrt(var[j] + eps);
    for (std::size_t i = 0; i < n; ++i) {
      const double xh = (x.at(i, j) - mean[j]) * inv;
      x_hat.at(i, j) = xh;
      out.at(i, j) = gamma.value[j] * xh + beta.value[j];
    }
  }
  cache.x_hat = x_hat;
  cache.mean = mean;
  cache.var = var;
  cache.x = x;
  return out;
}

Tensor BatchNorm::backward(const Tensor& upstream, const Cache& cache) {
  const std::size_t n = upstream.rows(), c = upstream.cols();
  Tensor dx({n, c});
  for (std::size_t j = 0; j < c; ++j) {
    const double inv = 1.0 / std::sqrt(cache.var[j] + eps);
    double dgamma = 0.0, dbeta = 0.0, dxh_sum = 0.0, dxh_xhat_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double u = upstream.at(i, j);
      dgamma += u * cache.x_hat.at(i, j);
      dbeta += u;
      const double dxh = u * gamma.value[j];
      dxh_sum += dxh;
      dxh_xhat_sum += dxh * cache.x_hat.at(i, j);
    }
    gamma.grad[j] += dgamma;
    beta.grad[j] += dbeta;
    const double nn = static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double dxh = upstream.at(i, j) * gamma.value[j];
      dx.at(i, j) = inv / nn * (nn * dxh - dxh_sum - cache.x_hat.at(i, j) * dxh_xhat_sum);
    }
  }
  return dx;
}

double grad_rel_err(double analytic, double numeric) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-3});
  return std::fabs(analytic - numeric) / denom;
}

double grad_check(const std::function<double(bool)>& loss, std::span<Parameter* const> params,
                  double epsilon, std::size_t max_coords, std::uint64_t seed) {
  for (Parameter* p : params) p->zero_grad();
  const double base = loss(true);
  if (!std::isfinite(base)) throw NumericError("grad_check: non-finite loss");
  // Freeze analytic grads before perturbing.
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad);

  double max_err = 0.0;
  Rng rng(seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter* p = params[pi];
    const std::size_t n = p->value.size();
    std::vector<std::size_t> coords(n);
    for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    if (n > max_coords) {
      rng.shuffle(coords);
      coords.resize(max_coords);
    }
    for (std::size_t c : coords) {
      const double saved = p->value[c];
      p->value[c] = saved + epsilon;
      const double fp = loss(false);
      p->value[c] = saved - epsilon;
      const double fm = loss(false);
      p->value[c] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw NumericError("grad_check: non-finite loss at " + p->name);
      }
      const double numeric = (fp - fm) / (2.0 * epsilon);
      max_err = std::max(max_err, grad_rel_err(analytic[pi][c], numeric));
    }
  }
  return max_err;
}

}  // namespace ssctl
