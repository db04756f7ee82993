#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssctl {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DimError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct IndexError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct ParseError : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};
struct MetricError : Error {
  using Error::Error;
};

/// Dense row-major tensor of 64-bit floats.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s);

  static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<std::size_t> s, double v);
  static Tensor row_matrix(std::size_t rows, std::size_t cols,
                           std::initializer_list<double> values);

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  double& at(std::size_t r, std::size_t c);
  double at(std::size_t r, std::size_t c) const;
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  std::string shape_str() const;
  bool all_finite() const;
};

/// Learnable tensor with an accumulated gradient of matching shape.
struct Parameter {
  Tensor value;
  Tensor grad;
  std::string name;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : value(std::move(v)), grad(Tensor::zeros(value.shape)), name(std::move(n)) {}

  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }
};

/// Seeded deterministic generator. Identical seed, identical stream; all
/// distributions are hand-rolled on top of the raw 64-bit stream so the
/// output does not depend on the standard library's distribution choices.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ULL) {}

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal (Box-Muller, cached spare).
  double normal();
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Derives an independent stream seed from a base seed and stream tags.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

}  // namespace ssctl
