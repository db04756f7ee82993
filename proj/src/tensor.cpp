#include "ssctl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace ssctl {

Tensor::Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  data.assign(n, 0.0);
}

Tensor Tensor::full(std::vector<std::size_t> s, double v) {
  Tensor t(std::move(s));
  std::fill(t.data.begin(), t.data.end(), v);
  return t;
}

Tensor Tensor::row_matrix(std::size_t rows, std::size_t cols,
                          std::initializer_list<double> values) {
  Tensor t({rows, cols});
  if (values.size() != rows * cols) throw DimError("row_matrix: value count mismatch");
  std::copy(values.begin(), values.end(), t.data.begin());
  return t;
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw DimError("rows() on tensor of shape " + shape_str());
  return shape[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw DimError("cols() on tensor of shape " + shape_str());
  return shape[1];
}

double& Tensor::at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
double Tensor::at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

bool Tensor::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

std::uint64_t Rng::next_u64() {
  // splitmix64
  state_ += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  double u2 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * 3.14159265358979323846 * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::size_t Rng::below(std::size_t n) {
  if (n == 0) throw IndexError("Rng::below(0)");
  return static_cast<std::size_t>(next_u64() % n);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = seed ^ (a * 0x9e3779b97f4a7c15ULL) ^ (b * 0xc2b2ae3d27d4eb4fULL);
  z = (z ^ (z >> 33)) * 0xff51afd7ed558ccdULL;
  z = (z ^ (z >> 33)) * 0xc4ceb9fe1a85ec53ULL;
  return z ^ (z >> 33);
}

}  // namespace ssctl
