#pragma once

// Dense math core. Eigen supplies the storage and products; everything here
// is the small deterministic layer the rest of the library is written
// against: shape-checked products, elementwise ops, saturating activations,
// and a seeded PRNG whose stream is identical on every platform.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace mcrm {

using Real = double;
using Index = Eigen::Index;

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using Vector = Vec<Real>;
using Matrix = Mat<Real>;

inline void check_matvec_shapes(const Matrix& w, const Vector& x) {
  if (w.cols() != x.size()) {
    throw std::invalid_argument("matvec: dimension mismatch: matrix is " +
                                std::to_string(w.rows()) + "x" +
                                std::to_string(w.cols()) + ", vector has length " +
                                std::to_string(x.size()));
  }
}

inline Vector matvec(const Matrix& w, const Vector& x) {
  check_matvec_shapes(w, x);
  return w * x;
}

inline Vector hadamard(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("hadamard: length mismatch: " +
                                std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()));
  }
  return a.cwiseProduct(b);
}

inline Vector concat(const Vector& a, const Vector& b) {
  Vector out(a.size() + b.size());
  out.head(a.size()) = a;
  out.tail(b.size()) = b;
  return out;
}

// Saturates cleanly for |x| up to ~1e3 and beyond: the two branches never
// exponentiate a positive argument.
inline Real sigmoid_scalar(Real x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const Real e = std::exp(x);
  return e / (1.0 + e);
}

inline Real tanh_scalar(Real x) { return std::tanh(x); }

// Elementwise activations as expression-friendly free functions. Scalar
// libm calls per coefficient keep results identical across instruction
// sets, which the bit-reproducibility guarantees rely on.
template <typename Derived>
auto sigmoid(const Eigen::MatrixBase<Derived>& x) {
  return x.unaryExpr([](Real v) { return sigmoid_scalar(v); }).eval();
}

template <typename Derived>
auto tanh(const Eigen::MatrixBase<Derived>& x) {
  return x.unaryExpr([](Real v) { return tanh_scalar(v); }).eval();
}

// SplitMix64: a fixed splittable generator. One 64-bit word of state, a
// documented constant stream per seed, and split() derives an independent
// child stream. Checkpoints store the single state word.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  Real next_real() { return static_cast<Real>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) {
    return static_cast<std::uint64_t>(next_real() * static_cast<Real>(n));
  }

  Rng split() { return Rng(next_u64()); }

  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; }

 private:
  std::uint64_t state_;
};

inline Vector rand_uniform(Rng& rng, Real lo, Real hi, Index n) {
  if (!(lo < hi)) {
    throw std::invalid_argument("rand_uniform: requires lo < hi, got lo=" +
                                std::to_string(lo) + " hi=" + std::to_string(hi));
  }
  Vector out(n);
  for (Index i = 0; i < n; ++i) {
    out[i] = lo + rng.next_real() * (hi - lo);
  }
  return out;
}

inline Matrix rand_uniform_matrix(Rng& rng, Real lo, Real hi, Index rows, Index cols) {
  if (!(lo < hi)) {
    throw std::invalid_argument("rand_uniform_matrix: requires lo < hi");
  }
  Matrix out(rows, cols);
  // Row-major fill order so the draw sequence is independent of storage.
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) {
      out(r, c) = lo + rng.next_real() * (hi - lo);
    }
  }
  return out;
}

}  // namespace mcrm
