#include "mcrm/numkit.hpp"

#include <doctest.h>

#include <cmath>

using namespace mcrm;

TEST_CASE("matvec basics") {
  Matrix identity = Matrix::Identity(2, 2);
  Vector x(2);
  x << 3, 4;
  CHECK(matvec(identity, x).isApprox(x, 0.0));

  Matrix zero = Matrix::Zero(3, 2);
  Vector ones = Vector::Ones(2);
  CHECK(matvec(zero, ones).isZero(0.0));

  Matrix w(2, 2);
  w << 1, 2, 3, 4;
  Vector expect(2);
  // scalar-loop oracle
  for (Index r = 0; r < 2; ++r) {
    Real sum = 0;
    for (Index c = 0; c < 2; ++c) sum += w(r, c) * ones[c];
    expect[r] = sum;
  }
  const Vector got = matvec(w, ones);
  CHECK(got[0] == doctest::Approx(3.0));
  CHECK(got[1] == doctest::Approx(7.0));
  CHECK(got.isApprox(expect, 1e-15));
}

TEST_CASE("matvec rejects mismatched shapes") {
  Matrix w = Matrix::Zero(3, 2);
  Vector x = Vector::Zero(4);
  CHECK_THROWS_WITH_AS(matvec(w, x),
                       "matvec: dimension mismatch: matrix is 3x2, vector has length 4",
                       std::invalid_argument);
}

TEST_CASE("matvec linearity on random instances") {
  Rng rng(7);
  for (int round = 0; round < 25; ++round) {
    const Index rows = 1 + static_cast<Index>(rng.next_below(16));
    const Index cols = 1 + static_cast<Index>(rng.next_below(16));
    const Matrix a = rand_uniform_matrix(rng, -2.0, 2.0, rows, cols);
    const Vector x = rand_uniform(rng, -2.0, 2.0, cols);
    const Vector y = rand_uniform(rng, -2.0, 2.0, cols);
    const Vector joint = matvec(a, x + y);
    const Vector split = matvec(a, x) + matvec(a, y);
    CHECK((joint - split).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("hadamard") {
  Vector a(2), b(2);
  a << 1, 2;
  b << 0, 0;
  CHECK(hadamard(a, b).isZero(0.0));
  b << 1, 1;
  CHECK(hadamard(a, b).isApprox(a, 0.0));

  Vector c(2), d(2);
  c << 0.5, -2;
  d << 2, 0.5;
  const Vector got = hadamard(c, d);
  for (Index i = 0; i < 2; ++i) {
    CHECK(got[i] == doctest::Approx(c[i] * d[i]));
  }
  CHECK(got[0] == doctest::Approx(1.0));
  CHECK(got[1] == doctest::Approx(-1.0));

  Vector e = Vector::Zero(3);
  CHECK_THROWS_AS(hadamard(a, e), std::invalid_argument);
}

TEST_CASE("concat") {
  Vector a(1), b(1);
  a << 1;
  b << 2;
  Vector ab = concat(a, b);
  CHECK(ab.size() == 2);
  CHECK(ab[0] == 1);
  CHECK(ab[1] == 2);

  Vector empty(0), five(1);
  five << 5;
  const Vector ef = concat(empty, five);
  CHECK(ef.size() == 1);
  CHECK(ef[0] == 5);

  Vector c(2), d(2);
  c << 1, 2;
  d << 3, 4;
  const Vector cd = concat(c, d);
  CHECK(cd.size() == 4);
  // prefix/suffix slicing round-trips exactly
  CHECK(cd.head(2) == c);
  CHECK(cd.tail(2) == d);
}

TEST_CASE("activations") {
  Vector zero(1);
  zero << 0;
  CHECK(sigmoid(zero)[0] == doctest::Approx(0.5));
  CHECK(tanh(zero)[0] == doctest::Approx(0.0));

  Vector big(2);
  big << 1e3, -1e3;
  const Vector s = sigmoid(big);
  CHECK(std::abs(s[0] - 1.0) <= 1e-12);
  CHECK(s[1] >= 0.0);
  CHECK(std::isfinite(s[0]));
  CHECK(std::isfinite(s[1]));
  const Vector t = tanh(big);
  CHECK(std::abs(t[0] - 1.0) <= 1e-12);
  CHECK(std::isfinite(t[1]));
}

TEST_CASE("sigmoid symmetry property") {
  Rng rng(11);
  const Vector x = rand_uniform(rng, -50.0, 50.0, 200);
  const Vector sum = sigmoid(x) + sigmoid((-x).eval());
  CHECK((sum.array() - 1.0).abs().maxCoeff() <= 1e-12);
}

TEST_CASE("rand_uniform determinism and range") {
  Rng a(42), b(42);
  const Vector va = rand_uniform(a, 0.0, 1.0, 3);
  const Vector vb = rand_uniform(b, 0.0, 1.0, 3);
  CHECK(va == vb);  // bit-identical

  Rng c(42);
  CHECK(rand_uniform(c, 0.0, 1.0, 0).size() == 0);

  Rng d(9001);
  const Vector big = rand_uniform(d, -1.0, 3.0, 100000);
  CHECK(big.minCoeff() >= -1.0);
  CHECK(big.maxCoeff() < 3.0);
  CHECK(std::abs(big.mean() - 1.0) <= 0.01);

  Rng e(1);
  CHECK_THROWS_AS(rand_uniform(e, 1.0, 1.0, 3), std::invalid_argument);
}

TEST_CASE("rng streams are seed-determined and splittable") {
  Rng a(123), b(123);
  for (int i = 0; i < 64; ++i) {
    CHECK(a.next_u64() == b.next_u64());
  }
  Rng parent(5);
  Rng child = parent.split();
  CHECK(child.state() != parent.state());
}
