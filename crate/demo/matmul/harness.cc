// Regression checks and timing for operator*(SimpleMatrix, SimpleMatrix).
//
// Exit status 0 plus a "SCORE: <ms>" line means the candidate is correct;
// any failure prints a message meant to be read by the model and exits 1.

#include "simplematrix.h"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <stdexcept>

namespace {

[[noreturn]] void fail(const char* msg) {
  std::printf("%s\n", msg);
  std::exit(1);
}

SimpleMatrix filled(int rows, int cols, int seed) {
  SimpleMatrix m{rows, cols};
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j)
      m(i, j) = static_cast<SimpleMatrix::value_type>((i * 7 + j * 3 + seed) % 19) - 9;
  return m;
}

SimpleMatrix reference(const SimpleMatrix& a, const SimpleMatrix& b) {
  SimpleMatrix r{a.rows(), b.columns()};
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < b.columns(); ++j) {
      SimpleMatrix::value_type s = 0;
      for (int k = 0; k < a.columns(); ++k)
        s += a(i, k) * b(k, j);
      r(i, j) = s;
    }
  return r;
}

// Small integer entries keep every partial sum exact, so any summation order must match.
void check_product(int m, int k, int n, const char* what) {
  SimpleMatrix a = filled(m, k, 1), b = filled(k, n, 5);
  SimpleMatrix got = a * b;
  SimpleMatrix want = reference(a, b);
  if (got.rows() != m || got.columns() != n) {
    std::printf("%s: result has shape %dx%d, expected %dx%d\n", what, got.rows(), got.columns(), m, n);
    std::exit(1);
  }
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      if (got(i, j) != want(i, j)) {
        std::printf("%s: wrong value at (%d,%d): got %Lg, expected %Lg\n", what, i, j,
                    static_cast<long double>(got(i, j)), static_cast<long double>(want(i, j)));
        std::exit(1);
      }
}

// 1 + 2^-60 is exact in x87 extended precision but rounds to 1 in double.
void check_datatype() {
  if (std::numeric_limits<SimpleMatrix::value_type>::digits < 62)
    return;
  const SimpleMatrix::value_type eps = std::ldexp(1.0L, -60);
  const int m = 3, k = 5, n = 7;
  SimpleMatrix a{m, k}, b{k, n};
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < k; ++j)
      a(i, j) = 1 + eps;
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < n; ++j)
      b(i, j) = 1;
  SimpleMatrix r = a * b;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      if (r(i, j) != k * (1 + eps))
        fail("datatype too short; use SimpleMatrix::value_type");
}

void check_exception() {
  SimpleMatrix a{3, 4}, b{5, 3};
  try {
    SimpleMatrix r = a * b;
    (void)r;
  } catch (const std::runtime_error&) {
    return;
  } catch (...) {
    fail("mismatched sizes must throw std::runtime_error, but another exception type was thrown");
  }
  fail("mismatched sizes (3x4 * 5x3) must throw std::runtime_error, but nothing was thrown");
}

}  // namespace

int main() {
  // prime dimensions catch unrolling and blocking remainders
  check_product(1, 1, 1, "1x1 * 1x1");
  check_product(37, 41, 43, "prime dimensions 37x41 * 41x43");
  check_product(2, 3, 5, "small prime dimensions 2x3 * 3x5");
  check_product(17, 1, 13, "inner dimension 1");
  check_datatype();
  check_exception();

  int n = 199;
  if (const char* env = std::getenv("MATMUL_N"))
    n = std::atoi(env);
  SimpleMatrix a = filled(n, n, 2), b = filled(n, n, 3);
  double total_ms = 0;
  volatile long double sink = 0;
  for (int rep = 0; rep < 10; ++rep) {
    auto t0 = std::chrono::steady_clock::now();
    SimpleMatrix r = a * b;
    auto t1 = std::chrono::steady_clock::now();
    sink = sink + r(rep % n, (rep * 7) % n);
    total_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
  }
  std::printf("all tests passed\n");
  std::printf("SCORE: %.0f\n", total_ms < 1 ? 1.0 : total_ms);
  return 0;
}
