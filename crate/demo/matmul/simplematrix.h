#pragma once

#include <cstddef>
#include <vector>

// Row-major dense matrix. Elements are long double on purpose: an optimizer
// that silently narrows to double fails the harness.
struct SimpleMatrix {
  using value_type = long double;

  SimpleMatrix(int rows, int cols)
      : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * cols) {}

  value_type operator()(int row, int col) const { return data_[index(row, col)]; }
  value_type& operator()(int row, int col) { return data_[index(row, col)]; }

  int rows() const { return rows_; }
  int columns() const { return cols_; }

private:
  std::size_t index(int row, int col) const {
    return static_cast<std::size_t>(row) * cols_ + col;
  }

  int rows_;
  int cols_;
  std::vector<value_type> data_;
};

SimpleMatrix operator*(const SimpleMatrix& lhs, const SimpleMatrix& rhs);
