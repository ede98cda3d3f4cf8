#include "emq/matrix.hpp"

#include <algorithm>

#include "emq/error.hpp"

namespace emq {

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t n = rows.size();
  const std::size_t d = n == 0 ? 0 : rows.begin()->size();
  Matrix m(n, d);
  std::size_t r = 0;
  for (const auto& row : rows) {
    if (row.size() != d) throw DimensionError("Matrix::from_rows: ragged rows");
    std::copy(row.begin(), row.end(), m.row(r).begin());
    ++r;
  }
  return m;
}

Matrix Matrix::gather_rows(std::span<const std::size_t> indices) const {
  Matrix out(indices.size(), cols_);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows_) throw DimensionError("Matrix::gather_rows: row index out of range");
    auto src = row(indices[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

void Matrix::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

}  // namespace emq
