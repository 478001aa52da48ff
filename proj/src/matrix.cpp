#include "bgm/matrix.hpp"

#include <algorithm>

#include "bgm/errors.hpp"

namespace bgm {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("matrix storage does not match " + std::to_string(rows_) + "x" +
                     std::to_string(cols_));
  }
}

Matrix Matrix::column(std::span<const double> values) {
  return Matrix(values.size(), 1, std::vector<double>(values.begin(), values.end()));
}

Matrix Matrix::row(std::span<const double> values) {
  return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

Vec Matrix::col(std::size_t c) const {
  Vec out(rows_);
  for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
  return out;
}

Vec Matrix::row_vec(std::size_t r) const {
  auto s = row_span(r);
  return Vec(s.begin(), s.end());
}

void Matrix::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Matrix select_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(rows.size(), m.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    auto src = m.row_span(rows[k]);
    std::copy(src.begin(), src.end(), out.row_span(k).begin());
  }
  return out;
}

Matrix hcat(const Matrix& a, const Matrix& b) {
  if (a.cols() == 0) return b;
  if (b.cols() == 0) return a;
  if (a.rows() != b.rows()) throw ShapeError("hcat: row count mismatch");
  Matrix out(a.rows(), a.cols() + b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto dst = out.row_span(r);
    auto ra = a.row_span(r);
    auto rb = b.row_span(r);
    std::copy(ra.begin(), ra.end(), dst.begin());
    std::copy(rb.begin(), rb.end(), dst.begin() + static_cast<std::ptrdiff_t>(a.cols()));
  }
  return out;
}

Matrix slice_cols(const Matrix& m, std::size_t begin, std::size_t count) {
  if (begin + count > m.cols()) throw ShapeError("slice_cols: range exceeds column count");
  Matrix out(m.rows(), count);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < count; ++c) out(r, c) = m(r, begin + c);
  }
  return out;
}

}  // namespace bgm
