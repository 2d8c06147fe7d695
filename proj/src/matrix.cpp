#include "loraxs/matrix.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include <fmt/format.h>

#include "loraxs/errors.hpp"

namespace loraxs {

Matrix::Matrix(std::size_t rows, std::size_t cols) : Matrix(rows, cols, std::vector<double>(rows * cols, 0.0)) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows == 0 || cols == 0) {
        throw ShapeError(fmt::format("matrix dimensions must be positive, got {}x{}", rows, cols));
    }
    if (data_.size() != rows * cols) {
        throw ShapeError(fmt::format("matrix {}x{} needs {} entries, got {}", rows, cols, rows * cols, data_.size()));
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw ShapeError("ragged rows in matrix literal");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
}

Matrix Matrix::diagonal(std::span<const double> values) {
    Matrix m(values.size(), values.size());
    for (std::size_t i = 0; i < values.size(); ++i) m(i, i) = values[i];
    return m;
}

std::vector<double> Matrix::column(std::size_t c) const {
    std::vector<double> out(rows_);
    for (std::size_t i = 0; i < rows_; ++i) out[i] = (*this)(i, c);
    return out;
}

void Matrix::set_column(std::size_t c, std::span<const double> values) {
    for (std::size_t i = 0; i < rows_; ++i) (*this)(i, c) = values[i];
}

Matrix Matrix::transpose() const {
    if (empty()) return {};
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
        for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
}

Matrix Matrix::column_block(std::size_t first, std::size_t count) const {
    if (first + count > cols_ || count == 0) {
        throw ShapeError(fmt::format("column block [{}, {}) out of range for {}", first, first + count, shape_string()));
    }
    Matrix out(rows_, count);
    for (std::size_t i = 0; i < rows_; ++i)
        for (std::size_t j = 0; j < count; ++j) out(i, j) = (*this)(i, first + j);
    return out;
}

Matrix Matrix::gather_columns(std::span<const std::size_t> indices) const {
    Matrix out(rows_, indices.size());
    for (std::size_t j = 0; j < indices.size(); ++j) {
        if (indices[j] >= cols_) throw ShapeError(fmt::format("column {} out of range for {}", indices[j], shape_string()));
        for (std::size_t i = 0; i < rows_; ++i) out(i, j) = (*this)(i, indices[j]);
    }
    return out;
}

bool Matrix::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string Matrix::shape_string() const { return fmt::format("{}x{}", rows_, cols_); }

Matrix& Matrix::operator+=(const Matrix& other) {
    if (rows_ != other.rows_ || cols_ != other.cols_) {
        throw ShapeError(fmt::format("cannot add {} and {}", shape_string(), other.shape_string()));
    }
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
    if (rows_ != other.rows_ || cols_ != other.cols_) {
        throw ShapeError(fmt::format("cannot subtract {} from {}", other.shape_string(), shape_string()));
    }
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
}

Matrix& Matrix::operator*=(double scale) noexcept {
    for (auto& v : data_) v *= scale;
    return *this;
}

bool operator==(const Matrix& a, const Matrix& b) noexcept {
    if (a.rows_ != b.rows_ || a.cols_ != b.cols_) return false;
    // Bit comparison so that -0.0 != 0.0 and NaN payloads are distinguished.
    return std::equal(a.data_.begin(), a.data_.end(), b.data_.begin(), [](double x, double y) {
        return std::bit_cast<std::uint64_t>(x) == std::bit_cast<std::uint64_t>(y);
    });
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(double scale, Matrix a) { return a *= scale; }

double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(fmt::format("cannot compare {} with {}", a.shape_string(), b.shape_string()));
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
    return worst;
}

Matrix read_matrix_text(std::istream& in) {
    std::vector<double> data;
    std::size_t cols = 0;
    std::size_t rows = 0;
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::size_t count = 0;
        std::string token;
        while (ls >> token) {
            double v = 0.0;
            try {
                std::size_t used = 0;
                v = std::stod(token, &used);
                if (used != token.size()) throw std::invalid_argument(token);
            } catch (const std::exception&) {
                throw FormatError(fmt::format("line {}: '{}' is not a number", rows + 1, token));
            }
            if (!std::isfinite(v)) throw FormatError(fmt::format("line {}: non-finite entry", rows + 1));
            data.push_back(v);
            ++count;
        }
        if (count == 0) continue;
        if (rows == 0) cols = count;
        if (count != cols) {
            throw FormatError(fmt::format("row {} has {} entries, expected {}", rows + 1, count, cols));
        }
        ++rows;
    }
    if (rows == 0) throw FormatError("matrix text contains no rows");
    return Matrix(rows, cols, std::move(data));
}

Matrix read_matrix_text_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError(fmt::format("cannot open '{}'", path));
    return read_matrix_text(in);
}

void write_matrix_text(std::ostream& out, const Matrix& m) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            if (j) out << ' ';
            out << fmt::format("{:.17g}", m(i, j));
        }
        out << '\n';
    }
}

}  // namespace loraxs
