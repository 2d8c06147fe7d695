#pragma once

#include <cstddef>
#include <initializer_list>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace loraxs {

// Dense row-major matrix of doubles. A default-constructed matrix is the
// empty 0x0 value; every other matrix has at least one row and column.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix identity(std::size_t n);
    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
    static Matrix diagonal(std::span<const double> values);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::vector<double> column(std::size_t c) const;
    void set_column(std::size_t c, std::span<const double> values);

    Matrix transpose() const;
    // Columns [first, first + count) as a new matrix.
    Matrix column_block(std::size_t first, std::size_t count) const;
    // Selected columns in the given order.
    Matrix gather_columns(std::span<const std::size_t> indices) const;

    bool all_finite() const noexcept;
    std::string shape_string() const;

    Matrix& operator+=(const Matrix& other);
    Matrix& operator-=(const Matrix& other);
    Matrix& operator*=(double scale) noexcept;

    // Bitwise comparison of shape and every entry.
    friend bool operator==(const Matrix& a, const Matrix& b) noexcept;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(double scale, Matrix a);

double max_abs_diff(const Matrix& a, const Matrix& b);

// Whitespace-delimited text, one row per line. Blank lines are skipped; every
// row must have the same number of entries and every entry must be finite.
Matrix read_matrix_text(std::istream& in);
Matrix read_matrix_text_file(const std::string& path);
void write_matrix_text(std::ostream& out, const Matrix& m);

}  // namespace loraxs
