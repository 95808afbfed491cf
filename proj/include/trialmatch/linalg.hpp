#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace trialmatch {

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix identity(std::size_t n);
    static Matrix from_rows(const std::vector<std::vector<double>>& rows);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<double> column(std::size_t c) const;

    const std::vector<double>& data() const noexcept { return data_; }
    std::vector<double>& data() noexcept { return data_; }

    Matrix transpose() const;

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);

struct EigenDecomposition {
    std::vector<double> values;  // non-increasing
    Matrix vectors;              // column i pairs with values[i]
    int sweeps = 0;
    double off_diagonal = 0.0;   // max |off-diagonal| at convergence
};

/// Cyclic Jacobi eigen-solver for a symmetric matrix. Iterates until the
/// largest off-diagonal magnitude drops below rel_tol * ||a||_F.
EigenDecomposition jacobi_eigen(const Matrix& a, double rel_tol = 1e-12, int max_sweeps = 100);

}  // namespace trialmatch
