#include "trialmatch/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "trialmatch/error.hpp"

namespace trialmatch {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) throw DataError("matrix data size does not match shape");
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::from_rows(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) return {};
    Matrix m(rows.size(), rows.front().size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != m.cols()) throw DataError("ragged rows");
        std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
    }
    return m;
}

std::vector<double> Matrix::column(std::size_t c) const {
    std::vector<double> out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
    return out;
}

Matrix Matrix::transpose() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw DataError("matmul shape mismatch");
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto orow = out.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            auto brow = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
    // four fixed lanes let the compiler vectorize without reassociating freely
    const std::size_t n = a.size();
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

EigenDecomposition jacobi_eigen(const Matrix& input, double rel_tol, int max_sweeps) {
    const std::size_t n = input.rows();
    if (n != input.cols()) throw DataError("jacobi_eigen requires a square matrix");

    // work on a symmetrized copy
    Matrix a(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) a(i, j) = 0.5 * (input(i, j) + input(j, i));
    Matrix vt = Matrix::identity(n);  // eigenvectors as rows, so rotations touch contiguous memory

    double frob = 0.0;
    for (double x : a.data()) frob += x * x;
    frob = std::sqrt(frob);
    const double threshold = rel_tol * frob;

    auto max_off = [&] {
        double m = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) m = std::max(m, std::abs(a(i, j)));
        return m;
    };

    EigenDecomposition out;
    double off = max_off();
    int sweep = 0;
    while (off > threshold && off > 0.0 && sweep < max_sweeps) {
        ++sweep;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double app = a(p, p);
                const double aqq = a(q, q);
                // rotation angle that annihilates a(p,q)
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;

                auto row_p = a.row(p);
                auto row_q = a.row(q);
                for (std::size_t k = 0; k < n; ++k) {
                    if (k == p || k == q) continue;
                    const double apk = row_p[k];
                    const double aqk = row_q[k];
                    row_p[k] = c * apk - s * aqk;
                    row_q[k] = s * apk + c * aqk;
                    a(k, p) = row_p[k];
                    a(k, q) = row_q[k];
                }
                a(p, p) = app - t * apq;
                a(q, q) = aqq + t * apq;
                a(p, q) = 0.0;
                a(q, p) = 0.0;
                auto vp = vt.row(p);
                auto vq = vt.row(q);
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = vp[k];
                    const double vkq = vq[k];
                    vp[k] = c * vkp - s * vkq;
                    vq[k] = s * vkp + c * vkq;
                }
            }
        }
        off = max_off();
    }
    if (off > threshold && off > 0.0)
        throw UndefinedError("jacobi_eigen did not converge in " + std::to_string(max_sweeps) + " sweeps");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });

    out.values.resize(n);
    out.vectors = Matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        out.values[i] = a(order[i], order[i]);
        for (std::size_t k = 0; k < n; ++k) out.vectors(k, i) = vt(order[i], k);
    }
    out.sweeps = sweep;
    out.off_diagonal = off;
    return out;
}

}  // namespace trialmatch
