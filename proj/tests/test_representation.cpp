#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "trialmatch/error.hpp"
#include "trialmatch/representation.hpp"

using namespace trialmatch;

namespace {

Matrix m(std::vector<std::vector<double>> rows) { return Matrix::from_rows(rows); }

double recon_mse(const PCAModel& model, const Matrix& data) {
    const auto back = pca_reconstruct(model, pca_project(model, data));
    double acc = 0.0;
    for (std::size_t i = 0; i < data.data().size(); ++i) {
        const double d = back.data()[i] - data.data()[i];
        acc += d * d;
    }
    return acc / static_cast<double>(data.data().size());
}

}  // namespace

TEST_SUITE("representation") {

TEST_CASE("mean pooling") {
    CHECK(mean_pool(m({{1, 2}, {3, 4}})).values == std::vector<double>{2, 3});
    CHECK(mean_pool(m({{5, 6}})).values == std::vector<double>{5, 6});
    CHECK(mean_pool(Matrix(3, 4)).values == std::vector<double>(4, 0.0));
    CHECK_THROWS_AS(mean_pool(Matrix(0, 3)), DataError);

    Rng rng(3);
    for (int i = 0; i < 50; ++i) {
        auto a = oracle::random_matrix(rng, 1 + rng.below(6), 1 + rng.below(6));
        auto b = oracle::random_matrix(rng, a.rows(), a.cols());
        const double alpha = rng.normal(), beta = rng.normal();
        Matrix mix(a.rows(), a.cols());
        for (std::size_t k = 0; k < mix.data().size(); ++k) mix.data()[k] = alpha * a.data()[k] + beta * b.data()[k];
        auto lhs = mean_pool(mix).values;
        auto pa = mean_pool(a).values, pb = mean_pool(b).values;
        for (std::size_t j = 0; j < lhs.size(); ++j) CHECK(std::abs(lhs[j] - (alpha * pa[j] + beta * pb[j])) < 1e-9);
    }
}

TEST_CASE("last token") {
    CHECK(select_last_token(m({{1, 2}, {3, 4}})).values == std::vector<double>{3, 4});
    auto one = m({{7, 8, 9}});
    CHECK(select_last_token(one).values == mean_pool(one).values);
}

TEST_CASE("PCA worked example") {
    auto model = pca_fit(m({{1, 1}, {2, 2}, {3, 3}}), 1);
    CHECK(std::abs(model.eigenvalues[0] - 2.0) < 1e-9);
    CHECK(std::abs(model.components(0, 0) - 1.0 / std::sqrt(2.0)) < 1e-9);
    CHECK(std::abs(model.components(1, 0) - 1.0 / std::sqrt(2.0)) < 1e-9);
    CHECK(model.n_samples_fit == 3);

    auto z = pca_project(model, m({{1, 1}, {2, 2}, {3, 3}}));
    CHECK(std::abs(std::abs(z(0, 0)) - std::sqrt(2.0)) < 1e-9);
    CHECK(std::abs(z(1, 0)) < 1e-12);
    CHECK(std::abs(z(0, 0) + z(2, 0)) < 1e-12);
    CHECK(std::abs(pool_pca_mean(m({{1, 1}, {2, 2}, {3, 3}}), 1).values[0]) < 1e-12);

    auto one_d = pca_fit(m({{1}, {2}, {4}}), 1);
    CHECK(one_d.components(0, 0) == 1.0);
    CHECK(std::abs(one_d.eigenvalues[0] - 7.0 / 3.0) < 1e-12);
}

TEST_CASE("PCA preconditions") {
    CHECK_THROWS_AS(pca_fit(m({{1, 2}}), 1), UndefinedError);
    CHECK_THROWS_AS(pca_fit(m({{1, 2}, {3, 4}}), 2), ConfigError);
    CHECK_THROWS_AS(pca_fit(m({{1, 2}, {3, 4}}), 0), ConfigError);
    CHECK_THROWS_AS(pca_fit(m({{1, 2}, {1, 2}}), 1), UndefinedError);
    CHECK_THROWS_AS(pool_pca_mean(m({{1, 2}, {1, 2}}), 1), UndefinedError);
    CHECK_THROWS_AS(pool_pca_mean(m({{1, 2}}), 1), UndefinedError);
    CHECK_THROWS_AS(pca_fit(m({{1, NAN}, {3, 4}, {0, 1}}), 1), DataError);
    auto model = pca_fit(m({{1, 2}, {3, 5}, {0, 1}}), 1);
    CHECK_THROWS_AS(pca_project(model, m({{1, 2, 3}})), DataError);
}

TEST_CASE("PCA trace and variance identities") {
    Rng rng(200);
    Matrix data(200, 5);
    for (auto& v : data.data()) v = rng.normal();
    auto model = pca_fit(data, 5);
    auto t = oracle::covariance(data);
    double trace = 0.0, sum = 0.0;
    for (std::size_t i = 0; i < 5; ++i) trace += t(i, i);
    for (double l : model.eigenvalues) sum += l;
    CHECK(std::abs(sum - trace) < 1e-9);

    auto z = pca_project(model, data);
    for (std::size_t c = 0; c < 5; ++c) {
        double mean = 0, var = 0;
        for (std::size_t i = 0; i < z.rows(); ++i) mean += z(i, c);
        mean /= static_cast<double>(z.rows());
        for (std::size_t i = 0; i < z.rows(); ++i) var += (z(i, c) - mean) * (z(i, c) - mean);
        var /= static_cast<double>(z.rows() - 1);
        CHECK(std::abs(var - model.eigenvalues[c]) < 1e-8);
    }
    // orthonormal columns, projected mean is zero, full reconstruction
    auto wtw = matmul(model.components.transpose(), model.components);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j) CHECK(std::abs(wtw(i, j) - (i == j ? 1.0 : 0.0)) < 1e-8);
    Matrix mean_row(1, 5, model.mean);
    const auto projected_mean = pca_project(model, mean_row);
    for (double v : projected_mean.data()) CHECK(std::abs(v) < 1e-12);
    CHECK(recon_mse(model, data) < 1e-16);
    for (std::size_t i = 1; i < 5; ++i) CHECK(model.eigenvalues[i - 1] >= model.eigenvalues[i]);
}

TEST_CASE("PCA matches the eigen oracle") {
    Rng rng(4242);
    for (int trial = 0; trial < 150; ++trial) {
        const std::size_t s = 2 + rng.below(19), f = 1 + rng.below(8);
        auto data = oracle::random_matrix(rng, s, f);
        const std::size_t n = std::min(s - 1, f);
        auto model = pca_fit(data, n);
        auto ref = oracle::sym_eigen(oracle::covariance(data));
        for (std::size_t i = 0; i < n; ++i) {
            CHECK(std::abs(model.eigenvalues[i] - ref.values[i]) < 1e-6);
            for (std::size_t j = 0; j < f; ++j) CHECK(std::abs(model.components(j, i) - ref.vectors[i][j]) < 1e-6);
        }
    }
}

TEST_CASE("reconstruction error is non-increasing in components") {
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t s = 3 + rng.below(15), f = 2 + rng.below(7);
        auto data = oracle::random_matrix(rng, s, f);
        double prev = std::numeric_limits<double>::infinity();
        const std::size_t rank = std::min(s - 1, f);
        for (std::size_t n = 1; n <= rank; ++n) {
            const double e = recon_mse(pca_fit(data, n), data);
            CHECK(e <= prev + 1e-12);
            prev = e;
        }
        CHECK(prev <= 1e-8);
    }
}

TEST_CASE("rotation leaves eigenvalues unchanged") {
    Rng rng(21);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t f = 2 + rng.below(6);
        auto data = oracle::random_matrix(rng, 30, f);
        auto rot = oracle::random_rotation(rng, f);
        auto a = pca_fit(data, f), b = pca_fit(matmul(data, rot), f);
        for (std::size_t i = 0; i < f; ++i) CHECK(std::abs(a.eigenvalues[i] - b.eigenvalues[i]) < 1e-8);
        // rotated components span the same directions: |W_b^T R^T W_a| is the identity up to sign
        auto cross = matmul(b.components.transpose(), matmul(rot.transpose(), a.components));
        for (std::size_t i = 0; i < f; ++i) CHECK(std::abs(std::abs(cross(i, i)) - 1.0) < 1e-6);
    }
}

TEST_CASE("PCA json round trip") {
    auto model = pca_fit(m({{1, 0.5}, {2, 2.25}, {3, 2.75}, {0.1, -1}}), 2);
    auto back = pca_from_json(nlohmann::json::parse(pca_to_json(model).dump()));
    CHECK(back.mean == model.mean);
    CHECK(back.eigenvalues == model.eigenvalues);
    CHECK(back.components == model.components);
    CHECK(back.n_samples_fit == model.n_samples_fit);
}

TEST_CASE("dimred axes and shapes") {
    Rng rng(31);
    auto tm = oracle::random_matrix(rng, 300, 512);
    CHECK(DimRedConfig{}.n_components == 128);
    CHECK(kDefaultHiddenComponents == 128);
    auto hidden = dimred(tm, DimRedConfig{DimRedAxis::hidden, 128, FitScope::per_chunk});
    CHECK(hidden.values.size() == 128);
    CHECK(hidden.strategy == PoolingStrategy::dimred_hidden);

    auto small = oracle::random_matrix(rng, 12, 9);
    auto seq = dimred(small, DimRedConfig{DimRedAxis::sequence, 1, FitScope::per_chunk});
    CHECK(seq.values.size() == 9);
    CHECK(dimred(small, DimRedConfig{DimRedAxis::sequence, 3, FitScope::per_chunk}).values.size() == 3);
    CHECK(dimred(small, DimRedConfig{DimRedAxis::hidden, 4, FitScope::per_chunk}).values ==
          pool_pca_mean(small, 4).values);

    CHECK_THROWS_AS(dimred(small, DimRedConfig{DimRedAxis::hidden, 12, FitScope::per_chunk}), ConfigError);
    CHECK_THROWS_AS(dimred(small, DimRedConfig{DimRedAxis::sequence, 9, FitScope::per_chunk}), ConfigError);
    CHECK_THROWS_AS(dimred(small, DimRedConfig{DimRedAxis::hidden, 4, FitScope::dataset}), ConfigError);
    CHECK_THROWS_AS((DimRedConfig{DimRedAxis::sequence, 1, FitScope::dataset}.validate()), ConfigError);
}

TEST_CASE("pooling shape contract over random shapes") {
    Rng rng(55);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t l = 2 + rng.below(10), d = 2 + rng.below(10);
        auto tm = oracle::random_matrix(rng, l, d);
        const std::size_t n_h = 1 + rng.below(std::min(l - 1, d));
        const std::size_t n_s = 1 + rng.below(std::min(d - 1, l));
        CHECK(mean_pool(tm).values.size() == d);
        CHECK(select_last_token(tm).values.size() == d);
        CHECK(pool_pca_mean(tm, n_h).values.size() == n_h);
        auto seq = dimred(tm, DimRedConfig{DimRedAxis::sequence, n_s, FitScope::per_chunk});
        CHECK(seq.values.size() == (n_s == 1 ? d : n_s));
        auto hyb = hybrid_concat(seq, select_last_token(tm));
        CHECK(hyb.values.size() == seq.values.size() + d);
        CHECK(hyb.strategy == PoolingStrategy::hybrid_concat);
    }
    CHECK(hybrid_concat({{1}, PoolingStrategy::mean}, {{2, 3}, PoolingStrategy::mean}).values ==
          std::vector<double>{1, 2, 3});
    CHECK(hybrid_concat({{4, 5}, PoolingStrategy::mean}, {{}, PoolingStrategy::mean}).values ==
          std::vector<double>{4, 5});
}

TEST_CASE("strategy names parse") {
    for (auto s : {PoolingStrategy::mean, PoolingStrategy::pca_mean, PoolingStrategy::last_token,
                   PoolingStrategy::dimred_sequence, PoolingStrategy::dimred_hidden, PoolingStrategy::hybrid_concat})
        CHECK(parse_pooling(to_string(s)) == s);
    CHECK_THROWS_AS(parse_pooling("max"), ConfigError);
}

}
