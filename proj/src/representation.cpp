#include "trialmatch/representation.hpp"

#include <algorithm>
#include <cmath>

#include "trialmatch/error.hpp"

namespace trialmatch {

namespace {

void orient(Matrix& w, std::size_t col) {
    std::size_t best = 0;
    double best_abs = -1.0;
    for (std::size_t r = 0; r < w.rows(); ++r) {
        const double v = std::abs(w(r, col));
        if (v > best_abs) {
            best_abs = v;
            best = r;
        }
    }
    if (w(best, col) < 0.0)
        for (std::size_t r = 0; r < w.rows(); ++r) w(r, col) = -w(r, col);
}

Matrix centered(const Matrix& data, const std::vector<double>& mean) {
    Matrix x(data.rows(), data.cols());
    for (std::size_t i = 0; i < data.rows(); ++i)
        for (std::size_t j = 0; j < data.cols(); ++j) x(i, j) = data(i, j) - mean[j];
    return x;
}

// X^T X / denom, accumulated in a fixed order
Matrix scatter_features(const Matrix& x, double denom) {
    const std::size_t f = x.cols();
    Matrix t(f, f);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto row = x.row(i);
        for (std::size_t a = 0; a < f; ++a) {
            const double ra = row[a];
            if (ra == 0.0) continue;
            auto trow = t.row(a);
            for (std::size_t b = a; b < f; ++b) trow[b] += ra * row[b];
        }
    }
    for (std::size_t a = 0; a < f; ++a)
        for (std::size_t b = a; b < f; ++b) {
            t(a, b) /= denom;
            t(b, a) = t(a, b);
        }
    return t;
}

// X X^T / denom
Matrix scatter_samples(const Matrix& x, double denom) {
    const std::size_t s = x.rows();
    Matrix g(s, s);
    for (std::size_t i = 0; i < s; ++i)
        for (std::size_t j = i; j < s; ++j) {
            g(i, j) = dot(x.row(i), x.row(j)) / denom;
            g(j, i) = g(i, j);
        }
    return g;
}

}  // namespace

PCAModel pca_fit(const Matrix& data, std::size_t n_components) {
    const std::size_t s = data.rows();
    const std::size_t f = data.cols();
    if (s < 2) throw UndefinedError("PCA needs at least 2 samples (covariance denominator is s - 1)");
    if (f == 0) throw DataError("PCA needs at least one feature");
    if (n_components < 1 || n_components > std::min(s - 1, f))
        throw ConfigError("n_components must lie in [1, " + std::to_string(std::min(s - 1, f)) + "], got " +
                          std::to_string(n_components));
    double mean_sq = 0.0;
    for (double v : data.data()) {
        if (!std::isfinite(v)) throw DataError("PCA input contains a non-finite value");
        mean_sq += v * v;
    }
    mean_sq /= static_cast<double>(data.data().size());

    PCAModel model;
    model.n_samples_fit = s;
    model.mean.assign(f, 0.0);
    for (std::size_t i = 0; i < s; ++i)
        for (std::size_t j = 0; j < f; ++j) model.mean[j] += data(i, j);
    for (auto& m : model.mean) m /= static_cast<double>(s);

    const Matrix x = centered(data, model.mean);
    const double denom = static_cast<double>(s - 1);
    double trace = 0.0;
    for (double v : x.data()) trace += v * v;
    trace /= denom;
    if (!(trace > 1e-20 * std::max(mean_sq, 1e-300)))
        throw UndefinedError("degenerate input: zero variance, principal components undefined");

    model.components = Matrix(f, n_components);
    model.eigenvalues.resize(n_components);

    bool done = false;
    if (s < f) {
        // Gram route: nonzero spectrum of X X^T equals that of X^T X
        const auto eig = jacobi_eigen(scatter_samples(x, denom));
        const double floor = 1e-12 * std::max(eig.values.front(), 0.0);
        bool usable = true;
        for (std::size_t i = 0; i < n_components; ++i)
            if (!(eig.values[i] > floor) || eig.values[i] <= 0.0) usable = false;
        if (usable) {
            for (std::size_t i = 0; i < n_components; ++i) {
                std::vector<double> w(f, 0.0);
                for (std::size_t r = 0; r < s; ++r) {
                    const double u = eig.vectors(r, i);
                    auto row = x.row(r);
                    for (std::size_t j = 0; j < f; ++j) w[j] += u * row[j];
                }
                const double nw = norm2(w);
                for (std::size_t j = 0; j < f; ++j) model.components(j, i) = w[j] / nw;
                model.eigenvalues[i] = eig.values[i];
            }
            done = true;
        }
    }
    if (!done) {
        const auto eig = jacobi_eigen(scatter_features(x, denom));
        for (std::size_t i = 0; i < n_components; ++i) {
            model.eigenvalues[i] = std::max(eig.values[i], 0.0);
            for (std::size_t j = 0; j < f; ++j) model.components(j, i) = eig.vectors(j, i);
        }
    }
    for (std::size_t i = 0; i < n_components; ++i) orient(model.components, i);
    return model;
}

Matrix pca_project(const PCAModel& model, const Matrix& data) {
    if (data.cols() != model.n_features())
        throw DataError("pca_project: data has " + std::to_string(data.cols()) + " features, model expects " +
                        std::to_string(model.n_features()));
    return matmul(centered(data, model.mean), model.components);
}

Matrix pca_reconstruct(const PCAModel& model, const Matrix& scores) {
    if (scores.cols() != model.n_components()) throw DataError("pca_reconstruct: component count mismatch");
    Matrix out = matmul(scores, model.components.transpose());
    for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += model.mean[j];
    return out;
}

nlohmann::json pca_to_json(const PCAModel& model) {
    nlohmann::json j;
    j["mean"] = model.mean;
    j["components"] = nlohmann::json::array();
    for (std::size_t r = 0; r < model.components.rows(); ++r) {
        auto row = model.components.row(r);
        j["components"].push_back(std::vector<double>(row.begin(), row.end()));
    }
    j["eigenvalues"] = model.eigenvalues;
    j["n_samples_fit"] = model.n_samples_fit;
    return j;
}

PCAModel pca_from_json(const nlohmann::json& j) {
    PCAModel m;
    m.mean = j.at("mean").get<std::vector<double>>();
    m.components = Matrix::from_rows(j.at("components").get<std::vector<std::vector<double>>>());
    m.eigenvalues = j.at("eigenvalues").get<std::vector<double>>();
    m.n_samples_fit = j.at("n_samples_fit").get<std::size_t>();
    if (m.components.rows() != m.mean.size() || m.components.cols() != m.eigenvalues.size())
        throw DataError("PCA model JSON has inconsistent shapes");
    return m;
}

// ---------------------------------------------------------------------------

std::string_view to_string(PoolingStrategy s) {
    switch (s) {
        case PoolingStrategy::mean: return "mean";
        case PoolingStrategy::pca_mean: return "pca_mean";
        case PoolingStrategy::last_token: return "last_token";
        case PoolingStrategy::dimred_sequence: return "dimred_sequence";
        case PoolingStrategy::dimred_hidden: return "dimred_hidden";
        case PoolingStrategy::hybrid_concat: return "hybrid_concat";
    }
    return "mean";
}

PoolingStrategy parse_pooling(std::string_view s) {
    for (auto p : {PoolingStrategy::mean, PoolingStrategy::pca_mean, PoolingStrategy::last_token,
                   PoolingStrategy::dimred_sequence, PoolingStrategy::dimred_hidden, PoolingStrategy::hybrid_concat})
        if (to_string(p) == s) return p;
    throw ConfigError("unknown pooling strategy '" + std::string(s) + "'");
}

std::string_view to_string(DimRedAxis a) { return a == DimRedAxis::sequence ? "sequence" : "hidden"; }
std::string_view to_string(FitScope s) { return s == FitScope::per_chunk ? "per_chunk" : "dataset"; }

DimRedAxis parse_axis(std::string_view s) {
    if (s == "sequence") return DimRedAxis::sequence;
    if (s == "hidden") return DimRedAxis::hidden;
    throw ConfigError("dimred axis must be sequence|hidden, got '" + std::string(s) + "'");
}

FitScope parse_fit_scope(std::string_view s) {
    if (s == "per_chunk") return FitScope::per_chunk;
    if (s == "dataset") return FitScope::dataset;
    throw ConfigError("fit_scope must be per_chunk|dataset, got '" + std::string(s) + "'");
}

void DimRedConfig::validate() const {
    if (n_components == 0) throw ConfigError("dimred n_components must be positive");
    if (axis == DimRedAxis::sequence && fit_scope != FitScope::per_chunk)
        throw ConfigError("sequence-axis DimRed must be fitted per chunk");
}

PooledVector mean_pool(const TokenMatrix& m) {
    if (m.rows() == 0) throw DataError("mean_pool of an empty token matrix");
    PooledVector out{std::vector<double>(m.cols(), 0.0), PoolingStrategy::mean};
    for (std::size_t i = 0; i < m.rows(); ++i) {
        auto row = m.row(i);
        for (std::size_t j = 0; j < m.cols(); ++j) out.values[j] += row[j];
    }
    for (auto& v : out.values) v /= static_cast<double>(m.rows());
    return out;
}

PooledVector pool_pca_mean(const TokenMatrix& m, std::size_t n_components) {
    if (m.rows() < 2) throw UndefinedError("PCA pooling needs at least 2 tokens, got " + std::to_string(m.rows()));
    const auto model = pca_fit(m, n_components);
    const Matrix z = pca_project(model, m);
    auto pooled = mean_pool(z);
    pooled.strategy = PoolingStrategy::pca_mean;
    return pooled;
}

PooledVector select_last_token(const TokenMatrix& m) {
    if (m.rows() == 0) throw DataError("select_last_token of an empty token matrix");
    auto row = m.row(m.rows() - 1);
    return {std::vector<double>(row.begin(), row.end()), PoolingStrategy::last_token};
}

PooledVector dimred(const TokenMatrix& m, const DimRedConfig& cfg) {
    cfg.validate();
    if (cfg.fit_scope == FitScope::dataset)
        throw ConfigError("dataset-scope DimRed is fitted over pooled vectors, not per matrix");
    const std::size_t l = m.rows();
    const std::size_t d = m.cols();
    const std::size_t n = cfg.n_components;
    if (cfg.axis == DimRedAxis::hidden) {
        if (l < 2) throw UndefinedError("hidden-axis DimRed needs at least 2 tokens");
        if (n > std::min(l - 1, d))
            throw ConfigError("hidden-axis DimRed: n_components " + std::to_string(n) + " exceeds min(l-1, d) = " +
                              std::to_string(std::min(l - 1, d)));
        auto v = pool_pca_mean(m, n);
        v.strategy = PoolingStrategy::dimred_hidden;
        return v;
    }
    // sequence axis: samples are the d per-dimension profiles over token positions
    if (d < 2) throw UndefinedError("sequence-axis DimRed needs d_hidden >= 2");
    if (n > std::min(d - 1, l))
        throw ConfigError("sequence-axis DimRed: n_components " + std::to_string(n) + " exceeds min(d-1, l) = " +
                          std::to_string(std::min(d - 1, l)));
    const Matrix profiles = m.transpose();
    const auto model = pca_fit(profiles, n);
    const Matrix z = pca_project(model, profiles);  // d x n
    PooledVector out;
    out.strategy = PoolingStrategy::dimred_sequence;
    if (n == 1) {
        out.values = z.column(0);
    } else {
        out.values = mean_pool(z).values;
    }
    return out;
}

PooledVector hybrid_concat(const PooledVector& a, const PooledVector& b) {
    PooledVector out;
    out.strategy = PoolingStrategy::hybrid_concat;
    out.values = a.values;
    out.values.insert(out.values.end(), b.values.begin(), b.values.end());
    return out;
}

}  // namespace trialmatch
