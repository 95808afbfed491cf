#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "trialmatch/embedding.hpp"
#include "trialmatch/linalg.hpp"

namespace trialmatch {

inline constexpr std::size_t kDefaultHiddenComponents = 128;

/// Principal components of an s x f data matrix.
struct PCAModel {
    std::vector<double> mean;         // length f
    Matrix components;                // f x n_components, orthonormal columns
    std::vector<double> eigenvalues;  // non-increasing
    std::size_t n_samples_fit = 0;

    std::size_t n_features() const noexcept { return mean.size(); }
    std::size_t n_components() const noexcept { return eigenvalues.size(); }
};

/// Covariance uses the (s - 1) denominator. Each component is oriented so its
/// largest-magnitude entry is positive. When s < f the eigenproblem is solved
/// on the s x s Gram matrix instead of the f x f covariance.
PCAModel pca_fit(const Matrix& data, std::size_t n_components);

/// (data - mean) W
Matrix pca_project(const PCAModel& model, const Matrix& data);

/// Z W^T + mean
Matrix pca_reconstruct(const PCAModel& model, const Matrix& scores);

nlohmann::json pca_to_json(const PCAModel& model);
PCAModel pca_from_json(const nlohmann::json& j);

enum class PoolingStrategy { mean, pca_mean, last_token, dimred_sequence, dimred_hidden, hybrid_concat };

std::string_view to_string(PoolingStrategy s);
PoolingStrategy parse_pooling(std::string_view s);

struct PooledVector {
    std::vector<double> values;
    PoolingStrategy strategy = PoolingStrategy::mean;
};

enum class DimRedAxis { sequence, hidden };
enum class FitScope { per_chunk, dataset };

std::string_view to_string(DimRedAxis a);
std::string_view to_string(FitScope s);
DimRedAxis parse_axis(std::string_view s);
FitScope parse_fit_scope(std::string_view s);

struct DimRedConfig {
    DimRedAxis axis = DimRedAxis::hidden;
    std::size_t n_components = kDefaultHiddenComponents;
    FitScope fit_scope = FitScope::per_chunk;

    void validate() const;
    bool operator==(const DimRedConfig&) const = default;
};

PooledVector mean_pool(const TokenMatrix& m);

/// Per-matrix PCA over the token rows, projected, then averaged over rows.
/// Note that the projected rows are centered, so the average is zero up to
/// rounding; the hidden-axis variant used for classification fits at dataset scope.
PooledVector pool_pca_mean(const TokenMatrix& m, std::size_t n_components);

PooledVector select_last_token(const TokenMatrix& m);

/// Per-matrix DimRed along either axis. Dataset-scope configs are rejected here;
/// they are fitted over pooled vectors by the harness.
PooledVector dimred(const TokenMatrix& m, const DimRedConfig& cfg);

PooledVector hybrid_concat(const PooledVector& a, const PooledVector& b);

}  // namespace trialmatch
