#include <algorithm>
#include <numeric>

#include "trialmatch/classifiers.hpp"
#include "trialmatch/error.hpp"
#include "trialmatch/util.hpp"

namespace trialmatch {

LinearSVM train_svm(const Matrix& x, std::span<const int> y, const SvmConfig& cfg) {
    if (x.rows() != y.size()) throw DataError("feature rows and labels differ in length");
    require_both_classes(y);
    if (!(cfg.lambda > 0.0) || !(cfg.learning_rate > 0.0) || cfg.epochs == 0)
        throw ConfigError("svm needs positive lambda, learning_rate and epochs");

    LinearSVM svm;
    svm.w.assign(x.cols(), 0.0);
    svm.lambda = cfg.lambda;
    Rng rng(cfg.seed);
    std::vector<std::size_t> order(x.rows());
    std::iota(order.begin(), order.end(), 0);
    std::uint64_t t = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t i : order) {
            ++t;
            const double eta = cfg.learning_rate / (1.0 + cfg.lambda * cfg.learning_rate * static_cast<double>(t));
            const double label = y[i] ? 1.0 : -1.0;
            auto xi = x.row(i);
            const double margin = label * (dot(svm.w, xi) + svm.b);
            const double shrink = 1.0 - eta * cfg.lambda;
            for (auto& w : svm.w) w *= shrink;
            if (margin < 1.0) {
                for (std::size_t j = 0; j < svm.w.size(); ++j) svm.w[j] += eta * label * xi[j];
                svm.b += eta * label;
            }
        }
    }
    return svm;
}

double svm_margin(const LinearSVM& svm, std::span<const double> x) {
    if (x.size() != svm.w.size())
        throw DataError("svm expects " + std::to_string(svm.w.size()) + " features, got " + std::to_string(x.size()));
    return dot(svm.w, x) + svm.b;
}

double svm_hinge_loss(const LinearSVM& svm, const Matrix& x, std::span<const int> y) {
    double loss = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const double label = y[i] ? 1.0 : -1.0;
        loss += std::max(0.0, 1.0 - label * svm_margin(svm, x.row(i)));
    }
    return loss / static_cast<double>(x.rows());
}

}  // namespace trialmatch
