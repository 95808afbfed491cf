#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "trialmatch/classifiers.hpp"
#include "trialmatch/error.hpp"
#include "trialmatch/metrics.hpp"

using namespace trialmatch;

namespace {

// Two blobs centred at (+-1.5, +-1.5) clipped so the gap between classes is at least 1.
void blobs(std::uint64_t seed, std::size_t n, Matrix& x, std::vector<int>& y) {
    Rng rng(seed);
    x = Matrix(n, 2);
    y.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = static_cast<int>(i % 2);
        const double c = y[i] ? 1.5 : -1.5;
        for (std::size_t j = 0; j < 2; ++j) x(i, j) = c + std::clamp(0.4 * rng.normal(), -0.9, 0.9);
    }
}

double accuracy(const TrainedClassifier& model, const Matrix& x, const std::vector<int>& y) {
    auto p = predict_proba(model, x);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < y.size(); ++i) ok += (p[i] >= 0.5) == (y[i] == 1);
    return static_cast<double>(ok) / static_cast<double>(y.size());
}

bool same_tree(const DecisionTree& a, const DecisionTree& b) {
    if (a.nodes.size() != b.nodes.size() || a.depth != b.depth) return false;
    for (std::size_t i = 0; i < a.nodes.size(); ++i) {
        const auto &u = a.nodes[i], &v = b.nodes[i];
        if (u.feature != v.feature || u.threshold != v.threshold || u.left != v.left || u.right != v.right ||
            u.probability != v.probability || u.n_samples != v.n_samples)
            return false;
    }
    return true;
}

}  // namespace

TEST_SUITE("classifiers") {

TEST_CASE("bce examples") {
    CHECK(std::abs(bce_loss(std::vector<double>{0.5}, std::vector<int>{1}) - std::log(2.0)) < 1e-6);
    CHECK(std::abs(bce_loss(std::vector<double>{0.9, 0.1}, std::vector<int>{1, 0}) - 0.210721) < 1e-6);
    const double perfect = bce_loss(std::vector<double>{1.0, 0.0, 1.0}, std::vector<int>{1, 0, 1});
    CHECK(perfect < 1e-6 * 3);
    CHECK(perfect <= 3 * -std::log(1.0 - 1e-7) + 1e-15);
    CHECK_THROWS_AS(bce_loss(std::vector<double>{0.5}, std::vector<int>{1, 0}), DataError);
}

TEST_CASE("forward pass examples") {
    auto zero = make_mlp({3, 4, 1});
    CHECK(mlp_forward(zero, std::vector<double>{1, -2, 3}) == 0.5);
    auto unit = make_mlp({1, 1});
    unit.params[unit.bias_offset(0)] = 2.0;
    CHECK(std::abs(mlp_forward(unit, std::vector<double>{5.0}) - 0.880797) < 1e-6);
    auto net = init_mlp({4, 8, 1}, 3);
    const double p = mlp_forward(net, std::vector<double>{10, -10, 3, 1});
    CHECK(p > 0.0);
    CHECK(p < 1.0);
    CHECK_THROWS_AS(mlp_forward(net, std::vector<double>{1, 2}), DataError);
}

TEST_CASE("gradient of a single logistic unit") {
    auto unit = make_mlp({1, 1});
    Matrix x(1, 1, 1.0);
    std::vector<int> y{1};
    std::vector<std::size_t> batch{0};
    auto g = mlp_grad(unit, x, y, batch);
    CHECK(g.grad[unit.bias_offset(0)] == doctest::Approx(-0.5));
    CHECK(g.grad[unit.weight_offset(0)] == doctest::Approx(-0.5));

    // saturated beyond the clamp: the loss is flat but the gradient still flows
    unit.params[unit.bias_offset(0)] = -40.0;
    auto sat = mlp_grad(unit, x, y, batch);
    CHECK(sat.grad[unit.bias_offset(0)] < -0.99);
}

TEST_CASE("backprop agrees with central differences") {
    for (std::uint64_t seed = 1; seed <= 50; ++seed) {
        auto r = oracle::gradient_check(seed);
        CHECK(r.checked > 0);
        CHECK(r.max_rel_error < 1e-4);
    }
}

TEST_CASE("adam update rule") {
    AdamConfig cfg;
    std::vector<double> theta{1.0, -2.0};
    AdamState st(2);
    adam_step(theta, std::vector<double>{0.0, 0.0}, st, cfg);
    CHECK(theta == std::vector<double>{1.0, -2.0});

    AdamState fresh(2);
    std::vector<double> t2{1.0, -2.0};
    adam_step(t2, std::vector<double>{4.0, -0.5}, fresh, cfg);
    CHECK(std::abs(t2[0] - (1.0 - cfg.learning_rate * 4.0 / (4.0 + cfg.epsilon))) < 1e-15);
    CHECK(std::abs(t2[1] - (-2.0 + cfg.learning_rate)) < 1e-9);

    AdamState a(2), b(2);
    std::vector<double> ta{0.3, 0.1}, tb{0.3, 0.1};
    adam_step(ta, std::vector<double>{0.2, -0.7}, a, cfg);
    adam_step(tb, std::vector<double>{0.2, -0.7}, b, cfg);
    CHECK(ta == tb);
    CHECK(a.m == b.m);
    CHECK(a.v == b.v);
}

TEST_CASE("full-batch Adam lowers the loss") {
    Matrix x;
    std::vector<int> y;
    blobs(4, 60, x, y);
    auto model = init_mlp({2, 8, 1}, 9);
    std::vector<std::size_t> all(60);
    for (std::size_t i = 0; i < 60; ++i) all[i] = i;
    AdamState st(model.params.size());
    const double start = mlp_grad(model, x, y, all).loss;
    std::size_t increases = 0;
    double prev = start;
    for (int epoch = 0; epoch < 100; ++epoch) {
        auto g = mlp_grad(model, x, y, all);
        adam_step(model.params, g.grad, st, AdamConfig{});
        const double now = mlp_grad(model, x, y, all).loss;
        increases += now > prev + 1e-9;
        prev = now;
    }
    CHECK(prev < start);
    CHECK(increases <= 1);
}

TEST_CASE("train_mlp separates blobs deterministically") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Matrix x;
        std::vector<int> y;
        blobs(seed, 100, x, y);
        TrainConfig cfg;
        cfg.seed = seed;
        cfg.hidden_layers = {16};
        cfg.max_epochs = 100;
        auto a = train_mlp(x, y, cfg);
        auto b = train_mlp(x, y, cfg);
        CHECK(a.model.params == b.model.params);
        AdaptedMLP wrapped;
        wrapped.mlp = a.model;
        CHECK(accuracy(wrapped, x, y) >= 0.99);
    }
    Matrix x(4, 2, 1.0);
    TrainConfig cfg;
    CHECK_THROWS_AS(train_mlp(x, std::vector<int>{1, 1, 1, 1}, cfg), DataError);
    cfg.adam_beta1 = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("early stopping keeps the best validation snapshot") {
    Matrix x, xv;
    std::vector<int> y, yv;
    blobs(8, 80, x, y);
    blobs(9, 40, xv, yv);
    TrainConfig cfg;
    cfg.hidden_layers = {8};
    cfg.patience = 3;
    cfg.max_epochs = 200;
    auto r = train_mlp(x, y, cfg, LabeledData{&xv, yv});
    REQUIRE_FALSE(r.log.validation_loss.empty());
    const auto best = std::min_element(r.log.validation_loss.begin(), r.log.validation_loss.end());
    CHECK(r.log.best_epoch == static_cast<std::size_t>(best - r.log.validation_loss.begin()) + 1);
    if (r.log.stopped_early) CHECK(r.log.validation_loss.size() < 200);
}

TEST_CASE("identity adapter reduces to plain training") {
    Matrix x;
    std::vector<int> y;
    blobs(12, 50, x, y);
    TrainConfig cfg;
    cfg.hidden_layers = {6};
    cfg.max_epochs = 30;
    cfg.seed = 5;
    auto plain = train_mlp(x, y, cfg);
    auto frozen = train_with_adapter(x, y, 2, AdapterMode::frozen, cfg);
    CHECK(frozen.log.train_loss == plain.log.train_loss);
    CHECK(frozen.mlp.params == plain.model.params);
    CHECK(frozen.adapter.a == Matrix::identity(2));

    auto adapted = train_with_adapter(x, y, 2, AdapterMode::adapter, cfg);
    CHECK_FALSE(adapted.adapter.a == Matrix::identity(2));
    auto again = train_with_adapter(x, y, 2, AdapterMode::adapter, cfg);
    CHECK(again.adapter.a == adapted.adapter.a);
    CHECK(again.mlp.params == adapted.mlp.params);
    CHECK_THROWS_AS(train_with_adapter(x, y, 3, AdapterMode::frozen, cfg), ConfigError);
    CHECK(apply_adapter(adapted.adapter, x).cols() == 2);
}

TEST_CASE("gini and the one-dimensional stump") {
    CHECK(gini(5, 10) == 0.5);
    CHECK(gini(0, 4) == 0.0);
    Matrix x = Matrix::from_rows({{-3}, {-2}, {-1}, {1}, {2}, {3}});
    std::vector<int> y{0, 0, 0, 1, 1, 1};
    auto t = train_tree(x, y, TreeConfig{});
    CHECK(t.depth == 1);
    CHECK(t.nodes[0].threshold == 0.0);
    CHECK(accuracy(t, x, y) == 1.0);
    for (double p : predict_proba(t, x)) CHECK((p == 0.0 || p == 1.0));
    CHECK_THROWS_AS(train_tree(x, std::vector<int>(6, 0), TreeConfig{}), DataError);
}

TEST_CASE("root split matches exhaustive Gini search") {
    Rng rng(71);
    for (std::size_t n = 2; n <= 8; ++n) {
        // distinct shuffled coordinates so the sorted order differs from the row order
        std::vector<double> xs(n);
        for (std::size_t i = 0; i < n; ++i) xs[i] = static_cast<double>(i) * 1.5 - 2.0;
        rng.shuffle(xs);
        Matrix x(n, 1);
        for (std::size_t i = 0; i < n; ++i) x(i, 0) = xs[i];
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](auto a, auto b) { return xs[a] < xs[b]; });

        for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
            std::vector<int> y(n);
            long long pos = 0;
            for (std::size_t i = 0; i < n; ++i) pos += y[i] = (mask >> i) & 1u;
            if (pos == 0 || pos == static_cast<long long>(n)) continue;

            // weighted impurity scaled by nL*nR: n*nL*nR - (pL^2+qL^2)*nR - (pR^2+qR^2)*nL, compared as fractions
            const long long N = static_cast<long long>(n);
            long long best_num = N * N - pos * pos - (N - pos) * (N - pos), best_den = N;
            int best_cut = -1;
            long long lp = 0;
            for (std::size_t cut = 1; cut < n; ++cut) {
                lp += y[order[cut - 1]];
                const long long nl = static_cast<long long>(cut), nr = N - nl, rp = pos - lp;
                const long long num = N * nl * nr - (lp * lp + (nl - lp) * (nl - lp)) * nr -
                                      (rp * rp + (nr - rp) * (nr - rp)) * nl;
                const long long den = nl * nr;
                if (num * best_den < best_num * den) {
                    best_num = num;
                    best_den = den;
                    best_cut = static_cast<int>(cut);
                }
            }
            auto t = train_tree(x, y, TreeConfig{1, 1, 0});
            if (best_cut < 0) {
                CHECK(t.nodes[0].feature == -1);
            } else {
                const double expect = (xs[order[best_cut - 1]] + xs[order[best_cut]]) / 2.0;
                CHECK(t.nodes[0].feature == 0);
                CHECK(t.nodes[0].threshold == expect);
            }
        }
    }
}

TEST_CASE("forest with one tree and no randomness is the tree") {
    Matrix x;
    std::vector<int> y;
    blobs(3, 40, x, y);
    ForestConfig fc;
    fc.n_trees = 1;
    fc.bootstrap = false;
    fc.feature_subsample = false;
    auto forest = train_forest(x, y, fc);
    auto tree = train_tree(x, y, fc.tree);
    REQUIRE(forest.trees.size() == 1);
    CHECK(same_tree(forest.trees[0], tree));
    CHECK(predict_proba(forest, x) == predict_proba(tree, x));

    ForestConfig full;
    full.n_trees = 15;
    full.seed = 4;
    auto f1 = train_forest(x, y, full), f2 = train_forest(x, y, full);
    CHECK(predict_proba(f1, x) == predict_proba(f2, x));
    CHECK(f1.tree_seeds == f2.tree_seeds);
    CHECK(accuracy(f1, x, y) >= 0.95);
}

TEST_CASE("linear SVM reaches small hinge loss on separable data") {
    Matrix x;
    std::vector<int> y;
    blobs(6, 100, x, y);
    SvmConfig cfg;
    cfg.lambda = 1e-4;
    auto svm = train_svm(x, y, cfg);
    CHECK(svm_hinge_loss(svm, x, y) < 0.01);
    CHECK(accuracy(svm, x, y) == 1.0);
    auto again = train_svm(x, y, cfg);
    CHECK(again.w == svm.w);
    CHECK(again.b == svm.b);
}

TEST_CASE("uniform prediction contract and serialization") {
    Matrix x;
    std::vector<int> y;
    blobs(2, 30, x, y);
    TrainConfig tc;
    tc.hidden_layers = {4};
    tc.max_epochs = 5;
    ForestConfig fc;
    fc.n_trees = 3;
    std::vector<TrainedClassifier> models{train_with_adapter(x, y, 2, AdapterMode::adapter, tc),
                                          train_tree(x, y, TreeConfig{}), train_forest(x, y, fc),
                                          train_svm(x, y, SvmConfig{})};
    for (const auto& m : models) {
        auto p = predict_proba(m, x);
        CHECK(p.size() == x.rows());
        for (double v : p) CHECK((v >= 0.0 && v <= 1.0));
        CHECK(predict_proba(m, x) == p);
        CHECK(input_dim(m) == 2);
        auto back = classifier_from_json(nlohmann::json::parse(classifier_to_json(m).dump()));
        CHECK(predict_proba(back, x) == p);
        const auto echoed = classifier_to_json(m, {{"seed", 7}});
        CHECK(echoed["training"]["seed"] == 7);
        CHECK(predict_proba(classifier_from_json(echoed), x) == p);
        CHECK_THROWS_AS(predict_proba(m, Matrix(2, 3)), DataError);
    }
    for (auto k : {ClassifierKind::mlp, ClassifierKind::tree, ClassifierKind::forest, ClassifierKind::svm})
        CHECK(parse_classifier_kind(to_string(k)) == k);
}

}
