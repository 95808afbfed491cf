#include <algorithm>
#include <cmath>
#include <numeric>

#include "trialmatch/classifiers.hpp"
#include "trialmatch/error.hpp"
#include "trialmatch/util.hpp"

namespace trialmatch {

double gini(std::size_t positives, std::size_t total) {
    if (total == 0) return 0.0;
    const double p = static_cast<double>(positives) / static_cast<double>(total);
    return 1.0 - p * p - (1.0 - p) * (1.0 - p);
}

namespace {

using i128 = __int128;

// Weighted child impurity n_L*G_L + n_R*G_R kept as the exact fraction
// num / (n_L * n_R), where num = n*n_L*n_R - (p_L^2+q_L^2)*n_R - (p_R^2+q_R^2)*n_L.
struct Impurity {
    i128 num;
    i128 den;

    static Impurity of(i128 pl, i128 nl, i128 pr, i128 nr) {
        const i128 ql = nl - pl, qr = nr - pr;
        return {(nl + nr) * nl * nr - (pl * pl + ql * ql) * nr - (pr * pr + qr * qr) * nl, nl * nr};
    }
    bool operator<(const Impurity& o) const { return num * o.den < o.num * den; }
};

struct SplitChoice {
    int feature = -1;
    double threshold = 0.0;
    Impurity impurity{0, 1};
};

class TreeBuilder {
public:
    TreeBuilder(const Matrix& x, std::span<const int> y, const TreeConfig& cfg, Rng* rng)
        : x_(x), y_(y), cfg_(cfg), rng_(rng) {}

    DecisionTree build(std::vector<std::size_t> rows) {
        tree_.n_features = x_.cols();
        grow(std::move(rows), 0);
        return std::move(tree_);
    }

private:
    int grow(std::vector<std::size_t> rows, std::size_t depth) {
        const int id = static_cast<int>(tree_.nodes.size());
        tree_.nodes.emplace_back();
        tree_.depth = std::max(tree_.depth, depth);
        std::size_t pos = 0;
        for (auto r : rows) pos += static_cast<std::size_t>(y_[r]);
        const std::size_t n = rows.size();
        tree_.nodes[id].n_samples = n;
        tree_.nodes[id].probability = static_cast<double>(pos) / static_cast<double>(n);

        if (pos == 0 || pos == n || depth >= cfg_.max_depth || n < 2 * std::max<std::size_t>(cfg_.min_leaf, 1))
            return id;

        const auto choice = best_split(rows, pos);
        if (choice.feature < 0) return id;

        std::vector<std::size_t> left, right;
        for (auto r : rows) (x_(r, static_cast<std::size_t>(choice.feature)) <= choice.threshold ? left : right).push_back(r);
        rows.clear();
        rows.shrink_to_fit();

        tree_.nodes[id].feature = choice.feature;
        tree_.nodes[id].threshold = choice.threshold;
        const int l = grow(std::move(left), depth + 1);
        const int r = grow(std::move(right), depth + 1);
        tree_.nodes[id].left = l;
        tree_.nodes[id].right = r;
        return id;
    }

    std::vector<std::size_t> candidate_features() {
        std::vector<std::size_t> feats(x_.cols());
        std::iota(feats.begin(), feats.end(), 0);
        if (rng_ && cfg_.max_features > 0 && cfg_.max_features < feats.size()) {
            // partial Fisher-Yates, then restore ascending order for deterministic tie-breaks
            for (std::size_t i = 0; i < cfg_.max_features; ++i) {
                const std::size_t j = i + static_cast<std::size_t>(rng_->below(feats.size() - i));
                std::swap(feats[i], feats[j]);
            }
            feats.resize(cfg_.max_features);
            std::sort(feats.begin(), feats.end());
        }
        return feats;
    }

    SplitChoice best_split(const std::vector<std::size_t>& rows, std::size_t pos) {
        const auto n = static_cast<i128>(rows.size());
        // parent impurity n*G = (n^2 - p^2 - q^2)/n; a split must be strictly better
        const i128 p = static_cast<i128>(pos), q = n - p;
        const Impurity parent{n * n - p * p - q * q, n};

        SplitChoice best;
        best.impurity = parent;
        std::vector<std::size_t> order(rows);
        for (std::size_t f : candidate_features()) {
            std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                const double va = x_(a, f), vb = x_(b, f);
                return va < vb || (va == vb && a < b);
            });
            i128 left_n = 0, left_pos = 0;
            for (std::size_t i = 0; i + 1 < order.size(); ++i) {
                left_n += 1;
                left_pos += y_[order[i]];
                const double v = x_(order[i], f);
                const double next = x_(order[i + 1], f);
                if (v == next) continue;
                if (left_n < static_cast<i128>(cfg_.min_leaf) || n - left_n < static_cast<i128>(cfg_.min_leaf))
                    continue;
                const auto imp = Impurity::of(left_pos, left_n, static_cast<i128>(pos) - left_pos, n - left_n);
                if (imp < best.impurity) {
                    best.impurity = imp;
                    best.feature = static_cast<int>(f);
                    best.threshold = v + (next - v) / 2.0;
                }
            }
        }
        return best;
    }

    const Matrix& x_;
    std::span<const int> y_;
    TreeConfig cfg_;
    Rng* rng_;
    DecisionTree tree_;
};

void check_xy(const Matrix& x, std::span<const int> y) {
    if (x.rows() != y.size()) throw DataError("feature rows and labels differ in length");
    if (x.rows() == 0) throw DataError("cannot train on an empty set");
    require_both_classes(y);
}

}  // namespace

DecisionTree train_tree(const Matrix& x, std::span<const int> y, const TreeConfig& cfg,
                        std::span<const std::size_t> rows, Rng* rng) {
    check_xy(x, y);
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    if (idx.empty()) {
        idx.resize(x.rows());
        std::iota(idx.begin(), idx.end(), 0);
    }
    return TreeBuilder(x, y, cfg, rng).build(std::move(idx));
}

double tree_predict(const DecisionTree& tree, std::span<const double> x) {
    if (x.size() != tree.n_features)
        throw DataError("tree expects " + std::to_string(tree.n_features) + " features, got " + std::to_string(x.size()));
    int node = 0;
    while (tree.nodes[node].feature >= 0) {
        const auto& nd = tree.nodes[node];
        node = x[static_cast<std::size_t>(nd.feature)] <= nd.threshold ? nd.left : nd.right;
    }
    return tree.nodes[node].probability;
}

RandomForest train_forest(const Matrix& x, std::span<const int> y, const ForestConfig& cfg) {
    check_xy(x, y);
    if (cfg.n_trees == 0) throw ConfigError("forest needs at least one tree");
    RandomForest forest;
    std::uint64_t seed_state = cfg.seed;
    TreeConfig tcfg = cfg.tree;
    if (cfg.feature_subsample)
        tcfg.max_features = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(x.cols()))));
    for (std::size_t t = 0; t < cfg.n_trees; ++t) {
        const std::uint64_t tree_seed = splitmix64(seed_state);
        forest.tree_seeds.push_back(tree_seed);
        Rng rng(tree_seed);
        std::vector<std::size_t> rows;
        if (cfg.bootstrap) {
            rows.resize(x.rows());
            for (auto& r : rows) r = static_cast<std::size_t>(rng.below(x.rows()));
            // a bootstrap sample can miss a class entirely; fall back to a single leaf then
            bool has_pos = false, has_neg = false;
            for (auto r : rows) (y[r] ? has_pos : has_neg) = true;
            if (!has_pos || !has_neg) {
                DecisionTree leaf;
                leaf.n_features = x.cols();
                TreeNode node;
                node.n_samples = rows.size();
                node.probability = has_pos ? 1.0 : 0.0;
                leaf.nodes.push_back(node);
                forest.trees.push_back(std::move(leaf));
                continue;
            }
        }
        forest.trees.push_back(train_tree(x, y, tcfg, rows, cfg.feature_subsample ? &rng : nullptr));
    }
    return forest;
}

double forest_predict(const RandomForest& forest, std::span<const double> x) {
    double s = 0.0;
    for (const auto& t : forest.trees) s += tree_predict(t, x);
    return s / static_cast<double>(forest.trees.size());
}

}  // namespace trialmatch
