#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "trialmatch/linalg.hpp"

namespace trialmatch {

// ---------------------------------------------------------------------------
// MLP

/// Fully connected network: rectifier hidden layers, sigmoid output unit.
/// Parameters are stored flat, layer by layer: W (out x in, row-major) then b.
struct MLPModel {
    std::vector<std::size_t> layer_sizes;  // input, hidden..., 1
    std::vector<double> params;

    std::size_t input_size() const { return layer_sizes.front(); }
    std::size_t n_layers() const { return layer_sizes.size() - 1; }
    std::size_t weight_offset(std::size_t layer) const;
    std::size_t bias_offset(std::size_t layer) const;
};

std::size_t mlp_param_count(std::span<const std::size_t> layer_sizes);

/// Zero-initialized network with the given shape.
MLPModel make_mlp(std::vector<std::size_t> layer_sizes);

/// He-uniform weights, zero biases.
MLPModel init_mlp(std::vector<std::size_t> layer_sizes, std::uint64_t seed);

double mlp_logit(const MLPModel& model, std::span<const double> x);
double mlp_forward(const MLPModel& model, std::span<const double> x);

double sigmoid(double z);

/// Summed binary cross-entropy with probabilities clamped to [eps, 1 - eps].
double bce_loss(std::span<const double> probs, std::span<const int> labels, double eps = 1e-7);

struct LossAndGrad {
    double loss = 0.0;
    std::vector<double> grad;  // same layout as MLPModel::params
};

/// Exact backprop gradient of the summed BCE over rows `batch` of x. The
/// gradient at the logit is w*(p - y) with the unclamped sigmoid, so it does
/// not vanish when the loss clamps.
LossAndGrad mlp_grad(const MLPModel& model, const Matrix& x, std::span<const int> y,
                     std::span<const std::size_t> batch, double clamp_eps = 1e-7, double positive_weight = 1.0);

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t t = 0;

    explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

/// One bias-corrected Adam update of theta in place.
void adam_step(std::span<double> theta, std::span<const double> grad, AdamState& state, const AdamConfig& cfg);

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    double learning_rate = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    std::size_t max_epochs = 200;
    std::size_t batch_size = 32;
    std::size_t patience = 10;
    double min_delta = 1e-5;
    std::uint64_t seed = 0;
    double prob_clamp_epsilon = 1e-7;
    std::vector<std::size_t> hidden_layers{256, 64};
    double positive_weight = 1.0;

    AdamConfig adam() const { return {learning_rate, adam_beta1, adam_beta2, adam_epsilon}; }
    void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

struct LabeledData {
    const Matrix* x = nullptr;
    std::span<const int> y;
};

struct TrainingLog {
    std::vector<double> train_loss;       // mean per-sample BCE after each epoch
    std::vector<double> validation_loss;  // empty when no validation set
    std::size_t best_epoch = 0;           // 1-based
    bool stopped_early = false;
};

struct TrainedMLP {
    MLPModel model;
    TrainingLog log;
};

/// Mini-batch Adam with seeded shuffling and early stopping on validation loss
/// (training loss when no validation set is given). Returns the best snapshot.
TrainedMLP train_mlp(const Matrix& x, std::span<const int> y, const TrainConfig& cfg,
                     std::optional<LabeledData> validation = std::nullopt);

/// d_in x d_out matrix applied as x -> xA before the MLP.
struct LinearAdapter {
    Matrix a;
};

enum class AdapterMode { frozen, adapter };

std::string_view to_string(AdapterMode m);
AdapterMode parse_adapter_mode(std::string_view s);

struct AdaptedMLP {
    LinearAdapter adapter;
    MLPModel mlp;
    TrainingLog log;
};

/// Trains adapter and MLP jointly. In frozen mode the adapter is pinned to the
/// identity (adapter_out must equal the input width) and only the MLP moves.
/// Adapters start at the rectangular identity, so no randomness is consumed.
AdaptedMLP train_with_adapter(const Matrix& x, std::span<const int> y, std::size_t adapter_out, AdapterMode mode,
                              const TrainConfig& cfg, std::optional<LabeledData> validation = std::nullopt);

Matrix apply_adapter(const LinearAdapter& adapter, const Matrix& x);

// ---------------------------------------------------------------------------
// Trees

struct TreeConfig {
    std::size_t max_depth = 8;
    std::size_t min_leaf = 1;
    std::size_t max_features = 0;  // 0 = consider every feature at each split
};

struct TreeNode {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double probability = 0.0;  // positive fraction of the training samples at the node
    std::size_t n_samples = 0;
};

struct DecisionTree {
    std::vector<TreeNode> nodes;  // nodes[0] is the root
    std::size_t n_features = 0;
    std::size_t depth = 0;
};

double gini(std::size_t positives, std::size_t total);

class Rng;

/// Greedy Gini splits over midpoints of sorted unique values. `rows` selects
/// (possibly repeated) training rows; empty means all rows. With rng set and
/// cfg.max_features > 0, each split considers a random feature subset.
DecisionTree train_tree(const Matrix& x, std::span<const int> y, const TreeConfig& cfg,
                        std::span<const std::size_t> rows = {}, Rng* rng = nullptr);

double tree_predict(const DecisionTree& tree, std::span<const double> x);

struct ForestConfig {
    std::size_t n_trees = 100;
    TreeConfig tree{12, 1, 0};
    bool bootstrap = true;
    bool feature_subsample = true;  // ceil(sqrt(d)) features per split
    std::uint64_t seed = 0;
};

struct RandomForest {
    std::vector<DecisionTree> trees;
    std::vector<std::uint64_t> tree_seeds;
};

RandomForest train_forest(const Matrix& x, std::span<const int> y, const ForestConfig& cfg);
double forest_predict(const RandomForest& forest, std::span<const double> x);

// ---------------------------------------------------------------------------
// Linear SVM

struct SvmConfig {
    double lambda = 1e-4;
    std::size_t epochs = 200;
    double learning_rate = 0.1;
    std::uint64_t seed = 0;
};

struct LinearSVM {
    std::vector<double> w;
    double b = 0.0;
    double lambda = 0.0;
};

/// Per-sample subgradient descent on lambda/2 |w|^2 + mean hinge loss with a
/// decaying step eta / (1 + lambda * eta * t).
LinearSVM train_svm(const Matrix& x, std::span<const int> y, const SvmConfig& cfg);

double svm_margin(const LinearSVM& svm, std::span<const double> x);

/// Mean hinge loss with labels mapped to {-1, +1}.
double svm_hinge_loss(const LinearSVM& svm, const Matrix& x, std::span<const int> y);

// ---------------------------------------------------------------------------
// Uniform prediction contract

enum class ClassifierKind { mlp, tree, forest, svm };

std::string_view to_string(ClassifierKind k);
ClassifierKind parse_classifier_kind(std::string_view s);

using TrainedClassifier = std::variant<AdaptedMLP, DecisionTree, RandomForest, LinearSVM>;

/// Probabilities in [0, 1], one per row. For the SVM this is the logistic of
/// the margin, a surrogate intended for threshold-free metrics only.
std::vector<double> predict_proba(const TrainedClassifier& model, const Matrix& x);

std::size_t input_dim(const TrainedClassifier& model);

/// `training` (config echo and seed) is stored under "training" when not null.
nlohmann::json classifier_to_json(const TrainedClassifier& model, const nlohmann::json& training = nullptr);
TrainedClassifier classifier_from_json(const nlohmann::json& j);

/// Throws DataError unless both classes are present.
void require_both_classes(std::span<const int> y);

}  // namespace trialmatch
