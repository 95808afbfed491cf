#include <cmath>

#include "trialmatch/classifiers.hpp"
#include "trialmatch/error.hpp"

namespace trialmatch {

using json = nlohmann::json;

std::string_view to_string(ClassifierKind k) {
    switch (k) {
        case ClassifierKind::mlp: return "mlp";
        case ClassifierKind::tree: return "tree";
        case ClassifierKind::forest: return "forest";
        case ClassifierKind::svm: return "svm";
    }
    return "mlp";
}

ClassifierKind parse_classifier_kind(std::string_view s) {
    if (s == "mlp") return ClassifierKind::mlp;
    if (s == "tree" || s == "dt") return ClassifierKind::tree;
    if (s == "forest" || s == "rf") return ClassifierKind::forest;
    if (s == "svm") return ClassifierKind::svm;
    throw ConfigError("classifier must be mlp|tree|forest|svm, got '" + std::string(s) + "'");
}

namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

json matrix_to_json(const Matrix& m) {
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.data()}};
}

Matrix matrix_from_json(const json& j) {
    return Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                  j.at("data").get<std::vector<double>>());
}

json tree_to_json(const DecisionTree& t) {
    json nodes = json::array();
    for (const auto& n : t.nodes)
        nodes.push_back({{"feature", n.feature},
                         {"threshold", n.threshold},
                         {"left", n.left},
                         {"right", n.right},
                         {"probability", n.probability},
                         {"n_samples", n.n_samples}});
    return {{"n_features", t.n_features}, {"depth", t.depth}, {"nodes", nodes}};
}

DecisionTree tree_from_json(const json& j) {
    DecisionTree t;
    t.n_features = j.at("n_features").get<std::size_t>();
    t.depth = j.at("depth").get<std::size_t>();
    for (const auto& n : j.at("nodes")) {
        TreeNode node;
        node.feature = n.at("feature").get<int>();
        node.threshold = n.at("threshold").get<double>();
        node.left = n.at("left").get<int>();
        node.right = n.at("right").get<int>();
        node.probability = n.at("probability").get<double>();
        node.n_samples = n.at("n_samples").get<std::size_t>();
        t.nodes.push_back(node);
    }
    if (t.nodes.empty()) throw DataError("tree JSON has no nodes");
    return t;
}

}  // namespace

std::vector<double> predict_proba(const TrainedClassifier& model, const Matrix& x) {
    std::vector<double> out(x.rows());
    std::visit(overloaded{
                   [&](const AdaptedMLP& m) {
                       const Matrix h = apply_adapter(m.adapter, x);
                       for (std::size_t i = 0; i < h.rows(); ++i) out[i] = mlp_forward(m.mlp, h.row(i));
                   },
                   [&](const DecisionTree& t) {
                       for (std::size_t i = 0; i < x.rows(); ++i) out[i] = tree_predict(t, x.row(i));
                   },
                   [&](const RandomForest& f) {
                       for (std::size_t i = 0; i < x.rows(); ++i) out[i] = forest_predict(f, x.row(i));
                   },
                   [&](const LinearSVM& s) {
                       for (std::size_t i = 0; i < x.rows(); ++i) out[i] = sigmoid(svm_margin(s, x.row(i)));
                   },
               },
               model);
    return out;
}

std::size_t input_dim(const TrainedClassifier& model) {
    return std::visit(overloaded{
                          [](const AdaptedMLP& m) { return m.adapter.a.empty() ? m.mlp.input_size() : m.adapter.a.rows(); },
                          [](const DecisionTree& t) { return t.n_features; },
                          [](const RandomForest& f) { return f.trees.front().n_features; },
                          [](const LinearSVM& s) { return s.w.size(); },
                      },
                      model);
}

json classifier_to_json(const TrainedClassifier& model, const json& training) {
    json out = std::visit(overloaded{
                          [](const AdaptedMLP& m) {
                              json j{{"kind", "mlp"}, {"layer_sizes", m.mlp.layer_sizes}, {"weights", m.mlp.params}};
                              j["adapter"] = m.adapter.a.empty() ? json(nullptr) : matrix_to_json(m.adapter.a);
                              return j;
                          },
                          [](const DecisionTree& t) {
                              json j = tree_to_json(t);
                              j["kind"] = "tree";
                              return j;
                          },
                          [](const RandomForest& f) {
                              json trees = json::array();
                              for (const auto& t : f.trees) trees.push_back(tree_to_json(t));
                              return json{{"kind", "forest"}, {"trees", trees}, {"tree_seeds", f.tree_seeds}};
                          },
                          [](const LinearSVM& s) {
                              return json{{"kind", "svm"}, {"w", s.w}, {"b", s.b}, {"lambda", s.lambda}};
                          },
                      },
                      model);
    if (!training.is_null()) out["training"] = training;
    return out;
}

TrainedClassifier classifier_from_json(const json& j) {
    const auto kind = parse_classifier_kind(j.at("kind").get<std::string>());
    switch (kind) {
        case ClassifierKind::mlp: {
            AdaptedMLP m;
            m.mlp = make_mlp(j.at("layer_sizes").get<std::vector<std::size_t>>());
            auto w = j.at("weights").get<std::vector<double>>();
            if (w.size() != m.mlp.params.size()) throw DataError("MLP JSON weight count does not match layer sizes");
            m.mlp.params = std::move(w);
            if (j.contains("adapter") && !j["adapter"].is_null()) m.adapter.a = matrix_from_json(j["adapter"]);
            return m;
        }
        case ClassifierKind::tree: return tree_from_json(j);
        case ClassifierKind::forest: {
            RandomForest f;
            for (const auto& t : j.at("trees")) f.trees.push_back(tree_from_json(t));
            f.tree_seeds = j.at("tree_seeds").get<std::vector<std::uint64_t>>();
            if (f.trees.empty()) throw DataError("forest JSON has no trees");
            return f;
        }
        case ClassifierKind::svm: {
            LinearSVM s;
            s.w = j.at("w").get<std::vector<double>>();
            s.b = j.at("b").get<double>();
            s.lambda = j.at("lambda").get<double>();
            return s;
        }
    }
    throw DataError("unknown classifier kind");
}

}  // namespace trialmatch
