#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "trialmatch/classifiers.hpp"
#include "trialmatch/error.hpp"
#include "trialmatch/util.hpp"

namespace trialmatch {

std::size_t mlp_param_count(std::span<const std::size_t> sizes) {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) n += sizes[l] * sizes[l + 1] + sizes[l + 1];
    return n;
}

std::size_t MLPModel::weight_offset(std::size_t layer) const {
    std::size_t off = 0;
    for (std::size_t l = 0; l < layer; ++l) off += layer_sizes[l] * layer_sizes[l + 1] + layer_sizes[l + 1];
    return off;
}

std::size_t MLPModel::bias_offset(std::size_t layer) const {
    return weight_offset(layer) + layer_sizes[layer] * layer_sizes[layer + 1];
}

MLPModel make_mlp(std::vector<std::size_t> layer_sizes) {
    if (layer_sizes.size() < 2 || layer_sizes.back() != 1)
        throw ConfigError("MLP layer sizes must end with a single output unit");
    for (auto s : layer_sizes)
        if (s == 0) throw ConfigError("MLP layer sizes must be positive");
    MLPModel m;
    m.params.assign(mlp_param_count(layer_sizes), 0.0);
    m.layer_sizes = std::move(layer_sizes);
    return m;
}

MLPModel init_mlp(std::vector<std::size_t> layer_sizes, std::uint64_t seed) {
    MLPModel m = make_mlp(std::move(layer_sizes));
    Rng rng(seed);
    for (std::size_t l = 0; l < m.n_layers(); ++l) {
        const double bound = std::sqrt(6.0 / static_cast<double>(m.layer_sizes[l]));
        const std::size_t off = m.weight_offset(l);
        const std::size_t count = m.layer_sizes[l] * m.layer_sizes[l + 1];
        for (std::size_t i = 0; i < count; ++i) m.params[off + i] = rng.uniform(-bound, bound);
    }
    return m;
}

double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

namespace {

// Forward pass keeping every layer's post-activation (acts[0] is the input).
double forward_collect(const MLPModel& m, std::span<const double> x, std::vector<std::vector<double>>& acts) {
    acts.resize(m.n_layers());
    acts[0].assign(x.begin(), x.end());
    double logit = 0.0;
    for (std::size_t l = 0; l < m.n_layers(); ++l) {
        const std::size_t in = m.layer_sizes[l];
        const std::size_t out = m.layer_sizes[l + 1];
        const double* w = m.params.data() + m.weight_offset(l);
        const double* b = m.params.data() + m.bias_offset(l);
        const auto& a = acts[l];
        const bool last = l + 1 == m.n_layers();
        std::vector<double> next(out);
        for (std::size_t o = 0; o < out; ++o) {
            const double s = b[o] + dot(std::span<const double>(w + o * in, in), a);
            next[o] = last ? s : std::max(s, 0.0);
        }
        if (last) logit = next[0];
        else acts[l + 1] = std::move(next);
    }
    return logit;
}

}  // namespace

double mlp_logit(const MLPModel& model, std::span<const double> x) {
    if (x.size() != model.input_size())
        throw DataError("mlp input has " + std::to_string(x.size()) + " features, model expects " +
                        std::to_string(model.input_size()));
    std::vector<std::vector<double>> acts;
    return forward_collect(model, x, acts);
}

double mlp_forward(const MLPModel& model, std::span<const double> x) { return sigmoid(mlp_logit(model, x)); }

double bce_loss(std::span<const double> probs, std::span<const int> labels, double eps) {
    if (probs.size() != labels.size())
        throw DataError("bce_loss: " + std::to_string(probs.size()) + " probabilities vs " +
                        std::to_string(labels.size()) + " labels");
    double loss = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const double p = std::clamp(probs[i], eps, 1.0 - eps);
        loss -= labels[i] ? std::log(p) : std::log(1.0 - p);
    }
    return loss;
}

namespace {

// Backprop of one sample; accumulates into grad and optionally writes the
// gradient with respect to the network input. Returns the clamped loss term.
double backprop_sample(const MLPModel& model, std::span<const double> x, int label, double clamp_eps,
                       double positive_weight, std::vector<std::vector<double>>& acts, std::span<double> grad,
                       std::vector<double>* input_grad) {
    const double z = forward_collect(model, x, acts);
    const double p = sigmoid(z);
    const double w = label ? positive_weight : 1.0;
    const double pc = std::clamp(p, clamp_eps, 1.0 - clamp_eps);
    const double loss = -w * (label ? std::log(pc) : std::log(1.0 - pc));

    std::vector<double> delta{w * (p - label)};
    std::vector<double> prev;
    for (std::size_t l = model.n_layers(); l-- > 0;) {
        const std::size_t in = model.layer_sizes[l];
        const std::size_t outn = model.layer_sizes[l + 1];
        const double* wmat = model.params.data() + model.weight_offset(l);
        double* gw = grad.data() + model.weight_offset(l);
        double* gb = grad.data() + model.bias_offset(l);
        const auto& a = acts[l];
        for (std::size_t o = 0; o < outn; ++o) {
            const double d = delta[o];
            gb[o] += d;
            if (d == 0.0) continue;
            double* grow = gw + o * in;
            for (std::size_t i = 0; i < in; ++i) grow[i] += d * a[i];
        }
        if (l == 0 && input_grad == nullptr) break;
        prev.assign(in, 0.0);
        for (std::size_t o = 0; o < outn; ++o) {
            const double d = delta[o];
            if (d == 0.0) continue;
            const double* wrow = wmat + o * in;
            for (std::size_t i = 0; i < in; ++i) prev[i] += d * wrow[i];
        }
        // rectifier derivative, taken as 0 at exactly 0; the input layer has no activation
        if (l > 0)
            for (std::size_t i = 0; i < in; ++i)
                if (a[i] <= 0.0) prev[i] = 0.0;
        std::swap(delta, prev);
    }
    if (input_grad) *input_grad = std::move(delta);
    return loss;
}

}  // namespace

LossAndGrad mlp_grad(const MLPModel& model, const Matrix& x, std::span<const int> y,
                     std::span<const std::size_t> batch, double clamp_eps, double positive_weight) {
    if (batch.empty()) throw DataError("mlp_grad requires a non-empty batch");
    if (x.cols() != model.input_size()) throw DataError("mlp_grad: feature dim mismatch");
    LossAndGrad out;
    out.grad.assign(model.params.size(), 0.0);
    std::vector<std::vector<double>> acts;
    for (std::size_t idx : batch)
        out.loss += backprop_sample(model, x.row(idx), y[idx], clamp_eps, positive_weight, acts, out.grad, nullptr);
    return out;
}

void adam_step(std::span<double> theta, std::span<const double> grad, AdamState& state, const AdamConfig& cfg) {
    if (theta.size() != grad.size() || state.m.size() != theta.size() || state.v.size() != theta.size())
        throw DataError("adam_step: parameter, gradient and state sizes differ");
    state.t += 1;
    const double t = static_cast<double>(state.t);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        const double m_hat = state.m[i] / c1;
        const double v_hat = state.v[i] / c2;
        theta[i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
    }
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0) || !(adam_beta2 > 0.0 && adam_beta2 < 1.0))
        throw ConfigError("Adam betas must lie in (0, 1)");
    if (!(adam_epsilon > 0.0)) throw ConfigError("adam_epsilon must be positive");
    if (max_epochs == 0 || batch_size == 0 || patience == 0)
        throw ConfigError("max_epochs, batch_size and patience must be positive");
    if (!(prob_clamp_epsilon > 0.0 && prob_clamp_epsilon < 0.5))
        throw ConfigError("prob_clamp_epsilon must lie in (0, 0.5)");
    if (!(positive_weight > 0.0)) throw ConfigError("positive_weight must be positive");
}

nlohmann::json to_json(const TrainConfig& c) {
    return {{"learning_rate", c.learning_rate}, {"adam_beta1", c.adam_beta1},
            {"adam_beta2", c.adam_beta2},       {"adam_epsilon", c.adam_epsilon},
            {"max_epochs", c.max_epochs},       {"batch_size", c.batch_size},
            {"patience", c.patience},           {"min_delta", c.min_delta},
            {"seed", c.seed},                   {"prob_clamp_epsilon", c.prob_clamp_epsilon},
            {"hidden_layers", c.hidden_layers}, {"positive_weight", c.positive_weight}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("learning_rate", c.learning_rate);
    get("adam_beta1", c.adam_beta1);
    get("adam_beta2", c.adam_beta2);
    get("adam_epsilon", c.adam_epsilon);
    get("max_epochs", c.max_epochs);
    get("batch_size", c.batch_size);
    get("patience", c.patience);
    get("min_delta", c.min_delta);
    get("seed", c.seed);
    get("prob_clamp_epsilon", c.prob_clamp_epsilon);
    get("hidden_layers", c.hidden_layers);
    get("positive_weight", c.positive_weight);
    c.validate();
    return c;
}

void require_both_classes(std::span<const int> y) {
    bool pos = false, neg = false;
    for (int v : y) {
        if (v != 0 && v != 1) throw DataError("labels must be 0 or 1");
        (v ? pos : neg) = true;
    }
    if (!pos || !neg) throw DataError("training labels contain a single class; both classes are required");
}

std::string_view to_string(AdapterMode m) { return m == AdapterMode::frozen ? "frozen" : "adapter"; }

AdapterMode parse_adapter_mode(std::string_view s) {
    if (s == "frozen") return AdapterMode::frozen;
    if (s == "adapter") return AdapterMode::adapter;
    throw ConfigError("adapter_mode must be frozen|adapter, got '" + std::string(s) + "'");
}

Matrix apply_adapter(const LinearAdapter& adapter, const Matrix& x) {
    if (adapter.a.empty()) return x;
    if (x.cols() != adapter.a.rows()) throw DataError("adapter input dim mismatch");
    return matmul(x, adapter.a);
}

namespace {

// Joint trainer over an optional adapter followed by the MLP. With use_adapter
// false the code path is exactly plain MLP training.
AdaptedMLP train_joint(const Matrix& x, std::span<const int> y, bool use_adapter, bool adapter_trainable,
                       std::size_t adapter_out, const TrainConfig& cfg, std::optional<LabeledData> validation) {
    cfg.validate();
    if (x.rows() < 2) throw DataError("training needs at least 2 samples");
    if (y.size() != x.rows()) throw DataError("feature rows and labels differ in length");
    require_both_classes(y);
    if (validation && (validation->x == nullptr || validation->x->rows() != validation->y.size()))
        throw DataError("validation features and labels differ in length");

    const std::size_t d_in = x.cols();
    const std::size_t mlp_in = use_adapter ? adapter_out : d_in;
    std::vector<std::size_t> sizes{mlp_in};
    sizes.insert(sizes.end(), cfg.hidden_layers.begin(), cfg.hidden_layers.end());
    sizes.push_back(1);

    AdaptedMLP result;
    result.mlp = init_mlp(sizes, cfg.seed);
    Rng shuffle_rng(cfg.seed ^ 0x5851f42d4c957f2dULL);

    if (use_adapter) {
        result.adapter.a = Matrix(d_in, adapter_out);
        for (std::size_t i = 0; i < std::min(d_in, adapter_out); ++i) result.adapter.a(i, i) = 1.0;
    }

    const std::size_t n_mlp = result.mlp.params.size();
    const std::size_t n_adapter = adapter_trainable ? d_in * adapter_out : 0;
    AdamState state(n_mlp + n_adapter);
    const AdamConfig adam = cfg.adam();

    auto mean_loss = [&](const Matrix& feats, std::span<const int> labels) {
        const Matrix h = use_adapter ? apply_adapter(result.adapter, feats) : feats;
        std::vector<double> probs(h.rows());
        for (std::size_t i = 0; i < h.rows(); ++i) probs[i] = mlp_forward(result.mlp, h.row(i));
        return bce_loss(probs, labels, cfg.prob_clamp_epsilon) / static_cast<double>(h.rows());
    };

    std::vector<std::size_t> order(x.rows());
    std::iota(order.begin(), order.end(), 0);

    AdaptedMLP best = result;
    double best_loss = std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;
    std::vector<double> theta(n_mlp + n_adapter), grad(n_mlp + n_adapter);

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::span<const std::size_t> batch(order.data() + start, end - start);

            if (!use_adapter) {
                auto lg = mlp_grad(result.mlp, x, y, batch, cfg.prob_clamp_epsilon, cfg.positive_weight);
                adam_step(result.mlp.params, lg.grad, state, adam);
                continue;
            }
            // adapted features for the batch rows
            Matrix hb(batch.size(), adapter_out);
            std::vector<int> yb(batch.size());
            for (std::size_t r = 0; r < batch.size(); ++r) {
                auto xr = x.row(batch[r]);
                auto hr = hb.row(r);
                for (std::size_t i = 0; i < d_in; ++i) {
                    const double xi = xr[i];
                    const double* arow = result.adapter.a.row(i).data();
                    for (std::size_t j = 0; j < adapter_out; ++j) hr[j] += xi * arow[j];
                }
                yb[r] = y[batch[r]];
            }
            std::fill(grad.begin(), grad.end(), 0.0);
            std::span<double> mlp_grad_part(grad.data(), n_mlp);
            std::vector<std::vector<double>> acts;
            std::vector<double> input_grad;
            for (std::size_t r = 0; r < batch.size(); ++r) {
                backprop_sample(result.mlp, hb.row(r), yb[r], cfg.prob_clamp_epsilon, cfg.positive_weight, acts,
                                mlp_grad_part, adapter_trainable ? &input_grad : nullptr);
                if (!adapter_trainable) continue;
                // dL/dA = x^T dL/dh
                auto xr = x.row(batch[r]);
                double* ga = grad.data() + n_mlp;
                for (std::size_t i = 0; i < d_in; ++i) {
                    const double xi = xr[i];
                    if (xi == 0.0) continue;
                    for (std::size_t j = 0; j < adapter_out; ++j) ga[i * adapter_out + j] += xi * input_grad[j];
                }
            }
            std::copy(result.mlp.params.begin(), result.mlp.params.end(), theta.begin());
            if (adapter_trainable)
                std::copy(result.adapter.a.data().begin(), result.adapter.a.data().end(),
                          theta.begin() + static_cast<std::ptrdiff_t>(n_mlp));
            adam_step(theta, grad, state, adam);
            std::copy(theta.begin(), theta.begin() + static_cast<std::ptrdiff_t>(n_mlp), result.mlp.params.begin());
            if (adapter_trainable)
                std::copy(theta.begin() + static_cast<std::ptrdiff_t>(n_mlp), theta.end(),
                          result.adapter.a.data().begin());
        }

        const double train_loss = mean_loss(x, y);
        result.log.train_loss.push_back(train_loss);
        double monitored = train_loss;
        if (validation) {
            monitored = mean_loss(*validation->x, validation->y);
            result.log.validation_loss.push_back(monitored);
        }
        if (monitored < best_loss - cfg.min_delta) {
            best_loss = monitored;
            since_best = 0;
            best.mlp = result.mlp;
            best.adapter = result.adapter;
            best.log.best_epoch = epoch;
        } else if (++since_best >= cfg.patience) {
            result.log.stopped_early = true;
            break;
        }
    }
    if (best.log.best_epoch == 0) {
        // never improved (e.g. NaN loss); keep the final parameters
        best.mlp = result.mlp;
        best.adapter = result.adapter;
        best.log.best_epoch = result.log.train_loss.size();
    }
    const std::size_t best_epoch = best.log.best_epoch;
    best.log = result.log;
    best.log.best_epoch = best_epoch;
    return best;
}

}  // namespace

TrainedMLP train_mlp(const Matrix& x, std::span<const int> y, const TrainConfig& cfg,
                     std::optional<LabeledData> validation) {
    auto r = train_joint(x, y, false, false, 0, cfg, validation);
    return {std::move(r.mlp), std::move(r.log)};
}

AdaptedMLP train_with_adapter(const Matrix& x, std::span<const int> y, std::size_t adapter_out, AdapterMode mode,
                              const TrainConfig& cfg, std::optional<LabeledData> validation) {
    if (adapter_out == 0) throw ConfigError("adapter output width must be positive");
    if (mode == AdapterMode::frozen && adapter_out != x.cols())
        throw ConfigError("frozen mode pins the adapter to the identity; adapter_out must equal the input width");
    return train_joint(x, y, true, mode == AdapterMode::adapter, adapter_out, cfg, validation);
}

}  // namespace trialmatch
