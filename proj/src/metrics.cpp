#include "trialmatch/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "trialmatch/error.hpp"
#include "trialmatch/util.hpp"

namespace trialmatch {

namespace {

void check_inputs(std::span<const int> labels, std::span<const double> scores) {
    const std::size_t a = labels.size(), b = scores.size();
    if (a != b)
        throw DataError("length mismatch: " + std::to_string(a) + " labels vs " + std::to_string(b) + " scores");
    if (a == 0) throw DataError("metrics need at least one sample");
    for (std::size_t i = 0; i < a; ++i) {
        if (labels[i] != 0 && labels[i] != 1) throw DataError("label at " + std::to_string(i) + " is not 0 or 1");
        if (!std::isfinite(scores[i])) throw DataError("score at " + std::to_string(i) + " is not finite");
    }
}

double ratio(std::size_t num, std::size_t den) {
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

ConfusionMatrix confusion(std::span<const int> labels, std::span<const double> probs, double threshold) {
    check_inputs(labels, probs);
    ConfusionMatrix cm;
    cm.threshold = threshold;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const bool predicted = probs[i] >= threshold;
        if (labels[i]) (predicted ? cm.tp : cm.fn) += 1;
        else (predicted ? cm.fp : cm.tn) += 1;
    }
    return cm;
}

PRF precision_recall_f1(const ConfusionMatrix& cm) {
    PRF r;
    r.precision = ratio(cm.tp, cm.tp + cm.fp);
    r.recall = ratio(cm.tp, cm.tp + cm.fn);
    // F1 = 2tp / (2tp + fp + fn), identical to the harmonic mean when defined
    r.f1 = ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn);
    return r;
}

double macro_f1(std::span<const int> labels, std::span<const double> probs, double threshold) {
    const auto cm = confusion(labels, probs, threshold);
    return (precision_recall_f1(cm).f1 + precision_recall_f1(cm.complement()).f1) / 2.0;
}

double RankStatistic::auroc() const {
    return static_cast<double>(twice_u) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

RankStatistic mann_whitney(std::span<const int> labels, std::span<const double> scores) {
    check_inputs(labels, scores);
    const std::size_t n = labels.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    RankStatistic st;
    // doubled midranks keep everything integral: tie group [i, j) has rank sum 2*(i+1 .. j) / group = i + j + 1
    std::uint64_t twice_rank_sum = 0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i + 1;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const std::uint64_t twice_mid = static_cast<std::uint64_t>(i + j + 1);
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]]) {
                twice_rank_sum += twice_mid;
                ++st.n_pos;
            }
        i = j;
    }
    st.n_neg = n - st.n_pos;
    if (st.n_pos == 0 || st.n_neg == 0) throw UndefinedError("AUROC undefined: labels contain a single class");
    st.twice_u = twice_rank_sum - st.n_pos * (st.n_pos + 1);
    return st;
}

double auroc(std::span<const int> labels, std::span<const double> scores) {
    return mann_whitney(labels, scores).auroc();
}

double auprc(std::span<const int> labels, std::span<const double> scores, std::uint64_t tie_seed) {
    check_inputs(labels, scores);
    const std::size_t n = labels.size();
    std::size_t n_pos = 0;
    for (int y : labels) n_pos += y ? 1 : 0;
    if (n_pos == 0) throw UndefinedError("AUPRC undefined: no positive labels");

    std::vector<std::size_t> tie_rank(n);
    std::iota(tie_rank.begin(), tie_rank.end(), 0);
    Rng rng(tie_seed);
    rng.shuffle(tie_rank);

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return tie_rank[a] < tie_rank[b];
    });
    double ap = 0.0;
    std::size_t hits = 0;
    for (std::size_t k = 0; k < n; ++k) {
        if (!labels[order[k]]) continue;
        ++hits;
        ap += static_cast<double>(hits) / static_cast<double>(k + 1);
    }
    return ap / static_cast<double>(n_pos);
}

MetricReport compute_report(std::span<const int> labels, std::span<const double> probs, double threshold,
                            std::uint64_t tie_seed) {
    const auto cm = confusion(labels, probs, threshold);
    const auto pos = precision_recall_f1(cm);
    const auto neg = precision_recall_f1(cm.complement());
    MetricReport r;
    r.n = cm.n();
    r.n_positive = cm.tp + cm.fn;
    r.threshold = threshold;
    r.precision = pos.precision;
    r.recall = pos.recall;
    r.f1_positive = pos.f1;
    r.f1_negative = neg.f1;
    r.macro_f1 = (pos.f1 + neg.f1) / 2.0;
    r.tie_seed = tie_seed;
    if (r.n_positive > 0 && r.n_positive < r.n) r.auroc = auroc(labels, probs);
    if (r.n_positive > 0) r.auprc = auprc(labels, probs, tie_seed);
    return r;
}

std::string report_csv_row(const MetricReport& r) {
    auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
    return std::to_string(r.n) + "," + std::to_string(r.n_positive) + "," + format_double(r.threshold) + "," +
           format_double(r.precision) + "," + format_double(r.recall) + "," + format_double(r.f1_positive) + "," +
           format_double(r.f1_negative) + "," + format_double(r.macro_f1) + "," + opt(r.auroc) + "," + opt(r.auprc);
}

nlohmann::json report_to_json(const MetricReport& r) {
    nlohmann::ordered_json j;
    j["n"] = r.n;
    j["n_pos"] = r.n_positive;
    j["threshold"] = r.threshold;
    j["precision"] = r.precision;
    j["recall"] = r.recall;
    j["f1_pos"] = r.f1_positive;
    j["f1_neg"] = r.f1_negative;
    j["macro_f1"] = r.macro_f1;
    if (r.auroc) j["auroc"] = *r.auroc;
    if (r.auprc) j["auprc"] = *r.auprc;
    j["tie_seed"] = r.tie_seed;
    return nlohmann::json::parse(j.dump());
}

}  // namespace trialmatch
