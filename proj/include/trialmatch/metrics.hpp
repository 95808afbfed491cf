#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <tuple>

#include "json.hpp"

namespace trialmatch {

struct ConfusionMatrix {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    double threshold = 0.5;

    std::size_t n() const { return tp + fp + tn + fn; }
    /// Swaps the roles of the two classes.
    ConfusionMatrix complement() const { return {tn, fn, tp, fp, threshold}; }
};

/// A sample is predicted positive iff prob >= threshold.
ConfusionMatrix confusion(std::span<const int> labels, std::span<const double> probs, double threshold = 0.5);

struct PRF {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

/// Any 0/0 evaluates to 0.
PRF precision_recall_f1(const ConfusionMatrix& cm);

double macro_f1(std::span<const int> labels, std::span<const double> probs, double threshold = 0.5);

/// Exact Mann-Whitney numerator in half units: 2 * (#pos>neg pairs) + #tied pairs.
struct RankStatistic {
    std::uint64_t twice_u = 0;
    std::uint64_t n_pos = 0;
    std::uint64_t n_neg = 0;

    double auroc() const;
};

/// Rank-sum with midranks (tie-corrected). Throws UndefinedError for a single class.
RankStatistic mann_whitney(std::span<const int> labels, std::span<const double> scores);

double auroc(std::span<const int> labels, std::span<const double> scores);

/// Step-wise average precision. Ties in score are ordered by a permutation
/// drawn from tie_seed, so the value is reproducible. Throws UndefinedError
/// without positives.
double auprc(std::span<const int> labels, std::span<const double> scores, std::uint64_t tie_seed = 0);

struct MetricReport {
    std::size_t n = 0;
    std::size_t n_positive = 0;
    double threshold = 0.5;
    double precision = 0.0;
    double recall = 0.0;
    double f1_positive = 0.0;
    double f1_negative = 0.0;
    double macro_f1 = 0.0;
    std::optional<double> auroc;
    std::optional<double> auprc;
    std::uint64_t tie_seed = 0;
};

MetricReport compute_report(std::span<const int> labels, std::span<const double> probs, double threshold = 0.5,
                            std::uint64_t tie_seed = 0);

inline constexpr std::string_view kReportCsvHeader =
    "n,n_pos,threshold,precision,recall,f1_pos,f1_neg,macro_f1,auroc,auprc";

/// Absent metrics are written as empty fields.
std::string report_csv_row(const MetricReport& r);
nlohmann::json report_to_json(const MetricReport& r);

}  // namespace trialmatch
