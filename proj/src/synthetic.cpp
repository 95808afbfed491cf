// Desk-scale synthetic corpora: trials with marker-token criteria and patients
// whose notes and structured rows carry those markers at label-dependent rates.

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "trialmatch/corpus.hpp"
#include "trialmatch/error.hpp"
#include "trialmatch/util.hpp"

namespace trialmatch {

namespace {

constexpr std::size_t kCriteriaPerTrial = 4;
constexpr std::size_t kMarkersPerCriterion = 3;
constexpr double kBaseMarkerRate = 0.3;
constexpr std::size_t kCriteriaPerNote = 2;

std::string padded(const char* prefix, std::size_t v, int width) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s%0*zu", prefix, width, v);
    return buf;
}

struct TrialPlan {
    Trial trial;
    std::vector<std::vector<std::string>> markers;  // per criterion
    std::size_t vocab_offset = 0;
};

class Generator {
public:
    Generator(const SyntheticConfig& cfg, std::uint64_t seed) : cfg_(cfg), rng_(seed) {}

    Dataset run() {
        Dataset ds;
        std::vector<TrialPlan> plans;
        for (std::size_t t = 0; t < cfg_.n_trials; ++t) plans.push_back(plan_trial(t));
        for (const auto& plan : plans) ds.trials.push_back(plan.trial);

        for (std::size_t t = 0; t < plans.size(); ++t) {
            const std::size_t n = cfg_.patients_per_trial;
            const auto n_pos = static_cast<std::size_t>(std::llround(cfg_.positive_fraction * n));
            std::vector<int> labels(n, 0);
            std::fill(labels.begin(), labels.begin() + std::min(n_pos, n), 1);
            rng_.shuffle(labels);
            for (std::size_t i = 0; i < n; ++i) ds.patients.push_back(make_patient(plans[t], i, labels[i]));
        }
        return ds;
    }

private:
    std::string background_word(const TrialPlan& plan) {
        const std::size_t v = cfg_.vocabulary_size;
        const std::size_t window = std::max<std::size_t>(1, v / 2);
        const std::size_t idx = (plan.vocab_offset + rng_.below(window)) % v;
        return "w" + std::to_string(idx);
    }

    TrialPlan plan_trial(std::size_t t) {
        TrialPlan plan;
        plan.trial.trial_id = padded("SYN", t + 1, 3);
        const std::size_t total_markers = kCriteriaPerTrial * kMarkersPerCriterion;
        const auto specific = static_cast<std::size_t>(std::llround(cfg_.trial_shift * total_markers));
        plan.vocab_offset = static_cast<std::size_t>(
            std::llround(cfg_.trial_shift * static_cast<double>(t) * cfg_.vocabulary_size / cfg_.n_trials));
        plan.vocab_offset %= cfg_.vocabulary_size;

        for (std::size_t c = 0; c < kCriteriaPerTrial; ++c) {
            std::vector<std::string> markers;
            for (std::size_t j = 0; j < kMarkersPerCriterion; ++j) {
                const std::size_t idx = c * kMarkersPerCriterion + j;
                markers.push_back(idx < specific ? "t" + std::to_string(t + 1) + "m" + std::to_string(idx)
                                                 : "m" + std::to_string(idx));
            }
            Criterion crit;
            crit.kind = c < kCriteriaPerTrial / 2 ? CriterionKind::inclusion : CriterionKind::exclusion;
            crit.criterion_id = (crit.kind == CriterionKind::inclusion ? "inc" : "exc") + std::to_string(c + 1);
            crit.text = "documented evidence of";
            for (const auto& m : markers) crit.text += " " + m;
            crit.text += " " + background_word(plan);
            plan.markers.push_back(std::move(markers));
            plan.trial.criteria.push_back(std::move(crit));
        }
        return plan;
    }

    // markers of kCriteriaPerNote distinct criteria
    std::vector<std::string> marker_tokens(const TrialPlan& plan) {
        std::vector<std::size_t> order(plan.markers.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng_.shuffle(order);
        std::vector<std::string> out;
        for (std::size_t i = 0; i < std::min(kCriteriaPerNote, order.size()); ++i)
            out.insert(out.end(), plan.markers[order[i]].begin(), plan.markers[order[i]].end());
        return out;
    }

    PatientRecord make_patient(const TrialPlan& plan, std::size_t index, int label) {
        const double s = cfg_.signal_strength;
        const double p_marker = label ? kBaseMarkerRate + s * (1.0 - kBaseMarkerRate) : kBaseMarkerRate * (1.0 - s);

        PatientRecord p;
        p.patient_id = plan.trial.trial_id + "-P" + padded("", index + 1, 4);
        p.trial_id = plan.trial.trial_id;
        p.label = EligibilityLabel{label, label ? "eligible" : "ineligible"};

        const std::size_t n_notes = 3 + rng_.below(3);
        for (std::size_t k = 0; k < n_notes; ++k) {
            const std::size_t len = 40 + rng_.below(81);
            std::vector<std::string> words;
            for (std::size_t w = 0; w < len; ++w) words.push_back(background_word(plan));
            if (rng_.bernoulli(p_marker)) {
                for (const auto& m : marker_tokens(plan)) {
                    const std::size_t pos = rng_.below(words.size() + 1);
                    words.insert(words.begin() + static_cast<std::ptrdiff_t>(pos), m);
                }
            }
            ClinicalNote note;
            note.note_id = "n" + std::to_string(k + 1);
            for (std::size_t w = 0; w < words.size(); ++w) {
                if (w) note.text += ' ';
                note.text += words[w];
            }
            note.date = "2021-" + padded("", 1 + rng_.below(12), 2) + "-" + padded("", 1 + rng_.below(28), 2);
            p.notes.push_back(std::move(note));
        }

        p.structured_rows.push_back({RowCategory::demographic, "age", std::to_string(50 + rng_.below(40)), std::nullopt});
        p.structured_rows.push_back({RowCategory::demographic, "sex", rng_.bernoulli(0.5) ? "F" : "M", std::nullopt});
        const std::size_t n_dx = 2 + rng_.below(3);
        for (std::size_t k = 0; k < n_dx; ++k)
            p.structured_rows.push_back({RowCategory::diagnosis, "code", background_word(plan) + " " + background_word(plan),
                                         "2021-06-" + padded("", 1 + rng_.below(28), 2)});
        p.structured_rows.push_back({RowCategory::medication, "drug", background_word(plan), std::nullopt});
        // every patient carries a finding row so its presence says nothing about the label
        std::string value;
        if (rng_.bernoulli(p_marker)) {
            for (const auto& m : marker_tokens(plan)) value += (value.empty() ? "" : " ") + m;
        } else {
            for (std::size_t k = 0; k < kMarkersPerCriterion; ++k) value += (value.empty() ? "" : " ") + background_word(plan);
        }
        p.structured_rows.push_back(
            {RowCategory::diagnosis, "finding", value, "2021-07-" + padded("", 1 + rng_.below(28), 2)});
        return p;
    }

    SyntheticConfig cfg_;
    Rng rng_;
};

}  // namespace

Dataset generate_synthetic(const SyntheticConfig& config, std::uint64_t seed) {
    if (config.n_trials == 0 || config.patients_per_trial == 0 || config.vocabulary_size == 0)
        throw ConfigError("synthetic counts must be positive");
    if (!(config.positive_fraction > 0.0 && config.positive_fraction < 1.0))
        throw ConfigError("positive_fraction must lie in (0, 1)");
    if (!(config.signal_strength >= 0.0 && config.signal_strength <= 1.0))
        throw ConfigError("signal_strength must lie in [0, 1]");
    if (!(config.trial_shift >= 0.0 && config.trial_shift <= 1.0))
        throw ConfigError("trial_shift must lie in [0, 1]");
    return Generator(config, seed).run();
}

}  // namespace trialmatch
