#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "trialmatch/classifiers.hpp"
#include "trialmatch/corpus.hpp"
#include "trialmatch/embedding.hpp"
#include "trialmatch/metrics.hpp"
#include "trialmatch/representation.hpp"
#include "trialmatch/retrieval.hpp"

namespace trialmatch {

/// Mixes a label into a base seed so independent streams never share state.
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag);

// ---------------------------------------------------------------------------
// Run log

/// Timestamped, line-oriented log shared by every run in a task.
class RunLog {
public:
    void info(const std::string& line);
    std::vector<std::string> lines() const;
    void set_echo(std::function<void(const std::string&)> echo) { echo_ = std::move(echo); }

private:
    mutable std::mutex mutex_;
    std::vector<std::string> lines_;
    std::function<void(const std::string&)> echo_;
};

// ---------------------------------------------------------------------------
// Specs

struct ProviderSpec {
    std::string name = "mock";
    std::string type = "mock";  // mock | http
    std::size_t dim = 768;
    std::uint64_t seed = 0;
    std::string endpoint;
    std::string model;
    std::string cache;  // optional cache file path

    bool operator==(const ProviderSpec&) const = default;
};

nlohmann::json to_json(const ProviderSpec& p);
ProviderSpec provider_spec_from_json(const nlohmann::json& j, ProviderSpec base = {});

/// Owns a provider and, when configured, the cache in front of it.
class ProviderHandle {
public:
    explicit ProviderHandle(const ProviderSpec& spec);
    ~ProviderHandle();

    const EmbeddingProvider& get() const { return cached_ ? *cached_ : *inner_; }
    void flush() const;

private:
    std::unique_ptr<EmbeddingProvider> inner_;
    std::unique_ptr<EmbeddingCache> cache_;
    std::unique_ptr<CachedProvider> cached_;
};

struct PipelineSpec {
    std::string id = "B";
    ProviderSpec provider;
    std::size_t k_retrieve = kDefaultTopK;
    PoolingStrategy pooling = PoolingStrategy::mean;
    std::size_t pooling_components = 1;  // for pca_mean, dimred_sequence, dimred_hidden and hybrid_concat
    std::optional<DimRedConfig> dimred;  // fitted over pooled vectors
    ClassifierKind classifier = ClassifierKind::mlp;
    AdapterMode adapter_mode = AdapterMode::frozen;
    bool standardize = false;  // z-score features with training statistics
    TrainConfig train;
    TreeConfig tree;
    ForestConfig forest;
    SvmConfig svm;
    std::uint64_t seed = 0;
};

/// RAG-MLP: mean pooling straight into the MLP.
PipelineSpec variant_a();
/// RAG-DimRed-MLP: mean pooling, then a 128-component hidden-axis PCA fitted on training vectors.
PipelineSpec variant_b();

nlohmann::json to_json(const PipelineSpec& s);
PipelineSpec pipeline_spec_from_json(const nlohmann::json& j, const PipelineSpec& base = variant_b());

enum class Task { task1, task2, task3, task4, task5, task6 };

std::string_view to_string(Task t);
Task parse_task(std::string_view s);

struct DatasetSource {
    std::string name;
    std::string patients;
    std::string trials;
    std::optional<SyntheticConfig> synthetic;
    std::optional<std::uint64_t> synthetic_seed;
};

struct ExperimentConfig {
    Task task = Task::task1;
    std::vector<DatasetSource> datasets;
    Modality modality = Modality::mixed;
    ChunkingConfig chunking;
    PipelineSpec base = variant_b();
    std::vector<PipelineSpec> variants;  // overrides the task's canonical sweep when non-empty
    std::vector<ProviderSpec> providers;  // task2
    SplitSpec split;
    double validation_fraction = 0.1;
    std::vector<double> exclusion_sweep{1.0, 0.8, 0.6, 0.4, 0.2};
    std::vector<std::string> target_trials;  // task6; empty means every trial
    std::string output_dir;
    std::uint64_t seed = 0;
};

/// Relative dataset paths are resolved against base_dir.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
nlohmann::json to_json(const ExperimentConfig& c);

/// Content hash of the resolved config (output_dir excluded).
std::string config_hash(const ExperimentConfig& c);

/// Built-in defaults as a JSON schema fragment, published under docs/.
nlohmann::json config_schema();

Dataset load_source(const DatasetSource& src, std::uint64_t seed);
std::string dataset_hash(const Dataset& ds);

// ---------------------------------------------------------------------------
// Features

struct FeatureSet {
    std::vector<std::string> patient_ids;  // dataset order, skipped patients removed
    std::vector<std::string> trial_ids;
    std::vector<int> labels;
    Matrix x;
    std::size_t skipped = 0;
    std::size_t substituted = 0;  // patients whose PCA pooling fell back to mean pooling
    bool stacked_chunks = false;  // provider had no token matrices
};

struct RunOptions {
    Modality modality = Modality::mixed;
    ChunkingConfig chunking;
    double validation_fraction = 0.1;
    std::size_t threads = 1;
    bool keep_models = false;  // fill RunResult::model
    RunLog* log = nullptr;
};

/// Chunk, embed, retrieve, assemble, pool: one row per patient. Patients are
/// processed in parallel but each row depends only on its patient.
FeatureSet build_features(const PipelineSpec& spec, const Dataset& ds, const RunOptions& opts);

// ---------------------------------------------------------------------------
// Runs

struct RunResult {
    std::string task;
    std::string variant;
    std::string dataset;
    std::string trial;
    std::optional<double> exclusion;
    MetricReport report;
    std::optional<MetricReport> validation;
    double wall_seconds = 0.0;
    std::string config_hash;
    std::uint64_t seed = 0;
    std::size_t skipped = 0;
    std::size_t n_train = 0;
    std::size_t n_validation = 0;
    std::size_t n_test = 0;
    std::vector<std::string> stages;
    std::vector<std::string> notes;
    nlohmann::json model;  // serialized classifier, kept only when requested
};

/// Trains on split.train (less a validation carve for the MLP) and evaluates on split.test.
RunResult evaluate_features(const PipelineSpec& spec, const FeatureSet& features, const Split& split,
                            const RunOptions& opts);

RunResult run_pipeline(const PipelineSpec& spec, const Dataset& ds, const Split& split, const RunOptions& opts);

struct TaskOutput {
    std::vector<RunResult> results;
    nlohmann::json manifest;
};

TaskOutput run_task(const ExperimentConfig& cfg, std::size_t threads = 1, RunLog* log = nullptr,
                    bool keep_models = false);

/// Canonical sweep for the task (ignores cfg.variants).
std::vector<PipelineSpec> task_variants(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// Outputs

inline constexpr std::string_view kResultsCsvPrefix = "task,variant,dataset,trial,exclusion,";
inline constexpr std::string_view kResultsCsvSuffix = ",seed,config_hash";

std::string results_csv(const std::vector<RunResult>& results);

/// Writes results.csv, manifest.json, run.log, models/run_NNN.json for kept
/// models and, when plots is set, plots/*.svg.
std::vector<std::filesystem::path> write_outputs(const TaskOutput& out, const RunLog& log,
                                                 const std::filesystem::path& dir, bool plots);

std::string bar_chart_svg(const std::string& title, const std::vector<RunResult>& results);

}  // namespace trialmatch
