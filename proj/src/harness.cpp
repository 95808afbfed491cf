#include "trialmatch/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <ctime>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "trialmatch/error.hpp"
#include "trialmatch/util.hpp"

namespace trialmatch {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
    std::uint64_t state = base ^ fnv1a64(tag);
    return splitmix64(state);
}

void RunLog::info(const std::string& line) {
    const auto now = std::chrono::system_clock::now();
    const auto t = std::chrono::system_clock::to_time_t(now);
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    std::tm tm{};
    gmtime_r(&t, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%S", &tm);
    char full[48];
    std::snprintf(full, sizeof full, "%s.%03dZ", stamp, static_cast<int>(ms));
    std::string entry = std::string(full) + " " + line;
    std::lock_guard lock(mutex_);
    if (echo_) echo_(entry);
    lines_.push_back(std::move(entry));
}

std::vector<std::string> RunLog::lines() const {
    std::lock_guard lock(mutex_);
    return lines_;
}

namespace {

void log_line(RunLog* log, const std::string& line) {
    if (log) log->info(line);
}

void check_keys(const json& j, std::initializer_list<std::string_view> allowed, std::string_view where) {
    if (!j.is_object()) throw ConfigError(std::string(where) + " must be a JSON object");
    for (const auto& [key, _] : j.items())
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw ConfigError("unknown key '" + key + "' in " + std::string(where));
}

template <class T>
T get_or(const json& j, const char* key, T fallback) {
    if (!j.contains(key) || j[key].is_null()) return fallback;
    try {
        return j[key].get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Providers

json to_json(const ProviderSpec& p) {
    ojson j;
    j["name"] = p.name;
    j["type"] = p.type;
    j["dim"] = p.dim;
    j["seed"] = p.seed;
    if (!p.endpoint.empty()) j["endpoint"] = p.endpoint;
    if (!p.model.empty()) j["model"] = p.model;
    if (!p.cache.empty()) j["cache"] = p.cache;
    return json::parse(j.dump());
}

ProviderSpec provider_spec_from_json(const json& j, ProviderSpec base) {
    check_keys(j, {"name", "type", "dim", "seed", "endpoint", "model", "cache"}, "provider");
    base.name = get_or(j, "name", base.name);
    base.type = get_or(j, "type", base.type);
    base.dim = get_or(j, "dim", base.dim);
    base.seed = get_or(j, "seed", base.seed);
    base.endpoint = get_or(j, "endpoint", base.endpoint);
    base.model = get_or(j, "model", base.model);
    base.cache = get_or(j, "cache", base.cache);
    if (base.type != "mock" && base.type != "http")
        throw ConfigError("provider type must be mock|http, got '" + base.type + "'");
    if (base.dim == 0) throw ConfigError("provider dim must be positive");
    return base;
}

ProviderHandle::ProviderHandle(const ProviderSpec& spec) {
    if (spec.type == "mock") {
        inner_ = std::make_unique<MockProvider>(spec.name, spec.dim, spec.seed);
    } else {
        HttpProviderConfig cfg;
        cfg.endpoint = spec.endpoint;
        cfg.model = spec.model;
        cfg.dim = spec.dim;
        inner_ = std::make_unique<HttpProvider>(spec.name, resolve_endpoint(cfg));
    }
    if (!spec.cache.empty()) {
        cache_ = std::make_unique<EmbeddingCache>(spec.cache, spec.dim);
        cached_ = std::make_unique<CachedProvider>(*inner_, *cache_);
    }
}

ProviderHandle::~ProviderHandle() = default;

void ProviderHandle::flush() const {
    if (cache_) cache_->flush();
}

// ---------------------------------------------------------------------------
// Pipeline specs

PipelineSpec variant_a() {
    PipelineSpec s;
    s.id = "A";
    s.dimred.reset();
    return s;
}

PipelineSpec variant_b() {
    PipelineSpec s;
    s.id = "B";
    s.dimred = DimRedConfig{DimRedAxis::hidden, kDefaultHiddenComponents, FitScope::dataset};
    return s;
}

namespace {

json tree_cfg_json(const TreeConfig& t) {
    return {{"max_depth", t.max_depth}, {"min_leaf", t.min_leaf}, {"max_features", t.max_features}};
}

TreeConfig tree_cfg_from(const json& j, TreeConfig t) {
    check_keys(j, {"max_depth", "min_leaf", "max_features"}, "tree");
    t.max_depth = get_or(j, "max_depth", t.max_depth);
    t.min_leaf = get_or(j, "min_leaf", t.min_leaf);
    t.max_features = get_or(j, "max_features", t.max_features);
    if (t.min_leaf == 0) throw ConfigError("tree min_leaf must be positive");
    return t;
}

json dimred_json(const DimRedConfig& d) {
    return {{"axis", to_string(d.axis)}, {"n_components", d.n_components}, {"fit_scope", to_string(d.fit_scope)}};
}

}  // namespace

json to_json(const PipelineSpec& s) {
    ojson j;
    j["id"] = s.id;
    j["provider"] = to_json(s.provider);
    j["k_retrieve"] = s.k_retrieve;
    j["pooling"] = to_string(s.pooling);
    j["pooling_components"] = s.pooling_components;
    j["dimred"] = s.dimred ? dimred_json(*s.dimred) : json(nullptr);
    j["classifier"] = to_string(s.classifier);
    j["adapter_mode"] = to_string(s.adapter_mode);
    j["standardize"] = s.standardize;
    j["train"] = to_json(s.train);
    j["tree"] = tree_cfg_json(s.tree);
    j["forest"] = {{"n_trees", s.forest.n_trees},
                   {"tree", tree_cfg_json(s.forest.tree)},
                   {"bootstrap", s.forest.bootstrap},
                   {"feature_subsample", s.forest.feature_subsample}};
    j["svm"] = {{"lambda", s.svm.lambda}, {"epochs", s.svm.epochs}, {"learning_rate", s.svm.learning_rate}};
    j["seed"] = s.seed;
    return json::parse(j.dump());
}

PipelineSpec pipeline_spec_from_json(const json& j, const PipelineSpec& base) {
    check_keys(j,
               {"id", "provider", "k_retrieve", "pooling", "pooling_components", "dimred", "classifier",
                "adapter_mode", "standardize", "train", "tree", "forest", "svm", "seed"},
               "pipeline spec");
    PipelineSpec s = base;
    s.id = get_or(j, "id", s.id);
    if (j.contains("provider")) s.provider = provider_spec_from_json(j["provider"], s.provider);
    s.k_retrieve = get_or(j, "k_retrieve", s.k_retrieve);
    if (s.k_retrieve == 0) throw ConfigError("k_retrieve must be at least 1");
    if (j.contains("pooling")) s.pooling = parse_pooling(j["pooling"].get<std::string>());
    s.pooling_components = get_or(j, "pooling_components", s.pooling_components);
    if (s.pooling_components == 0) throw ConfigError("pooling_components must be positive");
    if (j.contains("dimred")) {
        const auto& d = j["dimred"];
        if (d.is_null()) {
            s.dimred.reset();
        } else {
            check_keys(d, {"axis", "n_components", "fit_scope"}, "dimred");
            DimRedConfig c = s.dimred.value_or(DimRedConfig{DimRedAxis::hidden, kDefaultHiddenComponents, FitScope::dataset});
            if (d.contains("axis")) c.axis = parse_axis(d["axis"].get<std::string>());
            c.n_components = get_or(d, "n_components", c.n_components);
            if (d.contains("fit_scope")) c.fit_scope = parse_fit_scope(d["fit_scope"].get<std::string>());
            c.validate();
            if (c.axis != DimRedAxis::hidden || c.fit_scope != FitScope::dataset)
                throw ConfigError("the dimred stage compresses pooled vectors (axis=hidden, fit_scope=dataset); "
                                  "use pooling=dimred_hidden or dimred_sequence for per-chunk DimRed");
            s.dimred = c;
        }
    }
    if (j.contains("classifier")) s.classifier = parse_classifier_kind(j["classifier"].get<std::string>());
    if (j.contains("adapter_mode")) s.adapter_mode = parse_adapter_mode(j["adapter_mode"].get<std::string>());
    s.standardize = get_or(j, "standardize", s.standardize);
    if (j.contains("train")) {
        try {
            s.train = train_config_from_json(j["train"], s.train);
        } catch (const json::exception& e) {
            throw ConfigError(std::string("bad train config: ") + e.what());
        }
    }
    if (j.contains("tree")) s.tree = tree_cfg_from(j["tree"], s.tree);
    if (j.contains("forest")) {
        const auto& f = j["forest"];
        check_keys(f, {"n_trees", "tree", "bootstrap", "feature_subsample"}, "forest");
        s.forest.n_trees = get_or(f, "n_trees", s.forest.n_trees);
        if (f.contains("tree")) s.forest.tree = tree_cfg_from(f["tree"], s.forest.tree);
        s.forest.bootstrap = get_or(f, "bootstrap", s.forest.bootstrap);
        s.forest.feature_subsample = get_or(f, "feature_subsample", s.forest.feature_subsample);
        if (s.forest.n_trees == 0) throw ConfigError("forest n_trees must be positive");
    }
    if (j.contains("svm")) {
        const auto& v = j["svm"];
        check_keys(v, {"lambda", "epochs", "learning_rate"}, "svm");
        s.svm.lambda = get_or(v, "lambda", s.svm.lambda);
        s.svm.epochs = get_or(v, "epochs", s.svm.epochs);
        s.svm.learning_rate = get_or(v, "learning_rate", s.svm.learning_rate);
    }
    s.seed = get_or(j, "seed", s.seed);
    return s;
}

// ---------------------------------------------------------------------------
// Experiment config

std::string_view to_string(Task t) {
    static constexpr std::string_view names[] = {"task1", "task2", "task3", "task4", "task5", "task6"};
    return names[static_cast<int>(t)];
}

Task parse_task(std::string_view s) {
    for (int i = 0; i < 6; ++i)
        if (to_string(static_cast<Task>(i)) == s) return static_cast<Task>(i);
    throw ConfigError("task must be one of task1..task6, got '" + std::string(s) + "'");
}

namespace {

json synthetic_json(const SyntheticConfig& c) {
    return {{"n_trials", c.n_trials},
            {"patients_per_trial", c.patients_per_trial},
            {"positive_fraction", c.positive_fraction},
            {"signal_strength", c.signal_strength},
            {"trial_shift", c.trial_shift},
            {"vocabulary_size", c.vocabulary_size}};
}

DatasetSource source_from_json(const json& j, const std::filesystem::path& base_dir) {
    check_keys(j, {"name", "patients", "trials", "synthetic"}, "dataset");
    DatasetSource src;
    src.name = get_or<std::string>(j, "name", "");
    if (j.contains("synthetic")) {
        const auto& s = j["synthetic"];
        check_keys(s,
                   {"n_trials", "patients_per_trial", "positive_fraction", "signal_strength", "trial_shift",
                    "vocabulary_size", "seed"},
                   "synthetic");
        SyntheticConfig c;
        c.n_trials = get_or(s, "n_trials", c.n_trials);
        c.patients_per_trial = get_or(s, "patients_per_trial", c.patients_per_trial);
        c.positive_fraction = get_or(s, "positive_fraction", c.positive_fraction);
        c.signal_strength = get_or(s, "signal_strength", c.signal_strength);
        c.trial_shift = get_or(s, "trial_shift", c.trial_shift);
        c.vocabulary_size = get_or(s, "vocabulary_size", c.vocabulary_size);
        src.synthetic = c;
        if (s.contains("seed")) src.synthetic_seed = s["seed"].get<std::uint64_t>();
        if (src.name.empty()) src.name = "synthetic";
    } else {
        if (!j.contains("patients") || !j.contains("trials"))
            throw ConfigError("dataset needs either 'synthetic' or both 'patients' and 'trials'");
        auto resolve = [&](const std::string& p) {
            std::filesystem::path path(p);
            if (path.is_relative() && !base_dir.empty()) path = base_dir / path;
            return path.lexically_normal().string();
        };
        src.patients = resolve(j["patients"].get<std::string>());
        src.trials = resolve(j["trials"].get<std::string>());
        if (src.name.empty()) src.name = std::filesystem::path(src.patients).parent_path().filename().string();
        if (src.name.empty()) src.name = "dataset";
    }
    return src;
}

json source_json(const DatasetSource& s) {
    ojson j;
    j["name"] = s.name;
    if (s.synthetic) {
        json syn = synthetic_json(*s.synthetic);
        if (s.synthetic_seed) syn["seed"] = *s.synthetic_seed;
        j["synthetic"] = syn;
    } else {
        j["patients"] = s.patients;
        j["trials"] = s.trials;
    }
    return json::parse(j.dump());
}

}  // namespace

ExperimentConfig experiment_config_from_json(const json& j, const std::filesystem::path& base_dir) {
    check_keys(j,
               {"task", "dataset", "datasets", "modality", "chunking", "base", "variants", "providers", "split",
                "exclusion_sweep", "target_trials", "output_dir", "seed"},
               "experiment config");
    ExperimentConfig c;
    if (!j.contains("task")) throw ConfigError("experiment config needs 'task'");
    c.task = parse_task(j["task"].get<std::string>());
    c.seed = get_or(j, "seed", c.seed);
    if (j.contains("dataset") && j.contains("datasets"))
        throw ConfigError("give either 'dataset' or 'datasets', not both");
    if (j.contains("dataset")) c.datasets.push_back(source_from_json(j["dataset"], base_dir));
    if (j.contains("datasets"))
        for (const auto& d : j["datasets"]) c.datasets.push_back(source_from_json(d, base_dir));
    if (c.datasets.empty()) {
        if (c.task == Task::task5) throw ConfigError("task5 needs at least one entry in 'datasets'");
        c.datasets.push_back(DatasetSource{"synthetic", "", "", SyntheticConfig{}, std::nullopt});
    }
    if (j.contains("modality")) c.modality = parse_modality(j["modality"].get<std::string>());
    if (j.contains("chunking")) {
        const auto& ch = j["chunking"];
        check_keys(ch, {"chunk_size", "overlap"}, "chunking");
        c.chunking.chunk_size = get_or(ch, "chunk_size", c.chunking.chunk_size);
        c.chunking.overlap = get_or(ch, "overlap", c.chunking.overlap);
        if (c.chunking.chunk_size == 0 || c.chunking.overlap >= c.chunking.chunk_size)
            throw ConfigError("chunking needs chunk_size > overlap >= 0");
    }
    if (j.contains("base")) c.base = pipeline_spec_from_json(j["base"], c.base);
    if (j.contains("variants"))
        for (const auto& v : j["variants"]) c.variants.push_back(pipeline_spec_from_json(v, c.base));
    if (j.contains("providers"))
        for (const auto& p : j["providers"]) c.providers.push_back(provider_spec_from_json(p, c.base.provider));
    if (j.contains("split")) {
        const auto& s = j["split"];
        check_keys(s, {"mode", "test_fraction", "validation_fraction", "target_trial", "exclusion_fraction"},
                   "split");
        const auto mode = get_or<std::string>(s, "mode", "random");
        if (mode == "random") c.split.mode = SplitMode::random;
        else if (mode == "cross_trial") c.split.mode = SplitMode::cross_trial;
        else throw ConfigError("split mode must be random|cross_trial, got '" + mode + "'");
        c.split.test_fraction = get_or(s, "test_fraction", c.split.test_fraction);
        c.validation_fraction = get_or(s, "validation_fraction", c.validation_fraction);
        if (s.contains("target_trial")) c.split.target_trial = s["target_trial"].get<std::string>();
        c.split.exclusion_fraction = get_or(s, "exclusion_fraction", c.split.exclusion_fraction);
    }
    if (!(c.validation_fraction >= 0.0 && c.validation_fraction < 1.0))
        throw ConfigError("validation_fraction must lie in [0, 1)");
    if (j.contains("exclusion_sweep")) {
        c.exclusion_sweep = j["exclusion_sweep"].get<std::vector<double>>();
        for (double e : c.exclusion_sweep)
            if (!(e >= 0.0 && e <= 1.0)) throw ConfigError("exclusion_sweep values must lie in [0, 1]");
    }
    if (c.task == Task::task6 && c.exclusion_sweep.empty()) throw ConfigError("task6 needs a non-empty exclusion_sweep");
    if (j.contains("target_trials")) c.target_trials = j["target_trials"].get<std::vector<std::string>>();
    c.output_dir = get_or<std::string>(j, "output_dir", "");
    return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
    return experiment_config_from_json(j, path.parent_path());
}

json to_json(const ExperimentConfig& c) {
    ojson j;
    j["task"] = to_string(c.task);
    j["seed"] = c.seed;
    json ds = json::array();
    for (const auto& d : c.datasets) ds.push_back(source_json(d));
    j["datasets"] = ds;
    j["modality"] = to_string(c.modality);
    j["chunking"] = {{"chunk_size", c.chunking.chunk_size}, {"overlap", c.chunking.overlap}};
    j["base"] = to_json(c.base);
    json vs = json::array();
    for (const auto& v : c.variants) vs.push_back(to_json(v));
    j["variants"] = vs;
    json ps = json::array();
    for (const auto& p : c.providers) ps.push_back(to_json(p));
    j["providers"] = ps;
    json split{{"mode", c.split.mode == SplitMode::random ? "random" : "cross_trial"},
               {"test_fraction", c.split.test_fraction},
               {"validation_fraction", c.validation_fraction},
               {"exclusion_fraction", c.split.exclusion_fraction}};
    if (c.split.target_trial) split["target_trial"] = *c.split.target_trial;
    j["split"] = split;
    j["exclusion_sweep"] = c.exclusion_sweep;
    j["target_trials"] = c.target_trials;
    if (!c.output_dir.empty()) j["output_dir"] = c.output_dir;
    return json::parse(j.dump());
}

std::string config_hash(const ExperimentConfig& c) {
    json j = to_json(c);
    j.erase("output_dir");
    return hex64(fnv1a64(j.dump()));
}

json config_schema() {
    const PipelineSpec b = variant_b();
    const ExperimentConfig c;
    json pipeline{
        {"type", "object"},
        {"properties",
         {{"id", {{"type", "string"}}},
          {"provider",
           {{"type", "object"},
            {"properties",
             {{"name", {{"type", "string"}, {"default", b.provider.name}}},
              {"type", {{"enum", {"mock", "http"}}, {"default", b.provider.type}}},
              {"dim", {{"type", "integer"}, {"minimum", 1}, {"default", b.provider.dim}}},
              {"seed", {{"type", "integer"}, {"default", b.provider.seed}}},
              {"endpoint", {{"type", "string"}}},
              {"model", {{"type", "string"}}},
              {"cache", {{"type", "string"}}}}}}},
          {"k_retrieve", {{"type", "integer"}, {"minimum", 1}, {"default", kDefaultTopK}}},
          {"pooling",
           {{"enum", {"mean", "pca_mean", "last_token", "dimred_sequence", "dimred_hidden", "hybrid_concat"}},
            {"default", to_string(b.pooling)}}},
          {"pooling_components", {{"type", "integer"}, {"minimum", 1}, {"default", b.pooling_components}}},
          {"dimred",
           {{"type", {"object", "null"}},
            {"properties",
             {{"axis", {{"enum", {"hidden"}}, {"default", "hidden"}}},
              {"n_components", {{"type", "integer"}, {"minimum", 1}, {"default", kDefaultHiddenComponents}}},
              {"fit_scope", {{"enum", {"dataset"}}, {"default", "dataset"}}}}}}},
          {"classifier", {{"enum", {"mlp", "tree", "forest", "svm"}}, {"default", to_string(b.classifier)}}},
          {"adapter_mode", {{"enum", {"frozen", "adapter"}}, {"default", to_string(b.adapter_mode)}}},
          {"standardize", {{"type", "boolean"}, {"default", b.standardize}}},
          {"train", {{"type", "object"}, {"default", to_json(b.train)}}},
          {"tree", {{"type", "object"}, {"default", tree_cfg_json(b.tree)}}},
          {"forest", {{"type", "object"}, {"default", to_json(b)["forest"]}}},
          {"svm", {{"type", "object"}, {"default", to_json(b)["svm"]}}},
          {"seed", {{"type", "integer"}, {"default", 0}}}}}};
    json dataset{{"type", "object"},
                 {"properties",
                  {{"name", {{"type", "string"}}},
                   {"patients", {{"type", "string"}}},
                   {"trials", {{"type", "string"}}},
                   {"synthetic", {{"type", "object"}, {"default", synthetic_json(SyntheticConfig{})}}}}}};
    return {{"$schema", "https://json-schema.org/draft/2020-12/schema"},
            {"title", "trialmatch experiment config"},
            {"type", "object"},
            {"required", {"task"}},
            {"properties",
             {{"task", {{"enum", {"task1", "task2", "task3", "task4", "task5", "task6"}}}},
              {"seed", {{"type", "integer"}, {"default", c.seed}}},
              {"dataset", dataset},
              {"datasets", {{"type", "array"}, {"items", dataset}}},
              {"modality", {{"enum", {"structured", "unstructured", "mixed"}}, {"default", to_string(c.modality)}}},
              {"chunking",
               {{"type", "object"},
                {"properties",
                 {{"chunk_size", {{"type", "integer"}, {"default", c.chunking.chunk_size}}},
                  {"overlap", {{"type", "integer"}, {"default", c.chunking.overlap}}}}}}},
              {"base", pipeline},
              {"variants", {{"type", "array"}, {"items", pipeline}}},
              {"providers", {{"type", "array"}}},
              {"split",
               {{"type", "object"},
                {"properties",
                 {{"mode", {{"enum", {"random", "cross_trial"}}, {"default", "random"}}},
                  {"test_fraction", {{"type", "number"}, {"default", c.split.test_fraction}}},
                  {"validation_fraction", {{"type", "number"}, {"default", c.validation_fraction}}},
                  {"target_trial", {{"type", "string"}}},
                  {"exclusion_fraction", {{"type", "number"}, {"default", c.split.exclusion_fraction}}}}}}},
              {"exclusion_sweep", {{"type", "array"}, {"default", c.exclusion_sweep}}},
              {"target_trials", {{"type", "array"}, {"items", {{"type", "string"}}}}},
              {"output_dir", {{"type", "string"}}}}}};
}

Dataset load_source(const DatasetSource& src, std::uint64_t seed) {
    if (src.synthetic) return generate_synthetic(*src.synthetic, src.synthetic_seed.value_or(seed));
    return load_dataset(src.patients, src.trials);
}

std::string dataset_hash(const Dataset& ds) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : ds.trials) h = fnv1a64(trial_to_json_line(t) + "\n", h);
    for (const auto& p : ds.patients) h = fnv1a64(patient_to_json_line(p) + "\n", h);
    return hex64(h);
}

// ---------------------------------------------------------------------------
// Features

namespace {

// Runs fn(i) for i in [0, n) on up to `threads` workers. The first failure by
// index is rethrown, so errors do not depend on scheduling.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
    std::vector<std::exception_ptr> errors(n);
    auto body = [&](std::size_t i) {
        try {
            fn(i);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    };
    const std::size_t workers = std::min(std::max<std::size_t>(threads, 1), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < n; i = next++) body(i);
            });
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

struct PooledRow {
    std::vector<double> values;
    bool skipped = false;
    bool substituted = false;
};

PooledVector pool_matrix(const PipelineSpec& spec, const TokenMatrix& tm, bool& substituted) {
    const std::size_t n = spec.pooling_components;
    switch (spec.pooling) {
        case PoolingStrategy::mean: return mean_pool(tm);
        case PoolingStrategy::last_token: return select_last_token(tm);
        case PoolingStrategy::pca_mean:
        case PoolingStrategy::dimred_hidden:
            if (tm.rows() < 2) {
                substituted = true;
                return mean_pool(tm);
            }
            return spec.pooling == PoolingStrategy::pca_mean
                       ? pool_pca_mean(tm, n)
                       : dimred(tm, DimRedConfig{DimRedAxis::hidden, n, FitScope::per_chunk});
        case PoolingStrategy::dimred_sequence:
            return dimred(tm, DimRedConfig{DimRedAxis::sequence, n, FitScope::per_chunk});
        case PoolingStrategy::hybrid_concat:
            return hybrid_concat(dimred(tm, DimRedConfig{DimRedAxis::sequence, n, FitScope::per_chunk}),
                                 select_last_token(tm));
    }
    return mean_pool(tm);
}

}  // namespace

FeatureSet build_features(const PipelineSpec& spec, const Dataset& ds, const RunOptions& opts) {
    ProviderHandle handle(spec.provider);
    const EmbeddingProvider& provider = handle.get();
    const bool tokens = provider.descriptor().supports_token_matrix;

    // criteria are embedded once per trial, in trial order
    std::map<std::string, std::vector<EmbeddingVector>> criteria_vectors;
    for (const auto& t : ds.trials) {
        std::vector<std::string> texts;
        for (const auto& c : t.criteria) texts.push_back(c.text);
        criteria_vectors[t.trial_id] = texts.empty() ? std::vector<EmbeddingVector>{} : embed_texts(provider, texts);
    }

    const std::string instructions = default_instructions();
    std::vector<PooledRow> rows(ds.patients.size());
    parallel_for(ds.patients.size(), opts.threads, [&](std::size_t i) {
        const auto& p = ds.patients[i];
        try {
            const auto chunks = chunk_patient(p, opts.modality, opts.chunking);
            if (chunks.empty()) {
                rows[i].skipped = true;
                return;
            }
            const Trial* trial = ds.find_trial(p.trial_id);
            const auto& cvec = criteria_vectors.at(p.trial_id);
            const auto r = retrieve_for_patient(provider, chunks, trial->criteria, cvec, spec.k_retrieve);
            TokenMatrix tm;
            if (tokens) {
                const auto prompt = assemble_prompt(instructions, trial->criteria, r.selected);
                tm = embed_tokens(provider, prompt.full_text);
            } else {
                tm = Matrix::from_rows(r.selected_vectors);
            }
            rows[i].values = pool_matrix(spec, tm, rows[i].substituted).values;
        } catch (const Error& e) {
            // keep the error kind, add the patient
            const std::string msg = "patient " + p.patient_id + ": " + e.what();
            switch (e.kind()) {
                case ErrorKind::usage: throw ConfigError(msg);
                case ErrorKind::data: throw DataError(msg);
                default: throw ProviderError(msg);
            }
        }
    });
    handle.flush();

    FeatureSet fs;
    fs.stacked_chunks = !tokens;
    std::size_t width = 0;
    std::vector<double> data;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].skipped) {
            ++fs.skipped;
            log_line(opts.log, "skip patient " + ds.patients[i].patient_id + ": no chunks under modality " +
                                   std::string(to_string(opts.modality)));
            continue;
        }
        if (rows[i].substituted) {
            ++fs.substituted;
            log_line(opts.log, "patient " + ds.patients[i].patient_id +
                                   ": fewer than 2 token rows, mean pooling substituted for " +
                                   std::string(to_string(spec.pooling)));
        }
        if (width == 0) width = rows[i].values.size();
        if (rows[i].values.size() != width)
            throw DataError("patient " + ds.patients[i].patient_id + " has a feature vector of length " +
                            std::to_string(rows[i].values.size()) + ", expected " + std::to_string(width) +
                            " (pooling substitution changes the shape for this strategy)");
        fs.patient_ids.push_back(ds.patients[i].patient_id);
        fs.trial_ids.push_back(ds.patients[i].trial_id);
        fs.labels.push_back(ds.patients[i].label.value);
        data.insert(data.end(), rows[i].values.begin(), rows[i].values.end());
    }
    if (fs.skipped * 20 > ds.patients.size())
        throw DataError(std::to_string(fs.skipped) + " of " + std::to_string(ds.patients.size()) +
                        " patients have no chunks under modality " + std::string(to_string(opts.modality)) +
                        " (more than 5%)");
    if (fs.patient_ids.empty()) throw DataError("no patient produced a feature vector");
    fs.x = Matrix(fs.patient_ids.size(), width, std::move(data));
    if (fs.stacked_chunks)
        log_line(opts.log, "provider " + spec.provider.name +
                               " has no token matrices; pooling runs on stacked selected-chunk embeddings");
    return fs;
}

// ---------------------------------------------------------------------------
// Runs

namespace {

std::vector<std::string> stage_list(const PipelineSpec& spec, const RunOptions& opts, bool stacked) {
    std::vector<std::string> st{"chunk:" + std::string(to_string(opts.modality)),
                                "embed:" + spec.provider.name,
                                "retrieve:k=" + std::to_string(spec.k_retrieve)};
    if (stacked) {
        st.push_back("stack_chunk_embeddings");
    } else {
        st.push_back("assemble_prompt");
        st.push_back("token_matrix");
    }
    st.push_back("pool:" + std::string(to_string(spec.pooling)));
    if (spec.dimred)
        st.push_back("dimred:" + std::string(to_string(spec.dimred->axis)) + "/" +
                     std::to_string(spec.dimred->n_components) + "/" + std::string(to_string(spec.dimred->fit_scope)));
    if (spec.standardize) st.push_back("standardize");
    std::string train = "train:" + std::string(to_string(spec.classifier));
    if (spec.classifier == ClassifierKind::mlp) train += "/" + std::string(to_string(spec.adapter_mode));
    st.push_back(train);
    st.push_back("evaluate");
    return st;
}

Matrix take_rows(const Matrix& x, const std::vector<std::size_t>& idx) {
    Matrix out(idx.size(), x.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
        auto src = x.row(idx[r]);
        std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
}

std::vector<int> take(const std::vector<int>& y, const std::vector<std::size_t>& idx) {
    std::vector<int> out;
    for (auto i : idx) out.push_back(y[i]);
    return out;
}

}  // namespace

RunResult evaluate_features(const PipelineSpec& spec, const FeatureSet& fs, const Split& split,
                            const RunOptions& opts) {
    const auto t0 = std::chrono::steady_clock::now();
    RunResult r;
    r.variant = spec.id;
    r.seed = spec.seed;
    r.skipped = fs.skipped;
    r.stages = stage_list(spec, opts, fs.stacked_chunks);

    std::vector<std::size_t> train_idx, test_idx;
    for (std::size_t i = 0; i < fs.patient_ids.size(); ++i) {
        if (split.train.count(fs.patient_ids[i])) train_idx.push_back(i);
        else if (split.test.count(fs.patient_ids[i])) test_idx.push_back(i);
    }
    if (train_idx.empty()) throw DataError("no training patients remain after skipping");
    if (test_idx.empty()) throw DataError("no test patients remain after skipping");

    // validation carve for early stopping, stratified by label
    std::vector<std::size_t> fit_idx, val_idx;
    if (spec.classifier == ClassifierKind::mlp && opts.validation_fraction > 0.0) {
        std::vector<std::size_t> pos, neg;
        for (auto i : train_idx) (fs.labels[i] ? pos : neg).push_back(i);
        Rng rng(derive_seed(spec.seed, "validation"));
        rng.shuffle(pos);
        rng.shuffle(neg);
        const auto take_pos = static_cast<std::size_t>(std::llround(opts.validation_fraction * pos.size()));
        const auto take_neg = static_cast<std::size_t>(std::llround(opts.validation_fraction * neg.size()));
        for (std::size_t k = 0; k < pos.size(); ++k) (k < take_pos ? val_idx : fit_idx).push_back(pos[k]);
        for (std::size_t k = 0; k < neg.size(); ++k) (k < take_neg ? val_idx : fit_idx).push_back(neg[k]);
        std::sort(fit_idx.begin(), fit_idx.end());
        std::sort(val_idx.begin(), val_idx.end());
    } else {
        fit_idx = train_idx;
    }
    r.n_train = fit_idx.size();
    r.n_validation = val_idx.size();
    r.n_test = test_idx.size();

    Matrix x_fit = take_rows(fs.x, fit_idx);
    Matrix x_val = take_rows(fs.x, val_idx);
    Matrix x_test = take_rows(fs.x, test_idx);
    const auto y_fit = take(fs.labels, fit_idx);
    const auto y_val = take(fs.labels, val_idx);
    const auto y_test = take(fs.labels, test_idx);
    require_both_classes(y_fit);

    if (spec.dimred) {
        const std::size_t limit = std::min(x_fit.rows() - 1, x_fit.cols());
        std::size_t n = spec.dimred->n_components;
        if (n > limit) {
            r.notes.push_back("dimred components clamped from " + std::to_string(n) + " to " + std::to_string(limit) +
                              " (min(samples-1, features))");
            n = limit;
        }
        const auto pca = pca_fit(x_fit, n);
        x_fit = pca_project(pca, x_fit);
        if (!val_idx.empty()) x_val = pca_project(pca, x_val);
        x_test = pca_project(pca, x_test);
    }

    if (spec.standardize) {
        const std::size_t f = x_fit.cols();
        std::vector<double> mean(f, 0.0), sd(f, 0.0);
        for (std::size_t i = 0; i < x_fit.rows(); ++i)
            for (std::size_t j = 0; j < f; ++j) mean[j] += x_fit(i, j);
        for (auto& m : mean) m /= static_cast<double>(x_fit.rows());
        for (std::size_t i = 0; i < x_fit.rows(); ++i)
            for (std::size_t j = 0; j < f; ++j) sd[j] += (x_fit(i, j) - mean[j]) * (x_fit(i, j) - mean[j]);
        for (auto& s : sd) {
            s = std::sqrt(s / static_cast<double>(x_fit.rows()));
            if (s < 1e-12) s = 1.0;
        }
        auto apply = [&](Matrix& m) {
            for (std::size_t i = 0; i < m.rows(); ++i)
                for (std::size_t j = 0; j < f; ++j) m(i, j) = (m(i, j) - mean[j]) / sd[j];
        };
        apply(x_fit);
        apply(x_val);
        apply(x_test);
    }

    TrainedClassifier model;
    switch (spec.classifier) {
        case ClassifierKind::mlp: {
            TrainConfig tc = spec.train;
            tc.seed = derive_seed(spec.seed, "train");
            std::optional<LabeledData> val;
            if (!val_idx.empty()) val = LabeledData{&x_val, y_val};
            auto m = train_with_adapter(x_fit, y_fit, x_fit.cols(), spec.adapter_mode, tc, val);
            r.notes.push_back("mlp best epoch " + std::to_string(m.log.best_epoch) + " of " +
                              std::to_string(m.log.train_loss.size()) + (m.log.stopped_early ? " (early stop)" : ""));
            model = std::move(m);
            break;
        }
        case ClassifierKind::tree: model = train_tree(x_fit, y_fit, spec.tree); break;
        case ClassifierKind::forest: {
            ForestConfig fc = spec.forest;
            fc.seed = derive_seed(spec.seed, "forest");
            model = train_forest(x_fit, y_fit, fc);
            break;
        }
        case ClassifierKind::svm: {
            SvmConfig sc = spec.svm;
            sc.seed = derive_seed(spec.seed, "svm");
            model = train_svm(x_fit, y_fit, sc);
            break;
        }
    }

    const std::uint64_t tie_seed = derive_seed(spec.seed, "ties");
    const auto p_test = predict_proba(model, x_test);
    r.report = compute_report(y_test, p_test, 0.5, tie_seed);
    if (!val_idx.empty()) r.validation = compute_report(y_val, predict_proba(model, x_val), 0.5, tie_seed);
    if (!r.report.auroc) r.notes.push_back("test set has a single class; AUROC absent");
    if (opts.keep_models) r.model = classifier_to_json(model, {{"pipeline", to_json(spec)}, {"seed", spec.seed}});
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

RunResult run_pipeline(const PipelineSpec& spec, const Dataset& ds, const Split& split, const RunOptions& opts) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto fs = build_features(spec, ds, opts);
    auto r = evaluate_features(spec, fs, split, opts);
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

// ---------------------------------------------------------------------------
// Tasks

namespace {

std::vector<ProviderSpec> default_task2_providers() {
    return {{"mock-768", "mock", 768, 11, "", "", ""},
            {"mock-1024", "mock", 1024, 23, "", "", ""},
            {"mock-384", "mock", 384, 37, "", "", ""}};
}

std::string feature_key(const PipelineSpec& s, std::size_t dataset_index) {
    json j{{"dataset", dataset_index},
           {"provider", to_json(s.provider)},
           {"k", s.k_retrieve},
           {"pooling", to_string(s.pooling)},
           {"components", s.pooling_components}};
    return j.dump();
}

}  // namespace

std::vector<PipelineSpec> task_variants(const ExperimentConfig& cfg) {
    std::vector<PipelineSpec> out;
    const PipelineSpec base = cfg.base;
    auto with = [&](std::string id) {
        PipelineSpec s = base;
        s.id = std::move(id);
        return s;
    };
    auto no_dimred = [](PipelineSpec s) {
        s.dimred.reset();
        return s;
    };
    auto default_dimred = [&](PipelineSpec s) {
        if (!s.dimred) s.dimred = variant_b().dimred;
        return s;
    };
    switch (cfg.task) {
        case Task::task1:
            for (auto kind : {ClassifierKind::forest, ClassifierKind::tree, ClassifierKind::svm, ClassifierKind::mlp}) {
                const std::string name = kind == ClassifierKind::forest ? "rf"
                                         : kind == ClassifierKind::tree ? "dt"
                                                                        : std::string(to_string(kind));
                auto a = no_dimred(with(name));
                a.classifier = kind;
                auto b = default_dimred(with(name + "+dimred"));
                b.classifier = kind;
                out.push_back(a);
                out.push_back(b);
            }
            break;
        case Task::task2: {
            const auto providers = cfg.providers.empty() ? default_task2_providers() : cfg.providers;
            for (const auto& p : providers) {
                auto s = with(p.name);
                s.provider = p;
                out.push_back(s);
            }
            break;
        }
        case Task::task3: {
            auto seq = no_dimred(with("sequence_n1"));
            seq.pooling = PoolingStrategy::dimred_sequence;
            seq.pooling_components = 1;
            out.push_back(seq);
            for (std::size_t n : {16, 32, 64, 128}) {
                auto h = with("hidden_" + std::to_string(n));
                h.pooling = PoolingStrategy::mean;
                h.dimred = DimRedConfig{DimRedAxis::hidden, n, FitScope::dataset};
                out.push_back(h);
            }
            auto last = no_dimred(with("last_token"));
            last.pooling = PoolingStrategy::last_token;
            out.push_back(last);
            auto hybrid = no_dimred(with("hybrid"));
            hybrid.pooling = PoolingStrategy::hybrid_concat;
            hybrid.pooling_components = 1;
            out.push_back(hybrid);
            break;
        }
        case Task::task4:
            for (auto mode : {AdapterMode::frozen, AdapterMode::adapter})
                for (bool b : {false, true}) {
                    auto s = with(std::string(b ? "B" : "A") + "/" + std::string(to_string(mode)));
                    s = b ? default_dimred(s) : no_dimred(s);
                    s.classifier = ClassifierKind::mlp;
                    s.adapter_mode = mode;
                    out.push_back(s);
                }
            break;
        case Task::task5: {
            auto a = no_dimred(with("A"));
            auto b = default_dimred(with("B"));
            out.push_back(a);
            out.push_back(b);
            break;
        }
        case Task::task6: out.push_back(with(base.id)); break;
    }
    return out;
}

TaskOutput run_task(const ExperimentConfig& cfg, std::size_t threads, RunLog* log, bool keep_models) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::string chash = config_hash(cfg);
    log_line(log, "task " + std::string(to_string(cfg.task)) + " seed " + std::to_string(cfg.seed) +
                      " config_hash " + chash);

    RunOptions opts;
    opts.modality = cfg.modality;
    opts.chunking = cfg.chunking;
    opts.validation_fraction = cfg.validation_fraction;
    opts.threads = threads;
    opts.log = log;
    opts.keep_models = keep_models;
    if (cfg.task == Task::task6 && cfg.modality != Modality::mixed) {
        log_line(log, "task6 runs on the mixed modality; configured modality " +
                          std::string(to_string(cfg.modality)) + " ignored");
        opts.modality = Modality::mixed;
    }

    std::vector<PipelineSpec> variants = cfg.variants.empty() ? task_variants(cfg) : cfg.variants;
    for (auto& v : variants) v.seed = cfg.seed;

    std::vector<Dataset> datasets;
    std::vector<std::string> hashes;
    json ds_manifest = json::array();
    const std::size_t n_sources = cfg.task == Task::task5 ? cfg.datasets.size() : 1;
    for (std::size_t d = 0; d < n_sources; ++d) {
        datasets.push_back(load_source(cfg.datasets[d], cfg.seed));
        hashes.push_back(dataset_hash(datasets.back()));
        ds_manifest.push_back({{"name", cfg.datasets[d].name},
                               {"hash", hashes.back()},
                               {"patients", datasets.back().patients.size()},
                               {"trials", datasets.back().trials.size()}});
        log_line(log, "dataset " + cfg.datasets[d].name + ": " + std::to_string(datasets.back().patients.size()) +
                          " patients, " + std::to_string(datasets.back().trials.size()) + " trials, hash " +
                          hashes.back());
    }

    std::map<std::string, FeatureSet> feature_cache;
    auto features_for = [&](const PipelineSpec& s, std::size_t d) -> const FeatureSet& {
        const auto key = feature_key(s, d);
        auto it = feature_cache.find(key);
        if (it == feature_cache.end()) {
            log_line(log, "building features: provider " + s.provider.name + ", k=" + std::to_string(s.k_retrieve) +
                              ", pooling " + std::string(to_string(s.pooling)));
            const auto start = std::chrono::steady_clock::now();
            it = feature_cache.emplace(key, build_features(s, datasets[d], opts)).first;
            log_line(log, "features ready: " + std::to_string(it->second.x.rows()) + " x " +
                              std::to_string(it->second.x.cols()) + " in " +
                              format_double(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()) +
                              " s");
        }
        return it->second;
    };

    struct Job {
        PipelineSpec spec;
        std::size_t dataset = 0;
        SplitSpec split;
        std::string trial;
        std::optional<double> exclusion;
    };
    std::vector<Job> jobs;
    if (cfg.task == Task::task6) {
        const auto& ds = datasets[0];
        std::vector<std::string> targets = cfg.target_trials;
        if (targets.empty())
            for (const auto& t : ds.trials) targets.push_back(t.trial_id);
        if (ds.trials.size() < 2) throw ConfigError("task6 needs at least 2 trials, dataset has " +
                                                    std::to_string(ds.trials.size()));
        for (const auto& t : targets)
            for (double e : cfg.exclusion_sweep)
                for (const auto& v : variants) {
                    SplitSpec sp;
                    sp.mode = SplitMode::cross_trial;
                    sp.target_trial = t;
                    sp.exclusion_fraction = e;
                    // one shuffle per target, so retained sets are nested across exclusion levels
                    sp.seed = derive_seed(cfg.seed, "split:" + t);
                    jobs.push_back({v, 0, sp, t, e});
                }
    } else {
        for (std::size_t d = 0; d < datasets.size(); ++d)
            for (const auto& v : variants) {
                SplitSpec sp = cfg.split;
                sp.seed = derive_seed(cfg.seed, "split");
                jobs.push_back({v, d, sp, sp.target_trial.value_or(""),
                                sp.mode == SplitMode::cross_trial ? std::optional<double>(sp.exclusion_fraction)
                                                                  : std::nullopt});
            }
    }

    TaskOutput out;
    json runs = json::array();
    for (const auto& job : jobs) {
        const auto& ds = datasets[job.dataset];
        const Split split = make_split(ds, job.split);
        const auto& fs = features_for(job.spec, job.dataset);
        RunResult r = evaluate_features(job.spec, fs, split, opts);
        r.task = std::string(to_string(cfg.task));
        r.dataset = cfg.datasets[job.dataset].name;
        r.trial = job.trial;
        r.exclusion = job.exclusion;
        json run_identity{{"pipeline", to_json(job.spec)},
                          {"dataset", hashes[job.dataset]},
                          {"modality", to_string(opts.modality)},
                          {"chunking", {opts.chunking.chunk_size, opts.chunking.overlap}},
                          {"validation_fraction", opts.validation_fraction},
                          {"split",
                           {{"mode", job.split.mode == SplitMode::random ? "random" : "cross_trial"},
                            {"test_fraction", job.split.test_fraction},
                            {"target_trial", job.trial},
                            {"exclusion_fraction", job.split.exclusion_fraction},
                            {"seed", job.split.seed}}}};
        r.config_hash = hex64(fnv1a64(run_identity.dump()));

        std::string line = "run " + r.variant;
        if (!r.trial.empty()) line += " trial " + r.trial;
        if (r.exclusion) line += " exclusion " + format_double(*r.exclusion);
        line += ": auroc " + (r.report.auroc ? format_double(*r.report.auroc) : std::string("absent")) +
                ", macro_f1 " + format_double(r.report.macro_f1) + " [" ;
        for (std::size_t i = 0; i < r.stages.size(); ++i) line += (i ? " > " : "") + r.stages[i];
        line += "]";
        log_line(log, line);
        for (const auto& n : r.notes) log_line(log, "  " + n);

        ojson rj;
        rj["variant"] = r.variant;
        rj["dataset"] = r.dataset;
        rj["trial"] = r.trial;
        rj["exclusion"] = r.exclusion ? json(*r.exclusion) : json(nullptr);
        rj["config_hash"] = r.config_hash;
        rj["seed"] = r.seed;
        rj["split_seed"] = job.split.seed;
        rj["skipped"] = r.skipped;
        rj["substituted"] = fs.substituted;
        rj["n_train"] = r.n_train;
        rj["n_validation"] = r.n_validation;
        rj["n_test"] = r.n_test;
        rj["stages"] = r.stages;
        rj["notes"] = r.notes;
        rj["test"] = report_to_json(r.report);
        rj["validation"] = r.validation ? report_to_json(*r.validation) : json(nullptr);
        rj["wall_seconds"] = r.wall_seconds;
        runs.push_back(json::parse(rj.dump()));
        out.results.push_back(std::move(r));
    }

    std::size_t defined_auroc = 0;
    for (const auto& r : out.results) defined_auroc += r.report.auroc ? 1 : 0;
    ojson m;
    m["task"] = to_string(cfg.task);
    m["config_hash"] = chash;
    m["seed"] = cfg.seed;
    m["threads"] = threads;
    m["config"] = to_json(cfg);
    m["datasets"] = ds_manifest;
    m["runs"] = runs;
    m["runs_with_auroc"] = defined_auroc;
    m["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.manifest = json::parse(m.dump());
    log_line(log, "task finished: " + std::to_string(out.results.size()) + " runs");
    return out;
}

}  // namespace trialmatch
