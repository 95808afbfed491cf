#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "trialmatch/corpus.hpp"
#include "trialmatch/embedding.hpp"
#include "trialmatch/error.hpp"
#include "trialmatch/harness.hpp"
#include "trialmatch/metrics.hpp"
#include "trialmatch/retrieval.hpp"
#include "trialmatch/util.hpp"

using namespace trialmatch;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

bool g_json = false;

// Plain "key: value" lines, or one JSON object with --json.
void emit(const json& j) {
    if (g_json) {
        std::cout << j.dump() << "\n";
        return;
    }
    for (const auto& [k, v] : j.items()) std::cout << k << ": " << (v.is_string() ? v.get<std::string>() : v.dump()) << "\n";
}

std::string hash_of(const json& j) { return hex64(fnv1a64(j.dump())); }

struct ProviderArgs {
    std::string name = "mock";
    std::size_t dim = 768;
    std::uint64_t seed = 0;
    std::string endpoint;
    std::string model;
    std::string cache;

    void add_to(CLI::App* app) {
        app->add_option("--provider", name, "Embedding provider: mock or http")
            ->check(CLI::IsMember({"mock", "http"}));
        app->add_option("--dim", dim, "Embedding dimension")->check(CLI::PositiveNumber);
        app->add_option("--provider-seed", seed, "Seed of the mock provider");
        app->add_option("--endpoint", endpoint, "HTTP provider base URL (TRIALMATCH_EMBED_ENDPOINT overrides)");
        app->add_option("--model", model, "HTTP provider model name");
    }

    ProviderSpec spec() const {
        ProviderSpec s;
        s.name = name;
        s.type = name;
        s.dim = dim;
        s.seed = seed;
        s.endpoint = endpoint;
        s.model = model;
        s.cache = cache;
        return s;
    }
};

struct CorpusArgs {
    std::string patients;
    std::string trials;
    std::string modality = "mixed";
    std::size_t chunk_size = 256;
    std::size_t overlap = 32;

    void add_to(CLI::App* app) {
        app->add_option("--patients", patients, "patients.jsonl")->required();
        app->add_option("--trials", trials, "trials.jsonl")->required();
        app->add_option("--modality", modality, "structured, unstructured or mixed")
            ->check(CLI::IsMember({"structured", "unstructured", "mixed"}));
        app->add_option("--chunk-size", chunk_size, "Tokens per chunk")->check(CLI::PositiveNumber);
        app->add_option("--overlap", overlap, "Tokens shared by consecutive chunks");
    }

    ChunkingConfig chunking() const {
        if (overlap >= chunk_size) throw ConfigError("--overlap must be smaller than --chunk-size");
        return {chunk_size, overlap};
    }
};

// ---------------------------------------------------------------------------

struct SynthArgs {
    std::string out;
    SyntheticConfig cfg;
    std::uint64_t seed = 0;
};

int cmd_synth(const SynthArgs& a) {
    const Dataset ds = generate_synthetic(a.cfg, a.seed);
    fs::create_directories(a.out);
    write_dataset(ds, fs::path(a.out) / "patients.jsonl", fs::path(a.out) / "trials.jsonl");
    std::size_t positives = 0;
    for (const auto& p : ds.patients) positives += static_cast<std::size_t>(p.label.value);
    const json cfg{{"n_trials", a.cfg.n_trials},
                   {"patients_per_trial", a.cfg.patients_per_trial},
                   {"positive_fraction", a.cfg.positive_fraction},
                   {"signal_strength", a.cfg.signal_strength},
                   {"trial_shift", a.cfg.trial_shift},
                   {"vocabulary_size", a.cfg.vocabulary_size}};
    emit({{"command", "synth"},
          {"trials", ds.trials.size()},
          {"patients", ds.patients.size()},
          {"positives", positives},
          {"out", a.out},
          {"seed", a.seed},
          {"config_hash", hash_of(cfg)},
          {"dataset_hash", dataset_hash(ds)}});
    return 0;
}

struct RetrieveArgs {
    CorpusArgs corpus;
    ProviderArgs provider;
    std::size_t k = kDefaultTopK;
    std::string audit;
    std::string listing;
};

int cmd_retrieve(const RetrieveArgs& a) {
    if (a.k == 0) throw ConfigError("--k must be at least 1");
    const Dataset ds = load_dataset(a.corpus.patients, a.corpus.trials);
    const auto chunking = a.corpus.chunking();
    const Modality modality = parse_modality(a.corpus.modality);
    ProviderHandle handle(a.provider.spec());
    const auto& provider = handle.get();

    const json cfg{{"k", a.k},
                   {"modality", a.corpus.modality},
                   {"chunk_size", chunking.chunk_size},
                   {"overlap", chunking.overlap},
                   {"provider", to_json(a.provider.spec())}};
    std::ofstream audit;
    if (!a.audit.empty()) {
        audit.open(a.audit, std::ios::binary | std::ios::trunc);
        if (!audit) throw DataError("cannot write audit file " + a.audit);
        write_audit_header(audit);
    }

    std::map<std::string, std::vector<EmbeddingVector>> crit;
    for (const auto& t : ds.trials) {
        std::vector<std::string> texts;
        for (const auto& c : t.criteria) texts.push_back(c.text);
        if (!texts.empty()) crit[t.trial_id] = embed_texts(provider, texts);
    }

    json listing = json::array();
    std::size_t skipped = 0, audit_rows = 0;
    for (const auto& p : ds.patients) {
        const auto chunks = chunk_patient(p, modality, chunking);
        if (chunks.empty()) {
            ++skipped;
            std::cerr << "warning: patient " << p.patient_id << " has no chunks; skipped\n";
            continue;
        }
        const Trial* trial = ds.find_trial(p.trial_id);
        const auto r = retrieve_for_patient(provider, chunks, trial->criteria, crit[p.trial_id], a.k);
        if (audit.is_open()) write_audit_rows(audit, p.patient_id, r);
        audit_rows += r.scored.size() * trial->criteria.size();
        json sel = json::array();
        for (const auto& s : r.selected)
            sel.push_back({{"chunk_id", s.chunk_id}, {"score", s.aggregate_score}});
        listing.push_back({{"patient_id", p.patient_id}, {"trial_id", p.trial_id}, {"selected", sel}});
    }
    handle.flush();

    if (g_json) {
        std::cout << json{{"command", "retrieve"},
                          {"k", a.k},
                          {"seed", a.provider.seed},
                          {"config_hash", hash_of(cfg)},
                          {"patients", listing.size()},
                          {"skipped", skipped},
                          {"audit_rows", audit_rows},
                          {"selections", listing}}
                         .dump()
                  << "\n";
    } else {
        std::cout << "k: " << a.k << "\nseed: " << a.provider.seed << "\nconfig_hash: " << hash_of(cfg)
                  << "\npatients: " << listing.size() << "\nskipped: " << skipped << "\naudit_rows: " << audit_rows
                  << "\n";
        for (const auto& e : listing) {
            std::cout << e["patient_id"].get<std::string>();
            for (const auto& s : e["selected"])
                std::cout << " " << s["chunk_id"].get<std::string>() << "=" << format_double(s["score"].get<double>());
            std::cout << "\n";
        }
    }
    return 0;
}

struct RunArgs {
    std::string config;
    std::string out;
    bool plots = false;
    bool save_models = false;
    std::size_t threads = 1;
    std::uint64_t seed = 0;
    std::size_t k = kDefaultTopK;
    std::size_t dimred_components = kDefaultHiddenComponents;
    bool schema = false;
    bool verbose = false;
};

int cmd_run(const RunArgs& a, const CLI::App& sub) {
    if (a.schema) {
        std::cout << config_schema().dump(2) << "\n";
        return 0;
    }
    if (a.config.empty()) throw ConfigError("--config is required");
    ExperimentConfig cfg = load_experiment_config(a.config);
    // flags override the config file
    if (sub.count("--seed")) cfg.seed = a.seed;
    auto apply = [&](PipelineSpec& s) {
        if (sub.count("--k")) {
            if (a.k == 0) throw ConfigError("--k must be at least 1");
            s.k_retrieve = a.k;
        }
        if (sub.count("--dimred-components") && s.dimred) s.dimred->n_components = a.dimred_components;
    };
    apply(cfg.base);
    for (auto& v : cfg.variants) apply(v);
    if (a.threads == 0) throw ConfigError("--threads must be at least 1");
    const fs::path out = !a.out.empty() ? fs::path(a.out) : !cfg.output_dir.empty() ? fs::path(cfg.output_dir) : "out";

    RunLog log;
    if (a.verbose) log.set_echo([](const std::string& line) { std::cerr << line << "\n"; });
    const std::string hash = config_hash(cfg);
    if (!g_json) std::cout << "seed: " << cfg.seed << "\nconfig_hash: " << hash << "\n" << std::flush;
    const auto result = run_task(cfg, a.threads, &log, a.save_models);
    const auto files = write_outputs(result, log, out, a.plots);

    json summary{{"command", "run"},
                 {"task", to_string(cfg.task)},
                 {"seed", cfg.seed},
                 {"config_hash", hash},
                 {"runs", result.results.size()},
                 {"out", out.string()}};
    if (g_json) {
        std::cout << summary.dump() << "\n";
    } else {
        std::cout << "runs: " << result.results.size() << "\nout: " << out.string() << "\n";
        for (const auto& r : result.results) {
            std::cout << "  " << r.variant;
            if (!r.dataset.empty() && cfg.task == Task::task5) std::cout << " [" << r.dataset << "]";
            if (!r.trial.empty()) std::cout << " " << r.trial;
            if (r.exclusion) std::cout << " @" << format_double(*r.exclusion);
            std::cout << "  auroc=" << (r.report.auroc ? format_double(*r.report.auroc) : std::string("n/a"))
                      << " macro_f1=" << format_double(r.report.macro_f1) << "\n";
        }
    }
    return 0;
}

struct EvalArgs {
    std::string labels;
    std::string scores;
    double threshold = 0.5;
    std::uint64_t tie_seed = 0;
};

template <class T>
std::vector<T> read_column(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    std::vector<T> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto tok = split_whitespace(line);
        if (tok.empty()) continue;
        std::istringstream ss(tok[0]);
        T v{};
        if (!(ss >> v) || tok.size() != 1) throw DataError(path + ":" + std::to_string(lineno) + ": expected one number");
        out.push_back(v);
    }
    return out;
}

int cmd_eval(const EvalArgs& a) {
    const auto labels = read_column<int>(a.labels);
    const auto scores = read_column<double>(a.scores);
    for (int y : labels)
        if (y != 0 && y != 1) throw DataError("labels must be 0 or 1");
    if (labels.size() != scores.size())
        throw DataError("length mismatch: " + std::to_string(labels.size()) + " labels vs " +
                        std::to_string(scores.size()) + " scores");
    const auto report = compute_report(labels, scores, a.threshold, a.tie_seed);
    if (!report.auroc) std::cerr << "warning: labels contain a single class; auroc is undefined and omitted\n";
    json j = report_to_json(report);
    j["seed"] = a.tie_seed;
    j["config_hash"] = hash_of({{"threshold", a.threshold}, {"tie_seed", a.tie_seed}});
    std::cout << (g_json ? j.dump() : j.dump(2)) << "\n";
    return 0;
}

struct CacheArgs {
    CorpusArgs corpus;
    ProviderArgs provider;
    std::string cache;
};

int cmd_cache_warm(const CacheArgs& a) {
    if (a.cache.empty()) throw ConfigError("--cache is required");
    const Dataset ds = load_dataset(a.corpus.patients, a.corpus.trials);
    const auto chunking = a.corpus.chunking();
    const Modality modality = parse_modality(a.corpus.modality);
    ProviderArgs pa = a.provider;
    pa.cache = a.cache;
    ProviderHandle handle(pa.spec());
    std::vector<std::string> texts;
    std::set<std::string> seen;
    auto add = [&](const std::string& t) {
        if (!t.empty() && seen.insert(t).second) texts.push_back(t);
    };
    for (const auto& t : ds.trials)
        for (const auto& c : t.criteria) add(c.text);
    for (const auto& p : ds.patients)
        for (const auto& c : chunk_patient(p, modality, chunking)) add(c.text);
    const std::size_t batch = 256;
    for (std::size_t i = 0; i < texts.size(); i += batch) {
        const std::size_t n = std::min(batch, texts.size() - i);
        embed_texts(handle.get(), std::span<const std::string>(texts).subspan(i, n));
    }
    handle.flush();
    const auto [dim, count] = inspect_cache(a.cache);
    emit({{"command", "embed-cache warm"},
          {"cache", a.cache},
          {"texts", texts.size()},
          {"dim", dim},
          {"entries", count},
          {"seed", pa.seed},
          {"config_hash", hash_of(to_json(pa.spec()))}});
    return 0;
}

int cmd_cache_inspect(const std::string& path) {
    const auto [dim, count] = inspect_cache(path);
    emit({{"command", "embed-cache inspect"},
          {"cache", path},
          {"dim", dim},
          {"entries", count},
          {"seed", 0},
          {"config_hash", hash_of({{"cache", path}})}});
    return 0;
}

int exit_code(const Error& e) { return static_cast<int>(e.kind()); }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"trialmatch: retrieval-based patient to trial eligibility matching"};
    app.option_defaults()->always_capture_default();
    app.require_subcommand(1);
    app.add_flag("--json", g_json, "Machine-readable JSON on stdout");

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "Generate a synthetic corpus (patients.jsonl + trials.jsonl)");
    s->add_option("--out", synth.out, "Output directory")->required();
    s->add_option("--trials", synth.cfg.n_trials, "Number of trials")->check(CLI::PositiveNumber);
    s->add_option("--patients", synth.cfg.patients_per_trial, "Patients per trial")->check(CLI::PositiveNumber);
    s->add_option("--positive-frac", synth.cfg.positive_fraction, "Fraction of eligible patients")
        ->check(CLI::Range(0.0, 1.0));
    s->add_option("--signal", synth.cfg.signal_strength, "Signal strength in [0, 1]")->check(CLI::Range(0.0, 1.0));
    s->add_option("--trial-shift", synth.cfg.trial_shift, "Per-trial vocabulary shift in [0, 1]")
        ->check(CLI::Range(0.0, 1.0));
    s->add_option("--vocab", synth.cfg.vocabulary_size, "Background vocabulary size")->check(CLI::PositiveNumber);
    s->add_option("--seed", synth.seed, "Random seed");

    RetrieveArgs retr;
    auto* r = app.add_subcommand("retrieve", "Chunk, embed, score and select the top-k chunks per patient");
    retr.corpus.add_to(r);
    retr.provider.add_to(r);
    r->add_option("--k", retr.k, "Chunks retrieved per patient");
    r->add_option("--audit", retr.audit, "Write per-(chunk, criterion) scores to this CSV file");
    r->add_option("--cache", retr.provider.cache, "Embedding cache file");

    RunArgs run;
    auto* ru = app.add_subcommand("run", "Run an experiment config through the harness");
    ru->add_option("--config", run.config, "Experiment config JSON");
    ru->add_option("--out", run.out, "Output directory (default: config output_dir, else ./out)");
    ru->add_flag("--plots", run.plots, "Also write plots/*.svg");
    ru->add_flag("--save-models", run.save_models, "Also write each trained classifier to models/run_NNN.json");
    ru->add_option("--threads", run.threads, "Worker threads for feature construction");
    ru->add_option("--seed", run.seed, "Override the config seed");
    ru->add_option("--k", run.k, "Override k_retrieve for every variant");
    ru->add_option("--dimred-components", run.dimred_components,
                   "Override hidden-axis DimRed components for variants that use DimRed");
    ru->add_flag("--schema", run.schema, "Print the config JSON schema with defaults and exit");
    ru->add_flag("-v,--verbose", run.verbose, "Echo the run log to stderr");

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "Compute metrics from a labels file and a scores file");
    e->add_option("--labels", ev.labels, "One 0/1 label per line")->required();
    e->add_option("--scores", ev.scores, "One score per line")->required();
    e->add_option("--threshold", ev.threshold, "Decision threshold (positive iff score >= threshold)");
    e->add_option("--tie-seed", ev.tie_seed, "Seed of the tie permutation used for AUPRC");

    auto* ec = app.add_subcommand("embed-cache", "Warm or inspect an embedding cache file");
    ec->require_subcommand(1);
    CacheArgs warm;
    auto* w = ec->add_subcommand("warm", "Embed every chunk and criterion of a corpus into the cache");
    warm.corpus.add_to(w);
    warm.provider.add_to(w);
    w->add_option("--cache", warm.cache, "Cache file")->required();
    std::string inspect_path;
    auto* in = ec->add_subcommand("inspect", "Print the dimension and entry count of a cache file");
    in->add_option("--cache", inspect_path, "Cache file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*s) return cmd_synth(synth);
        if (*r) return cmd_retrieve(retr);
        if (*ru) return cmd_run(run, *ru);
        if (*e) return cmd_eval(ev);
        if (*w) return cmd_cache_warm(warm);
        if (*in) return cmd_cache_inspect(inspect_path);
    } catch (const Error& err) {
        std::cerr << "error: " << err.what() << "\n";
        return exit_code(err);
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 3;
    }
    return 1;
}
