#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace trialmatch {

struct ClinicalNote {
    std::string note_id;
    std::string text;
    std::optional<std::string> date;

    bool operator==(const ClinicalNote&) const = default;
};

enum class RowCategory { demographic, diagnosis, medication, allergy, flowsheet, radiology, other };

std::string_view to_string(RowCategory c);
RowCategory parse_row_category(std::string_view s);

struct StructuredRow {
    RowCategory category = RowCategory::other;
    std::string field_name;
    std::string value;
    std::optional<std::string> timestamp;

    bool operator==(const StructuredRow&) const = default;
};

/// "{category} | {field_name} = {value} ({timestamp})", timestamp part omitted when absent.
std::string serialize_row(const StructuredRow& row);

struct EligibilityLabel {
    int value = 0;
    std::optional<std::string> raw_class;

    bool operator==(const EligibilityLabel&) const = default;
};

struct PatientRecord {
    std::string patient_id;
    std::string trial_id;
    std::vector<ClinicalNote> notes;
    std::vector<StructuredRow> structured_rows;
    EligibilityLabel label;

    bool operator==(const PatientRecord&) const = default;
};

enum class CriterionKind { inclusion, exclusion };

struct Criterion {
    std::string criterion_id;
    CriterionKind kind = CriterionKind::inclusion;
    std::string text;

    bool operator==(const Criterion&) const = default;
};

struct Trial {
    std::string trial_id;
    std::vector<Criterion> criteria;

    bool operator==(const Trial&) const = default;
};

struct Dataset {
    std::vector<PatientRecord> patients;
    std::vector<Trial> trials;

    const Trial* find_trial(std::string_view trial_id) const;
    bool operator==(const Dataset&) const = default;
};

enum class ChunkSource { note, structured };

struct Chunk {
    std::string chunk_id;
    std::string patient_id;
    ChunkSource source = ChunkSource::note;
    std::string text;
    std::size_t ordinal = 0;
};

enum class Modality { structured, unstructured, mixed };

std::string_view to_string(Modality m);
Modality parse_modality(std::string_view s);

struct ChunkingConfig {
    std::size_t chunk_size = 256;
    std::size_t overlap = 32;
};

// ---------------------------------------------------------------------------
// JSONL ingestion

Dataset load_dataset(const std::filesystem::path& patients_path, const std::filesystem::path& trials_path);

/// Writes patients.jsonl and trials.jsonl; output bytes are a pure function of the dataset.
void write_dataset(const Dataset& ds, const std::filesystem::path& patients_path,
                   const std::filesystem::path& trials_path);

std::string patient_to_json_line(const PatientRecord& p);
std::string trial_to_json_line(const Trial& t);

// ---------------------------------------------------------------------------
// Chunking

/// Whitespace-token windows of chunk_size starting every (chunk_size - overlap) tokens.
/// The last window reaches the end of the text and may be shorter.
std::vector<std::string> chunk_text(std::string_view text, std::size_t chunk_size, std::size_t overlap);

/// Chunks every note and/or serialized structured row of a patient, depending on modality.
/// Ordinals are dense from 0 in emission order (notes first, then rows).
std::vector<Chunk> chunk_patient(const PatientRecord& patient, Modality modality, const ChunkingConfig& cfg);

// ---------------------------------------------------------------------------
// Labels

enum class DatasetFamily { n2c2, sigir, trec, mcpmd };

DatasetFamily parse_family(std::string_view s);
std::vector<std::string> taxonomy(DatasetFamily family);
EligibilityLabel normalize_label(DatasetFamily family, std::string_view raw_class);

// ---------------------------------------------------------------------------
// Synthetic corpora

struct SyntheticConfig {
    std::size_t n_trials = 5;
    std::size_t patients_per_trial = 100;
    double positive_fraction = 0.3;
    double signal_strength = 0.8;
    double trial_shift = 0.5;
    std::size_t vocabulary_size = 2000;
};

Dataset generate_synthetic(const SyntheticConfig& config, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Splits

enum class SplitMode { random, cross_trial };

struct SplitSpec {
    SplitMode mode = SplitMode::random;
    double test_fraction = 0.2;
    std::optional<std::string> target_trial;
    double exclusion_fraction = 1.0;
    std::uint64_t seed = 0;
};

struct Split {
    std::set<std::string> train;
    std::set<std::string> test;
};

Split make_split(const Dataset& ds, const SplitSpec& spec);

}  // namespace trialmatch
