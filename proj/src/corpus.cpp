#include "trialmatch/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>

#include "json.hpp"
#include "trialmatch/error.hpp"
#include "trialmatch/util.hpp"

namespace trialmatch {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr std::pair<RowCategory, std::string_view> kCategoryNames[] = {
    {RowCategory::demographic, "demographic"}, {RowCategory::diagnosis, "diagnosis"},
    {RowCategory::medication, "medication"},   {RowCategory::allergy, "allergy"},
    {RowCategory::flowsheet, "flowsheet"},     {RowCategory::radiology, "radiology"},
    {RowCategory::other, "other"},
};

std::optional<std::string> optional_string(const json& obj, const char* key) {
    auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) return std::nullopt;
    return it->get<std::string>();
}

std::string required_string(const json& obj, const char* key) {
    auto it = obj.find(key);
    if (it == obj.end() || !it->is_string()) throw DataError(std::string("missing or non-string field '") + key + "'");
    return it->get<std::string>();
}

template <typename Fn>
void for_each_line(const std::filesystem::path& path, Fn&& fn) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::string line;
    std::size_t line_no = 0;
    std::size_t records = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        json obj;
        try {
            obj = json::parse(line);
        } catch (const json::parse_error& e) {
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": parse error: " + e.what());
        }
        try {
            fn(obj, line_no);
        } catch (const json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        } catch (const DataError& e) {
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
        ++records;
    }
    if (records == 0) throw DataError(path.string() + ": empty file");
}

PatientRecord parse_patient(const json& obj) {
    PatientRecord p;
    p.patient_id = required_string(obj, "patient_id");
    p.trial_id = required_string(obj, "trial_id");
    if (p.patient_id.empty()) throw DataError("empty patient_id");

    const json& label = obj.at("label");
    p.label.value = label.at("value").get<int>();
    if (p.label.value != 0 && p.label.value != 1) throw DataError("label value must be 0 or 1");
    p.label.raw_class = optional_string(label, "raw_class");

    std::set<std::string> note_ids;
    if (auto it = obj.find("notes"); it != obj.end() && !it->is_null()) {
        for (const auto& n : *it) {
            ClinicalNote note{required_string(n, "note_id"), required_string(n, "text"), optional_string(n, "date")};
            if (!note_ids.insert(note.note_id).second)
                throw DataError("duplicate note_id '" + note.note_id + "' in patient " + p.patient_id);
            p.notes.push_back(std::move(note));
        }
    }
    if (auto it = obj.find("structured"); it != obj.end() && !it->is_null()) {
        for (const auto& r : *it) {
            StructuredRow row;
            row.category = parse_row_category(required_string(r, "category"));
            row.field_name = required_string(r, "field_name");
            if (row.field_name.empty()) throw DataError("empty field_name in patient " + p.patient_id);
            row.value = required_string(r, "value");
            row.timestamp = optional_string(r, "timestamp");
            p.structured_rows.push_back(std::move(row));
        }
    }
    if (p.notes.empty() && p.structured_rows.empty())
        throw DataError("patient " + p.patient_id + " has neither notes nor structured rows");
    return p;
}

Trial parse_trial(const json& obj) {
    Trial t;
    t.trial_id = required_string(obj, "trial_id");
    for (const auto& c : obj.at("criteria")) {
        Criterion crit;
        crit.criterion_id = required_string(c, "criterion_id");
        const std::string kind = required_string(c, "kind");
        if (kind == "inclusion") crit.kind = CriterionKind::inclusion;
        else if (kind == "exclusion") crit.kind = CriterionKind::exclusion;
        else throw DataError("criterion kind must be inclusion|exclusion, got '" + kind + "'");
        crit.text = required_string(c, "text");
        if (crit.text.empty()) throw DataError("empty criterion text for " + crit.criterion_id);
        t.criteria.push_back(std::move(crit));
    }
    if (t.criteria.empty()) throw DataError("trial " + t.trial_id + " has no criteria");
    return t;
}

ordered_json nullable(const std::optional<std::string>& s) {
    return s ? ordered_json(*s) : ordered_json(nullptr);
}

}  // namespace

std::string_view to_string(RowCategory c) {
    for (const auto& [cat, name] : kCategoryNames)
        if (cat == c) return name;
    return "other";
}

RowCategory parse_row_category(std::string_view s) {
    for (const auto& [cat, name] : kCategoryNames)
        if (name == s) return cat;
    throw DataError("unknown structured row category '" + std::string(s) + "'");
}

std::string serialize_row(const StructuredRow& row) {
    std::string out = std::string(to_string(row.category)) + " | " + row.field_name + " = " + row.value;
    if (row.timestamp) out += " (" + *row.timestamp + ")";
    return out;
}

std::string_view to_string(Modality m) {
    switch (m) {
        case Modality::structured: return "structured";
        case Modality::unstructured: return "unstructured";
        case Modality::mixed: return "mixed";
    }
    return "mixed";
}

Modality parse_modality(std::string_view s) {
    if (s == "structured") return Modality::structured;
    if (s == "unstructured") return Modality::unstructured;
    if (s == "mixed") return Modality::mixed;
    throw ConfigError("modality must be structured|unstructured|mixed, got '" + std::string(s) + "'");
}

const Trial* Dataset::find_trial(std::string_view trial_id) const {
    for (const auto& t : trials)
        if (t.trial_id == trial_id) return &t;
    return nullptr;
}

Dataset load_dataset(const std::filesystem::path& patients_path, const std::filesystem::path& trials_path) {
    Dataset ds;
    std::unordered_map<std::string, std::size_t> trial_lines;
    for_each_line(trials_path, [&](const json& obj, std::size_t line) {
        Trial t = parse_trial(obj);
        auto [it, inserted] = trial_lines.emplace(t.trial_id, line);
        if (!inserted)
            throw DataError("duplicate trial_id '" + t.trial_id + "' (first seen on line " +
                            std::to_string(it->second) + ")");
        ds.trials.push_back(std::move(t));
    });

    std::unordered_map<std::string, std::size_t> patient_lines;
    for_each_line(patients_path, [&](const json& obj, std::size_t line) {
        PatientRecord p = parse_patient(obj);
        auto [it, inserted] = patient_lines.emplace(p.patient_id, line);
        if (!inserted)
            throw DataError("duplicate patient_id '" + p.patient_id + "' on lines " + std::to_string(it->second) +
                            " and " + std::to_string(line));
        if (!trial_lines.count(p.trial_id))
            throw DataError("patient " + p.patient_id + " references unknown trial_id '" + p.trial_id + "'");
        ds.patients.push_back(std::move(p));
    });
    return ds;
}

std::string patient_to_json_line(const PatientRecord& p) {
    ordered_json obj;
    obj["patient_id"] = p.patient_id;
    obj["trial_id"] = p.trial_id;
    obj["label"] = {{"value", p.label.value}, {"raw_class", nullable(p.label.raw_class)}};
    obj["notes"] = ordered_json::array();
    for (const auto& n : p.notes)
        obj["notes"].push_back({{"note_id", n.note_id}, {"text", n.text}, {"date", nullable(n.date)}});
    obj["structured"] = ordered_json::array();
    for (const auto& r : p.structured_rows)
        obj["structured"].push_back({{"category", std::string(to_string(r.category))},
                                     {"field_name", r.field_name},
                                     {"value", r.value},
                                     {"timestamp", nullable(r.timestamp)}});
    return obj.dump();
}

std::string trial_to_json_line(const Trial& t) {
    ordered_json obj;
    obj["trial_id"] = t.trial_id;
    obj["criteria"] = ordered_json::array();
    for (const auto& c : t.criteria)
        obj["criteria"].push_back({{"criterion_id", c.criterion_id},
                                   {"kind", c.kind == CriterionKind::inclusion ? "inclusion" : "exclusion"},
                                   {"text", c.text}});
    return obj.dump();
}

void write_dataset(const Dataset& ds, const std::filesystem::path& patients_path,
                   const std::filesystem::path& trials_path) {
    std::ofstream p(patients_path, std::ios::binary | std::ios::trunc);
    std::ofstream t(trials_path, std::ios::binary | std::ios::trunc);
    if (!p || !t) throw DataError("cannot write dataset files next to " + patients_path.string());
    for (const auto& rec : ds.patients) p << patient_to_json_line(rec) << '\n';
    for (const auto& trial : ds.trials) t << trial_to_json_line(trial) << '\n';
}

std::vector<std::string> chunk_text(std::string_view text, std::size_t chunk_size, std::size_t overlap) {
    if (chunk_size == 0) throw ConfigError("chunk_size must be positive");
    if (overlap >= chunk_size)
        throw ConfigError("overlap (" + std::to_string(overlap) + ") must be smaller than chunk_size (" +
                          std::to_string(chunk_size) + ")");
    const auto tokens = split_whitespace(text);
    std::vector<std::string> chunks;
    const std::size_t stride = chunk_size - overlap;
    for (std::size_t start = 0; start < tokens.size(); start += stride) {
        const std::size_t end = std::min(start + chunk_size, tokens.size());
        std::string chunk;
        for (std::size_t i = start; i < end; ++i) {
            if (i > start) chunk += ' ';
            chunk += tokens[i];
        }
        chunks.push_back(std::move(chunk));
        if (end == tokens.size()) break;
    }
    return chunks;
}

std::vector<Chunk> chunk_patient(const PatientRecord& patient, Modality modality, const ChunkingConfig& cfg) {
    std::vector<Chunk> out;
    auto emit = [&](ChunkSource source, std::string text) {
        Chunk c;
        c.ordinal = out.size();
        c.chunk_id = patient.patient_id + ":c" + std::to_string(c.ordinal);
        c.patient_id = patient.patient_id;
        c.source = source;
        c.text = std::move(text);
        out.push_back(std::move(c));
    };
    if (modality != Modality::structured)
        for (const auto& note : patient.notes)
            for (auto& t : chunk_text(note.text, cfg.chunk_size, cfg.overlap)) emit(ChunkSource::note, std::move(t));
    if (modality != Modality::unstructured)
        for (const auto& row : patient.structured_rows)
            for (auto& t : chunk_text(serialize_row(row), cfg.chunk_size, cfg.overlap))
                emit(ChunkSource::structured, std::move(t));
    return out;
}

// ---------------------------------------------------------------------------

namespace {

struct TaxonomyEntry {
    std::string_view term;
    int value;
};

std::vector<TaxonomyEntry> taxonomy_entries(DatasetFamily family) {
    switch (family) {
        case DatasetFamily::n2c2: return {{"met", 1}, {"not met", 0}};
        case DatasetFamily::sigir: return {{"eligible", 1}, {"potential", 1}, {"irrelevant", 0}};
        case DatasetFamily::trec:
            return {{"eligible", 1}, {"excluded", 0}, {"ineligible", 0}, {"excluded/ineligible", 0}, {"irrelevant", 0}};
        case DatasetFamily::mcpmd: return {{"eligible", 1}, {"ineligible", 0}};
    }
    return {};
}

}  // namespace

DatasetFamily parse_family(std::string_view s) {
    const auto lower = to_lower(s);
    if (lower == "n2c2") return DatasetFamily::n2c2;
    if (lower == "sigir") return DatasetFamily::sigir;
    if (lower == "trec") return DatasetFamily::trec;
    if (lower == "mcpmd") return DatasetFamily::mcpmd;
    throw ConfigError("unknown dataset family '" + std::string(s) + "'");
}

std::vector<std::string> taxonomy(DatasetFamily family) {
    std::vector<std::string> out;
    for (const auto& e : taxonomy_entries(family)) out.emplace_back(e.term);
    return out;
}

EligibilityLabel normalize_label(DatasetFamily family, std::string_view raw_class) {
    const auto key = to_lower(raw_class);
    for (const auto& e : taxonomy_entries(family))
        if (e.term == key) return EligibilityLabel{e.value, std::string(raw_class)};
    std::string valid;
    for (const auto& e : taxonomy_entries(family)) {
        if (!valid.empty()) valid += ", ";
        valid += e.term;
    }
    throw DataError("unknown class '" + std::string(raw_class) + "'; valid terms: " + valid);
}

// ---------------------------------------------------------------------------

Split make_split(const Dataset& ds, const SplitSpec& spec) {
    Split split;
    Rng rng(spec.seed);
    if (spec.mode == SplitMode::random) {
        if (!(spec.test_fraction > 0.0 && spec.test_fraction < 1.0))
            throw ConfigError("test_fraction must lie in (0, 1)");
        std::vector<std::string> pos, neg;
        for (const auto& p : ds.patients) (p.label.value == 1 ? pos : neg).push_back(p.patient_id);
        const std::size_t n = ds.patients.size();
        // epsilon guards against products such as 0.7 * 10 = 7.000000000000001
        const auto n_test = static_cast<std::size_t>(std::ceil(spec.test_fraction * n - 1e-9));
        std::size_t pos_test = std::min<std::size_t>(
            pos.size(), static_cast<std::size_t>(std::llround(spec.test_fraction * pos.size())));
        pos_test = std::min(pos_test, n_test);
        std::size_t neg_test = std::min(neg.size(), n_test - pos_test);
        pos_test = std::min(pos.size(), n_test - neg_test);
        rng.shuffle(pos);
        rng.shuffle(neg);
        for (std::size_t i = 0; i < pos.size(); ++i) (i < pos_test ? split.test : split.train).insert(pos[i]);
        for (std::size_t i = 0; i < neg.size(); ++i) (i < neg_test ? split.test : split.train).insert(neg[i]);
    } else {
        if (!spec.target_trial) throw ConfigError("cross_trial split requires target_trial");
        if (!(spec.exclusion_fraction >= 0.0 && spec.exclusion_fraction <= 1.0))
            throw ConfigError("exclusion_fraction must lie in [0, 1]");
        if (!ds.find_trial(*spec.target_trial))
            throw DataError("target trial '" + *spec.target_trial + "' not in dataset");
        std::vector<std::string> target;
        for (const auto& p : ds.patients) {
            if (p.trial_id == *spec.target_trial) target.push_back(p.patient_id);
            else split.train.insert(p.patient_id);
        }
        const auto retained =
            static_cast<std::size_t>(std::llround((1.0 - spec.exclusion_fraction) * target.size()));
        rng.shuffle(target);
        for (std::size_t i = 0; i < target.size(); ++i) (i < retained ? split.train : split.test).insert(target[i]);
    }
    if (split.train.empty()) throw DataError("split leaves the training set empty");
    if (split.test.empty()) throw DataError("split leaves the test set empty");
    return split;
}

}  // namespace trialmatch
