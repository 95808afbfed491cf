#include "trialmatch/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "trialmatch/error.hpp"
#include "trialmatch/util.hpp"

namespace trialmatch {

std::string default_instructions() {
    return "You are screening a patient for a clinical trial. Read the eligibility criteria and the most relevant "
           "excerpts of the patient's record, then judge whether the patient is eligible.";
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw DataError("cosine_similarity dim mismatch: " + std::to_string(a.size()) + " vs " +
                        std::to_string(b.size()));
    const double na = norm2(a);
    const double nb = norm2(b);
    if (na <= 1e-12 || nb <= 1e-12) throw UndefinedError("cosine similarity undefined for a zero-norm vector");
    const double c = dot(a, b) / (na * nb);
    return std::clamp(c, -1.0, 1.0);
}

std::vector<ScoredChunk> score_chunks(std::span<const ChunkRef> chunks, std::span<const EmbeddingVector> chunk_vectors,
                                      std::span<const Criterion> criteria,
                                      std::span<const EmbeddingVector> criteria_vectors) {
    if (criteria.empty()) throw ConfigError("score_chunks requires at least one criterion");
    if (chunks.size() != chunk_vectors.size() || criteria.size() != criteria_vectors.size())
        throw DataError("score_chunks: ids and vectors differ in length");

    std::vector<ScoredChunk> out;
    out.reserve(chunks.size());
    for (std::size_t i = 0; i < chunks.size(); ++i) {
        ScoredChunk sc;
        sc.chunk_id = chunks[i].chunk_id;
        sc.ordinal = chunks[i].ordinal;
        sc.text = chunks[i].text;
        for (std::size_t c = 0; c < criteria.size(); ++c) {
            double cos = 0.0;
            try {
                cos = cosine_similarity(chunk_vectors[i], criteria_vectors[c]);
            } catch (const Error& e) {
                throw DataError("chunk " + sc.chunk_id + " vs criterion " + criteria[c].criterion_id + ": " + e.what());
            }
            sc.per_criterion_scores.emplace_back(criteria[c].criterion_id, cos);
            sc.aggregate_score += cos;
        }
        out.push_back(std::move(sc));
    }
    return out;
}

std::vector<ScoredChunk> select_top_k(std::vector<ScoredChunk> scored, std::size_t k) {
    if (k == 0) throw ConfigError("k must be at least 1");
    if (scored.empty()) throw DataError("no chunks to select from (patient has no retrievable text)");
    std::sort(scored.begin(), scored.end(), [](const ScoredChunk& a, const ScoredChunk& b) {
        if (a.aggregate_score != b.aggregate_score) return a.aggregate_score > b.aggregate_score;
        return a.ordinal < b.ordinal;
    });
    scored.resize(std::min(k, scored.size()));
    return scored;
}

AssembledPrompt assemble_prompt(const std::string& instructions, std::span<const Criterion> criteria,
                                std::span<const ScoredChunk> selected) {
    if (selected.empty()) throw DataError("assemble_prompt requires at least one selected chunk");
    AssembledPrompt p;
    p.system_instructions = instructions;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        if (i) p.criteria_block += '\n';
        p.criteria_block += criteria[i].kind == CriterionKind::inclusion ? "[INCLUSION] " : "[EXCLUSION] ";
        p.criteria_block += criteria[i].criterion_id + ": " + criteria[i].text;
    }
    // selection order is already descending by score; re-sorting keeps callers honest
    std::vector<const ScoredChunk*> order;
    for (const auto& s : selected) order.push_back(&s);
    std::stable_sort(order.begin(), order.end(), [](const ScoredChunk* a, const ScoredChunk* b) {
        if (a->aggregate_score != b->aggregate_score) return a->aggregate_score > b->aggregate_score;
        return a->ordinal < b->ordinal;
    });
    for (std::size_t i = 0; i < order.size(); ++i) {
        if (i) p.chunks_block += '\n';
        p.chunks_block += "[EHR " + std::to_string(i + 1) + "/" + std::to_string(order.size()) + "] " + order[i]->text;
    }
    p.full_text = p.system_instructions;
    p.full_text += kPromptSeparator;
    p.full_text += p.criteria_block;
    p.full_text += kPromptSeparator;
    p.full_text += p.chunks_block;
    return p;
}

RetrievalResult retrieve_for_patient(const EmbeddingProvider& provider, std::span<const Chunk> chunks,
                                     std::span<const Criterion> criteria,
                                     std::span<const EmbeddingVector> criteria_vectors, std::size_t k) {
    if (chunks.empty()) throw DataError("no chunks to select from (patient has no retrievable text)");
    std::vector<std::string> texts;
    std::vector<ChunkRef> refs;
    for (const auto& c : chunks) {
        texts.push_back(c.text);
        refs.push_back({c.chunk_id, c.ordinal, c.text});
    }
    const auto vectors = embed_texts(provider, texts);
    RetrievalResult r;
    r.scored = score_chunks(refs, vectors, criteria, criteria_vectors);
    r.selected = select_top_k(r.scored, k);
    for (const auto& s : r.selected)
        for (std::size_t i = 0; i < refs.size(); ++i)
            if (refs[i].chunk_id == s.chunk_id) r.selected_vectors.push_back(vectors[i]);
    return r;
}

void write_audit_header(std::ostream& out) { out << "patient_id,chunk_id,criterion_id,cosine,aggregate,selected\n"; }

void write_audit_rows(std::ostream& out, const std::string& patient_id, const RetrievalResult& result) {
    std::set<std::string> chosen;
    for (const auto& s : result.selected) chosen.insert(s.chunk_id);
    for (const auto& sc : result.scored) {
        const bool sel = chosen.count(sc.chunk_id) > 0;
        for (const auto& [cid, cos] : sc.per_criterion_scores)
            out << patient_id << ',' << sc.chunk_id << ',' << cid << ',' << format_double(cos) << ','
                << format_double(sc.aggregate_score) << ',' << (sel ? 1 : 0) << '\n';
    }
}

}  // namespace trialmatch
