#pragma once

#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "trialmatch/corpus.hpp"
#include "trialmatch/embedding.hpp"

namespace trialmatch {

inline constexpr std::size_t kDefaultTopK = 4;

struct ScoredChunk {
    std::string chunk_id;
    std::size_t ordinal = 0;
    double aggregate_score = 0.0;
    std::vector<std::pair<std::string, double>> per_criterion_scores;
    std::string text;  // carried along for prompt assembly; may be empty
};

struct AssembledPrompt {
    std::string system_instructions;
    std::string criteria_block;
    std::string chunks_block;
    std::string full_text;
};

inline constexpr std::string_view kPromptSeparator = "\n---\n";

std::string default_instructions();

/// a.b / (|a||b|). Throws DataError on dim mismatch, UndefinedError when either norm <= 1e-12.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

struct ChunkRef {
    std::string chunk_id;
    std::size_t ordinal = 0;
    std::string text;
};

/// Sum of cosines against every criterion vector, per chunk.
std::vector<ScoredChunk> score_chunks(std::span<const ChunkRef> chunks, std::span<const EmbeddingVector> chunk_vectors,
                                      std::span<const Criterion> criteria,
                                      std::span<const EmbeddingVector> criteria_vectors);

/// Highest aggregate first; equal scores fall back to ascending ordinal.
std::vector<ScoredChunk> select_top_k(std::vector<ScoredChunk> scored, std::size_t k);

AssembledPrompt assemble_prompt(const std::string& instructions, std::span<const Criterion> criteria,
                                std::span<const ScoredChunk> selected);

struct RetrievalResult {
    std::vector<ScoredChunk> scored;    // every chunk, in ordinal order
    std::vector<ScoredChunk> selected;  // top-k in selection order
    std::vector<EmbeddingVector> selected_vectors;
};

/// Chunk -> embed -> score -> select for one patient. Criteria vectors are
/// passed in so they are embedded once per trial.
RetrievalResult retrieve_for_patient(const EmbeddingProvider& provider, std::span<const Chunk> chunks,
                                     std::span<const Criterion> criteria,
                                     std::span<const EmbeddingVector> criteria_vectors, std::size_t k);

/// `patient_id,chunk_id,criterion_id,cosine,aggregate,selected`
void write_audit_header(std::ostream& out);
void write_audit_rows(std::ostream& out, const std::string& patient_id, const RetrievalResult& result);

}  // namespace trialmatch
