#include "trialmatch/embedding.hpp"

#include <cmath>

#include "trialmatch/error.hpp"
#include "trialmatch/util.hpp"

namespace trialmatch {

TokenMatrix EmbeddingProvider::embed_tokens(const std::string&) const {
    throw ConfigError("provider '" + descriptor().name + "' does not expose token matrices");
}

std::vector<EmbeddingVector> embed_texts(const EmbeddingProvider& provider, std::span<const std::string> texts) {
    if (texts.empty()) throw ConfigError("embed_texts requires at least one text");
    for (const auto& t : texts)
        if (t.empty()) throw DataError("cannot embed an empty text");
    auto out = provider.embed(texts);
    if (out.size() != texts.size())
        throw DimensionMismatchError("provider returned " + std::to_string(out.size()) + " vectors for " +
                                     std::to_string(texts.size()) + " texts");
    const std::size_t dim = provider.descriptor().dim;
    for (const auto& v : out) {
        if (v.size() != dim)
            throw DimensionMismatchError("provider '" + provider.descriptor().name + "' returned dim " +
                                         std::to_string(v.size()) + ", declared " + std::to_string(dim));
        for (double x : v)
            if (!std::isfinite(x)) throw DataError("provider returned a non-finite embedding entry");
    }
    return out;
}

TokenMatrix embed_tokens(const EmbeddingProvider& provider, const std::string& text) {
    if (!provider.descriptor().supports_token_matrix)
        throw ConfigError("provider '" + provider.descriptor().name + "' does not expose token matrices");
    if (text.empty()) throw DataError("cannot embed an empty text");
    return provider.embed_tokens(text);
}

EmbeddingVector hashed_token_vector(std::string_view token, std::size_t dim, std::uint64_t seed) {
    std::uint64_t state = fnv1a64(token) ^ (seed * 0x9e3779b97f4a7c15ULL);
    EmbeddingVector v(dim);
    double sq = 0.0;
    for (auto& x : v) {
        // 53-bit uniform in [-1, 1)
        x = static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-52 - 1.0;
        sq += x * x;
    }
    const double inv = 1.0 / std::sqrt(sq);
    for (auto& x : v) x *= inv;
    return v;
}

EmbeddingVector mock_embed(std::string_view text, std::size_t dim, std::uint64_t seed) {
    if (dim < 2) throw ConfigError("mock embedding dimension must be at least 2");
    auto tokens = split_whitespace(text);
    if (tokens.empty()) tokens.emplace_back(text);
    EmbeddingVector sum(dim, 0.0);
    for (const auto& tok : tokens) {
        const auto tv = hashed_token_vector(tok, dim, seed);
        for (std::size_t j = 0; j < dim; ++j) sum[j] += tv[j];
    }
    const double n = norm2(sum);
    if (n == 0.0) return hashed_token_vector(text, dim, seed);
    for (auto& x : sum) x /= n;
    return sum;
}

MockProvider::MockProvider(std::string name, std::size_t dim, std::uint64_t seed)
    : desc_{std::move(name), dim, true}, seed_(seed) {
    if (dim < 2) throw ConfigError("mock embedding dimension must be at least 2");
}

std::vector<EmbeddingVector> MockProvider::embed(std::span<const std::string> texts) const {
    std::vector<EmbeddingVector> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(mock_embed(t, desc_.dim, seed_));
    return out;
}

TokenMatrix MockProvider::embed_tokens(const std::string& text) const {
    auto tokens = split_whitespace(text);
    if (tokens.empty()) tokens.push_back(text);
    TokenMatrix m(tokens.size(), desc_.dim);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const auto v = hashed_token_vector(tokens[i], desc_.dim, seed_);
        std::copy(v.begin(), v.end(), m.row(i).begin());
    }
    return m;
}

}  // namespace trialmatch
