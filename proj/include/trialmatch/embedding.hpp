#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "trialmatch/linalg.hpp"

namespace trialmatch {

using EmbeddingVector = std::vector<double>;

/// Per-token hidden states, l rows by d_hidden columns.
using TokenMatrix = Matrix;

struct ProviderDescriptor {
    std::string name;
    std::size_t dim = 0;
    bool supports_token_matrix = false;
};

class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;

    virtual const ProviderDescriptor& descriptor() const = 0;

    /// One vector per text, in input order.
    virtual std::vector<EmbeddingVector> embed(std::span<const std::string> texts) const = 0;

    /// Throws ConfigError unless descriptor().supports_token_matrix.
    virtual TokenMatrix embed_tokens(const std::string& text) const;
};

/// Validating front door over provider.embed(): rejects empty input and checks
/// the count and dimension of what comes back.
std::vector<EmbeddingVector> embed_texts(const EmbeddingProvider& provider, std::span<const std::string> texts);

TokenMatrix embed_tokens(const EmbeddingProvider& provider, const std::string& text);

// ---------------------------------------------------------------------------
// Mock provider: bag of hashed tokens.

/// Unit-norm pseudo-random vector for a single token; pure function of (token, dim, seed).
EmbeddingVector hashed_token_vector(std::string_view token, std::size_t dim, std::uint64_t seed);

/// Normalized sum of hashed_token_vector over whitespace tokens. Texts without
/// any token hash as a single token equal to the raw text.
EmbeddingVector mock_embed(std::string_view text, std::size_t dim, std::uint64_t seed);

class MockProvider final : public EmbeddingProvider {
public:
    MockProvider(std::string name, std::size_t dim, std::uint64_t seed);

    const ProviderDescriptor& descriptor() const override { return desc_; }
    std::vector<EmbeddingVector> embed(std::span<const std::string> texts) const override;
    TokenMatrix embed_tokens(const std::string& text) const override;

    std::uint64_t seed() const noexcept { return seed_; }

private:
    ProviderDescriptor desc_;
    std::uint64_t seed_;
};

// ---------------------------------------------------------------------------
// Binary cache.
//
// File layout (little-endian): "EMBC", u16 version = 1, u32 dim, u64 count,
// then per record: u32 key length, key bytes, dim x f32.

class EmbeddingCache {
public:
    static constexpr std::uint16_t kVersion = 1;

    /// Opens an existing cache file or starts an empty one at path.
    EmbeddingCache(std::filesystem::path path, std::size_t dim);

    std::optional<EmbeddingVector> lookup(const std::string& text) const;

    /// Stored values are narrowed to f32; lookup returns the widened copy.
    void store(const std::string& text, std::span<const double> vector);

    /// Atomically rewrites the file (write to temp, rename).
    void flush() const;

    std::size_t dim() const noexcept { return dim_; }
    std::size_t size() const noexcept { return keys_.size(); }
    const std::filesystem::path& path() const noexcept { return path_; }
    const std::vector<std::string>& keys() const noexcept { return keys_; }

private:
    void load();

    std::filesystem::path path_;
    std::size_t dim_;
    std::vector<std::string> keys_;  // insertion order, used for file layout
    std::unordered_map<std::string, std::vector<float>> entries_;
};

/// Reads only the header of a cache file: (dim, count).
std::pair<std::size_t, std::uint64_t> inspect_cache(const std::filesystem::path& path);

/// Consults a cache before delegating misses to the wrapped provider. Every
/// result is rounded through f32, so outputs are identical whether they came
/// from the cache or not.
class CachedProvider final : public EmbeddingProvider {
public:
    CachedProvider(const EmbeddingProvider& inner, EmbeddingCache& cache);

    const ProviderDescriptor& descriptor() const override { return inner_.descriptor(); }
    std::vector<EmbeddingVector> embed(std::span<const std::string> texts) const override;
    TokenMatrix embed_tokens(const std::string& text) const override { return inner_.embed_tokens(text); }

    std::size_t hits() const;
    std::size_t misses() const;

private:
    const EmbeddingProvider& inner_;
    EmbeddingCache& cache_;
    mutable std::mutex mutex_;
    mutable std::size_t hits_ = 0;
    mutable std::size_t misses_ = 0;
};

// ---------------------------------------------------------------------------
// HTTP provider.

struct HttpResponse {
    int status = 0;
    std::string body;
};

/// Minimal POST transport so retry and validation logic can be exercised
/// without a network. Implementations throw TransportError / TimeoutError.
class HttpTransport {
public:
    virtual ~HttpTransport() = default;
    virtual HttpResponse post_json(const std::string& url, const std::string& body,
                                   std::chrono::milliseconds timeout) = 0;
};

/// cpp-httplib backed transport.
std::unique_ptr<HttpTransport> make_default_transport();

struct HttpProviderConfig {
    std::string endpoint;  // base URL, "/embed" is appended
    std::string model;
    std::size_t dim = 0;
    std::size_t max_batch = 64;
    std::chrono::milliseconds timeout{30000};
    std::chrono::milliseconds backoff_base{500};
    double backoff_factor = 2.0;
    int max_attempts = 3;
};

/// Applies TRIALMATCH_EMBED_ENDPOINT when set.
HttpProviderConfig resolve_endpoint(HttpProviderConfig cfg);

using SleepFn = std::function<void(std::chrono::milliseconds)>;

class HttpProvider final : public EmbeddingProvider {
public:
    HttpProvider(std::string name, HttpProviderConfig cfg, std::shared_ptr<HttpTransport> transport = nullptr,
                 SleepFn sleep = nullptr);

    const ProviderDescriptor& descriptor() const override { return desc_; }
    std::vector<EmbeddingVector> embed(std::span<const std::string> texts) const override;

    /// Human readable lines, one per retry ("retry 1/2 after 500ms: ...").
    std::vector<std::string> retry_log() const;
    std::size_t retries() const;
    std::size_t round_trips() const;

private:
    std::vector<EmbeddingVector> embed_batch(std::span<const std::string> texts) const;

    ProviderDescriptor desc_;
    HttpProviderConfig cfg_;
    std::shared_ptr<HttpTransport> transport_;
    SleepFn sleep_;
    mutable std::mutex mutex_;
    mutable std::vector<std::string> retry_log_;
    mutable std::size_t round_trips_ = 0;
};

/// Request body for POST {endpoint}/embed.
std::string make_embed_request(const std::string& model, std::span<const std::string> texts);

/// Parses and validates a response body against the expected count and dim.
std::vector<EmbeddingVector> parse_embed_response(const std::string& body, std::size_t expected_count,
                                                  std::size_t expected_dim);

}  // namespace trialmatch
