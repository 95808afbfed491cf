#include <cmath>
#include <cstdlib>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "trialmatch/embedding.hpp"
#include "trialmatch/error.hpp"

namespace trialmatch {

namespace {

using json = nlohmann::json;

// "http://host:port/prefix" -> {"http://host:port", "/prefix"}
std::pair<std::string, std::string> split_url(const std::string& url) {
    const auto scheme_end = url.find("://");
    const std::size_t host_start = scheme_end == std::string::npos ? 0 : scheme_end + 3;
    const auto path_start = url.find('/', host_start);
    if (path_start == std::string::npos) return {url, ""};
    std::string prefix = url.substr(path_start);
    while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
    return {url.substr(0, path_start), prefix};
}

class HttplibTransport final : public HttpTransport {
public:
    HttpResponse post_json(const std::string& url, const std::string& body,
                           std::chrono::milliseconds timeout) override {
        const auto [base, path] = split_url(url);
        httplib::Client client(base);
        const auto secs = static_cast<time_t>(timeout.count() / 1000);
        const auto usecs = static_cast<time_t>((timeout.count() % 1000) * 1000);
        client.set_connection_timeout(secs, usecs);
        client.set_read_timeout(secs, usecs);
        client.set_write_timeout(secs, usecs);

        const auto start = std::chrono::steady_clock::now();
        auto res = client.Post(path.empty() ? "/" : path, body, "application/json");
        if (!res) {
            const auto err = res.error();
            const auto elapsed = std::chrono::steady_clock::now() - start;
            if (err == httplib::Error::ConnectionTimeout ||
                (err == httplib::Error::Read && elapsed >= timeout * 9 / 10))
                throw TimeoutError("request to " + url + " timed out after " + std::to_string(timeout.count()) + " ms");
            throw TransportError("request to " + url + " failed: " + httplib::to_string(err));
        }
        return {res->status, res->body};
    }
};

}  // namespace

std::unique_ptr<HttpTransport> make_default_transport() { return std::make_unique<HttplibTransport>(); }

HttpProviderConfig resolve_endpoint(HttpProviderConfig cfg) {
    if (const char* env = std::getenv("TRIALMATCH_EMBED_ENDPOINT"); env && *env) cfg.endpoint = env;
    return cfg;
}

std::string make_embed_request(const std::string& model, std::span<const std::string> texts) {
    json body;
    body["model"] = model;
    body["texts"] = json::array();
    for (const auto& t : texts) body["texts"].push_back(t);
    return body.dump();
}

std::vector<EmbeddingVector> parse_embed_response(const std::string& body, std::size_t expected_count,
                                                  std::size_t expected_dim) {
    json doc;
    try {
        doc = json::parse(body);
    } catch (const json::parse_error& e) {
        throw MalformedResponseError(std::string("embedding response is not JSON: ") + e.what());
    }
    if (!doc.is_object() || !doc.contains("dim") || !doc["dim"].is_number_integer() || !doc.contains("embeddings") ||
        !doc["embeddings"].is_array())
        throw MalformedResponseError("embedding response must be {\"dim\": int, \"embeddings\": [[number]]}");

    const auto dim = doc["dim"].get<long long>();
    if (dim != static_cast<long long>(expected_dim))
        throw DimensionMismatchError("service reports dim " + std::to_string(dim) + ", expected " +
                                     std::to_string(expected_dim));
    const auto& rows = doc["embeddings"];
    if (rows.size() != expected_count)
        throw MalformedResponseError("service returned " + std::to_string(rows.size()) + " embeddings for " +
                                     std::to_string(expected_count) + " texts");
    std::vector<EmbeddingVector> out;
    out.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& row = rows[i];
        if (!row.is_array()) throw MalformedResponseError("embedding " + std::to_string(i) + " is not an array");
        if (row.size() != expected_dim)
            throw DimensionMismatchError("embedding " + std::to_string(i) + " has " + std::to_string(row.size()) +
                                         " entries, expected " + std::to_string(expected_dim));
        EmbeddingVector v;
        v.reserve(row.size());
        for (const auto& x : row) {
            if (!x.is_number()) throw MalformedResponseError("embedding " + std::to_string(i) + " has a non-number");
            v.push_back(x.get<double>());
            if (!std::isfinite(v.back())) throw MalformedResponseError("non-finite embedding entry");
        }
        out.push_back(std::move(v));
    }
    return out;
}

HttpProvider::HttpProvider(std::string name, HttpProviderConfig cfg, std::shared_ptr<HttpTransport> transport,
                           SleepFn sleep)
    : desc_{std::move(name), cfg.dim, false},
      cfg_(std::move(cfg)),
      transport_(transport ? std::move(transport) : std::shared_ptr<HttpTransport>(make_default_transport())),
      sleep_(sleep ? std::move(sleep) : SleepFn([](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); })) {
    if (cfg_.dim == 0) throw ConfigError("http provider requires a declared dim");
    if (cfg_.endpoint.empty()) throw ConfigError("http provider requires an endpoint");
    if (cfg_.max_batch == 0) throw ConfigError("max_batch must be positive");
    if (cfg_.max_attempts < 1) throw ConfigError("max_attempts must be at least 1");
}

std::vector<EmbeddingVector> HttpProvider::embed(std::span<const std::string> texts) const {
    std::vector<EmbeddingVector> out;
    out.reserve(texts.size());
    for (std::size_t start = 0; start < texts.size(); start += cfg_.max_batch) {
        const std::size_t n = std::min(cfg_.max_batch, texts.size() - start);
        auto part = embed_batch(texts.subspan(start, n));
        for (auto& v : part) out.push_back(std::move(v));
    }
    return out;
}

std::vector<EmbeddingVector> HttpProvider::embed_batch(std::span<const std::string> texts) const {
    const std::string body = make_embed_request(cfg_.model, texts);
    std::string url = cfg_.endpoint;
    while (!url.empty() && url.back() == '/') url.pop_back();
    url += "/embed";

    auto delay = cfg_.backoff_base;
    for (int attempt = 1;; ++attempt) {
        try {
            const HttpResponse res = transport_->post_json(url, body, cfg_.timeout);
            {
                std::lock_guard lock(mutex_);
                ++round_trips_;
            }
            if (res.status < 200 || res.status >= 300)
                throw HttpStatusError(res.status, "embedding service returned HTTP " + std::to_string(res.status));
            return parse_embed_response(res.body, texts.size(), cfg_.dim);
        } catch (const TransportError& e) {
            if (attempt >= cfg_.max_attempts) throw;
            {
                std::lock_guard lock(mutex_);
                retry_log_.push_back("retry " + std::to_string(attempt) + "/" + std::to_string(cfg_.max_attempts - 1) +
                                     " after " + std::to_string(delay.count()) + "ms: " + e.what());
            }
            sleep_(delay);
            delay = std::chrono::milliseconds(
                static_cast<long long>(std::llround(static_cast<double>(delay.count()) * cfg_.backoff_factor)));
        }
    }
}

std::vector<std::string> HttpProvider::retry_log() const {
    std::lock_guard lock(mutex_);
    return retry_log_;
}

std::size_t HttpProvider::retries() const {
    std::lock_guard lock(mutex_);
    return retry_log_.size();
}

std::size_t HttpProvider::round_trips() const {
    std::lock_guard lock(mutex_);
    return round_trips_;
}

}  // namespace trialmatch
