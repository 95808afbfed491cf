#include <cmath>
#include <cstdlib>
#include <deque>
#include <thread>

#include "doctest.h"
#include "httplib.h"
#include "json.hpp"
#include "test_util.hpp"
#include "trialmatch/embedding.hpp"
#include "trialmatch/error.hpp"
#include "trialmatch/representation.hpp"
#include "trialmatch/retrieval.hpp"

using namespace trialmatch;

namespace {

// Replays scripted outcomes: a response, or an exception to throw.
class ScriptedTransport final : public HttpTransport {
public:
    struct Step {
        std::optional<HttpResponse> response;
        int fail = 0;  // 1 transport, 2 timeout
    };
    std::deque<Step> steps;
    std::vector<std::string> bodies;
    std::vector<std::string> urls;

    HttpResponse post_json(const std::string& url, const std::string& body, std::chrono::milliseconds) override {
        urls.push_back(url);
        bodies.push_back(body);
        REQUIRE_FALSE(steps.empty());
        auto step = steps.front();
        steps.pop_front();
        if (step.fail == 1) throw TransportError("connection refused");
        if (step.fail == 2) throw TimeoutError("timed out");
        return *step.response;
    }
};

std::string response_for(std::size_t n, std::size_t dim, double value = 0.25) {
    nlohmann::json j{{"dim", dim}, {"embeddings", nlohmann::json::array()}};
    for (std::size_t i = 0; i < n; ++i) j["embeddings"].push_back(std::vector<double>(dim, value + static_cast<double>(i)));
    return j.dump();
}

HttpProviderConfig http_cfg(std::size_t dim) {
    HttpProviderConfig c;
    c.endpoint = "http://example.invalid/api/";
    c.model = "m";
    c.dim = dim;
    return c;
}

struct EnvGuard {
    explicit EnvGuard(const char* value) {
        if (const char* old = std::getenv("TRIALMATCH_EMBED_ENDPOINT")) saved = old;
        if (value) setenv("TRIALMATCH_EMBED_ENDPOINT", value, 1);
        else unsetenv("TRIALMATCH_EMBED_ENDPOINT");
    }
    ~EnvGuard() {
        if (saved) setenv("TRIALMATCH_EMBED_ENDPOINT", saved->c_str(), 1);
        else unsetenv("TRIALMATCH_EMBED_ENDPOINT");
    }
    std::optional<std::string> saved;
};

}  // namespace

TEST_SUITE("embedding") {

TEST_CASE("mock provider shape, determinism and batch invariance") {
    MockProvider p("mock", 64, 3);
    std::vector<std::string> aa{"a", "a"};
    auto v = embed_texts(p, aa);
    REQUIRE(v.size() == 2);
    CHECK(v[0] == v[1]);
    CHECK(v[0].size() == 64);

    std::vector<std::string> ab{"a b", "c d e"};
    auto batch = embed_texts(p, ab);
    auto one = embed_texts(p, std::span<const std::string>(ab).subspan(0, 1));
    auto two = embed_texts(p, std::span<const std::string>(ab).subspan(1, 1));
    CHECK(batch[0] == one[0]);
    CHECK(batch[1] == two[0]);

    CHECK(mock_embed("x y z", 32, 5) == mock_embed("x y z", 32, 5));
    CHECK_FALSE(mock_embed("x y z", 32, 5) == mock_embed("x y z", 32, 6));

    std::vector<std::string> empty_text{""};
    CHECK_THROWS_AS(embed_texts(p, empty_text), DataError);
    CHECK_THROWS_AS(embed_texts(p, std::span<const std::string>{}), ConfigError);
    CHECK_THROWS_AS(MockProvider("m", 1, 0), ConfigError);
}

TEST_CASE("mock vectors are unit norm") {
    Rng rng(1);
    for (int i = 0; i < 200; ++i) {
        std::string text;
        const std::size_t n = 1 + rng.below(20);
        for (std::size_t k = 0; k < n; ++k) text += "w" + std::to_string(rng.below(50)) + " ";
        const std::size_t dim = 2 + rng.below(100);
        CHECK(std::abs(norm2(mock_embed(text, dim, rng.next_u64())) - 1.0) < 1e-9);
    }
}

TEST_CASE("shared tokens raise cosine similarity") {
    Rng rng(2024);
    int wins = 0;
    for (int i = 0; i < 100; ++i) {
        auto tok = [&] { return "v" + std::to_string(rng.next_u64()); };
        const auto x = tok(), y = tok(), z = tok(), p = tok(), q = tok();
        const auto a = mock_embed(x + " " + y, 64, 11);
        const auto b = mock_embed(x + " " + z, 64, 11);
        const auto c = mock_embed(p + " " + q, 64, 11);
        wins += cosine_similarity(a, b) > cosine_similarity(a, c);
    }
    CHECK(wins >= 99);
}

TEST_CASE("token matrices") {
    MockProvider p("mock", 16, 9);
    auto m = embed_tokens(p, "a b c");
    CHECK(m.rows() == 3);
    CHECK(m.cols() == 16);
    CHECK(embed_tokens(p, "a b c") == m);

    auto single = embed_tokens(p, "solo");
    REQUIRE(single.rows() == 1);
    auto pooled = mean_pool(single);
    CHECK(std::equal(pooled.values.begin(), pooled.values.end(), single.row(0).begin()));

    // mean of token rows, renormalized, equals the text embedding
    for (const std::string text : {"alpha beta gamma", "x x y", "one"}) {
        auto mp = mean_pool(embed_tokens(p, text)).values;
        const double n = norm2(mp);
        auto direct = embed_texts(p, std::vector<std::string>{text})[0];
        for (std::size_t j = 0; j < mp.size(); ++j) CHECK(std::abs(mp[j] / n - direct[j]) < 1e-9);
    }

    HttpProvider h("http", http_cfg(4), std::make_shared<ScriptedTransport>());
    CHECK_THROWS_AS(embed_tokens(h, "a"), ConfigError);
}

TEST_CASE("cache round trip of 1000 entries") {
    auto dir = testutil::temp_dir("cache_rt");
    const auto path = dir / "cache.bin";
    Rng rng(77);
    std::vector<std::pair<std::string, std::vector<double>>> items;
    {
        EmbeddingCache cache(path, 12);
        CHECK(cache.size() == 0);
        for (int i = 0; i < 1000; ++i) {
            std::string key = "text " + std::to_string(i) + " \xc3\xa9 " + std::to_string(rng.next_u64());
            std::vector<double> v(12);
            for (auto& x : v) x = rng.uniform(-3.0, 3.0);
            cache.store(key, v);
            items.emplace_back(key, v);
        }
        CHECK_FALSE(cache.lookup("absent").has_value());
        cache.flush();
    }
    auto [dim, count] = inspect_cache(path);
    CHECK(dim == 12);
    CHECK(count == 1000);

    EmbeddingCache reopened(path, 12);
    CHECK(reopened.size() == 1000);
    for (const auto& [key, v] : items) {
        auto got = reopened.lookup(key);
        REQUIRE(got.has_value());
        for (std::size_t j = 0; j < v.size(); ++j) CHECK(static_cast<float>((*got)[j]) == static_cast<float>(v[j]));
    }
    // an f32-representable payload comes back bit-exactly
    std::vector<double> exact{0.5, -1.25, 3.0, 0.0, 1.0, 2.0, -2.0, 0.75, 8.0, -0.125, 4.5, 1.5};
    reopened.store("exact", exact);
    CHECK(*reopened.lookup("exact") == exact);

    CHECK_THROWS_AS(reopened.store("bad", std::vector<double>(3, 0.0)), DimensionMismatchError);
    CHECK_THROWS_AS(EmbeddingCache(path, 13), DimensionMismatchError);
}

TEST_CASE("cache corruption is reported with offsets") {
    auto dir = testutil::temp_dir("cache_bad");
    testutil::write_text(dir / "magic.bin", "XXXX\x01\x00");
    CHECK_THROWS_WITH_AS(EmbeddingCache(dir / "magic.bin", 4), doctest::Contains("offset 0"), DataError);

    {
        EmbeddingCache c(dir / "ok.bin", 4);
        c.store("k", std::vector<double>{1, 2, 3, 4});
        c.flush();
    }
    auto bytes = testutil::read_text(dir / "ok.bin");
    auto wrong_version = bytes;
    wrong_version[4] = 9;
    testutil::write_text(dir / "version.bin", wrong_version);
    CHECK_THROWS_WITH_AS(EmbeddingCache(dir / "version.bin", 4), doctest::Contains("offset 4"), DataError);

    testutil::write_text(dir / "short.bin", bytes.substr(0, bytes.size() - 3));
    CHECK_THROWS_WITH_AS(EmbeddingCache(dir / "short.bin", 4), doctest::Contains("offset"), DataError);
}

TEST_CASE("cached provider matches the f32-rounded inner provider") {
    auto dir = testutil::temp_dir("cached_provider");
    MockProvider inner("mock", 8, 1);
    EmbeddingCache cache(dir / "c.bin", 8);
    CachedProvider cached(inner, cache);
    std::vector<std::string> texts{"a b", "c", "a b"};
    auto first = embed_texts(cached, texts);
    auto second = embed_texts(cached, texts);
    CHECK(first == second);
    CHECK(first[0] == first[2]);
    const auto raw = embed_texts(inner, texts);
    for (std::size_t j = 0; j < 8; ++j) CHECK(first[1][j] == static_cast<double>(static_cast<float>(raw[1][j])));
    CHECK(cached.misses() == 2);
    CHECK(cache.size() == 2);
}

TEST_CASE("http protocol request and response") {
    std::vector<std::string> texts{"a"};
    CHECK(nlohmann::json::parse(make_embed_request("m", texts)) == nlohmann::json{{"model", "m"}, {"texts", {"a"}}});
    auto ok = parse_embed_response(R"({"dim":4,"embeddings":[[0.1,0.2,0.3,0.4]]})", 1, 4);
    CHECK(ok[0] == std::vector<double>{0.1, 0.2, 0.3, 0.4});
    CHECK_THROWS_AS(parse_embed_response(R"({"dim":4,"embeddings":[[0.1,0.2,0.3]]})", 1, 4), DimensionMismatchError);
    CHECK_THROWS_AS(parse_embed_response(R"({"dim":3,"embeddings":[[0.1,0.2,0.3]]})", 1, 4), DimensionMismatchError);
    CHECK_THROWS_AS(parse_embed_response("not json", 1, 4), MalformedResponseError);
    CHECK_THROWS_AS(parse_embed_response(R"({"embeddings":[]})", 1, 4), MalformedResponseError);
    CHECK_THROWS_AS(parse_embed_response(R"({"dim":4,"embeddings":[]})", 1, 4), MalformedResponseError);
    CHECK_THROWS_AS(parse_embed_response(R"({"dim":1,"embeddings":[["x"]]})", 1, 1), MalformedResponseError);
}

TEST_CASE("http retries transport failures with exponential backoff") {
    auto t = std::make_shared<ScriptedTransport>();
    t->steps.push_back({std::nullopt, 1});
    t->steps.push_back({std::nullopt, 2});
    t->steps.push_back({HttpResponse{200, response_for(1, 4)}, 0});
    std::vector<std::chrono::milliseconds> sleeps;
    HttpProvider p("http", http_cfg(4), t, [&](std::chrono::milliseconds d) { sleeps.push_back(d); });
    auto v = embed_texts(p, std::vector<std::string>{"a"});
    CHECK(v[0] == std::vector<double>(4, 0.25));
    CHECK(p.retries() == 2);
    CHECK(p.retry_log().size() == 2);
    CHECK(p.retry_log()[0].find("retry 1/2 after 500ms") == 0);
    REQUIRE(sleeps.size() == 2);
    CHECK(sleeps[0].count() == 500);
    CHECK(sleeps[1].count() == 1000);
    CHECK(t->urls[0] == "http://example.invalid/api/embed");
}

TEST_CASE("http errors surface distinctly") {
    auto no_sleep = [](std::chrono::milliseconds) {};
    SUBCASE("attempts exhausted") {
        auto t = std::make_shared<ScriptedTransport>();
        for (int i = 0; i < 3; ++i) t->steps.push_back({std::nullopt, 1});
        HttpProvider p("http", http_cfg(4), t, no_sleep);
        CHECK_THROWS_AS(embed_texts(p, std::vector<std::string>{"a"}), TransportError);
        CHECK(t->bodies.size() == 3);
    }
    SUBCASE("timeout") {
        auto t = std::make_shared<ScriptedTransport>();
        auto cfg = http_cfg(4);
        cfg.max_attempts = 1;
        t->steps.push_back({std::nullopt, 2});
        HttpProvider p("http", cfg, t, no_sleep);
        CHECK_THROWS_AS(embed_texts(p, std::vector<std::string>{"a"}), TimeoutError);
    }
    SUBCASE("status is not retried") {
        auto t = std::make_shared<ScriptedTransport>();
        t->steps.push_back({HttpResponse{503, "busy"}, 0});
        HttpProvider p("http", http_cfg(4), t, no_sleep);
        try {
            embed_texts(p, std::vector<std::string>{"a"});
            FAIL("expected HttpStatusError");
        } catch (const HttpStatusError& e) {
            CHECK(e.status() == 503);
        }
        CHECK(p.round_trips() == 1);
    }
    SUBCASE("malformed") {
        auto t = std::make_shared<ScriptedTransport>();
        t->steps.push_back({HttpResponse{200, "{"}, 0});
        HttpProvider p("http", http_cfg(4), t, no_sleep);
        CHECK_THROWS_AS(embed_texts(p, std::vector<std::string>{"a"}), MalformedResponseError);
    }
    SUBCASE("dimension") {
        auto t = std::make_shared<ScriptedTransport>();
        t->steps.push_back({HttpResponse{200, response_for(1, 3)}, 0});
        HttpProvider p("http", http_cfg(4), t, no_sleep);
        CHECK_THROWS_AS(embed_texts(p, std::vector<std::string>{"a"}), DimensionMismatchError);
    }
}

TEST_CASE("http batches at max_batch") {
    auto t = std::make_shared<ScriptedTransport>();
    auto cfg = http_cfg(2);
    cfg.max_batch = 64;
    t->steps.push_back({HttpResponse{200, response_for(64, 2)}, 0});
    t->steps.push_back({HttpResponse{200, response_for(6, 2)}, 0});
    HttpProvider p("http", cfg, t);
    std::vector<std::string> texts;
    for (int i = 0; i < 70; ++i) texts.push_back("t" + std::to_string(i));
    auto v = embed_texts(p, texts);
    CHECK(v.size() == 70);
    CHECK(p.round_trips() == 2);
    CHECK(nlohmann::json::parse(t->bodies[1])["texts"].size() == 6);
}

TEST_CASE("endpoint environment override") {
    {
        EnvGuard env("http://override:9/");
        CHECK(resolve_endpoint(http_cfg(4)).endpoint == "http://override:9/");
    }
    {
        EnvGuard env(nullptr);
        CHECK(resolve_endpoint(http_cfg(4)).endpoint == "http://example.invalid/api/");
    }
}

TEST_CASE("http provider against a loopback server") {
    httplib::Server server;
    server.Post("/v1/embed", [](const httplib::Request& req, httplib::Response& res) {
        auto body = nlohmann::json::parse(req.body);
        nlohmann::json out{{"dim", 3}, {"embeddings", nlohmann::json::array()}};
        for (const auto& t : body["texts"]) {
            const double n = static_cast<double>(t.get<std::string>().size());
            out["embeddings"].push_back({n, 1.0, body["model"] == "m" ? 2.0 : 0.0});
        }
        res.set_content(out.dump(), "application/json");
    });
    server.Post("/slow/embed", [](const httplib::Request&, httplib::Response& res) {
        std::this_thread::sleep_for(std::chrono::milliseconds(1500));
        res.set_content(response_for(1, 3), "application/json");
    });
    server.Post("/fail/embed", [](const httplib::Request&, httplib::Response& res) {
        res.status = 500;
        res.set_content("boom", "text/plain");
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread th([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    const std::string base = "http://127.0.0.1:" + std::to_string(port);
    HttpProviderConfig cfg;
    cfg.endpoint = base + "/v1";
    cfg.model = "m";
    cfg.dim = 3;
    HttpProvider p("http", cfg);
    auto v = embed_texts(p, std::vector<std::string>{"ab", "abcd"});
    CHECK(v[0] == std::vector<double>{2, 1, 2});
    CHECK(v[1] == std::vector<double>{4, 1, 2});

    cfg.endpoint = base + "/slow";
    cfg.timeout = std::chrono::milliseconds(300);
    cfg.max_attempts = 1;
    HttpProvider slow("slow", cfg);
    CHECK_THROWS_AS(embed_texts(slow, std::vector<std::string>{"a"}), TimeoutError);

    cfg.endpoint = base + "/fail";
    cfg.timeout = std::chrono::milliseconds(2000);
    HttpProvider failing("fail", cfg);
    CHECK_THROWS_AS(embed_texts(failing, std::vector<std::string>{"a"}), HttpStatusError);

    server.stop();
    th.join();

    // nothing listens any more: a transport failure after all attempts
    cfg.endpoint = base + "/v1";
    cfg.max_attempts = 2;
    cfg.backoff_base = std::chrono::milliseconds(1);
    HttpProvider gone("gone", cfg);
    CHECK_THROWS_AS(embed_texts(gone, std::vector<std::string>{"a"}), TransportError);
    CHECK(gone.retries() == 1);
}

}
