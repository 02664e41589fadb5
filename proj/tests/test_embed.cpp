#include <catch_amalgamated.hpp>

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "kblam/embed.hpp"
#include "kblam/error.hpp"
#include "support.hpp"

using namespace kblam;
using Catch::Approx;

TEST_CASE("hash n-gram backend: deterministic, unit norm, fixed dim", "[embed]") {
    HashNgramBackend be(128);
    const auto a = be.embed("The purpose of Nova Forge");
    const auto b = be.embed("The purpose of Nova Forge");
    CHECK(a == b);
    CHECK(a.size() == 128);
    double n = 0.0;
    for (double x : a) n += x * x;
    CHECK(n == Approx(1.0).epsilon(1e-14));
    CHECK(be.calls() == 2);
    CHECK_THROWS_AS(be.embed(""), ConfigError);

    // two-character text is shorter than every n-gram but still embeds
    const auto tiny = be.embed("ab");
    double t = 0.0;
    for (double x : tiny) t += x * x;
    CHECK(t == Approx(1.0));
}

TEST_CASE("hash n-gram backend: shared n-grams raise similarity", "[embed]") {
    HashNgramBackend be;
    const auto base = be.embed("The purpose of Nova Forge");
    const auto near = be.embed("The purpose of Nova Forges");
    const auto far = be.embed("The description of Iron Mill");
    CHECK(cosine_similarity(base, near) > cosine_similarity(base, far));
    CHECK(cosine_similarity(base, near) > 0.8);
    CHECK(be.fingerprint() != HashNgramBackend(128).fingerprint());
}

TEST_CASE("triples embed as key string and value text", "[embed]") {
    HashNgramBackend be(64);
    const KnowledgeTriple t{"Nova Forge", "purpose", "to map quiet tools"};
    CHECK(key_string(t) == "The purpose of Nova Forge");
    const auto pair = encode_triple(be, t);
    CHECK(pair.key_base == be.embed("The purpose of Nova Forge"));
    CHECK(pair.value_base == be.embed("to map quiet tools"));
}

TEST_CASE("embedding cache persists records and serves hits", "[embed]") {
    test::TempDir dir;
    const auto path = dir / "emb.cache";
    auto inner = std::make_shared<HashNgramBackend>(32);
    {
        auto cache = std::make_shared<EmbeddingCache>(path);
        CachedBackend cb(inner, cache);
        cb.embed("alpha");
        cb.embed("beta");
        cb.embed("alpha");
        CHECK(inner->calls() == 2);
        CHECK(cache->size() == 2);
    }
    CHECK(std::filesystem::file_size(path) == 2 * EmbeddingCache::record_bytes(32));

    EmbeddingCache reopened(path);
    CHECK(reopened.size() == 2);
    CHECK(*reopened.get(inner->fingerprint(), "alpha") == inner->embed("alpha"));
    CHECK(!reopened.get("other-encoder", "alpha"));

    // truncated file is a parse error, not silent data loss
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
    CHECK_THROWS_AS(EmbeddingCache(path), ParseError);
}

namespace {

/// Local stand-in for an embeddings endpoint.
class FakeEmbedServer {
public:
    explicit FakeEmbedServer(std::size_t dim) : dim_(dim) {
        server_.Post("/v1/embeddings", [this](const httplib::Request& req, httplib::Response& res) {
            ++requests_;
            last_auth_ = req.get_header_value("Authorization");
            if (fail_next_ > 0) {
                --fail_next_;
                res.status = 503;
                return;
            }
            const auto body = nlohmann::json::parse(req.body);
            nlohmann::json out{{"data", nlohmann::json::array()}};
            for (const auto& text : body.at("input")) {
                std::vector<double> v(wrong_dim_ ? dim_ + 1 : dim_, 0.0);
                v[text.get<std::string>().size() % dim_] = 1.0;
                out["data"].push_back({{"embedding", v}});
            }
            res.set_content(out.dump(), "application/json");
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~FakeEmbedServer() {
        server_.stop();
        thread_.join();
    }

    std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/embeddings"; }

    std::atomic<int> requests_{0};
    std::atomic<int> fail_next_{0};
    std::atomic<bool> wrong_dim_{false};
    std::string last_auth_;

private:
    std::size_t dim_;
    httplib::Server server_;
    int port_ = 0;
    std::thread thread_;
};

} // namespace

TEST_CASE("HTTP backend: batch request, auth header, retries", "[embed]") {
    FakeEmbedServer srv(16);
    HttpRemoteConfig cfg;
    cfg.endpoint = srv.endpoint();
    cfg.dim = 16;
    cfg.retries = 2;
    cfg.timeout_seconds = 5;
    cfg.api_key = "test-key";
    HttpRemoteBackend be(cfg);

    const std::vector<std::string> texts{"a", "bcd"};
    const auto out = be.embed_batch(texts);
    REQUIRE(out.size() == 2);
    CHECK(out[1][3] == 1.0);
    CHECK(srv.last_auth_ == "Bearer test-key");
    CHECK(be.calls() == 2);

    srv.fail_next_ = 2; // within the retry budget
    CHECK(be.embed("xy")[2] == 1.0);

    srv.fail_next_ = 3; // one more than the budget
    CHECK_THROWS_AS(be.embed("xy"), RetryableError);

    srv.wrong_dim_ = true;
    CHECK_THROWS_AS(be.embed("xy"), ShapeError);
}

TEST_CASE("HTTP backend: unreachable endpoint surfaces as retryable", "[embed]") {
    HttpRemoteConfig cfg;
    cfg.endpoint = "http://127.0.0.1:1/v1/embeddings";
    cfg.dim = 16;
    cfg.retries = 0;
    cfg.timeout_seconds = 1;
    HttpRemoteBackend be(cfg);
    CHECK_THROWS_AS(be.embed("x"), RetryableError);
}

TEST_CASE("HTTP config: secrets only from the environment", "[embed]") {
    test::TempDir dir;
    {
        std::ofstream(dir / "with_key.json") << R"({"endpoint":"http://x/e","api_key":"nope"})";
        std::ofstream(dir / "ok.json") << R"({"endpoint":"http://x/e","dim":32})";
    }
    CHECK_THROWS_AS(HttpRemoteConfig::from_file(dir / "with_key.json"), ConfigError);

    ::setenv("EMBED_API_KEY", "from-env", 1);
    ::unsetenv("EMBED_ENDPOINT");
    const auto cfg = HttpRemoteConfig::from_file(dir / "ok.json");
    CHECK(cfg.api_key == "from-env");
    CHECK(cfg.dim == 32);
    CHECK(cfg.endpoint == "http://x/e");
    ::unsetenv("EMBED_API_KEY");

    HttpRemoteConfig empty;
    CHECK_THROWS_AS(HttpRemoteBackend(empty), ConfigError);
}
