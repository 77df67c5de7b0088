// Copyright 2026 The blockrag Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <atomic>
#include <thread>

#include "blockrag/error.hpp"
#include "blockrag/remote.hpp"
#include "support.hpp"

namespace {

using namespace blockrag;
using namespace std::chrono_literals;

/// Local HTTP server on an ephemeral port, stopped on destruction.
class LocalServer {
public:
    explicit LocalServer(const std::function<void(httplib::Server&)>& routes) {
        routes(server_);
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~LocalServer() {
        server_.stop();
        thread_.join();
    }
    std::string url(std::string_view path) const { return "http://127.0.0.1:" + std::to_string(port_) + std::string(path); }

private:
    httplib::Server server_;
    int port_ = 0;
    std::thread thread_;
};

remote::RetryPolicy fast_policy() {
    remote::RetryPolicy p;
    p.timeout = 2000ms;
    p.initial_backoff = 1ms;
    return p;
}

TEST(SplitUrl, OriginAndPath) {
    const auto u = remote::split_url("https://api.example.org:8443/v1/chat?x=1");
    EXPECT_EQ(u.origin, "https://api.example.org:8443");
    EXPECT_EQ(u.path, "/v1/chat?x=1");
    EXPECT_EQ(remote::split_url("http://h").path, "/");
    EXPECT_THROW(remote::split_url("no-scheme/path"), ConfigError);
}

TEST(RetryPolicy, ExponentialBackoff) {
    const remote::RetryPolicy p;
    EXPECT_EQ(p.backoff(0), 250ms);
    EXPECT_EQ(p.backoff(1), 500ms);
    EXPECT_EQ(p.backoff(2), 1000ms);
    EXPECT_EQ(p.max_retries, 2);
    EXPECT_EQ(p.timeout, 30000ms);
}

TEST(RemoteChat, RequestBodyCarriesDecoding) {
    const auto body = remote::RemoteChatBackend::request_body("m", "hello", Decoding{});
    EXPECT_EQ(body.at("model"), "m");
    EXPECT_EQ(body.at("messages").at(0).at("content"), "hello");
    EXPECT_EQ(body.at("temperature"), 0.5);
    EXPECT_EQ(body.at("top_p"), 0.8);
    EXPECT_EQ(body.at("top_k"), 20);
    EXPECT_EQ(body.at("max_tokens"), 1024);
}

TEST(RemoteChat, RetriesServerErrorsThenSucceeds) {
    std::atomic<int> hits{0};
    std::string auth;
    LocalServer server([&](httplib::Server& s) {
        s.Post("/v1/chat", [&](const httplib::Request& req, httplib::Response& res) {
            auth = req.get_header_value("Authorization");
            if (++hits < 3) {
                res.status = hits == 1 ? 503 : 429;
                return;
            }
            const auto j = nlohmann::json::parse(req.body);
            const std::string prompt = j.at("messages").at(0).at("content");
            res.set_content(nlohmann::json{{"choices", {{{"message", {{"content", "Match Decision: Yes (" + prompt + ")"}}}}}}}.dump(),
                            "application/json");
        });
    });
    const remote::RemoteChatBackend chat(server.url("/v1/chat"), "secret", "m", fast_policy());
    EXPECT_EQ(chat.complete("p", Decoding{}), "Match Decision: Yes (p)");
    EXPECT_EQ(hits.load(), 3);
    EXPECT_EQ(auth, "Bearer secret");
}

TEST(RemoteChat, ClientErrorFailsWithoutRetry) {
    std::atomic<int> hits{0};
    LocalServer server([&](httplib::Server& s) {
        s.Post("/v1/chat", [&](const httplib::Request&, httplib::Response& res) {
            ++hits;
            res.status = 400;
        });
    });
    const remote::RemoteChatBackend chat(server.url("/v1/chat"), "", "m", fast_policy());
    EXPECT_THROW(chat.complete("p", Decoding{}), RemoteError);
    EXPECT_EQ(hits.load(), 1);
}

TEST(RemoteChat, RetriesExhausted) {
    std::atomic<int> hits{0};
    LocalServer server([&](httplib::Server& s) {
        s.Post("/v1/chat", [&](const httplib::Request&, httplib::Response& res) {
            ++hits;
            res.status = 500;
        });
    });
    const remote::RemoteChatBackend chat(server.url("/v1/chat"), "", "m", fast_policy());
    EXPECT_THROW(chat.complete("p", Decoding{}), RemoteError);
    EXPECT_EQ(hits.load(), 3);
}

TEST(RemoteEmbedder, NormalizesAndChecksDimension) {
    LocalServer server([&](httplib::Server& s) {
        s.Post("/embed", [&](const httplib::Request& req, httplib::Response& res) {
            const auto texts = nlohmann::json::parse(req.body).at("texts");
            nlohmann::json vectors = nlohmann::json::array();
            for (std::size_t i = 0; i < texts.size(); ++i) vectors.push_back({3.0, 4.0});
            res.set_content(nlohmann::json{{"vectors", vectors}}.dump(), "application/json");
        });
    });
    const remote::RemoteEmbedder embedder(server.url("/embed"), "", 2, fast_policy());
    const auto v = embedder.embed("hello");
    EXPECT_NEAR(v[0], 0.6, 1e-6);
    EXPECT_NEAR(v[1], 0.8, 1e-6);
    const std::vector<std::string> texts{"a", "b", "c"};
    EXPECT_EQ(embedder.embed_batch(texts).size(), 3u);
    const remote::RemoteEmbedder wrong(server.url("/embed"), "", 3, fast_policy());
    EXPECT_THROW(wrong.embed("x"), IndexError);
}

TEST(RemoteDescriptions, CachesAndMaps404) {
    std::atomic<int> hits{0};
    LocalServer server([&](httplib::Server& s) {
        s.Get(R"(/entities/(\w+)/(\w+)/descriptions/en)", [&](const httplib::Request& req, httplib::Response& res) {
            ++hits;
            const std::string kind = req.matches[1], id = req.matches[2];
            if (id == "Q404") {
                res.status = 404;
                return;
            }
            res.set_content(nlohmann::json(kind + ":" + id).dump(), "application/json");
        });
    });
    testkit::TempDir dir("desc");
    const std::string tmpl = server.url("/entities/{kind}/{id}/descriptions/en");
    {
        remote::RemoteDescriptionProvider p(tmpl, dir / "cache.json", fast_policy());
        EXPECT_EQ(p.describe("Q42"), "items:Q42");
        EXPECT_EQ(p.describe("P31"), "properties:P31");
        EXPECT_EQ(p.describe("Q404"), std::nullopt);
        EXPECT_EQ(p.describe("Q42"), "items:Q42");
        EXPECT_EQ(p.remote_calls(), 3u);
    }
    EXPECT_EQ(hits.load(), 3);
    remote::RemoteDescriptionProvider warm(tmpl, dir / "cache.json", fast_policy());
    EXPECT_EQ(warm.describe("Q42"), "items:Q42");
    EXPECT_EQ(warm.describe("Q404"), std::nullopt);
    EXPECT_EQ(warm.remote_calls(), 0u);
}

TEST(RemoteDescriptions, UnreachableHostRaises) {
    remote::RetryPolicy p = fast_policy();
    p.timeout = 200ms;
    p.max_retries = 0;
    remote::RemoteDescriptionProvider provider("http://127.0.0.1:1/{id}", {}, p);
    EXPECT_THROW(provider.describe("Q1"), RemoteError);
}

TEST(FromEnv, MissingUrlIsConfigError) {
    ::unsetenv("BLOCKRAG_LLM_URL");
    ::unsetenv("BLOCKRAG_EMBED_URL");
    EXPECT_THROW(remote::RemoteChatBackend::from_env(), ConfigError);
    EXPECT_THROW(remote::RemoteEmbedder::from_env(8), ConfigError);
}

}  // namespace
