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

#pragma once

// HTTP-backed implementations of the embedder, completion backend and
// description provider. Endpoints and keys come from the environment:
//
//   BLOCKRAG_EMBED_URL, BLOCKRAG_EMBED_KEY      remote embedder
//   BLOCKRAG_LLM_URL, BLOCKRAG_LLM_KEY,
//   BLOCKRAG_LLM_MODEL                          chat-completions backend
//   BLOCKRAG_DESC_URL, BLOCKRAG_DESC_CACHE      description lookup

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "httplib.h"
#include "json.hpp"

#include "blockrag/error.hpp"
#include "blockrag/generation.hpp"
#include "blockrag/kgsearch.hpp"
#include "blockrag/retrieval.hpp"

namespace blockrag::remote {

inline std::string env_or(const char* name, std::string fallback = {}) {
    const char* v = std::getenv(name);
    return (v && *v) ? std::string(v) : std::move(fallback);
}

struct RetryPolicy {
    std::chrono::milliseconds timeout{30'000};
    int max_retries = 2;
    std::chrono::milliseconds initial_backoff{250};
    double backoff_multiplier = 2.0;

    std::chrono::milliseconds backoff(int attempt) const {
        return std::chrono::milliseconds(static_cast<long long>(
            static_cast<double>(initial_backoff.count()) * std::pow(backoff_multiplier, attempt)));
    }
};

struct Url {
    std::string origin;  // scheme://host[:port]
    std::string path;    // starts with '/'
};

inline Url split_url(std::string_view url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string_view::npos) throw ConfigError("URL must include a scheme: " + std::string(url));
    const auto path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string_view::npos) return Url{std::string(url), "/"};
    return Url{std::string(url.substr(0, path_start)), std::string(url.substr(path_start))};
}

/// Performs one HTTP exchange with retries. Transport errors, 429 and 5xx
/// are retried with exponential backoff; other non-2xx statuses fail at once.
class HttpTransport {
public:
    explicit HttpTransport(RetryPolicy policy = {}) : policy_(policy) {}

    const RetryPolicy& policy() const noexcept { return policy_; }

    std::string post(const std::string& url, const std::string& body, const std::string& bearer) const {
        return request(url, bearer, [&](httplib::Client& client, const std::string& path, const httplib::Headers& h) {
            return client.Post(path, h, body, "application/json");
        });
    }

    std::string get(const std::string& url, const std::string& bearer = {}) const {
        return request(url, bearer, [&](httplib::Client& client, const std::string& path, const httplib::Headers& h) {
            return client.Get(path, h);
        });
    }

private:
    template <typename Send>
    std::string request(const std::string& url, const std::string& bearer, Send&& send) const {
        const Url parts = split_url(url);
        httplib::Headers headers{{"Accept", "application/json"}, {"User-Agent", "blockrag/1.0"}};
        if (!bearer.empty()) headers.emplace("Authorization", "Bearer " + bearer);

        std::string last_error;
        for (int attempt = 0; attempt <= policy_.max_retries; ++attempt) {
            if (attempt > 0) std::this_thread::sleep_for(policy_.backoff(attempt - 1));
            httplib::Client client(parts.origin);
            const auto secs = std::chrono::duration_cast<std::chrono::seconds>(policy_.timeout);
            const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(policy_.timeout - secs);
            client.set_connection_timeout(secs.count(), usecs.count());
            client.set_read_timeout(secs.count(), usecs.count());
            client.set_write_timeout(secs.count(), usecs.count());
            client.set_follow_location(true);

            auto res = send(client, parts.path, headers);
            if (!res) {
                last_error = "transport error: " + httplib::to_string(res.error());
                continue;
            }
            if (res->status >= 200 && res->status < 300) return res->body;
            last_error = "HTTP " + std::to_string(res->status);
            if (res->status != 429 && res->status < 500) break;
        }
        throw RemoteError(url + ": " + last_error);
    }

    RetryPolicy policy_;
};

/// POST {texts: [...]} -> {vectors: [[...], ...]}. Vectors are L2-normalized.
class RemoteEmbedder final : public Embedder {
public:
    RemoteEmbedder(std::string url, std::string api_key, std::size_t dimension, RetryPolicy policy = {})
        : url_(std::move(url)), key_(std::move(api_key)), dimension_(dimension), http_(policy) {}

    static RemoteEmbedder from_env(std::size_t dimension) {
        const auto url = env_or("BLOCKRAG_EMBED_URL");
        if (url.empty()) throw ConfigError("BLOCKRAG_EMBED_URL is not set");
        return RemoteEmbedder(url, env_or("BLOCKRAG_EMBED_KEY"), dimension);
    }

    std::size_t dimension() const override { return dimension_; }

    Vector embed(std::string_view text) const override {
        std::vector<std::string> one{std::string(text)};
        return std::move(embed_batch(one).front());
    }

    std::vector<Vector> embed_batch(std::span<const std::string> texts) const override {
        nlohmann::json body{{"texts", std::vector<std::string>(texts.begin(), texts.end())}};
        const auto reply = http_.post(url_, body.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace), key_);
        std::vector<Vector> vectors;
        try {
            vectors = nlohmann::json::parse(reply).at("vectors").get<std::vector<Vector>>();
        } catch (const std::exception& ex) {
            throw RemoteError(url_ + ": malformed embedding response: " + ex.what());
        }
        if (vectors.size() != texts.size()) {
            throw RemoteError(url_ + ": expected " + std::to_string(texts.size()) + " vectors, got " +
                              std::to_string(vectors.size()));
        }
        for (auto& v : vectors) {
            if (v.size() != dimension_) {
                throw IndexError("remote embedding has dimension " + std::to_string(v.size()) + ", expected " +
                                 std::to_string(dimension_));
            }
            double norm = 0.0;
            for (float x : v) norm += static_cast<double>(x) * x;
            if (norm > 0.0) {
                norm = std::sqrt(norm);
                for (auto& x : v) x = static_cast<float>(x / norm);
            }
        }
        return vectors;
    }

private:
    std::string url_;
    std::string key_;
    std::size_t dimension_;
    HttpTransport http_;
};

/// Chat-completions style backend: {model, messages, temperature, top_p,
/// top_k, max_tokens} -> choices[0].message.content.
class RemoteChatBackend final : public CompletionBackend {
public:
    RemoteChatBackend(std::string url, std::string api_key, std::string model, RetryPolicy policy = {})
        : url_(std::move(url)), key_(std::move(api_key)), model_(std::move(model)), http_(policy) {}

    static RemoteChatBackend from_env() {
        const auto url = env_or("BLOCKRAG_LLM_URL");
        if (url.empty()) throw ConfigError("BLOCKRAG_LLM_URL is not set");
        return RemoteChatBackend(url, env_or("BLOCKRAG_LLM_KEY"), env_or("BLOCKRAG_LLM_MODEL", "gpt-4o-mini"));
    }

    static nlohmann::json request_body(const std::string& model, const std::string& prompt, const Decoding& d) {
        return {{"model", model},
                {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})},
                {"temperature", d.temperature},
                {"top_p", d.top_p},
                {"top_k", d.top_k},
                {"max_tokens", d.max_tokens}};
    }

    std::string complete(const std::string& prompt, const Decoding& decoding) const override {
        const auto body = request_body(model_, prompt, decoding);
        const auto reply = http_.post(url_, body.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace), key_);
        try {
            const auto j = nlohmann::json::parse(reply);
            const auto& content = j.at("choices").at(0).at("message").at("content");
            return content.is_string() ? content.get<std::string>() : std::string{};
        } catch (const std::exception& ex) {
            throw RemoteError(url_ + ": malformed completion response: " + ex.what());
        }
    }

private:
    std::string url_;
    std::string key_;
    std::string model_;
    HttpTransport http_;
};

/// GET per id against a URL template (`{id}`, and `{kind}` which expands to
/// `items` or `properties`), answers cached in a JSON file. The body may be
/// a bare JSON string or an object with a `description` field. Reads are
/// concurrent; cache writes are serialized.
class RemoteDescriptionProvider final : public DescriptionProvider {
public:
    static constexpr std::string_view kDefaultUrl =
        "https://www.wikidata.org/w/rest.php/wikibase/v1/entities/{kind}/{id}/descriptions/en";

    RemoteDescriptionProvider(std::string url_template, std::filesystem::path cache_path, RetryPolicy policy = {})
        : template_(std::move(url_template)), cache_path_(std::move(cache_path)), http_(policy) {
        if (!cache_path_.empty() && std::filesystem::exists(cache_path_)) {
            std::ifstream in(cache_path_);
            try {
                const auto j = nlohmann::json::parse(in);
                for (const auto& [id, value] : j.items()) {
                    cache_.emplace(id, value.is_string() ? std::optional<std::string>(value.get<std::string>())
                                                         : std::nullopt);
                }
            } catch (const std::exception& ex) {
                throw LoadError(cache_path_.string() + ": unreadable description cache: " + ex.what());
            }
        }
    }

    static std::unique_ptr<RemoteDescriptionProvider> from_env() {
        return std::make_unique<RemoteDescriptionProvider>(env_or("BLOCKRAG_DESC_URL", std::string(kDefaultUrl)),
                                         env_or("BLOCKRAG_DESC_CACHE", "blockrag_descriptions.json"));
    }

    std::optional<std::string> describe(const std::string& id) override {
        {
            std::shared_lock lock(mutex_);
            if (const auto it = cache_.find(id); it != cache_.end()) return it->second;
        }
        auto fetched = fetch(id);
        std::unique_lock lock(mutex_);
        cache_.insert_or_assign(id, fetched);
        persist_locked();
        return fetched;
    }

    std::size_t remote_calls() const noexcept { return remote_calls_.load(); }

    std::string url_for(const std::string& id) const {
        std::string url = template_;
        replace_all(url, "{kind}", (!id.empty() && (id[0] == 'P' || id[0] == 'p')) ? "properties" : "items");
        replace_all(url, "{id}", id);
        return url;
    }

private:
    static void replace_all(std::string& s, std::string_view from, std::string_view to) {
        for (auto pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
            s.replace(pos, from.size(), to);
        }
    }

    std::optional<std::string> fetch(const std::string& id) {
        remote_calls_.fetch_add(1, std::memory_order_relaxed);
        std::string body;
        try {
            body = http_.get(url_for(id));
        } catch (const RemoteError& ex) {
            // A 404 means the id has no description; everything else propagates.
            if (std::string_view(ex.what()).find("HTTP 404") != std::string_view::npos) return std::nullopt;
            throw;
        }
        try {
            const auto j = nlohmann::json::parse(body);
            if (j.is_string()) return j.get<std::string>();
            if (j.is_object() && j.contains("description") && j["description"].is_string()) {
                return j["description"].get<std::string>();
            }
            return std::nullopt;
        } catch (const nlohmann::json::exception& ex) {
            throw RemoteError(url_for(id) + ": malformed description response: " + ex.what());
        }
    }

    void persist_locked() const {
        if (cache_path_.empty()) return;
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [id, value] : cache_) j[id] = value ? nlohmann::json(*value) : nlohmann::json(nullptr);
        const auto tmp = cache_path_.string() + ".tmp";
        {
            std::ofstream out(tmp);
            out << j.dump(1);
        }
        std::filesystem::rename(tmp, cache_path_);
    }

    std::string template_;
    std::filesystem::path cache_path_;
    HttpTransport http_;
    mutable std::shared_mutex mutex_;
    std::unordered_map<std::string, std::optional<std::string>> cache_;
    std::atomic<std::size_t> remote_calls_{0};
};

}  // namespace blockrag::remote
