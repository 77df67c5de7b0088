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

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "blockrag/blocking.hpp"
#include "blockrag/datamodel.hpp"
#include "blockrag/error.hpp"
#include "blockrag/parallel.hpp"
#include "blockrag/text.hpp"

namespace blockrag {

using Vector = std::vector<float>;

inline constexpr std::size_t kDefaultDimension = 256;
inline constexpr std::size_t kDefaultQueryCharCap = 8000;

/// Maps text to a fixed-dimension vector. Implementations must be safe to
/// call concurrently.
class Embedder {
public:
    virtual ~Embedder() = default;
    virtual std::size_t dimension() const = 0;
    virtual Vector embed(std::string_view text) const = 0;

    virtual std::vector<Vector> embed_batch(std::span<const std::string> texts) const {
        std::vector<Vector> out;
        out.reserve(texts.size());
        for (const auto& t : texts) out.push_back(embed(t));
        return out;
    }
};

/// Hashed character 3-gram counts, L2-normalized. Empty text (or text with
/// fewer than three characters) maps to the zero vector.
inline Vector mock_embed(std::string_view input, std::size_t d) {
    if (d < 1) throw ConfigError("embedding dimension must be >= 1");
    Vector v(d, 0.0f);
    const std::string lowered = text::to_lower(input);
    if (lowered.size() < 3) return v;
    for (std::size_t i = 0; i + 3 <= lowered.size(); ++i) {
        v[text::fnv1a64(std::string_view(lowered).substr(i, 3)) % d] += 1.0f;
    }
    double norm = 0.0;
    for (float x : v) norm += static_cast<double>(x) * x;
    norm = std::sqrt(norm);
    for (auto& x : v) x = static_cast<float>(x / norm);
    return v;
}

class MockEmbedder final : public Embedder {
public:
    explicit MockEmbedder(std::size_t dimension = kDefaultDimension) : dimension_(dimension) {
        if (dimension_ < 1) throw ConfigError("embedding dimension must be >= 1");
    }
    std::size_t dimension() const override { return dimension_; }
    Vector embed(std::string_view text) const override { return mock_embed(text, dimension_); }

private:
    std::size_t dimension_;
};

/// Forwards to another embedder and counts calls.
class CountingEmbedder final : public Embedder {
public:
    explicit CountingEmbedder(const Embedder& inner) : inner_(inner) {}
    std::size_t dimension() const override { return inner_.dimension(); }
    Vector embed(std::string_view text) const override {
        calls_.fetch_add(1, std::memory_order_relaxed);
        return inner_.embed(text);
    }
    std::size_t calls() const noexcept { return calls_.load(); }

private:
    const Embedder& inner_;
    mutable std::atomic<std::size_t> calls_{0};
};

enum class ItemKind { entity, predicate };

inline std::string_view to_string(ItemKind k) noexcept { return k == ItemKind::entity ? "entity" : "predicate"; }

inline ItemKind parse_item_kind(std::string_view s) {
    if (s == "entity") return ItemKind::entity;
    if (s == "predicate") return ItemKind::predicate;
    throw ConfigError("unknown item kind '" + std::string(s) + "' (expected entity|predicate)");
}

/// One line of the KG item catalog.
struct CatalogEntry {
    std::string id;
    ItemKind kind = ItemKind::entity;
    std::string label;
    std::string description;
};

/// Text that gets embedded for a catalog item.
inline std::string item_text(const CatalogEntry& entry) {
    if (entry.description.empty()) return entry.label.empty() ? entry.id : entry.label;
    return (entry.label.empty() ? entry.id : entry.label) + ": " + entry.description;
}

/// JSON Lines catalog: {id, kind: "entity"|"predicate", label, description}.
inline std::vector<CatalogEntry> load_catalog(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError(path.string() + ": cannot open catalog");
    std::vector<CatalogEntry> entries;
    std::string line;
    for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
        if (text::trim(line).empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            CatalogEntry e;
            e.id = j.at("id").get<std::string>();
            e.kind = parse_item_kind(j.at("kind").get<std::string>());
            e.label = j.value("label", std::string{});
            e.description = j.value("description", std::string{});
            if (e.id.empty()) throw LoadError("empty id");
            entries.push_back(std::move(e));
        } catch (const std::exception& ex) {
            throw LoadError(path.string() + ":" + std::to_string(line_no) + ": " + ex.what());
        }
    }
    return entries;
}

struct IndexItem {
    std::string id;
    ItemKind kind = ItemKind::entity;
    std::string label;
    Vector vector;
};

struct ScoredItem {
    std::string id;
    double score = 0.0;

    friend bool operator==(const ScoredItem&, const ScoredItem&) = default;
};

/// Cosine similarity; 0 when either side is the zero vector.
inline double cosine(std::span<const float> a, std::span<const float> b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

/// Exhaustive cosine index over entities and predicates. Immutable once
/// built; `topk` is safe to call concurrently.
class VectorIndex {
public:
    explicit VectorIndex(std::size_t dimension = kDefaultDimension) : dimension_(dimension) {
        if (dimension_ < 1) throw IndexError("index dimension must be >= 1");
    }

    VectorIndex(const VectorIndex& other)
        : dimension_(other.dimension_), items_(other.items_), norms_(other.norms_), ids_(other.ids_) {}
    VectorIndex& operator=(const VectorIndex& other) {
        if (this != &other) {
            dimension_ = other.dimension_;
            items_ = other.items_;
            norms_ = other.norms_;
            ids_ = other.ids_;
            topk_calls_.store(0);
        }
        return *this;
    }

    std::size_t dimension() const noexcept { return dimension_; }
    std::size_t size() const noexcept { return items_.size(); }
    const std::vector<IndexItem>& items() const noexcept { return items_; }
    std::size_t topk_calls() const noexcept { return topk_calls_.load(); }

    void add(IndexItem item) {
        if (item.vector.size() != dimension_) {
            throw IndexError("item '" + item.id + "' has dimension " + std::to_string(item.vector.size()) +
                             ", index expects " + std::to_string(dimension_));
        }
        if (!ids_.emplace(item.id, items_.size()).second) throw IndexError("duplicate item id '" + item.id + "'");
        double norm = 0.0;
        for (float x : item.vector) norm += static_cast<double>(x) * x;
        norms_.push_back(std::sqrt(norm));
        items_.push_back(std::move(item));
    }

    /// Items of `kind` (all kinds when empty) by descending cosine, ties by
    /// ascending id. Returns min(k, candidates) entries.
    std::vector<ScoredItem> topk(std::span<const float> query, std::size_t k,
                                 std::optional<ItemKind> kind = std::nullopt) const {
        if (query.size() != dimension_) {
            throw IndexError("query dimension " + std::to_string(query.size()) + " does not match index dimension " +
                             std::to_string(dimension_));
        }
        if (k < 1) throw IndexError("k must be >= 1");
        topk_calls_.fetch_add(1, std::memory_order_relaxed);

        double qnorm = 0.0;
        for (float x : query) qnorm += static_cast<double>(x) * x;
        qnorm = std::sqrt(qnorm);

        std::vector<ScoredItem> scored;
        scored.reserve(items_.size());
        for (std::size_t i = 0; i < items_.size(); ++i) {
            if (kind && items_[i].kind != *kind) continue;
            double score = 0.0;
            if (qnorm > 0.0 && norms_[i] > 0.0) {
                double dot = 0.0;
                const auto& v = items_[i].vector;
                for (std::size_t j = 0; j < dimension_; ++j) dot += static_cast<double>(query[j]) * v[j];
                score = dot / (qnorm * norms_[i]);
            }
            scored.push_back(ScoredItem{items_[i].id, score});
        }
        const auto better = [](const ScoredItem& a, const ScoredItem& b) {
            if (a.score != b.score) return a.score > b.score;
            return a.id < b.id;
        };
        const std::size_t n = std::min(k, scored.size());
        std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(n), scored.end(), better);
        scored.resize(n);
        return scored;
    }

    /// Writes a JSON Lines index: a header {dimension} then one item per line.
    void save(const std::filesystem::path& path) const {
        std::ofstream out(path);
        if (!out) throw IndexError(path.string() + ": cannot write index");
        out << nlohmann::json{{"dimension", dimension_}}.dump() << '\n';
        for (const auto& item : items_) {
            out << nlohmann::json{{"id", item.id},
                                  {"kind", to_string(item.kind)},
                                  {"label", item.label},
                                  {"vector", item.vector}}
                       .dump()
                << '\n';
        }
    }

    static VectorIndex load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw LoadError(path.string() + ": cannot open index");
        std::string line;
        if (!std::getline(in, line)) throw LoadError(path.string() + ": empty index file");
        try {
            VectorIndex index(nlohmann::json::parse(line).at("dimension").get<std::size_t>());
            for (std::size_t line_no = 2; std::getline(in, line); ++line_no) {
                if (text::trim(line).empty()) continue;
                try {
                    const auto j = nlohmann::json::parse(line);
                    index.add(IndexItem{j.at("id").get<std::string>(), parse_item_kind(j.at("kind").get<std::string>()),
                                        j.value("label", std::string{}), j.at("vector").get<Vector>()});
                } catch (const std::exception& ex) {
                    throw LoadError(path.string() + ":" + std::to_string(line_no) + ": " + ex.what());
                }
            }
            return index;
        } catch (const LoadError&) {
            throw;
        } catch (const std::exception& ex) {
            throw LoadError(path.string() + ":1: " + ex.what());
        }
    }

private:
    std::size_t dimension_;
    std::vector<IndexItem> items_;
    std::vector<double> norms_;
    std::unordered_map<std::string, std::size_t> ids_;
    mutable std::atomic<std::size_t> topk_calls_{0};
};

inline VectorIndex build_index(std::span<const CatalogEntry> catalog, const Embedder& embedder) {
    VectorIndex index(embedder.dimension());
    std::vector<std::string> texts;
    texts.reserve(catalog.size());
    for (const auto& entry : catalog) texts.push_back(item_text(entry));
    auto vectors = embedder.embed_batch(texts);
    for (std::size_t i = 0; i < catalog.size(); ++i) {
        index.add(IndexItem{catalog[i].id, catalog[i].kind, catalog[i].label, std::move(vectors[i])});
    }
    return index;
}

struct AggregatedQuery {
    std::string text;
    bool truncated = false;
};

/// Pair queries of a block joined by newlines, cut to `char_cap` bytes
/// (never inside a UTF-8 sequence).
inline AggregatedQuery aggregate_block_query(const Block& block, const Dataset& dataset,
                                             std::size_t char_cap = kDefaultQueryCharCap) {
    if (block.pairs.empty()) throw UsageError("cannot aggregate an empty block");
    AggregatedQuery q;
    for (std::size_t i = 0; i < block.pairs.size(); ++i) {
        if (i > 0) q.text.push_back('\n');
        q.text += serialize_pair_query(block.pairs[i], dataset);
    }
    if (q.text.size() > char_cap) {
        q.text.resize(text::utf8_prefix_length(q.text, char_cap));
        q.truncated = true;
    }
    return q;
}

enum class Granularity { entity, predicate, triple };

inline std::string_view to_string(Granularity g) noexcept {
    switch (g) {
        case Granularity::entity: return "entity";
        case Granularity::predicate: return "predicate";
        case Granularity::triple: return "triple";
    }
    return "entity";
}

inline Granularity parse_granularity(std::string_view s) {
    if (s == "entity") return Granularity::entity;
    if (s == "predicate") return Granularity::predicate;
    if (s == "triple") return Granularity::triple;
    throw ConfigError("unknown granularity '" + std::string(s) + "' (expected entity|predicate|triple)");
}

enum class RetrievalMode { batch, per_query };

struct RetrievalConfig {
    std::size_t k = 2;
    Granularity granularity = Granularity::entity;
    std::size_t dimension = kDefaultDimension;
    std::size_t query_char_cap = kDefaultQueryCharCap;
    std::size_t parallelism = 4;

    void validate() const {
        if (k < 1) throw ConfigError("retrieval k must be >= 1");
        if (dimension < 1) throw ConfigError("embedding dimension must be >= 1");
        if (query_char_cap < 1) throw ConfigError("query character cap must be >= 1");
    }
};

/// Retrieved seeds for one retrieval unit (a block in batch mode, a pair in
/// per-query mode).
struct Seeds {
    std::vector<ScoredItem> entities;
    std::vector<ScoredItem> predicates;
    bool truncated = false;
    bool failed = false;
    std::string error;
};

struct BlockRetrieval {
    std::size_t ordinal = 0;
    std::vector<Seeds> units;  // 1 in batch mode, one per pair in per-query mode
    double seconds = 0.0;
};

struct RetrievalResult {
    std::vector<BlockRetrieval> blocks;  // same order as the input blocks
    std::size_t rac_count = 0;
};

namespace detail {

inline Seeds retrieve_one(const std::string& query, bool truncated, const VectorIndex& index,
                          const Embedder& embedder, const RetrievalConfig& config) {
    Seeds seeds;
    seeds.truncated = truncated;
    try {
        const Vector v = embedder.embed(query);
        switch (config.granularity) {
            case Granularity::entity:
            case Granularity::triple:
                seeds.entities = index.topk(v, config.k, ItemKind::entity);
                break;
            case Granularity::predicate:
                seeds.predicates = index.topk(v, config.k, ItemKind::predicate);
                break;
        }
    } catch (const std::exception& ex) {
        seeds = Seeds{};
        seeds.truncated = truncated;
        seeds.failed = true;
        seeds.error = ex.what();
    }
    return seeds;
}

}  // namespace detail

/// One embed + top-k call per block in batch mode, one per pair in per-query
/// mode; rac_count counts those calls. A failing unit is recorded with empty
/// seeds and an error flag and does not stop the other units.
inline RetrievalResult batch_retrieve(std::span<const Block> blocks, const Dataset& dataset, const VectorIndex& index,
                                      const Embedder& embedder, const RetrievalConfig& config,
                                      RetrievalMode mode = RetrievalMode::batch) {
    config.validate();
    RetrievalResult result;
    result.blocks.resize(blocks.size());
    std::atomic<std::size_t> calls{0};

    parallel_for(blocks.size(), config.parallelism, [&](std::size_t b) {
        const auto start = std::chrono::steady_clock::now();
        const Block& block = blocks[b];
        BlockRetrieval& out = result.blocks[b];
        out.ordinal = block.ordinal;
        if (mode == RetrievalMode::batch) {
            if (!block.pairs.empty()) {
                const auto q = aggregate_block_query(block, dataset, config.query_char_cap);
                out.units.push_back(detail::retrieve_one(q.text, q.truncated, index, embedder, config));
                calls.fetch_add(1, std::memory_order_relaxed);
            }
        } else {
            for (const auto& pair : block.pairs) {
                std::string q = serialize_pair_query(pair, dataset);
                bool truncated = false;
                if (q.size() > config.query_char_cap) {
                    q.resize(text::utf8_prefix_length(q, config.query_char_cap));
                    truncated = true;
                }
                out.units.push_back(detail::retrieve_one(q, truncated, index, embedder, config));
                calls.fetch_add(1, std::memory_order_relaxed);
            }
        }
        out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    });
    result.rac_count = calls.load();
    return result;
}

}  // namespace blockrag
