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
#include <compare>
#include <cstddef>
#include <deque>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "blockrag/error.hpp"
#include "blockrag/retrieval.hpp"
#include "blockrag/text.hpp"

namespace blockrag {

struct Triple {
    std::string head;
    std::string predicate;
    std::string tail;

    friend auto operator<=>(const Triple&, const Triple&) = default;
    friend bool operator==(const Triple&, const Triple&) = default;
};

/// Entity and predicate catalogs plus directed typed edges. Adjacency lists
/// are kept sorted by (predicate id, other endpoint id).
class KnowledgeGraph {
public:
    struct Incidence {
        std::string predicate;
        std::string other;
        std::size_t edge = 0;
    };

    void add_entry(CatalogEntry entry) {
        auto& catalog = entry.kind == ItemKind::entity ? entities_ : predicates_;
        const std::string id = entry.id;
        catalog.insert_or_assign(id, std::move(entry));
    }

    const CatalogEntry* entity(std::string_view id) const { return lookup(entities_, id); }
    const CatalogEntry* predicate(std::string_view id) const { return lookup(predicates_, id); }
    const CatalogEntry* find(std::string_view id) const {
        if (const auto* e = entity(id)) return e;
        return predicate(id);
    }

    bool has_entity(std::string_view id) const { return entity(id) != nullptr; }

    /// Adds an edge; returns false when the identical edge already exists.
    bool add_edge(const Triple& triple) {
        if (!has_entity(triple.head)) throw IntegrityError("edge head '" + triple.head + "' is not a known entity");
        if (!has_entity(triple.tail)) throw IntegrityError("edge tail '" + triple.tail + "' is not a known entity");
        if (!predicate(triple.predicate)) {
            throw IntegrityError("edge predicate '" + triple.predicate + "' is not a known predicate");
        }
        if (!edge_set_.insert(key_of(triple)).second) return false;

        const std::size_t index = edges_.size();
        edges_.push_back(triple);
        insert_sorted(outgoing_[triple.head], Incidence{triple.predicate, triple.tail, index});
        insert_sorted(incident_[triple.head], Incidence{triple.predicate, triple.tail, index});
        if (triple.head != triple.tail) {
            insert_sorted(incident_[triple.tail], Incidence{triple.predicate, triple.head, index});
        }
        return true;
    }

    const std::vector<Triple>& edges() const noexcept { return edges_; }
    std::size_t entity_count() const noexcept { return entities_.size(); }
    std::size_t predicate_count() const noexcept { return predicates_.size(); }

    /// Edges touching `id` in either orientation.
    std::span<const Incidence> incident(std::string_view id) const { return adjacency(incident_, id); }
    /// Edges with `id` as head.
    std::span<const Incidence> outgoing(std::string_view id) const { return adjacency(outgoing_, id); }

private:
    using Catalog = std::unordered_map<std::string, CatalogEntry>;
    using Adjacency = std::unordered_map<std::string, std::vector<Incidence>>;

    static const CatalogEntry* lookup(const Catalog& catalog, std::string_view id) {
        const auto it = catalog.find(std::string(id));
        return it == catalog.end() ? nullptr : &it->second;
    }

    static std::span<const Incidence> adjacency(const Adjacency& adj, std::string_view id) {
        const auto it = adj.find(std::string(id));
        if (it == adj.end()) return {};
        return it->second;
    }

    static void insert_sorted(std::vector<Incidence>& list, Incidence inc) {
        const auto pos = std::upper_bound(list.begin(), list.end(), inc, [](const Incidence& a, const Incidence& b) {
            return std::tie(a.predicate, a.other) < std::tie(b.predicate, b.other);
        });
        list.insert(pos, std::move(inc));
    }

    static std::string key_of(const Triple& t) { return t.head + '\x1f' + t.predicate + '\x1f' + t.tail; }

    Catalog entities_;
    Catalog predicates_;
    std::vector<Triple> edges_;
    std::unordered_set<std::string> edge_set_;
    Adjacency outgoing_;
    Adjacency incident_;
};

struct KnowledgeGraphLoadStats {
    std::size_t edges = 0;
    std::size_t duplicate_edges = 0;
    std::size_t registered_ids = 0;  // endpoints missing from the catalog
};

/// Builds a graph from a JSON Lines catalog and a TSV edge file
/// (head<TAB>predicate<TAB>tail). Edge endpoints absent from the catalog are
/// registered with empty label and description; duplicate edges are skipped.
inline KnowledgeGraph load_knowledge_graph(std::span<const CatalogEntry> catalog,
                                           const std::filesystem::path& edges_path,
                                           KnowledgeGraphLoadStats* stats = nullptr) {
    KnowledgeGraph kg;
    for (const auto& entry : catalog) kg.add_entry(entry);
    KnowledgeGraphLoadStats local;
    if (!edges_path.empty()) {
        std::ifstream in(edges_path);
        if (!in) throw LoadError(edges_path.string() + ": cannot open edges file");
        std::string line;
        for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (text::trim(line).empty() || line.front() == '#') continue;
            auto fields = text::split(line, '\t');
            if (fields.size() != 3) {
                throw LoadError(edges_path.string() + ":" + std::to_string(line_no) + ": expected 3 tab-separated fields");
            }
            Triple t{std::string(text::trim(fields[0])), std::string(text::trim(fields[1])),
                     std::string(text::trim(fields[2]))};
            if (t.head.empty() || t.predicate.empty() || t.tail.empty()) {
                throw LoadError(edges_path.string() + ":" + std::to_string(line_no) + ": empty field");
            }
            if (!kg.has_entity(t.head)) {
                kg.add_entry(CatalogEntry{t.head, ItemKind::entity, {}, {}});
                ++local.registered_ids;
            }
            if (!kg.has_entity(t.tail)) {
                kg.add_entry(CatalogEntry{t.tail, ItemKind::entity, {}, {}});
                ++local.registered_ids;
            }
            if (!kg.predicate(t.predicate)) {
                kg.add_entry(CatalogEntry{t.predicate, ItemKind::predicate, {}, {}});
                ++local.registered_ids;
            }
            if (kg.add_edge(t)) {
                ++local.edges;
            } else {
                ++local.duplicate_edges;
            }
        }
    }
    if (stats) *stats = local;
    return kg;
}

enum class TraversalDirection { undirected, directed };
enum class Traversal { bfs, exp };

inline std::string_view to_string(Traversal t) noexcept { return t == Traversal::bfs ? "bfs" : "exp"; }
inline Traversal parse_traversal(std::string_view s) {
    if (s == "bfs") return Traversal::bfs;
    if (s == "exp") return Traversal::exp;
    throw ConfigError("unknown traversal '" + std::string(s) + "' (expected bfs|exp)");
}
inline std::string_view to_string(TraversalDirection d) noexcept {
    return d == TraversalDirection::undirected ? "undirected" : "directed";
}
inline TraversalDirection parse_direction(std::string_view s) {
    if (s == "undirected") return TraversalDirection::undirected;
    if (s == "directed") return TraversalDirection::directed;
    throw ConfigError("unknown traversal direction '" + std::string(s) + "' (expected undirected|directed)");
}

struct SearchConfig {
    std::size_t d_max = 3;
    std::size_t exp_neighbor_cap = 20;
    std::size_t triple_top_k = 2;
    TraversalDirection direction = TraversalDirection::undirected;

    void validate() const {
        if (d_max < 1) throw ConfigError("d_max must be >= 1");
        if (exp_neighbor_cap < 1) throw ConfigError("exp_neighbor_cap must be >= 1");
        if (triple_top_k < 1) throw ConfigError("triple_top_k must be >= 1");
    }
};

struct SearchedTriple {
    Triple triple;
    std::size_t seed_rank = 0;  // 1-based rank of the seed (first seed of the pair for BFS)
};

struct TripleSearchResult {
    std::vector<SearchedTriple> triples;
    std::size_t visited_nodes = 0;
    std::vector<std::string> skipped_seeds;
};

namespace detail {

inline std::vector<std::size_t> present_seeds(const KnowledgeGraph& kg, std::span<const std::string> seeds,
                                              TripleSearchResult& result) {
    std::vector<std::size_t> present;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        if (kg.has_entity(seeds[i])) {
            present.push_back(i);
        } else {
            result.skipped_seeds.push_back(seeds[i]);
        }
    }
    return present;
}

// Shortest path from `from` to `to` as edge indices, or nullopt when none
// within d_max hops. Adds every discovered node to `visited`.
inline std::optional<std::vector<std::size_t>> bfs_path(const KnowledgeGraph& kg, const std::string& from,
                                                        const std::string& to, const SearchConfig& config,
                                                        std::size_t& visited) {
    struct Parent {
        std::string node;
        std::size_t edge;
        std::size_t depth;
    };
    std::unordered_map<std::string, Parent> parent;
    parent.emplace(from, Parent{{}, 0, 0});
    ++visited;
    std::deque<std::string> queue{from};
    bool found = false;

    while (!queue.empty() && !found) {
        const std::string u = std::move(queue.front());
        queue.pop_front();
        const std::size_t depth = parent.at(u).depth;
        if (depth >= config.d_max) continue;
        const auto neighbors =
            config.direction == TraversalDirection::undirected ? kg.incident(u) : kg.outgoing(u);
        for (const auto& inc : neighbors) {
            if (parent.contains(inc.other)) continue;
            parent.emplace(inc.other, Parent{u, inc.edge, depth + 1});
            ++visited;
            if (inc.other == to) {
                found = true;
                break;
            }
            queue.push_back(inc.other);
        }
    }
    if (!found) return std::nullopt;

    std::vector<std::size_t> path;
    for (std::string node = to; node != from;) {
        const Parent& p = parent.at(node);
        path.push_back(p.edge);
        node = p.node;
    }
    std::reverse(path.begin(), path.end());
    return path;
}

}  // namespace detail

/// For each seed pair (i < j) in rank order, one shortest connecting path of
/// at most d_max hops. Triples keep their stored orientation; duplicates are
/// dropped at their first position.
inline TripleSearchResult bfs_triples(const KnowledgeGraph& kg, std::span<const std::string> seeds,
                                      const SearchConfig& config) {
    config.validate();
    TripleSearchResult result;
    const auto present = detail::present_seeds(kg, seeds, result);
    std::unordered_set<std::size_t> emitted;
    for (std::size_t a = 0; a < present.size(); ++a) {
        for (std::size_t b = a + 1; b < present.size(); ++b) {
            const auto& from = seeds[present[a]];
            const auto& to = seeds[present[b]];
            if (from == to) continue;
            const auto path = detail::bfs_path(kg, from, to, config, result.visited_nodes);
            if (!path) continue;
            for (std::size_t edge : *path) {
                if (emitted.insert(edge).second) {
                    result.triples.push_back(SearchedTriple{kg.edges()[edge], present[a] + 1});
                }
            }
        }
    }
    return result;
}

/// One-hop neighbourhood of each seed in rank order, sorted by (predicate id,
/// other endpoint id) and capped per seed before cross-seed duplicates are
/// dropped.
inline TripleSearchResult exp_triples(const KnowledgeGraph& kg, std::span<const std::string> seeds,
                                      const SearchConfig& config) {
    config.validate();
    TripleSearchResult result;
    const auto present = detail::present_seeds(kg, seeds, result);
    std::unordered_set<std::size_t> emitted;
    for (std::size_t i : present) {
        const auto incidences = kg.incident(seeds[i]);
        const std::size_t n = std::min(incidences.size(), config.exp_neighbor_cap);
        result.visited_nodes += 1 + n;
        for (std::size_t j = 0; j < n; ++j) {
            if (emitted.insert(incidences[j].edge).second) {
                result.triples.push_back(SearchedTriple{kg.edges()[incidences[j].edge], i + 1});
            }
        }
    }
    return result;
}

/// Remote source of descriptions used when the local catalog has none.
class DescriptionProvider {
public:
    virtual ~DescriptionProvider() = default;
    /// nullopt when the id has no description; throws on transport failure.
    virtual std::optional<std::string> describe(const std::string& id) = 0;
};

/// Renders identifiers as `ID (description)` and triples as
/// `<H (dh), P (dp), T (dt)>`. Description lookup order: local catalog,
/// remote provider (when set), label, bare id.
class Enricher {
public:
    explicit Enricher(const KnowledgeGraph& kg, DescriptionProvider* remote = nullptr) : kg_(kg), remote_(remote) {}

    std::string item(const std::string& id) const {
        const CatalogEntry* entry = kg_.find(id);
        if (entry && !entry->description.empty()) return format(id, entry->description);
        if (remote_) {
            try {
                if (auto d = remote_->describe(id); d && !text::trim(*d).empty()) return format(id, *d);
            } catch (const std::exception&) {
                misses_.fetch_add(1, std::memory_order_relaxed);
            }
        }
        if (entry && !entry->label.empty()) return format(id, entry->label);
        return id;
    }

    std::string triple(const Triple& t) const {
        return "<" + item(t.head) + ", " + item(t.predicate) + ", " + item(t.tail) + ">";
    }

    std::size_t misses() const noexcept { return misses_.load(); }

private:
    static std::string format(const std::string& id, std::string_view description) {
        return id + " (" + text::collapse_whitespace(description) + ")";
    }

    const KnowledgeGraph& kg_;
    DescriptionProvider* remote_;
    mutable std::atomic<std::size_t> misses_{0};
};

enum class ContextSource { vector, exp, bfs };

inline std::string_view to_string(ContextSource s) noexcept {
    switch (s) {
        case ContextSource::vector: return "vector";
        case ContextSource::exp: return "exp";
        case ContextSource::bfs: return "bfs";
    }
    return "vector";
}

/// A piece of enriched knowledge with the metadata refinement orders by.
struct ContextCandidate {
    std::string text;
    ContextSource source = ContextSource::vector;
    double score = 0.0;          // retrieval score (vector candidates)
    std::size_t seed_rank = 0;   // 1-based seed rank (triples)
    std::size_t position = 0;    // emission order within its source
};

struct ContextItem {
    std::size_t rank = 0;
    std::string text;
    ContextSource source = ContextSource::vector;
    std::size_t seed_rank = 0;

    friend bool operator==(const ContextItem&, const ContextItem&) = default;
};

struct ContextBundle {
    std::size_t block_ordinal = 0;
    Granularity granularity = Granularity::entity;
    std::vector<ContextItem> items;

    std::vector<std::string> lines() const {
        std::vector<std::string> out;
        out.reserve(items.size());
        for (const auto& item : items) out.push_back(item.text);
        return out;
    }
};

/// Keeps the first `top_k` candidates of the source-defined order: vector
/// items by descending score, EXP triples by seed rank then emission order,
/// BFS triples by emission order. Ranks are renumbered from 1.
inline ContextBundle refine(std::vector<ContextCandidate> candidates, Granularity granularity, std::size_t top_k,
                            std::size_t block_ordinal = 0) {
    std::stable_sort(candidates.begin(), candidates.end(), [](const ContextCandidate& a, const ContextCandidate& b) {
        if (a.source != b.source) return a.source < b.source;
        switch (a.source) {
            case ContextSource::vector:
                if (a.score != b.score) return a.score > b.score;
                return a.position < b.position;
            case ContextSource::exp:
                if (a.seed_rank != b.seed_rank) return a.seed_rank < b.seed_rank;
                return a.position < b.position;
            case ContextSource::bfs:
                return a.position < b.position;
        }
        return false;
    });
    ContextBundle bundle;
    bundle.block_ordinal = block_ordinal;
    bundle.granularity = granularity;
    const std::size_t n = std::min(top_k, candidates.size());
    for (std::size_t i = 0; i < n; ++i) {
        bundle.items.push_back(
            ContextItem{i + 1, std::move(candidates[i].text), candidates[i].source, candidates[i].seed_rank});
    }
    return bundle;
}

/// Enriched candidates for retrieved nodes.
inline std::vector<ContextCandidate> node_candidates(std::span<const ScoredItem> items, const Enricher& enricher) {
    std::vector<ContextCandidate> out;
    out.reserve(items.size());
    for (std::size_t i = 0; i < items.size(); ++i) {
        out.push_back(ContextCandidate{enricher.item(items[i].id), ContextSource::vector, items[i].score, i + 1, i});
    }
    return out;
}

/// Enriched candidates for searched triples.
inline std::vector<ContextCandidate> triple_candidates(std::span<const SearchedTriple> triples, Traversal traversal,
                                                       const Enricher& enricher) {
    std::vector<ContextCandidate> out;
    out.reserve(triples.size());
    const auto source = traversal == Traversal::bfs ? ContextSource::bfs : ContextSource::exp;
    for (std::size_t i = 0; i < triples.size(); ++i) {
        out.push_back(ContextCandidate{enricher.triple(triples[i].triple), source, 0.0, triples[i].seed_rank, i});
    }
    return out;
}

}  // namespace blockrag
