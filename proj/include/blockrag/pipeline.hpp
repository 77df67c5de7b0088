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

#include <atomic>
#include <charconv>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "json.hpp"

#include "blockrag/blocking.hpp"
#include "blockrag/datamodel.hpp"
#include "blockrag/error.hpp"
#include "blockrag/evaluation.hpp"
#include "blockrag/generation.hpp"
#include "blockrag/kgsearch.hpp"
#include "blockrag/parallel.hpp"
#include "blockrag/remote.hpp"
#include "blockrag/retrieval.hpp"
#include "blockrag/text.hpp"

namespace blockrag {

// ---------------------------------------------------------------------------
// Variants
// ---------------------------------------------------------------------------

enum class Variant {
    llm_em,
    rag4em,
    ce_rag4em_br,
    ce_rag4em_bg,
    ce_rag4em_br_bg,
    ce_kg_rag4em_br,
    ce_kg_rag4em_bg,
    ce_kg_rag4em_br_bg,
};

inline constexpr std::pair<Variant, std::string_view> kVariantNames[] = {
    {Variant::llm_em, "llm_em"},
    {Variant::rag4em, "rag4em"},
    {Variant::ce_rag4em_br, "ce_rag4em_br"},
    {Variant::ce_rag4em_bg, "ce_rag4em_bg"},
    {Variant::ce_rag4em_br_bg, "ce_rag4em_br_bg"},
    {Variant::ce_kg_rag4em_br, "ce_kg_rag4em_br"},
    {Variant::ce_kg_rag4em_bg, "ce_kg_rag4em_bg"},
    {Variant::ce_kg_rag4em_br_bg, "ce_kg_rag4em_br_bg"},
};

inline std::string_view to_string(Variant v) noexcept {
    for (const auto& [variant, name] : kVariantNames) {
        if (variant == v) return name;
    }
    return "llm_em";
}

inline Variant parse_variant(std::string_view s) {
    for (const auto& [variant, name] : kVariantNames) {
        if (name == s) return variant;
    }
    throw ConfigError("unknown variant '" + std::string(s) + "'");
}

/// Which stages a variant runs and how.
struct VariantTraits {
    bool retrieval = false;
    bool batch_retrieval = false;
    bool batch_generation = false;
    bool triples = false;
};

inline VariantTraits traits(Variant v) noexcept {
    switch (v) {
        case Variant::llm_em: return {false, false, false, false};
        case Variant::rag4em: return {true, false, false, false};
        case Variant::ce_rag4em_br: return {true, true, false, false};
        case Variant::ce_rag4em_bg: return {true, false, true, false};
        case Variant::ce_rag4em_br_bg: return {true, true, true, false};
        case Variant::ce_kg_rag4em_br: return {true, true, false, true};
        case Variant::ce_kg_rag4em_bg: return {true, false, true, true};
        case Variant::ce_kg_rag4em_br_bg: return {true, true, true, true};
    }
    return {};
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class BackendKind { mock, remote };
enum class EnrichmentMode { offline, online };
enum class PairUniverse { labeled, all };

struct RunConfig {
    std::string dataset;
    std::string dataset_name;  // defaults to the dataset directory name
    std::vector<std::string> label_files{"test.csv"};
    std::string kg_catalog;
    std::string kg_edges;
    std::string kg_index;

    Variant variant = Variant::ce_rag4em_br;
    Granularity granularity = Granularity::entity;
    Traversal traversal = Traversal::exp;

    BlockingConfig blocking;
    RetrievalConfig retrieval;
    SearchConfig search;

    BackendKind backend = BackendKind::mock;
    double mock_threshold = 0.5;
    Decoding decoding;
    BackendKind embedder = BackendKind::mock;
    EnrichmentMode enrichment = EnrichmentMode::offline;
    PairUniverse pair_universe = PairUniverse::labeled;

    std::uint64_t seed = 0;
    std::size_t parallelism = 4;
    std::string output_dir = "blockrag-out";
    std::string csv;  // defaults to <output_dir>/runs.csv

    std::string effective_dataset_name() const {
        if (!dataset_name.empty()) return dataset_name;
        auto p = std::filesystem::path(dataset);
        if (!p.has_filename()) p = p.parent_path();
        return p.filename().string();
    }

    /// Context items fed to the prompt: the triple budget for triple
    /// granularity, the retrieval depth otherwise.
    std::size_t context_top_k() const noexcept {
        return granularity == Granularity::triple ? search.triple_top_k : retrieval.k;
    }
};

namespace config_detail {

inline std::string format_double(double x) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view key, std::string_view v) {
    double x = 0.0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), x);
    if (res.ec != std::errc{} || res.ptr != v.data() + v.size()) {
        throw ConfigError("'" + std::string(key) + "' expects a number, got '" + std::string(v) + "'");
    }
    return x;
}

inline std::uint64_t parse_uint(std::string_view key, std::string_view v) {
    std::uint64_t x = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), x);
    if (res.ec != std::errc{} || res.ptr != v.data() + v.size()) {
        throw ConfigError("'" + std::string(key) + "' expects a non-negative integer, got '" + std::string(v) + "'");
    }
    return x;
}

inline std::string join(const std::vector<std::string>& parts, char sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i > 0) out.push_back(sep);
        out += parts[i];
    }
    return out;
}

inline std::string_view backend_name(BackendKind b) { return b == BackendKind::mock ? "mock" : "remote"; }
inline BackendKind parse_backend(std::string_view key, std::string_view v) {
    if (v == "mock") return BackendKind::mock;
    if (v == "remote") return BackendKind::remote;
    throw ConfigError("'" + std::string(key) + "' expects mock|remote, got '" + std::string(v) + "'");
}

}  // namespace config_detail

/// Short names accepted by `sweep --grid` and `--set`.
inline std::string canonical_key(std::string_view key) {
    static const std::map<std::string, std::string, std::less<>> aliases = {
        {"max_bs", "blocking.max_bs"},
        {"blocking", "blocking.method"},
        {"top_k", "retrieval.k"},
        {"k", "retrieval.k"},
        {"triple_top_k", "search.triple_top_k"},
        {"d_max", "search.d_max"},
    };
    if (const auto it = aliases.find(key); it != aliases.end()) return it->second;
    return std::string(key);
}

/// Applies one `key = value` setting. Unknown keys are configuration errors.
inline void set_config_value(RunConfig& c, std::string_view raw_key, std::string_view raw_value) {
    using namespace config_detail;
    const std::string key = canonical_key(text::trim(raw_key));
    const std::string v(text::trim(raw_value));

    if (key == "dataset") c.dataset = v;
    else if (key == "dataset.name") c.dataset_name = v;
    else if (key == "dataset.label_files") {
        c.label_files.clear();
        for (const auto& part : text::split(v, ',')) {
            if (!text::trim(part).empty()) c.label_files.emplace_back(text::trim(part));
        }
        if (c.label_files.empty()) throw ConfigError("'dataset.label_files' needs at least one file");
    }
    else if (key == "kg.catalog") c.kg_catalog = v;
    else if (key == "kg.edges") c.kg_edges = v;
    else if (key == "kg.index") c.kg_index = v;
    else if (key == "variant") c.variant = parse_variant(v);
    else if (key == "granularity") c.granularity = parse_granularity(v);
    else if (key == "traversal") c.traversal = parse_traversal(v);
    else if (key == "blocking.method") c.blocking.method = parse_blocking_method(v);
    else if (key == "blocking.q") c.blocking.q = parse_uint(key, v);
    else if (key == "blocking.xqgram_threshold") c.blocking.xqgram_threshold = parse_double(key, v);
    else if (key == "blocking.max_bs") c.blocking.max_bs = parse_uint(key, v);
    else if (key == "retrieval.k") c.retrieval.k = parse_uint(key, v);
    else if (key == "retrieval.dimension") c.retrieval.dimension = parse_uint(key, v);
    else if (key == "retrieval.query_char_cap") c.retrieval.query_char_cap = parse_uint(key, v);
    else if (key == "search.d_max") c.search.d_max = parse_uint(key, v);
    else if (key == "search.exp_neighbor_cap") c.search.exp_neighbor_cap = parse_uint(key, v);
    else if (key == "search.triple_top_k") c.search.triple_top_k = parse_uint(key, v);
    else if (key == "search.direction") c.search.direction = parse_direction(v);
    else if (key == "backend") c.backend = parse_backend(key, v);
    else if (key == "mock.threshold") c.mock_threshold = parse_double(key, v);
    else if (key == "decoding.temperature") c.decoding.temperature = parse_double(key, v);
    else if (key == "decoding.top_p") c.decoding.top_p = parse_double(key, v);
    else if (key == "decoding.top_k") c.decoding.top_k = static_cast<int>(parse_uint(key, v));
    else if (key == "decoding.max_tokens") c.decoding.max_tokens = static_cast<int>(parse_uint(key, v));
    else if (key == "embedder") c.embedder = parse_backend(key, v);
    else if (key == "enrichment") {
        if (v == "offline") c.enrichment = EnrichmentMode::offline;
        else if (v == "online") c.enrichment = EnrichmentMode::online;
        else throw ConfigError("'enrichment' expects offline|online, got '" + v + "'");
    }
    else if (key == "pair_universe") {
        if (v == "labeled") c.pair_universe = PairUniverse::labeled;
        else if (v == "all") c.pair_universe = PairUniverse::all;
        else throw ConfigError("'pair_universe' expects labeled|all, got '" + v + "'");
    }
    else if (key == "seed") c.seed = parse_uint(key, v);
    else if (key == "parallelism") c.parallelism = parse_uint(key, v);
    else if (key == "output_dir") c.output_dir = v;
    else if (key == "csv") c.csv = v;
    else throw ConfigError("unknown configuration key '" + std::string(raw_key) + "'");
}

/// Every setting as canonical key/value strings. Feeding the result back
/// through `set_config_value` reproduces the configuration.
inline std::map<std::string, std::string> config_values(const RunConfig& c) {
    using namespace config_detail;
    return {
        {"dataset", c.dataset},
        {"dataset.name", c.dataset_name},
        {"dataset.label_files", join(c.label_files, ',')},
        {"kg.catalog", c.kg_catalog},
        {"kg.edges", c.kg_edges},
        {"kg.index", c.kg_index},
        {"variant", std::string(to_string(c.variant))},
        {"granularity", std::string(to_string(c.granularity))},
        {"traversal", std::string(to_string(c.traversal))},
        {"blocking.method", std::string(to_string(c.blocking.method))},
        {"blocking.q", std::to_string(c.blocking.q)},
        {"blocking.xqgram_threshold", format_double(c.blocking.xqgram_threshold)},
        {"blocking.max_bs", std::to_string(c.blocking.max_bs)},
        {"retrieval.k", std::to_string(c.retrieval.k)},
        {"retrieval.dimension", std::to_string(c.retrieval.dimension)},
        {"retrieval.query_char_cap", std::to_string(c.retrieval.query_char_cap)},
        {"search.d_max", std::to_string(c.search.d_max)},
        {"search.exp_neighbor_cap", std::to_string(c.search.exp_neighbor_cap)},
        {"search.triple_top_k", std::to_string(c.search.triple_top_k)},
        {"search.direction", std::string(to_string(c.search.direction))},
        {"backend", std::string(backend_name(c.backend))},
        {"mock.threshold", format_double(c.mock_threshold)},
        {"decoding.temperature", format_double(c.decoding.temperature)},
        {"decoding.top_p", format_double(c.decoding.top_p)},
        {"decoding.top_k", std::to_string(c.decoding.top_k)},
        {"decoding.max_tokens", std::to_string(c.decoding.max_tokens)},
        {"embedder", std::string(backend_name(c.embedder))},
        {"enrichment", c.enrichment == EnrichmentMode::offline ? "offline" : "online"},
        {"pair_universe", c.pair_universe == PairUniverse::labeled ? "labeled" : "all"},
        {"seed", std::to_string(c.seed)},
        {"parallelism", std::to_string(c.parallelism)},
        {"output_dir", c.output_dir},
        {"csv", c.csv},
    };
}

inline nlohmann::json config_echo(const RunConfig& c) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : config_values(c)) j[k] = v;
    return j;
}

inline RunConfig config_from_echo(const nlohmann::json& echo) {
    RunConfig c;
    for (const auto& [k, v] : echo.items()) set_config_value(c, k, v.get<std::string>());
    return c;
}

inline bool equivalent(const RunConfig& a, const RunConfig& b) { return config_values(a) == config_values(b); }

/// Parses `key = value` lines; `#` starts a comment.
inline RunConfig parse_config(std::string_view content, RunConfig base = {}, std::string_view source = "<config>") {
    std::size_t line_no = 0;
    for (const auto& raw : text::split(content, '\n')) {
        ++line_no;
        std::string_view line = raw;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = text::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError(std::string(source) + ":" + std::to_string(line_no) + ": expected 'key = value'");
        }
        try {
            set_config_value(base, line.substr(0, eq), line.substr(eq + 1));
        } catch (const ConfigError& ex) {
            throw ConfigError(std::string(source) + ":" + std::to_string(line_no) + ": " + ex.what());
        }
    }
    return base;
}

inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path.string() + ": cannot open configuration file");
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return parse_config(buffer.str(), RunConfig{}, path.string());
}

/// Rejects combinations outside the eight supported variants before any
/// work starts.
inline void validate(const RunConfig& c) {
    c.blocking.validate();
    c.retrieval.validate();
    c.search.validate();
    if (c.dataset.empty()) throw ConfigError("'dataset' is required");
    if (c.parallelism < 1) throw ConfigError("'parallelism' must be >= 1");
    if (c.decoding.max_tokens < 1) throw ConfigError("'decoding.max_tokens' must be >= 1");

    const auto t = traits(c.variant);
    if (t.triples && c.granularity != Granularity::triple) {
        throw ConfigError("variant " + std::string(to_string(c.variant)) + " requires granularity = triple");
    }
    if (!t.triples && t.retrieval && c.granularity == Granularity::triple) {
        throw ConfigError("variant " + std::string(to_string(c.variant)) +
                          " retrieves entities or predicates; use a ce_kg_* variant for triples");
    }
    if (t.retrieval && c.kg_catalog.empty() && c.kg_index.empty()) {
        throw ConfigError("variant " + std::string(to_string(c.variant)) + " needs 'kg.catalog' or 'kg.index'");
    }
    if (t.triples && c.kg_edges.empty()) {
        throw ConfigError("variant " + std::string(to_string(c.variant)) + " needs 'kg.edges'");
    }
    if (t.retrieval && !c.kg_index.empty() && c.kg_catalog.empty()) {
        // Enrichment needs the catalog for descriptions.
        throw ConfigError("'kg.index' must be accompanied by 'kg.catalog'");
    }
}

// ---------------------------------------------------------------------------
// Resources shared across runs
// ---------------------------------------------------------------------------

/// Loaded inputs and backends. Sweeps reuse one instance across points.
class Resources {
public:
    const Dataset& dataset(const RunConfig& c) {
        const std::string key = c.dataset + "|" + config_detail::join(c.label_files, ',');
        if (!dataset_ || dataset_key_ != key) {
            dataset_ = load_dataset(c.dataset, c.label_files);
            dataset_key_ = key;
        }
        return *dataset_;
    }

    const KnowledgeGraph& knowledge_graph(const RunConfig& c) {
        const std::string key = c.kg_catalog + "|" + c.kg_edges;
        if (!kg_ || kg_key_ != key) {
            const auto catalog = c.kg_catalog.empty() ? std::vector<CatalogEntry>{} : load_catalog(c.kg_catalog);
            kg_ = load_knowledge_graph(catalog, c.kg_edges);
            kg_key_ = key;
        }
        return *kg_;
    }

    const Embedder& embedder(const RunConfig& c) {
        const std::string key = std::string(config_detail::backend_name(c.embedder)) + "|" +
                                std::to_string(c.retrieval.dimension);
        if (!embedder_ || embedder_key_ != key) {
            if (c.embedder == BackendKind::mock) {
                embedder_ = std::make_unique<MockEmbedder>(c.retrieval.dimension);
            } else {
                embedder_ = std::make_unique<remote::RemoteEmbedder>(remote::RemoteEmbedder::from_env(c.retrieval.dimension));
            }
            embedder_key_ = key;
            index_.reset();
        }
        return *embedder_;
    }

    const VectorIndex& index(const RunConfig& c) {
        const Embedder& emb = embedder(c);
        const std::string key = c.kg_index.empty() ? "catalog:" + c.kg_catalog : "index:" + c.kg_index;
        if (!index_ || index_key_ != key) {
            if (!c.kg_index.empty()) {
                index_.emplace(VectorIndex::load(c.kg_index));
                if (index_->dimension() != emb.dimension()) {
                    throw ConfigError("index dimension " + std::to_string(index_->dimension()) +
                                      " does not match retrieval.dimension " + std::to_string(emb.dimension()));
                }
            } else {
                const auto catalog = load_catalog(c.kg_catalog);
                index_.emplace(build_index(catalog, emb));
            }
            index_key_ = key;
        }
        return *index_;
    }

    const CompletionBackend& backend(const RunConfig& c) {
        const std::string key =
            std::string(config_detail::backend_name(c.backend)) + "|" + config_detail::format_double(c.mock_threshold);
        if (!backend_ || backend_key_ != key) {
            if (c.backend == BackendKind::mock) {
                backend_ = std::make_unique<MockBackend>(c.mock_threshold);
            } else {
                backend_ = std::make_unique<remote::RemoteChatBackend>(remote::RemoteChatBackend::from_env());
            }
            backend_key_ = key;
        }
        return *backend_;
    }

    DescriptionProvider* descriptions(const RunConfig& c) {
        if (c.enrichment == EnrichmentMode::offline) return nullptr;
        if (!descriptions_) descriptions_ = remote::RemoteDescriptionProvider::from_env();
        return descriptions_.get();
    }

    /// Replaces the backend, e.g. with a test double.
    void set_backend(std::unique_ptr<CompletionBackend> backend, const RunConfig& c) {
        backend_ = std::move(backend);
        backend_key_ =
            std::string(config_detail::backend_name(c.backend)) + "|" + config_detail::format_double(c.mock_threshold);
    }

private:
    std::optional<Dataset> dataset_;
    std::string dataset_key_;
    std::optional<KnowledgeGraph> kg_;
    std::string kg_key_;
    std::unique_ptr<Embedder> embedder_;
    std::string embedder_key_;
    std::optional<VectorIndex> index_;
    std::string index_key_;
    std::unique_ptr<CompletionBackend> backend_;
    std::string backend_key_;
    std::unique_ptr<remote::RemoteDescriptionProvider> descriptions_;
};

// ---------------------------------------------------------------------------
// Run
// ---------------------------------------------------------------------------

/// Context of one block: one bundle in batch-retrieval mode, one per pair in
/// per-query mode, none when the variant skips retrieval.
struct BlockContext {
    std::size_t ordinal = 0;
    std::vector<ContextBundle> units;
    std::vector<std::vector<std::string>> seeds;          // seed entity ids per unit (triple variants)
    std::vector<std::vector<SearchedTriple>> searched;  // raw triples per unit (triple variants)
};

struct RunOutput {
    RunMetrics metrics;
    std::vector<Block> blocks;
    std::vector<BlockContext> contexts;
    std::vector<MatchDecision> decisions;      // block order, then pair order
    std::vector<std::size_t> decision_blocks;  // (sub-)block ordinal of each decision
    std::vector<BatchResult> batches;          // batch-generation variants only
};

namespace detail {

class Stopwatch {
public:
    Stopwatch() : start_(std::chrono::steady_clock::now()) {}
    double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

private:
    std::chrono::steady_clock::time_point start_;
};

/// Counts calls and prompt characters on top of a backend.
class MeteredBackend final : public CompletionBackend {
public:
    explicit MeteredBackend(const CompletionBackend& inner) : inner_(inner) {}
    std::string complete(const std::string& prompt, const Decoding& decoding) const override {
        calls_.fetch_add(1, std::memory_order_relaxed);
        chars_.fetch_add(prompt.size(), std::memory_order_relaxed);
        return inner_.complete(prompt, decoding);
    }
    std::size_t calls() const noexcept { return calls_.load(); }
    std::size_t chars() const noexcept { return chars_.load(); }

private:
    const CompletionBackend& inner_;
    mutable std::atomic<std::size_t> calls_{0};
    mutable std::atomic<std::size_t> chars_{0};
};

inline std::vector<std::string> merged_lines(std::span<const ContextBundle> units) {
    std::vector<std::string> out;
    std::unordered_set<std::string> seen;
    for (const auto& unit : units) {
        for (const auto& item : unit.items) {
            if (seen.insert(item.text).second) out.push_back(item.text);
        }
    }
    return out;
}

inline std::string utc_timestamp() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace detail

/// Executes the stages the variant needs and scores the decisions against
/// the labeled pairs.
inline RunOutput run(const RunConfig& config, Resources& resources) {
    validate(config);
    const detail::Stopwatch wall;
    const auto vt = traits(config.variant);
    const Dataset& dataset = resources.dataset(config);

    RunOutput out;
    RunMetrics& m = out.metrics;
    m.labeled_pairs = dataset.labeled_pairs().size();

    // Blocking.
    {
        const detail::Stopwatch sw;
        if (config.pair_universe == PairUniverse::labeled) {
            std::unordered_set<PairKey, PairKeyHash> labeled;
            for (const auto& p : dataset.labeled_pairs()) labeled.insert(PairKey{p.source_id, p.target_id});
            out.blocks = make_candidate_blocks(dataset, config.blocking, [&](const CandidatePair& p) {
                             return labeled.contains(pair_key(p));
                         }).blocks;
        } else {
            out.blocks = make_candidate_blocks(dataset, config.blocking).blocks;
        }
        m.stage_seconds.blocking = sw.seconds();
    }
    const std::span<const Block> blocks = out.blocks;
    m.block_count = blocks.size();
    m.pair_count = pair_count(blocks);
    out.contexts.resize(blocks.size());
    for (std::size_t b = 0; b < blocks.size(); ++b) out.contexts[b].ordinal = blocks[b].ordinal;

    std::vector<double> retrieval_s(blocks.size(), 0.0), expansion_s(blocks.size(), 0.0),
        enrichment_s(blocks.size(), 0.0), generation_s(blocks.size(), 0.0);

    // Retrieval, expansion, enrichment and refinement.
    if (vt.retrieval) {
        const VectorIndex& index = resources.index(config);
        CountingEmbedder embedder(resources.embedder(config));
        const std::size_t topk_before = index.topk_calls();

        RetrievalConfig rc = config.retrieval;
        rc.parallelism = config.parallelism;
        rc.granularity = config.granularity;
        const auto retrieved = batch_retrieve(blocks, dataset, index, embedder, rc,
                                              vt.batch_retrieval ? RetrievalMode::batch : RetrievalMode::per_query);
        m.rac_count = retrieved.rac_count;
        m.embed_calls = embedder.calls();
        m.topk_calls = index.topk_calls() - topk_before;

        const KnowledgeGraph& kg = resources.knowledge_graph(config);
        const Enricher enricher(kg, resources.descriptions(config));
        std::atomic<std::size_t> kg_calls{0}, visited{0}, skipped{0};

        parallel_for(blocks.size(), config.parallelism, [&](std::size_t b) {
            const auto& units = retrieved.blocks[b].units;
            retrieval_s[b] = retrieved.blocks[b].seconds;
            BlockContext& ctx = out.contexts[b];
            std::vector<std::vector<SearchedTriple>> searched(units.size());
            std::vector<std::vector<std::string>> unit_seeds(units.size());

            if (vt.triples) {
                const detail::Stopwatch sw;
                for (std::size_t u = 0; u < units.size(); ++u) {
                    auto& seeds = unit_seeds[u];
                    for (const auto& item : units[u].entities) seeds.push_back(item.id);
                    auto result = config.traversal == Traversal::bfs ? bfs_triples(kg, seeds, config.search)
                                                                     : exp_triples(kg, seeds, config.search);
                    kg_calls.fetch_add(1, std::memory_order_relaxed);
                    visited.fetch_add(result.visited_nodes, std::memory_order_relaxed);
                    skipped.fetch_add(result.skipped_seeds.size(), std::memory_order_relaxed);
                    searched[u] = std::move(result.triples);
                }
                expansion_s[b] = sw.seconds();
            }

            const detail::Stopwatch sw;
            for (std::size_t u = 0; u < units.size(); ++u) {
                std::vector<ContextCandidate> candidates;
                if (vt.triples) {
                    candidates = triple_candidates(searched[u], config.traversal, enricher);
                } else {
                    const auto& items =
                        config.granularity == Granularity::predicate ? units[u].predicates : units[u].entities;
                    candidates = node_candidates(items, enricher);
                }
                ctx.units.push_back(refine(std::move(candidates), config.granularity, config.context_top_k(),
                                           blocks[b].ordinal));
            }
            enrichment_s[b] = sw.seconds();
            if (vt.triples) {
                ctx.seeds = std::move(unit_seeds);
                ctx.searched = std::move(searched);
            }
        });

        m.kg_calls = kg_calls.load();
        m.kg_visited_nodes = visited.load();
        m.skipped_seeds = skipped.load();
        m.enrichment_misses = enricher.misses();
        for (const auto& br : retrieved.blocks) {
            for (const auto& unit : br.units) {
                m.truncated_queries += unit.truncated ? 1 : 0;
                m.failed_retrievals += unit.failed ? 1 : 0;
            }
        }
    }

    // Generation.
    detail::MeteredBackend backend(resources.backend(config));
    std::vector<std::vector<MatchDecision>> per_block(blocks.size());
    std::vector<std::optional<BatchResult>> batch_results(blocks.size());

    parallel_for(blocks.size(), config.parallelism, [&](std::size_t b) {
        const detail::Stopwatch sw;
        const Block& block = blocks[b];
        const BlockContext& ctx = out.contexts[b];
        std::vector<std::string> queries;
        std::vector<PairKey> keys;
        for (const auto& pair : block.pairs) {
            queries.push_back(serialize_pair_query(pair, dataset));
            keys.push_back(pair_key(pair));
        }
        // Context for pair i: the block bundle under batch retrieval, the
        // pair's own bundle under per-query retrieval, nothing for llm_em.
        auto pair_context = [&](std::size_t i) -> std::vector<std::string> {
            if (ctx.units.empty()) return {};
            return ctx.units.size() == 1 && vt.batch_retrieval ? ctx.units.front().lines() : ctx.units[i].lines();
        };

        if (vt.batch_generation) {
            const auto shared = vt.batch_retrieval && !ctx.units.empty() ? ctx.units.front().lines()
                                                                         : detail::merged_lines(ctx.units);
            BatchResult result = decide_batch(backend, keys, queries, shared, config.decoding, pair_context);
            result.block_ordinal = block.ordinal;
            per_block[b] = result.decisions;
            batch_results[b] = std::move(result);
        } else {
            for (std::size_t i = 0; i < block.pairs.size(); ++i) {
                per_block[b].push_back(decide_single(backend, keys[i], queries[i], pair_context(i), config.decoding));
            }
        }
        generation_s[b] = sw.seconds();
    });

    for (std::size_t b = 0; b < blocks.size(); ++b) {
        for (auto& d : per_block[b]) {
            out.decision_blocks.push_back(blocks[b].ordinal);
            if (!batch_results[b]) {
                (d.provenance == Provenance::parsed ? m.parse.single_parsed : m.parse.single_fallback) += 1;
            }
            out.decisions.push_back(std::move(d));
        }
        if (batch_results[b]) {
            switch (batch_results[b]->status) {
                case ParseStatus::clean: ++m.parse.batch_clean; break;
                case ParseStatus::recovered_per_pair: ++m.parse.batch_recovered; break;
                case ParseStatus::defaulted: ++m.parse.batch_defaulted; break;
            }
            out.batches.push_back(std::move(*batch_results[b]));
        }
    }
    m.llm_calls = backend.calls();
    m.prompt_chars = backend.chars();

    // Evaluation.
    m.counts = confusion(out.decisions, dataset.labeled_pairs());
    m.scores = prf1(m.counts);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        m.stage_seconds.retrieval += retrieval_s[b];
        m.stage_seconds.expansion += expansion_s[b];
        m.stage_seconds.enrichment += enrichment_s[b];
        m.stage_seconds.generation += generation_s[b];
    }
    if (m.pair_count > 0) {
        // Each pair carries its block's stage time divided by the block size.
        const auto n = static_cast<double>(m.pair_count);
        double r = 0, e = 0, en = 0, g = 0;
        for (std::size_t b = 0; b < blocks.size(); ++b) {
            const auto pairs = blocks[b].pairs.size();
            r += amortize(retrieval_s[b], pairs) * static_cast<double>(pairs);
            e += amortize(expansion_s[b], pairs) * static_cast<double>(pairs);
            en += amortize(enrichment_s[b], pairs) * static_cast<double>(pairs);
            g += amortize(generation_s[b], pairs) * static_cast<double>(pairs);
        }
        m.per_pair_seconds = StageSeconds{m.stage_seconds.blocking / n, r / n, e / n, en / n, g / n};
    }
    m.wall_seconds = wall.seconds();
    return out;
}

inline RunOutput run(const RunConfig& config) {
    Resources resources;
    return run(config, resources);
}

inline ReportKey report_key(const RunConfig& c) {
    return ReportKey{c.effective_dataset_name(),
                     std::string(to_string(c.variant)),
                     std::string(to_string(c.blocking.method)),
                     c.blocking.max_bs,
                     c.context_top_k(),
                     std::string(to_string(c.granularity)),
                     c.granularity == Granularity::triple ? std::string(to_string(c.traversal)) : "none"};
}

inline std::filesystem::path csv_path(const RunConfig& c) {
    return c.csv.empty() ? std::filesystem::path(c.output_dir) / "runs.csv" : std::filesystem::path(c.csv);
}

/// Writes decisions.jsonl and report.json under `output_dir` and appends the
/// run to the CSV table.
inline void write_outputs(const RunConfig& config, const RunOutput& output) {
    const std::filesystem::path dir(config.output_dir);
    std::filesystem::create_directories(dir);
    write_decisions(dir / "decisions.jsonl", output.decisions, output.decision_blocks);
    ReportContext ctx{report_key(config), config_echo(config), config.seed, detail::utc_timestamp()};
    emit_report(output.metrics, ctx, dir / "report.json", csv_path(config));
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

struct GridAxis {
    std::string key;
    std::vector<std::string> values;
};

/// Parses `key=v1,v2,...`.
inline GridAxis parse_grid_axis(std::string_view text_in) {
    const auto eq = text_in.find('=');
    if (eq == std::string_view::npos) throw UsageError("grid axis must look like key=v1,v2: " + std::string(text_in));
    GridAxis axis{canonical_key(text::trim(text_in.substr(0, eq))), {}};
    for (const auto& v : text::split(text_in.substr(eq + 1), ',')) {
        if (!text::trim(v).empty()) axis.values.emplace_back(text::trim(v));
    }
    if (axis.values.empty()) throw UsageError("grid axis '" + axis.key + "' has no values");
    return axis;
}

struct SweepPoint {
    std::vector<std::pair<std::string, std::string>> settings;
    std::optional<RunMetrics> metrics;
    std::string error;
};

/// One run per point of the Cartesian product of the axes, in axis order
/// with the last axis varying fastest. Each point writes into its own
/// sub-directory and appends to the shared CSV; a failing point is recorded
/// and the sweep moves on.
inline std::vector<SweepPoint> sweep(const RunConfig& base, std::span<const GridAxis> grid, Resources& resources,
                                     bool write = true) {
    if (grid.empty()) throw UsageError("sweep needs at least one grid axis");
    for (const auto& axis : grid) {
        if (axis.values.empty()) throw UsageError("grid axis '" + axis.key + "' has no values");
    }
    std::size_t total = 1;
    for (const auto& axis : grid) total *= axis.values.size();

    std::vector<SweepPoint> points;
    points.reserve(total);
    for (std::size_t p = 0; p < total; ++p) {
        SweepPoint point;
        std::size_t rem = p;
        std::vector<std::size_t> choice(grid.size());
        for (std::size_t a = grid.size(); a-- > 0;) {
            choice[a] = rem % grid[a].values.size();
            rem /= grid[a].values.size();
        }
        for (std::size_t a = 0; a < grid.size(); ++a) point.settings.emplace_back(grid[a].key, grid[a].values[choice[a]]);

        try {
            RunConfig cfg = base;
            for (const auto& [k, v] : point.settings) set_config_value(cfg, k, v);
            cfg.output_dir = (std::filesystem::path(base.output_dir) / ("point-" + std::to_string(p))).string();
            if (cfg.csv.empty()) cfg.csv = csv_path(base).string();
            const auto output = run(cfg, resources);
            if (write) write_outputs(cfg, output);
            point.metrics = output.metrics;
        } catch (const std::exception& ex) {
            point.error = ex.what();
        }
        points.push_back(std::move(point));
    }
    return points;
}

}  // namespace blockrag
