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
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "blockrag/datamodel.hpp"
#include "blockrag/error.hpp"
#include "blockrag/text.hpp"

namespace blockrag {

enum class BlockingMethod { standard, qgram, xqgram };

inline std::string_view to_string(BlockingMethod m) noexcept {
    switch (m) {
        case BlockingMethod::standard: return "standard";
        case BlockingMethod::qgram: return "qgram";
        case BlockingMethod::xqgram: return "xqgram";
    }
    return "qgram";
}

inline BlockingMethod parse_blocking_method(std::string_view s) {
    if (s == "standard") return BlockingMethod::standard;
    if (s == "qgram") return BlockingMethod::qgram;
    if (s == "xqgram") return BlockingMethod::xqgram;
    throw ConfigError("unknown blocking method '" + std::string(s) + "' (expected standard|qgram|xqgram)");
}

/// Combination keys emitted per token by extended q-gram blocking.
inline constexpr std::size_t kMaxCombinationKeysPerToken = 32;

struct BlockingConfig {
    BlockingMethod method = BlockingMethod::qgram;
    std::size_t q = 3;
    double xqgram_threshold = 0.8;
    std::size_t max_bs = 6;

    void validate() const {
        if (q < 2) throw ConfigError("blocking q must be >= 2");
        if (!(xqgram_threshold > 0.0 && xqgram_threshold <= 1.0)) {
            throw ConfigError("xqgram threshold must be in (0, 1]");
        }
        if (max_bs < 1) throw ConfigError("max_bs must be >= 1");
    }
};

struct Block {
    std::size_t ordinal = 0;
    std::string key;
    std::vector<std::string> source_ids;
    std::vector<std::string> target_ids;
    std::vector<CandidatePair> pairs;
    // Ordinal of the block this one was split from; equals ordinal when unsplit.
    std::size_t parent_ordinal = 0;
};

namespace detail {

inline std::vector<std::string> qgrams(const std::string& token, std::size_t q) {
    if (token.size() < q) return {token};
    std::vector<std::string> grams;
    grams.reserve(token.size() - q + 1);
    for (std::size_t i = 0; i + q <= token.size(); ++i) grams.push_back(token.substr(i, q));
    return grams;
}

// Concatenations of every size-m combination of `grams`, in lexicographic
// order of index tuples, stopping after `cap` keys.
inline void combination_keys(const std::vector<std::string>& grams, std::size_t m, std::size_t cap,
                             std::vector<std::string>& out) {
    const std::size_t n = grams.size();
    if (m == 0 || m > n) return;
    std::vector<std::size_t> idx(m);
    for (std::size_t i = 0; i < m; ++i) idx[i] = i;
    for (std::size_t emitted = 0; emitted < cap;) {
        std::string key;
        for (std::size_t i : idx) key += grams[i];
        out.push_back(std::move(key));
        ++emitted;

        std::size_t pos = m;
        while (pos > 0 && idx[pos - 1] == n - m + (pos - 1)) --pos;
        if (pos == 0) break;
        ++idx[pos - 1];
        for (std::size_t i = pos; i < m; ++i) idx[i] = idx[i - 1] + 1;
    }
}

}  // namespace detail

/// Blocking keys of a record, unique and in generation order (attribute
/// order, then token order, then gram order).
inline std::vector<std::string> block_keys(const Record& record, const BlockingConfig& config) {
    std::vector<std::string> keys;
    std::unordered_set<std::string> seen;
    auto emit = [&](std::string key) {
        if (seen.insert(key).second) keys.push_back(std::move(key));
    };

    for (const auto& attribute : record.attributes()) {
        for (auto& token : text::tokenize(attribute.value)) {
            if (config.method == BlockingMethod::standard) {
                emit(std::move(token));
                continue;
            }
            const auto grams = detail::qgrams(token, config.q);
            for (const auto& gram : grams) emit(gram);
            if (config.method == BlockingMethod::xqgram) {
                const auto m = static_cast<std::size_t>(
                    std::ceil(config.xqgram_threshold * static_cast<double>(grams.size()) - 1e-12));
                std::vector<std::string> combos;
                detail::combination_keys(grams, std::max<std::size_t>(m, 1), kMaxCombinationKeysPerToken, combos);
                for (auto& combo : combos) emit(std::move(combo));
            }
        }
    }
    return keys;
}

/// One block per distinct key, ordered by the key's first appearance while
/// scanning `records` in order. Members keep input order within each side.
inline std::vector<Block> build_blocks(std::span<const Record> records, const BlockingConfig& config) {
    config.validate();
    std::vector<Block> blocks;
    std::unordered_map<std::string, std::size_t> by_key;
    for (const auto& record : records) {
        for (auto& key : block_keys(record, config)) {
            auto [it, inserted] = by_key.try_emplace(key, blocks.size());
            if (inserted) {
                Block block;
                block.ordinal = blocks.size();
                block.parent_ordinal = block.ordinal;
                block.key = std::move(key);
                blocks.push_back(std::move(block));
            }
            Block& block = blocks[it->second];
            (record.side() == Side::source ? block.source_ids : block.target_ids).push_back(record.id());
        }
    }
    return blocks;
}

/// Cartesian product of the block's source and target members.
inline std::vector<CandidatePair> generate_pairs(const Block& block) {
    std::vector<CandidatePair> pairs;
    pairs.reserve(block.source_ids.size() * block.target_ids.size());
    for (const auto& s : block.source_ids) {
        for (const auto& t : block.target_ids) pairs.push_back(CandidatePair{s, t, block.ordinal});
    }
    return pairs;
}

/// Keeps each pair key only in the lowest-ordinal block that produced it.
/// Blocks left without pairs are dropped.
inline std::vector<Block> deduplicate(std::vector<Block> blocks) {
    std::stable_sort(blocks.begin(), blocks.end(),
                     [](const Block& a, const Block& b) { return a.ordinal < b.ordinal; });
    std::unordered_set<PairKey, PairKeyHash> seen;
    std::vector<Block> out;
    out.reserve(blocks.size());
    for (auto& block : blocks) {
        std::vector<CandidatePair> kept;
        kept.reserve(block.pairs.size());
        for (auto& pair : block.pairs) {
            if (seen.insert(pair_key(pair)).second) {
                pair.origin_block = block.ordinal;
                kept.push_back(std::move(pair));
            }
        }
        if (kept.empty()) continue;
        block.pairs = std::move(kept);
        out.push_back(std::move(block));
    }
    return out;
}

/// Splits blocks holding more than `max_bs` pairs into consecutive chunks.
/// Every output block gets a fresh ordinal in overall sequence and its pairs
/// point at that ordinal; `parent_ordinal` keeps the pre-split ordinal.
inline std::vector<Block> decompose(std::span<const Block> blocks, std::size_t max_bs) {
    if (max_bs < 1) throw ConfigError("max_bs must be >= 1");
    std::vector<Block> out;
    for (const auto& block : blocks) {
        for (std::size_t start = 0; start < block.pairs.size(); start += max_bs) {
            const std::size_t end = std::min(start + max_bs, block.pairs.size());
            Block sub;
            sub.ordinal = out.size();
            sub.parent_ordinal = block.ordinal;
            sub.key = block.key;
            std::unordered_set<std::string_view> src_seen, tgt_seen;
            for (std::size_t i = start; i < end; ++i) {
                CandidatePair pair = block.pairs[i];
                pair.origin_block = sub.ordinal;
                if (src_seen.insert(block.pairs[i].source_id).second) sub.source_ids.push_back(pair.source_id);
                if (tgt_seen.insert(block.pairs[i].target_id).second) sub.target_ids.push_back(pair.target_id);
                sub.pairs.push_back(std::move(pair));
            }
            out.push_back(std::move(sub));
        }
    }
    return out;
}

/// Number of sub-blocks `decompose` yields: the sum of ceil(|pairs| / max_bs).
inline std::size_t sub_block_count(std::span<const Block> blocks, std::size_t max_bs) {
    if (max_bs < 1) throw ConfigError("max_bs must be >= 1");
    std::size_t n = 0;
    for (const auto& block : blocks) n += (block.pairs.size() + max_bs - 1) / max_bs;
    return n;
}

inline std::size_t pair_count(std::span<const Block> blocks) noexcept {
    std::size_t n = 0;
    for (const auto& block : blocks) n += block.pairs.size();
    return n;
}

struct CandidateBlocks {
    std::vector<Block> deduplicated;  // before decomposition
    std::vector<Block> blocks;        // final (sub-)blocks, each 1..max_bs pairs
    std::size_t raw_block_count = 0;
    std::size_t raw_pair_count = 0;
};

/// Full blocking stage over R = source ∪ target: keys, blocks, pairs, dedup
/// and decomposition. When `keep` is given, pairs it rejects are discarded
/// before deduplication.
template <typename PairFilter = std::nullptr_t>
CandidateBlocks make_candidate_blocks(const Dataset& dataset, const BlockingConfig& config,
                                      PairFilter keep = nullptr) {
    std::vector<Record> records;
    records.reserve(dataset.source_table().size() + dataset.target_table().size());
    records.insert(records.end(), dataset.source_table().begin(), dataset.source_table().end());
    records.insert(records.end(), dataset.target_table().begin(), dataset.target_table().end());

    CandidateBlocks result;
    auto blocks = build_blocks(records, config);
    result.raw_block_count = blocks.size();
    for (auto& block : blocks) {
        if constexpr (std::is_same_v<PairFilter, std::nullptr_t>) {
            block.pairs = generate_pairs(block);
        } else {
            for (const auto& s : block.source_ids) {
                for (const auto& t : block.target_ids) {
                    CandidatePair pair{s, t, block.ordinal};
                    if (keep(pair)) block.pairs.push_back(std::move(pair));
                }
            }
        }
        result.raw_pair_count += block.pairs.size();
    }
    result.deduplicated = deduplicate(std::move(blocks));
    result.blocks = decompose(result.deduplicated, config.max_bs);
    return result;
}

}  // namespace blockrag
