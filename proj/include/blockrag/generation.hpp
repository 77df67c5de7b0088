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
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <regex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "blockrag/datamodel.hpp"
#include "blockrag/error.hpp"
#include "blockrag/kgsearch.hpp"
#include "blockrag/text.hpp"

namespace blockrag {

struct Decoding {
    double temperature = 0.5;
    double top_p = 0.8;
    int top_k = 20;
    int max_tokens = 1024;
};

class CompletionBackend {
public:
    virtual ~CompletionBackend() = default;
    virtual std::string complete(const std::string& prompt, const Decoding& decoding) const = 0;
};

/// Forwards to another backend and counts calls.
class CountingBackend final : public CompletionBackend {
public:
    explicit CountingBackend(const CompletionBackend& inner) : inner_(inner) {}
    std::string complete(const std::string& prompt, const Decoding& decoding) const override {
        calls_.fetch_add(1, std::memory_order_relaxed);
        return inner_.complete(prompt, decoding);
    }
    std::size_t calls() const noexcept { return calls_.load(); }

private:
    const CompletionBackend& inner_;
    mutable std::atomic<std::size_t> calls_{0};
};

namespace prompts {

inline constexpr std::string_view kPreamble =
    "You are an expert in entity matching, who is to determine whether these two given entity representations "
    "refer to the same entity. You are also provided with additional information retrieved from Wikidata, which "
    "might be helpful for your reasoning.";

inline constexpr std::string_view kSingleContextLabel =
    "Additional Information (You can use this in your reasoning if available):";

inline constexpr std::string_view kSingleInstruction =
    "## Instruction: 1. Analyse each entity's semantics independently: consider key terms, roles, and context.\n"
    "2. Rank the relevance of each entry in the additional information, and only use it if it helps make the "
    "decision.\n"
    "3. Perform a step-by-step logical comparison of the two entities.";

inline constexpr std::string_view kSingleOutput = "## Output Format: Match Decision: [Yes / No]";

inline constexpr std::string_view kBatchHeader = "Entity Pairs in a Batch:";

inline constexpr std::string_view kBatchContextLabel =
    "Additional Information (shared; you may use this in your reasoning if available):";

inline constexpr std::string_view kBatchInstruction =
    "## Instruction:\n"
    "1. Process each entity pair sequentially, and treat each pair independently.\n"
    "2. Analyse each entity's semantics independently: consider key terms, roles, and context.\n"
    "3. Rank the relevance of each entry in the additional information, and only use it if it helps make the "
    "decision.\n"
    "4. Perform a step-by-step logical comparison of the two entities.";

inline constexpr std::string_view kBatchOutput = "## Output format: Match Decisions: [Yes / No]";

inline constexpr std::string_view kNoContext = "(none)";

}  // namespace prompts

namespace detail {

inline void append_context(std::string& out, std::string_view label, std::span<const std::string> context) {
    out += label;
    if (context.empty()) {
        out += ' ';
        out += prompts::kNoContext;
        return;
    }
    for (const auto& line : context) {
        out += "\n- ";
        out += line;
    }
}

}  // namespace detail

/// Per-query prompt. Context lines are listed one per line; an empty context
/// renders as "(none)".
inline std::string build_prompt_single(std::string_view pair_query, std::span<const std::string> context) {
    std::string out;
    out += prompts::kPreamble;
    out += "\n\n## Input: ";
    out += pair_query;
    out += '\n';
    detail::append_context(out, prompts::kSingleContextLabel, context);
    out += "\n\n";
    out += prompts::kSingleInstruction;
    out += "\n\n";
    out += prompts::kSingleOutput;
    return out;
}

inline std::string build_prompt_single(std::string_view pair_query, const ContextBundle& bundle) {
    return build_prompt_single(pair_query, bundle.lines());
}

/// Batch prompt over the pairs of one block: instruction and shared context
/// appear once, pairs are numbered from 1 in block order.
inline std::string build_prompt_batch(std::span<const std::string> pair_queries,
                                      std::span<const std::string> shared_context) {
    if (pair_queries.empty()) throw UsageError("batch prompt needs at least one pair");
    std::string out;
    out += prompts::kPreamble;
    out += "\n\n## Input:\n";
    out += prompts::kBatchHeader;
    out += '\n';
    for (std::size_t i = 0; i < pair_queries.size(); ++i) {
        if (i == 0) out += '[';
        out += "Pair " + std::to_string(i + 1) + " - ";
        out += pair_queries[i];
        out += (i + 1 == pair_queries.size()) ? "]\n" : "\n";
    }
    detail::append_context(out, prompts::kBatchContextLabel, shared_context);
    out += "\n\n";
    out += prompts::kBatchInstruction;
    out += "\n\n";
    out += prompts::kBatchOutput;
    return out;
}

namespace detail {

inline std::optional<Decision> word_decision(std::string_view word) {
    if (word == "yes") return Decision::yes;
    if (word == "no") return Decision::no;
    return std::nullopt;
}

// First alphanumeric word at or after `pos`, skipping punctuation and markup.
inline std::string_view next_word(std::string_view lowered, std::size_t pos) {
    while (pos < lowered.size() && !text::is_token_char(lowered[pos])) ++pos;
    std::size_t end = pos;
    while (end < lowered.size() && text::is_token_char(lowered[end])) ++end;
    return lowered.substr(pos, end - pos);
}

}  // namespace detail

/// Last "Match Decision" followed by yes/no wins; otherwise the last
/// standalone yes/no word; otherwise `no` with fallback provenance.
inline MatchDecision parse_single(std::string_view output) {
    MatchDecision result;
    result.raw_text = std::string(output);
    const std::string lowered = text::to_lower(output);
    constexpr std::string_view marker = "match decision";

    std::vector<std::size_t> positions;
    for (auto pos = lowered.find(marker); pos != std::string::npos; pos = lowered.find(marker, pos + 1)) {
        positions.push_back(pos);
    }
    for (auto it = positions.rbegin(); it != positions.rend(); ++it) {
        std::size_t after = *it + marker.size();
        if (after < lowered.size() && lowered[after] == 's') ++after;
        if (auto d = detail::word_decision(detail::next_word(lowered, after))) {
            result.decision = *d;
            result.provenance = Provenance::parsed;
            return result;
        }
    }
    const auto tokens = text::tokenize(lowered);
    for (auto it = tokens.rbegin(); it != tokens.rend(); ++it) {
        if (auto d = detail::word_decision(*it)) {
            result.decision = *d;
            result.provenance = Provenance::parsed;
            return result;
        }
    }
    result.decision = Decision::no;
    result.provenance = Provenance::fallback_default;
    return result;
}

enum class ParseStatus { clean, recovered_per_pair, defaulted };

inline std::string_view to_string(ParseStatus s) noexcept {
    switch (s) {
        case ParseStatus::clean: return "clean";
        case ParseStatus::recovered_per_pair: return "recovered_per_pair";
        case ParseStatus::defaulted: return "defaulted";
    }
    return "defaulted";
}

struct BatchResult {
    std::size_t block_ordinal = 0;
    std::vector<MatchDecision> decisions;
    ParseStatus status = ParseStatus::clean;
};

/// Re-asks a single pair (by index in the batch) when a batch answer cannot be
/// mapped back onto its pairs.
using PairReasker = std::function<MatchDecision(std::size_t index)>;

namespace detail {

// Decisions from the last `Match Decisions: [...]` list.
inline std::optional<std::vector<Decision>> bracketed_decisions(const std::string& lowered) {
    constexpr std::string_view marker = "match decision";
    std::optional<std::vector<Decision>> best;
    for (auto pos = lowered.find(marker); pos != std::string::npos; pos = lowered.find(marker, pos + 1)) {
        const auto open = lowered.find('[', pos + marker.size());
        if (open == std::string::npos) break;
        // Only whitespace, 's', ':' or markup may sit between the marker and the list.
        const auto gap = std::string_view(lowered).substr(pos + marker.size(), open - pos - marker.size());
        if (gap.find_first_not_of("s: \t*\r\n") != std::string_view::npos) continue;
        const auto close = lowered.find(']', open);
        if (close == std::string::npos) continue;
        std::vector<Decision> list;
        for (const auto& token : text::tokenize(std::string_view(lowered).substr(open + 1, close - open - 1))) {
            if (auto d = word_decision(token)) list.push_back(*d);
        }
        best = std::move(list);
    }
    return best;
}

// Decisions from `Pair i: yes` lines, keyed by the 1-based pair index.
inline std::map<std::size_t, Decision> per_line_decisions(const std::string& lowered) {
    static const std::regex line_re(R"(pair\s*#?\s*(\d+)\s*[:\-\)\.=]*\s*(?:match\s+decision\s*:?\s*)?[\*\s\[]*(yes|no)\b)");
    std::map<std::size_t, Decision> out;
    for (const auto& line : text::split(lowered, '\n')) {
        std::smatch m;
        if (!std::regex_search(line, m, line_re)) continue;
        const std::size_t index = std::stoul(m[1].str());
        out.try_emplace(index, m[2].str() == "yes" ? Decision::yes : Decision::no);
    }
    return out;
}

}  // namespace detail

/// Maps a batch answer onto `keys`. Accepts `Match Decisions: [d1, d2, ...]`
/// or one `Pair i: d` line per pair. On a count mismatch every pair is
/// re-asked once through `reask`; without a re-asker the recovered decisions
/// are padded or truncated to the batch size with fallback `no`.
inline BatchResult parse_batch(std::string_view output, std::span<const PairKey> keys, const PairReasker& reask = {}) {
    if (keys.empty()) throw UsageError("parse_batch needs at least one pair");
    const std::size_t expected = keys.size();
    const std::string lowered = text::to_lower(output);

    BatchResult result;
    auto make = [&](std::size_t i, Decision d, Provenance p, std::string raw) {
        return MatchDecision{keys[i], d, p, std::move(raw)};
    };

    const auto bracketed = detail::bracketed_decisions(lowered);
    if (bracketed && bracketed->size() == expected) {
        for (std::size_t i = 0; i < expected; ++i) {
            result.decisions.push_back(
                make(i, (*bracketed)[i], Provenance::parsed, std::string(to_string((*bracketed)[i]))));
        }
        result.status = ParseStatus::clean;
        return result;
    }

    const auto by_line = detail::per_line_decisions(lowered);
    const bool lines_complete = by_line.size() == expected && by_line.begin()->first == 1 &&
                                by_line.rbegin()->first == expected;
    if (lines_complete) {
        for (const auto& [index, d] : by_line) {
            result.decisions.push_back(make(index - 1, d, Provenance::parsed, std::string(to_string(d))));
        }
        result.status = ParseStatus::clean;
        return result;
    }

    if (reask) {
        for (std::size_t i = 0; i < expected; ++i) {
            MatchDecision d = reask(i);
            d.key = keys[i];
            result.decisions.push_back(std::move(d));
        }
        result.status = ParseStatus::recovered_per_pair;
        return result;
    }

    for (std::size_t i = 0; i < expected; ++i) {
        std::optional<Decision> d;
        if (bracketed && i < bracketed->size()) {
            d = (*bracketed)[i];
        } else if (!bracketed) {
            if (auto it = by_line.find(i + 1); it != by_line.end()) d = it->second;
        }
        if (d) {
            result.decisions.push_back(make(i, *d, Provenance::parsed, std::string(to_string(*d))));
        } else {
            result.decisions.push_back(make(i, Decision::no, Provenance::fallback_default, {}));
        }
    }
    result.status = ParseStatus::defaulted;
    return result;
}

/// Token-set Jaccard similarity; two empty sets count as identical.
inline double token_jaccard(std::string_view a, std::string_view b) {
    const auto ta = text::tokenize(a);
    const auto tb = text::tokenize(b);
    const std::unordered_set<std::string> sa(ta.begin(), ta.end());
    const std::unordered_set<std::string> sb(tb.begin(), tb.end());
    if (sa.empty() && sb.empty()) return 1.0;
    std::size_t inter = 0;
    for (const auto& t : sa) inter += sb.contains(t) ? 1 : 0;
    return static_cast<double>(inter) / static_cast<double>(sa.size() + sb.size() - inter);
}

struct EntityPairText {
    std::string entity1;
    std::string entity2;
};

/// Splits `Entity 1: X Entity 2: Y` into its two segments.
inline EntityPairText split_pair_query(std::string_view query) {
    constexpr std::string_view e1 = "Entity 1: ";
    constexpr std::string_view e2 = " Entity 2: ";
    EntityPairText out;
    const auto p1 = query.find(e1);
    if (p1 == std::string_view::npos) return out;
    const auto start = p1 + e1.size();
    const auto p2 = query.find(e2, start);
    if (p2 == std::string_view::npos) {
        out.entity1 = std::string(query.substr(start));
        return out;
    }
    out.entity1 = std::string(query.substr(start, p2 - start));
    out.entity2 = std::string(query.substr(p2 + e2.size()));
    return out;
}

/// Deterministic matcher used in place of an LLM. It answers yes iff the
/// token-set Jaccard of the two entity segments reaches the threshold and
/// never reads the context section, so batch and per-pair answers agree.
class MockBackend final : public CompletionBackend {
public:
    explicit MockBackend(double threshold = 0.5) : threshold_(threshold) {}

    double threshold() const noexcept { return threshold_; }

    std::string complete(const std::string& prompt, const Decoding& = {}) const override {
        if (prompt.find(prompts::kBatchHeader) != std::string::npos) {
            std::string out = "Match Decisions: [";
            const auto pairs = batch_pairs(prompt);
            for (std::size_t i = 0; i < pairs.size(); ++i) {
                if (i > 0) out += ", ";
                out += answer(pairs[i]) ? "Yes" : "No";
            }
            out += "]";
            return out;
        }
        return std::string("Match Decision: ") + (answer(single_pair(prompt)) ? "Yes" : "No");
    }

    bool answer(const EntityPairText& pair) const { return token_jaccard(pair.entity1, pair.entity2) >= threshold_; }

    static EntityPairText single_pair(std::string_view prompt) {
        constexpr std::string_view input = "## Input: ";
        const auto begin = prompt.find(input);
        if (begin == std::string_view::npos) return {};
        const auto start = begin + input.size();
        const auto end = prompt.find(std::string("\n") + std::string(prompts::kSingleContextLabel), start);
        return split_pair_query(prompt.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start));
    }

    static std::vector<EntityPairText> batch_pairs(std::string_view prompt) {
        std::vector<EntityPairText> out;
        const auto header = prompt.find(prompts::kBatchHeader);
        if (header == std::string_view::npos) return out;
        auto section_end = prompt.find(std::string("\n") + std::string(prompts::kBatchContextLabel), header);
        if (section_end == std::string_view::npos) section_end = prompt.size();
        std::string_view section = prompt.substr(header, section_end - header);

        std::size_t pos = section.find("[Pair 1 - ");
        if (pos == std::string_view::npos) return out;
        pos += std::string_view("[Pair 1 - ").size();
        for (std::size_t k = 2;; ++k) {
            const std::string next_marker = "\nPair " + std::to_string(k) + " - ";
            const auto next = section.find(next_marker, pos);
            std::string_view body = section.substr(pos, next == std::string_view::npos ? std::string_view::npos : next - pos);
            if (next == std::string_view::npos && !body.empty() && body.back() == ']') body.remove_suffix(1);
            out.push_back(split_pair_query(body));
            if (next == std::string_view::npos) break;
            pos = next + next_marker.size();
        }
        return out;
    }

private:
    double threshold_;
};

/// One per-query generation call.
inline MatchDecision decide_single(const CompletionBackend& backend, const PairKey& key, std::string_view pair_query,
                                   std::span<const std::string> context, const Decoding& decoding) {
    const std::string output = backend.complete(build_prompt_single(pair_query, context), decoding);
    MatchDecision d = parse_single(output);
    d.key = key;
    return d;
}

/// One batch generation call over a block, with per-pair re-asking bounded to
/// a single round when the answer does not map onto the pairs.
/// `reask_context(i)` gives the context used when pair i is re-asked.
inline BatchResult decide_batch(const CompletionBackend& backend, std::span<const PairKey> keys,
                                std::span<const std::string> pair_queries, std::span<const std::string> shared_context,
                                const Decoding& decoding,
                                const std::function<std::vector<std::string>(std::size_t)>& reask_context = {}) {
    const std::string output = backend.complete(build_prompt_batch(pair_queries, shared_context), decoding);
    PairReasker reask = [&](std::size_t i) {
        const auto ctx = reask_context ? reask_context(i)
                                       : std::vector<std::string>(shared_context.begin(), shared_context.end());
        return decide_single(backend, keys[i], pair_queries[i], ctx, decoding);
    };
    return parse_batch(output, keys, reask);
}

}  // namespace blockrag
