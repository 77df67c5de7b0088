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

#include <compare>
#include <cstddef>
#include <functional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "blockrag/error.hpp"

namespace blockrag {

enum class Side { source, target };

inline std::string_view to_string(Side side) noexcept {
    return side == Side::source ? "source" : "target";
}

struct Attribute {
    std::string name;
    std::string value;

    friend bool operator==(const Attribute&, const Attribute&) = default;
};

/// One row of the source or target table. Immutable after construction.
class Record {
public:
    Record(std::string id, Side side, std::vector<Attribute> attributes)
        : id_(std::move(id)), side_(side), attributes_(std::move(attributes)) {
        if (id_.empty()) throw UsageError("record id must be non-empty");
        std::unordered_set<std::string_view> names;
        for (const auto& attribute : attributes_) {
            if (!names.insert(attribute.name).second) {
                throw UsageError("record '" + id_ + "' has duplicate attribute '" + attribute.name + "'");
            }
        }
    }

    const std::string& id() const noexcept { return id_; }
    Side side() const noexcept { return side_; }
    const std::vector<Attribute>& attributes() const noexcept { return attributes_; }

    friend bool operator==(const Record&, const Record&) = default;

private:
    std::string id_;
    Side side_;
    std::vector<Attribute> attributes_;
};

struct LabeledPair {
    std::string source_id;
    std::string target_id;
    int label = 0;

    friend bool operator==(const LabeledPair&, const LabeledPair&) = default;
};

/// Side-ordered pair identity: (source_id, target_id). Never symmetric.
struct PairKey {
    std::string source_id;
    std::string target_id;

    friend auto operator<=>(const PairKey&, const PairKey&) = default;
    friend bool operator==(const PairKey&, const PairKey&) = default;
};

struct PairKeyHash {
    std::size_t operator()(const PairKey& key) const noexcept {
        const std::size_t a = std::hash<std::string>{}(key.source_id);
        const std::size_t b = std::hash<std::string>{}(key.target_id);
        return a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    }
};

struct CandidatePair {
    std::string source_id;
    std::string target_id;
    std::size_t origin_block = 0;

    friend bool operator==(const CandidatePair&, const CandidatePair&) = default;
};

/// The dedup identity of a pair; ignores the block it came from.
inline PairKey pair_key(const CandidatePair& pair) {
    return PairKey{pair.source_id, pair.target_id};
}

enum class Decision { yes, no };
enum class Provenance { parsed, fallback_default };

inline std::string_view to_string(Decision d) noexcept { return d == Decision::yes ? "yes" : "no"; }
inline std::string_view to_string(Provenance p) noexcept {
    return p == Provenance::parsed ? "parsed" : "fallback_default";
}

struct MatchDecision {
    PairKey key;
    Decision decision = Decision::no;
    Provenance provenance = Provenance::fallback_default;
    std::string raw_text;
};

/// Source table, target table and labeled pairs. Construction validates that
/// ids are unique per side and that every labeled pair resolves.
class Dataset {
public:
    Dataset() = default;

    Dataset(std::vector<Record> source_table, std::vector<Record> target_table,
            std::vector<LabeledPair> labeled_pairs)
        : source_(std::move(source_table)), target_(std::move(target_table)), labeled_(std::move(labeled_pairs)) {
        index_side(source_, Side::source, source_index_);
        index_side(target_, Side::target, target_index_);
        for (const auto& pair : labeled_) {
            if (pair.label != 0 && pair.label != 1) {
                throw UsageError("label must be 0 or 1 for pair (" + pair.source_id + ", " + pair.target_id + ")");
            }
            record(Side::source, pair.source_id);
            record(Side::target, pair.target_id);
        }
    }

    const std::vector<Record>& source_table() const noexcept { return source_; }
    const std::vector<Record>& target_table() const noexcept { return target_; }
    const std::vector<LabeledPair>& labeled_pairs() const noexcept { return labeled_; }

    const Record* find(Side side, std::string_view id) const {
        const auto& index = side == Side::source ? source_index_ : target_index_;
        const auto& table = side == Side::source ? source_ : target_;
        const auto it = index.find(std::string(id));
        return it == index.end() ? nullptr : &table[it->second];
    }

    const Record& record(Side side, std::string_view id) const {
        if (const Record* r = find(side, id)) return *r;
        throw LookupError("unknown " + std::string(to_string(side)) + " record id '" + std::string(id) + "'");
    }

    std::size_t positives() const noexcept {
        std::size_t n = 0;
        for (const auto& pair : labeled_) n += pair.label == 1 ? 1 : 0;
        return n;
    }
    std::size_t negatives() const noexcept { return labeled_.size() - positives(); }

private:
    static void index_side(const std::vector<Record>& table, Side side,
                           std::unordered_map<std::string, std::size_t>& index) {
        for (std::size_t i = 0; i < table.size(); ++i) {
            if (table[i].side() != side) {
                throw UsageError("record '" + table[i].id() + "' is placed in the " + std::string(to_string(side)) +
                                 " table but tagged " + std::string(to_string(table[i].side())));
            }
            if (!index.emplace(table[i].id(), i).second) {
                throw UsageError("duplicate " + std::string(to_string(side)) + " record id '" + table[i].id() + "'");
            }
        }
    }

    std::vector<Record> source_;
    std::vector<Record> target_;
    std::vector<LabeledPair> labeled_;
    std::unordered_map<std::string, std::size_t> source_index_;
    std::unordered_map<std::string, std::size_t> target_index_;
};

/// `name1: value1; name2: value2`. Values are not escaped, so a `;` inside a
/// value is indistinguishable from a separator.
inline std::string serialize_record(const Record& record) {
    std::string out;
    bool first = true;
    for (const auto& attribute : record.attributes()) {
        if (!first) out += "; ";
        first = false;
        out += attribute.name;
        out += ':';
        if (!attribute.value.empty()) {
            out += ' ';
            out += attribute.value;
        }
    }
    return out;
}

inline std::string serialize_pair_query(const Record& source, const Record& target) {
    return "Entity 1: " + serialize_record(source) + " Entity 2: " + serialize_record(target);
}

inline std::string serialize_pair_query(const CandidatePair& pair, const Dataset& dataset) {
    return serialize_pair_query(dataset.record(Side::source, pair.source_id),
                                dataset.record(Side::target, pair.target_id));
}

}  // namespace blockrag
