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

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "json.hpp"

#include "blockrag/csv.hpp"
#include "blockrag/datamodel.hpp"
#include "blockrag/error.hpp"
#include "blockrag/text.hpp"

namespace blockrag {

struct Confusion {
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;
    std::size_t tn = 0;

    std::size_t total() const noexcept { return tp + fp + fn + tn; }
    friend bool operator==(const Confusion&, const Confusion&) = default;
};

/// Confusion counts over the labeled pairs. A labeled pair without a decision
/// (pruned by blocking) counts as predicted `no`; decisions for unlabeled
/// pairs are ignored.
inline Confusion confusion(std::span<const MatchDecision> decisions, std::span<const LabeledPair> labeled) {
    std::unordered_map<PairKey, Decision, PairKeyHash> by_key;
    by_key.reserve(decisions.size());
    for (const auto& d : decisions) {
        if (!by_key.emplace(d.key, d.decision).second) {
            throw IntegrityError("duplicate decision for pair (" + d.key.source_id + ", " + d.key.target_id + ")");
        }
    }
    Confusion c;
    for (const auto& pair : labeled) {
        const auto it = by_key.find(PairKey{pair.source_id, pair.target_id});
        const bool predicted = it != by_key.end() && it->second == Decision::yes;
        if (pair.label == 1) {
            (predicted ? c.tp : c.fn) += 1;
        } else {
            (predicted ? c.fp : c.tn) += 1;
        }
    }
    return c;
}

struct Scores {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

/// Zero denominators yield 0 for the affected score.
inline Scores prf1(const Confusion& c) {
    Scores s;
    if (c.tp + c.fp > 0) s.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    if (c.tp + c.fn > 0) s.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    if (s.precision + s.recall > 0) s.f1 = 2.0 * s.precision * s.recall / (s.precision + s.recall);
    return s;
}

/// Block-level time attributed uniformly to each of the block's pairs.
inline double amortize(double block_seconds, std::size_t pairs_in_block) {
    if (pairs_in_block == 0) throw UsageError("cannot amortize over a block with zero pairs");
    return block_seconds / static_cast<double>(pairs_in_block);
}

struct StageSeconds {
    double blocking = 0.0;
    double retrieval = 0.0;
    double expansion = 0.0;
    double enrichment = 0.0;
    double generation = 0.0;

    double total() const noexcept { return blocking + retrieval + expansion + enrichment + generation; }
};

struct ParseCounters {
    std::size_t single_parsed = 0;
    std::size_t single_fallback = 0;
    std::size_t batch_clean = 0;
    std::size_t batch_recovered = 0;
    std::size_t batch_defaulted = 0;
};

struct RunMetrics {
    Confusion counts;
    Scores scores;
    std::size_t rac_count = 0;
    StageSeconds stage_seconds;
    StageSeconds per_pair_seconds;  // mean amortized time per pair
    double wall_seconds = 0.0;
    ParseCounters parse;
    std::size_t pair_count = 0;
    std::size_t block_count = 0;
    std::size_t labeled_pairs = 0;
    std::size_t llm_calls = 0;
    std::size_t embed_calls = 0;
    std::size_t topk_calls = 0;
    std::size_t kg_calls = 0;
    std::size_t kg_visited_nodes = 0;
    std::size_t skipped_seeds = 0;
    std::size_t enrichment_misses = 0;
    std::size_t truncated_queries = 0;
    std::size_t failed_retrievals = 0;
    std::size_t prompt_chars = 0;
};

inline nlohmann::json to_json(const StageSeconds& s) {
    return {{"blocking", s.blocking},     {"retrieval", s.retrieval}, {"expansion", s.expansion},
            {"enrichment", s.enrichment}, {"generation", s.generation}, {"total", s.total()}};
}

inline nlohmann::json to_json(const RunMetrics& m) {
    return {
        {"confusion", {{"tp", m.counts.tp}, {"fp", m.counts.fp}, {"fn", m.counts.fn}, {"tn", m.counts.tn}}},
        {"precision", m.scores.precision},
        {"recall", m.scores.recall},
        {"f1", m.scores.f1},
        {"rac_count", m.rac_count},
        {"stage_seconds", to_json(m.stage_seconds)},
        {"per_pair_seconds", to_json(m.per_pair_seconds)},
        {"wall_seconds", m.wall_seconds},
        {"parse",
         {{"single_parsed", m.parse.single_parsed},
          {"single_fallback", m.parse.single_fallback},
          {"batch_clean", m.parse.batch_clean},
          {"batch_recovered", m.parse.batch_recovered},
          {"batch_defaulted", m.parse.batch_defaulted}}},
        {"pairs", m.pair_count},
        {"blocks", m.block_count},
        {"labeled_pairs", m.labeled_pairs},
        {"calls",
         {{"llm", m.llm_calls}, {"embed", m.embed_calls}, {"topk", m.topk_calls}, {"kg_search", m.kg_calls}}},
        {"kg_visited_nodes", m.kg_visited_nodes},
        {"skipped_seeds", m.skipped_seeds},
        {"enrichment_misses", m.enrichment_misses},
        {"truncated_queries", m.truncated_queries},
        {"failed_retrievals", m.failed_retrievals},
        {"prompt_chars", m.prompt_chars},
    };
}

// ---------------------------------------------------------------------------
// Dataset loading (tableA.csv / tableB.csv / labeled split files)
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<Record> load_table(const std::filesystem::path& path, Side side) {
    const auto rows = csv::read_file(path);
    if (rows.empty()) throw LoadError(path.string() + ": missing header row");
    const auto& header = rows.front().fields;
    const bool has_id = !header.empty() && text::to_lower(text::trim(header.front())) == "id";
    const std::size_t first_attr = has_id ? 1 : 0;

    std::vector<Record> records;
    records.reserve(rows.size() - 1);
    std::unordered_set<std::string> ids;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        const auto& row = rows[r];
        if (row.fields.size() != header.size()) {
            throw LoadError(path.string() + ":" + std::to_string(row.line) + ": expected " +
                            std::to_string(header.size()) + " columns, found " + std::to_string(row.fields.size()));
        }
        std::string id = has_id ? std::string(text::trim(row.fields.front()))
                                : std::string(to_string(side)) + "-" + std::to_string(r - 1);
        if (id.empty()) throw LoadError(path.string() + ":" + std::to_string(row.line) + ": empty id");
        if (!ids.insert(id).second) {
            throw LoadError(path.string() + ":" + std::to_string(row.line) + ": duplicate id '" + id + "'");
        }
        std::vector<Attribute> attributes;
        for (std::size_t c = first_attr; c < header.size(); ++c) {
            attributes.push_back(Attribute{std::string(text::trim(header[c])), std::string(text::trim(row.fields[c]))});
        }
        try {
            records.emplace_back(std::move(id), side, std::move(attributes));
        } catch (const Error& ex) {
            throw LoadError(path.string() + ":" + std::to_string(row.line) + ": " + ex.what());
        }
    }
    return records;
}

}  // namespace detail

/// Loads a Magellan-style dataset directory: `tableA.csv` (source),
/// `tableB.csv` (target) and one or more labeled split files with columns
/// `ltable_id,rtable_id,label`. Split files that do not exist are skipped as
/// long as at least one is found.
inline Dataset load_dataset(const std::filesystem::path& dir,
                            const std::vector<std::string>& label_files = {"test.csv"}) {
    auto source = detail::load_table(dir / "tableA.csv", Side::source);
    auto target = detail::load_table(dir / "tableB.csv", Side::target);

    std::unordered_set<std::string> source_ids, target_ids;
    for (const auto& r : source) source_ids.insert(r.id());
    for (const auto& r : target) target_ids.insert(r.id());

    std::vector<LabeledPair> labeled;
    std::size_t files_found = 0;
    for (const auto& name : label_files) {
        const auto path = dir / name;
        if (!std::filesystem::exists(path)) continue;
        ++files_found;
        const auto rows = csv::read_file(path);
        if (rows.empty()) throw LoadError(path.string() + ": missing header row");
        const auto& header = rows.front().fields;
        auto column = [&](std::string_view name) {
            for (std::size_t i = 0; i < header.size(); ++i) {
                if (text::to_lower(text::trim(header[i])) == name) return i;
            }
            throw LoadError(path.string() + ":" + std::to_string(rows.front().line) + ": missing column '" +
                            std::string(name) + "'");
        };
        const std::size_t lcol = column("ltable_id");
        const std::size_t rcol = column("rtable_id");
        const std::size_t ycol = column("label");

        for (std::size_t r = 1; r < rows.size(); ++r) {
            const auto& row = rows[r];
            const auto where = path.string() + ":" + std::to_string(row.line);
            if (row.fields.size() != header.size()) throw LoadError(where + ": wrong number of columns");
            std::string lid(text::trim(row.fields[lcol]));
            std::string rid(text::trim(row.fields[rcol]));
            const auto label_text = text::trim(row.fields[ycol]);
            // Tables without an id column use "<side>-<row>"; bare row numbers map onto them.
            if (!source_ids.contains(lid) && source_ids.contains("source-" + lid)) lid = "source-" + lid;
            if (!target_ids.contains(rid) && target_ids.contains("target-" + rid)) rid = "target-" + rid;
            if (!source_ids.contains(lid)) throw LoadError(where + ": dangling ltable_id '" + lid + "'");
            if (!target_ids.contains(rid)) throw LoadError(where + ": dangling rtable_id '" + rid + "'");
            if (label_text != "0" && label_text != "1") {
                throw LoadError(where + ": label must be 0 or 1, found '" + std::string(label_text) + "'");
            }
            labeled.push_back(LabeledPair{std::move(lid), std::move(rid), label_text == "1" ? 1 : 0});
        }
    }
    if (files_found == 0) throw LoadError((dir / label_files.front()).string() + ": cannot open file");
    return Dataset(std::move(source), std::move(target), std::move(labeled));
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline constexpr std::string_view kCsvHeader =
    "dataset,variant,blocking,max_bs,top_k,granularity,traversal,precision,recall,f1,rac,seconds_total,"
    "seconds_retrieval,seconds_expansion,seconds_enrichment,seconds_generation";

/// Identifies a run in the cross-run CSV table.
struct ReportKey {
    std::string dataset;
    std::string variant;
    std::string blocking;
    std::size_t max_bs = 0;
    std::size_t top_k = 0;
    std::string granularity;
    std::string traversal;
};

struct ReportContext {
    ReportKey key;
    nlohmann::json config;  // full configuration echo
    std::uint64_t seed = 0;
    std::string generated_at;  // timestamp; excluded from determinism checks
};

inline nlohmann::json make_report(const RunMetrics& metrics, const ReportContext& context) {
    return {{"schema", "blockrag.report/1"},
            {"metrics", to_json(metrics)},
            {"config", context.config},
            {"seed", context.seed},
            {"generated_at", context.generated_at}};
}

inline std::string csv_row(const RunMetrics& m, const ReportKey& key) {
    auto num = [](double x) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.6f", x);
        return std::string(buf);
    };
    std::string row;
    row += csv::escape(key.dataset) + "," + csv::escape(key.variant) + "," + csv::escape(key.blocking) + ",";
    row += std::to_string(key.max_bs) + "," + std::to_string(key.top_k) + ",";
    row += csv::escape(key.granularity) + "," + csv::escape(key.traversal) + ",";
    row += num(m.scores.precision) + "," + num(m.scores.recall) + "," + num(m.scores.f1) + ",";
    row += std::to_string(m.rac_count) + ",";
    row += num(m.stage_seconds.total()) + "," + num(m.stage_seconds.retrieval) + "," + num(m.stage_seconds.expansion) +
           "," + num(m.stage_seconds.enrichment) + "," + num(m.stage_seconds.generation);
    return row;
}

/// Appends one row, writing the header first when the file is new or empty.
inline void append_csv_row(const std::filesystem::path& path, const RunMetrics& metrics, const ReportKey& key) {
    const bool needs_header = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    std::ofstream out(path, std::ios::app);
    if (!out) throw Error(path.string() + ": cannot open CSV for appending");
    if (needs_header) out << kCsvHeader << '\n';
    out << csv_row(metrics, key) << '\n';
    if (!out) throw Error(path.string() + ": write failed");
}

/// Writes `report.json` into `dir` and appends the CSV row to `csv_path`.
inline void emit_report(const RunMetrics& metrics, const ReportContext& context, const std::filesystem::path& json_path,
                        const std::filesystem::path& csv_path) {
    if (json_path.has_parent_path()) std::filesystem::create_directories(json_path.parent_path());
    std::ofstream out(json_path);
    if (!out) throw Error(json_path.string() + ": cannot write report");
    out << make_report(metrics, context).dump(2) << '\n';
    if (!out) throw Error(json_path.string() + ": write failed");
    if (!csv_path.empty()) {
        if (csv_path.has_parent_path()) std::filesystem::create_directories(csv_path.parent_path());
        append_csv_row(csv_path, metrics, context.key);
    }
}

/// Decisions file: one JSON object per line
/// {source_id, target_id, decision, provenance, block}.
inline void write_decisions(const std::filesystem::path& path, std::span<const MatchDecision> decisions,
                            std::span<const std::size_t> blocks) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error(path.string() + ": cannot write decisions");
    for (std::size_t i = 0; i < decisions.size(); ++i) {
        const auto& d = decisions[i];
        out << nlohmann::json{{"source_id", d.key.source_id},
                              {"target_id", d.key.target_id},
                              {"decision", to_string(d.decision)},
                              {"provenance", to_string(d.provenance)},
                              {"block", i < blocks.size() ? blocks[i] : 0}}
                   .dump()
            << '\n';
    }
}

inline std::vector<MatchDecision> read_decisions(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError(path.string() + ": cannot open decisions file");
    std::vector<MatchDecision> out;
    std::string line;
    for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
        if (text::trim(line).empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            MatchDecision d;
            d.key = PairKey{j.at("source_id").get<std::string>(), j.at("target_id").get<std::string>()};
            const auto decision = j.at("decision").get<std::string>();
            if (decision != "yes" && decision != "no") throw LoadError("decision must be yes or no");
            d.decision = decision == "yes" ? Decision::yes : Decision::no;
            d.provenance = j.value("provenance", std::string("parsed")) == "fallback_default"
                               ? Provenance::fallback_default
                               : Provenance::parsed;
            out.push_back(std::move(d));
        } catch (const std::exception& ex) {
            throw LoadError(path.string() + ":" + std::to_string(line_no) + ": " + ex.what());
        }
    }
    return out;
}

}  // namespace blockrag
