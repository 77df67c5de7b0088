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

// blockrag command-line driver: index-kg, block, run, sweep, eval.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "blockrag/pipeline.hpp"

namespace {

using namespace blockrag;

struct Common {
    std::string config_path;
    std::vector<std::string> overrides;
};

void add_common(CLI::App& cmd, Common& common) {
    cmd.add_option("--config", common.config_path, "key = value configuration file");
    cmd.add_option("--set", common.overrides, "override a setting, key=value (repeatable)");
}

RunConfig resolve(const Common& common) {
    RunConfig config = common.config_path.empty() ? RunConfig{} : load_config(common.config_path);
    for (const auto& kv : common.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        set_config_value(config, kv.substr(0, eq), kv.substr(eq + 1));
    }
    return config;
}

void print_summary(const RunConfig& config, const RunMetrics& m) {
    std::printf("%s %s: P=%.4f R=%.4f F1=%.4f rac=%zu pairs=%zu blocks=%zu llm_calls=%zu seconds=%.3f\n",
                config.effective_dataset_name().c_str(), std::string(to_string(config.variant)).c_str(),
                m.scores.precision, m.scores.recall, m.scores.f1, m.rac_count, m.pair_count, m.block_count,
                m.llm_calls, m.wall_seconds);
}

int cmd_index_kg(const Common& common, const std::string& out_path) {
    const RunConfig config = resolve(common);
    if (config.kg_catalog.empty()) throw ConfigError("'kg.catalog' is required for index-kg");
    Resources resources;
    const auto catalog = load_catalog(config.kg_catalog);
    const VectorIndex index = build_index(catalog, resources.embedder(config));
    const std::string target = out_path.empty() ? (config.kg_index.empty() ? "kg.index.jsonl" : config.kg_index)
                                                : out_path;
    index.save(target);
    std::printf("indexed %zu items (dimension %zu) -> %s\n", index.size(), index.dimension(), target.c_str());
    return 0;
}

int cmd_block(const Common& common, const std::string& out_path) {
    const RunConfig config = resolve(common);
    if (config.dataset.empty()) throw ConfigError("'dataset' is required");
    config.blocking.validate();
    const Dataset dataset = load_dataset(config.dataset, config.label_files);
    CandidateBlocks cb;
    if (config.pair_universe == PairUniverse::labeled) {
        std::unordered_set<PairKey, PairKeyHash> labeled;
        for (const auto& p : dataset.labeled_pairs()) labeled.insert(PairKey{p.source_id, p.target_id});
        cb = make_candidate_blocks(dataset, config.blocking,
                                   [&](const CandidatePair& p) { return labeled.contains(pair_key(p)); });
    } else {
        cb = make_candidate_blocks(dataset, config.blocking);
    }

    std::ofstream file;
    if (!out_path.empty()) {
        file.open(out_path);
        if (!file) throw LoadError(out_path + ": cannot write");
    }
    std::ostream& out = out_path.empty() ? std::cout : file;
    for (const auto& block : cb.blocks) {
        nlohmann::json pairs = nlohmann::json::array();
        for (const auto& p : block.pairs) pairs.push_back({p.source_id, p.target_id});
        out << nlohmann::json{{"ordinal", block.ordinal},
                              {"parent", block.parent_ordinal},
                              {"key", block.key},
                              {"pairs", pairs}}
                   .dump()
            << '\n';
    }
    std::fprintf(stderr, "%zu blocks, %zu pairs, rac=%zu\n", cb.blocks.size(), pair_count(cb.blocks),
                 cb.blocks.size());
    return 0;
}

int cmd_run(const Common& common) {
    const RunConfig config = resolve(common);
    validate(config);
    Resources resources;
    const auto output = run(config, resources);
    write_outputs(config, output);
    print_summary(config, output.metrics);
    return 0;
}

int cmd_sweep(const Common& common, const std::vector<std::string>& grid_args) {
    const RunConfig config = resolve(common);
    std::vector<GridAxis> grid;
    for (const auto& arg : grid_args) grid.push_back(parse_grid_axis(arg));
    Resources resources;
    const auto points = sweep(config, grid, resources);
    std::size_t failed = 0;
    for (const auto& point : points) {
        std::string label;
        for (const auto& [k, v] : point.settings) label += k + "=" + v + " ";
        if (point.metrics) {
            std::printf("%sF1=%.4f rac=%zu\n", label.c_str(), point.metrics->scores.f1, point.metrics->rac_count);
        } else {
            ++failed;
            std::printf("%sFAILED: %s\n", label.c_str(), point.error.c_str());
        }
    }
    std::printf("%zu points, %zu failed, csv: %s\n", points.size(), failed, csv_path(config).string().c_str());
    return failed == points.size() ? 1 : 0;
}

int cmd_eval(const Common& common, const std::string& dataset_dir, const std::string& decisions_path) {
    RunConfig config = resolve(common);
    if (!dataset_dir.empty()) config.dataset = dataset_dir;
    if (config.dataset.empty()) throw ConfigError("'dataset' is required");
    const Dataset dataset = load_dataset(config.dataset, config.label_files);
    const auto decisions = read_decisions(decisions_path);
    const auto counts = confusion(decisions, dataset.labeled_pairs());
    const auto scores = prf1(counts);
    const nlohmann::json j = {{"tp", counts.tp},        {"fp", counts.fp},         {"fn", counts.fn},
                              {"tn", counts.tn},        {"precision", scores.precision},
                              {"recall", scores.recall}, {"f1", scores.f1}};
    std::cout << j.dump(2) << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Blocking-based retrieval-augmented entity matching"};
    app.require_subcommand(1);

    Common common;
    std::string out_path;
    std::vector<std::string> grid;
    std::string dataset_dir, decisions_path;

    auto* index_kg = app.add_subcommand("index-kg", "embed the KG catalog into a vector index file");
    add_common(*index_kg, common);
    index_kg->add_option("--out", out_path, "index file (defaults to kg.index)");

    auto* block = app.add_subcommand("block", "emit candidate (sub-)blocks as JSON Lines");
    add_common(*block, common);
    block->add_option("--out", out_path, "output file (defaults to stdout)");

    auto* run_cmd = app.add_subcommand("run", "run one variant end to end and write reports");
    add_common(*run_cmd, common);

    auto* sweep_cmd = app.add_subcommand("sweep", "run every point of a parameter grid");
    add_common(*sweep_cmd, common);
    sweep_cmd->add_option("--grid", grid, "axis as key=v1,v2,... (repeatable)")->required();

    auto* eval = app.add_subcommand("eval", "score a decisions file against labeled pairs");
    add_common(*eval, common);
    eval->add_option("--dataset", dataset_dir, "dataset directory");
    eval->add_option("--decisions", decisions_path, "decisions.jsonl")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*index_kg) return cmd_index_kg(common, out_path);
        if (*block) return cmd_block(common, out_path);
        if (*run_cmd) return cmd_run(common);
        if (*sweep_cmd) return cmd_sweep(common, grid);
        if (*eval) return cmd_eval(common, dataset_dir, decisions_path);
    } catch (const ConfigError& ex) {
        std::fprintf(stderr, "config error: %s\n", ex.what());
        return 2;
    } catch (const LoadError& ex) {
        std::fprintf(stderr, "load error: %s\n", ex.what());
        return 2;
    } catch (const std::exception& ex) {
        std::fprintf(stderr, "error: %s\n", ex.what());
        return 1;
    }
    return 1;
}
