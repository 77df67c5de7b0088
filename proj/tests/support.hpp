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
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "blockrag/datamodel.hpp"

namespace blockrag::testkit {

inline std::filesystem::path source_dir() { return BLOCKRAG_SOURCE_DIR; }
inline std::filesystem::path sample_dir() { return source_dir() / "data" / "sample"; }

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(std::string_view tag) {
        static std::mt19937_64 rng(std::random_device{}());
        path_ = std::filesystem::temp_directory_path() /
                ("blockrag-" + std::string(tag) + "-" + std::to_string(rng()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const noexcept { return path_; }
    std::filesystem::path operator/(std::string_view name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline void write_file(const std::filesystem::path& path, std::string_view content) {
    std::ofstream out(path, std::ios::binary);
    out << content;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Word drawn from a small alphabet so that keys collide often.
inline std::string random_word(std::mt19937_64& rng, std::size_t min_len = 2, std::size_t max_len = 7,
                               std::string_view alphabet = "abcde") {
    std::uniform_int_distribution<std::size_t> len(min_len, max_len);
    std::uniform_int_distribution<std::size_t> pick(0, alphabet.size() - 1);
    std::string w(len(rng), 'a');
    for (auto& c : w) c = alphabet[pick(rng)];
    return w;
}

inline std::string random_phrase(std::mt19937_64& rng, std::size_t max_words = 3, std::string_view alphabet = "abcde") {
    std::uniform_int_distribution<std::size_t> words(1, max_words);
    std::string out;
    for (std::size_t i = 0, n = words(rng); i < n; ++i) {
        if (i > 0) out += ' ';
        out += random_word(rng, 2, 7, alphabet);
    }
    return out;
}

/// Random two-sided record set with ids s<i> and t<i>.
inline std::vector<Record> random_records(std::mt19937_64& rng, std::size_t n_source, std::size_t n_target,
                                          std::string_view alphabet = "abcde") {
    std::vector<Record> out;
    for (std::size_t i = 0; i < n_source; ++i) {
        out.emplace_back("s" + std::to_string(i), Side::source,
                         std::vector<Attribute>{{"name", random_phrase(rng, 3, alphabet)}});
    }
    for (std::size_t i = 0; i < n_target; ++i) {
        out.emplace_back("t" + std::to_string(i), Side::target,
                         std::vector<Attribute>{{"name", random_phrase(rng, 3, alphabet)}});
    }
    return out;
}

inline Dataset random_dataset(std::mt19937_64& rng, std::size_t n_source, std::size_t n_target,
                              std::size_t n_labeled, std::string_view alphabet = "abcdefgh") {
    auto records = random_records(rng, n_source, n_target, alphabet);
    std::vector<Record> source(records.begin(), records.begin() + static_cast<std::ptrdiff_t>(n_source));
    std::vector<Record> target(records.begin() + static_cast<std::ptrdiff_t>(n_source), records.end());
    std::uniform_int_distribution<std::size_t> ps(0, n_source - 1), pt(0, n_target - 1);
    std::bernoulli_distribution coin(0.5);
    std::vector<LabeledPair> labeled;
    std::vector<std::pair<std::size_t, std::size_t>> used;
    while (labeled.size() < n_labeled) {
        const auto s = ps(rng), t = pt(rng);
        if (std::find(used.begin(), used.end(), std::pair{s, t}) != used.end()) continue;
        used.emplace_back(s, t);
        labeled.push_back(LabeledPair{"s" + std::to_string(s), "t" + std::to_string(t), coin(rng) ? 1 : 0});
    }
    return Dataset(std::move(source), std::move(target), std::move(labeled));
}

}  // namespace blockrag::testkit
