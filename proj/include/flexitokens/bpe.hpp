#pragma once

// Minimal byte-level BPE comparator. Greedy pair merges over raw bytes;
// symbol ids 0..255 are bytes, merge i creates id 256+i. Ties in pair counts
// go to the pair seen first; replacement is left-to-right.

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "flexitokens/common.hpp"
#include "json.hpp"

namespace ftok {

struct BpeModel {
    std::vector<std::pair<std::uint32_t, std::uint32_t>> merges;
    int vocab_size = 256;
};

namespace detail {

struct PairHash {
    std::size_t operator()(const std::pair<std::uint32_t, std::uint32_t>& p) const {
        return std::hash<std::uint64_t>()((static_cast<std::uint64_t>(p.first) << 32) | p.second);
    }
};

inline std::vector<std::uint32_t> apply_merge(const std::vector<std::uint32_t>& seq,
                                              std::pair<std::uint32_t, std::uint32_t> pair,
                                              std::uint32_t new_id) {
    std::vector<std::uint32_t> out;
    out.reserve(seq.size());
    std::size_t i = 0;
    while (i < seq.size()) {
        if (i + 1 < seq.size() && seq[i] == pair.first && seq[i + 1] == pair.second) {
            out.push_back(new_id);
            i += 2;
        } else {
            out.push_back(seq[i]);
            ++i;
        }
    }
    return out;
}

}  // namespace detail

inline BpeModel bpe_train(const std::vector<std::string>& docs, int vocab_size) {
    if (vocab_size <= 256) throw ConfigError("bpe_train: vocab_size must exceed 256");
    std::vector<std::vector<std::uint32_t>> seqs;
    seqs.reserve(docs.size());
    for (const auto& d : docs) {
        std::vector<std::uint32_t> s;
        s.reserve(d.size());
        for (unsigned char c : d) s.push_back(c);
        seqs.push_back(std::move(s));
    }
    BpeModel model;
    model.vocab_size = vocab_size;
    int n_merges = vocab_size - 256;
    for (int m = 0; m < n_merges; ++m) {
        // count all adjacent pairs (overlaps counted as scanned)
        std::unordered_map<std::pair<std::uint32_t, std::uint32_t>, std::uint64_t, detail::PairHash>
            counts;
        std::vector<std::pair<std::uint32_t, std::uint32_t>> first_seen;
        for (const auto& s : seqs) {
            for (std::size_t i = 0; i + 1 < s.size(); ++i) {
                auto p = std::make_pair(s[i], s[i + 1]);
                auto [it, inserted] = counts.emplace(p, 0);
                if (inserted) first_seen.push_back(p);
                ++it->second;
            }
        }
        if (counts.empty()) break;
        std::pair<std::uint32_t, std::uint32_t> best{0, 0};
        std::uint64_t best_count = 0;
        for (const auto& p : first_seen) {  // first-seen order breaks ties
            std::uint64_t c = counts[p];
            if (c > best_count) {
                best_count = c;
                best = p;
            }
        }
        if (best_count < 2) break;  // nothing worth merging
        std::uint32_t new_id = 256 + static_cast<std::uint32_t>(model.merges.size());
        model.merges.push_back(best);
        for (auto& s : seqs) s = detail::apply_merge(s, best, new_id);
    }
    return model;
}

inline std::vector<std::uint32_t> bpe_encode(const BpeModel& model, const std::string& text) {
    std::vector<std::uint32_t> seq;
    seq.reserve(text.size());
    for (unsigned char c : text) seq.push_back(c);
    for (std::size_t m = 0; m < model.merges.size(); ++m)
        seq = detail::apply_merge(seq, model.merges[m], 256 + static_cast<std::uint32_t>(m));
    return seq;
}

// expand a token id back to its byte string
inline std::string bpe_token_bytes(const BpeModel& model, std::uint32_t id) {
    if (id < 256) return std::string(1, static_cast<char>(static_cast<unsigned char>(id)));
    std::uint32_t idx = id - 256;
    if (idx >= model.merges.size()) throw DataError("bpe: token id out of range");
    return bpe_token_bytes(model, model.merges[idx].first) +
           bpe_token_bytes(model, model.merges[idx].second);
}

inline std::string bpe_decode(const BpeModel& model, const std::vector<std::uint32_t>& tokens) {
    std::string out;
    for (auto id : tokens) out += bpe_token_bytes(model, id);
    return out;
}

inline void save_bpe(const BpeModel& model, const std::string& path) {
    nlohmann::json merges = nlohmann::json::array();
    for (const auto& [a, b] : model.merges) merges.push_back({a, b});
    nlohmann::json j{{"vocab_size", model.vocab_size}, {"merges", merges}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write bpe model: " + path);
    out << j.dump() << "\n";
}

inline BpeModel load_bpe(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open bpe model: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw ConfigError("bad bpe model json in " + path + ": " + e.what());
    }
    BpeModel model;
    try {
        model.vocab_size = j.at("vocab_size").get<int>();
        for (const auto& p : j.at("merges"))
            model.merges.emplace_back(p.at(0).get<std::uint32_t>(), p.at(1).get<std::uint32_t>());
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad bpe model: ") + e.what());
    }
    return model;
}

}  // namespace ftok
