#pragma once

// Checkpoints: one binary tensor archive (name + shape + raw little-endian
// doubles, bit-exact round trip) plus a JSON sidecar carrying the model
// config, rate table, step and seed.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "flexitokens/calibration.hpp"
#include "flexitokens/common.hpp"
#include "flexitokens/hourglass.hpp"
#include "json.hpp"

namespace ftok {

static_assert(std::endian::native == std::endian::little,
              "tensor archive assumes a little-endian host");

constexpr char kArchiveMagic[8] = {'F', 'T', 'O', 'K', 'C', 'K', 'P', '1'};

inline void write_tensor_archive(const std::string& path,
                                 const std::vector<std::pair<std::string, Mat>>& tensors) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write tensor archive: " + path);
    out.write(kArchiveMagic, 8);
    std::uint64_t count = tensors.size();
    out.write(reinterpret_cast<const char*>(&count), 8);
    for (const auto& [name, m] : tensors) {
        std::uint32_t nlen = static_cast<std::uint32_t>(name.size());
        out.write(reinterpret_cast<const char*>(&nlen), 4);
        out.write(name.data(), nlen);
        std::uint64_t rows = static_cast<std::uint64_t>(m.rows());
        std::uint64_t cols = static_cast<std::uint64_t>(m.cols());
        out.write(reinterpret_cast<const char*>(&rows), 8);
        out.write(reinterpret_cast<const char*>(&cols), 8);
        // column-major, the Eigen default; layout is part of the format
        out.write(reinterpret_cast<const char*>(m.data()),
                  static_cast<std::streamsize>(sizeof(double) * m.size()));
    }
    if (!out) throw DataError("short write to tensor archive: " + path);
}

inline std::vector<std::pair<std::string, Mat>> read_tensor_archive(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open tensor archive: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kArchiveMagic, 8) != 0)
        throw DataError("not a tensor archive: " + path);
    std::uint64_t count = 0;
    in.read(reinterpret_cast<char*>(&count), 8);
    std::vector<std::pair<std::string, Mat>> out;
    out.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        std::uint32_t nlen = 0;
        in.read(reinterpret_cast<char*>(&nlen), 4);
        std::string name(nlen, '\0');
        in.read(name.data(), nlen);
        std::uint64_t rows = 0, cols = 0;
        in.read(reinterpret_cast<char*>(&rows), 8);
        in.read(reinterpret_cast<char*>(&cols), 8);
        if (!in) throw DataError("truncated tensor archive: " + path);
        Mat m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        in.read(reinterpret_cast<char*>(m.data()),
                static_cast<std::streamsize>(sizeof(double) * m.size()));
        if (!in) throw DataError("truncated tensor archive: " + path);
        out.emplace_back(std::move(name), std::move(m));
    }
    return out;
}

// -------- config / rate-table JSON --------

inline nlohmann::json hourglass_config_to_json(const HourglassConfig& c) {
    return nlohmann::json{{"n_tok", c.n_tok},     {"n_lm", c.n_lm},     {"n_up", c.n_up},
                          {"d_model", c.d_model}, {"d_ff", c.d_ff},     {"n_heads", c.n_heads},
                          {"vocab", c.vocab},     {"max_len", c.max_len}, {"dropout", c.dropout}};
}

inline HourglassConfig hourglass_config_from_json(const nlohmann::json& j) {
    HourglassConfig c;
    try {
        c.n_tok = j.at("n_tok").get<int>();
        c.n_lm = j.at("n_lm").get<int>();
        c.n_up = j.at("n_up").get<int>();
        c.d_model = j.at("d_model").get<int>();
        c.d_ff = j.at("d_ff").get<int>();
        c.n_heads = j.at("n_heads").get<int>();
        c.vocab = j.value("vocab", kVocabSize);
        c.max_len = j.at("max_len").get<int>();
        c.dropout = j.value("dropout", 0.0);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad model config: ") + e.what());
    }
    c.validate();
    return c;
}

inline nlohmann::json rate_table_to_json(const std::map<std::string, RateSpec>& rates) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [lang, s] : rates)
        j[lang] = {{"alpha", s.alpha}, {"beta", s.beta}, {"sigma", s.sigma}, {"lambda", s.lambda}};
    return j;
}

inline std::map<std::string, RateSpec> rate_table_from_json(const nlohmann::json& j) {
    std::map<std::string, RateSpec> out;
    try {
        for (const auto& [lang, sj] : j.items()) {
            RateSpec s;
            s.alpha = sj.at("alpha").get<double>();
            s.beta = sj.at("beta").get<double>();
            s.sigma = sj.at("sigma").get<double>();
            s.lambda = sj.at("lambda").get<double>();
            s.validate();
            out[lang] = s;
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad rate table: ") + e.what());
    }
    return out;
}

// -------- checkpoints --------

struct Checkpoint {
    HourglassConfig config;
    std::map<std::string, RateSpec> rates;
    std::int64_t step = 0;
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, Mat>> tensors;
};

inline void save_checkpoint(const std::string& prefix, const Hourglass& model,
                            const std::map<std::string, RateSpec>& rates, std::int64_t step,
                            std::uint64_t seed) {
    const ParamStore& ps = model.params();
    std::vector<std::pair<std::string, Mat>> tensors;
    tensors.reserve(ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) tensors.emplace_back(ps.name(i), ps.value(i));
    write_tensor_archive(prefix + ".bin", tensors);

    nlohmann::json j{{"format", 1},
                     {"config", hourglass_config_to_json(model.config())},
                     {"rates", rate_table_to_json(rates)},
                     {"step", step},
                     {"seed", seed}};
    std::ofstream out(prefix + ".json", std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint sidecar: " + prefix + ".json");
    out << j.dump(2) << "\n";
}

struct LoadedCheckpoint {
    HourglassConfig config;
    std::map<std::string, RateSpec> rates;
    std::int64_t step = 0;
    std::uint64_t seed = 0;
    // tensors present in the archive but not in a fresh model of this config
    // (e.g. a finetuned task head); callers re-attach them as needed
    std::vector<std::pair<std::string, Mat>> extra;
};

// Rebuilds the model in place: `model` is constructed by the caller from the
// sidecar config, then every core tensor is overwritten from the archive.
inline LoadedCheckpoint load_checkpoint_into(const std::string& prefix, Hourglass& model) {
    std::ifstream in(prefix + ".json", std::ios::binary);
    if (!in) throw ConfigError("cannot open checkpoint sidecar: " + prefix + ".json");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw ConfigError("bad checkpoint sidecar " + prefix + ".json: " + e.what());
    }
    LoadedCheckpoint lc;
    lc.config = hourglass_config_from_json(j.at("config"));
    lc.rates = rate_table_from_json(j.at("rates"));
    lc.step = j.value("step", 0);
    lc.seed = j.value("seed", 0ull);
    if (!(lc.config == model.config()))
        throw ConfigError("checkpoint config does not match the constructed model");

    auto tensors = read_tensor_archive(prefix + ".bin");
    ParamStore& ps = model.params();
    std::vector<bool> seen(ps.size(), false);
    for (auto& [name, m] : tensors) {
        if (ps.has(name)) {
            std::size_t id = ps.id_of(name);
            Mat& dst = ps.value(id);
            if (dst.rows() != m.rows() || dst.cols() != m.cols())
                throw DataError("checkpoint tensor shape mismatch for " + name);
            dst = std::move(m);
            seen[id] = true;
        } else {
            lc.extra.emplace_back(std::move(name), std::move(m));
        }
    }
    for (std::size_t i = 0; i < ps.size(); ++i)
        if (!seen[i]) throw DataError("checkpoint is missing tensor " + ps.name(i));
    return lc;
}

// Convenience: read sidecar, build the model, fill it.
struct RestoredModel {
    Hourglass model;
    LoadedCheckpoint info;
};

inline RestoredModel restore_checkpoint(const std::string& prefix) {
    std::ifstream in(prefix + ".json", std::ios::binary);
    if (!in) throw ConfigError("cannot open checkpoint sidecar: " + prefix + ".json");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw ConfigError("bad checkpoint sidecar " + prefix + ".json: " + e.what());
    }
    HourglassConfig cfg = hourglass_config_from_json(j.at("config"));
    RestoredModel rm{Hourglass(cfg, 0), {}};
    rm.info = load_checkpoint_into(prefix, rm.model);
    return rm;
}

}  // namespace ftok
