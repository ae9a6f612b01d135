#pragma once

// Byte-level vocabulary, corpus loading, and chunking.
//
// Vocabulary layout: V = 258, PAD = 0, BOS = 1, raw byte b -> b + 2.
// Documents never share a chunk; each document's stream is BOS-prefixed and
// split into fixed windows, the last one padded with PAD and tagged with its
// valid length.

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "flexitokens/common.hpp"
#include "json.hpp"

namespace ftok {

constexpr int kPadId = 0;
constexpr int kBosId = 1;
constexpr int kSpecialsOffset = 2;
constexpr int kVocabSize = 258;

struct Document {
    std::string text;
    std::string lang;
};

struct ByteChunk {
    std::vector<std::int32_t> ids;  // size == chunk_len, PAD-filled tail
    int language_id = 0;
    int valid_len = 0;
};

// -------- UTF-8 validation --------

// Returns the byte offset of the first invalid position, or -1 if valid.
inline long long utf8_invalid_at(const std::string& s) {
    std::size_t i = 0;
    const auto* b = reinterpret_cast<const unsigned char*>(s.data());
    std::size_t n = s.size();
    while (i < n) {
        unsigned char c = b[i];
        std::size_t need;
        std::uint32_t cp;
        if (c < 0x80) {
            ++i;
            continue;
        } else if ((c & 0xe0) == 0xc0) {
            need = 1;
            cp = c & 0x1f;
        } else if ((c & 0xf0) == 0xe0) {
            need = 2;
            cp = c & 0x0f;
        } else if ((c & 0xf8) == 0xf0) {
            need = 3;
            cp = c & 0x07;
        } else {
            return static_cast<long long>(i);
        }
        if (i + need >= n) return static_cast<long long>(i);  // truncated sequence
        for (std::size_t k = 1; k <= need; ++k) {
            if ((b[i + k] & 0xc0) != 0x80) return static_cast<long long>(i + k);
            cp = (cp << 6) | (b[i + k] & 0x3f);
        }
        // overlongs, surrogates, out of range
        static const std::uint32_t min_cp[4] = {0, 0x80, 0x800, 0x10000};
        if (cp < min_cp[need]) return static_cast<long long>(i);
        if (cp > 0x10ffff || (cp >= 0xd800 && cp <= 0xdfff)) return static_cast<long long>(i);
        i += need + 1;
    }
    return -1;
}

// -------- encode / decode --------

inline std::vector<std::int32_t> encode_bytes(const std::string& text, bool strict = false) {
    if (strict) {
        long long bad = utf8_invalid_at(text);
        if (bad >= 0)
            throw DataError("invalid UTF-8 at byte offset " + std::to_string(bad));
    }
    std::vector<std::int32_t> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<std::int32_t>(c) + kSpecialsOffset);
    return ids;
}

// Inverse of encode_bytes on raw-byte ids; PAD/BOS are skipped so chunk
// streams can be decoded directly.
inline std::string decode_bytes(const std::vector<std::int32_t>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (std::int32_t id : ids) {
        if (id < 0 || id >= kVocabSize) throw DataError("decode: id out of range");
        if (id < kSpecialsOffset) continue;
        out.push_back(static_cast<char>(static_cast<unsigned char>(id - kSpecialsOffset)));
    }
    return out;
}

// -------- chunking --------

struct ChunkStats {
    std::size_t documents = 0;
    std::size_t truncated = 0;  // docs cut at max_doc_bytes
    std::size_t chunks = 0;
};

inline std::vector<ByteChunk> chunk_documents(const std::vector<Document>& docs, int chunk_len,
                                              const std::map<std::string, int>& lang_index,
                                              std::size_t max_doc_bytes = 0,
                                              ChunkStats* stats = nullptr) {
    if (chunk_len < 2) throw ConfigError("chunk_len must be >= 2");
    std::vector<ByteChunk> out;
    ChunkStats local;
    for (const auto& doc : docs) {
        auto it = lang_index.find(doc.lang);
        if (it == lang_index.end()) throw DataError("unknown language '" + doc.lang + "'");
        std::string text = doc.text;
        if (max_doc_bytes > 0 && text.size() > max_doc_bytes) {
            text.resize(max_doc_bytes);
            ++local.truncated;
        }
        std::vector<std::int32_t> stream;
        stream.reserve(text.size() + 1);
        stream.push_back(kBosId);
        for (unsigned char c : text) stream.push_back(static_cast<std::int32_t>(c) + kSpecialsOffset);
        for (std::size_t off = 0; off < stream.size(); off += static_cast<std::size_t>(chunk_len)) {
            ByteChunk ch;
            std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(chunk_len),
                                                     stream.size() - off);
            ch.ids.assign(stream.begin() + static_cast<long>(off),
                          stream.begin() + static_cast<long>(off + take));
            ch.ids.resize(static_cast<std::size_t>(chunk_len), kPadId);
            ch.valid_len = static_cast<int>(take);
            ch.language_id = it->second;
            out.push_back(std::move(ch));
        }
        ++local.documents;
    }
    local.chunks = out.size();
    if (stats) *stats = local;
    return out;
}

// -------- JSONL corpora --------

inline std::vector<Document> load_corpus_jsonl(const std::string& path, bool strict_utf8 = false) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open corpus file: " + path);
    std::vector<Document> docs;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": bad JSON: " + e.what());
        }
        if (!j.contains("text") || !j.contains("lang"))
            throw DataError(path + ":" + std::to_string(lineno) + ": record needs text and lang");
        Document d;
        d.text = j["text"].get<std::string>();
        d.lang = j["lang"].get<std::string>();
        if (strict_utf8) {
            long long bad = utf8_invalid_at(d.text);
            if (bad >= 0)
                throw DataError(path + ":" + std::to_string(lineno) + ": invalid UTF-8 at byte " +
                                std::to_string(bad));
        }
        docs.push_back(std::move(d));
    }
    return docs;
}

inline void write_corpus_jsonl(const std::vector<Document>& docs, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write corpus file: " + path);
    for (const auto& d : docs) {
        nlohmann::json j{{"text", d.text}, {"lang", d.lang}};
        out << j.dump() << "\n";
    }
}

// -------- labeled data (classification or per-byte tagging) --------

struct LabeledDoc {
    std::string text;
    std::string lang;
    bool is_tagging = false;
    int label = -1;               // classification
    std::vector<int> tags;        // tagging: one label per byte of text
};

inline std::vector<LabeledDoc> load_labeled_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open labeled file: " + path);
    std::vector<LabeledDoc> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": bad JSON: " + e.what());
        }
        if (!j.contains("text") || !j.contains("lang"))
            throw DataError(path + ":" + std::to_string(lineno) + ": record needs text and lang");
        LabeledDoc d;
        d.text = j["text"].get<std::string>();
        d.lang = j["lang"].get<std::string>();
        if (j.contains("tags")) {
            d.is_tagging = true;
            d.tags = j["tags"].get<std::vector<int>>();
            if (d.tags.size() != d.text.size())
                throw DataError(path + ":" + std::to_string(lineno) + ": tags length " +
                                std::to_string(d.tags.size()) + " != text bytes " +
                                std::to_string(d.text.size()));
        } else if (j.contains("label")) {
            d.label = j["label"].get<int>();
        } else {
            throw DataError(path + ":" + std::to_string(lineno) + ": record needs label or tags");
        }
        out.push_back(std::move(d));
    }
    return out;
}

inline void write_labeled_jsonl(const std::vector<LabeledDoc>& docs, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write labeled file: " + path);
    for (const auto& d : docs) {
        nlohmann::json j{{"text", d.text}, {"lang", d.lang}};
        if (d.is_tagging)
            j["tags"] = d.tags;
        else
            j["label"] = d.label;
        out << j.dump() << "\n";
    }
}

// One training item for finetuning: a single BOS-prefixed window (long texts
// are truncated, no multi-chunk examples) plus the aligned labels.
struct LabeledExample {
    std::vector<std::int32_t> ids;
    int language_id = 0;
    int valid_len = 0;
    bool is_tagging = false;
    int label = -1;
    std::vector<int> tags;  // aligned to text bytes, i.e. positions 1..valid_len-1
};

inline std::vector<LabeledExample> prepare_labeled(const std::vector<LabeledDoc>& docs, int chunk_len,
                                                   const std::map<std::string, int>& lang_index) {
    if (chunk_len < 2) throw ConfigError("chunk_len must be >= 2");
    std::vector<LabeledExample> out;
    out.reserve(docs.size());
    for (const auto& d : docs) {
        auto it = lang_index.find(d.lang);
        if (it == lang_index.end()) throw DataError("unknown language '" + d.lang + "'");
        LabeledExample ex;
        ex.language_id = it->second;
        ex.is_tagging = d.is_tagging;
        ex.label = d.label;
        std::size_t n_text = std::min<std::size_t>(d.text.size(), static_cast<std::size_t>(chunk_len) - 1);
        ex.ids.reserve(static_cast<std::size_t>(chunk_len));
        ex.ids.push_back(kBosId);
        for (std::size_t i = 0; i < n_text; ++i)
            ex.ids.push_back(static_cast<std::int32_t>(static_cast<unsigned char>(d.text[i])) +
                             kSpecialsOffset);
        ex.valid_len = static_cast<int>(ex.ids.size());
        ex.ids.resize(static_cast<std::size_t>(chunk_len), kPadId);
        if (d.is_tagging)
            ex.tags.assign(d.tags.begin(), d.tags.begin() + static_cast<long>(n_text));
        out.push_back(std::move(ex));
    }
    return out;
}

// -------- parallel corpus (TSV, header row = language codes) --------

struct ParallelCorpus {
    std::vector<std::string> langs;
    // sentences[l][r] = sentence of language l in row r
    std::vector<std::vector<std::string>> sentences;

    std::size_t rows() const { return sentences.empty() ? 0 : sentences[0].size(); }

    std::vector<double> byte_lengths(std::size_t lang_idx) const {
        std::vector<double> out;
        out.reserve(sentences[lang_idx].size());
        for (const auto& s : sentences[lang_idx]) out.push_back(static_cast<double>(s.size()));
        return out;
    }

    int lang_index(const std::string& code) const {
        for (std::size_t i = 0; i < langs.size(); ++i)
            if (langs[i] == code) return static_cast<int>(i);
        return -1;
    }
};

inline ParallelCorpus load_parallel_tsv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open parallel corpus: " + path);
    std::string line;
    if (!std::getline(in, line)) throw DataError("parallel corpus is empty: " + path);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    ParallelCorpus pc;
    {
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, '\t')) pc.langs.push_back(field);
    }
    if (pc.langs.size() < 2) throw DataError("parallel corpus needs at least two languages");
    pc.sentences.resize(pc.langs.size());
    std::size_t row = 0;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            std::size_t tab = line.find('\t', start);
            if (tab == std::string::npos) {
                fields.push_back(line.substr(start));
                break;
            }
            fields.push_back(line.substr(start, tab - start));
            start = tab + 1;
        }
        if (fields.size() != pc.langs.size())
            throw DataError("parallel corpus row " + std::to_string(row) + " has " +
                            std::to_string(fields.size()) + " fields, expected " +
                            std::to_string(pc.langs.size()));
        for (const auto& f : fields)
            if (f.empty())
                throw DataError("parallel corpus row " + std::to_string(row) +
                                " is missing a translation");
        for (std::size_t l = 0; l < fields.size(); ++l) pc.sentences[l].push_back(fields[l]);
    }
    if (pc.rows() == 0) throw DataError("parallel corpus has no data rows: " + path);
    return pc;
}

inline void write_parallel_tsv(const ParallelCorpus& pc, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write parallel corpus: " + path);
    for (std::size_t l = 0; l < pc.langs.size(); ++l) out << (l ? "\t" : "") << pc.langs[l];
    out << "\n";
    for (std::size_t r = 0; r < pc.rows(); ++r) {
        for (std::size_t l = 0; l < pc.langs.size(); ++l)
            out << (l ? "\t" : "") << pc.sentences[l][r];
        out << "\n";
    }
}

// map lang -> byte length per aligned sentence (the calibration input)
inline std::map<std::string, std::vector<double>> parallel_byte_lengths(const ParallelCorpus& pc) {
    std::map<std::string, std::vector<double>> out;
    for (std::size_t l = 0; l < pc.langs.size(); ++l) out[pc.langs[l]] = pc.byte_lengths(l);
    return out;
}

}  // namespace ftok
