#pragma once

// Evaluation: bits per byte, compression statistics, tokens-per-sample
// equitability, task metrics, and segmentation inspection. Everything here
// runs the model in deterministic boundary mode on inference tapes.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "flexitokens/bpe.hpp"
#include "flexitokens/common.hpp"
#include "flexitokens/data.hpp"
#include "flexitokens/hourglass.hpp"
#include "flexitokens/objectives.hpp"

namespace ftok {

inline BoundaryOptions eval_boundary_options() {
    BoundaryOptions opts;
    opts.mode = BoundaryMode::deterministic;
    return opts;
}

// -------- bits per byte --------

struct BpbCounts {
    double nll_nats = 0.0;
    long targets = 0;  // raw-byte targets only

    BpbCounts& operator+=(const BpbCounts& o) {
        nll_nats += o.nll_nats;
        targets += o.targets;
        return *this;
    }
};

inline double bpb_from_counts(const BpbCounts& c) {
    if (c.targets == 0) throw DataError("bits_per_byte: no target bytes");
    return (c.nll_nats / 0.6931471805599453) / static_cast<double>(c.targets);
}

inline BpbCounts chunk_nll(const Hourglass& model, const ByteChunk& chunk) {
    Tape t;  // inference
    auto out = model.forward(t, chunk.ids, chunk.valid_len, eval_boundary_options());
    auto targets = make_lm_targets(chunk.ids, chunk.valid_len);
    const Mat& logits = t.val(out.logits);
    BpbCounts c;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        int tgt = targets[static_cast<std::size_t>(r)];
        if (tgt < 0) continue;
        double m = logits.row(r).maxCoeff();
        double z = (logits.row(r).array() - m).exp().sum();
        c.nll_nats += -(logits(r, tgt) - m - std::log(z));
        ++c.targets;
    }
    return c;
}

inline BpbCounts corpus_nll(const Hourglass& model, const std::vector<ByteChunk>& chunks) {
    if (chunks.empty()) throw DataError("bits_per_byte: empty corpus");
    std::vector<BpbCounts> parts(chunks.size());
    parallel_for(chunks.size(), [&](std::size_t i) { parts[i] = chunk_nll(model, chunks[i]); });
    BpbCounts total;
    for (const auto& p : parts) total += p;  // fixed order
    return total;
}

inline double bits_per_byte(const Hourglass& model, const std::vector<ByteChunk>& chunks) {
    return bpb_from_counts(corpus_nll(model, chunks));
}

// -------- compression statistics --------

struct CompressionStats {
    std::string language;
    double mean_rate = 0.0;  // mean of per-sequence N/k
    double std_rate = 0.0;   // population std across sequences
    long n_sequences = 0;
};

inline int chunk_boundary_count(const Hourglass& model, const ByteChunk& chunk) {
    Tape t;
    auto out = model.forward(t, chunk.ids, chunk.valid_len, eval_boundary_options());
    return out.boundary.mask.k;
}

inline CompressionStats compression_stats(const Hourglass& model, const std::vector<ByteChunk>& chunks,
                                          int language_id, const std::string& language_name) {
    std::vector<double> ratios(chunks.size(), -1.0);
    parallel_for(chunks.size(), [&](std::size_t i) {
        if (chunks[i].language_id != language_id) return;
        int k = chunk_boundary_count(model, chunks[i]);
        ratios[i] = static_cast<double>(chunks[i].valid_len) / static_cast<double>(k);
    });
    CompressionStats st;
    st.language = language_name;
    double sum = 0.0;
    for (double r : ratios)
        if (r >= 0.0) {
            sum += r;
            ++st.n_sequences;
        }
    if (st.n_sequences == 0) throw DataError("compression_stats: no sequences for language " + language_name);
    st.mean_rate = sum / static_cast<double>(st.n_sequences);
    double var = 0.0;
    for (double r : ratios)
        if (r >= 0.0) var += (r - st.mean_rate) * (r - st.mean_rate);
    st.std_rate = std::sqrt(var / static_cast<double>(st.n_sequences));
    return st;
}

// -------- segmentation (shared by inspect / tokens-per-sample) --------

// Byte spans [start, end) of the learned segments of `text`, exactly
// partitioning [0, len). Long texts are processed in max_len windows (the
// window edge closes a segment, like chunked training data).
inline std::vector<std::pair<int, int>> segment_spans(const Hourglass& model, const std::string& text) {
    std::vector<std::pair<int, int>> spans;
    if (text.empty()) return spans;
    std::vector<std::int32_t> stream;
    stream.reserve(text.size() + 1);
    stream.push_back(kBosId);
    for (unsigned char c : text) stream.push_back(static_cast<std::int32_t>(c) + kSpecialsOffset);
    int max_len = model.config().max_len;
    std::vector<int> ends;  // exclusive text offsets
    for (std::size_t off = 0; off < stream.size(); off += static_cast<std::size_t>(max_len)) {
        std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(max_len), stream.size() - off);
        std::vector<std::int32_t> window(stream.begin() + static_cast<long>(off),
                                         stream.begin() + static_cast<long>(off + take));
        Tape t;
        auto out = model.forward(t, window, static_cast<int>(take), eval_boundary_options());
        for (int pos = 0; pos < out.N; ++pos) {
            if (!out.boundary.mask.b[static_cast<std::size_t>(pos)]) continue;
            // stream index s holds text byte s-1 (s=0 is BOS), so a boundary
            // at s closes the span ending at text offset s (exclusive)
            int end_excl = static_cast<int>(off) + pos;
            if (end_excl > 0) ends.push_back(end_excl);
        }
    }
    int start = 0;
    for (int e : ends) {
        if (e > start) {
            spans.emplace_back(start, e);
            start = e;
        }
    }
    if (start < static_cast<int>(text.size()))
        spans.emplace_back(start, static_cast<int>(text.size()));
    return spans;
}

struct Segmentation {
    std::vector<std::pair<int, int>> spans;
    std::string rendering;  // segments joined with U+2502
    int n_segments = 0;
    double compression = 0.0;  // bytes per segment
};

inline Segmentation inspect_tokenization(const Hourglass& model, const std::string& text) {
    Segmentation seg;
    seg.spans = segment_spans(model, text);
    seg.n_segments = static_cast<int>(seg.spans.size());
    const char* kSep = "│";
    for (std::size_t i = 0; i < seg.spans.size(); ++i) {
        if (i) seg.rendering += kSep;
        seg.rendering += text.substr(static_cast<std::size_t>(seg.spans[i].first),
                                     static_cast<std::size_t>(seg.spans[i].second - seg.spans[i].first));
    }
    seg.compression = seg.n_segments == 0
                          ? 0.0
                          : static_cast<double>(text.size()) / static_cast<double>(seg.n_segments);
    return seg;
}

// -------- tokens per sample (equitability) --------

inline std::map<std::string, double> tokens_per_sample_model(const Hourglass& model,
                                                             const ParallelCorpus& pc) {
    std::map<std::string, double> out;
    for (std::size_t l = 0; l < pc.langs.size(); ++l) {
        const auto& sents = pc.sentences[l];
        std::vector<double> counts(sents.size());
        parallel_for(sents.size(), [&](std::size_t i) {
            counts[i] = static_cast<double>(segment_spans(model, sents[i]).size());
        });
        double sum = 0.0;
        for (double c : counts) sum += c;
        out[pc.langs[l]] = sum / static_cast<double>(sents.size());
    }
    return out;
}

inline std::map<std::string, double> tokens_per_sample_bpe(const BpeModel& model,
                                                           const ParallelCorpus& pc) {
    std::map<std::string, double> out;
    for (std::size_t l = 0; l < pc.langs.size(); ++l) {
        const auto& sents = pc.sentences[l];
        double sum = 0.0;
        for (const auto& s : sents) sum += static_cast<double>(bpe_encode(model, s).size());
        out[pc.langs[l]] = sum / static_cast<double>(sents.size());
    }
    return out;
}

// -------- task metrics --------

inline double accuracy(const std::vector<int>& predictions, const std::vector<int>& gold) {
    if (predictions.size() != gold.size()) throw DataError("accuracy: length mismatch");
    if (predictions.empty()) throw DataError("accuracy: empty inputs");
    long correct = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i)
        if (predictions[i] == gold[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

struct TagSpan {
    std::size_t seq;
    int start, end, label;
    bool operator==(const TagSpan& o) const {
        return seq == o.seq && start == o.start && end == o.end && label == o.label;
    }
};

// maximal runs of an identical nonzero label; label 0 = outside
inline std::vector<TagSpan> extract_spans(const std::vector<std::vector<int>>& tag_seqs) {
    std::vector<TagSpan> spans;
    for (std::size_t s = 0; s < tag_seqs.size(); ++s) {
        const auto& tags = tag_seqs[s];
        int i = 0, n = static_cast<int>(tags.size());
        while (i < n) {
            if (tags[static_cast<std::size_t>(i)] == 0) {
                ++i;
                continue;
            }
            int label = tags[static_cast<std::size_t>(i)];
            int j = i + 1;
            while (j < n && tags[static_cast<std::size_t>(j)] == label) ++j;
            spans.push_back({s, i, j, label});
            i = j;
        }
    }
    return spans;
}

// entity-span micro F1 over per-byte label sequences
inline double span_f1(const std::vector<std::vector<int>>& predicted,
                      const std::vector<std::vector<int>>& gold) {
    if (predicted.size() != gold.size()) throw DataError("span_f1: sequence count mismatch");
    for (std::size_t i = 0; i < predicted.size(); ++i)
        if (predicted[i].size() != gold[i].size())
            throw DataError("span_f1: length mismatch in sequence " + std::to_string(i));
    auto p_spans = extract_spans(predicted);
    auto g_spans = extract_spans(gold);
    if (p_spans.empty() && g_spans.empty()) return 1.0;
    if (p_spans.empty() || g_spans.empty()) return 0.0;
    long tp = 0;
    for (const auto& ps : p_spans)
        for (const auto& gs : g_spans)
            if (ps == gs) {
                ++tp;
                break;
            }
    double precision = static_cast<double>(tp) / static_cast<double>(p_spans.size());
    double recall = static_cast<double>(tp) / static_cast<double>(g_spans.size());
    if (precision + recall == 0.0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

enum class TaskKind { sequence_classification, byte_tagging };

// dispatcher mirroring the two shapes above: classification predictions are
// one int per example, tagging predictions one label per byte
inline double task_metrics(const std::vector<int>& predictions, const std::vector<int>& gold,
                           TaskKind kind) {
    if (kind != TaskKind::sequence_classification)
        throw ConfigError("task_metrics: per-class form is for classification");
    return accuracy(predictions, gold);
}

inline double task_metrics(const std::vector<std::vector<int>>& predictions,
                           const std::vector<std::vector<int>>& gold, TaskKind kind) {
    if (kind != TaskKind::byte_tagging)
        throw ConfigError("task_metrics: per-byte form is for tagging");
    return span_f1(predictions, gold);
}

}  // namespace ftok
