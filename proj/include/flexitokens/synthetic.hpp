#pragma once

// Deterministic synthetic corpora used by the demos and the end-to-end tests:
// word salad over a fixed bank of short ASCII words, the same over Telugu
// script (3-byte UTF-8 letters, so byte lengths stretch), long-word labeled
// sets for finetuning, and word-aligned parallel rows for tokenizer-parity
// comparisons. Everything is a pure function of (shape parameters, seed).

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "flexitokens/common.hpp"
#include "flexitokens/data.hpp"

namespace ftok {

inline void append_codepoint(std::string& s, std::uint32_t cp) {
    if (cp < 0x80) {
        s.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        s.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        s.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        s.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        s.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

namespace detail {

// n distinct words of the given character length over an alphabet of code points
inline std::vector<std::string> distinct_words(const std::vector<std::uint32_t>& alphabet,
                                               std::size_t n, int len, Rng& rng) {
    std::set<std::string> seen;
    std::vector<std::string> out;
    while (out.size() < n) {
        std::string w;
        for (int i = 0; i < len; ++i)
            append_codepoint(w, alphabet[rng.below(alphabet.size())]);
        if (seen.insert(w).second) out.push_back(w);
    }
    return out;
}

inline std::vector<std::uint32_t> ascii_lower() {
    std::vector<std::uint32_t> a;
    for (std::uint32_t c = 'a'; c <= 'z'; ++c) a.push_back(c);
    return a;
}

// a run of assigned Telugu consonants; every one is 3 bytes in UTF-8
inline std::vector<std::uint32_t> telugu_letters() {
    std::vector<std::uint32_t> a;
    for (std::uint32_t c = 0x0C15; c <= 0x0C28; ++c) a.push_back(c);
    return a;
}

}  // namespace detail

// Bank of short words; sampling uniformly over it fixes the expected
// bytes-per-word of the generated text. The ASCII bank mixes 2- and 3-letter
// words 70/30 (≈3.3 bytes per word incl. the following space); the Telugu
// bank mixes them 50/50 (≈8.5 bytes per word — each letter is 3 bytes).
inline std::vector<std::string> ascii_word_bank(std::uint64_t seed, std::size_t n_two = 35,
                                                std::size_t n_three = 15) {
    Rng rng(mix_seed({seed, 0x61736369ull}));
    auto alpha = detail::ascii_lower();
    auto two = detail::distinct_words(alpha, n_two, 2, rng);
    auto three = detail::distinct_words(alpha, n_three, 3, rng);
    two.insert(two.end(), three.begin(), three.end());
    return two;
}

inline std::vector<std::string> telugu_word_bank(std::uint64_t seed, std::size_t n_two = 20,
                                                 std::size_t n_three = 20, std::size_t n_four = 0) {
    Rng rng(mix_seed({seed, 0x74656c75ull}));
    auto alpha = detail::telugu_letters();
    auto two = detail::distinct_words(alpha, n_two, 2, rng);
    auto three = detail::distinct_words(alpha, n_three, 3, rng);
    two.insert(two.end(), three.begin(), three.end());
    if (n_four) {
        auto four = detail::distinct_words(alpha, n_four, 4, rng);
        two.insert(two.end(), four.begin(), four.end());
    }
    return two;
}

inline std::string sample_sentence(const std::vector<std::string>& bank, int n_words, Rng& rng) {
    if (bank.empty() || n_words < 1) throw ConfigError("sample_sentence: need a bank and >=1 word");
    std::string s;
    for (int i = 0; i < n_words; ++i) {
        s += bank[rng.below(bank.size())];
        s += ' ';
    }
    return s;
}

inline std::vector<Document> word_salad_corpus(const std::vector<std::string>& bank,
                                               const std::string& lang, int n_docs, int min_words,
                                               int max_words, std::uint64_t seed) {
    if (n_docs < 1 || min_words < 1 || max_words < min_words)
        throw ConfigError("word_salad_corpus: bad shape parameters");
    Rng rng(mix_seed({seed, fnv1a64(lang.data(), lang.size())}));
    std::vector<Document> docs;
    docs.reserve(static_cast<std::size_t>(n_docs));
    for (int d = 0; d < n_docs; ++d) {
        int n = min_words + static_cast<int>(rng.below(
                                static_cast<std::uint64_t>(max_words - min_words + 1)));
        docs.push_back({sample_sentence(bank, n, rng), lang});
    }
    return docs;
}

// Word salad with a tiny first-order grammar on top: each word may only be
// followed by one of two fixed successors, so knowing the current word
// genuinely predicts the bytes after the next space. The successor table is
// two random permutations of the bank (built from table_seed and shared by
// every corpus drawn over it), which keeps the long-run word frequencies
// uniform — the byte statistics match the plain salad, only the
// predictability changes.
inline std::vector<Document> chained_word_corpus(const std::vector<std::string>& bank,
                                                 const std::string& lang, int n_docs, int min_words,
                                                 int max_words, std::uint64_t table_seed,
                                                 std::uint64_t chain_seed) {
    if (n_docs < 1 || min_words < 1 || max_words < min_words || bank.size() < 2)
        throw ConfigError("chained_word_corpus: bad shape parameters");
    std::size_t nb = bank.size();
    std::vector<std::size_t> succ[2];
    Rng trng(mix_seed({table_seed, 0x63686169ull}));
    for (auto& perm : succ) {
        perm.resize(nb);
        for (std::size_t i = 0; i < nb; ++i) perm[i] = i;
        for (std::size_t i = nb - 1; i > 0; --i)
            std::swap(perm[i], perm[trng.below(i + 1)]);
    }
    Rng rng(mix_seed({chain_seed, fnv1a64(lang.data(), lang.size())}));
    std::vector<Document> docs;
    docs.reserve(static_cast<std::size_t>(n_docs));
    for (int d = 0; d < n_docs; ++d) {
        int n = min_words + static_cast<int>(rng.below(
                                static_cast<std::uint64_t>(max_words - min_words + 1)));
        std::size_t w = rng.below(nb);
        std::string s;
        for (int i = 0; i < n; ++i) {
            s += bank[w];
            s += ' ';
            w = succ[rng.below(2)][w];
        }
        docs.push_back({std::move(s), lang});
    }
    return docs;
}

// -------- long-word task sets --------

// Four word families, distinguishable by which letter range they draw from.
// Words are long (12-20 letters), so their natural segment length is far
// above that of the short word salad.
struct LongWordTask {
    std::vector<std::vector<std::string>> families;  // one bank per class
};

inline LongWordTask long_word_families(std::uint64_t seed, std::size_t words_per_family = 8) {
    static const char* kSpans[4] = {"abcdef", "ghijklm", "nopqrs", "tuvwxyz"};
    LongWordTask task;
    Rng rng(mix_seed({seed, 0x6c6f6e67ull}));
    for (int f = 0; f < 4; ++f) {
        std::vector<std::uint32_t> alpha;
        for (const char* p = kSpans[f]; *p; ++p) alpha.push_back(static_cast<std::uint32_t>(*p));
        std::set<std::string> seen;
        std::vector<std::string> bank;
        while (bank.size() < words_per_family) {
            int len = 12 + static_cast<int>(rng.below(9));  // 12..20 letters
            std::string w;
            for (int i = 0; i < len; ++i)
                append_codepoint(w, alpha[rng.below(alpha.size())]);
            if (seen.insert(w).second) bank.push_back(w);
        }
        task.families.push_back(std::move(bank));
    }
    return task;
}

// every word of a document comes from one family; the label is that family
inline std::vector<LabeledDoc> long_word_classification(const LongWordTask& task,
                                                        const std::string& lang, int n_docs,
                                                        int min_words, int max_words,
                                                        std::uint64_t seed) {
    if (n_docs < 1 || min_words < 1 || max_words < min_words)
        throw ConfigError("long_word_classification: bad shape parameters");
    Rng rng(mix_seed({seed, 0x636c6173ull}));
    std::vector<LabeledDoc> docs;
    docs.reserve(static_cast<std::size_t>(n_docs));
    for (int d = 0; d < n_docs; ++d) {
        int family = static_cast<int>(rng.below(task.families.size()));
        int n = min_words + static_cast<int>(rng.below(
                                static_cast<std::uint64_t>(max_words - min_words + 1)));
        LabeledDoc doc;
        doc.text = sample_sentence(task.families[static_cast<std::size_t>(family)], n, rng);
        doc.lang = lang;
        doc.is_tagging = false;
        doc.label = family;
        docs.push_back(std::move(doc));
    }
    return docs;
}

// words drawn from mixed families; each word's bytes are tagged family+1 and
// the separating spaces are tagged 0, so gold spans are exactly the words
inline std::vector<LabeledDoc> long_word_tagging(const LongWordTask& task, const std::string& lang,
                                                 int n_docs, int min_words, int max_words,
                                                 std::uint64_t seed) {
    if (n_docs < 1 || min_words < 1 || max_words < min_words)
        throw ConfigError("long_word_tagging: bad shape parameters");
    Rng rng(mix_seed({seed, 0x74616773ull}));
    std::vector<LabeledDoc> docs;
    docs.reserve(static_cast<std::size_t>(n_docs));
    for (int d = 0; d < n_docs; ++d) {
        int n = min_words + static_cast<int>(rng.below(
                                static_cast<std::uint64_t>(max_words - min_words + 1)));
        LabeledDoc doc;
        doc.lang = lang;
        doc.is_tagging = true;
        for (int i = 0; i < n; ++i) {
            int family = static_cast<int>(rng.below(task.families.size()));
            const auto& bank = task.families[static_cast<std::size_t>(family)];
            const std::string& w = bank[rng.below(bank.size())];
            doc.text += w;
            doc.tags.insert(doc.tags.end(), w.size(), family + 1);
            doc.text += ' ';
            doc.tags.push_back(0);
        }
        docs.push_back(std::move(doc));
    }
    return docs;
}

// -------- parallel rows --------

// word-aligned rows: both sides of a row carry the same number of words, so
// "the same content" costs very different byte counts per language
inline ParallelCorpus parallel_word_salad(const std::vector<std::string>& bank_a,
                                          const std::vector<std::string>& bank_b,
                                          const std::string& lang_a, const std::string& lang_b,
                                          int n_rows, int min_words, int max_words,
                                          std::uint64_t seed) {
    if (n_rows < 1 || min_words < 1 || max_words < min_words)
        throw ConfigError("parallel_word_salad: bad shape parameters");
    Rng rng(mix_seed({seed, 0x70617261ull}));
    ParallelCorpus pc;
    pc.langs = {lang_a, lang_b};
    pc.sentences.resize(2);
    for (int r = 0; r < n_rows; ++r) {
        int n = min_words + static_cast<int>(rng.below(
                                static_cast<std::uint64_t>(max_words - min_words + 1)));
        pc.sentences[0].push_back(sample_sentence(bank_a, n, rng));
        pc.sentences[1].push_back(sample_sentence(bank_b, n, rng));
    }
    return pc;
}

}  // namespace ftok
