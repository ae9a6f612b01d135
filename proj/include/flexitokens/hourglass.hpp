#pragma once

// Three-stage byte model: token stage (byte-level causal transformer) ->
// boundary predictor -> segment mean pooling -> middle causal stack over
// segments -> upsample (each position reads the PREVIOUS segment's output,
// the first segment reads a learned null vector) + skip connection -> final
// byte-level stage -> layer norm -> unembedding.
//
// The one-segment shift in the upsampler is what keeps next-byte prediction
// causal: duplicating a segment's own output would leak later bytes of the
// same segment backwards.

#include <cstdint>
#include <vector>

#include "flexitokens/autograd.hpp"
#include "flexitokens/boundary.hpp"
#include "flexitokens/common.hpp"
#include "flexitokens/data.hpp"

namespace ftok {

struct HourglassConfig {
    int n_tok = 2;
    int n_lm = 2;
    int n_up = 2;
    int d_model = 64;
    int d_ff = 128;
    int n_heads = 4;
    int vocab = kVocabSize;
    int max_len = 512;
    double dropout = 0.0;

    void validate() const {
        if (n_tok < 1 || n_lm < 1 || n_up < 1)
            throw ConfigError("HourglassConfig: all three stages need at least one layer");
        if (d_model < 1 || d_ff < 1) throw ConfigError("HourglassConfig: widths must be positive");
        if (n_heads < 1 || d_model % n_heads != 0)
            throw ConfigError("HourglassConfig: d_model must be divisible by n_heads");
        if (vocab != kVocabSize)
            throw ConfigError("HourglassConfig: vocab must be 258 (PAD, BOS, 256 bytes)");
        if (max_len < 2) throw ConfigError("HourglassConfig: max_len must be >= 2");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("HourglassConfig: dropout in [0,1)");
    }

    bool operator==(const HourglassConfig& o) const {
        return n_tok == o.n_tok && n_lm == o.n_lm && n_up == o.n_up && d_model == o.d_model &&
               d_ff == o.d_ff && n_heads == o.n_heads && vocab == o.vocab && max_len == o.max_len &&
               dropout == o.dropout;
    }
};

struct LayerIds {
    std::size_t ln1g, ln1b, wqkv, bqkv, wproj, bproj, ln2g, ln2b, ffw1, ffb1, ffw2, ffb2;
};

struct HourglassForward {
    Var logits;          // N x vocab
    Var probs;           // N x 1 boundary probabilities
    BoundarySample boundary;
    Var byte_hidden;     // N x d, output of the token stage
    Var segment_hidden;  // S x d, output of the middle stack
    Var final_hidden;    // N x d, post final layer norm (task-head input)
    Var ksum;            // 1 x 1, sum of boundary values
    std::vector<int> seg_ends;
    int N = 0;
};

// targets[t] = ids[t+1] for t+1 < valid_len, else -1 (no target). With the
// BOS-prefixed layout every counted target is a raw byte.
inline std::vector<int> make_lm_targets(const std::vector<std::int32_t>& ids, int valid_len) {
    std::vector<int> out(static_cast<std::size_t>(valid_len), -1);
    for (int t = 0; t + 1 < valid_len; ++t) out[static_cast<std::size_t>(t)] = ids[static_cast<std::size_t>(t) + 1];
    return out;
}

class Hourglass {
public:
    Hourglass(HourglassConfig cfg, std::uint64_t init_seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(mix_seed({init_seed, 0x6d6f64656cull}));
        embed_tok_ = add_normal("embed.tok", cfg_.vocab, cfg_.d_model, rng);
        embed_pos_ = add_normal("embed.pos", cfg_.max_len, cfg_.d_model, rng);
        for (int i = 0; i < cfg_.n_tok; ++i)
            tok_layers_.push_back(init_layer("tok." + std::to_string(i), rng));
        predictor_ = BoundaryPredictor::init(params_, cfg_.d_model, cfg_.d_model, rng);
        for (int i = 0; i < cfg_.n_lm; ++i)
            mid_layers_.push_back(init_layer("mid." + std::to_string(i), rng));
        null_segment_ = add_normal("null_segment", 1, cfg_.d_model, rng);
        for (int i = 0; i < cfg_.n_up; ++i)
            up_layers_.push_back(init_layer("up." + std::to_string(i), rng));
        final_ln_g_ = params_.add("final_ln.g", Mat::Ones(1, cfg_.d_model));
        final_ln_b_ = params_.add("final_ln.b", Mat::Zero(1, cfg_.d_model));
        unembed_w_ = add_normal("unembed.w", cfg_.d_model, cfg_.vocab, rng);
        unembed_b_ = params_.add("unembed.b", Mat::Zero(1, cfg_.vocab));
    }

    const HourglassConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    HourglassForward forward(Tape& t, const std::vector<std::int32_t>& ids, int valid_len,
                             const BoundaryOptions& bopts, Rng* dropout_rng = nullptr) const {
        if (valid_len < 1) throw ConfigError("forward: empty chunk");
        if (valid_len > static_cast<int>(ids.size()))
            throw ConfigError("forward: valid_len exceeds id count");
        if (valid_len > cfg_.max_len) throw ConfigError("forward: sequence longer than max_len");
        std::vector<int> idx(static_cast<std::size_t>(valid_len));
        for (int i = 0; i < valid_len; ++i) {
            std::int32_t id = ids[static_cast<std::size_t>(i)];
            if (id < 0 || id >= cfg_.vocab) throw DataError("forward: token id out of range");
            idx[static_cast<std::size_t>(i)] = static_cast<int>(id);
        }
        const int N = valid_len;
        const int d = cfg_.d_model;

        HourglassForward out;
        out.N = N;

        // byte embeddings + positions
        Var x = t.add(t.gather_rows(params_.var(t, embed_tok_), idx),
                      t.slice_rows(params_.var(t, embed_pos_), 0, N));
        for (const auto& L : tok_layers_) x = block(t, x, L, dropout_rng);
        out.byte_hidden = x;

        // boundary decisions
        out.probs = predictor_.probs(t, params_, x);
        out.boundary = sample_boundaries(t, out.probs, bopts);
        out.ksum = t.sum(out.boundary.values);
        out.seg_ends = out.boundary.mask.segment_ends();

        // pool byte states into segments; gate each segment by its boundary
        // value so the predictor also hears from the LM loss
        Var pooled = t.segment_mean_pool(x, out.seg_ends);
        Var gate = t.gather_rows(out.boundary.values, out.seg_ends);
        Var gate_wide = t.matmul(gate, t.constant(Mat::Ones(1, d)));
        Var seg = t.mul_elem(pooled, gate_wide);

        for (const auto& L : mid_layers_) seg = block(t, seg, L, dropout_rng);
        out.segment_hidden = seg;

        // upsample with the one-segment shift: position t reads the output of
        // the segment BEFORE its own (none for segment 0 -> null vector)
        Var table = t.concat_rows(params_.var(t, null_segment_), seg);
        std::vector<int> up_idx(static_cast<std::size_t>(N));
        {
            int seg_i = 0;
            for (int pos = 0; pos < N; ++pos) {
                up_idx[static_cast<std::size_t>(pos)] = seg_i;  // row 0 = null
                if (out.boundary.mask.b[static_cast<std::size_t>(pos)]) ++seg_i;
            }
        }
        Var up = t.add(t.gather_rows(table, up_idx), out.byte_hidden);
        for (const auto& L : up_layers_) up = block(t, up, L, dropout_rng);

        out.final_hidden = t.layer_norm(up, params_.var(t, final_ln_g_), params_.var(t, final_ln_b_));
        out.logits = t.add_bias(t.matmul(out.final_hidden, params_.var(t, unembed_w_)),
                                params_.var(t, unembed_b_));
        return out;
    }

private:
    std::size_t add_normal(const std::string& name, int rows, int cols, Rng& rng) {
        Mat m(rows, cols);
        for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = rng.normal(0.0, 0.02);
        return params_.add(name, std::move(m));
    }

    LayerIds init_layer(const std::string& prefix, Rng& rng) {
        LayerIds L;
        int d = cfg_.d_model, dff = cfg_.d_ff;
        L.ln1g = params_.add(prefix + ".ln1.g", Mat::Ones(1, d));
        L.ln1b = params_.add(prefix + ".ln1.b", Mat::Zero(1, d));
        L.wqkv = add_normal(prefix + ".attn.wqkv", d, 3 * d, rng);
        L.bqkv = params_.add(prefix + ".attn.bqkv", Mat::Zero(1, 3 * d));
        L.wproj = add_normal(prefix + ".attn.wproj", d, d, rng);
        L.bproj = params_.add(prefix + ".attn.bproj", Mat::Zero(1, d));
        L.ln2g = params_.add(prefix + ".ln2.g", Mat::Ones(1, d));
        L.ln2b = params_.add(prefix + ".ln2.b", Mat::Zero(1, d));
        L.ffw1 = add_normal(prefix + ".ff.w1", d, dff, rng);
        L.ffb1 = params_.add(prefix + ".ff.b1", Mat::Zero(1, dff));
        L.ffw2 = add_normal(prefix + ".ff.w2", dff, d, rng);
        L.ffb2 = params_.add(prefix + ".ff.b2", Mat::Zero(1, d));
        return L;
    }

    // pre-norm block: x + attn(ln(x)), then x + ff(ln(x))
    Var block(Tape& t, Var x, const LayerIds& L, Rng* dropout_rng) const {
        int d = cfg_.d_model;
        int H = cfg_.n_heads;
        int dh = d / H;
        double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

        Var h = t.layer_norm(x, params_.var(t, L.ln1g), params_.var(t, L.ln1b));
        Var qkv = t.add_bias(t.matmul(h, params_.var(t, L.wqkv)), params_.var(t, L.bqkv));
        std::vector<Var> heads;
        heads.reserve(static_cast<std::size_t>(H));
        for (int hd = 0; hd < H; ++hd) {
            Var q = t.slice_cols(qkv, hd * dh, dh);
            Var k = t.slice_cols(qkv, d + hd * dh, dh);
            Var v = t.slice_cols(qkv, 2 * d + hd * dh, dh);
            Var scores = t.scale(t.matmul_nt(q, k), inv_sqrt);
            Var attn = t.softmax_causal(scores);
            heads.push_back(t.matmul(attn, v));
        }
        Var cat = H == 1 ? heads[0] : t.concat_cols(heads);
        Var attn_out = t.add_bias(t.matmul(cat, params_.var(t, L.wproj)), params_.var(t, L.bproj));
        if (cfg_.dropout > 0.0 && dropout_rng) attn_out = t.dropout(attn_out, cfg_.dropout, *dropout_rng);
        x = t.add(x, attn_out);

        Var h2 = t.layer_norm(x, params_.var(t, L.ln2g), params_.var(t, L.ln2b));
        Var f = t.add_bias(t.matmul(h2, params_.var(t, L.ffw1)), params_.var(t, L.ffb1));
        f = t.gelu(f);
        f = t.add_bias(t.matmul(f, params_.var(t, L.ffw2)), params_.var(t, L.ffb2));
        if (cfg_.dropout > 0.0 && dropout_rng) f = t.dropout(f, cfg_.dropout, *dropout_rng);
        return t.add(x, f);
    }

    HourglassConfig cfg_;
    ParamStore params_;
    std::vector<LayerIds> tok_layers_, mid_layers_, up_layers_;
    BoundaryPredictor predictor_;
    std::size_t embed_tok_ = 0, embed_pos_ = 0, null_segment_ = 0;
    std::size_t final_ln_g_ = 0, final_ln_b_ = 0, unembed_w_ = 0, unembed_b_ = 0;
};

}  // namespace ftok
