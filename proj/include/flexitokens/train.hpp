#pragma once

// Training loops: Adam with linear warmup + cosine decay and global
// gradient-norm clipping. Pretraining optimizes next-byte cross entropy plus
// the per-language boundary loss; finetuning swaps the LM term for a task
// loss (classification or per-byte tagging) and keeps the boundary loss on.
//
// Determinism contract: given (seed, config, data) the parameter trajectory
// and the metrics log are bit-identical. Batch order, boundary noise and
// dropout all come from counter-derived streams, and every reduction runs in
// a fixed order.

#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "flexitokens/autograd.hpp"
#include "flexitokens/boundary.hpp"
#include "flexitokens/calibration.hpp"
#include "flexitokens/common.hpp"
#include "flexitokens/data.hpp"
#include "flexitokens/hourglass.hpp"
#include "flexitokens/metrics.hpp"
#include "flexitokens/objectives.hpp"

namespace ftok {

struct TrainConfig {
    int steps = 1000;
    int warmup_steps = 100;
    double max_lr = 1e-3;
    int batch_size = 16;
    double grad_clip = 0.25;
    int chunk_len = 128;
    std::uint64_t seed = 1;
    LossVariant loss_kind = LossVariant::flexitokens;
    int eval_every = 200;
    double temperature = 1.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const {
        if (steps < 0) throw ConfigError("TrainConfig: steps must be >= 0");
        if (steps > 0 && !(warmup_steps >= 0 && warmup_steps < steps))
            throw ConfigError("TrainConfig: need 0 <= warmup_steps < steps");
        if (!(max_lr > 0.0)) throw ConfigError("TrainConfig: max_lr must be > 0");
        if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
        if (!(grad_clip > 0.0)) throw ConfigError("TrainConfig: grad_clip must be > 0");
        if (chunk_len < 2) throw ConfigError("TrainConfig: chunk_len must be >= 2");
        if (eval_every < 1) throw ConfigError("TrainConfig: eval_every must be >= 1");
        if (!(temperature > 0.0)) throw ConfigError("TrainConfig: temperature must be > 0");
    }
};

inline double lr_schedule(int step, const TrainConfig& cfg) {
    if (step < 0 || step > cfg.steps) throw ConfigError("lr_schedule: step out of range");
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
        return cfg.max_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    double span = static_cast<double>(cfg.steps - cfg.warmup_steps);
    double x = 3.14159265358979323846 * static_cast<double>(step - cfg.warmup_steps) / span;
    return cfg.max_lr * 0.5 * (1.0 + std::cos(x));
}

class Adam {
public:
    explicit Adam(std::size_t n) : m_(n), v_(n) {}

    void apply(ParamStore& ps, const GradSink& grads, double lr, double b1, double b2, double eps) {
        ++t_;
        double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
        for (std::size_t i = 0; i < ps.size(); ++i) {
            Mat& p = ps.value(i);
            if (m_[i].size() == 0) {
                m_[i] = Mat::Zero(p.rows(), p.cols());
                v_[i] = Mat::Zero(p.rows(), p.cols());
            }
            // missing gradient slots decay their moments but add no new signal
            if (grads.grad(i).size() != 0) {
                const Mat& g = grads.grad(i);
                m_[i] = b1 * m_[i] + (1.0 - b1) * g;
                v_[i] = b2 * v_[i] + (1.0 - b2) * g.cwiseProduct(g);
            } else {
                m_[i] *= b1;
                v_[i] *= b2;
            }
            p.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps);
        }
    }

private:
    std::vector<Mat> m_, v_;
    long t_ = 0;
};

// global L2 norm over all gradient slots, then in-place scaling if needed
inline double clip_gradients(GradSink& grads, double clip, double* post_norm = nullptr) {
    double sq = 0.0;
    for (std::size_t i = 0; i < grads.size(); ++i)
        if (grads.grad(i).size() != 0) sq += grads.grad(i).squaredNorm();
    double norm = std::sqrt(sq);
    if (norm > clip && norm > 0.0) {
        double scale = clip / norm;
        for (std::size_t i = 0; i < grads.size(); ++i)
            if (grads.grad(i).size() != 0) grads.grad(i) *= scale;
        if (post_norm) *post_norm = clip;
    } else {
        if (post_norm) *post_norm = norm;
    }
    return norm;
}

// -------- step records and the metrics log --------

struct LangStat {
    double rate_sum = 0.0, rate_sq = 0.0;
    long n = 0;
};

struct StepRecord {
    int step = 0;
    double lm_loss = 0.0;        // nats per target (LM or task CE)
    double boundary_loss = 0.0;  // mean per-sequence boundary term
    double total = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;          // pre-clip
    double grad_norm_clipped = 0.0;  // post-clip
    double comp_sum = 0.0;           // sum over sequences of N/k
    long comp_n = 0;
    std::map<std::string, LangStat> lang_rates;  // boundary rate k/N per language
};

struct EvalPoint {
    int step = 0;
    double value = 0.0;  // held-out BPB (pretrain) or task metric (finetune)
};

struct TrainResult {
    std::vector<StepRecord> records;
    std::vector<EvalPoint> evals;
};

inline void write_csv_header(std::ostream& os, const std::vector<std::string>& langs) {
    os << "step,lm_loss_nats,boundary_loss,lr";
    for (const auto& l : langs) os << ",rate_mean_" << l << ",rate_std_" << l;
    os << "\n";
}

// one row aggregating records[from, to)
inline void write_csv_window(std::ostream& os, const std::vector<StepRecord>& records,
                             std::size_t from, std::size_t to,
                             const std::vector<std::string>& langs) {
    if (from >= to) return;
    double lm = 0.0, bp = 0.0;
    std::map<std::string, LangStat> pooled;
    for (std::size_t i = from; i < to; ++i) {
        lm += records[i].lm_loss;
        bp += records[i].boundary_loss;
        for (const auto& [lang, st] : records[i].lang_rates) {
            auto& dst = pooled[lang];
            dst.rate_sum += st.rate_sum;
            dst.rate_sq += st.rate_sq;
            dst.n += st.n;
        }
    }
    double n = static_cast<double>(to - from);
    os << std::setprecision(17) << records[to - 1].step << "," << lm / n << "," << bp / n << ","
       << records[to - 1].lr;
    for (const auto& l : langs) {
        auto it = pooled.find(l);
        if (it == pooled.end() || it->second.n == 0) {
            os << ",nan,nan";
            continue;
        }
        double mean = it->second.rate_sum / static_cast<double>(it->second.n);
        double var = it->second.rate_sq / static_cast<double>(it->second.n) - mean * mean;
        os << "," << mean << "," << std::sqrt(var < 0.0 ? 0.0 : var);
    }
    os << "\n";
}

// -------- shared step loop --------

namespace detail {

struct SeqWork {
    Tape tape;
    Var ce_sum;  // summed nats over this sequence's prediction targets
    Var ksum;    // 1x1 boundary count
    SeqLossParts parts;
    explicit SeqWork(GradSink* sink) : tape(sink) {}
};

// Cycling, reshuffled-each-epoch batch order.
class BatchOrder {
public:
    BatchOrder(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) { reshuffle(); }

    std::size_t next() {
        if (cursor_ >= n_) {
            ++epoch_;
            cursor_ = 0;
            reshuffle();
        }
        return perm_[cursor_++];
    }

private:
    void reshuffle() { perm_ = stable_shuffle(n_, mix_seed({seed_, 0x6f72646572ull, epoch_})); }

    std::size_t n_;
    std::uint64_t seed_;
    std::uint64_t epoch_ = 0;
    std::size_t cursor_ = 0;
    std::vector<std::size_t> perm_;
};

inline std::vector<Mat> copy_params(const ParamStore& ps) {
    std::vector<Mat> out(ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) out[i] = ps.value(i);
    return out;
}

inline void restore_params(ParamStore& ps, const std::vector<Mat>& snap) {
    for (std::size_t i = 0; i < ps.size(); ++i) ps.value(i) = snap[i];
}

inline BoundaryOptions train_boundary_options(const TrainConfig& cfg, int step, std::size_t slot) {
    BoundaryOptions bopts;
    bopts.mode = BoundaryMode::stochastic;
    bopts.temperature = cfg.temperature;
    bopts.noise_seed = mix_seed({cfg.seed, 0x6e6f697365ull, static_cast<std::uint64_t>(step),
                                 static_cast<std::uint64_t>(slot)});
    return bopts;
}

// The optimization loop shared by pretraining and finetuning. `forward_item`
// runs one sequence's forward pass and fills the SeqWork (it must be safe to
// call concurrently for distinct slots); `eval_fn` scores the held-out set,
// or returns false when there is nothing to evaluate; a non-empty `stop_when`
// is consulted after every step and ends the run early when it returns true.
template <class ForwardFn, class EvalFn>
TrainResult run_steps(Hourglass& model, std::size_t n_data,
                      const std::map<std::string, RateSpec>& specs,
                      const std::vector<std::string>& langs, const TrainConfig& cfg,
                      std::ostream* csv, ForwardFn&& forward_item, EvalFn&& eval_fn,
                      const std::function<bool(const TrainResult&)>& stop_when = {}) {
    TrainResult result;
    if (csv) write_csv_header(*csv, langs);
    if (cfg.steps == 0) return result;

    const std::size_t B = static_cast<std::size_t>(cfg.batch_size);
    Adam adam(model.params().size());
    BatchOrder order(n_data, cfg.seed);
    std::vector<Mat> snapshot = copy_params(model.params());
    std::size_t last_logged = 0;

    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<std::size_t> batch(B);
        for (std::size_t i = 0; i < B; ++i) batch[i] = order.next();

        GradSink sink = model.params().make_sink();
        std::vector<SeqWork> work;
        work.reserve(B);
        for (std::size_t i = 0; i < B; ++i) work.emplace_back(&sink);

        parallel_for(B, [&](std::size_t i) { forward_item(step, i, batch[i], work[i]); });

        std::vector<SeqLossParts> parts;
        parts.reserve(B);
        for (const auto& w : work) parts.push_back(w.parts);
        BatchLoss batch_loss = total_objective(parts, specs, cfg.loss_kind);

        // backward serially in slot order so gradient accumulation is
        // bit-reproducible regardless of thread count
        for (std::size_t i = 0; i < B; ++i) {
            SeqWork& w = work[i];
            const RateSpec& spec = spec_for_language(specs, w.parts.lang);
            Var bp = boundary_loss_var(w.tape, w.ksum, w.parts.N, spec, cfg.loss_kind);
            Var loss = w.tape.add(
                w.tape.scale(w.ce_sum, 1.0 / static_cast<double>(batch_loss.total_targets)),
                w.tape.scale(bp, 1.0 / static_cast<double>(B)));
            w.tape.backward(loss);
        }

        StepRecord rec;
        rec.step = step;
        rec.lm_loss = batch_loss.lm_loss;
        rec.boundary_loss = batch_loss.boundary_loss;
        rec.total = batch_loss.total;
        rec.lr = lr_schedule(step, cfg);
        rec.grad_norm = clip_gradients(sink, cfg.grad_clip, &rec.grad_norm_clipped);
        for (const auto& w : work) {
            double rate = w.parts.k / static_cast<double>(w.parts.N);
            auto& st = rec.lang_rates[w.parts.lang];
            st.rate_sum += rate;
            st.rate_sq += rate * rate;
            ++st.n;
            rec.comp_sum += static_cast<double>(w.parts.N) / w.parts.k;
            ++rec.comp_n;
        }

        if (!std::isfinite(batch_loss.total) || !std::isfinite(rec.grad_norm)) {
            restore_params(model.params(), snapshot);
            throw NumericError("non-finite loss at step " + std::to_string(step) +
                               "; parameters restored to the last finite state");
        }
        snapshot = copy_params(model.params());
        adam.apply(model.params(), sink, rec.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        result.records.push_back(std::move(rec));

        bool stopping = stop_when && stop_when(result);
        if ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps || stopping) {
            double score;
            if (eval_fn(score)) result.evals.push_back({step, score});
            if (csv) {
                write_csv_window(*csv, result.records, last_logged, result.records.size(), langs);
                last_logged = result.records.size();
            }
        }
        if (stopping) break;
    }
    return result;
}

}  // namespace detail

inline void check_language_coverage(const std::vector<int>& present_ids,
                                    const std::vector<std::string>& langs,
                                    const std::map<std::string, RateSpec>& specs) {
    for (int id : present_ids) {
        if (id < 0 || id >= static_cast<int>(langs.size()))
            throw DataError("language id out of range: " + std::to_string(id));
        spec_for_language(specs, langs[static_cast<std::size_t>(id)]);
    }
}

// -------- pretraining --------

inline TrainResult pretrain(Hourglass& model, const std::vector<ByteChunk>& train,
                            const std::vector<ByteChunk>* valid,
                            const std::map<std::string, RateSpec>& specs,
                            const std::vector<std::string>& langs, const TrainConfig& cfg,
                            std::ostream* csv = nullptr,
                            const std::function<bool(const TrainResult&)>& stop_when = {}) {
    cfg.validate();
    if (train.empty()) throw DataError("pretrain: empty training corpus");
    {
        std::vector<int> present;
        for (const auto& c : train) present.push_back(c.language_id);
        check_language_coverage(present, langs, specs);
    }

    auto forward_item = [&](int step, std::size_t slot, std::size_t index, detail::SeqWork& w) {
        const ByteChunk& ch = train[index];
        Rng drop_rng(mix_seed({cfg.seed, 0x64726f70ull, static_cast<std::uint64_t>(step), slot}));
        auto fwd = model.forward(w.tape, ch.ids, ch.valid_len,
                                 detail::train_boundary_options(cfg, step, slot),
                                 model.config().dropout > 0.0 ? &drop_rng : nullptr);
        auto ce = w.tape.cross_entropy_rows(fwd.logits, make_lm_targets(ch.ids, ch.valid_len));
        w.ce_sum = ce.nll_sum;
        w.ksum = fwd.ksum;
        w.parts.ce_sum = w.tape.val(ce.nll_sum)(0, 0);
        w.parts.n_targets = ce.count;
        w.parts.k = static_cast<double>(fwd.boundary.mask.k);
        w.parts.N = fwd.N;
        w.parts.lang = langs[static_cast<std::size_t>(ch.language_id)];
    };
    auto eval_fn = [&](double& score) {
        if (!valid || valid->empty()) return false;
        score = bits_per_byte(model, *valid);
        return true;
    };
    return detail::run_steps(model, train.size(), specs, langs, cfg, csv, forward_item, eval_fn,
                             stop_when);
}

// -------- task heads and finetuning --------

struct TaskHead {
    enum class Pooling { mean_over_bytes, mean_over_segments };

    TaskKind kind = TaskKind::sequence_classification;
    int n_classes = 2;
    Pooling pooling = Pooling::mean_over_bytes;
    std::size_t w = 0, b = 0;  // param ids

    static TaskHead create(ParamStore& ps, TaskKind kind, int n_classes, int d_model,
                           std::uint64_t seed, Pooling pooling = Pooling::mean_over_bytes) {
        if (n_classes < 2) throw ConfigError("TaskHead: need at least 2 classes");
        TaskHead h;
        h.kind = kind;
        h.n_classes = n_classes;
        h.pooling = pooling;
        Rng rng(mix_seed({seed, 0x68656164ull}));
        Mat wv(d_model, n_classes);
        for (Eigen::Index i = 0; i < wv.size(); ++i) wv(i) = rng.normal(0.0, 0.02);
        h.w = ps.add("head.w", std::move(wv));
        h.b = ps.add("head.b", Mat::Zero(1, n_classes));
        return h;
    }

    // re-attach a head whose tensors came back from a checkpoint's extras
    static TaskHead adopt(ParamStore& ps, TaskKind kind, const Mat& w_val, const Mat& b_val,
                          Pooling pooling = Pooling::mean_over_bytes) {
        TaskHead h;
        h.kind = kind;
        h.n_classes = static_cast<int>(w_val.cols());
        h.pooling = pooling;
        if (h.n_classes < 2) throw ConfigError("TaskHead: need at least 2 classes");
        if (w_val.cols() != b_val.cols() || b_val.rows() != 1)
            throw DataError("TaskHead: weight and bias shapes disagree");
        h.w = ps.add("head.w", w_val);
        h.b = ps.add("head.b", b_val);
        return h;
    }

    // head logits for one example; N x C for tagging, 1 x C for classification
    Var logits(Tape& t, const ParamStore& ps, const HourglassForward& fwd) const {
        Var input;
        if (kind == TaskKind::byte_tagging) {
            input = fwd.final_hidden;
        } else if (pooling == Pooling::mean_over_bytes) {
            input = t.segment_mean_pool(fwd.final_hidden, {fwd.N - 1});
        } else {
            int S = static_cast<int>(t.val(fwd.segment_hidden).rows());
            input = t.segment_mean_pool(fwd.segment_hidden, {S - 1});
        }
        return t.add_bias(t.matmul(input, ps.var(t, w)), ps.var(t, b));
    }
};

inline std::vector<int> tagging_targets(const LabeledExample& ex) {
    // position 0 is BOS (no tag); byte j sits at position j+1
    std::vector<int> targets(static_cast<std::size_t>(ex.valid_len), -1);
    for (std::size_t j = 0; j < ex.tags.size(); ++j) {
        if (static_cast<int>(j) + 1 < ex.valid_len) targets[j + 1] = ex.tags[j];
    }
    return targets;
}

// deterministic-mode predictions for evaluation
inline int predict_class(const Hourglass& model, const TaskHead& head, const LabeledExample& ex) {
    Tape t;
    auto fwd = model.forward(t, ex.ids, ex.valid_len, eval_boundary_options());
    Var lg = head.logits(t, model.params(), fwd);
    Eigen::Index best;
    t.val(lg).row(0).maxCoeff(&best);
    return static_cast<int>(best);
}

inline std::vector<int> predict_tags(const Hourglass& model, const TaskHead& head,
                                     const LabeledExample& ex) {
    Tape t;
    auto fwd = model.forward(t, ex.ids, ex.valid_len, eval_boundary_options());
    const Mat& lg = t.val(head.logits(t, model.params(), fwd));
    std::vector<int> tags;
    tags.reserve(static_cast<std::size_t>(ex.valid_len > 0 ? ex.valid_len - 1 : 0));
    for (Eigen::Index r = 1; r < lg.rows(); ++r) {  // skip the BOS position
        Eigen::Index best;
        lg.row(r).maxCoeff(&best);
        tags.push_back(static_cast<int>(best));
    }
    return tags;
}

inline double eval_task(const Hourglass& model, const TaskHead& head,
                        const std::vector<LabeledExample>& examples) {
    if (examples.empty()) throw DataError("eval_task: no examples");
    if (head.kind == TaskKind::sequence_classification) {
        std::vector<int> pred(examples.size()), gold(examples.size());
        parallel_for(examples.size(),
                     [&](std::size_t i) { pred[i] = predict_class(model, head, examples[i]); });
        for (std::size_t i = 0; i < examples.size(); ++i) gold[i] = examples[i].label;
        return task_metrics(pred, gold, TaskKind::sequence_classification);
    }
    std::vector<std::vector<int>> pred(examples.size()), gold(examples.size());
    parallel_for(examples.size(),
                 [&](std::size_t i) { pred[i] = predict_tags(model, head, examples[i]); });
    for (std::size_t i = 0; i < examples.size(); ++i) gold[i] = examples[i].tags;
    return task_metrics(pred, gold, TaskKind::byte_tagging);
}

inline TrainResult finetune(Hourglass& model, const TaskHead& head,
                            const std::vector<LabeledExample>& train,
                            const std::vector<LabeledExample>* valid,
                            const std::map<std::string, RateSpec>& specs,
                            const std::vector<std::string>& langs, const TrainConfig& cfg,
                            std::ostream* csv = nullptr) {
    cfg.validate();
    if (train.empty()) throw DataError("finetune: empty training set");
    for (const auto& ex : train) {
        if (ex.is_tagging != (head.kind == TaskKind::byte_tagging))
            throw DataError("finetune: example shape does not match the task head");
        if (head.kind == TaskKind::sequence_classification &&
            (ex.label < 0 || ex.label >= head.n_classes))
            throw DataError("finetune: class label out of range");
        if (head.kind == TaskKind::byte_tagging)
            for (int tg : ex.tags)
                if (tg < 0 || tg >= head.n_classes)
                    throw DataError("finetune: tag label out of range");
    }
    {
        std::vector<int> present;
        for (const auto& ex : train) present.push_back(ex.language_id);
        check_language_coverage(present, langs, specs);
    }

    auto forward_item = [&](int step, std::size_t slot, std::size_t index, detail::SeqWork& w) {
        const LabeledExample& ex = train[index];
        Rng drop_rng(mix_seed({cfg.seed, 0x64726f70ull, static_cast<std::uint64_t>(step), slot}));
        auto fwd = model.forward(w.tape, ex.ids, ex.valid_len,
                                 detail::train_boundary_options(cfg, step, slot),
                                 model.config().dropout > 0.0 ? &drop_rng : nullptr);
        Var lg = head.logits(w.tape, model.params(), fwd);
        auto ce = head.kind == TaskKind::sequence_classification
                      ? w.tape.cross_entropy_rows(lg, {ex.label})
                      : w.tape.cross_entropy_rows(lg, tagging_targets(ex));
        w.ce_sum = ce.nll_sum;
        w.ksum = fwd.ksum;
        w.parts.ce_sum = w.tape.val(ce.nll_sum)(0, 0);
        w.parts.n_targets = ce.count;
        w.parts.k = static_cast<double>(fwd.boundary.mask.k);
        w.parts.N = fwd.N;
        w.parts.lang = langs[static_cast<std::size_t>(ex.language_id)];
    };
    auto eval_fn = [&](double& score) {
        if (!valid || valid->empty()) return false;
        score = eval_task(model, head, *valid);
        return true;
    };
    return detail::run_steps(model, train.size(), specs, langs, cfg, csv, forward_item, eval_fn);
}

// aggregate helpers for reading trajectories (band checks, adaptation runs)

inline double window_rate(const std::vector<StepRecord>& records, const std::string& lang,
                          std::size_t last_n) {
    if (records.empty()) throw ConfigError("window_rate: no records");
    std::size_t from = records.size() > last_n ? records.size() - last_n : 0;
    double sum = 0.0;
    long n = 0;
    for (std::size_t i = from; i < records.size(); ++i) {
        auto it = records[i].lang_rates.find(lang);
        if (it == records[i].lang_rates.end()) continue;
        sum += it->second.rate_sum;
        n += it->second.n;
    }
    if (n == 0) throw ConfigError("window_rate: language never appeared in window: " + lang);
    return sum / static_cast<double>(n);
}

inline double window_compression(const std::vector<StepRecord>& records, std::size_t last_n) {
    if (records.empty()) throw ConfigError("window_compression: no records");
    std::size_t from = records.size() > last_n ? records.size() - last_n : 0;
    double sum = 0.0;
    long n = 0;
    for (std::size_t i = from; i < records.size(); ++i) {
        sum += records[i].comp_sum;
        n += records[i].comp_n;
    }
    if (n == 0) throw ConfigError("window_compression: empty window");
    return sum / static_cast<double>(n);
}

}  // namespace ftok
