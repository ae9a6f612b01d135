// flexitok -- command-line driver: calibrate rate targets, pretrain/finetune
// byte-level models, evaluate, and inspect tokenizations.
//
// Every run that produces artifacts gets an --out directory with a
// run_manifest.json written before any real work starts. Re-running with the
// same manifest is allowed (outputs are deterministic); pointing --out at a
// directory that belongs to a *different* run is refused.
//
// Exit codes: 0 ok, 1 usage/config, 2 data, 3 numerical abort.

#include <CLI11.hpp>
#include <json.hpp>

#include <flexitokens/flexitokens.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ftok;

namespace {

json load_json_file(const std::string& path, const char* what) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError(std::string("cannot open ") + what + ": " + path);
    json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw ConfigError("bad json in " + path + ": " + e.what());
    }
    return j;
}

std::string resolve_from(const fs::path& base, const std::string& p) {
    fs::path q(p);
    return q.is_absolute() ? q.string() : (base / q).string();
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

// 40-hex run id from the manifest body (sans the id itself)
std::string content_id(const std::string& s) {
    std::string out;
    for (std::uint64_t salt :
         {0xcbf29ce484222325ull, 0x9e3779b97f4a7c15ull, 0x2545f4914f6cdd1dull})
        out += hex64(fnv1a64(s.data(), s.size(), salt));
    return out.substr(0, 40);
}

struct RunContext {
    fs::path out_dir;
};

RunContext open_run(const std::string& command, const std::string& config_path,
                    std::uint64_t seed, const std::vector<std::string>& inputs,
                    const std::string& out_dir) {
    if (out_dir.empty()) throw ConfigError(command + ": --out is required");
    json m{{"command", command},
           {"config", config_path},
           {"seed", seed},
           {"inputs", inputs},
           {"out_dir", out_dir}};
    m["run_id"] = content_id(m.dump());
    fs::create_directories(out_dir);
    fs::path mpath = fs::path(out_dir) / "run_manifest.json";
    if (fs::exists(mpath)) {
        json old = load_json_file(mpath.string(), "run manifest");
        if (old != m)
            throw ConfigError("output directory already holds a different run: " + out_dir);
    }
    std::ofstream out(mpath, std::ios::binary);
    if (!out) throw ConfigError("cannot write run manifest in " + out_dir);
    out << m.dump(2) << "\n";
    return {fs::path(out_dir)};
}

HourglassConfig model_from_json(const json& j, int default_max_len) {
    HourglassConfig c;
    c.max_len = default_max_len;
    c.n_tok = j.value("n_tok", c.n_tok);
    c.n_lm = j.value("n_lm", c.n_lm);
    c.n_up = j.value("n_up", c.n_up);
    c.d_model = j.value("d_model", c.d_model);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.max_len = j.value("max_len", c.max_len);
    c.dropout = j.value("dropout", c.dropout);
    return c;
}

TrainConfig train_from_json(const json& j) {
    TrainConfig c;
    c.steps = j.value("steps", c.steps);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.max_lr = j.value("max_lr", c.max_lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.chunk_len = j.value("chunk_len", c.chunk_len);
    c.seed = j.value("seed", c.seed);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.temperature = j.value("temperature", c.temperature);
    if (j.contains("loss")) c.loss_kind = loss_variant_from_string(j.at("loss").get<std::string>());
    return c;
}

struct LangTable {
    std::vector<std::string> langs;
    std::map<std::string, int> index;
};

LangTable lang_table(const std::map<std::string, RateSpec>& specs) {
    LangTable t;
    for (const auto& [lang, spec] : specs) {
        t.index[lang] = static_cast<int>(t.langs.size());
        t.langs.push_back(lang);
    }
    return t;
}

std::string task_kind_name(TaskKind k) {
    return k == TaskKind::sequence_classification ? "classification" : "tagging";
}

TaskKind task_kind_from(const std::string& s) {
    if (s == "classification") return TaskKind::sequence_classification;
    if (s == "tagging") return TaskKind::byte_tagging;
    throw ConfigError("unknown task kind '" + s + "' (want classification|tagging)");
}

TaskHead::Pooling pooling_from(const std::string& s) {
    if (s == "bytes") return TaskHead::Pooling::mean_over_bytes;
    if (s == "segments") return TaskHead::Pooling::mean_over_segments;
    throw ConfigError("unknown pooling '" + s + "' (want bytes|segments)");
}

// flags shared by pretrain/finetune
struct TrainOverrides {
    std::optional<std::uint64_t> seed;
    std::optional<int> steps;
    std::string loss;

    void apply(TrainConfig& tc) const {
        if (seed) tc.seed = *seed;
        if (steps) tc.steps = *steps;
        if (!loss.empty()) tc.loss_kind = loss_variant_from_string(loss);
    }
};

int cmd_calibrate(const std::string& parallel_path, const std::string& anchor, double alpha,
                  double lambda, const std::string& out_dir, bool as_json) {
    RunContext rc = open_run("calibrate", "", 0, {fs::absolute(parallel_path).string()}, out_dir);
    auto pc = load_parallel_tsv(parallel_path);
    auto rep = calibrate(parallel_byte_lengths(pc), anchor, alpha, lambda);
    std::string rates_path = (rc.out_dir / "rates.json").string();
    save_rates(rep, rates_path);

    if (as_json) {
        std::ifstream in(rates_path, std::ios::binary);
        std::cout << in.rdbuf();
    } else {
        std::cout << "lang      mu_bytes     alpha      beta     sigma\n";
        for (const auto& [lang, c] : rep.languages) {
            std::printf("%-6s %9.2f %9.4f %9.4f %9.4f\n", lang.c_str(), c.mu, c.alpha, c.beta,
                        c.sigma);
        }
        std::cout << "wrote " << rates_path << "\n";
    }
    return 0;
}

int cmd_pretrain(const std::string& config_path, const std::string& out_dir,
                 const TrainOverrides& ovr) {
    json cfg = load_json_file(config_path, "config");
    fs::path base = fs::absolute(config_path).parent_path();
    TrainConfig tc = train_from_json(cfg.value("train", json::object()));
    ovr.apply(tc);

    if (!cfg.contains("rates")) throw ConfigError("config: missing 'rates' path");
    std::string rates_path = resolve_from(base, cfg.at("rates").get<std::string>());
    json jc = cfg.value("corpus", json::object());
    if (!jc.contains("train")) throw ConfigError("config: missing corpus.train");
    std::string train_path = resolve_from(base, jc.at("train").get<std::string>());
    std::string valid_path =
        jc.contains("valid") ? resolve_from(base, jc.at("valid").get<std::string>()) : "";

    std::vector<std::string> inputs{rates_path, train_path};
    if (!valid_path.empty()) inputs.push_back(valid_path);
    RunContext rc =
        open_run("pretrain", fs::absolute(config_path).string(), tc.seed, inputs, out_dir);

    auto specs = load_rates(rates_path).rate_table();
    LangTable lt = lang_table(specs);
    auto train_chunks = chunk_documents(load_corpus_jsonl(train_path), tc.chunk_len, lt.index);
    std::vector<ByteChunk> valid_chunks;
    if (!valid_path.empty())
        valid_chunks = chunk_documents(load_corpus_jsonl(valid_path), tc.chunk_len, lt.index);

    HourglassConfig mc = model_from_json(cfg.value("model", json::object()), tc.chunk_len);
    Hourglass model(mc, tc.seed);

    std::ofstream csv(rc.out_dir / "metrics.csv", std::ios::binary);
    if (!csv) throw DataError("cannot write metrics.csv in " + out_dir);
    auto res = pretrain(model, train_chunks, valid_chunks.empty() ? nullptr : &valid_chunks,
                        specs, lt.langs, tc, &csv);

    save_checkpoint((rc.out_dir / "checkpoint").string(), model, specs, tc.steps, tc.seed);

    std::cout << "pretrained " << res.records.size() << " steps on " << train_chunks.size()
              << " chunks";
    if (!res.evals.empty()) std::cout << "; held-out bits/byte " << res.evals.back().value;
    std::cout << "\n";
    for (const auto& lang : lt.langs) {
        if (res.records.empty()) break;
        try {
            std::cout << "  " << lang << " rate (last 200 steps) "
                      << window_rate(res.records, lang, 200) << " [target "
                      << specs.at(lang).beta << ".." << specs.at(lang).alpha << "]\n";
        } catch (const ConfigError&) {
            // language never sampled in the window; nothing to report
        }
    }
    std::cout << "checkpoint: " << (rc.out_dir / "checkpoint").string() << "\n";
    return 0;
}

int cmd_finetune(const std::string& config_path, const std::string& out_dir,
                 const TrainOverrides& ovr) {
    json cfg = load_json_file(config_path, "config");
    fs::path base = fs::absolute(config_path).parent_path();
    TrainConfig tc = train_from_json(cfg.value("train", json::object()));
    ovr.apply(tc);

    if (!cfg.contains("task")) throw ConfigError("config: finetune needs a 'task' section");
    json jt = cfg.at("task");
    TaskKind kind = task_kind_from(jt.value("kind", "classification"));
    TaskHead::Pooling pooling = pooling_from(jt.value("pooling", "bytes"));
    int n_classes = jt.value("n_classes", 2);
    if (!jt.contains("init")) throw ConfigError("config: task.init checkpoint prefix is required");
    std::string init_prefix = resolve_from(base, jt.at("init").get<std::string>());
    if (!jt.contains("train")) throw ConfigError("config: missing task.train");
    std::string train_path = resolve_from(base, jt.at("train").get<std::string>());
    std::string valid_path =
        jt.contains("valid") ? resolve_from(base, jt.at("valid").get<std::string>()) : "";

    std::vector<std::string> inputs{init_prefix + ".bin", init_prefix + ".json", train_path};
    if (!valid_path.empty()) inputs.push_back(valid_path);
    RunContext rc =
        open_run("finetune", fs::absolute(config_path).string(), tc.seed, inputs, out_dir);

    auto restored = restore_checkpoint(init_prefix);
    Hourglass model = std::move(restored.model);
    auto specs = restored.info.rates;
    if (cfg.contains("rates"))
        specs = load_rates(resolve_from(base, cfg.at("rates").get<std::string>())).rate_table();
    if (specs.empty()) throw ConfigError("finetune: no rate targets in checkpoint or config");

    auto train_docs = load_labeled_jsonl(train_path);
    std::vector<LabeledDoc> valid_docs;
    if (!valid_path.empty()) valid_docs = load_labeled_jsonl(valid_path);

    // languages unseen at pretraining borrow the most compressive known target
    RateSpec fallback = unseen_language_rates(specs);
    for (const auto& d : train_docs)
        if (!specs.count(d.lang)) specs[d.lang] = fallback;
    for (const auto& d : valid_docs)
        if (!specs.count(d.lang)) specs[d.lang] = fallback;

    LangTable lt = lang_table(specs);
    auto ex_train = prepare_labeled(train_docs, tc.chunk_len, lt.index);
    std::vector<LabeledExample> ex_valid;
    if (!valid_docs.empty()) ex_valid = prepare_labeled(valid_docs, tc.chunk_len, lt.index);

    TaskHead head =
        TaskHead::create(model.params(), kind, n_classes, model.config().d_model, tc.seed, pooling);

    std::ofstream csv(rc.out_dir / "metrics.csv", std::ios::binary);
    if (!csv) throw DataError("cannot write metrics.csv in " + out_dir);
    auto res = finetune(model, head, ex_train, ex_valid.empty() ? nullptr : &ex_valid, specs,
                        lt.langs, tc, &csv);

    std::string prefix = (rc.out_dir / "checkpoint").string();
    save_checkpoint(prefix, model, specs, tc.steps, tc.seed);
    {
        json sidecar{{"kind", task_kind_name(kind)},
                     {"n_classes", n_classes},
                     {"pooling", pooling == TaskHead::Pooling::mean_over_bytes ? "bytes"
                                                                               : "segments"}};
        std::ofstream out(prefix + ".task.json", std::ios::binary);
        if (!out) throw DataError("cannot write task sidecar");
        out << sidecar.dump(2) << "\n";
    }

    std::cout << "finetuned " << res.records.size() << " steps on " << ex_train.size()
              << " examples";
    if (!res.evals.empty())
        std::cout << "; " << (kind == TaskKind::sequence_classification ? "accuracy" : "span F1")
                  << " " << res.evals.back().value;
    std::cout << "\ncheckpoint: " << prefix << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& corpus_path,
             const std::string& labeled_path, const std::string& rates_path, bool as_json,
             const std::string& out_dir) {
    if (corpus_path.empty() && labeled_path.empty())
        throw ConfigError("eval: give --corpus and/or --labeled");

    bool manifested = !out_dir.empty();
    RunContext rc{fs::path()};
    if (manifested) {
        std::vector<std::string> inputs{ckpt + ".bin", ckpt + ".json"};
        if (!corpus_path.empty()) inputs.push_back(fs::absolute(corpus_path).string());
        if (!labeled_path.empty()) inputs.push_back(fs::absolute(labeled_path).string());
        if (!rates_path.empty()) inputs.push_back(fs::absolute(rates_path).string());
        rc = open_run("eval", "", 0, inputs, out_dir);
    }

    auto restored = restore_checkpoint(ckpt);
    Hourglass model = std::move(restored.model);
    auto specs = restored.info.rates;
    if (!rates_path.empty()) specs = load_rates(rates_path).rate_table();
    if (specs.empty()) throw ConfigError("eval: no rate table in checkpoint; pass --rates");
    LangTable lt = lang_table(specs);

    json report = json::object();
    if (!corpus_path.empty()) {
        auto chunks =
            chunk_documents(load_corpus_jsonl(corpus_path), model.config().max_len, lt.index);
        report["bpb"] = bits_per_byte(model, chunks);
        json per_lang = json::object();
        for (const auto& lang : lt.langs) {
            int lid = lt.index.at(lang);
            auto st = compression_stats(model, chunks, lid, lang);
            if (st.n_sequences == 0) continue;
            double ktotal = 0.0;
            long n = 0;
            for (const auto& ch : chunks) {
                if (ch.language_id != lid) continue;
                ktotal += chunk_boundary_count(model, ch);
                ++n;
            }
            per_lang[lang] = {{"mean_rate", st.mean_rate},
                              {"std_rate", st.std_rate},
                              {"tokens_per_sample", ktotal / static_cast<double>(n)},
                              {"n_sequences", st.n_sequences}};
        }
        report["per_language"] = per_lang;
    }

    if (!labeled_path.empty()) {
        json tj = load_json_file(ckpt + ".task.json", "task sidecar");
        TaskKind kind = task_kind_from(tj.value("kind", "classification"));
        TaskHead::Pooling pooling = pooling_from(tj.value("pooling", "bytes"));
        const Mat *w = nullptr, *b = nullptr;
        for (const auto& [name, m] : restored.info.extra) {
            if (name == "head.w") w = &m;
            if (name == "head.b") b = &m;
        }
        if (!w || !b) throw ConfigError("eval: checkpoint has no task head tensors");
        TaskHead head = TaskHead::adopt(model.params(), kind, *w, *b, pooling);
        auto ex = prepare_labeled(load_labeled_jsonl(labeled_path), model.config().max_len,
                                  lt.index);
        double metric = eval_task(model, head, ex);
        report["task"] = {{"kind", task_kind_name(kind)},
                          {"metric", kind == TaskKind::sequence_classification ? "accuracy"
                                                                               : "span_f1"},
                          {"value", metric}};
    }

    std::string rendered = report.dump(2) + "\n";
    if (as_json) {
        std::cout << rendered;
    } else {
        if (report.contains("bpb")) std::cout << "bits/byte: " << report["bpb"].get<double>() << "\n";
        if (report.contains("per_language"))
            for (const auto& [lang, pj] : report["per_language"].items())
                std::cout << "  " << lang << ": " << pj["tokens_per_sample"].get<double>()
                          << " tokens/sample, " << pj["mean_rate"].get<double>()
                          << " bytes/token (std " << pj["std_rate"].get<double>() << ")\n";
        if (report.contains("task"))
            std::cout << "task " << report["task"]["metric"].get<std::string>() << ": "
                      << report["task"]["value"].get<double>() << "\n";
    }
    if (manifested) {
        std::ofstream out(rc.out_dir / "report.json", std::ios::binary);
        if (!out) throw DataError("cannot write report.json");
        out << rendered;
    }
    return 0;
}

int cmd_tokenize(const std::string& ckpt, bool has_text, const std::string& text_flag,
                 const std::string& file_path, const std::string& bpe_path, bool as_json) {
    if (has_text == !file_path.empty())
        throw ConfigError("tokenize: give exactly one of --text or --file");
    std::string text = text_flag;
    if (!file_path.empty()) {
        std::ifstream in(file_path, std::ios::binary);
        if (!in) throw DataError("cannot open text file: " + file_path);
        std::ostringstream ss;
        ss << in.rdbuf();
        text = ss.str();
    }

    auto restored = restore_checkpoint(ckpt);
    auto seg = inspect_tokenization(restored.model, text);

    json out{{"n_segments", seg.n_segments}, {"compression", seg.compression}};
    json spans = json::array();
    for (const auto& [s, e] : seg.spans) spans.push_back({{"start", s}, {"end", e}});
    out["segments"] = spans;

    std::string bpe_rendering;
    if (!bpe_path.empty()) {
        auto bpe = load_bpe(bpe_path);
        auto ids = bpe_encode(bpe, text);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (i) bpe_rendering += "│";
            bpe_rendering += bpe_decode(bpe, {ids[i]});
        }
        out["bpe"] = {{"n_tokens", ids.size()}};
    }

    if (as_json) {
        std::cout << out.dump(2) << "\n";
    } else {
        std::cout << seg.rendering << "\n"
                  << seg.n_segments << " segments, " << seg.compression << " bytes/segment\n";
        if (!bpe_path.empty())
            std::cout << bpe_rendering << "\n"
                      << out["bpe"]["n_tokens"].get<std::size_t>() << " byte-pair tokens\n";
    }
    return 0;
}

int cmd_bpe_train(const std::string& corpus_path, int vocab, const std::string& out_dir) {
    RunContext rc =
        open_run("bpe-train", "", 0, {fs::absolute(corpus_path).string()}, out_dir);
    auto docs = load_corpus_jsonl(corpus_path);
    std::vector<std::string> texts;
    texts.reserve(docs.size());
    for (const auto& d : docs) texts.push_back(d.text);
    auto model = bpe_train(texts, vocab);
    std::string path = (rc.out_dir / "bpe.json").string();
    save_bpe(model, path);
    std::cout << "trained " << model.merges.size() << " merges (vocab " << model.vocab_size
              << ") on " << texts.size() << " documents\nwrote " << path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"byte-level language modeling with a learned tokenizer"};
    app.require_subcommand(1);

    // calibrate
    std::string parallel_path, anchor = "en", out_dir;
    double alpha = 1.0 / 3.0, lambda = 3.0;
    bool as_json = false;
    auto* cal = app.add_subcommand("calibrate", "derive per-language rate targets");
    cal->add_option("--parallel", parallel_path, "parallel corpus TSV (header = language codes)")
        ->required();
    cal->add_option("--anchor", anchor, "anchor language code");
    cal->add_option("--alpha", alpha, "anchor compression target (fraction of bytes)");
    cal->add_option("--lambda", lambda, "how many sigmas below alpha the floor sits");
    cal->add_option("--out", out_dir, "output directory")->required();
    cal->add_flag("--json", as_json, "print rates.json to stdout");

    // pretrain / finetune share a config + overrides
    std::string config_path;
    TrainOverrides ovr;
    std::uint64_t seed_val = 0;
    int steps_val = 0;
    auto add_train_flags = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "run config json")->required();
        sub->add_option("--out", out_dir, "output directory")->required();
        auto* so = sub->add_option("--seed", seed_val, "override train.seed");
        auto* to = sub->add_option("--steps", steps_val, "override train.steps");
        sub->add_option("--loss", ovr.loss, "override train.loss (binomial|flexitokens)");
        sub->callback([&, so, to]() {
            if (so->count()) ovr.seed = seed_val;
            if (to->count()) ovr.steps = steps_val;
        });
    };
    auto* pre = app.add_subcommand("pretrain", "train a byte-level model from scratch");
    add_train_flags(pre);
    auto* fin = app.add_subcommand("finetune", "adapt a checkpoint to a labeled task");
    add_train_flags(fin);

    // eval
    std::string ckpt, corpus_path, labeled_path, rates_path;
    auto* ev = app.add_subcommand("eval", "score a checkpoint on held-out data");
    ev->add_option("--checkpoint", ckpt, "checkpoint prefix (no extension)")->required();
    ev->add_option("--corpus", corpus_path, "jsonl corpus for bits/byte + rates");
    ev->add_option("--labeled", labeled_path, "labeled jsonl for the task head");
    ev->add_option("--rates", rates_path, "rate table override");
    ev->add_option("--out", out_dir, "optional output directory for report.json");
    ev->add_flag("--json", as_json, "print the full json report");

    // tokenize
    std::string text_flag, file_path, bpe_path;
    auto* tok = app.add_subcommand("tokenize", "show how a checkpoint segments text");
    tok->add_option("--checkpoint", ckpt, "checkpoint prefix")->required();
    auto* otext = tok->add_option("--text", text_flag, "text to segment");
    tok->add_option("--file", file_path, "file with text to segment");
    tok->add_option("--compare-bpe", bpe_path, "byte-pair model for a side-by-side count");
    tok->add_flag("--json", as_json, "machine-readable spans");

    // bpe-train
    int vocab = 512;
    auto* bt = app.add_subcommand("bpe-train", "fit a byte-pair baseline tokenizer");
    bt->add_option("--corpus", corpus_path, "jsonl corpus")->required();
    bt->add_option("--vocab", vocab, "target vocabulary size (> 256)");
    bt->add_option("--out", out_dir, "output directory")->required();

    try {
        app.parse(argc, argv);
        if (cal->parsed()) return cmd_calibrate(parallel_path, anchor, alpha, lambda, out_dir, as_json);
        if (pre->parsed()) return cmd_pretrain(config_path, out_dir, ovr);
        if (fin->parsed()) return cmd_finetune(config_path, out_dir, ovr);
        if (ev->parsed())
            return cmd_eval(ckpt, corpus_path, labeled_path, rates_path, as_json, out_dir);
        if (tok->parsed())
            return cmd_tokenize(ckpt, otext->count() > 0, text_flag, file_path, bpe_path, as_json);
        if (bt->parsed()) return cmd_bpe_train(corpus_path, vocab, out_dir);
        return 1;
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
