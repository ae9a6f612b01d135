#include <catch2/catch_amalgamated.hpp>

#include <flexitokens/checkpoint.hpp>

#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "helpers.hpp"

using namespace ftok;
using testutil::TempDir;

namespace {

HourglassConfig ckpt_config() {
    HourglassConfig cfg;
    cfg.n_tok = 1;
    cfg.n_lm = 1;
    cfg.n_up = 1;
    cfg.d_model = 16;
    cfg.d_ff = 32;
    cfg.n_heads = 2;
    cfg.max_len = 32;
    return cfg;
}

std::map<std::string, RateSpec> demo_rates() {
    return {{"en", RateSpec{0.333, 0.264, 0.023, 3.0}}, {"te", RateSpec{0.124, 0.1, 0.008, 3.0}}};
}

}  // namespace

TEST_CASE("tensor archives round trip bit for bit", "[checkpoint]") {
    TempDir tmp;
    Rng rng(230);
    std::vector<std::pair<std::string, Mat>> tensors;
    tensors.emplace_back("alpha", testutil::random_mat(3, 5, rng));
    tensors.emplace_back("beta.weight", testutil::random_mat(1, 1, rng));
    tensors.emplace_back("empty_rows", Mat(0, 4));
    // values that sloppy text round trips lose
    Mat special(2, 2);
    special << 0.1, 1e-300, -0.0, std::nextafter(1.0, 2.0);
    tensors.emplace_back("special", special);

    std::string path = tmp.file("tensors.bin");
    write_tensor_archive(path, tensors);
    auto back = read_tensor_archive(path);
    REQUIRE(back.size() == tensors.size());
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        REQUIRE(back[i].first == tensors[i].first);
        REQUIRE(back[i].second.rows() == tensors[i].second.rows());
        REQUIRE(back[i].second.cols() == tensors[i].second.cols());
        for (Eigen::Index r = 0; r < back[i].second.rows(); ++r)
            for (Eigen::Index c = 0; c < back[i].second.cols(); ++c) {
                double a = back[i].second(r, c), b = tensors[i].second(r, c);
                REQUIRE(std::memcmp(&a, &b, sizeof(double)) == 0);  // signed zero included
            }
    }
}

TEST_CASE("archive reader rejects foreign and truncated files", "[checkpoint]") {
    TempDir tmp;
    REQUIRE_THROWS_AS(read_tensor_archive(tmp.file("absent.bin")), DataError);
    {
        std::ofstream out(tmp.file("junk.bin"), std::ios::binary);
        out << "definitely not a tensor archive";
    }
    REQUIRE_THROWS_AS(read_tensor_archive(tmp.file("junk.bin")), DataError);

    // valid archive chopped in half
    Rng rng(231);
    write_tensor_archive(tmp.file("whole.bin"), {{"w", testutil::random_mat(8, 8, rng)}});
    std::ifstream in(tmp.file("whole.bin"), std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    {
        std::ofstream out(tmp.file("cut.bin"), std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    REQUIRE_THROWS_AS(read_tensor_archive(tmp.file("cut.bin")), DataError);
}

TEST_CASE("model config json survives the trip and validates on load", "[checkpoint]") {
    HourglassConfig cfg = ckpt_config();
    cfg.dropout = 0.1;
    HourglassConfig back = hourglass_config_from_json(hourglass_config_to_json(cfg));
    REQUIRE(back == cfg);

    nlohmann::json j = hourglass_config_to_json(cfg);
    j.erase("d_model");
    REQUIRE_THROWS_AS(hourglass_config_from_json(j), ConfigError);
    j = hourglass_config_to_json(cfg);
    j["n_heads"] = 5;  // fails validation, not parsing
    REQUIRE_THROWS_AS(hourglass_config_from_json(j), ConfigError);
}

TEST_CASE("rate tables survive the trip and validate entries", "[checkpoint]") {
    auto rates = demo_rates();
    auto back = rate_table_from_json(rate_table_to_json(rates));
    REQUIRE(back.size() == 2);
    REQUIRE(back.at("en").alpha == rates.at("en").alpha);
    REQUIRE(back.at("te").beta == rates.at("te").beta);

    nlohmann::json j = rate_table_to_json(rates);
    j["en"]["beta"] = 0.9;  // beta above alpha
    REQUIRE_THROWS_AS(rate_table_from_json(j), ConfigError);
    j = rate_table_to_json(rates);
    j["en"].erase("sigma");
    REQUIRE_THROWS_AS(rate_table_from_json(j), ConfigError);
}

TEST_CASE("a saved model restores with identical parameters and metadata", "[checkpoint]") {
    TempDir tmp;
    Hourglass model(ckpt_config(), 240);
    // nudge a couple of tensors so we are not comparing fresh inits
    model.params().value(0).array() += 0.25;
    std::string prefix = tmp.file("ckpt");
    save_checkpoint(prefix, model, demo_rates(), 1234, 777);

    RestoredModel restored = restore_checkpoint(prefix);
    REQUIRE(restored.info.step == 1234);
    REQUIRE(restored.info.seed == 777);
    REQUIRE(restored.info.config == model.config());
    REQUIRE(restored.info.rates.at("en").alpha == 0.333);
    REQUIRE(restored.info.extra.empty());
    REQUIRE(restored.model.params().size() == model.params().size());
    for (std::size_t i = 0; i < model.params().size(); ++i) {
        REQUIRE(restored.model.params().name(i) == model.params().name(i));
        REQUIRE(restored.model.params().value(i) == model.params().value(i));
    }

    // the restored model computes the same forward pass
    std::vector<std::int32_t> ids{kBosId, 99, 100, 101};
    Tape t1, t2;
    Mat a = t1.val(model.forward(t1, ids, 4, eval_boundary_options()).logits);
    Mat b = t2.val(restored.model.forward(t2, ids, 4, eval_boundary_options()).logits);
    REQUIRE(a == b);
}

TEST_CASE("unknown tensors come back as extras for re-attachment", "[checkpoint]") {
    TempDir tmp;
    Hourglass model(ckpt_config(), 241);
    auto head = TaskHead::create(model.params(), TaskKind::sequence_classification, 3, 16, 55);
    save_checkpoint(tmp.file("ft"), model, demo_rates(), 7, 99);

    // a fresh model of the same config has no head tensors
    RestoredModel restored = restore_checkpoint(tmp.file("ft"));
    REQUIRE(restored.info.extra.size() == 2);
    std::map<std::string, Mat> extra;
    for (auto& [name, m] : restored.info.extra) extra.emplace(name, std::move(m));
    REQUIRE(extra.count("head.w") == 1);
    REQUIRE(extra.count("head.b") == 1);
    REQUIRE(extra.at("head.w") == model.params().value(model.params().id_of("head.w")));

    auto adopted = TaskHead::adopt(restored.model.params(), TaskKind::sequence_classification,
                                   extra.at("head.w"), extra.at("head.b"));
    REQUIRE(adopted.n_classes == head.n_classes);
}

TEST_CASE("mismatched or incomplete checkpoints are refused", "[checkpoint]") {
    TempDir tmp;
    Hourglass model(ckpt_config(), 242);
    save_checkpoint(tmp.file("ck"), model, demo_rates(), 1, 2);

    // wrong architecture for load_checkpoint_into
    HourglassConfig other = ckpt_config();
    other.n_lm = 2;
    Hourglass wrong(other, 243);
    REQUIRE_THROWS_AS(load_checkpoint_into(tmp.file("ck"), wrong), ConfigError);

    // archive missing a tensor the model needs
    auto tensors = read_tensor_archive(tmp.file("ck.bin"));
    tensors.pop_back();
    write_tensor_archive(tmp.file("ck.bin"), tensors);
    Hourglass target(ckpt_config(), 244);
    REQUIRE_THROWS_AS(load_checkpoint_into(tmp.file("ck"), target), DataError);

    REQUIRE_THROWS_AS(restore_checkpoint(tmp.file("never_saved")), ConfigError);
}

TEST_CASE("shape drift in the archive is caught", "[checkpoint]") {
    TempDir tmp;
    Hourglass model(ckpt_config(), 245);
    save_checkpoint(tmp.file("ck"), model, demo_rates(), 1, 2);
    auto tensors = read_tensor_archive(tmp.file("ck.bin"));
    // stretch one tensor to the wrong shape
    for (auto& [name, m] : tensors)
        if (name == "final_ln.g") m = Mat::Ones(1, 99);
    write_tensor_archive(tmp.file("ck.bin"), tensors);
    Hourglass target(ckpt_config(), 246);
    REQUIRE_THROWS_AS(load_checkpoint_into(tmp.file("ck"), target), DataError);
}
