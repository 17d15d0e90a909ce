#include "doctest.h"

#include "../support/tiny.hpp"

#include "clu/adapters.hpp"
#include "clu/checkpoint.hpp"
#include "clu/config.hpp"
#include "clu/errors.hpp"
#include "clu/random.hpp"

#include "json.hpp"

#include <cstdio>

using namespace clu;

TEST_CASE("config round-trips through JSON") {
    auto c = testing::tiny_config();
    c.apply_seed(42);
    c.protocol.mode = EngineMode::standard_lora;
    c.protocol.train.weights.lambda_esc = 2.5;
    c.protocol.train.mask.unlearn = false;
    c.output_dir = "/tmp/x";
    auto back = RunConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    CHECK(back.seed == 42);
    CHECK(back.protocol.mode == EngineMode::standard_lora);
    CHECK(back.model == c.model);
}

TEST_CASE("config seeds derive from the run seed") {
    RunConfig a, b;
    a.apply_seed(1);
    b.apply_seed(2);
    CHECK(a.dataset.seed == 1);
    CHECK(a.pretrain.seed != b.pretrain.seed);
    CHECK(a.pretrain.seed != a.protocol.train.seed);
    CHECK(a.protocol.oracle.seed != a.protocol.train.escape.seed);
}

TEST_CASE("config parsing rejects unknown keys and bad types") {
    auto j = nlohmann::json::parse(RunConfig{}.to_json());
    j["protocol"]["train"]["lr"]["retian"] = 0.1;
    CHECK_THROWS_AS(RunConfig::from_json(j.dump()), ConfigError);
    j = nlohmann::json::parse(RunConfig{}.to_json());
    j["model"]["depth"] = "two";
    CHECK_THROWS_AS(RunConfig::from_json(j.dump()), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json("{not json"), ConfigError);
    j = nlohmann::json::parse(RunConfig{}.to_json());
    j["protocol"]["mode"] = "other";
    CHECK_THROWS_AS(RunConfig::from_json(j.dump()), ConfigError);
    // Partial configs fill in defaults.
    CHECK(RunConfig::from_json("{\"seed\": 7}").seed == 7);
}

TEST_CASE("config validation catches inconsistent sections") {
    auto c = testing::tiny_config();
    c.model.input_dim = 5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = testing::tiny_config();
    c.plan.num_tasks = 10;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = testing::tiny_config();
    c.model.num_class_slots = 10;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = testing::tiny_config();
    c.protocol.buffer_ratio = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK_NOTHROW(testing::tiny_config().validate());
    CHECK_NOTHROW(RunConfig{}.validate());
    CHECK_NOTHROW(large_config().validate());
}

TEST_CASE("config is not loaded from a missing file") {
    CHECK_THROWS_AS(RunConfig::load("/nonexistent/clu.json"), ConfigError);
}

namespace {

Checkpoint sample_checkpoint(bool with_bundle) {
    auto cfg = testing::tiny_config();
    cfg.apply_seed(3);
    Model m(cfg.model, 5);
    m.set_active_classes({0, 3, 7});
    Checkpoint ck(m);
    ck.config = cfg;
    ck.task_index = 2;
    if (with_bundle) {
        auto b = attach(ck.model, AdapterConfig{2, 1, 0.5}, 9);
        Rng rng(1);
        for (auto& t : b.all_tensors()) {
            for (auto& v : t.mutable_values()) {
                v = rng.normal();
            }
        }
        ck.bundle = std::move(b);
    }
    return ck;
}

}  // namespace

TEST_CASE("checkpoints round-trip bit-exactly") {
    for (bool with_bundle : {false, true}) {
        auto ck = sample_checkpoint(with_bundle);
        const auto bytes = serialize_checkpoint(ck);
        auto back = deserialize_checkpoint(bytes);
        CHECK(back.task_index == 2);
        CHECK(back.model.active_classes() == ClassSet{0, 3, 7});
        CHECK(parameters_equal(back.model, ck.model));
        CHECK(back.config.to_json() == ck.config.to_json());
        CHECK(back.bundle.has_value() == with_bundle);
        if (with_bundle) {
            CHECK(back.bundle->scaling() == 0.5);
            auto want = ck.bundle->all_tensors();
            auto got = back.bundle->all_tensors();
            REQUIRE(want.size() == got.size());
            for (std::size_t i = 0; i < want.size(); ++i) {
                CHECK(std::equal(want[i].values().begin(), want[i].values().end(), got[i].values().begin()));
            }
        }
        CHECK(serialize_checkpoint(back) == bytes);
    }
}

TEST_CASE("a shared bundle keeps its mode") {
    auto cfg = testing::tiny_config();
    Checkpoint ck(Model(cfg.model, 1));
    ck.config = cfg;
    ck.bundle = attach_shared(ck.model, 2, 1.0, 4);
    auto back = deserialize_checkpoint(serialize_checkpoint(ck));
    CHECK(back.bundle->mode() == BundleMode::shared);
}

TEST_CASE("malformed checkpoints are rejected") {
    const auto bytes = serialize_checkpoint(sample_checkpoint(true));
    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(deserialize_checkpoint(bad), IoError);
    bad = bytes;
    bad[8] = 9;  // version
    CHECK_THROWS_AS(deserialize_checkpoint(bad), IoError);
    for (std::size_t cut : {std::size_t{4}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
        CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, cut)), IoError);
    }
    CHECK_THROWS_AS(deserialize_checkpoint(bytes + "x"), IoError);
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/ck.bin"), IoError);
}

TEST_CASE("checkpoints save and load through files") {
    auto ck = sample_checkpoint(false);
    const std::string path = "clu_test_ckpt.bin";
    save_checkpoint(ck, path);
    auto back = load_checkpoint(path);
    CHECK(parameters_equal(back.model, ck.model));
    std::remove(path.c_str());
}
