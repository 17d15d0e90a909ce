#include "doctest.h"

#include "../support/tiny.hpp"

#include "clu/errors.hpp"
#include "clu/harness.hpp"

#include <algorithm>

using namespace clu;

namespace {

ClassSet unite(const ClassSet& a, const ClassSet& b) {
    ClassSet out = a;
    out.insert(b.begin(), b.end());
    return out;
}

bool disjoint(const ClassSet& a, const ClassSet& b) {
    return std::none_of(a.begin(), a.end(), [&](ClassId c) { return b.count(c) > 0; });
}

}  // namespace

TEST_CASE("sliding window plans partition each previous window") {
    for (auto [total, window, stride, tasks] : {std::tuple{24u, 6u, 2u, 6u}, std::tuple{100u, 30u, 10u, 6u},
                                               std::tuple{12u, 6u, 2u, 3u}}) {
        auto plan = make_plan(total, window, stride, tasks);
        REQUIRE(plan.tasks.size() == tasks);
        CHECK(plan.initial.size() == window);
        ClassSet active = plan.initial;
        ClassSet ever_forgotten;
        for (const auto& t : plan.tasks) {
            CHECK(t.forget.size() == stride);
            CHECK(t.novel.size() == stride);
            CHECK(t.retain.size() == window - stride);
            CHECK(disjoint(t.forget, t.retain));
            CHECK(disjoint(t.forget, t.novel));
            CHECK(disjoint(t.retain, t.novel));
            CHECK(unite(t.forget, t.retain) == active);
            CHECK(disjoint(t.novel, active));
            CHECK(disjoint(t.novel, ever_forgotten));
            ever_forgotten.insert(t.forget.begin(), t.forget.end());
            active = t.active();
        }
        if (tasks * stride >= window) {
            CHECK(disjoint(active, plan.initial));
        }
        for (auto c : plan.used_classes()) {
            CHECK(static_cast<std::size_t>(c) < total);
        }
    }
}

TEST_CASE("impossible plans are configuration errors") {
    CHECK_THROWS_AS(make_plan(10, 6, 2, 6), ConfigError);
    CHECK_THROWS_AS(make_plan(24, 2, 2, 2), ConfigError);
    CHECK_THROWS_AS(make_plan(24, 6, 0, 2), ConfigError);
}

TEST_CASE("synthetic data is deterministic and subset-stable") {
    SyntheticConfig c;
    c.num_classes = 5;
    c.train_per_class = 7;
    c.test_per_class = 3;
    c.seq_len = 2;
    c.input_dim = 3;
    c.seed = 11;
    auto a = SyntheticDataset::generate(c);
    auto b = SyntheticDataset::generate(c);
    CHECK(a.train.features == b.train.features);
    CHECK(a.test.ids == b.test.ids);
    CHECK(a.train.size() == 35);
    CHECK(a.test.size() == 15);
    auto c2 = c;
    c2.num_classes = 3;
    auto small = SyntheticDataset::generate(c2);
    auto sub = a.train.filter({0, 1, 2});
    CHECK(sub.features == small.train.features);
    c2 = c;
    c2.seed = 12;
    CHECK(SyntheticDataset::generate(c2).train.features != a.train.features);
    CHECK(sample_id(3, false, 4) != sample_id(3, true, 4));
}

TEST_CASE("replay buffer draws a fixed fraction of every retain class") {
    SyntheticConfig c;
    c.num_classes = 4;
    c.train_per_class = 40;
    c.seq_len = 2;
    c.input_dim = 2;
    auto data = SyntheticDataset::generate(c);
    auto full = data.train.filter({1, 2, 3});
    auto buf = build_buffer(full, 0.1, 3);
    CHECK(buf.data.size() == 12);
    CHECK(buf.data.classes() == ClassSet{1, 2, 3});
    for (const auto& [cls, idx] : buf.indices) {
        CHECK(idx.size() == 4);
        for (auto i : idx) {
            CHECK(full.labels[i] == cls);
        }
    }
    // Every buffered sample comes from the full retain set.
    for (auto id : buf.data.ids) {
        CHECK(std::find(full.ids.begin(), full.ids.end(), id) != full.ids.end());
    }
    auto again = build_buffer(full, 0.1, 3);
    CHECK(again.data.ids == buf.data.ids);
    CHECK(build_buffer(full, 0.001, 3).data.size() == 3);
    CHECK_THROWS_AS(build_buffer(full, 0.0, 3), ConfigError);
    CHECK_THROWS_AS(build_buffer(full, 1.5, 3), ConfigError);
}

TEST_CASE("sweep parameters and gates parse") {
    CHECK(parse_sweep_param("lambda_esc") == SweepParam::lambda_esc);
    CHECK(sweep_param_name(SweepParam::buffer_ratio) == "buffer_ratio");
    CHECK_THROWS_AS(parse_sweep_param("depth"), ConfigError);
    CHECK(parse_gate("all") == PathwayGate::all());
    CHECK(parse_gate("none") == PathwayGate::none());
    CHECK(parse_gate("no_forget") == PathwayGate::all().without(Pathway::forget));
    CHECK(parse_gate("retain+new") == PathwayGate::only(Pathway::retain).with(Pathway::novel));
    CHECK_THROWS_AS(parse_gate("retain+bogus"), ConfigError);
    CHECK(parse_engine_mode(engine_mode_name(EngineMode::standard_lora)) == EngineMode::standard_lora);
}

TEST_CASE("tiny protocol run is well formed and deterministic") {
    auto cfg = testing::tiny_config();
    cfg.apply_seed(1);
    cfg.plan.num_tasks = 2;
    cfg.validate();
    auto data = SyntheticDataset::generate(cfg.dataset);
    auto plan = make_plan(cfg.plan);
    CHECK(unseen_classes(plan, data) == ClassSet{10, 11, 12, 13});
    auto model = pretrain_initial(plan, data, cfg.model, cfg.pretrain);
    CHECK(model.active_classes() == plan.initial);

    OracleCache cache;
    std::size_t calls = 0;
    auto result = run_protocol(plan, data, model, cfg.protocol, cache, [&](const TaskOutcome& o, const Model&) {
        ++calls;
        CHECK(o.spec.index == static_cast<int>(calls));
        CHECK(o.step.merge.consistent);
        CHECK(o.chance_bound == doctest::Approx(1.0 / 6.0 + cfg.protocol.forget_slack));
        CHECK(o.forgotten_accuracy.size() == calls);
        CHECK(o.metrics.acc_o >= std::min(o.metrics.acc_r, o.metrics.acc_n) - 1e-12);
        CHECK(o.metrics.oracle_acc_o.has_value());
    });
    CHECK(calls == 2);
    CHECK(cache.size() == 2);
    // Forgotten rows stay on the head.
    CHECK(result.final_model.active_classes() == ClassSet{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});

    OracleCache fresh;
    auto again = run_protocol(plan, data, model, cfg.protocol, fresh);
    CHECK(parameters_equal(result.final_model, again.final_model));
    CHECK(again.tasks[1].metrics.to_json() == result.tasks[1].metrics.to_json());

    // Reusing the cache does not change the oracle.
    auto cached = run_protocol(plan, data, model, cfg.protocol, cache);
    CHECK(cache.size() == 2);
    CHECK(cached.tasks[0].metrics.kl == result.tasks[0].metrics.kl);
}

TEST_CASE("sweeps produce one row per value") {
    auto cfg = testing::tiny_config();
    cfg.apply_seed(2);
    cfg.protocol.train.epochs = 1;
    auto data = SyntheticDataset::generate(cfg.dataset);
    auto plan = make_plan(cfg.plan);
    auto model = pretrain_initial(plan, data, cfg.model, cfg.pretrain);
    OracleCache cache;
    auto table = sweep(SweepParam::pathway_gate, {"all", "no_forget", "none"}, plan, data, model, cfg.protocol,
                       cache);
    REQUIRE(table.rows.size() == 3);
    CHECK(table.rows[1].value == "no_forget");
    // Every gate is evaluated on the same trained bundle.
    CHECK(table.rows[0].pre_forget_acc == table.rows[2].pre_forget_acc);
    auto csv = table.to_csv();
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
    auto ranks = sweep(SweepParam::rank, {"1", "2"}, plan, data, model, cfg.protocol, cache, 2);
    CHECK(ranks.rows[0].metrics.tunable_ratio < ranks.rows[1].metrics.tunable_ratio);
    CHECK_THROWS_AS(sweep(SweepParam::rank, {"x"}, plan, data, model, cfg.protocol, cache), ConfigError);
}
