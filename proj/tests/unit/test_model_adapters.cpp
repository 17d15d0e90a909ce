#include "doctest.h"

#include "../support/gradcheck.hpp"

#include "clu/adapters.hpp"
#include "clu/errors.hpp"
#include "clu/model.hpp"

#include <cmath>

using namespace clu;
using clu::testing::random_tensor;

namespace {

BackboneConfig small_backbone() {
    BackboneConfig c;
    c.input_dim = 5;
    c.seq_len = 3;
    c.depth = 2;
    c.embed_dim = 8;
    c.heads = 2;
    c.mlp_ratio = 2;
    c.num_class_slots = 6;
    return c;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
    }
    return m;
}

void randomize_b(PathwayBundle& bundle, Rng& rng) {
    for (std::size_t l = 0; l < bundle.num_layers(); ++l) {
        for (auto p : kPathways) {
            if (auto* a = bundle.adapter(l, p)) {
                for (auto& v : a->b.mutable_values()) {
                    v = 0.3 * rng.normal();
                }
            }
        }
    }
}

}  // namespace

TEST_CASE("forward and embed shapes") {
    Model m(small_backbone(), 1);
    Rng rng(2);
    Tensor x = random_tensor(rng, {4, 3, 5});
    CHECK(m.forward(x).shape() == Shape{4, 6});
    CHECK(m.embed(x).shape() == Shape{4, 8});
    CHECK(m.num_adapted_layers() == 8);
    CHECK(m.adapted_layer_name(5) == "blocks.1.attn.k");
}

TEST_CASE("logits are the head applied to the embedding") {
    Model m(small_backbone(), 3);
    Rng rng(4);
    Tensor x = random_tensor(rng, {5, 3, 5});
    CHECK(max_abs_diff(m.forward(x), m.head_logits(m.embed(x))) <= 1e-12);
}

TEST_CASE("embedding does not depend on the head") {
    Model m(small_backbone(), 3);
    Rng rng(4);
    Tensor x = random_tensor(rng, {2, 3, 5});
    Tensor before = m.embed(x);
    for (auto& row : m.head().rows) {
        for (auto& v : row.mutable_values()) {
            v = rng.normal();
        }
    }
    CHECK(max_abs_diff(before, m.embed(x)) == 0.0);
}

TEST_CASE("copies are deep and frozen clones match the source") {
    Model m(small_backbone(), 5);
    Model c = m;
    Model f = m.clone_frozen();
    CHECK(parameters_equal(m, c));
    CHECK(parameters_equal(m, f));
    for (const auto& p : f.parameters()) {
        CHECK_FALSE(p.tensor.requires_grad());
    }
    c.adapted_layer(0).weight.mutable_values()[0] += 1.0;
    CHECK_FALSE(parameters_equal(m, c));
    CHECK(parameter_hash(m) == parameter_hash(f));
    CHECK(parameter_hash(m) != parameter_hash(c));
}

TEST_CASE("config validation and head capacity") {
    auto c = small_backbone();
    c.heads = 3;
    CHECK_THROWS_AS(Model(c, 0), ConfigError);
    Model m(small_backbone(), 0);
    CHECK_THROWS_AS(m.set_active_classes({0, 6}), ConfigError);
    m.set_active_classes({1, 2});
    CHECK(m.active_classes() == ClassSet{1, 2});
}

TEST_CASE("predict only considers active rows") {
    Model m(small_backbone(), 7);
    Rng rng(8);
    Tensor x = random_tensor(rng, {16, 3, 5});
    m.set_active_classes({2, 4});
    for (auto p : predict(m, x)) {
        CHECK((p == 2 || p == 4));
    }
}

TEST_CASE("pretrain fits a tiny separable problem") {
    auto cfg = small_backbone();
    Model m(cfg, 11);
    Rng rng(12);
    LabeledDataset d;
    d.seq_len = 3;
    d.input_dim = 5;
    for (int c = 0; c < 3; ++c) {
        for (int i = 0; i < 12; ++i) {
            std::vector<double> x(15);
            for (std::size_t j = 0; j < x.size(); ++j) {
                x[j] = (j % 3 == static_cast<std::size_t>(c) ? 2.0 : 0.0) + 0.1 * rng.normal();
            }
            d.push_back(x, c, static_cast<std::uint64_t>(c * 100 + i));
        }
    }
    PretrainOptions opt;
    opt.epochs = 25;
    opt.batch_size = 8;
    auto losses = pretrain(m, d, opt);
    REQUIRE(losses.size() == 25);
    CHECK(losses.back() < losses.front());
    CHECK(m.active_classes() == ClassSet{0, 1, 2});
    std::vector<std::size_t> idx(d.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        idx[i] = i;
    }
    auto pred = predict(m, d.batch(idx));
    std::size_t ok = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        ok += pred[i] == d.labels[i] ? 1 : 0;
    }
    CHECK(static_cast<double>(ok) / pred.size() > 0.9);
}

TEST_CASE("a fresh bundle leaves the forward unchanged and freezes the backbone") {
    Model m(small_backbone(), 13);
    Model base = m;
    auto bundle = attach(m, AdapterConfig{4, 2, 1.0}, 1);
    Rng rng(14);
    Tensor x = random_tensor(rng, {3, 3, 5});
    CHECK(max_abs_diff(forward(m, x, bundle, PathwayGate::all()), base.forward(x)) == 0.0);
    for (const auto& p : m.backbone_parameters()) {
        CHECK_FALSE(p.tensor.requires_grad());
    }
    CHECK(bundle.num_layers() == 8);
    CHECK(bundle.adapter(0, Pathway::retain)->rank == 4);
    CHECK(bundle.adapter(0, Pathway::forget)->rank == 2);
}

TEST_CASE("gates select pathways without touching parameters") {
    Model m(small_backbone(), 15);
    Model base = m;
    auto bundle = attach(m, AdapterConfig{2, 2, 1.0}, 2);
    Rng rng(16);
    randomize_b(bundle, rng);
    Tensor x = random_tensor(rng, {2, 3, 5});
    CHECK(max_abs_diff(forward(m, x, bundle, PathwayGate::none()), base.forward(x)) == 0.0);
    CHECK(max_abs_diff(forward(m, x, bundle, PathwayGate::all()), base.forward(x)) > 1e-6);
    CHECK(max_abs_diff(forward(m, x, bundle, PathwayGate::all().without(Pathway::forget)),
                       forward(m, x, bundle, PathwayGate::all())) > 1e-9);
    CHECK(parameters_equal(m, base));
}

TEST_CASE("merged forward equals the adapter forward (additive)") {
    Rng rng(17);
    for (int trial = 0; trial < 10; ++trial) {
        Model m(small_backbone(), 100 + trial);
        auto bundle = attach(m, AdapterConfig{3, 2, rng.uniform(0.5, 2.0)}, trial);
        randomize_b(bundle, rng);
        Tensor probe = random_tensor(rng, {32, 3, 5});
        Tensor want = forward(m, probe, bundle, PathwayGate::all());
        auto rep = merge(bundle, m, SignConvention::additive, &probe);
        CHECK(rep.checked);
        CHECK(rep.consistent);
        CHECK(max_abs_diff(m.forward(probe), want) <= 1e-8);
        CHECK_FALSE(bundle.attached());
    }
}

TEST_CASE("subtracting the forget term is reported as inconsistent with training") {
    Rng rng(18);
    Model m(small_backbone(), 19);
    auto bundle = attach(m, AdapterConfig{2, 2, 1.0}, 3);
    randomize_b(bundle, rng);
    Tensor probe = random_tensor(rng, {8, 3, 5});
    auto rep = merge(bundle, m, SignConvention::subtractive_forget, &probe);
    CHECK(rep.checked);
    CHECK_FALSE(rep.consistent);
    CHECK(rep.max_abs_deviation > 1e-8);
}

TEST_CASE("set_trainable exposes exactly one pathway and the named head rows") {
    Model m(small_backbone(), 20);
    auto bundle = attach(m, AdapterConfig{2, 1, 1.0}, 4);
    for (auto p : kPathways) {
        set_trainable(bundle, m, p, {1, 3});
        for (auto q : kPathways) {
            for (const auto& t : bundle.tensors(q)) {
                CHECK(t.requires_grad() == (p == q));
            }
        }
        for (std::size_t c = 0; c < m.head().rows.size(); ++c) {
            CHECK(m.head().rows[c].requires_grad() == (c == 1 || c == 3));
        }
        CHECK(trainable_tensors(bundle, m).size() == bundle.tensors(p).size() + 2);
    }
}

TEST_CASE("tunable ratio counts adapters plus trainable head rows") {
    auto cfg = small_backbone();
    Model m(cfg, 21);
    auto bundle = attach(m, AdapterConfig{2, 1, 1.0}, 5);
    std::size_t adapters = 0;
    for (std::size_t l = 0; l < m.num_adapted_layers(); ++l) {
        const auto& w = m.adapted_layer(l).weight;
        adapters += 2 * (w.dim(0) + w.dim(1)) * 2 + (w.dim(0) + w.dim(1)) * 1;
    }
    CHECK(bundle.parameter_count() == adapters);
    const double total = static_cast<double>(m.parameter_count() + adapters);
    const double expect = (adapters + 2.0 * (cfg.embed_dim + 1)) / total;
    CHECK(tunable_ratio(m, bundle, {0, 1}) == doctest::Approx(expect));

    double last = 0.0;
    for (std::size_t r : {1u, 2u, 4u, 8u}) {
        Model mm(cfg, 21);
        auto b = attach(mm, AdapterConfig{r, std::max<std::size_t>(1, r / 2), 1.0}, 5);
        const double t = tunable_ratio(mm, b, {0, 1});
        CHECK(t > last);
        last = t;
    }
}

TEST_CASE("a shared bundle has one adapter per layer") {
    Model m(small_backbone(), 22);
    auto bundle = attach_shared(m, 4, 1.0, 6);
    CHECK(bundle.mode() == BundleMode::shared);
    CHECK(bundle.adapters(0).size() == 1);
    CHECK(bundle.adapter(0, Pathway::forget) == bundle.adapter(0, Pathway::retain));
}

TEST_CASE("adapter rank must fit the layer") {
    Model m(small_backbone(), 23);
    CHECK_THROWS(attach(m, AdapterConfig{0, 1, 1.0}, 0));
    CHECK_THROWS(attach(m, AdapterConfig{100, 1, 1.0}, 0));
}

TEST_CASE("pathway names and gate parsing round-trip") {
    for (auto p : kPathways) {
        CHECK(parse_pathway(pathway_name(p)) == p);
    }
    CHECK_THROWS(parse_pathway("bogus"));
}
