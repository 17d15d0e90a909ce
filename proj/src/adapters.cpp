#include "clu/adapters.hpp"

#include "clu/errors.hpp"
#include "clu/ops.hpp"
#include "clu/random.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

namespace clu {

std::string_view pathway_name(Pathway p) {
    switch (p) {
        case Pathway::retain:
            return "retain";
        case Pathway::novel:
            return "new";
        case Pathway::forget:
            return "forget";
    }
    return "?";
}

Pathway parse_pathway(std::string_view name) {
    for (auto p : kPathways) {
        if (pathway_name(p) == name) {
            return p;
        }
    }
    throw ConfigError("unknown pathway '" + std::string(name) + "'");
}

const LoraAdapter* PathwayBundle::adapter(std::size_t layer, Pathway p) const {
    return const_cast<PathwayBundle*>(this)->adapter(layer, p);
}

LoraAdapter* PathwayBundle::adapter(std::size_t layer, Pathway p) {
    if (layer >= layers_.size()) {
        throw IndexError("bundle layer " + std::to_string(layer) + " out of range");
    }
    auto& slots = layers_[layer].slots;
    auto& slot = mode_ == BundleMode::shared ? slots[0] : slots[static_cast<std::size_t>(p)];
    return slot ? &*slot : nullptr;
}

std::vector<const LoraAdapter*> PathwayBundle::adapters(std::size_t layer) const {
    std::vector<const LoraAdapter*> out;
    for (const auto& slot : layers_.at(layer).slots) {
        if (slot) {
            out.push_back(&*slot);
        }
    }
    return out;
}

std::vector<Tensor> PathwayBundle::tensors(Pathway p) const {
    std::vector<Tensor> out;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        if (const auto* a = adapter(l, p)) {
            out.push_back(a->a);
            out.push_back(a->b);
        }
    }
    return out;
}

std::vector<Tensor> PathwayBundle::all_tensors() const {
    std::vector<Tensor> out;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        for (const auto* a : adapters(l)) {
            out.push_back(a->a);
            out.push_back(a->b);
        }
    }
    return out;
}

std::size_t PathwayBundle::parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : all_tensors()) {
        n += t.numel();
    }
    return n;
}

std::size_t PathwayBundle::parameter_count(Pathway p) const {
    std::size_t n = 0;
    for (const auto& t : tensors(p)) {
        n += t.numel();
    }
    return n;
}

namespace {

LoraAdapter make_adapter(std::size_t d, std::size_t k, std::size_t rank, Pathway p, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(k));
    std::vector<double> a(rank * k);
    for (auto& v : a) {
        v = rng.uniform(-bound, bound);
    }
    return {Tensor::from({rank, k}, std::move(a)), Tensor::zeros({d, rank}), rank, p};
}

void check_rank(const Model& model, std::size_t rank) {
    if (rank == 0) {
        throw ConfigError("adapter rank must be at least 1");
    }
    for (std::size_t l = 0; l < model.num_adapted_layers(); ++l) {
        const auto& w = model.adapted_layer(l).weight;
        const std::size_t limit = std::min(w.dim(0), w.dim(1));
        if (rank > limit) {
            throw ConfigError("adapter rank " + std::to_string(rank) + " exceeds min(d, k) = " +
                              std::to_string(limit) + " of " + model.adapted_layer_name(l));
        }
    }
}

}  // namespace

PathwayBundle attach(Model& model, const AdapterConfig& config, std::uint64_t seed) {
    check_rank(model, config.rank_retain_new);
    check_rank(model, config.rank_forget);
    if (!(config.scaling >= 0.0) || !std::isfinite(config.scaling)) {
        throw ConfigError("adapter scaling must be finite and non-negative");
    }
    model.set_requires_grad(false);
    Rng rng(derive_seed(seed, {0x6c6f7261ULL}));
    std::vector<PathwayBundle::Layer> layers(model.num_adapted_layers());
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& w = model.adapted_layer(l).weight;
        const std::size_t d = w.dim(0), k = w.dim(1);
        for (auto p : kPathways) {
            const std::size_t r = p == Pathway::forget ? config.rank_forget : config.rank_retain_new;
            layers[l].slots[static_cast<std::size_t>(p)] = make_adapter(d, k, r, p, rng);
        }
    }
    return PathwayBundle(BundleMode::tri_pathway, config.scaling, std::move(layers));
}

PathwayBundle attach_shared(Model& model, std::size_t rank, double scaling, std::uint64_t seed) {
    check_rank(model, rank);
    model.set_requires_grad(false);
    Rng rng(derive_seed(seed, {0x6c6f7261ULL, 0x736861726564ULL}));
    std::vector<PathwayBundle::Layer> layers(model.num_adapted_layers());
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& w = model.adapted_layer(l).weight;
        layers[l].slots[0] = make_adapter(w.dim(0), w.dim(1), rank, Pathway::retain, rng);
    }
    return PathwayBundle(BundleMode::shared, scaling, std::move(layers));
}

std::optional<Tensor> BundleHook::delta(std::size_t layer, const Tensor& input) const {
    if (gate_.empty() || !bundle_.attached() || layer >= bundle_.num_layers()) {
        return std::nullopt;
    }
    std::optional<Tensor> acc;
    if (bundle_.mode() == BundleMode::shared) {
        const auto* a = bundle_.adapter(layer, Pathway::retain);
        acc = linear(linear(input, a->a), a->b);
    } else {
        for (auto p : kPathways) {
            if (!gate_.enabled(p)) {
                continue;
            }
            const auto* a = bundle_.adapter(layer, p);
            Tensor term = linear(linear(input, a->a), a->b);
            acc = acc ? add(*acc, term) : term;
        }
    }
    if (!acc) {
        return std::nullopt;
    }
    return scale(*acc, bundle_.scaling());
}

Tensor forward(const Model& model, const Tensor& x, const PathwayBundle& bundle, PathwayGate gate) {
    BundleHook hook(bundle, gate);
    return model.forward(x, &hook);
}

Tensor embed(const Model& model, const Tensor& x, const PathwayBundle& bundle, PathwayGate gate) {
    BundleHook hook(bundle, gate);
    return model.embed(x, &hook);
}

void set_trainable(PathwayBundle& bundle, Model& model, Pathway pathway, const ClassSet& head_rows) {
    model.set_requires_grad(false);
    for (auto& t : bundle.all_tensors()) {
        t.set_requires_grad(false);
    }
    for (auto& t : bundle.tensors(pathway)) {
        t.set_requires_grad(true);
    }
    auto& rows = model.head().rows;
    for (auto c : head_rows) {
        if (c < 0 || static_cast<std::size_t>(c) >= rows.size()) {
            throw IndexError("head row " + std::to_string(c) + " out of range");
        }
        rows[static_cast<std::size_t>(c)].set_requires_grad(true);
    }
}

std::vector<Tensor> trainable_tensors(const PathwayBundle& bundle, const Model& model) {
    std::vector<Tensor> out;
    for (const auto& t : bundle.all_tensors()) {
        if (t.requires_grad()) {
            out.push_back(t);
        }
    }
    for (const auto& p : model.parameters()) {
        if (p.tensor.requires_grad()) {
            out.push_back(p.tensor);
        }
    }
    return out;
}

MergeReport merge(PathwayBundle& bundle, Model& model, SignConvention convention, const Tensor* probe,
                  double tolerance) {
    if (!bundle.attached()) {
        throw ContractError("merge: bundle already merged");
    }
    if (bundle.num_layers() != model.num_adapted_layers()) {
        throw ConfigError("merge: bundle does not match the model's adapted layers");
    }
    MergeReport report;
    std::vector<double> before;
    if (probe != nullptr) {
        Tensor out = forward(model, *probe, bundle, PathwayGate::all());
        before.assign(out.values().begin(), out.values().end());
    }
    const double s = bundle.scaling();
    for (std::size_t l = 0; l < bundle.num_layers(); ++l) {
        auto& w = model.adapted_layer(l).weight;
        const std::size_t d = w.dim(0), k = w.dim(1);
        auto wv = w.mutable_values();
        for (const auto* ad : bundle.adapters(l)) {
            double sign = 1.0;
            if (convention == SignConvention::subtractive_forget && bundle.mode() == BundleMode::tri_pathway &&
                ad->pathway == Pathway::forget) {
                sign = -1.0;
            }
            auto av = ad->a.values();
            auto bv = ad->b.values();
            const std::size_t r = ad->rank;
            for (std::size_t i = 0; i < d; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < r; ++j) {
                        acc += bv[i * r + j] * av[j * k + p];
                    }
                    wv[i * k + p] += sign * s * acc;
                }
            }
        }
    }
    bundle.mark_detached();
    for (auto& t : bundle.all_tensors()) {
        t.set_requires_grad(false);
    }
    if (probe != nullptr) {
        Tensor out = model.forward(*probe);
        auto after = out.values();
        double dev = 0.0;
        for (std::size_t i = 0; i < after.size(); ++i) {
            dev = std::max(dev, std::abs(after[i] - before[i]));
        }
        report.checked = true;
        report.max_abs_deviation = dev;
        report.consistent = dev <= tolerance;
        if (!report.consistent) {
            std::cerr << "warning: merged forward deviates from adapter forward by " << dev
                      << " (sign convention does not match the training-time forward)\n";
        }
    }
    return report;
}

double tunable_ratio(const Model& model, const PathwayBundle& bundle, const ClassSet& trainable_head_rows) {
    const std::size_t adapter = bundle.parameter_count();
    const std::size_t row = model.config().embed_dim + 1;
    const std::size_t head = trainable_head_rows.size() * row;
    const std::size_t total = model.parameter_count() + adapter;
    return static_cast<double>(adapter + head) / static_cast<double>(total);
}

}  // namespace clu
