#pragma once

#include "clu/model.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

namespace clu {

enum class Pathway : std::uint8_t { retain = 0, novel = 1, forget = 2 };
inline constexpr std::array<Pathway, 3> kPathways = {Pathway::retain, Pathway::novel, Pathway::forget};

std::string_view pathway_name(Pathway p);  // "retain" | "new" | "forget"
Pathway parse_pathway(std::string_view name);

// Which adapter pathways contribute to a forward pass. Evaluation-time only;
// gating never touches parameters.
class PathwayGate {
public:
    constexpr PathwayGate() = default;
    static constexpr PathwayGate all() { return PathwayGate(0b111); }
    static constexpr PathwayGate none() { return PathwayGate(0); }
    static constexpr PathwayGate only(Pathway p) { return PathwayGate(bit(p)); }

    constexpr bool enabled(Pathway p) const { return (mask_ & bit(p)) != 0; }
    constexpr bool empty() const { return mask_ == 0; }
    constexpr PathwayGate with(Pathway p) const { return PathwayGate(mask_ | bit(p)); }
    constexpr PathwayGate without(Pathway p) const { return PathwayGate(mask_ & ~bit(p)); }
    constexpr bool operator==(const PathwayGate&) const = default;

private:
    constexpr explicit PathwayGate(std::uint8_t mask) : mask_(mask) {}
    static constexpr std::uint8_t bit(Pathway p) { return static_cast<std::uint8_t>(1u << static_cast<unsigned>(p)); }
    std::uint8_t mask_ = 0b111;
};

// Delta W = B A with B [d x r] zero-initialized and A [r x k] random.
struct LoraAdapter {
    Tensor a;
    Tensor b;
    std::size_t rank = 0;
    Pathway pathway = Pathway::retain;
};

struct AdapterConfig {
    std::size_t rank_retain_new = 8;
    std::size_t rank_forget = 4;
    double scaling = 1.0;
};

enum class BundleMode : std::uint8_t {
    tri_pathway,  // separate retain / new / forget adapters
    shared,       // one adapter per layer trained by every loss
};

class PathwayBundle {
public:
    struct Layer {
        std::array<std::optional<LoraAdapter>, 3> slots;  // indexed by Pathway
    };

    PathwayBundle(BundleMode mode, double scaling, std::vector<Layer> layers)
        : mode_(mode), scaling_(scaling), layers_(std::move(layers)) {}

    BundleMode mode() const { return mode_; }
    double scaling() const { return scaling_; }
    std::size_t num_layers() const { return layers_.size(); }

    // In shared mode every pathway resolves to the single shared adapter.
    const LoraAdapter* adapter(std::size_t layer, Pathway p) const;
    LoraAdapter* adapter(std::size_t layer, Pathway p);
    // Distinct adapters of one layer in retain, new, forget order.
    std::vector<const LoraAdapter*> adapters(std::size_t layer) const;

    // A and B tensors of a pathway across all layers, layer by layer.
    std::vector<Tensor> tensors(Pathway p) const;
    std::vector<Tensor> all_tensors() const;
    std::size_t parameter_count() const;
    std::size_t parameter_count(Pathway p) const;

    bool attached() const { return !detached_; }
    void mark_detached() { detached_ = true; }

    const std::vector<Layer>& layers() const { return layers_; }

private:
    BundleMode mode_;
    double scaling_;
    std::vector<Layer> layers_;
    bool detached_ = false;
};

// Adds a tri-pathway bundle to every attention projection and freezes the
// backbone. Forward output is unchanged until B moves off zero.
PathwayBundle attach(Model& model, const AdapterConfig& config, std::uint64_t seed);
// Single shared adapter per projection (the standard low-rank baseline).
PathwayBundle attach_shared(Model& model, std::size_t rank, double scaling, std::uint64_t seed);

// LayerHook view of a bundle under a gate.
class BundleHook final : public LayerHook {
public:
    BundleHook(const PathwayBundle& bundle, PathwayGate gate) : bundle_(bundle), gate_(gate) {}
    std::optional<Tensor> delta(std::size_t layer, const Tensor& input) const override;

private:
    const PathwayBundle& bundle_;
    PathwayGate gate_;
};

Tensor forward(const Model& model, const Tensor& x, const PathwayBundle& bundle, PathwayGate gate);
Tensor embed(const Model& model, const Tensor& x, const PathwayBundle& bundle, PathwayGate gate);

// Makes exactly the pathway's A/B tensors and the listed head rows trainable.
void set_trainable(PathwayBundle& bundle, Model& model, Pathway pathway, const ClassSet& head_rows);
// Every tensor (adapter or head row) that currently requires grad.
std::vector<Tensor> trainable_tensors(const PathwayBundle& bundle, const Model& model);

enum class SignConvention : std::uint8_t {
    additive,             // W + S(B_ret A_ret + B_new A_new + B_f A_f), matches training forward
    subtractive_forget,   // W + S(B_ret A_ret + B_new A_new - B_f A_f)
};

struct MergeReport {
    bool checked = false;
    double max_abs_deviation = 0.0;
    bool consistent = true;  // merged forward reproduced the adapter forward
};

// Folds the adapters into the base weights and detaches the bundle. When a
// probe batch is supplied the merged forward is compared with the adapter
// forward; a mismatch is reported (and logged), not hidden.
MergeReport merge(PathwayBundle& bundle, Model& model, SignConvention convention, const Tensor* probe = nullptr,
                  double tolerance = 1e-8);

// (adapter parameters + parameters of trainable head rows) / total parameters.
double tunable_ratio(const Model& model, const PathwayBundle& bundle, const ClassSet& trainable_head_rows);

}  // namespace clu
