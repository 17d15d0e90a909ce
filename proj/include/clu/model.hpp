#pragma once

#include "clu/dataset.hpp"
#include "clu/tensor.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace clu {

struct BackboneConfig {
    std::size_t input_dim = 16;
    std::size_t seq_len = 8;
    std::size_t depth = 2;
    std::size_t embed_dim = 64;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 2;
    std::size_t num_class_slots = 24;

    void validate() const;
    bool operator==(const BackboneConfig&) const = default;
};

struct LinearLayer {
    Tensor weight;  // [out x in]
    Tensor bias;    // [out]
};

struct LayerNormParams {
    Tensor gamma;
    Tensor beta;
};

struct Block {
    LayerNormParams ln1;
    LinearLayer q, k, v, o;
    LayerNormParams ln2;
    LinearLayer fc1, fc2;
};

// Projection slots inside an attention block that may carry adapters.
enum class AttnProj : std::uint8_t { q = 0, k = 1, v = 2, o = 3 };
inline constexpr std::size_t kProjectionsPerBlock = 4;

// Supplies the low-rank correction for adapted layer `layer` given that
// layer's input; returns nullopt when nothing is attached or enabled.
class LayerHook {
public:
    virtual ~LayerHook() = default;
    virtual std::optional<Tensor> delta(std::size_t layer, const Tensor& input) const = 0;
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

// One row per class slot, holding the class weight vector followed by its bias.
struct ClassifierHead {
    std::vector<Tensor> rows;  // each [embed_dim + 1]
    ClassSet active_classes;
};

class Model {
public:
    Model(BackboneConfig config, std::uint64_t seed);

    // Deep copies: parameters are never shared between Model instances.
    Model(const Model& other);
    Model& operator=(const Model& other);
    Model(Model&&) noexcept = default;
    Model& operator=(Model&&) noexcept = default;

    const BackboneConfig& config() const { return config_; }

    // x: [batch x seq_len x input_dim] -> [batch x num_class_slots]
    Tensor forward(const Tensor& x, const LayerHook* hook = nullptr) const;
    // -> [batch x embed_dim], the pooled representation the head consumes.
    Tensor embed(const Tensor& x, const LayerHook* hook = nullptr) const;
    Tensor head_logits(const Tensor& embedding) const;

    struct Outputs {
        Tensor embedding;
        Tensor logits;
    };
    Outputs run(const Tensor& x, const LayerHook* hook = nullptr) const;

    std::size_t num_adapted_layers() const { return config_.depth * kProjectionsPerBlock; }
    LinearLayer& adapted_layer(std::size_t index);
    const LinearLayer& adapted_layer(std::size_t index) const;
    std::string adapted_layer_name(std::size_t index) const;

    ClassifierHead& head() { return head_; }
    const ClassifierHead& head() const { return head_; }
    const ClassSet& active_classes() const { return head_.active_classes; }
    void set_active_classes(ClassSet classes);

    // Backbone tensors (everything except the head), in a fixed order.
    std::vector<NamedTensor> backbone_parameters() const;
    // Backbone tensors followed by every head row ("head.<class>").
    std::vector<NamedTensor> parameters() const;
    std::size_t parameter_count() const;
    void set_requires_grad(bool flag);

    // Deep copy with every requires_grad cleared.
    Model clone_frozen() const;

private:
    void visit(const std::function<void(const std::string&, Tensor&)>& fn);

    BackboneConfig config_;
    LinearLayer token_;
    Tensor pos_;  // [seq_len x embed_dim]
    std::vector<Block> blocks_;
    LayerNormParams ln_f_;
    ClassifierHead head_;
};

// Argmax over active head rows for each sample.
std::vector<ClassId> predict(const Model& model, const Tensor& x, const LayerHook* hook = nullptr);

// Conservative hash of every parameter value and the active class set.
std::uint64_t parameter_hash(const Model& model);
bool parameters_equal(const Model& a, const Model& b);

struct PretrainOptions {
    std::size_t epochs = 30;
    double lr = 3e-3;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
};

// Full-parameter cross-entropy training over every head slot; the dataset's
// classes become the active rows. Returns the mean loss of each epoch.
std::vector<double> pretrain(Model& model, const LabeledDataset& data, const PretrainOptions& options);

// Cross-entropy restricted to the columns listed in `classes` (ascending).
Tensor masked_cross_entropy(const Tensor& logits, std::span<const ClassId> labels, const ClassSet& classes);

}  // namespace clu
