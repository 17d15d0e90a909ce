#include "clu/model.hpp"

#include "clu/errors.hpp"
#include "clu/ops.hpp"
#include "clu/optim.hpp"
#include "clu/random.hpp"

#include <cmath>
#include <cstring>
#include <numeric>

namespace clu {

void BackboneConfig::validate() const {
    if (input_dim == 0 || seq_len == 0 || embed_dim == 0 || mlp_ratio == 0 || num_class_slots == 0) {
        throw ConfigError("backbone dimensions must be positive");
    }
    if (depth < 1) {
        throw ConfigError("backbone depth must be at least 1");
    }
    if (heads == 0 || embed_dim % heads != 0) {
        throw ConfigError("embed_dim " + std::to_string(embed_dim) + " is not divisible by heads " +
                          std::to_string(heads));
    }
}

namespace {

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) {
        x = rng.uniform(-bound, bound);
    }
    return Tensor::from(std::move(shape), std::move(v));
}

LinearLayer make_linear(std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    return {uniform_tensor({out, in}, bound, rng), Tensor::zeros({out})};
}

LayerNormParams make_layernorm(std::size_t d) {
    return {Tensor::full({d}, 1.0), Tensor::zeros({d})};
}

}  // namespace

Model::Model(BackboneConfig config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(derive_seed(seed, {0x6d6f64656cULL}));
    const std::size_t d = config_.embed_dim;
    token_ = make_linear(config_.input_dim, d, rng);
    pos_ = uniform_tensor({config_.seq_len, d}, 0.1, rng);
    blocks_.reserve(config_.depth);
    for (std::size_t b = 0; b < config_.depth; ++b) {
        Block blk;
        blk.ln1 = make_layernorm(d);
        blk.q = make_linear(d, d, rng);
        blk.k = make_linear(d, d, rng);
        blk.v = make_linear(d, d, rng);
        blk.o = make_linear(d, d, rng);
        blk.ln2 = make_layernorm(d);
        blk.fc1 = make_linear(d, d * config_.mlp_ratio, rng);
        blk.fc2 = make_linear(d * config_.mlp_ratio, d, rng);
        blocks_.push_back(std::move(blk));
    }
    ln_f_ = make_layernorm(d);
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    head_.rows.reserve(config_.num_class_slots);
    for (std::size_t c = 0; c < config_.num_class_slots; ++c) {
        std::vector<double> row(d + 1, 0.0);
        for (std::size_t j = 0; j < d; ++j) {
            row[j] = rng.uniform(-bound, bound);
        }
        head_.rows.push_back(Tensor::from({d + 1}, std::move(row)));
    }
}

Model::Model(const Model& other)
    : config_(other.config_),
      token_(other.token_),
      pos_(other.pos_),
      blocks_(other.blocks_),
      ln_f_(other.ln_f_),
      head_(other.head_) {
    visit([](const std::string&, Tensor& t) {
        const bool rg = t.requires_grad();
        t = t.detach();
        t.set_requires_grad(rg);
    });
}

Model& Model::operator=(const Model& other) {
    if (this != &other) {
        Model copy(other);
        *this = std::move(copy);
    }
    return *this;
}

void Model::visit(const std::function<void(const std::string&, Tensor&)>& fn) {
    auto lin = [&](const std::string& prefix, LinearLayer& l) {
        fn(prefix + ".weight", l.weight);
        fn(prefix + ".bias", l.bias);
    };
    auto ln = [&](const std::string& prefix, LayerNormParams& p) {
        fn(prefix + ".gamma", p.gamma);
        fn(prefix + ".beta", p.beta);
    };
    lin("token", token_);
    fn("pos", pos_);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
        const std::string p = "blocks." + std::to_string(b);
        auto& blk = blocks_[b];
        ln(p + ".ln1", blk.ln1);
        lin(p + ".attn.q", blk.q);
        lin(p + ".attn.k", blk.k);
        lin(p + ".attn.v", blk.v);
        lin(p + ".attn.o", blk.o);
        ln(p + ".ln2", blk.ln2);
        lin(p + ".mlp.fc1", blk.fc1);
        lin(p + ".mlp.fc2", blk.fc2);
    }
    ln("ln_f", ln_f_);
    for (std::size_t c = 0; c < head_.rows.size(); ++c) {
        fn("head." + std::to_string(c), head_.rows[c]);
    }
}

std::vector<NamedTensor> Model::parameters() const {
    std::vector<NamedTensor> out;
    const_cast<Model*>(this)->visit([&](const std::string& name, Tensor& t) { out.push_back({name, t}); });
    return out;
}

std::vector<NamedTensor> Model::backbone_parameters() const {
    auto all = parameters();
    all.resize(all.size() - head_.rows.size());
    return all;
}

std::size_t Model::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) {
        n += p.tensor.numel();
    }
    return n;
}

void Model::set_requires_grad(bool flag) {
    visit([flag](const std::string&, Tensor& t) { t.set_requires_grad(flag); });
}

Model Model::clone_frozen() const {
    Model copy(*this);
    copy.set_requires_grad(false);
    return copy;
}

void Model::set_active_classes(ClassSet classes) {
    for (auto c : classes) {
        if (c < 0 || static_cast<std::size_t>(c) >= config_.num_class_slots) {
            throw ConfigError("class " + std::to_string(c) + " exceeds head capacity " +
                              std::to_string(config_.num_class_slots));
        }
    }
    head_.active_classes = std::move(classes);
}

LinearLayer& Model::adapted_layer(std::size_t index) {
    if (index >= num_adapted_layers()) {
        throw IndexError("adapted layer " + std::to_string(index) + " out of range");
    }
    auto& blk = blocks_[index / kProjectionsPerBlock];
    switch (static_cast<AttnProj>(index % kProjectionsPerBlock)) {
        case AttnProj::q:
            return blk.q;
        case AttnProj::k:
            return blk.k;
        case AttnProj::v:
            return blk.v;
        case AttnProj::o:
            break;
    }
    return blk.o;
}

const LinearLayer& Model::adapted_layer(std::size_t index) const {
    return const_cast<Model*>(this)->adapted_layer(index);
}

std::string Model::adapted_layer_name(std::size_t index) const {
    static constexpr const char* kNames[] = {"q", "k", "v", "o"};
    return "blocks." + std::to_string(index / kProjectionsPerBlock) + ".attn." +
           kNames[index % kProjectionsPerBlock];
}

Model::Outputs Model::run(const Tensor& x, const LayerHook* hook) const {
    if (x.rank() != 3 || x.dim(1) != config_.seq_len || x.dim(2) != config_.input_dim) {
        throw DimensionError("model input " + shape_str(x.shape()) + " does not match [batch x " +
                             std::to_string(config_.seq_len) + " x " + std::to_string(config_.input_dim) + "]");
    }
    const std::size_t batch = x.dim(0);
    const std::size_t seq = config_.seq_len;
    const std::size_t heads = config_.heads;
    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(config_.embed_dim / heads));

    auto project = [hook](const LinearLayer& layer, std::size_t index, const Tensor& in) {
        Tensor y = linear(in, layer.weight, layer.bias);
        if (hook != nullptr) {
            if (auto d = hook->delta(index, in)) {
                y = add(y, *d);
            }
        }
        return y;
    };

    Tensor h = reshape(x, {batch * seq, config_.input_dim});
    h = add_tiled(linear(h, token_.weight, token_.bias), pos_);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
        const auto& blk = blocks_[b];
        const std::size_t base = b * kProjectionsPerBlock;
        Tensor a = layernorm(h, blk.ln1.gamma, blk.ln1.beta);
        Tensor q = split_heads(project(blk.q, base + 0, a), batch, seq, heads);
        Tensor k = split_heads(project(blk.k, base + 1, a), batch, seq, heads);
        Tensor v = split_heads(project(blk.v, base + 2, a), batch, seq, heads);
        Tensor attn = softmax(scale(bmm(q, k, true), attn_scale), 2);
        Tensor ctx = merge_heads(bmm(attn, v, false), batch, seq, heads);
        h = add(h, project(blk.o, base + 3, ctx));
        Tensor m = layernorm(h, blk.ln2.gamma, blk.ln2.beta);
        h = add(h, linear(gelu(linear(m, blk.fc1.weight, blk.fc1.bias)), blk.fc2.weight, blk.fc2.bias));
    }
    Tensor pooled = mean_pool(layernorm(h, ln_f_.gamma, ln_f_.beta), seq);
    Tensor logits = head_logits(pooled);
    return {std::move(pooled), std::move(logits)};
}

Tensor Model::forward(const Tensor& x, const LayerHook* hook) const {
    return run(x, hook).logits;
}

Tensor Model::embed(const Tensor& x, const LayerHook* hook) const {
    return run(x, hook).embedding;
}

Tensor Model::head_logits(const Tensor& embedding) const {
    const std::size_t d = config_.embed_dim;
    const std::size_t classes = head_.rows.size();
    Tensor stacked = stack_rows<double>(head_.rows);
    std::vector<std::size_t> weight_cols(d);
    std::iota(weight_cols.begin(), weight_cols.end(), std::size_t{0});
    const std::size_t bias_col[] = {d};
    Tensor w = select_columns(stacked, std::span<const std::size_t>(weight_cols));
    Tensor b = reshape(select_columns(stacked, std::span<const std::size_t>(bias_col)), {classes});
    return linear(embedding, w, b);
}

std::vector<ClassId> predict(const Model& model, const Tensor& x, const LayerHook* hook) {
    const auto& active = model.active_classes();
    if (active.empty()) {
        throw ContractError("predict: model has no active classes");
    }
    Tensor logits = model.forward(x, hook);
    const std::size_t batch = logits.dim(0), slots = logits.dim(1);
    auto lv = logits.values();
    std::vector<ClassId> out(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        ClassId best = *active.begin();
        double best_v = lv[b * slots + static_cast<std::size_t>(best)];
        for (auto c : active) {
            const double v = lv[b * slots + static_cast<std::size_t>(c)];
            if (v > best_v) {
                best_v = v;
                best = c;
            }
        }
        out[b] = best;
    }
    return out;
}

std::uint64_t parameter_hash(const Model& model) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](const void* data, std::size_t n) {
        const auto* bytes = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& p : model.parameters()) {
        feed(p.name.data(), p.name.size());
        auto v = p.tensor.values();
        feed(v.data(), v.size() * sizeof(double));
    }
    for (auto c : model.active_classes()) {
        feed(&c, sizeof(c));
    }
    return h;
}

bool parameters_equal(const Model& a, const Model& b) {
    if (!(a.config() == b.config()) || a.active_classes() != b.active_classes()) {
        return false;
    }
    auto pa = a.parameters();
    auto pb = b.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) {
        auto va = pa[i].tensor.values();
        auto vb = pb[i].tensor.values();
        if (va.size() != vb.size() || std::memcmp(va.data(), vb.data(), va.size() * sizeof(double)) != 0) {
            return false;
        }
    }
    return true;
}

Tensor masked_cross_entropy(const Tensor& logits, std::span<const ClassId> labels, const ClassSet& classes) {
    std::vector<std::size_t> cols;
    cols.reserve(classes.size());
    for (auto c : classes) {
        cols.push_back(static_cast<std::size_t>(c));
    }
    std::vector<ClassId> local(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto it = classes.find(labels[i]);
        if (it == classes.end()) {
            throw ContractError("label " + std::to_string(labels[i]) + " is not among the trained classes");
        }
        local[i] = static_cast<ClassId>(std::distance(classes.begin(), it));
    }
    return softmax_cross_entropy(select_columns(logits, std::span<const std::size_t>(cols)),
                                 std::span<const ClassId>(local));
}

std::vector<double> pretrain(Model& model, const LabeledDataset& data, const PretrainOptions& options) {
    std::vector<double> epoch_loss;
    if (options.epochs == 0) {
        return epoch_loss;
    }
    if (data.empty()) {
        throw ContractError("pretrain: empty dataset");
    }
    if (options.batch_size == 0) {
        throw ConfigError("pretrain: batch_size must be positive");
    }
    const ClassSet classes = data.classes();
    model.set_active_classes(classes);
    model.set_requires_grad(true);
    std::vector<Tensor> params;
    for (auto& p : model.parameters()) {
        params.push_back(p.tensor);
    }
    Adam adam(options.lr);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
        Rng rng(derive_seed(options.seed, {0x7072657472ULL, epoch}));
        rng.shuffle(order);
        double total = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
            const std::size_t end = std::min(order.size(), start + options.batch_size);
            std::span<const std::size_t> idx(order.data() + start, end - start);
            auto labels = data.batch_labels(idx);
            Tensor loss = softmax_cross_entropy(model.forward(data.batch(idx)), labels);
            if (!std::isfinite(loss.item())) {
                model.set_requires_grad(false);
                throw TrainingError("pretrain: non-finite loss", step);
            }
            backward(loss);
            adam.step(params);
            zero_grads(params);
            total += loss.item();
            ++batches;
            ++step;
        }
        epoch_loss.push_back(total / static_cast<double>(batches));
    }
    model.set_requires_grad(false);
    return epoch_loss;
}

}  // namespace clu
