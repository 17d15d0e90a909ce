#include "clu/training.hpp"

#include "clu/errors.hpp"
#include "clu/ops.hpp"
#include "clu/optim.hpp"
#include "clu/random.hpp"

#include "json.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>

namespace clu {

std::string_view optimizer_name(OptimizerKind k) {
    return k == OptimizerKind::sgd ? "sgd" : "adam";
}

OptimizerKind parse_optimizer(std::string_view name) {
    if (name == "sgd") {
        return OptimizerKind::sgd;
    }
    if (name == "adam") {
        return OptimizerKind::adam;
    }
    throw ConfigError("unknown optimizer '" + std::string(name) + "' (expected sgd or adam)");
}

void LossWeights::validate() const {
    auto ok = [](double v) { return std::isfinite(v) && v >= 0.0; };
    if (!ok(lambda_ce) || !ok(lambda_emb)) {
        throw ConfigError("loss weights lambda_ce and lambda_emb must be finite and non-negative");
    }
    if (!ok(lambda_esc)) {
        throw ConfigError("lambda_esc must be finite and non-negative");
    }
}

double PathwayRates::of(Pathway p) const {
    switch (p) {
        case Pathway::retain:
            return retain;
        case Pathway::novel:
            return novel;
        case Pathway::forget:
            return forget;
    }
    return 0.0;
}

void TrainConfig::validate() const {
    if (batch_size == 0) {
        throw ConfigError("batch_size must be positive");
    }
    for (auto p : kPathways) {
        const double r = lr.of(p);
        if (!std::isfinite(r) || r < 0.0) {
            throw ConfigError("learning rate for the " + std::string(pathway_name(p)) + " pathway is invalid");
        }
    }
    weights.validate();
    if (!std::isfinite(clip_norm) || clip_norm < 0.0) {
        throw ConfigError("clip_norm must be finite and non-negative");
    }
    if (escape.restarts == 0) {
        throw ConfigError("escape solver needs at least one restart");
    }
}

ClassSet TaskSpec::active() const {
    ClassSet out = retain;
    out.insert(novel.begin(), novel.end());
    return out;
}

void TaskSpec::validate() const {
    auto disjoint = [](const ClassSet& a, const ClassSet& b) {
        return std::none_of(a.begin(), a.end(), [&](ClassId c) { return b.count(c) != 0; });
    };
    if (!disjoint(forget, retain) || !disjoint(forget, novel) || !disjoint(retain, novel)) {
        throw ContractError("task " + std::to_string(index) + ": forget, retain and new class sets overlap");
    }
}

void StepReport::write_log(const std::string& path) const {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot open log file '" + path + "'");
    }
    for (const auto& r : records) {
        nlohmann::json j = {{"task", r.task},
                            {"epoch", r.epoch},
                            {"batch", r.batch},
                            {"pathway", pathway_name(r.pathway)},
                            {"loss", r.loss},
                            {"update_norm", r.update_norm}};
        out << j.dump() << '\n';
    }
    if (!out) {
        throw IoError("failed writing log file '" + path + "'");
    }
}

Tensor retention_loss(const Tensor& logits, std::span<const ClassId> labels, const Tensor& student_emb,
                      const Tensor& teacher_emb, const LossWeights& weights, const ClassSet& retain_classes) {
    for (auto y : labels) {
        if (retain_classes.count(y) == 0) {
            throw ContractError("retention loss: label " + std::to_string(y) + " is not a retain class");
        }
    }
    if (student_emb.shape() != teacher_emb.shape()) {
        throw DimensionError("retention loss: student embedding " + shape_str(student_emb.shape()) +
                             " vs teacher " + shape_str(teacher_emb.shape()));
    }
    std::optional<Tensor> total;
    if (weights.lambda_ce != 0.0) {
        total = scale(softmax_cross_entropy(logits, labels), weights.lambda_ce);
    }
    if (weights.lambda_emb != 0.0) {
        Tensor anchor = scale(mse(student_emb, teacher_emb.detach()), weights.lambda_emb);
        total = total ? add(*total, anchor) : anchor;
    }
    if (!total) {
        // Both weights zero: a constant that still carries the graph.
        total = scale(softmax_cross_entropy(logits, labels), 0.0);
    }
    return *total;
}

namespace {

ClassSet merged(const ClassSet& a, const ClassSet& b) {
    ClassSet out = a;
    out.insert(b.begin(), b.end());
    return out;
}

void check_subset(const LabeledDataset& data, const ClassSet& allowed, const char* what, int task) {
    for (auto c : data.classes()) {
        if (allowed.count(c) == 0) {
            throw ContractError("task " + std::to_string(task) + ": " + what + " data contains class " +
                                std::to_string(c) + " outside its class set");
        }
    }
}

Tensor embed_all(const Model& model, const LabeledDataset& data) {
    constexpr std::size_t kChunk = 256;
    const std::size_t n = data.size();
    const std::size_t d = model.config().embed_dim;
    std::vector<double> out(n * d);
    for (std::size_t s = 0; s < n; s += kChunk) {
        std::vector<std::size_t> idx;
        for (std::size_t i = s; i < std::min(n, s + kChunk); ++i) {
            idx.push_back(i);
        }
        Tensor e = model.embed(data.batch(idx));
        std::copy(e.values().begin(), e.values().end(), out.begin() + static_cast<std::ptrdiff_t>(s * d));
    }
    return Tensor::from({n, d}, std::move(out));
}

// Cycles a shuffled order so every batch is full even for short streams.
class Stream {
public:
    Stream(const LabeledDataset& data, std::uint64_t seed) : data_(data), seed_(seed) {
        order_.resize(data.size());
        for (std::size_t i = 0; i < order_.size(); ++i) {
            order_[i] = i;
        }
    }

    void start_epoch(std::size_t epoch) {
        for (std::size_t i = 0; i < order_.size(); ++i) {
            order_[i] = i;
        }
        Rng rng(derive_seed(seed_, {epoch}));
        rng.shuffle(order_);
    }

    std::vector<std::size_t> batch(std::size_t b, std::size_t size) const {
        std::vector<std::size_t> idx(size);
        for (std::size_t i = 0; i < size; ++i) {
            idx[i] = order_[(b * size + i) % order_.size()];
        }
        return idx;
    }

    const LabeledDataset& data() const { return data_; }

private:
    const LabeledDataset& data_;
    std::uint64_t seed_;
    std::vector<std::size_t> order_;
};

double finite_or_throw(const Tensor& loss, Pathway p, const UpdateRecord& at) {
    const double v = loss.item();
    if (!std::isfinite(v)) {
        throw TrainingError("non-finite " + std::string(pathway_name(p)) + " loss at task " + std::to_string(at.task) +
                                ", epoch " + std::to_string(at.epoch) + ", batch " + std::to_string(at.batch),
                            at.epoch * 1000000 + at.batch);
    }
    return v;
}

StepReport run_engine(Model& model, const Model& teacher, PathwayBundle& bundle, const TaskSpec& task,
                      const AdaptData& data, const TrainConfig& config, const UpdateObserver* observer) {
    config.validate();
    task.validate();
    if (!bundle.attached()) {
        throw ContractError("training needs an attached adapter bundle");
    }
    if (bundle.num_layers() != model.num_adapted_layers()) {
        throw ConfigError("adapter bundle does not match the model");
    }
    for (const auto& p : teacher.parameters()) {
        if (p.tensor.requires_grad()) {
            throw ContractError("teacher model must be frozen (" + p.name + " requires grad)");
        }
    }
    if (data.replay.empty()) {
        throw ContractError("task " + std::to_string(task.index) + ": empty replay buffer");
    }
    check_subset(data.replay, task.retain, "replay", task.index);
    check_subset(data.forget, task.forget, "forget", task.index);
    check_subset(data.novel, task.novel, "new", task.index);
    const bool unlearn = config.mask.unlearn;
    const bool learn = config.mask.learn;
    if (unlearn && data.forget.empty()) {
        throw ContractError("task " + std::to_string(task.index) + ": unlearning enabled but no forget data");
    }
    if (learn && data.novel.empty()) {
        throw ContractError("task " + std::to_string(task.index) + ": learning enabled but no new-class data");
    }

    // New classes join the head; earlier rows stay so prediction can still
    // land on a forgotten class and be counted.
    model.set_active_classes(merged(model.active_classes(), task.novel));

    StepReport report;
    report.task = task.index;
    report.epochs = config.epochs;
    if (unlearn) {
        Tensor e = embed_all(teacher, data.replay);
        auto cs = centroids(e, data.replay.labels);
        report.escape = compute_escape_target(cs, config.weights.lambda_esc, config.escape);
    }

    const std::size_t bsz = config.batch_size;
    auto batches_for = [bsz](const LabeledDataset& d) { return (d.size() + bsz - 1) / bsz; };
    std::size_t nb = batches_for(data.replay);
    if (unlearn) {
        nb = std::max(nb, batches_for(data.forget));
    }
    if (learn) {
        nb = std::max(nb, batches_for(data.novel));
    }
    report.batches_per_epoch = nb;

    const std::uint64_t base = derive_seed(config.seed, {0x74616bULL, static_cast<std::uint64_t>(task.index)});
    Stream retain_stream(data.replay, derive_seed(base, {0}));
    Stream forget_stream(data.forget, derive_seed(base, {1}));
    Stream new_stream(data.novel, derive_seed(base, {2}));

    BundleHook hook(bundle, PathwayGate::all());
    // One optimizer state per pathway; each only ever sees its own tensors.
    std::array<std::optional<Adam>, 3> adam;
    if (config.optimizer == OptimizerKind::adam) {
        for (auto p : kPathways) {
            adam[static_cast<std::size_t>(p)].emplace(config.lr.of(p));
        }
    }

    auto update = [&](Pathway p, const ClassSet& rows, UpdateRecord rec, auto&& make_loss) {
        if (observer != nullptr && observer->before) {
            observer->before(p);
        }
        set_trainable(bundle, model, p, rows);
        auto params = trainable_tensors(bundle, model);
        zero_grads(params);
        Tensor loss = make_loss();
        rec.pathway = p;
        rec.loss = finite_or_throw(loss, p, rec);
        backward(loss);
        clip_grad_norm(params, config.clip_norm);
        auto& opt = adam[static_cast<std::size_t>(p)];
        rec.update_norm = opt ? opt->step(params) : sgd_step(params, config.lr.of(p));
        zero_grads(params);
        report.records.push_back(rec);
        if (observer != nullptr && observer->after) {
            observer->after(rec);
        }
        return rec;
    };

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        retain_stream.start_epoch(epoch);
        forget_stream.start_epoch(epoch);
        new_stream.start_epoch(epoch);
        for (std::size_t b = 0; b < nb; ++b) {
            UpdateRecord at;
            at.task = task.index;
            at.epoch = epoch;
            at.batch = b;

            {
                auto idx = retain_stream.batch(b, bsz);
                Tensor x = data.replay.batch(idx);
                auto y = data.replay.batch_labels(idx);
                Tensor teacher_emb = teacher.embed(x);
                auto r = update(Pathway::retain, task.retain, at, [&] {
                    auto out = model.run(x, &hook);
                    return retention_loss(out.logits, y, out.embedding, teacher_emb, config.weights, task.retain);
                });
                report.retain_loss.push_back(r.loss);
                report.retain_update_norm.push_back(r.update_norm);
            }
            if (unlearn) {
                auto idx = forget_stream.batch(b, bsz);
                Tensor x = data.forget.batch(idx);
                auto r = update(Pathway::forget, task.forget, at,
                                [&] { return forget_loss(model.embed(x, &hook), report.escape.point); });
                report.forget_loss.push_back(r.loss);
                report.forget_update_norm.push_back(r.update_norm);
            }
            if (learn) {
                auto idx = new_stream.batch(b, bsz);
                Tensor x = data.novel.batch(idx);
                auto y = data.novel.batch_labels(idx);
                auto r = update(Pathway::novel, task.novel, at,
                                [&] { return softmax_cross_entropy(model.forward(x, &hook), y); });
                report.new_loss.push_back(r.loss);
                report.new_update_norm.push_back(r.update_norm);
            }
        }
    }

    model.set_requires_grad(false);
    for (auto& t : bundle.all_tensors()) {
        t.set_requires_grad(false);
    }
    return report;
}

Tensor merge_probe(const AdaptData& data) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < std::min<std::size_t>(8, data.replay.size()); ++i) {
        idx.push_back(i);
    }
    return data.replay.batch(idx);
}

}  // namespace

StepReport train_pathways(Model& model, const Model& teacher, PathwayBundle& bundle, const TaskSpec& task,
                          const AdaptData& data, const TrainConfig& config, const UpdateObserver* observer) {
    return run_engine(model, teacher, bundle, task, data, config, observer);
}

StepReport adapt(Model& model, const Model& teacher, PathwayBundle& bundle, const TaskSpec& task,
                 const AdaptData& data, const TrainConfig& config, const UpdateObserver* observer) {
    if (bundle.mode() != BundleMode::tri_pathway) {
        throw ContractError("adapt needs a tri-pathway bundle; use standard_lora_adapt for a shared adapter");
    }
    StepReport report = run_engine(model, teacher, bundle, task, data, config, observer);
    Tensor probe = merge_probe(data);
    report.merge = merge(bundle, model, config.sign, &probe);
    return report;
}

StepReport standard_lora_adapt(Model& model, const Model& teacher, PathwayBundle& bundle, const TaskSpec& task,
                               const AdaptData& data, const TrainConfig& config, const UpdateObserver* observer) {
    if (bundle.mode() != BundleMode::shared) {
        throw ContractError("standard_lora_adapt needs a shared bundle");
    }
    StepReport report = run_engine(model, teacher, bundle, task, data, config, observer);
    Tensor probe = merge_probe(data);
    report.merge = merge(bundle, model, SignConvention::additive, &probe);
    return report;
}

}  // namespace clu
