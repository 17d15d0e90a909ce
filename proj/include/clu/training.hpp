#pragma once

#include "clu/adapters.hpp"
#include "clu/dataset.hpp"
#include "clu/escape.hpp"
#include "clu/model.hpp"

#include <functional>
#include <string>
#include <vector>

namespace clu {

struct LossWeights {
    double lambda_ce = 1.0;
    double lambda_emb = 1.0;
    double lambda_esc = 10.0;

    void validate() const;
};

struct PathwayRates {
    double retain = 1e-3;
    double novel = 1e-3;
    double forget = 1e-3;

    double of(Pathway p) const;
};

// Which CLU objectives run; a masked objective's update is skipped entirely.
struct ObjectiveMask {
    bool learn = true;
    bool unlearn = true;
};

enum class OptimizerKind : std::uint8_t { sgd, adam };
std::string_view optimizer_name(OptimizerKind k);
OptimizerKind parse_optimizer(std::string_view name);

struct TrainConfig {
    std::size_t epochs = 40;
    std::size_t batch_size = 32;
    PathwayRates lr;
    OptimizerKind optimizer = OptimizerKind::adam;  // one state per pathway
    double clip_norm = 0.0;  // per sub-update gradient norm cap, 0 = off
    LossWeights weights;
    std::uint64_t seed = 0;
    SignConvention sign = SignConvention::additive;
    ObjectiveMask mask;
    EscapeOptions escape;

    void validate() const;
};

// One CLU step. retain and forget partition the previous window; new
// classes have never been active.
struct TaskSpec {
    int index = 0;
    ClassSet forget;
    ClassSet retain;
    ClassSet novel;

    ClassSet active() const;  // retain ∪ new
    void validate() const;
};

struct AdaptData {
    LabeledDataset replay;  // buffer drawn from the full retain set
    LabeledDataset forget;
    LabeledDataset novel;
};

struct UpdateRecord {
    int task = 0;
    std::size_t epoch = 0;
    std::size_t batch = 0;
    Pathway pathway = Pathway::retain;
    double loss = 0.0;
    double update_norm = 0.0;
};

struct StepReport {
    int task = 0;
    std::size_t epochs = 0;
    std::size_t batches_per_epoch = 0;
    std::vector<double> retain_loss;  // one entry per batch, in order
    std::vector<double> forget_loss;
    std::vector<double> new_loss;
    std::vector<double> retain_update_norm;
    std::vector<double> forget_update_norm;
    std::vector<double> new_update_norm;
    std::vector<UpdateRecord> records;
    EscapeTarget escape;
    MergeReport merge;

    // JSON lines, one record per sub-update.
    void write_log(const std::string& path) const;
};

// λ_ce·CE(z_r, y_r) + λ_emb·MSE(e_r, e_t), CE over every head slot. Every
// label must lie in `retain_classes`.
Tensor retention_loss(const Tensor& logits, std::span<const ClassId> labels, const Tensor& student_emb,
                      const Tensor& teacher_emb, const LossWeights& weights, const ClassSet& retain_classes);

// Called around every sub-update; lets callers audit exactly what moved.
struct UpdateObserver {
    std::function<void(Pathway)> before;
    std::function<void(const UpdateRecord&)> after;
};

// The epoch loop without the final merge: escape target from the teacher's
// replay embeddings, then per batch a retain, forget and new update, each
// touching only its own adapter and head rows. New classes are activated on
// the head before training.
StepReport train_pathways(Model& model, const Model& teacher, PathwayBundle& bundle, const TaskSpec& task,
                          const AdaptData& data, const TrainConfig& config, const UpdateObserver* observer = nullptr);

// train_pathways followed by the merge. Requires a tri-pathway bundle.
StepReport adapt(Model& model, const Model& teacher, PathwayBundle& bundle, const TaskSpec& task,
                 const AdaptData& data, const TrainConfig& config, const UpdateObserver* observer = nullptr);

// Same protocol on a shared single-adapter bundle (no pathway isolation).
StepReport standard_lora_adapt(Model& model, const Model& teacher, PathwayBundle& bundle, const TaskSpec& task,
                               const AdaptData& data, const TrainConfig& config,
                               const UpdateObserver* observer = nullptr);

}  // namespace clu
