#pragma once

#include "clu/adapters.hpp"
#include "clu/dataset.hpp"
#include "clu/metrics.hpp"
#include "clu/model.hpp"
#include "clu/training.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace clu {

struct SyntheticConfig {
    std::size_t num_classes = 24;
    std::size_t train_per_class = 100;
    std::size_t test_per_class = 50;
    std::size_t seq_len = 8;
    std::size_t input_dim = 16;
    double anchor_scale = 1.0;
    double noise = 0.5;
    std::uint64_t seed = 0;

    void validate() const;
};

// Each class owns a fixed anchor sequence; a sample is the anchor plus
// isotropic Gaussian noise. Every sample is derived from (seed, class,
// split, index) alone, so any subset regenerates bit-identically.
struct SyntheticDataset {
    SyntheticConfig config;
    LabeledDataset train;
    LabeledDataset test;

    static SyntheticDataset generate(const SyntheticConfig& config);
};

std::uint64_t sample_id(ClassId c, bool test, std::size_t index);

struct PlanConfig {
    std::size_t total_classes = 24;
    std::size_t window = 6;
    std::size_t stride = 2;
    std::size_t num_tasks = 6;
    ClassId first_class = 0;
};

struct SlidingWindowPlan {
    PlanConfig config;
    ClassSet initial;  // pretraining window
    std::vector<TaskSpec> tasks;

    // Every class touched by the plan; classes outside it are never trained.
    ClassSet used_classes() const;
    void validate() const;
};

SlidingWindowPlan make_plan(const PlanConfig& config);
SlidingWindowPlan make_plan(std::size_t total_classes, std::size_t window, std::size_t stride, std::size_t num_tasks);

struct ReplayBuffer {
    double ratio = 0.0;
    std::map<ClassId, std::vector<std::size_t>> indices;  // into the full retain set, ascending
    LabeledDataset data;
};

ReplayBuffer build_buffer(const LabeledDataset& full_retain, double ratio, std::uint64_t seed);

struct TrainedOracle {
    Model model;
    ClassSet seen_classes;  // every class present in the data it was trained on
    double test_accuracy = 0.0;
};

// Fresh model trained from scratch on retain ∪ new of `task` only.
TrainedOracle train_oracle(const TaskSpec& task, const SyntheticDataset& data, const BackboneConfig& backbone,
                           const PretrainOptions& options);

// Oracles keyed by a hash of everything that determines them.
class OracleCache {
public:
    std::shared_ptr<const TrainedOracle> get(const TaskSpec& task, const SyntheticDataset& data,
                                             const BackboneConfig& backbone, const PretrainOptions& options);
    std::size_t size() const;

private:
    mutable std::mutex mu_;
    std::map<std::uint64_t, std::shared_ptr<const TrainedOracle>> cache_;
};

enum class EngineMode : std::uint8_t { bid, standard_lora };
std::string_view engine_mode_name(EngineMode m);
EngineMode parse_engine_mode(std::string_view name);

struct ProtocolConfig {
    EngineMode mode = EngineMode::bid;
    AdapterConfig adapter;
    TrainConfig train;
    double buffer_ratio = 0.1;
    PretrainOptions oracle;
    MiaConfig mia;
    double forget_slack = 0.05;  // epsilon on the 1/C bound
};

struct TaskOutcome {
    TaskSpec spec;
    MetricsReport metrics;
    StepReport step;
    double pre_retain_acc = 0.0;
    double pre_forget_acc = 0.0;
    double oracle_acc_new = 0.0;
    double chance_bound = 0.0;                // 1/C_active + slack
    std::map<int, double> forgotten_accuracy;  // task index -> accuracy on its forget classes
    bool cumulative_ok = true;
};

// Builds the buffer, attaches a fresh bundle, adapts `model` in place and
// evaluates it. `earlier` lists the forget sets of preceding tasks.
TaskOutcome run_task(Model& model, const TaskSpec& task, const SyntheticDataset& data, const ProtocolConfig& config,
                     OracleCache& oracles, const std::map<int, ClassSet>& earlier, const ClassSet& unseen);

struct ProtocolResult {
    std::vector<TaskOutcome> tasks;
    Model final_model;
    bool full_replacement = false;  // final active window disjoint from pretraining classes
};

using TaskCallback = std::function<void(const TaskOutcome&, const Model&)>;

// Pretraining on the plan's initial window.
Model pretrain_initial(const SlidingWindowPlan& plan, const SyntheticDataset& data, const BackboneConfig& backbone,
                       const PretrainOptions& options, std::vector<double>* losses = nullptr);

ProtocolResult run_protocol(const SlidingWindowPlan& plan, const SyntheticDataset& data, const Model& pretrained,
                            const ProtocolConfig& config, OracleCache& oracles, const TaskCallback& on_task = {});

// Classes of the dataset the plan never touches (MIA negatives).
ClassSet unseen_classes(const SlidingWindowPlan& plan, const SyntheticDataset& data);

enum class SweepParam : std::uint8_t { rank, buffer_ratio, lambda_esc, pathway_gate };
std::string_view sweep_param_name(SweepParam p);
SweepParam parse_sweep_param(std::string_view name);

// "all", "none", "no_<pathway>", or '+'-joined pathway names.
PathwayGate parse_gate(std::string_view spec);

struct SweepRow {
    std::string value;
    MetricsReport metrics;
    double pre_forget_acc = 0.0;
};

struct SweepTable {
    SweepParam param = SweepParam::rank;
    std::vector<SweepRow> rows;

    std::string to_csv() const;
};

// One single-task (first task of the plan) run per value. pathway_gate
// trains once without merging and evaluates under each gate.
SweepTable sweep(SweepParam param, const std::vector<std::string>& values, const SlidingWindowPlan& plan,
                 const SyntheticDataset& data, const Model& pretrained, const ProtocolConfig& base,
                 OracleCache& oracles, std::size_t jobs = 1);

}  // namespace clu
