#pragma once

#include "clu/dataset.hpp"
#include "clu/model.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace clu {

// Fraction of samples whose label is in `classes` that are predicted
// correctly (argmax over the active head rows). ContractError when no sample
// qualifies.
double accuracy(const Model& model, const LabeledDataset& data, const ClassSet& classes,
                const LayerHook* hook = nullptr);

// Max softmax probability over the active head rows, per sample.
std::vector<double> max_softmax_confidence(const Model& model, const LabeledDataset& data,
                                           const LayerHook* hook = nullptr);

struct MiaConfig {
    // 0 sweeps every distinct observed value; otherwise an evenly spaced grid.
    std::size_t resolution = 0;
};

// Best balanced accuracy of the rule "member iff confidence >= tau" over the
// threshold sweep. 0.5 means the two sets cannot be told apart this way.
double mia_rate(std::span<const double> member, std::span<const double> nonmember, const MiaConfig& config = {});
// Confidence attack on a model: forget-set samples are members, samples of
// never-trained classes are non-members. The two sets must not share classes.
double mia_rate(const Model& model, const LabeledDataset& forget_set, const LabeledDataset& unseen_set,
                const MiaConfig& config = {}, const LayerHook* hook = nullptr);

// Mean over `data` of KL(oracle || model), both softmaxed over `classes`,
// which must be active on both heads. `hook` applies to the model only.
double kl_to_oracle(const Model& model, const Model& oracle, const LabeledDataset& data, const ClassSet& classes,
                    const LayerHook* hook = nullptr);

struct MetricsReport {
    int task = 0;
    double tunable_ratio = 0.0;
    double acc_f = 0.0;
    double acc_r = 0.0;
    double acc_n = 0.0;
    double acc_o = 0.0;
    double kl = 0.0;
    double mia = 0.5;
    std::size_t n_forget = 0;
    std::size_t n_retain = 0;
    std::size_t n_new = 0;
    std::optional<double> oracle_acc_o;

    std::string to_json() const;
};

struct MetricInputs {
    int task = 0;
    double tunable_ratio = 0.0;
    double acc_f = 0.0, acc_r = 0.0, acc_n = 0.0;
    std::size_t n_forget = 0, n_retain = 0, n_new = 0;
    double kl = 0.0;
    double mia = 0.5;
    std::optional<double> oracle_acc_o;
};

// Fills acc_o as the sample-weighted mean of acc_r and acc_n and checks the
// invariants (rates in [0,1], KL >= 0, acc_o between acc_r and acc_n).
MetricsReport assemble_report(const MetricInputs& in);

std::string csv_header();
std::string csv_row(const MetricsReport& r);

}  // namespace clu
