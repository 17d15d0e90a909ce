#include "clu/metrics.hpp"

#include "clu/errors.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace clu {

namespace {

constexpr std::size_t kEvalChunk = 256;

// Calls fn(first_index, logits) for consecutive chunks of the selected samples.
template <typename Fn>
void for_each_chunk(const Model& model, const LabeledDataset& data, std::span<const std::size_t> indices,
                    const LayerHook* hook, Fn&& fn) {
    for (std::size_t s = 0; s < indices.size(); s += kEvalChunk) {
        auto part = indices.subspan(s, std::min(kEvalChunk, indices.size() - s));
        fn(s, part, model.forward(data.batch(part), hook));
    }
}

std::vector<std::size_t> all_indices(const LabeledDataset& data) {
    std::vector<std::size_t> idx(data.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        idx[i] = i;
    }
    return idx;
}

// Softmax over the listed columns of one logit row.
void softmax_row(std::span<const double> row, const std::vector<std::size_t>& cols, std::vector<double>& out) {
    double mx = -std::numeric_limits<double>::infinity();
    for (auto c : cols) {
        mx = std::max(mx, row[c]);
    }
    double z = 0.0;
    out.resize(cols.size());
    for (std::size_t i = 0; i < cols.size(); ++i) {
        out[i] = std::exp(row[cols[i]] - mx);
        z += out[i];
    }
    for (auto& v : out) {
        v /= z;
    }
}

std::vector<std::size_t> columns(const ClassSet& classes, std::size_t slots) {
    std::vector<std::size_t> cols;
    for (auto c : classes) {
        if (c < 0 || static_cast<std::size_t>(c) >= slots) {
            throw IndexError("class " + std::to_string(c) + " outside the head");
        }
        cols.push_back(static_cast<std::size_t>(c));
    }
    return cols;
}

}  // namespace

double accuracy(const Model& model, const LabeledDataset& data, const ClassSet& classes, const LayerHook* hook) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (classes.count(data.labels[i]) != 0) {
            idx.push_back(i);
        }
    }
    if (idx.empty()) {
        throw ContractError("accuracy: no samples of the requested classes");
    }
    std::size_t correct = 0;
    for (std::size_t s = 0; s < idx.size(); s += kEvalChunk) {
        std::span<const std::size_t> part(idx.data() + s, std::min(kEvalChunk, idx.size() - s));
        auto pred = predict(model, data.batch(part), hook);
        for (std::size_t i = 0; i < part.size(); ++i) {
            correct += pred[i] == data.labels[part[i]] ? 1 : 0;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(idx.size());
}

std::vector<double> max_softmax_confidence(const Model& model, const LabeledDataset& data, const LayerHook* hook) {
    const auto cols = columns(model.active_classes(), model.config().num_class_slots);
    if (cols.empty()) {
        throw ContractError("confidence: model has no active classes");
    }
    std::vector<double> out(data.size());
    std::vector<double> p;
    auto idx = all_indices(data);
    for_each_chunk(model, data, idx, hook, [&](std::size_t first, std::span<const std::size_t> part, const Tensor& z) {
        const std::size_t slots = z.dim(1);
        for (std::size_t i = 0; i < part.size(); ++i) {
            softmax_row(z.values().subspan(i * slots, slots), cols, p);
            out[first + i] = *std::max_element(p.begin(), p.end());
        }
    });
    return out;
}

double mia_rate(std::span<const double> member, std::span<const double> nonmember, const MiaConfig& config) {
    if (member.empty() || nonmember.empty()) {
        throw ContractError("mia_rate: both confidence sets must be non-empty");
    }
    for (auto v : member) {
        if (!std::isfinite(v)) {
            throw ContractError("mia_rate: non-finite confidence");
        }
    }
    for (auto v : nonmember) {
        if (!std::isfinite(v)) {
            throw ContractError("mia_rate: non-finite confidence");
        }
    }
    std::vector<double> m(member.begin(), member.end()), n(nonmember.begin(), nonmember.end());
    std::sort(m.begin(), m.end());
    std::sort(n.begin(), n.end());

    std::vector<double> thresholds;
    if (config.resolution == 0) {
        thresholds = m;
        thresholds.insert(thresholds.end(), n.begin(), n.end());
        std::sort(thresholds.begin(), thresholds.end());
        thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
    } else {
        const double lo = std::min(m.front(), n.front()), hi = std::max(m.back(), n.back());
        for (std::size_t i = 0; i < config.resolution; ++i) {
            const double f = config.resolution == 1 ? 0.0 : static_cast<double>(i) / (config.resolution - 1);
            thresholds.push_back(lo + f * (hi - lo));
        }
    }
    const double mm = static_cast<double>(m.size()), nn = static_cast<double>(n.size());
    double best = 0.5;  // tau above every value: nobody flagged
    for (double tau : thresholds) {
        const auto m_below = std::lower_bound(m.begin(), m.end(), tau) - m.begin();
        const auto n_below = std::lower_bound(n.begin(), n.end(), tau) - n.begin();
        const double tpr = (mm - static_cast<double>(m_below)) / mm;
        const double tnr = static_cast<double>(n_below) / nn;
        best = std::max(best, 0.5 * (tpr + tnr));
    }
    return best;
}

double mia_rate(const Model& model, const LabeledDataset& forget_set, const LabeledDataset& unseen_set,
                const MiaConfig& config, const LayerHook* hook) {
    if (forget_set.empty() || unseen_set.empty()) {
        throw ContractError("mia_rate: forget and unseen sets must be non-empty");
    }
    for (auto c : forget_set.classes()) {
        if (unseen_set.classes().count(c) != 0) {
            throw ContractError("mia_rate: class " + std::to_string(c) + " appears in both forget and unseen sets");
        }
    }
    auto member = max_softmax_confidence(model, forget_set, hook);
    auto nonmember = max_softmax_confidence(model, unseen_set, hook);
    return mia_rate(member, nonmember, config);
}

double kl_to_oracle(const Model& model, const Model& oracle, const LabeledDataset& data, const ClassSet& classes,
                    const LayerHook* hook) {
    if (data.empty()) {
        throw ContractError("kl_to_oracle: empty evaluation set");
    }
    if (model.config().num_class_slots != oracle.config().num_class_slots) {
        throw ConfigError("kl_to_oracle: model and oracle heads differ in size");
    }
    const auto cols = columns(classes, model.config().num_class_slots);
    if (cols.empty()) {
        throw ContractError("kl_to_oracle: no classes to compare");
    }
    for (auto c : classes) {
        if (model.active_classes().count(c) == 0 || oracle.active_classes().count(c) == 0) {
            throw ContractError("kl_to_oracle: class " + std::to_string(c) + " is not active on both models");
        }
    }
    auto idx = all_indices(data);
    double total = 0.0;
    std::vector<double> p, q;
    for (std::size_t s = 0; s < idx.size(); s += kEvalChunk) {
        std::span<const std::size_t> part(idx.data() + s, std::min(kEvalChunk, idx.size() - s));
        Tensor x = data.batch(part);
        Tensor zm = model.forward(x, hook);
        Tensor zo = oracle.forward(x);
        const std::size_t slots = zm.dim(1);
        for (std::size_t i = 0; i < part.size(); ++i) {
            softmax_row(zo.values().subspan(i * slots, slots), cols, p);
            softmax_row(zm.values().subspan(i * slots, slots), cols, q);
            double kl = 0.0;
            for (std::size_t c = 0; c < p.size(); ++c) {
                if (p[c] > 0.0) {
                    kl += p[c] * (std::log(p[c]) - std::log(std::max(q[c], std::numeric_limits<double>::min())));
                }
            }
            total += kl;
        }
    }
    return std::max(0.0, total / static_cast<double>(data.size()));
}

MetricsReport assemble_report(const MetricInputs& in) {
    auto rate = [](double v, const char* what) {
        if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
            throw ContractError(std::string("metrics: ") + what + " = " + std::to_string(v) + " outside [0, 1]");
        }
    };
    rate(in.acc_f, "acc_f");
    rate(in.acc_r, "acc_r");
    rate(in.acc_n, "acc_n");
    rate(in.mia, "mia");
    if (!std::isfinite(in.kl) || in.kl < 0.0) {
        throw ContractError("metrics: KL must be finite and non-negative");
    }
    if (in.n_retain + in.n_new == 0) {
        throw ContractError("metrics: no retain or new samples to weight acc_o");
    }
    MetricsReport r;
    r.task = in.task;
    r.tunable_ratio = in.tunable_ratio;
    r.acc_f = in.acc_f;
    r.acc_r = in.acc_r;
    r.acc_n = in.acc_n;
    r.kl = in.kl;
    r.mia = in.mia;
    r.n_forget = in.n_forget;
    r.n_retain = in.n_retain;
    r.n_new = in.n_new;
    r.oracle_acc_o = in.oracle_acc_o;
    const double nr = static_cast<double>(in.n_retain), nn = static_cast<double>(in.n_new);
    r.acc_o = (in.acc_r * nr + in.acc_n * nn) / (nr + nn);
    const double lo = std::min(in.n_retain ? in.acc_r : in.acc_n, in.n_new ? in.acc_n : in.acc_r);
    const double hi = std::max(in.n_retain ? in.acc_r : in.acc_n, in.n_new ? in.acc_n : in.acc_r);
    if (r.acc_o < lo - 1e-12 || r.acc_o > hi + 1e-12) {
        throw ContractError("metrics: acc_o outside [acc_r, acc_n]");
    }
    return r;
}

std::string MetricsReport::to_json() const {
    nlohmann::json j = {{"task", task},         {"tunable_ratio", tunable_ratio},
                        {"acc_f", acc_f},       {"acc_r", acc_r},
                        {"acc_n", acc_n},       {"acc_o", acc_o},
                        {"kl", kl},             {"mia", mia},
                        {"n_forget", n_forget}, {"n_retain", n_retain},
                        {"n_new", n_new}};
    if (oracle_acc_o) {
        j["oracle_acc_o"] = *oracle_acc_o;
    }
    return j.dump(2);
}

std::string csv_header() {
    return "task,tunable_ratio,acc_f,acc_r,acc_n,acc_o,kl,mia,oracle_acc_o";
}

std::string csv_row(const MetricsReport& r) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), "%d,%.6g,%.6f,%.6f,%.6f,%.6f,%.6g,%.6f,", r.task, r.tunable_ratio, r.acc_f, r.acc_r,
                  r.acc_n, r.acc_o, r.kl, r.mia);
    std::string s = buf;
    if (r.oracle_acc_o) {
        std::snprintf(buf, sizeof(buf), "%.6f", *r.oracle_acc_o);
        s += buf;
    }
    return s;
}

}  // namespace clu
