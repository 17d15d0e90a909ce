#include "clu/harness.hpp"

#include "clu/errors.hpp"
#include "clu/random.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <sstream>
#include <thread>

namespace clu {

namespace {

constexpr std::uint64_t kTagAnchor = 0x616e63;
constexpr std::uint64_t kTagSample = 0x736d70;
constexpr std::uint64_t kTagBuffer = 0x627566;
constexpr std::uint64_t kTagOracle = 0x6f7263;
constexpr std::uint64_t kTagAttach = 0x617474;

ClassSet range_set(ClassId lo, ClassId hi) {
    ClassSet s;
    for (ClassId c = lo; c < hi; ++c) {
        s.insert(c);
    }
    return s;
}

ClassSet set_union(const ClassSet& a, const ClassSet& b) {
    ClassSet out = a;
    out.insert(b.begin(), b.end());
    return out;
}

bool intersects(const ClassSet& a, const ClassSet& b) {
    return std::any_of(a.begin(), a.end(), [&](ClassId c) { return b.count(c) != 0; });
}

struct Fnv {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    }
    template <typename T>
    void value(const T& v) {
        bytes(&v, sizeof(v));
    }
};

}  // namespace

void SyntheticConfig::validate() const {
    if (num_classes == 0 || train_per_class == 0 || test_per_class == 0) {
        throw ConfigError("synthetic dataset needs classes and samples in both splits");
    }
    if (seq_len == 0 || input_dim == 0) {
        throw ConfigError("synthetic dataset needs positive seq_len and input_dim");
    }
    if (!std::isfinite(noise) || noise < 0.0 || !std::isfinite(anchor_scale) || anchor_scale <= 0.0) {
        throw ConfigError("synthetic noise must be >= 0 and anchor_scale > 0");
    }
}

std::uint64_t sample_id(ClassId c, bool test, std::size_t index) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(c)) << 32) | (test ? (1ULL << 31) : 0ULL) |
           static_cast<std::uint64_t>(index);
}

SyntheticDataset SyntheticDataset::generate(const SyntheticConfig& config) {
    config.validate();
    SyntheticDataset out;
    out.config = config;
    const std::size_t width = config.seq_len * config.input_dim;
    for (auto* split : {&out.train, &out.test}) {
        split->seq_len = config.seq_len;
        split->input_dim = config.input_dim;
    }
    std::vector<double> anchor(width), x(width);
    for (std::size_t c = 0; c < config.num_classes; ++c) {
        Rng arng(derive_seed(config.seed, {kTagAnchor, c}));
        for (auto& v : anchor) {
            v = config.anchor_scale * arng.normal();
        }
        for (int split = 0; split < 2; ++split) {
            const std::size_t n = split == 0 ? config.train_per_class : config.test_per_class;
            auto& dst = split == 0 ? out.train : out.test;
            for (std::size_t i = 0; i < n; ++i) {
                Rng rng(derive_seed(config.seed, {kTagSample, c, static_cast<std::uint64_t>(split), i}));
                for (std::size_t j = 0; j < width; ++j) {
                    x[j] = anchor[j] + config.noise * rng.normal();
                }
                const auto cls = static_cast<ClassId>(c);
                dst.push_back(x, cls, sample_id(cls, split == 1, i));
            }
        }
    }
    return out;
}

ClassSet SlidingWindowPlan::used_classes() const {
    ClassSet out = initial;
    for (const auto& t : tasks) {
        out.insert(t.novel.begin(), t.novel.end());
    }
    return out;
}

void SlidingWindowPlan::validate() const {
    ClassSet active = initial;
    ClassSet ever = initial;
    for (const auto& t : tasks) {
        t.validate();
        for (auto c : t.forget) {
            if (active.count(c) == 0) {
                throw ContractError("plan: task " + std::to_string(t.index) + " forgets inactive class " +
                                    std::to_string(c));
            }
        }
        if (set_union(t.forget, t.retain) != active) {
            throw ContractError("plan: task " + std::to_string(t.index) +
                                " retain and forget do not cover the previous window");
        }
        if (intersects(t.novel, ever)) {
            throw ContractError("plan: task " + std::to_string(t.index) + " reintroduces a class");
        }
        const ClassSet next = t.active();
        if (next.size() != active.size()) {
            throw ContractError("plan: active window size changes at task " + std::to_string(t.index));
        }
        ever.insert(t.novel.begin(), t.novel.end());
        active = next;
    }
}

SlidingWindowPlan make_plan(const PlanConfig& config) {
    if (config.stride == 0 || config.window <= config.stride) {
        throw ConfigError("plan: window must exceed stride (window = retained + stride, retained >= 1)");
    }
    if (config.first_class < 0) {
        throw ConfigError("plan: first class must be non-negative");
    }
    const std::size_t needed = static_cast<std::size_t>(config.first_class) + config.window +
                               config.num_tasks * config.stride;
    if (config.total_classes < needed) {
        throw ConfigError("plan: needs " + std::to_string(needed) + " classes, only " +
                          std::to_string(config.total_classes) + " available");
    }
    SlidingWindowPlan plan;
    plan.config = config;
    const auto w = static_cast<ClassId>(config.window), s = static_cast<ClassId>(config.stride);
    const ClassId f = config.first_class;
    plan.initial = range_set(f, f + w);
    for (std::size_t t = 1; t <= config.num_tasks; ++t) {
        const ClassId lo = f + static_cast<ClassId>(t - 1) * s;
        TaskSpec spec;
        spec.index = static_cast<int>(t);
        spec.forget = range_set(lo, lo + s);
        spec.retain = range_set(lo + s, lo + w);
        spec.novel = range_set(lo + w, lo + w + s);
        plan.tasks.push_back(std::move(spec));
    }
    plan.validate();
    return plan;
}

SlidingWindowPlan make_plan(std::size_t total_classes, std::size_t window, std::size_t stride, std::size_t num_tasks) {
    PlanConfig c;
    c.total_classes = total_classes;
    c.window = window;
    c.stride = stride;
    c.num_tasks = num_tasks;
    return make_plan(c);
}

ReplayBuffer build_buffer(const LabeledDataset& full_retain, double ratio, std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio <= 1.0)) {
        throw ConfigError("buffer ratio must lie in (0, 1]");
    }
    std::map<ClassId, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < full_retain.size(); ++i) {
        by_class[full_retain.labels[i]].push_back(i);
    }
    ReplayBuffer buf;
    buf.ratio = ratio;
    std::vector<std::size_t> chosen;
    for (auto& [c, idx] : by_class) {
        const auto n = idx.size();
        const auto k = std::min(n, std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(ratio * n))));
        Rng rng(derive_seed(seed, {kTagBuffer, static_cast<std::uint64_t>(c)}));
        rng.shuffle(idx);
        std::vector<std::size_t> take(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
        std::sort(take.begin(), take.end());
        chosen.insert(chosen.end(), take.begin(), take.end());
        buf.indices[c] = std::move(take);
    }
    std::sort(chosen.begin(), chosen.end());
    buf.data = full_retain.subset(chosen);
    return buf;
}

TrainedOracle train_oracle(const TaskSpec& task, const SyntheticDataset& data, const BackboneConfig& backbone,
                           const PretrainOptions& options) {
    const ClassSet target = task.active();
    if (target.empty()) {
        throw ContractError("oracle: task " + std::to_string(task.index) + " has no target classes");
    }
    LabeledDataset train = data.train.filter(target);
    Fnv h;
    for (auto c : target) {
        h.value(c);
    }
    Model model(backbone, derive_seed(options.seed, {kTagOracle, h.h}));
    PretrainOptions opts = options;
    opts.seed = derive_seed(options.seed, {kTagOracle, h.h, 1});
    pretrain(model, train, opts);
    TrainedOracle out{std::move(model), train.classes(), 0.0};
    out.test_accuracy = accuracy(out.model, data.test, target);
    return out;
}

std::shared_ptr<const TrainedOracle> OracleCache::get(const TaskSpec& task, const SyntheticDataset& data,
                                                      const BackboneConfig& backbone, const PretrainOptions& options) {
    Fnv h;
    for (auto c : task.active()) {
        h.value(c);
    }
    const auto& s = data.config;
    for (auto v : {s.num_classes, s.train_per_class, s.test_per_class, s.seq_len, s.input_dim}) {
        h.value(v);
    }
    h.value(s.anchor_scale);
    h.value(s.noise);
    h.value(s.seed);
    for (auto v : {backbone.input_dim, backbone.seq_len, backbone.depth, backbone.embed_dim, backbone.heads,
                   backbone.mlp_ratio, backbone.num_class_slots, options.epochs, options.batch_size}) {
        h.value(v);
    }
    h.value(options.lr);
    h.value(options.seed);
    {
        std::lock_guard lock(mu_);
        if (auto it = cache_.find(h.h); it != cache_.end()) {
            return it->second;
        }
    }
    auto oracle = std::make_shared<const TrainedOracle>(train_oracle(task, data, backbone, options));
    std::lock_guard lock(mu_);
    return cache_.emplace(h.h, std::move(oracle)).first->second;
}

std::size_t OracleCache::size() const {
    std::lock_guard lock(mu_);
    return cache_.size();
}

std::string_view engine_mode_name(EngineMode m) {
    return m == EngineMode::bid ? "bid" : "standard";
}

EngineMode parse_engine_mode(std::string_view name) {
    if (name == "bid") {
        return EngineMode::bid;
    }
    if (name == "standard" || name == "standard_lora") {
        return EngineMode::standard_lora;
    }
    throw ConfigError("unknown engine mode '" + std::string(name) + "' (expected bid or standard)");
}

ClassSet unseen_classes(const SlidingWindowPlan& plan, const SyntheticDataset& data) {
    const ClassSet used = plan.used_classes();
    ClassSet out;
    for (std::size_t c = 0; c < data.config.num_classes; ++c) {
        if (used.count(static_cast<ClassId>(c)) == 0) {
            out.insert(static_cast<ClassId>(c));
        }
    }
    return out;
}

namespace {

struct EvalContext {
    const TaskSpec& task;
    const SyntheticDataset& data;
    const TrainedOracle& oracle;
    const ClassSet& unseen;
    const ProtocolConfig& config;
};

MetricsReport evaluate(const Model& model, const LayerHook* hook, const EvalContext& ctx, double tunable) {
    const auto& test = ctx.data.test;
    const ClassSet active = ctx.task.active();
    MetricInputs in;
    in.task = ctx.task.index;
    in.tunable_ratio = tunable;
    in.acc_f = accuracy(model, test, ctx.task.forget, hook);
    in.acc_r = accuracy(model, test, ctx.task.retain, hook);
    in.acc_n = accuracy(model, test, ctx.task.novel, hook);
    in.n_forget = test.filter(ctx.task.forget).size();
    in.n_retain = test.filter(ctx.task.retain).size();
    in.n_new = test.filter(ctx.task.novel).size();
    in.kl = kl_to_oracle(model, ctx.oracle.model, test.filter(active), active, hook);
    if (ctx.unseen.empty()) {
        throw ContractError("MIA needs classes the plan never trains on");
    }
    in.mia = mia_rate(model, ctx.data.train.filter(ctx.task.forget), test.filter(ctx.unseen), ctx.config.mia, hook);
    in.oracle_acc_o = accuracy(ctx.oracle.model, test, active);
    return assemble_report(in);
}

PathwayBundle attach_for(Model& model, const ProtocolConfig& config, int task) {
    const auto seed = derive_seed(config.train.seed, {kTagAttach, static_cast<std::uint64_t>(task)});
    if (config.mode == EngineMode::bid) {
        return attach(model, config.adapter, seed);
    }
    return attach_shared(model, config.adapter.rank_retain_new, config.adapter.scaling, seed);
}

AdaptData adapt_data(const TaskSpec& task, const SyntheticDataset& data, const ProtocolConfig& config) {
    const auto seed = derive_seed(config.train.seed, {kTagBuffer, static_cast<std::uint64_t>(task.index)});
    auto buffer = build_buffer(data.train.filter(task.retain), config.buffer_ratio, seed);
    return {std::move(buffer.data), data.train.filter(task.forget), data.train.filter(task.novel)};
}

ClassSet head_rows(const TaskSpec& task) {
    return set_union(set_union(task.retain, task.forget), task.novel);
}

}  // namespace

TaskOutcome run_task(Model& model, const TaskSpec& task, const SyntheticDataset& data, const ProtocolConfig& config,
                     OracleCache& oracles, const std::map<int, ClassSet>& earlier, const ClassSet& unseen) {
    task.validate();
    TaskOutcome out;
    out.spec = task;
    out.pre_retain_acc = accuracy(model, data.test, task.retain);
    out.pre_forget_acc = accuracy(model, data.test, task.forget);

    AdaptData ad = adapt_data(task, data, config);
    const Model teacher = model.clone_frozen();
    PathwayBundle bundle = attach_for(model, config, task.index);
    const double tunable = tunable_ratio(model, bundle, head_rows(task));
    out.step = config.mode == EngineMode::bid ? adapt(model, teacher, bundle, task, ad, config.train)
                                              : standard_lora_adapt(model, teacher, bundle, task, ad, config.train);

    auto oracle = oracles.get(task, data, model.config(), config.oracle);
    EvalContext ctx{task, data, *oracle, unseen, config};
    out.metrics = evaluate(model, nullptr, ctx, tunable);
    out.oracle_acc_new = accuracy(oracle->model, data.test, task.novel);

    out.chance_bound = 1.0 / static_cast<double>(task.active().size()) + config.forget_slack;
    auto forgotten = earlier;
    forgotten[task.index] = task.forget;
    for (const auto& [i, classes] : forgotten) {
        const double acc = accuracy(model, data.test, classes);
        out.forgotten_accuracy[i] = acc;
        if (acc > out.chance_bound) {
            out.cumulative_ok = false;
        }
    }
    return out;
}

Model pretrain_initial(const SlidingWindowPlan& plan, const SyntheticDataset& data, const BackboneConfig& backbone,
                       const PretrainOptions& options, std::vector<double>* losses) {
    Model model(backbone, derive_seed(options.seed, {0x707265ULL}));
    auto l = pretrain(model, data.train.filter(plan.initial), options);
    if (losses != nullptr) {
        *losses = std::move(l);
    }
    return model;
}

ProtocolResult run_protocol(const SlidingWindowPlan& plan, const SyntheticDataset& data, const Model& pretrained,
                            const ProtocolConfig& config, OracleCache& oracles, const TaskCallback& on_task) {
    plan.validate();
    if (pretrained.active_classes() != plan.initial) {
        throw ContractError("protocol: pretrained model's active classes do not match the plan's initial window");
    }
    const ClassSet unseen = unseen_classes(plan, data);
    ProtocolResult result{{}, pretrained, false};
    std::map<int, ClassSet> earlier;
    for (const auto& task : plan.tasks) {
        auto outcome = run_task(result.final_model, task, data, config, oracles, earlier, unseen);
        earlier[task.index] = task.forget;
        if (on_task) {
            on_task(outcome, result.final_model);
        }
        result.tasks.push_back(std::move(outcome));
    }
    if (!plan.tasks.empty()) {
        const ClassSet last = plan.tasks.back().active();
        ClassSet forgotten;
        for (const auto& [i, c] : earlier) {
            forgotten.insert(c.begin(), c.end());
        }
        bool ok = !intersects(last, plan.initial) &&
                  std::all_of(plan.initial.begin(), plan.initial.end(), [&](ClassId c) { return forgotten.count(c); });
        ok = ok && result.tasks.back().cumulative_ok;
        result.full_replacement = ok;
    }
    return result;
}

std::string_view sweep_param_name(SweepParam p) {
    switch (p) {
        case SweepParam::rank:
            return "rank";
        case SweepParam::buffer_ratio:
            return "buffer_ratio";
        case SweepParam::lambda_esc:
            return "lambda_esc";
        case SweepParam::pathway_gate:
            return "pathway_gate";
    }
    return "?";
}

SweepParam parse_sweep_param(std::string_view name) {
    for (auto p : {SweepParam::rank, SweepParam::buffer_ratio, SweepParam::lambda_esc, SweepParam::pathway_gate}) {
        if (sweep_param_name(p) == name) {
            return p;
        }
    }
    throw ConfigError("unknown sweep parameter '" + std::string(name) + "'");
}

PathwayGate parse_gate(std::string_view spec) {
    if (spec == "all") {
        return PathwayGate::all();
    }
    if (spec == "none") {
        return PathwayGate::none();
    }
    if (spec.substr(0, 3) == "no_") {
        return PathwayGate::all().without(parse_pathway(spec.substr(3)));
    }
    PathwayGate g = PathwayGate::none();
    std::size_t start = 0;
    while (start <= spec.size()) {
        const auto end = std::min(spec.find('+', start), spec.size());
        g = g.with(parse_pathway(spec.substr(start, end - start)));
        start = end + 1;
    }
    return g;
}

namespace {

double parse_number(const std::string& s, SweepParam p) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != s.size() || s.empty()) {
        throw ConfigError("sweep value '" + s + "' is not a number for " + std::string(sweep_param_name(p)));
    }
    return v;
}

ProtocolConfig config_for(SweepParam p, const std::string& value, const ProtocolConfig& base) {
    ProtocolConfig c = base;
    const double v = parse_number(value, p);
    switch (p) {
        case SweepParam::rank: {
            if (v < 1.0 || v != std::floor(v)) {
                throw ConfigError("rank sweep values must be positive integers");
            }
            const auto r = static_cast<std::size_t>(v);
            c.adapter.rank_retain_new = r;
            c.adapter.rank_forget = std::max<std::size_t>(1, r / 2);
            break;
        }
        case SweepParam::buffer_ratio:
            c.buffer_ratio = v;
            break;
        case SweepParam::lambda_esc:
            c.train.weights.lambda_esc = v;
            break;
        case SweepParam::pathway_gate:
            break;
    }
    return c;
}

template <typename Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn&& fn) {
    jobs = std::max<std::size_t>(1, std::min(jobs, n));
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

}  // namespace

SweepTable sweep(SweepParam param, const std::vector<std::string>& values, const SlidingWindowPlan& plan,
                 const SyntheticDataset& data, const Model& pretrained, const ProtocolConfig& base,
                 OracleCache& oracles, std::size_t jobs) {
    if (plan.tasks.empty()) {
        throw ConfigError("sweep needs a plan with at least one task");
    }
    if (values.empty()) {
        throw ConfigError("sweep needs at least one value");
    }
    const TaskSpec& task = plan.tasks.front();
    const ClassSet unseen = unseen_classes(plan, data);
    SweepTable table;
    table.param = param;
    table.rows.resize(values.size());

    if (param == SweepParam::pathway_gate) {
        std::vector<PathwayGate> gates;
        for (const auto& v : values) {
            gates.push_back(parse_gate(v));
        }
        Model model = pretrained;
        const double pre_forget = accuracy(model, data.test, task.forget);
        AdaptData ad = adapt_data(task, data, base);
        const Model teacher = model.clone_frozen();
        PathwayBundle bundle = attach_for(model, base, task.index);
        const double tunable = tunable_ratio(model, bundle, head_rows(task));
        train_pathways(model, teacher, bundle, task, ad, base.train);
        auto oracle = oracles.get(task, data, model.config(), base.oracle);
        EvalContext ctx{task, data, *oracle, unseen, base};
        for (std::size_t i = 0; i < values.size(); ++i) {
            BundleHook hook(bundle, gates[i]);
            table.rows[i] = {values[i], evaluate(model, &hook, ctx, tunable), pre_forget};
        }
        return table;
    }

    std::vector<ProtocolConfig> configs;
    for (const auto& v : values) {
        configs.push_back(config_for(param, v, base));
    }
    oracles.get(task, data, pretrained.config(), base.oracle);  // warm before fanning out
    parallel_for(values.size(), jobs, [&](std::size_t i) {
        Model model = pretrained;
        auto out = run_task(model, task, data, configs[i], oracles, {}, unseen);
        table.rows[i] = {values[i], out.metrics, out.pre_forget_acc};
    });
    return table;
}

std::string SweepTable::to_csv() const {
    std::ostringstream out;
    out << sweep_param_name(param) << ",tunable_ratio,acc_f,acc_r,acc_n,acc_o,kl,mia\n";
    char buf[256];
    for (const auto& r : rows) {
        const auto& m = r.metrics;
        std::snprintf(buf, sizeof(buf), ",%.6g,%.6f,%.6f,%.6f,%.6f,%.6g,%.6f\n", m.tunable_ratio, m.acc_f, m.acc_r,
                      m.acc_n, m.acc_o, m.kl, m.mia);
        out << r.value << buf;
    }
    return out.str();
}

}  // namespace clu
