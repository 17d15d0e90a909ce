#include "clu/config.hpp"

#include "clu/errors.hpp"
#include "clu/random.hpp"

#include "json.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

namespace clu {

using nlohmann::json;

namespace {

// Reads fields out of one JSON object, rejecting unknown keys so typos in a
// config file fail loudly instead of silently falling back to defaults.
class Reader {
public:
    Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) {
            throw ConfigError(where() + " must be an object");
        }
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) {
            return;
        }
        try {
            out = it->template get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(where() + "." + key + ": " + e.what());
        }
    }

    Reader child(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        static const json empty = json::object();
        return Reader(it == j_.end() ? empty : *it, path_ + "." + key);
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (seen_.count(it.key()) == 0) {
                throw ConfigError("unknown config key " + where() + "." + it.key());
            }
        }
    }

private:
    std::string where() const { return path_.empty() ? "<root>" : path_; }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

json to_j(const RunConfig& c) {
    const auto& d = c.dataset;
    const auto& m = c.model;
    const auto& p = c.plan;
    const auto& pt = c.pretrain;
    const auto& pr = c.protocol;
    const auto& t = pr.train;
    json j;
    j["name"] = c.name;
    j["seed"] = c.seed;
    j["output_dir"] = c.output_dir;
    j["dataset"] = {{"num_classes", d.num_classes}, {"train_per_class", d.train_per_class},
                    {"test_per_class", d.test_per_class}, {"seq_len", d.seq_len},
                    {"input_dim", d.input_dim}, {"anchor_scale", d.anchor_scale},
                    {"noise", d.noise}, {"seed", d.seed}};
    j["model"] = {{"input_dim", m.input_dim}, {"seq_len", m.seq_len}, {"depth", m.depth},
                  {"embed_dim", m.embed_dim}, {"heads", m.heads}, {"mlp_ratio", m.mlp_ratio},
                  {"num_class_slots", m.num_class_slots}};
    j["plan"] = {{"total_classes", p.total_classes}, {"window", p.window}, {"stride", p.stride},
                 {"num_tasks", p.num_tasks}, {"first_class", p.first_class}};
    j["pretrain"] = {{"epochs", pt.epochs}, {"lr", pt.lr}, {"batch_size", pt.batch_size}, {"seed", pt.seed}};
    j["protocol"] = {
        {"mode", engine_mode_name(pr.mode)},
        {"buffer_ratio", pr.buffer_ratio},
        {"forget_slack", pr.forget_slack},
        {"adapter",
         {{"rank_retain_new", pr.adapter.rank_retain_new},
          {"rank_forget", pr.adapter.rank_forget},
          {"scaling", pr.adapter.scaling}}},
        {"train",
         {{"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"optimizer", optimizer_name(t.optimizer)},
          {"clip_norm", t.clip_norm},
          {"lr", {{"retain", t.lr.retain}, {"new", t.lr.novel}, {"forget", t.lr.forget}}},
          {"weights",
           {{"lambda_ce", t.weights.lambda_ce},
            {"lambda_emb", t.weights.lambda_emb},
            {"lambda_esc", t.weights.lambda_esc}}},
          {"seed", t.seed},
          {"sign_convention", t.sign == SignConvention::additive ? "additive" : "subtractive_forget"},
          {"mask", {{"learn", t.mask.learn}, {"unlearn", t.mask.unlearn}}},
          {"escape",
           {{"iters", t.escape.iters},
            {"step", t.escape.step},
            {"restarts", t.escape.restarts},
            {"seed", t.escape.seed},
            {"smooth", t.escape.smooth},
            {"temperature", t.escape.temperature}}}}},
        {"oracle",
         {{"epochs", pr.oracle.epochs},
          {"lr", pr.oracle.lr},
          {"batch_size", pr.oracle.batch_size},
          {"seed", pr.oracle.seed}}},
        {"mia", {{"resolution", pr.mia.resolution}}}};
    return j;
}

void read_pretrain(Reader r, PretrainOptions& o) {
    r.get("epochs", o.epochs);
    r.get("lr", o.lr);
    r.get("batch_size", o.batch_size);
    r.get("seed", o.seed);
    r.finish();
}

RunConfig from_j(const json& j) {
    RunConfig c;
    Reader root(j, "");
    root.get("name", c.name);
    root.get("seed", c.seed);
    root.get("output_dir", c.output_dir);
    {
        auto r = root.child("dataset");
        auto& d = c.dataset;
        r.get("num_classes", d.num_classes);
        r.get("train_per_class", d.train_per_class);
        r.get("test_per_class", d.test_per_class);
        r.get("seq_len", d.seq_len);
        r.get("input_dim", d.input_dim);
        r.get("anchor_scale", d.anchor_scale);
        r.get("noise", d.noise);
        r.get("seed", d.seed);
        r.finish();
    }
    {
        auto r = root.child("model");
        auto& m = c.model;
        r.get("input_dim", m.input_dim);
        r.get("seq_len", m.seq_len);
        r.get("depth", m.depth);
        r.get("embed_dim", m.embed_dim);
        r.get("heads", m.heads);
        r.get("mlp_ratio", m.mlp_ratio);
        r.get("num_class_slots", m.num_class_slots);
        r.finish();
    }
    {
        auto r = root.child("plan");
        auto& p = c.plan;
        r.get("total_classes", p.total_classes);
        r.get("window", p.window);
        r.get("stride", p.stride);
        r.get("num_tasks", p.num_tasks);
        r.get("first_class", p.first_class);
        r.finish();
    }
    read_pretrain(root.child("pretrain"), c.pretrain);
    {
        auto r = root.child("protocol");
        auto& pr = c.protocol;
        std::string mode(engine_mode_name(pr.mode));
        r.get("mode", mode);
        pr.mode = parse_engine_mode(mode);
        r.get("buffer_ratio", pr.buffer_ratio);
        r.get("forget_slack", pr.forget_slack);
        {
            auto a = r.child("adapter");
            a.get("rank_retain_new", pr.adapter.rank_retain_new);
            a.get("rank_forget", pr.adapter.rank_forget);
            a.get("scaling", pr.adapter.scaling);
            a.finish();
        }
        {
            auto tr = r.child("train");
            auto& t = pr.train;
            tr.get("epochs", t.epochs);
            tr.get("batch_size", t.batch_size);
            std::string opt(optimizer_name(t.optimizer));
            tr.get("optimizer", opt);
            t.optimizer = parse_optimizer(opt);
            tr.get("clip_norm", t.clip_norm);
            {
                auto l = tr.child("lr");
                l.get("retain", t.lr.retain);
                l.get("new", t.lr.novel);
                l.get("forget", t.lr.forget);
                l.finish();
            }
            {
                auto w = tr.child("weights");
                w.get("lambda_ce", t.weights.lambda_ce);
                w.get("lambda_emb", t.weights.lambda_emb);
                w.get("lambda_esc", t.weights.lambda_esc);
                w.finish();
            }
            tr.get("seed", t.seed);
            std::string sign = t.sign == SignConvention::additive ? "additive" : "subtractive_forget";
            tr.get("sign_convention", sign);
            if (sign == "additive") {
                t.sign = SignConvention::additive;
            } else if (sign == "subtractive_forget") {
                t.sign = SignConvention::subtractive_forget;
            } else {
                throw ConfigError("unknown sign_convention '" + sign + "'");
            }
            {
                auto mk = tr.child("mask");
                mk.get("learn", t.mask.learn);
                mk.get("unlearn", t.mask.unlearn);
                mk.finish();
            }
            {
                auto e = tr.child("escape");
                e.get("iters", t.escape.iters);
                e.get("step", t.escape.step);
                e.get("restarts", t.escape.restarts);
                e.get("seed", t.escape.seed);
                e.get("smooth", t.escape.smooth);
                e.get("temperature", t.escape.temperature);
                e.finish();
            }
            tr.finish();
        }
        read_pretrain(r.child("oracle"), pr.oracle);
        {
            auto m = r.child("mia");
            m.get("resolution", pr.mia.resolution);
            m.finish();
        }
        r.finish();
    }
    root.finish();
    return c;
}

}  // namespace

void RunConfig::apply_seed(std::uint64_t s) {
    seed = s;
    dataset.seed = s;
    pretrain.seed = derive_seed(s, {1});
    protocol.train.seed = derive_seed(s, {2});
    protocol.oracle.seed = derive_seed(s, {3});
    protocol.train.escape.seed = derive_seed(s, {4});
}

void RunConfig::validate() const {
    dataset.validate();
    model.validate();
    if (model.input_dim != dataset.input_dim || model.seq_len != dataset.seq_len) {
        throw ConfigError("model input_dim/seq_len must match the dataset");
    }
    if (model.num_class_slots < dataset.num_classes) {
        throw ConfigError("model.num_class_slots must cover every dataset class");
    }
    if (plan.total_classes > dataset.num_classes) {
        throw ConfigError("plan.total_classes exceeds dataset.num_classes");
    }
    make_plan(plan);
    const auto& pr = protocol;
    pr.train.validate();
    if (!(pr.buffer_ratio > 0.0 && pr.buffer_ratio <= 1.0)) {
        throw ConfigError("protocol.buffer_ratio must lie in (0, 1]");
    }
    if (!std::isfinite(pr.forget_slack) || pr.forget_slack < 0.0) {
        throw ConfigError("protocol.forget_slack must be finite and non-negative");
    }
    if (pr.adapter.rank_retain_new == 0 || pr.adapter.rank_forget == 0) {
        throw ConfigError("adapter ranks must be at least 1");
    }
    if (pretrain.batch_size == 0 || pr.oracle.batch_size == 0) {
        throw ConfigError("pretrain and oracle batch_size must be positive");
    }
}

std::string RunConfig::to_json() const {
    return to_j(*this).dump(2) + "\n";
}

RunConfig RunConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    return from_j(j);
}

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot read config file '" + path + "'");
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json(ss.str());
}

void RunConfig::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write config file '" + path + "'");
    }
    out << to_json();
    if (!out) {
        throw IoError("failed writing config file '" + path + "'");
    }
}

RunConfig large_config() {
    RunConfig c;
    c.name = "large";
    c.dataset.num_classes = 100;
    c.model.num_class_slots = 100;
    c.plan.total_classes = 100;
    c.plan.window = 30;
    c.plan.stride = 10;
    c.plan.num_tasks = 6;
    return c;
}

std::string output_root(const RunConfig& config) {
    if (!config.output_dir.empty()) {
        return config.output_dir;
    }
    if (const char* env = std::getenv("CLU_RUNS_DIR"); env != nullptr && *env != '\0') {
        return env;
    }
    return "runs";
}

}  // namespace clu
