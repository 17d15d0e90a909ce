// Command-line front end. Talks to the engine only through the C API.

#include "clu/clu.h"

#include "CLI11.hpp"

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitAcceptance = 4;

struct Failure {
    int code;
    std::string message;
};

int exit_code(clu_status s) {
    switch (s) {
        case CLU_OK: return kExitOk;
        case CLU_ERR_CONFIG: return kExitConfig;
        case CLU_ERR_DIVERGENCE: return kExitDivergence;
        case CLU_ERR_ACCEPTANCE: return kExitAcceptance;
        default: return kExitOther;
    }
}

void check(clu_status s, const char* what) {
    if (s != CLU_OK) {
        throw Failure{exit_code(s), std::string(what) + ": " + clu_last_error()};
    }
}

std::string take(char* s) {
    std::string out = s != nullptr ? s : "";
    clu_string_free(s);
    return out;
}

struct ConfigDeleter {
    void operator()(clu_config* c) const { clu_config_free(c); }
};
struct SessionDeleter {
    void operator()(clu_session* s) const { clu_session_free(s); }
};
using ConfigPtr = std::unique_ptr<clu_config, ConfigDeleter>;
using SessionPtr = std::unique_ptr<clu_session, SessionDeleter>;

struct CommonOptions {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string mode;
    std::size_t jobs = 1;
    std::string out;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
    cmd->add_option("--config", o.config, "JSON config file (defaults when omitted)");
    cmd->add_option("--seed", o.seed, "Run seed; re-derives every component seed");
    cmd->add_option("--mode", o.mode, "Engine mode")->check(CLI::IsMember({"bid", "standard"}));
    cmd->add_option("--jobs", o.jobs, "Parallel sweep workers")->check(CLI::PositiveNumber);
    cmd->add_option("--out", o.out, "Output root (else $CLU_RUNS_DIR, else ./runs)");
}

ConfigPtr load_config(const CommonOptions& o) {
    clu_config* raw = nullptr;
    if (o.config.empty()) {
        check(clu_config_default(&raw), "config");
    } else {
        check(clu_config_load(o.config.c_str(), &raw), "config");
    }
    ConfigPtr cfg(raw);
    if (o.seed) {
        check(clu_config_set_seed(cfg.get(), *o.seed), "config");
    }
    if (!o.mode.empty()) {
        check(clu_config_set_mode(cfg.get(), o.mode.c_str()), "config");
    }
    if (!o.out.empty()) {
        check(clu_config_set_output_dir(cfg.get(), o.out.c_str()), "config");
    }
    check(clu_config_validate(cfg.get()), "config");
    return cfg;
}

SessionPtr open_session(const clu_config* cfg) {
    clu_session* raw = nullptr;
    check(clu_session_create(cfg, &raw), "session");
    return SessionPtr(raw);
}

fs::path run_dir(const clu_config* cfg) {
    char* s = nullptr;
    check(clu_config_run_dir(cfg, &s), "config");
    return fs::path(take(s));
}

fs::path task_dir(const fs::path& run, int t) {
    fs::path d = run / ("task_" + std::to_string(t));
    std::error_code ec;
    fs::create_directories(d, ec);
    if (ec) {
        throw Failure{kExitOther, "cannot create " + d.string() + ": " + ec.message()};
    }
    return d;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary);
    f << text;
    if (!f) {
        throw Failure{kExitOther, "cannot write " + p.string()};
    }
}

std::string read_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

fs::path pretrain_into(clu_session* s, const clu_config* cfg, const fs::path& run) {
    check(clu_session_pretrain(s), "pretrain");
    const fs::path dir = task_dir(run, 0);
    check(clu_session_save_checkpoint(s, (dir / "checkpoint.bin").c_str()), "checkpoint");
    check(clu_session_write_log(s, (dir / "log.jsonl").c_str()), "log");
    check(clu_config_save(cfg, (run / "config.json").c_str()), "config");
    return dir / "checkpoint.bin";
}

struct AdaptResult {
    clu_report report;
    std::string csv_row;
};

AdaptResult adapt_into(clu_session* s, int t, const fs::path& run) {
    AdaptResult r{};
    check(clu_session_adapt(s, t, &r.report), "adapt");
    const fs::path dir = task_dir(run, t);
    check(clu_session_save_checkpoint(s, (dir / "checkpoint.bin").c_str()), "checkpoint");
    char* json = nullptr;
    check(clu_session_report_json(s, &json), "report");
    write_text(dir / "report.json", take(json));
    check(clu_session_write_log(s, (dir / "log.jsonl").c_str()), "log");
    char* row = nullptr;
    check(clu_session_report_csv(s, &row), "report");
    r.csv_row = take(row);
    return r;
}

void print_report(const clu_report& r) {
    std::printf("task %d  acc_f %.4f  acc_r %.4f  acc_n %.4f  acc_o %.4f  kl %.4f  mia %.4f  tunable %.4f\n", r.task,
                r.acc_f, r.acc_r, r.acc_n, r.acc_o, r.kl, r.mia, r.tunable_ratio);
}

// Every invariant the protocol is expected to hold after a step.
std::vector<std::string> violations(const clu_report& r) {
    std::vector<std::string> v;
    if (!r.cumulative_ok) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "task %d: forgotten-class accuracy %.4f exceeds bound %.4f", r.task,
                      r.max_forgotten_acc, r.chance_bound);
        v.emplace_back(buf);
    }
    if (!r.merge_consistent) {
        v.push_back("task " + std::to_string(r.task) + ": merged model deviates from the adapter forward");
    }
    return v;
}

// Loads a saved checkpoint into a fresh session and re-saves it; the bytes
// must match exactly.
bool checkpoint_round_trips(const clu_config* cfg, const fs::path& ckpt) {
    SessionPtr probe = open_session(cfg);
    check(clu_session_load_checkpoint(probe.get(), ckpt.c_str()), "checkpoint");
    const fs::path copy = ckpt.string() + ".verify";
    check(clu_session_save_checkpoint(probe.get(), copy.c_str()), "checkpoint");
    const bool same = read_bytes(copy) == read_bytes(ckpt);
    fs::remove(copy);
    return same;
}

int cmd_config(bool print_defaults, bool large) {
    if (!print_defaults) {
        std::fprintf(stderr, "config: nothing to do (try --print-defaults)\n");
        return kExitConfig;
    }
    clu_config* raw = nullptr;
    check(large ? clu_config_large(&raw) : clu_config_default(&raw), "config");
    ConfigPtr cfg(raw);
    char* json = nullptr;
    check(clu_config_to_json(cfg.get(), &json), "config");
    std::fputs(take(json).c_str(), stdout);
    return kExitOk;
}

int cmd_pretrain(const CommonOptions& o) {
    auto cfg = load_config(o);
    auto s = open_session(cfg.get());
    const fs::path ckpt = pretrain_into(s.get(), cfg.get(), run_dir(cfg.get()));
    std::printf("checkpoint %s\n", ckpt.c_str());
    return kExitOk;
}

int cmd_adapt(const CommonOptions& o, const std::string& checkpoint, int task) {
    auto cfg = load_config(o);
    auto s = open_session(cfg.get());
    check(clu_session_load_checkpoint(s.get(), checkpoint.c_str()), "checkpoint");
    int at = 0;
    check(clu_session_task_index(s.get(), &at), "checkpoint");
    if (at != task - 1) {
        throw Failure{kExitConfig, "checkpoint is at task " + std::to_string(at) + ", cannot run task " +
                                       std::to_string(task)};
    }
    auto r = adapt_into(s.get(), task, run_dir(cfg.get()));
    print_report(r.report);
    auto v = violations(r.report);
    for (const auto& m : v) {
        std::fprintf(stderr, "acceptance: %s\n", m.c_str());
    }
    return v.empty() ? kExitOk : kExitAcceptance;
}

int cmd_protocol(const CommonOptions& o) {
    auto cfg = load_config(o);
    auto s = open_session(cfg.get());
    const fs::path run = run_dir(cfg.get());
    std::size_t tasks = 0;
    check(clu_config_num_tasks(cfg.get(), &tasks), "config");

    std::vector<std::string> problems;
    fs::path ckpt = pretrain_into(s.get(), cfg.get(), run);
    if (!checkpoint_round_trips(cfg.get(), ckpt)) {
        problems.push_back("pretrain checkpoint does not round-trip bit-exactly");
    }
    char* header = nullptr;
    check(clu_csv_header(&header), "report");
    std::string csv = take(header) + "\n";
    for (std::size_t t = 1; t <= tasks; ++t) {
        auto r = adapt_into(s.get(), static_cast<int>(t), run);
        print_report(r.report);
        csv += r.csv_row + "\n";
        for (auto& m : violations(r.report)) {
            problems.push_back(std::move(m));
        }
        const fs::path c = run / ("task_" + std::to_string(t)) / "checkpoint.bin";
        if (!checkpoint_round_trips(cfg.get(), c)) {
            problems.push_back("task " + std::to_string(t) + " checkpoint does not round-trip bit-exactly");
        }
    }
    write_text(run / "aggregate.csv", csv);
    if (tasks > 0) {
        int replaced = 0;
        check(clu_session_full_replacement(s.get(), &replaced), "protocol");
        std::printf("full replacement: %s\n", replaced ? "yes" : "no");
        if (!replaced) {
            problems.push_back("final window still overlaps the pretraining classes or forgetting regressed");
        }
    }
    std::printf("aggregate %s\n", (run / "aggregate.csv").c_str());
    for (const auto& m : problems) {
        std::fprintf(stderr, "acceptance: %s\n", m.c_str());
    }
    return problems.empty() ? kExitOk : kExitAcceptance;
}

std::vector<std::string> split_values(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) {
            out.push_back(item);
        }
    }
    return out;
}

int cmd_sweep(const CommonOptions& o, const std::string& param, const std::string& values,
              const std::string& checkpoint) {
    auto cfg = load_config(o);
    auto s = open_session(cfg.get());
    const fs::path run = run_dir(cfg.get());
    if (checkpoint.empty()) {
        pretrain_into(s.get(), cfg.get(), run);
    } else {
        check(clu_session_load_checkpoint(s.get(), checkpoint.c_str()), "checkpoint");
    }
    auto vals = split_values(values);
    std::vector<const char*> ptrs;
    for (const auto& v : vals) {
        ptrs.push_back(v.c_str());
    }
    char* csv = nullptr;
    check(clu_session_sweep(s.get(), param.c_str(), ptrs.data(), ptrs.size(), o.jobs, &csv), "sweep");
    const std::string table = take(csv);
    fs::create_directories(run);
    const fs::path file = run / ("sweep_" + param + ".csv");
    write_text(file, table);
    std::fputs(table.c_str(), stdout);
    std::printf("table %s\n", file.c_str());
    return kExitOk;
}

// Centroid file: one centroid per line, values separated by commas or spaces.
std::vector<std::vector<double>> read_centroids(const std::string& path) {
    std::ifstream f(path);
    if (!f) {
        throw Failure{kExitOther, "cannot read centroid file " + path};
    }
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (line.find('#') != std::string::npos) {
            line.erase(line.find('#'));
        }
        for (auto& ch : line) {
            if (ch == ',' || ch == ';' || ch == '\t') {
                ch = ' ';
            }
        }
        std::istringstream ls(line);
        std::vector<double> row;
        std::string tok;
        while (ls >> tok) {
            char* end = nullptr;
            errno = 0;
            const double v = std::strtod(tok.c_str(), &end);
            if (end == tok.c_str() || *end != '\0' || errno == ERANGE) {
                throw Failure{kExitConfig, "centroid file: bad number '" + tok + "'"};
            }
            row.push_back(v);
        }
        if (row.empty()) {
            continue;
        }
        if (!rows.empty() && row.size() != rows.front().size()) {
            throw Failure{kExitConfig, "centroid file: rows differ in dimension"};
        }
        rows.push_back(std::move(row));
    }
    if (rows.empty()) {
        throw Failure{kExitConfig, "centroid file holds no centroids"};
    }
    return rows;
}

int cmd_escape(const std::string& file, double lambda, const clu_escape_options& opt, const std::string& geometry) {
    const auto rows = read_centroids(file);
    const std::size_t dim = rows.front().size();
    std::vector<double> flat;
    for (const auto& r : rows) {
        flat.insert(flat.end(), r.begin(), r.end());
    }
    std::vector<double> dir(dim), point(dim);
    double value = 0.0;
    check(clu_escape_solve(flat.data(), rows.size(), dim, lambda, &opt, dir.data(), point.data(), &value), "escape");
    auto vec = [](const std::vector<double>& v) {
        std::string s;
        char buf[64];
        for (std::size_t i = 0; i < v.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%s%.9g", i ? "," : "", v[i]);
            s += buf;
        }
        return s;
    };
    std::printf("direction %s\n", vec(dir).c_str());
    std::printf("value %.9g\n", value);
    std::printf("point %s\n", vec(point).c_str());
    if (!geometry.empty()) {
        std::string g = "kind,index";
        for (std::size_t i = 0; i < dim; ++i) {
            g += ",v" + std::to_string(i);
        }
        g += "\n";
        for (std::size_t i = 0; i < rows.size(); ++i) {
            g += "centroid," + std::to_string(i) + "," + vec(rows[i]) + "\n";
        }
        g += "direction,0," + vec(dir) + "\n";
        g += "escape_point,0," + vec(point) + "\n";
        write_text(geometry, g);
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Continual learning-unlearning engine with tri-pathway low-rank adapters"};
    app.require_subcommand(1);

    auto* config = app.add_subcommand("config", "Inspect configuration");
    bool print_defaults = false, large = false;
    config->add_flag("--print-defaults", print_defaults, "Print the default config as JSON");
    config->add_flag("--large", large, "Use the 100-class plan");

    CommonOptions common;
    auto* pretrain = app.add_subcommand("pretrain", "Train the initial model on the first window");
    add_common(pretrain, common);

    auto* adapt = app.add_subcommand("adapt", "Run one learning-unlearning task from a checkpoint");
    add_common(adapt, common);
    std::string checkpoint;
    int task = 1;
    adapt->add_option("--checkpoint", checkpoint, "Checkpoint of the previous task")->required();
    adapt->add_option("--task", task, "Task index to run (checkpoint must be at task - 1)")->required();

    auto* protocol = app.add_subcommand("protocol", "Pretrain and run every task of the plan");
    add_common(protocol, common);

    auto* sweep = app.add_subcommand("sweep", "Single-task ablation over one parameter");
    add_common(sweep, common);
    std::string param, values, sweep_checkpoint;
    sweep->add_option("--param", param, "Swept parameter")
        ->required()
        ->check(CLI::IsMember({"rank", "buffer_ratio", "lambda_esc", "pathway_gate"}));
    sweep->add_option("--values", values, "Comma-separated values")->required();
    sweep->add_option("--checkpoint", sweep_checkpoint, "Pretrained checkpoint (else pretrain first)");

    auto* escape = app.add_subcommand("escape", "Solve the escape direction for a centroid file");
    std::string centroid_file, geometry;
    double lambda = 10.0;
    clu_escape_options opt;
    clu_escape_default_options(&opt);
    bool smooth = false;
    escape->add_option("centroids", centroid_file, "Centroid file, one row per centroid")->required();
    escape->add_option("--lambda", lambda, "Escape scaling factor");
    escape->add_option("--iters", opt.iters, "Iterations per restart");
    escape->add_option("--restarts", opt.restarts, "Random restarts");
    escape->add_option("--step", opt.step, "Initial angular step");
    escape->add_option("--solver-seed", opt.seed, "Solver seed");
    escape->add_flag("--smooth", smooth, "Log-sum-exp surrogate");
    escape->add_option("--geometry", geometry, "Write centroids, direction and point as CSV");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*config) {
            return cmd_config(print_defaults, large);
        }
        if (*pretrain) {
            return cmd_pretrain(common);
        }
        if (*adapt) {
            return cmd_adapt(common, checkpoint, task);
        }
        if (*protocol) {
            return cmd_protocol(common);
        }
        if (*sweep) {
            return cmd_sweep(common, param, values, sweep_checkpoint);
        }
        if (*escape) {
            opt.smooth = smooth ? 1 : 0;
            return cmd_escape(centroid_file, lambda, opt, geometry);
        }
    } catch (const Failure& f) {
        std::fprintf(stderr, "error: %s\n", f.message.c_str());
        return f.code;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitOther;
    }
    return kExitOther;
}
