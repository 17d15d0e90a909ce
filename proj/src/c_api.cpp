#include "clu/clu.h"

#include "clu/checkpoint.hpp"
#include "clu/config.hpp"
#include "clu/errors.hpp"
#include "clu/escape.hpp"
#include "clu/harness.hpp"

#include "json.hpp"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <new>
#include <optional>
#include <string>
#include <vector>

using namespace clu;

struct clu_config {
    RunConfig cfg;
};

struct clu_session {
    RunConfig config;
    SyntheticDataset data;
    SlidingWindowPlan plan;
    ClassSet unseen;
    OracleCache oracles;
    std::optional<Model> model;
    int task_index = -1;
    std::optional<TaskOutcome> last;
    std::vector<double> pretrain_losses;  // log source when `last` is empty
};

namespace {

thread_local std::string g_last_error;

clu_status fail(clu_status code, const std::string& msg) {
    g_last_error = msg;
    return code;
}

// Runs fn, translating every exception into a status code.
template <typename Fn>
clu_status guard(Fn&& fn) {
    g_last_error.clear();
    try {
        fn();
        return CLU_OK;
    } catch (const ConfigError& e) {
        return fail(CLU_ERR_CONFIG, e.what());
    } catch (const TrainingError& e) {
        return fail(CLU_ERR_DIVERGENCE, e.what());
    } catch (const AcceptanceError& e) {
        return fail(CLU_ERR_ACCEPTANCE, e.what());
    } catch (const IoError& e) {
        return fail(CLU_ERR_IO, e.what());
    } catch (const ContractError& e) {
        return fail(CLU_ERR_CONTRACT, e.what());
    } catch (const DimensionError& e) {
        return fail(CLU_ERR_DIMENSION, e.what());
    } catch (const IndexError& e) {
        return fail(CLU_ERR_INDEX, e.what());
    } catch (const std::bad_alloc&) {
        return fail(CLU_ERR_INTERNAL, "out of memory");
    } catch (const std::exception& e) {
        return fail(CLU_ERR_INTERNAL, e.what());
    } catch (...) {
        return fail(CLU_ERR_INTERNAL, "unknown exception");
    }
}

char* dup(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (out == nullptr) {
        throw std::bad_alloc();
    }
    std::memcpy(out, s.data(), s.size() + 1);
    return out;
}

clu_status make_config(clu_config** out, RunConfig cfg) {
    if (out == nullptr) {
        return fail(CLU_ERR_INVALID_ARGUMENT, "out must not be null");
    }
    return guard([&] { *out = new clu_config{std::move(cfg)}; });
}

Model& require_model(clu_session* s) {
    if (!s->model) {
        throw ContractError("session has no model; pretrain or load a checkpoint first");
    }
    return *s->model;
}

const TaskOutcome& require_last(const clu_session* s) {
    if (!s->last) {
        throw ContractError("no adapt step has run in this session");
    }
    return *s->last;
}

std::string outcome_json(const TaskOutcome& o) {
    auto j = nlohmann::json::parse(o.metrics.to_json());
    j["pre_retain_acc"] = o.pre_retain_acc;
    j["pre_forget_acc"] = o.pre_forget_acc;
    j["oracle_acc_new"] = o.oracle_acc_new;
    j["chance_bound"] = o.chance_bound;
    j["cumulative_ok"] = o.cumulative_ok;
    nlohmann::json forgotten = nlohmann::json::object();
    for (const auto& [i, acc] : o.forgotten_accuracy) {
        forgotten[std::to_string(i)] = acc;
    }
    j["forgotten_accuracy"] = forgotten;
    j["merge"] = {{"checked", o.step.merge.checked},
                  {"consistent", o.step.merge.consistent},
                  {"max_abs_deviation", o.step.merge.max_abs_deviation}};
    j["escape"] = {{"lambda_esc", o.step.escape.lambda_esc}, {"minimax_value", o.step.escape.minimax_value}};
    return j.dump(2) + "\n";
}

}  // namespace

extern "C" {

const char* clu_last_error(void) {
    return g_last_error.c_str();
}

const char* clu_version(void) {
    return "1.0.0";
}

void clu_string_free(char* s) {
    std::free(s);
}

clu_status clu_config_default(clu_config** out) {
    return make_config(out, RunConfig{});
}

clu_status clu_config_large(clu_config** out) {
    return make_config(out, large_config());
}

clu_status clu_config_load(const char* path, clu_config** out) {
    if (path == nullptr || out == nullptr) {
        return fail(CLU_ERR_INVALID_ARGUMENT, "path and out must not be null");
    }
    return guard([&] { *out = new clu_config{RunConfig::load(path)}; });
}

clu_status clu_config_from_json(const char* text, clu_config** out) {
    if (text == nullptr || out == nullptr) {
        return fail(CLU_ERR_INVALID_ARGUMENT, "text and out must not be null");
    }
    return guard([&] { *out = new clu_config{RunConfig::from_json(text)}; });
}

clu_status clu_config_to_json(const clu_config* cfg, char** out) {
    if (cfg == nullptr || out == nullptr) {
        return fail(CLU_ERR_INVALID_ARGUMENT, "cfg and out must not be null");
    }
    return guard([&] { *out = dup(cfg->cfg.to_json()); });
}

clu_status clu_config_save(const clu_config* cfg, const char* path) {
    if (cfg == nullptr || path == nullptr) {
        return fail(CLU_ERR_INVALID_ARGUMENT, "cfg and path must not be null");
    }
    return guard([&] { cfg->cfg.save(path); });
}

clu_status clu_config_validate(const clu_config* cfg) {
    if (cfg == nullptr) {
        return fail(CLU_ERR_INVALID_ARGUMENT, "cfg must not be null");
    }
    return guard([&] { cfg->cfg.validate(); });
}

clu_status clu_config_set_seed(clu_config* cfg, uint64_t seed) {
    if (cfg == nullptr) {
        return fail(CLU_ERR_INVALID_ARGUMENT, "cfg must not be null");
    }
    return guard([&] { cfg->cfg.apply_seed(seed); });
}

clu_status clu_config_set_mode(clu_config* cfg, const char* mode) {
    if (cfg == nullptr || mode == nullptr) {
        return fail(CLU_ERR_INVALID_ARGUMENT, "cfg and mode must not be null");
    }
    return guard([&] { cfg->cfg.protocol.mode = parse_engine_mode(mode); });
}

clu_status clu_config_set_output_dir(clu_config* cfg, const char* dir) {
    if (cfg == nullptr || dir == nullptr) {
        return fail(CLU_ERR_INVALID_ARGUMENT, "cfg and dir must not be null");
    }
    return guard([&] { cfg->cfg.output_dir = dir; });
}

clu_status clu_config_num_tasks(const clu_config* cfg, size_t* out) {
    if (cfg == nullptr || out == nullptr) {
        return fail(CLU_ERR_INVALID_ARGUMENT, "cfg and out must not be null");
    }
    return guard([&] { *out = cfg->cfg.plan.num_tasks; });
}

clu_status clu_config_run_dir(const clu_config* cfg, char** out) {
    if (cfg == nullptr || out == nullptr) {
        return fail(CLU_ERR_INVALID_ARGUMENT, "cfg and out must not be null");
    }
    return guard([&] { *out = dup(output_root(cfg->cfg) + "/" + cfg->cfg.name); });
}

void clu_config_free(clu_config* cfg) {
    delete cfg;
}

clu_status clu_session_create(const clu_config* cfg, clu_session** out) {
    if (cfg == nullptr || out == nullptr) {
        return fail(CLU_ERR_INVALID_ARGUMENT, "cfg and out must not be null");
    }
    return guard([&] {
        cfg->cfg.validate();
        auto s = std::make_unique<clu_session>();
        s->config = cfg->cfg;
        s->data = SyntheticDataset::generate(s->config.dataset);
        s->plan = make_plan(s->config.plan);
        s->unseen = unseen_classes(s->plan, s->data);
        *out = s.release();
    });
}

void clu_session_free(clu_session* s) {
    delete s;
}

clu_status clu_session_pretrain(clu_session* s) {
    if (s == nullptr) {
        return fail(CLU_ERR_INVALID_ARGUMENT, "session must not be null");
    }
    return guard([&] {
        std::vector<double> losses;
        Model m = pretrain_initial(s->plan, s->data, s->config.model, s->config.pretrain, &losses);
        s->model.emplace(std::move(m));
        s->task_index = 0;
        s->last.reset();
        s->pretrain_losses = std::move(losses);
    });
}

clu_status clu_session_save_checkpoint(const clu_session* s, const char* path) {
    if (s == nullptr || path == nullptr) {
        return fail(CLU_ERR_INVALID_ARGUMENT, "session and path must not be null");
    }
    return guard([&] {
        if (!s->model) {
            throw ContractError("session has no model to save");
        }
        Checkpoint ckpt(*s->model);
        ckpt.config = s->config;
        ckpt.task_index = s->task_index;
        save_checkpoint(ckpt, path);
    });
}

clu_status clu_session_load_checkpoint(clu_session* s, const char* path) {
    if (s == nullptr || path == nullptr) {
        return fail(CLU_ERR_INVALID_ARGUMENT, "session and path must not be null");
    }
    return guard([&] {
        Checkpoint ckpt = load_checkpoint(path);
        if (!(ckpt.config.model == s->config.model)) {
            throw ConfigError("checkpoint backbone does not match the session config");
        }
        if (ckpt.bundle) {
            throw ContractError("checkpoint holds an unmerged adapter bundle; sessions expect merged models");
        }
        if (ckpt.task_index < 0 || static_cast<std::size_t>(ckpt.task_index) > s->plan.tasks.size()) {
            throw ContractError("checkpoint task index " + std::to_string(ckpt.task_index) + " is outside the plan");
        }
        const ClassSet expected =
            ckpt.task_index == 0 ? s->plan.initial : s->plan.tasks[ckpt.task_index - 1].active();
        for (auto c : expected) {
            if (ckpt.model.active_classes().count(c) == 0) {
                throw ContractError("checkpoint model lacks class " + std::to_string(c) + " of its task window");
            }
        }
        s->model.emplace(std::move(ckpt.model));
        s->task_index = ckpt.task_index;
        s->last.reset();
        s->pretrain_losses.clear();
    });
}

clu_status clu_session_task_index(const clu_session* s, int* out) {
    if (s == nullptr || out == nullptr) {
        return fail(CLU_ERR_INVALID_ARGUMENT, "session and out must not be null");
    }
    return guard([&] { *out = s->task_index; });
}

clu_status clu_session_adapt(clu_session* s, int task, clu_report* out) {
    if (s == nullptr) {
        return fail(CLU_ERR_INVALID_ARGUMENT, "session must not be null");
    }
    return guard([&] {
        Model& model = require_model(s);
        if (task != s->task_index + 1) {
            throw ContractError("adapt: task " + std::to_string(task) + " requested but the model is at task " +
                                std::to_string(s->task_index));
        }
        if (task < 1 || static_cast<std::size_t>(task) > s->plan.tasks.size()) {
            throw ContractError("adapt: task " + std::to_string(task) + " is outside the plan");
        }
        std::map<int, ClassSet> earlier;
        for (int i = 1; i < task; ++i) {
            earlier[i] = s->plan.tasks[i - 1].forget;
        }
        // Work on a copy so a failed step leaves the session model untouched.
        Model work = model;
        TaskOutcome o = run_task(work, s->plan.tasks[task - 1], s->data, s->config.protocol, s->oracles, earlier,
                                 s->unseen);
        model = std::move(work);
        s->task_index = task;
        s->last = std::move(o);
        if (out != nullptr) {
            const auto& lo = *s->last;
            const auto& m = lo.metrics;
            double worst = 0.0;
            for (const auto& [i, acc] : lo.forgotten_accuracy) {
                worst = std::max(worst, acc);
            }
            *out = clu_report{m.task,
                              m.tunable_ratio,
                              m.acc_f,
                              m.acc_r,
                              m.acc_n,
                              m.acc_o,
                              m.kl,
                              m.mia,
                              m.oracle_acc_o ? *m.oracle_acc_o : std::numeric_limits<double>::quiet_NaN(),
                              lo.pre_retain_acc,
                              lo.pre_forget_acc,
                              lo.oracle_acc_new,
                              lo.chance_bound,
                              worst,
                              lo.cumulative_ok ? 1 : 0,
                              lo.step.merge.consistent ? 1 : 0};
        }
    });
}

clu_status clu_session_report_json(const clu_session* s, char** out) {
    if (s == nullptr || out == nullptr) {
        return fail(CLU_ERR_INVALID_ARGUMENT, "session and out must not be null");
    }
    return guard([&] { *out = dup(outcome_json(require_last(s))); });
}

clu_status clu_csv_header(char** out) {
    if (out == nullptr) {
        return fail(CLU_ERR_INVALID_ARGUMENT, "out must not be null");
    }
    return guard([&] { *out = dup(csv_header()); });
}

clu_status clu_session_report_csv(const clu_session* s, char** out) {
    if (s == nullptr || out == nullptr) {
        return fail(CLU_ERR_INVALID_ARGUMENT, "session and out must not be null");
    }
    return guard([&] { *out = dup(csv_row(require_last(s).metrics)); });
}

clu_status clu_session_write_log(const clu_session* s, const char* path) {
    if (s == nullptr || path == nullptr) {
        return fail(CLU_ERR_INVALID_ARGUMENT, "session and path must not be null");
    }
    return guard([&] {
        if (s->last) {
            s->last->step.write_log(path);
            return;
        }
        if (s->pretrain_losses.empty()) {
            throw ContractError("nothing to log: no pretrain or adapt step has run");
        }
        std::ofstream f(path);
        if (!f) {
            throw IoError("cannot write log '" + std::string(path) + "'");
        }
        for (std::size_t e = 0; e < s->pretrain_losses.size(); ++e) {
            f << nlohmann::json{{"phase", "pretrain"}, {"epoch", e}, {"loss", s->pretrain_losses[e]}}.dump() << "\n";
        }
    });
}

clu_status clu_session_full_replacement(const clu_session* s, int* out) {
    if (s == nullptr || out == nullptr) {
        return fail(CLU_ERR_INVALID_ARGUMENT, "session and out must not be null");
    }
    return guard([&] {
        if (s->task_index != static_cast<int>(s->plan.tasks.size()) || s->plan.tasks.empty()) {
            throw ContractError("full replacement is defined only after the final task");
        }
        const ClassSet last = s->plan.tasks.back().active();
        ClassSet forgotten;
        for (const auto& t : s->plan.tasks) {
            forgotten.insert(t.forget.begin(), t.forget.end());
        }
        bool ok = true;
        for (auto c : s->plan.initial) {
            ok = ok && last.count(c) == 0 && forgotten.count(c) != 0;
        }
        if (s->last) {
            ok = ok && s->last->cumulative_ok;
        }
        *out = ok ? 1 : 0;
    });
}

clu_status clu_session_sweep(clu_session* s, const char* param, const char* const* values, size_t n_values,
                             size_t jobs, char** csv_out) {
    if (s == nullptr || param == nullptr || (values == nullptr && n_values > 0) || csv_out == nullptr) {
        return fail(CLU_ERR_INVALID_ARGUMENT, "session, param, values and csv_out must not be null");
    }
    return guard([&] {
        const Model& model = require_model(s);
        if (s->task_index != 0) {
            throw ContractError("sweep runs from the pretrained model (task index 0)");
        }
        std::vector<std::string> vals;
        for (size_t i = 0; i < n_values; ++i) {
            if (values[i] == nullptr) {
                throw ConfigError("sweep value " + std::to_string(i) + " is null");
            }
            vals.emplace_back(values[i]);
        }
        if (vals.empty()) {
            throw ConfigError("sweep needs at least one value");
        }
        auto table = sweep(parse_sweep_param(param), vals, s->plan, s->data, model, s->config.protocol, s->oracles,
                           jobs == 0 ? 1 : jobs);
        *csv_out = dup(table.to_csv());
    });
}

void clu_escape_default_options(clu_escape_options* out) {
    if (out == nullptr) {
        return;
    }
    EscapeOptions d;
    *out = clu_escape_options{d.iters, d.step, d.restarts, d.seed, d.smooth ? 1 : 0, d.temperature};
}

clu_status clu_escape_solve(const double* centroids, size_t n, size_t dim, double lambda_esc,
                            const clu_escape_options* options, double* direction, double* point,
                            double* minimax_value) {
    if (centroids == nullptr || direction == nullptr) {
        return fail(CLU_ERR_INVALID_ARGUMENT, "centroids and direction must not be null");
    }
    return guard([&] {
        if (n == 0 || dim == 0) {
            throw ContractError("escape: need at least one centroid of positive dimension");
        }
        EscapeOptions opt;
        if (options != nullptr) {
            opt.iters = options->iters;
            opt.step = options->step;
            opt.restarts = options->restarts;
            opt.seed = options->seed;
            opt.smooth = options->smooth != 0;
            opt.temperature = options->temperature;
        }
        std::vector<Centroid> cs(n);
        for (size_t i = 0; i < n; ++i) {
            cs[i].class_id = static_cast<ClassId>(i);
            cs[i].vector.assign(centroids + i * dim, centroids + (i + 1) * dim);
            cs[i].sample_count = 1;
        }
        auto t = compute_escape_target(cs, lambda_esc, opt);
        std::copy(t.direction.begin(), t.direction.end(), direction);
        if (point != nullptr) {
            std::copy(t.point.begin(), t.point.end(), point);
        }
        if (minimax_value != nullptr) {
            *minimax_value = t.minimax_value;
        }
    });
}

}  // extern "C"
