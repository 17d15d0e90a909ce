#ifndef CLU_CLU_H
#define CLU_CLU_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define CLU_API __declspec(dllexport)
#else
#define CLU_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes. 2-4 double as CLI exit codes. */
typedef enum clu_status {
    CLU_OK = 0,
    CLU_ERR_CONFIG = 2,
    CLU_ERR_DIVERGENCE = 3,
    CLU_ERR_ACCEPTANCE = 4,
    CLU_ERR_IO = 5,
    CLU_ERR_CONTRACT = 6,
    CLU_ERR_DIMENSION = 7,
    CLU_ERR_INDEX = 8,
    CLU_ERR_INVALID_ARGUMENT = 9,
    CLU_ERR_INTERNAL = 10
} clu_status;

typedef struct clu_config clu_config;
typedef struct clu_session clu_session;

/* Message of the last failed call on this thread; "" when none. */
CLU_API const char* clu_last_error(void);
CLU_API const char* clu_version(void);
/* Frees strings returned through char** out-parameters. */
CLU_API void clu_string_free(char* s);

/* ---- configuration ---- */

CLU_API clu_status clu_config_default(clu_config** out);
/* 100 classes, window 30, stride 10. */
CLU_API clu_status clu_config_large(clu_config** out);
CLU_API clu_status clu_config_load(const char* path, clu_config** out);
CLU_API clu_status clu_config_from_json(const char* text, clu_config** out);
CLU_API clu_status clu_config_to_json(const clu_config* cfg, char** out);
CLU_API clu_status clu_config_save(const clu_config* cfg, const char* path);
CLU_API clu_status clu_config_validate(const clu_config* cfg);
/* Re-derives every component seed from `seed`. */
CLU_API clu_status clu_config_set_seed(clu_config* cfg, uint64_t seed);
/* "bid" or "standard". */
CLU_API clu_status clu_config_set_mode(clu_config* cfg, const char* mode);
CLU_API clu_status clu_config_set_output_dir(clu_config* cfg, const char* dir);
CLU_API clu_status clu_config_num_tasks(const clu_config* cfg, size_t* out);
/* Run directory: <output root>/<name>. */
CLU_API clu_status clu_config_run_dir(const clu_config* cfg, char** out);
CLU_API void clu_config_free(clu_config* cfg);

/* ---- sessions: dataset, plan, oracle cache and the current model ---- */

typedef struct clu_report {
    int task;
    double tunable_ratio;
    double acc_f;
    double acc_r;
    double acc_n;
    double acc_o;
    double kl;
    double mia;
    double oracle_acc_o;  /* NaN when not measured */
    double pre_retain_acc;
    double pre_forget_acc;
    double oracle_acc_new;
    double chance_bound;
    double max_forgotten_acc; /* worst accuracy over every forget set so far */
    int cumulative_ok;
    int merge_consistent;
} clu_report;

/* Generates the dataset and plan for `cfg` (copied). No model yet. */
CLU_API clu_status clu_session_create(const clu_config* cfg, clu_session** out);
CLU_API void clu_session_free(clu_session* s);

/* Trains the initial model on the plan's first window; task index becomes 0. */
CLU_API clu_status clu_session_pretrain(clu_session* s);
CLU_API clu_status clu_session_save_checkpoint(const clu_session* s, const char* path);
/* The checkpoint's backbone must match the session config. */
CLU_API clu_status clu_session_load_checkpoint(clu_session* s, const char* path);
CLU_API clu_status clu_session_task_index(const clu_session* s, int* out);

/* One continual learning-unlearning step. `task` must be task index + 1. */
CLU_API clu_status clu_session_adapt(clu_session* s, int task, clu_report* out);
/* JSON report of the last adapt call. */
CLU_API clu_status clu_session_report_json(const clu_session* s, char** out);
/* CSV header and row of the last adapt call, matching the aggregate file. */
CLU_API clu_status clu_csv_header(char** out);
CLU_API clu_status clu_session_report_csv(const clu_session* s, char** out);
/* JSON lines log of the last pretrain or adapt call. */
CLU_API clu_status clu_session_write_log(const clu_session* s, const char* path);
/* After the final task: active window disjoint from the pretraining window,
   every pretraining class forgotten, cumulative bound intact. */
CLU_API clu_status clu_session_full_replacement(const clu_session* s, int* out);

/* Single-task ablation on the first task from the session's current model,
   which must be the pretrained one. param: rank | buffer_ratio | lambda_esc |
   pathway_gate. Writes the table as CSV. */
CLU_API clu_status clu_session_sweep(clu_session* s, const char* param, const char* const* values, size_t n_values,
                                     size_t jobs, char** csv_out);

/* ---- escape solver ---- */

typedef struct clu_escape_options {
    size_t iters;
    double step;
    size_t restarts;
    uint64_t seed;
    int smooth;
    double temperature;
} clu_escape_options;

CLU_API void clu_escape_default_options(clu_escape_options* out);

/* centroids: n x dim row-major. direction and point receive dim values. */
CLU_API clu_status clu_escape_solve(const double* centroids, size_t n, size_t dim, double lambda_esc,
                                    const clu_escape_options* options, double* direction, double* point,
                                    double* minimax_value);

#ifdef __cplusplus
}
#endif

#endif
