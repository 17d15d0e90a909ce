#pragma once

#include "clu/harness.hpp"

#include <cstdint>
#include <string>

namespace clu {

struct RunConfig {
    std::string name = "desk";
    std::uint64_t seed = 0;
    SyntheticConfig dataset;
    BackboneConfig model;
    PlanConfig plan;
    PretrainOptions pretrain;
    ProtocolConfig protocol;
    std::string output_dir;  // empty: $CLU_RUNS_DIR, else ./runs

    // Pushes the run seed into every component seed.
    void apply_seed(std::uint64_t s);
    void validate() const;

    std::string to_json() const;
    static RunConfig from_json(const std::string& text);
    static RunConfig load(const std::string& path);
    void save(const std::string& path) const;
};

// Large variant: 100 classes, 30-class window sliding by 10.
RunConfig large_config();

// Resolved output root: config value, then $CLU_RUNS_DIR, then "runs".
std::string output_root(const RunConfig& config);

}  // namespace clu
