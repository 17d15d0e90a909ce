#pragma once

#include "clu/adapters.hpp"
#include "clu/config.hpp"
#include "clu/model.hpp"

#include <cstdint>
#include <optional>
#include <string>

namespace clu {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Record tags. Adapter records carry the pathway they belong to; a shared
// (standard low-rank) bundle uses its own tag.
enum class RecordTag : std::uint8_t { model = 0, retain = 1, novel = 2, forget = 3, shared = 4 };

struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    RunConfig config;
    int task_index = 0;  // 0 after pretraining, t after task t
    Model model;
    std::optional<PathwayBundle> bundle;  // only for unmerged snapshots

    explicit Checkpoint(Model m) : model(std::move(m)) {}
};

// Little-endian binary layout:
//   "CLUCKPT\0", u32 version, u64 len + config JSON, i32 task index,
//   u32 count + i32 active classes, u8 has_bundle [u8 mode, f64 scaling],
//   u32 record count, records (u32 len + name, u8 tag, u32 ndim, u64 dims, f64 values).
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
// IoError when the file is missing or malformed; a version other than
// kCheckpointVersion is rejected outright.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace clu
