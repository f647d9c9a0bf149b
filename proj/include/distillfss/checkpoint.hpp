#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "distillfss/config.hpp"
#include "distillfss/student.hpp"
#include "distillfss/teacher.hpp"

namespace distillfss {

enum class CheckpointKind { Teacher, Student };

// On disk: a text header (magic, kind, config and metrics blobs, one manifest
// line per block with its shape) followed by the raw parameter values as
// little-endian float32 in manifest order.
struct Checkpoint {
    CheckpointKind kind = CheckpointKind::Teacher;
    Config config;        // architecture under "arch.*", run settings elsewhere
    std::string metrics;  // free-form text
    std::vector<std::pair<std::string, Tensor>> blocks;
};

// Writes to a temporary sibling and renames it into place.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

void write_arch(const ArchConfig& arch, Config& cfg);
ArchConfig read_arch(const Config& cfg);

Checkpoint make_checkpoint(const Teacher& teacher, const Config& run_config, const std::string& metrics);
// Backbone, decoder and ConvDist banks only; no attention weights.
Checkpoint make_checkpoint(const Student& student, const Config& run_config, const std::string& metrics);

Teacher teacher_from_checkpoint(const Checkpoint& ckpt);
// Throws naming the missing ConvDist blocks when given a teacher checkpoint.
Student student_from_checkpoint(const Checkpoint& ckpt);

}  // namespace distillfss
