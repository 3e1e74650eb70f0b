#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "odeflow/control.hpp"
#include "odeflow/diagnostics.hpp"
#include "odeflow/train.hpp"

namespace odeflow {

// All artifact writers go through a temp-file-plus-rename so a crash or a
// rerun never leaves a half-written file behind.
void write_text_atomic(const std::string& path, const std::string& content);
std::string read_text(const std::string& path);

// ---------------------------------------------------------------------------
// Checkpoints: the trained control grid plus the config that produced it,
// one self-describing JSON document.  Parameter values survive the
// round-trip bit-exactly.
// ---------------------------------------------------------------------------

struct Checkpoint {
  ControlGrid grid;
  nlohmann::json config;  // experiment config echo (may be null)
};

void save_checkpoint(const std::string& path, const ControlGrid& grid,
                     const nlohmann::json& config_echo);
Checkpoint load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// CSV / JSON report writers.  Every file starts with a `# config ...`
// comment (CSV) or carries a "config" key (JSON) so artifacts are
// self-describing.
// ---------------------------------------------------------------------------

nlohmann::json solver_json(const SolverConfig& cfg);

void write_convergence_csv(const std::string& path, const ConvergenceLog& log,
                           const nlohmann::json& config_echo);

// One row per accepted solver time; columns t, y0..y{n-1} and g when the
// record carries the log-density channel.  `sample` picks the batch column.
void write_trajectory_csv(const std::string& path, const SolveRecord& rec,
                          Index sample, const nlohmann::json& config_echo);

nlohmann::json taylor_json(const TaylorCheck& tc);
void write_taylor_csv(
    const std::string& path,
    const std::vector<std::pair<std::string, TaylorCheck>>& checks,
    const nlohmann::json& config_echo);

nlohmann::json redisc_json(const std::vector<RediscRow>& rows);
void write_redisc_csv(const std::string& path,
                      const std::vector<RediscRow>& rows,
                      const nlohmann::json& config_echo);

}  // namespace odeflow
