#pragma once

#include <optional>
#include <string>
#include <vector>

#include "utrack/env.hpp"

namespace utrack {

/// One entity at one step of an episode. est_* / track_err are filled for
/// targets only (the best estimate across agents).
struct TrajectoryRow {
  int step = 0;
  std::string entity_id;
  std::string kind;  // "agent" | "target"
  double x = 0.0, y = 0.0, z = 0.0, heading = 0.0;
  std::optional<double> est_x, est_y, track_err;
  double reward = 0.0;
  int collision = 0;
};

inline constexpr const char* kTrajectoryHeader =
    "step,entity_id,kind,x,y,z,heading,est_x,est_y,track_err,reward,collision";

/// Captures the environment's current state (after a step) as one row per
/// entity.
void append_trajectory_rows(const Environment& env, double reward, bool collision,
                            std::vector<TrajectoryRow>& rows);

void write_trajectory_csv(const std::string& path,
                          const std::vector<TrajectoryRow>& rows);

/// Throws DataError naming the line on malformed input.
std::vector<TrajectoryRow> read_trajectory_csv(const std::string& path);

/// Self-contained vector plot: agent paths, target paths, estimate paths
/// (dashed), collision markers, axes and a legend. Deterministic output.
std::string trajectory_svg(const std::vector<TrajectoryRow>& rows);
void write_trajectory_svg(const std::string& path,
                          const std::vector<TrajectoryRow>& rows);

}  // namespace utrack
