#pragma once

// Open-loop planning metrics and the PDMS / EPDMS composites.

#include "dw0/gridworld.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace dw0 {

struct SubScoresV1 {
  double nc = 1.0;
  double dac = 1.0;
  double ttc = 1.0;
  double comfort = 1.0;
  double ep = 1.0;
};

struct SubScoresV2 {
  double nc = 1.0;
  double dac = 1.0;
  double ddc = 1.0;
  double tlc = 1.0;
  double ep = 1.0;
  double ttc = 1.0;
  double lk = 1.0;
  double hc = 1.0;
  double ec = 1.0;
};

/// NC * DAC * (5 EP + 5 TTC + 2 C) / 12
double pdms(const SubScoresV1& s);
/// NC * DAC * DDC * TLC * (5 EP + 5 TTC + 2 LK + 2 HC + 2 EC) / 16
double epdms(const SubScoresV2& s);

struct ScoringConfig {
  double ego_radius = 1.0;
  double agent_radius = 1.0;
  double ttc_threshold = 1.0;
  double max_accel = 4.0;
  double max_jerk = 8.0;
  double min_expert_progress = 0.1;
};

/// Ego disc swept along consecutive waypoints against agent discs moving
/// between the matching timestamps (both linearly interpolated).
bool swept_disc_collision(const Trajectory& plan, const AgentFutures& agents, const ScoringConfig& cfg = {});
/// Minimum constant-velocity time until the discs touch, over waypoints and
/// agents; +inf when nothing closes in.
double min_time_to_collision(const Trajectory& plan, const AgentFutures& agents, const ScoringConfig& cfg = {});
bool is_comfortable(const Trajectory& plan, const ScoringConfig& cfg = {});
/// Every waypoint lands on a road pixel of the scene raster.
bool is_drivable(const Trajectory& plan, const Image& image);
/// Arc-length coordinate of `point` projected onto the path origin -> reference
/// waypoints, extended past its end along the last segment.
double path_progress(const Trajectory& reference, const Vec2& point);
double ego_progress_ratio(const Trajectory& plan, const Trajectory& expert, const ScoringConfig& cfg = {});

SubScoresV1 score_scenario(const Trajectory& predicted, const SceneRecord& record, const ScoringConfig& cfg = {});

double ade(const Trajectory& predicted, const Trajectory& expert);

struct ScenarioResult {
  std::string id;
  double ade_m = 0.0;
  SubScoresV1 scores;
  double pdms = 0.0;
};

struct EvalSummary {
  std::size_t scenarios = 0;
  double ade_m = 0.0;
  double collision_rate = 0.0;
  SubScoresV1 mean_scores;
  /// Mean of per-scenario PDMS, not PDMS of the mean sub-scores.
  double pdms = 0.0;
};

ScenarioResult evaluate_scenario(const std::string& id, const Trajectory& predicted, const SceneRecord& record,
                                 const ScoringConfig& cfg = {});
double collision_rate(const std::vector<ScenarioResult>& results);
EvalSummary aggregate(const std::vector<ScenarioResult>& results);

/// Columns: scenario, ade_m, nc, dac, ttc, comfort, ep, pdms; final row "AGG".
void write_eval_report(const std::filesystem::path& path, const std::vector<ScenarioResult>& results);

}  // namespace dw0
