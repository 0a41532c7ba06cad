#pragma once

// Synthetic 2-D driving world: lane geometry, scripted agents, an expert
// planner, an ego-centric raster, and the binary dataset format.

#include "dw0/common.hpp"

#include <Eigen/Core>

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace dw0 {

inline constexpr double kStepSeconds = 0.5;
inline constexpr int kWaypoints = 6;
inline constexpr int kMaxAgents = 4;
inline constexpr int kImageSize = 32;
inline constexpr int kImageChannels = 3;
inline constexpr int kImageBytes = kImageSize * kImageSize * kImageChannels;
inline constexpr int kClipFrames = 16;
inline constexpr double kWorkspaceBound = 25.0;

// Raster geometry: 1 m per pixel, forward is up, ego pixel at (27, 16).
inline constexpr double kMetersPerPixel = 1.0;
inline constexpr int kEgoRow = 27;
inline constexpr int kEgoCol = 16;
inline constexpr std::uint8_t kRoadLevel = 128;   // green channel
inline constexpr std::uint8_t kAgentLevel = 255;  // red channel
inline constexpr std::uint8_t kEgoLevel = 255;    // blue channel

using Vec2 = Eigen::Vector2d;
using Image = std::array<std::uint8_t, kImageBytes>;

enum class Command : std::uint8_t { Follow = 0, Left = 1, Right = 2, Stop = 3 };
enum class Scenario : std::uint8_t { Cruise = 0, LeadFollow = 1, JunctionTurn = 2, Stop = 3, CrossingAgent = 4 };
inline constexpr int kScenarioCount = 5;
enum class AgentBehavior : std::uint8_t { ConstantSpeed = 0, LeadGapKeeping = 1, Crossing = 2 };

std::string to_string(Command c);
std::string to_string(Scenario s);
Scenario scenario_from_string(const std::string& name);

struct Pose {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;
};

/// Six (x, y) waypoints in the ego frame (x forward, y left) at
/// t + 0.5 s ... t + 3.0 s.
struct Trajectory {
  Eigen::Matrix<double, kWaypoints, 2> points = Eigen::Matrix<double, kWaypoints, 2>::Zero();

  bool within(double bound) const { return points.cwiseAbs().maxCoeff() <= bound; }
};

/// Piecewise-linear curve with cached arc lengths and per-vertex curvature.
class Polyline {
 public:
  Polyline() = default;
  explicit Polyline(std::vector<Vec2> points);

  struct Projection {
    double s = 0.0;
    double lateral = 0.0;  // signed, positive to the left of travel
    double distance = 0.0;
  };

  const std::vector<Vec2>& points() const { return points_; }
  double length() const { return arc_.empty() ? 0.0 : arc_.back(); }
  Vec2 point_at(double s) const;
  double heading_at(double s) const;
  double curvature_at(double s) const;
  Projection project(const Vec2& p) const;

 private:
  std::size_t segment_at(double s) const;

  std::vector<Vec2> points_;
  std::vector<double> arc_;
  std::vector<double> curvature_;
};

/// Route polylines sharing one road; `follow`, `left`, `right` index into
/// routes (-1 when that branch does not exist).
struct Road {
  std::vector<Polyline> routes;
  int follow = 0;
  int left = -1;
  int right = -1;
  double half_width = 2.0;
  double speed_limit = 6.0;

  int route_for(Command c) const;
};

struct Agent {
  Pose pose;
  double speed = 0.0;
  AgentBehavior behavior = AgentBehavior::ConstantSpeed;
  int route = -1;         // route followed (ConstantSpeed / LeadGapKeeping)
  double s = 0.0;         // arc position on route
  double lateral = 0.0;   // offset from route centerline
  double cruise_speed = 0.0;
  double brake_time = 1e9;  // seconds since scene start at which LeadGapKeeping slows
  double brake_speed = 0.0;
};

struct SceneState {
  Pose ego;
  double ego_speed = 0.0;
  Road road;
  std::vector<Agent> agents;
  std::uint64_t seed = 0;
  int time_index = 0;
};

/// Unicycle command held for one 0.5 s step.
struct EgoAction {
  double speed = 0.0;
  double yaw_rate = 0.0;
};

struct AgentFutures {
  std::array<Eigen::Matrix<double, kWaypoints, 2>, kMaxAgents> positions{};
  std::uint8_t presence = 0;

  bool present(int a) const { return (presence >> a) & 1U; }
};

struct EgoStateRecord {
  float x = 0, y = 0, heading = 0, speed = 0;
};

struct SceneRecord {
  Image image{};
  Command command = Command::Follow;
  EgoStateRecord ego;
  Trajectory expert;
  AgentFutures agents;
  std::uint32_t clip_id = 0;
  std::uint16_t frame_index = 0;
  // Generation metadata, not serialized.
  Scenario scenario = Scenario::Cruise;
  bool fallback = false;
};

struct DynamicsLimits {
  double max_speed = 8.0;
  double max_yaw_rate = 1.2;
};

SceneState step_dynamics(const SceneState& state, const EgoAction& action, const DynamicsLimits& limits = {});

struct PlannerConfig {
  double max_decel = 3.0;       // a_max
  double min_gap = 4.0;         // same-lane following distance, center to center
  double lateral_accel = 1.5;   // curve speed limit
  double plan_decel = 1.5;      // used to slow ahead of curves
  double safety_margin = 3.0;   // clearance to any agent, plan and brake continuation
  DynamicsLimits limits;
};

struct ExpertPlan {
  Trajectory trajectory;
  std::array<EgoAction, kWaypoints> actions{};
  /// Set when the requested branch does not exist (FOLLOW used instead) or
  /// no candidate satisfied every check (hardest braking used instead).
  bool fallback = false;
};

ExpertPlan expert_policy(const SceneState& state, Command command, const PlannerConfig& config = {});

/// Deterministic ego-centric raster: road corridor in green, agents in red,
/// ego in blue; channels combine so each layer stays recoverable.
Image render_frame(const SceneState& state);
/// Raster row/column of an ego-frame point; nullopt when outside the image.
std::optional<std::pair<int, int>> ego_point_to_pixel(const Vec2& p);
bool pixel_is_road(const Image& image, int row, int col);

Vec2 to_ego_frame(const Pose& ego, const Vec2& world);
AgentFutures predict_agent_futures(const SceneState& state);

// ---- dataset generation ---------------------------------------------------

struct ScenarioMix {
  std::array<double, kScenarioCount> fractions{0.2, 0.2, 0.2, 0.2, 0.2};

  static ScenarioMix parse(const std::string& text);  // "cruise:0.5,stop:0.5"
  static ScenarioMix only(Scenario s);
  void validate() const;
  std::string to_string() const;
};

SceneState sample_scenario(Scenario scenario, std::uint64_t seed);

std::vector<SceneRecord> generate_records(std::size_t n_frames, std::uint64_t seed, const ScenarioMix& mix);

inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::size_t kRecordBytes = 4 + 2 + 1 + 1 + 16 + kImageBytes + 48 + kMaxAgents * kWaypoints * 8 + 1;

void write_dataset(const std::filesystem::path& path, const std::vector<SceneRecord>& records);
std::vector<SceneRecord> read_dataset(const std::filesystem::path& path);

/// Format checker: magic, version, declared count vs file size, field
/// ranges. Returns a list of problems (empty when valid).
std::vector<std::string> validate_dataset_file(const std::filesystem::path& path);

/// generate_records + write_dataset. Refuses to replace an existing file
/// unless overwrite is set.
std::vector<SceneRecord> generate_dataset(std::size_t n_frames, std::uint64_t seed, const ScenarioMix& mix,
                                          const std::filesystem::path& out, bool overwrite = false);

}  // namespace dw0
