#include "dw0/gridworld.hpp"

#include "dw0/binary_io.hpp"
#include "dw0/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace dw0 {

namespace {

constexpr double kPi = std::numbers::pi;

double wrap_angle(double a) {
  while (a > kPi) a -= 2 * kPi;
  while (a < -kPi) a += 2 * kPi;
  return a;
}

Vec2 heading_vec(double h) { return {std::cos(h), std::sin(h)}; }

Pose integrate_unicycle(const Pose& p, double v, double w, double dt) {
  Pose out = p;
  if (std::abs(w) < 1e-9) {
    out.x += v * std::cos(p.heading) * dt;
    out.y += v * std::sin(p.heading) * dt;
  } else {
    out.x += v / w * (std::sin(p.heading + w * dt) - std::sin(p.heading));
    out.y += v / w * (std::cos(p.heading) - std::cos(p.heading + w * dt));
    out.heading = wrap_angle(p.heading + w * dt);
  }
  return out;
}

}  // namespace

std::string to_string(Command c) {
  switch (c) {
    case Command::Follow: return "FOLLOW";
    case Command::Left: return "LEFT";
    case Command::Right: return "RIGHT";
    case Command::Stop: return "STOP";
  }
  return "?";
}

namespace {
constexpr std::array<const char*, kScenarioCount> kScenarioNames{"cruise", "lead-follow", "junction-turn", "stop",
                                                                  "crossing-agent"};
}

std::string to_string(Scenario s) { return kScenarioNames.at(static_cast<std::size_t>(s)); }

Scenario scenario_from_string(const std::string& name) {
  for (std::size_t i = 0; i < kScenarioNames.size(); ++i)
    if (name == kScenarioNames[i]) return static_cast<Scenario>(i);
  throw UsageError("unknown scenario '" + name + "'");
}

// ---- Polyline ---------------------------------------------------------------

Polyline::Polyline(std::vector<Vec2> points) : points_(std::move(points)) {
  if (points_.size() < 2) throw std::invalid_argument("Polyline needs at least two points");
  arc_.assign(points_.size(), 0.0);
  for (std::size_t i = 1; i < points_.size(); ++i) arc_[i] = arc_[i - 1] + (points_[i] - points_[i - 1]).norm();
  curvature_.assign(points_.size(), 0.0);
  for (std::size_t i = 1; i + 1 < points_.size(); ++i) {
    const Vec2 a = points_[i] - points_[i - 1], b = points_[i + 1] - points_[i];
    const double turn = wrap_angle(std::atan2(b.y(), b.x()) - std::atan2(a.y(), a.x()));
    curvature_[i] = turn / (0.5 * (a.norm() + b.norm()));
  }
}

std::size_t Polyline::segment_at(double s) const {
  const auto it = std::upper_bound(arc_.begin(), arc_.end(), s);
  const auto idx = static_cast<std::size_t>(std::distance(arc_.begin(), it));
  return std::clamp<std::size_t>(idx == 0 ? 0 : idx - 1, 0, points_.size() - 2);
}

Vec2 Polyline::point_at(double s) const {
  const auto i = segment_at(s);
  const Vec2 d = points_[i + 1] - points_[i];
  const double len = arc_[i + 1] - arc_[i];
  return points_[i] + d * ((s - arc_[i]) / len);
}

double Polyline::heading_at(double s) const {
  const auto i = segment_at(s);
  const Vec2 d = points_[i + 1] - points_[i];
  return std::atan2(d.y(), d.x());
}

double Polyline::curvature_at(double s) const {
  const auto i = segment_at(s);
  return (s - arc_[i] < arc_[i + 1] - s) ? curvature_[i] : curvature_[i + 1];
}

Polyline::Projection Polyline::project(const Vec2& p) const {
  Projection best;
  best.distance = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i + 1 < points_.size(); ++i) {
    const Vec2 a = points_[i], ab = points_[i + 1] - a;
    const double len2 = ab.squaredNorm();
    const double u = std::clamp((p - a).dot(ab) / len2, 0.0, 1.0);
    const Vec2 q = a + u * ab;
    const double d = (p - q).norm();
    if (d < best.distance) {
      best.distance = d;
      best.s = arc_[i] + u * std::sqrt(len2);
      const double cross = ab.x() * (p - a).y() - ab.y() * (p - a).x();
      best.lateral = cross >= 0 ? d : -d;
    }
  }
  return best;
}

int Road::route_for(Command c) const {
  switch (c) {
    case Command::Left: return left;
    case Command::Right: return right;
    default: return follow;
  }
}

// ---- dynamics -----------------------------------------------------------------

namespace {

void place_on_route(Agent& a, const Road& road) {
  const auto& route = road.routes.at(static_cast<std::size_t>(a.route));
  const double h = route.heading_at(a.s);
  const Vec2 p = route.point_at(a.s) + a.lateral * Vec2(-std::sin(h), std::cos(h));
  a.pose = {p.x(), p.y(), h};
}

std::vector<Agent> step_agents(const std::vector<Agent>& agents, const Road& road, int time_index) {
  std::vector<Agent> next = agents;
  const double t = time_index * kStepSeconds;
  for (std::size_t i = 0; i < agents.size(); ++i) {
    const Agent& a = agents[i];
    Agent& n = next[i];
    switch (a.behavior) {
      case AgentBehavior::ConstantSpeed:
        n.s = a.s + a.speed * kStepSeconds;
        place_on_route(n, road);
        break;
      case AgentBehavior::LeadGapKeeping: {
        double target = t >= a.brake_time ? a.brake_speed : a.cruise_speed;
        for (std::size_t j = 0; j < agents.size(); ++j) {
          const Agent& o = agents[j];
          if (j == i || o.route != a.route || o.behavior == AgentBehavior::Crossing) continue;
          const double gap = o.s - a.s;
          if (gap > 0 && gap < 10.0) target = std::min(target, o.speed * std::max(0.0, (gap - 6.0) / 4.0));
        }
        const double dv = std::clamp(target - a.speed, -2.0 * kStepSeconds, 2.0 * kStepSeconds);
        n.speed = std::max(0.0, a.speed + dv);
        n.s = a.s + n.speed * kStepSeconds;
        place_on_route(n, road);
        break;
      }
      case AgentBehavior::Crossing:
        n.pose.x = a.pose.x + a.speed * std::cos(a.pose.heading) * kStepSeconds;
        n.pose.y = a.pose.y + a.speed * std::sin(a.pose.heading) * kStepSeconds;
        break;
    }
  }
  return next;
}

}  // namespace

SceneState step_dynamics(const SceneState& state, const EgoAction& action, const DynamicsLimits& limits) {
  SceneState next = state;
  const double v = std::clamp(action.speed, 0.0, limits.max_speed);
  const double w = std::clamp(action.yaw_rate, -limits.max_yaw_rate, limits.max_yaw_rate);
  next.ego = integrate_unicycle(state.ego, v, w, kStepSeconds);
  next.ego_speed = v;
  next.agents = step_agents(state.agents, state.road, state.time_index);
  next.time_index = state.time_index + 1;
  return next;
}

Vec2 to_ego_frame(const Pose& ego, const Vec2& world) {
  const Vec2 d = world - Vec2(ego.x, ego.y);
  const double c = std::cos(ego.heading), s = std::sin(ego.heading);
  return {c * d.x() + s * d.y(), -s * d.x() + c * d.y()};
}

AgentFutures predict_agent_futures(const SceneState& state) {
  AgentFutures f;
  std::vector<Agent> agents = state.agents;
  int t = state.time_index;
  for (int k = 0; k < kWaypoints; ++k) {
    agents = step_agents(agents, state.road, t++);
    for (std::size_t a = 0; a < agents.size() && a < static_cast<std::size_t>(kMaxAgents); ++a) {
      const Vec2 p = to_ego_frame(state.ego, {agents[a].pose.x, agents[a].pose.y});
      f.positions[a].row(k) = p.transpose();
    }
  }
  for (std::size_t a = 0; a < state.agents.size() && a < static_cast<std::size_t>(kMaxAgents); ++a)
    f.presence |= static_cast<std::uint8_t>(1U << a);
  return f;
}

// ---- raster -------------------------------------------------------------------

std::optional<std::pair<int, int>> ego_point_to_pixel(const Vec2& p) {
  const int row = kEgoRow - static_cast<int>(std::floor(p.x() / kMetersPerPixel + 0.5));
  const int col = kEgoCol - static_cast<int>(std::floor(p.y() / kMetersPerPixel + 0.5));
  if (row < 0 || row >= kImageSize || col < 0 || col >= kImageSize) return std::nullopt;
  return std::make_pair(row, col);
}

bool pixel_is_road(const Image& image, int row, int col) {
  return image[static_cast<std::size_t>((row * kImageSize + col) * kImageChannels + 1)] >= kRoadLevel;
}

Image render_frame(const SceneState& state) {
  Image img{};
  const Vec2 ego_pos(state.ego.x, state.ego.y);
  const double c = std::cos(state.ego.heading), s = std::sin(state.ego.heading);
  // Only segments that can reach the view matter.
  const double view_radius = std::hypot(kImageSize, kImageSize) * kMetersPerPixel;
  std::vector<std::pair<Vec2, Vec2>> segments;
  for (const auto& route : state.road.routes) {
    const auto& pts = route.points();
    for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
      const Vec2 a = pts[i], ab = pts[i + 1] - a;
      const double u = std::clamp((ego_pos - a).dot(ab) / ab.squaredNorm(), 0.0, 1.0);
      if ((a + u * ab - ego_pos).norm() <= view_radius) segments.emplace_back(a, ab);
    }
  }
  const double w2 = state.road.half_width * state.road.half_width;
  for (int r = 0; r < kImageSize; ++r) {
    for (int col = 0; col < kImageSize; ++col) {
      const double fx = (kEgoRow - r) * kMetersPerPixel, fy = (kEgoCol - col) * kMetersPerPixel;
      const Vec2 world = ego_pos + Vec2(c * fx - s * fy, s * fx + c * fy);
      bool road = false;
      for (const auto& [a, ab] : segments) {
        const double u = std::clamp((world - a).dot(ab) / ab.squaredNorm(), 0.0, 1.0);
        if ((a + u * ab - world).squaredNorm() <= w2) {
          road = true;
          break;
        }
      }
      if (road) img[static_cast<std::size_t>((r * kImageSize + col) * kImageChannels + 1)] = kRoadLevel;
    }
  }
  for (const auto& a : state.agents) {
    if (const auto px = ego_point_to_pixel(to_ego_frame(state.ego, {a.pose.x, a.pose.y})))
      img[static_cast<std::size_t>((px->first * kImageSize + px->second) * kImageChannels + 0)] = kAgentLevel;
  }
  img[static_cast<std::size_t>((kEgoRow * kImageSize + kEgoCol) * kImageChannels + 2)] = kEgoLevel;
  return img;
}

// ---- expert ---------------------------------------------------------------------

namespace {

struct Rollout {
  std::array<Pose, kWaypoints + 1> poses{};
  std::array<EgoAction, kWaypoints> actions{};
  double progress = 0.0;
};

double curve_speed_limit(const Polyline& route, double s, const PlannerConfig& cfg) {
  double limit = std::numeric_limits<double>::infinity();
  for (double ds = 0.0; ds <= 60.0; ds += 1.0) {
    const double kappa = std::abs(route.curvature_at(s + ds));
    if (kappa < 1e-6) continue;
    const double vc = std::sqrt(cfg.lateral_accel / kappa);
    limit = std::min(limit, std::sqrt(vc * vc + 2.0 * cfg.plan_decel * ds));
  }
  return limit;
}

EgoAction pursue(const Polyline& route, const Pose& pose, double v, const PlannerConfig& cfg) {
  const Vec2 pos(pose.x, pose.y);
  const double s = route.project(pos).s;
  const double lookahead = std::clamp(1.0 * v + 2.5, 3.0, 10.0);
  const Vec2 target = to_ego_frame(pose, route.point_at(s + lookahead));
  const double dist = target.norm();
  const double alpha = std::atan2(target.y(), target.x());
  const double kappa = dist > 1e-9 ? 2.0 * std::sin(alpha) / dist : 0.0;
  return {v, std::clamp(v * kappa, -cfg.limits.max_yaw_rate, cfg.limits.max_yaw_rate)};
}

/// accel == nullopt means the STOP profile (decelerate at max_decel).
Rollout roll_out(const Polyline& route, const SceneState& state, double accel, bool stop, const PlannerConfig& cfg) {
  Rollout r;
  r.poses[0] = state.ego;
  double v = state.ego_speed;
  for (int k = 0; k < kWaypoints; ++k) {
    const Pose& p = r.poses[k];
    double v_next;
    if (stop) {
      v_next = std::max(0.0, v - cfg.max_decel * kStepSeconds);
    } else {
      const double s = route.project({p.x, p.y}).s;
      const double cap = std::min({state.road.speed_limit, cfg.limits.max_speed, curve_speed_limit(route, s, cfg)});
      v_next = std::clamp(v + accel * kStepSeconds, 0.0, std::max(0.0, cap));
      v_next = std::max(v_next, v - cfg.max_decel * kStepSeconds);
    }
    r.actions[k] = pursue(route, p, v_next, cfg);
    r.poses[k + 1] = integrate_unicycle(p, r.actions[k].speed, r.actions[k].yaw_rate, kStepSeconds);
    r.progress += v_next;
    v = v_next;
  }
  return r;
}

Trajectory to_trajectory(const Rollout& r) {
  Trajectory t;
  for (int k = 0; k < kWaypoints; ++k) {
    const Vec2 p = to_ego_frame(r.poses[0], {r.poses[k + 1].x, r.poses[k + 1].y});
    t.points.row(k) = p.transpose();
  }
  return t;
}

bool keeps_clearance(const Polyline& route, const Rollout& r, const SceneState& state,
                     const std::vector<std::vector<Agent>>& agent_steps, const PlannerConfig& cfg) {
  const int route_idx = static_cast<int>(&route - state.road.routes.data());
  auto too_close = [&](const Pose& ego, const std::vector<Agent>& agents) {
    for (const auto& a : agents) {
      const Vec2 d(a.pose.x - ego.x, a.pose.y - ego.y);
      double need = cfg.safety_margin;
      // same-lane traffic ahead gets the full following distance
      if (a.route == route_idx && a.behavior != AgentBehavior::Crossing && to_ego_frame(ego, {a.pose.x, a.pose.y}).x() > 0)
        need = cfg.min_gap;
      if (d.norm() < need) return true;
    }
    return false;
  };
  for (int k = 1; k <= kWaypoints; ++k)
    if (too_close(r.poses[k], agent_steps[k])) return false;
  // emergency-brake continuation past the horizon
  Pose p = r.poses[kWaypoints];
  double v = r.actions[kWaypoints - 1].speed;
  for (std::size_t k = kWaypoints + 1; k < agent_steps.size(); ++k) {
    v = std::max(0.0, v - cfg.max_decel * kStepSeconds);
    const EgoAction act = pursue(route, p, v, cfg);
    p = integrate_unicycle(p, act.speed, act.yaw_rate, kStepSeconds);
    if (too_close(p, agent_steps[k])) return false;
  }
  return true;
}

}  // namespace

ExpertPlan expert_policy(const SceneState& state, Command command, const PlannerConfig& cfg) {
  ExpertPlan plan;
  int route_idx = state.road.route_for(command);
  if (route_idx < 0) {
    route_idx = state.road.follow;
    plan.fallback = true;
  }
  const Polyline& route = state.road.routes.at(static_cast<std::size_t>(route_idx));

  // agent positions at every step of the horizon plus a 6 s continuation
  std::vector<std::vector<Agent>> agent_steps{state.agents};
  for (int k = 1; k <= 3 * kWaypoints; ++k)
    agent_steps.push_back(step_agents(agent_steps.back(), state.road, state.time_index + k - 1));

  SceneRecord probe;
  probe.image = render_frame(state);
  probe.agents = predict_agent_futures(state);

  const bool stop = command == Command::Stop;
  static constexpr std::array<double, 10> kAccels{1.5, 1.0, 0.5, 0.0, -0.5, -1.0, -1.5, -2.0, -2.5, -3.0};
  std::optional<Rollout> best;
  for (double a : kAccels) {
    const Rollout r = roll_out(route, state, a, stop, cfg);
    const Trajectory traj = to_trajectory(r);
    probe.expert = traj;
    const auto scores = score_scenario(traj, probe);
    if (scores.nc < 1 || scores.dac < 1 || scores.ttc < 1 || scores.comfort < 1) continue;
    if (!traj.within(kWorkspaceBound)) continue;
    if (!keeps_clearance(route, r, state, agent_steps, cfg)) continue;
    if (!best || r.progress > best->progress + 1e-9) best = r;
    if (stop) break;
  }
  if (!best) {
    plan.fallback = true;
    best = roll_out(route, state, -cfg.max_decel, false, cfg);
  }
  plan.trajectory = to_trajectory(*best);
  plan.actions = best->actions;
  return plan;
}

// ---- scenarios --------------------------------------------------------------------

namespace {

/// Straight and constant-curvature pieces; arcs sampled every 0.5 m.
class RouteBuilder {
 public:
  RouteBuilder(Vec2 start, double heading) : pos_(start), heading_(heading) { pts_.push_back(start); }

  RouteBuilder& straight(double length) {
    pos_ += length * heading_vec(heading_);
    pts_.push_back(pos_);
    return *this;
  }
  RouteBuilder& arc(double length, double curvature) {
    if (std::abs(curvature) < 1e-9) return straight(length);
    const int n = std::max(1, static_cast<int>(std::ceil(length / 0.5)));
    const double ds = length / n;
    for (int i = 0; i < n; ++i) {
      const Pose p = integrate_unicycle({pos_.x(), pos_.y(), heading_}, 1.0, curvature, ds);
      pos_ = {p.x, p.y};
      heading_ = p.heading;
      pts_.push_back(pos_);
    }
    return *this;
  }
  Polyline build() const { return Polyline(pts_); }

 private:
  std::vector<Vec2> pts_;
  Vec2 pos_;
  double heading_;
};

struct ClipSpec {
  SceneState initial;
  std::array<Command, kClipFrames> commands{};
};

constexpr double kEgoStartS = 20.0;

void place_ego(SceneState& st, Rng& rng, double speed_frac_lo, double speed_frac_hi) {
  const auto& route = st.road.routes[static_cast<std::size_t>(st.road.follow)];
  const double h = route.heading_at(kEgoStartS);
  const double lat = rng.uniform(-0.3, 0.3);
  const Vec2 p = route.point_at(kEgoStartS) + lat * Vec2(-std::sin(h), std::cos(h));
  st.ego = {p.x(), p.y(), wrap_angle(h + rng.uniform(-0.05, 0.05))};
  st.ego_speed = st.road.speed_limit * rng.uniform(speed_frac_lo, speed_frac_hi);
}

Agent route_agent(const Road& road, int route, AgentBehavior behavior, double s, double lateral, double speed) {
  Agent a;
  a.behavior = behavior;
  a.route = route;
  a.s = s;
  a.lateral = lateral;
  a.speed = speed;
  a.cruise_speed = speed;
  place_on_route(a, road);
  return a;
}

Polyline gentle_route(Rng& rng) {
  const double kappa = rng.uniform() < 0.5 ? 0.0 : rng.uniform(-1.0 / 60.0, 1.0 / 60.0);
  return RouteBuilder({0, 0}, 0.0).straight(rng.uniform(25.0, 60.0)).arc(rng.uniform(30.0, 60.0), kappa).straight(200.0).build();
}

void add_parked(SceneState& st, Rng& rng, int count) {
  for (int i = 0; i < count && st.agents.size() < static_cast<std::size_t>(kMaxAgents); ++i) {
    const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
    st.agents.push_back(route_agent(st.road, st.road.follow, AgentBehavior::ConstantSpeed,
                                    kEgoStartS + rng.uniform(15.0, 90.0), side * 4.0, 0.0));
  }
}

ClipSpec sample_clip(Scenario scenario, std::uint64_t seed) {
  Rng rng(seed);
  ClipSpec spec;
  SceneState& st = spec.initial;
  st.seed = seed;
  st.road.half_width = 2.0;
  spec.commands.fill(Command::Follow);
  switch (scenario) {
    case Scenario::Cruise: {
      st.road.routes = {gentle_route(rng)};
      st.road.speed_limit = rng.uniform(5.0, 8.0);
      place_ego(st, rng, 0.6, 1.0);
      add_parked(st, rng, static_cast<int>(rng.below(3)));
      if (rng.uniform() < 0.5)
        st.agents.push_back(route_agent(st.road, 0, AgentBehavior::ConstantSpeed, kEgoStartS + rng.uniform(25.0, 40.0),
                                        0.0, st.road.speed_limit + rng.uniform(0.5, 1.5)));
      break;
    }
    case Scenario::LeadFollow: {
      st.road.routes = {gentle_route(rng)};
      st.road.speed_limit = rng.uniform(6.0, 8.0);
      const double lead_speed = rng.uniform(2.5, 5.0);
      Agent lead = route_agent(st.road, 0, AgentBehavior::LeadGapKeeping, kEgoStartS + rng.uniform(14.0, 25.0), 0.0,
                               lead_speed);
      lead.brake_time = rng.uniform(2.0, 6.0);
      lead.brake_speed = rng.uniform(0.0, 2.0);
      st.agents.push_back(lead);
      if (rng.uniform() < 0.4) {
        Agent second = route_agent(st.road, 0, AgentBehavior::LeadGapKeeping, lead.s + rng.uniform(14.0, 20.0), 0.0,
                                   lead_speed + rng.uniform(-0.5, 0.5));
        second.brake_time = rng.uniform(3.0, 7.0);
        second.brake_speed = rng.uniform(0.5, 2.5);
        st.agents.push_back(second);
      }
      place_ego(st, rng, 0.0, 0.0);
      st.ego_speed = std::min(st.road.speed_limit, lead_speed + rng.uniform(0.0, 1.5));
      add_parked(st, rng, static_cast<int>(rng.below(2)));
      break;
    }
    case Scenario::JunctionTurn: {
      const double to_junction = kEgoStartS + rng.uniform(15.0, 35.0);
      const double radius = 10.0;
      st.road.routes = {
          RouteBuilder({0, 0}, 0.0).straight(to_junction + 200.0).build(),
          RouteBuilder({0, 0}, 0.0).straight(to_junction).arc(radius * kPi / 2, 1.0 / radius).straight(150.0).build(),
          RouteBuilder({0, 0}, 0.0).straight(to_junction).arc(radius * kPi / 2, -1.0 / radius).straight(150.0).build()};
      st.road.follow = 0;
      st.road.left = 1;
      st.road.right = 2;
      st.road.speed_limit = rng.uniform(5.0, 7.0);
      place_ego(st, rng, 0.6, 1.0);
      if (rng.uniform() < 0.5) {
        const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
        st.agents.push_back(route_agent(st.road, 0, AgentBehavior::ConstantSpeed,
                                        to_junction + rng.uniform(20.0, 40.0), side * 4.0, 0.0));
      }
      spec.commands.fill(rng.uniform() < 0.5 ? Command::Left : Command::Right);
      break;
    }
    case Scenario::Stop: {
      st.road.routes = {gentle_route(rng)};
      st.road.speed_limit = rng.uniform(4.0, 8.0);
      place_ego(st, rng, 0.6, 1.0);
      add_parked(st, rng, static_cast<int>(rng.below(2)));
      const auto stop_at = static_cast<std::size_t>(2 + rng.below(7));
      for (std::size_t f = stop_at; f < spec.commands.size(); ++f) spec.commands[f] = Command::Stop;
      break;
    }
    case Scenario::CrossingAgent: {
      st.road.routes = {RouteBuilder({0, 0}, 0.0).straight(300.0).build()};
      st.road.speed_limit = rng.uniform(5.0, 7.0);
      place_ego(st, rng, 0.6, 1.0);
      const double cross_s = kEgoStartS + rng.uniform(25.0, 40.0);
      const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
      Agent walker;
      walker.behavior = AgentBehavior::Crossing;
      walker.speed = rng.uniform(1.0, 2.0);
      walker.pose = {cross_s, side * rng.uniform(6.0, 12.0), side > 0 ? -kPi / 2 : kPi / 2};
      st.agents.push_back(walker);
      add_parked(st, rng, static_cast<int>(rng.below(2)));
      break;
    }
  }
  return spec;
}

}  // namespace

SceneState sample_scenario(Scenario scenario, std::uint64_t seed) { return sample_clip(scenario, seed).initial; }

// ---- mix ----------------------------------------------------------------------------

ScenarioMix ScenarioMix::parse(const std::string& text) {
  ScenarioMix mix;
  mix.fractions.fill(0.0);
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw UsageError("scenario mix entry '" + item + "' is not name:fraction");
    const auto s = scenario_from_string(item.substr(0, colon));
    try {
      mix.fractions[static_cast<std::size_t>(s)] = std::stod(item.substr(colon + 1));
    } catch (const std::exception&) {
      throw UsageError("bad fraction in scenario mix entry '" + item + "'");
    }
  }
  mix.validate();
  return mix;
}

ScenarioMix ScenarioMix::only(Scenario s) {
  ScenarioMix mix;
  mix.fractions.fill(0.0);
  mix.fractions[static_cast<std::size_t>(s)] = 1.0;
  return mix;
}

void ScenarioMix::validate() const {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) throw UsageError("scenario mix fractions must be non-negative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-6) throw UsageError("scenario mix fractions must sum to 1");
}

std::string ScenarioMix::to_string() const {
  std::ostringstream os;
  bool first = true;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    if (fractions[i] <= 0) continue;
    os << (first ? "" : ",") << kScenarioNames[i] << ':' << fractions[i];
    first = false;
  }
  return os.str();
}

// ---- dataset ----------------------------------------------------------------------

namespace {

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

/// Per-clip scenario labels: largest-remainder quotas, then a seeded shuffle.
std::vector<Scenario> assign_scenarios(std::size_t clips, std::uint64_t seed, const ScenarioMix& mix) {
  std::array<std::size_t, kScenarioCount> quota{};
  std::array<double, kScenarioCount> remainder{};
  std::size_t assigned = 0;
  for (int i = 0; i < kScenarioCount; ++i) {
    const double exact = mix.fractions[static_cast<std::size_t>(i)] * static_cast<double>(clips);
    quota[static_cast<std::size_t>(i)] = static_cast<std::size_t>(std::floor(exact));
    remainder[static_cast<std::size_t>(i)] = exact - std::floor(exact);
    assigned += quota[static_cast<std::size_t>(i)];
  }
  while (assigned < clips) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < remainder.size(); ++i)
      if (remainder[i] > remainder[best]) best = i;
    ++quota[best];
    remainder[best] = -1.0;
    ++assigned;
  }
  std::vector<Scenario> out;
  for (int i = 0; i < kScenarioCount; ++i)
    out.insert(out.end(), quota[static_cast<std::size_t>(i)], static_cast<Scenario>(i));
  Rng rng(Rng::derive(seed, 0x5CE7A210ULL));
  for (std::size_t i = out.size(); i > 1; --i) std::swap(out[i - 1], out[rng.below(i)]);
  return out;
}

}  // namespace

std::vector<SceneRecord> generate_records(std::size_t n_frames, std::uint64_t seed, const ScenarioMix& mix) {
  if (n_frames == 0) throw UsageError("dataset must contain at least one frame");
  mix.validate();
  const std::size_t clips = (n_frames + kClipFrames - 1) / kClipFrames;
  if (clips > 0x10000) throw UsageError("too many clips for 16-bit clip indices");
  const auto scenarios = assign_scenarios(clips, seed, mix);
  std::vector<SceneRecord> records;
  records.reserve(n_frames);
  for (std::size_t c = 0; c < clips; ++c) {
    const ClipSpec spec = sample_clip(scenarios[c], Rng::derive(seed, c));
    SceneState st = spec.initial;
    const auto clip_id = static_cast<std::uint32_t>(((seed & 0xFFFFULL) << 16) | c);
    for (int f = 0; f < kClipFrames && records.size() < n_frames; ++f) {
      const Command cmd = spec.commands[static_cast<std::size_t>(f)];
      const ExpertPlan plan = expert_policy(st, cmd);
      SceneRecord rec;
      rec.image = render_frame(st);
      rec.command = cmd;
      rec.ego = {static_cast<float>(st.ego.x), static_cast<float>(st.ego.y), static_cast<float>(st.ego.heading),
                 static_cast<float>(st.ego_speed)};
      rec.expert.points = plan.trajectory.points.unaryExpr(&to_f32);
      rec.agents = predict_agent_futures(st);
      for (auto& m : rec.agents.positions) m = m.unaryExpr(&to_f32);
      rec.clip_id = clip_id;
      rec.frame_index = static_cast<std::uint16_t>(f);
      rec.scenario = scenarios[c];
      rec.fallback = plan.fallback;
      records.push_back(rec);
      st = step_dynamics(st, plan.actions[0]);
    }
  }
  return records;
}

void write_dataset(const std::filesystem::path& path, const std::vector<SceneRecord>& records) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write dataset " + path.string());
  io::put_magic(os, "DW0D");
  io::put<std::uint32_t>(os, kDatasetVersion);
  io::put<std::uint64_t>(os, records.size());
  for (const auto& r : records) {
    io::put<std::uint32_t>(os, r.clip_id);
    io::put<std::uint16_t>(os, r.frame_index);
    io::put<std::uint8_t>(os, static_cast<std::uint8_t>(r.command));
    io::put<std::uint8_t>(os, 0);
    io::put<float>(os, r.ego.x);
    io::put<float>(os, r.ego.y);
    io::put<float>(os, r.ego.heading);
    io::put<float>(os, r.ego.speed);
    os.write(reinterpret_cast<const char*>(r.image.data()), kImageBytes);
    for (int k = 0; k < kWaypoints; ++k) {
      io::put<float>(os, static_cast<float>(r.expert.points(k, 0)));
      io::put<float>(os, static_cast<float>(r.expert.points(k, 1)));
    }
    for (int a = 0; a < kMaxAgents; ++a) {
      for (int k = 0; k < kWaypoints; ++k) {
        const bool on = r.agents.present(a);
        io::put<float>(os, on ? static_cast<float>(r.agents.positions[a](k, 0)) : 0.0f);
        io::put<float>(os, on ? static_cast<float>(r.agents.positions[a](k, 1)) : 0.0f);
      }
    }
    io::put<std::uint8_t>(os, r.agents.presence);
  }
  if (!os) throw DataError("failed writing dataset " + path.string());
}

std::vector<SceneRecord> read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open dataset " + path.string());
  io::expect_magic(is, "DW0D", "dataset");
  const auto version = io::get<std::uint32_t>(is);
  if (version != kDatasetVersion) throw DataError("unsupported dataset version " + std::to_string(version));
  const auto count = io::get<std::uint64_t>(is);
  const auto expected = 16 + count * kRecordBytes;
  if (std::filesystem::file_size(path) != expected) throw DataError("dataset size does not match record count");
  std::vector<SceneRecord> records(static_cast<std::size_t>(count));
  for (auto& r : records) {
    r.clip_id = io::get<std::uint32_t>(is);
    r.frame_index = io::get<std::uint16_t>(is);
    const auto cmd = io::get<std::uint8_t>(is);
    if (cmd > 3) throw DataError("invalid command code " + std::to_string(cmd));
    r.command = static_cast<Command>(cmd);
    io::get<std::uint8_t>(is);
    r.ego.x = io::get<float>(is);
    r.ego.y = io::get<float>(is);
    r.ego.heading = io::get<float>(is);
    r.ego.speed = io::get<float>(is);
    if (!is.read(reinterpret_cast<char*>(r.image.data()), kImageBytes)) throw DataError("truncated image");
    for (int k = 0; k < kWaypoints; ++k) {
      r.expert.points(k, 0) = io::get<float>(is);
      r.expert.points(k, 1) = io::get<float>(is);
    }
    for (int a = 0; a < kMaxAgents; ++a) {
      for (int k = 0; k < kWaypoints; ++k) {
        r.agents.positions[a](k, 0) = io::get<float>(is);
        r.agents.positions[a](k, 1) = io::get<float>(is);
      }
    }
    r.agents.presence = io::get<std::uint8_t>(is);
  }
  return records;
}

std::vector<std::string> validate_dataset_file(const std::filesystem::path& path) {
  std::vector<std::string> problems;
  std::ifstream is(path, std::ios::binary);
  if (!is) return {"cannot open " + path.string()};
  try {
    io::expect_magic(is, "DW0D", "dataset");
    const auto version = io::get<std::uint32_t>(is);
    if (version != kDatasetVersion) problems.push_back("unsupported version " + std::to_string(version));
    const auto count = io::get<std::uint64_t>(is);
    if (std::filesystem::file_size(path) != 16 + count * kRecordBytes) {
      problems.push_back("file size does not match declared record count " + std::to_string(count));
      return problems;
    }
    for (std::uint64_t i = 0; i < count && problems.size() < 20; ++i) {
      const std::string at = "record " + std::to_string(i) + ": ";
      io::get<std::uint32_t>(is);
      const auto frame = io::get<std::uint16_t>(is);
      if (frame >= kClipFrames) problems.push_back(at + "frame index out of range");
      const auto cmd = io::get<std::uint8_t>(is);
      if (cmd > 3) problems.push_back(at + "invalid command");
      if (io::get<std::uint8_t>(is) != 0) problems.push_back(at + "non-zero pad byte");
      for (int j = 0; j < 4; ++j)
        if (!std::isfinite(io::get<float>(is))) problems.push_back(at + "non-finite ego state");
      is.ignore(kImageBytes);
      for (int j = 0; j < 2 * kWaypoints; ++j) {
        const float v = io::get<float>(is);
        if (!std::isfinite(v) || std::abs(v) > kWorkspaceBound) problems.push_back(at + "expert waypoint out of bound");
      }
      std::array<float, kMaxAgents * kWaypoints * 2> agents{};
      for (auto& v : agents) v = io::get<float>(is);
      const auto presence = io::get<std::uint8_t>(is);
      if (presence >> kMaxAgents) problems.push_back(at + "presence mask has bits beyond agent count");
      for (int a = 0; a < kMaxAgents; ++a) {
        for (int j = 0; j < kWaypoints * 2; ++j) {
          const float v = agents[static_cast<std::size_t>(a * kWaypoints * 2 + j)];
          if (!std::isfinite(v)) problems.push_back(at + "non-finite agent future");
          if (!((presence >> a) & 1U) && v != 0.0f) problems.push_back(at + "absent agent not zero-filled");
        }
      }
    }
  } catch (const DataError& e) {
    problems.push_back(e.what());
  }
  return problems;
}

std::vector<SceneRecord> generate_dataset(std::size_t n_frames, std::uint64_t seed, const ScenarioMix& mix,
                                          const std::filesystem::path& out, bool overwrite) {
  if (!overwrite && std::filesystem::exists(out))
    throw UsageError("refusing to overwrite " + out.string() + " (use --force)");
  auto records = generate_records(n_frames, seed, mix);
  write_dataset(out, records);
  return records;
}

}  // namespace dw0
