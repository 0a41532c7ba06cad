#include "dw0/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>

namespace dw0 {

namespace {

void require_unit(double v, const char* name) {
  if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument(std::string("sub-score ") + name + " outside [0, 1]");
}

void require_finite(const Trajectory& t) {
  if (!t.points.allFinite()) throw std::invalid_argument("malformed trajectory: non-finite waypoint");
}

Vec2 waypoint(const Trajectory& t, int k) {
  return k == 0 ? Vec2::Zero() : Vec2(t.points(k - 1, 0), t.points(k - 1, 1));
}

}  // namespace

double pdms(const SubScoresV1& s) {
  require_unit(s.nc, "NC");
  require_unit(s.dac, "DAC");
  require_unit(s.ttc, "TTC");
  require_unit(s.comfort, "C");
  require_unit(s.ep, "EP");
  return s.nc * s.dac * (5.0 * s.ep + 5.0 * s.ttc + 2.0 * s.comfort) / 12.0;
}

double epdms(const SubScoresV2& s) {
  require_unit(s.nc, "NC");
  require_unit(s.dac, "DAC");
  require_unit(s.ddc, "DDC");
  require_unit(s.tlc, "TLC");
  require_unit(s.ep, "EP");
  require_unit(s.ttc, "TTC");
  require_unit(s.lk, "LK");
  require_unit(s.hc, "HC");
  require_unit(s.ec, "EC");
  return s.nc * s.dac * s.ddc * s.tlc * (5.0 * s.ep + 5.0 * s.ttc + 2.0 * s.lk + 2.0 * s.hc + 2.0 * s.ec) / 16.0;
}

bool swept_disc_collision(const Trajectory& plan, const AgentFutures& agents, const ScoringConfig& cfg) {
  const double reach = cfg.ego_radius + cfg.agent_radius;
  for (int a = 0; a < kMaxAgents; ++a) {
    if (!agents.present(a)) continue;
    const auto& q = agents.positions[a];
    for (int k = 0; k < kWaypoints; ++k) {
      const Vec2 r1 = Vec2(q(k, 0), q(k, 1)) - waypoint(plan, k + 1);
      if (r1.norm() < reach) return true;
      if (k == 0) continue;
      // relative offset is linear in the segment parameter; minimize |r(u)|
      const Vec2 r0 = Vec2(q(k - 1, 0), q(k - 1, 1)) - waypoint(plan, k);
      const Vec2 dr = r1 - r0;
      const double len2 = dr.squaredNorm();
      const double u = len2 > 0 ? std::clamp(-r0.dot(dr) / len2, 0.0, 1.0) : 0.0;
      if ((r0 + u * dr).norm() < reach) return true;
    }
  }
  return false;
}

double min_time_to_collision(const Trajectory& plan, const AgentFutures& agents, const ScoringConfig& cfg) {
  const double reach = cfg.ego_radius + cfg.agent_radius;
  double best = std::numeric_limits<double>::infinity();
  for (int a = 0; a < kMaxAgents; ++a) {
    if (!agents.present(a)) continue;
    const auto& q = agents.positions[a];
    for (int k = 1; k <= kWaypoints; ++k) {
      const Vec2 p = waypoint(plan, k);
      const Vec2 ve = (p - waypoint(plan, k - 1)) / kStepSeconds;
      const Vec2 qa(q(k - 1, 0), q(k - 1, 1));
      const Vec2 va = k == 1 ? Vec2((q(1, 0) - q(0, 0)) / kStepSeconds, (q(1, 1) - q(0, 1)) / kStepSeconds)
                             : Vec2((q(k - 1, 0) - q(k - 2, 0)) / kStepSeconds,
                                    (q(k - 1, 1) - q(k - 2, 1)) / kStepSeconds);
      const Vec2 d = qa - p;
      const Vec2 w = va - ve;
      const double c = d.squaredNorm() - reach * reach;
      if (c < 0) return 0.0;
      const double aa = w.squaredNorm();
      const double bb = 2.0 * d.dot(w);
      if (aa <= 0 || bb >= 0) continue;  // not closing
      const double disc = bb * bb - 4 * aa * c;
      if (disc < 0) continue;
      const double tau = (-bb - std::sqrt(disc)) / (2 * aa);
      if (tau >= 0) best = std::min(best, tau);
    }
  }
  return best;
}

bool is_comfortable(const Trajectory& plan, const ScoringConfig& cfg) {
  std::array<Vec2, kWaypoints + 1> vel;
  for (int k = 1; k <= kWaypoints; ++k) vel[k] = (waypoint(plan, k) - waypoint(plan, k - 1)) / kStepSeconds;
  std::array<Vec2, kWaypoints + 1> acc;
  for (int k = 2; k <= kWaypoints; ++k) {
    acc[k] = (vel[k] - vel[k - 1]) / kStepSeconds;
    if (acc[k].norm() > cfg.max_accel) return false;
  }
  for (int k = 3; k <= kWaypoints; ++k)
    if (((acc[k] - acc[k - 1]) / kStepSeconds).norm() > cfg.max_jerk) return false;
  return true;
}

bool is_drivable(const Trajectory& plan, const Image& image) {
  for (int k = 1; k <= kWaypoints; ++k) {
    const auto px = ego_point_to_pixel(waypoint(plan, k));
    if (!px || !pixel_is_road(image, px->first, px->second)) return false;
  }
  return true;
}

double path_progress(const Trajectory& reference, const Vec2& point) {
  double best_dist = std::numeric_limits<double>::infinity();
  double best_s = 0.0;
  double s0 = 0.0;
  Vec2 last_dir(1.0, 0.0);
  for (int k = 1; k <= kWaypoints; ++k) {
    const Vec2 a = waypoint(reference, k - 1), b = waypoint(reference, k);
    const Vec2 ab = b - a;
    const double len = ab.norm();
    if (len < 1e-9) continue;
    last_dir = ab / len;
    const double u = std::clamp((point - a).dot(ab) / (len * len), 0.0, 1.0);
    const double dist = (a + u * ab - point).norm();
    if (dist < best_dist) {
      best_dist = dist;
      best_s = s0 + u * len;
    }
    s0 += len;
  }
  // extension beyond the final waypoint
  const Vec2 end = waypoint(reference, kWaypoints);
  const double beyond = (point - end).dot(last_dir);
  if (beyond > 0) {
    const double dist = (end + beyond * last_dir - point).norm();
    if (dist < best_dist) best_s = s0 + beyond;
  }
  return best_s;
}

double ego_progress_ratio(const Trajectory& plan, const Trajectory& expert, const ScoringConfig& cfg) {
  const double expert_progress = path_progress(expert, waypoint(expert, kWaypoints));
  if (expert_progress < cfg.min_expert_progress) return 1.0;
  return std::clamp(path_progress(expert, waypoint(plan, kWaypoints)) / expert_progress, 0.0, 1.0);
}

SubScoresV1 score_scenario(const Trajectory& predicted, const SceneRecord& record, const ScoringConfig& cfg) {
  require_finite(predicted);
  SubScoresV1 s;
  s.nc = swept_disc_collision(predicted, record.agents, cfg) ? 0.0 : 1.0;
  s.dac = is_drivable(predicted, record.image) ? 1.0 : 0.0;
  s.ttc = min_time_to_collision(predicted, record.agents, cfg) > cfg.ttc_threshold ? 1.0 : 0.0;
  s.comfort = is_comfortable(predicted, cfg) ? 1.0 : 0.0;
  s.ep = ego_progress_ratio(predicted, record.expert, cfg);
  return s;
}

double ade(const Trajectory& predicted, const Trajectory& expert) {
  require_finite(predicted);
  require_finite(expert);
  return (predicted.points - expert.points).rowwise().norm().mean();
}

ScenarioResult evaluate_scenario(const std::string& id, const Trajectory& predicted, const SceneRecord& record,
                                 const ScoringConfig& cfg) {
  ScenarioResult r;
  r.id = id;
  r.ade_m = ade(predicted, record.expert);
  r.scores = score_scenario(predicted, record, cfg);
  r.pdms = pdms(r.scores);
  return r;
}

double collision_rate(const std::vector<ScenarioResult>& results) {
  if (results.empty()) return 0.0;
  const auto hits = std::count_if(results.begin(), results.end(), [](const auto& r) { return r.scores.nc == 0.0; });
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

EvalSummary aggregate(const std::vector<ScenarioResult>& results) {
  EvalSummary s;
  s.scenarios = results.size();
  if (results.empty()) return s;
  SubScoresV1 m{0, 0, 0, 0, 0};
  for (const auto& r : results) {
    s.ade_m += r.ade_m;
    s.pdms += r.pdms;
    m.nc += r.scores.nc;
    m.dac += r.scores.dac;
    m.ttc += r.scores.ttc;
    m.comfort += r.scores.comfort;
    m.ep += r.scores.ep;
  }
  const double n = static_cast<double>(results.size());
  s.ade_m /= n;
  s.pdms /= n;
  s.mean_scores = {m.nc / n, m.dac / n, m.ttc / n, m.comfort / n, m.ep / n};
  s.collision_rate = collision_rate(results);
  return s;
}

void write_eval_report(const std::filesystem::path& path, const std::vector<ScenarioResult>& results) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write report " + path.string());
  os << std::setprecision(9);
  os << "scenario,ade_m,nc,dac,ttc,comfort,ep,pdms\n";
  for (const auto& r : results) {
    os << r.id << ',' << r.ade_m << ',' << r.scores.nc << ',' << r.scores.dac << ',' << r.scores.ttc << ','
       << r.scores.comfort << ',' << r.scores.ep << ',' << r.pdms << '\n';
  }
  const auto agg = aggregate(results);
  os << "AGG," << agg.ade_m << ',' << agg.mean_scores.nc << ',' << agg.mean_scores.dac << ',' << agg.mean_scores.ttc
     << ',' << agg.mean_scores.comfort << ',' << agg.mean_scores.ep << ',' << agg.pdms << '\n';
}

}  // namespace dw0
