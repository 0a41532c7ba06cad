#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "dw0/eval.hpp"

#include <fstream>
#include <sstream>

using namespace dw0;

namespace {

Trajectory line(double dx, double dy) {
  Trajectory t;
  for (int k = 0; k < kWaypoints; ++k) t.points.row(k) << dx * (k + 1), dy * (k + 1);
  return t;
}

/// Dense sampling of ego and agent discs between consecutive waypoints.
bool brute_force_collision(const Trajectory& plan, const AgentFutures& f, double reach, double* min_dist) {
  *min_dist = 1e9;
  for (int a = 0; a < kMaxAgents; ++a) {
    if (!f.present(a)) continue;
    for (int k = 0; k + 1 < kWaypoints; ++k) {
      for (int i = 0; i <= 2000; ++i) {
        const double u = i / 2000.0;
        const Vec2 e = (1 - u) * plan.points.row(k).transpose() + u * plan.points.row(k + 1).transpose();
        const Vec2 q = (1 - u) * f.positions[a].row(k).transpose() + u * f.positions[a].row(k + 1).transpose();
        *min_dist = std::min(*min_dist, (e - q).norm());
      }
    }
  }
  return *min_dist < reach;
}

}  // namespace

TEST_CASE("pdms: human-row sub-scores") {
  const double v = pdms({1.0, 1.0, 1.0, 0.999, 0.875});
  CHECK(v == doctest::Approx(0.94775).epsilon(1e-12));
  CHECK(std::abs(100 * v - 94.8) <= 0.05);
}

TEST_CASE("pdms: multiplicative penalties and range checks") {
  CHECK(pdms({0.0, 1.0, 1.0, 1.0, 1.0}) == 0.0);
  CHECK(pdms({1.0, 0.0, 1.0, 1.0, 1.0}) == 0.0);
  CHECK(pdms({1.0, 1.0, 1.0, 1.0, 1.0}) == 1.0);
  CHECK_THROWS_AS(pdms({1.0, 1.0, 1.5, 1.0, 1.0}), std::invalid_argument);
  CHECK_THROWS_AS(pdms({1.0, 1.0, 1.0, 1.0, -0.1}), std::invalid_argument);
}

TEST_CASE("epdms formula") {
  CHECK(epdms({}) == 1.0);
  SubScoresV2 s;
  s.tlc = 0.0;
  CHECK(epdms(s) == 0.0);
  for (int i = 0; i < 4; ++i) {
    SubScoresV2 z;
    double* pen[] = {&z.nc, &z.dac, &z.ddc, &z.tlc};
    *pen[i] = 0.0;
    CHECK(epdms(z) == 0.0);
  }
  SubScoresV2 mid;
  mid.lk = mid.hc = mid.ec = 0.0;
  CHECK(epdms(mid) == doctest::Approx(0.625).epsilon(1e-15));
  CHECK_THROWS_AS(epdms({1, 1, 1, 1, 2, 1, 1, 1, 1}), std::invalid_argument);
}

TEST_CASE("composites are monotone in every component") {
  Rng rng(4);
  for (int trial = 0; trial < 500; ++trial) {
    std::array<double, 5> v1{};
    for (auto& x : v1) x = rng.uniform();
    for (int c = 0; c < 5; ++c) {
      auto hi = v1;
      hi[static_cast<std::size_t>(c)] = std::min(1.0, hi[static_cast<std::size_t>(c)] + rng.uniform(0.0, 0.5));
      CHECK(pdms({hi[0], hi[1], hi[2], hi[3], hi[4]}) >= pdms({v1[0], v1[1], v1[2], v1[3], v1[4]}));
    }
    std::array<double, 9> v2{};
    for (auto& x : v2) x = rng.uniform();
    auto make = [](const std::array<double, 9>& a) {
      return SubScoresV2{a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8]};
    };
    for (int c = 0; c < 9; ++c) {
      auto hi = v2;
      hi[static_cast<std::size_t>(c)] = std::min(1.0, hi[static_cast<std::size_t>(c)] + rng.uniform(0.0, 0.5));
      CHECK(epdms(make(hi)) >= epdms(make(v2)));
    }
  }
}

TEST_CASE("ade") {
  const auto t = line(2.0, 0.1);
  CHECK(ade(t, t) == 0.0);
  Trajectory shifted = t;
  shifted.points.col(1).array() += 1.0;
  CHECK(ade(shifted, t) == doctest::Approx(1.0));
  Trajectory bad = t;
  bad.points(2, 0) = std::nan("");
  CHECK_THROWS_AS(ade(bad, t), std::invalid_argument);
}

TEST_CASE("aggregate averages per-scenario composites") {
  ScenarioResult good{"a", 0.0, {1, 1, 1, 1, 1}, 1.0};
  ScenarioResult crash{"b", 0.0, {0, 1, 0, 1, 1}, 0.0};
  const auto agg = aggregate({good, crash});
  CHECK(agg.pdms == doctest::Approx(0.5));
  const double of_means = pdms(agg.mean_scores);
  CHECK(of_means != doctest::Approx(0.5));
  CHECK(agg.collision_rate == doctest::Approx(0.5));
}

TEST_CASE("expert trajectory scores perfectly on its own records") {
  const auto recs = generate_records(1000, 77, ScenarioMix{});
  int imperfect = 0;
  for (const auto& r : recs) {
    const auto s = score_scenario(r.expert, r);
    imperfect += !(s.nc == 1 && s.dac == 1 && s.ttc == 1 && s.comfort == 1 && s.ep == 1);
  }
  CHECK(imperfect == 0);
}

TEST_CASE("standing still in a moving scene earns no progress") {
  const auto recs = generate_records(64, 5, ScenarioMix::only(Scenario::Cruise));
  const Trajectory still;
  for (const auto& r : recs) {
    if (r.ego.speed < 2.0) continue;
    CHECK(score_scenario(still, r).ep == doctest::Approx(0.0).epsilon(1e-9));
  }
}

TEST_CASE("malformed predicted trajectory is rejected") {
  const auto recs = generate_records(1, 5, ScenarioMix{});
  Trajectory bad;
  bad.points(0, 0) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(score_scenario(bad, recs[0]), std::invalid_argument);
}

TEST_CASE("driving through a static agent collides") {
  AgentFutures f;
  f.presence = 1;
  for (int k = 0; k < kWaypoints; ++k) f.positions[0].row(k) << 9.0, 0.0;
  CHECK(swept_disc_collision(line(2.5, 0.0), f));
  CHECK_FALSE(swept_disc_collision(line(1.0, 0.0), f));
}

TEST_CASE("swept-disc check agrees with dense brute force on 20 scripted scenes") {
  Rng rng(31);
  int hits = 0, checked = 0;
  for (int scene = 0; scene < 20; ++scene) {
    const Trajectory plan = line(rng.uniform(0.5, 3.0), rng.uniform(-0.5, 0.5));
    AgentFutures f;
    f.presence = 1;
    // agent crosses the ego path somewhere in the horizon
    const Vec2 start(rng.uniform(2.0, 14.0), rng.uniform(-8.0, 8.0));
    const Vec2 vel(rng.uniform(-1.0, 1.0), rng.uniform(-3.0, 3.0));
    for (int k = 0; k < kWaypoints; ++k) f.positions[0].row(k) = (start + vel * (k + 1)).transpose();
    double dmin = 0;
    const bool truth = brute_force_collision(plan, f, 2.0, &dmin);
    if (std::abs(dmin - 2.0) < 1e-3) continue;
    ++checked;
    hits += truth;
    CHECK(swept_disc_collision(plan, f) == truth);
  }
  CHECK(checked >= 18);
  CHECK(hits > 0);
  CHECK(hits < checked);
}

TEST_CASE("time to collision") {
  AgentFutures f;
  f.presence = 1;
  // stationary ego, agent approaching head-on at 4 m/s from 20 m
  for (int k = 0; k < kWaypoints; ++k) f.positions[0].row(k) << 20.0 - 2.0 * (k + 1), 0.0;
  // closest state is the last waypoint: 8 m apart, discs touch after 6 m at 4 m/s
  CHECK(min_time_to_collision(line(0.0, 0.0), f) == doctest::Approx(1.5).epsilon(1e-12));
  AgentFutures away;
  away.presence = 1;
  for (int k = 0; k < kWaypoints; ++k) away.positions[0].row(k) << 20.0 + 5.0 * (k + 1), 0.0;
  CHECK(std::isinf(min_time_to_collision(line(2.0, 0.0), away)));
}

TEST_CASE("comfort") {
  CHECK(is_comfortable(line(2.0, 0.0)));
  Trajectory jerky = line(2.0, 0.0);
  jerky.points(3, 0) += 2.0;
  CHECK_FALSE(is_comfortable(jerky));
}

TEST_CASE("eval report CSV") {
  const auto path = std::filesystem::temp_directory_path() / "dw0_eval_report.csv";
  write_eval_report(path, {{"s0", 0.5, {1, 1, 1, 1, 1}, 1.0}, {"s1", 1.5, {1, 1, 0, 1, 0.5}, pdms({1, 1, 0, 1, 0.5})}});
  std::ifstream is(path);
  std::string header, r0, r1, agg;
  std::getline(is, header);
  std::getline(is, r0);
  std::getline(is, r1);
  std::getline(is, agg);
  CHECK(header == "scenario,ade_m,nc,dac,ttc,comfort,ep,pdms");
  CHECK(r0.rfind("s0,", 0) == 0);
  CHECK(agg.rfind("AGG,1,", 0) == 0);
  std::filesystem::remove(path);
}
