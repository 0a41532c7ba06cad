#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "dw0/gridworld.hpp"

#include <complex>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

using namespace dw0;

namespace {

SceneState straight_scene(double speed, double speed_limit) {
  SceneState st;
  st.road.routes = {Polyline({Vec2(0, 0), Vec2(400, 0)})};
  st.road.speed_limit = speed_limit;
  st.ego = {20.0, 0.0, 0.0};
  st.ego_speed = speed;
  return st;
}

std::vector<char> file_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("dw0_gw_" + name);
}

int count_channel(const Image& img, int channel, std::uint8_t level) {
  int n = 0;
  for (int i = 0; i < kImageSize * kImageSize; ++i) n += img[static_cast<std::size_t>(i * 3 + channel)] == level;
  return n;
}

}  // namespace

TEST_CASE("dynamics: zero action keeps the pose") {
  auto st = straight_scene(0.0, 6.0);
  const auto next = step_dynamics(st, {0.0, 0.0});
  CHECK(next.ego.x == st.ego.x);
  CHECK(next.ego.y == st.ego.y);
  CHECK(next.ego.heading == st.ego.heading);
}

TEST_CASE("dynamics: constant speed on a straight lane advances v*dt") {
  auto st = straight_scene(0.0, 6.0);
  st.ego.heading = 0.3;
  const auto next = step_dynamics(st, {4.0, 0.0});
  CHECK(next.ego.x == doctest::Approx(20.0 + 2.0 * std::cos(0.3)).epsilon(1e-12));
  CHECK(next.ego.y == doctest::Approx(2.0 * std::sin(0.3)).epsilon(1e-12));
}

TEST_CASE("dynamics: 20-step rollout matches an independent integrator") {
  auto st = straight_scene(0.0, 6.0);
  st.ego = {3.0, -2.0, 0.7};
  Rng rng(99);
  // complex-exponential form of the exact unicycle arc
  std::complex<double> z(3.0, -2.0);
  double th = 0.7;
  for (int i = 0; i < 20; ++i) {
    const double v = rng.uniform(0.0, 8.0);
    const double w = i % 5 == 0 ? 0.0 : rng.uniform(-1.2, 1.2);
    st = step_dynamics(st, {v, w});
    if (w == 0.0) {
      z += v * 0.5 * std::polar(1.0, th);
    } else {
      const std::complex<double> i1(0.0, 1.0);
      z += v / (i1 * w) * (std::polar(1.0, th + w * 0.5) - std::polar(1.0, th));
      th += w * 0.5;
    }
    CHECK(std::abs(st.ego.x - z.real()) < 1e-9);
    CHECK(std::abs(st.ego.y - z.imag()) < 1e-9);
    CHECK(std::abs(std::remainder(st.ego.heading - th, 2 * M_PI)) < 1e-9);
  }
}

TEST_CASE("expert: empty straight lane, FOLLOW at 5 m/s") {
  const auto plan = expert_policy(straight_scene(5.0, 5.0), Command::Follow);
  CHECK_FALSE(plan.fallback);
  for (int k = 0; k < kWaypoints; ++k) {
    CHECK(plan.trajectory.points(k, 0) == doctest::Approx(2.5 * (k + 1)).epsilon(1e-12));
    CHECK(std::abs(plan.trajectory.points(k, 1)) < 1e-12);
  }
}

TEST_CASE("expert: STOP from 4 m/s shrinks spacing to zero") {
  const auto plan = expert_policy(straight_scene(4.0, 6.0), Command::Stop);
  const auto& p = plan.trajectory.points;
  double prev_x = 0.0, prev_gap = 1e9;
  for (int k = 0; k < kWaypoints; ++k) {
    const double gap = p(k, 0) - prev_x;
    CHECK(gap <= prev_gap + 1e-12);
    CHECK(gap >= 0.0);
    prev_gap = gap;
    prev_x = p(k, 0);
  }
  CHECK(prev_gap == doctest::Approx(0.0));
  // v: 2.5, 1.0, 0 ... at 0.5 s per step
  CHECK(p(0, 0) == doctest::Approx(1.25));
  CHECK(p(1, 0) == doctest::Approx(1.75));
  CHECK(p(5, 0) == doctest::Approx(1.75));
}

TEST_CASE("expert: lead car 8 m ahead at 2 m/s, gap never below 4 m") {
  auto st = straight_scene(5.0, 8.0);
  Agent lead;
  lead.route = 0;
  lead.s = 28.0;
  lead.speed = 2.0;
  lead.pose = {28.0, 0.0, 0.0};
  st.agents.push_back(lead);
  for (int step = 0; step < 40; ++step) {
    const auto plan = expert_policy(st, Command::Follow);
    // brute-force: the lead's own rollout against every planned waypoint
    SceneState probe = st;
    for (int k = 0; k < kWaypoints; ++k) {
      probe = step_dynamics(probe, plan.actions[static_cast<std::size_t>(k)]);
      const Vec2 lead_pos(probe.agents[0].pose.x, probe.agents[0].pose.y);
      CHECK((lead_pos - Vec2(probe.ego.x, probe.ego.y)).norm() >= 4.0);
    }
    st = step_dynamics(st, plan.actions[0]);
    CHECK(st.agents[0].pose.x - st.ego.x >= 4.0);
  }
}

TEST_CASE("expert: missing branch falls back to FOLLOW with a flag") {
  const auto plan = expert_policy(straight_scene(5.0, 5.0), Command::Left);
  CHECK(plan.fallback);
  CHECK(plan.trajectory.points(5, 0) == doctest::Approx(15.0));
}

TEST_CASE("render: deterministic bytes") {
  const auto st = sample_scenario(Scenario::Cruise, 1234);
  CHECK(render_frame(st) == render_frame(st));
}

TEST_CASE("render: empty scene has lane and ego pixels only") {
  const auto img = render_frame(straight_scene(5.0, 5.0));
  CHECK(count_channel(img, 0, 0) == kImageSize * kImageSize);
  CHECK(count_channel(img, 2, kEgoLevel) == 1);
  CHECK(img[static_cast<std::size_t>((kEgoRow * kImageSize + kEgoCol) * 3 + 2)] == kEgoLevel);
  // lane: |y| <= 2 m -> columns 14..18, every row
  for (int r = 0; r < kImageSize; ++r)
    for (int c = 0; c < kImageSize; ++c) CHECK(pixel_is_road(img, r, c) == (std::abs(kEgoCol - c) <= 2));
}

TEST_CASE("render: agent pixel count equals agents in view") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto st = straight_scene(5.0, 5.0);
    std::set<std::pair<int, int>> cells;
    for (int a = 0; a < 4; ++a) {
      Agent ag;
      ag.behavior = AgentBehavior::Crossing;
      ag.pose = {st.ego.x + rng.uniform(-15.0, 40.0), rng.uniform(-25.0, 25.0), 0.0};
      st.agents.push_back(ag);
      const Vec2 local = to_ego_frame(st.ego, {ag.pose.x, ag.pose.y});
      const int row = kEgoRow - static_cast<int>(std::lround(local.x()));
      const int col = kEgoCol - static_cast<int>(std::lround(local.y()));
      if (row >= 0 && row < kImageSize && col >= 0 && col < kImageSize) cells.insert({row, col});
    }
    CHECK(count_channel(render_frame(st), 0, kAgentLevel) == static_cast<int>(cells.size()));
  }
}

TEST_CASE("agent futures are in the current ego frame") {
  auto st = straight_scene(5.0, 5.0);
  Agent ag;
  ag.route = 0;
  ag.s = 30.0;
  ag.speed = 2.0;
  ag.pose = {30.0, 0.0, 0.0};
  st.agents.push_back(ag);
  const auto f = predict_agent_futures(st);
  CHECK(f.presence == 1);
  for (int k = 0; k < kWaypoints; ++k) CHECK(f.positions[0](k, 0) == doctest::Approx(10.0 + 1.0 * (k + 1)));
}

TEST_CASE("scenario mix parsing") {
  const auto m = ScenarioMix::parse("cruise:0.5,stop:0.5");
  CHECK(m.fractions[0] == 0.5);
  CHECK(m.fractions[3] == 0.5);
  CHECK_THROWS_AS(ScenarioMix::parse("cruise:0.5"), UsageError);
  CHECK_THROWS_AS(ScenarioMix::parse("highway:1.0"), UsageError);
  CHECK_THROWS_AS(ScenarioMix::parse("cruise:-1,stop:2"), UsageError);
}

TEST_CASE("generation: mix {cruise:1.0} has no junction records") {
  const auto recs = generate_records(320, 3, ScenarioMix::only(Scenario::Cruise));
  for (const auto& r : recs) {
    CHECK(r.scenario == Scenario::Cruise);
    CHECK(r.command != Command::Left);
    CHECK(r.command != Command::Right);
  }
}

TEST_CASE("generation: scenario fractions within 2% at n = 10000") {
  ScenarioMix mix;
  mix.fractions = {0.4, 0.1, 0.2, 0.15, 0.15};
  const auto recs = generate_records(10000, 17, mix);
  REQUIRE(recs.size() == 10000);
  std::array<int, kScenarioCount> counts{};
  for (const auto& r : recs) ++counts[static_cast<std::size_t>(r.scenario)];
  for (std::size_t i = 0; i < counts.size(); ++i)
    CHECK(std::abs(counts[i] / 10000.0 - mix.fractions[i]) <= 0.02);
}

TEST_CASE("generation: expert never needs the fallback on the default mix") {
  const auto recs = generate_records(2000, 21, ScenarioMix{});
  int fallbacks = 0;
  for (const auto& r : recs) fallbacks += r.fallback;
  CHECK(fallbacks == 0);
}

TEST_CASE("dataset: one clip, fixed seed, file hash stable across runs") {
  const auto a = temp_path("a.bin"), b = temp_path("b.bin"), c = temp_path("c.bin");
  generate_dataset(16, 42, ScenarioMix{}, a, true);
  generate_dataset(16, 42, ScenarioMix{}, b, true);
  generate_dataset(16, 43, ScenarioMix{}, c, true);
  CHECK(file_bytes(a) == file_bytes(b));
  CHECK(file_bytes(a) != file_bytes(c));
  CHECK(file_bytes(a).size() == 16 + 16 * kRecordBytes);
  CHECK_THROWS_AS(generate_dataset(16, 42, ScenarioMix{}, a, false), UsageError);
  for (const auto& p : {a, b, c}) std::filesystem::remove(p);
}

TEST_CASE("dataset: round trip and validation") {
  const auto path = temp_path("rt.bin");
  const auto recs = generate_dataset(40, 9, ScenarioMix{}, path, true);
  CHECK(validate_dataset_file(path).empty());
  const auto back = read_dataset(path);
  REQUIRE(back.size() == recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    CHECK(back[i].image == recs[i].image);
    CHECK(back[i].command == recs[i].command);
    CHECK(back[i].clip_id == recs[i].clip_id);
    CHECK(back[i].frame_index == recs[i].frame_index);
    CHECK(back[i].expert.points == recs[i].expert.points);
    CHECK(back[i].agents.presence == recs[i].agents.presence);
    for (int a = 0; a < kMaxAgents; ++a)
      if (recs[i].agents.present(a)) CHECK(back[i].agents.positions[a] == recs[i].agents.positions[a]);
  }

  // corrupt the command byte of record 3
  auto bytes = file_bytes(path);
  bytes[16 + 3 * kRecordBytes + 6] = 9;
  const auto bad = temp_path("bad.bin");
  std::ofstream(bad, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  CHECK_FALSE(validate_dataset_file(bad).empty());
  CHECK_THROWS_AS(read_dataset(bad), DataError);

  bytes.resize(bytes.size() - 10);
  std::ofstream(bad, std::ios::binary | std::ios::trunc).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  CHECK_FALSE(validate_dataset_file(bad).empty());
  CHECK_THROWS_AS(read_dataset(bad), DataError);
  std::filesystem::remove(path);
  std::filesystem::remove(bad);
}

TEST_CASE("dataset: clip ids disjoint across seeds, frames numbered per clip") {
  const auto a = generate_records(64, 1, ScenarioMix{});
  const auto b = generate_records(64, 2, ScenarioMix{});
  std::set<std::uint32_t> ids_a, ids_b;
  for (const auto& r : a) ids_a.insert(r.clip_id);
  for (const auto& r : b) ids_b.insert(r.clip_id);
  CHECK(ids_a.size() == 4);
  for (auto id : ids_b) CHECK(ids_a.count(id) == 0);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].frame_index == i % kClipFrames);
}
