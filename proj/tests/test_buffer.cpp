#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "dtsil/buffer.hpp"
#include "dtsil/error.hpp"

using namespace dtsil;
using env::Embedding;

namespace {

// Hand-built trajectory through the given embeddings with per-step rewards.
Trajectory make_traj(const std::vector<Embedding>& es, const std::vector<double>& rewards) {
  Trajectory t;
  for (std::size_t i = 0; i < es.size(); ++i) {
    t.obs.push_back({static_cast<double>(es[i].x), static_cast<double>(es[i].y)});
    t.embeddings.push_back(es[i]);
    if (i > 0) {
      t.actions.push_back(static_cast<int>(i % 4));
      t.rewards.push_back(rewards[i - 1]);
    }
  }
  t.done = true;
  return t;
}

std::vector<Embedding> line(int n, int y = 0) {
  std::vector<Embedding> es;
  for (int i = 0; i < n; ++i) es.push_back({i, y, 0.0});
  return es;
}

void check_cache(const TrajectoryBuffer& b) {
  for (const BufferEntry& e : b.entries()) {
    CHECK(e.cached_return == doctest::Approx(e.best.total_return()).epsilon(1e-12));
    CHECK(e.cached_length == e.best.length());
    CHECK(env::distance(e.best.embeddings.back(), e.representative) <= b.config().delta);
  }
}

}  // namespace

TEST_CASE("match on an empty buffer finds nothing") {
  TrajectoryBuffer b;
  CHECK_FALSE(b.match({1, 2, 0.0}).has_value());
  CHECK(b.visitation_count({1, 2, 0.0}) == 0);
}

TEST_CASE("exact matching with delta 0") {
  TrajectoryBuffer b;
  b.update_with_trajectory(make_traj(line(3), {0, 0}));
  CHECK(b.match({1, 0, 0.0}) == 1u);
  CHECK_FALSE(b.match({1, 0, 0.01}).has_value());
}

TEST_CASE("tie between two representatives goes to the lower index") {
  // Representatives two apart; the probe sits midway, distance 1 from both.
  for (bool swapped : {false, true}) {
    BufferConfig cfg;
    cfg.delta = 1.0;
    TrajectoryBuffer b(cfg);
    Embedding left{0, 0, 0.0}, right{2, 0, 0.0};
    std::vector<Embedding> order = swapped ? std::vector{right, left} : std::vector{left, right};
    b.update_with_trajectory(make_traj(order, {0}));
    REQUIRE(b.size() == 2);
    CHECK(b.match({1, 0, 0.0}) == 0u);
    CHECK(b.entry(0).representative == order[0]);
  }
}

TEST_CASE("fresh buffer, five distinct embeddings, then a replay") {
  TrajectoryBuffer b;
  const Trajectory ep = make_traj(line(5), {0.5, 0, 0, 1});
  auto r = b.update_with_trajectory(ep);
  CHECK(r.inserted == 5);
  CHECK(b.size() == 5);
  for (const auto& e : b.entries()) CHECK(e.count == 1);
  const auto before = b.entries();
  r = b.update_with_trajectory(ep);
  CHECK(r.inserted == 0);
  CHECK(r.replaced == 0);
  for (std::size_t i = 0; i < b.size(); ++i) {
    CHECK(b.entry(i).count == 2);
    CHECK(b.entry(i).best == before[i].best);
  }
  check_cache(b);
}

TEST_CASE("a higher-return route replaces the stored trajectory") {
  // Two routes to (3,0): direct with a rock (-0.05 x 2), or a detour via an
  // apple row (+1). Hand-computed prefix returns: -0.1 and +0.95.
  TrajectoryBuffer b;
  const Embedding goal{3, 0, 0.0};
  b.update_with_trajectory(make_traj({{0, 0, 0.0}, {1, 0, 0.0}, {2, 0, 0.0}, goal}, {0, -0.05, -0.05}));
  const std::size_t k = *b.match(goal);
  CHECK(b.entry(k).cached_return == doctest::Approx(-0.1));
  b.update_with_trajectory(
      make_traj({{0, 0, 0.0}, {0, 1, 0.0}, {1, 1, 0.0}, {2, 1, 0.0}, {3, 1, 0.0}, goal},
                {0, 1.0, 0, 0, -0.05}));
  CHECK(b.entry(k).cached_return == doctest::Approx(0.95));
  CHECK(b.entry(k).cached_length == 5);
  check_cache(b);
}

TEST_CASE("equal return with a shorter prefix replaces; longer does not") {
  TrajectoryBuffer b;
  const Embedding goal{5, 5, 0.0};
  b.update_with_trajectory(make_traj({{0, 0, 0.0}, {1, 0, 0.0}, {2, 0, 0.0}, goal}, {0, 0, 0}));
  const std::size_t k = *b.match(goal);
  CHECK(b.entry(k).cached_length == 3);
  b.update_with_trajectory(make_traj({{0, 0, 0.0}, {9, 9, 0.0}, goal}, {0, 0}));
  CHECK(b.entry(k).cached_length == 2);
  b.update_with_trajectory(make_traj({{0, 0, 0.0}, {7, 7, 0.0}, {8, 8, 0.0}, {6, 6, 0.0}, goal},
                                     {0, 0, 0, 0}));
  CHECK(b.entry(k).cached_length == 2);
}

TEST_CASE("monotone improvement and count conservation over random episodes") {
  Rng rng(10);
  TrajectoryBuffer b;
  std::vector<double> best_ret;
  std::vector<std::size_t> best_len;
  std::int64_t events = 0;
  for (int ep = 0; ep < 300; ++ep) {
    std::vector<Embedding> es{{0, 0, 0.0}};
    std::vector<double> rs;
    double rplus = 0.0;
    const int len = 1 + static_cast<int>(rng.below(12));
    for (int t = 0; t < len; ++t) {
      const double r = rng.bernoulli(0.1) ? 1.0 : (rng.bernoulli(0.3) ? -0.05 : 0.0);
      rplus += std::max(r, 0.0);
      es.push_back({static_cast<int>(rng.below(4)), static_cast<int>(rng.below(4)), env::round2(rplus)});
      rs.push_back(r);
    }
    const std::size_t size_before = b.size();
    std::vector<Embedding> old_reps;
    for (const auto& e : b.entries()) old_reps.push_back(e.representative);
    auto report = b.update_with_trajectory(make_traj(es, rs));
    events += static_cast<std::int64_t>(es.size());
    CHECK(report.inserted + report.matched_steps == es.size());
    for (std::size_t i = size_before; i < b.size(); ++i)
      for (const auto& rep : old_reps) CHECK(env::distance(b.entry(i).representative, rep) > 0.0);
    for (std::size_t i = 0; i < best_ret.size(); ++i) {
      CHECK(b.entry(i).cached_return >= best_ret[i] - 1e-12);
      if (std::abs(b.entry(i).cached_return - best_ret[i]) <= 1e-9) CHECK(b.entry(i).cached_length <= best_len[i]);
    }
    best_ret.clear();
    best_len.clear();
    for (const auto& e : b.entries()) {
      best_ret.push_back(e.cached_return);
      best_len.push_back(e.cached_length);
    }
  }
  std::int64_t total = 0;
  for (const auto& e : b.entries()) total += e.count;
  CHECK(total == events);
  check_cache(b);
}

TEST_CASE("exploration probabilities for counts {1,4,16}") {
  TrajectoryBuffer b;
  // counts 1, 4, 16 via repeated single-state episodes
  const std::vector<std::pair<Embedding, int>> plan{{{0, 0, 0.0}, 1}, {{1, 0, 0.0}, 4}, {{2, 0, 0.0}, 16}};
  for (const auto& [e, n] : plan)
    for (int i = 0; i < n; ++i) b.update_with_trajectory(make_traj({e}, {}));
  auto p = b.exploration_probabilities();
  CHECK(p[0] == doctest::Approx(4.0 / 7.0).epsilon(1e-12));
  CHECK(p[1] == doctest::Approx(2.0 / 7.0).epsilon(1e-12));
  CHECK(p[2] == doctest::Approx(1.0 / 7.0).epsilon(1e-12));

  SUBCASE("chi-square goodness of fit over 1e5 draws") {
    Rng rng(12);
    std::vector<double> obs(3, 0.0);
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
      auto s = b.sample_demonstration(1.0, rng);
      CHECK(s.mode == SampleMode::kExplore);
      obs[s.index] += 1.0;
    }
    const double expected[3] = {4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0};
    double chi2 = 0.0;
    for (int i = 0; i < 3; ++i) chi2 += std::pow(obs[i] - n * expected[i], 2) / (n * expected[i]);
    // 99% quantile of chi-square with 2 degrees of freedom.
    CHECK(chi2 < 9.2103);
  }
}

TEST_CASE("single entry is returned in either mode") {
  TrajectoryBuffer b;
  b.update_with_trajectory(make_traj({{3, 3, 0.0}}, {}));
  Rng rng(1);
  CHECK(b.sample_demonstration(1.0, rng).index == 0);
  CHECK(b.sample_demonstration(0.0, rng).index == 0);
  TrajectoryBuffer empty;
  CHECK_THROWS_AS(empty.sample_demonstration(0.5, rng), Error);
}

TEST_CASE("exploitation is uniform over the top-K by return, shorter first") {
  BufferConfig cfg;
  cfg.top_k = 2;
  TrajectoryBuffer b(cfg);
  // Returns along the line: 0, 1, 1, 2 (two entries tie at 1 with lengths 1, 2).
  b.update_with_trajectory(make_traj(line(4), {1, 0, 1}));
  auto top = b.top_k_indices();
  REQUIRE(top.size() == 2);
  CHECK(top[0] == 3);
  CHECK(top[1] == 1);
  Rng rng(3);
  int hits[4] = {0, 0, 0, 0};
  for (int i = 0; i < 2000; ++i) {
    auto s = b.sample_demonstration(0.0, rng);
    CHECK(s.mode == SampleMode::kExploit);
    ++hits[s.index];
  }
  CHECK(hits[0] == 0);
  CHECK(hits[2] == 0);
  CHECK(std::abs(hits[1] - 1000) < 120);
}

TEST_CASE("visitation counts accumulate per episode") {
  TrajectoryBuffer b;
  const Embedding e{2, 0, 0.0};
  b.update_with_trajectory(make_traj(line(3), {0, 0}));
  CHECK(b.visitation_count(e) == 1);
  for (int m = 2; m <= 6; ++m) {
    b.update_with_trajectory(make_traj({{0, 0, 0.0}, {5, 5, 0.0}, e}, {0, 0}));
    CHECK(b.visitation_count(e) == m);
  }
}

TEST_CASE("capacity evicts lowest-return, highest-count entries") {
  BufferConfig cfg;
  cfg.capacity = 3;
  TrajectoryBuffer b(cfg);
  b.update_with_trajectory(make_traj(line(3), {1, 1}));
  b.update_with_trajectory(make_traj({{0, 0, 0.0}, {0, 5, 0.0}}, {0.5}));
  CHECK(b.size() == 3);
  // (0,0) has return 0 and count 2: evicted.
  CHECK_FALSE(b.match({0, 0, 0.0}).has_value());
  CHECK(b.match({0, 5, 0.0}).has_value());
}

TEST_CASE("snapshot round trips") {
  const auto dir = std::filesystem::temp_directory_path() / "dtsil_buffer_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "buf.jsonl").string();

  TrajectoryBuffer empty;
  empty.snapshot(path);
  TrajectoryBuffer r0;
  r0.restore(path);
  CHECK(r0 == empty);

  Rng rng(4);
  TrajectoryBuffer b;
  while (b.size() < 100) {
    std::vector<Embedding> es{{0, 0, 0.0}};
    std::vector<double> rs;
    for (int t = 0; t < 6; ++t) {
      es.push_back({static_cast<int>(rng.below(20)), static_cast<int>(rng.below(20)), 0.0});
      rs.push_back(rng.normal() * 0.1);
    }
    b.update_with_trajectory(make_traj(es, rs));
  }
  b.snapshot(path);
  TrajectoryBuffer r;
  r.restore(path);
  CHECK(r.size() == b.size());
  CHECK(r == b);
  CHECK(r.match(b.entry(57).representative) == 57u);

  // Truncate the file: restore must fail and leave the target untouched.
  std::string text = b.serialize();
  {
    std::ofstream f(path);
    f << text.substr(0, text.size() / 2);
  }
  TrajectoryBuffer target;
  target.update_with_trajectory(make_traj(line(2), {0}));
  const TrajectoryBuffer copy = target;
  CHECK_THROWS_AS(target.restore(path), FormatError);
  CHECK(target == copy);
  std::filesystem::remove_all(dir);
}
