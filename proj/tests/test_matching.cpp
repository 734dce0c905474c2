#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <vector>

#include "doctest.h"
#include "groupreg/matching.hpp"
#include "test_util.hpp"

using namespace groupreg;

namespace {

Keypoint make_kp(std::vector<float> desc, double scale = 1.0, int sign = 1) {
  Keypoint k;
  k.descriptor = std::move(desc);
  k.scale = scale;
  k.laplacian_sign = sign;
  return k;
}

std::vector<float> random_unit_descriptor(std::mt19937& rng, int dim = 8) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<float> d(dim);
  double norm2 = 0.0;
  for (float& v : d) {
    v = static_cast<float>(gauss(rng));
    norm2 += static_cast<double>(v) * v;
  }
  double inv = 1.0 / std::sqrt(norm2);
  for (float& v : d) v = static_cast<float>(v * inv);
  return d;
}

double desc_dist(const std::vector<float>& a, const std::vector<float>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return std::sqrt(acc);
}

// Brute-force reimplementation of the full matching rule (both directions,
// sign and scale filters, ratio test, canonical dedup) used as the oracle
// for the indexed path.
std::vector<Match> oracle_match(const std::vector<Keypoint>& a,
                                const std::vector<Keypoint>& b,
                                const MatchCriteria& c) {
  auto directed = [&](const std::vector<Keypoint>& from,
                      const std::vector<Keypoint>& to, bool from_is_a,
                      std::set<std::pair<int, int>>& pairs,
                      std::vector<Match>& out) {
    for (int q = 0; q < static_cast<int>(from.size()); ++q) {
      double d1 = 1e300, d2 = 1e300;
      int best = -1;
      for (int t = 0; t < static_cast<int>(to.size()); ++t) {
        if (c.require_same_sign &&
            (from[q].laplacian_sign >= 0) != (to[t].laplacian_sign >= 0))
          continue;
        if (std::abs(std::log(to[t].scale / from[q].scale)) >
            c.max_scale_log_ratio)
          continue;
        double d = desc_dist(from[q].descriptor, to[t].descriptor);
        if (d < d1) {
          d2 = d1;
          d1 = d;
          best = t;
        } else if (d < d2) {
          d2 = d;
        }
      }
      if (best < 0 || d1 > c.max_descriptor_distance) continue;
      if (d2 < 1e300 && d1 > c.nn_ratio * d2) continue;
      int ia = from_is_a ? q : best;
      int ib = from_is_a ? best : q;
      if (pairs.insert({ia, ib}).second)
        out.push_back({0, ia, 1, ib, d1, 1.0});
    }
  };
  std::set<std::pair<int, int>> pairs;
  std::vector<Match> out;
  directed(a, b, true, pairs, out);
  directed(b, a, false, pairs, out);
  std::sort(out.begin(), out.end(), [](const Match& x, const Match& y) {
    return x.index_a < y.index_a ||
           (x.index_a == y.index_a && x.index_b < y.index_b);
  });
  return out;
}

}  // namespace

TEST_CASE("matching a set against its copy") {
  std::mt19937 rng(101);
  std::vector<Keypoint> a;
  for (int i = 0; i < 40; ++i) a.push_back(make_kp(random_unit_descriptor(rng)));
  std::vector<Keypoint> b = a;

  auto matches = match_pair(a, b, 0, 1, {});
  REQUIRE(matches.size() == a.size());
  for (const Match& m : matches) {
    CHECK(m.image_a == 0);
    CHECK(m.image_b == 1);
    CHECK(m.index_a == m.index_b);  // every point finds its own copy
    CHECK(m.descriptor_distance == 0.0);
  }
}

TEST_CASE("match filters") {
  std::mt19937 rng(102);

  SUBCASE("opposite Laplacian signs never match") {
    std::vector<Keypoint> a, b;
    for (int i = 0; i < 10; ++i) {
      auto d = random_unit_descriptor(rng);
      a.push_back(make_kp(d, 1.0, +1));
      b.push_back(make_kp(d, 1.0, -1));
    }
    MatchCriteria c;
    CHECK(match_pair(a, b, 0, 1, c).empty());
    c.require_same_sign = false;
    CHECK(match_pair(a, b, 0, 1, c).size() == a.size());
  }

  SUBCASE("scale window") {
    auto d = random_unit_descriptor(rng);
    std::vector<Keypoint> a{make_kp(d, 1.0)};
    MatchCriteria c;  // max log ratio = log 2
    std::vector<Keypoint> near{make_kp(d, 1.9)};
    CHECK(match_pair(a, near, 0, 1, c).size() == 1);
    std::vector<Keypoint> far{make_kp(d, 2.1)};
    CHECK(match_pair(a, far, 0, 1, c).empty());
  }

  SUBCASE("descriptor distance ceiling") {
    std::vector<float> zero{0.0f, 0.0f, 0.0f, 0.0f};
    std::vector<float> far{2.0f, 0.0f, 0.0f, 0.0f};
    std::vector<Keypoint> a{make_kp(zero)};
    std::vector<Keypoint> b{make_kp(far)};
    MatchCriteria c;  // max distance 1.0 < 2.0
    CHECK(match_pair(a, b, 0, 1, c).empty());
    c.max_descriptor_distance = 3.0;
    CHECK(match_pair(a, b, 0, 1, c).size() == 1);
  }

  SUBCASE("ratio test rejects ambiguous neighbors") {
    // Both directions ambiguous: every query sees two candidates whose
    // distances differ by less than the 0.9 ratio.
    std::vector<Keypoint> a{make_kp({0.0f, 0.0f}), make_kp({0.02f, 0.0f})};
    std::vector<Keypoint> b{make_kp({0.50f, 0.0f}), make_kp({0.0f, 0.52f})};
    MatchCriteria c;
    CHECK(match_pair(a, b, 0, 1, c).empty());
    // Raising nn_ratio only ever adds matches.
    MatchCriteria loose = c;
    loose.nn_ratio = 1.0;
    CHECK(match_pair(a, b, 0, 1, loose).size() >= 1);

    // A clearly separated nearest neighbor passes from the a side; the b
    // side's single-candidate queries pass the ratio test vacuously.
    std::vector<Keypoint> lone{make_kp({0.0f, 0.0f})};
    std::vector<Keypoint> b2{make_kp({0.30f, 0.0f}), make_kp({0.0f, 0.52f})};
    auto matches = match_pair(lone, b2, 0, 1, c);
    REQUIRE(matches.size() == 2);
    CHECK(matches[0].index_b == 0);
    CHECK(matches[0].descriptor_distance == doctest::Approx(0.30));
    CHECK(matches[1].index_b == 1);
  }
}

TEST_CASE("match_pair is symmetric in its arguments") {
  std::mt19937 rng(103);
  std::vector<Keypoint> a, b;
  for (int i = 0; i < 60; ++i)
    a.push_back(make_kp(random_unit_descriptor(rng), 1.0 + 0.01 * i));
  for (int i = 0; i < 50; ++i)
    b.push_back(make_kp(random_unit_descriptor(rng), 1.0 + 0.012 * i));

  auto ab = match_pair(a, b, 0, 1, {});
  auto ba = match_pair(b, a, 1, 0, {});
  REQUIRE(ab.size() == ba.size());
  for (std::size_t i = 0; i < ab.size(); ++i) {
    CHECK(ab[i].image_a == ba[i].image_a);
    CHECK(ab[i].index_a == ba[i].index_a);
    CHECK(ab[i].index_b == ba[i].index_b);
    CHECK(ab[i].descriptor_distance == ba[i].descriptor_distance);
  }
  CHECK_THROWS_AS(match_pair(a, b, 1, 1, {}), std::invalid_argument);
}

TEST_CASE("indexed search equals brute force") {
  std::mt19937 rng(104);
  std::uniform_real_distribution<double> scale(0.8, 1.3);
  std::uniform_int_distribution<int> coin(0, 1);

  std::vector<Keypoint> a, b;
  for (int i = 0; i < 300; ++i)
    a.push_back(
        make_kp(random_unit_descriptor(rng), scale(rng), coin(rng) ? 1 : -1));
  // Above the brute-force limit, so match_pair takes the index path.
  for (int i = 0; i < 2100; ++i)
    b.push_back(
        make_kp(random_unit_descriptor(rng), scale(rng), coin(rng) ? 1 : -1));

  MatchCriteria c;
  c.max_descriptor_distance = 1.2;
  auto fast = match_pair(a, b, 0, 1, c);
  auto slow = oracle_match(a, b, c);
  REQUIRE(fast.size() == slow.size());
  CHECK_FALSE(fast.empty());
  for (std::size_t i = 0; i < fast.size(); ++i) {
    CHECK(fast[i].index_a == slow[i].index_a);
    CHECK(fast[i].index_b == slow[i].index_b);
    CHECK(fast[i].descriptor_distance ==
          doctest::Approx(slow[i].descriptor_distance).epsilon(1e-12));
  }
}

TEST_CASE("match graph construction") {
  SUBCASE("adjacency is consistent with the match list") {
    // 4 images, 7 keypoints, 5 matches.
    std::vector<Match> matches{
        {0, 0, 1, 0, 0.1, 1.0}, {0, 0, 2, 1, 0.2, 1.0}, {1, 1, 2, 0, 0.3, 1.0},
        {2, 1, 3, 0, 0.4, 1.0}, {0, 1, 3, 0, 0.5, 1.0}};
    MatchGraph g = MatchGraph::build(matches, {2, 2, 2, 1});

    CHECK(g.image_count() == 4);
    CHECK(g.total_points() == 7);
    REQUIRE(g.matches.size() == 5);

    // Every match appears in exactly two adjacency lists.
    std::vector<int> seen(g.matches.size(), 0);
    for (std::size_t p = 0; p < g.total_points(); ++p)
      for (std::uint32_t e = g.adj_offsets[p]; e < g.adj_offsets[p + 1]; ++e)
        ++seen[g.adj_matches[e]];
    for (int s : seen) CHECK(s == 2);

    CHECK(g.degree(g.global_index(0, 0)) == 2);
    CHECK(g.degree(g.global_index(3, 0)) == 2);
    CHECK(g.degree(g.global_index(1, 0)) == 1);

    // Unordered input arrives canonical: flipped matches are normalized.
    std::vector<Match> flipped{{2, 1, 0, 0, 0.7, 1.0}};
    MatchGraph g2 = MatchGraph::build(flipped, {2, 2, 2, 1});
    CHECK(g2.matches[0].image_a == 0);
    CHECK(g2.matches[0].image_b == 2);
    CHECK(g2.matches[0].index_a == 0);
    CHECK(g2.matches[0].index_b == 1);

    // Duplicate pairs collapse to one.
    std::vector<Match> dup{{0, 0, 1, 0, 0.1, 1.0}, {1, 0, 0, 0, 0.1, 1.0}};
    CHECK(MatchGraph::build(dup, {1, 1}).matches.size() == 1);

    // Bad references are rejected.
    std::vector<Match> self{{1, 0, 1, 0, 0.1, 1.0}};
    CHECK_THROWS_AS(MatchGraph::build(self, {1, 1}), std::invalid_argument);
    std::vector<Match> oob{{0, 5, 1, 0, 0.1, 1.0}};
    CHECK_THROWS_AS(MatchGraph::build(oob, {1, 1}), std::invalid_argument);
  }

  SUBCASE("identical sets give the complete-graph match count") {
    std::mt19937 rng(105);
    std::vector<Keypoint> base;
    for (int i = 0; i < 6; ++i)
      base.push_back(make_kp(random_unit_descriptor(rng)));
    std::vector<std::vector<Keypoint>> sets(4, base);
    MatchGraph g = build_graph(sets, {});
    CHECK(g.matches.size() == 6u * 4u * 3u / 2u);  // m * n(n-1)/2
    for (const Match& m : g.matches) CHECK(m.index_a == m.index_b);
  }
}

TEST_CASE("incidence operator") {
  std::vector<Match> matches{
      {0, 0, 1, 0, 0.1, 1.0}, {0, 0, 2, 1, 0.2, 1.0}, {1, 1, 2, 0, 0.3, 1.0},
      {2, 1, 3, 0, 0.4, 1.0}, {0, 1, 3, 0, 0.5, 1.0}};
  MatchGraph g = MatchGraph::build(matches, {2, 2, 2, 1});

  SUBCASE("rows hold one +1 and one -1") {
    // Probe with one-hot point vectors: each row is +-1 exactly at its two
    // endpoints, recovering the columns of the incidence matrix.
    for (std::size_t hot = 0; hot < g.total_points(); ++hot) {
      std::vector<Vec3> points(g.total_points());
      points[hot] = {1.0, 0.0, 0.0};
      std::vector<Vec3> rows(g.matches.size());
      incidence_apply(g, points, rows);
      int nonzero = 0;
      for (std::size_t m = 0; m < rows.size(); ++m) {
        const Match& match = g.matches[m];
        double expect = 0.0;
        if (g.global_index(match.image_a, match.index_a) == hot) expect = 1.0;
        if (g.global_index(match.image_b, match.index_b) == hot) expect = -1.0;
        CHECK(rows[m].x == expect);
        CHECK(rows[m].y == 0.0);
        if (rows[m].x != 0.0) ++nonzero;
      }
      CHECK(nonzero == static_cast<int>(g.degree(hot)));
    }
  }

  SUBCASE("constant point field lies in the null space") {
    std::vector<Vec3> points(g.total_points(), Vec3{3.0, -1.0, 2.0});
    std::vector<Vec3> rows(g.matches.size());
    incidence_apply(g, points, rows);
    for (const Vec3& r : rows) {
      CHECK(r.x == 0.0);
      CHECK(r.y == 0.0);
      CHECK(r.z == 0.0);
    }
  }

  SUBCASE("transpose is the adjoint") {
    std::mt19937 rng(106);
    std::uniform_real_distribution<double> u(-5.0, 5.0);
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<Vec3> p(g.total_points()), r(g.matches.size());
      for (Vec3& v : p) v = {u(rng), u(rng), u(rng)};
      for (Vec3& v : r) v = {u(rng), u(rng), u(rng)};

      std::vector<Vec3> Mp(g.matches.size());
      incidence_apply(g, p, Mp);
      std::vector<Vec3> Mtr(g.total_points(), Vec3{});
      incidence_transpose_apply(g, r, Mtr);

      double lhs = 0.0, rhs = 0.0;
      for (std::size_t m = 0; m < r.size(); ++m) lhs += Mp[m].dot(r[m]);
      for (std::size_t q = 0; q < p.size(); ++q) rhs += p[q].dot(Mtr[q]);
      CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
    }
  }

  SUBCASE("size mismatches are rejected") {
    std::vector<Vec3> small(2), rows(g.matches.size());
    CHECK_THROWS_AS(incidence_apply(g, small, rows), std::invalid_argument);
  }
}

TEST_CASE("match file round trip") {
  TempDir dir;
  std::vector<Match> matches{
      {0, 3, 1, 1, 0.12345678901234567, 1.0},
      {0, 0, 2, 1, 0.5, 1.0},
      {1, 1, 2, 0, 0.75, 1.0}};
  MatchGraph g = MatchGraph::build(matches, {4, 2, 2});
  std::string path = dir.file("matches.txt");
  save_matches(path, g);

  MatchGraph r = load_matches(path);
  CHECK(r.image_count() == 3);
  CHECK(r.image_point_counts == g.image_point_counts);
  REQUIRE(r.matches.size() == g.matches.size());
  for (std::size_t i = 0; i < r.matches.size(); ++i) {
    CHECK(r.matches[i].image_a == g.matches[i].image_a);
    CHECK(r.matches[i].index_a == g.matches[i].index_a);
    CHECK(r.matches[i].image_b == g.matches[i].image_b);
    CHECK(r.matches[i].index_b == g.matches[i].index_b);
    // %.17g writes doubles exactly.
    CHECK(r.matches[i].descriptor_distance == g.matches[i].descriptor_distance);
  }
  CHECK(r.adj_offsets == g.adj_offsets);

  SUBCASE("malformed files are rejected") {
    std::ofstream(dir.file("bad1.txt")) << "imagez 2\ncounts 1 1\n";
    CHECK_THROWS(load_matches(dir.file("bad1.txt")));
    std::ofstream(dir.file("bad2.txt")) << "images 2\ncounts 1 1\n0 9 1 0 0.5\n";
    CHECK_THROWS(load_matches(dir.file("bad2.txt")));
    CHECK_THROWS(load_matches(dir.file("absent.txt")));
  }
}
