#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include "doctest.h"
#include "groupreg/optimizer.hpp"
#include "groupreg/synthetic.hpp"
#include "test_util.hpp"

using namespace groupreg;

namespace {

std::vector<Keypoint> points_to_keypoints(const std::vector<Vec3>& pts) {
  std::vector<Keypoint> kps(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    kps[i].position = pts[i];
    kps[i].scale = 2.0;
    kps[i].descriptor.assign(4, 0.5f);
  }
  return kps;
}

// n identical point sets with every corresponding pair matched.
BundleState identical_bundle(int n_images, int n_points, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 200.0);
  std::vector<Vec3> pts(n_points);
  for (Vec3& p : pts) p = {u(rng), u(rng), u(rng)};
  std::vector<std::vector<Keypoint>> sets(n_images, points_to_keypoints(pts));

  std::vector<Match> matches;
  for (int a = 0; a < n_images; ++a)
    for (int b = a + 1; b < n_images; ++b)
      for (int i = 0; i < n_points; ++i)
        matches.push_back({a, i, b, i, 0.0, 1.0});
  MatchGraph g = MatchGraph::build(
      std::move(matches),
      std::vector<std::uint32_t>(n_images, static_cast<std::uint32_t>(n_points)));
  return make_bundle(sets, std::move(g));
}

// Independent energy evaluator: full half-transform application per point,
// any candidate coefficients for the active grids. This is the oracle the
// analytic gradient is checked against.
double energy_with_coeffs(const BundleState& state,
                          const std::vector<std::vector<double>>& coeffs) {
  const MatchGraph& g = state.graph;
  std::vector<Vec3> q(g.total_points());
  for (int i = 0; i < state.image_count(); ++i) {
    HalfTransform t = state.transforms[i];
    t.grids.back().coeffs = coeffs[i];
    for (std::size_t p = g.point_offsets[i]; p < g.point_offsets[i + 1]; ++p)
      q[p] = t.apply(state.raw_points[p]);
  }
  double e = 0.0;
  for (std::size_t m = 0; m < g.matches.size(); ++m) {
    const Match& mt = g.matches[m];
    Vec3 diff = q[g.global_index(mt.image_a, mt.index_a)] -
                q[g.global_index(mt.image_b, mt.index_b)];
    e += state.s_squared[m] * diff.squared_norm();
  }
  return e;
}

// Random multi-image instance with an active grid and random coefficients,
// positions kept consistent with the transforms.
BundleState random_instance(int n_images, int max_points, double spacing,
                            double coeff_amplitude, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 80.0);
  std::uniform_int_distribution<int> npts(max_points / 2, max_points);
  std::uniform_real_distribution<double> w(0.2, 1.0);

  std::vector<std::vector<Keypoint>> sets(n_images);
  std::vector<std::uint32_t> counts(n_images);
  for (int i = 0; i < n_images; ++i) {
    std::vector<Vec3> pts(npts(rng));
    for (Vec3& p : pts) p = {u(rng), u(rng), u(rng)};
    sets[i] = points_to_keypoints(pts);
    counts[i] = static_cast<std::uint32_t>(pts.size());
  }

  std::vector<Match> matches;
  std::set<std::tuple<int, int, int, int>> used;
  std::uniform_int_distribution<int> imgd(0, n_images - 1);
  for (int trial = 0; trial < 6 * max_points; ++trial) {
    int a = imgd(rng), b = imgd(rng);
    if (a == b) continue;
    if (a > b) std::swap(a, b);
    int ia = std::uniform_int_distribution<int>(0, counts[a] - 1)(rng);
    int ib = std::uniform_int_distribution<int>(0, counts[b] - 1)(rng);
    if (!used.insert({a, ia, b, ib}).second) continue;
    matches.push_back({a, ia, b, ib, 0.1, w(rng)});
  }
  BundleState state =
      make_bundle(sets, MatchGraph::build(std::move(matches), counts));

  OptimizerConfig cfg;
  cfg.iterations_per_level = 0;  // just install the level grid
  descend_level(state, spacing, cfg, 0);

  std::uniform_real_distribution<double> cd(-coeff_amplitude, coeff_amplitude);
  for (int i = 0; i < n_images; ++i)
    for (double& c : state.transforms[i].grids.back().coeffs) c = cd(rng);
  for (std::size_t p = 0; p < state.positions.size(); ++p)
    state.positions[p] =
        state.transforms[state.point_image[p]].apply(state.raw_points[p]);
  return state;
}

}  // namespace

TEST_CASE("bundle construction") {
  BundleState state = identical_bundle(3, 10, 1);
  CHECK(state.image_count() == 3);
  CHECK(state.positions.size() == 30);
  // Identity transforms: cached positions equal the raw points.
  for (std::size_t p = 0; p < state.positions.size(); ++p) {
    CHECK(state.positions[p].x == state.raw_points[p].x);
    CHECK(state.positions[p].z == state.raw_points[p].z);
  }
  // s^2 = w (1/|N(a)| + 1/|N(b)|); every point here has degree 2.
  for (double s2 : state.s_squared) CHECK(s2 == doctest::Approx(1.0));

  std::vector<std::vector<Keypoint>> two(2);
  two[0] = points_to_keypoints({{0, 0, 0}});
  two[1] = points_to_keypoints({{1, 0, 0}});
  MatchGraph g = MatchGraph::build({{0, 0, 1, 0, 0.1, 1.0}}, {1, 1});
  CHECK_THROWS_AS(make_bundle({two[0]}, g), std::invalid_argument);
}

TEST_CASE("energy closed forms") {
  SUBCASE("perfectly registered group has zero energy") {
    BundleState state = identical_bundle(4, 25, 2);
    CHECK(energy(state) == 0.0);
  }

  SUBCASE("single match of distance d gives 2 d^2") {
    std::vector<std::vector<Keypoint>> sets(2);
    sets[0] = points_to_keypoints({{0.0, 0.0, 0.0}});
    sets[1] = points_to_keypoints({{3.0, 0.0, 0.0}});
    MatchGraph g = MatchGraph::build({{0, 0, 1, 0, 0.1, 1.0}}, {1, 1});
    BundleState state = make_bundle(sets, std::move(g));
    CHECK(energy(state) == doctest::Approx(18.0).epsilon(1e-14));
  }

  SUBCASE("matches the direct per-match sum on a random instance") {
    BundleState state = random_instance(3, 40, 70.0, 3.0, 3);
    const MatchGraph& g = state.graph;
    double expect = 0.0;
    for (std::size_t m = 0; m < g.matches.size(); ++m) {
      const Match& mt = g.matches[m];
      std::size_t ga = g.global_index(mt.image_a, mt.index_a);
      std::size_t gb = g.global_index(mt.image_b, mt.index_b);
      double d2 = (state.positions[ga] - state.positions[gb]).squared_norm();
      double neighborhood = 1.0 / g.degree(ga) + 1.0 / g.degree(gb);
      expect += mt.weight * neighborhood * d2;
    }
    CHECK(energy(state) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("gradient") {
  SUBCASE("zero at a perfectly registered state") {
    BundleState state = identical_bundle(3, 15, 4);
    OptimizerConfig cfg;
    cfg.iterations_per_level = 0;
    descend_level(state, 100.0, cfg, 0);
    std::vector<std::vector<double>> grads;
    compute_gradient(state, grads);
    for (const auto& gi : grads)
      for (double v : gi) CHECK(v == 0.0);
  }

  SUBCASE("matches central finite differences of the energy") {
    std::mt19937 pick(99);
    for (unsigned instance = 0; instance < 6; ++instance) {
      BundleState state = random_instance(3, 20, 60.0, 2.0, 100 + instance);
      std::vector<std::vector<double>> grads;
      compute_gradient(state, grads);

      std::vector<std::vector<double>> coeffs(state.image_count());
      for (int i = 0; i < state.image_count(); ++i)
        coeffs[i] = state.transforms[i].grids.back().coeffs;

      const double h = 1e-4;
      const std::size_t ncoeff = coeffs[0].size();
      // Sample well over 100 random entries across images.
      for (int probe = 0; probe < 60; ++probe) {
        int i = static_cast<int>(pick() % state.image_count());
        std::size_t c = pick() % ncoeff;
        double saved = coeffs[i][c];
        coeffs[i][c] = saved + h;
        double ep = energy_with_coeffs(state, coeffs);
        coeffs[i][c] = saved - h;
        double em = energy_with_coeffs(state, coeffs);
        coeffs[i][c] = saved;
        double fd = (ep - em) / (2.0 * h);
        double denom = std::max({1.0, std::abs(fd), std::abs(grads[i][c])});
        CHECK(std::abs(grads[i][c] - fd) / denom < 1e-5);
      }
    }
  }

  SUBCASE("energy is invariant to a shared constant displacement") {
    BundleState state = random_instance(3, 30, 60.0, 2.0, 42);
    std::vector<std::vector<double>> coeffs(state.image_count());
    for (int i = 0; i < state.image_count(); ++i)
      coeffs[i] = state.transforms[i].grids.back().coeffs;
    double e0 = energy_with_coeffs(state, coeffs);
    const Vec3 shift{4.0, -7.0, 2.5};
    for (auto& ci : coeffs)
      for (std::size_t c = 0; c < ci.size(); c += 3) {
        ci[c] += shift.x;
        ci[c + 1] += shift.y;
        ci[c + 2] += shift.z;
      }
    double e1 = energy_with_coeffs(state, coeffs);
    CHECK(e1 == doctest::Approx(e0).epsilon(1e-9));
  }
}

TEST_CASE("linear initialization") {
  SUBCASE("identical sets are a fixed point") {
    BundleState state = identical_bundle(3, 30, 5);
    OptimizerConfig cfg;
    init_linear(state, cfg);
    for (std::size_t p = 0; p < state.positions.size(); ++p)
      CHECK((state.positions[p] - state.raw_points[p]).norm() < 1e-6);
    CHECK(state.trace.size() == static_cast<std::size_t>(cfg.init_iterations));
    for (const TraceRow& row : state.trace) CHECK(row.level == 0);
  }

  SUBCASE("recovers a similarity transform") {
    std::mt19937 rng(6);
    std::uniform_real_distribution<double> u(0.0, 100.0);
    std::vector<Vec3> pts(60);
    for (Vec3& p : pts) p = {u(rng), u(rng), u(rng)};
    std::vector<Vec3> scaled(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i)
      scaled[i] = pts[i] * 2.0 + Vec3{10.0, 0.0, 0.0};

    std::vector<std::vector<Keypoint>> sets{points_to_keypoints(pts),
                                            points_to_keypoints(scaled)};
    std::vector<Match> matches;
    for (int i = 0; i < static_cast<int>(pts.size()); ++i)
      matches.push_back({0, i, 1, i, 0.0, 1.0});
    BundleState state = make_bundle(
        sets, MatchGraph::build(std::move(matches),
                                {static_cast<std::uint32_t>(pts.size()),
                                 static_cast<std::uint32_t>(pts.size())}));
    OptimizerConfig cfg;
    init_linear(state, cfg);

    double diameter = 100.0 * std::sqrt(3.0);
    const MatchGraph& g = state.graph;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      Vec3 qa = state.positions[g.global_index(0, static_cast<int>(i))];
      Vec3 qb = state.positions[g.global_index(1, static_cast<int>(i))];
      CHECK((qa - qb).norm() < 0.01 * diameter);
    }
  }

  SUBCASE("refuses to run once a level is in progress") {
    BundleState state = identical_bundle(2, 10, 7);
    OptimizerConfig cfg;
    cfg.iterations_per_level = 0;
    descend_level(state, 100.0, cfg, 0);
    CHECK_THROWS(init_linear(state, cfg));
    CHECK_THROWS_AS(refresh_weights(state), std::logic_error);
  }
}

TEST_CASE("descent") {
  SUBCASE("identical sets keep zero coefficients") {
    BundleState state = identical_bundle(3, 20, 8);
    OptimizerConfig cfg;
    cfg.iterations_per_level = 25;
    descend_level(state, 90.0, cfg, 0);
    for (const auto& t : state.transforms) {
      REQUIRE(t.grids.size() == 1);
      CHECK(t.grids.back().max_abs_coefficient() < 1e-9);
    }
    CHECK(state.max_constraint_residual < 1e-9);
    for (const TraceRow& row : state.trace) CHECK(row.energy == 0.0);
  }

  SUBCASE("argument validation") {
    BundleState state = identical_bundle(2, 10, 9);
    OptimizerConfig cfg;
    CHECK_THROWS_AS(descend_level(state, -5.0, cfg, 0), std::invalid_argument);
  }

  SUBCASE("reduces match distances on a warped group") {
    SyntheticSpec spec;
    spec.seed = 21;
    spec.n_images = 5;
    spec.n_points = 400;
    spec.noise_sigma = 0.3;
    spec.outlier_rate = 0.0;
    spec.warp_spacing = 100.0;
    spec.warp_max_displacement = 30.0;
    SyntheticDataset data = generate_synthetic(spec);

    OptimizerConfig cfg;  // default multi-resolution schedule
    RegistrationResult result =
        register_group(data.keypoints, data.graph, cfg);

    double post_init = -1.0, final_value = -1.0;
    for (const TraceRow& row : result.trace)
      if (row.level == 0) post_init = row.mean_weighted_distance;
    final_value = result.trace.back().mean_weighted_distance;
    REQUIRE(post_init > 0.0);
    CHECK(final_value <= 0.2 * post_init);

    // Projection kept the zero-mean constraint throughout.
    CHECK(result.max_constraint_residual < 1e-9);

    // Energy never increases between refreshes at the descent levels.
    std::vector<int> level_iter;
    int prev_level = -1;
    double prev_energy = 0.0;
    int k_in_level = 0;
    for (const TraceRow& row : result.trace) {
      if (row.level != prev_level) {
        prev_level = row.level;
        k_in_level = 0;
      } else {
        ++k_in_level;
      }
      bool refresh_row = row.level >= 1 && k_in_level % cfg.theta_refresh_period == 0;
      if (row.level >= 1 && k_in_level > 0 && !refresh_row)
        CHECK(row.energy <= prev_energy * (1.0 + 1e-12) + 1e-12);
      prev_energy = row.energy;
    }

    // Every final grid respects the displacement bound.
    for (const HalfTransform& t : result.transforms)
      for (const SplineGrid& grid : t.grids) CHECK(diffeo_ok(grid));
  }

  SUBCASE("positions track the transforms") {
    BundleState state = random_instance(3, 30, 70.0, 0.0, 11);
    OptimizerConfig cfg;
    cfg.iterations_per_level = 15;
    descend_level(state, 70.0, cfg, 1);
    for (std::size_t p = 0; p < state.positions.size(); ++p) {
      Vec3 expect =
          state.transforms[state.point_image[p]].apply(state.raw_points[p]);
      CHECK((state.positions[p] - expect).norm() < 1e-9);
    }
    // The projection keeps the per-coefficient mean at zero.
    const auto& g0 = state.transforms[0].grids.back();
    for (std::size_t c = 0; c < g0.coeffs.size(); ++c) {
      double mean = 0.0;
      for (const auto& t : state.transforms) mean += t.grids.back().coeffs[c];
      CHECK(std::abs(mean) < 1e-9);
    }
  }
}

TEST_CASE("register_group") {
  SUBCASE("single image returns the identity") {
    std::vector<std::vector<Keypoint>> sets{points_to_keypoints({{1, 2, 3}})};
    MatchGraph g = MatchGraph::build({}, {1});
    RegistrationResult r = register_group(sets, std::move(g), {});
    REQUIRE(r.transforms.size() == 1);
    CHECK(r.transforms[0].grids.empty());
    CHECK(r.transforms[0].linear.scale.x == 1.0);
    REQUIRE(r.mixtures.size() == 1);
    CHECK(r.mixtures[0].absent);
  }

  SUBCASE("invalid inputs are rejected") {
    CHECK_THROWS_AS(register_group({}, MatchGraph{}, {}),
                    std::invalid_argument);
    std::vector<std::vector<Keypoint>> sets{points_to_keypoints({{0, 0, 0}}),
                                            points_to_keypoints({{1, 0, 0}})};
    MatchGraph empty_graph = MatchGraph::build({}, {1, 1});
    CHECK_THROWS_AS(register_group(sets, std::move(empty_graph), {}),
                    std::invalid_argument);
    MatchGraph mismatched = MatchGraph::build({{0, 0, 1, 0, 0.1, 1.0}}, {1, 1});
    std::vector<std::vector<Keypoint>> three(3, points_to_keypoints({{0, 0, 0}}));
    CHECK_THROWS_AS(register_group(three, std::move(mismatched), {}),
                    std::invalid_argument);
  }
}

TEST_CASE("trace bookkeeping and persistence") {
  TempDir dir;
  SyntheticSpec spec;
  spec.seed = 31;
  spec.n_images = 3;
  spec.n_points = 120;
  spec.outlier_rate = 0.2;
  SyntheticDataset data = generate_synthetic(spec);

  OptimizerConfig cfg;
  cfg.level_spacings = {150.0};
  cfg.iterations_per_level = 20;
  cfg.record_theta_history = true;
  RegistrationResult r = register_group(data.keypoints, data.graph, cfg);

  REQUIRE_FALSE(r.trace.empty());
  for (const TraceRow& row : r.trace) {
    CHECK(row.sqrt_energy == doctest::Approx(std::sqrt(row.energy)).epsilon(1e-12));
    CHECK(row.mean_weighted_distance >= 0.0);
  }
  // Iterations are a single global counter: strictly increasing by one.
  for (std::size_t i = 1; i < r.trace.size(); ++i)
    CHECK(r.trace[i].iteration == r.trace[i - 1].iteration + 1);
  CHECK(r.trace.size() ==
        static_cast<std::size_t>(cfg.init_iterations + cfg.iterations_per_level));

  REQUIRE_FALSE(r.theta_history.empty());
  for (const ThetaRow& row : r.theta_history) {
    CHECK(row.s1 <= row.s2 + 1e-12);
    CHECK(row.r >= 0.0);
    CHECK(row.r <= 1.0);
  }

  save_trace(dir.file("trace.csv"), r.trace);
  save_theta_history(dir.file("theta.csv"), r.theta_history);
  std::ifstream tf(dir.file("trace.csv"));
  std::string header;
  std::getline(tf, header);
  CHECK(header == "iter,level,energy,sqrt_energy,mean_weighted_distance");
  std::size_t lines = 0;
  for (std::string line; std::getline(tf, line);) ++lines;
  CHECK(lines == r.trace.size());
  std::ifstream th(dir.file("theta.csv"));
  std::getline(th, header);
  CHECK(header == "iter,image,s1,s2,r");
}
