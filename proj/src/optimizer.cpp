#include "groupreg/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <utility>

#include "groupreg/parallel.hpp"

namespace groupreg {

namespace {

void recompute_s_squared(BundleState& state) {
  const auto& g = state.graph;
  state.s_squared.resize(g.matches.size());
  parallel::for_each_index(g.matches.size(), [&](std::size_t m) {
    const Match& mt = g.matches[m];
    std::size_t ga = g.global_index(mt.image_a, mt.index_a);
    std::size_t gb = g.global_index(mt.image_b, mt.index_b);
    double neighborhood = 1.0 / g.degree(ga) + 1.0 / g.degree(gb);
    state.s_squared[m] = mt.weight * neighborhood;
  });
}

// Refits the mixtures (warm-started) and match weights at the cached
// positions and refreshes the energy scale factors.
void refit_weights(BundleState& state) {
  state.mixtures =
      update_all_weights(state.graph, state.positions, &state.mixtures);
  recompute_s_squared(state);
}

void record_theta(BundleState& state, const OptimizerConfig& cfg) {
  if (!cfg.record_theta_history) return;
  for (int i = 0; i < state.image_count(); ++i) {
    const MixtureParams& t = state.mixtures[i];
    state.theta_history.push_back(
        {state.global_iteration, i, t.s1, t.s2, t.r});
  }
}

// Energy, and the trace diagnostics, in one sequential pass so results do not
// depend on the thread count.
struct EnergyTerms {
  double energy = 0.0;
  double weighted_distance = 0.0;  // sum w * d
  double weight_sum = 0.0;
};

EnergyTerms energy_terms(const BundleState& state) {
  const auto& g = state.graph;
  EnergyTerms t;
  for (std::size_t m = 0; m < g.matches.size(); ++m) {
    const Match& mt = g.matches[m];
    std::size_t ga = g.global_index(mt.image_a, mt.index_a);
    std::size_t gb = g.global_index(mt.image_b, mt.index_b);
    Vec3 diff = state.positions[ga] - state.positions[gb];
    double d2 = diff.squared_norm();
    t.energy += state.s_squared[m] * d2;
    t.weighted_distance += mt.weight * std::sqrt(d2);
    t.weight_sum += mt.weight;
  }
  return t;
}

void record_trace(BundleState& state, int level) {
  EnergyTerms t = energy_terms(state);
  TraceRow row;
  row.iteration = state.global_iteration;
  row.level = level;
  row.energy = t.energy;
  row.sqrt_energy = std::sqrt(std::max(0.0, t.energy));
  row.mean_weighted_distance =
      t.weight_sum > 0.0 ? t.weighted_distance / t.weight_sum : 0.0;
  state.trace.push_back(row);
}

// positions <- base + active grid displacement (the grids share geometry, so
// one basis row per point serves every image).
void apply_active_grids(BundleState& state) {
  parallel::for_each_index(state.positions.size(), [&](std::size_t p) {
    const SplineGrid& grid =
        state.transforms[state.point_image[p]].grids.back();
    state.positions[p] =
        state.base_positions[p] + grid_displacement(grid, state.basis[p]);
  });
}

// Fresh zero grids at `spacing` whose support covers every current position
// with two spare cells on each side; rebuilds the cached basis rows.
void push_level_grids(BundleState& state, double spacing) {
  Vec3 lo = state.positions.empty() ? Vec3{} : state.positions.front();
  Vec3 hi = lo;
  for (const Vec3& p : state.positions) {
    lo = lo.cwise_min(p);
    hi = hi.cwise_max(p);
  }
  SplineGrid proto;
  proto.origin = lo - Vec3{2.0 * spacing, 2.0 * spacing, 2.0 * spacing};
  proto.spacing = spacing;
  for (int a = 0; a < 3; ++a) {
    double span = hi[a] - lo[a] + 4.0 * spacing;
    proto.dims[a] = std::max(4, static_cast<int>(std::ceil(span / spacing)) + 3);
  }
  proto.frozen = false;
  proto.coeffs.assign(3 * proto.control_count(), 0.0);
  for (auto& t : state.transforms) t.grids.push_back(proto);

  state.base_positions = state.positions;
  state.basis.resize(state.positions.size());
  std::vector<char> escaped(parallel::thread_count(), 0);
  parallel::for_blocks(
      state.positions.size(), [&](int block, std::size_t b, std::size_t e) {
        for (std::size_t p = b; p < e; ++p) {
          state.basis[p] = basis_row_checked(state.base_positions[p], proto);
          if (!state.basis[p].valid) escaped[block] = 1;
        }
      });
  for (char c : escaped)
    if (c)
      throw std::logic_error(
          "descend_level: a point escaped the freshly padded grid");
}

const SplineGrid& active_grid(const BundleState& state, int image) {
  const auto& grids = state.transforms[image].grids;
  if (grids.empty() || grids.back().frozen)
    throw std::logic_error("no active grid; run descend_level first");
  return grids.back();
}

}  // namespace

BundleState make_bundle(const std::vector<std::vector<Keypoint>>& sets,
                        MatchGraph graph) {
  if (static_cast<int>(sets.size()) != graph.image_count())
    throw std::invalid_argument(
        "make_bundle: image count mismatch between keypoint sets and graph");
  for (std::size_t i = 0; i < sets.size(); ++i) {
    if (sets[i].size() != graph.image_point_counts[i])
      throw std::invalid_argument(
          "make_bundle: keypoint count mismatch for image " +
          std::to_string(i));
  }

  BundleState state;
  state.graph = std::move(graph);
  state.raw_points.reserve(state.graph.total_points());
  state.point_image.reserve(state.graph.total_points());
  for (std::size_t i = 0; i < sets.size(); ++i) {
    for (const Keypoint& kp : sets[i]) {
      state.raw_points.push_back(kp.position);
      state.point_image.push_back(static_cast<int>(i));
    }
  }
  state.transforms.assign(sets.size(), HalfTransform{});
  state.mixtures.assign(sets.size(), MixtureParams{});
  state.base_positions = state.raw_points;
  state.positions = state.raw_points;
  recompute_s_squared(state);
  return state;
}

void refresh_weights(BundleState& state) {
  for (const auto& t : state.transforms)
    if (!t.grids.empty() && !t.grids.back().frozen)
      throw std::logic_error(
          "refresh_weights: a level is in progress; weights are refreshed "
          "internally there");
  parallel::for_each_index(state.positions.size(), [&](std::size_t p) {
    state.positions[p] =
        state.transforms[state.point_image[p]].apply(state.raw_points[p]);
  });
  state.base_positions = state.positions;
  refit_weights(state);
}

void init_linear(BundleState& state, const OptimizerConfig& cfg) {
  const int n = state.image_count();
  for (const auto& t : state.transforms)
    if (!t.grids.empty())
      throw std::logic_error("init_linear must run before deformable levels");

  for (int i = 0; i < n; ++i) {
    if (state.graph.image_matches[i].empty())
      std::fprintf(stderr,
                   "warning: image %d has no matches; its transform stays "
                   "identity during initialization\n",
                   i);
  }

  struct Update {
    Vec3 rho{1.0, 1.0, 1.0};
    Vec3 offset{0.0, 0.0, 0.0};
    bool apply = false;
  };
  std::vector<Update> updates(n);
  std::vector<Vec3> snapshot;

  for (int round = 0; round < cfg.init_iterations; ++round) {
    if (cfg.theta_refresh_period > 0 &&
        round % cfg.theta_refresh_period == 0) {
      refit_weights(state);
      record_theta(state, cfg);
    }
    snapshot = state.positions;

    parallel::for_each_index(static_cast<std::size_t>(n), [&](std::size_t ii) {
      int i = static_cast<int>(ii);
      Update upd;
      const auto& incident = state.graph.image_matches[i];
      double wsum = 0.0;
      Vec3 sum_own{}, sum_other{};
      for (std::uint32_t m : incident) {
        const Match& mt = state.graph.matches[m];
        std::size_t ga = state.graph.global_index(mt.image_a, mt.index_a);
        std::size_t gb = state.graph.global_index(mt.image_b, mt.index_b);
        bool own_is_a = mt.image_a == i;
        const Vec3& own = snapshot[own_is_a ? ga : gb];
        const Vec3& other = snapshot[own_is_a ? gb : ga];
        wsum += mt.weight;
        sum_own += mt.weight * own;
        sum_other += mt.weight * other;
      }
      if (incident.empty() || wsum < 1e-300) {
        updates[ii] = upd;  // identity
        return;
      }
      Vec3 mean_own = sum_own / wsum;
      Vec3 mean_other = sum_other / wsum;
      Vec3 var_own{}, var_other{};
      for (std::uint32_t m : incident) {
        const Match& mt = state.graph.matches[m];
        std::size_t ga = state.graph.global_index(mt.image_a, mt.index_a);
        std::size_t gb = state.graph.global_index(mt.image_b, mt.index_b);
        bool own_is_a = mt.image_a == i;
        Vec3 down = snapshot[own_is_a ? ga : gb] - mean_own;
        Vec3 doth = snapshot[own_is_a ? gb : ga] - mean_other;
        var_own += mt.weight * down.hadamard(down);
        var_other += mt.weight * doth.hadamard(doth);
      }
      var_own = var_own / wsum;
      var_other = var_other / wsum;
      for (int a = 0; a < 3; ++a) {
        upd.rho[a] = (var_own[a] > 1e-12 && var_other[a] > 1e-12)
                         ? std::pow(var_other[a] / var_own[a], cfg.gamma / 2.0)
                         : 1.0;
      }
      upd.offset = cfg.gamma * (mean_other - mean_own) +
                   mean_own.hadamard(Vec3{1.0, 1.0, 1.0} - upd.rho);
      upd.apply = true;
      updates[ii] = upd;
    });

    for (int i = 0; i < n; ++i) {
      if (!updates[i].apply) continue;
      LinearTransform& lt = state.transforms[i].linear;
      lt.scale = lt.scale.hadamard(updates[i].rho);
      lt.translation =
          updates[i].rho.hadamard(lt.translation) + updates[i].offset;
    }
    parallel::for_each_index(state.positions.size(), [&](std::size_t p) {
      state.positions[p] =
          state.transforms[state.point_image[p]].linear.apply(
              state.raw_points[p]);
    });

    record_trace(state, 0);
    ++state.global_iteration;
  }
  state.base_positions = state.positions;
}

double energy(const BundleState& state) { return energy_terms(state).energy; }

void compute_gradient(const BundleState& state,
                      std::vector<std::vector<double>>& grads) {
  const auto& g = state.graph;
  const int n = state.image_count();

  // rows = 2 S^2 M q, gathered back onto the points: y = M^T (2 S^2 M q).
  std::vector<Vec3> rows(g.matches.size());
  incidence_apply(g, state.positions, rows);
  parallel::for_each_index(g.matches.size(), [&](std::size_t m) {
    rows[m] = rows[m] * (2.0 * state.s_squared[m]);
  });
  std::vector<Vec3> y(g.total_points());
  incidence_transpose_apply(g, rows, y);

  // Scatter through the basis rows of each image's active grid.
  grads.resize(n);
  parallel::for_each_index(static_cast<std::size_t>(n), [&](std::size_t ii) {
    int i = static_cast<int>(ii);
    const SplineGrid& grid = active_grid(state, i);
    grads[ii].assign(3 * grid.control_count(), 0.0);
    for (std::size_t p = g.point_offsets[i]; p < g.point_offsets[i + 1]; ++p) {
      const SplineBasis& b = state.basis[p];
      if (!b.valid) continue;
      const Vec3& yp = y[p];
      for (int dz = 0; dz < 4; ++dz) {
        for (int dy = 0; dy < 4; ++dy) {
          double wzy = b.wz[dz] * b.wy[dy];
          std::size_t base = grid.control_index(b.base[0], b.base[1] + dy,
                                                b.base[2] + dz);
          double* out = grads[ii].data() + 3 * base;
          for (int dx = 0; dx < 4; ++dx) {
            double w = wzy * b.wx[dx];
            out[3 * dx + 0] += w * yp.x;
            out[3 * dx + 1] += w * yp.y;
            out[3 * dx + 2] += w * yp.z;
          }
        }
      }
    }
  });
}

namespace {

// Sum of s^2 over the matches incident to each point.
std::vector<double> point_weight_sums(const BundleState& state) {
  const MatchGraph& g = state.graph;
  std::vector<double> r(g.total_points(), 0.0);
  for (std::size_t m = 0; m < g.matches.size(); ++m) {
    const Match& mm = g.matches[m];
    r[g.global_index(mm.image_a, mm.index_a)] += state.s_squared[m];
    r[g.global_index(mm.image_b, mm.index_b)] += state.s_squared[m];
  }
  return r;
}

// Per-control scale that makes alpha a dimensionless step fraction. For
// control c it is the largest absolute row sum of any image's energy Hessian
// block, 4 * sum_p b_pc * r_p, shared across images so it commutes with the
// zero-mean projection. The scaled Hessian has spectral radius at most 1,
// so any alpha below 2 keeps fixed-weight descent monotone regardless of how
// many points a coarse cell holds.
std::vector<double> step_scales(const BundleState& state,
                                const std::vector<double>& r) {
  const MatchGraph& g = state.graph;
  const int n = state.image_count();
  const std::size_t ncontrol = active_grid(state, 0).control_count();
  std::vector<std::vector<double>> per_image(n);
  parallel::for_each_index(static_cast<std::size_t>(n), [&](std::size_t ii) {
    int i = static_cast<int>(ii);
    const SplineGrid& grid = active_grid(state, i);
    per_image[ii].assign(grid.control_count(), 0.0);
    for (std::size_t p = g.point_offsets[i]; p < g.point_offsets[i + 1]; ++p) {
      const SplineBasis& b = state.basis[p];
      if (!b.valid || r[p] == 0.0) continue;
      double rp4 = 4.0 * r[p];
      for (int dz = 0; dz < 4; ++dz) {
        for (int dy = 0; dy < 4; ++dy) {
          double wzy = b.wz[dz] * b.wy[dy];
          std::size_t base = grid.control_index(b.base[0], b.base[1] + dy,
                                                b.base[2] + dz);
          for (int dx = 0; dx < 4; ++dx)
            per_image[ii][base + dx] += rp4 * wzy * b.wx[dx];
        }
      }
    }
  });
  std::vector<double> scale(ncontrol, 0.0);
  for (int i = 0; i < n; ++i)
    for (std::size_t c = 0; c < ncontrol; ++c)
      scale[c] = std::max(scale[c], per_image[i][c]);
  return scale;
}

}  // namespace

void descend_level(BundleState& state, double spacing,
                   const OptimizerConfig& cfg, int level_index) {
  const int n = state.image_count();
  if (n < 2)
    throw std::invalid_argument("descend_level: need at least two images");
  if (spacing <= 0.0)
    throw std::invalid_argument("descend_level: spacing must be positive");

  // Anything still active from an earlier phase is now part of the base.
  for (auto& t : state.transforms)
    for (auto& grid : t.grids) grid.frozen = true;
  push_level_grids(state, spacing);
  state.grids_per_level.push_back(1);

  const double bound = cfg.diffeo_bound_factor * spacing;
  std::vector<std::vector<double>> grads;
  std::vector<std::vector<double>> candidate(n);
  std::vector<double> rsums = point_weight_sums(state);
  std::vector<double> scales = step_scales(state, rsums);
  double energy_at_refresh = -1.0;

  for (int k = 0; k < cfg.iterations_per_level; ++k) {
    if (cfg.theta_refresh_period > 0 &&
        k % cfg.theta_refresh_period == 0) {
      double before = energy(state);
      // A level parked at (numerically) zero energy is converged, not stuck.
      if (k > 0 && energy_at_refresh > 0.0 && before >= energy_at_refresh &&
          before > 1e-24 * state.graph.matches.size())
        std::fprintf(stderr,
                     "warning: energy did not decrease over the last refresh "
                     "period (level %d, iteration %d)\n",
                     level_index + 1, k);
      refit_weights(state);
      record_theta(state, cfg);
      rsums = point_weight_sums(state);
      scales = step_scales(state, rsums);
      energy_at_refresh = energy(state);
    }

    compute_gradient(state, grads);
    const std::size_t ncoeff = grads[0].size();
    for (int i = 0; i < n; ++i) candidate[i].resize(ncoeff);
    parallel::for_each_index(static_cast<std::size_t>(n), [&](std::size_t i) {
      const auto& coeffs = state.transforms[i].grids.back().coeffs;
      for (std::size_t c = 0; c < ncoeff; ++c) {
        double s = scales[c / 3];
        candidate[i][c] =
            coeffs[c] - (s > 0.0 ? cfg.alpha * grads[i][c] / s : 0.0);
      }
    });

    // Zero-mean projection across images, tracking the residual constraint.
    std::vector<double> residual_blocks(parallel::thread_count(), 0.0);
    parallel::for_blocks(ncoeff, [&](int block, std::size_t b, std::size_t e) {
      double local = 0.0;
      for (std::size_t c = b; c < e; ++c) {
        double mean = 0.0;
        for (int i = 0; i < n; ++i) mean += candidate[i][c];
        mean /= n;
        double after = 0.0;
        for (int i = 0; i < n; ++i) {
          candidate[i][c] -= mean;
          after += candidate[i][c];
        }
        local = std::max(local, std::abs(after));
      }
      residual_blocks[block] = local;
    });
    for (double rb : residual_blocks)
      state.max_constraint_residual =
          std::max(state.max_constraint_residual, rb);

    double max_candidate = 0.0;
    for (int i = 0; i < n; ++i)
      for (double c : candidate[i])
        max_candidate = std::max(max_candidate, std::abs(c));

    if (max_candidate < bound) {
      for (int i = 0; i < n; ++i)
        state.transforms[i].grids.back().coeffs = candidate[i];
      apply_active_grids(state);
    } else {
      double max_current = 0.0;
      for (int i = 0; i < n; ++i)
        max_current = std::max(
            max_current, state.transforms[i].grids.back().max_abs_coefficient());
      if (max_current == 0.0) {
        // Freezing an all-zero stack would recreate this exact state and
        // stall the level, so shorten the very first step to fit the bound.
        double shrink = 0.975 * bound / max_candidate;
        for (int i = 0; i < n; ++i) {
          for (double& c : candidate[i]) c *= shrink;
          state.transforms[i].grids.back().coeffs = candidate[i];
        }
        apply_active_grids(state);
      } else {
        // Cancel the update, freeze the accepted displacement into the base
        // and continue on a fresh zero grid.
        for (auto& t : state.transforms) t.grids.back().frozen = true;
        push_level_grids(state, spacing);
        ++state.grids_per_level.back();
        // The basis rows moved to the new base, so the scale bound must too.
        scales = step_scales(state, rsums);
      }
    }

    record_trace(state, level_index + 1);
    ++state.global_iteration;
  }
}

RegistrationResult register_group(
    const std::vector<std::vector<Keypoint>>& sets, MatchGraph graph,
    const OptimizerConfig& cfg) {
  if (sets.empty())
    throw std::invalid_argument("register_group: no images given");
  if (static_cast<int>(sets.size()) != graph.image_count())
    throw std::invalid_argument(
        "register_group: image count mismatch between keypoint sets and "
        "match graph");

  RegistrationResult result;
  if (sets.size() == 1) {
    result.transforms.assign(1, HalfTransform{});
    MixtureParams absent;
    absent.absent = true;
    result.mixtures.assign(1, absent);
    return result;
  }
  if (graph.matches.empty())
    throw std::invalid_argument(
        "register_group: the match graph is empty; nothing constrains the "
        "group");

  BundleState state = make_bundle(sets, std::move(graph));
  init_linear(state, cfg);
  for (std::size_t level = 0; level < cfg.level_spacings.size(); ++level)
    descend_level(state, cfg.level_spacings[level], cfg,
                  static_cast<int>(level));
  for (auto& t : state.transforms)
    for (auto& grid : t.grids) grid.frozen = true;

  result.transforms = std::move(state.transforms);
  result.trace = std::move(state.trace);
  result.theta_history = std::move(state.theta_history);
  result.grids_per_level = std::move(state.grids_per_level);
  result.max_constraint_residual = state.max_constraint_residual;
  result.mixtures = std::move(state.mixtures);
  return result;
}

void save_trace(const std::string& path, const std::vector<TraceRow>& rows) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw std::runtime_error(path + ": cannot open for writing");
  std::fprintf(f, "iter,level,energy,sqrt_energy,mean_weighted_distance\n");
  for (const TraceRow& r : rows)
    std::fprintf(f, "%d,%d,%.17g,%.17g,%.17g\n", r.iteration, r.level,
                 r.energy, r.sqrt_energy, r.mean_weighted_distance);
  std::fclose(f);
}

void save_theta_history(const std::string& path,
                        const std::vector<ThetaRow>& rows) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw std::runtime_error(path + ": cannot open for writing");
  std::fprintf(f, "iter,image,s1,s2,r\n");
  for (const ThetaRow& r : rows)
    std::fprintf(f, "%d,%d,%.17g,%.17g,%.17g\n", r.iteration, r.image, r.s1,
                 r.s2, r.r);
  std::fclose(f);
}

}  // namespace groupreg
