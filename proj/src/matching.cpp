#include "groupreg/matching.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <memory>
#include <sstream>

#include "groupreg/parallel.hpp"

namespace groupreg {

namespace {

double descriptor_distance(const std::vector<float>& a,
                           const std::vector<float>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return std::sqrt(acc);
}

// Best and second-best accepted candidates, ties broken by smaller index so
// results do not depend on visit order.
struct Best2 {
  double d1 = std::numeric_limits<double>::infinity();
  double d2 = std::numeric_limits<double>::infinity();
  int i1 = -1, i2 = -1;

  void offer(double d, int idx) {
    if (d < d1 || (d == d1 && idx < i1)) {
      d2 = d1;
      i2 = i1;
      d1 = d;
      i1 = idx;
    } else if (d < d2 || (d == d2 && idx < i2)) {
      d2 = d;
      i2 = idx;
    }
  }
};

// Exact vantage-point tree over descriptors. Pruning uses only the metric,
// so predicate-filtered searches stay exact: the search radius shrinks only
// when accepted (predicate-passing) candidates are found.
class VpTree {
 public:
  static constexpr std::size_t kLeafSize = 16;

  VpTree(std::span<const Keypoint> points, std::vector<int> items)
      : points_(points), items_(std::move(items)) {
    if (!items_.empty()) root_ = build(0, items_.size());
  }

  bool empty() const { return items_.empty(); }

  template <typename Filter>
  void search(const std::vector<float>& query, const Filter& filter,
              Best2& best) const {
    if (!items_.empty()) search_node(root_, query, filter, best);
  }

 private:
  struct Node {
    int vantage = -1;
    double radius = 0.0;
    int inside = -1, outside = -1;
    std::uint32_t begin = 0, end = 0;  // leaf range when vantage < 0
  };

  int build(std::size_t begin, std::size_t end) {
    Node node;
    if (end - begin <= kLeafSize) {
      node.begin = static_cast<std::uint32_t>(begin);
      node.end = static_cast<std::uint32_t>(end);
      nodes_.push_back(node);
      return static_cast<int>(nodes_.size() - 1);
    }
    node.vantage = items_[begin];
    const auto& vdesc = points_[node.vantage].descriptor;
    std::size_t mid = begin + 1 + (end - begin - 1) / 2;
    std::nth_element(items_.begin() + begin + 1, items_.begin() + mid,
                     items_.begin() + end, [&](int a, int b) {
                       double da = descriptor_distance(points_[a].descriptor,
                                                       vdesc);
                       double db = descriptor_distance(points_[b].descriptor,
                                                       vdesc);
                       return da < db || (da == db && a < b);
                     });
    node.radius = descriptor_distance(points_[items_[mid]].descriptor, vdesc);
    int self = static_cast<int>(nodes_.size());
    nodes_.push_back(node);
    int inside = build(begin + 1, mid);
    int outside = build(mid, end);
    nodes_[self].inside = inside;
    nodes_[self].outside = outside;
    return self;
  }

  template <typename Filter>
  void search_node(int idx, const std::vector<float>& query,
                   const Filter& filter, Best2& best) const {
    const Node& node = nodes_[idx];
    if (node.vantage < 0) {
      for (std::uint32_t i = node.begin; i < node.end; ++i) {
        int item = items_[i];
        if (!filter(item)) continue;
        best.offer(descriptor_distance(query, points_[item].descriptor), item);
      }
      return;
    }
    double d = descriptor_distance(query, points_[node.vantage].descriptor);
    if (filter(node.vantage)) best.offer(d, node.vantage);
    if (d < node.radius) {
      search_node(node.inside, query, filter, best);
      if (d + best.d2 >= node.radius)
        search_node(node.outside, query, filter, best);
    } else {
      search_node(node.outside, query, filter, best);
      if (d - best.d2 <= node.radius)
        search_node(node.inside, query, filter, best);
    }
  }

  std::span<const Keypoint> points_;
  std::vector<int> items_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

constexpr std::size_t kBruteForceLimit = 2000;

struct DirectedMatch {
  std::int32_t a, b;
  double distance;
};

// One matching direction: every query searched against the target set,
// keeping the best target iff it passes the distance and ratio tests.
// A candidate pair survives when d1 <= max distance and d1 <= ratio * d2
// (a missing second neighbor passes the ratio test vacuously).
void match_directed(std::span<const Keypoint> queries,
                    std::span<const Keypoint> targets, bool queries_are_a,
                    const MatchCriteria& criteria,
                    std::vector<std::vector<DirectedMatch>>& out_blocks) {
  // Pre-split targets by Laplacian sign when the filter is on, so the index
  // only ever sees admissible candidates of that class.
  std::vector<int> plus, minus, all;
  for (int i = 0; i < static_cast<int>(targets.size()); ++i) {
    if (criteria.require_same_sign) {
      (targets[i].laplacian_sign >= 0 ? plus : minus).push_back(i);
    } else {
      all.push_back(i);
    }
  }
  bool brute = targets.size() < kBruteForceLimit;
  std::unique_ptr<VpTree> tree_plus, tree_minus, tree_all;
  if (!brute) {
    if (criteria.require_same_sign) {
      tree_plus = std::make_unique<VpTree>(targets, plus);
      tree_minus = std::make_unique<VpTree>(targets, minus);
    } else {
      tree_all = std::make_unique<VpTree>(targets, all);
    }
  }

  out_blocks.assign(parallel::thread_count(), {});
  parallel::for_blocks(queries.size(), [&](int block, std::size_t lo,
                                           std::size_t hi) {
    auto& out = out_blocks[block];
    for (std::size_t q = lo; q < hi; ++q) {
      const Keypoint& query = queries[q];
      double log_scale_q = std::log(query.scale);
      auto filter = [&](int t) {
        const Keypoint& target = targets[t];
        if (std::abs(std::log(target.scale) - log_scale_q) >
            criteria.max_scale_log_ratio)
          return false;
        return true;
      };
      Best2 best;
      if (brute) {
        const std::vector<int>* candidates = &all;
        if (criteria.require_same_sign)
          candidates = query.laplacian_sign >= 0 ? &plus : &minus;
        for (int t : *candidates) {
          if (!filter(t)) continue;
          best.offer(descriptor_distance(query.descriptor,
                                         targets[t].descriptor),
                     t);
        }
      } else {
        const VpTree* tree = tree_all.get();
        if (criteria.require_same_sign)
          tree = query.laplacian_sign >= 0 ? tree_plus.get()
                                           : tree_minus.get();
        tree->search(query.descriptor, filter, best);
      }
      if (best.i1 < 0) continue;
      if (best.d1 > criteria.max_descriptor_distance) continue;
      if (best.i2 >= 0 && best.d1 > criteria.nn_ratio * best.d2) continue;
      if (queries_are_a)
        out.push_back({static_cast<std::int32_t>(q), best.i1, best.d1});
      else
        out.push_back({best.i1, static_cast<std::int32_t>(q), best.d1});
    }
  });
}

}  // namespace

std::vector<Match> match_pair(std::span<const Keypoint> a,
                              std::span<const Keypoint> b, int image_a,
                              int image_b, const MatchCriteria& criteria) {
  if (image_a == image_b)
    throw std::invalid_argument("match_pair: an image cannot match itself");
  if (image_a > image_b) return match_pair(b, a, image_b, image_a, criteria);
  if (!a.empty() && !b.empty() &&
      a[0].descriptor.size() != b[0].descriptor.size())
    throw std::invalid_argument("match_pair: descriptor length mismatch");

  std::vector<std::vector<DirectedMatch>> blocks;
  std::vector<DirectedMatch> candidates;
  match_directed(a, b, true, criteria, blocks);
  for (auto& block : blocks)
    candidates.insert(candidates.end(), block.begin(), block.end());
  match_directed(b, a, false, criteria, blocks);
  for (auto& block : blocks)
    candidates.insert(candidates.end(), block.begin(), block.end());

  std::sort(candidates.begin(), candidates.end(),
            [](const DirectedMatch& x, const DirectedMatch& y) {
              return x.a < y.a || (x.a == y.a && x.b < y.b);
            });
  std::vector<Match> matches;
  matches.reserve(candidates.size());
  for (const auto& c : candidates) {
    if (!matches.empty() && matches.back().index_a == c.a &&
        matches.back().index_b == c.b)
      continue;  // same pair found from both directions
    matches.push_back({image_a, c.a, image_b, c.b, c.distance, 1.0});
  }
  return matches;
}

MatchGraph MatchGraph::build(std::vector<Match> matches,
                             std::vector<std::uint32_t> image_point_counts) {
  MatchGraph g;
  g.image_point_counts = std::move(image_point_counts);
  g.point_offsets.resize(g.image_point_counts.size() + 1, 0);
  for (std::size_t i = 0; i < g.image_point_counts.size(); ++i)
    g.point_offsets[i + 1] = g.point_offsets[i] + g.image_point_counts[i];

  const int n_images = g.image_count();
  for (auto& m : matches) {
    if (m.image_a > m.image_b) {
      std::swap(m.image_a, m.image_b);
      std::swap(m.index_a, m.index_b);
    }
    if (m.image_a < 0 || m.image_b >= n_images || m.image_a == m.image_b)
      throw std::invalid_argument("match graph: bad image id in match");
    if (m.index_a < 0 ||
        static_cast<std::uint32_t>(m.index_a) >=
            g.image_point_counts[m.image_a] ||
        m.index_b < 0 ||
        static_cast<std::uint32_t>(m.index_b) >=
            g.image_point_counts[m.image_b])
      throw std::invalid_argument("match graph: keypoint index out of range");
  }
  std::sort(matches.begin(), matches.end(),
            [](const Match& x, const Match& y) {
              if (x.image_a != y.image_a) return x.image_a < y.image_a;
              if (x.index_a != y.index_a) return x.index_a < y.index_a;
              if (x.image_b != y.image_b) return x.image_b < y.image_b;
              return x.index_b < y.index_b;
            });
  g.matches.reserve(matches.size());
  for (auto& m : matches) {
    if (!g.matches.empty()) {
      const Match& prev = g.matches.back();
      if (prev.image_a == m.image_a && prev.index_a == m.index_a &&
          prev.image_b == m.image_b && prev.index_b == m.index_b)
        continue;  // keep the match set free of duplicate pairs
    }
    g.matches.push_back(m);
  }

  const std::size_t n_points = g.total_points();
  const std::size_t n_matches = g.matches.size();
  g.adj_offsets.assign(n_points + 1, 0);
  for (const Match& m : g.matches) {
    ++g.adj_offsets[g.global_index(m.image_a, m.index_a) + 1];
    ++g.adj_offsets[g.global_index(m.image_b, m.index_b) + 1];
  }
  for (std::size_t p = 0; p < n_points; ++p)
    g.adj_offsets[p + 1] += g.adj_offsets[p];
  g.adj_matches.resize(2 * n_matches);
  std::vector<std::uint32_t> cursor(g.adj_offsets.begin(),
                                    g.adj_offsets.end() - 1);
  for (std::size_t m = 0; m < n_matches; ++m) {
    const Match& match = g.matches[m];
    g.adj_matches[cursor[g.global_index(match.image_a, match.index_a)]++] =
        static_cast<std::uint32_t>(m);
    g.adj_matches[cursor[g.global_index(match.image_b, match.index_b)]++] =
        static_cast<std::uint32_t>(m);
  }
  g.image_matches.assign(n_images, {});
  for (std::size_t m = 0; m < n_matches; ++m) {
    g.image_matches[g.matches[m].image_a].push_back(
        static_cast<std::uint32_t>(m));
    g.image_matches[g.matches[m].image_b].push_back(
        static_cast<std::uint32_t>(m));
  }
  return g;
}

MatchGraph build_graph(const std::vector<std::vector<Keypoint>>& sets,
                       const MatchCriteria& criteria) {
  const int n = static_cast<int>(sets.size());
  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) pairs.emplace_back(i, j);

  // match_pair parallelizes internally; iterating pairs sequentially keeps
  // memory bounded and the merge order fixed.
  std::vector<Match> all;
  for (const auto& [i, j] : pairs) {
    std::vector<Match> m =
        match_pair(sets[i], sets[j], i, j, criteria);
    all.insert(all.end(), m.begin(), m.end());
  }
  std::vector<std::uint32_t> counts(n);
  for (int i = 0; i < n; ++i)
    counts[i] = static_cast<std::uint32_t>(sets[i].size());
  return MatchGraph::build(std::move(all), std::move(counts));
}

void incidence_apply(const MatchGraph& g, std::span<const Vec3> points,
                     std::span<Vec3> rows) {
  if (points.size() != g.total_points() || rows.size() != g.matches.size())
    throw std::invalid_argument("incidence_apply: size mismatch");
  parallel::for_each_index(g.matches.size(), [&](std::size_t m) {
    const Match& match = g.matches[m];
    rows[m] = points[g.global_index(match.image_a, match.index_a)] -
              points[g.global_index(match.image_b, match.index_b)];
  });
}

void incidence_transpose_apply(const MatchGraph& g, std::span<const Vec3> rows,
                               std::span<Vec3> out) {
  if (rows.size() != g.matches.size() || out.size() != g.total_points())
    throw std::invalid_argument("incidence_transpose_apply: size mismatch");
  // Gather through the adjacency so each output point is written by exactly
  // one task, independent of the thread count.
  parallel::for_each_index(g.total_points(), [&](std::size_t p) {
    Vec3 acc = out[p];
    for (std::uint32_t e = g.adj_offsets[p]; e < g.adj_offsets[p + 1]; ++e) {
      std::uint32_t m = g.adj_matches[e];
      const Match& match = g.matches[m];
      if (g.global_index(match.image_a, match.index_a) == p)
        acc += rows[m];
      else
        acc -= rows[m];
    }
    out[p] = acc;
  });
}

void save_matches(const std::string& path, const MatchGraph& g) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out << "images " << g.image_count() << "\n";
  out << "counts";
  for (std::uint32_t c : g.image_point_counts) out << " " << c;
  out << "\n";
  char line[160];
  for (const Match& m : g.matches) {
    std::snprintf(line, sizeof(line), "%d %d %d %d %.17g\n", m.image_a,
                  m.index_a, m.image_b, m.index_b, m.descriptor_distance);
    out << line;
  }
  if (!out) throw std::runtime_error(path + ": write failed");
}

MatchGraph load_matches(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open file");
  std::string keyword;
  int n_images = 0;
  if (!(in >> keyword >> n_images) || keyword != "images" || n_images < 0)
    throw std::runtime_error(path + ": expected 'images <n>' header");
  if (!(in >> keyword) || keyword != "counts")
    throw std::runtime_error(path + ": expected 'counts' header");
  std::vector<std::uint32_t> counts(n_images);
  for (int i = 0; i < n_images; ++i) {
    if (!(in >> counts[i]))
      throw std::runtime_error(path + ": truncated counts header");
  }
  std::vector<Match> matches;
  Match m;
  while (in >> m.image_a >> m.index_a >> m.image_b >> m.index_b >>
         m.descriptor_distance) {
    m.weight = 1.0;
    matches.push_back(m);
  }
  if (!in.eof() && in.fail()) {
    in.clear();
    std::string rest;
    std::getline(in, rest);
    throw std::runtime_error(path + ": malformed match line near '" + rest +
                             "'");
  }
  return MatchGraph::build(std::move(matches), std::move(counts));
}

}  // namespace groupreg
