#pragma once

// 0-dimensional Vietoris-Rips persistence of a finite point cloud.
//
// Every vertex is born at scale 0; a component dies when an edge of the
// filtration first joins it to an older one. Those merge edges are exactly
// the edges Kruskal's algorithm keeps, so the pairing is the minimum
// spanning tree of the complete distance graph.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "topomil/errors.hpp"
#include "topomil/matrix.hpp"

namespace topomil {

/// Symmetric, zero-diagonal, finite, nonnegative n x n matrix.
class DistanceMatrix {
 public:
  DistanceMatrix() = default;

  /// Validates `entries` against the invariants above.
  explicit DistanceMatrix(Matrix entries) : entries_(std::move(entries)) {
    const std::size_t n = entries_.rows();
    if (entries_.cols() != n) {
      throw DimensionError("DistanceMatrix: not square " + entries_.shape().str());
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (entries_(i, i) != 0.0) throw DomainError("DistanceMatrix: nonzero diagonal");
      for (std::size_t j = i + 1; j < n; ++j) {
        const double v = entries_(i, j);
        if (!std::isfinite(v) || v < 0.0) throw DomainError("DistanceMatrix: invalid entry");
        if (entries_(j, i) != v) throw DomainError("DistanceMatrix: not symmetric");
      }
    }
  }

  std::size_t size() const { return entries_.rows(); }
  double operator()(std::size_t i, std::size_t j) const { return entries_(i, j); }
  const Matrix& entries() const { return entries_; }

 private:
  Matrix entries_;
};

/// Edges (i < j) whose insertion merges two components, in filtration order.
struct PersistencePairing {
  std::vector<IndexPair> edges;
  std::vector<double> deaths;
};

struct DiagramPoint {
  double birth = 0.0;
  double death = 0.0;
  bool operator==(const DiagramPoint&) const = default;
};

struct PersistenceDiagram0D {
  std::vector<DiagramPoint> points;
};

/// Euclidean distances between rows. The upper triangle is computed and
/// mirrored so the result is exactly symmetric.
inline DistanceMatrix euclidean_distance_matrix(const Matrix& instances) {
  const std::size_t n = instances.rows(), d = instances.cols();
  if (n == 0 || d == 0) {
    throw DimensionError("euclidean_distance_matrix: need n >= 1 and d >= 1, got " +
                         instances.shape().str());
  }
  for (double v : instances.values()) {
    if (!std::isfinite(v)) throw DomainError("euclidean_distance_matrix: non-finite input");
  }
  Matrix out(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = instances(i, k) - instances(j, k);
        acc += diff * diff;
      }
      out(i, j) = out(j, i) = std::sqrt(acc);
    }
  return DistanceMatrix(std::move(out));
}

/// Disjoint-set forest with path compression and union by rank.
class UnionFind {
 public:
  explicit UnionFind(std::size_t n) : parent_(n), rank_(n, 0) {
    std::iota(parent_.begin(), parent_.end(), std::size_t{0});
  }

  std::size_t find(std::size_t x) {
    std::size_t root = x;
    while (parent_[root] != root) root = parent_[root];
    while (parent_[x] != root) {
      const std::size_t next = parent_[x];
      parent_[x] = root;
      x = next;
    }
    return root;
  }

  /// False if already joined.
  bool unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    if (rank_[a] < rank_[b]) std::swap(a, b);
    parent_[b] = a;
    if (rank_[a] == rank_[b]) ++rank_[a];
    return true;
  }

 private:
  std::vector<std::size_t> parent_;
  std::vector<unsigned char> rank_;
};

/// Kruskal over all n(n-1)/2 edges; equal weights are ordered by (i, j).
inline PersistencePairing vr_persistence_0d(const DistanceMatrix& dist) {
  const std::size_t n = dist.size();
  PersistencePairing out;
  if (n < 2) return out;

  struct Edge {
    double w;
    std::size_t i, j;
  };
  std::vector<Edge> edges;
  edges.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) edges.push_back({dist(i, j), i, j});
  std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
    if (a.w != b.w) return a.w < b.w;
    if (a.i != b.i) return a.i < b.i;
    return a.j < b.j;
  });

  UnionFind uf(n);
  out.edges.reserve(n - 1);
  out.deaths.reserve(n - 1);
  for (const Edge& e : edges) {
    if (!uf.unite(e.i, e.j)) continue;
    out.edges.push_back({e.i, e.j});
    out.deaths.push_back(e.w);
    if (out.edges.size() == n - 1) break;
  }
  return out;
}

inline PersistenceDiagram0D diagram_from_pairing(const DistanceMatrix& dist,
                                                 const PersistencePairing& pairing) {
  PersistenceDiagram0D out;
  out.points.reserve(pairing.edges.size());
  for (const auto& [i, j] : pairing.edges) {
    if (i >= dist.size() || j >= dist.size()) {
      throw DimensionError("diagram_from_pairing: edge outside a " + std::to_string(dist.size()) +
                           "-point matrix");
    }
    out.points.push_back({0.0, dist(i, j)});
  }
  return out;
}

/// CSV with header `edge_i,edge_j,birth,death`, one row per pairing edge.
inline void write_diagram_csv(std::ostream& os, const PersistencePairing& pairing,
                              const PersistenceDiagram0D& diagram) {
  os << "edge_i,edge_j,birth,death\n";
  const auto old = os.precision(17);
  for (std::size_t k = 0; k < pairing.edges.size(); ++k) {
    os << pairing.edges[k].i << ',' << pairing.edges[k].j << ',' << diagram.points[k].birth << ','
       << diagram.points[k].death << '\n';
  }
  os.precision(old);
}

}  // namespace topomil
