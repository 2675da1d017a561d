#pragma once

// Topological regularization between an input point cloud X (constant) and
// its latent image Z (differentiable).
//
//   L_topo = 1/2 |A_X[pi_X] - A_Z[pi_X]|^2 + 1/2 |A_Z[pi_Z] - A_X[pi_Z]|^2
//
// A_* are Euclidean distance matrices and pi_* the 0-dim persistence pairings
// of each space. Pairings are recomputed on every call but enter backward as
// constants, so the gradient reaches Z only through the selected distances.

#include <cstddef>
#include <span>
#include <vector>

#include "topomil/autodiff.hpp"
#include "topomil/errors.hpp"
#include "topomil/matrix.hpp"
#include "topomil/persistence.hpp"

namespace topomil {

struct TopoLossBreakdown {
  double forward_term = 0.0;  // input pairing selects the distances
  double reverse_term = 0.0;  // latent pairing selects the distances
  double total = 0.0;
};

/// Input-space distances and pairing; depends only on the bag, so callers may
/// compute it once and reuse it across epochs.
struct InputTopology {
  DistanceMatrix distances;
  PersistencePairing pairing;
};

inline InputTopology input_topology(const Matrix& instances) {
  InputTopology t{euclidean_distance_matrix(instances), {}};
  t.pairing = vr_persistence_0d(t.distances);
  return t;
}

struct TopoLoss {
  ad::Var loss;
  TopoLossBreakdown breakdown;
  PersistencePairing latent_pairing;
};

/// Added under the square root of latent distances in the derivative only.
inline constexpr double kLatentDistanceEps = 1e-12;

namespace detail {

inline ad::Var matched_distance_term(const ad::Var& latent_sq, const DistanceMatrix& input,
                                     std::span<const IndexPair> pairs) {
  ad::Tape& tape = latent_sq.tape();
  if (pairs.empty()) return tape.constant(Matrix::scalar(0.0));
  Matrix reference(1, pairs.size());
  for (std::size_t k = 0; k < pairs.size(); ++k) reference[k] = input(pairs[k].i, pairs[k].j);
  ad::Var latent = ad::sqrt_floored_grad(ad::gather_entries(latent_sq, pairs), kLatentDistanceEps);
  ad::Var diff = ad::sub(tape.constant(std::move(reference)), latent);
  return ad::scale(ad::sum(ad::square(diff)), 0.5);
}

}  // namespace detail

inline TopoLoss topo_loss(const InputTopology& input, const ad::Var& latents) {
  const std::size_t n = input.distances.size();
  if (latents.shape().rows != n) {
    throw DimensionError("topo_loss: " + std::to_string(n) + " input instances but " +
                         std::to_string(latents.shape().rows) + " latent rows");
  }
  ad::Tape& tape = latents.tape();
  TopoLoss out;
  if (n < 2) {
    out.loss = tape.constant(Matrix::scalar(0.0));
    return out;
  }
  out.latent_pairing = vr_persistence_0d(euclidean_distance_matrix(latents.value()));

  ad::Var latent_sq = ad::pairwise_sq_dist(latents);
  ad::Var fwd = detail::matched_distance_term(latent_sq, input.distances, input.pairing.edges);
  ad::Var rev = detail::matched_distance_term(latent_sq, input.distances, out.latent_pairing.edges);
  out.loss = ad::add(fwd, rev);
  out.breakdown.forward_term = fwd.item();
  out.breakdown.reverse_term = rev.item();
  out.breakdown.total = out.loss.item();
  return out;
}

inline TopoLoss topo_loss(const Matrix& inputs, const ad::Var& latents) {
  if (inputs.rows() != latents.shape().rows) {
    throw DimensionError("topo_loss: " + std::to_string(inputs.rows()) + " input instances but " +
                         std::to_string(latents.shape().rows) + " latent rows");
  }
  return topo_loss(input_topology(inputs), latents);
}

}  // namespace topomil
