#pragma once

#include <Eigen/Dense>

#include "flockpf/common.hpp"
#include "flockpf/ssm.hpp"

namespace flockpf::pf {

/// A flock: N particles of t sub-states each, plus their shared weights.
/// Row i of `particles` is particle i with sub-states concatenated
/// [x_1 ... x_t]. Operations return new sets; a set is never mutated after
/// it is handed out, so sharing across threads is safe.
struct ParticleSet {
  Eigen::MatrixXd particles;  // N x (t * d_sp)
  Eigen::VectorXd weights;    // N
  int t = 1;
  int d_sp = 0;
  bool normalized = false;
  /// Per-particle proposal log density, retained by sis_propose for the
  /// weight update; empty otherwise.
  Eigen::VectorXd proposal_logq;

  int n() const { return static_cast<int>(particles.rows()); }
  int d_p() const { return t * d_sp; }

  Eigen::VectorBlock<Eigen::MatrixXd::RowXpr> sub(int i, int j) {
    return particles.row(i).segment(j * d_sp, d_sp);
  }
  Eigen::VectorXd sub_copy(int i, int j) const {
    return particles.row(i).segment(j * d_sp, d_sp).transpose();
  }

  ssm::StateVector particle_state(int i) const {
    return ssm::StateVector::from_flat(particles.row(i).transpose(), t, d_sp);
  }

  /// All particles at the given state with uniform weights (the known
  /// initial condition of a tracking run).
  static ParticleSet init_at(const ssm::StateVector& x0, int n);

  void check_shape(const ssm::ScenarioModel& model) const;
};

/// Anything that maps a particles-weights set to a corrected set; the
/// learned flock module implements this so the filter core does not depend
/// on it.
struct ParticleCorrector {
  virtual ~ParticleCorrector() = default;
  /// May receive an unnormalized set; the correction must be expressed such
  /// that normalize(apply(set)) equals normalizing the corrected normalized
  /// set.
  virtual ParticleSet apply(const ParticleSet& set) const = 0;
};

}  // namespace flockpf::pf
