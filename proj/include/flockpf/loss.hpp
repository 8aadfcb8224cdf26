#pragma once

#include <limits>
#include <optional>
#include <vector>

#include "flockpf/diff.hpp"
#include "flockpf/hungarian.hpp"
#include "flockpf/kernel_bank.hpp"
#include "flockpf/particle_set.hpp"

namespace flockpf::loss {

enum class OracleMode { O1, O2 };

struct GridSpec {
  enum class Kind { StagedMeshgrid, Random };
  Kind kind = Kind::Random;
  // Staged meshgrid: L co-centered stages, G points per axis, extents
  // growing by resolution_ratio. Stage weights are proportional to the
  // stage's cell volume. Grids are placed around both the desired and the
  // estimated sub-state.
  int stages = 5;
  int points_per_axis = 7;
  double resolution_ratio = 2.0;
  double base_extent_sigmas = 2.0;  // finest stage full width, oracle-std units
  // Random grid: Gaussian samples around both anchors, std scaled from the
  // oracle std.
  int n_samples = 256;
  double sample_std_factor = 2.0;
};

struct LossConfig {
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double lambda3 = 1.0;
  double ospa_order = 2.0;
  double ospa_cutoff = std::numeric_limits<double>::infinity();
  GridSpec grid;
  OracleMode oracle_mode = OracleMode::O1;
  int teacher_n = 300;
  double teacher_kernel_sigma = 0.0;  // 0: Silverman-style per-sub-state bandwidth

  void validate() const;
};

struct OspaResult {
  double value = 0.0;
  std::vector<int> assignment;  // a's sub-state j pairs with b's assignment[j]
};

/// Optimal sub-pattern assignment distance between two equal-cardinality
/// sub-state sets: minimum over assignments of the order-p mean of per-pair
/// distances, each clipped at the cutoff.
OspaResult ospa_full(const ssm::StateVector& a, const ssm::StateVector& b, double order = 2.0,
                     double cutoff = std::numeric_limits<double>::infinity());
double ospa(const ssm::StateVector& a, const ssm::StateVector& b,
            double cutoff = std::numeric_limits<double>::infinity());

/// The training target density: per-sub-state Gaussian-bump mixtures plus
/// the per-dimension variance targets and the desired state.
struct OracleDensity {
  int t = 0, d_sp = 0;
  std::vector<Eigen::MatrixXd> means;  // per sub-state: C x d_sp
  std::vector<Eigen::VectorXd> amps;   // per sub-state: C
  std::vector<Eigen::VectorXd> stds;   // per sub-state: C
  Eigen::MatrixXd variance_target;     // t x d_sp
  ssm::StateVector desired;

  double eval(int j, const Eigen::Ref<const Eigen::VectorXd>& point) const;
  /// Isotropic scale of sub-state j: sqrt of the mean variance target.
  double avg_std(int j) const;
};

/// O1: teacher kernel density (knowledge distillation), desired state =
/// teacher estimate. O2: isotropic Gaussians at the true sub-states with
/// variance averaged from the teacher's, desired state = truth. The
/// variance targets come from the teacher flow in both modes.
OracleDensity build_oracle(OracleMode mode, const pf::ParticleSet& teacher,
                           const std::optional<ssm::StateVector>& true_state, const LossConfig& config);

/// Kernel std for a given peak so that peak * (2 pi sigma^2)^(d/2) = 1/N.
double kernel_sigma(double peak, int n_particles, int d_sp);

inline constexpr double kPeakFloor = 1e-12;

/// Peak = oracle density at each sub-particle (floored), std from the
/// equal-volume constraint.
KernelBank build_adapting_kernels(const pf::ParticleSet& set, const OracleDensity& oracle);

/// Evaluation grid for one sub-state.
struct Grid {
  Eigen::MatrixXd points;   // M x d_sp
  Eigen::VectorXd weights;  // M
};

std::vector<Grid> build_grids(const GridSpec& spec, const OracleDensity& oracle, const ssm::StateVector& estimate,
                              Rng& rng);

/// Differentiable heatmap term for tape tensors: per-sub-state weighted
/// squared density differences over the grids plus lambda3 times the l2
/// distance between the oracle and reconstructed per-dimension variances.
diff::Tensor heatmap_loss_t(diff::Tape* tape, const std::vector<diff::Tensor>& sub_particles,
                            const diff::Tensor& weights, const OracleDensity& oracle,
                            const std::vector<Grid>& grids, double lambda3);

/// Plain value on a normalized particle set (grids built around the
/// oracle's desired state and the set's estimate).
double heatmap_loss(const pf::ParticleSet& set, const OracleDensity& oracle, const GridSpec& grid, double lambda3,
                    Rng& grid_rng);

/// Differentiable order-2 OSPA with a fixed assignment (infinite cutoff).
diff::Tensor ospa_loss_t(diff::Tape* tape, const std::vector<diff::Tensor>& estimate_sub,
                         const ssm::StateVector& desired, const std::vector<int>& assignment);

struct StepTerms {
  double acc = 0.0;
  double hm = 0.0;
};

/// (1/window)(lambda1 sum acc + lambda2 sum hm) for one trajectory window.
double total_loss(const std::vector<StepTerms>& window, const LossConfig& config);
/// Mean of per-trajectory totals.
double total_loss_batch(const std::vector<std::vector<StepTerms>>& batch, const LossConfig& config);

}  // namespace flockpf::loss
