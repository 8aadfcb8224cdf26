#pragma once

#include <string>
#include <vector>

#include "flockpf/kernel_bank.hpp"
#include "flockpf/particle_set.hpp"
#include "flockpf/ssm.hpp"

namespace flockpf::pf {

enum class ResamplingScheme { Systematic, Multinomial };
enum class FilterKind { Sis, AuxPartitioned };
/// Where the correction module sits inside one filter iteration.
enum class CorrectionStage { AfterWeightUpdate, BeforeAuxResample };

struct FilterConfig {
  int n_particles = 100;
  double resample_threshold = 0.0;  // N_th as a particle count; 0 disables
  ResamplingScheme scheme = ResamplingScheme::Systematic;
  FilterKind kind = FilterKind::Sis;
  CorrectionStage correction_stage = CorrectionStage::AfterWeightUpdate;

  static FilterConfig sis(int n, bool resample = true) {
    FilterConfig c;
    c.n_particles = n;
    c.resample_threshold = resample ? n / 3.0 : 0.0;
    return c;
  }
  static FilterConfig aux(int n, bool resample = false) {
    FilterConfig c = sis(n, resample);
    c.kind = FilterKind::AuxPartitioned;
    return c;
  }
};

/// State-independent pieces of the closed-form Gaussian importance density
/// for the synthetic scenarios, computed once per step.
struct SisProposal {
  bool deterministic = false;  // zero-noise degenerate case
  Eigen::MatrixXd m1;          // post_cov * blkdiag(Sigma_v^{-1})
  Eigen::VectorXd m2z;         // post_cov * Cf' Sigma_e^{-1} z
  Eigen::MatrixXd chol;        // lower factor of post_cov
  Eigen::LLT<Eigen::MatrixXd> llt;
  double log_norm = 0.0;

  /// Proposal mean for one particle given its previous flat state.
  Eigen::VectorXd mean(const ssm::ScenarioModel& model, const Eigen::VectorXd& prev_flat) const;
};

SisProposal make_sis_proposal(const ssm::ScenarioModel& model, const ssm::Measurement& z);

/// Draws every particle from the closed-form Gaussian importance density;
/// the per-particle proposal log density is retained on the returned set.
ParticleSet sis_propose(const ssm::ScenarioModel& model, const ParticleSet& prev, const ssm::Measurement& z,
                        Rng& rng);

/// Generic importance-weight update: w_i ∝ w_prev,i · p(z|x_i) p(x_i|x_prev,i) / q(x_i).
/// Log-space with max subtraction; returns an unnormalized set.
ParticleSet weight_update(const ssm::ScenarioModel& model, const ParticleSet& proposed, const ParticleSet& prev,
                          const ssm::Measurement& z);

/// Weights floored at 1e-12 (an additive correction may produce zeros or
/// negatives) and divided by their sum. Throws if no weight is positive.
ParticleSet normalize(const ParticleSet& set);

inline constexpr double kWeightFloor = 1e-12;

/// 1 / Σ w_i² for a normalized set; always in [1, N].
double effective_sample_size(const ParticleSet& set);

std::vector<int> resample_indices(const Eigen::VectorXd& weights, ResamplingScheme scheme, Rng& rng);
ParticleSet resample(const ParticleSet& set, ResamplingScheme scheme, Rng& rng);

ssm::StateVector estimate_state(const ParticleSet& set);

/// Kernel density values per sub-state: for each query row u of queries[j],
/// Σ_i w_i K_{j,i}(u − x_{j,i}).
std::vector<Eigen::VectorXd> reconstruct_pdf(const ParticleSet& set, const KernelBank& kernels,
                                             const std::vector<Eigen::MatrixXd>& queries);
/// Joint density at one full-state query: product of the per-sub-state values.
double reconstruct_pdf_joint(const ParticleSet& set, const KernelBank& kernels, const ssm::StateVector& query);

/// One filter iteration: propose, reweight, optional correction, normalize,
/// and resample when the effective sample size drops below the threshold.
/// Dispatches on config.kind. When pre_correction is given it receives the
/// unnormalized set right before the correction would apply (training
/// replays the correction on a tape from exactly this set).
ParticleSet pf_step(const ssm::ScenarioModel& model, const FilterConfig& config, const ParticleSet& prev,
                    const ssm::Measurement& z, Rng& rng, const ParticleCorrector* corrector = nullptr,
                    ParticleSet* pre_correction = nullptr);

/// Partitioned auxiliary iteration for radar scenarios: per sub-state,
/// first-stage auxiliary weights at the motion-mean prediction against the
/// other-targets residual measurement, full-set resampling, propagation,
/// and a second-stage weight correction.
ParticleSet aux_partitioned_step(const ssm::ScenarioModel& model, const FilterConfig& config,
                                 const ParticleSet& prev, const ssm::Measurement& z, Rng& rng,
                                 const ParticleCorrector* corrector = nullptr,
                                 ParticleSet* pre_correction = nullptr);

/// Debug snapshot ("pset-v1" JSON line format).
void save_particle_set(const ParticleSet& set, const std::string& path);
ParticleSet load_particle_set(const std::string& path);

}  // namespace flockpf::pf
