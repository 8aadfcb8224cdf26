#pragma once

#include <string>
#include <vector>

#include "flockpf/dataset.hpp"
#include "flockpf/lf.hpp"
#include "flockpf/loss.hpp"
#include "flockpf/pf.hpp"

namespace flockpf::train {

/// Stream tags for every random draw the trainer makes; public so runs are
/// reproducible from (seed, tags) alone.
namespace streams {
inline constexpr uint64_t kInit = 0x494E4954;
inline constexpr uint64_t kShuffle = 0x53485546;
inline constexpr uint64_t kStudent = 0x53545544;
inline constexpr uint64_t kTeacher = 0x54454143;
inline constexpr uint64_t kSubBatch = 0x53554242;
inline constexpr uint64_t kGrid = 0x47524944;
inline constexpr uint64_t kValidation = 0x56414C31;
inline constexpr uint64_t kBatchBase = 0xB000;
}  // namespace streams

/// Inclusive 1-based time-step window contributing to the loss.
struct Window {
  int from = 1;
  int to = 1 << 30;
  bool contains(int k) const { return k >= from && k <= to; }
};

enum class KeepBest { MeanWindowOspa, LastStepOspa };

struct TrainConfig {
  double learning_rate = 1e-3;
  int epochs = 10;
  int batch_size = 50;
  int sub_batch_size = 0;       // 0: batch_size / 10, at least 1
  double stray_threshold = 0.0; // zeta; 0: 5x the oracle's average sub-state std
  int student_n = 25;
  int teacher_n = 300;
  loss::LossConfig loss;
  Window window;
  KeepBest keep_best = KeepBest::MeanWindowOspa;
  bool momentum = false;
  double momentum_beta = 0.9;
  uint64_t seed = 1;
  lf::Hyperparams hyper;
  pf::FilterConfig student_filter;
  pf::FilterConfig teacher_filter;

  std::string metrics_path;     // per-epoch CSV, empty = off
  std::string loss_log_path;    // per-update CSV (epoch, time_step, batch, L_acc, L_hm, total)
  std::string checkpoint_path;  // best checkpoint, written on improvement
  std::string state_path;       // resumable training-state JSON

  int effective_sub_batch() const { return sub_batch_size > 0 ? sub_batch_size : std::max(1, batch_size / 10); }
  void validate() const;
  /// Fills the filter configs from the scenario type and particle counts.
  static TrainConfig defaults_for(const ssm::ScenarioModel& model, int student_n, int teacher_n);
};

struct EpochMetrics {
  int epoch = 0;
  double mean_update_loss = 0.0;
  double val_criterion = 0.0;
  int eliminated = 0;
  int aborted_batches = 0;
};

struct TrainResult {
  lf::Parameters params;  // best by the keep-best criterion
  std::vector<EpochMetrics> epochs;
  double best_criterion = 0.0;
  int best_epoch = -1;
  bool aborted = false;   // NaN loss; params hold the last good checkpoint
};

TrainResult train(const std::vector<ssm::TrajectoryRecord>& train_set,
                  const std::vector<ssm::TrajectoryRecord>& val_set, const ssm::ScenarioModel& scenario,
                  const TrainConfig& config, const lf::Parameters* initial = nullptr);

struct RolloutStep {
  pf::ParticleSet student;
  pf::ParticleSet teacher;
  ssm::StateVector student_estimate;
  ssm::StateVector teacher_estimate;
};

/// Parallel student (corrected) and teacher rollouts over one trajectory's
/// measurements; independent sub-streams, the teacher never sees the
/// correction module.
std::vector<RolloutStep> rollout_pair(const lf::Parameters& params, const ssm::ScenarioModel& scenario,
                                      const ssm::TrajectoryRecord& trajectory, int n, int teacher_n, Rng& rng);

/// Deactivates any trajectory whose estimate has a sub-state at distance
/// >= zeta from its desired counterpart (paired by the best assignment).
/// Returns the number eliminated; the mask only ever shrinks.
int eliminate_strayed(std::vector<char>& active, const std::vector<ssm::StateVector>& estimates,
                      const std::vector<ssm::StateVector>& desired, double zeta);

/// The differentiable tail of one student step: correction of the
/// pre-correction set, weight clamp and normalization, per-sub-state
/// corrected particles and the state estimate, all on the tape.
struct DiffStep {
  std::vector<diff::Tensor> corrected_subs;  // t x [N, d_sp]
  diff::Tensor weights;                      // [N, 1], normalized
  std::vector<diff::Tensor> estimate_subs;   // t x [1, d_sp]
  ssm::StateVector estimate;                 // plain values
};

DiffStep correct_and_normalize(diff::Tape* tape, const lf::Parameters& params, const pf::ParticleSet& breve);

/// lambda1 * OSPA + lambda2 * heatmap for one step on the tape; fills
/// `terms` with the plain values. Grid placement and the OSPA assignment
/// are frozen at the current values; gradients flow only through the
/// estimate, particles and weights.
diff::Tensor step_loss(diff::Tape* tape, const lf::Parameters& params, const pf::ParticleSet& breve,
                       const loss::OracleDensity& oracle, const loss::LossConfig& config, Rng& grid_rng,
                       loss::StepTerms* terms = nullptr);

/// Same with externally fixed grids (the loss surface finite differences
/// are taken against).
diff::Tensor step_loss_on_grids(diff::Tape* tape, const lf::Parameters& params, const pf::ParticleSet& breve,
                                const loss::OracleDensity& oracle, const std::vector<loss::Grid>& grids,
                                const loss::LossConfig& config, loss::StepTerms* terms = nullptr);

/// Mean per-trajectory OSPA of a filter run against the true states,
/// aggregated per the keep-best criterion.
double validation_criterion(const lf::Parameters* params, const ssm::ScenarioModel& scenario,
                            const std::vector<ssm::TrajectoryRecord>& records, const TrainConfig& config);

}  // namespace flockpf::train
