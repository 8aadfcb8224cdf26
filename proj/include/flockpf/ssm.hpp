#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "flockpf/common.hpp"

namespace flockpf::ssm {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class ScenarioKind { X1, X2, X3, Y1, Y2, Y3 };
enum class Phi { Identity, ElementwiseAbs };

std::string to_string(ScenarioKind k);
ScenarioKind scenario_kind_from_string(const std::string& s);

/// Full state: t sub-states of dimension d_sp, row j = sub-state j.
struct StateVector {
  MatrixXd sub;  // t x d_sp

  StateVector() = default;
  StateVector(int t, int d_sp) : sub(MatrixXd::Zero(t, d_sp)) {}
  explicit StateVector(MatrixXd m) : sub(std::move(m)) {}

  int t() const { return static_cast<int>(sub.rows()); }
  int d_sp() const { return static_cast<int>(sub.cols()); }
  /// Row-major concatenation [x_1, ..., x_t].
  VectorXd flat() const;
  static StateVector from_flat(const VectorXd& v, int t, int d_sp);
  bool finite() const { return sub.allFinite(); }
};

using Measurement = VectorXd;

/// One generated trajectory: kappa measurements, the known initial state,
/// and (when kept) the true states.
struct TrajectoryRecord {
  std::string scenario_id;
  double snr_db = 0.0;
  StateVector initial_state;
  std::vector<Measurement> measurements;
  std::optional<std::vector<StateVector>> true_states;

  int kappa() const { return static_cast<int>(measurements.size()); }
};

/// Frozen synthetic-setup matrices (A, C, unit-norm noise shapes) loaded
/// from the checked-in data file.
struct XSetup {
  uint64_t frozen_seed = 0;
  MatrixXd A;             // d_sp x d_sp, spectral radius < 1
  MatrixXd C;             // d_m x d_sp
  MatrixXd sigma_v_unit;  // SPD, unit spectral norm
  MatrixXd sigma_e_unit;  // SPD, unit spectral norm
};

XSetup load_x_setup(const std::string& path = "");

/// Immutable description of one experimental setting: motion model, sensor
/// model, assumed densities, and true-noise generators. Construct through
/// the factories (which calibrate noise scales to the requested SNR) or
/// from_spec for hand-built test models; afterwards the model is freely
/// shareable across threads.
struct ScenarioModel {
  ScenarioKind kind = ScenarioKind::X1;
  int d_sp = 0, d_m = 0, t = 1;
  Phi phi = Phi::Identity;
  MatrixXd A;
  MatrixXd C;        // synthetic sensor matrix; empty for radar
  MatrixXd sigma_v;  // assumed process covariance
  MatrixXd sigma_e;  // assumed measurement covariance (synthetic)

  // True process/measurement noise for X3 is uniform; the assumed densities
  // above stay Gaussian (the modelling mismatch under test).
  bool uniform_true_noise = false;
  double uniform_halfwidth_v = 0.0, uniform_halfwidth_e = 0.0;

  bool radar = false;
  int grid_side = 13;
  double sensor_spacing = 10.0;
  double ps_width = 10.0;          // Gaussian point-spread std, metres
  double sensor_noise_std = 1.0;
  double sensor_perturb_std = 0.0; // Y2 only: true sensor position jitter
  double amplitude = 1.0;          // per-target response peak, set by SNR
  MatrixXd sensors;                // d_m x 2 nominal positions

  double init_pos_lo = 30.0, init_pos_hi = 90.0, init_vel_std = 0.3;
  double init_x_std = 1.0;  // synthetic initial state scale

  double snr_db = 0.0;
  int calib_kappa = 12;  // horizon the stated SNR is calibrated over
  uint64_t rng_seed = 0;

  std::string id() const;
  bool synthetic() const { return !radar; }

  /// Options for the factories.
  struct Options {
    int t = 1;
    int calib_kappa = 0;          // 0 = per-kind default
    double sensor_perturb_std = 0.5;
    double ps_width = 0.0;        // 0 = one sensor spacing
    std::string data_path;        // x-setup file override
  };

  static ScenarioModel make(ScenarioKind kind, double snr_db);
  static ScenarioModel make(ScenarioKind kind, double snr_db, const Options& opts);
  /// Validates invariants and precomputes factorizations on a hand-built
  /// model; required before using any density or sampling routine.
  static ScenarioModel from_spec(ScenarioModel spec);

  // Precomputed at construction.
  Eigen::LLT<MatrixXd> llt_v, llt_e;
  double log_norm_v = 0.0, log_norm_e = 0.0;  // -0.5 logdet(2 pi Sigma)
  bool zero_v = false, zero_e = false;
  MatrixXd chol_v;  // lower factor of sigma_v (sampling)
  MatrixXd chol_e;
};

/// phi applied to one sub-state vector.
VectorXd apply_phi(const ScenarioModel& model, const VectorXd& v);

/// Log density of a zero-mean Gaussian with the model's assumed process
/// covariance, evaluated at residual r (one sub-state).
double process_noise_logpdf(const ScenarioModel& model, const VectorXd& r);

/// Draws the initial sub-state for the scenario from the given stream.
VectorXd sample_initial_substate(const ScenarioModel& model, Rng& rng);

/// Evolves one sub-state kappa steps under the true noise model. Exposed so
/// the per-sub-state factorization can be checked against multi-target
/// generation.
std::vector<VectorXd> evolve_substate(const ScenarioModel& model, const VectorXd& x0, int kappa, Rng& rng);

/// Noiseless expected response of a single target at the given sensor
/// positions (radar).
VectorXd single_target_response(const ScenarioModel& model, const VectorXd& sub_state, const MatrixXd& sensor_pos);

/// Noiseless expected sensor array output at the nominal sensor positions;
/// sums the per-target point-spread responses.
Measurement radar_sensor_response(const ScenarioModel& model, const StateVector& x);

/// Noiseless synthetic measurement mean: sum over sub-states of C x_j.
Measurement synthetic_measurement_mean(const ScenarioModel& model, const StateVector& x);

Measurement measurement_mean(const ScenarioModel& model, const StateVector& x);

double motion_logpdf(const ScenarioModel& model, const StateVector& x_prev, const StateVector& x);
double measurement_logpdf(const ScenarioModel& model, const StateVector& x, const Measurement& z);

TrajectoryRecord generate_trajectory(const ScenarioModel& model, int kappa, uint64_t seed);

}  // namespace flockpf::ssm
