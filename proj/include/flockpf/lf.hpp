#pragma once

#include <string>
#include <vector>

#include "flockpf/diff.hpp"
#include "flockpf/particle_set.hpp"

namespace flockpf::lf {

struct Hyperparams {
  int P = 32;  // embedding width
  int J = 1;   // parallel flock-update blocks
  int S = 1;   // attention blocks per flock-update block
  int E = 1;   // sub-embedding networks (1, or 2 to add the secondary)
  int B = 1;   // FC width multiplier

  void validate() const;
  int bp() const { return B * P; }
};

/// Affine layers with a leaky-ReLU between consecutive layers (none after
/// the last).
struct AffineStack {
  std::vector<diff::Tensor> w;
  std::vector<diff::Tensor> b;
  /// min_abs_preact, when given, tracks the smallest |x| entering an
  /// activation (gradient checks exclude kink-adjacent fixtures).
  diff::Tensor forward(diff::Tape* tape, const diff::Tensor& x, double* min_abs_preact = nullptr) const;
};

struct AttentionBlock {
  diff::Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  AffineStack fc;  // P -> BP -> BP -> P
};

struct FlockBlock {
  AffineStack emb1;  // d_sp+1 -> BP -> BP -> BP -> BP -> P
  AffineStack emb2;  // secondary embedding, present iff E == 2
  std::vector<AttentionBlock> sa;
  AffineStack head;  // P -> BP -> d_sp+1, last layer zero-initialized
};

/// All trainable tensors. The same object serves any particle count N >= 1
/// and any sub-state count t >= 1; only d_sp is baked in.
struct Parameters {
  Hyperparams hyper;
  int d_sp = 0;
  std::vector<FlockBlock> blocks;
  AffineStack baseline_head;  // per-sub-state shift head, present iff J > 1

  /// Hidden layers fan-in uniform, output heads zero (the module starts as
  /// the identity correction).
  static Parameters init(const Hyperparams& hyper, int d_sp, Rng& rng);

  long parameter_count() const;
  /// Closed-form count from (P, J, S, E, B, d_sp); asserted against the
  /// actual tensors at construction.
  static long expected_parameter_count(const Hyperparams& hyper, int d_sp);

  /// Flattened (name, tensor) view in a stable order.
  std::vector<std::pair<std::string, diff::Tensor>> named_tensors() const;
  std::vector<diff::Tensor> tensors() const;

  /// Deep copy (tensors share storage otherwise).
  Parameters clone() const;
};

struct ForwardResult {
  /// N x (t*d_sp + 1): per-particle sub-state corrections concatenated,
  /// last column the per-particle weight correction.
  diff::Tensor correction;
  /// Per-sub-state baseline shift (t x (d_sp+1)) broadcast into every row
  /// of `correction`; zero when J == 1.
  std::vector<double> baseline;
};

/// The correction term for a whole particles-weights set. Weight features
/// are fed as N * w_i (with w taken from the normalized view of the set)
/// and the returned weight correction is in normalized-weight units.
ForwardResult lf_forward_parts(diff::Tape* tape, const Parameters& params, const pf::ParticleSet& set,
                               double* min_abs_preact = nullptr);
diff::Tensor lf_forward(diff::Tape* tape, const Parameters& params, const pf::ParticleSet& set);

/// Smallest |preactivation| seen anywhere in a forward pass on this set.
double activation_margin(const Parameters& params, const pf::ParticleSet& set);

/// set + correction, without recording gradients. Returns an unnormalized
/// set; the caller normalizes next. For an unnormalized input the weight
/// correction is scaled by the weight sum so that the subsequent
/// normalization yields the same set as correcting the normalized view.
pf::ParticleSet lf_apply(const Parameters& params, const pf::ParticleSet& set);

/// Per-sub-state input features [x_{j,i}, N*w_i] as constants; row i of
/// element j is sub-particle (j, i). Shared by inference and training.
std::vector<diff::Tensor> substate_inputs(const pf::ParticleSet& set);

class Module : public pf::ParticleCorrector {
 public:
  explicit Module(Parameters params) : params_(std::move(params)) {}
  pf::ParticleSet apply(const pf::ParticleSet& set) const override { return lf_apply(params_, set); }
  const Parameters& params() const { return params_; }
  Parameters& params() { return params_; }

 private:
  Parameters params_;
};

/// Per-particle per-iteration multiply counts for the three architecture
/// parts, from the closed-form accounting.
struct FpmCount {
  double embedding = 0;
  double attention = 0;
  double final_fc = 0;
  double total = 0;
};

FpmCount fpm_count(const Hyperparams& hyper, int d_sp, int t, int n_particles);

struct CheckpointMeta {
  std::string scenario_id;
  double snr_db = 0;
  int n_particles = 0;
  int teacher_n = 0;
  int epoch = 0;
  double loss = 0;
};

void save_checkpoint(const Parameters& params, const CheckpointMeta& meta, const std::string& path);

struct Checkpoint {
  Parameters params;
  CheckpointMeta meta;
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace flockpf::lf
