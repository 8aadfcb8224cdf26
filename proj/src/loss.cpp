#include "flockpf/loss.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "flockpf/pf.hpp"

namespace flockpf::loss {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using diff::Tape;
using diff::Tensor;

void LossConfig::validate() const {
  if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0) throw ConfigError("loss: lambdas must be non-negative");
  if (oracle_mode == OracleMode::O1 && teacher_n <= 0) throw ConfigError("loss: teacher_n must be positive in O1");
  if (ospa_cutoff <= 0) throw ConfigError("loss: ospa cutoff must be positive");
}

OspaResult ospa_full(const ssm::StateVector& a, const ssm::StateVector& b, double order, double cutoff) {
  if (a.t() != b.t() || a.d_sp() != b.d_sp()) throw ConfigError("ospa: sets must have equal cardinality and dimension");
  if (order < 1.0) throw ConfigError("ospa: order must be >= 1");
  const int t = a.t();
  MatrixXd cost(t, t);
  for (int j = 0; j < t; ++j)
    for (int l = 0; l < t; ++l) {
      const double d = (a.sub.row(j) - b.sub.row(l)).norm();
      cost(j, l) = std::pow(std::min(d, cutoff), order);
    }
  OspaResult r;
  r.assignment = solve_assignment_lexfirst(cost);
  r.value = std::pow(assignment_cost(cost, r.assignment) / t, 1.0 / order);
  return r;
}

double ospa(const ssm::StateVector& a, const ssm::StateVector& b, double cutoff) {
  return ospa_full(a, b, 2.0, cutoff).value;
}

double OracleDensity::eval(int j, const Eigen::Ref<const VectorXd>& point) const {
  const MatrixXd& mu = means[j];
  const VectorXd& a = amps[j];
  const VectorXd& s = stds[j];
  double acc = 0.0;
  for (int c = 0; c < mu.rows(); ++c) {
    const double r2 = (point.transpose() - mu.row(c)).squaredNorm();
    acc += a(c) * std::exp(-r2 / (2.0 * s(c) * s(c)));
  }
  return acc;
}

double OracleDensity::avg_std(int j) const {
  return std::sqrt(std::max(variance_target.row(j).mean(), 1e-12));
}

namespace {

/// Weighted per-dimension variances of sub-state j's particles.
Eigen::RowVectorXd weighted_variance_row(const pf::ParticleSet& set, int j) {
  const int d = set.d_sp;
  Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(d);
  for (int i = 0; i < set.n(); ++i) mean += set.weights(i) * set.particles.row(i).segment(j * d, d);
  Eigen::RowVectorXd var = Eigen::RowVectorXd::Zero(d);
  for (int i = 0; i < set.n(); ++i) {
    const auto dev = set.particles.row(i).segment(j * d, d) - mean;
    var += set.weights(i) * dev.cwiseProduct(dev);
  }
  return var;
}

double gaussian_amp(double sigma, int d) { return std::pow(2.0 * M_PI * sigma * sigma, -0.5 * d); }

}  // namespace

OracleDensity build_oracle(OracleMode mode, const pf::ParticleSet& teacher,
                           const std::optional<ssm::StateVector>& true_state, const LossConfig& config) {
  if (!teacher.normalized) throw ConfigError("build_oracle: teacher set must be normalized");
  const int t = teacher.t, d = teacher.d_sp;
  OracleDensity o;
  o.t = t;
  o.d_sp = d;
  o.means.resize(t);
  o.amps.resize(t);
  o.stds.resize(t);
  o.variance_target.resize(t, d);
  for (int j = 0; j < t; ++j) o.variance_target.row(j) = weighted_variance_row(teacher, j);

  if (mode == OracleMode::O1) {
    const int nn = teacher.n();
    for (int j = 0; j < t; ++j) {
      double sigma = config.teacher_kernel_sigma;
      if (sigma <= 0.0) {
        // Silverman-style bandwidth from the teacher spread, frozen for
        // this time-step.
        const double spread = o.avg_std(j);
        sigma = std::max(spread, 1e-6) * std::pow(4.0 / (d + 2.0), 1.0 / (d + 4.0)) *
                std::pow(static_cast<double>(nn), -1.0 / (d + 4.0));
      }
      MatrixXd mu(nn, d);
      VectorXd a(nn), s(nn);
      const double amp1 = gaussian_amp(sigma, d);
      for (int i = 0; i < nn; ++i) {
        mu.row(i) = teacher.particles.row(i).segment(j * d, d);
        a(i) = teacher.weights(i) * amp1;
        s(i) = sigma;
      }
      o.means[j] = std::move(mu);
      o.amps[j] = std::move(a);
      o.stds[j] = std::move(s);
    }
    o.desired = pf::estimate_state(teacher);
    return o;
  }

  if (!true_state.has_value()) throw ConfigError("build_oracle: O2 requires the true state");
  if (true_state->t() != t || true_state->d_sp() != d) throw ConfigError("build_oracle: true state shape mismatch");
  for (int j = 0; j < t; ++j) {
    const double sigma = o.avg_std(j);
    o.means[j] = true_state->sub.row(j);
    o.amps[j] = VectorXd::Constant(1, gaussian_amp(sigma, d));
    o.stds[j] = VectorXd::Constant(1, sigma);
  }
  o.desired = *true_state;
  return o;
}

double kernel_sigma(double peak, int n_particles, int d_sp) {
  const double cvol = 1.0 / (n_particles * std::pow(2.0 * M_PI, 0.5 * d_sp));
  return std::pow(cvol, 1.0 / d_sp) * std::pow(peak, -1.0 / d_sp);
}

KernelBank build_adapting_kernels(const pf::ParticleSet& set, const OracleDensity& oracle) {
  if (!set.normalized) throw ConfigError("build_adapting_kernels: set must be normalized");
  if (set.t != oracle.t || set.d_sp != oracle.d_sp) throw ConfigError("build_adapting_kernels: shape mismatch");
  KernelBank bank;
  bank.peak.resize(set.n(), set.t);
  bank.sigma.resize(set.n(), set.t);
  for (int j = 0; j < set.t; ++j)
    for (int i = 0; i < set.n(); ++i) {
      const double h = std::max(oracle.eval(j, set.particles.row(i).segment(j * set.d_sp, set.d_sp).transpose()),
                                kPeakFloor);
      bank.peak(i, j) = h;
      bank.sigma(i, j) = kernel_sigma(h, set.n(), set.d_sp);
    }
  return bank;
}

namespace {

struct Box {
  VectorXd lo, hi;
  bool contains(const Eigen::Ref<const VectorXd>& p) const {
    for (int k = 0; k < p.size(); ++k)
      if (p(k) < lo(k) || p(k) > hi(k)) return false;
    return true;
  }
};

void mesh_points(const VectorXd& center, double extent, int g, MatrixXd& out) {
  const int d = static_cast<int>(center.size());
  const long total = static_cast<long>(std::pow(g, d));
  out.resize(total, d);
  const double step = g > 1 ? extent / (g - 1) : 0.0;
  for (long m = 0; m < total; ++m) {
    long rem = m;
    for (int k = 0; k < d; ++k) {
      const int ik = rem % g;
      rem /= g;
      out(m, k) = center(k) - 0.5 * extent + ik * step;
    }
  }
}

}  // namespace

std::vector<Grid> build_grids(const GridSpec& spec, const OracleDensity& oracle, const ssm::StateVector& estimate,
                              Rng& rng) {
  if (estimate.t() != oracle.t || estimate.d_sp() != oracle.d_sp)
    throw ConfigError("build_grids: estimate shape mismatch");
  const int t = oracle.t, d = oracle.d_sp;
  std::vector<Grid> grids(t);

  for (int j = 0; j < t; ++j) {
    const VectorXd anchor_a = oracle.desired.sub.row(j).transpose();
    const VectorXd anchor_b = estimate.sub.row(j).transpose();
    const double sigma = std::max(oracle.avg_std(j), 1e-6);

    if (spec.kind == GridSpec::Kind::Random) {
      if (spec.n_samples < 1) throw ConfigError("build_grids: n_samples must be >= 1");
      const int n = spec.n_samples;
      MatrixXd pts(n, d);
      const double std = spec.sample_std_factor * sigma;
      for (int m = 0; m < n; ++m) {
        const VectorXd& c = m < n / 2 ? anchor_a : anchor_b;
        for (int k = 0; k < d; ++k) pts(m, k) = c(k) + std * rng.normal();
      }
      grids[j].points = std::move(pts);
      grids[j].weights = VectorXd::Constant(n, 1.0 / n);
      continue;
    }

    if (spec.stages < 1 || spec.points_per_axis < 1) throw ConfigError("build_grids: bad staged grid spec");
    std::vector<VectorXd> kept;
    std::vector<double> w;
    std::vector<Box> finer;  // covered boxes of all finer stages
    std::map<std::vector<long>, char> seen;
    const double finest_extent = spec.base_extent_sigmas * sigma;
    const double key_tol = std::max(finest_extent, 1e-9) * 1e-7;
    MatrixXd mesh;
    for (int l = 0; l < spec.stages; ++l) {
      const double extent = finest_extent * std::pow(spec.resolution_ratio, l);
      const double step = spec.points_per_axis > 1 ? extent / (spec.points_per_axis - 1) : extent;
      const double cell = std::pow(step, d);
      std::vector<Box> this_stage;
      for (const VectorXd& anchor : {anchor_a, anchor_b}) {
        mesh_points(anchor, extent, spec.points_per_axis, mesh);
        for (long m = 0; m < mesh.rows(); ++m) {
          const VectorXd p = mesh.row(m).transpose();
          bool covered = false;
          for (const auto& b : finer)
            if (b.contains(p)) {
              covered = true;
              break;
            }
          if (covered) continue;
          std::vector<long> key(d);
          for (int k = 0; k < d; ++k) key[k] = std::llround(p(k) / key_tol);
          if (!seen.emplace(std::move(key), 1).second) continue;
          kept.push_back(p);
          w.push_back(cell);
        }
        Box box;
        box.lo = anchor.array() - 0.5 * extent - 1e-12 * (1.0 + extent);
        box.hi = anchor.array() + 0.5 * extent + 1e-12 * (1.0 + extent);
        this_stage.push_back(std::move(box));
      }
      for (auto& b : this_stage) finer.push_back(std::move(b));
    }
    if (kept.empty()) throw NumericalError("build_grids: staged grid produced no points");
    grids[j].points.resize(kept.size(), d);
    grids[j].weights.resize(kept.size());
    for (std::size_t m = 0; m < kept.size(); ++m) {
      grids[j].points.row(m) = kept[m].transpose();
      grids[j].weights(m) = w[m];
    }
  }
  return grids;
}

Tensor heatmap_loss_t(Tape* tape, const std::vector<Tensor>& sub_particles, const Tensor& weights,
                      const OracleDensity& oracle, const std::vector<Grid>& grids, double lambda3) {
  if (static_cast<int>(sub_particles.size()) != oracle.t || static_cast<int>(grids.size()) != oracle.t)
    throw ConfigError("heatmap_loss: need one particle block and grid per sub-state");
  const int d = oracle.d_sp;
  const int n = sub_particles.front().rows();
  const double cvol = 1.0 / (n * std::pow(2.0 * M_PI, 0.5 * d));
  const double chi = std::pow(cvol, 1.0 / d);

  Tensor total;
  for (int j = 0; j < oracle.t; ++j) {
    const Tensor& xj = sub_particles[j];
    if (xj.rows() != n || xj.cols() != d) throw ConfigError("heatmap_loss: particle block shape");
    const Grid& g = grids[j];
    if (g.points.rows() == 0) throw ConfigError("heatmap_loss: empty grid");

    const int nc = static_cast<int>(oracle.means[j].rows());
    Tensor omeans(nc, d), oamps(nc, 1), ostds(nc, 1);
    for (int c = 0; c < nc; ++c) {
      for (int k = 0; k < d; ++k) omeans.at(c, k) = oracle.means[j](c, k);
      oamps.at(c, 0) = oracle.amps[j](c);
      ostds.at(c, 0) = oracle.stds[j](c);
    }
    const int m = static_cast<int>(g.points.rows());
    Tensor gpts(m, d), gw(m, 1);
    for (int q = 0; q < m; ++q) {
      for (int k = 0; k < d; ++k) gpts.at(q, k) = g.points(q, k);
      gw.at(q, 0) = g.weights(q);
    }

    // Adapting kernels: peak = oracle density at the sub-particle, std from
    // the equal-volume constraint; both differentiable in the particles.
    Tensor h = diff::clamp_min(tape, diff::gauss_kde(tape, xj, omeans, oamps, ostds), kPeakFloor);
    Tensor sig = diff::scale(tape, diff::pow_const(tape, h, -1.0 / d), chi);
    Tensor coef = diff::mul(tape, weights, h);
    Tensor recon = diff::gauss_kde(tape, gpts, xj, coef, sig);
    Tensor oracle_on_grid = diff::gauss_kde(nullptr, gpts, omeans, oamps, ostds);
    Tensor dens = diff::sum_all(tape, diff::mul(tape, diff::square(tape, diff::sub(tape, recon, oracle_on_grid)), gw));

    Tensor mean = diff::weighted_sum_rows(tape, xj, weights);
    Tensor var = diff::weighted_sum_rows(tape, diff::square(tape, diff::sub_rowvec(tape, xj, mean)), weights);
    Tensor vt(1, d);
    for (int k = 0; k < d; ++k) vt.at(0, k) = oracle.variance_target(j, k);
    Tensor vterm = diff::sqrt_guard(tape, diff::sum_all(tape, diff::square(tape, diff::sub(tape, var, vt))));

    Tensor term = diff::add(tape, dens, diff::scale(tape, vterm, lambda3));
    total = total.defined() ? diff::add(tape, total, term) : term;
  }
  return total;
}

double heatmap_loss(const pf::ParticleSet& set, const OracleDensity& oracle, const GridSpec& grid, double lambda3,
                    Rng& grid_rng) {
  if (!set.normalized) throw ConfigError("heatmap_loss: set must be normalized");
  if (set.t != oracle.t || set.d_sp != oracle.d_sp) throw ConfigError("heatmap_loss: shape mismatch");
  const auto grids = build_grids(grid, oracle, pf::estimate_state(set), grid_rng);
  std::vector<Tensor> subs(set.t);
  for (int j = 0; j < set.t; ++j) {
    Tensor xj(set.n(), set.d_sp);
    for (int i = 0; i < set.n(); ++i)
      for (int k = 0; k < set.d_sp; ++k) xj.at(i, k) = set.particles(i, j * set.d_sp + k);
    subs[j] = std::move(xj);
  }
  Tensor w(set.n(), 1);
  for (int i = 0; i < set.n(); ++i) w.at(i, 0) = set.weights(i);
  return heatmap_loss_t(nullptr, subs, w, oracle, grids, lambda3).at(0, 0);
}

Tensor ospa_loss_t(Tape* tape, const std::vector<Tensor>& estimate_sub, const ssm::StateVector& desired,
                   const std::vector<int>& assignment) {
  const int t = desired.t(), d = desired.d_sp();
  if (static_cast<int>(estimate_sub.size()) != t || static_cast<int>(assignment.size()) != t)
    throw ConfigError("ospa_loss: shape mismatch");
  Tensor acc;
  for (int j = 0; j < t; ++j) {
    Tensor des(1, d);
    for (int k = 0; k < d; ++k) des.at(0, k) = desired.sub(j, k);
    Tensor d2 = diff::sum_all(tape, diff::square(tape, diff::sub(tape, estimate_sub[assignment[j]], des)));
    acc = acc.defined() ? diff::add(tape, acc, d2) : d2;
  }
  return diff::sqrt_guard(tape, diff::scale(tape, acc, 1.0 / t));
}

double total_loss(const std::vector<StepTerms>& window, const LossConfig& config) {
  if (window.empty()) throw ConfigError("total_loss: empty window");
  double acc = 0.0, hm = 0.0;
  for (const auto& s : window) {
    acc += s.acc;
    hm += s.hm;
  }
  return (config.lambda1 * acc + config.lambda2 * hm) / static_cast<double>(window.size());
}

double total_loss_batch(const std::vector<std::vector<StepTerms>>& batch, const LossConfig& config) {
  if (batch.empty()) throw ConfigError("total_loss: empty batch");
  double acc = 0.0;
  for (const auto& w : batch) acc += total_loss(w, config);
  return acc / static_cast<double>(batch.size());
}

}  // namespace flockpf::loss
