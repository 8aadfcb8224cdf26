#include "flockpf/pf.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include "json.hpp"

namespace flockpf::pf {

using Eigen::MatrixXd;
using Eigen::VectorXd;

ParticleSet ParticleSet::init_at(const ssm::StateVector& x0, int n) {
  if (n < 1) throw ConfigError("ParticleSet: n must be >= 1");
  ParticleSet s;
  s.t = x0.t();
  s.d_sp = x0.d_sp();
  s.particles = x0.flat().transpose().replicate(n, 1);
  s.weights = VectorXd::Constant(n, 1.0 / n);
  s.normalized = true;
  return s;
}

void ParticleSet::check_shape(const ssm::ScenarioModel& model) const {
  if (t != model.t || d_sp != model.d_sp || particles.cols() != d_p() || weights.size() != n())
    throw ConfigError("ParticleSet: shape inconsistent with scenario");
}

namespace {

double motion_logpdf_flat(const ssm::ScenarioModel& model, const Eigen::Ref<const VectorXd>& prev_flat,
                          const Eigen::Ref<const VectorXd>& flat) {
  double acc = 0.0;
  for (int j = 0; j < model.t; ++j) {
    const VectorXd mean = ssm::apply_phi(model, model.A * prev_flat.segment(j * model.d_sp, model.d_sp));
    acc += ssm::process_noise_logpdf(model, flat.segment(j * model.d_sp, model.d_sp) - mean);
  }
  return acc;
}

double measurement_logpdf_flat(const ssm::ScenarioModel& model, const Eigen::Ref<const VectorXd>& flat,
                               const ssm::Measurement& z) {
  return ssm::measurement_logpdf(model, ssm::StateVector::from_flat(flat, model.t, model.d_sp), z);
}

VectorXd phi_of_motion_mean(const ssm::ScenarioModel& model, const Eigen::Ref<const VectorXd>& prev_flat) {
  VectorXd m(prev_flat.size());
  for (int j = 0; j < model.t; ++j)
    m.segment(j * model.d_sp, model.d_sp) =
        ssm::apply_phi(model, model.A * prev_flat.segment(j * model.d_sp, model.d_sp));
  return m;
}

ParticleSet weights_from_log(ParticleSet set, VectorXd logw) {
  const double mx = logw.maxCoeff();
  if (!std::isfinite(mx)) throw NumericalError("weight update: degenerate set (all weights vanish)");
  set.weights = (logw.array() - mx).exp();
  set.normalized = false;
  return set;
}

}  // namespace

VectorXd SisProposal::mean(const ssm::ScenarioModel& model, const VectorXd& prev_flat) const {
  const VectorXd pred = phi_of_motion_mean(model, prev_flat);
  if (deterministic) return pred;
  return m1 * pred + m2z;
}

SisProposal make_sis_proposal(const ssm::ScenarioModel& model, const ssm::Measurement& z) {
  if (model.radar) throw ConfigError("sis proposal: synthetic scenario required");
  if (z.size() != model.d_m) throw ConfigError("sis proposal: measurement dimension mismatch");
  SisProposal p;
  if (model.zero_v && model.zero_e) {
    p.deterministic = true;
    return p;
  }
  if (model.zero_v) {
    // Point-mass motion: the proposal collapses to the predicted state.
    p.deterministic = true;
    return p;
  }
  if (model.zero_e) throw ConfigError("sis proposal: zero measurement noise with nonzero process noise");

  const int dp = model.t * model.d_sp;
  const MatrixXd iv = model.llt_v.solve(MatrixXd::Identity(model.d_sp, model.d_sp));
  const MatrixXd ie = model.llt_e.solve(MatrixXd::Identity(model.d_m, model.d_m));
  MatrixXd iv_full = MatrixXd::Zero(dp, dp);
  for (int j = 0; j < model.t; ++j) iv_full.block(j * model.d_sp, j * model.d_sp, model.d_sp, model.d_sp) = iv;
  MatrixXd cf(model.d_m, dp);
  for (int j = 0; j < model.t; ++j) cf.middleCols(j * model.d_sp, model.d_sp) = model.C;

  const MatrixXd prec = iv_full + cf.transpose() * ie * cf;
  Eigen::LLT<MatrixXd> llt_prec(prec);
  if (llt_prec.info() != Eigen::Success) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(prec);
    throw NumericalError("sis proposal: precision matrix not positive definite (eig range " +
                         std::to_string(es.eigenvalues().minCoeff()) + " .. " +
                         std::to_string(es.eigenvalues().maxCoeff()) + ")");
  }
  const MatrixXd post = llt_prec.solve(MatrixXd::Identity(dp, dp));
  p.m1 = post * iv_full;
  p.m2z = post * (cf.transpose() * (ie * z));
  p.llt.compute(post);
  if (p.llt.info() != Eigen::Success) throw NumericalError("sis proposal: posterior covariance not PD");
  p.chol = p.llt.matrixL();
  double logdet = 0.0;
  for (int i = 0; i < dp; ++i) logdet += 2.0 * std::log(p.chol(i, i));
  p.log_norm = -0.5 * (dp * std::log(2.0 * M_PI) + logdet);
  return p;
}

ParticleSet sis_propose(const ssm::ScenarioModel& model, const ParticleSet& prev, const ssm::Measurement& z,
                        Rng& rng) {
  prev.check_shape(model);
  if (!prev.normalized) throw ConfigError("sis_propose: previous set must be normalized");
  const SisProposal prop = make_sis_proposal(model, z);
  const int n = prev.n(), dp = prev.d_p();
  ParticleSet out = prev;
  out.normalized = false;
  out.proposal_logq = VectorXd::Zero(n);
  VectorXd xi(dp);
  for (int i = 0; i < n; ++i) {
    const VectorXd mu = prop.mean(model, prev.particles.row(i).transpose());
    if (prop.deterministic) {
      out.particles.row(i) = mu.transpose();
      continue;
    }
    for (int k = 0; k < dp; ++k) xi(k) = rng.normal();
    const VectorXd x = mu + prop.chol * xi;
    out.particles.row(i) = x.transpose();
    out.proposal_logq(i) = -0.5 * (x - mu).dot(prop.llt.solve(x - mu)) + prop.log_norm;
  }
  return out;
}

ParticleSet weight_update(const ssm::ScenarioModel& model, const ParticleSet& proposed, const ParticleSet& prev,
                          const ssm::Measurement& z) {
  proposed.check_shape(model);
  prev.check_shape(model);
  if (proposed.n() != prev.n()) throw ConfigError("weight_update: set sizes differ");
  if (proposed.proposal_logq.size() != proposed.n())
    throw ConfigError("weight_update: proposal log densities missing");
  const int n = proposed.n();
  VectorXd logw(n);
  const bool noise_free = model.zero_v && model.zero_e;
  for (int i = 0; i < n; ++i) {
    double lw = std::log(std::max(prev.weights(i), 0.0));
    if (!noise_free) {
      lw += measurement_logpdf_flat(model, proposed.particles.row(i).transpose(), z);
      lw += motion_logpdf_flat(model, prev.particles.row(i).transpose(), proposed.particles.row(i).transpose());
      lw -= proposed.proposal_logq(i);
    }
    logw(i) = lw;
  }
  return weights_from_log(proposed, std::move(logw));
}

ParticleSet normalize(const ParticleSet& set) {
  if (set.weights.size() == 0) throw ConfigError("normalize: empty set");
  if (!(set.weights.maxCoeff() > 0.0)) throw NumericalError("normalize: no strictly positive weight");
  ParticleSet out = set;
  out.weights = out.weights.cwiseMax(kWeightFloor);
  out.weights /= out.weights.sum();
  out.normalized = true;
  return out;
}

double effective_sample_size(const ParticleSet& set) {
  if (!set.normalized) throw ConfigError("effective_sample_size: set must be normalized");
  return 1.0 / set.weights.squaredNorm();
}

std::vector<int> resample_indices(const VectorXd& weights, ResamplingScheme scheme, Rng& rng) {
  const int n = static_cast<int>(weights.size());
  std::vector<int> idx(n);
  if (scheme == ResamplingScheme::Systematic) {
    const double u0 = rng.uniform() / n;
    double cum = weights(0);
    int j = 0;
    for (int i = 0; i < n; ++i) {
      const double p = u0 + static_cast<double>(i) / n;
      while (cum < p && j < n - 1) cum += weights(++j);
      idx[i] = j;
    }
  } else {
    // Multinomial: independent draws via inverse CDF.
    VectorXd cdf(n);
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
      acc += weights(i);
      cdf(i) = acc;
    }
    for (int i = 0; i < n; ++i) {
      const double u = rng.uniform() * acc;
      int lo = 0, hi = n - 1;
      while (lo < hi) {
        const int mid = (lo + hi) / 2;
        if (cdf(mid) < u)
          lo = mid + 1;
        else
          hi = mid;
      }
      idx[i] = lo;
    }
  }
  return idx;
}

ParticleSet resample(const ParticleSet& set, ResamplingScheme scheme, Rng& rng) {
  if (!set.normalized) throw ConfigError("resample: set must be normalized");
  const auto idx = resample_indices(set.weights, scheme, rng);
  ParticleSet out = set;
  for (int i = 0; i < set.n(); ++i) out.particles.row(i) = set.particles.row(idx[i]);
  out.weights.setConstant(1.0 / set.n());
  out.proposal_logq.resize(0);
  out.normalized = true;
  return out;
}

ssm::StateVector estimate_state(const ParticleSet& set) {
  if (!set.normalized) throw ConfigError("estimate_state: set must be normalized");
  const VectorXd mean = set.particles.transpose() * set.weights;
  return ssm::StateVector::from_flat(mean, set.t, set.d_sp);
}

std::vector<VectorXd> reconstruct_pdf(const ParticleSet& set, const KernelBank& kernels,
                                      const std::vector<MatrixXd>& queries) {
  if (kernels.peak.rows() != set.n() || kernels.peak.cols() != set.t ||
      kernels.sigma.rows() != set.n() || kernels.sigma.cols() != set.t)
    throw ConfigError("reconstruct_pdf: kernel bank shape mismatch");
  if (static_cast<int>(queries.size()) != set.t) throw ConfigError("reconstruct_pdf: need one query block per sub-state");
  std::vector<VectorXd> out(set.t);
  for (int j = 0; j < set.t; ++j) {
    const MatrixXd& q = queries[j];
    if (q.cols() != set.d_sp) throw ConfigError("reconstruct_pdf: query dimension mismatch");
    VectorXd vals = VectorXd::Zero(q.rows());
    for (int m = 0; m < q.rows(); ++m) {
      double acc = 0.0;
      for (int i = 0; i < set.n(); ++i) {
        const double s = kernels.sigma(i, j);
        const double r2 = (q.row(m) - set.particles.row(i).segment(j * set.d_sp, set.d_sp)).squaredNorm();
        acc += set.weights(i) * kernels.peak(i, j) * std::exp(-r2 / (2.0 * s * s));
      }
      vals(m) = acc;
    }
    out[j] = std::move(vals);
  }
  return out;
}

double reconstruct_pdf_joint(const ParticleSet& set, const KernelBank& kernels, const ssm::StateVector& query) {
  std::vector<MatrixXd> q(set.t);
  for (int j = 0; j < set.t; ++j) q[j] = query.sub.row(j);
  const auto vals = reconstruct_pdf(set, kernels, q);
  double prod = 1.0;
  for (const auto& v : vals) prod *= v(0);
  return prod;
}

ParticleSet pf_step(const ssm::ScenarioModel& model, const FilterConfig& config, const ParticleSet& prev,
                    const ssm::Measurement& z, Rng& rng, const ParticleCorrector* corrector,
                    ParticleSet* pre_correction) {
  if (config.kind == FilterKind::AuxPartitioned)
    return aux_partitioned_step(model, config, prev, z, rng, corrector, pre_correction);
  if (!prev.normalized) throw ConfigError("pf_step: previous set must be normalized");
  ParticleSet proposed = sis_propose(model, prev, z, rng);
  ParticleSet updated = weight_update(model, proposed, prev, z);
  if (pre_correction != nullptr) *pre_correction = updated;
  if (corrector != nullptr) updated = corrector->apply(updated);
  ParticleSet out = normalize(updated);
  if (config.resample_threshold > 0 && effective_sample_size(out) < config.resample_threshold)
    out = resample(out, config.scheme, rng);
  return out;
}

namespace {

double single_target_loglik(const ssm::ScenarioModel& model, const VectorXd& z_res,
                            const Eigen::Ref<const VectorXd>& sub_state) {
  const VectorXd r = z_res - ssm::single_target_response(model, sub_state, model.sensors);
  const double s2 = model.sensor_noise_std * model.sensor_noise_std;
  return -0.5 * r.squaredNorm() / s2;
}

}  // namespace

ParticleSet aux_partitioned_step(const ssm::ScenarioModel& model, const FilterConfig& config,
                                 const ParticleSet& prev, const ssm::Measurement& z, Rng& rng,
                                 const ParticleCorrector* corrector, ParticleSet* pre_correction) {
  if (!model.radar) throw ConfigError("aux_partitioned_step: radar scenario required");
  prev.check_shape(model);
  if (!prev.normalized) throw ConfigError("aux_partitioned_step: previous set must be normalized");
  if (z.size() != model.d_m) throw ConfigError("aux_partitioned_step: measurement dimension mismatch");

  ParticleSet set = prev;
  if (corrector != nullptr && config.correction_stage == CorrectionStage::BeforeAuxResample)
    set = normalize(corrector->apply(set));

  const int n = set.n();
  VectorXd log_run = set.weights.array().max(kWeightFloor).log();

  for (int j = 0; j < model.t; ++j) {
    // Residual measurement: subtract the expected response of the other
    // sub-states at their current estimates.
    const ssm::StateVector est = estimate_state(normalize(set));
    VectorXd z_res = z;
    for (int o = 0; o < model.t; ++o) {
      if (o == j) continue;
      z_res -= ssm::single_target_response(model, est.sub.row(o).transpose(), model.sensors);
    }

    // First stage: auxiliary weights at the motion-mean prediction.
    MatrixXd pred(n, model.d_sp);
    VectorXd ll_pred(n), log_lambda(n);
    for (int i = 0; i < n; ++i) {
      pred.row(i) = (model.A * set.particles.row(i).segment(j * model.d_sp, model.d_sp).transpose()).transpose();
      ll_pred(i) = single_target_loglik(model, z_res, pred.row(i).transpose());
      log_lambda(i) = log_run(i) + ll_pred(i);
    }
    const double mx = log_lambda.maxCoeff();
    if (!std::isfinite(mx)) throw NumericalError("aux step: first-stage weights degenerate");
    VectorXd lambda = (log_lambda.array() - mx).exp();
    lambda = lambda.cwiseMax(kWeightFloor);
    lambda /= lambda.sum();
    const auto idx = resample_indices(lambda, ResamplingScheme::Systematic, rng);

    // Reindex the joint particles; stage-one weights are consumed.
    MatrixXd picked(n, set.d_p());
    VectorXd ll_pred_parent(n);
    for (int i = 0; i < n; ++i) {
      picked.row(i) = set.particles.row(idx[i]);
      ll_pred_parent(i) = ll_pred(idx[i]);
    }
    set.particles = std::move(picked);
    log_run.setZero();

    // Propagate partition j and apply the second-stage correction.
    VectorXd xi(model.d_sp);
    for (int i = 0; i < n; ++i) {
      VectorXd mean = model.A * set.particles.row(i).segment(j * model.d_sp, model.d_sp).transpose();
      VectorXd x_new = mean;
      if (!model.zero_v) {
        for (int k = 0; k < model.d_sp; ++k) xi(k) = rng.normal();
        x_new += model.chol_v * xi;
      }
      set.particles.row(i).segment(j * model.d_sp, model.d_sp) = x_new.transpose();
      log_run(i) += single_target_loglik(model, z_res, x_new) - ll_pred_parent(i);
    }
    const double m2 = log_run.maxCoeff();
    set.weights = (log_run.array() - m2).exp();
    set.normalized = false;
    log_run = set.weights.array().max(kWeightFloor).log();
  }

  if (pre_correction != nullptr) *pre_correction = set;
  if (corrector != nullptr && config.correction_stage == CorrectionStage::AfterWeightUpdate)
    set = corrector->apply(set);
  ParticleSet out = normalize(set);
  if (config.resample_threshold > 0 && effective_sample_size(out) < config.resample_threshold)
    out = resample(out, config.scheme, rng);
  return out;
}

void save_particle_set(const ParticleSet& set, const std::string& path) {
  nlohmann::ordered_json j;
  j["format"] = "pset-v1";
  j["t"] = set.t;
  j["d_sp"] = set.d_sp;
  j["normalized"] = set.normalized;
  nlohmann::json parts = nlohmann::json::array();
  for (int i = 0; i < set.n(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (int c = 0; c < set.d_p(); ++c) row.push_back(set.particles(i, c));
    parts.push_back(row);
  }
  j["particles"] = parts;
  j["weights"] = std::vector<double>(set.weights.data(), set.weights.data() + set.n());
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write particle set: " + path);
  f << j << "\n";
}

ParticleSet load_particle_set(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open particle set: " + path);
  nlohmann::json j;
  f >> j;
  if (j.value("format", "") != "pset-v1") throw ConfigError("particle set: unexpected format tag");
  ParticleSet s;
  s.t = j.at("t").get<int>();
  s.d_sp = j.at("d_sp").get<int>();
  s.normalized = j.at("normalized").get<bool>();
  const auto& parts = j.at("particles");
  const int n = static_cast<int>(parts.size());
  s.particles.resize(n, s.t * s.d_sp);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < s.t * s.d_sp; ++c) s.particles(i, c) = parts.at(i).at(c).get<double>();
  const auto& w = j.at("weights");
  s.weights.resize(n);
  for (int i = 0; i < n; ++i) s.weights(i) = w.at(i).get<double>();
  return s;
}

}  // namespace flockpf::pf
