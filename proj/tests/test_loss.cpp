#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "flockpf/loss.hpp"
#include "flockpf/pf.hpp"
#include "test_helpers.hpp"

using namespace flockpf;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using pf::ParticleSet;
using ssm::StateVector;

namespace {

StateVector random_state(int t, int d, Rng& rng, double scale = 1.0) {
  StateVector x(t, d);
  for (int j = 0; j < t; ++j)
    for (int k = 0; k < d; ++k) x.sub(j, k) = scale * rng.normal();
  return x;
}

ParticleSet random_set(int n, int t, int d, Rng& rng) {
  ParticleSet s;
  s.t = t;
  s.d_sp = d;
  s.particles.resize(n, t * d);
  s.weights.resize(n);
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < t * d; ++c) s.particles(i, c) = rng.normal();
    s.weights(i) = 0.1 + rng.uniform();
  }
  s.weights /= s.weights.sum();
  s.normalized = true;
  return s;
}

double brute_force_ospa(const StateVector& a, const StateVector& b, double cutoff) {
  std::vector<int> perm(a.t());
  for (int i = 0; i < a.t(); ++i) perm[i] = i;
  double best = std::numeric_limits<double>::infinity();
  do {
    double acc = 0.0;
    for (int j = 0; j < a.t(); ++j) {
      const double d = std::min((a.sub.row(j) - b.sub.row(perm[j])).norm(), cutoff);
      acc += d * d;
    }
    best = std::min(best, acc);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return std::sqrt(best / a.t());
}

}  // namespace

TEST_CASE("ospa basics") {
  Rng rng(1);
  SUBCASE("identical sets give zero") {
    StateVector a = random_state(3, 2, rng);
    CHECK(loss::ospa(a, a) == 0.0);
  }
  SUBCASE("single sub-state reduces to the distance") {
    StateVector a(1, 2), b(1, 2);
    a.sub << 0.0, 0.0;
    b.sub << 3.0, 4.0;
    CHECK(loss::ospa(a, b) == doctest::Approx(5.0));
    CHECK(loss::ospa(a, b, 2.0) == doctest::Approx(2.0));  // cutoff clips
  }
  SUBCASE("matches brute force over all permutations") {
    for (int trial = 0; trial < 200; ++trial) {
      const int t = 1 + static_cast<int>(rng.uniform_int(6));
      StateVector a = random_state(t, 2, rng), b = random_state(t, 2, rng);
      const double cutoff = trial % 3 == 0 ? 1.0 : std::numeric_limits<double>::infinity();
      const auto r = loss::ospa_full(a, b, 2.0, cutoff);
      CHECK(r.value == doctest::Approx(brute_force_ospa(a, b, cutoff)).epsilon(1e-12));
    }
  }
  SUBCASE("invariant to permuting either argument (exhaustive, t=4)") {
    StateVector a = random_state(4, 2, rng), b = random_state(4, 2, rng);
    const double ref = loss::ospa(a, b);
    std::vector<int> perm{0, 1, 2, 3};
    do {
      StateVector ap(4, 2), bp(4, 2);
      for (int j = 0; j < 4; ++j) {
        ap.sub.row(j) = a.sub.row(perm[j]);
        bp.sub.row(j) = b.sub.row(perm[j]);
      }
      CHECK(loss::ospa(ap, b) == doctest::Approx(ref).epsilon(1e-12));
      CHECK(loss::ospa(a, bp) == doctest::Approx(ref).epsilon(1e-12));
    } while (std::next_permutation(perm.begin(), perm.end()));
  }
  SUBCASE("metric properties with finite cutoff on random triples") {
    for (int trial = 0; trial < 1000; ++trial) {
      StateVector a = random_state(3, 2, rng), b = random_state(3, 2, rng), c = random_state(3, 2, rng);
      const double cutoff = 2.5;
      const double ab = loss::ospa(a, b, cutoff), ba = loss::ospa(b, a, cutoff);
      CHECK(ab == doctest::Approx(ba).epsilon(1e-12));
      CHECK(loss::ospa(a, a, cutoff) == 0.0);
      CHECK(ab <= loss::ospa(a, c, cutoff) + loss::ospa(c, b, cutoff) + 1e-12);
    }
  }
}

TEST_CASE("oracle construction") {
  Rng rng(2);
  loss::LossConfig cfg;
  SUBCASE("one-hot teacher yields a single bump at that particle") {
    ParticleSet teacher = random_set(6, 1, 2, rng);
    teacher.weights.setZero();
    teacher.weights(2) = 1.0;
    teacher = pf::normalize(teacher);
    cfg.teacher_kernel_sigma = 0.5;
    const auto o = loss::build_oracle(loss::OracleMode::O1, teacher, std::nullopt, cfg);
    const VectorXd at = teacher.particles.row(2).transpose();
    const double peak = o.eval(0, at);
    CHECK(peak == doctest::Approx(std::pow(2.0 * M_PI * 0.25, -1.0)).epsilon(1e-6));
    VectorXd far = at.array() + 50.0;
    CHECK(o.eval(0, far) < 1e-12);
  }
  SUBCASE("O2 density integrates to one per sub-state") {
    ParticleSet teacher = random_set(200, 2, 2, rng);
    StateVector truth = random_state(2, 2, rng);
    const auto o = loss::build_oracle(loss::OracleMode::O2, teacher, truth, cfg);
    for (int j = 0; j < 2; ++j) {
      const double sigma = o.stds[j](0);
      const double span = 8.0 * sigma, step = sigma / 10.0;
      double integral = 0.0;
      for (double x = truth.sub(j, 0) - span; x <= truth.sub(j, 0) + span; x += step)
        for (double y = truth.sub(j, 1) - span; y <= truth.sub(j, 1) + span; y += step) {
          VectorXd p(2);
          p << x, y;
          integral += o.eval(j, p) * step * step;
        }
      CHECK(std::abs(integral - 1.0) < 0.01);
    }
  }
  SUBCASE("O1 desired state equals the teacher estimate") {
    ParticleSet teacher = random_set(40, 2, 3, rng);
    const auto o = loss::build_oracle(loss::OracleMode::O1, teacher, std::nullopt, cfg);
    CHECK((o.desired.sub - pf::estimate_state(teacher).sub).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("O2 without truth is rejected") {
    ParticleSet teacher = random_set(10, 1, 2, rng);
    CHECK_THROWS_AS(loss::build_oracle(loss::OracleMode::O2, teacher, std::nullopt, cfg), ConfigError);
  }
}

TEST_CASE("adapting kernels") {
  Rng rng(3);
  SUBCASE("closed-form inversion: d=2, N=1, h=1/(2pi) gives sigma=1") {
    CHECK(loss::kernel_sigma(1.0 / (2.0 * M_PI), 1, 2) == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("doubling the peak halves sigma^d exactly") {
    const double h = 0.37;
    const double s1 = loss::kernel_sigma(h, 10, 3);
    const double s2 = loss::kernel_sigma(2.0 * h, 10, 3);
    CHECK(std::pow(s2, 3) == doctest::Approx(0.5 * std::pow(s1, 3)).epsilon(1e-12));
  }
  SUBCASE("equal oracle density gives equal widths; equal volume holds") {
    ParticleSet s = random_set(20, 2, 2, rng);
    loss::OracleDensity flat;  // nearly-flat very wide Gaussian
    flat.t = 2;
    flat.d_sp = 2;
    flat.variance_target = MatrixXd::Constant(2, 2, 1.0);
    for (int j = 0; j < 2; ++j) {
      flat.means.push_back(MatrixXd::Zero(1, 2));
      flat.amps.push_back(VectorXd::Constant(1, 0.01));
      flat.stds.push_back(VectorXd::Constant(1, 1e6));
    }
    flat.desired = StateVector(2, 2);
    const auto bank = loss::build_adapting_kernels(s, flat);
    for (int j = 0; j < 2; ++j)
      for (int i = 0; i < 20; ++i) {
        CHECK(bank.sigma(i, j) == doctest::Approx(bank.sigma(0, 0)).epsilon(1e-9));
        const double volume = bank.peak(i, j) * std::pow(2.0 * M_PI * bank.sigma(i, j) * bank.sigma(i, j), 1.0);
        CHECK(std::abs(volume - 1.0 / 20.0) < 1e-10);
      }
  }
}

TEST_CASE("grids") {
  Rng rng(4);
  loss::OracleDensity o;
  o.t = 1;
  o.d_sp = 2;
  o.means.push_back(MatrixXd::Zero(1, 2));
  o.amps.push_back(VectorXd::Constant(1, 1.0 / (2.0 * M_PI)));
  o.stds.push_back(VectorXd::Constant(1, 1.0));
  o.variance_target = MatrixXd::Constant(1, 2, 1.0);
  o.desired = StateVector(1, 2);

  StateVector est(1, 2);
  est.sub << 0.4, -0.2;

  SUBCASE("staged meshgrid drops coarse points covered by finer stages") {
    loss::GridSpec spec;
    spec.kind = loss::GridSpec::Kind::StagedMeshgrid;
    spec.stages = 3;
    spec.points_per_axis = 5;
    const auto grids = loss::build_grids(spec, o, est, rng);
    REQUIRE(grids.size() == 1);
    // fewer than the raw count (stages overlap), more than one stage
    CHECK(grids[0].points.rows() < 3 * 2 * 25);
    CHECK(grids[0].points.rows() > 25);
    CHECK(grids[0].weights.minCoeff() > 0.0);
  }
  SUBCASE("identical stages are counted once (relabeling invariance)") {
    loss::GridSpec one;
    one.kind = loss::GridSpec::Kind::StagedMeshgrid;
    one.stages = 1;
    one.points_per_axis = 5;
    loss::GridSpec two = one;
    two.stages = 2;
    two.resolution_ratio = 1.0;  // second stage duplicates the first
    const auto g1 = loss::build_grids(one, o, est, rng);
    const auto g2 = loss::build_grids(two, o, est, rng);
    REQUIRE(g1[0].points.rows() == g2[0].points.rows());
    CHECK((g1[0].points - g2[0].points).cwiseAbs().maxCoeff() == 0.0);
    CHECK((g1[0].weights - g2[0].weights).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("random grid centers half the samples on each anchor") {
    loss::GridSpec spec;
    spec.kind = loss::GridSpec::Kind::Random;
    spec.n_samples = 4000;
    spec.sample_std_factor = 0.05;  // tight clusters
    StateVector far(1, 2);
    far.sub << 30.0, 0.0;
    const auto grids = loss::build_grids(spec, o, far, rng);
    int near_desired = 0, near_est = 0;
    for (int m = 0; m < grids[0].points.rows(); ++m) {
      if (grids[0].points.row(m).norm() < 5.0) ++near_desired;
      if ((grids[0].points.row(m) - far.sub.row(0)).norm() < 5.0) ++near_est;
    }
    CHECK(near_desired == 2000);
    CHECK(near_est == 2000);
  }
}

TEST_CASE("heatmap loss") {
  Rng rng(5);
  SUBCASE("self comparison is exactly zero") {
    // single particle at the oracle center whose adapting kernel reproduces
    // the oracle bump identically
    const int d = 2;
    ParticleSet s;
    s.t = 1;
    s.d_sp = d;
    s.particles.resize(1, d);
    s.particles << 0.7, -0.3;
    s.weights = VectorXd::Constant(1, 1.0);
    s.normalized = true;

    const double amp = 0.45;
    const double sigma = loss::kernel_sigma(amp, 1, d);
    loss::OracleDensity o;
    o.t = 1;
    o.d_sp = d;
    o.means.push_back(s.particles);
    o.amps.push_back(VectorXd::Constant(1, amp));
    o.stds.push_back(VectorXd::Constant(1, sigma));
    o.variance_target = MatrixXd::Zero(1, d);  // a lone particle has zero spread
    o.desired = StateVector(1, d);
    o.desired.sub = s.particles;

    loss::GridSpec spec;
    spec.kind = loss::GridSpec::Kind::StagedMeshgrid;
    spec.stages = 3;
    spec.points_per_axis = 7;
    Rng grng(9);
    CHECK(loss::heatmap_loss(s, o, spec, 0.7, grng) == 0.0);
  }
  SUBCASE("non-negative on random fixtures") {
    loss::LossConfig cfg;
    for (int trial = 0; trial < 50; ++trial) {
      ParticleSet teacher = random_set(30, 1, 2, rng);
      ParticleSet student = random_set(8, 1, 2, rng);
      const auto o = loss::build_oracle(loss::OracleMode::O1, teacher, std::nullopt, cfg);
      loss::GridSpec spec;
      spec.kind = trial % 2 == 0 ? loss::GridSpec::Kind::Random : loss::GridSpec::Kind::StagedMeshgrid;
      spec.n_samples = 64;
      spec.stages = 2;
      spec.points_per_axis = 5;
      CHECK(loss::heatmap_loss(student, o, spec, 0.5, rng) >= 0.0);
    }
  }
  SUBCASE("tiny instance matches a scalar hand computation") {
    // t=1, N=3, 1-D sub-state, single-stage 11-point grid
    const int d = 1, n = 3;
    ParticleSet s;
    s.t = 1;
    s.d_sp = d;
    s.particles.resize(n, 1);
    s.particles << -0.5, 0.2, 0.9;
    s.weights.resize(n);
    s.weights << 0.2, 0.5, 0.3;
    s.normalized = true;

    loss::OracleDensity o;
    o.t = 1;
    o.d_sp = d;
    o.means.push_back(MatrixXd::Constant(1, 1, 0.1));
    o.amps.push_back(VectorXd::Constant(1, 0.8));
    o.stds.push_back(VectorXd::Constant(1, 0.6));
    o.variance_target = MatrixXd::Constant(1, 1, 0.3);
    o.desired = StateVector(1, 1);
    o.desired.sub << 0.1;

    loss::GridSpec spec;
    spec.kind = loss::GridSpec::Kind::StagedMeshgrid;
    spec.stages = 1;
    spec.points_per_axis = 11;
    spec.base_extent_sigmas = 2.0;

    const double lambda3 = 0.4;
    Rng grng(1);
    const double got = loss::heatmap_loss(s, o, spec, lambda3, grng);

    // hand evaluation
    const double est = s.weights(0) * -0.5 + s.weights(1) * 0.2 + s.weights(2) * 0.9;
    auto oracle_at = [&](double x) { return 0.8 * std::exp(-std::pow(x - 0.1, 2) / (2.0 * 0.36)); };
    double h[3], sg[3];
    for (int i = 0; i < n; ++i) {
      h[i] = std::max(oracle_at(s.particles(i, 0)), 1e-12);
      sg[i] = loss::kernel_sigma(h[i], n, d);
    }
    const double sigma_bar = std::sqrt(0.3);
    const double extent = 2.0 * sigma_bar;
    const double step = extent / 10.0;
    std::vector<double> pts;
    for (int q = 0; q < 11; ++q) pts.push_back(0.1 - 0.5 * extent + q * step);  // desired anchor
    for (int q = 0; q < 11; ++q) {
      const double x = est - 0.5 * extent + q * step;  // estimate anchor, dedup inside desired box
      bool dup = false;
      for (double y : pts)
        if (std::abs(x - y) < 1e-9) dup = true;
      if (!dup) pts.push_back(x);
    }
    double dens = 0.0;
    for (double x : pts) {
      double recon = 0.0;
      for (int i = 0; i < n; ++i)
        recon += s.weights(i) * h[i] * std::exp(-std::pow(x - s.particles(i, 0), 2) / (2.0 * sg[i] * sg[i]));
      dens += step * std::pow(recon - oracle_at(x), 2);
    }
    double mean = est;
    double var = 0.0;
    for (int i = 0; i < n; ++i) var += s.weights(i) * std::pow(s.particles(i, 0) - mean, 2);
    const double expect = dens + lambda3 * std::abs(var - 0.3);
    CHECK(got == doctest::Approx(expect).epsilon(1e-10));
  }
}

TEST_CASE("total loss aggregation") {
  loss::LossConfig cfg;
  cfg.lambda1 = 0.0;
  cfg.lambda2 = 0.0;
  std::vector<loss::StepTerms> w{{1.0, 2.0}, {3.0, 4.0}};
  CHECK(loss::total_loss(w, cfg) == 0.0);

  cfg.lambda1 = 1.0;
  std::vector<loss::StepTerms> perfect{{0.0, 5.0}, {0.0, 7.0}};
  CHECK(loss::total_loss(perfect, cfg) == 0.0);

  cfg.lambda2 = 0.5;
  std::vector<std::vector<loss::StepTerms>> batch{{{1.0, 2.0}}, {{3.0, 6.0}}};
  const double mean_of_singles = 0.5 * (loss::total_loss(batch[0], cfg) + loss::total_loss(batch[1], cfg));
  CHECK(loss::total_loss_batch(batch, cfg) == doctest::Approx(mean_of_singles).epsilon(1e-14));
}

TEST_CASE("heatmap and ospa gradients flow to particles and weights") {
  Rng rng(6);
  const int n = 4, d = 2;
  ParticleSet teacher = random_set(20, 1, d, rng);
  loss::LossConfig cfg;
  const auto oracle = loss::build_oracle(loss::OracleMode::O1, teacher, std::nullopt, cfg);

  diff::Tensor xj = diff::Tensor::param(n, d);
  diff::Tensor wr = diff::Tensor::param(n, 1);
  Rng r2(8);
  for (auto& v : xj.values()) v = r2.normal();
  for (auto& v : wr.values()) v = 0.2 + r2.uniform();

  loss::GridSpec spec;
  spec.kind = loss::GridSpec::Kind::Random;
  spec.n_samples = 32;
  Rng grng(11);
  ssm::StateVector est(1, d);
  est.sub << 0.1, 0.1;
  const auto grids = loss::build_grids(spec, oracle, est, grng);

  auto build = [&](diff::Tape* t) {
    diff::Tensor wn = diff::div_scalar(t, diff::clamp_min(t, wr, 1e-12), diff::sum_all(t, wr));
    diff::Tensor hm = loss::heatmap_loss_t(t, {xj}, wn, oracle, grids, 0.5);
    diff::Tensor em = diff::weighted_sum_rows(t, xj, wn);
    const auto assign = std::vector<int>{0};
    diff::Tensor acc = loss::ospa_loss_t(t, {em}, oracle.desired, assign);
    return diff::add(t, hm, acc);
  };
  CHECK(testing::gradient_check(build, {xj, wr}, 1e-6) < 1e-4);
}
