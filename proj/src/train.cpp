#include "flockpf/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <numeric>

#include "json.hpp"

namespace flockpf::train {

using diff::Tape;
using diff::Tensor;

void TrainConfig::validate() const {
  if (learning_rate <= 0) throw ConfigError("train: learning rate must be positive");
  if (epochs < 1 || batch_size < 1) throw ConfigError("train: epochs and batch size must be >= 1");
  if (effective_sub_batch() > batch_size) throw ConfigError("train: sub-batch larger than batch");
  if (stray_threshold < 0) throw ConfigError("train: stray threshold must be >= 0");
  if (teacher_n < student_n) throw ConfigError("train: teacher_n must be >= student_n");
  loss.validate();
  hyper.validate();
}

TrainConfig TrainConfig::defaults_for(const ssm::ScenarioModel& model, int n_student, int n_teacher) {
  TrainConfig c;
  c.student_n = n_student;
  c.teacher_n = n_teacher;
  c.student_filter = model.radar ? pf::FilterConfig::aux(n_student) : pf::FilterConfig::sis(n_student);
  c.teacher_filter = model.radar ? pf::FilterConfig::aux(n_teacher) : pf::FilterConfig::sis(n_teacher);
  c.loss.grid.kind = model.radar ? loss::GridSpec::Kind::StagedMeshgrid : loss::GridSpec::Kind::Random;
  return c;
}

DiffStep correct_and_normalize(Tape* tape, const lf::Parameters& params, const pf::ParticleSet& breve) {
  const int n = breve.n(), t = breve.t, d = breve.d_sp;
  const Tensor corr = lf::lf_forward(tape, params, breve);
  const double wscale = breve.normalized ? 1.0 : breve.weights.sum();

  Tensor w_raw(n, 1);
  for (int i = 0; i < n; ++i) w_raw.at(i, 0) = breve.weights(i);
  Tensor dw = diff::scale(tape, diff::slice_cols(tape, corr, t * d, t * d + 1), wscale);
  Tensor w_cl = diff::clamp_min(tape, diff::add(tape, w_raw, dw), pf::kWeightFloor);
  Tensor w_norm = diff::div_scalar(tape, w_cl, diff::sum_all(tape, w_cl));

  DiffStep out;
  out.weights = w_norm;
  out.estimate = ssm::StateVector(t, d);
  for (int j = 0; j < t; ++j) {
    Tensor xj(n, d);
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < d; ++k) xj.at(i, k) = breve.particles(i, j * d + k);
    Tensor cj = diff::add(tape, xj, diff::slice_cols(tape, corr, j * d, (j + 1) * d));
    Tensor ej = diff::weighted_sum_rows(tape, cj, w_norm);
    for (int k = 0; k < d; ++k) out.estimate.sub(j, k) = ej.at(0, k);
    out.corrected_subs.push_back(std::move(cj));
    out.estimate_subs.push_back(std::move(ej));
  }
  return out;
}

namespace {

Tensor finish_step_loss(Tape* tape, const DiffStep& step, const loss::OracleDensity& oracle,
                        const std::vector<loss::Grid>& grids, const loss::LossConfig& config,
                        loss::StepTerms* terms) {
  const auto assignment = loss::ospa_full(oracle.desired, step.estimate, config.ospa_order).assignment;
  Tensor acc = loss::ospa_loss_t(tape, step.estimate_subs, oracle.desired, assignment);
  Tensor hm = loss::heatmap_loss_t(tape, step.corrected_subs, step.weights, oracle, grids, config.lambda3);
  if (terms != nullptr) {
    terms->acc = acc.at(0, 0);
    terms->hm = hm.at(0, 0);
  }
  return diff::add(tape, diff::scale(tape, acc, config.lambda1), diff::scale(tape, hm, config.lambda2));
}

}  // namespace

Tensor step_loss_on_grids(Tape* tape, const lf::Parameters& params, const pf::ParticleSet& breve,
                          const loss::OracleDensity& oracle, const std::vector<loss::Grid>& grids,
                          const loss::LossConfig& config, loss::StepTerms* terms) {
  return finish_step_loss(tape, correct_and_normalize(tape, params, breve), oracle, grids, config, terms);
}

Tensor step_loss(Tape* tape, const lf::Parameters& params, const pf::ParticleSet& breve,
                 const loss::OracleDensity& oracle, const loss::LossConfig& config, Rng& grid_rng,
                 loss::StepTerms* terms) {
  // Grid placement anchors on the corrected estimate at the current values.
  DiffStep step = correct_and_normalize(tape, params, breve);
  const auto grids = loss::build_grids(config.grid, oracle, step.estimate, grid_rng);
  return finish_step_loss(tape, step, oracle, grids, config, terms);
}

int eliminate_strayed(std::vector<char>& active, const std::vector<ssm::StateVector>& estimates,
                      const std::vector<ssm::StateVector>& desired, double zeta) {
  if (active.size() != estimates.size() || active.size() != desired.size())
    throw ConfigError("eliminate_strayed: size mismatch");
  if (!(zeta > 0)) throw ConfigError("eliminate_strayed: zeta must be positive");
  int eliminated = 0;
  for (std::size_t i = 0; i < active.size(); ++i) {
    if (!active[i]) continue;
    if (std::isinf(zeta)) continue;
    const auto res = loss::ospa_full(desired[i], estimates[i]);
    double worst = 0.0;
    for (int j = 0; j < desired[i].t(); ++j)
      worst = std::max(worst, (desired[i].sub.row(j) - estimates[i].sub.row(res.assignment[j])).norm());
    if (worst >= zeta) {
      active[i] = 0;
      ++eliminated;
    }
  }
  return eliminated;
}

std::vector<RolloutStep> rollout_pair(const lf::Parameters& params, const ssm::ScenarioModel& scenario,
                                      const ssm::TrajectoryRecord& trajectory, int n, int teacher_n, Rng& rng) {
  TrainConfig cfg = TrainConfig::defaults_for(scenario, n, teacher_n);
  lf::Module module(params.clone());
  Rng student_rng = rng.derive(streams::kStudent);
  Rng teacher_rng = rng.derive(streams::kTeacher);
  pf::ParticleSet student = pf::ParticleSet::init_at(trajectory.initial_state, n);
  pf::ParticleSet teacher = pf::ParticleSet::init_at(trajectory.initial_state, teacher_n);
  std::vector<RolloutStep> out;
  out.reserve(trajectory.kappa());
  for (int k = 0; k < trajectory.kappa(); ++k) {
    const auto& z = trajectory.measurements[k];
    student = pf::pf_step(scenario, cfg.student_filter, student, z, student_rng, &module);
    teacher = pf::pf_step(scenario, cfg.teacher_filter, teacher, z, teacher_rng);
    RolloutStep s{student, teacher, pf::estimate_state(student), pf::estimate_state(teacher)};
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

struct Optimizer {
  double lr;
  bool momentum;
  double beta;
  std::vector<std::vector<double>> buf;

  void step(const std::vector<Tensor>& params) {
    if (momentum && buf.empty()) {
      buf.resize(params.size());
      for (std::size_t p = 0; p < params.size(); ++p) buf[p].assign(params[p].size(), 0.0);
    }
    for (std::size_t p = 0; p < params.size(); ++p) {
      Tensor t = params[p];
      if (!t.has_grad()) continue;
      const auto& g = t.grad();
      auto& v = t.values();
      if (momentum) {
        auto& m = buf[p];
        for (std::size_t i = 0; i < v.size(); ++i) {
          m[i] = beta * m[i] + g[i];
          v[i] -= lr * m[i];
        }
      } else {
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
      }
    }
  }
};

double auto_zeta(const loss::OracleDensity& oracle) {
  double acc = 0.0;
  for (int j = 0; j < oracle.t; ++j) acc += oracle.avg_std(j);
  return 5.0 * acc / oracle.t;
}

void write_state_file(const std::string& path, int epoch, uint64_t seed, double best, int best_epoch) {
  if (path.empty()) return;
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["seed"] = seed;
  j["best_criterion"] = best;
  j["best_epoch"] = best_epoch;
  std::ofstream f(path);
  f << j.dump(1) << "\n";
}

}  // namespace

double validation_criterion(const lf::Parameters* params, const ssm::ScenarioModel& scenario,
                            const std::vector<ssm::TrajectoryRecord>& records, const TrainConfig& config) {
  if (records.empty()) throw ConfigError("validation: empty record set");
  std::unique_ptr<lf::Module> module;
  if (params != nullptr) module = std::make_unique<lf::Module>(params->clone());
  Rng base(config.seed);
  Rng val0 = base.derive(streams::kValidation);
  double total = 0.0;
  for (std::size_t r = 0; r < records.size(); ++r) {
    const auto& rec = records[r];
    if (!rec.true_states.has_value()) throw ConfigError("validation: records must carry true states");
    Rng rng = val0.derive(r);
    pf::ParticleSet set = pf::ParticleSet::init_at(rec.initial_state, config.student_n);
    double acc = 0.0;
    int count = 0;
    double last = 0.0;
    try {
      for (int k = 0; k < rec.kappa(); ++k) {
        set = pf::pf_step(scenario, config.student_filter, set, rec.measurements[k], rng, module.get());
        const double v = loss::ospa(rec.true_states->at(k), pf::estimate_state(set), config.loss.ospa_cutoff);
        last = v;
        if (config.window.contains(k + 1)) {
          acc += v;
          ++count;
        }
      }
    } catch (const NumericalError&) {
      last = 1e12;  // a collapsed run scores worst
      acc = 1e12;
      count = 1;
    }
    total += config.keep_best == KeepBest::LastStepOspa ? last : (count > 0 ? acc / count : last);
  }
  return total / static_cast<double>(records.size());
}

TrainResult train(const std::vector<ssm::TrajectoryRecord>& train_set,
                  const std::vector<ssm::TrajectoryRecord>& val_set, const ssm::ScenarioModel& scenario,
                  const TrainConfig& config, const lf::Parameters* initial) {
  config.validate();
  if (train_set.empty()) throw ConfigError("train: empty training set");
  const bool unsupervised = config.loss.oracle_mode == loss::OracleMode::O1;
  if (!unsupervised)
    for (const auto& r : train_set)
      if (!r.true_states.has_value()) throw ConfigError("train: O2 requires true states in the training set");

  Rng master(config.seed);
  Rng init_rng = master.derive(streams::kInit);
  lf::Parameters params = initial != nullptr ? initial->clone() : lf::Parameters::init(config.hyper, scenario.d_sp, init_rng);
  const auto param_tensors = params.tensors();
  Optimizer opt{config.learning_rate, config.momentum, config.momentum_beta, {}};
  lf::Module module(params);  // shares storage with params: updates apply immediately

  TrainResult result{params.clone(), {}, std::numeric_limits<double>::infinity(), -1, false};

  std::ofstream loss_log;
  if (!config.loss_log_path.empty()) {
    loss_log.open(config.loss_log_path);
    loss_log << "epoch,time_step,batch,L_acc,L_hm,total\n";
  }
  std::ofstream metrics;
  if (!config.metrics_path.empty()) {
    metrics.open(config.metrics_path);
    metrics << "epoch,mean_update_loss,val_criterion,eliminated,aborted_batches\n";
  }

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    Rng erng = master.derive(streams::kShuffle).derive(epoch);
    std::vector<int> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[erng.uniform_int(i)]);

    EpochMetrics em;
    em.epoch = epoch;
    double loss_sum = 0.0;
    long loss_count = 0;

    const int q_total = (static_cast<int>(order.size()) + config.batch_size - 1) / config.batch_size;
    for (int q = 0; q < q_total; ++q) {
      const int from = q * config.batch_size;
      const int to = std::min<int>(order.size(), from + config.batch_size);
      const int bsize = to - from;

      std::vector<const ssm::TrajectoryRecord*> recs(bsize);
      std::vector<pf::ParticleSet> students(bsize), teachers(bsize);
      std::vector<Rng> student_rng, teacher_rng;
      std::vector<char> active(bsize, 1);
      for (int i = 0; i < bsize; ++i) {
        recs[i] = &train_set[order[from + i]];
        students[i] = pf::ParticleSet::init_at(recs[i]->initial_state, config.student_n);
        teachers[i] = pf::ParticleSet::init_at(recs[i]->initial_state, config.teacher_n);
        Rng traj = master.derive(streams::kBatchBase + epoch).derive(q).derive(i);
        student_rng.push_back(traj.derive(streams::kStudent));
        teacher_rng.push_back(traj.derive(streams::kTeacher));
      }

      const int kappa = recs[0]->kappa();
      bool batch_alive = true;
      for (int k = 1; k <= kappa && batch_alive; ++k) {
        std::vector<pf::ParticleSet> breves(bsize);
        for (int i = 0; i < bsize; ++i) {
          if (!active[i]) continue;
          const auto& z = recs[i]->measurements[k - 1];
          teachers[i] = pf::pf_step(scenario, config.teacher_filter, teachers[i], z, teacher_rng[i]);
          try {
            students[i] = pf::pf_step(scenario, config.student_filter, students[i], z, student_rng[i], &module,
                                      &breves[i]);
          } catch (const NumericalError&) {
            // student flow collapsed (e.g. the correction drove every
            // weight negative): drop the trajectory like a strayed one
            active[i] = 0;
            ++em.eliminated;
          }
        }

        std::vector<loss::OracleDensity> oracles(bsize);
        std::vector<char> have_oracle(bsize, 0);
        auto oracle_for = [&](int i) -> const loss::OracleDensity& {
          if (!have_oracle[i]) {
            std::optional<ssm::StateVector> truth;
            if (config.loss.oracle_mode == loss::OracleMode::O2) truth = recs[i]->true_states->at(k - 1);
            oracles[i] = loss::build_oracle(config.loss.oracle_mode, teachers[i], truth, config.loss);
            have_oracle[i] = 1;
          }
          return oracles[i];
        };

        if (config.window.contains(k)) {
          // Fresh random sub-batch of the still-active trajectories.
          std::vector<int> pool;
          for (int i = 0; i < bsize; ++i)
            if (active[i]) pool.push_back(i);
          if (!pool.empty()) {
            Rng srng = master.derive(streams::kSubBatch).derive(epoch).derive(q).derive(k);
            for (std::size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[srng.uniform_int(i)]);
            pool.resize(std::min<std::size_t>(pool.size(), config.effective_sub_batch()));

            Tape tape;
            Tensor total;
            double acc_sum = 0.0, hm_sum = 0.0;
            Rng grid_rng = master.derive(streams::kGrid).derive(epoch).derive(q).derive(k);
            for (int i : pool) {
              loss::StepTerms terms;
              Tensor li = step_loss(&tape, params, breves[i], oracle_for(i), config.loss, grid_rng, &terms);
              acc_sum += terms.acc;
              hm_sum += terms.hm;
              total = total.defined() ? diff::add(&tape, total, li) : li;
            }
            total = diff::scale(&tape, total, 1.0 / pool.size());
            const double lval = total.at(0, 0);
            if (!std::isfinite(lval)) {
              result.aborted = true;
              if (metrics.is_open()) metrics.flush();
              return result;
            }
            for (const auto& t : param_tensors) t.zero_grad();
            tape.backward(total);
            opt.step(param_tensors);
            loss_sum += lval;
            ++loss_count;
            if (loss_log.is_open())
              loss_log << epoch << "," << k << "," << q << "," << acc_sum / pool.size() << ","
                       << hm_sum / pool.size() << "," << lval << "\n";
          }
        }

        // Stray elimination, after the update (the mask only shrinks).
        std::vector<ssm::StateVector> estimates(bsize), desired(bsize);
        double zeta = config.stray_threshold;
        for (int i = 0; i < bsize; ++i) {
          if (!active[i]) {
            estimates[i] = ssm::StateVector(scenario.t, scenario.d_sp);
            desired[i] = estimates[i];
            continue;
          }
          estimates[i] = pf::estimate_state(students[i]);
          desired[i] = config.loss.oracle_mode == loss::OracleMode::O2 ? recs[i]->true_states->at(k - 1)
                                                                       : pf::estimate_state(teachers[i]);
          if (zeta <= 0) zeta = std::max(zeta, auto_zeta(oracle_for(i)));
        }
        if (zeta <= 0) zeta = std::numeric_limits<double>::infinity();
        em.eliminated += eliminate_strayed(active, estimates, desired, zeta);
        batch_alive = std::any_of(active.begin(), active.end(), [](char a) { return a != 0; });
      }
      if (!batch_alive) ++em.aborted_batches;
    }

    em.mean_update_loss = loss_count > 0 ? loss_sum / loss_count : 0.0;
    em.val_criterion = val_set.empty() ? em.mean_update_loss : validation_criterion(&params, scenario, val_set, config);
    result.epochs.push_back(em);
    if (metrics.is_open())
      metrics << em.epoch << "," << em.mean_update_loss << "," << em.val_criterion << "," << em.eliminated << ","
              << em.aborted_batches << "\n";

    if (em.val_criterion < result.best_criterion) {
      result.best_criterion = em.val_criterion;
      result.best_epoch = epoch;
      result.params = params.clone();
      if (!config.checkpoint_path.empty()) {
        lf::CheckpointMeta meta;
        meta.scenario_id = scenario.id();
        meta.snr_db = scenario.snr_db;
        meta.n_particles = config.student_n;
        meta.teacher_n = config.teacher_n;
        meta.epoch = epoch;
        meta.loss = em.val_criterion;
        lf::save_checkpoint(result.params, meta, config.checkpoint_path);
      }
    }
    write_state_file(config.state_path, epoch, config.seed, result.best_criterion, result.best_epoch);
  }
  return result;
}

}  // namespace flockpf::train
