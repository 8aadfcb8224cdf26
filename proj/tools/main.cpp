#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <numeric>

#include "CLI11.hpp"
#include "flockpf/dataset.hpp"
#include "flockpf/lf.hpp"
#include "flockpf/loss.hpp"
#include "flockpf/pf.hpp"
#include "flockpf/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace flockpf;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

struct ScenarioArgs {
  std::string kind = "X1";
  double snr_db = 0.0;
  int t = 1;
  int calib_kappa = 0;
  double sensor_perturb_std = 0.5;

  ssm::ScenarioModel build() const {
    ssm::ScenarioModel::Options opts;
    opts.t = t;
    opts.calib_kappa = calib_kappa;
    opts.sensor_perturb_std = sensor_perturb_std;
    return ssm::ScenarioModel::make(ssm::scenario_kind_from_string(kind), snr_db, opts);
  }
};

/// Pre-scan for --config and load it; CLI flags then override the loaded
/// values because options are bound to already-updated defaults.
json load_config_arg(int argc, char** argv) {
  for (int i = 1; i + 1 < argc; ++i)
    if (std::string(argv[i]) == "--config") {
      std::ifstream f(argv[i + 1]);
      if (!f) throw ConfigError(std::string("cannot open config: ") + argv[i + 1]);
      json j;
      f >> j;
      return j;
    }
  return json::object();
}

template <typename T>
void from_config(const json& cfg, const char* section, const char* key, T& value) {
  if (cfg.contains(section) && cfg.at(section).contains(key)) value = cfg.at(section).at(key).get<T>();
}

void write_config_copy(const ordered_json& resolved, const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::ofstream f(out_dir + "/config.json");
  f << resolved.dump(1) << "\n";
}

void add_scenario_options(CLI::App* cmd, ScenarioArgs& s) {
  cmd->add_option("--scenario", s.kind, "scenario kind (X1, X2, X3, Y1, Y2, Y3)");
  cmd->add_option("--snr", s.snr_db, "SNR in dB");
  cmd->add_option("--targets", s.t, "number of sub-states t");
  cmd->add_option("--calib-kappa", s.calib_kappa, "horizon the stated SNR is calibrated over");
  cmd->add_option("--perturb-std", s.sensor_perturb_std, "Y2 sensor position jitter (m)");
}

void scenario_from_config(const json& cfg, ScenarioArgs& s) {
  from_config(cfg, "scenario", "kind", s.kind);
  from_config(cfg, "scenario", "snr_db", s.snr_db);
  from_config(cfg, "scenario", "t", s.t);
  from_config(cfg, "scenario", "calib_kappa", s.calib_kappa);
  from_config(cfg, "scenario", "sensor_perturb_std", s.sensor_perturb_std);
}

ordered_json scenario_json(const ScenarioArgs& s) {
  return {{"kind", s.kind}, {"snr_db", s.snr_db}, {"t", s.t}, {"calib_kappa", s.calib_kappa},
          {"sensor_perturb_std", s.sensor_perturb_std}};
}

struct LossArgs {
  double lambda1 = 1.0, lambda2 = 1.0, lambda3 = 1.0;
  double ospa_cutoff = 10.0;  // evaluation cutoff; training uses infinity
  std::string oracle = "O1";
  int teacher_n = 300;
  double teacher_kernel_sigma = 0.0;
  std::string grid_kind;  // empty: per-scenario default
  int grid_stages = 5, grid_points = 7, grid_samples = 256;
  double grid_ratio = 2.0, grid_extent = 2.0, grid_std_factor = 2.0;

  loss::LossConfig build(bool radar) const {
    loss::LossConfig c;
    c.lambda1 = lambda1;
    c.lambda2 = lambda2;
    c.lambda3 = lambda3;
    c.ospa_cutoff = ospa_cutoff;
    c.oracle_mode = oracle == "O2" ? loss::OracleMode::O2 : loss::OracleMode::O1;
    c.teacher_n = teacher_n;
    c.teacher_kernel_sigma = teacher_kernel_sigma;
    const std::string kind = grid_kind.empty() ? (radar ? "staged" : "random") : grid_kind;
    c.grid.kind = kind == "staged" ? loss::GridSpec::Kind::StagedMeshgrid : loss::GridSpec::Kind::Random;
    c.grid.stages = grid_stages;
    c.grid.points_per_axis = grid_points;
    c.grid.n_samples = grid_samples;
    c.grid.resolution_ratio = grid_ratio;
    c.grid.base_extent_sigmas = grid_extent;
    c.grid.sample_std_factor = grid_std_factor;
    return c;
  }
};

void add_loss_options(CLI::App* cmd, LossArgs& l) {
  cmd->add_option("--lambda1", l.lambda1, "accuracy term weight");
  cmd->add_option("--lambda2", l.lambda2, "heatmap term weight");
  cmd->add_option("--lambda3", l.lambda3, "variance term weight");
  cmd->add_option("--cutoff", l.ospa_cutoff, "evaluation OSPA cutoff");
  cmd->add_option("--oracle", l.oracle, "oracle mode (O1 or O2)");
  cmd->add_option("--teacher-n", l.teacher_n, "teacher particle count");
  cmd->add_option("--teacher-sigma", l.teacher_kernel_sigma, "fixed teacher kernel std (0 = bandwidth rule)");
  cmd->add_option("--grid-kind", l.grid_kind, "grid kind (staged or random)");
  cmd->add_option("--grid-stages", l.grid_stages, "staged grid stage count");
  cmd->add_option("--grid-points", l.grid_points, "staged grid points per axis");
  cmd->add_option("--grid-samples", l.grid_samples, "random grid sample count");
}

void loss_from_config(const json& cfg, LossArgs& l) {
  from_config(cfg, "loss", "lambda1", l.lambda1);
  from_config(cfg, "loss", "lambda2", l.lambda2);
  from_config(cfg, "loss", "lambda3", l.lambda3);
  from_config(cfg, "loss", "ospa_cutoff", l.ospa_cutoff);
  from_config(cfg, "loss", "oracle", l.oracle);
  from_config(cfg, "loss", "teacher_n", l.teacher_n);
  from_config(cfg, "loss", "teacher_kernel_sigma", l.teacher_kernel_sigma);
  from_config(cfg, "loss", "grid_kind", l.grid_kind);
  from_config(cfg, "loss", "grid_stages", l.grid_stages);
  from_config(cfg, "loss", "grid_points", l.grid_points);
  from_config(cfg, "loss", "grid_samples", l.grid_samples);
}

pf::FilterConfig filter_for(const ssm::ScenarioModel& model, int n, bool resample) {
  return model.radar ? pf::FilterConfig::aux(n, resample) : pf::FilterConfig::sis(n, resample);
}

struct EvalRow {
  std::string scenario_id;
  double snr_db;
  int t, n, rep;
  double mean_ospa, std_ospa;
  int n_traj;
};

double run_filter_ospa(const ssm::ScenarioModel& model, const pf::FilterConfig& cfg,
                       const ssm::TrajectoryRecord& rec, const lf::Module* module, double cutoff, Rng rng,
                       bool pinned) {
  if (!rec.true_states.has_value()) throw ConfigError("eval: records must carry true states");
  double acc = 0.0;
  pf::ParticleSet set = pf::ParticleSet::init_at(rec.initial_state, cfg.n_particles);
  for (int k = 0; k < rec.kappa(); ++k) {
    ssm::StateVector est;
    if (pinned) {
      est = rec.true_states->at(k);
    } else {
      set = pf::pf_step(model, cfg, set, rec.measurements[k], rng, module);
      est = pf::estimate_state(set);
    }
    acc += loss::ospa(rec.true_states->at(k), est, cutoff);
  }
  return acc / rec.kappa();
}

int cmd_generate(const ScenarioArgs& sargs, int kappa, int n_train, int n_val, int n_test, uint64_t seed,
                 int threads, const std::string& out_dir) {
  if (kappa < 1 || n_train < 1) throw ConfigError("generate: kappa and n-train must be >= 1");
  const ssm::ScenarioModel model = sargs.build();
  fs::create_directories(out_dir);

  ssm::DatasetManifest manifest;
  manifest.scenario_id = model.id();
  manifest.kind = ssm::to_string(model.kind);
  manifest.snr_db = model.snr_db;
  manifest.t = model.t;
  manifest.d_sp = model.d_sp;
  manifest.d_m = model.d_m;
  manifest.kappa = kappa;
  manifest.seed = seed;

  const std::vector<std::pair<std::string, int>> splits{{"train", n_train}, {"val", n_val}, {"test", n_test}};
  uint64_t tag = 0;
  for (const auto& [name, count] : splits) {
    if (count < 1) {
      ++tag;
      continue;
    }
    const auto records = ssm::generate_dataset(model, count, kappa, splitmix64(seed + tag), threads);
    ssm::save_records(records, out_dir + "/" + name + ".jsonl");
    manifest.splits.emplace_back(name, count);
    ++tag;
  }
  ssm::save_manifest(manifest, out_dir + "/manifest.json");
  std::cout << "wrote " << out_dir << " (" << manifest.scenario_id << ", kappa=" << kappa << ")\n";
  return 0;
}

int cmd_train(const ScenarioArgs& sargs, const LossArgs& largs, const std::string& data_dir,
              const std::string& out_dir, train::TrainConfig base, const std::string& init_ckpt) {
  const auto manifest = ssm::load_manifest(data_dir + "/manifest.json");
  ScenarioArgs sa = sargs;
  sa.kind = manifest.kind;
  sa.snr_db = manifest.snr_db;
  sa.t = manifest.t;
  const ssm::ScenarioModel model = sa.build();

  auto train_set = ssm::load_records(data_dir + "/train.jsonl");
  std::vector<ssm::TrajectoryRecord> val_set;
  if (fs::exists(data_dir + "/val.jsonl")) val_set = ssm::load_records(data_dir + "/val.jsonl");

  fs::create_directories(out_dir);
  train::TrainConfig cfg = base;
  cfg.loss = largs.build(model.radar);
  cfg.teacher_n = cfg.loss.teacher_n;  // one teacher serves the oracle and the reference flow
  // training-side OSPA uses an infinite cutoff
  cfg.loss.ospa_cutoff = std::numeric_limits<double>::infinity();
  cfg.student_filter = filter_for(model, cfg.student_n, true);
  cfg.teacher_filter = filter_for(model, cfg.teacher_n, true);
  cfg.metrics_path = out_dir + "/metrics.csv";
  cfg.loss_log_path = out_dir + "/loss_log.csv";
  cfg.checkpoint_path = out_dir + "/checkpoint.json";
  cfg.state_path = out_dir + "/train_state.json";

  std::unique_ptr<lf::Parameters> init;
  if (!init_ckpt.empty()) {
    auto ck = lf::load_checkpoint(init_ckpt);
    if (ck.params.d_sp != model.d_sp) throw ConfigError("train: checkpoint d_sp does not match scenario");
    cfg.hyper = ck.params.hyper;
    init = std::make_unique<lf::Parameters>(std::move(ck.params));
  }

  const auto result = train::train(train_set, val_set, model, cfg, init.get());
  if (result.aborted) {
    std::cerr << "training aborted on a non-finite loss; kept the last good parameters\n";
    throw NumericalError("train: non-finite loss");
  }
  std::cout << "best criterion " << result.best_criterion << " at epoch " << result.best_epoch << "\n";
  return 0;
}

int cmd_eval(const ScenarioArgs& sargs, const LossArgs& largs, const std::string& data_dir,
             const std::string& records_path, const std::string& ckpt_path, std::vector<int> n_list, int reps,
             uint64_t seed, const std::string& filter_kind, const std::string& out_dir) {
  ScenarioArgs sa = sargs;
  std::string rec_path = records_path;
  if (!data_dir.empty()) {
    const auto manifest = ssm::load_manifest(data_dir + "/manifest.json");
    sa.kind = manifest.kind;
    sa.snr_db = manifest.snr_db;
    sa.t = manifest.t;
    if (rec_path.empty()) rec_path = data_dir + "/test.jsonl";
  }
  if (rec_path.empty()) throw ConfigError("eval: need --data or --records");
  const ssm::ScenarioModel model = sa.build();
  const auto records = ssm::load_records(rec_path);
  if (records.empty()) throw ConfigError("eval: empty record set");

  std::unique_ptr<lf::Module> module;
  if (!ckpt_path.empty()) {
    auto ck = lf::load_checkpoint(ckpt_path);
    if (ck.params.d_sp != model.d_sp)
      throw ConfigError("eval: checkpoint d_sp " + std::to_string(ck.params.d_sp) +
                        " does not match scenario d_sp " + std::to_string(model.d_sp));
    module = std::make_unique<lf::Module>(std::move(ck.params));
  }
  const bool pinned = filter_kind == "pinned";
  if (n_list.empty()) n_list = {100};

  fs::create_directories(out_dir);
  std::ofstream csv(out_dir + "/eval.csv");
  csv << "scenario,snr_db,t,n,rep,mean_ospa,std_ospa,n_traj\n";
  Rng base(seed);
  for (int n : n_list) {
    const pf::FilterConfig fcfg = filter_for(model, n, true);
    for (int rep = 0; rep < reps; ++rep) {
      double acc = 0.0, acc2 = 0.0;
      for (std::size_t r = 0; r < records.size(); ++r) {
        const double v = run_filter_ospa(model, fcfg, records[r], module.get(), largs.ospa_cutoff,
                                         base.derive(n).derive(rep).derive(r), pinned);
        acc += v;
        acc2 += v * v;
      }
      const double mean = acc / records.size();
      const double var = std::max(0.0, acc2 / records.size() - mean * mean);
      csv << model.id() << "," << model.snr_db << "," << model.t << "," << n << "," << rep << "," << mean << ","
          << std::sqrt(var) << "," << records.size() << "\n";
      std::cout << "n=" << n << " rep=" << rep << " mean OSPA " << mean << "\n";
    }
  }
  return 0;
}

int cmd_bench(const ScenarioArgs& sargs, const std::string& ckpt_path, lf::Hyperparams hyper,
              std::vector<int> n_list, int steps, uint64_t seed, const std::string& out_dir) {
  const ssm::ScenarioModel model = sargs.build();
  if (n_list.empty()) n_list = {25, 100};
  if (steps < 100) steps = 100;

  std::unique_ptr<lf::Module> module;
  if (!ckpt_path.empty()) {
    auto ck = lf::load_checkpoint(ckpt_path);
    module = std::make_unique<lf::Module>(std::move(ck.params));
    hyper = module->params().hyper;
  } else {
    Rng rng(seed);
    module = std::make_unique<lf::Module>(lf::Parameters::init(hyper, model.d_sp, rng));
  }

  const auto rec = ssm::generate_trajectory(model, 16, seed);
  fs::create_directories(out_dir);
  std::ofstream csv(out_dir + "/bench.csv");
  csv << "filter,n,t,median_ms,fpm_embedding,fpm_attention,fpm_final,fpm_total\n";

  for (int n : n_list) {
    const pf::FilterConfig fcfg = filter_for(model, n, true);
    for (const bool with_module : {false, true}) {
      Rng rng(seed + n);
      pf::ParticleSet set = pf::ParticleSet::init_at(rec.initial_state, n);
      const lf::Module* m = with_module ? module.get() : nullptr;
      for (int w = 0; w < 10; ++w) set = pf::pf_step(model, fcfg, set, rec.measurements[w % rec.kappa()], rng, m);
      std::vector<double> ms(steps);
      for (int i = 0; i < steps; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        set = pf::pf_step(model, fcfg, set, rec.measurements[i % rec.kappa()], rng, m);
        ms[i] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      }
      std::nth_element(ms.begin(), ms.begin() + steps / 2, ms.end());
      const double median = ms[steps / 2];
      const auto fpm = lf::fpm_count(hyper, model.d_sp, model.t, n);
      csv << (with_module ? "lf-" : "") << (model.radar ? "aux" : "sis") << "," << n << "," << model.t << ","
          << median << ",";
      if (with_module)
        csv << fpm.embedding << "," << fpm.attention << "," << fpm.final_fc << "," << fpm.total << "\n";
      else
        csv << "0,0,0,0\n";
      std::cout << (with_module ? "lf-" : "plain ") << "n=" << n << " median " << median << " ms\n";
    }
  }
  return 0;
}

int cmd_inspect(const std::string& ckpt_path) {
  const auto ck = lf::load_checkpoint(ckpt_path);
  std::cout << "format lf-ckpt-v1\n";
  std::cout << "hyper P=" << ck.params.hyper.P << " J=" << ck.params.hyper.J << " S=" << ck.params.hyper.S
            << " E=" << ck.params.hyper.E << " B=" << ck.params.hyper.B << " d_sp=" << ck.params.d_sp << "\n";
  std::cout << "meta scenario=" << ck.meta.scenario_id << " snr=" << ck.meta.snr_db << " N=" << ck.meta.n_particles
            << " teacher_n=" << ck.meta.teacher_n << " epoch=" << ck.meta.epoch << " loss=" << ck.meta.loss << "\n";
  std::cout << "parameters " << ck.params.parameter_count() << "\n";
  for (const auto& [name, t] : ck.params.named_tensors()) {
    double norm = 0.0;
    for (double v : t.values()) norm += v * v;
    std::cout << name << " [" << t.rows() << "x" << t.cols() << "] l2=" << std::sqrt(norm) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    const json cfg = load_config_arg(argc, argv);

    CLI::App app{"sequential Monte Carlo tracking toolkit with a learned flock correction"};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path, "JSON config file; flags override its values");

    ScenarioArgs sargs;
    scenario_from_config(cfg, sargs);
    LossArgs largs;
    loss_from_config(cfg, largs);

    // generate
    auto* gen = app.add_subcommand("generate", "generate dataset splits");
    int kappa = 15, n_train = 500, n_val = 100, n_test = 100, threads = 1;
    uint64_t seed = 1;
    std::string out_dir = "out";
    from_config(cfg, "generate", "kappa", kappa);
    from_config(cfg, "generate", "n_train", n_train);
    from_config(cfg, "generate", "n_val", n_val);
    from_config(cfg, "generate", "n_test", n_test);
    from_config(cfg, "generate", "seed", seed);
    from_config(cfg, "generate", "threads", threads);
    from_config(cfg, "generate", "out", out_dir);
    add_scenario_options(gen, sargs);
    gen->add_option("--kappa", kappa, "trajectory length");
    gen->add_option("--n-train", n_train, "training trajectories");
    gen->add_option("--n-val", n_val, "validation trajectories");
    gen->add_option("--n-test", n_test, "test trajectories");
    gen->add_option("--seed", seed, "master seed");
    gen->add_option("--threads", threads, "worker threads");
    gen->add_option("--out", out_dir, "output directory");

    // train
    auto* tr = app.add_subcommand("train", "train the correction module");
    std::string data_dir, init_ckpt;
    train::TrainConfig tcfg;
    from_config(cfg, "train", "learning_rate", tcfg.learning_rate);
    from_config(cfg, "train", "epochs", tcfg.epochs);
    from_config(cfg, "train", "batch_size", tcfg.batch_size);
    from_config(cfg, "train", "sub_batch_size", tcfg.sub_batch_size);
    from_config(cfg, "train", "student_n", tcfg.student_n);
    from_config(cfg, "train", "teacher_n", tcfg.teacher_n);
    from_config(cfg, "train", "stray_threshold", tcfg.stray_threshold);
    from_config(cfg, "train", "seed", tcfg.seed);
    from_config(cfg, "train", "window_from", tcfg.window.from);
    from_config(cfg, "train", "window_to", tcfg.window.to);
    from_config(cfg, "hyper", "P", tcfg.hyper.P);
    from_config(cfg, "hyper", "J", tcfg.hyper.J);
    from_config(cfg, "hyper", "S", tcfg.hyper.S);
    from_config(cfg, "hyper", "E", tcfg.hyper.E);
    from_config(cfg, "hyper", "B", tcfg.hyper.B);
    tr->add_option("--data", data_dir, "dataset directory (manifest + splits)")->required();
    tr->add_option("--out", out_dir, "output directory");
    tr->add_option("--init-ckpt", init_ckpt, "checkpoint to fine-tune from");
    tr->add_option("--lr", tcfg.learning_rate, "learning rate");
    tr->add_option("--epochs", tcfg.epochs, "epochs");
    tr->add_option("--batch", tcfg.batch_size, "batch size");
    tr->add_option("--sub-batch", tcfg.sub_batch_size, "sub-batch size (0 = batch/10)");
    tr->add_option("--student-n", tcfg.student_n, "student particle count");
    tr->add_option("--zeta", tcfg.stray_threshold, "stray distance threshold (0 = auto)");
    tr->add_option("--seed", tcfg.seed, "seed");
    tr->add_option("--window-from", tcfg.window.from, "first loss time-step (1-based)");
    tr->add_option("--window-to", tcfg.window.to, "last loss time-step");
    tr->add_option("--p", tcfg.hyper.P, "embedding width P");
    tr->add_option("--j", tcfg.hyper.J, "flock-update blocks J");
    tr->add_option("--s", tcfg.hyper.S, "attention blocks S");
    tr->add_option("--e", tcfg.hyper.E, "sub-embedding count E");
    tr->add_option("--b", tcfg.hyper.B, "FC width multiplier B");
    std::string keep_best = "mean";
    from_config(cfg, "train", "keep_best", keep_best);
  from_config(cfg, "train", "momentum", tcfg.momentum);
    tr->add_option("--keep-best", keep_best, "criterion: mean or last");
  tr->add_flag("--momentum", tcfg.momentum, "SGD momentum (0.9)");
    add_scenario_options(tr, sargs);
    add_loss_options(tr, largs);

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate filters on a test split");
    std::string records_path, ckpt_path, filter_kind = "auto";
    std::vector<int> n_list;
    int reps = 1;
    from_config(cfg, "eval", "reps", reps);
    ev->add_option("--data", data_dir, "dataset directory");
    ev->add_option("--records", records_path, "explicit records file");
    ev->add_option("--ckpt", ckpt_path, "correction checkpoint");
    ev->add_option("--n", n_list, "particle counts to sweep");
    ev->add_option("--reps", reps, "repetitions per cell");
    ev->add_option("--seed", seed, "seed");
    ev->add_option("--filter", filter_kind, "auto or pinned (truth oracle)");
    ev->add_option("--out", out_dir, "output directory");
    add_scenario_options(ev, sargs);
    add_loss_options(ev, largs);

    // bench
    auto* be = app.add_subcommand("bench", "per-step latency benchmark");
    int bench_steps = 200;
    lf::Hyperparams bench_hyper;
    be->add_option("--ckpt", ckpt_path, "correction checkpoint");
    be->add_option("--n", n_list, "particle counts");
    be->add_option("--steps", bench_steps, "timed steps (>= 100)");
    be->add_option("--seed", seed, "seed");
    be->add_option("--out", out_dir, "output directory");
    be->add_option("--p", bench_hyper.P, "embedding width P");
    be->add_option("--j", bench_hyper.J, "flock-update blocks J");
    be->add_option("--s", bench_hyper.S, "attention blocks S");
    be->add_option("--e", bench_hyper.E, "sub-embedding count E");
    be->add_option("--b", bench_hyper.B, "FC width multiplier B");
    add_scenario_options(be, sargs);

    // inspect
    auto* in = app.add_subcommand("inspect", "dump checkpoint hyperparameters and norms");
    in->add_option("--ckpt", ckpt_path, "checkpoint path")->required();

    CLI11_PARSE(app, argc, argv);

    ordered_json resolved;
    resolved["scenario"] = scenario_json(sargs);

    if (gen->parsed()) {
      resolved["generate"] = {{"kappa", kappa},   {"n_train", n_train}, {"n_val", n_val},
                              {"n_test", n_test}, {"seed", seed},       {"threads", threads}};
      write_config_copy(resolved, out_dir);
      return cmd_generate(sargs, kappa, n_train, n_val, n_test, seed, threads, out_dir);
    }
    if (tr->parsed()) {
      tcfg.keep_best = keep_best == "last" ? train::KeepBest::LastStepOspa : train::KeepBest::MeanWindowOspa;
      resolved["train"] = {{"learning_rate", tcfg.learning_rate},
                           {"epochs", tcfg.epochs},
                           {"batch_size", tcfg.batch_size},
                           {"sub_batch_size", tcfg.sub_batch_size},
                           {"student_n", tcfg.student_n},
                           {"teacher_n", tcfg.teacher_n},
                           {"stray_threshold", tcfg.stray_threshold},
                           {"seed", tcfg.seed},
                           {"window_from", tcfg.window.from},
                           {"window_to", tcfg.window.to},
                           {"keep_best", keep_best}};
      resolved["hyper"] = {{"P", tcfg.hyper.P}, {"J", tcfg.hyper.J}, {"S", tcfg.hyper.S},
                           {"E", tcfg.hyper.E}, {"B", tcfg.hyper.B}};
      resolved["loss"] = {{"lambda1", largs.lambda1},   {"lambda2", largs.lambda2},
                          {"lambda3", largs.lambda3},   {"oracle", largs.oracle},
                          {"teacher_n", largs.teacher_n}, {"grid_kind", largs.grid_kind},
                          {"grid_samples", largs.grid_samples}};
      write_config_copy(resolved, out_dir);
      return cmd_train(sargs, largs, data_dir, out_dir, tcfg, init_ckpt);
    }
    if (ev->parsed()) {
      resolved["eval"] = {{"reps", reps}, {"seed", seed}, {"filter", filter_kind}, {"cutoff", largs.ospa_cutoff}};
      write_config_copy(resolved, out_dir);
      return cmd_eval(sargs, largs, data_dir, records_path, ckpt_path, n_list, reps, seed, filter_kind, out_dir);
    }
    if (be->parsed()) {
      resolved["bench"] = {{"steps", bench_steps}, {"seed", seed}};
      write_config_copy(resolved, out_dir);
      return cmd_bench(sargs, ckpt_path, bench_hyper, n_list, bench_steps, seed, out_dir);
    }
    if (in->parsed()) return cmd_inspect(ckpt_path);
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
