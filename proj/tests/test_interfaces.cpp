#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "flockpf/dataset.hpp"
#include "flockpf/lf.hpp"
#include "json.hpp"

using namespace flockpf;
namespace fs = std::filesystem;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream f(path);
  REQUIRE(f.good());
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(FLOCKPF_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  return std::system(cmd.c_str());
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("dataset round trip and determinism") {
  ssm::ScenarioModel m;
  m.kind = ssm::ScenarioKind::X1;
  m.d_sp = 2;
  m.d_m = 2;
  m.t = 1;
  m.A = 0.9 * Eigen::MatrixXd::Identity(2, 2);
  m.C = Eigen::MatrixXd::Identity(2, 2);
  m.sigma_v = 0.2 * Eigen::MatrixXd::Identity(2, 2);
  m.sigma_e = 0.2 * Eigen::MatrixXd::Identity(2, 2);
  m = ssm::ScenarioModel::from_spec(std::move(m));

  const auto records = ssm::generate_dataset(m, 10, 5, 42);
  TempDir dir("flockpf_dataset_test");
  const std::string path = dir.str() + "/data.jsonl";
  ssm::save_records(records, path);
  const auto loaded = ssm::load_records(path);
  REQUIRE(loaded.size() == records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    CHECK(loaded[i].scenario_id == records[i].scenario_id);
    CHECK((loaded[i].initial_state.sub - records[i].initial_state.sub).cwiseAbs().maxCoeff() == 0.0);
    for (int k = 0; k < 5; ++k) {
      CHECK((loaded[i].measurements[k] - records[i].measurements[k]).cwiseAbs().maxCoeff() == 0.0);
      CHECK((loaded[i].true_states->at(k).sub - records[i].true_states->at(k).sub).cwiseAbs().maxCoeff() == 0.0);
    }
  }

  // same seed, byte-identical file; parallel generation agrees with serial
  const std::string path2 = dir.str() + "/data2.jsonl";
  ssm::save_records(ssm::generate_dataset(m, 10, 5, 42), path2);
  CHECK(read_file(path) == read_file(path2));
  const auto par = ssm::generate_dataset(m, 10, 5, 42, 2);
  for (std::size_t i = 0; i < records.size(); ++i)
    for (int k = 0; k < 5; ++k)
      CHECK((par[i].measurements[k] - records[i].measurements[k]).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("manifest round trip") {
  TempDir dir("flockpf_manifest_test");
  ssm::DatasetManifest m;
  m.scenario_id = "Y3_t3_snr20";
  m.kind = "Y3";
  m.snr_db = 20.0;
  m.t = 3;
  m.d_sp = 4;
  m.d_m = 169;
  m.kappa = 25;
  m.seed = 99;
  m.splits = {{"train", 100}, {"val", 10}};
  const std::string path = dir.str() + "/manifest.json";
  ssm::save_manifest(m, path);
  const auto r = ssm::load_manifest(path);
  CHECK(r.scenario_id == m.scenario_id);
  CHECK(r.kind == m.kind);
  CHECK(r.kappa == 25);
  CHECK(r.splits == m.splits);
}

TEST_CASE("cli generate honors the count contract and reproduces bytes") {
  TempDir dir("flockpf_cli_gen");
  const std::string out = dir.str() + "/d1";
  REQUIRE(run_cli("generate --scenario X1 --snr 0 --kappa 5 --n-train 10 --n-val 3 --n-test 2 --seed 7 --out " + out) == 0);
  CHECK(fs::exists(out + "/manifest.json"));
  CHECK(fs::exists(out + "/config.json"));

  const auto records = ssm::load_records(out + "/train.jsonl");
  REQUIRE(records.size() == 10);
  for (const auto& r : records) {
    CHECK(r.kappa() == 5);
    REQUIRE(r.true_states.has_value());
    CHECK(r.true_states->size() == 5);
  }

  const std::string out2 = dir.str() + "/d2";
  REQUIRE(run_cli("generate --scenario X1 --snr 0 --kappa 5 --n-train 10 --n-val 3 --n-test 2 --seed 7 --out " + out2) == 0);
  CHECK(read_file(out + "/train.jsonl") == read_file(out2 + "/train.jsonl"));
}

TEST_CASE("cli generate Y3 produces position-velocity sub-states") {
  TempDir dir("flockpf_cli_y3");
  const std::string out = dir.str() + "/y3";
  REQUIRE(run_cli("generate --scenario Y3 --snr 20 --targets 3 --kappa 4 --n-train 3 --n-val 1 --n-test 1 --seed 3 --out " +
                  out) == 0);
  const auto manifest = ssm::load_manifest(out + "/manifest.json");
  CHECK(manifest.t == 3);
  CHECK(manifest.d_sp == 4);
  CHECK(manifest.d_m == 169);
  const auto records = ssm::load_records(out + "/train.jsonl");
  for (const auto& r : records) {
    CHECK(r.initial_state.t() == 3);
    CHECK(r.initial_state.d_sp() == 4);
  }
}

TEST_CASE("cli eval: the pinned filter scores zero OSPA") {
  TempDir dir("flockpf_cli_eval");
  const std::string data = dir.str() + "/data";
  REQUIRE(run_cli("generate --scenario X1 --snr 0 --kappa 4 --n-train 1 --n-val 1 --n-test 5 --seed 11 --out " + data) == 0);
  const std::string out = dir.str() + "/eval";
  REQUIRE(run_cli("eval --data " + data + " --filter pinned --n 10 --reps 1 --out " + out) == 0);
  std::ifstream csv(out + "/eval.csv");
  std::string header, row;
  std::getline(csv, header);
  REQUIRE(std::getline(csv, row));
  std::vector<std::string> cols;
  std::size_t start = 0;
  while (true) {
    const auto comma = row.find(',', start);
    cols.push_back(row.substr(start, comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  REQUIRE(cols.size() == 8);
  CHECK(std::stod(cols[5]) == 0.0);
}

TEST_CASE("cli eval: plain filter accuracy improves with N") {
  TempDir dir("flockpf_cli_sweep");
  const std::string data = dir.str() + "/data";
  REQUIRE(run_cli("generate --scenario X1 --snr 0 --kappa 8 --n-train 1 --n-val 1 --n-test 60 --seed 21 --out " + data) == 0);
  const std::string out = dir.str() + "/eval";
  REQUIRE(run_cli("eval --data " + data + " --n 10 --n 25 --n 100 --reps 2 --seed 5 --out " + out) == 0);
  std::ifstream csv(out + "/eval.csv");
  std::string line;
  std::getline(csv, line);  // header
  std::map<int, std::vector<double>> by_n;
  while (std::getline(csv, line)) {
    std::vector<std::string> cols;
    std::size_t start = 0;
    while (true) {
      const auto comma = line.find(',', start);
      cols.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    by_n[std::stoi(cols[3])].push_back(std::stod(cols[5]));
  }
  auto mean_of = [&](int n) {
    double acc = 0;
    for (double v : by_n[n]) acc += v;
    return acc / by_n[n].size();
  };
  REQUIRE(by_n.size() == 3);
  CHECK(mean_of(10) > mean_of(25));
  CHECK(mean_of(25) > mean_of(100));
}

TEST_CASE("cli eval: checkpoint trained at one t evaluates at another") {
  TempDir dir("flockpf_cli_transfer");
  // a checkpoint for radar sub-states (d_sp = 4), saved directly
  Rng rng(3);
  lf::Hyperparams hyper;
  hyper.P = 4;
  lf::CheckpointMeta meta;
  meta.scenario_id = "Y3_t1_snr20";
  const std::string ckpt = dir.str() + "/ck.json";
  lf::save_checkpoint(lf::Parameters::init(hyper, 4, rng), meta, ckpt);

  const std::string data = dir.str() + "/data";
  REQUIRE(run_cli("generate --scenario Y3 --snr 20 --targets 3 --kappa 3 --n-train 1 --n-val 1 --n-test 2 --seed 9 --out " +
                  data) == 0);
  const std::string out = dir.str() + "/eval";
  CHECK(run_cli("eval --data " + data + " --ckpt " + ckpt + " --n 20 --reps 1 --out " + out) == 0);

  // mismatched d_sp is a config error (exit code 2)
  const std::string bad = dir.str() + "/bad.json";
  lf::save_checkpoint(lf::Parameters::init(hyper, 7, rng), meta, bad);
  const int rc = run_cli("eval --data " + data + " --ckpt " + bad + " --n 20 --reps 1 --out " + out);
  CHECK(WEXITSTATUS(rc) == 2);
}

TEST_CASE("cli inspect prints checkpoint structure") {
  TempDir dir("flockpf_cli_inspect");
  Rng rng(5);
  lf::Hyperparams hyper;
  hyper.P = 4;
  hyper.J = 2;
  const std::string ckpt = dir.str() + "/ck.json";
  lf::save_checkpoint(lf::Parameters::init(hyper, 2, rng), {}, ckpt);
  const std::string cmd = std::string(FLOCKPF_CLI_PATH) + " inspect --ckpt " + ckpt + " > " + dir.str() + "/out.txt 2>&1";
  REQUIRE(std::system(cmd.c_str()) == 0);
  const std::string text = read_file(dir.str() + "/out.txt");
  CHECK(text.find("P=4") != std::string::npos);
  CHECK(text.find("J=2") != std::string::npos);
  CHECK(text.find("baseline_head") != std::string::npos);
}

TEST_CASE("cli bench reports per-step latency with analytic multiply counts") {
  TempDir dir("flockpf_cli_bench");
  const std::string out = dir.str() + "/bench";
  REQUIRE(run_cli("bench --scenario X1 --snr 0 --n 25 --n 100 --steps 100 --p 8 --j 1 --s 1 --e 1 --b 1 --out " +
                  out) == 0);
  std::ifstream csv(out + "/bench.csv");
  std::string line;
  std::getline(csv, line);
  CHECK(line == "filter,n,t,median_ms,fpm_embedding,fpm_attention,fpm_final,fpm_total");
  std::map<std::pair<std::string, int>, double> ms;
  std::map<std::pair<std::string, int>, double> fpm;
  while (std::getline(csv, line)) {
    std::vector<std::string> cols;
    std::size_t start = 0;
    while (true) {
      const auto comma = line.find(',', start);
      cols.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    REQUIRE(cols.size() == 8);
    ms[{cols[0], std::stoi(cols[1])}] = std::stod(cols[3]);
    fpm[{cols[0], std::stoi(cols[1])}] = std::stod(cols[7]);
  }
  REQUIRE(ms.size() == 4);
  // plain filter latency grows with N; the corrected one is at least as slow
  CHECK(ms[{"sis", 100}] > ms[{"sis", 25}]);
  CHECK(ms[{"lf-sis", 25}] >= ms[{"sis", 25}]);
  CHECK(fpm[{"lf-sis", 25}] > 0.0);
}

TEST_CASE("cli config file values are used and flags override them") {
  TempDir dir("flockpf_cli_config");
  const std::string cfg_path = dir.str() + "/run.json";
  {
    nlohmann::json j;
    j["scenario"] = {{"kind", "X1"}, {"snr_db", 0.0}};
    j["generate"] = {{"kappa", 4}, {"n_train", 6}, {"n_val", 1}, {"n_test", 1}, {"seed", 2}};
    std::ofstream f(cfg_path);
    f << j;
  }
  const std::string out = dir.str() + "/d";
  REQUIRE(run_cli("--config " + cfg_path + " generate --n-train 3 --out " + out) == 0);
  const auto records = ssm::load_records(out + "/train.jsonl");
  CHECK(records.size() == 3);       // flag overrode the config
  CHECK(records[0].kappa() == 4);   // config value used
}
