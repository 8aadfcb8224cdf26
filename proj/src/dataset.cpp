#include "flockpf/dataset.hpp"

#include <fstream>
#include <thread>

#include "json.hpp"

namespace flockpf::ssm {

namespace {

nlohmann::json state_json(const StateVector& x) {
  nlohmann::json rows = nlohmann::json::array();
  for (int j = 0; j < x.t(); ++j) {
    nlohmann::json row = nlohmann::json::array();
    for (int k = 0; k < x.d_sp(); ++k) row.push_back(x.sub(j, k));
    rows.push_back(row);
  }
  return rows;
}

StateVector state_from_json(const nlohmann::json& j) {
  const int t = static_cast<int>(j.size());
  const int d = static_cast<int>(j.at(0).size());
  StateVector x(t, d);
  for (int r = 0; r < t; ++r)
    for (int k = 0; k < d; ++k) x.sub(r, k) = j.at(r).at(k).get<double>();
  return x;
}

}  // namespace

std::vector<TrajectoryRecord> generate_dataset(const ScenarioModel& model, int n, int kappa, uint64_t seed,
                                               int threads) {
  if (n < 1) throw ConfigError("generate_dataset: n must be >= 1");
  std::vector<TrajectoryRecord> out(n);
  Rng base(seed);
  auto work = [&](int from, int to) {
    for (int i = from; i < to; ++i) out[i] = generate_trajectory(model, kappa, base.derive(i).base());
  };
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    work(0, n);
  } else {
    std::vector<std::thread> pool;
    const int chunk = (n + threads - 1) / threads;
    for (int w = 0; w < threads; ++w)
      pool.emplace_back(work, w * chunk, std::min(n, (w + 1) * chunk));
    for (auto& th : pool) th.join();
  }
  return out;
}

void save_records(const std::vector<TrajectoryRecord>& records, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write dataset: " + path);
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["scenario_id"] = r.scenario_id;
    j["snr_db"] = r.snr_db;
    j["kappa"] = r.kappa();
    j["initial_state"] = state_json(r.initial_state);
    nlohmann::json ms = nlohmann::json::array();
    for (const auto& z : r.measurements) ms.push_back(std::vector<double>(z.data(), z.data() + z.size()));
    j["measurements"] = ms;
    if (r.true_states.has_value()) {
      nlohmann::json ts = nlohmann::json::array();
      for (const auto& x : *r.true_states) ts.push_back(state_json(x));
      j["true_states"] = ts;
    }
    f << j << "\n";
  }
}

std::vector<TrajectoryRecord> load_records(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open dataset: " + path);
  std::vector<TrajectoryRecord> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    TrajectoryRecord r;
    r.scenario_id = j.at("scenario_id").get<std::string>();
    r.snr_db = j.at("snr_db").get<double>();
    r.initial_state = state_from_json(j.at("initial_state"));
    for (const auto& zs : j.at("measurements")) {
      const auto v = zs.get<std::vector<double>>();
      r.measurements.push_back(Eigen::Map<const Eigen::VectorXd>(v.data(), v.size()));
    }
    if (j.contains("true_states")) {
      r.true_states = std::vector<StateVector>();
      for (const auto& xs : j.at("true_states")) r.true_states->push_back(state_from_json(xs));
    }
    if (static_cast<int>(r.measurements.size()) != j.at("kappa").get<int>())
      throw ConfigError("dataset: kappa does not match measurement count");
    out.push_back(std::move(r));
  }
  return out;
}

void save_manifest(const DatasetManifest& m, const std::string& path) {
  nlohmann::ordered_json j;
  j["format"] = m.format;
  j["scenario_id"] = m.scenario_id;
  j["kind"] = m.kind;
  j["snr_db"] = m.snr_db;
  j["t"] = m.t;
  j["d_sp"] = m.d_sp;
  j["d_m"] = m.d_m;
  j["kappa"] = m.kappa;
  j["seed"] = m.seed;
  nlohmann::ordered_json splits;
  for (const auto& [name, count] : m.splits) splits[name] = count;
  j["splits"] = splits;
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write manifest: " + path);
  f << j.dump(1) << "\n";
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open manifest: " + path);
  nlohmann::json j;
  f >> j;
  if (j.value("format", "") != "ssm-v1") throw ConfigError("manifest: unexpected format tag");
  DatasetManifest m;
  m.scenario_id = j.at("scenario_id").get<std::string>();
  m.kind = j.at("kind").get<std::string>();
  m.snr_db = j.at("snr_db").get<double>();
  m.t = j.at("t").get<int>();
  m.d_sp = j.at("d_sp").get<int>();
  m.d_m = j.at("d_m").get<int>();
  m.kappa = j.at("kappa").get<int>();
  m.seed = j.at("seed").get<uint64_t>();
  for (const auto& [k, v] : j.at("splits").items()) m.splits.emplace_back(k, v.get<int>());
  return m;
}

}  // namespace flockpf::ssm
