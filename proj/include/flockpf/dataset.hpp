#pragma once

#include <string>
#include <vector>

#include "flockpf/ssm.hpp"

namespace flockpf::ssm {

/// Sidecar manifest for one dataset directory ("ssm-v1").
struct DatasetManifest {
  std::string format = "ssm-v1";
  std::string scenario_id;
  std::string kind;
  double snr_db = 0.0;
  int t = 1;
  int d_sp = 0;
  int d_m = 0;
  int kappa = 0;
  uint64_t seed = 0;
  std::vector<std::pair<std::string, int>> splits;  // (name, count)
};

/// Generates n trajectories with per-record streams derived from
/// (seed, index); parallel and serial generation agree bit-exactly.
std::vector<TrajectoryRecord> generate_dataset(const ScenarioModel& model, int n, int kappa, uint64_t seed,
                                               int threads = 1);

/// One JSON object per line; matrices row-major nested arrays.
void save_records(const std::vector<TrajectoryRecord>& records, const std::string& path);
std::vector<TrajectoryRecord> load_records(const std::string& path);

void save_manifest(const DatasetManifest& manifest, const std::string& path);
DatasetManifest load_manifest(const std::string& path);

}  // namespace flockpf::ssm
