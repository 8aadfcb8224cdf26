#pragma once

#include <Eigen/Dense>

namespace flockpf {

/// Per-sub-particle Gaussian-shaped kernels: peak height and isotropic std,
/// indexed (particle i, sub-state j). Built by the loss module's adapting
/// kernel construction; consumed by density reconstruction.
struct KernelBank {
  Eigen::MatrixXd peak;   // N x t
  Eigen::MatrixXd sigma;  // N x t
};

}  // namespace flockpf
