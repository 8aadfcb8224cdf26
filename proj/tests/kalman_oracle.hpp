#pragma once

#include <Eigen/Dense>

// Exact recursive estimator for the linear-Gaussian single sub-state case;
// independent of the particle filtering code on purpose.
namespace flockpf::testing {

struct KalmanOracle {
  Eigen::MatrixXd A, C, Q, R;
  Eigen::VectorXd x;
  Eigen::MatrixXd P;

  void init(const Eigen::VectorXd& x0) {
    x = x0;
    P = Eigen::MatrixXd::Zero(A.rows(), A.rows());
  }

  void step(const Eigen::VectorXd& z) {
    x = A * x;
    P = A * P * A.transpose() + Q;
    const Eigen::MatrixXd s = C * P * C.transpose() + R;
    const Eigen::MatrixXd k = P * C.transpose() * s.inverse();
    x = x + k * (z - C * x);
    P = (Eigen::MatrixXd::Identity(P.rows(), P.cols()) - k * C) * P;
  }
};

}  // namespace flockpf::testing
