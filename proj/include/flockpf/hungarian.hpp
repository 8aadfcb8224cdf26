#pragma once

#include <Eigen/Dense>
#include <vector>

namespace flockpf::loss {

/// Minimum-cost perfect assignment on a square cost matrix (O(n^3),
/// potentials method). Returns col = assignment[row].
std::vector<int> solve_assignment(const Eigen::MatrixXd& cost);

double assignment_cost(const Eigen::MatrixXd& cost, const std::vector<int>& assignment);

/// Among all optimal assignments, the lexicographically first one in
/// (row 0's column, row 1's column, ...) order; deterministic at ties so
/// gradients through a fixed assignment are well defined.
std::vector<int> solve_assignment_lexfirst(const Eigen::MatrixXd& cost);

}  // namespace flockpf::loss
