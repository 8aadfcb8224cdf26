#include "flockpf/hungarian.hpp"

#include <cmath>
#include <limits>

#include "flockpf/common.hpp"

namespace flockpf::loss {

std::vector<int> solve_assignment(const Eigen::MatrixXd& cost) {
  const int n = static_cast<int>(cost.rows());
  if (cost.cols() != n) throw ConfigError("assignment: cost matrix must be square");
  if (n == 0) return {};
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based potentials formulation.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = -1;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> assignment(n, -1);
  for (int j = 1; j <= n; ++j) assignment[p[j] - 1] = j - 1;
  return assignment;
}

double assignment_cost(const Eigen::MatrixXd& cost, const std::vector<int>& assignment) {
  double acc = 0.0;
  for (std::size_t r = 0; r < assignment.size(); ++r) acc += cost(r, assignment[r]);
  return acc;
}

std::vector<int> solve_assignment_lexfirst(const Eigen::MatrixXd& cost) {
  const int n = static_cast<int>(cost.rows());
  if (n == 0) return {};
  const double best = assignment_cost(cost, solve_assignment(cost));
  const double tol = 1e-9 * std::max(1.0, std::abs(best));

  std::vector<int> fixed(n, -1);
  std::vector<char> col_used(n, 0);
  double fixed_cost = 0.0;
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      if (col_used[c]) continue;
      // Cost of the best completion with rows 0..r fixed (r -> c).
      std::vector<int> rows, cols;
      for (int rr = r + 1; rr < n; ++rr) rows.push_back(rr);
      for (int cc = 0; cc < n; ++cc)
        if (!col_used[cc] && cc != c) cols.push_back(cc);
      double completion = 0.0;
      if (!rows.empty()) {
        Eigen::MatrixXd sub(rows.size(), cols.size());
        for (std::size_t a = 0; a < rows.size(); ++a)
          for (std::size_t b = 0; b < cols.size(); ++b) sub(a, b) = cost(rows[a], cols[b]);
        completion = assignment_cost(sub, solve_assignment(sub));
      }
      if (fixed_cost + cost(r, c) + completion <= best + tol) {
        fixed[r] = c;
        col_used[c] = 1;
        fixed_cost += cost(r, c);
        break;
      }
    }
    if (fixed[r] < 0) throw NumericalError("assignment: lexicographic completion failed");
  }
  return fixed;
}

}  // namespace flockpf::loss
