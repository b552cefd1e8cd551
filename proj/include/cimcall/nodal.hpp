#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <cmath>
#include <vector>

#include "errors.hpp"

namespace cimcall {

// Network geometry shared by both solvers. Row i is driven from the left
// through one wire segment into node (i,0); row nodes are chained to the
// right. Column j runs top to bottom and leaves node (rows-1,j) through one
// more segment into a virtual ground, where the output current is measured.
// Conductance matrices are row-major, rows x cols.

struct NodalLayout {
  int rows, cols;
  int row_node(int i, int j) const { return i * cols + j; }
  int col_node(int i, int j) const { return rows * cols + i * cols + j; }
  int nodes() const { return 2 * rows * cols; }
};

inline void check_network(int rows, int cols, const std::vector<double>& g, double r) {
  require_dims(rows > 0 && cols > 0, "nodal: empty network");
  require_dims(static_cast<int64_t>(g.size()) == int64_t{rows} * cols, "nodal: conductance size mismatch");
  require(std::isfinite(r) && r >= 0.0, "nodal: wire resistance must be finite and >= 0");
}

struct OracleOptions {
  int max_cells = 32 * 32;
};

// Exact column currents by modified nodal analysis: every node voltage and
// every driver branch current is an unknown, solved by a dense LU.
inline std::vector<double> nodal_oracle_vmm(const std::vector<double>& v, int rows, int cols,
                                            const std::vector<double>& g, double r,
                                            const OracleOptions& opt = {}) {
  check_network(rows, cols, g, r);
  require_dims(static_cast<int>(v.size()) == rows, "nodal_oracle_vmm: input length != rows");
  require(rows * cols <= opt.max_cells, "nodal_oracle_vmm: tile exceeds oracle cap");
  std::vector<double> out(cols, 0.0);
  if (r == 0.0) {
    bool any = false;
    for (double x : g) any = any || x != 0.0;
    if (!any) throw NumericError("nodal_oracle_vmm: singular network (no conductive path)");
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) out[j] += v[i] * g[i * cols + j];
    return out;
  }
  const NodalLayout L{rows, cols};
  const int n_drv = rows;
  const int offset = n_drv;  // driver nodes first, then the 2*rows*cols grid nodes
  const int n_nodes = n_drv + L.nodes();
  const int n = n_nodes + rows;  // plus one branch current per source
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n, n);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(n);
  const double y = 1.0 / r;
  auto stamp = [&](int a, int c, double gc) {
    if (a >= 0) A(a, a) += gc;
    if (c >= 0) A(c, c) += gc;
    if (a >= 0 && c >= 0) {
      A(a, c) -= gc;
      A(c, a) -= gc;
    }
  };
  for (int i = 0; i < rows; ++i) {
    stamp(i, offset + L.row_node(i, 0), y);
    for (int j = 0; j + 1 < cols; ++j) stamp(offset + L.row_node(i, j), offset + L.row_node(i, j + 1), y);
    for (int j = 0; j < cols; ++j) stamp(offset + L.row_node(i, j), offset + L.col_node(i, j), g[i * cols + j]);
  }
  for (int j = 0; j < cols; ++j) {
    for (int i = 0; i + 1 < rows; ++i) stamp(offset + L.col_node(i, j), offset + L.col_node(i + 1, j), y);
    stamp(offset + L.col_node(rows - 1, j), -1, y);
  }
  for (int i = 0; i < rows; ++i) {
    const int k = n_nodes + i;
    A(i, k) += 1.0;
    A(k, i) += 1.0;
    b(k) = v[i];
  }
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(A);
  if (!(lu.rcond() > 1e-15)) throw NumericError("nodal_oracle_vmm: singular network");
  const Eigen::VectorXd x = lu.solve(b);
  if (!x.allFinite()) throw NumericError("nodal_oracle_vmm: non-finite solution");
  for (int j = 0; j < cols; ++j) out[j] = x(offset + L.col_node(rows - 1, j)) * y;
  return out;
}

// Effective conductance seen from each driven row to each column output.
// The network is linear in the drive voltages, so out_j = sum_i v_i T(i,j)
// holds exactly; T is solved once per programmed tile with a sparse LDL^T
// factorization of the grid (drivers at 0 V act as conductances to ground).
inline Eigen::MatrixXd wire_transfer(int rows, int cols, const std::vector<double>& g, double r,
                                     int driven_rows) {
  check_network(rows, cols, g, r);
  require(driven_rows >= 0 && driven_rows <= rows, "wire_transfer: driven_rows out of range");
  Eigen::MatrixXd T(driven_rows, cols);
  if (r == 0.0) {
    for (int i = 0; i < driven_rows; ++i)
      for (int j = 0; j < cols; ++j) T(i, j) = g[i * cols + j];
    return T;
  }
  const NodalLayout L{rows, cols};
  const double y = 1.0 / r;
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(static_cast<size_t>(L.nodes()) * 4);
  auto stamp = [&](int a, int c, double gc) {
    if (a >= 0) trip.emplace_back(a, a, gc);
    if (c >= 0) trip.emplace_back(c, c, gc);
    if (a >= 0 && c >= 0) {
      trip.emplace_back(a, c, -gc);
      trip.emplace_back(c, a, -gc);
    }
  };
  for (int i = 0; i < rows; ++i) {
    stamp(L.row_node(i, 0), -1, y);
    for (int j = 0; j + 1 < cols; ++j) stamp(L.row_node(i, j), L.row_node(i, j + 1), y);
    for (int j = 0; j < cols; ++j) stamp(L.row_node(i, j), L.col_node(i, j), g[i * cols + j]);
  }
  for (int j = 0; j < cols; ++j) {
    for (int i = 0; i + 1 < rows; ++i) stamp(L.col_node(i, j), L.col_node(i + 1, j), y);
    stamp(L.col_node(rows - 1, j), -1, y);
  }
  Eigen::SparseMatrix<double> A(L.nodes(), L.nodes());
  A.setFromTriplets(trip.begin(), trip.end());
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt(A);
  if (ldlt.info() != Eigen::Success) throw NumericError("wire_transfer: factorization failed");
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(L.nodes());
  for (int i = 0; i < driven_rows; ++i) {
    rhs.setZero();
    rhs(L.row_node(i, 0)) = y;  // 1 V behind one segment
    const Eigen::VectorXd x = ldlt.solve(rhs);
    if (ldlt.info() != Eigen::Success || !x.allFinite()) throw NumericError("wire_transfer: solve failed");
    for (int j = 0; j < cols; ++j) T(i, j) = x(L.col_node(rows - 1, j)) * y;
  }
  return T;
}

// Position-dependent first-order attenuation, g / (1 + g r (row-distance + col-distance)).
// Kept for comparison; not certified at large r.
inline Eigen::MatrixXd first_order_transfer(int rows, int cols, const std::vector<double>& g, double r,
                                            int driven_rows) {
  check_network(rows, cols, g, r);
  Eigen::MatrixXd T(driven_rows, cols);
  for (int i = 0; i < driven_rows; ++i)
    for (int j = 0; j < cols; ++j) {
      const double gc = g[i * cols + j];
      const double dist = static_cast<double>(j + 1) + static_cast<double>(rows - i);
      T(i, j) = gc / (1.0 + gc * r * dist);
    }
  return T;
}

}  // namespace cimcall
