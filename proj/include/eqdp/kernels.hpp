#pragma once

#include <Eigen/Dense>
#include <utility>
#include <vector>

#include "eqdp/groups.hpp"

namespace eqdp {

// Geometry of the k x k sampling grid. Cell (row r, col c) sits at offsets
// (dx, dy) = (c - h, h - r), so x points right and y points up; cells are
// grouped into rings of equal squared radius, listed by increasing radius.
struct KernelGrid {
  int size = 0;
  int half = 0;
  std::vector<double> angles;                // per cell, atan2(dy, dx)
  std::vector<int> ring_index;               // per cell
  std::vector<int> squared_radius;           // per ring
  std::vector<std::vector<int>> ring_cells;  // per ring, cell indices ascending

  int cell(int row, int col) const { return row * size + col; }
  int num_cells() const { return size * size; }
};

KernelGrid make_kernel_grid(int kernel_size);

// True when the element maps the integer grid onto itself: rotations by
// multiples of 90 degrees, with or without a reflection.
bool exact_steering(const GroupElement& e);

// Index of the cell holding e * x_idx; requires exact_steering(e).
int steered_cell(const KernelGrid& grid, int idx, const GroupElement& e);

// Angular factor shapes used by the analytic SO(2) construction; each is a
// function of psi = m * theta - phase.
enum class AngularForm {
  scalar,              // [cos psi]
  column,              // [cos psi; sin psi]
  row,                 // [cos psi, sin psi]
  rotation,            // [[cos, -sin], [sin, cos]]
  reflected_rotation,  // [[cos, sin], [sin, -cos]]
};

struct AngularTerm {
  AngularForm form;
  int ring;
  int m;
  double phase;
  double coeff;
};

struct KernelBasis {
  GroupSpec group;
  Representation rep_in;
  Representation rep_out;
  int kernel_size = 0;
  // Each element is stored as (dim_out * dim_in) x (k * k): row a * dim_in + b
  // holds matrix entry (a, b), column r * k + c holds grid cell (r, c).
  std::vector<Eigen::MatrixXd> elements;
  // Per element, the closed-form angular decomposition (SO(2) bases only;
  // empty lists for finite groups).
  std::vector<std::vector<AngularTerm>> analytic;

  int dimension() const { return int(elements.size()); }
  Eigen::MatrixXd gram() const;
};

// Maximal orthonormal basis of kernels satisfying
//   K(g x) = rho_out(g) K(x) rho_in(g)^{-1}  for all g.
// A dimension-0 basis is a valid result when no equivariant kernel exists.
KernelBasis solve_kernel_basis(const Representation& rep_in, const Representation& rep_out,
                               const GroupSpec& group, int kernel_size);

// Memoised variant keyed by (group, rep_in, rep_out, kernel_size); returned
// references stay valid for the program lifetime.
const KernelBasis& cached_kernel_basis(const Representation& rep_in, const Representation& rep_out,
                                       const GroupSpec& group, int kernel_size);

Eigen::MatrixXd expand_kernel(const KernelBasis& basis, const Eigen::VectorXd& coefficients);

// Closed-form value of basis element `index` on ring `ring` at angle `theta`,
// shaped (dim_out, dim_in). Zero matrix off the element's support.
Eigen::MatrixXd eval_analytic_element(const KernelBasis& basis, int index, int ring, double theta);

// Max over tested group elements of |K(g x) - rho_out(g) K(x) rho_in(g)^{-1}|_inf.
// Grid-sampled kernels are tested at the exactly steerable elements (90-degree
// rotations, axis reflections); for SO(2) only the four grid rotations apply.
double kernel_constraint_residual(const Eigen::MatrixXd& kernel, const GroupSpec& group,
                                  const Representation& rep_in, const Representation& rep_out,
                                  int kernel_size);

// Continuous-angle residual of an analytic SO(2) combination, tested at the
// given rotation angles on every grid cell.
double kernel_constraint_residual(const KernelBasis& basis, const Eigen::VectorXd& coefficients,
                                  const std::vector<double>& angles);

// Steering defect of each group element separately, using exact cell
// permutation where the element preserves the grid and bilinear resampling
// elsewhere. Finite groups only; the resampled entries are diagnostics, not
// exactness claims.
std::vector<std::pair<GroupElement, double>> steering_residuals_per_element(
    const Eigen::MatrixXd& kernel, const GroupSpec& group, const Representation& rep_in,
    const Representation& rep_out, int kernel_size);

}  // namespace eqdp
