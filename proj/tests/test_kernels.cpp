#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>
#include <vector>

#include "eqdp/kernels.hpp"

using namespace eqdp;

namespace {

// Independent cell mapping used only by the oracle: quarter-turn integer
// rotation composed with an optional y-flip.
int oracle_steer(int k, int idx, const GroupElement& e) {
  const int h = (k - 1) / 2;
  int dx = idx % k - h, dy = h - idx / k;
  if (e.reflect) dy = -dy;
  const int quarter = int(std::llround(e.angle / (kPi / 2))) % 4;
  for (int t = 0; t < quarter; ++t) {
    const int nx = -dy, ny = dx;
    dx = nx;
    dy = ny;
  }
  return (h - dy) * k + (dx + h);
}

// Fully materialized steering constraint, one row per (element, entry, cell):
//   K(g x)_{ab} - sum_{pq} rho_out(g)_{ap} K(x)_{pq} rho_in(g)_{bq} = 0
// over unknowns vec(K) indexed (a * d_in + b) * k^2 + cell.
Eigen::MatrixXd materialize_constraint(const std::vector<GroupElement>& elems,
                                       const Representation& rep_in,
                                       const Representation& rep_out, int k) {
  const int d_in = rep_in.dimension(), d_out = rep_out.dimension(), k2 = k * k;
  const int dim = d_out * d_in * k2;
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(elems.size() * dim, dim);
  int row = 0;
  for (const auto& e : elems) {
    const Eigen::MatrixXd mo = rep_out.matrix(e);
    const Eigen::MatrixXd mi = rep_in.matrix(e);
    for (int a = 0; a < d_out; ++a) {
      for (int b = 0; b < d_in; ++b) {
        for (int i = 0; i < k2; ++i, ++row) {
          c(row, (a * d_in + b) * k2 + oracle_steer(k, i, e)) += 1.0;
          for (int p = 0; p < d_out; ++p)
            for (int q = 0; q < d_in; ++q) c(row, (p * d_in + q) * k2 + i) -= mo(a, p) * mi(b, q);
        }
      }
    }
  }
  return c;
}

Eigen::MatrixXd nullspace_of(const Eigen::MatrixXd& m) {
  Eigen::BDCSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  const double tol = 1e-8 * std::max(1.0, sv.size() > 0 ? sv(0) : 0.0);
  int rank = 0;
  for (int i = 0; i < sv.size(); ++i)
    if (sv(i) > tol) ++rank;
  return svd.matrixV().rightCols(m.cols() - rank);
}

// Basis element as a vector in the oracle's unknown ordering.
Eigen::VectorXd as_oracle_vec(const KernelBasis& basis, int index) {
  const auto& el = basis.elements[size_t(index)];
  Eigen::VectorXd v(el.size());
  for (int r = 0; r < el.rows(); ++r)
    for (int c = 0; c < el.cols(); ++c) v(r * el.cols() + c) = el(r, c);
  return v;
}

Representation make_rep(const GroupSpec& g, RepKind kind) {
  return kind == RepKind::trivial ? Representation::trivial(g) : Representation::regular(g);
}

Eigen::VectorXd random_coeffs(int n, unsigned seed) {
  std::mt19937 gen(seed);
  std::normal_distribution<double> dist;
  Eigen::VectorXd c(n);
  for (int i = 0; i < n; ++i) c(i) = dist(gen);
  return c;
}

}  // namespace

TEST_SUITE_BEGIN("kernels");

TEST_CASE("grid geometry and steering") {
  auto grid = make_kernel_grid(3);
  CHECK(grid.ring_cells.size() == 3);
  CHECK(grid.squared_radius == std::vector<int>{0, 1, 2});
  CHECK(grid.ring_cells[0] == std::vector<int>{4});
  CHECK(grid.ring_cells[1].size() == 4);

  auto grid5 = make_kernel_grid(5);
  CHECK(grid5.squared_radius == std::vector<int>{0, 1, 2, 4, 5, 8});
  CHECK(grid5.ring_cells[4].size() == 8);

  // 90-degree rotation sends the east cell to the north cell
  const int east = grid.cell(1, 2), north = grid.cell(0, 1);
  CHECK(steered_cell(grid, east, GroupElement::rotation(kPi / 2)) == north);
  // y-flip swaps north and south
  CHECK(steered_cell(grid, north, GroupElement::reflection(0.0)) == grid.cell(2, 1));
  CHECK(exact_steering(GroupElement::rotation(kPi)));
  CHECK_FALSE(exact_steering(GroupElement::rotation(kPi / 4)));

  CHECK_THROWS_AS(make_kernel_grid(2), UnsupportedKernelSize);
  CHECK_THROWS_AS(make_kernel_grid(9), UnsupportedKernelSize);
}

TEST_CASE("finite bases match the materialized-constraint nullspace") {
  struct Case {
    GroupSpec group;
    RepKind in, out;
    int k;
    int expected_dim;
  };
  // expected_dim values are frozen orbit/harmonic counts worked out by hand
  const std::vector<Case> cases = {
      {GroupSpec::cyclic(1), RepKind::trivial, RepKind::trivial, 3, 9},
      {GroupSpec::cyclic(4), RepKind::trivial, RepKind::trivial, 3, 3},
      {GroupSpec::dihedral(4), RepKind::trivial, RepKind::trivial, 3, 3},
      {GroupSpec::dihedral(1), RepKind::trivial, RepKind::trivial, 3, 6},
      {GroupSpec::dihedral(2), RepKind::trivial, RepKind::trivial, 3, 4},
      {GroupSpec::cyclic(2), RepKind::regular, RepKind::regular, 3, 18},
      {GroupSpec::cyclic(4), RepKind::regular, RepKind::regular, 3, 36},
      {GroupSpec::dihedral(4), RepKind::regular, RepKind::regular, 3, 72},
      {GroupSpec::cyclic(4), RepKind::trivial, RepKind::regular, 3, 9},
      {GroupSpec::dihedral(4), RepKind::regular, RepKind::trivial, 3, 9},
      {GroupSpec::cyclic(4), RepKind::trivial, RepKind::trivial, 5, 7},
      {GroupSpec::cyclic(4), RepKind::regular, RepKind::regular, 1, 4},
  };
  for (const auto& c : cases) {
    CAPTURE(c.group.rotation_order);
    CAPTURE(int(c.group.kind));
    CAPTURE(c.k);
    const auto rep_in = make_rep(c.group, c.in);
    const auto rep_out = make_rep(c.group, c.out);
    const auto basis = solve_kernel_basis(rep_in, rep_out, c.group, c.k);
    CHECK(basis.dimension() == c.expected_dim);

    const auto constraint = materialize_constraint(enumerate_elements(c.group), rep_in, rep_out, c.k);
    const auto null_basis = nullspace_of(constraint);
    REQUIRE(null_basis.cols() == c.expected_dim);

    // every element satisfies the materialized constraint
    for (int i = 0; i < basis.dimension(); ++i)
      CHECK((constraint * as_oracle_vec(basis, i)).cwiseAbs().maxCoeff() < 1e-10);

    // the two spans coincide: compare orthogonal projectors
    Eigen::MatrixXd p_basis =
        Eigen::MatrixXd::Zero(constraint.cols(), constraint.cols());
    for (int i = 0; i < basis.dimension(); ++i) {
      const auto v = as_oracle_vec(basis, i);
      p_basis += v * v.transpose();
    }
    const Eigen::MatrixXd p_null = null_basis * null_basis.transpose();
    CHECK((p_basis - p_null).cwiseAbs().maxCoeff() < 1e-9);

    // orthonormality and the advertised residual contract
    const int n = basis.dimension();
    CHECK((basis.gram() - Eigen::MatrixXd::Identity(n, n)).cwiseAbs().maxCoeff() < 1e-12);
    const auto kernel = expand_kernel(basis, random_coeffs(n, 7));
    CHECK(kernel_constraint_residual(kernel, c.group, rep_in, rep_out, c.k) < 1e-10);
  }
}

TEST_CASE("C_4 trivial basis is the three ring indicators") {
  auto g = GroupSpec::cyclic(4);
  auto rep = Representation::trivial(g);
  auto basis = solve_kernel_basis(rep, rep, g, 3);
  REQUIRE(basis.dimension() == 3);
  // canonical order: center, edge ring, corner ring; each normalized
  CHECK(basis.elements[0](0, 4) == doctest::Approx(1.0));
  for (int cell : {1, 3, 5, 7}) CHECK(basis.elements[1](0, cell) == doctest::Approx(0.5));
  for (int cell : {0, 2, 6, 8}) CHECK(basis.elements[2](0, cell) == doctest::Approx(0.5));
  CHECK(basis.elements[1](0, 4) == doctest::Approx(0.0));
}

TEST_CASE("larger rotation orders keep full parameter multiplicity") {
  // regular -> regular dimension stays |G| k^2 past the exactly steerable
  // orders, and scalar kernels stay at the ring count
  struct Case {
    GroupSpec group;
    int expected_dim;
  };
  for (const auto& c : std::vector<Case>{{GroupSpec::cyclic(8), 72},
                                         {GroupSpec::cyclic(16), 144},
                                         {GroupSpec::dihedral(8), 144},
                                         {GroupSpec::dihedral(16), 288}}) {
    auto rep = Representation::regular(c.group);
    auto basis = solve_kernel_basis(rep, rep, c.group, 3);
    CHECK(basis.dimension() == c.expected_dim);
    const int n = basis.dimension();
    CHECK((basis.gram() - Eigen::MatrixXd::Identity(n, n)).cwiseAbs().maxCoeff() < 1e-12);
    // steering is exact on the grid-preserving subgroup
    const auto kernel = expand_kernel(basis, random_coeffs(n, 11));
    CHECK(kernel_constraint_residual(kernel, c.group, rep, rep, 3) < 1e-10);
  }
  auto c8 = GroupSpec::cyclic(8);
  auto triv = Representation::trivial(c8);
  CHECK(solve_kernel_basis(triv, triv, c8, 3).dimension() == 3);
}

TEST_CASE("per-element residual reporting") {
  auto g = GroupSpec::cyclic(8);
  auto rep = Representation::regular(g);
  auto basis = solve_kernel_basis(rep, rep, g, 3);
  const auto kernel = expand_kernel(basis, random_coeffs(basis.dimension(), 3));
  const auto residuals = steering_residuals_per_element(kernel, g, rep, rep, 3);
  REQUIRE(residuals.size() == 8);
  for (const auto& [e, r] : residuals) {
    CHECK(r >= 0.0);
    if (exact_steering(e)) CHECK(r < 1e-10);  // grid-preserving subgroup is exact
  }
}

TEST_CASE("SO(2) analytic bases: dimensions and continuous steering") {
  auto g = GroupSpec::so2(3);
  struct Case {
    int f_in, f_out, k;
    int expected_dim;
  };
  const std::vector<Case> cases = {
      {0, 0, 3, 3}, {0, 1, 3, 4}, {1, 1, 3, 10}, {1, 2, 3, 4},
      {0, 1, 1, 0}, {0, 0, 1, 1}, {1, 1, 1, 2},
  };
  std::vector<double> probe_angles;
  for (int j = 0; j < 16; ++j) probe_angles.push_back(0.123 + kTwoPi * j / 16);
  for (const auto& c : cases) {
    CAPTURE(c.f_in);
    CAPTURE(c.f_out);
    CAPTURE(c.k);
    const auto rep_in = c.f_in == 0 ? Representation::trivial(g) : Representation::irrep(g, c.f_in);
    const auto rep_out =
        c.f_out == 0 ? Representation::trivial(g) : Representation::irrep(g, c.f_out);
    const auto basis = solve_kernel_basis(rep_in, rep_out, g, c.k);
    CHECK(basis.dimension() == c.expected_dim);
    const int n = basis.dimension();
    if (n == 0) continue;
    CHECK((basis.gram() - Eigen::MatrixXd::Identity(n, n)).cwiseAbs().maxCoeff() < 1e-12);

    // continuous steering at arbitrary angles
    const auto coeffs = random_coeffs(n, 23);
    CHECK(kernel_constraint_residual(basis, coeffs, probe_angles) < 1e-10);

    // grid rotations are exact on the sampled kernel too
    const auto kernel = expand_kernel(basis, coeffs);
    CHECK(kernel_constraint_residual(kernel, g, rep_in, rep_out, c.k) < 1e-12);

    // sampled elements lie inside the C_4-materialized solution space
    std::vector<GroupElement> c4;
    for (int j = 0; j < 4; ++j) c4.push_back(GroupElement::rotation(j * kPi / 2));
    const auto constraint = materialize_constraint(c4, rep_in, rep_out, c.k);
    for (int i = 0; i < n; ++i)
      CHECK((constraint * as_oracle_vec(basis, i)).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("SO(2) frequency-1 column values") {
  auto g = GroupSpec::so2(1);
  auto basis =
      solve_kernel_basis(Representation::trivial(g), Representation::irrep(g, 1), g, 3);
  REQUIRE(basis.dimension() == 4);
  // element 0: ring r^2=1, phase 0: rows (cos, sin)/2 at E,N,W,S cells
  CHECK(basis.elements[0](0, 5) == doctest::Approx(0.5));       // cos at east
  CHECK(basis.elements[0](1, 1) == doctest::Approx(0.5));       // sin at north
  CHECK(basis.elements[0](0, 3) == doctest::Approx(-0.5));      // cos at west
  CHECK(basis.elements[0](1, 7) == doctest::Approx(-0.5));      // sin at south
  CHECK(basis.elements[0](0, 4) == doctest::Approx(0.0));       // zero at center
  // analytic metadata reproduces the sampled values
  const auto grid = make_kernel_grid(3);
  for (int cell : grid.ring_cells[1]) {
    const Eigen::MatrixXd v = eval_analytic_element(basis, 0, 1, grid.angles[cell]);
    CHECK(v(0, 0) == doctest::Approx(basis.elements[0](0, cell)));
    CHECK(v(1, 0) == doctest::Approx(basis.elements[0](1, cell)));
  }
}

TEST_CASE("expand_kernel contract") {
  auto g = GroupSpec::dihedral(4);
  auto rep = Representation::regular(g);
  const auto& basis = cached_kernel_basis(rep, rep, g, 3);
  CHECK(&cached_kernel_basis(rep, rep, g, 3) == &basis);  // memoised

  const int n = basis.dimension();
  CHECK(expand_kernel(basis, Eigen::VectorXd::Zero(n)).cwiseAbs().maxCoeff() == 0.0);

  Eigen::VectorXd onehot = Eigen::VectorXd::Zero(n);
  onehot(5) = 1.0;
  CHECK((expand_kernel(basis, onehot) - basis.elements[5]).cwiseAbs().maxCoeff() == 0.0);

  // orthonormality round trip: project an expansion back onto the basis
  const auto coeffs = random_coeffs(n, 91);
  const auto kernel = expand_kernel(basis, coeffs);
  for (int i = 0; i < n; ++i) {
    const double recovered =
        (basis.elements[i].array() * kernel.array()).sum();
    CHECK(recovered == doctest::Approx(coeffs(i)).epsilon(1e-10));
  }

  CHECK_THROWS_AS(expand_kernel(basis, Eigen::VectorXd::Zero(n + 1)), LengthMismatch);
}

TEST_CASE("residual examples") {
  auto g = GroupSpec::cyclic(4);
  auto triv = Representation::trivial(g);

  // isotropic Gaussian is rotation invariant
  const auto grid = make_kernel_grid(3);
  Eigen::MatrixXd gauss(1, 9);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      const double dx = c - 1, dy = 1 - r;
      gauss(0, grid.cell(r, c)) = std::exp(-(dx * dx + dy * dy) / 2);
    }
  CHECK(kernel_constraint_residual(gauss, g, triv, triv, 3) < 1e-10);

  // a generic kernel violates the constraint
  Eigen::MatrixXd random_kernel(1, 9);
  std::mt19937 gen(5);
  std::normal_distribution<double> dist;
  for (int i = 0; i < 9; ++i) random_kernel(0, i) = dist(gen);
  CHECK(kernel_constraint_residual(random_kernel, g, triv, triv, 3) > 1e-3);

  CHECK_THROWS_AS(
      kernel_constraint_residual(Eigen::MatrixXd::Zero(2, 9), g, triv, triv, 3),
      ShapeMismatch);
}

TEST_CASE("expanding then steering commutes") {
  auto g = GroupSpec::dihedral(4);
  auto rep_in = Representation::trivial(g);
  auto rep_out = Representation::regular(g);
  const auto basis = solve_kernel_basis(rep_in, rep_out, g, 3);
  const auto kernel = expand_kernel(basis, random_coeffs(basis.dimension(), 17));
  const auto grid = make_kernel_grid(3);
  for (const auto& e : enumerate_elements(g)) {
    const Eigen::MatrixXd mo = rep_out.matrix(e);
    for (int cell = 0; cell < 9; ++cell) {
      const int moved = steered_cell(grid, cell, e);
      for (int a = 0; a < 8; ++a) {
        double expected = 0.0;
        for (int p = 0; p < 8; ++p) expected += mo(a, p) * kernel(p, cell);
        CHECK(kernel(a, moved) == doctest::Approx(expected).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("basis dimension survives re-mixing") {
  auto g = GroupSpec::cyclic(4);
  auto rep = Representation::regular(g);
  const auto basis = solve_kernel_basis(rep, rep, g, 3);
  const int n = basis.dimension();
  Eigen::MatrixXd stacked(n, basis.elements[0].size());
  for (int i = 0; i < n; ++i)
    stacked.row(i) = Eigen::Map<const Eigen::VectorXd>(basis.elements[i].data(),
                                                       basis.elements[i].size());
  // mix by a random well-conditioned matrix; the span (and so the rank) holds
  Eigen::MatrixXd mix = Eigen::MatrixXd::Identity(n, n);
  std::mt19937 gen(2);
  std::normal_distribution<double> dist;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) mix(i, j) += 0.2 * dist(gen);
  Eigen::BDCSVD<Eigen::MatrixXd> svd(mix * stacked);
  const auto& sv = svd.singularValues();
  int rank = 0;
  for (int i = 0; i < sv.size(); ++i)
    if (sv(i) > 1e-8 * sv(0)) ++rank;
  CHECK(rank == n);
}

TEST_CASE("group/representation mismatches are rejected") {
  auto c4 = GroupSpec::cyclic(4);
  auto d4 = GroupSpec::dihedral(4);
  CHECK_THROWS_AS(solve_kernel_basis(Representation::trivial(c4), Representation::trivial(d4),
                                     d4, 3),
                  ElementGroupMismatch);
  CHECK_THROWS_AS(kernel_constraint_residual(solve_kernel_basis(Representation::trivial(c4),
                                                                Representation::trivial(c4), c4, 3),
                                             Eigen::VectorXd::Zero(3), {0.1}),
                  ContinuousGroup);
}

TEST_SUITE_END();
