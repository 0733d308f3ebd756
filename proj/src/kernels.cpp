#include "eqdp/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <tuple>

#include "eqdp/common.hpp"

namespace eqdp {
namespace {

// Residual norm below which a Gram-Schmidt candidate counts as dependent
// (candidates are normalized before orthogonalization).
constexpr double kDropTol = 1e-8;

int freq_of(const Representation& rep) {
  return rep.kind == RepKind::irrep ? rep.frequency : 0;
}

Eigen::MatrixXd form_value(AngularForm form, int m, double phase, double theta) {
  const double psi = m * theta - phase;
  const double c = std::cos(psi), s = std::sin(psi);
  switch (form) {
    case AngularForm::scalar:
      return Eigen::MatrixXd::Constant(1, 1, c);
    case AngularForm::column:
      return (Eigen::MatrixXd(2, 1) << c, s).finished();
    case AngularForm::row:
      return (Eigen::MatrixXd(1, 2) << c, s).finished();
    case AngularForm::rotation:
      return (Eigen::MatrixXd(2, 2) << c, -s, s, c).finished();
    case AngularForm::reflected_rotation:
      return (Eigen::MatrixXd(2, 2) << c, s, s, -c).finished();
  }
  throw Error("unknown angular form");
}

Eigen::Map<const Eigen::VectorXd> flat(const Eigen::MatrixXd& m) {
  return {m.data(), m.size()};
}

Eigen::Map<Eigen::VectorXd> flat(Eigen::MatrixXd& m) { return {m.data(), m.size()}; }

// One orthonormalization bucket: candidates whose supports overlap. Candidates
// from different buckets (different orbits or rings) are orthogonal by
// construction and never compared.
struct Candidate {
  Eigen::MatrixXd mat;
  std::vector<AngularTerm> terms;
};

struct Bucket {
  std::vector<Eigen::VectorXd> gates;  // orthonormalized gate vectors
  std::vector<Candidate> kept;
};

// Admission is decided on the candidate's gate vector (for finite groups the
// samples on the orbit's base slice, for SO(2) the whole sample vector): a
// harmonic whose gate samples are spanned by lower-frequency harmonics adds no
// new sampled degree of freedom and is dropped, keeping the basis the
// minimal-bandwidth extension of the gate samples. Admitted candidates are
// then orthonormalized in full by modified Gram-Schmidt.
bool absorb_candidate(Candidate cand, Eigen::VectorXd gate, Bucket& bucket, KernelBasis& out) {
  const double gate_raw = gate.norm();
  if (gate_raw < 1e-12) return false;
  gate /= gate_raw;
  for (const auto& u : bucket.gates) gate -= u.dot(gate) * u;
  const double gate_left = gate.norm();
  if (gate_left <= kDropTol) return false;
  bucket.gates.push_back(gate / gate_left);

  const double raw = flat(cand.mat).norm();
  flat(cand.mat) /= raw;
  for (auto& t : cand.terms) t.coeff /= raw;
  for (const auto& u : bucket.kept) {
    const double r = flat(u.mat).dot(flat(cand.mat));
    flat(cand.mat) -= r * flat(u.mat);
    for (const auto& t : u.terms) {
      AngularTerm scaled = t;
      scaled.coeff *= -r;
      cand.terms.push_back(scaled);
    }
  }
  const double left = flat(cand.mat).norm();
  if (left < 1e-12) return false;  // unreachable when gating is sound
  flat(cand.mat) /= left;
  for (auto& t : cand.terms) t.coeff /= left;
  out.elements.push_back(cand.mat);
  out.analytic.push_back(cand.terms);
  bucket.kept.push_back(std::move(cand));
  return true;
}

// Finite groups with permutation representations: the constraint couples the
// matrix labels (a, b) and the grid in a single group action, so solutions
// decompose over orbits of label pairs. On each orbit the kernel is free on
// the base pair up to invariance under the pair's stabilizer, which on a ring
// of the grid admits exactly the harmonics cos(m theta - gamma) with m a
// multiple of the stabilizer's rotation order (phase pinned by a stabilizer
// reflection when present). Harmonics are admitted while they contribute new
// sampled values on the base slice (the minimal-bandwidth rule); transport to
// the other orbit members evaluates the same harmonic at rotated angles, so
// steering stays exact in the continuum and on the grid for grid-preserving
// elements.
KernelBasis solve_finite(const Representation& rep_in, const Representation& rep_out,
                         const GroupSpec& group, const KernelGrid& grid) {
  if (!rep_in.is_permutation_rep() || !rep_out.is_permutation_rep())
    throw Error("finite-group kernel bases require trivial or regular representations");

  const auto elems = enumerate_elements(group);
  const int d_in = rep_in.dimension();
  const int d_out = rep_out.dimension();
  std::vector<std::vector<int>> perm_in, perm_out;
  perm_in.reserve(elems.size());
  perm_out.reserve(elems.size());
  for (const auto& g : elems) {
    perm_in.push_back(rep_in.permutation(g));
    perm_out.push_back(rep_out.permutation(g));
  }

  KernelBasis basis{group, rep_in, rep_out, grid.size, {}, {}};

  std::vector<char> visited(size_t(d_out) * d_in, 0);
  for (int a0 = 0; a0 < d_out; ++a0) {
    for (int b0 = 0; b0 < d_in; ++b0) {
      if (visited[size_t(a0) * d_in + b0]) continue;

      // Orbit of the base pair, with one transporting element per member.
      struct Slice {
        int a, b;
        GroupElement g;
      };
      std::vector<Slice> slices;
      std::vector<GroupElement> stabilizer;
      for (size_t gi = 0; gi < elems.size(); ++gi) {
        const int a = perm_out[gi][a0];
        const int b = perm_in[gi][b0];
        if (a == a0 && b == b0) stabilizer.push_back(elems[gi]);
        auto& seen = visited[size_t(a) * d_in + b];
        if (!seen) {
          seen = 1;
          slices.push_back({a, b, elems[gi]});
        }
      }

      int rot_order = 0;
      bool has_reflection = false;
      double refl_angle = 0.0;
      for (const auto& h : stabilizer) {
        if (!h.reflect) {
          ++rot_order;
        } else if (!has_reflection || h.angle < refl_angle) {
          has_reflection = true;
          refl_angle = h.angle;
        }
      }

      for (size_t ring = 0; ring < grid.ring_cells.size(); ++ring) {
        const auto& cells = grid.ring_cells[ring];
        const int m_cap = int(cells.size()) / 2;
        Bucket bucket;
        for (int m = 0; m <= m_cap; m += rot_order) {
          std::vector<double> phases;
          if (m == 0)
            phases = {0.0};
          else if (has_reflection)
            phases = {std::fmod(0.5 * m * refl_angle, kPi)};
          else
            phases = {0.0, kPi / 2};
          for (double gamma : phases) {
            Candidate cand;
            cand.mat = Eigen::MatrixXd::Zero(size_t(d_out) * d_in, grid.num_cells());
            Eigen::VectorXd gate(cells.size());
            for (const auto& s : slices) {
              for (size_t ci = 0; ci < cells.size(); ++ci) {
                const int cell = cells[ci];
                const double theta = grid.angles[cell];
                const double local = s.g.reflect ? s.g.angle - theta : theta - s.g.angle;
                const double value = std::cos(m * local - gamma);
                cand.mat(s.a * d_in + s.b, cell) = value;
                if (s.a == a0 && s.b == b0) gate(ci) = value;
              }
            }
            absorb_candidate(std::move(cand), std::move(gate), bucket, basis);
          }
        }
      }
    }
  }
  return basis;
}

// SO(2): closed-form harmonics per ring. Between input frequency f_in and
// output frequency f_out the intertwining angular frequencies are
// m = f_out - f_in and m = f_out + f_in; scalar endpoints collapse the block
// to a single cosine column/row.
KernelBasis solve_so2(const Representation& rep_in, const Representation& rep_out,
                      const GroupSpec& group, const KernelGrid& grid) {
  const int f_in = freq_of(rep_in);
  const int f_out = freq_of(rep_out);
  const int d_in = rep_in.dimension();
  const int d_out = rep_out.dimension();

  std::vector<std::pair<AngularForm, int>> branches;
  if (f_in == 0 && f_out == 0)
    branches = {{AngularForm::scalar, 0}};
  else if (f_in == 0)
    branches = {{AngularForm::column, f_out}};
  else if (f_out == 0)
    branches = {{AngularForm::row, f_in}};
  else
    branches = {{AngularForm::rotation, f_out - f_in},
                {AngularForm::reflected_rotation, f_out + f_in}};

  KernelBasis basis{group, rep_in, rep_out, grid.size, {}, {}};

  for (size_t ring = 0; ring < grid.ring_cells.size(); ++ring) {
    const auto& cells = grid.ring_cells[ring];
    const int m_cap = int(cells.size()) / 2;
    const bool center = grid.squared_radius[ring] == 0;
    Bucket bucket;
    for (const auto& [form, m] : branches) {
      if (std::abs(m) > m_cap) continue;
      if (center && m != 0) continue;  // only single-valued forms at the origin
      const bool lone_phase = form == AngularForm::scalar && m == 0;
      for (double gamma : lone_phase ? std::vector<double>{0.0}
                                     : std::vector<double>{0.0, kPi / 2}) {
        Candidate cand;
        cand.mat = Eigen::MatrixXd::Zero(size_t(d_out) * d_in, grid.num_cells());
        for (int cell : cells) {
          const Eigen::MatrixXd v = form_value(form, m, gamma, grid.angles[cell]);
          for (int a = 0; a < d_out; ++a)
            for (int b = 0; b < d_in; ++b) cand.mat(a * d_in + b, cell) = v(a, b);
        }
        cand.terms = {{form, int(ring), m, gamma, 1.0}};
        Eigen::VectorXd gate = flat(cand.mat);
        absorb_candidate(std::move(cand), std::move(gate), bucket, basis);
      }
    }
  }
  return basis;
}

std::vector<GroupElement> tested_elements(const GroupSpec& group) {
  std::vector<GroupElement> out;
  if (group.is_finite()) {
    for (const auto& g : enumerate_elements(group))
      if (exact_steering(g)) out.push_back(g);
  } else {
    for (int j = 0; j < 4; ++j) out.push_back(GroupElement::rotation(j * kPi / 2));
  }
  return out;
}

Eigen::MatrixXd cell_matrix(const Eigen::MatrixXd& kernel, int cell, int d_out, int d_in) {
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      kernel.col(cell).data(), d_out, d_in);
}

// Bilinear sample of the kernel at continuous grid offsets (dx, dy), zero
// outside the sampled square.
Eigen::MatrixXd bilinear_sample(const Eigen::MatrixXd& kernel, const KernelGrid& grid, double dx,
                                double dy, int d_out, int d_in) {
  const double col = dx + grid.half;
  const double row = grid.half - dy;
  const int c0 = int(std::floor(col)), r0 = int(std::floor(row));
  const double fc = col - c0, fr = row - r0;
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(d_out, d_in);
  for (int ir = 0; ir < 2; ++ir) {
    for (int ic = 0; ic < 2; ++ic) {
      const int r = r0 + ir, c = c0 + ic;
      if (r < 0 || r >= grid.size || c < 0 || c >= grid.size) continue;
      const double w = (ir ? fr : 1 - fr) * (ic ? fc : 1 - fc);
      if (w == 0.0) continue;
      acc += w * cell_matrix(kernel, grid.cell(r, c), d_out, d_in);
    }
  }
  return acc;
}

void check_kernel_shape(const Eigen::MatrixXd& kernel, const Representation& rep_in,
                        const Representation& rep_out, const KernelGrid& grid) {
  if (kernel.rows() != rep_out.dimension() * rep_in.dimension() ||
      kernel.cols() != grid.num_cells())
    throw ShapeMismatch("kernel shape does not match representations and grid");
}

}  // namespace

KernelGrid make_kernel_grid(int kernel_size) {
  if (kernel_size < 1 || kernel_size % 2 == 0 || kernel_size > 7)
    throw UnsupportedKernelSize("kernel size must be one of 1, 3, 5, 7; got " +
                                std::to_string(kernel_size));
  KernelGrid grid;
  grid.size = kernel_size;
  grid.half = (kernel_size - 1) / 2;
  grid.angles.resize(grid.num_cells());
  grid.ring_index.resize(grid.num_cells());
  std::map<int, std::vector<int>> by_radius;
  for (int r = 0; r < kernel_size; ++r) {
    for (int c = 0; c < kernel_size; ++c) {
      const int dx = c - grid.half, dy = grid.half - r;
      const int idx = grid.cell(r, c);
      grid.angles[idx] = (dx == 0 && dy == 0) ? 0.0 : std::atan2(double(dy), double(dx));
      by_radius[dx * dx + dy * dy].push_back(idx);
    }
  }
  for (const auto& [r2, cells] : by_radius) {
    for (int idx : cells) grid.ring_index[idx] = int(grid.squared_radius.size());
    grid.squared_radius.push_back(r2);
    grid.ring_cells.push_back(cells);
  }
  return grid;
}

bool exact_steering(const GroupElement& e) {
  const double q = e.angle / (kPi / 2);
  return std::abs(q - std::round(q)) < 1e-9;
}

int steered_cell(const KernelGrid& grid, int idx, const GroupElement& e) {
  require(exact_steering(e), "steered_cell needs a grid-preserving element");
  const int row = idx / grid.size, col = idx % grid.size;
  int dx = col - grid.half, dy = grid.half - row;
  if (e.reflect) dy = -dy;
  const int c = int(std::llround(std::cos(e.angle)));
  const int s = int(std::llround(std::sin(e.angle)));
  const int nx = c * dx - s * dy;
  const int ny = s * dx + c * dy;
  return grid.cell(grid.half - ny, nx + grid.half);
}

Eigen::MatrixXd KernelBasis::gram() const {
  const int n = dimension();
  Eigen::MatrixXd g(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) g(i, j) = flat(elements[i]).dot(flat(elements[j]));
  return g;
}

KernelBasis solve_kernel_basis(const Representation& rep_in, const Representation& rep_out,
                               const GroupSpec& group, int kernel_size) {
  if (!(rep_in.group == group) || !(rep_out.group == group))
    throw ElementGroupMismatch("kernel representations must share the group");
  const KernelGrid grid = make_kernel_grid(kernel_size);
  return group.is_finite() ? solve_finite(rep_in, rep_out, group, grid)
                           : solve_so2(rep_in, rep_out, group, grid);
}

const KernelBasis& cached_kernel_basis(const Representation& rep_in, const Representation& rep_out,
                                       const GroupSpec& group, int kernel_size) {
  using Key = std::tuple<int, int, int, int, int, int, int, int>;
  static std::map<Key, std::unique_ptr<KernelBasis>> cache;
  static std::shared_mutex mutex;
  const Key key{int(group.kind), group.rotation_order, group.max_frequency,
                int(rep_in.kind),  rep_in.frequency,    int(rep_out.kind),
                rep_out.frequency, kernel_size};
  {
    std::shared_lock lock(mutex);
    if (auto it = cache.find(key); it != cache.end()) return *it->second;
  }
  auto fresh = std::make_unique<KernelBasis>(solve_kernel_basis(rep_in, rep_out, group, kernel_size));
  std::unique_lock lock(mutex);
  return *cache.try_emplace(key, std::move(fresh)).first->second;
}

Eigen::MatrixXd expand_kernel(const KernelBasis& basis, const Eigen::VectorXd& coefficients) {
  if (coefficients.size() != basis.dimension())
    throw LengthMismatch("expected " + std::to_string(basis.dimension()) + " coefficients, got " +
                         std::to_string(coefficients.size()));
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(
      size_t(basis.rep_out.dimension()) * basis.rep_in.dimension(),
      size_t(basis.kernel_size) * basis.kernel_size);
  for (int i = 0; i < basis.dimension(); ++i) out += coefficients(i) * basis.elements[i];
  return out;
}

Eigen::MatrixXd eval_analytic_element(const KernelBasis& basis, int index, int ring, double theta) {
  require(index >= 0 && index < basis.dimension(), "basis element index out of range");
  Eigen::MatrixXd acc =
      Eigen::MatrixXd::Zero(basis.rep_out.dimension(), basis.rep_in.dimension());
  for (const auto& t : basis.analytic[size_t(index)])
    if (t.ring == ring) acc += t.coeff * form_value(t.form, t.m, t.phase, theta);
  return acc;
}

double kernel_constraint_residual(const Eigen::MatrixXd& kernel, const GroupSpec& group,
                                  const Representation& rep_in, const Representation& rep_out,
                                  int kernel_size) {
  const KernelGrid grid = make_kernel_grid(kernel_size);
  check_kernel_shape(kernel, rep_in, rep_out, grid);
  const int d_in = rep_in.dimension(), d_out = rep_out.dimension();
  double worst = 0.0;
  for (const auto& g : tested_elements(group)) {
    const Eigen::MatrixXd m_out = rep_out.matrix(g);
    const Eigen::MatrixXd m_in = rep_in.matrix(g);
    for (int cell = 0; cell < grid.num_cells(); ++cell) {
      const Eigen::MatrixXd steered =
          cell_matrix(kernel, steered_cell(grid, cell, g), d_out, d_in);
      const Eigen::MatrixXd expected =
          m_out * cell_matrix(kernel, cell, d_out, d_in) * m_in.transpose();
      worst = std::max(worst, (steered - expected).cwiseAbs().maxCoeff());
    }
  }
  return worst;
}

double kernel_constraint_residual(const KernelBasis& basis, const Eigen::VectorXd& coefficients,
                                  const std::vector<double>& angles) {
  if (basis.group.is_finite())
    throw ContinuousGroup("continuous residual applies to SO(2) analytic bases");
  if (coefficients.size() != basis.dimension())
    throw LengthMismatch("coefficient count does not match basis dimension");
  const KernelGrid grid = make_kernel_grid(basis.kernel_size);
  const auto eval = [&](int ring, double theta) {
    Eigen::MatrixXd acc =
        Eigen::MatrixXd::Zero(basis.rep_out.dimension(), basis.rep_in.dimension());
    for (int i = 0; i < basis.dimension(); ++i)
      acc += coefficients(i) * eval_analytic_element(basis, i, ring, theta);
    return acc;
  };
  double worst = 0.0;
  for (double phi : angles) {
    const GroupElement g = GroupElement::rotation(wrap_angle(phi));
    const Eigen::MatrixXd m_out = basis.rep_out.matrix(g);
    const Eigen::MatrixXd m_in = basis.rep_in.matrix(g);
    for (size_t ring = 0; ring < grid.ring_cells.size(); ++ring) {
      for (int cell : grid.ring_cells[ring]) {
        const double theta = grid.angles[cell];
        const Eigen::MatrixXd lhs = eval(int(ring), theta + phi);
        const Eigen::MatrixXd rhs = m_out * eval(int(ring), theta) * m_in.transpose();
        worst = std::max(worst, (lhs - rhs).cwiseAbs().maxCoeff());
      }
    }
  }
  return worst;
}

std::vector<std::pair<GroupElement, double>> steering_residuals_per_element(
    const Eigen::MatrixXd& kernel, const GroupSpec& group, const Representation& rep_in,
    const Representation& rep_out, int kernel_size) {
  if (!group.is_finite())
    throw ContinuousGroup("per-element residuals enumerate a finite group");
  const KernelGrid grid = make_kernel_grid(kernel_size);
  check_kernel_shape(kernel, rep_in, rep_out, grid);
  const int d_in = rep_in.dimension(), d_out = rep_out.dimension();
  std::vector<std::pair<GroupElement, double>> out;
  for (const auto& g : enumerate_elements(group)) {
    const Eigen::MatrixXd m_out = rep_out.matrix(g);
    const Eigen::MatrixXd m_in = rep_in.matrix(g);
    double worst = 0.0;
    for (int cell = 0; cell < grid.num_cells(); ++cell) {
      Eigen::MatrixXd steered;
      if (exact_steering(g)) {
        steered = cell_matrix(kernel, steered_cell(grid, cell, g), d_out, d_in);
      } else {
        const int row = cell / grid.size, col = cell % grid.size;
        double dx = col - grid.half, dy = grid.half - row;
        if (g.reflect) dy = -dy;
        const double c = std::cos(g.angle), s = std::sin(g.angle);
        steered = bilinear_sample(kernel, grid, c * dx - s * dy, s * dx + c * dy, d_out, d_in);
      }
      const Eigen::MatrixXd expected =
          m_out * cell_matrix(kernel, cell, d_out, d_in) * m_in.transpose();
      worst = std::max(worst, (steered - expected).cwiseAbs().maxCoeff());
    }
    out.emplace_back(g, worst);
  }
  return out;
}

}  // namespace eqdp
