#include "eqdp/groups.hpp"

#include <cmath>

namespace eqdp {

namespace {

constexpr double kAngleTol = 1e-9;

int rotation_index(const GroupSpec& g, double angle) {
  const double step = kTwoPi / g.rotation_order;
  const double k = wrap_angle(angle) / step;
  const int ki = static_cast<int>(std::lround(k));
  if (std::abs(k - ki) > kAngleTol * g.rotation_order)
    throw ElementGroupMismatch("angle is not a multiple of 2*pi/" +
                               std::to_string(g.rotation_order));
  return ki % g.rotation_order;
}

}  // namespace

GroupSpec GroupSpec::cyclic(int n) {
  require(n >= 1, "cyclic: rotation order must be >= 1");
  return {GroupKind::cyclic, n, 0};
}

GroupSpec GroupSpec::dihedral(int n) {
  require(n >= 1, "dihedral: rotation order must be >= 1");
  return {GroupKind::dihedral, n, 0};
}

GroupSpec GroupSpec::so2(int max_frequency) {
  require(max_frequency >= 0, "so2: max frequency must be >= 0");
  return {GroupKind::so2, 0, max_frequency};
}

int GroupSpec::order() const {
  if (!is_finite()) throw ContinuousGroup("SO(2) has no finite order");
  return kind == GroupKind::dihedral ? 2 * rotation_order : rotation_order;
}

GroupElement compose(const GroupElement& g, const GroupElement& h) {
  // R(a)F^e . R(b)F^d = R(a + (-1)^e b) F^(e xor d)
  const double b = g.reflect ? -h.angle : h.angle;
  return {wrap_angle(g.angle + b), g.reflect != h.reflect};
}

GroupElement inverse(const GroupElement& g) {
  return g.reflect ? g : GroupElement{wrap_angle(-g.angle), false};
}

std::vector<GroupElement> enumerate_elements(const GroupSpec& g) {
  if (!g.is_finite()) throw ContinuousGroup("cannot enumerate SO(2)");
  std::vector<GroupElement> out;
  out.reserve(g.order());
  for (int k = 0; k < g.rotation_order; ++k) {
    const double a = kTwoPi * k / g.rotation_order;
    out.push_back(GroupElement::rotation(a));
    if (g.kind == GroupKind::dihedral) out.push_back(GroupElement::reflection(a));
  }
  return out;
}

int element_index(const GroupSpec& g, const GroupElement& e) {
  if (!g.is_finite()) throw ContinuousGroup("SO(2) elements are not indexed");
  if (e.reflect && g.kind != GroupKind::dihedral)
    throw ElementGroupMismatch("cyclic group has no reflections");
  const int k = rotation_index(g, e.angle);
  return g.kind == GroupKind::dihedral ? 2 * k + (e.reflect ? 1 : 0) : k;
}

Representation Representation::trivial(const GroupSpec& g) {
  Representation r;
  r.kind = RepKind::trivial;
  r.group = g;
  return r;
}

Representation Representation::regular(const GroupSpec& g) {
  require(g.is_finite(), "regular representation needs a finite group");
  Representation r;
  r.kind = RepKind::regular;
  r.group = g;
  return r;
}

Representation Representation::irrep(const GroupSpec& g, int frequency) {
  require(g.kind == GroupKind::so2, "irrep fields are provided for SO(2) only");
  require(frequency >= 0 && frequency <= g.max_frequency,
          "irrep frequency outside the band limit");
  Representation r;
  r.kind = RepKind::irrep;
  r.group = g;
  r.frequency = frequency;
  return r;
}

int Representation::dimension() const {
  switch (kind) {
    case RepKind::trivial: return 1;
    case RepKind::regular: return group.order();
    case RepKind::irrep: return frequency == 0 ? 1 : 2;
  }
  return 0;
}

std::vector<int> Representation::permutation(const GroupElement& e) const {
  require(is_permutation_rep(), "permutation() requires a permutation representation");
  if (kind != RepKind::regular) {
    if (e.reflect && group.kind == GroupKind::cyclic)
      throw ElementGroupMismatch("cyclic group has no reflections");
    if (group.is_finite()) (void)element_index(group, e);
    return {0};
  }
  const auto elems = enumerate_elements(group);
  std::vector<int> perm(elems.size());
  for (std::size_t i = 0; i < elems.size(); ++i)
    perm[i] = element_index(group, compose(e, elems[i]));
  return perm;
}

Eigen::MatrixXd Representation::matrix(const GroupElement& e) const {
  switch (kind) {
    case RepKind::trivial: {
      if (group.is_finite())
        (void)element_index(group, e);  // validates membership
      else if (e.reflect)
        throw ElementGroupMismatch("SO(2) has no reflections");
      return Eigen::MatrixXd::Identity(1, 1);
    }
    case RepKind::regular: {
      const int idx = element_index(group, e);
      if (!cache_) {
        auto cache = std::make_shared<std::vector<Eigen::MatrixXd>>();
        const auto elems = enumerate_elements(group);
        const int n = static_cast<int>(elems.size());
        cache->reserve(n);
        for (const auto& g : elems) {
          Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, n);
          const auto perm = permutation(g);
          for (int j = 0; j < n; ++j) m(perm[j], j) = 1.0;
          cache->push_back(std::move(m));
        }
        cache_ = std::move(cache);
      }
      return (*cache_)[idx];
    }
    case RepKind::irrep: {
      if (e.reflect) throw ElementGroupMismatch("SO(2) has no reflections");
      if (frequency == 0) return Eigen::MatrixXd::Identity(1, 1);
      const double a = frequency * e.angle;
      Eigen::MatrixXd m(2, 2);
      m << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
      return m;
    }
  }
  throw Error("unreachable representation kind");
}

Eigen::MatrixXd haar_mean_projector(const Representation& rep) {
  const int d = rep.dimension();
  if (rep.group.is_finite()) {
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(d, d);
    const auto elems = enumerate_elements(rep.group);
    for (const auto& g : elems) acc += rep.matrix(g);
    return acc / static_cast<double>(elems.size());
  }
  // SO(2): the integral of cos/sin over a full period vanishes, so only the
  // frequency-0 component survives.
  if (rep.kind == RepKind::irrep && rep.frequency > 0)
    return Eigen::MatrixXd::Zero(2, 2);
  return Eigen::MatrixXd::Identity(1, 1);
}

int FieldType::total_channels() const {
  int c = 0;
  for (const auto& [rep, mult] : fields) c += rep.dimension() * mult;
  return c;
}

int FieldType::num_field_copies() const {
  int c = 0;
  for (const auto& [rep, mult] : fields) c += mult;
  return c;
}

std::vector<Representation> FieldType::expanded() const {
  std::vector<Representation> out;
  out.reserve(num_field_copies());
  for (const auto& [rep, mult] : fields)
    for (int i = 0; i < mult; ++i) out.push_back(rep);
  return out;
}

Eigen::MatrixXd FieldType::action(const GroupElement& e) const {
  const int c = total_channels();
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(c, c);
  int off = 0;
  for (const auto& rep : expanded()) {
    const int d = rep.dimension();
    m.block(off, off, d, d) = rep.matrix(e);
    off += d;
  }
  return m;
}

FieldType FieldType::trivial_fields(const GroupSpec& g, int count) {
  return {g, {{Representation::trivial(g), count}}};
}

FieldType FieldType::regular_fields(const GroupSpec& g, int count) {
  return {g, {{Representation::regular(g), count}}};
}

FieldType FieldType::so2_band_fields(const GroupSpec& g, int copies) {
  require(g.kind == GroupKind::so2, "band fields are an SO(2) layout");
  FieldType ft;
  ft.group = g;
  for (int c = 0; c < copies; ++c) {
    ft.fields.emplace_back(Representation::trivial(g), 1);
    for (int f = 1; f <= g.max_frequency; ++f)
      ft.fields.emplace_back(Representation::irrep(g, f), 1);
  }
  return ft;
}

RestrictedFieldType restrict_field_type(const FieldType& ft) {
  const GroupSpec& g = ft.group;

  if (g.kind == GroupKind::so2) {
    // Keep the invariant (frequency-0) components.
    GroupSpec sub = g;
    sub.max_frequency = 0;
    FieldType out;
    out.group = sub;
    int kept = 0, off = 0;
    std::vector<std::pair<int, int>> picks;  // (orig channel, new channel)
    for (const auto& rep : ft.expanded()) {
      if (rep.kind == RepKind::trivial || (rep.kind == RepKind::irrep && rep.frequency == 0)) {
        picks.emplace_back(off, kept++);
        out.fields.emplace_back(Representation::trivial(sub), 1);
      }
      off += rep.dimension();
    }
    Eigen::MatrixXd basis = Eigen::MatrixXd::Zero(ft.total_channels(), kept);
    for (const auto& [src, dst] : picks) basis(src, dst) = 1.0;
    return {out, basis};
  }

  if (g.rotation_order % 2 != 0)
    throw OddRotationOrder("cannot halve rotation order " + std::to_string(g.rotation_order));
  GroupSpec sub = g;
  sub.rotation_order = g.rotation_order / 2;

  FieldType out;
  out.group = sub;
  const int total = ft.total_channels();
  Eigen::MatrixXd basis = Eigen::MatrixXd::Zero(total, total);
  int off = 0, sub_off = 0;
  const GroupElement coset_rep = GroupElement::rotation(kTwoPi / g.rotation_order);
  const auto sub_elems = enumerate_elements(sub);
  for (const auto& rep : ft.expanded()) {
    if (rep.kind == RepKind::trivial) {
      out.fields.emplace_back(Representation::trivial(sub), 1);
      basis(off, sub_off) = 1.0;
      off += 1;
      sub_off += 1;
      continue;
    }
    // Left-regular of G splits into [G:H]=2 copies of the regular rep of H,
    // one per right coset H.x_t: the new basis vector (t, h) is e_{h x_t}.
    out.fields.emplace_back(Representation::regular(sub), 2);
    const int hsz = static_cast<int>(sub_elems.size());
    for (int t = 0; t < 2; ++t) {
      for (int i = 0; i < hsz; ++i) {
        // Subgroup element (k, eps) corresponds to (2k, eps) in G.
        GroupElement h_in_g{wrap_angle(sub_elems[i].angle), sub_elems[i].reflect};
        const GroupElement target =
            t == 0 ? h_in_g : compose(h_in_g, coset_rep);
        basis(off + element_index(g, target), sub_off + t * hsz + i) = 1.0;
      }
    }
    off += rep.dimension();
    sub_off += rep.dimension();
  }
  return {out, basis};
}

FourierPair group_fourier_pair(const FieldType& ft, int num_samples) {
  require(ft.group.kind == GroupKind::so2, "group Fourier pair is defined for SO(2)");
  int max_f = 0;
  std::vector<int> freqs;
  for (const auto& rep : ft.expanded()) {
    const int f = rep.kind == RepKind::irrep ? rep.frequency : 0;
    for (int seen : freqs)
      require(seen != f, "group_fourier_pair: duplicate frequency in band");
    freqs.push_back(f);
    max_f = std::max(max_f, f);
  }
  if (num_samples < 2 * max_f + 1)
    throw Undersampled("need >= " + std::to_string(2 * max_f + 1) + " samples, got " +
                       std::to_string(num_samples));

  const int c = ft.total_channels();
  Eigen::MatrixXd inverse(num_samples, c);
  for (int j = 0; j < num_samples; ++j) {
    const double theta = kTwoPi * j / num_samples;
    int col = 0;
    for (int f : freqs) {
      if (f == 0) {
        inverse(j, col++) = 1.0;
      } else {
        inverse(j, col++) = std::cos(f * theta);
        inverse(j, col++) = std::sin(f * theta);
      }
    }
  }
  // Left pseudo-inverse: full column rank is guaranteed by the sample bound.
  Eigen::MatrixXd gram = inverse.transpose() * inverse;
  Eigen::MatrixXd forward = gram.ldlt().solve(inverse.transpose());
  return {std::move(forward), std::move(inverse)};
}

}  // namespace eqdp
