#pragma once

#include <Eigen/Dense>
#include <memory>
#include <utility>
#include <vector>

#include "eqdp/common.hpp"

namespace eqdp {

enum class GroupKind { cyclic, dihedral, so2 };

/// A planar symmetry group: C_N (rotations), D_N (rotations + reflections),
/// or the continuous rotation group SO(2) band-limited by max_frequency.
struct GroupSpec {
  GroupKind kind = GroupKind::cyclic;
  int rotation_order = 1;  // N; ignored for so2
  int max_frequency = 1;   // so2 only: largest irrep frequency in play

  static GroupSpec cyclic(int n);
  static GroupSpec dihedral(int n);
  static GroupSpec so2(int max_frequency);

  bool is_finite() const { return kind != GroupKind::so2; }
  /// |G| (throws ContinuousGroup for SO(2)).
  int order() const;
  bool operator==(const GroupSpec& o) const {
    return kind == o.kind && rotation_order == o.rotation_order &&
           (kind != GroupKind::so2 || max_frequency == o.max_frequency);
  }
};

/// One group element. Acts on the plane as x -> R(angle) * F^reflect * x,
/// where F is the reflection about the x-axis; composition is function
/// composition (apply the right factor first).
struct GroupElement {
  double angle = 0.0;
  bool reflect = false;

  static GroupElement identity() { return {}; }
  static GroupElement rotation(double a) { return {wrap_angle(a), false}; }
  static GroupElement reflection(double a) { return {wrap_angle(a), true}; }
};

GroupElement compose(const GroupElement& g, const GroupElement& h);
GroupElement inverse(const GroupElement& g);

/// All elements of a finite group in canonical order: rotation index major,
/// reflection flag minor. Throws ContinuousGroup for SO(2).
std::vector<GroupElement> enumerate_elements(const GroupSpec& g);

/// Canonical index of an element within enumerate_elements(g); throws
/// ElementGroupMismatch when the element is not on the group's grid.
int element_index(const GroupSpec& g, const GroupElement& e);

enum class RepKind { trivial, regular, irrep };

/// An orthogonal representation of a GroupSpec. Matrices for finite groups
/// are cached at construction; SO(2) irreps are evaluated on demand.
struct Representation {
  RepKind kind = RepKind::trivial;
  GroupSpec group;
  int frequency = 0;  // irrep only

  static Representation trivial(const GroupSpec& g);
  static Representation regular(const GroupSpec& g);
  static Representation irrep(const GroupSpec& g, int frequency);

  int dimension() const;
  Eigen::MatrixXd matrix(const GroupElement& e) const;
  /// Left-action permutation on basis labels (trivial/regular only):
  /// perm[i] = index of e . element_i.
  std::vector<int> permutation(const GroupElement& e) const;
  bool is_permutation_rep() const {
    return kind == RepKind::trivial || kind == RepKind::regular ||
           (kind == RepKind::irrep && frequency == 0);
  }
  bool operator==(const Representation& o) const {
    return kind == o.kind && group == o.group &&
           (kind != RepKind::irrep || frequency == o.frequency);
  }

 private:
  mutable std::shared_ptr<std::vector<Eigen::MatrixXd>> cache_;
};

/// Haar mean E_g[rho(g)]: the exact average over a finite group, or the
/// closed-form integral over SO(2). Idempotent projector onto invariants.
Eigen::MatrixXd haar_mean_projector(const Representation& rep);

/// An ordered list of representation fields with multiplicities; feature
/// channels are laid out field-major, each copy occupying dimension()
/// consecutive channels.
struct FieldType {
  GroupSpec group;
  std::vector<std::pair<Representation, int>> fields;  // (rep, multiplicity)

  int total_channels() const;
  int num_field_copies() const;
  /// One entry per field copy, in channel order.
  std::vector<Representation> expanded() const;
  /// Block-diagonal action of e on the whole channel vector.
  Eigen::MatrixXd action(const GroupElement& e) const;

  static FieldType trivial_fields(const GroupSpec& g, int count);
  static FieldType regular_fields(const GroupSpec& g, int count);
  /// SO(2): `copies` bands, each one copy of every frequency 0..max_frequency.
  static FieldType so2_band_fields(const GroupSpec& g, int copies);
};

struct RestrictedFieldType {
  FieldType field_type;      // over the subgroup
  Eigen::MatrixXd basis;     // columns orthonormal; x_sub = basis^T * x
};

/// Restrict a field type to the canonical subgroup: C_N -> C_{N/2},
/// D_N -> D_{N/2}, SO(2) -> trivial-only (frequency-0 components kept).
/// For finite groups `basis` is a square permutation with
/// rho_sub(h) = basis^T * rho(h) * basis for every subgroup element h.
RestrictedFieldType restrict_field_type(const FieldType& ft);

struct FourierPair {
  Eigen::MatrixXd forward;  // (channels x samples): samples -> coefficients
  Eigen::MatrixXd inverse;  // (samples x channels): coefficients -> samples
};

/// Inverse/forward discrete group Fourier transform for one SO(2) band
/// (each frequency at most once). Sample angles are 2*pi*j/num_samples.
/// Requires num_samples >= 2*max_frequency(ft)+1 (else Undersampled);
/// forward * inverse is the identity on the band-limited coefficient space.
FourierPair group_fourier_pair(const FieldType& ft, int num_samples);

}  // namespace eqdp
