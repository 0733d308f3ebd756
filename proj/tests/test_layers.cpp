#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <memory>
#include <vector>

#include "eqdp/kernels.hpp"
#include "eqdp/layers.hpp"
#include "eqdp/model.hpp"

using namespace eqdp;

namespace {

std::shared_ptr<std::vector<double>> rv(int64_t n, uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  auto d = std::make_shared<std::vector<double>>(size_t(n));
  for (auto& v : *d) v = scale * (2.0 * rng.uniform() - 1.0);
  return d;
}

// Oracle steering of a raw kernel array (C_out, C_in, k, k):
//   steer(K)[a,b,cell] = sum_{p,q} rho_out(g)_{ap} rho_in(g)_{bq} K[p,q,src]
// with src the cell moved by g^{-1}. Independent of the library's expand path.
std::vector<double> steer_kernel(const std::vector<double>& kernel, const GroupElement& g,
                                 const FieldType& fout, const FieldType& fin, int k) {
  const int co = fout.total_channels(), ci = fin.total_channels();
  const Eigen::MatrixXd ro = fout.action(g), ri = fin.action(g);
  const KernelGrid grid = make_kernel_grid(k);
  std::vector<double> out(kernel.size(), 0.0);
  for (int a = 0; a < co; ++a)
    for (int b = 0; b < ci; ++b)
      for (int cell = 0; cell < k * k; ++cell) {
        const int src = steered_cell(grid, cell, inverse(g));
        double acc = 0;
        for (int p = 0; p < co; ++p)
          for (int q = 0; q < ci; ++q)
            acc += ro(a, p) * ri(b, q) * kernel[size_t((p * ci + q) * k * k + src)];
        out[size_t((a * ci + b) * k * k + cell)] = acc;
      }
  return out;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_SUITE("layers") {

TEST_CASE("weight standardization matches hand statistics and handles degenerate input") {
  const GroupSpec d4 = GroupSpec::dihedral(4);
  const FieldType fout = FieldType::regular_fields(d4, 2);  // 16 channels, 2 fields
  const int c_in = 3, k = 3;
  auto kd = rv(fout.total_channels() * c_in * k * k, 41);
  const auto out = weight_standardize(*kd, fout, c_in, k);
  // hand oracle per field (8 rows x 27 inner entries)
  const int64_t inner = int64_t(c_in) * k * k;
  for (int f = 0; f < 2; ++f) {
    const int64_t off = int64_t(f) * 8 * inner, n = 8 * inner;
    double mu = 0;
    for (int64_t i = 0; i < n; ++i) mu += (*kd)[size_t(off + i)];
    mu /= double(n);
    double var = 0;
    for (int64_t i = 0; i < n; ++i)
      var += ((*kd)[size_t(off + i)] - mu) * ((*kd)[size_t(off + i)] - mu);
    var /= double(n);
    for (int64_t i = 0; i < n; ++i) {
      const double want = ((*kd)[size_t(off + i)] - mu) / std::sqrt(var + 1e-5);
      CHECK(out[size_t(off + i)] == doctest::Approx(want).epsilon(1e-12));
    }
    // standardized output has zero mean and near-unit variance per field
    double omu = 0, ovar = 0;
    for (int64_t i = 0; i < n; ++i) omu += out[size_t(off + i)];
    omu /= double(n);
    for (int64_t i = 0; i < n; ++i)
      ovar += (out[size_t(off + i)] - omu) * (out[size_t(off + i)] - omu);
    ovar /= double(n);
    CHECK(std::abs(omu) < 1e-12);
    CHECK(ovar == doctest::Approx(var / (var + 1e-5)).epsilon(1e-10));
  }
  // constant kernel collapses to zero through the eps floor
  std::vector<double> flat(kd->size(), 2.5);
  for (double v : weight_standardize(flat, fout, c_in, k)) CHECK(v == 0.0);
  // standardizing an already-standardized kernel is a no-op to well below
  // 1e-6: start from exact zero-mean unit-variance data so the first pass
  // lands on the eps fixed point, then the second pass moves it by O(eps^2)
  std::vector<double> unit(kd->size());
  for (int f = 0; f < 2; ++f) {
    const int64_t off = int64_t(f) * 8 * inner, n = 8 * inner;
    double mu = 0, var = 0;
    for (int64_t i = 0; i < n; ++i) mu += (*kd)[size_t(off + i)];
    mu /= double(n);
    for (int64_t i = 0; i < n; ++i)
      var += ((*kd)[size_t(off + i)] - mu) * ((*kd)[size_t(off + i)] - mu);
    var /= double(n);
    for (int64_t i = 0; i < n; ++i)
      unit[size_t(off + i)] = ((*kd)[size_t(off + i)] - mu) / std::sqrt(var);
  }
  const auto once = weight_standardize(unit, fout, c_in, k);
  CHECK(max_abs_diff(weight_standardize(once, fout, c_in, k), once) < 1e-6);
}

TEST_CASE("weight standardization commutes with steering") {
  const int k = 3;
  // permutation fields: full standardization commutes with all of D_4
  {
    const GroupSpec d4 = GroupSpec::dihedral(4);
    const FieldType fout = FieldType::regular_fields(d4, 1), fin = FieldType::regular_fields(d4, 1);
    auto kd = rv(8 * 8 * k * k, 42);
    for (const auto& g : enumerate_elements(d4)) {
      const auto a = weight_standardize(steer_kernel(*kd, g, fout, fin, k), fout, 8, k);
      const auto b = steer_kernel(weight_standardize(*kd, fout, 8, k), g, fout, fin, k);
      CHECK(max_abs_diff(a, b) < 1e-10);
    }
  }
  // irrep output fields: variance-only scaling commutes with exact rotations
  {
    const GroupSpec so2 = GroupSpec::so2(1);
    FieldType fout{so2, {{Representation::irrep(so2, 1), 1}}};
    FieldType fin{so2, {{Representation::trivial(so2), 2}}};
    auto kd = rv(2 * 2 * k * k, 43);
    for (int q = 0; q < 4; ++q) {
      const GroupElement g = GroupElement::rotation(q * kPi / 2);
      const auto a = weight_standardize(steer_kernel(*kd, g, fout, fin, k), fout, 2, k);
      const auto b = steer_kernel(weight_standardize(*kd, fout, 2, k), g, fout, fin, k);
      CHECK(max_abs_diff(a, b) < 1e-10);
    }
  }
  // band-to-band kernels: with irrep input columns even the frequency-0 output
  // rows must skip mean subtraction (input column sums are not preserved);
  // variance-only statistics commute
  {
    const GroupSpec so2 = GroupSpec::so2(1);
    const FieldType fout = FieldType::so2_band_fields(so2, 2);
    const FieldType fin = FieldType::so2_band_fields(so2, 1);
    const int ci = fin.total_channels();
    auto kd = rv(fout.total_channels() * ci * k * k, 143);
    for (int q = 1; q < 4; ++q) {
      const GroupElement g = GroupElement::rotation(q * kPi / 2);
      const auto a =
          weight_standardize(steer_kernel(*kd, g, fout, fin, k), fout, ci, k, 1e-5, false);
      const auto b =
          steer_kernel(weight_standardize(*kd, fout, ci, k, 1e-5, false), g, fout, fin, k);
      CHECK(max_abs_diff(a, b) < 1e-10);
      // with mean subtraction enabled the frequency-0 rows do not commute
      const auto am =
          weight_standardize(steer_kernel(*kd, g, fout, fin, k), fout, ci, k, 1e-5, true);
      const auto bm =
          steer_kernel(weight_standardize(*kd, fout, ci, k, 1e-5, true), g, fout, fin, k);
      CHECK(max_abs_diff(am, bm) > 1e-4);
    }
    Rng rng(144);
    CHECK(!EquivConv<double>::make(fin, fout, k, "t", rng).standardize_mean);
    CHECK(EquivConv<double>::make(FieldType::trivial_fields(so2, 2), fout, k, "t", rng)
              .standardize_mean);
  }
}

TEST_CASE("coefficient expansion reproduces the reference basis expansion") {
  const GroupSpec c4 = GroupSpec::cyclic(4);
  const FieldType fin = FieldType::regular_fields(c4, 3), fout = FieldType::regular_fields(c4, 2);
  Rng rng(44);
  EquivConv<double> conv = EquivConv<double>::make(fin, fout, 3, "t", rng);
  REQUIRE(conv.blocks.size() == 1);
  const auto& blk = conv.blocks[0];
  const int dim = blk.basis->dimension();
  REQUIRE(dim == 36);  // regular C_4 pair at k=3

  Tape<double> tape;
  Tensor<double> kernel = conv.expanded_kernel(tape);
  const int ci = fin.total_channels(), k2 = 9;
  for (int o = 0; o < 2; ++o)
    for (int i = 0; i < 3; ++i) {
      Eigen::VectorXd coeff(dim);
      for (int d = 0; d < dim; ++d)
        coeff(d) = (*blk.theta.value)[size_t((o * 3 + i) * dim + d)];
      const Eigen::MatrixXd want = expand_kernel(*blk.basis, coeff);  // (d_out*d_in, k^2)
      for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b)
          for (int c = 0; c < k2; ++c)
            CHECK((*kernel.data)[size_t(((o * 4 + a) * ci + i * 4 + b) * k2 + c)] ==
                  doctest::Approx(want(a * 4 + b, c)).epsilon(1e-12));
    }
}

TEST_CASE("expansion gradients pass finite differences; zero coefficients give zero output") {
  const GroupSpec c4 = GroupSpec::cyclic(4);
  const FieldType fin = FieldType::trivial_fields(c4, 2), fout = FieldType::regular_fields(c4, 2);
  Rng rng(45);
  EquivConv<double> conv = EquivConv<double>::make(fin, fout, 3, "t", rng);
  auto xd = rv(2 * 2 * 6 * 6, 46);
  auto build = [&](Tape<double>& t) {
    auto x = constant(t, {2, 2, 6, 6}, xd, true);
    return sum(mish(conv.forward(t, x, Padding::zero(1))));
  };
  CHECK(finite_difference_check<double>(conv.params(), build, 1e-5) < 1e-6);

  for (auto* p : conv.params()) std::fill(p->value->begin(), p->value->end(), 0.0);
  Tape<double> tape;
  auto x = constant(tape, {2, 2, 6, 6}, xd, true);
  auto y = conv.forward(tape, x, Padding::zero(1));
  for (int64_t i = 0; i < y.size(); ++i) CHECK((*y.data)[i] == 0.0);
}

TEST_CASE("any kernel is reachable for the identity group") {
  const GroupSpec e = GroupSpec::cyclic(1);
  const FieldType fin = FieldType::regular_fields(e, 2), fout = FieldType::regular_fields(e, 3);
  Rng rng(47);
  EquivConv<double> conv = EquivConv<double>::make(fin, fout, 3, "t", rng);
  REQUIRE(conv.blocks.size() == 1);
  REQUIRE(conv.blocks[0].basis->dimension() == 9);
  auto target = rv(3 * 2 * 9, 48);
  // project the target onto the orthonormal basis per copy pair
  auto& blk = conv.blocks[0];
  for (int o = 0; o < 3; ++o)
    for (int i = 0; i < 2; ++i)
      for (int d = 0; d < 9; ++d) {
        double acc = 0;
        for (int c = 0; c < 9; ++c)
          acc += blk.basis->elements[size_t(d)](0, c) * (*target)[size_t((o * 2 + i) * 9 + c)];
        (*blk.theta.value)[size_t((o * 2 + i) * 9 + d)] = acc;
      }
  Tape<double> tape;
  Tensor<double> kernel = conv.expanded_kernel(tape);
  CHECK(max_abs_diff(*kernel.data, *target) < 1e-12);
}

TEST_CASE("equiv_conv commutes with the group action (circular padding)") {
  const GroupSpec c4 = GroupSpec::cyclic(4);
  const FieldType fin = FieldType::regular_fields(c4, 2), fout = FieldType::regular_fields(c4, 3);
  Rng rng(49);
  EquivConv<double> conv = EquivConv<double>::make(fin, fout, 3, "t", rng);
  const int B = 2, H = 8;
  auto xd = rv(B * fin.total_channels() * H * H, 50);
  auto run = [&](const std::vector<double>& data) {
    Tape<double> tape;
    auto x = constant(tape, {B, fin.total_channels(), H, H},
                      std::make_shared<std::vector<double>>(data), true);
    auto y = conv.forward(tape, x, Padding::circular(1));
    return *y.data;
  };
  const auto base = run(*xd);
  for (const auto& g : enumerate_elements(c4)) {
    const auto moved = run(transform_feature_map(g, fin, *xd, B, fin.total_channels(), H, H));
    const auto expect = transform_feature_map(g, fout, base, B, fout.total_channels(), H, H);
    CHECK(max_abs_diff(moved, expect) < 1e-10);
  }
}

TEST_CASE("equiv_group_norm: statistics, degenerate input, permutation commutation") {
  const GroupSpec d4 = GroupSpec::dihedral(4);
  const FieldType ft = FieldType::regular_fields(d4, 4);  // 32 channels
  const int B = 2, H = 4, C = ft.total_channels();
  auto norm = EquivGroupNorm<double>::make(ft, "n");
  CHECK(norm.num_groups == 4);  // largest divisor of 4 fields <= min(8,4)

  auto xd = rv(B * C * H * H, 51);
  auto run = [&](const std::vector<double>& data, EquivGroupNorm<double>& n) {
    Tape<double> tape;
    auto x = constant(tape, {B, C, H, H}, std::make_shared<std::vector<double>>(data), true);
    return *n.forward(tape, x).data;
  };
  const auto base = run(*xd, norm);

  // per-(sample, y, group) statistics of the output: mean 0, variance v/(v+eps)
  const int Y = 8, F = 4, G = 4, FG = 1;
  for (int b = 0; b < B; ++b)
    for (int y = 0; y < Y; ++y)
      for (int gi = 0; gi < G; ++gi) {
        double mu = 0, var = 0;
        const int64_t m = FG * H * H;
        for (int f = gi * FG; f < (gi + 1) * FG; ++f)
          for (int i = 0; i < H * H; ++i) mu += base[size_t(((b * F + f) * Y + y) * H * H + i)];
        mu /= double(m);
        for (int f = gi * FG; f < (gi + 1) * FG; ++f)
          for (int i = 0; i < H * H; ++i) {
            const double v = base[size_t(((b * F + f) * Y + y) * H * H + i)] - mu;
            var += v * v;
          }
        var /= double(m);
        CHECK(std::abs(mu) < 1e-12);
        CHECK(var > 0.9);
        CHECK(var < 1.0 + 1e-12);
      }

  // idempotence up to the eps floor
  CHECK(max_abs_diff(run(base, norm), base) < 1e-4);

  // constant input: normalized part vanishes, bias remains
  for (size_t i = 0; i < norm.bias.value->size(); ++i) (*norm.bias.value)[i] = 0.25 * double(i);
  std::vector<double> flat(size_t(B) * C * H * H, 3.0);
  const auto flat_out = run(flat, norm);
  for (int b = 0; b < B; ++b)
    for (int f = 0; f < F; ++f)
      for (int i = 0; i < Y * H * H; ++i)
        CHECK(flat_out[size_t((b * F + f) * Y * H * H + i)] ==
              doctest::Approx(0.25 * f).epsilon(1e-12));

  // permutation commutation with random affine
  for (size_t i = 0; i < norm.weight.value->size(); ++i)
    (*norm.weight.value)[i] = 1.0 + 0.1 * double(i);
  const auto affine_base = run(*xd, norm);
  for (const auto& g : enumerate_elements(d4)) {
    const Eigen::MatrixXd act = ft.action(g);
    auto permute = [&](const std::vector<double>& v) {
      std::vector<double> out(v.size(), 0.0);
      for (int b = 0; b < B; ++b)
        for (int i = 0; i < C; ++i)
          for (int j = 0; j < C; ++j) {
            if (act(i, j) == 0.0) continue;
            for (int p = 0; p < H * H; ++p)
              out[size_t((b * C + i) * H * H + p)] +=
                  act(i, j) * v[size_t((b * C + j) * H * H + p)];
          }
      return out;
    };
    CHECK(max_abs_diff(run(permute(*xd), norm), permute(affine_base)) < 1e-12);
  }

  CHECK_THROWS_AS(
      EquivGroupNorm<double>::make(FieldType::so2_band_fields(GroupSpec::so2(1), 2), "n"),
      IrrepFieldType);
}

TEST_CASE("equiv_group_norm gradients pass finite differences") {
  const GroupSpec c4 = GroupSpec::cyclic(4);
  const FieldType fin = FieldType::trivial_fields(c4, 2), fout = FieldType::regular_fields(c4, 2);
  Rng rng(52);
  EquivConv<double> conv = EquivConv<double>::make(fin, fout, 3, "c", rng);
  EquivGroupNorm<double> norm = EquivGroupNorm<double>::make(fout, "n");
  for (auto& v : *norm.weight.value) v = 1.1;
  for (auto& v : *norm.bias.value) v = -0.2;
  auto xd = rv(2 * 2 * 4 * 4, 53);
  auto build = [&](Tape<double>& t) {
    auto x = constant(t, {2, 2, 4, 4}, xd, true);
    auto h = conv.forward(t, x, Padding::zero(1));
    h = norm.forward(t, h);
    return sum(mish(h));
  };
  std::vector<Parameter<double>*> params = conv.params();
  for (auto* p : norm.params()) params.push_back(p);
  CHECK(finite_difference_check<double>(params, build, 1e-5) < 1e-6);
}

TEST_CASE("iid_instance_norm: pinned values, invariant statistic, rotation commutation") {
  const GroupSpec so2 = GroupSpec::so2(1);
  const FieldType ft = FieldType::so2_band_fields(so2, 1);  // [trivial, freq-1] = 3 channels
  auto norm = IidInstanceNorm<double>::make(ft, "n");
  REQUIRE(norm.weight.size() == 2);
  REQUIRE(norm.bias.size() == 1);

  auto run = [&](const std::vector<double>& data, int B, int H) {
    Tape<double> tape;
    auto x = constant(tape, {B, 3, H, H}, std::make_shared<std::vector<double>>(data), true);
    return *norm.forward(tape, x).data;
  };

  // trivial channel {1,2,3,4}: mean removed then scaled; freq-1 constant (1,1): lambda = 1
  std::vector<double> in = {1, 2, 3, 4, 1, 1, 1, 1, 1, 1, 1, 1};
  const auto out = run(in, 1, 2);
  const double lam0 = (2.25 + 0.25 + 0.25 + 2.25) / 4.0;  // centered second moment
  for (int i = 0; i < 4; ++i)
    CHECK(out[size_t(i)] ==
          doctest::Approx((in[size_t(i)] - 2.5) / std::sqrt(lam0 + 1e-5)).epsilon(1e-12));
  for (int i = 4; i < 12; ++i)
    CHECK(out[size_t(i)] == doctest::Approx(1.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-12));

  // constant trivial input collapses to zero
  std::vector<double> flat(12, 5.0);
  const auto fo = run(flat, 1, 2);
  for (int i = 0; i < 4; ++i) CHECK(fo[size_t(i)] == 0.0);

  // random input: the output second moment is lambda/(lambda+eps) per field
  auto xd = rv(2 * 3 * 4 * 4, 54);
  const auto ro = run(*xd, 2, 4);
  for (int b = 0; b < 2; ++b) {
    double lam_in = 0, lam_out = 0;
    for (int d = 0; d < 2; ++d)
      for (int i = 0; i < 16; ++i) {
        const double v = (*xd)[size_t(((b * 3 + 1 + d) * 16) + i)];
        lam_in += v * v / 32.0;
        const double w = ro[size_t(((b * 3 + 1 + d) * 16) + i)];
        lam_out += w * w / 32.0;
      }
    CHECK(lam_out == doctest::Approx(lam_in / (lam_in + 1e-5)).epsilon(1e-12));
  }

  // rotation commutation (continuous angle, channel action only), random affine
  (*norm.weight.value)[0] = 1.3;
  (*norm.weight.value)[1] = 0.7;
  (*norm.bias.value)[0] = 0.4;
  const auto base = run(*xd, 2, 4);
  for (double ang : {0.7, 2.1, -1.3}) {
    const GroupElement g = GroupElement::rotation(ang);
    const Eigen::MatrixXd act = ft.action(g);
    auto mix = [&](const std::vector<double>& v) {
      std::vector<double> o(v.size(), 0.0);
      for (int b = 0; b < 2; ++b)
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j)
            for (int p = 0; p < 16; ++p)
              o[size_t((b * 3 + i) * 16 + p)] += act(i, j) * v[size_t((b * 3 + j) * 16 + p)];
      return o;
    };
    CHECK(max_abs_diff(run(mix(*xd), 2, 4), mix(base)) < 1e-10);
  }

  CHECK_THROWS_AS(
      IidInstanceNorm<double>::make(FieldType::regular_fields(GroupSpec::dihedral(4), 2), "n"),
      NonIrrepFieldType);
}

TEST_CASE("iid_instance_norm gradients pass finite differences") {
  const GroupSpec so2 = GroupSpec::so2(1);
  const FieldType fin = FieldType::trivial_fields(so2, 2), fout = FieldType::so2_band_fields(so2, 2);
  Rng rng(55);
  EquivConv<double> conv = EquivConv<double>::make(fin, fout, 3, "c", rng);
  IidInstanceNorm<double> norm = IidInstanceNorm<double>::make(fout, "n");
  for (auto& v : *norm.weight.value) v = 0.9;
  for (auto& v : *norm.bias.value) v = 0.3;
  auto xd = rv(2 * 2 * 4 * 4, 56);
  auto build = [&](Tape<double>& t) {
    auto x = constant(t, {2, 2, 4, 4}, xd, true);
    auto h = conv.forward(t, x, Padding::zero(1));
    h = norm.forward(t, h);
    return sum(mul(h, h));
  };
  std::vector<Parameter<double>*> params = conv.params();
  for (auto* p : norm.params()) params.push_back(p);
  CHECK(finite_difference_check<double>(params, build, 1e-5) < 1e-6);
}

TEST_CASE("activations: field-type guards and Fourier round trips") {
  const GroupSpec so2 = GroupSpec::so2(1);
  const FieldType band = FieldType::so2_band_fields(so2, 2);  // 6 channels
  {
    Tape<double> tape;
    auto x = constant(tape, {1, 6, 2, 2}, rv(24, 57), true);
    CHECK_THROWS_AS(pointwise_activation(x, band, ActKind::mish), IrrepFieldType);
  }
  CHECK_THROWS_AS(FourierActivation<double>::make(band, ActKind::mish, 2), Undersampled);

  auto ident = FourierActivation<double>::make(band, ActKind::identity, 8);
  auto xd = rv(2 * 6 * 3 * 3, 58);
  auto run = [&](FourierActivation<double>& fa, const std::vector<double>& data) {
    Tape<double> tape;
    auto x = constant(tape, {2, 6, 3, 3}, std::make_shared<std::vector<double>>(data), true);
    return *fa.forward(tape, x).data;
  };
  CHECK(max_abs_diff(run(ident, *xd), *xd) < 1e-10);

  // relu on a positive frequency-0-only signal is the identity
  auto mish_act = FourierActivation<double>::make(band, ActKind::relu, 8);
  std::vector<double> f0(2 * 6 * 9, 0.0);
  for (int b = 0; b < 2; ++b)
    for (int copy = 0; copy < 2; ++copy)
      for (int p = 0; p < 9; ++p) f0[size_t((b * 6 + copy * 3) * 9 + p)] = 1.5 + 0.1 * p;
  CHECK(max_abs_diff(run(mish_act, f0), f0) < 1e-10);

  // sample-grid rotations commute exactly
  auto act = FourierActivation<double>::make(band, ActKind::mish, 8);
  const auto base = run(act, *xd);
  for (int j : {1, 3, 5}) {
    const GroupElement g = GroupElement::rotation(kTwoPi * j / 8);
    const Eigen::MatrixXd a = band.action(g);
    auto mix = [&](const std::vector<double>& v) {
      std::vector<double> o(v.size(), 0.0);
      for (int b = 0; b < 2; ++b)
        for (int i = 0; i < 6; ++i)
          for (int jj = 0; jj < 6; ++jj)
            for (int p = 0; p < 9; ++p)
              o[size_t((b * 6 + i) * 9 + p)] += a(i, jj) * v[size_t((b * 6 + jj) * 9 + p)];
      return o;
    };
    CHECK(max_abs_diff(run(act, mix(*xd)), mix(base)) < 1e-10);
  }
}

TEST_CASE("group_pool projects onto invariants and matches the Haar projector") {
  const GroupSpec d4 = GroupSpec::dihedral(4);
  const FieldType ft = FieldType::regular_fields(d4, 2);
  auto pool = GroupPool<double>::make(ft);
  REQUIRE(pool.field_out.total_channels() == 2);
  auto xd = rv(2 * 16 * 2 * 2, 59);
  auto run = [&](const std::vector<double>& data) {
    Tape<double> tape;
    auto x = constant(tape, {2, 16, 2, 2}, std::make_shared<std::vector<double>>(data), true);
    return *pool.forward(x).data;
  };
  const auto out = run(*xd);
  // Haar projector of a regular representation averages the orbit; the pooled
  // value is that average
  const Eigen::MatrixXd haar = haar_mean_projector(Representation::regular(d4));
  for (int b = 0; b < 2; ++b)
    for (int f = 0; f < 2; ++f)
      for (int p = 0; p < 4; ++p) {
        Eigen::VectorXd v(8);
        for (int d = 0; d < 8; ++d) v(d) = (*xd)[size_t(((b * 16) + f * 8 + d) * 4 + p)];
        const Eigen::VectorXd pr = haar * v;
        CHECK(out[size_t((b * 2 + f) * 4 + p)] == doctest::Approx(pr(0)).epsilon(1e-12));
      }
  // permutation invariance of the pooled features
  for (const auto& g : enumerate_elements(d4)) {
    std::vector<double> mixed(xd->size());
    const Eigen::MatrixXd act = ft.action(g);
    for (int b = 0; b < 2; ++b)
      for (int i = 0; i < 16; ++i) {
        int j = 0;
        while (act(i, j) == 0.0) ++j;
        for (int p = 0; p < 4; ++p)
          mixed[size_t((b * 16 + i) * 4 + p)] = (*xd)[size_t((b * 16 + j) * 4 + p)];
      }
    CHECK(max_abs_diff(run(mixed), out) < 1e-12);
  }
  // SO(2) bands: the invariant component is the frequency-0 channel
  const FieldType band = FieldType::so2_band_fields(GroupSpec::so2(1), 1);
  auto bp = GroupPool<double>::make(band);
  CHECK(bp.projector(0, 0) == 1.0);
  CHECK(bp.projector(1, 1) == 0.0);
  CHECK(bp.projector(1, 2) == 0.0);
}

TEST_CASE("restriction layer: round trip and subgroup equivariance") {
  const GroupSpec c4 = GroupSpec::cyclic(4);
  const FieldType ft = FieldType::regular_fields(c4, 2);
  auto layer = RestrictionLayer<double>::make(ft);
  CHECK(layer.field_out.group.rotation_order == 2);
  CHECK(layer.field_out.total_channels() == 8);

  auto xd = rv(2 * 8 * 2 * 2, 60);
  auto run = [&](const std::vector<double>& data) {
    Tape<double> tape;
    auto x = constant(tape, {2, 8, 2, 2}, std::make_shared<std::vector<double>>(data), true);
    return *layer.forward(x).data;
  };
  const auto out = run(*xd);
  // orthogonal change of basis: applying basis recovers the input
  RestrictedFieldType res = restrict_field_type(ft);
  for (int b = 0; b < 2; ++b)
    for (int p = 0; p < 4; ++p) {
      Eigen::VectorXd sub(8);
      for (int i = 0; i < 8; ++i) sub(i) = out[size_t((b * 8 + i) * 4 + p)];
      const Eigen::VectorXd back = res.basis * sub;
      for (int i = 0; i < 8; ++i)
        CHECK(back(i) == doctest::Approx((*xd)[size_t((b * 8 + i) * 4 + p)]).epsilon(1e-12));
    }
  // equivariance over the subgroup
  for (const auto& h : enumerate_elements(layer.field_out.group)) {
    const Eigen::MatrixXd act_g = ft.action(h), act_s = layer.field_out.action(h);
    auto mix = [&](const std::vector<double>& v, const Eigen::MatrixXd& a) {
      std::vector<double> o(v.size(), 0.0);
      for (int b = 0; b < 2; ++b)
        for (int i = 0; i < 8; ++i)
          for (int j = 0; j < 8; ++j)
            for (int p = 0; p < 4; ++p)
              o[size_t((b * 8 + i) * 4 + p)] += a(i, j) * v[size_t((b * 8 + j) * 4 + p)];
      return o;
    };
    CHECK(max_abs_diff(run(mix(*xd, act_g)), mix(out, act_s)) < 1e-12);
  }
}

}  // TEST_SUITE
