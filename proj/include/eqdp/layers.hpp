#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "eqdp/autodiff.hpp"
#include "eqdp/groups.hpp"
#include "eqdp/kernels.hpp"

namespace eqdp {

// ---------------------------------------------------------------------------
// weight standardization

namespace detail {

// Per output field: channel offset, representation dimension, and whether the
// field admits mean subtraction. Subtracting a per-field constant commutes
// with the group action only when both sides act by permutations: the output
// field's rows must permute among themselves AND every input column block
// must have unit column sums (permutation reps). Irrep rotations fail both,
// so such fields are only variance-normalized — the second moment pools whole
// orthogonally-acting blocks and is always invariant.
struct FieldSlice {
  int channel = 0;
  int dim = 1;
  bool subtract_mean = true;
};

inline std::vector<FieldSlice> field_slices(const FieldType& ft, bool allow_mean = true) {
  std::vector<FieldSlice> out;
  int ch = 0;
  for (const auto& rep : ft.expanded()) {
    out.push_back({ch, rep.dimension(), allow_mean && rep.is_permutation_rep()});
    ch += rep.dimension();
  }
  return out;
}

inline bool all_permutation_reps(const FieldType& ft) {
  for (const auto& rep : ft.expanded())
    if (!rep.is_permutation_rep()) return false;
  return true;
}

template <typename S>
struct StandardizeStats {
  S mean, scale;  // y = (x - mean) / scale
};

template <typename S>
StandardizeStats<S> standardize_stats(const S* x, int64_t n, bool subtract_mean, double eps) {
  S mu = 0;
  if (subtract_mean) {
    for (int64_t i = 0; i < n; ++i) mu += x[i];
    mu /= S(n);
  }
  S var = 0;
  for (int64_t i = 0; i < n; ++i) var += (x[i] - mu) * (x[i] - mu);
  var /= S(n);
  return {mu, S(std::sqrt(double(var) + eps))};
}

}  // namespace detail

// Standardizes a kernel laid out (C_out, C_in, k, k) per output field: the
// statistics pool that field's representation rows, every input channel, and
// all spatial positions.
template <typename S>
std::vector<S> weight_standardize(const std::vector<S>& kernel, const FieldType& field_out,
                                  int c_in, int kernel_size, double eps = 1e-5,
                                  bool allow_mean = true) {
  const int64_t inner = int64_t(c_in) * kernel_size * kernel_size;
  const auto slices = detail::field_slices(field_out, allow_mean);
  int total = 0;
  for (const auto& s : slices) total += s.dim;
  require(int64_t(total) * inner == int64_t(kernel.size()),
          "kernel shape does not match the output field type");
  std::vector<S> out(kernel.size());
  for (const auto& f : slices) {
    const int64_t off = int64_t(f.channel) * inner, n = int64_t(f.dim) * inner;
    const auto st = detail::standardize_stats(kernel.data() + off, n, f.subtract_mean, eps);
    for (int64_t i = 0; i < n; ++i) out[size_t(off + i)] = (kernel[size_t(off + i)] - st.mean) / st.scale;
  }
  return out;
}

// Tape version of weight_standardize for an unbatched kernel tensor.
template <typename S>
Tensor<S> weight_standardize_op(const Tensor<S>& kernel, const FieldType& field_out,
                                double eps = 1e-5, bool allow_mean = true) {
  if (kernel.rank() != 4 || kernel.batched)
    throw ShapeMismatch("weight_standardize expects an unbatched (C_out,C_in,k,k) kernel");
  const int c_in = kernel.dim(1), k = kernel.dim(2);
  require(field_out.total_channels() == kernel.dim(0),
          "kernel output channels do not match the field type");
  Tape<S>& tape = *kernel.tape;
  Tensor<S> out = detail::alloc_node(tape, kernel.shape, false);
  const int64_t inner = int64_t(c_in) * k * k;
  auto slices = std::make_shared<std::vector<detail::FieldSlice>>(
      detail::field_slices(field_out, allow_mean));
  for (const auto& f : *slices) {
    const int64_t off = int64_t(f.channel) * inner, n = int64_t(f.dim) * inner;
    const auto st = detail::standardize_stats(kernel.ptr() + off, n, f.subtract_mean, eps);
    for (int64_t i = 0; i < n; ++i)
      (*out.data)[size_t(off + i)] = ((*kernel.data)[size_t(off + i)] - st.mean) / st.scale;
  }
  const int id = out.node;
  tape.set_backward(id, [kernel, out, id, slices, inner, eps](Tape<S>& t) {
    if (kernel.node < 0) return;
    const auto& g = t.grad(id);
    const int B = t.batch_size();
    t.ensure_grad(kernel.node, int64_t(B) * kernel.size());
    for (const auto& f : *slices) {
      const int64_t off = int64_t(f.channel) * inner, n = int64_t(f.dim) * inner;
      const auto st =
          detail::standardize_stats(kernel.ptr() + off, n, f.subtract_mean, eps);
      for (int b = 0; b < B; ++b) {
        const S* gb = g.data() + int64_t(b) * kernel.size() + off;
        S* gk = t.grad_slice(kernel, b) + off;
        const S* y = out.ptr() + off;
        S sg = 0, sgy = 0;
        for (int64_t i = 0; i < n; ++i) {
          sg += gb[i];
          sgy += gb[i] * y[i];
        }
        // mean-free path: d/dx [(x - mu)/s]; variance-only path drops the
        // mean correction term
        for (int64_t i = 0; i < n; ++i) {
          S v = gb[i] - y[i] * sgy / S(n);
          if (f.subtract_mean) v -= sg / S(n);
          gk[i] += v / st.scale;
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// equivariant convolution

// One (rep_out, rep_in) pair class inside a convolution layer. All field
// copies with the same representation pair share a basis; theta holds one
// coefficient vector per (output copy, input copy).
template <typename S>
struct ConvPairBlock {
  const KernelBasis* basis = nullptr;
  Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> basis_flat;  // (D, d_out*d_in*k^2)
  std::vector<int> out_offsets, in_offsets;  // channel starts per copy
  int d_out = 1, d_in = 1;
  Parameter<S> theta;  // (out_copies, in_copies, D)
};

// Equivariant convolution: learned coefficients -> basis expansion -> weight
// standardization -> conv2d. Padding is chosen per call so audits can switch
// to circular mode.
template <typename S>
struct EquivConv {
  FieldType field_in, field_out;
  int kernel_size = 3;
  bool standardize = true;
  // mean subtraction in the standardization is only steering-safe when the
  // input columns also permute; otherwise statistics are variance-only
  bool standardize_mean = true;
  std::vector<ConvPairBlock<S>> blocks;

  static EquivConv make(const FieldType& fin, const FieldType& fout, int kernel_size,
                        const std::string& name, Rng& init_rng, bool standardize = true) {
    EquivConv conv;
    conv.field_in = fin;
    conv.field_out = fout;
    conv.kernel_size = kernel_size;
    conv.standardize = standardize;
    conv.standardize_mean = detail::all_permutation_reps(fin);
    const auto reps_in = fin.expanded(), reps_out = fout.expanded();
    // group copies by representation pair, preserving first-seen order
    for (size_t oi = 0; oi < reps_out.size(); ++oi) {
      for (size_t ii = 0; ii < reps_in.size(); ++ii) {
        bool seen = false;
        for (auto& blk : conv.blocks)
          if (blk.basis->rep_out == reps_out[oi] && blk.basis->rep_in == reps_in[ii]) {
            seen = true;
            break;
          }
        if (seen) continue;
        ConvPairBlock<S> blk;
        blk.basis = &cached_kernel_basis(reps_in[ii], reps_out[oi], fin.group, kernel_size);
        blk.d_out = reps_out[oi].dimension();
        blk.d_in = reps_in[ii].dimension();
        int ch = 0;
        for (const auto& r : reps_out) {
          if (r == reps_out[oi]) blk.out_offsets.push_back(ch);
          ch += r.dimension();
        }
        ch = 0;
        for (const auto& r : reps_in) {
          if (r == reps_in[ii]) blk.in_offsets.push_back(ch);
          ch += r.dimension();
        }
        const int dim = blk.basis->dimension();
        const int cols = blk.d_out * blk.d_in * kernel_size * kernel_size;
        blk.basis_flat.resize(dim, cols);
        for (int d = 0; d < dim; ++d)
          for (int a = 0; a < blk.d_out * blk.d_in; ++a)
            for (int c = 0; c < kernel_size * kernel_size; ++c)
              blk.basis_flat(d, a * kernel_size * kernel_size + c) =
                  S(blk.basis->elements[size_t(d)](a, c));
        const int oc = int(blk.out_offsets.size()), ic = int(blk.in_offsets.size());
        std::vector<S> init(size_t(oc) * ic * dim);
        for (auto& v : init) v = S(init_rng.normal());
        blk.theta = make_parameter<S>(
            name + ".pair" + std::to_string(conv.blocks.size()) + ".theta", {oc, ic, dim},
            std::move(init));
        conv.blocks.push_back(std::move(blk));
      }
    }
    return conv;
  }

  std::vector<Parameter<S>*> params() {
    std::vector<Parameter<S>*> out;
    for (auto& blk : blocks)
      if (blk.theta.size() > 0) out.push_back(&blk.theta);
    return out;
  }

  int64_t coefficient_count() const {
    int64_t n = 0;
    for (const auto& blk : blocks) n += blk.theta.size();
    return n;
  }

  // Expands every pair block into the full (C_out, C_in, k, k) kernel.
  Tensor<S> expanded_kernel(Tape<S>& tape) {
    const int c_out = field_out.total_channels(), c_in = field_in.total_channels();
    const int k = kernel_size, k2 = k * k;
    Tensor<S> kernel = detail::alloc_node(tape, {c_out, c_in, k, k}, false);
    struct Wired {
      const ConvPairBlock<S>* blk;
      Tensor<S> theta;
    };
    auto wired = std::make_shared<std::vector<Wired>>();
    for (auto& blk : blocks) {
      if (blk.basis->dimension() == 0) continue;
      wired->push_back({&blk, blk.theta.use(tape)});
    }
    for (const auto& wb : *wired) {
      const auto& blk = *wb.blk;
      const int dim = blk.basis->dimension();
      const int oc = int(blk.out_offsets.size()), ic = int(blk.in_offsets.size());
      const int cols = blk.d_out * blk.d_in * k2;
      Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> expanded(oc * ic, cols);
      ConstMatMap<S> th(wb.theta.ptr(), oc * ic, dim);
      expanded.noalias() = th * blk.basis_flat;
      for (int o = 0; o < oc; ++o)
        for (int i = 0; i < ic; ++i)
          for (int a = 0; a < blk.d_out; ++a) {
            S* dst = kernel.ptr() +
                     (int64_t(blk.out_offsets[size_t(o)] + a) * c_in + blk.in_offsets[size_t(i)]) * k2;
            const S* src = expanded.data() + (int64_t(o) * ic + i) * cols + int64_t(a) * blk.d_in * k2;
            std::copy(src, src + int64_t(blk.d_in) * k2, dst);
          }
    }
    const int id = kernel.node;
    const int64_t ksize = kernel.size();
    tape.set_backward(id, [wired, id, c_in, k2, ksize](Tape<S>& t) {
      const auto& g = t.grad(id);
      const int B = t.batch_size();
      for (const auto& wb : *wired) {
        const auto& blk = *wb.blk;
        const int dim = blk.basis->dimension();
        const int oc = int(blk.out_offsets.size()), ic = int(blk.in_offsets.size());
        const int cols = blk.d_out * blk.d_in * k2;
        t.ensure_grad(wb.theta.node, int64_t(B) * wb.theta.size());
        Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> dexp(oc * ic, cols);
        for (int b = 0; b < B; ++b) {
          const S* gk = g.data() + int64_t(b) * ksize;
          for (int o = 0; o < oc; ++o)
            for (int i = 0; i < ic; ++i)
              for (int a = 0; a < blk.d_out; ++a) {
                const S* src =
                    gk + (int64_t(blk.out_offsets[size_t(o)] + a) * c_in + blk.in_offsets[size_t(i)]) * k2;
                S* dst = dexp.data() + (int64_t(o) * ic + i) * cols + int64_t(a) * blk.d_in * k2;
                std::copy(src, src + int64_t(blk.d_in) * k2, dst);
              }
          MatMap<S> gth(t.grad_slice(wb.theta, b), oc * ic, dim);
          gth.noalias() += dexp * blk.basis_flat.transpose();
        }
      }
    });
    return kernel;
  }

  Tensor<S> forward(Tape<S>& tape, const Tensor<S>& x, Padding padding) {
    if (x.dim(1) != field_in.total_channels())
      throw ShapeMismatch("equiv_conv input channels do not match field_in");
    Tensor<S> kernel = expanded_kernel(tape);
    if (standardize) kernel = weight_standardize_op(kernel, field_out, 1e-5, standardize_mean);
    return conv2d(x, kernel, padding);
  }
};

// ---------------------------------------------------------------------------
// normalization layers

// Group normalization compatible with permutation actions: the channel axis
// is viewed as (fields, Y) with Y the representation dimension; statistics
// are taken per (sample, y-slice, field-group) so that permuting Y-slices
// permutes the statistics along with the data. Affine parameters are per
// field, shared across Y (a trivial-component affine).
template <typename S>
struct EquivGroupNorm {
  FieldType field_type;
  int num_groups = 1;
  double eps = 1e-5;
  Parameter<S> weight, bias;
  int fields = 0, rep_dim = 1;

  static int default_num_groups(int fields) {
    const int cap = std::min(8, fields);
    for (int d = cap; d >= 1; --d)
      if (fields % d == 0) return d;
    return 1;
  }

  static EquivGroupNorm make(const FieldType& ft, const std::string& name, int num_groups = 0) {
    EquivGroupNorm n;
    n.field_type = ft;
    const auto reps = ft.expanded();
    require(!reps.empty(), "empty field type");
    for (const auto& r : reps) {
      if (!r.is_permutation_rep())
        throw IrrepFieldType("equiv_group_norm requires trivial/regular fields");
      if (r.dimension() != reps.front().dimension())
        throw ShapeMismatch("equiv_group_norm requires a uniform field dimension");
    }
    n.fields = int(reps.size());
    n.rep_dim = reps.front().dimension();
    n.num_groups = num_groups > 0 ? num_groups : default_num_groups(n.fields);
    require(n.fields % n.num_groups == 0, "num_groups must divide the field count");
    n.weight = make_parameter<S>(name + ".weight", {n.fields}, std::vector<S>(size_t(n.fields), S(1)));
    n.bias = make_parameter<S>(name + ".bias", {n.fields}, std::vector<S>(size_t(n.fields), S(0)));
    return n;
  }

  std::vector<Parameter<S>*> params() { return {&weight, &bias}; }

  Tensor<S> forward(Tape<S>& tape, const Tensor<S>& x) {
    if (x.rank() != 4 || !x.batched || x.dim(1) != fields * rep_dim)
      throw ShapeMismatch("equiv_group_norm input does not match its field type");
    const int B = x.dim(0), H = x.dim(2), W = x.dim(3);
    const int Y = rep_dim, F = fields, G = num_groups, FG = F / G;
    const int64_t hw = int64_t(H) * W, m = int64_t(FG) * hw;
    Tensor<S> wt = weight.use(tape), bt = bias.use(tape);
    Tensor<S> out = detail::alloc_node(tape, x.shape, true);
    auto mu = std::make_shared<std::vector<S>>(size_t(B) * Y * G);
    auto sc = std::make_shared<std::vector<S>>(size_t(B) * Y * G);
    for (int b = 0; b < B; ++b)
      for (int y = 0; y < Y; ++y)
        for (int gi = 0; gi < G; ++gi) {
          S sum = 0, sq = 0;
          for (int f = gi * FG; f < (gi + 1) * FG; ++f) {
            const S* px = x.ptr() + (int64_t(b) * F * Y + int64_t(f) * Y + y) * hw;
            for (int64_t i = 0; i < hw; ++i) {
              sum += px[i];
              sq += px[i] * px[i];
            }
          }
          const S mean = sum / S(m);
          const S var = sq / S(m) - mean * mean;
          const S s = S(std::sqrt(std::max(0.0, double(var)) + eps));
          (*mu)[size_t((int64_t(b) * Y + y) * G + gi)] = mean;
          (*sc)[size_t((int64_t(b) * Y + y) * G + gi)] = s;
          for (int f = gi * FG; f < (gi + 1) * FG; ++f) {
            const S* px = x.ptr() + (int64_t(b) * F * Y + int64_t(f) * Y + y) * hw;
            S* po = out.ptr() + (int64_t(b) * F * Y + int64_t(f) * Y + y) * hw;
            const S w = (*wt.data)[size_t(f)], bv = (*bt.data)[size_t(f)];
            for (int64_t i = 0; i < hw; ++i) po[i] = (px[i] - mean) / s * w + bv;
          }
        }
    const int id = out.node;
    tape.set_backward(id, [x, wt, bt, id, mu, sc, B, Y, F, G, FG, hw, m](Tape<S>& t) {
      const auto& g = t.grad(id);
      const bool need_x = x.node >= 0, need_w = wt.node >= 0, need_b = bt.node >= 0;
      if (need_x) t.ensure_grad(x.node, x.size());
      if (need_w) t.ensure_grad(wt.node, int64_t(t.batch_size()) * F);
      if (need_b) t.ensure_grad(bt.node, int64_t(t.batch_size()) * F);
      for (int b = 0; b < B; ++b) {
        S* gw = need_w ? t.grad_slice(wt, b) : nullptr;
        S* gb = need_b ? t.grad_slice(bt, b) : nullptr;
        for (int y = 0; y < Y; ++y)
          for (int gi = 0; gi < G; ++gi) {
            const S mean = (*mu)[size_t((int64_t(b) * Y + y) * G + gi)];
            const S s = (*sc)[size_t((int64_t(b) * Y + y) * G + gi)];
            S s1 = 0, s2 = 0;
            for (int f = gi * FG; f < (gi + 1) * FG; ++f) {
              const int64_t off = (int64_t(b) * F * Y + int64_t(f) * Y + y) * hw;
              const S w = (*wt.data)[size_t(f)];
              const S* px = x.ptr() + off;
              const S* pg = g.data() + off;
              for (int64_t i = 0; i < hw; ++i) {
                const S xh = (px[i] - mean) / s;
                const S dyh = pg[i] * w;
                s1 += dyh;
                s2 += dyh * xh;
                if (gw) gw[f] += pg[i] * xh;
                if (gb) gb[f] += pg[i];
              }
            }
            if (!need_x) continue;
            for (int f = gi * FG; f < (gi + 1) * FG; ++f) {
              const int64_t off = (int64_t(b) * F * Y + int64_t(f) * Y + y) * hw;
              const S w = (*wt.data)[size_t(f)];
              const S* px = x.ptr() + off;
              const S* pg = g.data() + off;
              S* gx = t.grad(x.node).data() + off;
              for (int64_t i = 0; i < hw; ++i) {
                const S xh = (px[i] - mean) / s;
                gx[i] += (pg[i] * w - (s1 + xh * s2) / S(m)) / s;
              }
            }
          }
      }
    });
    return out;
  }
};

// Instance normalization for SO(2) band fields. Per sample and field: the
// spatial mean is removed only from frequency-0 components (non-trivial irrep
// components have zero group-expected mean already); the norm uses the
// rotation-invariant second moment lambda = avg ||y||^2 / d.
template <typename S>
struct IidInstanceNorm {
  FieldType field_type;
  double eps = 1e-5;
  Parameter<S> weight, bias;            // weight per field; bias per trivial field
  std::vector<detail::FieldSlice> slices;
  std::vector<int> bias_index;          // per field: slot into bias, or -1

  static IidInstanceNorm make(const FieldType& ft, const std::string& name) {
    if (ft.group.kind != GroupKind::so2)
      throw NonIrrepFieldType("iid_instance_norm expects SO(2) field types");
    IidInstanceNorm n;
    n.field_type = ft;
    n.slices = detail::field_slices(ft);
    int trivials = 0;
    for (const auto& f : n.slices) n.bias_index.push_back(f.subtract_mean ? trivials++ : -1);
    n.weight = make_parameter<S>(name + ".weight", {int(n.slices.size())},
                                 std::vector<S>(n.slices.size(), S(1)));
    n.bias = make_parameter<S>(name + ".bias", {trivials}, std::vector<S>(size_t(trivials), S(0)));
    return n;
  }

  std::vector<Parameter<S>*> params() {
    std::vector<Parameter<S>*> out = {&weight};
    if (bias.size() > 0) out.push_back(&bias);
    return out;
  }

  Tensor<S> forward(Tape<S>& tape, const Tensor<S>& x) {
    if (x.rank() != 4 || !x.batched || x.dim(1) != field_type.total_channels())
      throw ShapeMismatch("iid_instance_norm input does not match its field type");
    const int B = x.dim(0), H = x.dim(2), W = x.dim(3);
    const int64_t hw = int64_t(H) * W;
    const int C = x.dim(1), F = int(slices.size());
    Tensor<S> wt = weight.use(tape);
    Tensor<S> bt = bias.size() > 0 ? bias.use(tape) : Tensor<S>{};
    Tensor<S> out = detail::alloc_node(tape, x.shape, true);
    auto mu = std::make_shared<std::vector<S>>(size_t(B) * F, S(0));
    auto sc = std::make_shared<std::vector<S>>(size_t(B) * F);
    for (int b = 0; b < B; ++b)
      for (int fi = 0; fi < F; ++fi) {
        const auto& f = slices[size_t(fi)];
        const int64_t base = (int64_t(b) * C + f.channel) * hw;
        S mean = 0;
        if (f.subtract_mean) {
          for (int64_t i = 0; i < hw; ++i) mean += (*x.data)[size_t(base + i)];
          mean /= S(hw);
        }
        S lambda = 0;
        for (int d = 0; d < f.dim; ++d)
          for (int64_t i = 0; i < hw; ++i) {
            const S v = (*x.data)[size_t(base + int64_t(d) * hw + i)] - (d == 0 ? mean : S(0));
            lambda += v * v;
          }
        lambda /= S(int64_t(f.dim) * hw);
        const S s = S(std::sqrt(double(lambda) + eps));
        (*mu)[size_t(int64_t(b) * F + fi)] = mean;
        (*sc)[size_t(int64_t(b) * F + fi)] = s;
        const S w = (*wt.data)[size_t(fi)];
        const S bv = bias_index[size_t(fi)] >= 0 && bt.data
                         ? (*bt.data)[size_t(bias_index[size_t(fi)])]
                         : S(0);
        for (int d = 0; d < f.dim; ++d)
          for (int64_t i = 0; i < hw; ++i) {
            const S v = (*x.data)[size_t(base + int64_t(d) * hw + i)] - (d == 0 ? mean : S(0));
            (*out.data)[size_t(base + int64_t(d) * hw + i)] = v / s * w + (d == 0 ? bv : S(0));
          }
      }
    const int id = out.node;
    auto slc = std::make_shared<std::vector<detail::FieldSlice>>(slices);
    auto bidx = std::make_shared<std::vector<int>>(bias_index);
    tape.set_backward(id, [x, wt, bt, id, mu, sc, slc, bidx, B, C, F, hw](Tape<S>& t) {
      const auto& g = t.grad(id);
      const bool need_x = x.node >= 0, need_w = wt.node >= 0;
      const bool need_b = bt.data && bt.node >= 0;
      if (need_x) t.ensure_grad(x.node, x.size());
      if (need_w) t.ensure_grad(wt.node, int64_t(t.batch_size()) * F);
      if (need_b) t.ensure_grad(bt.node, int64_t(t.batch_size()) * bt.size());
      for (int b = 0; b < B; ++b) {
        S* gw = need_w ? t.grad_slice(wt, b) : nullptr;
        S* gb = need_b ? t.grad_slice(bt, b) : nullptr;
        for (int fi = 0; fi < F; ++fi) {
          const auto& f = (*slc)[size_t(fi)];
          const int64_t base = (int64_t(b) * C + f.channel) * hw;
          const S mean = (*mu)[size_t(int64_t(b) * F + fi)];
          const S s = (*sc)[size_t(int64_t(b) * F + fi)];
          const S w = (*wt.data)[size_t(fi)];
          const int64_t n = int64_t(f.dim) * hw;
          // y: centered input; dyhat = g*w; dy = (dyhat - y*(sum dyhat.y)/(n s^2))/s
          S sgy = 0;
          for (int d = 0; d < f.dim; ++d)
            for (int64_t i = 0; i < hw; ++i) {
              const int64_t at = base + int64_t(d) * hw + i;
              const S y = (*x.data)[size_t(at)] - (d == 0 ? mean : S(0));
              const S gv = g[size_t(at)];
              sgy += gv * w * y;
              if (gw) gw[fi] += gv * y / s;
              if (gb && d == 0 && (*bidx)[size_t(fi)] >= 0) gb[(*bidx)[size_t(fi)]] += gv;
            }
          if (!need_x) continue;
          S* gx = t.grad(x.node).data();
          S mean_dy = 0;
          for (int d = 0; d < f.dim; ++d) {
            S col_sum = 0;
            for (int64_t i = 0; i < hw; ++i) {
              const int64_t at = base + int64_t(d) * hw + i;
              const S y = (*x.data)[size_t(at)] - (d == 0 ? mean : S(0));
              const S dy = (g[size_t(at)] * w - y * sgy / (S(n) * s * s)) / s;
              gx[size_t(at)] += dy;
              col_sum += dy;
            }
            if (d == 0) mean_dy = col_sum / S(hw);
          }
          // mean removal on the trivial component: subtract the spatial mean
          // of its gradient
          if (f.subtract_mean)
            for (int64_t i = 0; i < hw; ++i) gx[size_t(base + i)] -= mean_dy;
        }
      }
    });
    return out;
  }
};

// ---------------------------------------------------------------------------
// activations

enum class ActKind { relu, mish, identity };

template <typename S>
Tensor<S> apply_act(const Tensor<S>& x, ActKind kind) {
  switch (kind) {
    case ActKind::relu:
      return relu(x);
    case ActKind::mish:
      return mish(x);
    case ActKind::identity:
      return scale(x, S(1));
  }
  throw Error("unknown activation kind");
}

// Elementwise activation; valid only for permutation-action fields.
template <typename S>
Tensor<S> pointwise_activation(const Tensor<S>& x, const FieldType& ft, ActKind kind) {
  for (const auto& r : ft.expanded())
    if (!r.is_permutation_rep())
      throw IrrepFieldType("pointwise activation requires trivial/regular fields");
  return apply_act(x, kind);
}

// Fourier-space activation for SO(2) band fields: transform coefficients to
// num_samples group samples, act pointwise, project back to the band limit.
template <typename S>
struct FourierActivation {
  FieldType field_type;
  ActKind kind = ActKind::mish;
  int num_samples = 8;
  Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> to_samples, to_coefficients;

  static FourierActivation make(const FieldType& ft, ActKind kind, int num_samples) {
    if (ft.group.kind != GroupKind::so2)
      throw NonIrrepFieldType("fourier activation expects SO(2) field types");
    FourierActivation a;
    a.field_type = ft;
    a.kind = kind;
    a.num_samples = num_samples;
    // one Fourier pair per band copy, assembled block-diagonally
    require(!ft.fields.empty(), "empty field type");
    FieldType band = FieldType::so2_band_fields(ft.group, 1);
    const FourierPair pair = group_fourier_pair(band, num_samples);
    const int d = band.total_channels();
    const int copies = ft.total_channels() / d;
    require(copies * d == ft.total_channels(),
            "fourier activation expects whole band copies");
    a.to_samples.setZero(copies * num_samples, copies * d);
    a.to_coefficients.setZero(copies * d, copies * num_samples);
    for (int c = 0; c < copies; ++c) {
      a.to_samples.block(c * num_samples, c * d, num_samples, d) = pair.inverse.template cast<S>();
      a.to_coefficients.block(c * d, c * num_samples, d, num_samples) =
          pair.forward.template cast<S>();
    }
    return a;
  }

  Tensor<S> forward(Tape<S>& tape, const Tensor<S>& x) {
    (void)tape;
    Tensor<S> sampled = channel_linear(x, to_samples);
    Tensor<S> acted = apply_act(sampled, kind);
    return channel_linear(acted, to_coefficients);
  }
};

// ---------------------------------------------------------------------------
// pooling / restriction

// Spatial pooling that preserves equivariance: channel-wise max commutes with
// permutation actions; for SO(2) bands the irrep components mix under
// rotation, so an average pool is used instead.
template <typename S>
Tensor<S> equivariant_spatial_pool(const Tensor<S>& x, const FieldType& ft, int window = 2) {
  bool permutation_only = true;
  for (const auto& r : ft.expanded()) permutation_only &= r.is_permutation_rep();
  return permutation_only ? max_pool2d(x, window) : avg_pool2d(x, window);
}

// Projects every field onto its invariant component: regular fields average
// over the representation dimension, trivial fields pass through, SO(2) bands
// keep the frequency-0 channel. Output: one trivial field per input field.
template <typename S>
struct GroupPool {
  FieldType field_in, field_out;
  Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> projector;

  static GroupPool make(const FieldType& ft) {
    GroupPool p;
    p.field_in = ft;
    const auto reps = ft.expanded();
    p.projector.setZero(int(reps.size()), ft.total_channels());
    int ch = 0;
    for (size_t fi = 0; fi < reps.size(); ++fi) {
      const auto& r = reps[fi];
      if (r.kind == RepKind::regular) {
        for (int d = 0; d < r.dimension(); ++d) p.projector(int(fi), ch + d) = S(1) / S(r.dimension());
      } else {
        // trivial or irrep: the invariant component is the first channel for
        // frequency 0 and vanishes otherwise; keeping the frequency-0 channel
        // only is exactly the Haar average
        if (r.is_permutation_rep()) p.projector(int(fi), ch) = S(1);
      }
      ch += r.dimension();
    }
    p.field_out = FieldType::trivial_fields(ft.group, int(reps.size()));
    return p;
  }

  Tensor<S> forward(const Tensor<S>& x) { return channel_linear(x, projector); }
};

// Change of basis onto the canonical subgroup's field type.
template <typename S>
struct RestrictionLayer {
  FieldType field_in, field_out;
  Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> basis_t;

  static RestrictionLayer make(const FieldType& ft) {
    RestrictionLayer r;
    r.field_in = ft;
    RestrictedFieldType res = restrict_field_type(ft);
    r.field_out = res.field_type;
    r.basis_t = res.basis.transpose().template cast<S>();
    return r;
  }

  Tensor<S> forward(const Tensor<S>& x) { return channel_linear(x, basis_t); }
};

}  // namespace eqdp
