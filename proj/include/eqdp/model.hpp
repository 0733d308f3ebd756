#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "eqdp/autodiff.hpp"
#include "eqdp/groups.hpp"
#include "eqdp/layers.hpp"
#include "eqdp/rng.hpp"

namespace eqdp {

inline bool same_field_type(const FieldType& a, const FieldType& b) {
  if (!(a.group == b.group)) return false;
  const auto ea = a.expanded(), eb = b.expanded();
  if (ea.size() != eb.size()) return false;
  for (size_t i = 0; i < ea.size(); ++i)
    if (!(ea[i] == eb[i])) return false;
  return true;
}

// One conv -> activation -> normalization unit (the block ordering used
// throughout the network).
template <typename S>
struct ConvActNorm {
  EquivConv<S> conv;
  bool fourier_act = false;
  ActKind act_kind = ActKind::mish;
  std::optional<FourierActivation<S>> fourier;
  bool instance_norm = false;
  std::optional<EquivGroupNorm<S>> group_norm;
  std::optional<IidInstanceNorm<S>> inst_norm;

  static ConvActNorm make(const FieldType& fin, const FieldType& fout, int kernel_size,
                          const std::string& name, Rng& rng, int norm_groups,
                          int fourier_samples) {
    ConvActNorm b;
    b.conv = EquivConv<S>::make(fin, fout, kernel_size, name + ".conv", rng);
    if (fout.group.kind == GroupKind::so2) {
      bool permutation_only = true;
      for (const auto& r : fout.expanded()) permutation_only &= r.is_permutation_rep();
      if (!permutation_only) {
        b.fourier_act = true;
        b.fourier = FourierActivation<S>::make(fout, ActKind::mish, fourier_samples);
      }
      b.instance_norm = true;
      b.inst_norm = IidInstanceNorm<S>::make(fout, name + ".norm");
    } else {
      b.group_norm = EquivGroupNorm<S>::make(fout, name + ".norm", norm_groups);
    }
    return b;
  }

  Tensor<S> forward(Tape<S>& tape, const Tensor<S>& x, Padding pad) {
    Tensor<S> h = conv.forward(tape, x, pad);
    h = fourier_act ? fourier->forward(tape, h) : pointwise_activation(h, conv.field_out, act_kind);
    if (group_norm) return group_norm->forward(tape, h);
    return inst_norm->forward(tape, h);
  }

  std::vector<Parameter<S>*> params() {
    auto out = conv.params();
    if (group_norm)
      for (auto* p : group_norm->params()) out.push_back(p);
    if (inst_norm)
      for (auto* p : inst_norm->params()) out.push_back(p);
    return out;
  }
};

struct ResNetOptions {
  std::array<int, 3> reference_widths{15, 30, 60};
  int num_classes = 10;
  int kernel_size = 3;
  bool restrict_last_block = true;
  int fourier_samples = 8;
  int norm_groups = 0;  // 0: largest divisor of the field count <= 8
  std::uint64_t init_seed = 1;
};

// Equivariant-ResNet-9: stem conv; three stages of
// [conv-act-norm, spatial pool, residual block of two conv-act-norm units];
// the symmetry is restricted before the last residual block; invariant
// projection, global average pooling, and a linear head close the model.
template <typename S>
struct Model {
  GroupSpec group;
  ResNetOptions options;
  std::array<int, 3> widths{};

  FieldType input_fields;
  EquivConv<S> stem;
  struct Stage {
    ConvActNorm<S> main;
    ConvActNorm<S> res_a, res_b;
  };
  std::array<Stage, 3> stages;
  std::optional<RestrictionLayer<S>> restriction;
  GroupPool<S> invariant_pool;
  Parameter<S> head_w, head_b;

  std::vector<Parameter<S>*> parameters() {
    std::vector<Parameter<S>*> out;
    for (auto* p : stem.params()) out.push_back(p);
    for (int i = 0; i < 3; ++i) {
      for (auto* p : stages[size_t(i)].main.params()) out.push_back(p);
      for (auto* p : stages[size_t(i)].res_a.params()) out.push_back(p);
      for (auto* p : stages[size_t(i)].res_b.params()) out.push_back(p);
    }
    out.push_back(&head_w);
    out.push_back(&head_b);
    return out;
  }

  const FieldType& feature_fields() const {
    return restriction ? restriction->field_out : stages[2].res_b.conv.field_out;
  }

  // Returns logits (B, num_classes). When `features` is given it receives the
  // pre-invariant-pool activation map, the tensor audited for equivariance.
  Tensor<S> forward(Tape<S>& tape, const Tensor<S>& x, PadKind pad_kind,
                    Tensor<S>* features = nullptr) {
    const Padding pad{pad_kind, options.kernel_size / 2};
    Tensor<S> h = stem.forward(tape, x, pad);
    for (int i = 0; i < 3; ++i) {
      auto& st = stages[size_t(i)];
      h = st.main.forward(tape, h, pad);
      h = equivariant_spatial_pool(h, st.main.conv.field_out, 2);
      if (i == 2 && restriction) h = restriction->forward(h);
      Tensor<S> r = st.res_b.forward(tape, st.res_a.forward(tape, h, pad), pad);
      h = add(h, r);
    }
    if (features) *features = h;
    h = invariant_pool.forward(h);
    Tensor<S> f = global_avg_pool(h);
    return linear(f, head_w.use(tape), head_b.use(tape));
  }

  std::vector<std::string> describe() const {
    auto field_desc = [](const FieldType& ft) {
      return std::to_string(ft.num_field_copies()) + " fields / " +
             std::to_string(ft.total_channels()) + " ch";
    };
    std::vector<std::string> out;
    out.push_back("stem equiv_conv: " + field_desc(stem.field_in) + " -> " +
                  field_desc(stem.field_out));
    for (int i = 0; i < 3; ++i) {
      const auto& st = stages[size_t(i)];
      out.push_back("stage" + std::to_string(i + 1) + " conv-act-norm + pool: " +
                    field_desc(st.main.conv.field_in) + " -> " + field_desc(st.main.conv.field_out));
      if (i == 2 && restriction)
        out.push_back("restriction: " + field_desc(restriction->field_in) + " -> " +
                      field_desc(restriction->field_out));
      out.push_back("stage" + std::to_string(i + 1) + " residual x2: " +
                    field_desc(st.res_a.conv.field_in));
    }
    out.push_back("group_pool + global_avg_pool: " + field_desc(invariant_pool.field_in) +
                  " -> " + std::to_string(invariant_pool.field_out.num_field_copies()));
    out.push_back("linear head -> " + std::to_string(options.num_classes));
    return out;
  }
};

inline double width_scale(const GroupSpec& group) {
  double n;
  if (group.kind == GroupKind::so2) {
    n = double(2 * group.max_frequency + 1);  // band dimension as the size proxy
  } else {
    n = double(group.order());
  }
  if (n <= 1.0) return 1.0;  // identity group reproduces the plain baseline
  return std::sqrt(1.5 * n) / n;
}

template <typename S>
Model<S> build_eq_resnet9(const GroupSpec& group, const ResNetOptions& options = {}) {
  for (int w : options.reference_widths) require(w > 0, "reference widths must be positive");
  Model<S> m;
  m.group = group;
  m.options = options;
  const double scale = width_scale(group);
  for (int i = 0; i < 3; ++i)
    m.widths[size_t(i)] =
        std::max(1, int(std::lround(options.reference_widths[size_t(i)] * scale)));

  auto stage_fields = [&](int copies) {
    if (group.kind == GroupKind::so2) return FieldType::so2_band_fields(group, copies);
    return FieldType::regular_fields(group, copies);
  };
  Rng rng(derive_seed(options.init_seed, 0x6d6f64656cULL));

  m.input_fields = FieldType::trivial_fields(group, 3);
  m.stem = EquivConv<S>::make(m.input_fields, stage_fields(m.widths[0]), options.kernel_size,
                              "stem", rng);
  FieldType prev = m.stem.field_out;
  for (int i = 0; i < 3; ++i) {
    const FieldType fout = stage_fields(m.widths[size_t(i)]);
    const std::string tag = "s" + std::to_string(i + 1);
    m.stages[size_t(i)].main = ConvActNorm<S>::make(prev, fout, options.kernel_size, tag, rng,
                                                    options.norm_groups, options.fourier_samples);
    FieldType res_ft = fout;
    if (i == 2 && options.restrict_last_block) {
      const bool identity_group = group.is_finite() && group.order() == 1;
      if (!identity_group) {
        m.restriction = RestrictionLayer<S>::make(fout);
        res_ft = m.restriction->field_out;
      }
    }
    m.stages[size_t(i)].res_a = ConvActNorm<S>::make(res_ft, res_ft, options.kernel_size,
                                                     tag + ".res_a", rng, options.norm_groups,
                                                     options.fourier_samples);
    m.stages[size_t(i)].res_b = ConvActNorm<S>::make(res_ft, res_ft, options.kernel_size,
                                                     tag + ".res_b", rng, options.norm_groups,
                                                     options.fourier_samples);
    require(same_field_type(m.stages[size_t(i)].res_b.conv.field_out, res_ft),
            "residual block must preserve its field type");
    prev = res_ft;
  }
  m.invariant_pool = GroupPool<S>::make(prev);
  const int feat = m.invariant_pool.field_out.total_channels();
  std::vector<S> hw(size_t(feat) * options.num_classes);
  for (auto& v : hw) v = S(rng.normal() / std::sqrt(double(feat)));
  m.head_w = make_parameter<S>("head.weight", {feat, options.num_classes}, std::move(hw));
  m.head_b = make_parameter<S>("head.bias", {options.num_classes},
                               std::vector<S>(size_t(options.num_classes), S(0)));
  return m;
}

template <typename S>
int64_t count_parameters(Model<S>& model) {
  int64_t n = 0;
  for (auto* p : model.parameters()) n += p->size();
  return n;
}

// ---------------------------------------------------------------------------
// equivariance audit

namespace detail {

// Exact integer spatial action on a square plane for quarter-turn rotations
// and reflections: out(p) = in(g^{-1} p). Cell centers live on a half-integer
// lattice which these elements map onto itself.
inline std::vector<int> plane_source_index(const GroupElement& e, int h, int w) {
  require(h == w, "spatial group actions require square feature maps");
  if (!exact_steering(e)) throw ElementGroupMismatch("element does not act exactly on the grid");
  const GroupElement inv = inverse(e);
  std::vector<int> src(size_t(h) * w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double x = 2.0 * c - (w - 1), y = (h - 1) - 2.0 * r;  // doubled coordinates
      if (inv.reflect) y = -y;
      const double ca = std::cos(inv.angle), sa = std::sin(inv.angle);
      const long long xs = std::llround(ca * x - sa * y), ys = std::llround(sa * x + ca * y);
      const long long rs = ((h - 1) - ys) / 2, cs = (xs + (w - 1)) / 2;
      require(rs >= 0 && rs < h && cs >= 0 && cs < w, "grid action left the plane");
      src[size_t(r) * w + size_t(c)] = int(rs) * w + int(cs);
    }
  return src;
}

}  // namespace detail

// Applies the group action to a stack of feature planes: channels mix by the
// field action, the plane transforms by the inverse spatial map.
template <typename S>
std::vector<S> transform_feature_map(const GroupElement& e, const FieldType& ft,
                                     const std::vector<S>& data, int b, int c, int h, int w) {
  require(int64_t(b) * c * h * w == int64_t(data.size()), "feature map shape mismatch");
  require(ft.total_channels() == c, "field type does not match the channel count");
  const auto src = detail::plane_source_index(e, h, w);
  const Eigen::MatrixXd act = ft.action(e);
  std::vector<S> out(data.size());
  const int64_t plane = int64_t(h) * w;
  for (int bi = 0; bi < b; ++bi)
    for (int64_t p = 0; p < plane; ++p) {
      const int64_t sp = src[size_t(p)];
      for (int i = 0; i < c; ++i) {
        double acc = 0;
        for (int j = 0; j < c; ++j)
          acc += act(i, j) * double(data[size_t((int64_t(bi) * c + j) * plane + sp)]);
        out[size_t((int64_t(bi) * c + i) * plane + p)] = S(acc);
      }
    }
  return out;
}

// Trivial input channels (images): pure spatial transformation.
template <typename S>
std::vector<S> transform_input(const GroupElement& e, const std::vector<S>& data, int b, int c,
                               int h, int w) {
  const auto src = detail::plane_source_index(e, h, w);
  std::vector<S> out(data.size());
  const int64_t plane = int64_t(h) * w;
  for (int64_t bc = 0; bc < int64_t(b) * c; ++bc)
    for (int64_t p = 0; p < plane; ++p)
      out[size_t(bc * plane + p)] = data[size_t(bc * plane + src[size_t(p)])];
  return out;
}

struct EquivarianceRecord {
  GroupElement element;
  double feature_rel_err = 0.0;
  double logit_rel_err = 0.0;
};

// Checks phi(T_g x) = T'_g phi(x) at the pre-invariant-pool features and
// logit invariance, per element, maximized over the batch. Circular padding
// is the mode under which the identity is exact away from band limits.
template <typename S>
std::vector<EquivarianceRecord> audit_equivariance(Model<S>& model, const std::vector<S>& inputs,
                                                   int b, int h, int w,
                                                   const std::vector<GroupElement>& elements,
                                                   PadKind pad = PadKind::circular) {
  const int c_in = model.input_fields.total_channels();
  require(int64_t(b) * c_in * h * w == int64_t(inputs.size()), "input shape mismatch");
  auto run = [&](const std::vector<S>& data, Tensor<S>& features_out) {
    Tape<S> tape;
    auto x = constant(tape, {b, c_in, h, w},
                      std::make_shared<std::vector<S>>(data), true);
    Tensor<S> features;
    Tensor<S> logits = model.forward(tape, x, pad, &features);
    features_out = features;
    return *logits.data;
  };
  Tensor<S> base_feat;
  const std::vector<S> base_logits = run(inputs, base_feat);
  const int fc = base_feat.dim(1), fh = base_feat.dim(2), fw = base_feat.dim(3);

  std::vector<EquivarianceRecord> records;
  for (const auto& e : elements) {
    EquivarianceRecord rec;
    rec.element = e;
    Tensor<S> moved_feat;
    const std::vector<S> moved_logits = run(transform_input(e, inputs, b, c_in, h, w), moved_feat);
    const std::vector<S> expect =
        transform_feature_map(e, model.feature_fields(), *base_feat.data, b, fc, fh, fw);
    const int64_t per = int64_t(fc) * fh * fw;
    for (int bi = 0; bi < b; ++bi) {
      double diff = 0, ref = 0;
      for (int64_t i = 0; i < per; ++i) {
        const double d = double((*moved_feat.data)[size_t(bi * per + i)]) -
                         double(expect[size_t(bi * per + i)]);
        diff += d * d;
        ref += double(expect[size_t(bi * per + i)]) * double(expect[size_t(bi * per + i)]);
      }
      rec.feature_rel_err =
          std::max(rec.feature_rel_err, std::sqrt(diff) / (std::sqrt(ref) + 1e-30));
      double ldiff = 0, lref = 0;
      for (int k = 0; k < model.options.num_classes; ++k) {
        const double d = double(moved_logits[size_t(bi * model.options.num_classes + k)]) -
                         double(base_logits[size_t(bi * model.options.num_classes + k)]);
        ldiff += d * d;
        lref += double(base_logits[size_t(bi * model.options.num_classes + k)]) *
                double(base_logits[size_t(bi * model.options.num_classes + k)]);
      }
      rec.logit_rel_err = std::max(rec.logit_rel_err, std::sqrt(ldiff) / (std::sqrt(lref) + 1e-30));
    }
    records.push_back(rec);
  }
  return records;
}

}  // namespace eqdp
