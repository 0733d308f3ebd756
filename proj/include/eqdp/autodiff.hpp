#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "eqdp/common.hpp"
#include "eqdp/parallel.hpp"
#include "eqdp/rng.hpp"

namespace eqdp {

template <typename S>
class Tape;

// Dense tensor handle. Storage is shared and treated as immutable once a node
// has produced it; `node` is the position on the tape (-1 for constants that
// do not require gradients). `batched` marks axis 0 as the batch axis.
template <typename S>
struct Tensor {
  std::shared_ptr<std::vector<S>> data;
  std::vector<int> shape;
  Tape<S>* tape = nullptr;
  int node = -1;
  bool batched = false;

  int64_t size() const {
    int64_t p = 1;
    for (int d : shape) p *= d;
    return p;
  }
  int rank() const { return int(shape.size()); }
  int dim(int i) const { return shape[size_t(i)]; }
  S* ptr() { return data->data(); }
  const S* ptr() const { return data->data(); }
  // elements per sample (batched) or per full value (unbatched)
  int64_t sample_size() const { return batched ? size() / shape[0] : size(); }
};

// Reverse-mode tape. Gradient buffers keep the batch axis un-reduced so that
// per-sample gradients fall out of a single backward pass: a batched node's
// buffer matches its shape, an unbatched node's buffer is (batch,) + shape,
// slice b holding the gradient of loss_b alone. Interior buffers are released
// as soon as their node has propagated; leaf buffers survive for extraction.
template <typename S>
class Tape {
 public:
  Tape() : serial_(++next_serial_) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Distinguishes tape instances even when storage addresses are recycled.
  std::uint64_t serial() const { return serial_; }

  int add_node(bool batched) {
    nodes_.push_back(NodeRec{nullptr, {}, batched});
    return int(nodes_.size()) - 1;
  }
  void set_backward(int id, std::function<void(Tape&)> fn) {
    nodes_[size_t(id)].backward = std::move(fn);
  }

  std::vector<S>& grad(int id) { return nodes_[size_t(id)].grad; }
  bool has_grad(int id) const { return !nodes_[size_t(id)].grad.empty(); }
  std::vector<S>& ensure_grad(int id, int64_t n) {
    auto& g = nodes_[size_t(id)].grad;
    if (g.empty()) g.assign(size_t(n), S(0));
    return g;
  }
  // Base of the gradient slice of `parent` for batch sample b (valid for both
  // batched and unbatched parents).
  S* grad_slice(const Tensor<S>& parent, int b) {
    auto& g = ensure_grad(parent.node, parent.batched ? parent.size()
                                                      : int64_t(batch_) * parent.size());
    return g.data() + int64_t(b) * parent.sample_size();
  }

  int batch_size() const { return batch_; }

  // Seeds every per-sample loss with 1 and propagates; callable once.
  void backward(const Tensor<S>& per_sample_loss) {
    if (per_sample_loss.tape != this || per_sample_loss.node < 0)
      throw NoTape("loss tensor is not recorded on this tape");
    require(per_sample_loss.batched && per_sample_loss.rank() == 1,
            "backward expects per-sample losses shaped (batch,)");
    require(!ran_, "tape supports a single backward pass");
    ran_ = true;
    batch_ = per_sample_loss.dim(0);
    auto& seed = ensure_grad(per_sample_loss.node, batch_);
    std::fill(seed.begin(), seed.end(), S(1));
    for (int id = int(nodes_.size()) - 1; id >= 0; --id) {
      auto& n = nodes_[size_t(id)];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this);
      std::vector<S>().swap(n.grad);
    }
  }

 private:
  struct NodeRec {
    std::function<void(Tape&)> backward;
    std::vector<S> grad;
    bool batched;
  };
  static inline std::uint64_t next_serial_ = 0;
  std::uint64_t serial_ = 0;
  std::vector<NodeRec> nodes_;
  int batch_ = 0;
  bool ran_ = false;
};

// Named trainable value. The raw storage persists across steps; `use`
// registers a leaf on the tape of the current pass.
template <typename S>
struct Parameter {
  std::string name;
  std::vector<int> shape;
  std::shared_ptr<std::vector<S>> value;
  std::vector<S> grad;             // aggregate, value-shaped
  std::vector<S> per_sample_grad;  // (batch,) + value shape
  Tape<S>* tape = nullptr;
  std::uint64_t tape_serial = 0;
  int node = -1;

  int64_t size() const {
    int64_t p = 1;
    for (int d : shape) p *= d;
    return p;
  }

  bool on(const Tape<S>& t) const {
    return tape == &t && tape_serial == t.serial() && node >= 0;
  }

  Tensor<S> use(Tape<S>& t) {
    if (!on(t)) {  // one leaf per tape, reused on re-entry
      node = t.add_node(false);
      tape = &t;
      tape_serial = t.serial();
    }
    return Tensor<S>{value, shape, &t, node, false};
  }
};

template <typename S>
Parameter<S> make_parameter(std::string name, std::vector<int> shape, std::vector<S> values) {
  Parameter<S> p;
  p.name = std::move(name);
  p.shape = std::move(shape);
  p.value = std::make_shared<std::vector<S>>(std::move(values));
  require(int64_t(p.value->size()) == p.size(), "parameter data does not match its shape");
  return p;
}

// An input tensor that participates in the graph but receives no gradient.
template <typename S>
Tensor<S> constant(Tape<S>& tape, std::vector<int> shape, std::shared_ptr<std::vector<S>> data,
                   bool batched) {
  Tensor<S> t{std::move(data), std::move(shape), &tape, -1, batched};
  require(int64_t(t.data->size()) == t.size(), "constant data does not match its shape");
  return t;
}

// A gradient-receiving input; after backward the tape keeps its buffer for
// inspection (leaves are never freed).
template <typename S>
Tensor<S> leaf(Tape<S>& tape, std::vector<int> shape, std::shared_ptr<std::vector<S>> data,
               bool batched) {
  Tensor<S> t{std::move(data), std::move(shape), &tape, tape.add_node(batched), batched};
  require(int64_t(t.data->size()) == t.size(), "leaf data does not match its shape");
  return t;
}

namespace detail {

template <typename S>
Tensor<S> alloc_node(Tape<S>& tape, std::vector<int> shape, bool batched) {
  Tensor<S> t;
  t.shape = std::move(shape);
  t.data = std::make_shared<std::vector<S>>(size_t(t.size()), S(0));
  t.tape = &tape;
  t.batched = batched;
  t.node = tape.add_node(batched);
  return t;
}

template <typename S>
void check_same_tape(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.tape && b.tape && a.tape != b.tape)
    throw NoTape("operands recorded on different tapes");
}

}  // namespace detail

template <typename S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// ---------------------------------------------------------------------------
// elementwise family

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_tape(a, b);
  if (a.shape != b.shape || a.batched != b.batched)
    throw ShapeMismatch("add expects identical shapes and batching");
  Tape<S>& tape = *a.tape;
  Tensor<S> out = detail::alloc_node(tape, a.shape, a.batched);
  for (int64_t i = 0; i < out.size(); ++i) (*out.data)[i] = (*a.data)[i] + (*b.data)[i];
  const int id = out.node;
  tape.set_backward(id, [a, b, id](Tape<S>& t) {
    const auto& g = t.grad(id);
    for (const Tensor<S>* p : {&a, &b}) {
      if (p->node < 0) continue;
      auto& pg = t.ensure_grad(p->node, int64_t(g.size()));
      for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
    }
  });
  return out;
}

// y[b, c, ...] = x[b, c, ...] + bias[c]; bias is an unbatched per-channel
// vector broadcast over the batch and any trailing axes.
template <typename S>
Tensor<S> add_channel_bias(const Tensor<S>& x, const Tensor<S>& bias) {
  detail::check_same_tape(x, bias);
  if (!x.batched || bias.batched || bias.rank() != 1 || x.rank() < 2 ||
      x.dim(1) != bias.dim(0))
    throw ShapeMismatch("add_channel_bias expects (B,C,...) input and (C,) bias");
  Tape<S>& tape = *x.tape;
  const int B = x.dim(0), C = x.dim(1);
  const int64_t inner = x.size() / (int64_t(B) * C);
  Tensor<S> out = detail::alloc_node(tape, x.shape, true);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const int64_t off = (int64_t(b) * C + c) * inner;
      for (int64_t i = 0; i < inner; ++i) (*out.data)[off + i] = (*x.data)[off + i] + (*bias.data)[c];
    }
  const int id = out.node;
  tape.set_backward(id, [x, bias, id, B, C, inner](Tape<S>& t) {
    const auto& g = t.grad(id);
    if (x.node >= 0) {
      auto& gx = t.ensure_grad(x.node, int64_t(g.size()));
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (bias.node >= 0) {
      for (int b = 0; b < B; ++b) {
        S* gb = t.grad_slice(bias, b);
        for (int c = 0; c < C; ++c) {
          S acc = 0;
          const int64_t off = (int64_t(b) * C + c) * inner;
          for (int64_t i = 0; i < inner; ++i) acc += g[size_t(off + i)];
          gb[c] += acc;
        }
      }
    }
  });
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S factor) {
  Tape<S>& tape = *x.tape;
  Tensor<S> out = detail::alloc_node(tape, x.shape, x.batched);
  for (int64_t i = 0; i < out.size(); ++i) (*out.data)[i] = factor * (*x.data)[i];
  const int id = out.node;
  tape.set_backward(id, [x, id, factor](Tape<S>& t) {
    if (x.node < 0) return;
    const auto& g = t.grad(id);
    auto& gx = t.ensure_grad(x.node, int64_t(g.size()));
    for (size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
  });
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_tape(a, b);
  if (a.shape != b.shape || a.batched != b.batched)
    throw ShapeMismatch("mul expects identical shapes and batching");
  Tape<S>& tape = *a.tape;
  Tensor<S> out = detail::alloc_node(tape, a.shape, a.batched);
  for (int64_t i = 0; i < out.size(); ++i) (*out.data)[i] = (*a.data)[i] * (*b.data)[i];
  const int id = out.node;
  // unbatched nodes carry (batch,)+shape gradient buffers, so data indices
  // wrap modulo the value size
  const size_t n = size_t(a.size());
  tape.set_backward(id, [a, b, id, n](Tape<S>& t) {
    const auto& g = t.grad(id);
    if (a.node >= 0) {
      auto& ga = t.ensure_grad(a.node, int64_t(g.size()));
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*b.data)[i % n];
    }
    if (b.node >= 0) {
      auto& gb = t.ensure_grad(b.node, int64_t(g.size()));
      for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * (*a.data)[i % n];
    }
  });
  return out;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  Tape<S>& tape = *x.tape;
  Tensor<S> out = detail::alloc_node(tape, x.shape, x.batched);
  for (int64_t i = 0; i < out.size(); ++i) (*out.data)[i] = std::max((*x.data)[i], S(0));
  const int id = out.node;
  const size_t n = size_t(x.size());
  tape.set_backward(id, [x, id, n](Tape<S>& t) {
    if (x.node < 0) return;
    const auto& g = t.grad(id);
    auto& gx = t.ensure_grad(x.node, int64_t(g.size()));
    for (size_t i = 0; i < g.size(); ++i)
      if ((*x.data)[i % n] > S(0)) gx[i] += g[i];
  });
  return out;
}

namespace detail {
template <typename S>
inline S softplus(S v) {
  return v > S(20) ? v : std::log1p(std::exp(v));
}
template <typename S>
inline S sigmoid(S v) {
  return S(1) / (S(1) + std::exp(-v));
}
}  // namespace detail

// mish(x) = x * tanh(softplus(x))
template <typename S>
Tensor<S> mish(const Tensor<S>& x) {
  Tape<S>& tape = *x.tape;
  Tensor<S> out = detail::alloc_node(tape, x.shape, x.batched);
  for (int64_t i = 0; i < out.size(); ++i) {
    const S v = (*x.data)[i];
    (*out.data)[i] = v * std::tanh(detail::softplus(v));
  }
  const int id = out.node;
  const size_t n = size_t(x.size());
  tape.set_backward(id, [x, id, n](Tape<S>& t) {
    if (x.node < 0) return;
    const auto& g = t.grad(id);
    auto& gx = t.ensure_grad(x.node, int64_t(g.size()));
    for (size_t i = 0; i < g.size(); ++i) {
      const S v = (*x.data)[i % n];
      const S th = std::tanh(detail::softplus(v));
      gx[i] += g[i] * (th + v * (S(1) - th * th) * detail::sigmoid(v));
    }
  });
  return out;
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, std::vector<int> shape) {
  int64_t p = 1;
  for (int d : shape) p *= d;
  if (p != x.size()) throw ShapeMismatch("reshape changes the element count");
  if (x.batched && shape[0] != x.dim(0))
    throw ShapeMismatch("reshape may not move the batch axis");
  Tape<S>& tape = *x.tape;
  Tensor<S> out = detail::alloc_node(tape, std::move(shape), x.batched);
  *out.data = *x.data;
  const int id = out.node;
  tape.set_backward(id, [x, id](Tape<S>& t) {
    if (x.node < 0) return;
    const auto& g = t.grad(id);
    auto& gx = t.ensure_grad(x.node, int64_t(g.size()));
    for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return out;
}

// Unbatched 2-D transpose (or per-sample transpose of (B, M, N)).
template <typename S>
Tensor<S> transpose(const Tensor<S>& x) {
  const bool per_sample = x.batched;
  if ((per_sample && x.rank() != 3) || (!per_sample && x.rank() != 2))
    throw ShapeMismatch("transpose expects (M,N) or batched (B,M,N)");
  const int B = per_sample ? x.dim(0) : 1;
  const int m = x.dim(per_sample ? 1 : 0), n = x.dim(per_sample ? 2 : 1);
  Tape<S>& tape = *x.tape;
  std::vector<int> shape = per_sample ? std::vector<int>{B, n, m} : std::vector<int>{n, m};
  Tensor<S> out = detail::alloc_node(tape, std::move(shape), per_sample);
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        (*out.data)[(int64_t(b) * n + j) * m + i] = (*x.data)[(int64_t(b) * m + i) * n + j];
  const int id = out.node;
  tape.set_backward(id, [x, id, B, m, n](Tape<S>& t) {
    if (x.node < 0) return;
    const auto& g = t.grad(id);
    auto& gx = t.ensure_grad(x.node, x.batched ? x.size() : int64_t(t.batch_size()) * x.size());
    // unbatched inputs receive a per-sample buffer; transpose of an unbatched
    // tensor stays unbatched, so both sides share the same slicing
    const int rounds = x.batched ? 1 : t.batch_size();
    const int64_t stride = int64_t(m) * n;
    for (int r = 0; r < rounds; ++r)
      for (int b = 0; b < B; ++b)
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j)
            gx[(int64_t(r) * B + b) * stride + int64_t(i) * n + j] +=
                g[(int64_t(r) * B + b) * stride + int64_t(j) * m + i];
  });
  return out;
}

// Zero-pad the two trailing spatial axes of (B,C,H,W).
template <typename S>
Tensor<S> pad2d(const Tensor<S>& x, int p) {
  if (x.rank() != 4 || !x.batched) throw ShapeMismatch("pad2d expects batched (B,C,H,W)");
  require(p >= 0, "pad2d amount must be non-negative");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Ho = H + 2 * p, Wo = W + 2 * p;
  Tape<S>& tape = *x.tape;
  Tensor<S> out = detail::alloc_node(tape, {B, C, Ho, Wo}, true);
  for (int64_t bc = 0; bc < int64_t(B) * C; ++bc)
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx)
        (*out.data)[(bc * Ho + y + p) * Wo + xx + p] = (*x.data)[(bc * H + y) * W + xx];
  const int id = out.node;
  tape.set_backward(id, [x, id, B, C, H, W, Ho, Wo, p](Tape<S>& t) {
    if (x.node < 0) return;
    const auto& g = t.grad(id);
    auto& gx = t.ensure_grad(x.node, x.size());
    for (int64_t bc = 0; bc < int64_t(B) * C; ++bc)
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx)
          gx[(bc * H + y) * W + xx] += g[size_t((bc * Ho + y + p) * Wo + xx + p)];
  });
  return out;
}

// Crop a (top, left, height, width) window from the spatial axes of (B,C,H,W).
template <typename S>
Tensor<S> crop2d(const Tensor<S>& x, int top, int left, int height, int width) {
  if (x.rank() != 4 || !x.batched) throw ShapeMismatch("crop2d expects batched (B,C,H,W)");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (top < 0 || left < 0 || top + height > H || left + width > W)
    throw ShapeMismatch("crop window exceeds the input extent");
  Tape<S>& tape = *x.tape;
  Tensor<S> out = detail::alloc_node(tape, {B, C, height, width}, true);
  for (int64_t bc = 0; bc < int64_t(B) * C; ++bc)
    for (int y = 0; y < height; ++y)
      for (int xx = 0; xx < width; ++xx)
        (*out.data)[(bc * height + y) * width + xx] =
            (*x.data)[(bc * H + y + top) * W + xx + left];
  const int id = out.node;
  tape.set_backward(id, [x, id, B, C, H, W, height, width, top, left](Tape<S>& t) {
    if (x.node < 0) return;
    const auto& g = t.grad(id);
    auto& gx = t.ensure_grad(x.node, x.size());
    for (int64_t bc = 0; bc < int64_t(B) * C; ++bc)
      for (int y = 0; y < height; ++y)
        for (int xx = 0; xx < width; ++xx)
          gx[(bc * H + y + top) * W + xx + left] += g[size_t((bc * height + y) * width + xx)];
  });
  return out;
}

// sum / mean reduce every non-batch axis: batched input yields (B,), unbatched
// input yields a single-element tensor. The batch axis is never reduced, which
// keeps per-sample gradients exact.
template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  Tape<S>& tape = *x.tape;
  const int B = x.batched ? x.dim(0) : 1;
  const int64_t inner = x.sample_size();
  Tensor<S> out = detail::alloc_node(tape, x.batched ? std::vector<int>{B} : std::vector<int>{1},
                                     x.batched);
  for (int b = 0; b < B; ++b) {
    S acc = 0;
    for (int64_t i = 0; i < inner; ++i) acc += (*x.data)[b * inner + i];
    (*out.data)[b] = acc;
  }
  const int id = out.node;
  tape.set_backward(id, [x, id, inner](Tape<S>& t) {
    if (x.node < 0) return;
    const auto& g = t.grad(id);
    if (x.batched) {
      auto& gx = t.ensure_grad(x.node, x.size());
      for (size_t b = 0; b < g.size(); ++b)
        for (int64_t i = 0; i < inner; ++i) gx[b * inner + i] += g[b];
    } else {
      for (int b = 0; b < t.batch_size(); ++b) {
        S* gx = t.grad_slice(x, b);
        for (int64_t i = 0; i < inner; ++i) gx[i] += g[size_t(b)];
      }
    }
  });
  return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  return scale(sum(x), S(1) / S(x.sample_size()));
}

// ---------------------------------------------------------------------------
// convolution

enum class PadKind { zero, circular, none };

struct Padding {
  PadKind kind = PadKind::zero;
  int amount = 0;
  static Padding zero(int p) { return {PadKind::zero, p}; }
  static Padding circular(int p) { return {PadKind::circular, p}; }
  static Padding none() { return {PadKind::none, 0}; }
};

namespace detail {

template <typename S>
void im2col(const S* x, int C, int H, int W, int k, int p, PadKind kind, int Ho, int Wo,
            S* cols) {
  const int64_t plane = int64_t(H) * W;
  int64_t r = 0;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx, ++r) {
        S* dst = cols + r * int64_t(Ho) * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          int iy = oy + ky - p;
          if (kind == PadKind::circular) iy = ((iy % H) + H) % H;
          const bool row_in = iy >= 0 && iy < H;
          for (int ox = 0; ox < Wo; ++ox) {
            int ix = ox + kx - p;
            if (kind == PadKind::circular) ix = ((ix % W) + W) % W;
            *dst++ = (row_in && ix >= 0 && ix < W) ? x[c * plane + int64_t(iy) * W + ix] : S(0);
          }
        }
      }
    }
  }
}

template <typename S>
void col2im_add(const S* cols, int C, int H, int W, int k, int p, PadKind kind, int Ho, int Wo,
                S* dx) {
  const int64_t plane = int64_t(H) * W;
  int64_t r = 0;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx, ++r) {
        const S* src = cols + r * int64_t(Ho) * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          int iy = oy + ky - p;
          if (kind == PadKind::circular) iy = ((iy % H) + H) % H;
          if (iy < 0 || iy >= H) continue;
          for (int ox = 0; ox < Wo; ++ox) {
            int ix = ox + kx - p;
            if (kind == PadKind::circular) ix = ((ix % W) + W) % W;
            if (ix >= 0 && ix < W)
              dx[c * plane + int64_t(iy) * W + ix] += src[int64_t(oy) * Wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// Cross-correlation of (B,C_in,H,W) with an unbatched kernel (C_out,C_in,k,k).
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, Padding padding) {
  detail::check_same_tape(x, w);
  if (x.rank() != 4 || !x.batched) throw ShapeMismatch("conv2d input must be batched (B,C,H,W)");
  if (w.rank() != 4 || w.batched) throw ShapeMismatch("conv2d kernel must be unbatched (O,C,k,k)");
  if (w.dim(1) != x.dim(1)) throw ShapeMismatch("conv2d channel counts disagree");
  const int k = w.dim(2);
  if (w.dim(3) != k || k % 2 == 0) throw ShapeMismatch("conv2d kernel must be square with odd size");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), O = w.dim(0);
  const int p = padding.kind == PadKind::none ? 0 : padding.amount;
  const int Ho = H + 2 * p - k + 1, Wo = W + 2 * p - k + 1;
  require(Ho >= 1 && Wo >= 1, "conv2d output would be empty");

  Tape<S>& tape = *x.tape;
  Tensor<S> out = detail::alloc_node(tape, {B, O, Ho, Wo}, true);
  const int64_t rows = int64_t(C) * k * k, area = int64_t(Ho) * Wo;
  const PadKind kind = padding.kind;
  parallel_for(B, [&](int b) {
    std::vector<S> cols(size_t(rows * area));
    detail::im2col(x.ptr() + int64_t(b) * C * H * W, C, H, W, k, p, kind, Ho, Wo, cols.data());
    ConstMatMap<S> wm(w.ptr(), O, rows);
    ConstMatMap<S> cm(cols.data(), rows, area);
    MatMap<S> ym(out.ptr() + int64_t(b) * O * area, O, area);
    ym.noalias() = wm * cm;
  });

  const int id = out.node;
  tape.set_backward(id, [x, w, id, B, C, H, W, O, k, p, kind, Ho, Wo, rows, area](Tape<S>& t) {
    auto& g = t.grad(id);
    const bool need_w = w.node >= 0, need_x = x.node >= 0;
    if (!need_w && !need_x) return;
    if (need_w) t.ensure_grad(w.node, int64_t(t.batch_size()) * w.size());
    if (need_x) t.ensure_grad(x.node, x.size());
    parallel_for(B, [&](int b) {
      ConstMatMap<S> gy(g.data() + int64_t(b) * O * area, O, area);
      if (need_w) {
        std::vector<S> cols(size_t(rows * area));
        detail::im2col(x.ptr() + int64_t(b) * C * H * W, C, H, W, k, p, kind, Ho, Wo,
                       cols.data());
        ConstMatMap<S> cm(cols.data(), rows, area);
        MatMap<S> gw(t.grad_slice(w, b), O, rows);
        gw.noalias() += gy * cm.transpose();
      }
      if (need_x) {
        std::vector<S> dcols(size_t(rows * area));
        ConstMatMap<S> wm(w.ptr(), O, rows);
        MatMap<S> dc(dcols.data(), rows, area);
        dc.noalias() = wm.transpose() * gy;
        detail::col2im_add(dcols.data(), C, H, W, k, p, kind, Ho, Wo,
                           t.grad_slice(x, b));
      }
    });
  });
  return out;
}

// ---------------------------------------------------------------------------
// pooling

template <typename S>
Tensor<S> max_pool2d(const Tensor<S>& x, int window = 2) {
  if (x.rank() != 4 || !x.batched) throw ShapeMismatch("max_pool2d expects batched (B,C,H,W)");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % window != 0 || W % window != 0)
    throw ShapeMismatch("max_pool2d needs spatial dims divisible by the window");
  const int Ho = H / window, Wo = W / window;
  Tape<S>& tape = *x.tape;
  Tensor<S> out = detail::alloc_node(tape, {B, C, Ho, Wo}, true);
  auto argmax = std::make_shared<std::vector<int64_t>>(size_t(out.size()));
  for (int64_t bc = 0; bc < int64_t(B) * C; ++bc) {
    const S* plane = x.ptr() + bc * H * W;
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        int64_t best = int64_t(oy * window) * W + ox * window;
        S best_v = plane[best];
        for (int dy = 0; dy < window; ++dy)
          for (int dx = 0; dx < window; ++dx) {
            const int64_t idx = int64_t(oy * window + dy) * W + ox * window + dx;
            if (plane[idx] > best_v) {  // strict: first index wins ties
              best_v = plane[idx];
              best = idx;
            }
          }
        const int64_t o = (bc * Ho + oy) * Wo + ox;
        (*out.data)[o] = best_v;
        (*argmax)[o] = bc * H * W + best;
      }
  }
  const int id = out.node;
  tape.set_backward(id, [x, id, argmax](Tape<S>& t) {
    if (x.node < 0) return;
    const auto& g = t.grad(id);
    auto& gx = t.ensure_grad(x.node, x.size());
    for (size_t i = 0; i < g.size(); ++i) gx[size_t((*argmax)[i])] += g[i];
  });
  return out;
}

template <typename S>
Tensor<S> avg_pool2d(const Tensor<S>& x, int window = 2) {
  if (x.rank() != 4 || !x.batched) throw ShapeMismatch("avg_pool2d expects batched (B,C,H,W)");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % window != 0 || W % window != 0)
    throw ShapeMismatch("avg_pool2d needs spatial dims divisible by the window");
  const int Ho = H / window, Wo = W / window;
  const S inv = S(1) / S(window * window);
  Tape<S>& tape = *x.tape;
  Tensor<S> out = detail::alloc_node(tape, {B, C, Ho, Wo}, true);
  for (int64_t bc = 0; bc < int64_t(B) * C; ++bc) {
    const S* plane = x.ptr() + bc * H * W;
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        S acc = 0;
        for (int dy = 0; dy < window; ++dy)
          for (int dx = 0; dx < window; ++dx)
            acc += plane[int64_t(oy * window + dy) * W + ox * window + dx];
        (*out.data)[(bc * Ho + oy) * Wo + ox] = acc * inv;
      }
  }
  const int id = out.node;
  tape.set_backward(id, [x, id, B, C, H, W, Ho, Wo, window, inv](Tape<S>& t) {
    if (x.node < 0) return;
    const auto& g = t.grad(id);
    auto& gx = t.ensure_grad(x.node, x.size());
    for (int64_t bc = 0; bc < int64_t(B) * C; ++bc)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          const S gv = g[size_t((bc * Ho + oy) * Wo + ox)] * inv;
          for (int dy = 0; dy < window; ++dy)
            for (int dx = 0; dx < window; ++dx)
              gx[bc * H * W + int64_t(oy * window + dy) * W + ox * window + dx] += gv;
        }
  });
  return out;
}

template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  if (x.rank() != 4 || !x.batched)
    throw ShapeMismatch("global_avg_pool expects batched (B,C,H,W)");
  const int B = x.dim(0), C = x.dim(1);
  const int64_t area = int64_t(x.dim(2)) * x.dim(3);
  const S inv = S(1) / S(area);
  Tape<S>& tape = *x.tape;
  Tensor<S> out = detail::alloc_node(tape, {B, C}, true);
  for (int64_t bc = 0; bc < int64_t(B) * C; ++bc) {
    S acc = 0;
    for (int64_t i = 0; i < area; ++i) acc += (*x.data)[bc * area + i];
    (*out.data)[bc] = acc * inv;
  }
  const int id = out.node;
  tape.set_backward(id, [x, id, area, inv](Tape<S>& t) {
    if (x.node < 0) return;
    const auto& g = t.grad(id);
    auto& gx = t.ensure_grad(x.node, x.size());
    for (size_t bc = 0; bc < g.size(); ++bc) {
      const S gv = g[bc] * inv;
      for (int64_t i = 0; i < area; ++i) gx[bc * area + i] += gv;
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// linear layers

// y = x * w + bias with x (B,F), w (F,O), bias (O).
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias) {
  detail::check_same_tape(x, w);
  detail::check_same_tape(x, bias);
  if (x.rank() != 2 || !x.batched || w.rank() != 2 || w.batched || bias.rank() != 1 ||
      x.dim(1) != w.dim(0) || bias.dim(0) != w.dim(1))
    throw ShapeMismatch("linear expects x (B,F), w (F,O), bias (O)");
  const int B = x.dim(0), F = x.dim(1), O = w.dim(1);
  Tape<S>& tape = *x.tape;
  Tensor<S> out = detail::alloc_node(tape, {B, O}, true);
  {
    ConstMatMap<S> xm(x.ptr(), B, F), wm(w.ptr(), F, O);
    MatMap<S> ym(out.ptr(), B, O);
    ym.noalias() = xm * wm;
    for (int b = 0; b < B; ++b)
      for (int o = 0; o < O; ++o) ym(b, o) += (*bias.data)[o];
  }
  const int id = out.node;
  tape.set_backward(id, [x, w, bias, id, B, F, O](Tape<S>& t) {
    const auto& g = t.grad(id);
    ConstMatMap<S> gy(g.data(), B, O);
    if (x.node >= 0) {
      auto& gx = t.ensure_grad(x.node, x.size());
      MatMap<S> gxm(gx.data(), B, F);
      ConstMatMap<S> wm(w.ptr(), F, O);
      gxm.noalias() += gy * wm.transpose();
    }
    if (w.node >= 0) {
      t.ensure_grad(w.node, int64_t(B) * w.size());
      for (int b = 0; b < B; ++b) {
        MatMap<S> gw(t.grad_slice(w, b), F, O);
        ConstMatMap<S> xb(x.ptr() + int64_t(b) * F, F, 1);
        ConstMatMap<S> gb(g.data() + int64_t(b) * O, 1, O);
        gw.noalias() += xb * gb;
      }
    }
    if (bias.node >= 0) {
      t.ensure_grad(bias.node, int64_t(B) * O);
      for (int b = 0; b < B; ++b) {
        S* gbias = t.grad_slice(bias, b);
        for (int o = 0; o < O; ++o) gbias[o] += g[size_t(b) * O + o];
      }
    }
  });
  return out;
}

// y[b] = M x[b] applied along the channel axis of (B,C) or (B,C,H,W); M is a
// fixed (unlearned) matrix, e.g. a restriction basis or a Fourier transform.
template <typename S>
Tensor<S> channel_linear(const Tensor<S>& x,
                         const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>& m) {
  if (!x.batched || (x.rank() != 2 && x.rank() != 4))
    throw ShapeMismatch("channel_linear expects batched (B,C) or (B,C,H,W)");
  const int B = x.dim(0), C = x.dim(1);
  if (int(m.cols()) != C) throw ShapeMismatch("channel_linear matrix width must match channels");
  const int Cn = int(m.rows());
  const int64_t area = x.rank() == 4 ? int64_t(x.dim(2)) * x.dim(3) : 1;
  Tape<S>& tape = *x.tape;
  std::vector<int> shape = x.shape;
  shape[1] = Cn;
  Tensor<S> out = detail::alloc_node(tape, std::move(shape), true);
  auto mat = std::make_shared<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>>(m);
  for (int b = 0; b < B; ++b) {
    ConstMatMap<S> xm(x.ptr() + int64_t(b) * C * area, C, area);
    MatMap<S> ym(out.ptr() + int64_t(b) * Cn * area, Cn, area);
    ym.noalias() = (*mat) * xm;
  }
  const int id = out.node;
  tape.set_backward(id, [x, id, mat, B, C, Cn, area](Tape<S>& t) {
    if (x.node < 0) return;
    const auto& g = t.grad(id);
    auto& gx = t.ensure_grad(x.node, x.size());
    for (int b = 0; b < B; ++b) {
      ConstMatMap<S> gy(g.data() + int64_t(b) * Cn * area, Cn, area);
      MatMap<S> gxm(gx.data() + int64_t(b) * C * area, C, area);
      gxm.noalias() += mat->transpose() * gy;
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// loss

// Numerically stabilized softmax cross-entropy, returning per-sample losses
// (B,); reduction is deliberately left to the caller so per-sample gradients
// stay available.
template <typename S>
Tensor<S> softmax_cross_entropy(const Tensor<S>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2 || !logits.batched)
    throw ShapeMismatch("softmax_cross_entropy expects batched (B,K) logits");
  const int B = logits.dim(0), K = logits.dim(1);
  if (int(labels.size()) != B)
    throw LengthMismatch("labels length must equal the batch size");
  for (int lab : labels)
    require(lab >= 0 && lab < K, "label out of range");
  Tape<S>& tape = *logits.tape;
  Tensor<S> out = detail::alloc_node(tape, {B}, true);
  for (int b = 0; b < B; ++b) {
    const S* z = logits.ptr() + int64_t(b) * K;
    S m = z[0];
    for (int j = 1; j < K; ++j) m = std::max(m, z[j]);
    S lse = 0;
    for (int j = 0; j < K; ++j) lse += std::exp(z[j] - m);
    lse = std::log(lse) + m;
    (*out.data)[b] = lse - z[labels[size_t(b)]];
  }
  const int id = out.node;
  auto labs = std::make_shared<std::vector<int>>(labels);
  tape.set_backward(id, [logits, id, labs, B, K](Tape<S>& t) {
    if (logits.node < 0) return;
    const auto& g = t.grad(id);
    auto& gl = t.ensure_grad(logits.node, logits.size());
    for (int b = 0; b < B; ++b) {
      const S* z = logits.ptr() + int64_t(b) * K;
      S m = z[0];
      for (int j = 1; j < K; ++j) m = std::max(m, z[j]);
      S denom = 0;
      for (int j = 0; j < K; ++j) denom += std::exp(z[j] - m);
      for (int j = 0; j < K; ++j) {
        S p = std::exp(z[j] - m) / denom;
        if (j == (*labs)[size_t(b)]) p -= S(1);
        gl[int64_t(b) * K + j] += g[size_t(b)] * p;
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// gradient extraction and checking

// Runs backward on the per-sample losses and fills grad / per_sample_grad on
// each parameter. per_sample_grad[b] is the gradient of loss_b alone; grad is
// the sample-index-ordered sum (the gradient of the summed loss).
template <typename S>
void per_sample_gradients(Tape<S>& tape, const Tensor<S>& per_sample_losses,
                          const std::vector<Parameter<S>*>& params) {
  for (auto* p : params)
    if (!p->on(tape))
      throw NoTape("parameter '" + p->name + "' is not registered on this tape");
  tape.backward(per_sample_losses);
  const int B = tape.batch_size();
  for (auto* p : params) {
    const int64_t n = p->size();
    p->per_sample_grad.assign(size_t(int64_t(B) * n), S(0));
    if (tape.has_grad(p->node)) {
      const auto& g = tape.grad(p->node);
      require(int64_t(g.size()) == int64_t(B) * n, "unexpected gradient buffer size");
      std::copy(g.begin(), g.end(), p->per_sample_grad.begin());
    }
    p->grad.assign(size_t(n), S(0));
    for (int b = 0; b < B; ++b)
      for (int64_t i = 0; i < n; ++i) p->grad[size_t(i)] += p->per_sample_grad[size_t(b * n + i)];
  }
}

// Central-difference check of the aggregate gradients of sum(loss). `build`
// must reconstruct the same forward pass on a fresh tape each call. At most
// `max_coords` coordinates are probed, sampled deterministically when the
// parameter count exceeds the budget. Relative error is measured against the
// largest analytic entry, which keeps near-zero coordinates meaningful.
template <typename S>
double finite_difference_check(std::vector<Parameter<S>*> params,
                               const std::function<Tensor<S>(Tape<S>&)>& build, double h,
                               int max_coords = 200, uint64_t seed = 0x5eed) {
  auto total_loss = [&]() -> double {
    Tape<S> tape;
    Tensor<S> loss = build(tape);
    double acc = 0;
    for (int64_t i = 0; i < loss.size(); ++i) acc += double((*loss.data)[i]);
    return acc;
  };
  {
    Tape<S> tape;
    Tensor<S> loss = build(tape);
    per_sample_gradients(tape, loss, params);
  }
  double max_abs = 0;
  int64_t total = 0;
  for (auto* p : params) {
    total += p->size();
    for (S v : p->grad) max_abs = std::max(max_abs, std::abs(double(v)));
  }
  std::vector<std::pair<int, int64_t>> coords;  // (param index, offset)
  if (total <= max_coords) {
    for (size_t pi = 0; pi < params.size(); ++pi)
      for (int64_t i = 0; i < params[pi]->size(); ++i) coords.emplace_back(int(pi), i);
  } else {
    Rng rng(seed);
    for (int c = 0; c < max_coords; ++c) {
      int64_t flat = int64_t(rng.uniform_int(uint64_t(total)));
      for (size_t pi = 0; pi < params.size(); ++pi) {
        if (flat < params[pi]->size()) {
          coords.emplace_back(int(pi), flat);
          break;
        }
        flat -= params[pi]->size();
      }
    }
  }
  double worst = 0;
  for (const auto& [pi, off] : coords) {
    auto& slot = (*params[size_t(pi)]->value)[size_t(off)];
    const S saved = slot;
    slot = saved + S(h);
    const double up = total_loss();
    slot = saved - S(h);
    const double down = total_loss();
    slot = saved;
    const double fd = (up - down) / (2 * h);
    const double an = double(params[size_t(pi)]->grad[size_t(off)]);
    worst = std::max(worst, std::abs(fd - an) / (max_abs + 1e-12));
  }
  return worst;
}

}  // namespace eqdp
