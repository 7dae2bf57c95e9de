#pragma once

// Dense tensors plus a tape-based reverse-mode autodiff engine carrying
// exactly the operator set the four networks need. Templated on the scalar
// type: float is the training precision, double exists for gradient checks.
//
// Freezing semantics: a leaf registered with requires_grad=false never gets
// a gradient buffer, but gradients still flow *through* ops that consume it
// whenever another input of the op flows. This is what lets the F-update
// backpropagate through frozen G and D.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "segada/gemm.hpp"
#include "segada/rng.hpp"

namespace segada {

namespace detail {

inline std::size_t checked_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor dimension must be positive");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline bool all_finite(const float* p, std::size_t n) {
  std::uint32_t bad = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t b;
    std::memcpy(&b, p + i, sizeof(b));
    bad |= static_cast<std::uint32_t>((b & 0x7F800000u) == 0x7F800000u);
  }
  return bad == 0;
}

inline bool all_finite(const double* p, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(p[i])) return false;
  return true;
}

template <class T>
void require_finite(const T* p, std::size_t n, const char* what) {
  if (!all_finite(p, n))
    throw std::runtime_error(std::string("non-finite value in ") + what);
}

}  // namespace detail

template <class T>
struct Tensor {
  std::vector<int> shape;
  std::shared_ptr<std::vector<T>> data;
  bool requires_grad = false;
  int node = -1;  // tape handle, -1 when detached

  Tensor() = default;

  explicit Tensor(std::vector<int> s, T fill = T(0)) : shape(std::move(s)) {
    data = std::make_shared<std::vector<T>>(detail::checked_numel(shape), fill);
  }

  Tensor(std::vector<int> s, std::vector<T> values) : shape(std::move(s)) {
    if (detail::checked_numel(shape) != values.size())
      throw std::invalid_argument("tensor data length does not match shape");
    data = std::make_shared<std::vector<T>>(std::move(values));
  }

  static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

  std::size_t size() const { return data ? data->size() : 0; }
  int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
  int rank() const { return static_cast<int>(shape.size()); }
  T* ptr() { return data->data(); }
  const T* ptr() const { return data->data(); }

  T item() const {
    if (size() != 1) throw std::invalid_argument("item() requires a scalar tensor");
    return (*data)[0];
  }
};

template <class T>
class Tape {
 public:
  using BackFn = std::function<void(Tape<T>&)>;

  // Registers t as a leaf and binds it to this tape. Gradient buffers are
  // only ever materialized for leaves with requires_grad=true.
  void leaf(Tensor<T>& t) {
    t.node = add(t.size(), t.requires_grad);
  }

  // Copy of t bound to this tape; shares the underlying data buffer.
  Tensor<T> watch(const Tensor<T>& t) {
    Tensor<T> v = t;
    leaf(v);
    return v;
  }

  int add(std::size_t size, bool flow) {
    nodes_.push_back(Node{size, flow, {}, {}});
    return static_cast<int>(nodes_.size()) - 1;
  }

  void set_back(int id, BackFn fn) { nodes_[static_cast<std::size_t>(id)].back = std::move(fn); }

  bool flows(int id) const {
    return id >= 0 && nodes_[static_cast<std::size_t>(id)].flow;
  }

  bool flows(const Tensor<T>& t) const { return flows(t.node); }

  bool has_grad(int id) const {
    return id >= 0 && !nodes_[static_cast<std::size_t>(id)].grad.empty();
  }

  // Materializes (zero-filled) on first access.
  std::vector<T>& grad(int id) {
    Node& n = nodes_.at(static_cast<std::size_t>(id));
    if (n.grad.empty()) n.grad.assign(n.size, T(0));
    return n.grad;
  }

  const std::vector<T>& grad_view(int id) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(id));
    if (n.grad.empty()) throw std::logic_error("gradient not materialized");
    return n.grad;
  }

  // Reverse traversal from a scalar loss. Visits each node at most once;
  // multiple consumers of a node accumulate into the same gradient buffer.
  void backward(const Tensor<T>& loss) {
    if (loss.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
    if (loss.node < 0) throw std::invalid_argument("backward: loss is detached from the tape");
    if (!flows(loss.node)) throw std::invalid_argument("backward: loss does not depend on any requires_grad leaf");
    grad(loss.node).assign(1, T(1));
    for (int id = loss.node; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.grad.empty() && n.back) n.back(*this);
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    std::size_t size = 0;
    bool flow = false;
    std::vector<T> grad;
    BackFn back;
  };
  std::vector<Node> nodes_;
};

namespace detail {

// Output-node helper: adds the node, wires the backward closure (only when
// something upstream flows), runs the finite check.
template <class T, class MakeBack>
void finish_op(Tape<T>& tape, Tensor<T>& out, bool flow, const char* what,
               MakeBack&& make_back) {
  require_finite(out.ptr(), out.size(), what);
  out.node = tape.add(out.size(), flow);
  if (flow) tape.set_back(out.node, make_back(out.node));
}

template <class T>
std::vector<T>& scratch_buffer(std::size_t n) {
  thread_local std::vector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

// col layout: row r = ci*k*k + ky*k + kx, column = oy*wo + ox
template <class T>
void im2col(const T* in, int ci, int h, int w, int k, int stride, int pad,
            int ho, int wo, T* col) {
  for (int c = 0; c < ci; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* dst = col + (static_cast<std::size_t>(c) * k * k + ky * k + kx) *
                           (static_cast<std::size_t>(ho) * wo);
        for (int oy = 0; oy < ho; ++oy, dst += wo) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            std::memset(dst, 0, sizeof(T) * static_cast<std::size_t>(wo));
            continue;
          }
          const T* src = in + (static_cast<std::size_t>(c) * h + iy) * w;
          if (stride == 1) {
            const int x0 = std::max(0, pad - kx);
            const int x1 = std::min(wo, w + pad - kx);
            if (x0 > 0) std::memset(dst, 0, sizeof(T) * static_cast<std::size_t>(x0));
            if (x1 > x0)
              std::memcpy(dst + x0, src + x0 - pad + kx,
                          sizeof(T) * static_cast<std::size_t>(x1 - x0));
            if (x1 < wo)
              std::memset(dst + x1, 0,
                          sizeof(T) * static_cast<std::size_t>(wo - x1));
          } else {
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride - pad + kx;
              dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

// scatter-add inverse of im2col
template <class T>
void col2im_add(const T* col, int ci, int h, int w, int k, int stride, int pad,
                int ho, int wo, T* in_grad) {
  for (int c = 0; c < ci; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* src = col + (static_cast<std::size_t>(c) * k * k + ky * k + kx) *
                                 (static_cast<std::size_t>(ho) * wo);
        for (int oy = 0; oy < ho; ++oy, src += wo) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          T* dst = in_grad + (static_cast<std::size_t>(c) * h + iy) * w;
          if (stride == 1) {
            const int x0 = std::max(0, pad - kx);
            const int x1 = std::min(wo, w + pad - kx);
            for (int ox = x0; ox < x1; ++ox) dst[ox - pad + kx] += src[ox];
          } else {
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride - pad + kx;
              if (ix >= 0 && ix < w) dst[ix] += src[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

// -------------------------------------------------------------------------
// conv2d: input [Cin,H,W], weight [Cout,Cin,k,k], bias [Cout], zero padding.
// H' = (H + 2*pad - k)/stride + 1, likewise W'.
// -------------------------------------------------------------------------
template <class T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& in, const Tensor<T>& weight,
                 const Tensor<T>& bias, int stride, int pad) {
  if (in.rank() != 3) throw std::invalid_argument("conv2d: input must be rank 3 (C,H,W)");
  if (weight.rank() != 4) throw std::invalid_argument("conv2d: weight must be rank 4 (Cout,Cin,k,k)");
  const int ci = in.dim(0), h = in.dim(1), w = in.dim(2);
  const int co = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != ci)
    throw std::invalid_argument(
        "conv2d: weight input-channel dim " + std::to_string(weight.dim(1)) +
        " does not match input channels " + std::to_string(ci));
  if (weight.dim(3) != k)
    throw std::invalid_argument("conv2d: kernel must be square, got " +
                                std::to_string(k) + "x" + std::to_string(weight.dim(3)));
  if (static_cast<int>(bias.size()) != co)
    throw std::invalid_argument("conv2d: bias length " + std::to_string(bias.size()) +
                                " does not match output channels " + std::to_string(co));
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (pad < 0) throw std::invalid_argument("conv2d: pad must be >= 0");
  if (k > h + 2 * pad || k > w + 2 * pad)
    throw std::invalid_argument("conv2d: kernel size " + std::to_string(k) +
                                " exceeds padded input " + std::to_string(h + 2 * pad) +
                                "x" + std::to_string(w + 2 * pad));

  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (w + 2 * pad - k) / stride + 1;
  const int kk = ci * k * k;
  const std::size_t spatial = static_cast<std::size_t>(ho) * wo;
  const bool unit_kernel = (k == 1 && stride == 1 && pad == 0);

  const bool flow_in = tape.flows(in);
  const bool flow_w = tape.flows(weight);
  const bool flow_b = tape.flows(bias);
  const bool flow = flow_in || flow_w || flow_b;

  // dW needs the col matrix again; keep it alive only in that case.
  std::shared_ptr<std::vector<T>> kept_col;
  const T* col_ptr;
  if (unit_kernel) {
    col_ptr = in.ptr();
  } else if (flow_w) {
    kept_col = std::make_shared<std::vector<T>>(static_cast<std::size_t>(kk) * spatial);
    detail::im2col(in.ptr(), ci, h, w, k, stride, pad, ho, wo, kept_col->data());
    col_ptr = kept_col->data();
  } else {
    auto& scratch = detail::scratch_buffer<T>(static_cast<std::size_t>(kk) * spatial);
    detail::im2col(in.ptr(), ci, h, w, k, stride, pad, ho, wo, scratch.data());
    col_ptr = scratch.data();
  }

  Tensor<T> out({co, ho, wo});
  detail::gemm_nn(co, static_cast<int>(spatial), kk, weight.ptr(), col_ptr,
                  out.ptr(), T(0));
  for (int c = 0; c < co; ++c) {
    const T b = (*bias.data)[static_cast<std::size_t>(c)];
    T* row = out.ptr() + c * spatial;
    for (std::size_t i = 0; i < spatial; ++i) row[i] += b;
  }

  detail::finish_op(tape, out, flow, "conv2d output", [&](int out_id) {
    auto in_data = in.data;
    auto w_data = weight.data;
    const int in_node = in.node, w_node = weight.node, b_node = bias.node;
    return [=](Tape<T>& tp) {
      const std::vector<T>& go = tp.grad_view(out_id);
      if (flow_b) {
        std::vector<T>& gb = tp.grad(b_node);
        for (int c = 0; c < co; ++c) {
          T s = 0;
          const T* row = go.data() + c * spatial;
          for (std::size_t i = 0; i < spatial; ++i) s += row[i];
          gb[static_cast<std::size_t>(c)] += s;
        }
      }
      if (flow_w) {
        const T* col = unit_kernel ? in_data->data() : kept_col->data();
        detail::gemm_nt(co, kk, static_cast<int>(spatial), go.data(), col,
                        tp.grad(w_node).data(), T(1));
      }
      if (flow_in) {
        std::vector<T>& gi = tp.grad(in_node);
        if (unit_kernel) {
          detail::gemm_tn(kk, static_cast<int>(spatial), co, w_data->data(),
                          go.data(), gi.data(), T(1));
        } else {
          auto& colg = detail::scratch_buffer<T>(static_cast<std::size_t>(kk) * spatial);
          detail::gemm_tn(kk, static_cast<int>(spatial), co, w_data->data(),
                          go.data(), colg.data(), T(0));
          detail::col2im_add(colg.data(), ci, h, w, k, stride, pad, ho, wo,
                             gi.data());
        }
      }
    };
  });
  return out;
}

enum class UpsampleMode { Nearest, Bilinear };

// -------------------------------------------------------------------------
// upsample: [C,H,W] -> [C,fH,fW]. Bilinear uses the align-corners=false
// convention: source coordinate = (out + 0.5)/f - 0.5, edges clamped.
// -------------------------------------------------------------------------
template <class T>
Tensor<T> upsample(Tape<T>& tape, const Tensor<T>& in, int factor,
                   UpsampleMode mode) {
  if (in.rank() != 3) throw std::invalid_argument("upsample: input must be rank 3 (C,H,W)");
  if (factor < 1) throw std::invalid_argument("upsample: factor must be >= 1");
  if (factor == 1) return in;

  const int c = in.dim(0), h = in.dim(1), w = in.dim(2);
  const int ho = h * factor, wo = w * factor;
  Tensor<T> out({c, ho, wo});
  const bool flow = tape.flows(in);

  if (mode == UpsampleMode::Nearest) {
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < ho; ++y) {
        const T* src = in.ptr() + (static_cast<std::size_t>(ch) * h + y / factor) * w;
        T* dst = out.ptr() + (static_cast<std::size_t>(ch) * ho + y) * wo;
        for (int x = 0; x < wo; ++x) dst[x] = src[x / factor];
      }
    detail::finish_op(tape, out, flow, "upsample output", [&](int out_id) {
      const int in_node = in.node;
      return [=](Tape<T>& tp) {
        const std::vector<T>& go = tp.grad_view(out_id);
        std::vector<T>& gi = tp.grad(in_node);
        for (int ch = 0; ch < c; ++ch)
          for (int y = 0; y < ho; ++y) {
            const T* src = go.data() + (static_cast<std::size_t>(ch) * ho + y) * wo;
            T* dst = gi.data() + (static_cast<std::size_t>(ch) * h + y / factor) * w;
            for (int x = 0; x < wo; ++x) dst[x / factor] += src[x];
          }
      };
    });
    return out;
  }

  // Bilinear: precompute the 1-D interpolation tables.
  struct Lerp { int i0, i1; T w0, w1; };
  auto make_table = [factor](int n_in, int n_out) {
    std::vector<Lerp> t(static_cast<std::size_t>(n_out));
    for (int o = 0; o < n_out; ++o) {
      const double src = (o + 0.5) / factor - 0.5;
      double f = std::floor(src);
      int i0 = static_cast<int>(f);
      double frac = src - f;
      if (i0 < 0) { i0 = 0; frac = 0.0; }
      int i1 = i0 + 1;
      if (i1 > n_in - 1) { i1 = n_in - 1; frac = i0 == n_in - 1 ? 0.0 : frac; }
      t[static_cast<std::size_t>(o)] = {i0, i1, T(1.0 - frac), T(frac)};
    }
    return t;
  };
  auto ty = std::make_shared<std::vector<Lerp>>(make_table(h, ho));
  auto tx = std::make_shared<std::vector<Lerp>>(make_table(w, wo));

  for (int ch = 0; ch < c; ++ch) {
    const T* plane = in.ptr() + static_cast<std::size_t>(ch) * h * w;
    T* dst = out.ptr() + static_cast<std::size_t>(ch) * ho * wo;
    for (int y = 0; y < ho; ++y) {
      const Lerp& ly = (*ty)[static_cast<std::size_t>(y)];
      const T* r0 = plane + static_cast<std::size_t>(ly.i0) * w;
      const T* r1 = plane + static_cast<std::size_t>(ly.i1) * w;
      for (int x = 0; x < wo; ++x) {
        const Lerp& lx = (*tx)[static_cast<std::size_t>(x)];
        *dst++ = ly.w0 * (lx.w0 * r0[lx.i0] + lx.w1 * r0[lx.i1]) +
                 ly.w1 * (lx.w0 * r1[lx.i0] + lx.w1 * r1[lx.i1]);
      }
    }
  }

  detail::finish_op(tape, out, flow, "upsample output", [&](int out_id) {
    const int in_node = in.node;
    return [=](Tape<T>& tp) {
      const std::vector<T>& go = tp.grad_view(out_id);
      std::vector<T>& gi = tp.grad(in_node);
      for (int ch = 0; ch < c; ++ch) {
        T* plane = gi.data() + static_cast<std::size_t>(ch) * h * w;
        const T* src = go.data() + static_cast<std::size_t>(ch) * ho * wo;
        for (int y = 0; y < ho; ++y) {
          const Lerp& ly = (*ty)[static_cast<std::size_t>(y)];
          T* r0 = plane + static_cast<std::size_t>(ly.i0) * w;
          T* r1 = plane + static_cast<std::size_t>(ly.i1) * w;
          for (int x = 0; x < wo; ++x) {
            const Lerp& lx = (*tx)[static_cast<std::size_t>(x)];
            const T g = *src++;
            r0[lx.i0] += ly.w0 * lx.w0 * g;
            r0[lx.i1] += ly.w0 * lx.w1 * g;
            r1[lx.i0] += ly.w1 * lx.w0 * g;
            r1[lx.i1] += ly.w1 * lx.w1 * g;
          }
        }
      }
    };
  });
  return out;
}

namespace detail {

// Shared elementwise-unary implementation. dfn(in_value, out_value) -> local
// derivative; at 0 the positive-side derivative applies (callers rely on it).
template <class T, class Fn, class Dfn>
Tensor<T> unary_op(Tape<T>& tape, const Tensor<T>& in, const char* what,
                   Fn&& fn, Dfn&& dfn) {
  Tensor<T> out(in.shape);
  const std::size_t n = in.size();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = fn((*in.data)[i]);
  const bool flow = tape.flows(in);
  finish_op(tape, out, flow, what, [&](int out_id) {
    auto in_data = in.data;
    auto out_data = out.data;
    const int in_node = in.node;
    auto d = dfn;
    return [=](Tape<T>& tp) {
      const std::vector<T>& go = tp.grad_view(out_id);
      std::vector<T>& gi = tp.grad(in_node);
      for (std::size_t i = 0; i < go.size(); ++i)
        gi[i] += go[i] * d((*in_data)[i], (*out_data)[i]);
    };
  });
  return out;
}

}  // namespace detail

template <class T>
Tensor<T> leaky_relu(Tape<T>& tape, const Tensor<T>& in, T slope) {
  return detail::unary_op(
      tape, in, "leaky_relu output",
      [slope](T x) { return x >= T(0) ? x : slope * x; },
      [slope](T x, T) { return x >= T(0) ? T(1) : slope; });
}

template <class T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& in) {
  return detail::unary_op(
      tape, in, "relu output", [](T x) { return x >= T(0) ? x : T(0); },
      [](T x, T) { return x >= T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> tanh_op(Tape<T>& tape, const Tensor<T>& in) {
  return detail::unary_op(
      tape, in, "tanh output", [](T x) { return std::tanh(x); },
      [](T, T y) { return T(1) - y * y; });
}

// -------------------------------------------------------------------------
// Inverted dropout: keeps eval mode an exact identity. The mask is drawn
// from the caller's stream, one uniform per element regardless of p.
// -------------------------------------------------------------------------
template <class T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& in, double p, bool training,
                  RngStream& rng) {
  if (p < 0.0 || p >= 1.0)
    throw std::invalid_argument("dropout: p must be in [0, 1)");
  if (!training || p == 0.0) return in;

  const std::size_t n = in.size();
  auto mask = std::make_shared<std::vector<T>>(n);
  const T keep_scale = T(1.0 / (1.0 - p));
  for (std::size_t i = 0; i < n; ++i)
    (*mask)[i] = rng.uniform() < p ? T(0) : keep_scale;

  Tensor<T> out(in.shape);
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*in.data)[i] * (*mask)[i];

  const bool flow = tape.flows(in);
  detail::finish_op(tape, out, flow, "dropout output", [&](int out_id) {
    const int in_node = in.node;
    return [=](Tape<T>& tp) {
      const std::vector<T>& go = tp.grad_view(out_id);
      std::vector<T>& gi = tp.grad(in_node);
      for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * (*mask)[i];
    };
  });
  return out;
}

// [C,H,W] -> [C], per-channel spatial mean
template <class T>
Tensor<T> global_avg_pool(Tape<T>& tape, const Tensor<T>& in) {
  if (in.rank() != 3) throw std::invalid_argument("global_avg_pool: input must be rank 3");
  const int c = in.dim(0), h = in.dim(1), w = in.dim(2);
  const std::size_t spatial = static_cast<std::size_t>(h) * w;
  Tensor<T> out({c});
  for (int ch = 0; ch < c; ++ch) {
    double s = 0.0;
    const T* p = in.ptr() + ch * spatial;
    for (std::size_t i = 0; i < spatial; ++i) s += p[i];
    (*out.data)[static_cast<std::size_t>(ch)] = static_cast<T>(s / double(spatial));
  }
  const bool flow = tape.flows(in);
  detail::finish_op(tape, out, flow, "global_avg_pool output", [&](int out_id) {
    const int in_node = in.node;
    return [=](Tape<T>& tp) {
      const std::vector<T>& go = tp.grad_view(out_id);
      std::vector<T>& gi = tp.grad(in_node);
      const T inv = T(1) / T(spatial);
      for (int ch = 0; ch < c; ++ch) {
        const T g = go[static_cast<std::size_t>(ch)] * inv;
        T* p = gi.data() + ch * spatial;
        for (std::size_t i = 0; i < spatial; ++i) p[i] += g;
      }
    };
  });
  return out;
}

// -------------------------------------------------------------------------
// pixelwise_cross_entropy: logits [K,H,W] against an H*W label map; softmax
// per pixel, mean NLL over pixels whose label != ignore_id. All pixels
// ignored -> exact 0 with zero gradient.
// -------------------------------------------------------------------------
template <class T>
Tensor<T> pixelwise_cross_entropy(Tape<T>& tape, const Tensor<T>& logits,
                                  const std::uint8_t* targets, int th, int tw,
                                  std::uint8_t ignore_id) {
  if (logits.rank() != 3)
    throw std::invalid_argument("pixelwise_cross_entropy: logits must be rank 3 (K,H,W)");
  const int k = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
  if (th != h || tw != w)
    throw std::invalid_argument("pixelwise_cross_entropy: target map " + std::to_string(th) +
                                "x" + std::to_string(tw) + " does not match logits " +
                                std::to_string(h) + "x" + std::to_string(w));
  const std::size_t spatial = static_cast<std::size_t>(h) * w;

  std::size_t live = 0;
  double nll_sum = 0.0;
  const T* lp = logits.ptr();
  for (std::size_t px = 0; px < spatial; ++px) {
    const std::uint8_t t = targets[px];
    if (t == ignore_id) continue;
    if (t >= k)
      throw std::invalid_argument("pixelwise_cross_entropy: label id " + std::to_string(int(t)) +
                                  " out of range for " + std::to_string(k) + " classes");
    double mx = lp[px];
    for (int c = 1; c < k; ++c) mx = std::max(mx, double(lp[c * spatial + px]));
    double se = 0.0;
    for (int c = 0; c < k; ++c) se += std::exp(double(lp[c * spatial + px]) - mx);
    nll_sum += std::log(se) + mx - double(lp[t * spatial + px]);
    ++live;
  }

  Tensor<T> out = Tensor<T>::scalar(live ? static_cast<T>(nll_sum / double(live)) : T(0));
  const bool flow = tape.flows(logits);
  std::vector<std::uint8_t> tgt(targets, targets + spatial);
  detail::finish_op(tape, out, flow, "pixelwise_cross_entropy output", [&](int out_id) {
    auto ldata = logits.data;
    auto tcopy = std::make_shared<std::vector<std::uint8_t>>(std::move(tgt));
    const int l_node = logits.node;
    return [=](Tape<T>& tp) {
      if (live == 0) return;
      const T g0 = tp.grad_view(out_id)[0];
      std::vector<T>& gl = tp.grad(l_node);
      const T* lv = ldata->data();
      const double inv = 1.0 / double(live);
      for (std::size_t px = 0; px < spatial; ++px) {
        const std::uint8_t t = (*tcopy)[px];
        if (t == ignore_id) continue;
        double mx = lv[px];
        for (int c = 1; c < k; ++c) mx = std::max(mx, double(lv[c * spatial + px]));
        double se = 0.0;
        for (int c = 0; c < k; ++c) se += std::exp(double(lv[c * spatial + px]) - mx);
        for (int c = 0; c < k; ++c) {
          const double soft = std::exp(double(lv[c * spatial + px]) - mx) / se;
          const double ind = (c == int(t)) ? 1.0 : 0.0;
          gl[c * spatial + px] += static_cast<T>(double(g0) * (soft - ind) * inv);
        }
      }
    };
  });
  return out;
}

// mean absolute difference; subgradient at 0 is 0
template <class T>
Tensor<T> l1_loss(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape)
    throw std::invalid_argument("l1_loss: shape mismatch between inputs");
  const std::size_t n = a.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::abs(double((*a.data)[i]) - double((*b.data)[i]));
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(s / double(n)));

  const bool flow_a = tape.flows(a), flow_b = tape.flows(b);
  detail::finish_op(tape, out, flow_a || flow_b, "l1_loss output", [&](int out_id) {
    auto adata = a.data;
    auto bdata = b.data;
    const int a_node = a.node, b_node = b.node;
    return [=](Tape<T>& tp) {
      const T g0 = tp.grad_view(out_id)[0];
      const T inv = g0 / T(n);
      for (std::size_t i = 0; i < n; ++i) {
        const T d = (*adata)[i] - (*bdata)[i];
        const T sgn = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
        if (flow_a) tp.grad(a_node)[i] += inv * sgn;
        if (flow_b) tp.grad(b_node)[i] -= inv * sgn;
      }
    };
  });
  return out;
}

template <class T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape) throw std::invalid_argument("add: shape mismatch");
  Tensor<T> out(a.shape);
  for (std::size_t i = 0; i < a.size(); ++i)
    (*out.data)[i] = (*a.data)[i] + (*b.data)[i];
  const bool flow_a = tape.flows(a), flow_b = tape.flows(b);
  detail::finish_op(tape, out, flow_a || flow_b, "add output", [&](int out_id) {
    const int a_node = a.node, b_node = b.node;
    return [=](Tape<T>& tp) {
      const std::vector<T>& go = tp.grad_view(out_id);
      if (flow_a) {
        std::vector<T>& ga = tp.grad(a_node);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (flow_b) {
        std::vector<T>& gb = tp.grad(b_node);
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
      }
    };
  });
  return out;
}

template <class T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T c) {
  return detail::unary_op(
      tape, a, "scale output", [c](T x) { return c * x; },
      [c](T, T) { return c; });
}

// Same data and tape node, new shape; gradients flow to the original node.
template <class T>
Tensor<T> reshape(const Tensor<T>& t, std::vector<int> shape) {
  if (detail::checked_numel(shape) != t.size())
    throw std::invalid_argument("reshape: element count mismatch");
  Tensor<T> out = t;
  out.shape = std::move(shape);
  return out;
}

template <class T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += double((*a.data)[i]);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(s));
  const bool flow = tape.flows(a);
  detail::finish_op(tape, out, flow, "sum output", [&](int out_id) {
    const int a_node = a.node;
    const std::size_t n = a.size();
    return [=](Tape<T>& tp) {
      const T g0 = tp.grad_view(out_id)[0];
      std::vector<T>& ga = tp.grad(a_node);
      for (std::size_t i = 0; i < n; ++i) ga[i] += g0;
    };
  });
  return out;
}

}  // namespace segada
