#include "capsworld/autodiff.hpp"

#include <cmath>
#include <limits>
#include <memory>
#include <string>

namespace capsworld::ad {

namespace {

template <typename T>
Graph<T>& same_graph(Var<T> a, Var<T> b, const char* op) {
  if (!a.valid() || !b.valid() || &a.graph() != &b.graph()) {
    throw ContractError(std::string(op) + ": operands belong to different graphs");
  }
  return a.graph();
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
                         to_string(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

struct Broadcast {
  Shape out;
  bool same = false;
  std::vector<std::size_t> ia;
  std::vector<std::size_t> ib;
};

Broadcast make_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
  bc.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] == pb[i] || pb[i] == 1) {
      bc.out[i] = pa[i];
    } else if (pa[i] == 1) {
      bc.out[i] = pb[i];
    } else {
      throw DimensionError(std::string(op) + ": cannot broadcast shapes " + to_string(a) + " and " +
                           to_string(b));
    }
  }
  std::vector<std::size_t> sa(r, 0), sb(r, 0);
  std::size_t stride_a = 1, stride_b = 1;
  for (std::size_t i = r; i-- > 0;) {
    sa[i] = pa[i] == 1 ? 0 : stride_a;
    sb[i] = pb[i] == 1 ? 0 : stride_b;
    stride_a *= pa[i];
    stride_b *= pb[i];
  }
  const std::size_t total = numel(bc.out);
  bc.ia.resize(total);
  bc.ib.resize(total);
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t lin = 0; lin < total; ++lin) {
    bc.ia[lin] = oa;
    bc.ib[lin] = ob;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < bc.out[d]) break;
      oa -= sa[d] * idx[d];
      ob -= sb[d] * idx[d];
      idx[d] = 0;
    }
  }
  return bc;
}

// f(x, y) -> out value; df(x, y, out) -> {d out/dx, d out/dy}.
template <typename T, typename F, typename DF>
Var<T> binary_op(Var<T> a, Var<T> b, const char* name, F f, DF df) {
  Graph<T>& g = same_graph(a, b, name);
  auto bc = std::make_shared<Broadcast>(make_broadcast(a.shape(), b.shape(), name));
  const auto av = a.value();
  const auto bv = b.value();
  const std::size_t total = numel(bc->out);
  std::vector<T> out(total);
  if (bc->same) {
    for (std::size_t i = 0; i < total; ++i) out[i] = f(av[i], bv[i]);
  } else {
    for (std::size_t i = 0; i < total; ++i) out[i] = f(av[bc->ia[i]], bv[bc->ib[i]]);
  }
  const bool needs = g.needs_grad(a.id()) || g.needs_grad(b.id());
  const auto ia = a.id(), ib = b.id();
  const Shape out_shape = bc->out;
  return g.record(out_shape, std::move(out), needs, [ia, ib, bc, df](Graph<T>& gr, std::span<const T> go) {
    const auto x = gr.value(ia);
    const auto y = gr.value(ib);
    const bool ga_on = gr.needs_grad(ia), gb_on = gr.needs_grad(ib);
    std::span<T> ga = ga_on ? gr.grad_buffer(ia) : std::span<T>{};
    std::span<T> gb = gb_on ? gr.grad_buffer(ib) : std::span<T>{};
    for (std::size_t i = 0; i < go.size(); ++i) {
      const std::size_t pa = bc->same ? i : bc->ia[i];
      const std::size_t pb = bc->same ? i : bc->ib[i];
      const auto [dx, dy] = df(x[pa], y[pb]);
      if (ga_on) ga[pa] += go[i] * dx;
      if (gb_on) gb[pb] += go[i] * dy;
    }
  });
}

// f(x) -> y; df(x, y) -> dy/dx.
template <typename T, typename F, typename DF>
Var<T> unary_op(Var<T> x, F f, DF df) {
  Graph<T>& g = x.graph();
  const auto xv = x.value();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const auto ix = x.id();
  const std::uint32_t iy = static_cast<std::uint32_t>(g.size());
  return g.record(x.shape(), std::move(out), g.needs_grad(ix), [ix, iy, df](Graph<T>& gr, std::span<const T> go) {
    const auto xs = gr.value(ix);
    const auto ys = gr.value(iy);
    auto gx = gr.grad_buffer(ix);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * df(xs[i], ys[i]);
  });
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) {
    return T(1) / (T(1) + std::exp(-x));
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

std::size_t checked_conv_out(std::size_t width, std::size_t kernel, std::size_t stride, const char* op) {
  if (stride == 0) throw DimensionError(std::string(op) + ": stride must be positive");
  if (kernel == 0 || kernel > width) {
    throw DimensionError(std::string(op) + ": kernel width " + std::to_string(kernel) +
                         " exceeds input width " + std::to_string(width));
  }
  return (width - kernel) / stride + 1;
}

}  // namespace

std::size_t conv_output_width(std::size_t width, std::size_t kernel, std::size_t stride) {
  return checked_conv_out(width, kernel, stride, "conv1d");
}

std::size_t conv_transpose_output_width(std::size_t width, std::size_t kernel, std::size_t stride) {
  if (stride == 0 || kernel == 0 || width == 0) {
    throw DimensionError("conv_transpose1d: width, kernel and stride must be positive");
  }
  return (width - 1) * stride + kernel;
}

// ---------------------------------------------------------------- Var

template <typename T>
const Shape& Var<T>::shape() const {
  return graph_->shape(id_);
}

template <typename T>
std::span<const T> Var<T>::value() const {
  return graph_->value(id_);
}

template <typename T>
std::span<const T> Var<T>::grad() const {
  return graph_->grad(id_);
}

template <typename T>
T Var<T>::item() const {
  const auto v = value();
  if (v.size() != 1) throw ContractError("item() on a value with " + std::to_string(v.size()) + " elements");
  return v[0];
}

// ---------------------------------------------------------------- Graph

template <typename T>
Var<T> Graph<T>::record(Shape shape, std::vector<T> value, bool needs_grad, BackwardFn backward) {
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  if (needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var<T>(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

template <typename T>
Var<T> Graph<T>::constant(Tensor<T> t) {
  Shape s = t.shape();
  std::vector<T> v(t.data().begin(), t.data().end());
  return record(std::move(s), std::move(v), false, {});
}

template <typename T>
Var<T> Graph<T>::constant(Shape shape, std::vector<T> values) {
  if (values.size() != numel(shape)) {
    throw DimensionError("constant: " + std::to_string(values.size()) + " values for shape " + to_string(shape));
  }
  return record(std::move(shape), std::move(values), false, {});
}

template <typename T>
Var<T> Graph<T>::param(Tensor<T>& t) {
  std::vector<T> v(t.data().begin(), t.data().end());
  auto var = record(t.shape(), std::move(v), t.requires_grad(), {});
  nodes_.back().leaf = &t;
  return var;
}

template <typename T>
Var<T> Graph<T>::detach(Var<T> v) {
  std::vector<T> copy(v.value().begin(), v.value().end());
  return record(v.shape(), std::move(copy), false, {});
}

template <typename T>
std::span<T> Graph<T>::grad_buffer(std::uint32_t id) {
  auto& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
  return n.grad;
}

template <typename T>
void Graph<T>::backward(Var<T> loss) {
  if (&loss.graph() != this) throw ContractError("backward: loss belongs to a different graph");
  if (nodes_[loss.id()].value.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + to_string(nodes_[loss.id()].shape));
  }
  for (auto& n : nodes_) n.grad.clear();
  if (!nodes_[loss.id()].needs_grad) return;
  grad_buffer(loss.id())[0] = T(1);
  for (std::uint32_t id = loss.id() + 1; id-- > 0;) {
    auto& n = nodes_[id];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, n.grad);
    if (n.leaf != nullptr && n.leaf->requires_grad()) {
      auto dst = n.leaf->grad();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
    }
  }
}

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return binary_op(a, b, "add", [](T x, T y) { return x + y; },
                   [](T, T) { return std::pair<T, T>{T(1), T(1)}; });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return binary_op(a, b, "sub", [](T x, T y) { return x - y; },
                   [](T, T) { return std::pair<T, T>{T(1), T(-1)}; });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return binary_op(a, b, "mul", [](T x, T y) { return x * y; },
                   [](T x, T y) { return std::pair<T, T>{y, x}; });
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
  if (a.valid() && a.graph().options().checked) {
    for (T y : b.value()) {
      if (std::abs(y) < T(1e-30)) throw NumericDomainError("div: denominator magnitude below 1e-30");
    }
  }
  return binary_op(a, b, "div", [](T x, T y) { return x / y; },
                   [](T x, T y) { return std::pair<T, T>{T(1) / y, -x / (y * y)}; });
}

template <typename T>
Var<T> max_binary(Var<T> a, Var<T> b) {
  Graph<T>& g = same_graph(a, b, "max_binary");
  return binary_op(
      a, b, "max_binary",
      [&g](T x, T y) {
        g.note_branch(x >= y ? 1 : 0);
        return x >= y ? x : y;
      },
      [](T x, T y) { return x >= y ? std::pair<T, T>{T(1), T(0)} : std::pair<T, T>{T(0), T(1)}; });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T s) {
  return unary_op(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  return unary_op(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> relu(Var<T> x) {
  Graph<T>& g = x.graph();
  return unary_op(
      x,
      [&g](T v) {
        g.note_branch(v > T(0) ? 1 : 0);
        return v > T(0) ? v : T(0);
      },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  return unary_op(x, [](T v) { return stable_sigmoid(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> tanh(Var<T> x) {
  return unary_op(x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> square(Var<T> x) {
  return unary_op(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Var<T> log(Var<T> x) {
  if (x.graph().options().checked) {
    for (T v : x.value()) {
      if (!(v > T(0))) throw NumericDomainError("log: non-positive argument");
    }
  }
  return unary_op(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

// ---------------------------------------------------------------- linear algebra

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Graph<T>& g = same_graph(a, b, "matmul");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw DimensionError("matmul: incompatible shapes " + to_string(sa) + " and " + to_string(sb));
  }
  const std::size_t m = sa[0], n = sa[1], p = sb[1];
  const auto av = a.value();
  const auto bv = b.value();
  std::vector<T> out(m * p, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data() + i * p;
    for (std::size_t k = 0; k < n; ++k) {
      const T aik = av[i * n + k];
      const T* brow = bv.data() + k * p;
      for (std::size_t j = 0; j < p; ++j) row[j] += aik * brow[j];
    }
  }
  const auto ia = a.id(), ib = b.id();
  return g.record({m, p}, std::move(out), g.needs_grad(ia) || g.needs_grad(ib),
                  [ia, ib, m, n, p](Graph<T>& gr, std::span<const T> go) {
                    const auto x = gr.value(ia);
                    const auto y = gr.value(ib);
                    if (gr.needs_grad(ia)) {
                      auto ga = gr.grad_buffer(ia);
                      // dA = G . B^T
                      for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t k = 0; k < n; ++k) {
                          T acc = T(0);
                          for (std::size_t j = 0; j < p; ++j) acc += go[i * p + j] * y[k * p + j];
                          ga[i * n + k] += acc;
                        }
                      }
                    }
                    if (gr.needs_grad(ib)) {
                      auto gb = gr.grad_buffer(ib);
                      // dB = A^T . G
                      for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t k = 0; k < n; ++k) {
                          const T aik = x[i * n + k];
                          for (std::size_t j = 0; j < p; ++j) gb[k * p + j] += aik * go[i * p + j];
                        }
                      }
                    }
                  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  Graph<T>& g = a.graph();
  const Shape& s = a.shape();
  if (s.size() != 2) throw DimensionError("transpose: expected a matrix, got " + to_string(s));
  const std::size_t r = s[0], c = s[1];
  const auto v = a.value();
  std::vector<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = v[i * c + j];
  const auto ia = a.id();
  return g.record({c, r}, std::move(out), g.needs_grad(ia), [ia, r, c](Graph<T>& gr, std::span<const T> go) {
    auto ga = gr.grad_buffer(ia);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += go[j * r + i];
  });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Graph<T>& g = a.graph();
  if (numel(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  std::vector<T> out(a.value().begin(), a.value().end());
  const auto ia = a.id();
  return g.record(std::move(shape), std::move(out), g.needs_grad(ia), [ia](Graph<T>& gr, std::span<const T> go) {
    auto ga = gr.grad_buffer(ia);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
  });
}

// ---------------------------------------------------------------- convolution

template <typename T>
Var<T> conv1d(Var<T> x, Var<T> kernels, Var<T> bias, std::size_t stride) {
  Graph<T>& g = same_graph(x, kernels, "conv1d");
  const Shape& sx = x.shape();
  const Shape& sk = kernels.shape();
  if (sx.size() != 2 || sk.size() != 3 || sk[1] != sx[0]) {
    throw DimensionError("conv1d: input " + to_string(sx) + " incompatible with kernels " + to_string(sk));
  }
  const std::size_t cin = sx[0], w = sx[1], cout = sk[0], kw = sk[2];
  const std::size_t wout = checked_conv_out(w, kw, stride, "conv1d");
  const bool has_bias = bias.valid();
  if (has_bias && (&bias.graph() != &g || bias.size() != cout)) {
    throw DimensionError("conv1d: bias shape " + to_string(bias.shape()) + " does not match " +
                         std::to_string(cout) + " output channels");
  }
  const auto xv = x.value();
  const auto kv = kernels.value();
  std::vector<T> out(cout * wout, T(0));
  for (std::size_t o = 0; o < cout; ++o) {
    T* yrow = out.data() + o * wout;
    if (has_bias) std::fill(yrow, yrow + wout, bias.value()[o]);
    for (std::size_t c = 0; c < cin; ++c) {
      const T* xrow = xv.data() + c * w;
      const T* krow = kv.data() + (o * cin + c) * kw;
      for (std::size_t j = 0; j < wout; ++j) {
        const T* xs = xrow + j * stride;
        T acc = T(0);
        for (std::size_t t = 0; t < kw; ++t) acc += krow[t] * xs[t];
        yrow[j] += acc;
      }
    }
  }
  const auto ix = x.id(), ik = kernels.id();
  const std::uint32_t ibias = has_bias ? bias.id() : 0;
  const bool needs = g.needs_grad(ix) || g.needs_grad(ik) || (has_bias && g.needs_grad(ibias));
  return g.record({cout, wout}, std::move(out), needs,
                  [=](Graph<T>& gr, std::span<const T> go) {
                    const auto xs = gr.value(ix);
                    const auto ks = gr.value(ik);
                    if (gr.needs_grad(ix)) {
                      auto gx = gr.grad_buffer(ix);
                      for (std::size_t o = 0; o < cout; ++o)
                        for (std::size_t c = 0; c < cin; ++c) {
                          const T* krow = ks.data() + (o * cin + c) * kw;
                          T* gxrow = gx.data() + c * w;
                          for (std::size_t j = 0; j < wout; ++j) {
                            const T gv = go[o * wout + j];
                            T* dst = gxrow + j * stride;
                            for (std::size_t t = 0; t < kw; ++t) dst[t] += krow[t] * gv;
                          }
                        }
                    }
                    if (gr.needs_grad(ik)) {
                      auto gk = gr.grad_buffer(ik);
                      for (std::size_t o = 0; o < cout; ++o)
                        for (std::size_t c = 0; c < cin; ++c) {
                          const T* xrow = xs.data() + c * w;
                          T* gkrow = gk.data() + (o * cin + c) * kw;
                          for (std::size_t j = 0; j < wout; ++j) {
                            const T gv = go[o * wout + j];
                            const T* src = xrow + j * stride;
                            for (std::size_t t = 0; t < kw; ++t) gkrow[t] += src[t] * gv;
                          }
                        }
                    }
                    if (has_bias && gr.needs_grad(ibias)) {
                      auto gb = gr.grad_buffer(ibias);
                      for (std::size_t o = 0; o < cout; ++o)
                        for (std::size_t j = 0; j < wout; ++j) gb[o] += go[o * wout + j];
                    }
                  });
}

template <typename T>
Var<T> conv_transpose1d(Var<T> x, Var<T> kernels, Var<T> bias, std::size_t stride) {
  Graph<T>& g = same_graph(x, kernels, "conv_transpose1d");
  const Shape& sx = x.shape();
  const Shape& sk = kernels.shape();
  if (sx.size() != 2 || sk.size() != 3 || sk[0] != sx[0]) {
    throw DimensionError("conv_transpose1d: input " + to_string(sx) + " incompatible with kernels " +
                         to_string(sk));
  }
  const std::size_t cin = sx[0], w = sx[1], cout = sk[1], kw = sk[2];
  const std::size_t wup = conv_transpose_output_width(w, kw, stride);
  const bool has_bias = bias.valid();
  if (has_bias && (&bias.graph() != &g || bias.size() != cout)) {
    throw DimensionError("conv_transpose1d: bias shape " + to_string(bias.shape()) + " does not match " +
                         std::to_string(cout) + " output channels");
  }
  const auto xv = x.value();
  const auto kv = kernels.value();
  std::vector<T> out(cout * wup, T(0));
  for (std::size_t c = 0; c < cin; ++c) {
    const T* xrow = xv.data() + c * w;
    for (std::size_t o = 0; o < cout; ++o) {
      const T* krow = kv.data() + (c * cout + o) * kw;
      T* yrow = out.data() + o * wup;
      for (std::size_t j = 0; j < w; ++j) {
        const T xval = xrow[j];
        T* dst = yrow + j * stride;
        for (std::size_t t = 0; t < kw; ++t) dst[t] += xval * krow[t];
      }
    }
  }
  if (has_bias) {
    const auto bv = bias.value();
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t j = 0; j < wup; ++j) out[o * wup + j] += bv[o];
  }
  const auto ix = x.id(), ik = kernels.id();
  const std::uint32_t ibias = has_bias ? bias.id() : 0;
  const bool needs = g.needs_grad(ix) || g.needs_grad(ik) || (has_bias && g.needs_grad(ibias));
  return g.record({cout, wup}, std::move(out), needs,
                  [=](Graph<T>& gr, std::span<const T> go) {
                    const auto xs = gr.value(ix);
                    const auto ks = gr.value(ik);
                    if (gr.needs_grad(ix)) {
                      auto gx = gr.grad_buffer(ix);
                      for (std::size_t c = 0; c < cin; ++c)
                        for (std::size_t o = 0; o < cout; ++o) {
                          const T* krow = ks.data() + (c * cout + o) * kw;
                          const T* grow = go.data() + o * wup;
                          for (std::size_t j = 0; j < w; ++j) {
                            const T* src = grow + j * stride;
                            T acc = T(0);
                            for (std::size_t t = 0; t < kw; ++t) acc += krow[t] * src[t];
                            gx[c * w + j] += acc;
                          }
                        }
                    }
                    if (gr.needs_grad(ik)) {
                      auto gk = gr.grad_buffer(ik);
                      for (std::size_t c = 0; c < cin; ++c)
                        for (std::size_t o = 0; o < cout; ++o) {
                          T* gkrow = gk.data() + (c * cout + o) * kw;
                          const T* grow = go.data() + o * wup;
                          for (std::size_t j = 0; j < w; ++j) {
                            const T xval = xs[c * w + j];
                            const T* src = grow + j * stride;
                            for (std::size_t t = 0; t < kw; ++t) gkrow[t] += xval * src[t];
                          }
                        }
                    }
                    if (has_bias && gr.needs_grad(ibias)) {
                      auto gb = gr.grad_buffer(ibias);
                      for (std::size_t o = 0; o < cout; ++o)
                        for (std::size_t j = 0; j < wup; ++j) gb[o] += go[o * wup + j];
                    }
                  });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Var<T> reduce(Var<T> x, ReduceKind kind, std::size_t axis, bool keepdim) {
  Graph<T>& g = x.graph();
  const AxisSplit s = split_axis(x.shape(), axis, "reduce");
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[axis] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  const auto xv = x.value();
  std::vector<T> out(s.outer * s.inner);
  // Index of the winner for max; unused otherwise.
  auto argmax = std::make_shared<std::vector<std::size_t>>();
  if (kind == ReduceKind::max) argmax->resize(out.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const T* base = xv.data() + o * s.n * s.inner + i;
      T r = T(0);
      switch (kind) {
        case ReduceKind::sum:
        case ReduceKind::mean:
          for (std::size_t j = 0; j < s.n; ++j) r += base[j * s.inner];
          if (kind == ReduceKind::mean) r /= static_cast<T>(s.n);
          break;
        case ReduceKind::max: {
          std::size_t best = 0;
          for (std::size_t j = 1; j < s.n; ++j)
            if (base[j * s.inner] > base[best * s.inner]) best = j;
          (*argmax)[o * s.inner + i] = best;
          g.note_branch(best);
          r = base[best * s.inner];
          break;
        }
        case ReduceKind::logsumexp: {
          T m = base[0];
          for (std::size_t j = 1; j < s.n; ++j) m = std::max(m, base[j * s.inner]);
          T acc = T(0);
          for (std::size_t j = 0; j < s.n; ++j) acc += std::exp(base[j * s.inner] - m);
          r = m + std::log(acc);
          break;
        }
      }
      out[o * s.inner + i] = r;
    }
  }
  const auto ix = x.id();
  const std::uint32_t iy = static_cast<std::uint32_t>(g.size());
  return g.record(std::move(out_shape), std::move(out), g.needs_grad(ix),
                  [ix, iy, s, kind, argmax](Graph<T>& gr, std::span<const T> go) {
                    const auto xs = gr.value(ix);
                    const auto ys = gr.value(iy);
                    auto gx = gr.grad_buffer(ix);
                    for (std::size_t o = 0; o < s.outer; ++o) {
                      for (std::size_t i = 0; i < s.inner; ++i) {
                        const std::size_t oi = o * s.inner + i;
                        const std::size_t base = o * s.n * s.inner + i;
                        const T gv = go[oi];
                        switch (kind) {
                          case ReduceKind::sum:
                            for (std::size_t j = 0; j < s.n; ++j) gx[base + j * s.inner] += gv;
                            break;
                          case ReduceKind::mean:
                            for (std::size_t j = 0; j < s.n; ++j) gx[base + j * s.inner] += gv / static_cast<T>(s.n);
                            break;
                          case ReduceKind::max:
                            gx[base + (*argmax)[oi] * s.inner] += gv;
                            break;
                          case ReduceKind::logsumexp:
                            for (std::size_t j = 0; j < s.n; ++j) {
                              const std::size_t p = base + j * s.inner;
                              gx[p] += gv * std::exp(xs[p] - ys[oi]);
                            }
                            break;
                        }
                      }
                    }
                  });
}

template <typename T>
Var<T> sum_all(Var<T> x) {
  return reduce(reshape(x, Shape{x.size()}), ReduceKind::sum, 0);
}

template <typename T>
Var<T> mean_all(Var<T> x) {
  return reduce(reshape(x, Shape{x.size()}), ReduceKind::mean, 0);
}

template <typename T>
Var<T> softmax(Var<T> x, std::size_t axis) {
  Graph<T>& g = x.graph();
  const AxisSplit s = split_axis(x.shape(), axis, "softmax");
  const auto xv = x.value();
  std::vector<T> out(xv.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.n * s.inner + i;
      T m = xv[base];
      for (std::size_t j = 1; j < s.n; ++j) m = std::max(m, xv[base + j * s.inner]);
      T total = T(0);
      for (std::size_t j = 0; j < s.n; ++j) {
        const T e = std::exp(xv[base + j * s.inner] - m);
        out[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.n; ++j) out[base + j * s.inner] /= total;
    }
  }
  const auto ix = x.id();
  const std::uint32_t iy = static_cast<std::uint32_t>(g.size());
  return g.record(x.shape(), std::move(out), g.needs_grad(ix), [ix, iy, s](Graph<T>& gr, std::span<const T> go) {
    const auto ys = gr.value(iy);
    auto gx = gr.grad_buffer(ix);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.n * s.inner + i;
        T dot = T(0);
        for (std::size_t j = 0; j < s.n; ++j) dot += go[base + j * s.inner] * ys[base + j * s.inner];
        for (std::size_t j = 0; j < s.n; ++j) {
          const std::size_t p = base + j * s.inner;
          gx[p] += ys[p] * (go[p] - dot);
        }
      }
    }
  });
}

// ---------------------------------------------------------------- concat / slice

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  Graph<T>& g = parts.front().graph();
  const Shape& first = parts.front().shape();
  Shape out_shape = first;
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + to_string(first));
  out_shape[axis] = 0;
  bool needs = false;
  for (const auto& p : parts) {
    if (&p.graph() != &g) throw ContractError("concat: operands belong to different graphs");
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) throw DimensionError("concat: shape " + to_string(s) + " incompatible with " + to_string(first));
    out_shape[axis] += s[axis];
    needs = needs || g.needs_grad(p.id());
  }
  const AxisSplit so = split_axis(out_shape, axis, "concat");
  std::vector<T> out(numel(out_shape));
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t n = p.shape()[axis];
    const auto v = p.value();
    for (std::size_t o = 0; o < so.outer; ++o) {
      std::copy_n(v.data() + o * n * so.inner, n * so.inner, out.data() + (o * so.n + offset) * so.inner);
    }
    ids.push_back(p.id());
    widths.push_back(n);
    offset += n;
  }
  return g.record(std::move(out_shape), std::move(out), needs,
                  [ids, widths, so](Graph<T>& gr, std::span<const T> go) {
                    std::size_t off = 0;
                    for (std::size_t k = 0; k < ids.size(); ++k) {
                      const std::size_t n = widths[k];
                      if (gr.needs_grad(ids[k])) {
                        auto gp = gr.grad_buffer(ids[k]);
                        for (std::size_t o = 0; o < so.outer; ++o) {
                          const T* src = go.data() + (o * so.n + off) * so.inner;
                          T* dst = gp.data() + o * n * so.inner;
                          for (std::size_t i = 0; i < n * so.inner; ++i) dst[i] += src[i];
                        }
                      }
                      off += n;
                    }
                  });
}

template <typename T>
Var<T> slice(Var<T> x, std::size_t axis, std::size_t begin, std::size_t end) {
  Graph<T>& g = x.graph();
  const AxisSplit s = split_axis(x.shape(), axis, "slice");
  if (begin >= end || end > s.n) {
    throw DimensionError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of bounds for axis " + std::to_string(axis) + " of " + to_string(x.shape()));
  }
  const std::size_t n = end - begin;
  Shape out_shape = x.shape();
  out_shape[axis] = n;
  const auto v = x.value();
  std::vector<T> out(s.outer * n * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(v.data() + (o * s.n + begin) * s.inner, n * s.inner, out.data() + o * n * s.inner);
  }
  const auto ix = x.id();
  return g.record(std::move(out_shape), std::move(out), g.needs_grad(ix),
                  [ix, s, begin, n](Graph<T>& gr, std::span<const T> go) {
                    auto gx = gr.grad_buffer(ix);
                    for (std::size_t o = 0; o < s.outer; ++o) {
                      const T* src = go.data() + o * n * s.inner;
                      T* dst = gx.data() + (o * s.n + begin) * s.inner;
                      for (std::size_t i = 0; i < n * s.inner; ++i) dst[i] += src[i];
                    }
                  });
}

// ---------------------------------------------------------------- instantiation

#define CAPSWORLD_INSTANTIATE(T)                                                        \
  template class Var<T>;                                                                \
  template class Graph<T>;                                                              \
  template Var<T> add(Var<T>, Var<T>);                                                  \
  template Var<T> sub(Var<T>, Var<T>);                                                  \
  template Var<T> mul(Var<T>, Var<T>);                                                  \
  template Var<T> div(Var<T>, Var<T>);                                                  \
  template Var<T> max_binary(Var<T>, Var<T>);                                           \
  template Var<T> add_scalar(Var<T>, T);                                                \
  template Var<T> scale(Var<T>, T);                                                     \
  template Var<T> relu(Var<T>);                                                         \
  template Var<T> sigmoid(Var<T>);                                                      \
  template Var<T> tanh(Var<T>);                                                         \
  template Var<T> square(Var<T>);                                                       \
  template Var<T> log(Var<T>);                                                          \
  template Var<T> matmul(Var<T>, Var<T>);                                               \
  template Var<T> transpose(Var<T>);                                                    \
  template Var<T> reshape(Var<T>, Shape);                                               \
  template Var<T> conv1d(Var<T>, Var<T>, Var<T>, std::size_t);                          \
  template Var<T> conv_transpose1d(Var<T>, Var<T>, Var<T>, std::size_t);                \
  template Var<T> reduce(Var<T>, ReduceKind, std::size_t, bool);                        \
  template Var<T> sum_all(Var<T>);                                                      \
  template Var<T> mean_all(Var<T>);                                                     \
  template Var<T> softmax(Var<T>, std::size_t);                                         \
  template Var<T> concat(const std::vector<Var<T>>&, std::size_t);                      \
  template Var<T> slice(Var<T>, std::size_t, std::size_t, std::size_t);

CAPSWORLD_INSTANTIATE(float)
CAPSWORLD_INSTANTIATE(double)

#undef CAPSWORLD_INSTANTIATE

}  // namespace capsworld::ad
