#pragma once

// Reverse-mode differentiation over Array<T>. Every op records its forward
// value plus a hand-derived backward closure; Graph::backward replays the
// closures in reverse creation order.

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "saferedir/numerics/array.hpp"

namespace saferedir {

/// A learnable tensor with its accumulated gradient.
template <class T>
struct Parameter {
  std::string name;
  Array<T> value;
  Array<T> grad;

  Parameter() = default;
  Parameter(std::string n, Array<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() {
    if (grad.shape() != value.shape()) grad = Array<T>(value.shape());
    grad.fill(T{0});
  }
};

/// Handle to a node of a Graph.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <class T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int)>;

  /// With record == false no backward closures are kept (inference).
  explicit Graph(bool record = true) : record_(record) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }

  Var constant(Array<T> v) {
    Node n;
    n.value = std::move(v);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  /// Leaf bound to a parameter; gradients are added to p.grad on backward.
  Var param(Parameter<T>& p) {
    Node n;
    n.external = &p.value;
    n.param = record_ ? &p : nullptr;
    n.requires_grad = record_;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Array<T>& value(Var v) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
    return n.external ? *n.external : n.value;
  }
  const Shape& shape(Var v) const { return value(v).shape(); }
  bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }

  /// Gradient buffer of a node, zero-allocated on first access.
  Array<T>& grad(Var v) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!n.has_grad) {
      n.grad = Array<T>(value(v).shape());
      n.has_grad = true;
    }
    return n.grad;
  }
  bool has_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].has_grad; }

  /// Adds a node computed from `parents`. `fn` receives the node id and must
  /// accumulate into the grads of those parents that require them.
  Var make(Array<T> value, std::initializer_list<Var> parents, BackwardFn fn) {
    return make(std::move(value), std::vector<Var>(parents), std::move(fn));
  }
  Var make(Array<T> value, const std::vector<Var>& parents, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    if (record_)
      for (Var p : parents) n.requires_grad = n.requires_grad || requires_grad(p);
    if (n.requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every parameter.
  void backward(Var loss) {
    if (value(loss).size() != 1) throw DimensionError("backward expects a scalar loss");
    if (!requires_grad(loss)) return;
    grad(loss)[0] = T{1};
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.requires_grad || !n.has_grad) continue;
      if (n.param) {
        Array<T>& pg = n.param->grad;
        if (pg.shape() != n.param->value.shape()) pg = Array<T>(n.param->value.shape());
        for (std::size_t j = 0; j < pg.size(); ++j) pg[j] += n.grad[j];
      } else if (n.backward) {
        n.backward(*this, i);
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Array<T> value;
    const Array<T>* external = nullptr;
    Array<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    BackwardFn backward;
  };

  bool record_;
  std::vector<Node> nodes_;
};

namespace ad {

namespace detail {

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": " + shape_str(a) + " vs " + shape_str(b));
}

inline std::size_t last(const Shape& s) { return s.empty() ? 1 : s.back(); }

}  // namespace detail

template <class T>
Var add(Graph<T>& g, Var a, Var b) {
  detail::require_same(g.shape(a), g.shape(b), "add");
  const Array<T>& av = g.value(a);
  const Array<T>& bv = g.value(b);
  Array<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return g.make(std::move(out), {a, b}, [a, b](Graph<T>& g, int self) {
    const Array<T>& go = g.grad(Var{self});
    for (Var p : {a, b})
      if (g.requires_grad(p)) {
        Array<T>& gp = g.grad(p);
        for (std::size_t i = 0; i < go.size(); ++i) gp[i] += go[i];
      }
  });
}

template <class T>
Var sub(Graph<T>& g, Var a, Var b) {
  detail::require_same(g.shape(a), g.shape(b), "sub");
  const Array<T>& av = g.value(a);
  const Array<T>& bv = g.value(b);
  Array<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return g.make(std::move(out), {a, b}, [a, b](Graph<T>& g, int self) {
    const Array<T>& go = g.grad(Var{self});
    if (g.requires_grad(a)) {
      Array<T>& ga = g.grad(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (g.requires_grad(b)) {
      Array<T>& gb = g.grad(b);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
    }
  });
}

template <class T>
Var mul(Graph<T>& g, Var a, Var b) {
  detail::require_same(g.shape(a), g.shape(b), "mul");
  const Array<T>& av = g.value(a);
  const Array<T>& bv = g.value(b);
  Array<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return g.make(std::move(out), {a, b}, [a, b](Graph<T>& g, int self) {
    const Array<T>& go = g.grad(Var{self});
    if (g.requires_grad(a)) {
      const Array<T>& bv = g.value(b);
      Array<T>& ga = g.grad(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
    }
    if (g.requires_grad(b)) {
      const Array<T>& av = g.value(a);
      Array<T>& gb = g.grad(b);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
    }
  });
}

template <class T>
Var scale(Graph<T>& g, Var a, T s) {
  const Array<T>& av = g.value(a);
  Array<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  return g.make(std::move(out), {a}, [a, s](Graph<T>& g, int self) {
    const Array<T>& go = g.grad(Var{self});
    Array<T>& ga = g.grad(a);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * s;
  });
}

template <class T>
Var add_scalar(Graph<T>& g, Var a, T s) {
  const Array<T>& av = g.value(a);
  Array<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + s;
  return g.make(std::move(out), {a}, [a](Graph<T>& g, int self) {
    const Array<T>& go = g.grad(Var{self});
    Array<T>& ga = g.grad(a);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
  });
}

template <class T>
Var reshape(Graph<T>& g, Var a, Shape shape) {
  Array<T> out = g.value(a).reshaped(std::move(shape));
  return g.make(std::move(out), {a}, [a](Graph<T>& g, int self) {
    const Array<T>& go = g.grad(Var{self});
    Array<T>& ga = g.grad(a);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
  });
}

template <class T>
Var silu(Graph<T>& g, Var a) {
  Array<T> out = saferedir::silu(g.value(a));
  return g.make(std::move(out), {a}, [a](Graph<T>& g, int self) {
    const Array<T>& x = g.value(a);
    const Array<T>& go = g.grad(Var{self});
    Array<T>& ga = g.grad(a);
    for (std::size_t i = 0; i < go.size(); ++i) {
      const T s = saferedir::sigmoid(x[i]);
      ga[i] += go[i] * (s * (T{1} + x[i] * (T{1} - s)));
    }
  });
}

template <class T>
Var sigmoid(Graph<T>& g, Var a) {
  Array<T> out = saferedir::sigmoid(g.value(a));
  return g.make(std::move(out), {a}, [a](Graph<T>& g, int self) {
    const Array<T>& y = g.value(Var{self});
    const Array<T>& go = g.grad(Var{self});
    Array<T>& ga = g.grad(a);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * y[i] * (T{1} - y[i]);
  });
}

/// x[..., in] · W[in, out] (+ b[out]). Pass an invalid Var to skip the bias.
template <class T>
Var linear(Graph<T>& g, Var x, Var w, Var b = Var{}) {
  const Array<T>& xv = g.value(x);
  const Array<T>& wv = g.value(w);
  if (wv.rank() != 2 || detail::last(xv.shape()) != wv.dim(0))
    throw DimensionError("linear: input " + shape_str(xv.shape()) + " weight " + shape_str(wv.shape()));
  const std::size_t in = wv.dim(0), outd = wv.dim(1), rows = xv.size() / in;
  if (b.valid() && g.value(b).size() != outd) throw DimensionError("linear: bias length");
  Shape os = xv.shape();
  os.back() = outd;
  Array<T> out(os);
  MatMap<T> om(out.data(), Eigen::Index(rows), Eigen::Index(outd));
  om.noalias() = ConstMatMap<T>(xv.data(), Eigen::Index(rows), Eigen::Index(in)) *
                 ConstMatMap<T>(wv.data(), Eigen::Index(in), Eigen::Index(outd));
  if (b.valid()) {
    const Array<T>& bv = g.value(b);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < outd; ++c) out[r * outd + c] += bv[c];
  }
  std::vector<Var> parents{x, w};
  if (b.valid()) parents.push_back(b);
  return g.make(std::move(out), parents, [x, w, b, rows, in, outd](Graph<T>& g, int self) {
    const Array<T>& go = g.grad(Var{self});
    ConstMatMap<T> gm(go.data(), Eigen::Index(rows), Eigen::Index(outd));
    if (g.requires_grad(x)) {
      MatMap<T>(g.grad(x).data(), Eigen::Index(rows), Eigen::Index(in)).noalias() +=
          gm * ConstMatMap<T>(g.value(w).data(), Eigen::Index(in), Eigen::Index(outd)).transpose();
    }
    if (g.requires_grad(w)) {
      MatMap<T>(g.grad(w).data(), Eigen::Index(in), Eigen::Index(outd)).noalias() +=
          ConstMatMap<T>(g.value(x).data(), Eigen::Index(rows), Eigen::Index(in)).transpose() * gm;
    }
    if (b.valid() && g.requires_grad(b)) {
      Array<T>& gb = g.grad(b);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < outd; ++c) gb[c] += go[r * outd + c];
    }
  });
}

/// Batched product: a[B×M×K] · b[B×K×N], or b[B×N×K] transposed when trans_b.
template <class T>
Var bmm(Graph<T>& g, Var a, Var b, bool trans_b = false) {
  const Array<T>& av = g.value(a);
  const Array<T>& bv = g.value(b);
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0))
    throw DimensionError("bmm: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  const std::size_t B = av.dim(0), M = av.dim(1), K = av.dim(2);
  const std::size_t N = trans_b ? bv.dim(1) : bv.dim(2);
  if ((trans_b ? bv.dim(2) : bv.dim(1)) != K) throw DimensionError("bmm inner extent");
  const auto Mi = Eigen::Index(M), Ki = Eigen::Index(K), Ni = Eigen::Index(N);
  Array<T> out({B, M, N});
  for (std::size_t i = 0; i < B; ++i) {
    ConstMatMap<T> am(av.data() + i * M * K, Mi, Ki);
    MatMap<T> om(out.data() + i * M * N, Mi, Ni);
    if (trans_b)
      om.noalias() = am * ConstMatMap<T>(bv.data() + i * N * K, Ni, Ki).transpose();
    else
      om.noalias() = am * ConstMatMap<T>(bv.data() + i * K * N, Ki, Ni);
  }
  return g.make(std::move(out), {a, b}, [a, b, trans_b, B, M, K, N](Graph<T>& g, int self) {
    const Array<T>& go = g.grad(Var{self});
    const auto Mi = Eigen::Index(M), Ki = Eigen::Index(K), Ni = Eigen::Index(N);
    const Array<T>& av = g.value(a);
    const Array<T>& bv = g.value(b);
    for (std::size_t i = 0; i < B; ++i) {
      ConstMatMap<T> gm(go.data() + i * M * N, Mi, Ni);
      if (g.requires_grad(a)) {
        MatMap<T> ga(g.grad(a).data() + i * M * K, Mi, Ki);
        if (trans_b)
          ga.noalias() += gm * ConstMatMap<T>(bv.data() + i * N * K, Ni, Ki);
        else
          ga.noalias() += gm * ConstMatMap<T>(bv.data() + i * K * N, Ki, Ni).transpose();
      }
      if (g.requires_grad(b)) {
        ConstMatMap<T> am(av.data() + i * M * K, Mi, Ki);
        if (trans_b)
          MatMap<T>(g.grad(b).data() + i * N * K, Ni, Ki).noalias() += gm.transpose() * am;
        else
          MatMap<T>(g.grad(b).data() + i * K * N, Ki, Ni).noalias() += am.transpose() * gm;
      }
    }
  });
}

/// Softmax over the last axis.
template <class T>
Var softmax_last(Graph<T>& g, Var a) {
  const Array<T>& av = g.value(a);
  Array<T> out = saferedir::softmax(av, av.rank() - 1);
  return g.make(std::move(out), {a}, [a](Graph<T>& g, int self) {
    const Array<T>& y = g.value(Var{self});
    const Array<T>& go = g.grad(Var{self});
    Array<T>& ga = g.grad(a);
    const std::size_t n = y.shape().back(), rows = y.size() / n;
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += go[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += y[r * n + j] * (go[r * n + j] - dot);
    }
  });
}

namespace detail {

// Shared backward of layer/group normalization over a slice of n elements:
// dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)).
template <class T>
void norm_slice_backward(const T* dxhat, const T* xhat, T inv, std::size_t n, std::size_t stride, T* dx) {
  T m1 = 0, m2 = 0;
  for (std::size_t j = 0; j < n; ++j) {
    m1 += dxhat[j];
    m2 += dxhat[j] * xhat[j * stride];
  }
  m1 /= T(n);
  m2 /= T(n);
  for (std::size_t j = 0; j < n; ++j) dx[j * stride] += inv * (dxhat[j] - m1 - xhat[j * stride] * m2);
}

}  // namespace detail

/// Layer normalization over the last axis with learnable gain and bias.
template <class T>
Var layer_norm_last(Graph<T>& g, Var x, Var gain, Var bias, T eps = T(1e-5)) {
  const Array<T>& xv = g.value(x);
  const std::size_t n = xv.shape().back(), rows = xv.size() / n;
  if (g.value(gain).size() != n || g.value(bias).size() != n) throw DimensionError("layer_norm: gain/bias length");
  auto xhat = std::make_shared<Array<T>>(xv.shape());
  auto inv = std::make_shared<std::vector<T>>(rows);
  Array<T> out(xv.shape());
  const Array<T>& gv = g.value(gain);
  const Array<T>& bv = g.value(bias);
  for (std::size_t r = 0; r < rows; ++r) {
    T mean = 0, var = 0;
    for (std::size_t j = 0; j < n; ++j) mean += xv[r * n + j];
    mean /= T(n);
    for (std::size_t j = 0; j < n; ++j) var += (xv[r * n + j] - mean) * (xv[r * n + j] - mean);
    var /= T(n);
    (*inv)[r] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (xv[r * n + j] - mean) * (*inv)[r];
      (*xhat)[r * n + j] = h;
      out[r * n + j] = h * gv[j] + bv[j];
    }
  }
  return g.make(std::move(out), {x, gain, bias}, [x, gain, bias, xhat, inv, n, rows](Graph<T>& g, int self) {
    const Array<T>& go = g.grad(Var{self});
    const Array<T>& gv = g.value(gain);
    if (g.requires_grad(gain) || g.requires_grad(bias)) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) {
          if (g.requires_grad(gain)) g.grad(gain)[j] += go[r * n + j] * (*xhat)[r * n + j];
          if (g.requires_grad(bias)) g.grad(bias)[j] += go[r * n + j];
        }
    }
    if (g.requires_grad(x)) {
      Array<T>& gx = g.grad(x);
      std::vector<T> dxhat(n);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < n; ++j) dxhat[j] = go[r * n + j] * gv[j];
        detail::norm_slice_backward(dxhat.data(), xhat->data() + r * n, (*inv)[r], n, 1, gx.data() + r * n);
      }
    }
  });
}

/// 2-D convolution, NCHW input, weight [Cout×Cin×k×k], bias [Cout].
/// Lowered to GEMM through an im2col buffer kept for the backward pass.
template <class T>
Var conv2d(Graph<T>& g, Var x, Var w, Var b, std::size_t stride, std::size_t pad) {
  const Array<T>& xv = g.value(x);
  const Array<T>& wv = g.value(w);
  if (xv.rank() != 4 || wv.rank() != 4 || wv.dim(1) != xv.dim(1) || wv.dim(2) != wv.dim(3))
    throw DimensionError("conv2d: input " + shape_str(xv.shape()) + " weight " + shape_str(wv.shape()));
  const std::size_t N = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::size_t Co = wv.dim(0), k = wv.dim(2);
  if (H + 2 * pad < k || W + 2 * pad < k) throw DimensionError("conv2d: kernel larger than padded input");
  const std::size_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  const std::size_t P = Ho * Wo, KK = Ci * k * k;
  auto cols = std::make_shared<Array<T>>(Shape{N * P, KK});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        T* row = cols->data() + ((n * P) + oy * Wo + ox) * KK;
        for (std::size_t c = 0; c < Ci; ++c)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long iy = long(oy * stride + ky) - long(pad);
              const long ix = long(ox * stride + kx) - long(pad);
              T v = 0;
              if (iy >= 0 && ix >= 0 && iy < long(H) && ix < long(W))
                v = xv[((n * Ci + c) * H + std::size_t(iy)) * W + std::size_t(ix)];
              row[(c * k + ky) * k + kx] = v;
            }
      }
  RowMatrix<T> res = ConstMatMap<T>(cols->data(), Eigen::Index(N * P), Eigen::Index(KK)) *
                     ConstMatMap<T>(wv.data(), Eigen::Index(Co), Eigen::Index(KK)).transpose();
  Array<T> out({N, Co, Ho, Wo});
  const Array<T>& bv = g.value(b);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < Co; ++c)
      for (std::size_t p = 0; p < P; ++p) out[(n * Co + c) * P + p] = res(Eigen::Index(n * P + p), Eigen::Index(c)) + bv[c];
  return g.make(std::move(out), {x, w, b},
                [x, w, b, cols, N, Ci, H, W, Co, k, stride, pad, Ho, Wo, P, KK](Graph<T>& g, int self) {
                  const Array<T>& go = g.grad(Var{self});
                  RowMatrix<T> gm(Eigen::Index(N * P), Eigen::Index(Co));
                  for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t c = 0; c < Co; ++c)
                      for (std::size_t p = 0; p < P; ++p)
                        gm(Eigen::Index(n * P + p), Eigen::Index(c)) = go[(n * Co + c) * P + p];
                  if (g.requires_grad(w))
                    MatMap<T>(g.grad(w).data(), Eigen::Index(Co), Eigen::Index(KK)).noalias() +=
                        gm.transpose() * ConstMatMap<T>(cols->data(), Eigen::Index(N * P), Eigen::Index(KK));
                  if (g.requires_grad(b)) {
                    Array<T>& gb = g.grad(b);
                    for (std::size_t c = 0; c < Co; ++c) gb[c] += gm.col(Eigen::Index(c)).sum();
                  }
                  if (g.requires_grad(x)) {
                    RowMatrix<T> dcols =
                        gm * ConstMatMap<T>(g.value(w).data(), Eigen::Index(Co), Eigen::Index(KK));
                    Array<T>& gx = g.grad(x);
                    for (std::size_t n = 0; n < N; ++n)
                      for (std::size_t oy = 0; oy < Ho; ++oy)
                        for (std::size_t ox = 0; ox < Wo; ++ox) {
                          const T* row = dcols.data() + ((n * P) + oy * Wo + ox) * KK;
                          for (std::size_t c = 0; c < Ci; ++c)
                            for (std::size_t ky = 0; ky < k; ++ky)
                              for (std::size_t kx = 0; kx < k; ++kx) {
                                const long iy = long(oy * stride + ky) - long(pad);
                                const long ix = long(ox * stride + kx) - long(pad);
                                if (iy >= 0 && ix >= 0 && iy < long(H) && ix < long(W))
                                  gx[((n * Ci + c) * H + std::size_t(iy)) * W + std::size_t(ix)] +=
                                      row[(c * k + ky) * k + kx];
                              }
                        }
                  }
                });
}

/// Group normalization over (C/groups × H × W) slices of an NCHW tensor.
template <class T>
Var group_norm(Graph<T>& g, Var x, Var gain, Var bias, std::size_t groups, T eps = T(1e-5)) {
  const Array<T>& xv = g.value(x);
  if (xv.rank() != 4 || xv.dim(1) % groups != 0) throw DimensionError("group_norm: " + shape_str(xv.shape()));
  const std::size_t N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  const std::size_t cpg = C / groups, n = cpg * HW;
  if (g.value(gain).size() != C || g.value(bias).size() != C) throw DimensionError("group_norm: gain/bias length");
  auto xhat = std::make_shared<Array<T>>(xv.shape());
  auto inv = std::make_shared<std::vector<T>>(N * groups);
  Array<T> out(xv.shape());
  const Array<T>& gv = g.value(gain);
  const Array<T>& bv = g.value(bias);
  for (std::size_t s = 0; s < N * groups; ++s) {
    const std::size_t off = s * n;
    T mean = 0, var = 0;
    for (std::size_t j = 0; j < n; ++j) mean += xv[off + j];
    mean /= T(n);
    for (std::size_t j = 0; j < n; ++j) var += (xv[off + j] - mean) * (xv[off + j] - mean);
    var /= T(n);
    (*inv)[s] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t c = (s % groups) * cpg + j / HW;
      const T h = (xv[off + j] - mean) * (*inv)[s];
      (*xhat)[off + j] = h;
      out[off + j] = h * gv[c] + bv[c];
    }
  }
  return g.make(std::move(out), {x, gain, bias}, [x, gain, bias, xhat, inv, N, groups, cpg, HW, n](Graph<T>& g, int self) {
    const Array<T>& go = g.grad(Var{self});
    const Array<T>& gv = g.value(gain);
    const bool need_gain = g.requires_grad(gain), need_bias = g.requires_grad(bias), need_x = g.requires_grad(x);
    std::vector<T> dxhat(n);
    for (std::size_t s = 0; s < N * groups; ++s) {
      const std::size_t off = s * n;
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t c = (s % groups) * cpg + j / HW;
        if (need_gain) g.grad(gain)[c] += go[off + j] * (*xhat)[off + j];
        if (need_bias) g.grad(bias)[c] += go[off + j];
        dxhat[j] = go[off + j] * gv[c];
      }
      if (need_x) detail::norm_slice_backward(dxhat.data(), xhat->data() + off, (*inv)[s], n, 1, g.grad(x).data() + off);
    }
  });
}

/// NCHW → [N×C] spatial mean.
template <class T>
Var global_avg_pool(Graph<T>& g, Var x) {
  const Array<T>& xv = g.value(x);
  if (xv.rank() != 4) throw DimensionError("global_avg_pool expects NCHW");
  const std::size_t N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  Array<T> out({N, C});
  for (std::size_t i = 0; i < N * C; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < HW; ++j) s += xv[i * HW + j];
    out[i] = s / T(HW);
  }
  return g.make(std::move(out), {x}, [x, N, C, HW](Graph<T>& g, int self) {
    const Array<T>& go = g.grad(Var{self});
    Array<T>& gx = g.grad(x);
    for (std::size_t i = 0; i < N * C; ++i)
      for (std::size_t j = 0; j < HW; ++j) gx[i * HW + j] += go[i] / T(HW);
  });
}

/// NCHW tensor scaled per (n, c) by s[N×C].
template <class T>
Var channel_scale(Graph<T>& g, Var x, Var s) {
  const Array<T>& xv = g.value(x);
  const Array<T>& sv = g.value(s);
  if (xv.rank() != 4 || sv.rank() != 2 || sv.dim(0) != xv.dim(0) || sv.dim(1) != xv.dim(1))
    throw DimensionError("channel_scale: " + shape_str(xv.shape()) + " by " + shape_str(sv.shape()));
  const std::size_t NC = sv.size(), HW = xv.dim(2) * xv.dim(3);
  Array<T> out(xv.shape());
  for (std::size_t i = 0; i < NC; ++i)
    for (std::size_t j = 0; j < HW; ++j) out[i * HW + j] = xv[i * HW + j] * sv[i];
  return g.make(std::move(out), {x, s}, [x, s, NC, HW](Graph<T>& g, int self) {
    const Array<T>& go = g.grad(Var{self});
    const Array<T>& xv = g.value(x);
    const Array<T>& sv = g.value(s);
    const bool nx = g.requires_grad(x), ns = g.requires_grad(s);
    for (std::size_t i = 0; i < NC; ++i) {
      T acc = 0;
      for (std::size_t j = 0; j < HW; ++j) {
        if (nx) g.grad(x)[i * HW + j] += go[i * HW + j] * sv[i];
        acc += go[i * HW + j] * xv[i * HW + j];
      }
      if (ns) g.grad(s)[i] += acc;
    }
  });
}

/// Concatenation along the last axis; leading extents must agree.
template <class T>
Var concat_last(Graph<T>& g, Var a, Var b) {
  const Array<T>& av = g.value(a);
  const Array<T>& bv = g.value(b);
  const std::size_t p = av.shape().back(), q = bv.shape().back();
  Shape sa(av.shape().begin(), av.shape().end() - 1), sb(bv.shape().begin(), bv.shape().end() - 1);
  if (sa != sb) throw DimensionError("concat_last: " + shape_str(av.shape()) + " with " + shape_str(bv.shape()));
  const std::size_t rows = av.size() / p;
  Shape os = av.shape();
  os.back() = p + q;
  Array<T> out(os);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.data() + r * p, p, out.data() + r * (p + q));
    std::copy_n(bv.data() + r * q, q, out.data() + r * (p + q) + p);
  }
  return g.make(std::move(out), {a, b}, [a, b, p, q, rows](Graph<T>& g, int self) {
    const Array<T>& go = g.grad(Var{self});
    if (g.requires_grad(a)) {
      Array<T>& ga = g.grad(a);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < p; ++j) ga[r * p + j] += go[r * (p + q) + j];
    }
    if (g.requires_grad(b)) {
      Array<T>& gb = g.grad(b);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < q; ++j) gb[r * q + j] += go[r * (p + q) + p + j];
    }
  });
}

/// a[B×F] repeated over a new token axis: [B×L×F].
template <class T>
Var broadcast_tokens(Graph<T>& g, Var a, std::size_t L) {
  const Array<T>& av = g.value(a);
  if (av.rank() != 2) throw DimensionError("broadcast_tokens expects [B×F]");
  const std::size_t B = av.dim(0), F = av.dim(1);
  Array<T> out({B, L, F});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t l = 0; l < L; ++l) std::copy_n(av.data() + b * F, F, out.data() + (b * L + l) * F);
  return g.make(std::move(out), {a}, [a, B, L, F](Graph<T>& g, int self) {
    const Array<T>& go = g.grad(Var{self});
    Array<T>& ga = g.grad(a);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t f = 0; f < F; ++f) ga[b * F + f] += go[(b * L + l) * F + f];
  });
}

/// x[..., D] * s[...] broadcast over the last axis.
template <class T>
Var mul_last(Graph<T>& g, Var x, Var s) {
  const Array<T>& xv = g.value(x);
  const Array<T>& sv = g.value(s);
  const std::size_t D = xv.shape().back();
  if (xv.size() != sv.size() * D) throw DimensionError("mul_last: " + shape_str(xv.shape()) + " by " + shape_str(sv.shape()));
  Array<T> out(xv.shape());
  for (std::size_t r = 0; r < sv.size(); ++r)
    for (std::size_t d = 0; d < D; ++d) out[r * D + d] = xv[r * D + d] * sv[r];
  return g.make(std::move(out), {x, s}, [x, s, D](Graph<T>& g, int self) {
    const Array<T>& go = g.grad(Var{self});
    const Array<T>& xv = g.value(x);
    const Array<T>& sv = g.value(s);
    const bool nx = g.requires_grad(x), ns = g.requires_grad(s);
    for (std::size_t r = 0; r < sv.size(); ++r) {
      T acc = 0;
      for (std::size_t d = 0; d < D; ++d) {
        if (nx) g.grad(x)[r * D + d] += go[r * D + d] * sv[r];
        acc += go[r * D + d] * xv[r * D + d];
      }
      if (ns) g.grad(s)[r] += acc;
    }
  });
}

/// x[..., D] / d[...] broadcast over the last axis.
template <class T>
Var div_last(Graph<T>& g, Var x, Var d) {
  const Array<T>& xv = g.value(x);
  const Array<T>& dv = g.value(d);
  const std::size_t D = xv.shape().back();
  if (xv.size() != dv.size() * D) throw DimensionError("div_last: " + shape_str(xv.shape()) + " by " + shape_str(dv.shape()));
  Array<T> out(xv.shape());
  for (std::size_t r = 0; r < dv.size(); ++r)
    for (std::size_t k = 0; k < D; ++k) out[r * D + k] = xv[r * D + k] / dv[r];
  return g.make(std::move(out), {x, d}, [x, d, D](Graph<T>& g, int self) {
    const Array<T>& go = g.grad(Var{self});
    const Array<T>& y = g.value(Var{self});
    const Array<T>& dv = g.value(d);
    const bool nx = g.requires_grad(x), nd = g.requires_grad(d);
    for (std::size_t r = 0; r < dv.size(); ++r) {
      T acc = 0;
      for (std::size_t k = 0; k < D; ++k) {
        if (nx) g.grad(x)[r * D + k] += go[r * D + k] / dv[r];
        acc += go[r * D + k] * y[r * D + k];
      }
      if (nd) g.grad(d)[r] -= acc / dv[r];
    }
  });
}

/// Euclidean norm over the last axis. The subgradient at 0 is taken as 0.
template <class T>
Var l2norm_last(Graph<T>& g, Var x) {
  const Array<T>& xv = g.value(x);
  Array<T> out = saferedir::l2_norm(xv, xv.rank() - 1);
  return g.make(std::move(out), {x}, [x](Graph<T>& g, int self) {
    const Array<T>& go = g.grad(Var{self});
    const Array<T>& nv = g.value(Var{self});
    const Array<T>& xv = g.value(x);
    Array<T>& gx = g.grad(x);
    const std::size_t D = xv.shape().back();
    for (std::size_t r = 0; r < nv.size(); ++r) {
      if (nv[r] <= T{0}) continue;
      for (std::size_t k = 0; k < D; ++k) gx[r * D + k] += go[r] * xv[r * D + k] / nv[r];
    }
  });
}

/// Rows of x (along axis 0) selected by index.
template <class T>
Var gather_rows(Graph<T>& g, Var x, const std::vector<std::size_t>& idx) {
  const Array<T>& xv = g.value(x);
  const std::size_t row = xv.size() / xv.dim(0);
  Shape os = xv.shape();
  os[0] = idx.size();
  Array<T> out(os);
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(xv.data() + idx[i] * row, row, out.data() + i * row);
  return g.make(std::move(out), {x}, [x, idx, row](Graph<T>& g, int self) {
    const Array<T>& go = g.grad(Var{self});
    Array<T>& gx = g.grad(x);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < row; ++j) gx[idx[i] * row + j] += go[i * row + j];
  });
}

/// Multi-head scores: q[B×D] against K[B×L×D], scaled by 1/sqrt(D/H). → [B×H×L]
template <class T>
Var head_scores(Graph<T>& g, Var q, Var k, std::size_t heads) {
  const Array<T>& qv = g.value(q);
  const Array<T>& kv = g.value(k);
  if (qv.rank() != 2 || kv.rank() != 3 || kv.dim(0) != qv.dim(0) || kv.dim(2) != qv.dim(1) || qv.dim(1) % heads)
    throw DimensionError("head_scores: q " + shape_str(qv.shape()) + " K " + shape_str(kv.shape()));
  const std::size_t B = kv.dim(0), L = kv.dim(1), D = kv.dim(2), dh = D / heads;
  const T sc = T{1} / std::sqrt(T(dh));
  Array<T> out({B, heads, L});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t l = 0; l < L; ++l) {
        T s = 0;
        for (std::size_t j = h * dh; j < (h + 1) * dh; ++j) s += qv[b * D + j] * kv[(b * L + l) * D + j];
        out[(b * heads + h) * L + l] = s * sc;
      }
  return g.make(std::move(out), {q, k}, [q, k, B, L, D, dh, heads, sc](Graph<T>& g, int self) {
    const Array<T>& go = g.grad(Var{self});
    const Array<T>& qv = g.value(q);
    const Array<T>& kv = g.value(k);
    const bool nq = g.requires_grad(q), nk = g.requires_grad(k);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t l = 0; l < L; ++l) {
          const T gs = go[(b * heads + h) * L + l] * sc;
          for (std::size_t j = h * dh; j < (h + 1) * dh; ++j) {
            if (nq) g.grad(q)[b * D + j] += gs * kv[(b * L + l) * D + j];
            if (nk) g.grad(k)[(b * L + l) * D + j] += gs * qv[b * D + j];
          }
        }
  });
}

/// Per-head weighted sum of values: w[B×H×L], V[B×L×D] → [B×D] (heads concatenated).
template <class T>
Var head_mix(Graph<T>& g, Var w, Var v, std::size_t heads) {
  const Array<T>& wv = g.value(w);
  const Array<T>& vv = g.value(v);
  if (wv.rank() != 3 || vv.rank() != 3 || wv.dim(0) != vv.dim(0) || wv.dim(1) != heads || wv.dim(2) != vv.dim(1))
    throw DimensionError("head_mix: w " + shape_str(wv.shape()) + " V " + shape_str(vv.shape()));
  const std::size_t B = vv.dim(0), L = vv.dim(1), D = vv.dim(2), dh = D / heads;
  Array<T> out({B, D});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t l = 0; l < L; ++l) {
        const T a = wv[(b * heads + h) * L + l];
        for (std::size_t j = h * dh; j < (h + 1) * dh; ++j) out[b * D + j] += a * vv[(b * L + l) * D + j];
      }
  return g.make(std::move(out), {w, v}, [w, v, B, L, D, dh, heads](Graph<T>& g, int self) {
    const Array<T>& go = g.grad(Var{self});
    const Array<T>& wv = g.value(w);
    const Array<T>& vv = g.value(v);
    const bool nw = g.requires_grad(w), nv = g.requires_grad(v);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t l = 0; l < L; ++l) {
          const T a = wv[(b * heads + h) * L + l];
          T acc = 0;
          for (std::size_t j = h * dh; j < (h + 1) * dh; ++j) {
            if (nv) g.grad(v)[(b * L + l) * D + j] += a * go[b * D + j];
            acc += go[b * D + j] * vv[(b * L + l) * D + j];
          }
          if (nw) g.grad(w)[(b * heads + h) * L + l] += acc;
        }
  });
}

template <class T>
Var sum_all(Graph<T>& g, Var a) {
  const Array<T>& av = g.value(a);
  T s = 0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i];
  return g.make(Array<T>({1}, {s}), {a}, [a](Graph<T>& g, int self) {
    const T go = g.grad(Var{self})[0];
    Array<T>& ga = g.grad(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go;
  });
}

template <class T>
Var mean_all(Graph<T>& g, Var a) {
  const std::size_t n = g.value(a).size();
  return scale(g, sum_all(g, a), n ? T{1} / T(n) : T{0});
}

template <class T>
Var square(Graph<T>& g, Var a) {
  return mul(g, a, a);
}

/// Σ weights[i] * terms[i] over scalar nodes.
template <class T>
Var weighted_sum(Graph<T>& g, const std::vector<Var>& terms, const std::vector<T>& weights) {
  if (terms.size() != weights.size()) throw DimensionError("weighted_sum: terms/weights length");
  T s = 0;
  for (std::size_t i = 0; i < terms.size(); ++i) s += weights[i] * g.value(terms[i])[0];
  return g.make(Array<T>({1}, {s}), terms, [terms, weights](Graph<T>& g, int self) {
    const T go = g.grad(Var{self})[0];
    for (std::size_t i = 0; i < terms.size(); ++i)
      if (g.requires_grad(terms[i])) g.grad(terms[i])[0] += go * weights[i];
  });
}

}  // namespace ad
}  // namespace saferedir
