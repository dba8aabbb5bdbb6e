#pragma once

// Training objective: smoothed cross-entropy with a confidence penalty,
// shift regression (MSE + cosine), mask BCE, the redirected-embedding term
// and an L2 penalty on Δ. Redirection terms use unsafe items only.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "saferedir/model.hpp"
#include "saferedir/numerics/autodiff.hpp"

namespace saferedir {

namespace ad {

/// Mean cross-entropy of logits[N×C] against (1−ε)·onehot + ε/C.
template <class T>
Var smoothed_cross_entropy(Graph<T>& g, Var logits, const std::vector<int>& labels, T eps) {
  const Array<T>& lv = g.value(logits);
  const std::size_t N = lv.dim(0), C = lv.dim(1);
  if (labels.size() != N) throw DimensionError("cross entropy: label count");
  Array<T> prob = saferedir::softmax(lv, 1);
  T loss = 0;
  for (std::size_t i = 0; i < N; ++i) {
    if (labels[i] < 0 || std::size_t(labels[i]) >= C) throw DomainError("label out of range");
    T mx = lv(i, 0);
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, lv(i, c));
    T se = 0;
    for (std::size_t c = 0; c < C; ++c) se += std::exp(lv(i, c) - mx);
    const T lse = mx + std::log(se);
    for (std::size_t c = 0; c < C; ++c) {
      const T y = (std::size_t(labels[i]) == c ? T{1} - eps : T{0}) + eps / T(C);
      loss -= y * (lv(i, c) - lse);
    }
  }
  loss /= T(N);
  return g.make(Array<T>({1}, {loss}), {logits}, [logits, labels, eps, prob, N, C](Graph<T>& g, int self) {
    const T go = g.grad(Var{self})[0] / T(N);
    Array<T>& gl = g.grad(logits);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t c = 0; c < C; ++c) {
        const T y = (std::size_t(labels[i]) == c ? T{1} - eps : T{0}) + eps / T(C);
        gl[i * C + c] += go * (prob(i, c) - y);
      }
  });
}

/// Mean of ln C − H(softmax(logits)): zero at the uniform prediction.
template <class T>
Var confidence_penalty(Graph<T>& g, Var logits) {
  const Array<T>& lv = g.value(logits);
  const std::size_t N = lv.dim(0), C = lv.dim(1);
  Array<T> prob = saferedir::softmax(lv, 1);
  Array<T> logp(lv.shape());
  T total = 0;
  for (std::size_t i = 0; i < N; ++i) {
    T mx = lv(i, 0);
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, lv(i, c));
    T se = 0;
    for (std::size_t c = 0; c < C; ++c) se += std::exp(lv(i, c) - mx);
    T h = 0;
    for (std::size_t c = 0; c < C; ++c) {
      logp(i, c) = lv(i, c) - mx - std::log(se);
      h -= prob(i, c) * logp(i, c);
    }
    total += std::log(T(C)) - h;
  }
  total /= T(N);
  // d(−H)/dz_c = p_c (log p_c + H)
  return g.make(Array<T>({1}, {total}), {logits}, [logits, prob, logp, N, C](Graph<T>& g, int self) {
    const T go = g.grad(Var{self})[0] / T(N);
    Array<T>& gl = g.grad(logits);
    for (std::size_t i = 0; i < N; ++i) {
      T h = 0;
      for (std::size_t c = 0; c < C; ++c) h -= prob(i, c) * logp(i, c);
      for (std::size_t c = 0; c < C; ++c) gl[i * C + c] += go * prob(i, c) * (logp(i, c) + h);
    }
  });
}

/// Mean squared error against a constant target. With `token_mask`
/// (one entry per D-row) the mean runs over selected rows only; an empty
/// selection yields 0.
template <class T>
Var mse(Graph<T>& g, Var x, const Array<T>& target, const Array<T>* token_mask = nullptr) {
  const Array<T>& xv = g.value(x);
  if (xv.size() != target.size()) throw DimensionError("mse: " + shape_str(xv.shape()) + " vs " + shape_str(target.shape()));
  const std::size_t D = xv.shape().back(), rows = xv.size() / D;
  if (token_mask && token_mask->size() != rows) throw DimensionError("mse: token mask length");
  std::vector<char> sel(rows, 1);
  std::size_t count = rows;
  if (token_mask) {
    count = 0;
    for (std::size_t r = 0; r < rows; ++r) count += (sel[r] = (*token_mask)[r] != T{0});
  }
  T s = 0;
  for (std::size_t r = 0; r < rows; ++r)
    if (sel[r])
      for (std::size_t d = 0; d < D; ++d) {
        const T e = xv[r * D + d] - target[r * D + d];
        s += e * e;
      }
  const T denom = T(count * D);
  const T val = count ? s / denom : T{0};
  return g.make(Array<T>({1}, {val}), {x}, [x, target, sel, denom, count, D](Graph<T>& g, int self) {
    if (!count) return;
    const T go = g.grad(Var{self})[0];
    const Array<T>& xv = g.value(x);
    Array<T>& gx = g.grad(x);
    for (std::size_t r = 0; r < sel.size(); ++r)
      if (sel[r])
        for (std::size_t d = 0; d < D; ++d) gx[r * D + d] += go * T(2) * (xv[r * D + d] - target[r * D + d]) / denom;
  });
}

/// 1 − mean cosine between x and target, grouping `group` consecutive values
/// per cosine. Groups whose target has zero norm are skipped (and excluded
/// from the mean); a zero-norm x yields cosine 0 with zero gradient.
template <class T>
Var cosine_loss(Graph<T>& g, Var x, const Array<T>& target, std::size_t group) {
  const Array<T>& xv = g.value(x);
  if (xv.size() != target.size() || xv.size() % group)
    throw DimensionError("cosine loss: " + shape_str(xv.shape()) + " vs " + shape_str(target.shape()));
  const std::size_t G = xv.size() / group;
  std::vector<T> na(G), nb(G), cs(G);
  std::vector<char> used(G, 0);
  std::size_t count = 0;
  T sum = 0;
  for (std::size_t k = 0; k < G; ++k) {
    T dot = 0, a2 = 0, b2 = 0;
    for (std::size_t j = k * group; j < (k + 1) * group; ++j) {
      dot += xv[j] * target[j];
      a2 += xv[j] * xv[j];
      b2 += target[j] * target[j];
    }
    na[k] = std::sqrt(a2);
    nb[k] = std::sqrt(b2);
    if (nb[k] <= T(kNormEps)) continue;
    used[k] = 1;
    ++count;
    cs[k] = na[k] > T(kNormEps) ? dot / (na[k] * nb[k]) : T{0};
    sum += cs[k];
  }
  const T val = count ? T{1} - sum / T(count) : T{0};
  return g.make(Array<T>({1}, {val}), {x}, [x, target, group, na, nb, cs, used, count](Graph<T>& g, int self) {
    if (!count) return;
    const T go = -g.grad(Var{self})[0] / T(count);
    const Array<T>& xv = g.value(x);
    Array<T>& gx = g.grad(x);
    for (std::size_t k = 0; k < used.size(); ++k) {
      if (!used[k] || na[k] <= T(kNormEps)) continue;
      for (std::size_t j = k * group; j < (k + 1) * group; ++j)
        gx[j] += go * (target[j] / (na[k] * nb[k]) - cs[k] * xv[j] / (na[k] * na[k]));
    }
  });
}

/// Mean binary cross-entropy with probabilities clamped to [1e-7, 1 − 1e-7].
template <class T>
Var bce(Graph<T>& g, Var p, const Array<T>& target) {
  const Array<T>& pv = g.value(p);
  if (pv.size() != target.size()) throw DimensionError("bce: " + shape_str(pv.shape()) + " vs " + shape_str(target.shape()));
  const T lo = T(1e-7), hi = T(1) - T(1e-7);
  T s = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const T q = std::clamp(pv[i], lo, hi);
    s -= target[i] * std::log(q) + (T{1} - target[i]) * std::log(T{1} - q);
  }
  const std::size_t n = pv.size();
  return g.make(Array<T>({1}, {n ? s / T(n) : T{0}}), {p}, [p, target, lo, hi, n](Graph<T>& g, int self) {
    const T go = g.grad(Var{self})[0] / T(n);
    const Array<T>& pv = g.value(p);
    Array<T>& gp = g.grad(p);
    for (std::size_t i = 0; i < n; ++i) {
      if (pv[i] < lo || pv[i] > hi) continue;
      gp[i] += go * (-target[i] / pv[i] + (T{1} - target[i]) / (T{1} - pv[i]));
    }
  });
}

}  // namespace ad

/// Per-term values (raw) and the weights they entered the total with.
struct LossBreakdown {
  double cls = 0, conf = 0, mse = 0, cos = 0, mask = 0, alpha = 0, reg = 0;
  double w_cls = 0, w_conf = 0, w_mse = 0, w_cos = 0, w_mask = 0, w_alpha = 0, w_reg = 0;
  double total = 0;

  double weighted_sum() const {
    return w_cls * cls + w_conf * conf + w_mse * mse + w_cos * cos + w_mask * mask + w_alpha * alpha + w_reg * reg;
  }
  std::string str() const {
    char buf[256];
    std::snprintf(buf, sizeof buf, "cls=%.6g conf=%.6g mse=%.6g cos=%.6g mask=%.6g alpha=%.6g reg=%.6g total=%.6g",
                  cls, conf, mse, cos, mask, alpha, reg, total);
    return buf;
  }
};

/// Loss weights after the ablation switches are applied.
inline LossWeights effective_weights(LossWeights w, const Ablations& ab) {
  if (ab.no_mse) w.lambda_mse = 0;
  if (ab.no_cos) w.lambda_cos = 0;
  if (ab.no_mask) w.lambda_mask = 0;
  if (ab.no_conf) w.conf_penalty_w = 0;
  if (ab.no_smoothing) w.smoothing_eps = 0;
  if (ab.no_reg) w.l2_delta_w = 0;
  return w;
}

namespace detail {

template <class T>
Array<T> gather(const Array<T>& a, const std::vector<std::size_t>& idx) {
  const std::size_t row = a.size() / a.dim(0);
  Shape s = a.shape();
  s[0] = idx.size();
  Array<T> out(s);
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(a.data() + idx[i] * row, row, out.data() + i * row);
  return out;
}

}  // namespace detail

/// p̂ = p + α·Δ̃·‖p‖ with Δ̃ = (Δ⊙m)/(‖Δ⊙m‖ + ε), on the graph.
template <class T>
Var redirect_on_graph(Graph<T>& g, Var tokens, Var delta, Var mask, Var alpha) {
  Var filtered = ad::mul_last(g, delta, mask);
  Var norm = ad::add_scalar(g, ad::l2norm_last(g, filtered), T(kNormEps));
  Var unit = ad::div_last(g, filtered, norm);
  Array<T> pn = l2_norm(g.value(tokens), g.value(tokens).rank() - 1);
  Var coef = ad::mul(g, alpha, g.constant(std::move(pn)));
  return ad::add(g, tokens, ad::mul_last(g, unit, coef));
}

template <class T>
struct LossResult {
  Var total;
  LossBreakdown parts;
};

/// Assembles the weighted objective for a batch and its forward pass.
template <class T>
LossResult<T> total_loss(Graph<T>& g, const Batch<T>& batch, const ForwardVars& f, const LossWeights& weights,
                         const Ablations& ab) {
  const LossWeights w = effective_weights(weights, ab);
  const std::size_t B = batch.size();
  const Shape& ts = batch.input.tokens.shape();
  const std::size_t L = ts[1], D = ts[2];
  std::vector<std::size_t> unsafe;
  for (std::size_t i = 0; i < B; ++i)
    if (batch.labels[i] == 1) unsafe.push_back(i);

  std::vector<Var> terms;
  std::vector<T> coef;
  LossBreakdown bd;
  auto push = [&](Var v, double wt, double& raw, double& wslot) {
    raw = double(g.value(v)[0]);
    wslot = wt;
    terms.push_back(v);
    coef.push_back(T(wt));
  };

  push(ad::smoothed_cross_entropy(g, f.logits, batch.labels, T(w.smoothing_eps)), w.lambda_cls, bd.cls, bd.w_cls);
  push(ad::confidence_penalty(g, f.logits), w.lambda_cls * w.conf_penalty_w, bd.conf, bd.w_conf);

  if (!unsafe.empty()) {
    Array<T> shift(batch.emb_safe.shape());
    for (std::size_t i = 0; i < shift.size(); ++i) shift[i] = batch.emb_safe[i] - batch.emb_unsafe[i];
    const Array<T> target = detail::gather(shift, unsafe);
    const Array<T> mstar = detail::gather(batch.m_star, unsafe);
    Var du = ad::gather_rows(g, f.delta, unsafe);
    push(ad::mse(g, du, target, w.mse_mask_mode ? &mstar : nullptr), w.lambda_mse, bd.mse, bd.w_mse);
    push(ad::cosine_loss(g, du, target, w.cos_per_token ? D : L * D), w.lambda_cos, bd.cos, bd.w_cos);
    if (!ab.no_mask) push(ad::bce(g, ad::gather_rows(g, f.mask, unsafe), mstar), w.lambda_mask, bd.mask, bd.w_mask);
    Var tokens_u = g.constant(detail::gather(batch.input.tokens, unsafe));
    Var p_hat = redirect_on_graph(g, tokens_u, du, ad::gather_rows(g, f.mask, unsafe), ad::gather_rows(g, f.alpha, unsafe));
    push(ad::mse(g, p_hat, detail::gather(batch.emb_safe, unsafe)), w.lambda_alpha, bd.alpha, bd.w_alpha);
  }
  push(ad::mse(g, f.delta, Array<T>(g.shape(f.delta))), w.l2_delta_w, bd.reg, bd.w_reg);

  Var total = ad::weighted_sum(g, terms, coef);
  bd.total = double(g.value(total)[0]);
  return {total, bd};
}

}  // namespace saferedir
