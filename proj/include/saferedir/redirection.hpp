#pragma once

// Token-level redirection arithmetic, the pseudo-mask rule and the fixed
// baseline strategies.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "saferedir/numerics/array.hpp"

namespace saferedir {

template <class T>
struct RedirectionResult {
  Array<T> p_hat;
  Array<T> applied_shift;
  Array<T> per_token_norms;
};

namespace detail {

inline std::size_t token_count(const Shape& s, const char* what) {
  if (s.size() < 2) throw DimensionError(std::string(what) + " must be at least L×D");
  return shape_size(s) / s.back();
}

template <class T>
void require_per_token(const Array<T>& a, std::size_t n, const char* what) {
  if (a.size() != n)
    throw DimensionError(std::string(what) + " has " + std::to_string(a.size()) + " entries, expected one per token (" +
                         std::to_string(n) + ")");
}

}  // namespace detail

/// Training form: Δ_f = Δ⊙m, Δ̃ = Δ_f / (‖Δ_f‖ + ε), p̂ = p + s·α·Δ̃·n with
/// n = ref_norm if given, otherwise the per-token norm of p.
template <class T>
RedirectionResult<T> redirect(const Array<T>& p, const Array<T>& delta, const Array<T>& mask, const Array<T>& alpha,
                              double alpha_scale, const Array<T>* ref_norm = nullptr) {
  if (p.shape() != delta.shape())
    throw DimensionError("redirect: embedding " + shape_str(p.shape()) + " vs delta " + shape_str(delta.shape()));
  if (alpha_scale < 0) throw DomainError("alpha_scale must be nonnegative");
  const std::size_t n = detail::token_count(p.shape(), "embedding"), D = p.shape().back();
  detail::require_per_token(mask, n, "mask");
  detail::require_per_token(alpha, n, "alpha");
  RedirectionResult<T> r;
  r.per_token_norms = Array<T>(Shape(p.shape().begin(), p.shape().end() - 1));
  if (ref_norm) {
    detail::require_per_token(*ref_norm, n, "ref_norm");
    for (std::size_t i = 0; i < n; ++i) r.per_token_norms[i] = (*ref_norm)[i];
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      T s = 0;
      for (std::size_t d = 0; d < D; ++d) s += p[i * D + d] * p[i * D + d];
      r.per_token_norms[i] = std::sqrt(s);
    }
  }
  r.applied_shift = Array<T>(p.shape());
  r.p_hat = Array<T>(p.shape());
  for (std::size_t i = 0; i < n; ++i) {
    T s = 0;
    for (std::size_t d = 0; d < D; ++d) {
      const T f = delta[i * D + d] * mask[i];
      s += f * f;
    }
    const T denom = std::sqrt(s) + T(kNormEps);
    const T coef = T(alpha_scale) * alpha[i] * r.per_token_norms[i];
    for (std::size_t d = 0; d < D; ++d) {
      const std::size_t k = i * D + d;
      r.applied_shift[k] = coef * (delta[k] * mask[i] / denom);
      r.p_hat[k] = p[k] + r.applied_shift[k];
    }
  }
  return r;
}

/// Inference form: Δ̃ = Δ / (‖Δ‖ + ε) first, then p̂ = base + s·α·(m⊙Δ̃)⊙ref.
/// With hard_mask the mask is binarized at 0.5.
template <class T>
RedirectionResult<T> redirect_from_base(const Array<T>& base, const Array<T>& delta, const Array<T>& mask,
                                        const Array<T>& alpha, double alpha_scale, const Array<T>& ref_norms,
                                        bool hard_mask = false) {
  if (base.shape() != delta.shape())
    throw DimensionError("redirect: embedding " + shape_str(base.shape()) + " vs delta " + shape_str(delta.shape()));
  if (alpha_scale < 0) throw DomainError("alpha_scale must be nonnegative");
  const std::size_t n = detail::token_count(base.shape(), "embedding"), D = base.shape().back();
  detail::require_per_token(mask, n, "mask");
  detail::require_per_token(alpha, n, "alpha");
  detail::require_per_token(ref_norms, n, "ref_norms");
  RedirectionResult<T> r;
  r.per_token_norms = ref_norms;
  r.applied_shift = Array<T>(base.shape());
  r.p_hat = Array<T>(base.shape());
  for (std::size_t i = 0; i < n; ++i) {
    T s = 0;
    for (std::size_t d = 0; d < D; ++d) s += delta[i * D + d] * delta[i * D + d];
    const T denom = std::sqrt(s) + T(kNormEps);
    const T m = hard_mask ? (mask[i] >= T(0.5) ? T{1} : T{0}) : mask[i];
    const T coef = T(alpha_scale) * alpha[i] * m * ref_norms[i];
    for (std::size_t d = 0; d < D; ++d) {
      const std::size_t k = i * D + d;
      r.applied_shift[k] = coef * (delta[k] / denom);
      r.p_hat[k] = base[k] + r.applied_shift[k];
    }
  }
  return r;
}

/// m*[...] = 1 iff 1 − cos(safe, unsafe) > τ per token. A zero-norm token has
/// cosine 0 and is therefore flagged.
template <class T>
Array<T> build_pseudo_mask(const Array<T>& emb_safe, const Array<T>& emb_unsafe, double tau) {
  if (emb_safe.shape() != emb_unsafe.shape())
    throw DimensionError("pseudo mask: " + shape_str(emb_safe.shape()) + " vs " + shape_str(emb_unsafe.shape()));
  const std::size_t n = detail::token_count(emb_safe.shape(), "pseudo mask input"), D = emb_safe.shape().back();
  Array<T> out(Shape(emb_safe.shape().begin(), emb_safe.shape().end() - 1));
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0, a = 0, b = 0;
    for (std::size_t d = 0; d < D; ++d) {
      const double x = emb_safe[i * D + d], y = emb_unsafe[i * D + d];
      dot += x * y;
      a += x * x;
      b += y * y;
    }
    // One square root of the product keeps exact ties exact (e.g. cos = 4/5).
    const double cos = (a > kNormEps * kNormEps && b > kNormEps * kNormEps) ? dot / std::sqrt(a * b) : 0.0;
    out[i] = 1.0 - cos > tau ? T{1} : T{0};
  }
  return out;
}

enum class Strategy { DirectAdd, PairDiff, PairDiffScaled, PairDiffMasked };

inline Strategy parse_strategy(const std::string& s) {
  if (s == "direct_add") return Strategy::DirectAdd;
  if (s == "pair_diff") return Strategy::PairDiff;
  if (s == "pair_diff_scaled") return Strategy::PairDiffScaled;
  if (s == "pair_diff_masked") return Strategy::PairDiffMasked;
  throw ConfigError("unknown redirection strategy '" + s + "'");
}

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::DirectAdd: return "direct_add";
    case Strategy::PairDiff: return "pair_diff";
    case Strategy::PairDiffScaled: return "pair_diff_scaled";
    case Strategy::PairDiffMasked: return "pair_diff_masked";
  }
  return "?";
}

/// Fixed-rule redirection. `prototype` is a single D-vector added to every
/// token by direct_add; pair_diff ignores alpha_fixed.
template <class T>
Array<T> baseline_redirect(Strategy strategy, const Array<T>& p, const Array<T>& emb_safe, const Array<T>& emb_unsafe,
                           const Array<T>& prototype, double alpha_fixed, double tau) {
  if (p.shape() != emb_safe.shape() || p.shape() != emb_unsafe.shape())
    throw DimensionError("baseline: embeddings disagree in shape");
  const std::size_t D = p.shape().back(), n = p.size() / D;
  Array<T> out = p;
  if (strategy == Strategy::DirectAdd) {
    if (prototype.size() != D) throw DimensionError("baseline: prototype must have D entries");
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t d = 0; d < D; ++d) out[i * D + d] += prototype[d];
    return out;
  }
  const double a = strategy == Strategy::PairDiff ? 1.0 : alpha_fixed;
  Array<T> keep;
  if (strategy == Strategy::PairDiffMasked) keep = build_pseudo_mask(emb_safe, emb_unsafe, tau);
  for (std::size_t i = 0; i < n; ++i) {
    if (strategy == Strategy::PairDiffMasked && keep[i] == T{0}) continue;
    for (std::size_t d = 0; d < D; ++d) {
      const std::size_t k = i * D + d;
      out[k] += T(a) * (emb_safe[k] - emb_unsafe[k]);
    }
  }
  return out;
}

}  // namespace saferedir
