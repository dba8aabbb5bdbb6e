#include <gtest/gtest.h>

#include <cmath>

#include "saferedir/dataset.hpp"
#include "saferedir/redirection.hpp"
#include "test_util.hpp"

using namespace saferedir;
using srtest::random_array;

namespace {

Array<double> token_norms(const Array<double>& p) {
  const std::size_t D = p.shape().back(), n = p.size() / D;
  Array<double> out({n});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t d = 0; d < D; ++d) s += p[i * D + d] * p[i * D + d];
    out[i] = std::sqrt(s);
  }
  return out;
}

Array<double> uniform(Shape s, Rng& rng, double lo, double hi) {
  Array<double> a(std::move(s));
  for (auto& v : a.vec()) v = rng.uniform(lo, hi);
  return a;
}

// Exact 1 − cos(a, b) > 1/5 for integer vectors: cos < 4/5 ⇔ 5·dot < 4·√(A·B).
bool exact_flag(const std::vector<long>& a, const std::vector<long>& b) {
  long dot = 0, A = 0, B = 0;
  for (std::size_t d = 0; d < a.size(); ++d) {
    dot += a[d] * b[d];
    A += a[d] * a[d];
    B += b[d] * b[d];
  }
  if (A == 0 || B == 0) return true;
  if (dot <= 0) return true;
  return 25 * dot * dot < 16 * A * B;
}

}  // namespace

TEST(Redirect, ZeroAlphaIsBitIdentity) {
  Rng rng(1);
  auto p = random_array({3, 5, 8}, rng), delta = random_array({3, 5, 8}, rng);
  auto m = uniform({3, 5}, rng, 0, 1);
  Array<double> a0({3, 5});
  auto r = redirect(p, delta, m, a0, 1.0);
  EXPECT_EQ(r.p_hat, p);
  EXPECT_EQ(redirect(r.p_hat, delta, m, a0, 1.0).p_hat, r.p_hat);
  auto norms = token_norms(p);
  EXPECT_EQ(redirect_from_base(p, delta, m, a0, 2.0, norms).p_hat, p);
}

TEST(Redirect, NormalizedDirectionHasUnitNorm) {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const double scale = std::pow(10.0, rng.uniform(-4, 2));
    auto p = random_array({4, 6}, rng), delta = random_array({4, 6}, rng, scale);
    auto m = uniform({4}, rng, 0, 1), a = uniform({4}, rng, 0.1, 1);
    const double s = rng.uniform(0.5, 2.0);
    auto r = redirect(p, delta, m, a, s);
    for (std::size_t i = 0; i < 4; ++i) {
      double fn = 0, sn = 0;
      for (std::size_t d = 0; d < 6; ++d) {
        fn += std::pow(delta[i * 6 + d] * m[i], 2);
        sn += std::pow(r.applied_shift[i * 6 + d], 2);
      }
      if (std::sqrt(fn) < 1e-3) continue;
      const double unit = std::sqrt(sn) / (s * a[i] * r.per_token_norms[i]);
      EXPECT_NEAR(unit, 1.0, 1e-4);
    }
    for (std::size_t k = 0; k < p.size(); ++k) EXPECT_EQ(r.p_hat[k], p[k] + r.applied_shift[k]);
  }
}

TEST(Redirect, MaskedOutTokensAreUntouched) {
  Rng rng(3);
  auto p = random_array({2, 6, 8}, rng), delta = random_array({2, 6, 8}, rng);
  auto m = uniform({2, 6}, rng, 0.2, 1), a = uniform({2, 6}, rng, 0.2, 1);
  for (std::size_t i : {0u, 3u, 7u, 11u}) m[i] = 0;
  auto norms = token_norms(p);
  auto train_form = redirect(p, delta, m, a, 1.0);
  auto session_form = redirect_from_base(p, delta, m, a, 1.0, norms);
  for (std::size_t i = 0; i < 12; ++i) {
    bool same_train = true, same_session = true;
    for (std::size_t d = 0; d < 8; ++d) {
      same_train = same_train && train_form.p_hat[i * 8 + d] == p[i * 8 + d];
      same_session = same_session && session_form.p_hat[i * 8 + d] == p[i * 8 + d];
    }
    EXPECT_EQ(same_train, m[i] == 0) << "token " << i;
    EXPECT_EQ(same_session, m[i] == 0) << "token " << i;
  }
}

TEST(Redirect, ZeroMaskGuard) {
  Rng rng(4);
  auto p = random_array({3, 8}, rng), delta = random_array({3, 8}, rng);
  Array<double> m({3}), a({3}, 1.0);
  auto r = redirect(p, delta, m, a, 1.0);
  EXPECT_TRUE(r.p_hat.all_finite());
  EXPECT_EQ(r.p_hat, p);
  // Zero Δ with a nonzero mask is guarded the same way.
  auto z = redirect(p, Array<double>({3, 8}), Array<double>({3}, 1.0), a, 1.0);
  EXPECT_EQ(z.p_hat, p);
}

TEST(Redirect, DegreeOneHomogeneousInEmbeddingScale) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    auto p = random_array({5, 7}, rng), delta = random_array({5, 7}, rng);
    auto m = uniform({5}, rng, 0, 1), a = uniform({5}, rng, 0, 1);
    const double c = rng.uniform(0.01, 50);
    Array<double> cp(p.shape());
    for (std::size_t k = 0; k < p.size(); ++k) cp[k] = c * p[k];
    auto r1 = redirect(p, delta, m, a, 1.0), r2 = redirect(cp, delta, m, a, 1.0);
    for (std::size_t k = 0; k < p.size(); ++k)
      EXPECT_NEAR(r2.applied_shift[k], c * r1.applied_shift[k], 1e-12 * std::max(1.0, c));
  }
}

TEST(Redirect, ReferenceNormsOverrideAndSessionFormOrder) {
  Rng rng(6);
  auto p = random_array({4, 5}, rng), delta = random_array({4, 5}, rng);
  auto m = uniform({4}, rng, 0, 1), a = uniform({4}, rng, 0, 1);
  Array<double> ref({4}, 2.5);
  auto r = redirect(p, delta, m, a, 1.0, &ref);
  EXPECT_EQ(r.per_token_norms, ref);
  // Session form: normalize Δ first, then multiply by m.
  auto s = redirect_from_base(p, delta, m, a, 1.5, ref);
  for (std::size_t i = 0; i < 4; ++i) {
    double n = 0;
    for (std::size_t d = 0; d < 5; ++d) n += delta[i * 5 + d] * delta[i * 5 + d];
    n = std::sqrt(n) + kNormEps;
    for (std::size_t d = 0; d < 5; ++d)
      EXPECT_NEAR(s.applied_shift[i * 5 + d], 1.5 * a[i] * m[i] * 2.5 * delta[i * 5 + d] / n, 1e-14);
  }
  auto h = redirect_from_base(p, delta, m, a, 1.0, ref, true);
  for (std::size_t i = 0; i < 4; ++i) {
    bool moved = false;
    for (std::size_t d = 0; d < 5; ++d) moved = moved || h.p_hat[i * 5 + d] != p[i * 5 + d];
    EXPECT_EQ(moved, m[i] >= 0.5 && a[i] > 0);
  }
}

TEST(Redirect, InvalidArguments) {
  Array<double> p({2, 3}), d({2, 4}), m({2}), a({2});
  EXPECT_THROW(redirect(p, d, m, a, 1.0), DimensionError);
  EXPECT_THROW(redirect(p, p, Array<double>({3}), a, 1.0), DimensionError);
  EXPECT_THROW(redirect(p, p, m, a, -1.0), DomainError);
  EXPECT_THROW(redirect_from_base(p, p, m, a, 1.0, Array<double>({1})), DimensionError);
}

TEST(PseudoMask, Examples) {
  auto a = Array<double>::from_rows({{1, 0}, {0, 1}, {1, 0}});
  auto same = build_pseudo_mask(a, a, 0.2);
  for (double v : same.vec()) EXPECT_EQ(v, 0.0);
  auto b = Array<double>::from_rows({{0, 1}, {0, 1}, {0.85, std::sqrt(1 - 0.85 * 0.85)}});
  auto m = build_pseudo_mask(a, b, 0.2);
  EXPECT_EQ(m[0], 1.0);  // orthogonal
  EXPECT_EQ(m[1], 0.0);  // identical
  EXPECT_EQ(m[2], 0.0);  // cos 0.85
  auto z = build_pseudo_mask(Array<double>({1, 2}), Array<double>::from_rows({{1, 0}}), 0.2);
  EXPECT_EQ(z[0], 1.0);  // zero-norm guard
  EXPECT_THROW(build_pseudo_mask(Array<double>({2, 3}), Array<double>({2, 4}), 0.2), DimensionError);
}

TEST(PseudoMask, MatchesExactOracleOnIntegerGrid) {
  Rng rng(7);
  std::size_t cases = 0, mismatches = 0;
  for (std::size_t L = 1; L <= 8; ++L)
    for (std::size_t D = 1; D <= 4; ++D)
      for (int rep = 0; rep < 313; ++rep, ++cases) {
        Array<double> s({L, D}), u({L, D});
        std::vector<std::vector<long>> si(L, std::vector<long>(D)), ui(L, std::vector<long>(D));
        for (std::size_t l = 0; l < L; ++l)
          for (std::size_t d = 0; d < D; ++d) {
            si[l][d] = long(rng.range(-3, 3));
            ui[l][d] = long(rng.range(-3, 3));
            s[l * D + d] = double(si[l][d]);
            u[l * D + d] = double(ui[l][d]);
          }
        auto m = build_pseudo_mask(s, u, 0.2);
        for (std::size_t l = 0; l < L; ++l) mismatches += (m[l] == 1.0) != exact_flag(si[l], ui[l]);
      }
  EXPECT_GE(cases, 10000u);
  EXPECT_EQ(mismatches, 0u);
}

TEST(Baselines, Rules) {
  Rng rng(8);
  EXPECT_THROW(parse_strategy("bogus"), ConfigError);
  for (auto s : {Strategy::DirectAdd, Strategy::PairDiff, Strategy::PairDiffScaled, Strategy::PairDiffMasked})
    EXPECT_EQ(parse_strategy(strategy_name(s)), s);

  // Dyadic values keep the pair arithmetic exact.
  Array<double> safe({4, 3}), unsafe({4, 3});
  for (std::size_t k = 0; k < 12; ++k) {
    safe[k] = double(rng.range(-16, 16)) / 8;
    unsafe[k] = double(rng.range(-16, 16)) / 8;
  }
  Array<double> proto({3}, 0.25);
  EXPECT_EQ(baseline_redirect(Strategy::PairDiff, unsafe, safe, unsafe, proto, 1.0, 0.2), safe);
  EXPECT_EQ(baseline_redirect(Strategy::PairDiff, unsafe, unsafe, unsafe, proto, 1.0, 0.2), unsafe);
  auto da = baseline_redirect(Strategy::DirectAdd, unsafe, safe, unsafe, proto, 1.0, 0.2);
  for (std::size_t k = 0; k < 12; ++k) EXPECT_EQ(da[k], unsafe[k] + 0.25);
  auto sc = baseline_redirect(Strategy::PairDiffScaled, unsafe, safe, unsafe, proto, 1.5, 0.2);
  for (std::size_t k = 0; k < 12; ++k) EXPECT_EQ(sc[k], unsafe[k] + 1.5 * (safe[k] - unsafe[k]));
  EXPECT_THROW(baseline_redirect(Strategy::DirectAdd, unsafe, safe, unsafe, Array<double>({2}), 1.0, 0.2),
               DimensionError);
}

TEST(Baselines, MaskedRedirectionOnSyntheticWorld) {
  WorldConfig wc;
  wc.pairs = 30;
  const Dataset ds = generate_world(wc, 3);
  const std::size_t D = std::size_t(wc.D);
  for (const PairRecord& r : ds.records) {
    auto out = baseline_redirect(Strategy::PairDiffMasked, r.emb_unsafe, r.emb_safe, r.emb_unsafe, ds.world.prototype,
                                 1.5, wc.tau);
    for (int l = 0; l < r.L; ++l) {
      const std::size_t o = std::size_t(l) * D;
      std::span<const float> safe_tok(r.emb_safe.data() + o, D), before(r.emb_unsafe.data() + o, D),
          after(out.data() + o, D);
      const bool planted = r.m_star[std::size_t(l)] == 1.0f;
      if (planted) {
        EXPECT_GT(cosine<float>(after, safe_tok), cosine<float>(before, safe_tok));
      } else {
        for (std::size_t d = 0; d < D; ++d) EXPECT_EQ(after[d], before[d]);
      }
    }
  }
}
