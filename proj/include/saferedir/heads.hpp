#pragma once

// Safety classifier, delta generator with low-rank adapter, token mask
// predictor and gated scale predictor.

#include <cmath>
#include <string>
#include <vector>

#include "saferedir/encoders.hpp"

namespace saferedir {

/// Token-position sinusoids broadcast over the batch: [B×L×dim].
template <class T>
Array<T> position_sinusoids(std::size_t B, std::size_t L, std::size_t dim) {
  Array<T> out({B, L, dim});
  for (std::size_t l = 0; l < L; ++l) {
    auto row = sinusoid<T>(double(l), dim);
    for (std::size_t b = 0; b < B; ++b) std::copy(row.begin(), row.end(), out.data() + (b * L + l) * dim);
  }
  return out;
}

template <class T>
struct Classifier {
  Parameter<T> w1, b1, w2, b2, w3, b3;

  Classifier() = default;
  Classifier(std::size_t D, std::size_t hidden, Rng& rng)
      : w1(make_weight<T>("cls.w1", {D, hidden}, D, rng)),
        b1(make_const<T>("cls.b1", {hidden}, 0)),
        w2(make_weight<T>("cls.w2", {hidden, hidden}, hidden, rng)),
        b2(make_const<T>("cls.b2", {hidden}, 0)),
        w3(make_weight<T>("cls.w3", {hidden, 2}, hidden, rng)),
        b3(make_const<T>("cls.b3", {2}, 0)) {}

  void collect(std::vector<Parameter<T>*>& out) {
    for (auto* p : {&w1, &b1, &w2, &b2, &w3, &b3}) out.push_back(p);
  }

  Var forward(Graph<T>& g, Var f_attn) {
    Var h = ad::silu(g, ad::linear(g, f_attn, g.param(w1), g.param(b1)));
    h = ad::silu(g, ad::linear(g, h, g.param(w2), g.param(b2)));
    return ad::linear(g, h, g.param(w3), g.param(b3));
  }
};

/// argmax over two logits; ties resolve to safe (0) unless tie_unsafe.
template <class T>
int decide(T safe_logit, T unsafe_logit, bool tie_unsafe = false) {
  if (unsafe_logit > safe_logit) return 1;
  if (unsafe_logit < safe_logit) return 0;
  return tie_unsafe ? 1 : 0;
}

template <class T>
struct DeltaHead {
  // Projection of [f_joint; f_attn; token] to width 2D, split by input block.
  Parameter<T> w_joint, w_attn, w_token, b_proj;
  Parameter<T> w1, b1, w2, b2;
  Parameter<T> lora_a, lora_bt;  // adapter on w2: ΔW = A·Bᵀ, Bᵀ stored [r×D]

  DeltaHead() = default;
  DeltaHead(std::size_t joint_dim, std::size_t D, std::size_t width, std::size_t rank, Rng& rng) {
    const std::size_t fan = joint_dim + 2 * D;
    w_joint = make_weight<T>("delta.w_joint", {joint_dim, width}, fan, rng);
    w_attn = make_weight<T>("delta.w_attn", {D, width}, fan, rng);
    w_token = make_weight<T>("delta.w_token", {D, width}, fan, rng);
    b_proj = make_const<T>("delta.b_proj", {width}, 0);
    w1 = make_weight<T>("delta.w1", {width, width}, width, rng);
    b1 = make_const<T>("delta.b1", {width}, 0);
    w2 = make_weight<T>("delta.w2", {width, D}, width, rng);
    b2 = make_const<T>("delta.b2", {D}, 0);
    lora_a = make_weight<T>("delta.lora_a", {width, rank}, width, rng);
    lora_bt = make_const<T>("delta.lora_bt", {rank, D}, 0);
  }

  void collect(std::vector<Parameter<T>*>& out) {
    for (auto* p : {&w_joint, &w_attn, &w_token, &b_proj, &w1, &b1, &w2, &b2, &lora_a, &lora_bt}) out.push_back(p);
  }

  /// Raw shift Δ[B×L×D].
  Var forward(Graph<T>& g, Var f_joint, Var f_attn, Var tokens) {
    const std::size_t L = g.shape(tokens)[1];
    Var ctx = ad::add(g, ad::linear(g, f_joint, g.param(w_joint)), ad::linear(g, f_attn, g.param(w_attn)));
    Var proj = ad::add(g, ad::broadcast_tokens(g, ctx, L), ad::linear(g, tokens, g.param(w_token), g.param(b_proj)));
    Var h = ad::silu(g, proj);
    h = ad::silu(g, ad::linear(g, h, g.param(w1), g.param(b1)));
    Var base = ad::linear(g, h, g.param(w2), g.param(b2));
    return ad::add(g, base, adapter(g, h));
  }

  Var adapter(Graph<T>& g, Var h) { return ad::linear(g, ad::linear(g, h, g.param(lora_a)), g.param(lora_bt)); }
};

template <class T>
struct MaskHead {
  Parameter<T> w_q, w_k, w_v, w1, b1, w2, b2;
  bool position_signal = false;
  std::size_t pos_dim = 32;

  MaskHead() = default;
  MaskHead(std::size_t D, std::size_t hidden, bool position_signal_, std::size_t pos_dim_, Rng& rng)
      : position_signal(position_signal_), pos_dim(pos_dim_) {
    const std::size_t in = 2 * D + (position_signal ? pos_dim : 0);
    w_q = make_weight<T>("mask.w_q", {D, D}, D, rng);
    w_k = make_weight<T>("mask.w_k", {D, D}, D, rng);
    w_v = make_weight<T>("mask.w_v", {D, D}, D, rng);
    w1 = make_weight<T>("mask.w1", {in, hidden}, in, rng);
    b1 = make_const<T>("mask.b1", {hidden}, 0);
    w2 = make_weight<T>("mask.w2", {hidden, 1}, hidden, rng);
    b2 = make_const<T>("mask.b2", {1}, 0);
  }

  void collect(std::vector<Parameter<T>*>& out) {
    for (auto* p : {&w_q, &w_k, &w_v, &w1, &b1, &w2, &b2}) out.push_back(p);
  }

  /// Soft mask m[B×L] in (0, 1).
  Var forward(Graph<T>& g, Var tokens) {
    const Shape& s = g.shape(tokens);
    const std::size_t B = s[0], L = s[1], D = s[2];
    if (L == 0) throw DomainError("mask head needs at least one token");
    Var q = ad::linear(g, tokens, g.param(w_q));
    Var k = ad::linear(g, tokens, g.param(w_k));
    Var v = ad::linear(g, tokens, g.param(w_v));
    Var att = ad::softmax_last(g, ad::scale(g, ad::bmm(g, q, k, true), T(1 / std::sqrt(double(D)))));
    Var feat = ad::concat_last(g, ad::bmm(g, att, v), tokens);
    if (position_signal) feat = ad::concat_last(g, feat, g.constant(position_sinusoids<T>(B, L, pos_dim)));
    Var h = ad::silu(g, ad::linear(g, feat, g.param(w1), g.param(b1)));
    return ad::reshape(g, ad::sigmoid(g, ad::linear(g, h, g.param(w2), g.param(b2))), {B, L});
  }
};

template <class T>
struct AlphaHead {
  Parameter<T> w1, b1, w2, b2, w_gate, b_gate;
  std::size_t pos_dim = 32;

  AlphaHead() = default;
  AlphaHead(std::size_t D, std::size_t hidden, std::size_t pos_dim_, Rng& rng) : pos_dim(pos_dim_) {
    w1 = make_weight<T>("alpha.w1", {D, hidden}, D, rng);
    b1 = make_const<T>("alpha.b1", {hidden}, 0);
    w2 = make_weight<T>("alpha.w2", {hidden, 1}, hidden, rng);
    b2 = make_const<T>("alpha.b2", {1}, 0);
    w_gate = make_weight<T>("alpha.w_gate", {D + pos_dim, 1}, D + pos_dim, rng);
    b_gate = make_const<T>("alpha.b_gate", {1}, 0);
  }

  void collect(std::vector<Parameter<T>*>& out) {
    for (auto* p : {&w1, &b1, &w2, &b2, &w_gate, &b_gate}) out.push_back(p);
  }

  /// α[B×L] = MLP(token) · sigmoid(w_g·[token; pos] + b_g).
  Var forward(Graph<T>& g, Var tokens) {
    const Shape& s = g.shape(tokens);
    const std::size_t B = s[0], L = s[1];
    Var h = ad::silu(g, ad::linear(g, tokens, g.param(w1), g.param(b1)));
    Var a = ad::sigmoid(g, ad::linear(g, h, g.param(w2), g.param(b2)));
    Var gin = ad::concat_last(g, tokens, g.constant(position_sinusoids<T>(B, L, pos_dim)));
    Var gate = ad::sigmoid(g, ad::linear(g, gin, g.param(w_gate), g.param(b_gate)));
    return ad::reshape(g, ad::mul(g, a, gate), {B, L});
  }
};

}  // namespace saferedir
