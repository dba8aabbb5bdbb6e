#pragma once

#include <string>
#include <vector>

#include "saferedir/encoders.hpp"

namespace saferedir {

struct FusedVars {
  Var f_attn;
  Var weights;  // B×H×L
};

/// Multi-head cross-attention with f_joint as the single query.
template <class T>
struct CrossAttention {
  Parameter<T> w_q, w_k, w_v, w_o, norm_g, norm_b;
  std::size_t heads = 4;

  CrossAttention() = default;
  CrossAttention(std::size_t joint_dim, std::size_t D, std::size_t heads_, Rng& rng)
      : w_q(make_weight<T>("fusion.w_q", {joint_dim, D}, joint_dim, rng)),
        w_k(make_weight<T>("fusion.w_k", {D, D}, D, rng)),
        w_v(make_weight<T>("fusion.w_v", {D, D}, D, rng)),
        w_o(make_weight<T>("fusion.w_o", {D, D}, D, rng)),
        norm_g(make_const<T>("fusion.norm_g", {D}, 1)),
        norm_b(make_const<T>("fusion.norm_b", {D}, 0)),
        heads(heads_) {}

  void collect(std::vector<Parameter<T>*>& out) {
    for (auto* p : {&w_q, &w_k, &w_v, &w_o, &norm_g, &norm_b}) out.push_back(p);
  }

  /// f_joint[B×J], tokens[B×L×D] → f_attn[B×D].
  FusedVars forward(Graph<T>& g, Var f_joint, Var tokens) {
    const Shape& ts = g.shape(tokens);
    if (ts.size() != 3) throw DimensionError("tokens must be B×L×D, got " + shape_str(ts));
    if (ts[1] == 0) throw DomainError("cross-attention needs at least one token");
    Var q = ad::linear(g, f_joint, g.param(w_q));
    Var k = ad::linear(g, tokens, g.param(w_k));
    Var v = ad::linear(g, tokens, g.param(w_v));
    Var w = ad::softmax_last(g, ad::head_scores(g, q, k, heads));
    Var mixed = ad::head_mix(g, w, v, heads);
    Var o = ad::linear(g, mixed, g.param(w_o));
    return {ad::layer_norm_last(g, o, g.param(norm_g), g.param(norm_b)), w};
  }
};

}  // namespace saferedir
