#pragma once

// The full redirector: encoders, fusion and the four heads, with a stable
// parameter enumeration (module declaration order, then field order).

#include <string>
#include <vector>

#include "saferedir/config.hpp"
#include "saferedir/fusion.hpp"
#include "saferedir/heads.hpp"

namespace saferedir {

template <class T>
struct ModelInput {
  Array<T> z;            // B×C×H×W
  std::vector<int> t;    // B
  Array<T> tokens;       // B×L×D
};

/// Model input plus supervision for one batch of data items.
template <class T>
struct Batch {
  ModelInput<T> input;
  std::vector<int> labels;  // 0 safe, 1 unsafe
  Array<T> emb_safe;        // B×L×D
  Array<T> emb_unsafe;      // B×L×D
  Array<T> m_star;          // B×L
  std::size_t size() const { return labels.size(); }
};

struct ForwardVars {
  Var logits, delta, mask, alpha;
  Var f_z, f_t, f_joint, f_attn, attn_weights;
};

/// Materialized head outputs for one batch.
template <class T>
struct GuidanceOutput {
  Array<T> logits;  // B×2
  Array<T> delta;   // B×L×D
  Array<T> mask;    // B×L
  Array<T> alpha;   // B×L
};

template <class T>
class Redirector {
 public:
  Redirector() = default;
  Redirector(const ModelConfig& mc, const WorldConfig& wc, std::uint64_t seed) : mc_(mc), wc_(wc) {
    Rng rng(seed);
    const std::size_t D = std::size_t(wc.D), joint = std::size_t(mc.f_z + mc.f_t);
    latent = LatentEncoder<T>(std::size_t(wc.C), std::size_t(wc.H), std::size_t(wc.W), mc.latent_widths,
                              std::size_t(mc.groups), std::size_t(mc.se_reduction), std::size_t(mc.f_z), rng);
    timestep = TimestepEncoder<T>(std::size_t(mc.f_t), wc.T);
    fusion = CrossAttention<T>(joint, D, std::size_t(mc.heads), rng);
    classifier = Classifier<T>(D, std::size_t(mc.cls_hidden), rng);
    delta_head = DeltaHead<T>(joint, D, D * std::size_t(mc.delta_width_mult), std::size_t(mc.lora_rank), rng);
    mask_head = MaskHead<T>(D, std::size_t(mc.mask_hidden), mc.mask_position_signal, std::size_t(mc.pos_dim), rng);
    alpha_head = AlphaHead<T>(D, std::size_t(mc.alpha_hidden), std::size_t(mc.pos_dim), rng);
  }

  // Redirector holds Parameter objects that graphs point into.
  Redirector(const Redirector&) = default;
  Redirector& operator=(const Redirector&) = default;

  LatentEncoder<T> latent;
  TimestepEncoder<T> timestep;
  CrossAttention<T> fusion;
  Classifier<T> classifier;
  DeltaHead<T> delta_head;
  MaskHead<T> mask_head;
  AlphaHead<T> alpha_head;

  const ModelConfig& model_config() const { return mc_; }
  const WorldConfig& world_config() const { return wc_; }
  std::size_t D() const { return std::size_t(wc_.D); }

  std::vector<Parameter<T>*> params() {
    std::vector<Parameter<T>*> out;
    latent.collect(out);
    timestep.collect(out);
    fusion.collect(out);
    classifier.collect(out);
    delta_head.collect(out);
    mask_head.collect(out);
    alpha_head.collect(out);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : params()) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto* p : params()) p->zero_grad();
  }

  /// Builds the whole forward pass. `rng` drives token dropout and is only
  /// consulted when training.
  ForwardVars forward(Graph<T>& g, const ModelInput<T>& in, const Ablations& ab, bool training, Rng* rng) {
    const Shape& ts = in.tokens.shape();
    if (ts.size() != 3 || ts[2] != D())
      throw DimensionError("token embedding " + shape_str(ts) + " does not match model D=" + std::to_string(D()));
    const std::size_t B = ts[0], L = ts[1];
    if (L == 0) throw DomainError("prompt must have at least one token");
    if (in.t.size() != B || in.z.rank() != 4 || in.z.dim(0) != B)
      throw DimensionError("batch extents disagree: tokens " + shape_str(ts) + ", latent " + shape_str(in.z.shape()) +
                           ", " + std::to_string(in.t.size()) + " timesteps");
    ForwardVars f;
    f.f_z = ab.no_latent ? g.constant(Array<T>({B, std::size_t(mc_.f_z)})) : latent.forward(g, g.constant(in.z));
    f.f_t = ab.no_timestep ? g.constant(Array<T>({B, std::size_t(mc_.f_t)})) : timestep.forward(g, in.t);
    f.f_joint = joint_context(g, f.f_z, f.f_t, std::size_t(mc_.f_z), std::size_t(mc_.f_t));

    Var tokens = g.constant(in.tokens);
    Var fusion_tokens;
    if (ab.no_prompt)
      fusion_tokens = g.constant(Array<T>(ts));
    else if (training && mc_.token_dropout > 0)
      fusion_tokens = g.constant(token_dropout(in.tokens, mc_.token_dropout, true, *rng));
    else
      fusion_tokens = tokens;
    FusedVars fused = fusion.forward(g, f.f_joint, fusion_tokens);
    f.f_attn = fused.f_attn;
    f.attn_weights = fused.weights;

    f.logits = classifier.forward(g, f.f_attn);
    f.delta = delta_head.forward(g, f.f_joint, f.f_attn, tokens);
    f.mask = ab.no_mask ? g.constant(Array<T>({B, L}, T{1})) : mask_head.forward(g, tokens);
    f.alpha = ab.no_alpha ? g.constant(Array<T>({B, L}, T{1})) : alpha_head.forward(g, tokens);
    return f;
  }

  /// Inference-mode forward (no dropout, no tape).
  GuidanceOutput<T> infer(const ModelInput<T>& in, const Ablations& ab = {}) {
    Graph<T> g(false);
    ForwardVars f = forward(g, in, ab, false, nullptr);
    return {g.value(f.logits), g.value(f.delta), g.value(f.mask), g.value(f.alpha)};
  }

  int decide_row(const Array<T>& logits, std::size_t b) const {
    return decide(logits[b * 2], logits[b * 2 + 1], mc_.tie_unsafe);
  }

  /// Same architecture and values at another precision.
  template <class U>
  Redirector<U> cast() const {
    Redirector<U> out(mc_, wc_, 0);
    auto src = const_cast<Redirector*>(this)->params();
    auto dst = out.params();
    for (std::size_t i = 0; i < src.size(); ++i) {
      dst[i]->value = src[i]->value.template cast<U>();
      dst[i]->zero_grad();
    }
    return out;
  }

 private:
  ModelConfig mc_;
  WorldConfig wc_;
};

}  // namespace saferedir
