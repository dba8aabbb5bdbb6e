#pragma once

// Inference hook and simulated denoising loop. A GuidanceSession is bound to
// one generation: detection reads the current (possibly redirected)
// embedding, but every shift is composed from the frozen base embedding, and
// an intervention suppresses detection for the next K steps.

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "saferedir/dataset.hpp"
#include "saferedir/model.hpp"
#include "saferedir/redirection.hpp"

namespace saferedir {

/// What a guide sees at a checked step. `step` counts from 1; `t` runs T..1.
struct GuideQuery {
  const Array<float>& z_t;    // C×H×W
  int t = 0;
  int T = 0;
  int step = 0;
  const Array<float>& p_hat;  // L×D
};

/// Detector decision plus the head outputs used when it says unsafe.
struct Verdict {
  bool unsafe = false;
  Array<float> delta;  // L×D
  Array<float> mask;   // L
  Array<float> alpha;  // L
};

using Guide = std::function<Verdict(const GuideQuery&)>;

struct SessionEvent {
  int step = 0;
  int t = 0;
  bool checked = false;
  bool detected = false;
  bool intervened = false;
  friend bool operator==(const SessionEvent&, const SessionEvent&) = default;
};

class GuidanceSession {
 public:
  GuidanceSession(Array<float> base, int K, double alpha_scale, bool hard_mask = false)
      : base_(std::move(base)), K_(K), alpha_scale_(alpha_scale), hard_mask_(hard_mask) {
    if (base_.rank() != 2 || base_.dim(0) == 0 || base_.dim(1) == 0)
      throw SessionError("session needs an L×D embedding, got " + shape_str(base_.shape()));
    if (K_ < 0) throw SessionError("cooldown K must be nonnegative, got " + std::to_string(K_));
    if (!(alpha_scale_ >= 0)) throw SessionError("alpha_scale must be nonnegative");
    const std::size_t L = base_.dim(0), D = base_.dim(1);
    ref_norms_ = Array<float>({L});
    for (std::size_t l = 0; l < L; ++l) {
      double s = 0;
      for (std::size_t d = 0; d < D; ++d) s += double(base_[l * D + d]) * base_[l * D + d];
      ref_norms_[l] = float(std::sqrt(s));
    }
    current_ = base_;
  }

  /// One denoising step. Returns the embedding to condition on.
  const Array<float>& step(const Array<float>& z_t, int t, int T, const Guide& guide) {
    SessionEvent ev;
    ev.step = int(log_.size()) + 1;
    ev.t = t;
    if (cnt_ > 0) {
      --cnt_;
    } else {
      ev.checked = true;
      Verdict v = guide(GuideQuery{z_t, t, T, ev.step, current_});
      if (v.unsafe) {
        ev.detected = true;
        if (v.delta.shape() != base_.shape())
          throw SessionError("guide delta " + shape_str(v.delta.shape()) + " does not match embedding " +
                             shape_str(base_.shape()));
        if (v.mask.size() != base_.dim(0) || v.alpha.size() != base_.dim(0))
          throw SessionError("guide mask/alpha must have one entry per token");
        current_ = redirect_from_base(base_, v.delta, v.mask, v.alpha, alpha_scale_, ref_norms_, hard_mask_).p_hat;
        cnt_ = K_;
        ev.intervened = true;
      }
    }
    log_.push_back(ev);
    return current_;
  }

  const Array<float>& base() const { return base_; }
  const Array<float>& ref_norms() const { return ref_norms_; }
  const Array<float>& current() const { return current_; }
  int cnt() const { return cnt_; }
  int K() const { return K_; }
  double alpha_scale() const { return alpha_scale_; }
  const std::vector<SessionEvent>& log() const { return log_; }

  std::vector<int> intervention_steps() const {
    std::vector<int> out;
    for (const auto& e : log_)
      if (e.intervened) out.push_back(e.step);
    return out;
  }

 private:
  Array<float> base_, ref_norms_, current_;
  int K_ = 0;
  double alpha_scale_ = 1.0;
  bool hard_mask_ = false;
  int cnt_ = 0;
  std::vector<SessionEvent> log_;
};

/// Intervention steps implied by a per-step detector answer sequence: an
/// intervention at step i blocks detection through step i + K.
inline std::vector<int> cooldown_oracle(const std::vector<bool>& unsafe, int K) {
  std::vector<int> out;
  int next = 1;
  for (int i = 1; i <= int(unsafe.size()); ++i)
    if (i >= next && unsafe[std::size_t(i - 1)]) {
      out.push_back(i);
      next = i + K + 1;
    }
  return out;
}

/// Stub detector answering `unsafe[step - 1]`, with a unit shift along the
/// first embedding axis and m = α = 1.
inline Guide stub_guide(std::vector<bool> unsafe) {
  return [unsafe = std::move(unsafe)](const GuideQuery& q) {
    Verdict v;
    v.unsafe = unsafe.at(std::size_t(q.step - 1));
    if (v.unsafe) {
      const std::size_t L = q.p_hat.dim(0), D = q.p_hat.dim(1);
      v.delta = Array<float>({L, D});
      for (std::size_t l = 0; l < L; ++l) v.delta[l * D] = 1.0f;
      v.mask = Array<float>({L}, 1.0f);
      v.alpha = Array<float>({L}, 1.0f);
    }
    return v;
  };
}

/// Simulation step t ∈ [0, T_sim] mapped onto the model's training schedule.
inline int model_timestep(int t, int T_sim, int T_model) {
  if (T_sim == T_model) return t;
  return int(std::lround(double(t) * T_model / T_sim));
}

/// Guide backed by a trained redirector (batch of one, inference mode).
inline Guide model_guide(Redirector<float>& model, const Ablations& ab = {}) {
  return [&model, ab](const GuideQuery& q) {
    const WorldConfig& wc = model.world_config();
    if (q.p_hat.rank() != 2 || q.p_hat.dim(1) != model.D())
      throw SessionError("embedding " + shape_str(q.p_hat.shape()) + " does not match model D=" +
                         std::to_string(model.D()));
    const std::size_t Z = std::size_t(wc.C * wc.H * wc.W);
    if (q.z_t.size() != Z)
      throw SessionError("latent " + shape_str(q.z_t.shape()) + " does not match model latent " +
                         std::to_string(wc.C) + "×" + std::to_string(wc.H) + "×" + std::to_string(wc.W));
    const std::size_t L = q.p_hat.dim(0), D = q.p_hat.dim(1);
    ModelInput<float> in;
    in.z = q.z_t.reshaped({1, std::size_t(wc.C), std::size_t(wc.H), std::size_t(wc.W)});
    in.t = {model_timestep(q.t, q.T, wc.T)};
    in.tokens = q.p_hat.reshaped({1, L, D});
    GuidanceOutput<float> out = model.infer(in, ab);
    Verdict v;
    v.unsafe = model.decide_row(out.logits, 0) == 1;
    v.delta = out.delta.reshaped({L, D});
    v.mask = out.mask.reshaped({L});
    v.alpha = out.alpha.reshaped({L});
    return v;
  };
}

struct SimOptions {
  int T = 50;
  int K = 5;
  double alpha_scale = 1.0;
  bool hard_mask = false;
  std::uint64_t seed = 0;
};

inline SimOptions sim_options(const InferenceConfig& ic, int T, std::uint64_t seed) {
  return {T, ic.K, ic.alpha_scale, ic.hard_mask, seed};
}

struct StepTrace {
  int step = 0;
  int t = 0;
  bool checked = false;
  bool detected = false;
  bool intervened = false;
  bool world_unsafe = false;   // ground truth of the conditioning embedding
  double latent_signal = 0;    // ⟨z_t, U⟩ entering the step
};

struct GenerationTrace {
  std::vector<StepTrace> steps;
  std::vector<Array<float>> latents;     // z_t entering each step
  std::vector<Array<float>> embeddings;  // conditioning used at each step
  std::vector<int> intervention_steps;
  Array<float> base;
  Array<float> final_embedding;
  Array<float> final_latent;
  double final_signal = 0;  // ⟨z_0, U⟩ / s; ≈ 1 for unsafe content, ≈ 0 otherwise
};

namespace detail {

inline double dot(const Array<float>& a, const Array<float>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += double(a[i]) * b[i];
  return s;
}

}  // namespace detail

/// Deterministic DDIM-style loop over the world's schedule shape. The mock
/// denoiser predicts x̂₀ = s·U when the conditioning embedding is unsafe under
/// the world ground truth and 0 otherwise. `guide == nullptr` disables the
/// hook.
inline GenerationTrace run_generation(const Array<float>& prompt, const World& world, const Guide* guide,
                                      const SimOptions& opt) {
  if (opt.T < 1) throw ConfigError("simulation T must be >= 1");
  if (prompt.rank() != 2 || prompt.dim(1) != std::size_t(world.cfg.D))
    throw SessionError("prompt " + shape_str(prompt.shape()) + " does not match world D=" +
                       std::to_string(world.cfg.D));
  const MockSchedule sched(opt.T);
  GuidanceSession session(prompt, opt.K, opt.alpha_scale, opt.hard_mask);
  Rng rng(opt.seed);
  Array<float> z(world.U.shape());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = float(rng.normal());

  GenerationTrace tr;
  tr.base = prompt;
  for (int step = 1; step <= opt.T; ++step) {
    const int t = opt.T - step + 1;
    const Array<float>& p = guide ? session.step(z, t, opt.T, *guide) : prompt;
    StepTrace st;
    st.step = step;
    st.t = t;
    if (guide) {
      const SessionEvent& ev = session.log().back();
      st.checked = ev.checked;
      st.detected = ev.detected;
      st.intervened = ev.intervened;
    }
    st.world_unsafe = world_unsafe(world, p);
    st.latent_signal = detail::dot(z, world.U);
    tr.latents.push_back(z);
    tr.embeddings.push_back(p);
    tr.steps.push_back(st);

    const double a_t = sched.alpha_bar[std::size_t(t)], a_prev = sched.alpha_bar[std::size_t(t - 1)];
    const double x0_scale = st.world_unsafe ? world.cfg.signal : 0.0;
    const double sa = std::sqrt(a_t), sb = std::sqrt(std::max(1.0 - a_t, 0.0));
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double x0 = x0_scale * world.U[i];
      const double eps = sb > 0 ? (z[i] - sa * x0) / sb : 0.0;
      z[i] = float(std::sqrt(a_prev) * x0 + std::sqrt(std::max(1.0 - a_prev, 0.0)) * eps);
    }
  }
  tr.intervention_steps = session.intervention_steps();
  tr.final_embedding = guide ? session.current() : prompt;
  tr.final_latent = z;
  tr.final_signal = detail::dot(z, world.U) / world.cfg.signal;
  return tr;
}

/// A prompt to simulate, with the pair ground truth needed for scoring.
struct SimPrompt {
  int record = 0;
  int label = 0;
  Array<float> p;         // L×D
  Array<float> emb_safe;  // L×D
  Array<float> m_star;    // L, planted positions of the pair
};

/// Safe and unsafe prompt of every record whose base is listed.
inline std::vector<SimPrompt> prompts_for(const Dataset& ds, const std::vector<int>& bases) {
  std::vector<SimPrompt> out;
  for (const PairRecord& r : ds.records) {
    if (std::find(bases.begin(), bases.end(), r.base) == bases.end()) continue;
    for (int label = 0; label < 2; ++label)
      out.push_back({r.id, label, label ? r.emb_unsafe : r.emb_safe, r.emb_safe, r.m_star});
  }
  return out;
}

inline std::vector<GenerationTrace> simulate(const std::vector<SimPrompt>& prompts, const World& world,
                                             const Guide* guide, const SimOptions& opt) {
  std::vector<GenerationTrace> out;
  out.reserve(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    SimOptions o = opt;
    o.seed = Rng::derive(opt.seed, std::uint64_t(i));
    out.push_back(run_generation(prompts[i].p, world, guide, o));
  }
  return out;
}

/// Frozen reference detector: logistic regression on a log-sum-exp max-pool
/// of per-token scores, s(p) = (1/β)·log Σ_l exp(β·w·p_l) + b. Trained on its
/// own, it shares nothing with the redirector.
struct ReferenceDetector {
  std::vector<double> w;
  double b = 0;
  double beta = 10;

  double score(const Array<float>& p) const {
    const std::size_t D = w.size();
    if (p.rank() != 2 || p.dim(1) != D)
      throw DimensionError("reference detector expects L×" + std::to_string(D) + ", got " + shape_str(p.shape()));
    const std::size_t L = p.dim(0);
    std::vector<double> a(L);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l < L; ++l) {
      double s = 0;
      for (std::size_t d = 0; d < D; ++d) s += w[d] * p[l * D + d];
      a[l] = beta * s;
      mx = std::max(mx, a[l]);
    }
    double z = 0;
    for (double x : a) z += std::exp(x - mx);
    return (mx + std::log(z)) / beta + b;
  }

  bool unsafe(const Array<float>& p) const { return score(p) > 0; }
};

struct LabeledPrompt {
  Array<float> p;
  int label = 0;
};

/// Mean logistic loss plus (l2/2)·‖w‖²; fills the gradient when asked.
inline double reference_loss(const ReferenceDetector& det, const std::vector<LabeledPrompt>& data, double l2,
                             std::vector<double>* gw = nullptr, double* gb = nullptr) {
  const std::size_t D = det.w.size();
  if (gw) gw->assign(D, 0.0);
  if (gb) *gb = 0;
  double loss = 0;
  const double n = double(data.size());
  for (const auto& ex : data) {
    const double s = det.score(ex.p);
    const double y = ex.label;
    // log(1 + e^s) − y·s, stable in both tails.
    loss += (s > 0 ? s + std::log1p(std::exp(-s)) : std::log1p(std::exp(s))) - y * s;
    if (!gw) continue;
    const double r = (sigmoid(s) - y) / n;
    const std::size_t L = ex.p.dim(0);
    std::vector<double> a(L);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l < L; ++l) {
      double v = 0;
      for (std::size_t d = 0; d < D; ++d) v += det.w[d] * ex.p[l * D + d];
      a[l] = det.beta * v;
      mx = std::max(mx, a[l]);
    }
    double z = 0;
    for (double& x : a) z += (x = std::exp(x - mx));
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t d = 0; d < D; ++d) (*gw)[d] += r * (a[l] / z) * ex.p[l * D + d];
    *gb += r;
  }
  double reg = 0;
  for (std::size_t d = 0; d < D; ++d) {
    reg += det.w[d] * det.w[d];
    if (gw) (*gw)[d] += l2 * det.w[d];
  }
  return loss / n + 0.5 * l2 * reg;
}

struct ReferenceFitOptions {
  int iters = 400;
  double lr = 0.05;
  double l2 = 1e-3;
  double beta = 10;
};

/// Full-batch Adam from w = 0.
inline ReferenceDetector fit_reference_detector(const std::vector<LabeledPrompt>& data, std::size_t D,
                                                const ReferenceFitOptions& opt = {}) {
  if (data.empty()) throw DomainError("reference detector needs training prompts");
  ReferenceDetector det;
  det.w.assign(D, 0.0);
  det.beta = opt.beta;
  std::vector<double> m(D + 1, 0.0), v(D + 1, 0.0), gw;
  double gb = 0;
  const double b1 = 0.9, b2 = 0.999;
  for (int it = 1; it <= opt.iters; ++it) {
    reference_loss(det, data, opt.l2, &gw, &gb);
    gw.push_back(gb);
    const double c1 = 1 - std::pow(b1, it), c2 = 1 - std::pow(b2, it);
    for (std::size_t k = 0; k <= D; ++k) {
      m[k] = b1 * m[k] + (1 - b1) * gw[k];
      v[k] = b2 * v[k] + (1 - b2) * gw[k] * gw[k];
      const double upd = opt.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + 1e-8);
      (k < D ? det.w[k] : det.b) -= upd;
    }
  }
  return det;
}

/// Reference detector trained on both prompts of every train-split pair.
inline ReferenceDetector fit_reference_detector(const Dataset& ds, const Split& sp,
                                                const ReferenceFitOptions& opt = {}) {
  std::vector<LabeledPrompt> data;
  for (const SimPrompt& sp_ : prompts_for(ds, sp.train_bases)) data.push_back({sp_.p, sp_.label});
  return fit_reference_detector(data, std::size_t(ds.world.cfg.D), opt);
}

struct SafetyMetrics {
  double forget_rate = std::numeric_limits<double>::quiet_NaN();
  double benign_passthrough_rate = std::numeric_limits<double>::quiet_NaN();
  double mean_masked_shift = 0;    // mean ‖p̂_l − p_l‖ over planted tokens of unsafe prompts
  double mean_unmasked_shift = 0;  // same over the other tokens of unsafe prompts
  std::map<int, int> intervention_hist;  // interventions per trace → number of traces
  double overhead_ratio = std::numeric_limits<double>::quiet_NaN();
  std::size_t unsafe_traces = 0, safe_traces = 0;
};

namespace detail {

/// Accumulates per-token displacement split by the planted-position mask.
inline void add_shift(const Array<float>& from, const Array<float>& to, const Array<float>& m_star, double& masked,
                      std::size_t& n_masked, double& unmasked, std::size_t& n_unmasked) {
  const std::size_t L = from.dim(0), D = from.dim(1);
  for (std::size_t l = 0; l < L; ++l) {
    double s = 0;
    for (std::size_t d = 0; d < D; ++d) {
      const double e = double(to[l * D + d]) - from[l * D + d];
      s += e * e;
    }
    if (m_star[l] > 0.5f) {
      masked += std::sqrt(s);
      ++n_masked;
    } else {
      unmasked += std::sqrt(s);
      ++n_unmasked;
    }
  }
}

}  // namespace detail

/// Scores finished traces. Empty denominators leave the rate as NaN.
inline SafetyMetrics evaluate_safety(const std::vector<GenerationTrace>& traces, const std::vector<SimPrompt>& prompts,
                                     const ReferenceDetector& ref) {
  if (traces.size() != prompts.size()) throw DimensionError("one trace per prompt expected");
  SafetyMetrics m;
  std::size_t forgotten = 0, passed = 0, n_masked = 0, n_unmasked = 0;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const GenerationTrace& tr = traces[i];
    const SimPrompt& pr = prompts[i];
    ++m.intervention_hist[int(tr.intervention_steps.size())];
    if (pr.label == 1) {
      ++m.unsafe_traces;
      if (!ref.unsafe(tr.final_embedding)) ++forgotten;
      detail::add_shift(tr.base, tr.final_embedding, pr.m_star, m.mean_masked_shift, n_masked, m.mean_unmasked_shift,
                        n_unmasked);
    } else {
      ++m.safe_traces;
      bool unchanged = tr.intervention_steps.empty() && tr.final_embedding == tr.base;
      for (const auto& e : tr.embeddings) unchanged = unchanged && e == tr.base;
      passed += unchanged;
    }
  }
  if (m.unsafe_traces) m.forget_rate = double(forgotten) / double(m.unsafe_traces);
  if (m.safe_traces) m.benign_passthrough_rate = double(passed) / double(m.safe_traces);
  m.mean_masked_shift = n_masked ? m.mean_masked_shift / double(n_masked) : 0;
  m.mean_unmasked_shift = n_unmasked ? m.mean_unmasked_shift / double(n_unmasked) : 0;
  return m;
}

/// Wall time of the simulation with the hook over the time without it.
inline double measure_overhead(const std::vector<SimPrompt>& prompts, const World& world, const Guide& guide,
                               const SimOptions& opt) {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  simulate(prompts, world, &guide, opt);
  const auto t1 = clock::now();
  simulate(prompts, world, nullptr, opt);
  const auto t2 = clock::now();
  const double with = std::chrono::duration<double>(t1 - t0).count();
  const double without = std::chrono::duration<double>(t2 - t1).count();
  return without > 0 ? with / without : std::numeric_limits<double>::infinity();
}

struct BaselineResult {
  Strategy strategy = Strategy::DirectAdd;
  double forget_rate = 0;
  double mean_masked_shift = 0;
  double mean_unmasked_shift = 0;
};

/// One-shot baseline redirection of every unsafe prompt, scored by the
/// reference detector.
inline BaselineResult evaluate_baseline(Strategy s, const std::vector<SimPrompt>& prompts, const World& world,
                                        const ReferenceDetector& ref, double alpha_fixed) {
  BaselineResult r;
  r.strategy = s;
  std::size_t n = 0, forgotten = 0, n_masked = 0, n_unmasked = 0;
  for (const SimPrompt& pr : prompts) {
    if (pr.label != 1) continue;
    const Array<float> out = baseline_redirect(s, pr.p, pr.emb_safe, pr.p, world.prototype, alpha_fixed,
                                               world.cfg.tau);
    ++n;
    if (!ref.unsafe(out)) ++forgotten;
    detail::add_shift(pr.p, out, pr.m_star, r.mean_masked_shift, n_masked, r.mean_unmasked_shift, n_unmasked);
  }
  if (n == 0) throw DomainError("baseline evaluation needs unsafe prompts");
  r.forget_rate = double(forgotten) / double(n);
  r.mean_masked_shift = n_masked ? r.mean_masked_shift / double(n_masked) : 0;
  r.mean_unmasked_shift = n_unmasked ? r.mean_unmasked_shift / double(n_unmasked) : 0;
  return r;
}

/// Step records and outcome of one trace; no timings, so equal runs give
/// equal documents.
inline json trace_json(const GenerationTrace& tr) {
  json steps = json::array();
  for (const StepTrace& s : tr.steps)
    steps.push_back({{"step", s.step},
                     {"t", s.t},
                     {"checked", s.checked},
                     {"detected", s.detected},
                     {"intervened", s.intervened},
                     {"world_unsafe", s.world_unsafe},
                     {"latent_signal", s.latent_signal}});
  return {{"steps", steps},
          {"intervention_steps", tr.intervention_steps},
          {"final_signal", tr.final_signal},
          {"final_embedding", tr.final_embedding.vec()}};
}

inline json metrics_json(const SafetyMetrics& m) {
  json hist = json::object();
  for (const auto& [k, v] : m.intervention_hist) hist[std::to_string(k)] = v;
  return {{"forget_rate", m.forget_rate},
          {"benign_passthrough_rate", m.benign_passthrough_rate},
          {"mean_masked_shift", m.mean_masked_shift},
          {"mean_unmasked_shift", m.mean_unmasked_shift},
          {"intervention_count_hist", hist},
          {"unsafe_traces", m.unsafe_traces},
          {"safe_traces", m.safe_traces}};
}

}  // namespace saferedir
