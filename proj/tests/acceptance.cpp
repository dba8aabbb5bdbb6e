// Acceptance run: one PASS/FAIL line per criterion, tolerances pinned below.
// Trains three desk-scale models, so expect roughly half an hour to an hour
// on one core.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

#include "saferedir/saferedir.hpp"

using namespace saferedir;

namespace {

constexpr double kGradTol = 1e-4;
constexpr double kGradSeconds = 120;
constexpr double kAccTri = 0.99;
constexpr double kAblationGap = 0.03;
constexpr double kProbeNoisyMax = 0.55;
constexpr double kProbeCleanMin = 0.90;
constexpr double kSpearmanMin = 0.9;
constexpr double kUnitTol = 1e-4;
constexpr double kUnitMinFiltered = 1e-3;
constexpr std::size_t kMaskCases = 10000;
constexpr int kCooldownSequences = 1000;
constexpr double kForgetMin = 0.95;
constexpr double kPipelineSeconds = 1800;
constexpr double kUnmaskedBudget = 1e-6;
constexpr double kBaselineAlpha = 1.5;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int n, const std::string& name, const Outcome& o) {
  std::printf("criterion %2d %s  %s: %s\n", n, o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
  std::fflush(stdout);
  failures += !o.pass;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

template <class T>
Array<T> draw(Shape s, Rng& rng, double lo = -1, double hi = 1) {
  Array<T> a(std::move(s));
  for (auto& v : a.vec()) v = T(rng.uniform(lo, hi));
  return a;
}

// ---- 1 ----------------------------------------------------------------------

Outcome gradient_fidelity() {
  const auto t0 = Clock::now();
  const ModelGradCheck r = model_grad_check(RunConfig{}, 1e-5, 1);
  const double secs = seconds_since(t0);
  bool ok = r.report.directional_rel_err <= kGradTol && secs < kGradSeconds;
  std::string worst;
  double worst_err = 0;
  for (const auto& [name, e] : r.blocks) {
    ok = ok && e <= kGradTol;
    if (e >= worst_err) {
      worst_err = e;
      worst = name;
    }
  }
  return {ok, fmt("%zu blocks, max rel err %.2e (%s), directional %.2e, %.1f s (limits %.0e, %.0f s)", r.blocks.size(),
                  worst_err, worst.c_str(), r.report.directional_rel_err, secs, kGradTol, kGradSeconds)};
}

// ---- 2 and 7 ------------------------------------------------------------------

struct TrainedRun {
  TrainResult result;
  double seconds = 0;
};

TrainedRun train_with(const Dataset& ds, const Split& sp, std::vector<std::string> flags, const char* label) {
  RunConfig cfg;
  for (const auto& f : flags) cfg.train.ablate.set(f);
  std::ostringstream log;
  TrainOptions opt;
  opt.log = &log;
  const auto t0 = Clock::now();
  TrainedRun r{train(cfg, ds, sp, opt), 0};
  r.seconds = seconds_since(t0);
  std::istringstream lines(log.str());
  for (std::string line; std::getline(lines, line);) std::printf("  [%s] %s\n", label, line.c_str());
  std::fflush(stdout);
  return r;
}

Outcome detection(const TrainedRun& tri, const TrainedRun& text, const TrainedRun& latent) {
  const double a = tri.result.best.best_acc, b = text.result.best.best_acc, c = latent.result.best.best_acc;
  const bool ok = a >= kAccTri && b <= a - kAblationGap && c <= a - kAblationGap;
  return {ok, fmt("tri-modal %.4f (epoch %d), text-only %.4f, latent-only %.4f (need >= %.2f and a %.0f-point gap)", a,
                  tri.result.best.epoch, b, c, kAccTri, 100 * kAblationGap)};
}

Outcome forget_preserve(const Dataset& ds, const Split& sp, const TrainedRun& tri, double gen_seconds) {
  Redirector<float> model = instantiate(tri.result.best);
  const auto t0 = Clock::now();
  const std::vector<SimPrompt> prompts = prompts_for(ds, sp.val_bases);
  const Guide guide = model_guide(model);
  const std::vector<GenerationTrace> traces = simulate(prompts, ds.world, &guide, sim_options(InferenceConfig{}, 50, 0));
  const ReferenceDetector ref = fit_reference_detector(ds, sp);
  const SafetyMetrics m = evaluate_safety(traces, prompts, ref);
  const double sim_seconds = seconds_since(t0);
  const double total = gen_seconds + tri.seconds + sim_seconds;

  // Planted tokens of redirected unsafe prompts should end closer to safe.
  std::size_t closer = 0, planted = 0;
  const std::size_t D = std::size_t(ds.world.cfg.D);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    if (prompts[i].label != 1) continue;
    for (std::size_t l = 0; l < prompts[i].m_star.size(); ++l) {
      if (prompts[i].m_star[l] != 1.0f) continue;
      std::span<const float> safe(prompts[i].emb_safe.data() + l * D, D);
      const double before = cosine<float>(std::span<const float>(prompts[i].p.data() + l * D, D), safe);
      const double after = cosine<float>(std::span<const float>(traces[i].final_embedding.data() + l * D, D), safe);
      closer += after > before;
      ++planted;
    }
  }
  const bool ok = m.forget_rate >= kForgetMin && m.benign_passthrough_rate == 1.0 && total < kPipelineSeconds;
  return {ok, fmt("forget_rate %.4f over %zu unsafe, benign passthrough %.4f over %zu safe, planted tokens closer to "
                  "safe %zu/%zu, pipeline %.0f s (gen %.1f + train %.0f + simulate %.1f; limit %.0f s)",
                  m.forget_rate, m.unsafe_traces, m.benign_passthrough_rate, m.safe_traces, closer, planted, total,
                  gen_seconds, tri.seconds, sim_seconds, kPipelineSeconds)};
}

// ---- 3 ------------------------------------------------------------------------

Outcome probe(const Dataset& ds, const Split& sp) {
  const ProbeResult p = latent_probe(ds, sp);
  const bool ok = p.noisy <= kProbeNoisyMax && p.clean >= kProbeCleanMin && p.spearman >= kSpearmanMin;
  return {ok, fmt("noisiest 10%% %.4f (<= %.2f), final 10%% %.4f (>= %.2f), Spearman %.4f (>= %.1f)", p.noisy,
                  kProbeNoisyMax, p.clean, kProbeCleanMin, p.spearman, kSpearmanMin)};
}

// ---- 4 ------------------------------------------------------------------------

Outcome redirection_properties() {
  Rng rng(404);
  std::size_t identity_bad = 0, unit_bad = 0, unit_checked = 0, local_bad = 0, homog_bad = 0, guard_bad = 0;
  double worst_unit = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t L = std::size_t(rng.range(1, 12)), D = std::size_t(rng.range(1, 16));
    const Array<double> p = draw<double>({L, D}, rng, -2, 2);
    Array<double> delta = draw<double>({L, D}, rng);
    const double dscale = std::pow(10.0, rng.uniform(-4, 1));
    for (auto& v : delta.vec()) v *= dscale;
    Array<double> m = draw<double>({L}, rng, 0, 1), a = draw<double>({L}, rng, 0, 1);
    for (std::size_t l = 0; l < L; ++l)
      if (rng.bernoulli(0.3)) m[l] = 0;
    const double s = rng.uniform(0, 2);

    identity_bad += redirect(p, delta, m, Array<double>({L}), s).p_hat != p;

    const auto r = redirect(p, delta, m, a, s);
    for (std::size_t l = 0; l < L; ++l) {
      double fn = 0, sn = 0;
      bool moved = false;
      for (std::size_t d = 0; d < D; ++d) {
        fn += std::pow(delta[l * D + d] * m[l], 2);
        sn += std::pow(r.applied_shift[l * D + d], 2);
        moved = moved || r.p_hat[l * D + d] != p[l * D + d];
      }
      if (m[l] == 0) local_bad += moved;
      const double coef = s * a[l] * r.per_token_norms[l];
      if (std::sqrt(fn) >= kUnitMinFiltered && coef > 0) {
        const double err = std::abs(std::sqrt(sn) / coef - 1);
        worst_unit = std::max(worst_unit, err);
        unit_bad += err > kUnitTol;
        ++unit_checked;
      }
    }

    const double c = rng.uniform(0.01, 100);
    Array<double> cp(p.shape());
    for (std::size_t k = 0; k < p.size(); ++k) cp[k] = c * p[k];
    const auto rc = redirect(cp, delta, m, a, s);
    for (std::size_t k = 0; k < p.size(); ++k)
      homog_bad += std::abs(rc.applied_shift[k] - c * r.applied_shift[k]) > 1e-12 * std::max(1.0, c);

    const auto z = redirect(p, delta, Array<double>({L}), a, s);
    guard_bad += !z.p_hat.all_finite() || z.p_hat != p;
  }
  const bool ok = identity_bad + unit_bad + local_bad + homog_bad + guard_bad == 0 && unit_checked > 1000;
  return {ok, fmt("500 random cases: alpha=0 identity %zu bad, unit norm %zu/%zu bad (worst %.1e), masked-out "
                  "locality %zu bad, homogeneity %zu bad, zero-mask guard %zu bad",
                  identity_bad, unit_bad, unit_checked, worst_unit, local_bad, homog_bad, guard_bad)};
}

// ---- 5 ------------------------------------------------------------------------

// Brute-force per-token loop in exact integer arithmetic: flag iff
// 1 − cos > 1/5, i.e. cos < 4/5.
bool brute_flag(const std::vector<long>& a, const std::vector<long>& b) {
  long dot = 0, A = 0, B = 0;
  for (std::size_t d = 0; d < a.size(); ++d) {
    dot += a[d] * b[d];
    A += a[d] * a[d];
    B += b[d] * b[d];
  }
  if (A == 0 || B == 0 || dot <= 0) return true;
  return 25 * dot * dot < 16 * A * B;
}

Outcome pseudo_mask(const Dataset& ds) {
  Rng rng(505);
  std::size_t cases = 0, mismatches = 0;
  while (cases < kMaskCases)
    for (std::size_t L = 1; L <= 8 && cases < kMaskCases; ++L)
      for (std::size_t D = 1; D <= 4 && cases < kMaskCases; ++D, ++cases) {
        Array<double> s({L, D}), u({L, D});
        std::vector<std::vector<long>> si(L, std::vector<long>(D)), ui(L, std::vector<long>(D));
        for (std::size_t l = 0; l < L; ++l)
          for (std::size_t d = 0; d < D; ++d) {
            si[l][d] = long(rng.range(-3, 3));
            ui[l][d] = long(rng.range(-3, 3));
            s[l * D + d] = double(si[l][d]);
            u[l * D + d] = double(ui[l][d]);
          }
        const Array<double> m = build_pseudo_mask(s, u, 0.2);
        for (std::size_t l = 0; l < L; ++l) mismatches += (m[l] == 1.0) != brute_flag(si[l], ui[l]);
      }
  std::size_t tp = 0, fp = 0, fn = 0;
  for (const PairRecord& r : ds.records) {
    const Array<float> m = build_pseudo_mask(r.emb_safe, r.emb_unsafe, ds.world.cfg.tau);
    for (int l = 0; l < r.L; ++l) {
      const bool planted = std::find(r.planted.begin(), r.planted.end(), l) != r.planted.end();
      const bool flagged = m[std::size_t(l)] == 1.0f;
      tp += planted && flagged;
      fp += !planted && flagged;
      fn += planted && !flagged;
    }
  }
  const double f1 = 2.0 * double(tp) / double(2 * tp + fp + fn);
  return {mismatches == 0 && f1 == 1.0,
          fmt("%zu grid cases, %zu mismatches; planted recovery F1 %.4f (tp %zu, fp %zu, fn %zu)", cases, mismatches, f1,
              tp, fp, fn)};
}

// ---- 6 ------------------------------------------------------------------------

std::vector<int> session_interventions(const std::vector<bool>& answers, int K) {
  GuidanceSession s(Array<float>({2, 3}, 1.0f), K, 1.0);
  const Guide g = stub_guide(answers);
  const Array<float> z({4, 8, 8});
  const int T = int(answers.size());
  for (int step = 1; step <= T; ++step) s.step(z, T - step + 1, T, g);
  return s.intervention_steps();
}

Outcome cooldown() {
  Rng rng(606);
  std::size_t runs = 0, mismatches = 0;
  for (int T : {10, 50})
    for (int K : {0, 1, 5, 10})
      for (int rep = 0; rep < kCooldownSequences; ++rep, ++runs) {
        std::vector<bool> a(static_cast<std::size_t>(T));
        const double p = rng.uniform(0, 1);
        for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.bernoulli(p);
        mismatches += session_interventions(a, K) != cooldown_oracle(a, K);
      }
  const std::vector<int> canonical = session_interventions(std::vector<bool>(50, true), 5);
  const bool canon_ok = canonical == std::vector<int>{1, 7, 13, 19, 25, 31, 37, 43, 49};
  std::string steps;
  for (int s : canonical) steps += (steps.empty() ? "" : ",") + std::to_string(s);
  return {mismatches == 0 && canon_ok,
          fmt("%zu sequences over (T,K) in {10,50}x{0,1,5,10}, %zu mismatches; T=50 K=5 always-unsafe -> {%s}", runs,
              mismatches, steps.c_str())};
}

// ---- 8 ------------------------------------------------------------------------

Outcome baselines(const Dataset& ds, const Split& sp) {
  const ReferenceDetector ref = fit_reference_detector(ds, sp);
  const auto prompts = prompts_for(ds, sp.val_bases);
  const auto s1 = evaluate_baseline(Strategy::DirectAdd, prompts, ds.world, ref, kBaselineAlpha);
  const auto s3 = evaluate_baseline(Strategy::PairDiffScaled, prompts, ds.world, ref, kBaselineAlpha);
  const auto s4 = evaluate_baseline(Strategy::PairDiffMasked, prompts, ds.world, ref, kBaselineAlpha);
  const bool ok = s4.forget_rate >= s3.forget_rate && s3.forget_rate >= s1.forget_rate &&
                  s4.mean_unmasked_shift <= kUnmaskedBudget;
  return {ok, fmt("forget rate: masked %.4f >= fixed-scale %.4f >= direct-add %.4f; masked unmasked-token shift %.2e "
                  "(<= %.0e), fixed-scale %.2e, direct-add %.2e",
                  s4.forget_rate, s3.forget_rate, s1.forget_rate, s4.mean_unmasked_shift, kUnmaskedBudget,
                  s3.mean_unmasked_shift, s1.mean_unmasked_shift)};
}

// ---- 9 ------------------------------------------------------------------------

bool rejects_truncations(const std::string& bytes, const std::function<void(const std::string&)>& load) {
  for (std::size_t cut : {std::size_t(0), std::size_t(4), std::size_t(9), bytes.size() / 3, bytes.size() - 1}) {
    try {
      load(bytes.substr(0, cut));
      return false;
    } catch (const FormatError&) {
    }
  }
  return true;
}

Outcome reproducibility(const Dataset& ds, const Split& sp, const TrainedRun& tri) {
  const bool data_hash = dataset_hash(generate_world(WorldConfig{}, ds.world.cfg.seed)) == dataset_hash(ds);

  RunConfig short_run;
  short_run.train.epochs = 2;
  TrainOptions opt;
  opt.max_batches_per_epoch = 15;
  opt.max_val_items = 512;
  const TrainResult a = train(short_run, ds, sp, opt), b = train(short_run, ds, sp, opt);
  const bool loss_hash = a.loss_curve_hash == b.loss_curve_hash && a.best == b.best;

  Redirector<float> model = instantiate(tri.result.best);
  const Guide guide = model_guide(model);
  auto prompts = prompts_for(ds, sp.val_bases);
  prompts.resize(16);
  const SimOptions so = sim_options(InferenceConfig{}, 50, 99);
  const auto t1 = simulate(prompts, ds.world, &guide, so), t2 = simulate(prompts, ds.world, &guide, so);
  bool trace_same = true;
  for (std::size_t i = 0; i < t1.size(); ++i) trace_same = trace_same && trace_json(t1[i]).dump() == trace_json(t2[i]).dump();

  const std::string cbytes = serialize(tri.result.best);
  const Checkpoint cback = deserialize_checkpoint(cbytes);
  const bool ck_rt = cback == tri.result.best && serialize(cback) == cbytes;
  const std::string dbytes = serialize(ds);
  const bool ds_rt = serialize(deserialize(dbytes)) == dbytes;
  const bool trunc = rejects_truncations(cbytes, [](const std::string& s) { deserialize_checkpoint(s); }) &&
                     rejects_truncations(dbytes, [](const std::string& s) { deserialize(s); });

  const bool ok = data_hash && loss_hash && trace_same && ck_rt && ds_rt && trunc;
  return {ok, fmt("dataset hash %s, loss-curve hash %s (%016llx), trace JSON %s, checkpoint round trip %s, dataset "
                  "round trip %s, truncations rejected %s",
                  data_hash ? "equal" : "DIFFERS", loss_hash ? "equal" : "DIFFERS",
                  static_cast<unsigned long long>(a.loss_curve_hash), trace_same ? "equal" : "DIFFERS",
                  ck_rt ? "bit-exact" : "BROKEN", ds_rt ? "bit-exact" : "BROKEN", trunc ? "yes" : "NO")};
}

// ---- 10 -----------------------------------------------------------------------

struct Signature {
  std::map<std::string, double> block_norm;   // by name prefix
  std::map<std::string, double> tensor_norm;  // by full name
};

Signature signature_of(Redirector<float>& m) {
  Signature s;
  for (auto* p : m.params()) {
    double n = 0;
    for (float g : p->grad.vec()) n += double(g) * g;
    s.tensor_norm[p->name] = n;
    s.block_norm[p->name.substr(0, p->name.find('.'))] += n;
  }
  return s;
}

struct AblationCheck {
  const char* flag;
  std::vector<std::string> zero_blocks;   // every tensor of these blocks has zero gradient
  std::vector<std::string> zero_tensors;  // these tensors have zero gradient
  std::function<bool(const LossBreakdown&)> loss_ok;
};

Outcome ablation_plumbing(const Dataset& ds, const Split& sp) {
  const std::vector<std::string> fusion_silent = {"fusion.w_q", "fusion.w_k", "fusion.w_v", "fusion.w_o",
                                                  "fusion.norm_g"};
  const std::vector<AblationCheck> checks = {
      {"no_mask", {"mask"}, {}, [](const LossBreakdown& p) { return p.mask == 0 && p.w_mask == 0; }},
      {"no_alpha", {"alpha"}, {}, [](const LossBreakdown& p) { return p.w_alpha == 1.0; }},
      {"no_latent", {"latent"}, {}, [](const LossBreakdown&) { return true; }},
      {"no_timestep", {"timestep"}, {}, [](const LossBreakdown&) { return true; }},
      {"no_prompt", {}, fusion_silent, [](const LossBreakdown&) { return true; }},
      {"no_mse", {}, {}, [](const LossBreakdown& p) { return p.w_mse == 0; }},
      {"no_cos", {}, {}, [](const LossBreakdown& p) { return p.w_cos == 0; }},
      {"no_conf", {}, {}, [](const LossBreakdown& p) { return p.w_conf == 0; }},
      {"no_smoothing", {}, {}, [](const LossBreakdown&) { return true; }},
      {"no_reg", {}, {}, [](const LossBreakdown& p) { return p.w_reg == 0; }},
  };
  TrainOptions base_opt;
  base_opt.max_batches_per_epoch = 4;
  base_opt.max_val_items = 64;

  auto first_step = [&](const RunConfig& cfg) {
    LossBreakdown first;
    TrainOptions opt = base_opt;
    opt.on_step = [&](const StepLog& s, Redirector<float>&) {
      if (s.epoch == 1 && s.batch == 0) first = s.parts;
    };
    train(cfg, ds, sp, opt);
    return first;
  };
  RunConfig plain;
  plain.train.epochs = 1;
  const LossBreakdown plain_first = first_step(plain);

  std::vector<std::string> bad;
  for (const AblationCheck& c : checks) {
    RunConfig cfg = plain;
    cfg.train.ablate.set(c.flag);
    bool ok = true;
    std::size_t steps = 0;
    LossBreakdown first;
    TrainOptions opt = base_opt;
    opt.on_step = [&](const StepLog& s, Redirector<float>& m) {
      if (steps++ == 0) first = s.parts;
      const Signature sig = signature_of(m);
      ok = ok && c.loss_ok(s.parts);
      for (const auto& [block, n] : sig.block_norm) {
        const bool silenced = std::find(c.zero_blocks.begin(), c.zero_blocks.end(), block) != c.zero_blocks.end();
        ok = ok && (silenced ? n == 0 : n > 0);
      }
      for (const auto& t : c.zero_tensors) ok = ok && sig.tensor_norm.at(t) == 0;
    };
    train(cfg, ds, sp, opt);
    // Loss-only switches leave the first step's other raw terms unchanged.
    if (std::string(c.flag) == "no_smoothing") ok = ok && first.cls != plain_first.cls && first.mse == plain_first.mse;
    if (!ok || steps == 0) bad.push_back(c.flag);
  }
  std::string list;
  for (const auto& b : bad) list += " " + b;
  return {bad.empty(), fmt("%zu flags x 4 steps checked against their documented path%s%s", checks.size(),
                           bad.empty() ? "" : "; mismatched:", list.c_str())};
}

}  // namespace

int main() {
  const auto t_all = Clock::now();
  const auto t_gen = Clock::now();
  const Dataset ds = generate_world(WorldConfig{}, WorldConfig{}.seed);
  const Split sp = split(ds, ds.world.cfg.split_ratio);
  const double gen_seconds = seconds_since(t_gen);
  std::printf("world: %zu items, %zu train / %zu val, generated in %.2f s\n", ds.item_count(), sp.train.size(),
              sp.val.size(), gen_seconds);
  std::fflush(stdout);

  report(1, "gradient fidelity", gradient_fidelity());

  const TrainedRun tri = train_with(ds, sp, {}, "tri-modal");
  const TrainedRun text = train_with(ds, sp, {"no_latent", "no_timestep"}, "text-only");
  const TrainedRun latent = train_with(ds, sp, {"no_prompt", "no_timestep"}, "latent-only");
  report(2, "detection modality ordering", detection(tri, text, latent));
  report(3, "latent probe trend", probe(ds, sp));
  report(4, "redirection equations", redirection_properties());
  report(5, "pseudo-mask oracle", pseudo_mask(ds));
  report(6, "cooldown state machine", cooldown());
  report(7, "forget and preserve", forget_preserve(ds, sp, tri, gen_seconds));
  report(8, "baseline ordering", baselines(ds, sp));
  report(9, "reproducibility", reproducibility(ds, sp, tri));
  report(10, "ablation plumbing", ablation_plumbing(ds, sp));

  std::printf("%d of 10 criteria passed in %.0f s\n", 10 - failures, seconds_since(t_all));
  return failures == 0 ? 0 : 1;
}
