// Command-line front end: gen-data, train, eval, simulate, gradcheck.
//
// Exit codes: 0 success, 2 configuration error, 3 data or format error,
// 4 verification failure, 1 anything else.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "saferedir/saferedir.hpp"

using namespace saferedir;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitVerify = 4;

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

RunConfig config_from(const std::string& path) { return path.empty() ? RunConfig{} : load_config(path); }

/// Seed precedence: explicit flag, then SAFEREDIR_SEED, then the config value.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, std::uint64_t from_config) {
  if (flag) return *flag;
  if (const char* env = std::getenv("SAFEREDIR_SEED"); env && *env) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (*end != '\0') throw ConfigError(std::string("SAFEREDIR_SEED is not an unsigned integer: '") + env + "'");
    return v;
  }
  return from_config;
}

void write_text_atomic(const std::string& path, const std::string& text) { detail::write_atomic(path, text); }

std::vector<int> split_bases(const Split& sp, const std::string& which) {
  if (which == "val") return sp.val_bases;
  if (which == "train") return sp.train_bases;
  if (which == "all") {
    std::vector<int> b = sp.train_bases;
    b.insert(b.end(), sp.val_bases.begin(), sp.val_bases.end());
    return b;
  }
  throw ConfigError("unknown split '" + which + "' (expected train, val or all)");
}

json step_json(const StepLog& s) {
  const LossBreakdown& p = s.parts;
  return {{"epoch", s.epoch}, {"batch", s.batch}, {"L_cls", p.cls},   {"L_conf", p.conf},   {"L_mse", p.mse},
          {"L_cos", p.cos},   {"L_mask", p.mask}, {"L_alpha", p.alpha}, {"L_reg", p.reg}, {"total", p.total}};
}

struct GenDataArgs {
  std::string config, out, summary;
  std::optional<std::uint64_t> seed;
};

int cmd_gen_data(const GenDataArgs& a) {
  RunConfig cfg = config_from(a.config);
  cfg.world.seed = resolve_seed(a.seed, cfg.world.seed);
  validate(cfg);
  const Dataset ds = generate_world(cfg.world, cfg.world.seed);
  const Split sp = split(ds, cfg.world.split_ratio);
  save_dataset(ds, a.out);
  const BetaReport br = beta_report(ds);
  json s = {{"items", ds.item_count()},
            {"records", ds.records.size()},
            {"trajectories", ds.trajs.size()},
            {"train_items", sp.train.size()},
            {"val_items", sp.val.size()},
            {"train_pairs", sp.train_bases.size()},
            {"val_pairs", sp.val_bases.size()},
            {"beta", {{"beta", br.beta}, {"tau", br.tau}, {"min_gap", br.min_gap},
                      {"required_beta", br.required_beta}, {"planted_tokens", br.planted_tokens}}},
            {"seed", cfg.world.seed},
            {"hash", hex64(dataset_hash(ds))}};
  std::cout << s.dump(2) << std::endl;
  if (!a.summary.empty()) write_text_atomic(a.summary, s.dump(2) + "\n");
  return 0;
}

struct TrainArgs {
  std::string config, data, out, step_log;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> ablate;
  std::optional<int> epochs;
  std::size_t max_batches = 0;
  std::size_t max_val = 0;
};

int cmd_train(const TrainArgs& a) {
  RunConfig cfg = config_from(a.config);
  cfg.train.seed = resolve_seed(a.seed, cfg.train.seed);
  for (const auto& n : a.ablate) cfg.train.ablate.set(n);
  if (a.epochs) cfg.train.epochs = *a.epochs;
  validate(cfg);
  const Dataset ds = load_dataset(a.data, cfg.world.D);
  const Split sp = split(ds, ds.world.cfg.split_ratio);

  TrainOptions opt;
  opt.checkpoint_path = a.out;
  opt.log = &std::cerr;
  opt.max_batches_per_epoch = a.max_batches;
  opt.max_val_items = a.max_val;
  std::ofstream step_log;
  if (!a.step_log.empty()) {
    step_log.open(a.step_log, std::ios::trunc);
    if (!step_log) throw FormatError("cannot open step log '" + a.step_log + "'");
    opt.on_step = [&](const StepLog& s, Redirector<float>&) { step_log << step_json(s).dump() << '\n'; };
  }
  const TrainResult r = train(cfg, ds, sp, opt);
  json epochs = json::array();
  for (const EpochLog& e : r.epochs)
    epochs.push_back({{"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"val_acc", e.val_acc}, {"saved", e.saved}});
  std::cout << json{{"best_acc", r.best.best_acc},
                    {"best_epoch", r.best.epoch},
                    {"steps", r.steps.size()},
                    {"ablate", cfg.train.ablate.active()},
                    {"loss_curve_hash", hex64(r.loss_curve_hash)},
                    {"epochs", epochs}}
                   .dump(2)
            << std::endl;
  return 0;
}

struct EvalArgs {
  std::string ckpt, data, split = "val";
  std::optional<std::uint64_t> seed;
};

int cmd_eval(const EvalArgs& a) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const Dataset ds = load_dataset(a.data, ck.config.world.D);
  const Split sp = split(ds, ds.world.cfg.split_ratio);
  if (a.split != "train" && a.split != "val") throw ConfigError("eval --split must be train or val");
  Redirector<float> model = instantiate(ck);
  const Ablations& ab = ck.config.train.ablate;
  const Metrics m = evaluate(model_predictor(model, ab), ds, a.split == "val" ? sp.val : sp.train,
                             ck.config.model.tie_unsafe);
  const std::vector<SimPrompt> prompts = prompts_for(ds, split_bases(sp, a.split));
  const ReferenceDetector ref = fit_reference_detector(ds, sp);
  const Guide guide = model_guide(model, ab);
  const SimOptions so = sim_options(ck.config.inference, ds.world.cfg.T, resolve_seed(a.seed, 0));
  const SafetyMetrics sm = evaluate_safety(simulate(prompts, ds.world, &guide, so), prompts, ref);
  std::cout << json{{"split", a.split},
                    {"items", m.items},
                    {"cls_accuracy", m.cls_accuracy},
                    {"mask_f1", m.mask_f1},
                    {"delta_cosine", m.delta_cosine},
                    {"alpha_mean", m.alpha_mean},
                    {"forget_rate", sm.forget_rate},
                    {"benign_passthrough_rate", sm.benign_passthrough_rate}}
                   .dump(2)
            << std::endl;
  return 0;
}

struct SimulateArgs {
  std::string ckpt, world, out, split = "val";
  std::optional<int> T, K;
  std::optional<double> alpha_scale;
  std::optional<std::uint64_t> seed;
  std::size_t limit = 0;
  bool hard_mask = false;
  bool overhead = false;
};

int cmd_simulate(const SimulateArgs& a) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const Dataset ds = load_dataset(a.world, ck.config.world.D);
  const Split sp = split(ds, ds.world.cfg.split_ratio);
  InferenceConfig ic = ck.config.inference;
  if (a.K) ic.K = *a.K;
  if (a.alpha_scale) ic.alpha_scale = *a.alpha_scale;
  if (a.hard_mask) ic.hard_mask = true;
  if (ic.K < 0) throw ConfigError("--K must be nonnegative");
  if (!(ic.alpha_scale >= 0)) throw ConfigError("--alpha-scale must be nonnegative");
  const int T = a.T.value_or(ds.world.cfg.T);
  if (T < 1) throw ConfigError("--T must be >= 1");
  const std::uint64_t seed = resolve_seed(a.seed, 0);

  std::vector<SimPrompt> prompts = prompts_for(ds, split_bases(sp, a.split));
  if (a.limit && prompts.size() > a.limit) prompts.resize(a.limit);
  Redirector<float> model = instantiate(ck);
  const Guide guide = model_guide(model, ck.config.train.ablate);
  const SimOptions so = sim_options(ic, T, seed);
  const std::vector<GenerationTrace> traces = simulate(prompts, ds.world, &guide, so);
  const ReferenceDetector ref = fit_reference_detector(ds, sp);
  const SafetyMetrics sm = evaluate_safety(traces, prompts, ref);

  json jt = json::array();
  for (std::size_t i = 0; i < traces.size(); ++i) {
    json t = trace_json(traces[i]);
    t["record"] = prompts[i].record;
    t["label"] = prompts[i].label;
    jt.push_back(std::move(t));
  }
  const json doc = {{"config", {{"T", T}, {"K", ic.K}, {"alpha_scale", ic.alpha_scale}, {"hard_mask", ic.hard_mask},
                                {"seed", seed}, {"split", a.split}}},
                    {"metrics", metrics_json(sm)},
                    {"traces", jt}};
  write_text_atomic(a.out, doc.dump() + "\n");
  json summary = metrics_json(sm);
  if (a.overhead) summary["overhead_ratio"] = measure_overhead(prompts, ds.world, guide, so);
  std::cout << summary.dump(2) << std::endl;
  return 0;
}

struct GradcheckArgs {
  std::string config;
  double eps = 1e-5;
  double tol = 1e-4;
  std::optional<std::uint64_t> seed;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  RunConfig cfg = config_from(a.config);
  validate(cfg);
  const ModelGradCheck r = model_grad_check(cfg, a.eps, resolve_seed(a.seed, cfg.train.seed));
  bool ok = true;
  for (const auto& [name, e] : r.blocks) {
    std::printf("%-18s max_rel_err %.3e\n", name.c_str(), e);
    ok = ok && e <= a.tol;
  }
  std::printf("%-18s rel_err     %.3e\n", "directional", r.report.directional_rel_err);
  ok = ok && r.report.directional_rel_err <= a.tol;
  std::printf("worst tensor %s, %zu parameters, %zu loss evaluations\n", r.report.worst.c_str(), r.parameters,
              r.report.evaluations);
  std::printf("%s (tolerance %.1e)\n", ok ? "PASS" : "FAIL", a.tol);
  return ok ? 0 : kExitVerify;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompt-embedding safety redirection on a synthetic world"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  auto seed_opt = [](CLI::App* c, std::optional<std::uint64_t>& s) {
    c->add_option("--seed", s, "Seed (overrides SAFEREDIR_SEED and the config)");
  };

  GenDataArgs gd;
  auto* c_gen = app.add_subcommand("gen-data", "Generate the synthetic dataset");
  c_gen->add_option("--config", gd.config, "RunConfig JSON (defaults when omitted)")->check(CLI::ExistingFile);
  seed_opt(c_gen, gd.seed);
  c_gen->add_option("--out", gd.out, "Dataset file to write")->required();
  c_gen->add_option("--summary", gd.summary, "Also write the summary JSON here");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train detector and redirector jointly");
  c_train->add_option("--config", tr.config, "RunConfig JSON")->check(CLI::ExistingFile);
  c_train->add_option("--data", tr.data, "Dataset file")->required();
  c_train->add_option("--out", tr.out, "Checkpoint file to write")->required();
  seed_opt(c_train, tr.seed);
  c_train->add_option("--ablate", tr.ablate, "Ablation switch (repeatable)");
  c_train->add_option("--epochs", tr.epochs, "Override train.epochs");
  c_train->add_option("--max-batches", tr.max_batches, "Cap batches per epoch (0 = all)");
  c_train->add_option("--max-val", tr.max_val, "Cap validation items (0 = all)");
  c_train->add_option("--step-log", tr.step_log, "Write per-step loss terms as JSON lines");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  c_eval->add_option("--ckpt", ev.ckpt, "Checkpoint file")->required();
  c_eval->add_option("--data", ev.data, "Dataset file")->required();
  c_eval->add_option("--split", ev.split, "train or val");
  seed_opt(c_eval, ev.seed);

  SimulateArgs si;
  auto* c_sim = app.add_subcommand("simulate", "Run the guided mock denoising loop");
  c_sim->add_option("--ckpt", si.ckpt, "Checkpoint file")->required();
  c_sim->add_option("--world", si.world, "Dataset file supplying the world and prompts")->required();
  c_sim->add_option("--T", si.T, "Denoising steps (default: the world's T)");
  c_sim->add_option("--K", si.K, "Cooldown length");
  c_sim->add_option("--alpha-scale", si.alpha_scale, "Global redirection scale");
  c_sim->add_flag("--hard-mask", si.hard_mask, "Threshold the mask at 0.5");
  seed_opt(c_sim, si.seed);
  c_sim->add_option("--split", si.split, "Prompts to simulate: train, val or all");
  c_sim->add_option("--limit", si.limit, "Simulate at most this many prompts (0 = all)");
  c_sim->add_option("--out", si.out, "Trace JSON to write")->required();
  c_sim->add_flag("--overhead", si.overhead, "Also time the loop without the hook");

  GradcheckArgs gc;
  auto* c_gc = app.add_subcommand("gradcheck", "Finite-difference check of every encoder and head");
  c_gc->add_option("--config", gc.config, "RunConfig JSON")->check(CLI::ExistingFile);
  c_gc->add_option("--eps", gc.eps, "Central-difference step");
  c_gc->add_option("--tol", gc.tol, "Maximum relative error");
  seed_opt(c_gc, gc.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*c_gen) return cmd_gen_data(gd);
    if (*c_train) return cmd_train(tr);
    if (*c_eval) return cmd_eval(ev);
    if (*c_sim) return cmd_simulate(si);
    if (*c_gc) return cmd_gradcheck(gc);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DomainError& e) {
    std::cerr << "invalid parameter: " << e.what() << '\n';
    return kExitConfig;
  } catch (const FormatError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const DimensionError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const SessionError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
