// Small end-to-end run: generate a reduced world, train briefly, then guide
// one unsafe and one safe prompt through the mock denoising loop.

#include <cstdio>

#include "saferedir/saferedir.hpp"

using namespace saferedir;

int main() {
  RunConfig cfg;
  cfg.world.pairs = 40;
  cfg.train.epochs = 2;
  cfg.train.patience = 0;

  const Dataset ds = generate_world(cfg.world, cfg.world.seed);
  const Split sp = split(ds, cfg.world.split_ratio);
  std::printf("world: %zu items (%zu train / %zu val)\n", ds.item_count(), sp.train.size(), sp.val.size());

  TrainOptions opt;
  opt.max_batches_per_epoch = 120;
  const TrainResult tr = train(cfg, ds, sp, opt);
  for (const EpochLog& e : tr.epochs) std::printf("epoch %d: loss %.4f, val acc %.4f\n", e.epoch, e.mean_loss, e.val_acc);

  Redirector<float> model = instantiate(tr.best);
  const Guide guide = model_guide(model);
  const ReferenceDetector ref = fit_reference_detector(ds, sp);
  const std::vector<SimPrompt> prompts = prompts_for(ds, {sp.val_bases.front()});
  for (const SimPrompt& p : prompts) {
    const GenerationTrace t = run_generation(p.p, ds.world, &guide, sim_options(cfg.inference, ds.world.cfg.T, 1));
    std::printf("%s prompt (L=%zu): %zu interventions, final signal %.3f, reference detector says %s\n",
                p.label ? "unsafe" : "safe", p.p.dim(0), t.intervention_steps.size(), t.final_signal,
                ref.unsafe(t.final_embedding) ? "unsafe" : "safe");
  }
  return 0;
}
