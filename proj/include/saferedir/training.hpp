#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "saferedir/dataset.hpp"
#include "saferedir/losses.hpp"

namespace saferedir {

/// AdamW with decoupled weight decay.
template <class T>
class AdamW {
 public:
  AdamW() = default;
  AdamW(const std::vector<Parameter<T>*>& params, const TrainConfig& c)
      : lr_(c.lr), wd_(c.weight_decay), b1_(c.beta1), b2_(c.beta2), eps_(c.adam_eps) {
    for (auto* p : params) {
      m_.emplace_back(p->value.size(), 0.0);
      v_.emplace_back(p->value.size(), 0.0);
    }
  }

  void step(const std::vector<Parameter<T>*>& params) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, double(t_)), c2 = 1.0 - std::pow(b2_, double(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Array<T>& w = params[k]->value;
      const Array<T>& g = params[k]->grad;
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = double(g[i]);
        m[i] = b1_ * m[i] + (1 - b1_) * gi;
        v[i] = b2_ * v[i] + (1 - b2_) * gi * gi;
        const double upd = (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
        w[i] = T(double(w[i]) - lr_ * wd_ * double(w[i]) - lr_ * upd);
      }
    }
  }

  long steps() const { return t_; }

 private:
  double lr_ = 0, wd_ = 0, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---- checkpoint --------------------------------------------------------------

inline constexpr char kCheckpointMagic[4] = {'S', 'R', 'C', '1'};
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  int version = kCheckpointVersion;
  RunConfig config;
  std::vector<std::string> names;
  std::vector<Array<float>> values;
  double best_acc = 0;
  int epoch = 0;
  std::string rng_state;
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline Checkpoint make_checkpoint(Redirector<float>& model, const RunConfig& cfg, double best_acc, int epoch,
                                  const Rng& rng) {
  Checkpoint c;
  c.config = cfg;
  for (auto* p : model.params()) {
    c.names.push_back(p->name);
    c.values.push_back(p->value);
  }
  c.best_acc = best_acc;
  c.epoch = epoch;
  c.rng_state = rng.state();
  return c;
}

/// Rebuilds the model; names and shapes must match the configured architecture.
inline Redirector<float> instantiate(const Checkpoint& c) {
  Redirector<float> m(c.config.model, c.config.world, 0);
  auto ps = m.params();
  if (ps.size() != c.values.size())
    throw FormatError("checkpoint has " + std::to_string(c.values.size()) + " tensors, model expects " +
                      std::to_string(ps.size()));
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (ps[i]->name != c.names[i] || ps[i]->value.shape() != c.values[i].shape())
      throw FormatError("checkpoint tensor " + c.names[i] + shape_str(c.values[i].shape()) + " does not match " +
                        ps[i]->name + shape_str(ps[i]->value.shape()));
    ps[i]->value = c.values[i];
    ps[i]->zero_grad();
  }
  return m;
}

inline std::string serialize(const Checkpoint& c) {
  json tensors = json::array();
  for (std::size_t i = 0; i < c.names.size(); ++i)
    tensors.push_back({{"name", c.names[i]}, {"shape", c.values[i].shape()}});
  json header = {{"format_version", c.version}, {"dtype", "f32le"}, {"config", to_json(c.config)},
                 {"tensors", tensors},          {"best_acc", c.best_acc}, {"epoch", c.epoch},
                 {"rng_state", c.rng_state}};
  const std::string h = header.dump();
  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, std::uint32_t(h.size()));
  out += h;
  for (const auto& v : c.values) detail::put_f32(out, v);
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& buf, const std::string& what = "checkpoint") {
  json header;
  const std::size_t off = detail::read_header(buf, kCheckpointMagic, header, what);
  Checkpoint c;
  detail::Cursor cur(buf, off, what);
  try {
    c.version = header.at("format_version").get<int>();
    if (c.version != kCheckpointVersion) throw FormatError(what + ": unsupported version " + std::to_string(c.version));
    if (header.at("dtype").get<std::string>() != "f32le") throw FormatError(what + ": unsupported dtype");
    c.config = parse_config(header.at("config"));
    c.best_acc = header.at("best_acc").get<double>();
    c.epoch = header.at("epoch").get<int>();
    c.rng_state = header.at("rng_state").get<std::string>();
    for (const auto& t : header.at("tensors")) {
      c.names.push_back(t.at("name").get<std::string>());
      c.values.push_back(cur.f32(t.at("shape").get<Shape>()));
    }
  } catch (const json::exception& e) {
    throw FormatError(what + ": malformed header: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(what + ": " + e.what());
  }
  cur.expect_end();
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) { detail::write_atomic(path, serialize(c)); }

inline Checkpoint load_checkpoint(const std::string& path) {
  return deserialize_checkpoint(detail::read_file(path), "checkpoint '" + path + "'");
}

// ---- batching ----------------------------------------------------------------

/// Items grouped by prompt length, shuffled within each length and then
/// across batches.
inline std::vector<std::vector<ItemRef>> make_batches(const Dataset& ds, const std::vector<ItemRef>& items,
                                                      std::size_t batch, Rng* rng) {
  std::map<int, std::vector<ItemRef>> buckets;
  for (const auto& r : items) buckets[ds.prompt_length(r)].push_back(r);
  std::vector<std::vector<ItemRef>> out;
  for (auto& [L, v] : buckets) {
    if (rng) rng->shuffle(v);
    for (std::size_t i = 0; i < v.size(); i += batch)
      out.emplace_back(v.begin() + long(i), v.begin() + long(std::min(v.size(), i + batch)));
  }
  if (rng) rng->shuffle(out);
  return out;
}

// ---- evaluation --------------------------------------------------------------

struct Metrics {
  double cls_accuracy = 0;
  double mask_f1 = 0;
  double delta_cosine = 0;  // mean over pseudo-masked tokens of unsafe items
  double alpha_mean = 0;    // mean α over the same tokens
  std::size_t items = 0;
};

using Predictor = std::function<GuidanceOutput<float>(const Batch<float>&)>;

inline Predictor model_predictor(Redirector<float>& model, const Ablations& ab = {}) {
  return [&model, ab](const Batch<float>& b) { return model.infer(b.input, ab); };
}

inline Metrics evaluate(const Predictor& predict, const Dataset& ds, const std::vector<ItemRef>& items,
                        bool tie_unsafe = false, std::size_t batch = 256) {
  Metrics m;
  std::size_t correct = 0, tp = 0, fp = 0, fn = 0, tokens = 0;
  double cos_sum = 0, alpha_sum = 0;
  const std::size_t D = std::size_t(ds.world.cfg.D);
  for (const auto& refs : make_batches(ds, items, batch, nullptr)) {
    Batch<float> b = ds.batch(refs);
    GuidanceOutput<float> out = predict(b);
    const std::size_t L = b.input.tokens.dim(1);
    for (std::size_t i = 0; i < b.size(); ++i) {
      correct += decide(out.logits[2 * i], out.logits[2 * i + 1], tie_unsafe) == b.labels[i];
      if (b.labels[i] != 1) continue;
      for (std::size_t l = 0; l < L; ++l) {
        const bool truth = b.m_star[i * L + l] == 1.0f, pred = out.mask[i * L + l] >= 0.5f;
        tp += truth && pred;
        fp += !truth && pred;
        fn += truth && !pred;
        if (!truth) continue;
        const std::size_t off = (i * L + l) * D;
        std::vector<float> shift(D);
        for (std::size_t d = 0; d < D; ++d) shift[d] = b.emb_safe[off + d] - b.emb_unsafe[off + d];
        cos_sum += cosine<float>(std::span<const float>(out.delta.data() + off, D), shift);
        alpha_sum += out.alpha[i * L + l];
        ++tokens;
      }
    }
    m.items += b.size();
  }
  m.cls_accuracy = m.items ? double(correct) / double(m.items) : 0;
  m.mask_f1 = (2 * tp + fp + fn) ? 2.0 * double(tp) / double(2 * tp + fp + fn) : 1.0;
  m.delta_cosine = tokens ? cos_sum / double(tokens) : 0;
  m.alpha_mean = tokens ? alpha_sum / double(tokens) : 0;
  return m;
}

// ---- training loop -----------------------------------------------------------

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0;
  double val_acc = 0;
  bool saved = false;
  double seconds = 0;
};

struct StepLog {
  int epoch = 0;
  std::size_t batch = 0;
  LossBreakdown parts;
};

struct TrainOptions {
  std::string checkpoint_path;  // written atomically on every save when set
  std::ostream* log = nullptr;
  std::size_t max_batches_per_epoch = 0;  // 0 = full epoch
  std::size_t max_val_items = 0;          // 0 = full validation split
  // Called after backward and before the optimizer step.
  std::function<void(const StepLog&, Redirector<float>&)> on_step;
};

struct TrainResult {
  Checkpoint best;
  std::vector<EpochLog> epochs;
  std::vector<StepLog> steps;
  std::uint64_t loss_curve_hash = 0;
};

inline std::uint64_t hash_losses(const std::vector<StepLog>& steps) {
  std::string bytes;
  for (const auto& s : steps) {
    const auto bits = std::bit_cast<std::uint64_t>(s.parts.total);
    for (int i = 0; i < 8; ++i) bytes.push_back(char((bits >> (8 * i)) & 0xFF));
  }
  return detail::fnv1a(bytes);
}

/// Joint optimisation of detector and redirector. Checkpoints whenever the
/// validation accuracy is at least the best so far; stops early after
/// `patience` epochs without a strict improvement.
inline TrainResult train(const RunConfig& cfg, const Dataset& ds, const Split& sp, const TrainOptions& opt = {}) {
  validate(cfg);
  if (cfg.world.D != ds.world.cfg.D)
    throw FormatError("dataset D=" + std::to_string(ds.world.cfg.D) + " does not match config D=" +
                      std::to_string(cfg.world.D));
  RunConfig run = cfg;
  run.world = ds.world.cfg;
  Redirector<float> model(run.model, run.world, Rng::derive(run.train.seed, 1));
  auto params = model.params();
  AdamW<float> optim(params, run.train);
  Rng rng(Rng::derive(run.train.seed, 2));
  const Ablations& ab = run.train.ablate;

  std::vector<ItemRef> val = sp.val;
  if (opt.max_val_items && val.size() > opt.max_val_items) {
    Rng vr(Rng::derive(run.train.seed, 3));
    vr.shuffle(val);
    val.resize(opt.max_val_items);
  }

  TrainResult res;
  double best = -1;
  int stale = 0;
  res.best = make_checkpoint(model, run, 0, 0, rng);
  for (int epoch = 1; epoch <= run.train.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    auto batches = make_batches(ds, sp.train, std::size_t(run.train.batch), &rng);
    if (opt.max_batches_per_epoch && batches.size() > opt.max_batches_per_epoch)
      batches.resize(opt.max_batches_per_epoch);
    double loss_sum = 0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      Batch<float> b = ds.batch(batches[bi]);
      model.zero_grad();
      Graph<float> g;
      ForwardVars f = model.forward(g, b.input, ab, true, &rng);
      LossResult<float> lr = total_loss(g, b, f, run.loss, ab);
      if (!std::isfinite(lr.parts.total))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(bi) +
                           ": " + lr.parts.str());
      g.backward(lr.total);
      StepLog sl{epoch, bi, lr.parts};
      if (opt.on_step) opt.on_step(sl, model);
      optim.step(params);
      loss_sum += lr.parts.total;
      res.steps.push_back(sl);
    }
    const Metrics vm = evaluate(model_predictor(model, ab), ds, val, run.model.tie_unsafe);
    EpochLog el;
    el.epoch = epoch;
    el.mean_loss = batches.empty() ? 0 : loss_sum / double(batches.size());
    el.val_acc = vm.cls_accuracy;
    if (vm.cls_accuracy >= best) {
      stale = vm.cls_accuracy > best ? 0 : stale + 1;
      best = vm.cls_accuracy;
      res.best = make_checkpoint(model, run, best, epoch, rng);
      if (!opt.checkpoint_path.empty()) save_checkpoint(res.best, opt.checkpoint_path);
      el.saved = true;
    } else {
      ++stale;
    }
    el.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.epochs.push_back(el);
    if (opt.log)
      *opt.log << "epoch " << epoch << " loss " << el.mean_loss << " val_acc " << el.val_acc
               << (el.saved ? " saved" : "") << " (" << el.seconds << " s)" << std::endl;
    if (run.train.patience > 0 && stale >= run.train.patience) break;
  }
  res.loss_curve_hash = hash_losses(res.steps);
  return res;
}

}  // namespace saferedir
