#pragma once

// Run configuration: one JSON document with sections
// {version, world, model, loss, train, inference}. Every field has a default
// and unknown keys are rejected.

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "saferedir/errors.hpp"

namespace saferedir {

using json = nlohmann::json;

inline constexpr int kConfigVersion = 1;

struct LengthRange {
  int lo = 0;
  int hi = 0;
  friend bool operator==(const LengthRange&, const LengthRange&) = default;
};

struct WorldConfig {
  int D = 64;
  int vocab = 512;
  LengthRange short_len{5, 8};
  LengthRange medium_len{10, 16};
  LengthRange long_len{21, 24};
  int k_min = 1;
  int k_max = 3;
  double beta = 1.5;
  double ambient_sd = 0.1;    // unsafe-direction component of benign tokens
  double ambient_clip = 0.3;
  double adversarial_max_deg = 20.0;
  int C = 4, H = 8, W = 8;
  double signal = 2.5;        // latent pattern strength s
  double background = 0.5;    // latent background sd
  int T = 50;
  int pairs = 300;
  bool adversarial = true;
  int seeds_per_prompt = 2;
  double tau = 0.2;
  double unsafe_threshold = 0.55;  // world ground truth: max token cos to u
  double split_ratio = 0.8;
  std::uint64_t seed = 7;
  friend bool operator==(const WorldConfig&, const WorldConfig&) = default;
};

struct ModelConfig {
  std::vector<int> latent_widths{32, 64, 128};
  int groups = 8;
  int se_reduction = 4;
  int f_z = 512;
  int f_t = 64;
  int heads = 4;
  int cls_hidden = 256;
  int delta_width_mult = 2;
  int lora_rank = 8;
  int mask_hidden = 64;
  int alpha_hidden = 64;
  int pos_dim = 32;
  double token_dropout = 0.1;
  bool mask_position_signal = false;
  bool tie_unsafe = false;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LossWeights {
  double lambda_cls = 1.0;
  double lambda_mse = 0.5;
  double lambda_cos = 0.1;
  double lambda_mask = 0.1;
  double lambda_alpha = 1.0;
  double smoothing_eps = 0.05;
  double conf_penalty_w = 0.01;
  double l2_delta_w = 1e-4;
  bool mse_mask_mode = false;
  bool cos_per_token = false;
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

/// Table-4 style ablation switches.
struct Ablations {
  bool no_mask = false;
  bool no_alpha = false;
  bool no_latent = false;
  bool no_timestep = false;
  bool no_prompt = false;
  bool no_mse = false;
  bool no_cos = false;
  bool no_conf = false;
  bool no_smoothing = false;
  bool no_reg = false;

  static const std::vector<std::string>& names() {
    static const std::vector<std::string> n{"no_mask", "no_alpha", "no_latent", "no_timestep", "no_prompt",
                                            "no_mse",  "no_cos",   "no_conf",   "no_smoothing", "no_reg"};
    return n;
  }
  bool* flag(const std::string& name) {
    bool* f[] = {&no_mask, &no_alpha, &no_latent, &no_timestep, &no_prompt,
                 &no_mse,  &no_cos,   &no_conf,   &no_smoothing, &no_reg};
    for (std::size_t i = 0; i < names().size(); ++i)
      if (names()[i] == name) return f[i];
    return nullptr;
  }
  bool* checked(const std::string& name) {
    bool* f = flag(name);
    if (!f) throw ConfigError("unknown ablation '" + name + "'");
    return f;
  }
  bool get(const std::string& name) const { return *const_cast<Ablations*>(this)->checked(name); }
  void set(const std::string& name) { *checked(name) = true; }
  std::vector<std::string> active() const {
    std::vector<std::string> out;
    for (const auto& n : names())
      if (get(n)) out.push_back(n);
    return out;
  }
  friend bool operator==(const Ablations&, const Ablations&) = default;
};

struct TrainConfig {
  int epochs = 30;
  int batch = 64;
  double lr = 1e-4;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int patience = 5;
  std::uint64_t seed = 0;
  Ablations ablate;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct InferenceConfig {
  int K = 5;
  double alpha_scale = 1.0;
  bool hard_mask = false;
  friend bool operator==(const InferenceConfig&, const InferenceConfig&) = default;
};

struct RunConfig {
  int version = kConfigVersion;
  WorldConfig world;
  ModelConfig model;
  LossWeights loss;
  TrainConfig train;
  InferenceConfig inference;
  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

namespace detail {

// Reads known keys from an object and rejects everything else.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string ctx) : j_(j), ctx_(std::move(ctx)) {
    if (!j_.is_object()) throw ConfigError(ctx_ + ": expected an object");
  }
  template <class V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const json::exception& e) {
      throw ConfigError(ctx_ + "." + key + ": " + e.what());
    }
  }
  const json* sub(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }
  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + (ctx_.empty() ? k : ctx_ + "." + k) + "'");
  }

 private:
  const json& j_;
  std::string ctx_;
  std::set<std::string> seen_;
};

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

}  // namespace detail

inline void to_json(json& j, const LengthRange& r) { j = json::array({r.lo, r.hi}); }
inline void from_json(const json& j, LengthRange& r) {
  if (!j.is_array() || j.size() != 2) throw ConfigError("length range must be [lo, hi]");
  r.lo = j[0].get<int>();
  r.hi = j[1].get<int>();
}

inline json to_json(const WorldConfig& c) {
  return json{{"D", c.D},
              {"vocab", c.vocab},
              {"short_len", c.short_len},
              {"medium_len", c.medium_len},
              {"long_len", c.long_len},
              {"k_min", c.k_min},
              {"k_max", c.k_max},
              {"beta", c.beta},
              {"ambient_sd", c.ambient_sd},
              {"ambient_clip", c.ambient_clip},
              {"adversarial_max_deg", c.adversarial_max_deg},
              {"C", c.C},
              {"H", c.H},
              {"W", c.W},
              {"signal", c.signal},
              {"background", c.background},
              {"T", c.T},
              {"pairs", c.pairs},
              {"adversarial", c.adversarial},
              {"seeds_per_prompt", c.seeds_per_prompt},
              {"tau", c.tau},
              {"unsafe_threshold", c.unsafe_threshold},
              {"split_ratio", c.split_ratio},
              {"seed", c.seed}};
}

inline void parse(const json& j, WorldConfig& c) {
  detail::ObjectReader r(j, "world");
  r.get("D", c.D);
  r.get("vocab", c.vocab);
  r.get("short_len", c.short_len);
  r.get("medium_len", c.medium_len);
  r.get("long_len", c.long_len);
  r.get("k_min", c.k_min);
  r.get("k_max", c.k_max);
  r.get("beta", c.beta);
  r.get("ambient_sd", c.ambient_sd);
  r.get("ambient_clip", c.ambient_clip);
  r.get("adversarial_max_deg", c.adversarial_max_deg);
  r.get("C", c.C);
  r.get("H", c.H);
  r.get("W", c.W);
  r.get("signal", c.signal);
  r.get("background", c.background);
  r.get("T", c.T);
  r.get("pairs", c.pairs);
  r.get("adversarial", c.adversarial);
  r.get("seeds_per_prompt", c.seeds_per_prompt);
  r.get("tau", c.tau);
  r.get("unsafe_threshold", c.unsafe_threshold);
  r.get("split_ratio", c.split_ratio);
  r.get("seed", c.seed);
  r.finish();
}

inline json to_json(const ModelConfig& c) {
  return json{{"latent_widths", c.latent_widths},
              {"groups", c.groups},
              {"se_reduction", c.se_reduction},
              {"f_z", c.f_z},
              {"f_t", c.f_t},
              {"heads", c.heads},
              {"cls_hidden", c.cls_hidden},
              {"delta_width_mult", c.delta_width_mult},
              {"lora_rank", c.lora_rank},
              {"mask_hidden", c.mask_hidden},
              {"alpha_hidden", c.alpha_hidden},
              {"pos_dim", c.pos_dim},
              {"token_dropout", c.token_dropout},
              {"mask_position_signal", c.mask_position_signal},
              {"tie_unsafe", c.tie_unsafe}};
}

inline void parse(const json& j, ModelConfig& c) {
  detail::ObjectReader r(j, "model");
  r.get("latent_widths", c.latent_widths);
  r.get("groups", c.groups);
  r.get("se_reduction", c.se_reduction);
  r.get("f_z", c.f_z);
  r.get("f_t", c.f_t);
  r.get("heads", c.heads);
  r.get("cls_hidden", c.cls_hidden);
  r.get("delta_width_mult", c.delta_width_mult);
  r.get("lora_rank", c.lora_rank);
  r.get("mask_hidden", c.mask_hidden);
  r.get("alpha_hidden", c.alpha_hidden);
  r.get("pos_dim", c.pos_dim);
  r.get("token_dropout", c.token_dropout);
  r.get("mask_position_signal", c.mask_position_signal);
  r.get("tie_unsafe", c.tie_unsafe);
  r.finish();
}

inline json to_json(const LossWeights& c) {
  return json{{"lambda_cls", c.lambda_cls},       {"lambda_mse", c.lambda_mse},
              {"lambda_cos", c.lambda_cos},       {"lambda_mask", c.lambda_mask},
              {"lambda_alpha", c.lambda_alpha},   {"smoothing_eps", c.smoothing_eps},
              {"conf_penalty_w", c.conf_penalty_w}, {"l2_delta_w", c.l2_delta_w},
              {"mse_mask_mode", c.mse_mask_mode}, {"cos_per_token", c.cos_per_token}};
}

inline void parse(const json& j, LossWeights& c) {
  detail::ObjectReader r(j, "loss");
  r.get("lambda_cls", c.lambda_cls);
  r.get("lambda_mse", c.lambda_mse);
  r.get("lambda_cos", c.lambda_cos);
  r.get("lambda_mask", c.lambda_mask);
  r.get("lambda_alpha", c.lambda_alpha);
  r.get("smoothing_eps", c.smoothing_eps);
  r.get("conf_penalty_w", c.conf_penalty_w);
  r.get("l2_delta_w", c.l2_delta_w);
  r.get("mse_mask_mode", c.mse_mask_mode);
  r.get("cos_per_token", c.cos_per_token);
  r.finish();
}

inline json to_json(const TrainConfig& c) {
  return json{{"epochs", c.epochs},   {"batch", c.batch},         {"lr", c.lr},
              {"weight_decay", c.weight_decay}, {"beta1", c.beta1}, {"beta2", c.beta2},
              {"adam_eps", c.adam_eps}, {"patience", c.patience}, {"seed", c.seed},
              {"ablate", c.ablate.active()}};
}

inline void parse(const json& j, TrainConfig& c) {
  detail::ObjectReader r(j, "train");
  r.get("epochs", c.epochs);
  r.get("batch", c.batch);
  r.get("lr", c.lr);
  r.get("weight_decay", c.weight_decay);
  r.get("beta1", c.beta1);
  r.get("beta2", c.beta2);
  r.get("adam_eps", c.adam_eps);
  r.get("patience", c.patience);
  r.get("seed", c.seed);
  std::vector<std::string> ab;
  r.get("ablate", ab);
  c.ablate = Ablations{};
  for (const auto& a : ab) c.ablate.set(a);
  r.finish();
}

inline json to_json(const InferenceConfig& c) {
  return json{{"K", c.K}, {"alpha_scale", c.alpha_scale}, {"hard_mask", c.hard_mask}};
}

inline void parse(const json& j, InferenceConfig& c) {
  detail::ObjectReader r(j, "inference");
  r.get("K", c.K);
  r.get("alpha_scale", c.alpha_scale);
  r.get("hard_mask", c.hard_mask);
  r.finish();
}

/// Range checks shared by every entry point.
inline void validate(const RunConfig& c) {
  using detail::require;
  require(c.version == kConfigVersion, "config version " + std::to_string(c.version) + " unsupported (expected " +
                                           std::to_string(kConfigVersion) + ")");
  const auto& w = c.world;
  require(w.D >= 4 && w.vocab >= 2, "world.D must be >= 4 and world.vocab >= 2");
  for (const auto* r : {&w.short_len, &w.medium_len, &w.long_len})
    require(r->lo >= 1 && r->hi >= r->lo, "world length ranges need 1 <= lo <= hi");
  require(w.k_min >= 1 && w.k_max >= w.k_min && w.k_max <= w.short_len.lo, "world.k range must fit the shortest prompt");
  require(w.beta > 0, "world.beta must be positive");
  require(w.ambient_sd >= 0 && w.ambient_clip >= 0 && w.ambient_clip < 1, "world.ambient_clip must be in [0, 1)");
  require(w.adversarial_max_deg >= 0 && w.adversarial_max_deg < 90, "world.adversarial_max_deg must be in [0, 90)");
  require(w.C >= 1 && w.H >= 1 && w.W >= 1, "world latent shape must be positive");
  require(w.T >= 1, "world.T must be >= 1");
  require(w.pairs >= 1 && w.seeds_per_prompt >= 1, "world.pairs and seeds_per_prompt must be >= 1");
  require(w.tau > 0 && w.tau < 1, "world.tau must be in (0, 1)");
  require(w.split_ratio > 0 && w.split_ratio < 1, "world.split_ratio must be in (0, 1)");
  const auto& m = c.model;
  require(m.latent_widths.size() >= 1, "model.latent_widths must be non-empty");
  for (int wd : m.latent_widths)
    require(wd > 0 && wd % m.groups == 0 && wd % m.se_reduction == 0,
            "model.latent_widths must be positive multiples of groups and se_reduction");
  require(m.heads >= 1 && w.D % m.heads == 0, "model.heads must divide world.D");
  require(m.f_t >= 2 && m.f_t % 2 == 0 && m.pos_dim >= 2 && m.pos_dim % 2 == 0, "sinusoid widths must be even");
  require(m.f_z >= 1 && m.cls_hidden >= 1 && m.delta_width_mult >= 1 && m.lora_rank >= 1 && m.mask_hidden >= 1 &&
              m.alpha_hidden >= 1,
          "model widths must be positive");
  require(m.token_dropout >= 0 && m.token_dropout < 1, "model.token_dropout must be in [0, 1)");
  const auto& l = c.loss;
  for (double v : {l.lambda_cls, l.lambda_mse, l.lambda_cos, l.lambda_mask, l.lambda_alpha, l.conf_penalty_w,
                   l.l2_delta_w})
    require(v >= 0, "loss weights must be nonnegative");
  require(l.smoothing_eps >= 0 && l.smoothing_eps < 0.5, "loss.smoothing_eps must be in [0, 0.5)");
  const auto& t = c.train;
  require(t.epochs >= 0 && t.batch >= 1 && t.lr >= 0 && t.weight_decay >= 0 && t.patience >= 0,
          "train settings out of range");
  require(t.beta1 >= 0 && t.beta1 < 1 && t.beta2 >= 0 && t.beta2 < 1 && t.adam_eps > 0, "train AdamW moments out of range");
  require(c.inference.K >= 0 && c.inference.alpha_scale >= 0, "inference.K and alpha_scale must be nonnegative");
}

inline json to_json(const RunConfig& c) {
  return json{{"version", c.version},
              {"world", to_json(c.world)},
              {"model", to_json(c.model)},
              {"loss", to_json(c.loss)},
              {"train", to_json(c.train)},
              {"inference", to_json(c.inference)}};
}

inline RunConfig parse_config(const json& j) {
  RunConfig c;
  detail::ObjectReader r(j, "");
  r.get("version", c.version);
  if (const json* s = r.sub("world")) parse(*s, c.world);
  if (const json* s = r.sub("model")) parse(*s, c.model);
  if (const json* s = r.sub("loss")) parse(*s, c.loss);
  if (const json* s = r.sub("train")) parse(*s, c.train);
  if (const json* s = r.sub("inference")) parse(*s, c.inference);
  r.finish();
  validate(c);
  return c;
}

inline RunConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_config(j);
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace saferedir
