#pragma once

// Latent encoder (ResidualSE cascade), timestep encoder, joint context and
// token dropout.

#include <cmath>
#include <string>
#include <vector>

#include "saferedir/numerics/autodiff.hpp"
#include "saferedir/numerics/rng.hpp"

namespace saferedir {

/// Weight drawn from N(0, 1/fan_in).
template <class T>
Parameter<T> make_weight(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng) {
  Array<T> v(std::move(shape));
  const double sd = 1.0 / std::sqrt(double(fan_in));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = T(rng.normal() * sd);
  return Parameter<T>(name, std::move(v));
}

template <class T>
Parameter<T> make_const(const std::string& name, Shape shape, T value) {
  return Parameter<T>(name, Array<T>(std::move(shape), value));
}

/// Sinusoid of width `dim`: sin lanes first, then cos lanes, frequencies
/// 10000^(-i/(dim/2)).
template <class T>
std::vector<T> sinusoid(double pos, std::size_t dim) {
  std::vector<T> out(dim);
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(10000.0, -double(i) / double(half));
    out[i] = T(std::sin(pos * freq));
    out[half + i] = T(std::cos(pos * freq));
  }
  return out;
}

template <class T>
struct ResidualSEBlock {
  Parameter<T> conv1_w, conv1_b, norm_g, norm_b, conv2_w, conv2_b;
  Parameter<T> se1_w, se1_b, se2_w, se2_b, skip_w, skip_b;
  std::size_t groups = 8;

  ResidualSEBlock() = default;
  ResidualSEBlock(const std::string& p, std::size_t cin, std::size_t cout, std::size_t groups_, std::size_t reduction,
                  Rng& rng)
      : conv1_w(make_weight<T>(p + ".conv1_w", {cout, cin, 3, 3}, cin * 9, rng)),
        conv1_b(make_const<T>(p + ".conv1_b", {cout}, 0)),
        norm_g(make_const<T>(p + ".norm_g", {cout}, 1)),
        norm_b(make_const<T>(p + ".norm_b", {cout}, 0)),
        conv2_w(make_weight<T>(p + ".conv2_w", {cout, cout, 3, 3}, cout * 9, rng)),
        conv2_b(make_const<T>(p + ".conv2_b", {cout}, 0)),
        se1_w(make_weight<T>(p + ".se1_w", {cout, cout / reduction}, cout, rng)),
        se1_b(make_const<T>(p + ".se1_b", {cout / reduction}, 0)),
        se2_w(make_weight<T>(p + ".se2_w", {cout / reduction, cout}, cout / reduction, rng)),
        se2_b(make_const<T>(p + ".se2_b", {cout}, 0)),
        skip_w(make_weight<T>(p + ".skip_w", {cout, cin, 1, 1}, cin, rng)),
        skip_b(make_const<T>(p + ".skip_b", {cout}, 0)),
        groups(groups_) {}

  void collect(std::vector<Parameter<T>*>& out) {
    for (auto* p : {&conv1_w, &conv1_b, &norm_g, &norm_b, &conv2_w, &conv2_b, &se1_w, &se1_b, &se2_w, &se2_b,
                    &skip_w, &skip_b})
      out.push_back(p);
  }

  /// conv(stride 2) → GroupNorm → SiLU → conv → SE gate, plus a strided 1×1 skip.
  Var forward(Graph<T>& g, Var x) {
    Var h = ad::conv2d(g, x, g.param(conv1_w), g.param(conv1_b), 2, 1);
    h = ad::group_norm(g, h, g.param(norm_g), g.param(norm_b), groups);
    h = ad::silu(g, h);
    h = ad::conv2d(g, h, g.param(conv2_w), g.param(conv2_b), 1, 1);
    Var s = ad::global_avg_pool(g, h);
    s = ad::silu(g, ad::linear(g, s, g.param(se1_w), g.param(se1_b)));
    s = ad::sigmoid(g, ad::linear(g, s, g.param(se2_w), g.param(se2_b)));
    h = ad::channel_scale(g, h, s);
    Var skip = ad::conv2d(g, x, g.param(skip_w), g.param(skip_b), 2, 0);
    return ad::add(g, h, skip);
  }
};

template <class T>
struct LatentEncoder {
  std::vector<ResidualSEBlock<T>> blocks;
  Parameter<T> out_w, out_b;
  Shape input;  // C, H, W

  LatentEncoder() = default;
  LatentEncoder(std::size_t C, std::size_t H, std::size_t W, const std::vector<int>& widths, std::size_t groups,
                std::size_t reduction, std::size_t out_dim, Rng& rng)
      : input{C, H, W} {
    std::size_t cin = C;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      blocks.emplace_back("latent.block" + std::to_string(i), cin, std::size_t(widths[i]), groups, reduction, rng);
      cin = std::size_t(widths[i]);
    }
    out_w = make_weight<T>("latent.out_w", {cin, out_dim}, cin, rng);
    out_b = make_const<T>("latent.out_b", {out_dim}, 0);
  }

  void collect(std::vector<Parameter<T>*>& out) {
    for (auto& b : blocks) b.collect(out);
    out.push_back(&out_w);
    out.push_back(&out_b);
  }

  /// z[B×C×H×W] → f_z[B×out_dim].
  Var forward(Graph<T>& g, Var z) {
    const Shape& s = g.shape(z);
    if (s.size() != 4 || Shape(s.begin() + 1, s.end()) != input)
      throw DimensionError("latent shape " + shape_str(s) + " does not match configured " + shape_str(input));
    Var h = z;
    for (auto& b : blocks) h = b.forward(g, h);
    return ad::linear(g, ad::global_avg_pool(g, h), g.param(out_w), g.param(out_b));
  }
};

/// Raw sinusoid rows for a batch of step indices, validated against [0, T].
template <class T>
Array<T> timestep_sinusoids(const std::vector<int>& t, int T_max, std::size_t dim) {
  Array<T> out({t.size(), dim});
  for (std::size_t b = 0; b < t.size(); ++b) {
    if (t[b] < 0 || t[b] > T_max)
      throw DomainError("timestep " + std::to_string(t[b]) + " outside [0, " + std::to_string(T_max) + "]");
    auto row = sinusoid<T>(double(t[b]), dim);
    std::copy(row.begin(), row.end(), out.data() + b * dim);
  }
  return out;
}

template <class T>
struct TimestepEncoder {
  Parameter<T> norm_g, norm_b;
  int T_max = 50;

  TimestepEncoder() = default;
  TimestepEncoder(std::size_t dim, int T_max_) : norm_g(make_const<T>("timestep.norm_g", {dim}, 1)),
                                                  norm_b(make_const<T>("timestep.norm_b", {dim}, 0)), T_max(T_max_) {}

  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&norm_g);
    out.push_back(&norm_b);
  }

  /// sinusoid → SiLU → LayerNorm.
  Var forward(Graph<T>& g, const std::vector<int>& t) {
    Var s = g.constant(timestep_sinusoids<T>(t, T_max, norm_g.value.size()));
    return ad::layer_norm_last(g, ad::silu(g, s), g.param(norm_g), g.param(norm_b));
  }
};

/// Zeroes whole tokens with probability p; identity outside training.
/// No 1/(1-p) rescaling.
template <class T>
Array<T> token_dropout(const Array<T>& tokens, double p, bool training, Rng& rng) {
  if (p < 0 || p >= 1) throw DomainError("token dropout rate must be in [0, 1)");
  if (!training || p == 0) return tokens;
  Array<T> out = tokens;
  const std::size_t D = tokens.shape().back(), n = tokens.size() / D;
  for (std::size_t i = 0; i < n; ++i)
    if (!rng.bernoulli(1.0 - p)) std::fill_n(out.data() + i * D, D, T{0});
  return out;
}

/// f_joint = [f_z; f_t].
template <class T>
Var joint_context(Graph<T>& g, Var f_z, Var f_t, std::size_t fz_dim, std::size_t ft_dim) {
  if (g.shape(f_z).back() != fz_dim || g.shape(f_t).back() != ft_dim)
    throw DimensionError("joint_context widths " + shape_str(g.shape(f_z)) + " and " + shape_str(g.shape(f_t)) +
                         " (expected " + std::to_string(fz_dim) + " and " + std::to_string(ft_dim) + ")");
  return ad::concat_last(g, f_z, f_t);
}

}  // namespace saferedir
