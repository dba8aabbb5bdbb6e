#pragma once

// Central-difference gradient oracle. The analytic side comes from
// Graph::backward, the numeric side from re-running the forward pass with
// one coordinate (or one direction) perturbed.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "saferedir/numerics/autodiff.hpp"
#include "saferedir/numerics/rng.hpp"

namespace saferedir {

struct GradCheckOptions {
  double eps = 1e-5;
  // Coordinates probed per tensor; tensors at most this large are probed
  // exhaustively. 0 means every coordinate.
  std::size_t coords_per_tensor = 24;
  bool directional = true;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst;
  std::map<std::string, double> per_tensor;
  double directional_rel_err = 0.0;
  std::size_t evaluations = 0;

  /// Max error over tensors whose name starts with `prefix`.
  double block(const std::string& prefix) const {
    double m = 0.0;
    for (const auto& [k, v] : per_tensor)
      if (k.rfind(prefix, 0) == 0) m = std::max(m, v);
    return m;
  }
};

/// |a − b| / max(|a|, |b|, 1e-8), applied to scalars or vector norms.
inline double relative_error(double diff, double a, double b) {
  return std::abs(diff) / std::max({std::abs(a), std::abs(b), 1e-8});
}

/// `build` must construct the scalar loss on the given graph from the current
/// parameter values, deterministically.
using LossBuilder = std::function<Var(Graph<double>&)>;

inline double eval_loss(const LossBuilder& build) {
  Graph<double> g(false);
  const double v = g.value(build(g))[0];
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss");
  return v;
}

/// Per tensor, compares the analytic gradient with central differences on the
/// probed coordinates and reports ‖g_a − g_fd‖ / max(‖g_a‖, ‖g_fd‖, 1e-8).
inline GradCheckReport grad_check(const std::vector<Parameter<double>*>& params, const LossBuilder& build,
                                  const GradCheckOptions& opt = {}) {
  GradCheckReport rep;
  for (auto* p : params) p->zero_grad();
  {
    Graph<double> g;
    Var loss = build(g);
    if (!std::isfinite(g.value(loss)[0])) throw NumericError("grad_check: non-finite loss");
    g.backward(loss);
  }
  Rng rng(opt.seed);
  const double h = opt.eps;
  for (auto* p : params) {
    const std::size_t n = p->value.size();
    std::vector<std::size_t> idx;
    if (opt.coords_per_tensor == 0 || n <= opt.coords_per_tensor) {
      for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
    } else {
      for (std::size_t i = 0; i < opt.coords_per_tensor; ++i) idx.push_back(rng.below(n));
    }
    double diff2 = 0, a2 = 0, f2 = 0;
    for (std::size_t i : idx) {
      const double orig = p->value[i];
      p->value[i] = orig + h;
      const double fp = eval_loss(build);
      p->value[i] = orig - h;
      const double fm = eval_loss(build);
      p->value[i] = orig;
      rep.evaluations += 2;
      const double fd = (fp - fm) / (2 * h);
      const double an = p->grad[i];
      diff2 += (an - fd) * (an - fd);
      a2 += an * an;
      f2 += fd * fd;
    }
    const double err = relative_error(std::sqrt(diff2), std::sqrt(a2), std::sqrt(f2));
    rep.per_tensor[p->name] = err;
    if (err >= rep.max_rel_err) {
      rep.max_rel_err = err;
      rep.worst = p->name;
    }
  }
  if (opt.directional) {
    std::vector<std::vector<double>> dir;
    double norm2 = 0, an = 0;
    for (auto* p : params) {
      std::vector<double> d(p->value.size());
      for (double& x : d) {
        x = rng.normal();
        norm2 += x * x;
      }
      dir.push_back(std::move(d));
    }
    const double inv = 1.0 / std::sqrt(norm2);
    auto shift = [&](double s) {
      for (std::size_t k = 0; k < params.size(); ++k)
        for (std::size_t i = 0; i < dir[k].size(); ++i) params[k]->value[i] += s * dir[k][i] * inv;
    };
    for (std::size_t k = 0; k < params.size(); ++k)
      for (std::size_t i = 0; i < dir[k].size(); ++i) an += params[k]->grad[i] * dir[k][i] * inv;
    std::vector<Array<double>> saved;
    for (auto* p : params) saved.push_back(p->value);
    shift(h);
    const double fp = eval_loss(build);
    for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = saved[k];
    shift(-h);
    const double fm = eval_loss(build);
    for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = saved[k];
    rep.evaluations += 2;
    const double fd = (fp - fm) / (2 * h);
    rep.directional_rel_err = relative_error(an - fd, an, fd);
    if (rep.directional_rel_err > rep.max_rel_err) {
      rep.max_rel_err = rep.directional_rel_err;
      rep.worst = "<directional>";
    }
  }
  return rep;
}

/// Scalar convenience form: d/dx f at x by central differences vs `analytic`.
inline double grad_check_scalar(const std::function<double(double)>& f, double x, double analytic,
                                double eps = 1e-5) {
  const double fd = (f(x + eps) - f(x - eps)) / (2 * eps);
  return relative_error(analytic - fd, analytic, fd);
}

}  // namespace saferedir
