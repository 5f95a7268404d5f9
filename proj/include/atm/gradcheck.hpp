#pragma once

#include "atm/backbone.hpp"

// Central finite-difference verification of the tape gradients, always in
// 64-bit. Offsets in the gather checks are constructed to keep sampling
// positions strictly inside the image and away from integer coordinates,
// where linear interpolation is non-smooth and finite differences would
// straddle the kink.

namespace atm {

struct GradCheckCase {
  std::string name;
  double max_rel_err = 0.0;
};

inline double grad_rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

// `fwd` recomputes the scalar loss from the current leaf values. One taped
// pass collects analytic grads, then every leaf element is perturbed +-h.
inline double check_gradients(const std::function<Array<double>()>& fwd,
                              const std::vector<Array<double>*>& leaves,
                              double h = 1e-5) {
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    for (Array<double>* l : leaves) {
      l->set_requires_grad(true);
      l->zero_grad();
    }
    Array<double> loss = fwd();
    backward(loss);
  }
  double worst = 0.0;
  for (Array<double>* l : leaves) {
    for (int64_t i = 0; i < l->size(); ++i) {
      const double analytic = l->grad()[i];
      const double orig = (*l)[i];
      (*l)[i] = orig + h;
      const double lp = fwd()[0];
      (*l)[i] = orig - h;
      const double lm = fwd()[0];
      (*l)[i] = orig;
      const double numeric = (lp - lm) / (2.0 * h);
      worst = std::max(worst, grad_rel_err(analytic, numeric));
    }
  }
  return worst;
}

namespace detail {

inline void fill_uniform(Array<double>& a, Rng& rng, double lo, double hi) {
  for (int64_t i = 0; i < a.size(); ++i) a[i] = rng.uniform(lo, hi);
}

// Offsets whose sampling positions land in [0.25, extent-1.25] with the
// fractional part in [0.25, 0.75].
inline void fill_safe_offsets(Array<double>& off, Rng& rng, int64_t extent,
                              int64_t positions_per_row, Axis axis) {
  const int64_t bsz = off.dim(0), h = off.dim(1), w = off.dim(2), g = off.dim(3);
  (void)positions_per_row;
  for (int64_t b = 0; b < bsz; ++b)
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j) {
        const int64_t pos = axis == Axis::width ? j : i;
        for (int64_t k = 0; k < g; ++k) {
          const int64_t q = extent > 1 ? rng.uniform_int(extent - 1) : 0;
          const double p = double(q) + rng.uniform(0.25, 0.75);
          off[((b * h + i) * w + j) * g + k] = p - double(pos);
        }
      }
}

}  // namespace detail

// Finite-difference checks for every primitive plus an end-to-end check of a
// one-block micro model. Returns one case per check.
inline std::vector<GradCheckCase> run_gradient_checks(uint64_t seed = 7,
                                                      double h = 1e-5) {
  std::vector<GradCheckCase> out;
  Rng rng(seed);
  using A = Array<double>;

  auto proj_for = [&](const Shape& s) {
    A k(s);
    detail::fill_uniform(k, rng, -1.0, 1.0);
    return k;
  };
  auto rand = [&](Shape s, double lo = -1.0, double hi = 1.0) {
    A a(std::move(s));
    detail::fill_uniform(a, rng, lo, hi);
    return a;
  };

  {
    A x = rand({2, 3, 5}), w = rand({5, 4}), b = rand({4});
    A k = proj_for({2, 3, 4});
    out.push_back({"affine", check_gradients(
        [&] { return sum(mul(affine(x, w, b), k)); }, {&x, &w, &b}, h)});
  }
  {
    A x = rand({2, 4, 6}), g = rand({6}, 0.5, 1.5), b = rand({6});
    A k = proj_for({2, 4, 6});
    out.push_back({"layer_norm", check_gradients(
        [&] { return sum(mul(layer_norm(x, g, b, 1e-5), k)); }, {&x, &g, &b},
        h)});
  }
  {
    A x = rand({3, 12});
    A k = proj_for({3, 12});
    out.push_back({"softmax_groups", check_gradients(
        [&] { return sum(mul(softmax_groups(x, 3), k)); }, {&x}, h)});
  }
  for (Axis axis : {Axis::width, Axis::height}) {
    A x = rand({2, 5, 4, 6});
    const int64_t extent = axis == Axis::width ? 4 : 5;
    A off({2, 5, 4, 3});
    detail::fill_safe_offsets(off, rng, extent, 0, axis);
    A k = proj_for({2, 5, 4, 6});
    out.push_back(
        {axis == Axis::width ? "gather_interp_1d.width"
                             : "gather_interp_1d.height",
         check_gradients(
             [&] { return sum(mul(gather_interp_1d(x, off, axis), k)); },
             {&x, &off}, h)});
  }
  {
    A x = rand({2, 5, 4, 3}), kk = rand({3, 3, 3});
    A k = proj_for({2, 5, 4, 3});
    out.push_back({"depthwise_conv2d", check_gradients(
        [&] { return sum(mul(depthwise_conv2d(x, kk), k)); }, {&x, &kk}, h)});
  }
  {
    A x = rand({1, 6, 7, 3}), kk = rand({3, 3, 3, 4}), b = rand({4});
    A k = proj_for({1, 3, 4, 4});
    out.push_back({"strided_conv2d", check_gradients(
        [&] { return sum(mul(strided_conv2d(x, kk, b, 2, 1), k)); },
        {&x, &kk, &b}, h)});
  }
  {
    A x = rand({2, 3, 4}), ypair = rand({2, 3, 4});
    A k = proj_for({2, 3, 4});
    out.push_back({"add", check_gradients(
        [&] { return sum(mul(add(x, ypair), k)); }, {&x, &ypair}, h)});
    out.push_back({"mul", check_gradients(
        [&] { return sum(mul(mul(x, ypair), k)); }, {&x, &ypair}, h)});
    out.push_back({"scale", check_gradients(
        [&] { return sum(mul(scale(x, 1.7), k)); }, {&x}, h)});
    out.push_back({"gelu", check_gradients(
        [&] { return sum(mul(gelu(x), k)); }, {&x}, h)});
  }
  {
    A x = rand({2, 3, 4, 5});
    A k = proj_for({2, 5});
    out.push_back({"global_avg_pool", check_gradients(
        [&] { return sum(mul(global_avg_pool(x), k)); }, {&x}, h)});
  }
  {
    A logits = rand({4, 7});
    std::vector<int64_t> labels;
    for (int i = 0; i < 4; ++i) labels.push_back(rng.uniform_int(7));
    out.push_back({"cross_entropy", check_gradients(
        [&] { return cross_entropy(logits, labels, 0.1); }, {&logits}, h)});
  }
  {
    A xw = rand({2, 3, 4, 6}), xh = rand({2, 3, 4, 6}), xi = rand({2, 3, 4, 6});
    A alpha = rand({2, 18}, 0.0, 1.0);
    A k = proj_for({2, 3, 4, 6});
    out.push_back({"mix_branches", check_gradients(
        [&] { return sum(mul(mix_branches(xw, xh, xi, alpha), k)); },
        {&xw, &xh, &xi, &alpha}, h)});
  }
  {
    A x = rand({2, 3, 4, 5});
    A k = proj_for({2, 6, 8, 5});
    out.push_back({"upsample_nearest2x", check_gradients(
        [&] { return sum(mul(upsample_nearest2x(x), k)); }, {&x}, h)});
  }
  {
    A x = rand({2, 3, 4});
    out.push_back({"sum", check_gradients([&] { return sum(x); }, {&x}, h)});
  }

  // One-block micro model, end to end through LN / offset prediction /
  // gather / fusion / projection / MLP and both residuals. Offset FC biases
  // are pushed to 0.4 and the weights shrunk so every sampling position sits
  // in the smooth interior.
  {
    ParamRegistry<double> reg;
    Rng prng(seed + 1);
    BlockParams<double> block(reg, "block", prng, 8, 2, 4, true, 0.0);
    for (auto& e : reg.entries()) {
      if (e.name.find("offset") != std::string::npos) {
        if (e.kind == ParamKind::bias)
          e.value.fill(0.4);
        else
          for (int64_t i = 0; i < e.value.size(); ++i) e.value[i] *= 0.05;
      }
    }
    A x = rand({2, 5, 6, 8}, -0.8, 0.8);
    A k = proj_for({2, 5, 6, 8});
    std::vector<Array<double>*> leaves{&x};
    for (auto& e : reg.entries()) leaves.push_back(&e.value);
    FwdCtx<double> ctx;
    out.push_back({"micro_block", check_gradients(
        [&] {
          auto [y, offs] = atm_block(Array<double>(x), block, nullptr, ctx);
          (void)offs;
          return sum(mul(std::move(y), k));
        },
        leaves, h)});
  }
  return out;
}

inline double max_gradcheck_error(const std::vector<GradCheckCase>& cases) {
  double worst = 0.0;
  for (const auto& c : cases) worst = std::max(worst, c.max_rel_err);
  return worst;
}

}  // namespace atm
