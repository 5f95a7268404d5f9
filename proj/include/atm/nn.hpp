#pragma once

#include <optional>
#include <string>

#include "atm/ops.hpp"

namespace atm {

// Parameter kinds drive weight-decay grouping (bias/norm exempt) and
// checkpoint bookkeeping.
enum class ParamKind { weight, bias, norm };

template <class T>
struct ParamEntry {
  std::string name;
  Array<T> value;  // shares storage with the owning module
  ParamKind kind;
};

enum class Init { zero, one, fan_in_uniform };

// Flat ordered registry of every learnable array in a model. Registration
// order is the checkpoint order, so builds are reproducible from a seed.
template <class T>
class ParamRegistry {
 public:
  Array<T> add(const std::string& name, Shape shape, ParamKind kind, Init init,
               Rng& rng, int64_t fan_in = 0) {
    Array<T> a(shape);
    switch (init) {
      case Init::zero:
        break;
      case Init::one:
        a.fill(T(1));
        break;
      case Init::fan_in_uniform: {
        const double bound = 1.0 / std::sqrt(double(std::max<int64_t>(fan_in, 1)));
        for (int64_t i = 0; i < a.size(); ++i)
          a[i] = T(rng.uniform(-bound, bound));
        break;
      }
    }
    a.set_requires_grad(true);
    for (const auto& e : entries_)
      ATM_CHECK(e.name != name, StateError, "duplicate parameter name ", name);
    entries_.push_back({name, a, kind});
    return a;
  }

  std::vector<ParamEntry<T>>& entries() { return entries_; }
  const std::vector<ParamEntry<T>>& entries() const { return entries_; }

  int64_t total_count() const {
    int64_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  const ParamEntry<T>* find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }

  void zero_grads() {
    for (auto& e : entries_) e.value.zero_grad();
  }

 private:
  std::vector<ParamEntry<T>> entries_;
};

template <class T>
struct Linear {
  Array<T> w, b;

  Linear() = default;
  Linear(ParamRegistry<T>& reg, const std::string& prefix, Rng& rng,
         int64_t cin, int64_t cout, Init weight_init = Init::fan_in_uniform) {
    w = reg.add(prefix + ".weight", Shape{cin, cout}, ParamKind::weight,
                weight_init, rng, cin);
    b = reg.add(prefix + ".bias", Shape{cout}, ParamKind::bias, Init::zero, rng);
  }

  bool defined() const { return w.defined(); }
  Array<T> operator()(Array<T> x) const { return affine(std::move(x), w, b); }
};

template <class T>
struct LayerNorm {
  Array<T> gamma, beta;
  T eps = T(1e-5);

  LayerNorm() = default;
  LayerNorm(ParamRegistry<T>& reg, const std::string& prefix, Rng& rng,
            int64_t c) {
    gamma = reg.add(prefix + ".gamma", Shape{c}, ParamKind::norm, Init::one, rng);
    beta = reg.add(prefix + ".beta", Shape{c}, ParamKind::norm, Init::zero, rng);
  }

  Array<T> operator()(Array<T> x) const {
    return layer_norm(std::move(x), gamma, beta, eps);
  }
};

// Per-token per-channel-group displacements along one axis, in token units.
template <class T>
struct OffsetField {
  Array<T> values;  // [B,H,W,G]
  Axis axis = Axis::width;
  int64_t group_size = 1;  // channels sharing one displacement

  bool defined() const { return values.defined(); }
};

// One Active Token Mixer. Offset predictors exist only on blocks that
// generate offsets (the first block of each K-block refresh group); the
// blocks in between reuse the cached fields.
template <class T>
struct AtmParams {
  int64_t channels = 0;
  int64_t groups = 0;  // |O| offsets per directional branch
  Linear<T> offset_fc_w, offset_fc_h;  // C -> G, absent on non-leader blocks
  Linear<T> fc_w, fc_h, fc_i;          // branch embeddings, C -> C
  Linear<T> gate_fc1;                  // C -> C/4
  Linear<T> gate_fc2;                  // C/4 -> 3C
  Linear<T> proj;                      // C -> C output projection

  AtmParams() = default;
  AtmParams(ParamRegistry<T>& reg, const std::string& prefix, Rng& rng,
            int64_t c, int64_t g, bool with_offset_fcs) {
    ATM_CHECK(g >= 1 && c % g == 0, ConfigError, "ATM at ", prefix,
              ": offset count ", g, " must divide channels ", c);
    ATM_CHECK(c % 4 == 0, ConfigError, "ATM at ", prefix, ": channels ", c,
              " must be divisible by 4 for the gate bottleneck");
    channels = c;
    groups = g;
    if (with_offset_fcs) {
      offset_fc_w = Linear<T>(reg, prefix + ".offset_w", rng, c, g);
      offset_fc_h = Linear<T>(reg, prefix + ".offset_h", rng, c, g);
    }
    fc_w = Linear<T>(reg, prefix + ".fc_w", rng, c, c);
    fc_h = Linear<T>(reg, prefix + ".fc_h", rng, c, c);
    fc_i = Linear<T>(reg, prefix + ".fc_i", rng, c, c);
    gate_fc1 = Linear<T>(reg, prefix + ".gate_fc1", rng, c, c / 4);
    gate_fc2 = Linear<T>(reg, prefix + ".gate_fc2", rng, c / 4, 3 * c);
    proj = Linear<T>(reg, prefix + ".proj", rng, c, c);
  }

  bool has_offset_fcs() const { return offset_fc_w.defined(); }
};

// Shared affine map over every token -> one G-vector of raw continuous
// offsets per token. No activation, no clamping here; clamping happens at
// the sampling site.
template <class T>
OffsetField<T> predict_offsets(const Array<T>& x, const Linear<T>& fc,
                               Axis axis) {
  ATM_CHECK(x.rank() == 4, ShapeError, "predict_offsets: input must be BHWC");
  const int64_t c = x.dim(3);
  ATM_CHECK(fc.w.dim(0) == c, ShapeError, "predict_offsets: fc input width ",
            fc.w.dim(0), " vs channels ", c);
  const int64_t g = fc.w.dim(1);
  OffsetField<T> f;
  f.values = fc(x);
  f.axis = axis;
  f.group_size = c / g;
  return f;
}

template <class T>
OffsetField<T> zero_offsets(const Array<T>& x, int64_t groups, Axis axis) {
  OffsetField<T> f;
  f.values = Array<T>(Shape{x.dim(0), x.dim(1), x.dim(2), groups});
  f.axis = axis;
  f.group_size = x.dim(3) / groups;
  return f;
}

template <class T>
Array<T> recompose_w(Array<T> x, const OffsetField<T>& off) {
  ATM_CHECK(off.axis == Axis::width, ArgumentError,
            "recompose_w: offset field has axis ", axis_name(off.axis));
  return gather_interp_1d(std::move(x), off.values, Axis::width);
}

template <class T>
Array<T> recompose_h(Array<T> x, const OffsetField<T>& off) {
  ATM_CHECK(off.axis == Axis::height, ArgumentError,
            "recompose_h: offset field has axis ", axis_name(off.axis));
  return gather_interp_1d(std::move(x), off.values, Axis::height);
}

// Fusion of the two recomposed tokens and the identity branch. Each branch
// is embedded by its own FC; the per-channel gates are a 3-way softmax over
// logits produced from the global-average-pooled branch sum through a
// C -> C/4 -> 3C bottleneck. Returns the convex combination (the output
// projection is applied by atm_forward, after fusion).
template <class T>
Array<T> fuse(Array<T> x_w, Array<T> x_h, Array<T> x_i,
              const AtmParams<T>& p) {
  ATM_CHECK(x_w.shape() == x_h.shape() && x_w.shape() == x_i.shape(),
            ShapeError, "fuse: branch shapes differ: ", shape_str(x_w.shape()),
            " ", shape_str(x_h.shape()), " ", shape_str(x_i.shape()));
  Array<T> ew = p.fc_w(std::move(x_w));
  Array<T> eh = p.fc_h(std::move(x_h));
  Array<T> ei = p.fc_i(std::move(x_i));
  Array<T> s = add(add(ew, eh), ei);
  Array<T> pooled = global_avg_pool(std::move(s));
  Array<T> logits = p.gate_fc2(gelu(p.gate_fc1(std::move(pooled))));
  Array<T> alpha = softmax_groups(std::move(logits), 3);
  return mix_branches(std::move(ew), std::move(eh), std::move(ei),
                      std::move(alpha));
}

template <class T>
struct OffsetPair {
  OffsetField<T> w, h;
  bool valid = false;
};

// Full ATM module. When `cached` is null the offsets are predicted from x
// (or forced to zero when `freeze_zero` is set) and returned for reuse by
// the following blocks of the refresh group.
template <class T>
std::pair<Array<T>, OffsetPair<T>> atm_forward(Array<T> x,
                                               const AtmParams<T>& p,
                                               const OffsetPair<T>* cached,
                                               bool freeze_zero = false) {
  ATM_CHECK(x.rank() == 4 && x.dim(3) == p.channels, ShapeError,
            "atm_forward: input ", shape_str(x.shape()),
            " does not match ATM channels ", p.channels);
  OffsetPair<T> offs;
  if (cached) {
    ATM_CHECK(cached->valid, ArgumentError, "atm_forward: cached offsets invalid");
    ATM_CHECK(cached->w.axis == Axis::width && cached->h.axis == Axis::height,
              ArgumentError, "atm_forward: cached offset axes mismatched");
    ATM_CHECK(cached->w.values.dim(3) == p.groups &&
                  cached->h.values.dim(3) == p.groups,
              ArgumentError, "atm_forward: cached offset group count ",
              cached->w.values.dim(3), " vs params ", p.groups);
    offs = *cached;
  } else if (freeze_zero || !p.has_offset_fcs()) {
    ATM_CHECK(freeze_zero, StateError,
              "atm_forward: block has no offset predictor and no cached offsets");
    offs.w = zero_offsets(x, p.groups, Axis::width);
    offs.h = zero_offsets(x, p.groups, Axis::height);
    offs.valid = true;
  } else {
    offs.w = predict_offsets(x, p.offset_fc_w, Axis::width);
    offs.h = predict_offsets(x, p.offset_fc_h, Axis::height);
    offs.valid = true;
  }
  Array<T> xw = recompose_w(x, offs.w);
  Array<T> xh = recompose_h(x, offs.h);
  Array<T> fused = fuse(std::move(xw), std::move(xh), x, p);
  return {p.proj(std::move(fused)), std::move(offs)};
}

// Exact MAC count of one ATM module, strictly linear in H*W. Terms:
//   2*C*G      offset prediction (two directional C->G FCs)
//   3*C^2      branch embeddings FC^{W,H,I}
//   C^2        output projection
//   4*C        the two linear interpolations (2 MACs per gathered element)
//   3*C        gated branch combination
//   C          accumulation into the pooled gate input
// The gate bottleneck itself costs C^2 + 6*C per image, not per token; it is
// excluded here and accounted separately so this count scales exactly with
// the number of tokens.
inline int64_t atm_flops(int64_t h, int64_t w, int64_t c, int64_t g) {
  ATM_CHECK(h >= 1 && w >= 1 && c >= 1 && g >= 1, ArgumentError,
            "atm_flops: extents must be positive");
  return h * w * (2 * c * g + 4 * c * c + 8 * c);
}

inline int64_t atm_gate_flops(int64_t c) { return c * c + 6 * c; }

// Forward-pass context: training toggles drop-path, rng draws the per-sample
// keep masks, offset_predictions counts generator executions.
template <class T>
struct FwdCtx {
  bool training = false;
  Rng* rng = nullptr;
  int64_t offset_predictions = 0;
};

// Per-sample stochastic depth on a residual branch.
template <class T>
Array<T> drop_path(Array<T> x, T rate, FwdCtx<T>& ctx) {
  if (!ctx.training || rate <= T(0)) return x;
  ATM_CHECK(ctx.rng != nullptr, StateError, "drop_path: training ctx needs rng");
  const int64_t bsz = x.dim(0);
  const int64_t per = x.size() / bsz;
  const T keep = T(1) - rate;
  Array<T> mask(x.shape());
  for (int64_t b = 0; b < bsz; ++b) {
    const T v = ctx.rng->bernoulli(double(keep)) ? T(1) / keep : T(0);
    T* m = mask.data() + b * per;
    for (int64_t i = 0; i < per; ++i) m[i] = v;
  }
  return mul(std::move(x), std::move(mask));
}

// ATM block: X' = ATM(LN(X)) + X, then X'' = MLP(LN(X')) + X'.
template <class T>
struct BlockParams {
  LayerNorm<T> norm1, norm2;
  AtmParams<T> atm;
  Linear<T> mlp_fc1, mlp_fc2;
  T drop_path_rate = T(0);

  BlockParams() = default;
  BlockParams(ParamRegistry<T>& reg, const std::string& prefix, Rng& rng,
              int64_t c, int64_t expansion, int64_t g, bool offset_leader,
              T dpr)
      : drop_path_rate(dpr) {
    norm1 = LayerNorm<T>(reg, prefix + ".norm1", rng, c);
    atm = AtmParams<T>(reg, prefix + ".atm", rng, c, g, offset_leader);
    norm2 = LayerNorm<T>(reg, prefix + ".norm2", rng, c);
    mlp_fc1 = Linear<T>(reg, prefix + ".mlp_fc1", rng, c, expansion * c);
    mlp_fc2 = Linear<T>(reg, prefix + ".mlp_fc2", rng, expansion * c, c);
  }
};

template <class T>
std::pair<Array<T>, OffsetPair<T>> atm_block(Array<T> x,
                                             const BlockParams<T>& p,
                                             const OffsetPair<T>* cached,
                                             FwdCtx<T>& ctx,
                                             bool freeze_zero = false) {
  ATM_CHECK(x.dim(3) == p.atm.channels, ShapeError, "atm_block: input channels ",
            x.dim(3), " vs params ", p.atm.channels);
  Array<T> normed = p.norm1(x);
  if (!cached && !freeze_zero) ctx.offset_predictions++;
  auto [mixed, offs] = atm_forward(std::move(normed), p.atm, cached, freeze_zero);
  Array<T> x1 = add(drop_path(std::move(mixed), p.drop_path_rate, ctx), x);
  Array<T> m = p.mlp_fc2(gelu(p.mlp_fc1(p.norm2(x1))));
  Array<T> x2 = add(drop_path(std::move(m), p.drop_path_rate, ctx), x1);
  return {std::move(x2), std::move(offs)};
}

// Positional encoding generator: zero-initialized 3x3 depthwise convolution
// with a residual add, once per stage before the first block.
template <class T>
struct Peg {
  Array<T> kernel;

  Peg() = default;
  Peg(ParamRegistry<T>& reg, const std::string& prefix, Rng& rng, int64_t c) {
    kernel = reg.add(prefix + ".kernel", Shape{3, 3, c}, ParamKind::weight,
                     Init::zero, rng);
  }

  Array<T> operator()(Array<T> x) const {
    return add(x, depthwise_conv2d(x, kernel));
  }
};

}  // namespace atm
