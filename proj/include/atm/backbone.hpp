#pragma once

#include <array>

#include "atm/nn.hpp"

namespace atm {

struct StageConfig {
  int64_t channels = 0;     // C_i
  int64_t expansion = 0;    // E_i, MLP hidden = E_i * C_i
  int64_t depth = 0;        // N_i ATM blocks
  int64_t offsets = 0;      // |O_i| offsets per directional branch
  int64_t stride = 0;       // patch-embedding stride into this stage
};

struct VariantConfig {
  std::string name;
  std::array<StageConfig, 4> stages;
  int64_t offset_refresh = 1;  // K: new offsets every K blocks
  int64_t num_classes = 1000;
  double drop_path_rate = 0.0;

  void validate() const {
    ATM_CHECK(!name.empty(), ConfigError, "variant: empty name");
    ATM_CHECK(offset_refresh >= 1, ConfigError, "variant ", name,
              ": offset_refresh K must be >= 1, got ", offset_refresh);
    ATM_CHECK(num_classes >= 2, ConfigError, "variant ", name,
              ": num_classes must be >= 2, got ", num_classes);
    const int64_t want_stride[4] = {4, 2, 2, 2};
    for (int i = 0; i < 4; ++i) {
      const StageConfig& s = stages[size_t(i)];
      ATM_CHECK(s.depth >= 1, ConfigError, "variant ", name, " stage ", i + 1,
                ": depth must be >= 1, got ", s.depth);
      ATM_CHECK(s.stride == want_stride[i], ConfigError, "variant ", name,
                " stage ", i + 1, ": stride must be ", want_stride[i], ", got ",
                s.stride);
      ATM_CHECK(s.offsets >= 1 && s.channels % s.offsets == 0, ConfigError,
                "variant ", name, " stage ", i + 1, ": offset count ",
                s.offsets, " must divide channels ", s.channels);
      ATM_CHECK(s.expansion >= 1, ConfigError, "variant ", name, " stage ",
                i + 1, ": expansion must be >= 1, got ", s.expansion);
      ATM_CHECK(s.channels % 4 == 0, ConfigError, "variant ", name, " stage ",
                i + 1, ": channels must be divisible by 4, got ", s.channels);
    }
  }
};

// The five backbone variants. Stage layout {C, E, N, |O|, stride}.
inline VariantConfig variant_config(const std::string& name) {
  VariantConfig v;
  v.name = name;
  if (name == "xT") {
    v.stages = {{{64, 4, 2, 32, 4},
                 {128, 4, 2, 32, 2},
                 {320, 4, 4, 80, 2},
                 {512, 4, 2, 64, 2}}};
    v.offset_refresh = 2;
    v.drop_path_rate = 0.1;
  } else if (name == "T") {
    v.stages = {{{64, 4, 2, 32, 4},
                 {128, 4, 3, 32, 2},
                 {320, 4, 10, 80, 2},
                 {512, 4, 3, 64, 2}}};
    v.offset_refresh = 2;
    v.drop_path_rate = 0.1;
  } else if (name == "S") {
    v.stages = {{{64, 8, 3, 32, 4},
                 {128, 8, 4, 32, 2},
                 {320, 4, 18, 80, 2},
                 {512, 4, 3, 64, 2}}};
    v.offset_refresh = 6;
    v.drop_path_rate = 0.2;
  } else if (name == "B") {
    v.stages = {{{64, 8, 3, 32, 4},
                 {128, 8, 8, 32, 2},
                 {320, 4, 27, 80, 2},
                 {512, 4, 3, 64, 2}}};
    v.offset_refresh = 6;
    v.drop_path_rate = 0.3;
  } else if (name == "L") {
    v.stages = {{{96, 4, 3, 48, 4},
                 {192, 4, 4, 48, 2},
                 {384, 4, 24, 96, 2},
                 {768, 4, 3, 96, 2}}};
    v.offset_refresh = 6;
    v.drop_path_rate = 0.3;
  } else {
    throw ConfigError(concat_msg("unknown variant '", name,
                                 "' (expected xT, T, S, B or L)"));
  }
  v.validate();
  return v;
}

inline const std::array<const char*, 5>& variant_names() {
  static const std::array<const char*, 5> names = {"xT", "T", "S", "B", "L"};
  return names;
}

// Desk-scale model for tests and the training smoke runs.
inline VariantConfig micro_variant(int64_t num_classes = 2) {
  VariantConfig v;
  v.name = "micro";
  v.stages = {{{8, 4, 1, 4, 4},
               {16, 4, 1, 8, 2},
               {24, 4, 2, 8, 2},
               {32, 4, 1, 16, 2}}};
  v.offset_refresh = 1;
  v.num_classes = num_classes;
  v.drop_path_rate = 0.0;
  v.validate();
  return v;
}

template <class T>
struct PatchEmbed {
  Array<T> kernel;  // [k,k,Cin,Cout]
  Array<T> bias;
  LayerNorm<T> norm;
  int64_t stride = 1, pad = 0;

  PatchEmbed() = default;
  PatchEmbed(ParamRegistry<T>& reg, const std::string& prefix, Rng& rng,
             int64_t k, int64_t cin, int64_t cout, int64_t s, int64_t p)
      : stride(s), pad(p) {
    kernel = reg.add(prefix + ".proj.weight", Shape{k, k, cin, cout},
                     ParamKind::weight, Init::fan_in_uniform, rng, k * k * cin);
    bias = reg.add(prefix + ".proj.bias", Shape{cout}, ParamKind::bias,
                   Init::zero, rng);
    norm = LayerNorm<T>(reg, prefix + ".norm", rng, cout);
  }

  Array<T> operator()(Array<T> x) const {
    return norm(strided_conv2d(std::move(x), kernel, bias, stride, pad));
  }
};

template <class T>
struct Stage {
  PatchEmbed<T> embed;
  Peg<T> peg;
  std::vector<BlockParams<T>> blocks;
};

template <class T>
struct Model {
  VariantConfig cfg;
  uint64_t seed = 0;
  bool freeze_offsets = false;  // Table-6 baseline: all offsets pinned to 0
  std::vector<Stage<T>> stages;
  LayerNorm<T> head_norm;
  Linear<T> head_fc;
  ParamRegistry<T> params;
};

// Stem: overlapping patch embed k=7,s=4,p=3; between stages k=3,s=2,p=1.
// Each stage: PEG, then N_i ATM blocks with offsets refreshed every K blocks.
// Head: LN -> global average pool -> linear classifier.
template <class T>
Model<T> build_variant(const VariantConfig& cfg, uint64_t seed) {
  cfg.validate();
  Model<T> m;
  m.cfg = cfg;
  m.seed = seed;
  Rng rng(seed);
  int64_t cin = 3;
  for (int i = 0; i < 4; ++i) {
    const StageConfig& sc = cfg.stages[size_t(i)];
    const std::string sp = concat_msg("stage", i + 1);
    Stage<T> st;
    if (i == 0)
      st.embed = PatchEmbed<T>(m.params, sp + ".embed", rng, 7, cin,
                               sc.channels, 4, 3);
    else
      st.embed = PatchEmbed<T>(m.params, sp + ".embed", rng, 3, cin,
                               sc.channels, 2, 1);
    st.peg = Peg<T>(m.params, sp + ".peg", rng, sc.channels);
    int64_t depth_before = 0;
    for (int j = 0; j < i; ++j) depth_before += cfg.stages[size_t(j)].depth;
    int64_t total_depth = 0;
    for (const auto& s : cfg.stages) total_depth += s.depth;
    for (int64_t j = 0; j < sc.depth; ++j) {
      const bool leader = (j % cfg.offset_refresh) == 0;
      // stochastic depth ramps linearly over the whole network
      const T dpr = total_depth > 1
                        ? T(cfg.drop_path_rate) * T(depth_before + j) /
                              T(total_depth - 1)
                        : T(0);
      st.blocks.emplace_back(m.params, concat_msg(sp, ".block", j + 1), rng,
                             sc.channels, sc.expansion, sc.offsets, leader,
                             dpr);
    }
    m.stages.push_back(std::move(st));
    cin = sc.channels;
  }
  m.head_norm = LayerNorm<T>(m.params, "head.norm", rng, cin);
  m.head_fc = Linear<T>(m.params, "head.fc", rng, cin, cfg.num_classes);
  return m;
}

// Hook for the offset-statistics exporter: called once per generated offset
// pair with (stage, block) 1-based indices.
template <class T>
using OffsetObserver =
    std::function<void(int stage, int block, const OffsetPair<T>&)>;

template <class T>
Array<T> forward_features(Model<T>& m, Array<T> x, FwdCtx<T>& ctx,
                          const OffsetObserver<T>* observer = nullptr) {
  for (size_t si = 0; si < m.stages.size(); ++si) {
    Stage<T>& st = m.stages[si];
    x = st.embed(std::move(x));
    x = st.peg(std::move(x));
    OffsetPair<T> cache;
    for (size_t bi = 0; bi < st.blocks.size(); ++bi) {
      const bool leader = (int64_t(bi) % m.cfg.offset_refresh) == 0;
      auto [y, offs] = atm_block(std::move(x), st.blocks[bi],
                                 leader ? nullptr : &cache, ctx,
                                 m.freeze_offsets);
      x = std::move(y);
      if (leader) {
        cache = offs;
        if (observer && *observer)
          (*observer)(int(si) + 1, int(bi) + 1, cache);
      }
    }
  }
  return x;
}

// images are channel-last [B,H,W,3] with H,W divisible by 32.
template <class T>
Array<T> forward(Model<T>& m, Array<T> images, FwdCtx<T>& ctx,
                 const OffsetObserver<T>* observer = nullptr) {
  ATM_CHECK(images.rank() == 4 && images.dim(3) == 3, ShapeError,
            "forward: expected [B,H,W,3] images, got ",
            shape_str(images.shape()));
  ATM_CHECK(images.dim(1) % 32 == 0 && images.dim(2) % 32 == 0, ArgumentError,
            "forward: resolution ", images.dim(1), "x", images.dim(2),
            " must be divisible by 32");
  Array<T> x = forward_features(m, std::move(images), ctx, observer);
  x = m.head_norm(std::move(x));
  Array<T> pooled = global_avg_pool(std::move(x));
  return m.head_fc(std::move(pooled));
}

template <class T>
int64_t count_params(const Model<T>& m) {
  return m.params.total_count();
}

inline int64_t ceil_div(int64_t a, int64_t b) { return (a + b - 1) / b; }

// Closed-form MAC counts at an input resolution. Multiply-accumulate
// convention throughout ("FLOPs" label follows the community convention).
// Secondary terms: LN costs 2C MACs/token (normalize + affine), GELU one MAC
// per element, PEG 9C MACs/token; plain residual adds are not counted.
struct FlopBreakdown {
  int64_t patch_embed = 0;
  int64_t peg = 0;
  int64_t atm = 0;   // all per-token ATM terms, exactly linear in H*W
  int64_t gate = 0;  // per-image gate bottleneck (constant in H*W)
  int64_t mlp = 0;
  int64_t norm = 0;
  int64_t act = 0;
  int64_t head = 0;

  int64_t total() const {
    return patch_embed + peg + atm + gate + mlp + norm + act + head;
  }
};

inline FlopBreakdown count_flops_breakdown(const VariantConfig& cfg, int64_t h,
                                           int64_t w) {
  cfg.validate();
  ATM_CHECK(h % 32 == 0 && w % 32 == 0, ArgumentError, "count_flops: resolution ",
            h, "x", w, " must be divisible by 32");
  FlopBreakdown f;
  int64_t cin = 3;
  int64_t ch = h, cw = w;
  for (int i = 0; i < 4; ++i) {
    const StageConfig& sc = cfg.stages[size_t(i)];
    const int64_t k = i == 0 ? 7 : 3;
    ch /= sc.stride;
    cw /= sc.stride;
    const int64_t hw = ch * cw;
    const int64_t c = sc.channels;
    f.patch_embed += hw * k * k * cin * c;
    f.norm += hw * 2 * c;  // embed LN
    f.peg += hw * 9 * c;
    const int64_t leaders = ceil_div(sc.depth, cfg.offset_refresh);
    // leaders run the full module; followers skip offset prediction
    f.atm += leaders * atm_flops(ch, cw, c, sc.offsets);
    f.atm += (sc.depth - leaders) *
             (atm_flops(ch, cw, c, sc.offsets) - hw * 2 * c * sc.offsets);
    f.gate += sc.depth * atm_gate_flops(c);
    f.act += sc.depth * (c / 4);  // gate bottleneck GELU
    f.mlp += sc.depth * hw * 2 * sc.expansion * c * c;
    f.act += sc.depth * hw * sc.expansion * c;  // MLP GELU
    f.norm += sc.depth * hw * 4 * c;            // two block LNs
    cin = c;
  }
  const int64_t hw4 = (h / 32) * (w / 32);
  f.norm += hw4 * 2 * cin;              // head LN
  f.head += hw4 * cin;                  // global average pool
  f.head += cin * cfg.num_classes;      // classifier
  return f;
}

inline int64_t count_flops(const VariantConfig& cfg, int64_t h, int64_t w) {
  return count_flops_breakdown(cfg, h, w).total();
}

template <class T>
int64_t count_flops(const Model<T>& m, int64_t h, int64_t w) {
  return count_flops(m.cfg, h, w);
}

}  // namespace atm
