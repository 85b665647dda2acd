#include "csformer/grad_suite.hpp"

#include <algorithm>
#include <memory>
#include <random>

#include "csformer/maeip.hpp"
#include "csformer/model.hpp"
#include "csformer/ops.hpp"
#include "csformer/padding.hpp"
#include "csformer/params.hpp"
#include "csformer/train.hpp"

namespace csformer {
namespace {

class Sampler {
 public:
  explicit Sampler(std::uint64_t seed) : rng_(seed) {}

  Tensor64 tensor(Shape shape, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> values(static_cast<std::size_t>(shape_numel(shape)));
    for (double& v : values) v = dist(rng_);
    return Tensor64(std::move(shape), std::move(values));
  }

  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
  std::mt19937_64& rng() { return rng_; }

  ParamStore<double> params(const ModelConfig& config, double amplitude) {
    auto p = init_params<double>(config, {rng_(), false});
    std::uniform_real_distribution<double> dist(-amplitude, amplitude);
    for (auto& t : p.tensors())
      for (double& v : t.mutable_data()) v = dist(rng_);
    return p;
  }

 private:
  std::mt19937_64 rng_;
};

struct Probe {
  std::function<Tensor64()> f;
  std::vector<Tensor64> inputs;
  /// Keeps masks and other state referenced by `f` alive.
  std::shared_ptr<void> hold;
};

std::vector<Tensor64> with_prefix(const ParamStore<double>& p, const std::string& prefix) {
  std::vector<Tensor64> out;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p.names()[i].rfind(prefix, 0) == 0) out.push_back(p.tensors()[i]);
  return out;
}

std::vector<Tensor64> join(Tensor64 first, std::vector<Tensor64> rest) {
  rest.insert(rest.begin(), std::move(first));
  return rest;
}

class SuiteRunner {
 public:
  SuiteRunner(const GradSuiteOptions& options, const std::function<void(const GradCase&)>& on_case)
      : options_(options), on_case_(on_case), seeds_(options.seed) {}

  void run(const std::string& name, const std::function<Probe(Sampler&)>& build, double eps = 0.0) {
    GradCase result{name, 0, {}};
    GradCheckOptions check = options_.check;
    if (eps > 0.0) check.eps = eps;
    for (int s = 0; s < options_.samples; ++s) {
      Sampler sampler(seeds_());
      Probe probe = build(sampler);
      const Tensor64 projection = sampler.tensor(probe.f().shape());
      check.seed = seeds_();
      auto report = grad_check_params([&] { return sum(mul(probe.f(), projection)); }, probe.inputs, check);
      result.report.max_rel_err = std::max(result.report.max_rel_err, report.max_rel_err);
      result.report.max_abs_err = std::max(result.report.max_abs_err, report.max_abs_err);
      result.report.coords_checked += report.coords_checked;
      result.report.pass = result.report.pass && report.pass;
      ++result.samples;
    }
    suite_.max_rel_err = std::max(suite_.max_rel_err, result.report.max_rel_err);
    suite_.pass = suite_.pass && result.report.pass;
    if (on_case_) on_case_(result);
    suite_.cases.push_back(std::move(result));
  }

  GradSuiteReport take() { return std::move(suite_); }

 private:
  const GradSuiteOptions& options_;
  const std::function<void(const GradCase&)>& on_case_;
  std::mt19937_64 seeds_;
  GradSuiteReport suite_;
};

void op_cases(SuiteRunner& run) {
  run.run("add", [](Sampler& s) {
    Tensor64 a = s.tensor({2, 3, 4}), b = s.tensor({2, 3, 4});
    return Probe{[=] { return add(a, b); }, {a, b}, {}};
  });
  run.run("sub", [](Sampler& s) {
    Tensor64 a = s.tensor({3, 5}), b = s.tensor({3, 5});
    return Probe{[=] { return sub(a, b); }, {a, b}, {}};
  });
  run.run("mul", [](Sampler& s) {
    Tensor64 a = s.tensor({4, 4}), b = s.tensor({4, 4});
    return Probe{[=] { return mul(a, b); }, {a, b}, {}};
  });
  run.run("scale", [](Sampler& s) {
    Tensor64 a = s.tensor({7});
    const double k = s.tensor({1}).item() * 3.0;
    return Probe{[=] { return scale(a, k); }, {a}, {}};
  });
  run.run("add_scalar", [](Sampler& s) {
    Tensor64 a = s.tensor({7});
    return Probe{[=] { return add_scalar(a, 0.75); }, {a}, {}};
  });
  run.run("square_root", [](Sampler& s) {
    Tensor64 a = s.tensor({3, 4}, 0.2, 2.0);
    return Probe{[=] { return square_root(a); }, {a}, {}};
  });
  run.run("channel_mul", [](Sampler& s) {
    Tensor64 x = s.tensor({2, 3, 4, 5}), g = s.tensor({2, 3, 1, 1});
    return Probe{[=] { return channel_mul(x, g); }, {x, g}, {}};
  });
  run.run("add_periodic", [](Sampler& s) {
    Tensor64 a = s.tensor({3, 2, 4}), b = s.tensor({2, 4});
    return Probe{[=] { return add_periodic(a, b); }, {a, b}, {}};
  });
  run.run("sum", [](Sampler& s) {
    Tensor64 a = s.tensor({3, 4});
    return Probe{[=] { return sum(a); }, {a}, {}};
  });
  run.run("mean", [](Sampler& s) {
    Tensor64 a = s.tensor({3, 4});
    return Probe{[=] { return mean(a); }, {a}, {}};
  });
  for (auto [ta, tb] : {std::pair{Transpose::kNo, Transpose::kNo}, std::pair{Transpose::kYes, Transpose::kNo},
                        std::pair{Transpose::kNo, Transpose::kYes}, std::pair{Transpose::kYes, Transpose::kYes}}) {
    const std::string name = std::string("matmul ") + (ta == Transpose::kYes ? "T" : "N") +
                             (tb == Transpose::kYes ? "T" : "N");
    run.run(name, [ta, tb](Sampler& s) {
      const int m = 3, k = 4, n = 5;
      Tensor64 a = ta == Transpose::kYes ? s.tensor({2, k, m}) : s.tensor({2, m, k});
      Tensor64 b = tb == Transpose::kYes ? s.tensor({2, n, k}) : s.tensor({2, k, n});
      return Probe{[=] { return matmul(a, b, ta, tb); }, {a, b}, {}};
    });
  }
  run.run("conv2d", [](Sampler& s) {
    Tensor64 x = s.tensor({2, 4, 7, 6}), w = s.tensor({6, 2, 3, 3}), b = s.tensor({6});
    return Probe{[=] { return conv2d(x, w, b, {2, 1, 2}); }, {x, w, b}, {}};
  });
  run.run("conv2d depthwise", [](Sampler& s) {
    Tensor64 x = s.tensor({1, 3, 5, 6}), w = s.tensor({3, 1, 3, 3});
    return Probe{[=] { return conv2d(x, w, Tensor64{}, {1, 1, 3}); }, {x, w}, {}};
  });
  run.run("layer_norm", [](Sampler& s) {
    Tensor64 x = s.tensor({2, 5, 3, 2}), g = s.tensor({5}), b = s.tensor({5});
    return Probe{[=] { return layer_norm(x, g, b); }, {x, g, b}, {}};
  });
  run.run("gelu", [](Sampler& s) {
    Tensor64 x = s.tensor({20}, -3.0, 3.0);
    return Probe{[=] { return gelu(x); }, {x}, {}};
  });
  run.run("masked_softmax", [](Sampler& s) {
    auto mask = std::make_shared<AttentionMask>(2, 5, 5);
    for (int g = 0; g < 2; ++g)
      for (int r = 0; r < 5; ++r)
        for (int c = 0; c < 5; ++c) mask->set(g, r, c, r == c || s.integer(0, 2) > 0);
    Tensor64 x = s.tensor({4, 5, 5}, -2.0, 2.0);
    return Probe{[=] { return masked_softmax(x, mask.get(), 2); }, {x}, mask};
  });
  run.run("global_avg_pool", [](Sampler& s) {
    Tensor64 x = s.tensor({2, 3, 5, 6});
    return Probe{[=] { return global_avg_pool(x, std::pair{3, 4}); }, {x}, {}};
  });
  run.run("pixel_unshuffle", [](Sampler& s) {
    Tensor64 x = s.tensor({1, 2, 4, 6});
    return Probe{[=] { return pixel_unshuffle(x, 2); }, {x}, {}};
  });
  run.run("pixel_shuffle", [](Sampler& s) {
    Tensor64 x = s.tensor({1, 8, 2, 3});
    return Probe{[=] { return pixel_shuffle(x, 2); }, {x}, {}};
  });
  run.run("gather", [](Sampler& s) {
    auto index = std::make_shared<std::vector<std::int64_t>>(30);
    for (auto& i : *index) i = s.integer(-1, 11);
    Tensor64 x = s.tensor({3, 4});
    IndexMap map{{5, 6}, index};
    return Probe{[=] { return gather(x, map); }, {x}, {}};
  });
  run.run("slice and concat", [](Sampler& s) {
    Tensor64 a = s.tensor({1, 4, 3, 3}), b = s.tensor({1, 2, 3, 3});
    return Probe{[=] { return concat_channels(slice_channels(a, 1, 3), b); }, {a, b}, {}};
  });
  run.run("zero_outside", [](Sampler& s) {
    Tensor64 x = s.tensor({1, 2, 5, 4});
    return Probe{[=] { return zero_outside(x, 3, 2); }, {x}, {}};
  });
  run.run("resize_spatial", [](Sampler& s) {
    Tensor64 x = s.tensor({1, 2, 5, 4});
    return Probe{[=] { return resize_spatial(x, 3, 7); }, {x}, {}};
  });
  run.run("reshape", [](Sampler& s) {
    Tensor64 x = s.tensor({2, 6});
    return Probe{[=] { return reshape(x, {3, 4}); }, {x}, {}};
  });
  // The loss bends on the scale of its 1e-3 constant, so the step must be smaller.
  run.run(
      "charbonnier",
      [](Sampler& s) {
        Tensor64 p = s.tensor({1, 3, 4, 4}), t = s.tensor({1, 3, 4, 4});
        return Probe{[=] { return charbonnier(p, t); }, {p, t}, {}};
      },
      1e-6);
  run.run("mse weighted", [](Sampler& s) {
    Tensor64 p = s.tensor({1, 3, 4, 4}), t = s.tensor({1, 3, 4, 4}), w = s.tensor({1, 3, 4, 4}, 0.0, 1.0);
    return Probe{[=] { return mse(p, t, &w); }, {p, t}, {}};
  });
  run.run("apply_mask", [](Sampler& s) {
    auto masks = std::make_shared<std::vector<MaskSpec>>();
    for (int i = 0; i < 2; ++i) masks->push_back(sample_mask(8, 12, 0.5, 4, s.rng()));
    Tensor64 x = s.tensor({2, 3, 8, 12}), fill = s.tensor({3});
    return Probe{[=] { return apply_mask(x, std::span<const MaskSpec>(*masks), &fill); }, {x, fill}, masks};
  });
}

void component_cases(SuiteRunner& run, const ModelConfig& model) {
  // 12 × 20 pads level 0 to 16 × 24, so every windowed case runs with masks.
  run.run("channel attention", [&](Sampler& s) {
    auto p = std::make_shared<ParamStore<double>>(s.params(model, 0.4));
    Tensor64 x = s.tensor({1, model.width(0), 6, 5});
    return Probe{[=] { return channel_attention(x, *p, "stage0.block0.ca", std::pair{4, 3}); },
                 join(x, with_prefix(*p, "stage0.block0.ca")), p};
  });
  for (int shift : {0, model.shift_size()}) {
    run.run(shift == 0 ? "window attention" : "shifted window attention", [&, shift](Sampler& s) {
      auto p = std::make_shared<ParamStore<double>>(s.params(model, 0.4));
      const PadPlan plan = plan_padding(12, 20, model);
      auto mask = std::make_shared<AttentionMask>(build_pad_mask(plan, 0, shift));
      const StageDims& d = plan.level(0);
      Tensor64 x = zero_outside(s.tensor({1, model.width(0), d.padded_h, d.padded_w}), d.valid_h, d.valid_w);
      struct Hold {
        std::shared_ptr<ParamStore<double>> p;
        std::shared_ptr<AttentionMask> mask;
      };
      auto hold = std::make_shared<Hold>(Hold{p, mask});
      const int heads = model.heads_per_level[0], window = model.window_size;
      return Probe{[=] { return window_msa(x, *hold->p, "stage0.block0.attn", heads, window, shift, hold->mask.get()); },
                   join(x, with_prefix(*p, "stage0.block0.attn")), hold};
    });
  }
  run.run("global attention", [&](Sampler& s) {
    ModelConfig cfg = model;
    cfg.global_attention[1] = true;
    auto p = std::make_shared<ParamStore<double>>(s.params(cfg, 0.4));
    const PadPlan plan = plan_padding(10, 14, cfg);
    auto mask = std::make_shared<AttentionMask>(build_global_mask(plan, 1));
    const StageDims& d = plan.level(1);
    Tensor64 x = zero_outside(s.tensor({1, cfg.width(1), d.padded_h, d.padded_w}), d.valid_h, d.valid_w);
    struct Hold {
      std::shared_ptr<ParamStore<double>> p;
      std::shared_ptr<AttentionMask> mask;
    };
    auto hold = std::make_shared<Hold>(Hold{p, mask});
    const int heads = cfg.heads_per_level[1];
    return Probe{[=] { return global_msa(x, *hold->p, "stage1.block0.attn", heads, hold->mask.get()); },
                 join(x, with_prefix(*p, "stage1.block0.attn")), hold};
  });
  run.run("gcffn", [&](Sampler& s) {
    auto p = std::make_shared<ParamStore<double>>(s.params(model, 0.4));
    const PadPlan plan = plan_padding(12, 20, model);
    auto dims = std::make_shared<StageDims>(plan.level(0));
    Tensor64 x = s.tensor({1, model.width(0), dims->padded_h, dims->padded_w});
    struct Hold {
      std::shared_ptr<ParamStore<double>> p;
      std::shared_ptr<StageDims> dims;
    };
    auto hold = std::make_shared<Hold>(Hold{p, dims});
    return Probe{[=] { return gcffn(x, *hold->p, "stage0.block0.ffn", hold->dims.get()); },
                 join(x, with_prefix(*p, "stage0.block0.ffn")), hold};
  });
  run.run("csformer block", [&](Sampler& s) {
    auto p = std::make_shared<ParamStore<double>>(s.params(model, 0.3));
    auto ctx = std::make_shared<ForwardContext>(plan_padding(12, 20, model), model);
    const StageDims& d = ctx->plan.level(0);
    Tensor64 x = zero_outside(s.tensor({1, model.width(0), d.padded_h, d.padded_w}), d.valid_h, d.valid_w);
    struct Hold {
      std::shared_ptr<ParamStore<double>> p;
      std::shared_ptr<ForwardContext> ctx;
    };
    auto hold = std::make_shared<Hold>(Hold{p, ctx});
    ModelConfig cfg = model;
    return Probe{[=] {
                   return csformer_block(x, *hold->p, "stage0.block0", cfg, 0, AttnKind::kShifted,
                                         hold->ctx->levels[0]);
                 },
                 join(x, with_prefix(*p, "stage0.block0.")), hold};
  });
  run.run("reconstruction head", [&](Sampler& s) {
    auto p = std::make_shared<ParamStore<double>>();
    const int c = model.width(kLevels - 1);
    p->add("head.weight", s.tensor({256 * model.in_channels, c, 1, 1}, -0.1, 0.1));
    p->add("head.bias", s.tensor({256 * model.in_channels}));
    Tensor64 latent = s.tensor({1, c, 1, 2});
    return Probe{[=] { return encoder_reconstruct(latent, *p); }, join(latent, p->tensors()), p};
  });
  run.run("model " + model.name, [&](Sampler& s) {
      auto p = std::make_shared<ParamStore<double>>(s.params(model, 0.2));
      const int h = s.integer(0, 1) ? 16 : 12, w = s.integer(0, 1) ? 16 : 20;
      Tensor64 image = s.tensor({1, model.in_channels, h, w}, 0.0, 1.0);
      std::vector<Tensor64> inputs{image};
      for (int i = 0; i < 5; ++i) inputs.push_back(p->tensors()[s.rng()() % p->size()]);
      ModelConfig cfg = model;
      return Probe{[=] { return model_forward(image, *p, cfg).restored; }, inputs, p};
  });
}

}  // namespace

GradSuiteReport run_gradient_suite(const ModelConfig& model, const GradSuiteOptions& options,
                                   const std::function<void(const GradCase&)>& on_case) {
  model.validate();
  SuiteRunner runner(options, on_case);
  if (options.include_ops) op_cases(runner);
  if (options.include_model) component_cases(runner, model);
  return runner.take();
}

}  // namespace csformer
