#include "csformer/train.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "csformer/error.hpp"
#include "csformer/metrics.hpp"
#include "csformer/model.hpp"
#include "csformer/ops.hpp"

namespace csformer {
namespace {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

// Gradient g·dL/dpred added to pred and subtracted from target.
template <typename T>
void scatter_residual_grad(const Tensor<T>& pred, const Tensor<T>& target, const std::vector<double>& dloss,
                           double upstream) {
  if (pred.requires_grad()) {
    auto g = pred.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += static_cast<T>(upstream * dloss[i]);
  }
  if (target.requires_grad()) {
    auto g = target.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= static_cast<T>(upstream * dloss[i]);
  }
}

constexpr const char* kMomentPrefix[2] = {"adam.m.", "adam.v."};

}  // namespace

template <typename T>
Tensor<T> charbonnier(const Tensor<T>& pred, const Tensor<T>& target, double eps) {
  require_same_shape(pred, target, "charbonnier");
  if (!(eps > 0.0)) throw ConfigError("charbonnier eps must be positive");
  auto p = pred.data(), t = target.data();
  const double n = static_cast<double>(p.size());
  double total = 0.0;
  std::vector<double> dloss(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double r = (static_cast<double>(p[i]) - t[i]) / eps;
    const double root = std::sqrt(1.0 + r * r);
    total += root;
    dloss[i] = r / (root * n);
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(eps * (total / n)));
  if (auto* tape = recording_tape({&pred, &target})) {
    tape->record(out, [pred, target, dloss = std::move(dloss)](const Tensor<T>& out) {
      scatter_residual_grad(pred, target, dloss, static_cast<double>(out.grad()[0]));
    });
  }
  return out;
}

template <typename T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target, const Tensor<T>* weights) {
  require_same_shape(pred, target, "mse");
  if (weights) require_same_shape(pred, *weights, "mse weights");
  auto p = pred.data(), t = target.data();
  double norm = 0.0, total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double w = weights ? static_cast<double>(weights->data()[i]) : 1.0;
    const double r = static_cast<double>(p[i]) - t[i];
    norm += w;
    total += w * r * r;
  }
  if (!(norm > 0.0)) throw ShapeError("mse over an empty selection");
  std::vector<double> dloss(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double w = weights ? static_cast<double>(weights->data()[i]) : 1.0;
    dloss[i] = 2.0 * w * (static_cast<double>(p[i]) - t[i]) / norm;
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / norm));
  if (auto* tape = recording_tape({&pred, &target})) {
    tape->record(out, [pred, target, dloss = std::move(dloss)](const Tensor<T>& out) {
      scatter_residual_grad(pred, target, dloss, static_cast<double>(out.grad()[0]));
    });
  }
  return out;
}

template <typename T>
OptimState<T>::OptimState(const ParamStore<T>& params, AdamWConfig c) : config(c) {
  for (const auto& t : params.tensors()) {
    m.emplace_back(static_cast<std::size_t>(t.numel()), T{0});
    v.emplace_back(static_cast<std::size_t>(t.numel()), T{0});
  }
}

template <typename T>
void adamw_step(ParamStore<T>& params, OptimState<T>& state, double lr) {
  if (state.m.size() != params.size()) throw ConfigError("optimizer state does not match the parameter store");
  bool any = false;
  for (const auto& t : params.tensors()) any = any || t.has_grad();
  if (!any) throw ConfigError("adamw_step called without any gradients");
  const AdamWConfig& c = state.config;
  ++state.step;
  const double correction1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double correction2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = params.tensors()[i];
    if (!p.has_grad()) continue;
    auto values = p.mutable_data();
    auto grad = p.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = grad[j];
      const double mj = c.beta1 * m[j] + (1.0 - c.beta1) * g;
      const double vj = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double decayed = values[j] * (1.0 - lr * c.weight_decay);
      const double update = (mj / correction1) / (std::sqrt(vj / correction2) + c.eps);
      values[j] = static_cast<T>(decayed - lr * update);
    }
  }
}

double cosine_lr(std::int64_t step, const Schedule& s) {
  if (s.total_steps < 1 || step < 0 || step > s.total_steps) {
    throw ConfigError("schedule step " + std::to_string(step) + " outside [0, " + std::to_string(s.total_steps) + "]");
  }
  if (step == s.total_steps) return s.lr_min;
  const double progress = static_cast<double>(step) / static_cast<double>(s.total_steps);
  return s.lr_min + 0.5 * (s.lr_init - s.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

namespace {

// Copies x into a new [N,C,h,w] tensor through an index function of the
// output coordinates.
template <typename Source>
Tensor32 remap(const Tensor32& x, int h, int w, Source&& source) {
  const int n = x.dim(0), c = x.dim(1), sh = x.dim(2), sw = x.dim(3);
  Tensor32 out(Shape{n, c, h, w});
  auto dst = out.mutable_data();
  auto src = x.data();
  std::size_t k = 0;
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t base = (static_cast<std::size_t>(b) * c + ch) * sh * sw;
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          auto [sy, sx] = source(y, xx);
          dst[k++] = src[base + static_cast<std::size_t>(sy) * sw + sx];
        }
    }
  return out;
}

void require_image_batch(const Tensor32& x) {
  if (x.rank() != 4) throw ShapeError("expected [N,C,H,W], got " + shape_to_string(x.shape()));
}

}  // namespace

Tensor32 flip_horizontal(const Tensor32& x) {
  require_image_batch(x);
  const int w = x.dim(3);
  return remap(x, x.dim(2), w, [w](int y, int xx) { return std::pair{y, w - 1 - xx}; });
}

Tensor32 flip_vertical(const Tensor32& x) {
  require_image_batch(x);
  const int h = x.dim(2);
  return remap(x, h, x.dim(3), [h](int y, int xx) { return std::pair{h - 1 - y, xx}; });
}

Tensor32 rotate90(const Tensor32& x) {
  require_image_batch(x);
  const int w = x.dim(3);
  return remap(x, w, x.dim(2), [w](int y, int xx) { return std::pair{xx, w - 1 - y}; });
}

Tensor32 blend(const Tensor32& a, const Tensor32& b, float lambda) {
  require_same_shape(a, b, "blend");
  Tensor32 out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = lambda * a.data()[i] + (1.0f - lambda) * b.data()[i];
  return out;
}

double sample_beta(double alpha, std::mt19937_64& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  const double x = gamma(rng), y = gamma(rng);
  return x / (x + y);
}

PairBatch augment_batch(const PairBatch& batch, const AugmentConfig& config, std::mt19937_64& rng) {
  require_same_shape(batch.degraded, batch.clean, "augment_batch");
  PairBatch out = batch;
  std::bernoulli_distribution coin(0.5);
  auto both = [&](auto&& op) {
    out.degraded = op(out.degraded);
    out.clean = op(out.clean);
  };
  if (config.hflip && coin(rng)) both(flip_horizontal);
  if (config.vflip && coin(rng)) both(flip_vertical);
  if (config.rot90 && out.clean.dim(2) == out.clean.dim(3) && coin(rng)) both(rotate90);
  if (config.mixup) {
    const int n = out.clean.dim(0);
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const auto lambda = static_cast<float>(sample_beta(config.mixup_alpha, rng));
    auto permuted = [&](const Tensor32& x) {
      Tensor32 p(x.shape());
      const std::size_t per = static_cast<std::size_t>(x.numel() / n);
      for (int i = 0; i < n; ++i) {
        auto src = x.data().subspan(per * static_cast<std::size_t>(order[static_cast<std::size_t>(i)]), per);
        std::copy(src.begin(), src.end(), p.mutable_data().begin() + static_cast<std::ptrdiff_t>(per * i));
      }
      return p;
    };
    out.degraded = blend(out.degraded, permuted(out.degraded), lambda);
    out.clean = blend(out.clean, permuted(out.clean), lambda);
  }
  return out;
}

std::vector<ImagePair> load_pairs(const std::filesystem::path& degraded_dir, const std::filesystem::path& clean_dir) {
  std::vector<ImagePair> pairs;
  for (const auto& file : list_png_files(degraded_dir)) {
    const auto clean_path = clean_dir / file.filename();
    if (!std::filesystem::exists(clean_path)) throw IoError("no clean image for " + file.string());
    ImagePair pair{load_png(file), load_png(clean_path)};
    if (!pair.degraded.same_shape(pair.clean)) throw IoError("shape mismatch between " + file.string() + " and its clean image");
    pairs.push_back(std::move(pair));
  }
  if (pairs.empty()) throw IoError("no PNG images in " + degraded_dir.string());
  return pairs;
}

PairBatch sample_crops(std::span<const ImagePair> pairs, int batch, int crop_size, std::mt19937_64& rng) {
  if (pairs.empty()) throw ConfigError("no training pairs");
  std::uniform_int_distribution<std::size_t> pick(0, pairs.size() - 1);
  std::vector<ImageBuffer> degraded, clean;
  for (int i = 0; i < batch; ++i) {
    const ImagePair& p = pairs[pick(rng)];
    if (!p.degraded.same_shape(p.clean)) throw ShapeError("degraded and clean images differ in shape");
    if (p.clean.height < crop_size || p.clean.width < crop_size) throw ShapeError("image smaller than the crop");
    std::uniform_int_distribution<int> ys(0, p.clean.height - crop_size), xs(0, p.clean.width - crop_size);
    const int y = ys(rng), x = xs(rng);
    degraded.push_back(crop(p.degraded, y, x, crop_size, crop_size));
    clean.push_back(crop(p.clean, y, x, crop_size, crop_size));
  }
  return {to_batch(degraded), to_batch(clean)};
}

double batch_psnr(const Tensor32& a, const Tensor32& b) {
  require_same_shape(a, b, "batch_psnr");
  double total = 0.0;
  for (int i = 0; i < a.dim(0); ++i) total += psnr(from_batch(a, i), from_batch(b, i));
  return total / a.dim(0);
}

Tensor32 restore(const Tensor32& degraded, const ParamStore<float>& params, const ModelConfig& config) {
  return model_forward(degraded, params, config).restored;
}

StepRecord finetune_step(const PairBatch& batch, ParamStore<float>& params, const ModelConfig& config,
                         OptimState<float>& opt, const Schedule& schedule) {
  if (config.pretrain_mode) throw ConfigError("fine-tuning needs the image skip; pretrain_mode is set");
  StepRecord record;
  record.step = opt.step;
  record.lr = cosine_lr(std::min(opt.step, schedule.total_steps), schedule);
  params.set_requires_grad(true);
  params.zero_grad();
  {
    Tape<float> tape;
    TapeScope<float> scope(tape);
    Tensor32 restored = model_forward(batch.degraded, params, config).restored;
    Tensor32 loss = charbonnier(restored, batch.clean);
    tape.backward(loss);
    record.loss = loss.item();
    record.train_psnr = batch_psnr(restored.detach(), batch.clean);
  }
  adamw_step(params, opt, record.lr);
  params.zero_grad();
  return record;
}

std::vector<StepRecord> run_finetune(std::span<const ImagePair> pairs, ParamStore<float>& params,
                                     const ModelConfig& config, OptimState<float>& opt, const FinetuneConfig& ft,
                                     const std::function<bool(const StepRecord&)>& on_step) {
  const Schedule schedule{ft.lr, ft.lr_min, ft.steps};
  opt.config.weight_decay = ft.weight_decay;
  std::vector<StepRecord> log;
  PairBatch full;
  if (ft.full_batch) {
    std::vector<ImageBuffer> degraded, clean;
    for (const auto& p : pairs) {
      degraded.push_back(p.degraded);
      clean.push_back(p.clean);
    }
    full = {to_batch(degraded), to_batch(clean)};
  }
  while (opt.step < ft.steps) {
    std::seed_seq seq{ft.seed, static_cast<std::uint64_t>(opt.step)};
    std::mt19937_64 rng(seq);
    PairBatch batch = ft.full_batch ? full : sample_crops(pairs, ft.batch, ft.crop, rng);
    batch = augment_batch(batch, ft.augment, rng);
    log.push_back(finetune_step(batch, params, config, opt, schedule));
    if (on_step && !on_step(log.back())) break;
  }
  return log;
}

void save_train_state(const std::filesystem::path& path, const ParamStore<float>& params,
                      const OptimState<float>& opt, const ModelConfig& config) {
  if (opt.m.size() != params.size()) throw ConfigError("optimizer state does not match the parameter store");
  Archive archive;
  add_params(archive, params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Shape& shape = params.tensors()[i].shape();
    archive.add({kMomentPrefix[0] + params.names()[i], shape, opt.m[i]});
    archive.add({kMomentPrefix[1] + params.names()[i], shape, opt.v[i]});
  }
  archive.add({"adam.step", {1}, std::vector<std::int64_t>{opt.step}});
  const AdamWConfig& c = opt.config;
  archive.add({"adam.hyper", {4}, std::vector<double>{c.beta1, c.beta2, c.eps, c.weight_decay}});
  archive.save(path);
  std::ofstream out(config_sidecar(path), std::ios::trunc);
  if (!out) throw IoError("cannot write " + config_sidecar(path).string());
  out << config.to_json() << '\n';
}

void load_train_state(const std::filesystem::path& path, ParamStore<float>& params, OptimState<float>& opt) {
  const Archive archive = Archive::load(path);
  const LoadReport report = load_params(archive, params);
  if (!report.missing.empty()) throw CheckpointError("train state lacks parameter " + report.missing.front());
  if (!archive.contains("adam.step") || !archive.contains("adam.hyper")) {
    throw CheckpointError(path.string() + " holds no optimizer state");
  }
  OptimState<float> loaded(params, opt.config);
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (int k = 0; k < 2; ++k) {
      const ArchiveEntry& e = archive.at(kMomentPrefix[k] + params.names()[i]);
      const auto* values = std::get_if<std::vector<float>>(&e.values);
      if (!values || e.shape != params.tensors()[i].shape()) {
        throw CheckpointError("optimizer moment for " + params.names()[i] + " has the wrong type or shape");
      }
      (k == 0 ? loaded.m : loaded.v)[i] = *values;
    }
  }
  const auto* step = std::get_if<std::vector<std::int64_t>>(&archive.at("adam.step").values);
  const auto* hyper = std::get_if<std::vector<double>>(&archive.at("adam.hyper").values);
  if (!step || step->size() != 1 || !hyper || hyper->size() != 4) throw CheckpointError("malformed optimizer header");
  loaded.step = (*step)[0];
  loaded.config = {(*hyper)[0], (*hyper)[1], (*hyper)[2], (*hyper)[3]};
  opt = std::move(loaded);
}

template Tensor<float> charbonnier(const Tensor<float>&, const Tensor<float>&, double);
template Tensor<double> charbonnier(const Tensor<double>&, const Tensor<double>&, double);
template Tensor<float> mse(const Tensor<float>&, const Tensor<float>&, const Tensor<float>*);
template Tensor<double> mse(const Tensor<double>&, const Tensor<double>&, const Tensor<double>*);
template struct OptimState<float>;
template struct OptimState<double>;
template void adamw_step(ParamStore<float>&, OptimState<float>&, double);
template void adamw_step(ParamStore<double>&, OptimState<double>&, double);

}  // namespace csformer
