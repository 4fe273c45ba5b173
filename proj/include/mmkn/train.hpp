#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mmkn/model.hpp"

namespace mmkn {

struct TrainSample {
  RasterImage image;
  std::vector<int> caption;  // token ids without the trailing eos
};

enum class LrSchedule { Constant, Cosine };

struct TrainSpec {
  int steps = 3000;
  int batch = 8;
  double lr = 1e-3;
  double lr_floor_frac = 0.1;  // cosine decays to lr * this
  LrSchedule schedule = LrSchedule::Cosine;
  double clip = 1.0;  // global gradient norm; 0 disables clipping
  std::uint64_t seed = 1;
};

struct FitResult {
  std::vector<double> loss_curve;  // mean batch loss per step
};

// Teacher-forced next-token training on text positions only: position
// P-1 (the last image token) predicts the first caption token, each
// caption position predicts its successor, and the last one predicts
// eos. Single-threaded; identical seeds give bit-identical weights.
inline FitResult fit(MultimodalLM& model, const std::vector<TrainSample>& corpus,
                     const TrainSpec& spec) {
  require(!corpus.empty(), "fit requires a non-empty corpus");
  require(spec.steps >= 0 && spec.batch >= 1, "bad train spec");
  for (const TrainSample& s : corpus)
    require(!s.caption.empty(), "fit requires non-empty captions");

  auto params = model.parameters();
  const std::size_t n_params = params.size();
  std::vector<Tensor> grad_acc(n_params), adam_m(n_params), adam_v(n_params);
  for (std::size_t i = 0; i < n_params; ++i) {
    grad_acc[i] = Tensor::zeros(params[i].second->shape);
    adam_m[i] = Tensor::zeros(params[i].second->shape);
    adam_v[i] = Tensor::zeros(params[i].second->shape);
  }

  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  const int eos = model.vocab.eos_id();
  const int p_count = model.cfg.image_tokens();
  Pcg32 rng(splitmix64(spec.seed ^ 0x7261696e5f6d6dULL));

  FitResult result;
  result.loss_curve.reserve(static_cast<std::size_t>(spec.steps));

  for (int step = 0; step < spec.steps; ++step) {
    for (Tensor& g : grad_acc) std::fill(g.data.begin(), g.data.end(), 0.0);
    double batch_loss = 0.0;

    for (int b = 0; b < spec.batch; ++b) {
      const TrainSample& sample =
          corpus[rng.next_below(static_cast<std::uint32_t>(corpus.size()))];
      Tape tape;
      MultimodalLM::TraceResult trace =
          model.trace_forward(tape, sample.image, sample.caption, true);
      const int n = static_cast<int>(sample.caption.size());
      std::vector<int> rows(static_cast<std::size_t>(n) + 1);
      std::vector<int> targets(static_cast<std::size_t>(n) + 1);
      for (int j = 0; j < n; ++j) {
        rows[static_cast<std::size_t>(j)] = p_count - 1 + j;
        targets[static_cast<std::size_t>(j)] = sample.caption[static_cast<std::size_t>(j)];
      }
      rows[static_cast<std::size_t>(n)] = p_count - 1 + n;
      targets[static_cast<std::size_t>(n)] = eos;
      int loss = tape.cross_entropy_mean(trace.logits_node, rows, targets);
      tape.backward(loss);
      batch_loss += tape.value(loss).data[0];
      if (step == 0 && b == 0) {
        require(trace.param_nodes.size() == n_params, "trace/parameter registry mismatch");
        for (std::size_t i = 0; i < n_params; ++i)
          require(trace.param_nodes[i].first == params[i].first,
                  "trace/parameter order mismatch at " + params[i].first);
      }
      for (std::size_t i = 0; i < n_params; ++i) {
        const Tensor& g = tape.grad(trace.param_nodes[i].second);
        for (std::size_t e = 0; e < g.data.size(); ++e) grad_acc[i].data[e] += g.data[e];
      }
    }
    batch_loss /= spec.batch;
    result.loss_curve.push_back(batch_loss);

    double norm_sq = 0.0;
    for (Tensor& g : grad_acc) {
      for (double& v : g.data) {
        v /= spec.batch;
        norm_sq += v * v;
      }
    }
    double scale = 1.0;
    if (spec.clip > 0.0) {
      const double norm = std::sqrt(norm_sq);
      if (norm > spec.clip) scale = spec.clip / norm;
    }

    double lr = spec.lr;
    if (spec.schedule == LrSchedule::Cosine && spec.steps > 1) {
      const double floor_lr = spec.lr * spec.lr_floor_frac;
      const double phase = 3.14159265358979323846 * step / (spec.steps - 1);
      lr = floor_lr + 0.5 * (spec.lr - floor_lr) * (1.0 + std::cos(phase));
    }
    const double bc1 = 1.0 - std::pow(beta1, step + 1);
    const double bc2 = 1.0 - std::pow(beta2, step + 1);
    for (std::size_t i = 0; i < n_params; ++i) {
      Tensor& w = *params[i].second;
      for (std::size_t e = 0; e < w.data.size(); ++e) {
        const double g = grad_acc[i].data[e] * scale;
        adam_m[i].data[e] = beta1 * adam_m[i].data[e] + (1.0 - beta1) * g;
        adam_v[i].data[e] = beta2 * adam_v[i].data[e] + (1.0 - beta2) * g * g;
        const double mhat = adam_m[i].data[e] / bc1;
        const double vhat = adam_v[i].data[e] / bc2;
        w.data[e] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }
  return result;
}

}  // namespace mmkn
