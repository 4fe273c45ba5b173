#pragma once

#include <algorithm>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmkn/model.hpp"

namespace mmkn {

struct NeuronId {
  int layer = 0;
  int unit = 0;

  friend bool operator==(const NeuronId& a, const NeuronId& b) {
    return a.layer == b.layer && a.unit == b.unit;
  }
  friend bool operator<(const NeuronId& a, const NeuronId& b) {
    return a.layer != b.layer ? a.layer < b.layer : a.unit < b.unit;
  }
};

// FFN activations restricted to image-token positions (layers x P x ffn).
struct ImageActivations {
  Tensor values;
  std::string image_id;
  std::vector<int> prompt;
};

// Signed elementwise activation difference between an original image and
// its object-removed counterpart.
struct ActivationDiff {
  Tensor values;  // layers x P x ffn
  std::string knowledge;
};

struct Thresholds {
  double activation = 0.0;
  double gradcam = 0.0;
};

enum class NeuronStage { Candidate, Final, TopK, Random };

inline const char* stage_name(NeuronStage s) {
  switch (s) {
    case NeuronStage::Candidate: return "candidate";
    case NeuronStage::Final: return "final";
    case NeuronStage::TopK: return "top_k";
    case NeuronStage::Random: return "random";
  }
  return "candidate";
}

struct NeuronSet {
  struct Member {
    NeuronId id;
    double evidence = 0.0;  // max patch value of the admitting filter
    int patch = 0;          // patch attaining that max
  };

  NeuronStage stage = NeuronStage::Candidate;
  std::vector<Member> members;  // unique ids, ascending (layer, unit)

  std::size_t size() const { return members.size(); }
  bool contains(const NeuronId& id) const {
    return std::binary_search(
        members.begin(), members.end(), Member{id, 0.0, 0},
        [](const Member& a, const Member& b) { return a.id < b.id; });
  }
};

// Activations of the prompt-conditioned forward pass, sliced to image
// rows. Because attention is causal, these do not depend on anything
// after the image tokens.
inline ImageActivations image_activations(const MultimodalLM& model, const RasterImage& img,
                                          const std::vector<int>& prompt,
                                          const std::string& image_id = "") {
  ForwardResult r = model.forward_with_capture(model.embed_image(img), prompt);
  const int p_count = model.cfg.image_tokens();
  ImageActivations out;
  out.image_id = image_id;
  out.prompt = prompt;
  out.values = Tensor::zeros({model.cfg.layers, p_count, model.cfg.ffn});
  for (int l = 0; l < model.cfg.layers; ++l)
    for (int p = 0; p < p_count; ++p)
      for (int i = 0; i < model.cfg.ffn; ++i) out.values.at(l, p, i) = r.record.acts.at(l, p, i);
  out.values.assert_finite("image activations");
  return out;
}

inline ActivationDiff activation_diff(const ImageActivations& original,
                                      const ImageActivations& inpainted,
                                      const std::string& knowledge = "") {
  require_shape(original.values.same_shape(inpainted.values), "activation shape mismatch");
  require(original.prompt == inpainted.prompt, "activation prompts differ");
  ActivationDiff d;
  d.knowledge = knowledge;
  d.values = sub(original.values, inpainted.values);
  return d;
}

// Neurons whose difference strictly exceeds the threshold at one or more
// patches. Evidence is the max over patches. The absolute-value variant
// admits on |V| instead of the signed value.
inline NeuronSet candidate_set(const ActivationDiff& diff, double threshold,
                               bool absolute_mode = false) {
  require(std::isfinite(threshold), "activation threshold must be finite");
  const Tensor& v = diff.values;
  require_shape(v.rank() == 3, "activation diff must be rank 3");
  const int layers = v.dim(0), p_count = v.dim(1), units = v.dim(2);
  NeuronSet set;
  set.stage = NeuronStage::Candidate;
  for (int l = 0; l < layers; ++l)
    for (int i = 0; i < units; ++i) {
      bool admitted = false;
      double best = 0.0;
      int best_patch = 0;
      for (int p = 0; p < p_count; ++p) {
        double x = v.at(l, p, i);
        if (absolute_mode) x = std::abs(x);
        if (p == 0 || x > best) {
          best = x;
          best_patch = p;
        }
        if (x > threshold) admitted = true;
      }
      if (admitted) set.members.push_back({{l, i}, best, best_patch});
    }
  return set;
}

// GradCAM tensor g = activations (*) d(logit_c)/d(activations) over the
// image token positions, taken at the last prefix position's logit.
inline Tensor gradcam(const MultimodalLM& model, const RasterImage& img,
                      const std::vector<int>& prefix, int c) {
  MultimodalLM::TracedLogit traced = model.target_logit(img, prefix, c);
  traced.tape->backward(traced.logit_node);
  const int p_count = traced.image_tokens;
  Tensor g = Tensor::zeros({model.cfg.layers, p_count, model.cfg.ffn});
  for (int l = 0; l < model.cfg.layers; ++l) {
    const Tensor& acts = traced.tape->value(traced.act_nodes[static_cast<std::size_t>(l)]);
    const Tensor& grad = traced.tape->grad(traced.act_nodes[static_cast<std::size_t>(l)]);
    for (int p = 0; p < p_count; ++p)
      for (int i = 0; i < model.cfg.ffn; ++i) g.at(l, p, i) = acts.at(p, i) * grad.at(p, i);
  }
  g.assert_finite("gradcam");
  return g;
}

// Second-stage filter: candidates whose gradcam value strictly exceeds
// the threshold at one or more patches (independently of the patch that
// admitted them). `same_patch` restricts the test to the admitting patch.
inline NeuronSet final_set(const NeuronSet& candidates, const Tensor& gradcam_values,
                           double threshold, bool same_patch = false) {
  require(std::isfinite(threshold), "gradcam threshold must be finite");
  require_shape(gradcam_values.rank() == 3, "gradcam tensor must be rank 3");
  const int p_count = gradcam_values.dim(1);
  NeuronSet out;
  out.stage = NeuronStage::Final;
  for (const NeuronSet::Member& m : candidates.members) {
    bool keep = false;
    double best = 0.0;
    int best_patch = 0;
    if (same_patch) {
      best = gradcam_values.at(m.id.layer, m.patch, m.id.unit);
      best_patch = m.patch;
      keep = best > threshold;
    } else {
      for (int p = 0; p < p_count; ++p) {
        double x = gradcam_values.at(m.id.layer, p, m.id.unit);
        if (p == 0 || x > best) {
          best = x;
          best_patch = p;
        }
        if (x > threshold) keep = true;
      }
    }
    if (keep) out.members.push_back({m.id, best, best_patch});
  }
  return out;
}

// Gradient-times-activation score averaged over image token positions.
inline Tensor score_gradient_baseline(const Tensor& gradcam_values) {
  require_shape(gradcam_values.rank() == 3, "gradcam tensor must be rank 3");
  const int layers = gradcam_values.dim(0), p_count = gradcam_values.dim(1),
            units = gradcam_values.dim(2);
  Tensor scores = Tensor::zeros({layers, units});
  for (int l = 0; l < layers; ++l)
    for (int i = 0; i < units; ++i) {
      double acc = 0.0;
      for (int p = 0; p < p_count; ++p) acc += gradcam_values.at(l, p, i);
      scores.at(l, i) = acc / p_count;
    }
  return scores;
}

// Mean activation times the unembedded weight of the neuron's value
// vector on token c.
inline Tensor score_actweight_baseline(const MultimodalLM& model, const ImageActivations& acts,
                                       int c) {
  require(c >= 0 && c < model.cfg.vocab, "token id outside vocabulary");
  const Tensor& v = acts.values;
  const int layers = v.dim(0), p_count = v.dim(1), units = v.dim(2);
  Tensor scores = Tensor::zeros({layers, units});
  for (int l = 0; l < layers; ++l) {
    const Tensor& w_out = model.layer[static_cast<std::size_t>(l)].w_out;  // ffn x hidden
    for (int i = 0; i < units; ++i) {
      double mean_act = 0.0;
      for (int p = 0; p < p_count; ++p) mean_act += v.at(l, p, i);
      mean_act /= p_count;
      double unembedded = 0.0;
      for (int h = 0; h < model.cfg.hidden; ++h)
        unembedded += w_out.at(i, h) * model.unembed.at(h, c);
      scores.at(l, i) = mean_act * unembedded;
    }
  }
  return scores;
}

// Highest `count` scores; ties resolved toward ascending (layer, unit).
inline NeuronSet top_k(const Tensor& scores, int count, NeuronStage stage = NeuronStage::TopK) {
  require_shape(scores.rank() == 2, "scores must be layers x units");
  const int layers = scores.dim(0), units = scores.dim(1);
  require(count >= 0 && count <= layers * units, "top_k count exceeds the neuron universe");
  std::vector<NeuronSet::Member> all;
  all.reserve(static_cast<std::size_t>(layers) * units);
  for (int l = 0; l < layers; ++l)
    for (int i = 0; i < units; ++i) all.push_back({{l, i}, scores.at(l, i), 0});
  std::stable_sort(all.begin(), all.end(), [](const NeuronSet::Member& a, const NeuronSet::Member& b) {
    if (a.evidence != b.evidence) return a.evidence > b.evidence;
    return a.id < b.id;
  });
  NeuronSet out;
  out.stage = stage;
  out.members.assign(all.begin(), all.begin() + count);
  std::sort(out.members.begin(), out.members.end(),
            [](const NeuronSet::Member& a, const NeuronSet::Member& b) { return a.id < b.id; });
  return out;
}

// Uniform sample without replacement from the (layer, unit) universe.
inline NeuronSet random_neuron_set(int layers, int units, int count, std::uint64_t seed) {
  require(count >= 0 && count <= layers * units, "random set larger than the neuron universe");
  std::vector<int> all(static_cast<std::size_t>(layers) * units);
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
  Pcg32 rng(splitmix64(seed ^ 0x72616e646f6dULL));
  for (int i = 0; i < count; ++i) {
    std::uint32_t j = static_cast<std::uint32_t>(i) +
                      rng.next_below(static_cast<std::uint32_t>(all.size() - i));
    std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(j)]);
  }
  NeuronSet out;
  out.stage = NeuronStage::Random;
  for (int i = 0; i < count; ++i)
    out.members.push_back({{all[static_cast<std::size_t>(i)] / units,
                            all[static_cast<std::size_t>(i)] % units},
                           0.0,
                           0});
  std::sort(out.members.begin(), out.members.end(),
            [](const NeuronSet::Member& a, const NeuronSet::Member& b) { return a.id < b.id; });
  return out;
}

// Value vector of the neuron projected through the unembedding matrix;
// top tokens by value, ties toward smaller token ids.
inline std::vector<std::pair<int, double>> decode_neuron(const MultimodalLM& model,
                                                         const NeuronId& id, int top_n = 5) {
  require(id.layer >= 0 && id.layer < model.cfg.layers && id.unit >= 0 && id.unit < model.cfg.ffn,
          "neuron id outside model");
  const Tensor& w_out = model.layer[static_cast<std::size_t>(id.layer)].w_out;
  std::vector<std::pair<int, double>> vals(static_cast<std::size_t>(model.cfg.vocab));
  for (int v = 0; v < model.cfg.vocab; ++v) {
    double acc = 0.0;
    for (int h = 0; h < model.cfg.hidden; ++h) acc += w_out.at(id.unit, h) * model.unembed.at(h, v);
    vals[static_cast<std::size_t>(v)] = {v, acc};
  }
  std::stable_sort(vals.begin(), vals.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  const int n = std::min(top_n, model.cfg.vocab);
  vals.resize(static_cast<std::size_t>(n));
  return vals;
}

inline std::vector<long> layer_histogram(const std::vector<NeuronSet>& sets, int layers) {
  std::vector<long> counts(static_cast<std::size_t>(layers), 0);
  for (const NeuronSet& s : sets)
    for (const NeuronSet::Member& m : s.members) {
      require(m.id.layer >= 0 && m.id.layer < layers, "histogram layer out of range");
      ++counts[static_cast<std::size_t>(m.id.layer)];
    }
  return counts;
}

// q-th percentile (linear interpolation between order statistics) of all
// tensor entries; used for threshold auto-calibration.
inline double percentile(const Tensor& t, double q) {
  require(!t.data.empty(), "percentile of empty tensor");
  require(q >= 0.0 && q <= 100.0, "percentile out of range");
  std::vector<double> sorted = t.data;
  std::sort(sorted.begin(), sorted.end());
  const double rank = q / 100.0 * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(rank);
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

inline nlohmann::json neuron_set_json(const NeuronSet& set) {
  nlohmann::json members = nlohmann::json::array();
  for (const NeuronSet::Member& m : set.members)
    members.push_back({{"layer", m.id.layer},
                       {"unit", m.id.unit},
                       {"evidence", m.evidence},
                       {"patch", m.patch}});
  return nlohmann::json{{"stage", stage_name(set.stage)}, {"members", members}};
}

inline void write_layer_histogram_csv(const std::vector<long>& counts, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write histogram: " + path);
  out << "layer,count\r\n";
  for (std::size_t l = 0; l < counts.size(); ++l) out << l << "," << counts[l] << "\r\n";
}

}  // namespace mmkn
