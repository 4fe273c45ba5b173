#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "mmkn/identify.hpp"
#include "mmkn/model.hpp"

using namespace mmkn;

namespace {

ModelConfig probe_config() {
  ModelConfig c;
  c.layers = 2;
  c.hidden = 16;
  c.ffn = 32;
  c.heads = 2;
  c.vocab = 120;
  c.patch_rows = 2;
  c.patch_cols = 2;
  c.patch_px = 8;
  c.enc_dim = 12;
  c.max_seq = 16;
  return c;
}

RasterImage noise_image(int w, int h, std::uint64_t seed) {
  RasterImage img(w, h);
  Pcg32 rng(seed);
  for (auto& v : img.rgb) v = static_cast<std::uint8_t>(rng.next_below(256));
  return img;
}

Tensor random_rank3(std::vector<int> shape, std::uint64_t seed, double spread = 1.0) {
  Pcg32 rng(seed);
  return Tensor::uniform(std::move(shape), rng, -spread, spread);
}

}  // namespace

TEST_CASE("image_activations slices the capture record exactly") {
  MultimodalLM m = MultimodalLM::init(probe_config(), 31);
  RasterImage img = noise_image(16, 16, 1);
  std::vector<int> prompt = m.vocab.tokenize("the image shows a");
  ImageActivations acts = image_activations(m, img, prompt, "img0");
  REQUIRE(acts.values.shape == std::vector<int>{2, 4, 32});

  ForwardResult full = m.forward_with_capture(m.embed_image(img), prompt);
  for (int l = 0; l < 2; ++l)
    for (int p = 0; p < 4; ++p)
      for (int i = 0; i < 32; ++i)
        REQUIRE(acts.values.at(l, p, i) == full.record.acts.at(l, p, i));

  ImageActivations again = image_activations(m, img, prompt, "img0");
  REQUIRE(acts.values.data == again.values.data);
}

TEST_CASE("activation_diff basics and brute-force agreement") {
  ImageActivations a, b;
  a.prompt = b.prompt = {1, 2};
  a.values = random_rank3({3, 4, 5}, 11);
  b.values = random_rank3({3, 4, 5}, 12);

  ActivationDiff zero = activation_diff(a, a);
  for (double v : zero.values.data) REQUIRE(v == 0.0);

  ActivationDiff ab = activation_diff(a, b);
  ActivationDiff ba = activation_diff(b, a);
  for (std::size_t i = 0; i < ab.values.data.size(); ++i)
    REQUIRE(ab.values.data[i] == -ba.values.data[i]);

  for (int l = 0; l < 3; ++l)
    for (int p = 0; p < 4; ++p)
      for (int i = 0; i < 5; ++i)
        REQUIRE(ab.values.at(l, p, i) == a.values.at(l, p, i) - b.values.at(l, p, i));

  ImageActivations mismatched = b;
  mismatched.prompt = {9};
  REQUIRE_THROWS_AS(activation_diff(a, mismatched), ContractError);
}

TEST_CASE("candidate_set threshold extremes") {
  ActivationDiff d;
  d.values = random_rank3({2, 3, 4}, 21);
  double mx = *std::max_element(d.values.data.begin(), d.values.data.end());
  double mn = *std::min_element(d.values.data.begin(), d.values.data.end());
  REQUIRE(candidate_set(d, mx).size() == 0);
  REQUIRE(candidate_set(d, mn - 1.0).size() == 2 * 4);
}

TEST_CASE("candidate_set matches a triple-loop brute force") {
  for (std::uint64_t seed = 40; seed < 48; ++seed) {
    ActivationDiff d;
    d.values = random_rank3({3, 4, 5}, seed);
    const double thr = 0.3;
    NeuronSet got = candidate_set(d, thr);
    std::set<std::pair<int, int>> expect;
    for (int l = 0; l < 3; ++l)
      for (int i = 0; i < 5; ++i)
        for (int p = 0; p < 4; ++p)
          if (d.values.at(l, p, i) > thr) expect.insert({l, i});
    REQUIRE(got.size() == expect.size());
    for (const auto& m : got.members) {
      REQUIRE(expect.count({m.id.layer, m.id.unit}) == 1);
      double best = -1e300;
      for (int p = 0; p < 4; ++p) best = std::max(best, d.values.at(m.id.layer, p, m.id.unit));
      REQUIRE(m.evidence == best);
    }
  }
}

TEST_CASE("candidate_set absolute mode admits on |V|") {
  ActivationDiff d;
  d.values = Tensor::zeros({1, 2, 2});
  d.values.at(0, 0, 0) = -5.0;
  d.values.at(0, 1, 1) = 0.5;
  NeuronSet signed_set = candidate_set(d, 1.0);
  REQUIRE(signed_set.size() == 0);
  NeuronSet abs_set = candidate_set(d, 1.0, true);
  REQUIRE(abs_set.size() == 1);
  REQUIRE(abs_set.members[0].id == NeuronId{0, 0});
}

TEST_CASE("gradcam matches activation times finite-difference gradient") {
  MultimodalLM m = MultimodalLM::init(probe_config(), 33);
  RasterImage img = noise_image(16, 16, 5);
  std::vector<int> prefix = m.vocab.tokenize("the image shows a");
  const int c = m.vocab.id_of("bear");
  Tensor g = gradcam(m, img, prefix, c);
  REQUIRE(g.shape == std::vector<int>{2, 4, 32});

  ImageActivations acts = image_activations(m, img, prefix);
  Tensor img_emb = m.embed_image(img);
  const int last = m.cfg.image_tokens() + static_cast<int>(prefix.size()) - 1;
  const double eps = 1e-5;
  double max_rel = 0.0;
  for (int l = 0; l < 2; ++l)
    for (int p = 0; p < 4; ++p)
      for (int i = 0; i < 32; ++i) {
        Intervention iv;
        iv.targets = {{l, i}};
        iv.shift.assign(4, 0.0);
        iv.shift[static_cast<std::size_t>(p)] = eps;
        double up = m.forward_with_capture(img_emb, prefix, &iv, Capture::None).logits.at(last, c);
        iv.shift[static_cast<std::size_t>(p)] = -eps;
        double dn = m.forward_with_capture(img_emb, prefix, &iv, Capture::None).logits.at(last, c);
        double fd = (up - dn) / (2.0 * eps);
        double expect = acts.values.at(l, p, i) * fd;
        double got = g.at(l, p, i);
        double rel = std::abs(expect - got) / std::max({std::abs(expect), std::abs(got), 1e-6});
        max_rel = std::max(max_rel, rel);
      }
  REQUIRE(max_rel < 1e-4);
}

TEST_CASE("gradcam is zero where the activation is zero") {
  MultimodalLM m = MultimodalLM::init(probe_config(), 34);
  RasterImage img = noise_image(16, 16, 6);
  std::vector<int> prefix = m.vocab.tokenize("the image shows a");
  const int c = m.vocab.id_of("bus");
  ImageActivations base = image_activations(m, img, prefix);

  // Force the activation of one neuron to exactly zero at every image
  // position, then recompute the traced product by hand.
  Intervention iv;
  iv.targets = {{1, 3}};
  iv.shift.assign(4, 0.0);
  for (int p = 0; p < 4; ++p) iv.shift[static_cast<std::size_t>(p)] = -base.values.at(1, p, 3);
  MultimodalLM::TracedLogit traced = m.target_logit(img, prefix, c, &iv);
  traced.tape->backward(traced.logit_node);
  const Tensor& acts = traced.tape->value(traced.act_nodes[1]);
  const Tensor& grad = traced.tape->grad(traced.act_nodes[1]);
  for (int p = 0; p < 4; ++p) {
    REQUIRE(acts.at(p, 3) == 0.0);
    REQUIRE(acts.at(p, 3) * grad.at(p, 3) == 0.0);
  }
}

TEST_CASE("final_set honors subset and threshold rules") {
  ActivationDiff d;
  d.values = random_rank3({3, 4, 5}, 55);
  NeuronSet c = candidate_set(d, 0.2);
  Tensor g = random_rank3({3, 4, 5}, 56);

  NeuronSet empty_in;
  REQUIRE(final_set(empty_in, g, 0.0).size() == 0);

  NeuronSet n = final_set(c, g, 0.1);
  std::set<std::pair<int, int>> expect;
  for (const auto& m : c.members) {
    for (int p = 0; p < 4; ++p)
      if (g.at(m.id.layer, p, m.id.unit) > 0.1) expect.insert({m.id.layer, m.id.unit});
  }
  REQUIRE(n.size() == expect.size());
  for (const auto& m : n.members) {
    REQUIRE(expect.count({m.id.layer, m.id.unit}) == 1);
    REQUIRE(c.contains(m.id));
  }

  // Zero threshold with strictly positive gradcam at the member's
  // admitting patch retains the member.
  Tensor gpos = Tensor::full({3, 4, 5}, 0.7);
  NeuronSet kept = final_set(c, gpos, 0.0);
  REQUIRE(kept.size() == c.size());
  NeuronSet kept_same_patch = final_set(c, gpos, 0.0, true);
  REQUIRE(kept_same_patch.size() == c.size());
}

TEST_CASE("threshold monotonicity shrinks sets") {
  ActivationDiff d;
  d.values = random_rank3({2, 4, 8}, 61);
  Tensor g = random_rank3({2, 4, 8}, 62);
  std::size_t prev = 1000;
  for (double thr : {-0.5, 0.0, 0.3, 0.6, 0.9}) {
    NeuronSet c = candidate_set(d, thr);
    REQUIRE(c.size() <= prev);
    prev = c.size();
  }
  NeuronSet c = candidate_set(d, 0.0);
  prev = 1000;
  for (double thr : {-0.5, 0.0, 0.3, 0.6}) {
    NeuronSet n = final_set(c, g, thr);
    REQUIRE(n.size() <= prev);
    prev = n.size();
  }
}

TEST_CASE("gradient baseline score is the patch mean") {
  Tensor g = Tensor::zeros({2, 4, 3});
  REQUIRE(score_gradient_baseline(g).data == std::vector<double>(6, 0.0));

  g.at(1, 2, 0) = 0.8;
  Tensor s = score_gradient_baseline(g);
  REQUIRE(s.at(1, 0) == 0.8 / 4.0);
  REQUIRE(s.at(0, 0) == 0.0);
  REQUIRE(s.at(1, 1) == 0.0);

  Tensor r = random_rank3({3, 5, 7}, 70);
  Tensor sr = score_gradient_baseline(r);
  for (int l = 0; l < 3; ++l)
    for (int i = 0; i < 7; ++i) {
      double acc = 0.0;
      for (int p = 0; p < 5; ++p) acc += r.at(l, p, i);
      REQUIRE(std::abs(sr.at(l, i) - acc / 5.0) <= 1e-12);
    }
}

TEST_CASE("activation-weight baseline: zeros, planting, and linearity") {
  ModelConfig cfg = probe_config();
  MultimodalLM m = MultimodalLM::init(cfg, 73);
  const int c = m.vocab.id_of("cake");

  ImageActivations zero;
  zero.values = Tensor::zeros({cfg.layers, cfg.image_tokens(), cfg.ffn});
  Tensor s0 = score_actweight_baseline(m, zero, c);
  for (double v : s0.data) REQUIRE(v == 0.0);

  // Plant: make the unembedding column for c reachable from one neuron
  // with known weight, and give that neuron a known mean activation.
  MultimodalLM planted = m;
  for (double& v : planted.unembed.data) v = 0.0;
  for (int h = 0; h < cfg.hidden; ++h) planted.unembed.at(h, c) = (h == 2) ? 1.0 : 0.0;
  for (double& v : planted.layer[1].w_out.data) v = 0.0;
  planted.layer[1].w_out.at(5, 2) = 3.0;  // unembedded weight w = 3
  ImageActivations acts = zero;
  for (int p = 0; p < cfg.image_tokens(); ++p) acts.values.at(1, p, 5) = 2.0;  // mean a = 2
  Tensor sp = score_actweight_baseline(planted, acts, c);
  REQUIRE(sp.at(1, 5) == 6.0);
  for (int l = 0; l < cfg.layers; ++l)
    for (int i = 0; i < cfg.ffn; ++i)
      if (!(l == 1 && i == 5)) REQUIRE(sp.at(l, i) == 0.0);

  ImageActivations doubled;
  doubled.values = random_rank3({cfg.layers, cfg.image_tokens(), cfg.ffn}, 74);
  Tensor s1 = score_actweight_baseline(m, doubled, c);
  for (double& v : doubled.values.data) v *= 2.0;
  Tensor s2 = score_actweight_baseline(m, doubled, c);
  for (std::size_t i = 0; i < s1.data.size(); ++i) REQUIRE(s2.data[i] == 2.0 * s1.data[i]);
}

TEST_CASE("top_k selection and tie-breaking") {
  Tensor s = Tensor::zeros({2, 3});
  REQUIRE(top_k(s, 0).size() == 0);
  REQUIRE(top_k(s, 6).size() == 6);
  REQUIRE_THROWS_AS(top_k(s, 7), ContractError);

  NeuronSet ties = top_k(s, 3);
  REQUIRE(ties.members[0].id == NeuronId{0, 0});
  REQUIRE(ties.members[1].id == NeuronId{0, 1});
  REQUIRE(ties.members[2].id == NeuronId{0, 2});

  Pcg32 rng(80);
  Tensor r = Tensor::uniform({4, 9}, rng, -1.0, 1.0);
  NeuronSet a = top_k(r, 7);
  Tensor transformed = r;
  for (double& v : transformed.data) v = std::tanh(2.0 * v) + 3.0;  // strictly monotone
  NeuronSet b = top_k(transformed, 7);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.members.size(); ++i) REQUIRE(a.members[i].id == b.members[i].id);
}

TEST_CASE("random baseline sets are exact-size, unique and seeded") {
  NeuronSet a = random_neuron_set(4, 16, 10, 99);
  NeuronSet b = random_neuron_set(4, 16, 10, 99);
  NeuronSet c = random_neuron_set(4, 16, 10, 100);
  REQUIRE(a.size() == 10);
  std::set<std::pair<int, int>> uniq;
  for (const auto& m : a.members) {
    REQUIRE(m.id.layer >= 0);
    REQUIRE(m.id.layer < 4);
    REQUIRE(m.id.unit >= 0);
    REQUIRE(m.id.unit < 16);
    uniq.insert({m.id.layer, m.id.unit});
  }
  REQUIRE(uniq.size() == 10);
  for (std::size_t i = 0; i < a.members.size(); ++i) REQUIRE(a.members[i].id == b.members[i].id);
  bool same = a.size() == c.size();
  if (same)
    for (std::size_t i = 0; i < a.members.size(); ++i)
      same = same && (a.members[i].id == c.members[i].id);
  REQUIRE_FALSE(same);
}

TEST_CASE("decode_neuron ranks a planted token first") {
  // Vocabulary small enough to orthonormalize the unembedding columns.
  std::vector<std::string> words = {"<unk>", "<eos>", "a", "b", "c", "d",
                                    "e",     "f",     "g", "h", "i", "j"};
  ModelConfig cfg = probe_config();
  cfg.vocab = 12;
  Pcg32 rng(131);
  for (int trial = 0; trial < 20; ++trial) {
    MultimodalLM m = MultimodalLM::init(cfg, 1000 + trial, Vocabulary(words));
    // Gram-Schmidt over the unembedding columns.
    for (int v = 0; v < cfg.vocab; ++v) {
      for (int u = 0; u < v; ++u) {
        double dot = 0.0;
        for (int h = 0; h < cfg.hidden; ++h) dot += m.unembed.at(h, v) * m.unembed.at(h, u);
        for (int h = 0; h < cfg.hidden; ++h) m.unembed.at(h, v) -= dot * m.unembed.at(h, u);
      }
      double norm = 0.0;
      for (int h = 0; h < cfg.hidden; ++h) norm += m.unembed.at(h, v) * m.unembed.at(h, v);
      norm = std::sqrt(norm);
      for (int h = 0; h < cfg.hidden; ++h) m.unembed.at(h, v) /= norm;
    }
    const int target = static_cast<int>(rng.next_below(12));
    const double strength = 0.5 + rng.next_double();
    for (int h = 0; h < cfg.hidden; ++h)
      m.layer[0].w_out.at(9, h) = strength * m.unembed.at(h, target);
    auto decoded = decode_neuron(m, {0, 9}, 5);
    REQUIRE(decoded.size() == 5);
    REQUIRE(decoded[0].first == target);
    REQUIRE(decoded[0].second == Catch::Approx(strength).margin(1e-9));
  }
}

TEST_CASE("decode_neuron zero column yields token-id order") {
  ModelConfig cfg = probe_config();
  MultimodalLM m = MultimodalLM::init(cfg, 140);
  for (double& v : m.layer[0].w_out.data) v = 0.0;
  auto decoded = decode_neuron(m, {0, 0}, 5);
  REQUIRE(decoded.size() == 5);
  for (int i = 0; i < 5; ++i) {
    REQUIRE(decoded[static_cast<std::size_t>(i)].first == i);
    REQUIRE(decoded[static_cast<std::size_t>(i)].second == 0.0);
  }
  auto all = decode_neuron(m, {0, 0}, 1000);
  REQUIRE(all.size() == static_cast<std::size_t>(cfg.vocab));
}

TEST_CASE("layer_histogram counts per layer") {
  REQUIRE(layer_histogram({}, 4) == std::vector<long>{0, 0, 0, 0});

  NeuronSet one;
  one.members.push_back({{3, 7}, 0.0, 0});
  REQUIRE(layer_histogram({one}, 5) == std::vector<long>{0, 0, 0, 1, 0});

  Pcg32 rng(150);
  std::vector<NeuronSet> sets(3);
  std::vector<long> expect(6, 0);
  for (NeuronSet& s : sets)
    for (int i = 0; i < 20; ++i) {
      int layer = static_cast<int>(rng.next_below(6));
      s.members.push_back({{layer, i}, 0.0, 0});
      ++expect[static_cast<std::size_t>(layer)];
    }
  REQUIRE(layer_histogram(sets, 6) == expect);
}

TEST_CASE("percentile interpolates order statistics") {
  Tensor t = Tensor::from({5}, {10, 20, 30, 40, 50});
  REQUIRE(percentile(t, 0) == 10.0);
  REQUIRE(percentile(t, 100) == 50.0);
  REQUIRE(percentile(t, 50) == 30.0);
  REQUIRE(percentile(t, 75) == 40.0);
  REQUIRE(percentile(t, 62.5) == Catch::Approx(35.0).margin(1e-12));
}
