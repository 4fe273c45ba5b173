#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "mmkn/model.hpp"
#include "mmkn/scene.hpp"
#include "mmkn/train.hpp"

using namespace mmkn;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.layers = 2;
  c.hidden = 32;
  c.ffn = 64;
  c.heads = 2;
  c.vocab = 120;
  c.patch_rows = 2;
  c.patch_cols = 2;
  c.patch_px = 8;
  c.enc_dim = 24;
  c.max_seq = 24;
  return c;
}

RasterImage checker_image(int w, int h, std::uint64_t seed) {
  RasterImage img(w, h);
  Pcg32 rng(seed);
  for (auto& v : img.rgb) v = static_cast<std::uint8_t>(rng.next_below(256));
  return img;
}

}  // namespace

TEST_CASE("embed_image: zero image with zero biases gives zero rows") {
  MultimodalLM m = MultimodalLM::init(tiny_config(), 5);
  RasterImage img(16, 16, {0, 0, 0});
  Tensor e = m.embed_image(img);
  REQUIRE(e.shape == std::vector<int>{4, 32});
  for (double v : e.data) REQUIRE(v == 0.0);
}

TEST_CASE("embed_image: output shape is P x hidden for any valid raster") {
  MultimodalLM m = MultimodalLM::init(tiny_config(), 6);
  Tensor e = m.embed_image(checker_image(16, 16, 3));
  REQUIRE(e.shape == std::vector<int>{m.cfg.image_tokens(), m.cfg.hidden});
}

TEST_CASE("embed_image: swapping two patches swaps exactly those rows") {
  MultimodalLM m = MultimodalLM::init(tiny_config(), 7);
  RasterImage img = checker_image(16, 16, 9);
  RasterImage swapped = img;
  // Swap patch (0,0) with patch (1,1): 8x8 pixel blocks.
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      for (int c = 0; c < 3; ++c)
        std::swap(swapped.at(x, y, c), swapped.at(8 + x, 8 + y, c));
  Tensor a = m.embed_image(img);
  Tensor b = m.embed_image(swapped);
  for (int j = 0; j < m.cfg.hidden; ++j) {
    REQUIRE(a.at(0, j) == b.at(3, j));
    REQUIRE(a.at(3, j) == b.at(0, j));
    REQUIRE(a.at(1, j) == b.at(1, j));
    REQUIRE(a.at(2, j) == b.at(2, j));
  }
}

TEST_CASE("embed_image rejects rasters that do not match the patch grid") {
  MultimodalLM m = MultimodalLM::init(tiny_config(), 8);
  REQUIRE_THROWS_AS(m.embed_image(RasterImage(15, 16, {0, 0, 0})), ShapeError);
  REQUIRE_THROWS_AS(m.embed_image(RasterImage(32, 32, {0, 0, 0})), ShapeError);
}

TEST_CASE("capture record has shape L x (P+T) x ffn") {
  MultimodalLM m = MultimodalLM::init(tiny_config(), 10);
  std::vector<int> text = m.vocab.tokenize("the image shows a");
  ForwardResult r = m.forward_with_capture(m.embed_image(checker_image(16, 16, 1)), text);
  REQUIRE(r.record.acts.shape ==
          std::vector<int>{m.cfg.layers, m.cfg.image_tokens() + 4, m.cfg.ffn});
  REQUIRE(r.logits.shape == std::vector<int>{m.cfg.image_tokens() + 4, m.cfg.vocab});
}

TEST_CASE("recorded activations recompute from saved layer inputs") {
  MultimodalLM m = MultimodalLM::init(tiny_config(), 11);
  std::vector<int> text = m.vocab.tokenize("the image shows a bear");
  ForwardResult r = m.forward_with_capture(m.embed_image(checker_image(16, 16, 2)), text, nullptr,
                                           Capture::Full);
  const int t = m.cfg.image_tokens() + static_cast<int>(text.size());
  for (int l = 0; l < m.cfg.layers; ++l) {
    Tensor u = Tensor::zeros({t, m.cfg.hidden});
    for (int i = 0; i < t; ++i)
      for (int j = 0; j < m.cfg.hidden; ++j)
        u.at(i, j) = r.record.layer_in.at(l, i, j) + r.record.attn_out.at(l, i, j);
    Tensor acts = gelu(matmul(u, m.layer[static_cast<std::size_t>(l)].w_in));
    for (int i = 0; i < t; ++i)
      for (int j = 0; j < m.cfg.ffn; ++j)
        REQUIRE(std::abs(acts.at(i, j) - r.record.acts.at(l, i, j)) <= 1e-12);
  }
}

TEST_CASE("empty intervention leaves logits bit-identical") {
  MultimodalLM m = MultimodalLM::init(tiny_config(), 12);
  Tensor img = m.embed_image(checker_image(16, 16, 4));
  std::vector<int> text = m.vocab.tokenize("the image shows a");
  Intervention none;
  ForwardResult a = m.forward_with_capture(img, text);
  ForwardResult b = m.forward_with_capture(img, text, &none);
  REQUIRE(a.logits.data == b.logits.data);
  REQUIRE(a.record.acts.data == b.record.acts.data);
}

TEST_CASE("intervention shifts exactly the targeted activations") {
  MultimodalLM m = MultimodalLM::init(tiny_config(), 13);
  Tensor img = m.embed_image(checker_image(16, 16, 5));
  std::vector<int> text = m.vocab.tokenize("the image shows a");
  const int p_count = m.cfg.image_tokens();
  Intervention iv;
  iv.targets = {{1, 7}};
  iv.shift.assign(static_cast<std::size_t>(p_count), 0.0);
  for (int p = 0; p < p_count; ++p) iv.shift[static_cast<std::size_t>(p)] = 0.25 * (p + 1);

  ForwardResult base = m.forward_with_capture(img, text);
  ForwardResult pert = m.forward_with_capture(img, text, &iv);
  const int t = base.record.acts.dim(1);

  // Layer 0 is upstream of the target: identical.
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < m.cfg.ffn; ++j)
      REQUIRE(pert.record.acts.at(0, i, j) == base.record.acts.at(0, i, j));
  // Layer 1 differs only at unit 7 on image rows, by exactly shift[p].
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < m.cfg.ffn; ++j) {
      if (i < p_count && j == 7) {
        REQUIRE(pert.record.acts.at(1, i, j) ==
                base.record.acts.at(1, i, j) + iv.shift[static_cast<std::size_t>(i)]);
      } else {
        REQUIRE(pert.record.acts.at(1, i, j) == base.record.acts.at(1, i, j));
      }
    }
}

TEST_CASE("intervention validation errors") {
  MultimodalLM m = MultimodalLM::init(tiny_config(), 14);
  Tensor img = m.embed_image(checker_image(16, 16, 6));
  Intervention bad;
  bad.targets = {{0, 0}};
  bad.shift = {1.0};  // wrong length
  REQUIRE_THROWS_AS(m.forward_with_capture(img, {2, 3}, &bad), ContractError);
  bad.shift.assign(4, 0.0);
  bad.targets = {{99, 0}};
  REQUIRE_THROWS_AS(m.forward_with_capture(img, {2, 3}, &bad), ContractError);
}

TEST_CASE("causal masking: logits at t ignore later tokens") {
  MultimodalLM m = MultimodalLM::init(tiny_config(), 15);
  Tensor img = m.embed_image(checker_image(16, 16, 7));
  std::vector<int> a = m.vocab.tokenize("the image shows a bear");
  std::vector<int> b = m.vocab.tokenize("the image shows a train");
  ForwardResult ra = m.forward_with_capture(img, a);
  ForwardResult rb = m.forward_with_capture(img, b);
  const int p_count = m.cfg.image_tokens();
  // Positions up to and including "a" (index P+3) see identical inputs.
  for (int i = 0; i < p_count + 4; ++i)
    for (int v = 0; v < m.cfg.vocab; ++v) REQUIRE(ra.logits.at(i, v) == rb.logits.at(i, v));
}

TEST_CASE("sequence overflow and unknown ids raise") {
  MultimodalLM m = MultimodalLM::init(tiny_config(), 16);
  Tensor img = m.embed_image(checker_image(16, 16, 8));
  std::vector<int> toolong(static_cast<std::size_t>(m.cfg.max_seq), 2);
  REQUIRE_THROWS_AS(m.forward_with_capture(img, toolong), ContractError);
  REQUIRE_THROWS_AS(m.forward_with_capture(img, {2, 99999}), ContractError);
}

TEST_CASE("generate: zero budget yields an empty continuation") {
  MultimodalLM m = MultimodalLM::init(tiny_config(), 17);
  GenConfig gen;
  gen.max_new_tokens = 0;
  REQUIRE(m.generate(checker_image(16, 16, 9), {2, 3}, gen).empty());
}

TEST_CASE("generate: first token is the argmax of the last prompt logits") {
  MultimodalLM m = MultimodalLM::init(tiny_config(), 18);
  RasterImage img = checker_image(16, 16, 10);
  std::vector<int> prompt = m.vocab.tokenize("the image shows a");
  GenConfig gen;
  gen.max_new_tokens = 1;
  gen.min_new_tokens = 0;
  std::vector<int> cont = m.generate(img, prompt, gen);

  ForwardResult r = m.forward_with_capture(m.embed_image(img), prompt);
  const int last = m.cfg.image_tokens() + static_cast<int>(prompt.size()) - 1;
  int best = 0;
  for (int v = 1; v < m.cfg.vocab; ++v)
    if (r.logits.at(last, v) > r.logits.at(last, best)) best = v;
  if (best == m.vocab.eos_id()) {
    REQUIRE(cont.empty());
  } else {
    REQUIRE(cont.size() == 1);
    REQUIRE(cont[0] == best);
  }
}

TEST_CASE("generate is deterministic") {
  MultimodalLM m = MultimodalLM::init(tiny_config(), 19);
  RasterImage img = checker_image(16, 16, 11);
  GenConfig gen;
  std::vector<int> a = m.generate(img, {2, 3, 52}, gen);
  std::vector<int> b = m.generate(img, {2, 3, 52}, gen);
  REQUIRE(a == b);
}

TEST_CASE("target_logit matches the captured logit entry") {
  MultimodalLM m = MultimodalLM::init(tiny_config(), 20);
  RasterImage img = checker_image(16, 16, 12);
  std::vector<int> prefix = m.vocab.tokenize("the image shows a");
  const int c = m.vocab.id_of("bear");
  MultimodalLM::TracedLogit traced = m.target_logit(img, prefix, c);
  ForwardResult r = m.forward_with_capture(m.embed_image(img), prefix);
  const double expect = r.logits.at(m.cfg.image_tokens() + 3, c);
  REQUIRE(std::abs(traced.tape->value(traced.logit_node).data[0] - expect) <= 1e-12);
}

TEST_CASE("target_logit is pre-softmax: a bias shift moves it one-for-one") {
  MultimodalLM m = MultimodalLM::init(tiny_config(), 21);
  RasterImage img = checker_image(16, 16, 13);
  std::vector<int> prefix = m.vocab.tokenize("the image shows a");
  const int c = m.vocab.id_of("bus");
  auto traced = m.target_logit(img, prefix, c);
  const double before = traced.tape->value(traced.logit_node).data[0];
  for (double& v : m.unembed_b.data) v += 1.75;
  auto after = m.target_logit(img, prefix, c);
  REQUIRE(std::abs(after.tape->value(after.logit_node).data[0] - before - 1.75) < 1e-12);
}

TEST_CASE("traced causality: activation gradients vanish after the target row") {
  MultimodalLM m = MultimodalLM::init(tiny_config(), 22);
  RasterImage img = checker_image(16, 16, 14);
  std::vector<int> text = m.vocab.tokenize("the image shows a bear and");
  Tape tape;
  MultimodalLM::TraceResult tr = m.trace_forward(tape, img, text, false);
  const int mid_row = m.cfg.image_tokens() + 1;  // logit just after "image"
  int y = tape.pick(tr.logits_node, mid_row, m.vocab.id_of("shows"));
  tape.backward(y);
  for (int l = 0; l < m.cfg.layers; ++l) {
    const Tensor& g = tape.grad(tr.act_nodes[static_cast<std::size_t>(l)]);
    bool upstream_nonzero = false;
    for (int i = 0; i < tr.rows; ++i)
      for (int j = 0; j < m.cfg.ffn; ++j) {
        if (i > mid_row) {
          REQUIRE(g.at(i, j) == 0.0);
        } else if (g.at(i, j) != 0.0) {
          upstream_nonzero = true;
        }
      }
    REQUIRE(upstream_nonzero);
  }
}

TEST_CASE("fit: single sample overfits to near-zero loss") {
  ModelConfig cfg = tiny_config();
  MultimodalLM m = MultimodalLM::init(cfg, 23);
  TrainSample s;
  s.image = checker_image(16, 16, 15);
  s.caption = m.vocab.tokenize("the image shows a bear");
  TrainSpec spec;
  spec.steps = 500;
  spec.batch = 1;
  spec.lr = 2e-3;
  spec.seed = 99;
  FitResult res = fit(m, {s}, spec);
  REQUIRE(res.loss_curve.size() == 500);
  REQUIRE(res.loss_curve.back() < 0.1);
}

TEST_CASE("fit: initial loss is close to log(vocab) under near-uniform init") {
  ModelConfig cfg = tiny_config();
  MultimodalLM m = MultimodalLM::init(cfg, 24);
  TrainSample s;
  s.image = checker_image(16, 16, 16);
  s.caption = m.vocab.tokenize("the image shows a bus");
  TrainSpec spec;
  spec.steps = 1;
  spec.batch = 2;
  FitResult res = fit(m, {s}, spec);
  const double lnv = std::log(static_cast<double>(cfg.vocab));
  REQUIRE(std::abs(res.loss_curve[0] - lnv) / lnv < 0.05);
}

TEST_CASE("fit: identical seeds give bit-identical weights") {
  ModelConfig cfg = tiny_config();
  TrainSample s;
  s.caption = Vocabulary().tokenize("the image shows a cake");
  s.image = checker_image(16, 16, 17);
  TrainSpec spec;
  spec.steps = 12;
  spec.batch = 2;
  spec.seed = 7;
  MultimodalLM m1 = MultimodalLM::init(cfg, 25);
  MultimodalLM m2 = MultimodalLM::init(cfg, 25);
  fit(m1, {s}, spec);
  fit(m2, {s}, spec);
  auto p1 = m1.parameters();
  auto p2 = m2.parameters();
  for (std::size_t i = 0; i < p1.size(); ++i) REQUIRE(p1[i].second->data == p2[i].second->data);
}

TEST_CASE("fit rejects empty corpora") {
  MultimodalLM m = MultimodalLM::init(tiny_config(), 26);
  REQUIRE_THROWS_AS(fit(m, {}, TrainSpec{}), ContractError);
}

TEST_CASE("checkpoint round trip preserves behavior bit-for-bit") {
  namespace fs = std::filesystem;
  MultimodalLM m = MultimodalLM::init(tiny_config(), 27);
  RasterImage img = checker_image(16, 16, 18);
  std::vector<int> text = m.vocab.tokenize("the image shows a");
  ForwardResult before = m.forward_with_capture(m.embed_image(img), text);

  fs::path path = fs::temp_directory_path() / "mmkn_ckpt_test.bin";
  m.save_checkpoint(path.string());
  MultimodalLM loaded = MultimodalLM::load_checkpoint(path.string());
  ForwardResult after = loaded.forward_with_capture(loaded.embed_image(img), text);
  REQUIRE(before.logits.data == after.logits.data);
  REQUIRE(before.record.acts.data == after.record.acts.data);

  std::ofstream bad(path.string(), std::ios::binary);
  bad << "not a checkpoint";
  bad.close();
  REQUIRE_THROWS_AS(MultimodalLM::load_checkpoint(path.string()), IoError);
}
