#pragma once

#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mmkn/image.hpp"
#include "mmkn/tape.hpp"
#include "mmkn/tensor.hpp"
#include "mmkn/tokenizer.hpp"

namespace mmkn {

struct ModelConfig {
  int layers = 6;
  int hidden = 64;
  int ffn = 256;
  int heads = 4;
  int vocab = 120;
  int patch_rows = 4;
  int patch_cols = 4;
  int patch_px = 16;
  int enc_dim = 128;
  int max_seq = 48;

  int image_tokens() const { return patch_rows * patch_cols; }
  int patch_dim() const { return patch_px * patch_px * 3; }

  void validate() const {
    require_shape(layers > 0 && hidden > 0 && ffn > 0 && heads > 0 && vocab > 1, "bad model dims");
    require_shape(patch_rows > 0 && patch_cols > 0 && patch_px > 0, "bad patch grid");
    require_shape(hidden % heads == 0, "hidden size must divide into heads");
    require_shape(ffn >= hidden, "ffn width must be at least hidden size");
    require_shape(max_seq > image_tokens(), "max_seq leaves no room for text");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"layers", c.layers},       {"hidden", c.hidden},
                     {"ffn", c.ffn},             {"heads", c.heads},
                     {"vocab", c.vocab},         {"patch_rows", c.patch_rows},
                     {"patch_cols", c.patch_cols}, {"patch_px", c.patch_px},
                     {"enc_dim", c.enc_dim},     {"max_seq", c.max_seq}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.layers = j.value("layers", d.layers);
  c.hidden = j.value("hidden", d.hidden);
  c.ffn = j.value("ffn", d.ffn);
  c.heads = j.value("heads", d.heads);
  c.vocab = j.value("vocab", d.vocab);
  c.patch_rows = j.value("patch_rows", d.patch_rows);
  c.patch_cols = j.value("patch_cols", d.patch_cols);
  c.patch_px = j.value("patch_px", d.patch_px);
  c.enc_dim = j.value("enc_dim", d.enc_dim);
  c.max_seq = j.value("max_seq", d.max_seq);
}

struct GenConfig {
  int max_new_tokens = 12;
  int min_new_tokens = 1;  // eos is masked until this many tokens exist
};

// Additive shift applied to selected FFN activations at image-token
// positions, before the second FFN matrix. `shift[p]` is added to every
// targeted (layer, unit) at image position p, at every forward pass.
struct Intervention {
  std::vector<std::pair<int, int>> targets;  // (layer, unit)
  std::vector<double> shift;                 // length = image token count

  bool empty() const { return targets.empty(); }
};

enum class Capture { None, Activations, Full };

// Post-nonlinearity FFN activations for every layer and position, plus
// (in Full mode) the per-layer inputs needed to recompute them.
struct ActivationRecord {
  Tensor acts;      // layers x T x ffn
  int image_tokens = 0;
  Tensor layer_in;  // layers x T x hidden (Full only): hidden state entering the layer
  Tensor attn_out;  // layers x T x hidden (Full only): attention branch output
};

struct ForwardResult {
  Tensor logits;  // T x vocab
  ActivationRecord record;
};

struct LayerWeights {
  Tensor ln_g, ln_b;
  Tensor wq, wk, wv, wo;
  Tensor w_in, w_out;
};

class MultimodalLM {
 public:
  ModelConfig cfg;
  Vocabulary vocab;

  Tensor w_enc, b_enc;    // per-patch pixels -> encoder features
  Tensor w_proj, b_proj;  // encoder features -> hidden
  Tensor tok_emb;         // vocab x hidden
  Tensor pos_emb;         // max_seq x hidden
  std::vector<LayerWeights> layer;
  Tensor ln_f_g, ln_f_b;
  Tensor unembed;    // hidden x vocab
  Tensor unembed_b;  // vocab

  MultimodalLM() : vocab(default_word_list()) {}

  static MultimodalLM init(const ModelConfig& cfg, std::uint64_t seed,
                           Vocabulary vocab = Vocabulary()) {
    cfg.validate();
    require_shape(cfg.vocab == vocab.size(), "config vocab size does not match vocabulary");
    MultimodalLM m;
    m.cfg = cfg;
    m.vocab = std::move(vocab);
    Pcg32 rng(splitmix64(seed));
    const double std0 = 0.02;
    const double std_res = std0 / std::sqrt(2.0 * cfg.layers);
    m.w_enc = Tensor::normal({cfg.patch_dim(), cfg.enc_dim}, rng, std0);
    m.b_enc = Tensor::zeros({cfg.enc_dim});
    m.w_proj = Tensor::normal({cfg.enc_dim, cfg.hidden}, rng, std0);
    m.b_proj = Tensor::zeros({cfg.hidden});
    m.tok_emb = Tensor::normal({cfg.vocab, cfg.hidden}, rng, std0);
    m.pos_emb = Tensor::normal({cfg.max_seq, cfg.hidden}, rng, std0);
    for (int l = 0; l < cfg.layers; ++l) {
      LayerWeights w;
      w.ln_g = Tensor::full({cfg.hidden}, 1.0);
      w.ln_b = Tensor::zeros({cfg.hidden});
      w.wq = Tensor::normal({cfg.hidden, cfg.hidden}, rng, std0);
      w.wk = Tensor::normal({cfg.hidden, cfg.hidden}, rng, std0);
      w.wv = Tensor::normal({cfg.hidden, cfg.hidden}, rng, std0);
      w.wo = Tensor::normal({cfg.hidden, cfg.hidden}, rng, std_res);
      w.w_in = Tensor::normal({cfg.hidden, cfg.ffn}, rng, std0);
      w.w_out = Tensor::normal({cfg.ffn, cfg.hidden}, rng, std_res);
      m.layer.push_back(std::move(w));
    }
    m.ln_f_g = Tensor::full({cfg.hidden}, 1.0);
    m.ln_f_b = Tensor::zeros({cfg.hidden});
    m.unembed = Tensor::normal({cfg.hidden, cfg.vocab}, rng, std0);
    m.unembed_b = Tensor::zeros({cfg.vocab});
    return m;
  }

  // Stable parameter registry; the order defines the checkpoint layout.
  std::vector<std::pair<std::string, Tensor*>> parameters() {
    std::vector<std::pair<std::string, Tensor*>> out = {
        {"w_enc", &w_enc},     {"b_enc", &b_enc},   {"w_proj", &w_proj},
        {"b_proj", &b_proj},   {"tok_emb", &tok_emb}, {"pos_emb", &pos_emb},
    };
    for (std::size_t l = 0; l < layer.size(); ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      out.push_back({p + "ln_g", &layer[l].ln_g});
      out.push_back({p + "ln_b", &layer[l].ln_b});
      out.push_back({p + "wq", &layer[l].wq});
      out.push_back({p + "wk", &layer[l].wk});
      out.push_back({p + "wv", &layer[l].wv});
      out.push_back({p + "wo", &layer[l].wo});
      out.push_back({p + "w_in", &layer[l].w_in});
      out.push_back({p + "w_out", &layer[l].w_out});
    }
    out.push_back({"ln_f_g", &ln_f_g});
    out.push_back({"ln_f_b", &ln_f_b});
    out.push_back({"unembed", &unembed});
    out.push_back({"unembed_b", &unembed_b});
    return out;
  }

  // Patch pixels flattened (row, column, channel) and mapped to [0, 1];
  // one row per patch.
  Tensor flatten_patches(const RasterImage& img) const {
    require_shape(img.width % cfg.patch_cols == 0 && img.height % cfg.patch_rows == 0,
                  "raster dims not divisible by patch grid");
    require_shape(img.width / cfg.patch_cols == cfg.patch_px &&
                      img.height / cfg.patch_rows == cfg.patch_px,
                  "raster patch size does not match model config");
    const int p_count = cfg.image_tokens();
    Tensor flat = Tensor::zeros({p_count, cfg.patch_dim()});
    for (int pr = 0; pr < cfg.patch_rows; ++pr)
      for (int pc = 0; pc < cfg.patch_cols; ++pc) {
        double* dst = flat.row(pr * cfg.patch_cols + pc);
        int k = 0;
        for (int y = 0; y < cfg.patch_px; ++y)
          for (int x = 0; x < cfg.patch_px; ++x)
            for (int c = 0; c < 3; ++c)
              dst[k++] = img.at(pc * cfg.patch_px + x, pr * cfg.patch_px + y, c) / 255.0;
      }
    return flat;
  }

  // Patch features through the encoder and the projector; strictly
  // patch-local, no cross-patch mixing.
  Tensor embed_image(const RasterImage& img) const {
    Tensor enc = matmul(flatten_patches(img), w_enc);
    add_rowvec_inplace(enc, b_enc);
    Tensor proj = matmul(enc, w_proj);
    add_rowvec_inplace(proj, b_proj);
    return proj;
  }

  ForwardResult forward_with_capture(const Tensor& image_tokens, const std::vector<int>& text,
                                     const Intervention* iv = nullptr,
                                     Capture capture = Capture::Activations) const {
    Tensor x = assemble_input(image_tokens, text);
    const int t = x.dim(0);
    const int p_count = cfg.image_tokens();
    check_intervention(iv);

    ForwardResult res;
    res.record.image_tokens = p_count;
    if (capture != Capture::None) res.record.acts = Tensor::zeros({cfg.layers, t, cfg.ffn});
    if (capture == Capture::Full) {
      res.record.layer_in = Tensor::zeros({cfg.layers, t, cfg.hidden});
      res.record.attn_out = Tensor::zeros({cfg.layers, t, cfg.hidden});
    }

    for (int l = 0; l < cfg.layers; ++l) {
      const LayerWeights& w = layer[static_cast<std::size_t>(l)];
      Tensor ln = layernorm_rows_forward(x, w.ln_g, w.ln_b);
      Tensor q = matmul(ln, w.wq);
      Tensor k = matmul(ln, w.wk);
      Tensor v = matmul(ln, w.wv);
      Tensor ctx = attention_core(q, k, v, cfg.heads);
      Tensor attn = matmul(ctx, w.wo);
      if (capture == Capture::Full) {
        copy_plane(res.record.layer_in, l, x);
        copy_plane(res.record.attn_out, l, attn);
      }
      Tensor u = add(x, attn);
      Tensor acts = gelu(matmul(u, w.w_in));
      apply_intervention(acts, iv, l, p_count);
      if (capture != Capture::None) copy_plane(res.record.acts, l, acts);
      Tensor m = matmul(acts, w.w_out);
      x = add(u, m);
    }
    Tensor xf = layernorm_rows_forward(x, ln_f_g, ln_f_b);
    res.logits = matmul(xf, unembed);
    add_rowvec_inplace(res.logits, unembed_b);
    res.logits.assert_finite("forward logits");
    return res;
  }

  // Last-position logits only; the per-step workhorse for generation.
  std::vector<double> forward_last_logits(const Tensor& image_tokens, const std::vector<int>& text,
                                          const Intervention* iv = nullptr) const {
    Tensor x = assemble_input(image_tokens, text);
    const int p_count = cfg.image_tokens();
    check_intervention(iv);
    for (int l = 0; l < cfg.layers; ++l) {
      const LayerWeights& w = layer[static_cast<std::size_t>(l)];
      Tensor ln = layernorm_rows_forward(x, w.ln_g, w.ln_b);
      Tensor q = matmul(ln, w.wq);
      Tensor k = matmul(ln, w.wk);
      Tensor v = matmul(ln, w.wv);
      Tensor ctx = attention_core(q, k, v, cfg.heads);
      Tensor attn = matmul(ctx, w.wo);
      Tensor u = add(x, attn);
      Tensor acts = gelu(matmul(u, w.w_in));
      apply_intervention(acts, iv, l, p_count);
      Tensor m = matmul(acts, w.w_out);
      x = add(u, m);
    }
    Tensor xf = layernorm_rows_forward(x, ln_f_g, ln_f_b);
    // Same accumulation order as matmul-then-bias so this row agrees
    // bitwise with the full-logits path.
    std::vector<double> logits(static_cast<std::size_t>(cfg.vocab), 0.0);
    matmul_row(xf.row(xf.dim(0) - 1), unembed, logits.data());
    for (int j = 0; j < cfg.vocab; ++j) logits[static_cast<std::size_t>(j)] += unembed_b.at(j);
    return logits;
  }

  // Greedy decode. Returns the generated continuation; eos is consumed,
  // not returned.
  std::vector<int> generate(const RasterImage& img, const std::vector<int>& prompt,
                            const GenConfig& gen, const Intervention* iv = nullptr) const {
    require(!prompt.empty(), "generate requires a non-empty prompt");
    require(gen.max_new_tokens >= 0, "max_new_tokens must be >= 0");
    Tensor image_tokens = embed_image(img);
    std::vector<int> text = prompt;
    std::vector<int> out;
    const int eos = vocab.eos_id();
    while (static_cast<int>(out.size()) < gen.max_new_tokens) {
      std::vector<double> logits = forward_last_logits(image_tokens, text, iv);
      const bool allow_eos = static_cast<int>(out.size()) >= gen.min_new_tokens;
      int best = -1;
      double best_v = 0.0;
      for (int j = 0; j < cfg.vocab; ++j) {
        if (!allow_eos && j == eos) continue;
        if (best < 0 || logits[static_cast<std::size_t>(j)] > best_v) {
          best = j;
          best_v = logits[static_cast<std::size_t>(j)];
        }
      }
      if (best == eos) break;
      out.push_back(best);
      text.push_back(best);
    }
    return out;
  }

  // Forward pass recorded on a tape. In weight-grads mode every
  // parameter becomes a differentiable leaf (training); otherwise only
  // the flattened pixels do, which is enough to reach the activation
  // nodes while keeping backward off the weight matrices.
  struct TraceResult {
    int logits_node = -1;
    std::vector<int> act_nodes;  // one per layer, post-intervention
    std::vector<std::pair<std::string, int>> param_nodes;
    int rows = 0;
    int image_tokens = 0;
  };

  TraceResult trace_forward(Tape& tp, const RasterImage& img, const std::vector<int>& text,
                            bool weight_grads, const Intervention* iv = nullptr) const {
    check_intervention(iv);
    const int p_count = cfg.image_tokens();
    const int t = p_count + static_cast<int>(text.size());
    require(t <= cfg.max_seq, "sequence overflow");
    for (int id : text) require(id >= 0 && id < cfg.vocab, "unknown token id");

    TraceResult res;
    res.rows = t;
    res.image_tokens = p_count;
    auto param = [&](const std::string& name, const Tensor& value) {
      int id = tp.leaf(value, weight_grads);
      res.param_nodes.push_back({name, id});
      return id;
    };

    // Leaf registration below is sequenced one call per statement so the
    // node order matches parameters() regardless of evaluation order.
    int flat = tp.leaf(flatten_patches(img), !weight_grads);
    int w_enc_n = param("w_enc", w_enc);
    int b_enc_n = param("b_enc", b_enc);
    int w_proj_n = param("w_proj", w_proj);
    int b_proj_n = param("b_proj", b_proj);
    int tok_n = param("tok_emb", tok_emb);
    int pos_n = param("pos_emb", pos_emb);
    int enc = tp.add_rowvec(tp.matmul(flat, w_enc_n), b_enc_n);
    int img_node = tp.add_rowvec(tp.matmul(enc, w_proj_n), b_proj_n);
    int text_node = tp.gather_rows(tok_n, text);
    int x = tp.concat_rows(img_node, text_node);
    std::vector<int> pos_ids(static_cast<std::size_t>(t));
    for (int i = 0; i < t; ++i) pos_ids[static_cast<std::size_t>(i)] = i;
    x = tp.add(x, tp.gather_rows(pos_n, pos_ids));

    for (int l = 0; l < cfg.layers; ++l) {
      const LayerWeights& w = layer[static_cast<std::size_t>(l)];
      const std::string p = "layer" + std::to_string(l) + ".";
      int ln_g_n = param(p + "ln_g", w.ln_g);
      int ln_b_n = param(p + "ln_b", w.ln_b);
      int wq_n = param(p + "wq", w.wq);
      int wk_n = param(p + "wk", w.wk);
      int wv_n = param(p + "wv", w.wv);
      int wo_n = param(p + "wo", w.wo);
      int w_in_n = param(p + "w_in", w.w_in);
      int w_out_n = param(p + "w_out", w.w_out);
      int ln = tp.layernorm_rows(x, ln_g_n, ln_b_n);
      int q = tp.matmul(ln, wq_n);
      int k = tp.matmul(ln, wk_n);
      int v = tp.matmul(ln, wv_n);
      int ctx = tp.causal_attention(q, k, v, cfg.heads);
      int attn = tp.matmul(ctx, wo_n);
      int u = tp.add(x, attn);
      int acts = tp.gelu(tp.matmul(u, w_in_n));
      if (iv && !iv->empty()) {
        Tensor delta = Tensor::zeros({t, cfg.ffn});
        for (const auto& [tl, ti] : iv->targets)
          if (tl == l)
            for (int pp = 0; pp < p_count; ++pp)
              delta.at(pp, ti) += iv->shift[static_cast<std::size_t>(pp)];
        acts = tp.add_const(acts, std::move(delta));
      }
      res.act_nodes.push_back(acts);
      int m = tp.matmul(acts, w_out_n);
      x = tp.add(u, m);
    }
    int ln_f_g_n = param("ln_f_g", ln_f_g);
    int ln_f_b_n = param("ln_f_b", ln_f_b);
    int unembed_n = param("unembed", unembed);
    int unembed_b_n = param("unembed_b", unembed_b);
    int xf = tp.layernorm_rows(x, ln_f_g_n, ln_f_b_n);
    res.logits_node = tp.add_rowvec(tp.matmul(xf, unembed_n), unembed_b_n);
    return res;
  }

  // The whole forward pass traced on a tape, ending at the pre-softmax
  // logit of token `c` at the last prefix position. Activation node ids
  // are kept so callers can read d(logit)/d(activations) after backward.
  struct TracedLogit {
    std::unique_ptr<Tape> tape;
    int logit_node = -1;
    std::vector<int> act_nodes;
    int last_row = 0;
    int image_tokens = 0;
  };

  TracedLogit target_logit(const RasterImage& img, const std::vector<int>& prefix, int c,
                           const Intervention* iv = nullptr) const {
    require(!prefix.empty(), "target_logit requires a non-empty prefix");
    require(c >= 0 && c < cfg.vocab, "target token outside vocabulary");
    TracedLogit traced;
    traced.tape = std::make_unique<Tape>();
    TraceResult res = trace_forward(*traced.tape, img, prefix, false, iv);
    traced.act_nodes = res.act_nodes;
    traced.last_row = res.rows - 1;
    traced.image_tokens = res.image_tokens;
    traced.logit_node = traced.tape->pick(res.logits_node, traced.last_row, c);
    return traced;
  }

  void save_checkpoint(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    nlohmann::json header;
    header["format"] = "mmkn-checkpoint";
    header["version"] = 1;
    header["config"] = cfg;
    header["vocab"] = vocab.words();
    nlohmann::json tensors = nlohmann::json::array();
    for (auto& [name, t] : parameters())
      tensors.push_back({{"name", name}, {"shape", t->shape}});
    header["tensors"] = tensors;
    const std::string hdr = header.dump();
    const char magic[8] = {'M', 'M', 'K', 'N', 'C', 'K', 'P', '1'};
    out.write(magic, 8);
    std::uint64_t len = hdr.size();
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
    for (auto& [name, t] : parameters())
      out.write(reinterpret_cast<const char*>(t->data.data()),
                static_cast<std::streamsize>(t->data.size() * sizeof(double)));
    if (!out) throw IoError("short checkpoint write: " + path);
  }

  static MultimodalLM load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint: " + path);
    char magic[8];
    in.read(magic, 8);
    if (in.gcount() != 8 || std::memcmp(magic, "MMKNCKP1", 8) != 0)
      throw IoError("not a checkpoint file: " + path);
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 8);
    std::string hdr(len, '\0');
    in.read(hdr.data(), static_cast<std::streamsize>(len));
    if (!in) throw IoError("truncated checkpoint header: " + path);
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(hdr);
    } catch (const nlohmann::json::exception& e) {
      throw IoError("bad checkpoint header: " + std::string(e.what()));
    }
    ModelConfig cfg = header.at("config").get<ModelConfig>();
    Vocabulary vocab(header.at("vocab").get<std::vector<std::string>>());
    MultimodalLM m = MultimodalLM::init(cfg, 0, std::move(vocab));
    auto params = m.parameters();
    const auto& tensors = header.at("tensors");
    require(tensors.size() == params.size(), "checkpoint tensor count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& spec = tensors[i];
      require(spec.at("name").get<std::string>() == params[i].first,
              "checkpoint tensor name mismatch: " + params[i].first);
      std::vector<int> shape = spec.at("shape").get<std::vector<int>>();
      require_shape(shape == params[i].second->shape,
                    "checkpoint shape mismatch for " + params[i].first);
      in.read(reinterpret_cast<char*>(params[i].second->data.data()),
              static_cast<std::streamsize>(params[i].second->data.size() * sizeof(double)));
      if (!in) throw IoError("truncated checkpoint payload: " + path);
      params[i].second->assert_finite("checkpoint tensor " + params[i].first);
    }
    return m;
  }

 private:
  static void add_rowvec_inplace(Tensor& m, const Tensor& v) {
    for (int i = 0; i < m.dim(0); ++i) {
      double* row = m.row(i);
      for (int j = 0; j < m.dim(1); ++j) row[j] += v.data[static_cast<std::size_t>(j)];
    }
  }

  static void copy_plane(Tensor& dst, int plane, const Tensor& src) {
    std::copy(src.data.begin(), src.data.end(),
              dst.data.begin() + static_cast<long>(plane) * static_cast<long>(src.numel()));
  }

  Tensor assemble_input(const Tensor& image_tokens, const std::vector<int>& text) const {
    const int p_count = cfg.image_tokens();
    require_shape(image_tokens.rank() == 2 && image_tokens.dim(0) == p_count &&
                      image_tokens.dim(1) == cfg.hidden,
                  "image token matrix has wrong shape");
    const int t = p_count + static_cast<int>(text.size());
    require(t <= cfg.max_seq, "sequence overflow");
    Tensor x = Tensor::zeros({t, cfg.hidden});
    for (int i = 0; i < p_count; ++i) {
      const double* src = image_tokens.row(i);
      const double* pos = pos_emb.row(i);
      double* dst = x.row(i);
      for (int j = 0; j < cfg.hidden; ++j) dst[j] = src[j] + pos[j];
    }
    for (std::size_t r = 0; r < text.size(); ++r) {
      const int id = text[r];
      require(id >= 0 && id < cfg.vocab, "unknown token id");
      const double* src = tok_emb.row(id);
      const double* pos = pos_emb.row(p_count + static_cast<int>(r));
      double* dst = x.row(p_count + static_cast<int>(r));
      for (int j = 0; j < cfg.hidden; ++j) dst[j] = src[j] + pos[j];
    }
    return x;
  }

  void check_intervention(const Intervention* iv) const {
    if (!iv || iv->empty()) return;
    require(iv->shift.size() == static_cast<std::size_t>(cfg.image_tokens()),
            "intervention shift length must equal image token count");
    for (const auto& [l, i] : iv->targets)
      require(l >= 0 && l < cfg.layers && i >= 0 && i < cfg.ffn,
              "intervention target outside model");
  }

  void apply_intervention(Tensor& acts, const Intervention* iv, int l, int p_count) const {
    if (!iv || iv->empty()) return;
    for (const auto& [tl, ti] : iv->targets) {
      if (tl != l) continue;
      for (int p = 0; p < p_count; ++p) acts.at(p, ti) += iv->shift[static_cast<std::size_t>(p)];
    }
  }
};

}  // namespace mmkn
