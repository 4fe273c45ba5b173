#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmkn/annotations.hpp"
#include "mmkn/corpus.hpp"
#include "mmkn/csv.hpp"
#include "mmkn/identify.hpp"
#include "mmkn/inpaint.hpp"
#include "mmkn/metrics.hpp"
#include "mmkn/model.hpp"
#include "mmkn/perturb.hpp"
#include "mmkn/threadpool.hpp"
#include "mmkn/train.hpp"

namespace mmkn {

inline constexpr const char* kPipelineVersion = "0.1.0";

inline const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> methods = {"ours", "gradient_baseline",
                                                   "actweight_baseline", "random_baseline"};
  return methods;
}

struct RunConfig {
  std::uint64_t seed = 1;
  int jobs = 0;  // 0 = hardware concurrency
  std::string prompt = "the image shows a";
  GenConfig gen;

  // model
  std::string checkpoint;  // resolved path; empty means train
  ModelConfig model_cfg;
  TrainSpec train;

  // corpus
  std::string corpus_dir = "corpus";  // resolved path
  std::string annotations_dir;        // resolved path; non-empty selects ingest mode
  std::vector<std::string> knowledge;
  int scenes_per_knowledge = 3;
  int train_scenes = 1200;
  int holdout_scenes = 100;
  std::uint64_t corpus_seed = 777;
  CorpusParams corpus_params;
  bool train_on_knowledge_scenes = true;
  int telea_radius = 5;

  // identification
  double percentile_act = 99.7;
  double percentile_grad = 90.0;
  std::map<std::string, Thresholds> fixed_thresholds;  // per-knowledge overrides
  bool absolute_diff = false;
  bool same_patch = false;

  // perturbation
  NoiseSpec noise;
  int retention_images = 3;
  std::vector<std::string> methods = known_methods();

  std::string raw_json;  // canonical dump for hashing

  void validate() const {
    require(!methods.empty(), "config must request at least one method");
    for (const std::string& m : methods) {
      bool known = false;
      for (const std::string& k : known_methods()) known = known || k == m;
      if (!known) throw ConfigError("unknown method name: " + m);
    }
    std::set<std::string> uniq(methods.begin(), methods.end());
    if (uniq.size() != methods.size()) throw ConfigError("duplicate method name in config");
    if (knowledge.empty()) throw ConfigError("config must list at least one knowledge token");
    noise.validate();
    model_cfg.validate();
    require(corpus_params.canvas == model_cfg.patch_px * model_cfg.patch_rows &&
                corpus_params.canvas == model_cfg.patch_px * model_cfg.patch_cols,
            "corpus canvas must match the model patch geometry");
    require(retention_images >= 1, "retention_images must be >= 1");
    require(scenes_per_knowledge >= 1, "scenes_per_knowledge must be >= 1");
  }
};

inline RunConfig load_run_config(const std::string& path) {
  namespace fs = std::filesystem;
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config is not valid json: " + std::string(e.what()));
  }
  const fs::path base = fs::path(path).parent_path();
  auto resolve = [&base](const std::string& p) {
    if (p.empty()) return p;
    fs::path fp(p);
    return fp.is_absolute() ? fp.string() : (base / fp).string();
  };

  RunConfig cfg;
  try {
    cfg.raw_json = j.dump();
    cfg.seed = j.value("seed", cfg.seed);
    cfg.jobs = j.value("jobs", cfg.jobs);
    cfg.prompt = j.value("prompt", cfg.prompt);
    if (j.contains("gen")) {
      cfg.gen.max_new_tokens = j["gen"].value("max_new_tokens", cfg.gen.max_new_tokens);
      cfg.gen.min_new_tokens = j["gen"].value("min_new_tokens", cfg.gen.min_new_tokens);
    }
    if (j.contains("model")) {
      const auto& jm = j["model"];
      if (jm.contains("config")) cfg.model_cfg = jm["config"].get<ModelConfig>();
      cfg.checkpoint = resolve(jm.value("checkpoint", std::string()));
      if (jm.contains("train")) {
        const auto& jt = jm["train"];
        cfg.train.steps = jt.value("steps", cfg.train.steps);
        cfg.train.batch = jt.value("batch", cfg.train.batch);
        cfg.train.lr = jt.value("lr", cfg.train.lr);
        cfg.train.clip = jt.value("clip", cfg.train.clip);
        cfg.train.seed = jt.value("seed", cfg.train.seed);
        const std::string sched = jt.value("schedule", std::string("cosine"));
        if (sched == "cosine") cfg.train.schedule = LrSchedule::Cosine;
        else if (sched == "constant") cfg.train.schedule = LrSchedule::Constant;
        else throw ConfigError("unknown lr schedule: " + sched);
      }
    }
    if (j.contains("corpus")) {
      const auto& jc = j["corpus"];
      cfg.corpus_dir = resolve(jc.value("dir", cfg.corpus_dir));
      cfg.annotations_dir = resolve(jc.value("annotations_dir", std::string()));
      if (jc.contains("knowledge"))
        cfg.knowledge = jc["knowledge"].get<std::vector<std::string>>();
      cfg.scenes_per_knowledge = jc.value("scenes_per_knowledge", cfg.scenes_per_knowledge);
      cfg.train_scenes = jc.value("train_scenes", cfg.train_scenes);
      cfg.holdout_scenes = jc.value("holdout_scenes", cfg.holdout_scenes);
      cfg.corpus_seed = jc.value("seed", cfg.corpus_seed);
      cfg.corpus_params.canvas = jc.value("canvas", cfg.corpus_params.canvas);
      cfg.train_on_knowledge_scenes =
          jc.value("train_on_knowledge_scenes", cfg.train_on_knowledge_scenes);
      cfg.telea_radius = jc.value("telea_radius", cfg.telea_radius);
    }
    if (cfg.knowledge.empty())
      for (const ObjectType& t : object_catalog()) cfg.knowledge.push_back(t.name);
    if (j.contains("identify")) {
      const auto& ji = j["identify"];
      cfg.percentile_act = ji.value("percentile_act", cfg.percentile_act);
      cfg.percentile_grad = ji.value("percentile_grad", cfg.percentile_grad);
      cfg.absolute_diff = ji.value("absolute_diff", cfg.absolute_diff);
      cfg.same_patch = ji.value("same_patch", cfg.same_patch);
      if (ji.contains("thresholds")) {
        for (auto it = ji["thresholds"].begin(); it != ji["thresholds"].end(); ++it) {
          Thresholds t;
          t.activation = it.value().at("activation").get<double>();
          t.gradcam = it.value().at("gradcam").get<double>();
          cfg.fixed_thresholds[it.key()] = t;
        }
      }
    }
    if (j.contains("noise")) {
      const auto& jn = j["noise"];
      if (jn.contains("levels")) cfg.noise.levels = jn["levels"].get<std::vector<double>>();
      cfg.noise.samples_per_level = jn.value("samples", cfg.noise.samples_per_level);
      const std::string mode = jn.value("mode", std::string("relative"));
      if (mode == "relative") cfg.noise.mode = NoiseScaleMode::RelativeStd;
      else if (mode == "absolute") cfg.noise.mode = NoiseScaleMode::Absolute;
      else throw ConfigError("unknown noise mode: " + mode);
    }
    if (j.contains("methods")) cfg.methods = j["methods"].get<std::vector<std::string>>();
    cfg.retention_images = j.value("retention_images", cfg.retention_images);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config field error: " + std::string(e.what()));
  }
  cfg.noise.base_seed = cfg.seed;
  cfg.validate();
  return cfg;
}

// One identification sample flowing through validation, identification
// and perturbation.
struct PipelineSample {
  std::string id;
  std::string knowledge;
  std::optional<Scene> scene;  // synthetic corpora only
  std::uint64_t render_seed = 0;
  RasterImage original;
  RasterImage inpainted;
  BBox mask_bbox;
  std::vector<BBox> other_bboxes;
  std::vector<std::string> labels_present;

  // validation outputs
  std::string status;  // "pass" or a reason code
  std::vector<int> caption_orig;
  std::vector<int> caption_inp;

  bool passed() const { return status == "pass"; }
  bool contains_label(const std::string& k) const {
    for (const std::string& l : labels_present)
      if (l == k) return true;
    return false;
  }
};

struct BuiltCorpus {
  std::vector<std::pair<Scene, std::uint64_t>> train_scenes;
  std::vector<PipelineSample> samples;
  std::vector<std::pair<Scene, std::uint64_t>> holdout_scenes;  // single object each
};

inline int catalog_index(const std::string& name) {
  const auto& catalog = object_catalog();
  for (std::size_t i = 0; i < catalog.size(); ++i)
    if (catalog[i].name == name) return static_cast<int>(i);
  throw ConfigError("knowledge token is not a catalog object: " + name);
}

// Synthetic corpus: training scenes over all catalog objects, one
// two-object identification scene per (knowledge, group), single-object
// holdout scenes. Fully determined by the corpus seed.
inline BuiltCorpus build_synthetic_corpus(const RunConfig& cfg) {
  BuiltCorpus corpus;
  std::vector<int> all_types;
  for (std::size_t i = 0; i < object_catalog().size(); ++i)
    all_types.push_back(static_cast<int>(i));

  Pcg32 train_rng(splitmix64(cfg.corpus_seed ^ 0x747261696eULL));
  for (int i = 0; i < cfg.train_scenes; ++i) {
    const int span = cfg.corpus_params.max_objects - cfg.corpus_params.min_objects + 1;
    const int n = cfg.corpus_params.min_objects +
                  static_cast<int>(train_rng.next_below(static_cast<std::uint32_t>(span)));
    Scene s = random_scene(train_rng, cfg.corpus_params, all_types, n);
    corpus.train_scenes.push_back({s, splitmix64(cfg.corpus_seed ^ (0xabc000ULL + i))});
  }

  for (std::size_t ki = 0; ki < cfg.knowledge.size(); ++ki) {
    const int type = catalog_index(cfg.knowledge[ki]);
    for (int g = 0; g < cfg.scenes_per_knowledge; ++g) {
      Pcg32 rng(splitmix64(cfg.corpus_seed ^ (0x5a5a00ULL + 100 * ki + g)));
      const int n_types = static_cast<int>(object_catalog().size());
      const int distractor = (type + 1 + g) % n_types == type ? (type + 2) % n_types
                                                              : (type + 1 + g) % n_types;
      Scene s = knowledge_scene(rng, cfg.corpus_params, type, distractor);
      PipelineSample sample;
      sample.id = cfg.knowledge[ki] + "_" + std::to_string(g);
      sample.knowledge = cfg.knowledge[ki];
      sample.scene = s;
      sample.render_seed = splitmix64(cfg.corpus_seed ^ (0x9d9d00ULL + 100 * ki + g));
      sample.original = render_scene(s, sample.render_seed);
      sample.mask_bbox = s.objects[0].bbox;
      sample.other_bboxes = {s.objects[1].bbox};
      sample.labels_present = {s.objects[0].label, s.objects[1].label};
      Mask mask = Mask::from_bbox(s.width, s.height, sample.mask_bbox);
      sample.inpainted = inpaint_background_fill(sample.original, mask, s.background);
      corpus.samples.push_back(std::move(sample));
    }
  }

  Pcg32 holdout_rng(splitmix64(cfg.corpus_seed ^ 0x686f6c64ULL));
  for (int i = 0; i < cfg.holdout_scenes; ++i) {
    Scene s = random_scene(holdout_rng, cfg.corpus_params, all_types, 1);
    corpus.holdout_scenes.push_back({s, splitmix64(cfg.corpus_seed ^ (0xdef000ULL + i))});
  }
  return corpus;
}

// Ingest mode: identification samples come from a COCO-like annotation
// directory and object removal uses fast-marching inpainting. Training
// scenes and holdouts remain synthetic.
inline BuiltCorpus build_ingested_corpus(const RunConfig& cfg, const Vocabulary& vocab) {
  BuiltCorpus corpus = build_synthetic_corpus(cfg);
  corpus.samples.clear();
  AnnotationSet set = load_annotations(
      cfg.annotations_dir, [&vocab](const std::string& l) { return vocab.contains(l); });
  std::map<std::string, int> group_counter;
  std::map<std::string, std::vector<const AnnotationRecord*>> by_image;
  for (const AnnotationRecord& r : set.records) by_image[r.image_path].push_back(&r);
  for (const AnnotationRecord& r : set.records) {
    if (r.label == "<unk>") continue;
    bool requested = false;
    for (const std::string& k : cfg.knowledge) requested = requested || k == r.label;
    if (!requested) continue;
    PipelineSample sample;
    const int g = group_counter[r.label]++;
    sample.id = r.label + "_" + std::to_string(g);
    sample.knowledge = r.label;
    sample.original = read_ppm(r.image_path);
    sample.mask_bbox = r.bbox;
    for (const AnnotationRecord* other : by_image[r.image_path]) {
      if (other == &r) continue;
      sample.other_bboxes.push_back(other->bbox);
      sample.labels_present.push_back(other->label);
    }
    sample.labels_present.push_back(r.label);
    Mask mask = Mask::from_bbox(sample.original.width, sample.original.height, r.bbox);
    sample.inpainted = inpaint_telea(sample.original, mask, cfg.telea_radius);
    corpus.samples.push_back(std::move(sample));
  }
  return corpus;
}

inline BuiltCorpus build_corpus(const RunConfig& cfg, const Vocabulary& vocab) {
  if (!cfg.annotations_dir.empty()) return build_ingested_corpus(cfg, vocab);
  return build_synthetic_corpus(cfg);
}

inline void write_corpus_dir(const RunConfig& cfg, const BuiltCorpus& corpus) {
  namespace fs = std::filesystem;
  fs::create_directories(cfg.corpus_dir);
  nlohmann::json doc;
  doc["seed"] = cfg.corpus_seed;
  doc["knowledge"] = cfg.knowledge;
  nlohmann::json train = nlohmann::json::array();
  for (const auto& [scene, seed] : corpus.train_scenes)
    train.push_back({{"scene", scene}, {"seed", seed}});
  doc["train"] = train;
  nlohmann::json holdout = nlohmann::json::array();
  for (const auto& [scene, seed] : corpus.holdout_scenes)
    holdout.push_back({{"scene", scene}, {"seed", seed}});
  doc["holdout"] = holdout;
  nlohmann::json samples = nlohmann::json::array();
  for (const PipelineSample& s : corpus.samples) {
    nlohmann::json js = {{"id", s.id}, {"knowledge", s.knowledge}, {"render_seed", s.render_seed}};
    if (s.scene) js["scene"] = *s.scene;
    samples.push_back(js);
    write_ppm(s.original, (fs::path(cfg.corpus_dir) / (s.id + "_orig.ppm")).string());
    write_ppm(s.inpainted, (fs::path(cfg.corpus_dir) / (s.id + "_inp.ppm")).string());
  }
  doc["samples"] = samples;
  std::ofstream out(fs::path(cfg.corpus_dir) / "scenes.json");
  if (!out) throw IoError("cannot write corpus spec");
  out << doc.dump(2) << "\n";
}

// Reason codes for the three admissibility rules.
inline constexpr const char* kReasonOriginalMissing = "ORIGINAL_MISSING_K";
inline constexpr const char* kReasonInpaintContains = "INPAINT_CONTAINS_K";
inline constexpr const char* kReasonMaskOverlaps = "MASK_OVERLAPS_OTHER";

// Runs generation on both views and applies the three admissibility
// rules. Failures are values, never exceptions.
inline std::string validate_sample(const MultimodalLM& model, PipelineSample& sample,
                                   const std::vector<int>& prompt, const GenConfig& gen) {
  for (const BBox& other : sample.other_bboxes)
    if (sample.mask_bbox.intersects(other)) return kReasonMaskOverlaps;
  std::vector<int> cont = model.generate(sample.original, prompt, gen);
  sample.caption_orig = prompt;
  sample.caption_orig.insert(sample.caption_orig.end(), cont.begin(), cont.end());
  std::vector<int> cont_inp = model.generate(sample.inpainted, prompt, gen);
  sample.caption_inp = prompt;
  sample.caption_inp.insert(sample.caption_inp.end(), cont_inp.begin(), cont_inp.end());
  if (knowledge_presence(sample.caption_orig, model.vocab, sample.knowledge) == 0)
    return kReasonOriginalMissing;
  if (knowledge_presence(sample.caption_inp, model.vocab, sample.knowledge) == 1)
    return kReasonInpaintContains;
  return "pass";
}

struct IdentifiedSample {
  const PipelineSample* sample = nullptr;
  int group = 0;  // index among the knowledge's validated samples
  Thresholds thresholds;
  NeuronSet candidates;
  std::map<std::string, NeuronSet> sets;  // per method
  Tensor diff;                            // activation difference tensor
  ImageActivations original_acts;
  double act_std = 0.0;
};

inline std::pair<int, int> find_knowledge_token(const std::vector<int>& caption,
                                                const Vocabulary& vocab,
                                                const std::string& knowledge) {
  std::istringstream ss(knowledge);
  std::string first_word;
  ss >> first_word;
  for (std::size_t i = 0; i < caption.size(); ++i)
    if (tokens_match(vocab.word(caption[i]), first_word)) return {static_cast<int>(i), caption[i]};
  return {-1, -1};
}

// Two-stage identification plus the reconstructed baselines for one
// validated sampleart.
inline IdentifiedSample identify_sample(const MultimodalLM& model, const RunConfig& cfg,
                                        const PipelineSample& sample, int group,
                                        const std::vector<int>& prompt) {
  IdentifiedSample out;
  out.sample = &sample;
  out.group = group;

  out.original_acts = image_activations(model, sample.original, prompt, sample.id);
  ImageActivations inp = image_activations(model, sample.inpainted, prompt, sample.id);
  ActivationDiff diff = activation_diff(out.original_acts, inp, sample.knowledge);
  out.act_std = stddev(out.original_acts.values);

  auto fixed = cfg.fixed_thresholds.find(sample.knowledge);
  out.thresholds.activation = fixed != cfg.fixed_thresholds.end()
                                  ? fixed->second.activation
                                  : percentile(diff.values, cfg.percentile_act);
  out.candidates = candidate_set(diff, out.thresholds.activation, cfg.absolute_diff);

  auto [pos, token] = find_knowledge_token(sample.caption_orig, model.vocab, sample.knowledge);
  require(pos > 0, "validated caption lost its knowledge token: " + sample.id);
  std::vector<int> prefix(sample.caption_orig.begin(), sample.caption_orig.begin() + pos);
  Tensor g = gradcam(model, sample.original, prefix, token);

  out.thresholds.gradcam = fixed != cfg.fixed_thresholds.end()
                               ? fixed->second.gradcam
                               : std::max(0.0, percentile(g, cfg.percentile_grad));
  NeuronSet final = final_set(out.candidates, g, out.thresholds.gradcam, cfg.same_patch);
  const int count = static_cast<int>(final.size());
  out.diff = diff.values;

  for (const std::string& method : cfg.methods) {
    if (method == "ours") {
      out.sets[method] = final;
    } else if (method == "gradient_baseline") {
      out.sets[method] = top_k(score_gradient_baseline(g), count);
    } else if (method == "actweight_baseline") {
      out.sets[method] = top_k(score_actweight_baseline(model, out.original_acts, token), count);
    } else if (method == "random_baseline") {
      out.sets[method] = random_neuron_set(
          model.cfg.layers, model.cfg.ffn, count,
          splitmix64(cfg.seed ^ fnv1a64(sample.id) ^ 0xbaseULL));
    }
  }
  return out;
}

// Patch heat values for a sample: mean original-image activation of the
// top-5 knowledge neurons ranked by activation-difference evidence.
inline std::vector<double> heatmap_values(const IdentifiedSample& ident, int top_n = 5) {
  const NeuronSet& set = ident.sets.at("ours");
  const Tensor& acts = ident.original_acts.values;
  const int p_count = acts.dim(1);
  std::vector<NeuronSet::Member> ranked = set.members;
  for (NeuronSet::Member& m : ranked) {
    double best = ident.diff.at(m.id.layer, 0, m.id.unit);
    for (int p = 1; p < p_count; ++p)
      best = std::max(best, ident.diff.at(m.id.layer, p, m.id.unit));
    m.evidence = best;
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const NeuronSet::Member& a, const NeuronSet::Member& b) {
                     if (a.evidence != b.evidence) return a.evidence > b.evidence;
                     return a.id < b.id;
                   });
  if (static_cast<int>(ranked.size()) > top_n) ranked.resize(static_cast<std::size_t>(top_n));
  std::vector<double> values(static_cast<std::size_t>(p_count), 0.0);
  if (ranked.empty()) return values;
  for (int p = 0; p < p_count; ++p) {
    double acc = 0.0;
    for (const NeuronSet::Member& m : ranked) acc += acts.at(m.id.layer, p, m.id.unit);
    values[static_cast<std::size_t>(p)] = acc / static_cast<double>(ranked.size());
  }
  return values;
}

}  // namespace mmkn
