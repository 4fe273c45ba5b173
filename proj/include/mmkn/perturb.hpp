#pragma once

#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mmkn/identify.hpp"
#include "mmkn/model.hpp"
#include "mmkn/tokenizer.hpp"

namespace mmkn {

enum class NoiseScaleMode { Absolute, RelativeStd };

// Noise protocol: at each level, several seeded standard-normal vectors
// of length P are scaled and added to every targeted neuron's activation
// across all image token positions. In relative mode the level is
// multiplied by the captioned image's activation standard deviation.
struct NoiseSpec {
  std::vector<double> levels = {2.0, 4.0, 6.0};
  int samples_per_level = 10;
  std::uint64_t base_seed = 0;
  NoiseScaleMode mode = NoiseScaleMode::RelativeStd;

  static NoiseSpec paper_absolute() {
    NoiseSpec s;
    s.levels = {40.0, 80.0, 120.0};
    s.mode = NoiseScaleMode::Absolute;
    return s;
  }

  void validate() const {
    require(samples_per_level >= 1, "noise spec needs at least one sample per level");
    for (double lv : levels) require(lv >= 0.0, "noise levels must be non-negative");
  }
};

// Deterministic per-cell seed; any single caption can be replayed alone.
inline std::uint64_t cell_seed(std::uint64_t base_seed, int level_index, int sample_index,
                               int group_index) {
  const std::uint64_t packed = (static_cast<std::uint64_t>(static_cast<std::uint32_t>(level_index)) << 40) ^
                               (static_cast<std::uint64_t>(static_cast<std::uint32_t>(sample_index)) << 20) ^
                               static_cast<std::uint64_t>(static_cast<std::uint32_t>(group_index));
  return base_seed ^ splitmix64(packed);
}

// v = level * z with z drawn coordinate-wise from a standard normal.
inline std::vector<double> sample_noise(double level, int p_count, std::uint64_t seed) {
  require(p_count >= 1, "noise vector needs at least one coordinate");
  Pcg32 rng(splitmix64(seed ^ 0x6e6f697365ULL));
  std::vector<double> v(static_cast<std::size_t>(p_count));
  for (double& x : v) x = level * rng.next_normal();
  return v;
}

inline Intervention make_intervention(const NeuronSet& targets, const std::vector<double>& shift) {
  Intervention iv;
  iv.targets.reserve(targets.members.size());
  for (const NeuronSet::Member& m : targets.members) iv.targets.push_back({m.id.layer, m.id.unit});
  iv.shift = shift;
  return iv;
}

// Caption (prompt + continuation) under additive activation noise.
inline std::vector<int> perturbed_generate(const MultimodalLM& model, const RasterImage& img,
                                           const std::vector<int>& prompt, const NeuronSet& targets,
                                           const std::vector<double>& noise,
                                           const GenConfig& gen = {}) {
  Intervention iv = make_intervention(targets, noise);
  std::vector<int> caption = prompt;
  std::vector<int> cont = model.generate(img, prompt, gen, iv.empty() ? nullptr : &iv);
  caption.insert(caption.end(), cont.begin(), cont.end());
  return caption;
}

// 1 iff the knowledge phrase occurs in the caption, comparing tokens
// case-folded and up to a trailing plural 's'; multi-word knowledge must
// appear as a contiguous token run.
inline int knowledge_presence(const std::vector<std::string>& caption_tokens,
                              const std::string& knowledge) {
  std::vector<std::string> kw;
  {
    std::istringstream ss(knowledge);
    std::string tok;
    while (ss >> tok) kw.push_back(tok);
  }
  require(!kw.empty(), "knowledge phrase is empty");
  if (caption_tokens.size() < kw.size()) return 0;
  for (std::size_t start = 0; start + kw.size() <= caption_tokens.size(); ++start) {
    bool all = true;
    for (std::size_t j = 0; j < kw.size() && all; ++j)
      all = tokens_match(caption_tokens[start + j], kw[j]);
    if (all) return 1;
  }
  return 0;
}

inline int knowledge_presence(const std::vector<int>& caption_ids, const Vocabulary& vocab,
                              const std::string& knowledge) {
  std::vector<std::string> words;
  words.reserve(caption_ids.size());
  for (int id : caption_ids) words.push_back(vocab.word(id));
  return knowledge_presence(words, knowledge);
}

struct PerturbResult {
  std::string knowledge;  // whose neuron set was perturbed
  std::string image_id;
  int group = 0;  // neuron-set index (one per identification image)
  std::string method;
  double level = 0.0;
  std::uint64_t seed = 0;
  std::string caption;
  int presence = 0;  // probe-knowledge presence for this row
  bool retention_row = false;  // image does not contain the knowledge

  void check() const { require(presence == 0 || presence == 1, "presence must be 0 or 1"); }
};

struct ScoreRow {
  std::string knowledge;
  double level = 0.0;
  std::string method;
  double s_se = 0.0;
  double s_re = 0.0;
  double s_mean = 0.0;
  bool valid = false;  // false marks a gap (missing suppression or retention cells)
};

struct ScoreTable {
  std::vector<ScoreRow> rows;      // per (knowledge, level, method)
  std::vector<ScoreRow> averages;  // per method, mean over valid rows
};

// Aggregates presence flags into suppression/retention scores. Integer
// counting keeps the result independent of row order.
inline ScoreTable suppression_scores(const std::vector<PerturbResult>& results) {
  struct Cell {
    long k_present = 0, k_total = 0;
    long other_present = 0, other_total = 0;
  };
  std::map<std::tuple<std::string, double, std::string>, Cell> cells;
  for (const PerturbResult& r : results) {
    r.check();
    Cell& c = cells[{r.knowledge, r.level, r.method}];
    if (r.retention_row) {
      c.other_present += r.presence;
      ++c.other_total;
    } else {
      c.k_present += r.presence;
      ++c.k_total;
    }
  }

  ScoreTable table;
  struct Acc {
    double se = 0.0, re = 0.0, mean = 0.0;
    long n = 0;
  };
  std::map<std::string, Acc> per_method;
  for (const auto& [key, c] : cells) {
    ScoreRow row;
    row.knowledge = std::get<0>(key);
    row.level = std::get<1>(key);
    row.method = std::get<2>(key);
    row.valid = c.k_total > 0 && c.other_total > 0;
    if (row.valid) {
      const double s_k = static_cast<double>(c.k_present) / static_cast<double>(c.k_total);
      const double s_kbar =
          static_cast<double>(c.other_present) / static_cast<double>(c.other_total);
      row.s_se = 1.0 - s_k;
      row.s_re = s_kbar;
      row.s_mean = (row.s_se + row.s_re) / 2.0;
      Acc& acc = per_method[row.method];
      acc.se += row.s_se;
      acc.re += row.s_re;
      acc.mean += row.s_mean;
      ++acc.n;
    }
    table.rows.push_back(row);
  }
  for (const auto& [method, acc] : per_method) {
    ScoreRow ave;
    ave.knowledge = "Ave.";
    ave.level = -1.0;
    ave.method = method;
    ave.valid = acc.n > 0;
    if (ave.valid) {
      ave.s_se = acc.se / acc.n;
      ave.s_re = acc.re / acc.n;
      ave.s_mean = acc.mean / acc.n;
    }
    table.averages.push_back(ave);
  }
  return table;
}

}  // namespace mmkn
