#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "mmkn/tensor.hpp"

namespace mmkn {

// Clipped n-gram precision BLEU with brevity penalty. The geometric mean
// runs over n = 1..min(max_n, |candidate|); a zero precision is replaced
// by 1e-9 so short or disjoint candidates score near zero instead of
// exactly zero. Reference length uses the closest-length rule.
inline double bleu(const std::vector<int>& candidate, const std::vector<std::vector<int>>& references,
                   int max_n = 4) {
  require(max_n >= 1, "bleu order must be >= 1");
  require(!references.empty(), "bleu requires at least one reference");
  if (candidate.empty()) return 0.0;

  const int cand_len = static_cast<int>(candidate.size());
  int ref_len = static_cast<int>(references[0].size());
  for (const auto& r : references) {
    const int len = static_cast<int>(r.size());
    const int best_diff = std::abs(ref_len - cand_len);
    const int diff = std::abs(len - cand_len);
    if (diff < best_diff || (diff == best_diff && len < ref_len)) ref_len = len;
  }

  constexpr double epsilon = 1e-9;
  const int orders = std::min(max_n, cand_len);
  double log_sum = 0.0;
  for (int n = 1; n <= orders; ++n) {
    std::map<std::vector<int>, int> cand_counts;
    for (int i = 0; i + n <= cand_len; ++i)
      ++cand_counts[std::vector<int>(candidate.begin() + i, candidate.begin() + i + n)];
    std::map<std::vector<int>, int> ref_max;
    for (const auto& r : references) {
      std::map<std::vector<int>, int> counts;
      for (int i = 0; i + n <= static_cast<int>(r.size()); ++i)
        ++counts[std::vector<int>(r.begin() + i, r.begin() + i + n)];
      for (const auto& [gram, cnt] : counts) ref_max[gram] = std::max(ref_max[gram], cnt);
    }
    long matched = 0, total = 0;
    for (const auto& [gram, cnt] : cand_counts) {
      total += cnt;
      auto it = ref_max.find(gram);
      if (it != ref_max.end()) matched += std::min(cnt, it->second);
    }
    double p = total > 0 ? static_cast<double>(matched) / static_cast<double>(total) : 0.0;
    if (p == 0.0) p = epsilon;
    log_sum += std::log(p);
  }
  double score = std::exp(log_sum / orders);
  if (cand_len < ref_len)
    score *= std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len));
  return std::min(score, 1.0);
}

enum class RougeVariant { N1, N2, L };

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

namespace detail {

inline Prf make_prf(double matched, double cand_total, double ref_total) {
  Prf out;
  out.precision = cand_total > 0 ? matched / cand_total : 0.0;
  out.recall = ref_total > 0 ? matched / ref_total : 0.0;
  out.f1 = (out.precision + out.recall) > 0
               ? 2.0 * out.precision * out.recall / (out.precision + out.recall)
               : 0.0;
  return out;
}

inline long lcs_length(const std::vector<int>& a, const std::vector<int>& b) {
  const std::size_t n = b.size();
  std::vector<long> prev(n + 1, 0), cur(n + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= n; ++j)
      cur[j] = (a[i - 1] == b[j - 1]) ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[n];
}

}  // namespace detail

inline Prf rouge(const std::vector<int>& candidate, const std::vector<int>& reference,
                 RougeVariant variant) {
  if (variant == RougeVariant::L) {
    const long lcs = detail::lcs_length(candidate, reference);
    return detail::make_prf(static_cast<double>(lcs), static_cast<double>(candidate.size()),
                            static_cast<double>(reference.size()));
  }
  const int n = variant == RougeVariant::N1 ? 1 : 2;
  std::map<std::vector<int>, int> cand_counts, ref_counts;
  long cand_total = 0, ref_total = 0;
  for (int i = 0; i + n <= static_cast<int>(candidate.size()); ++i) {
    ++cand_counts[std::vector<int>(candidate.begin() + i, candidate.begin() + i + n)];
    ++cand_total;
  }
  for (int i = 0; i + n <= static_cast<int>(reference.size()); ++i) {
    ++ref_counts[std::vector<int>(reference.begin() + i, reference.begin() + i + n)];
    ++ref_total;
  }
  long matched = 0;
  for (const auto& [gram, cnt] : cand_counts) {
    auto it = ref_counts.find(gram);
    if (it != ref_counts.end()) matched += std::min(cnt, it->second);
  }
  return detail::make_prf(static_cast<double>(matched), static_cast<double>(cand_total),
                          static_cast<double>(ref_total));
}

// Greedy embedding-similarity F1 over token embedding rows. Stands in
// for a learned semantic match: precision is the mean over candidate
// tokens of the best cosine to any reference token, recall symmetric.
// Negative cosines are truncated to zero to keep scores in [0, 1].
inline double embed_match_f1(const std::vector<int>& candidate, const std::vector<int>& reference,
                             const Tensor& embeddings) {
  require_shape(embeddings.rank() == 2, "embedding matrix must be 2-d");
  if (candidate.empty() || reference.empty()) return 0.0;
  const int dim = embeddings.dim(1);
  auto cosine = [&](int a, int b) {
    require(a >= 0 && a < embeddings.dim(0) && b >= 0 && b < embeddings.dim(0),
            "token outside embedding table");
    double dot = 0.0, na = 0.0, nb = 0.0;
    const double* ra = embeddings.row(a);
    const double* rb = embeddings.row(b);
    for (int j = 0; j < dim; ++j) {
      dot += ra[j] * rb[j];
      na += ra[j] * ra[j];
      nb += rb[j] * rb[j];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::max(0.0, dot / std::sqrt(na * nb));
  };
  double precision = 0.0;
  for (int c : candidate) {
    double best = 0.0;
    for (int r : reference) best = std::max(best, cosine(c, r));
    precision += best;
  }
  precision /= static_cast<double>(candidate.size());
  double recall = 0.0;
  for (int r : reference) {
    double best = 0.0;
    for (int c : candidate) best = std::max(best, cosine(r, c));
    recall += best;
  }
  recall /= static_cast<double>(reference.size());
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

struct MetricReport {
  double bleu = 0.0;
  Prf rouge1;
  Prf rougeL;
  double embed_f1 = 0.0;
};

inline MetricReport caption_metrics(const std::vector<int>& candidate,
                                    const std::vector<int>& reference, const Tensor& embeddings) {
  MetricReport r;
  r.bleu = bleu(candidate, {reference});
  r.rouge1 = rouge(candidate, reference, RougeVariant::N1);
  r.rougeL = rouge(candidate, reference, RougeVariant::L);
  r.embed_f1 = embed_match_f1(candidate, reference, embeddings);
  return r;
}

}  // namespace mmkn
