#include "cmret/mars.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cmret/error.hpp"

namespace cmret {

Mat discard_smallest(const Mat& attention, double discard_ratio) {
  if (attention.rows != attention.cols) {
    fail(ErrorKind::Conformance, "discard_smallest: map must be square");
  }
  if (discard_ratio < 0.0 || discard_ratio > 1.0) {
    fail(ErrorKind::Config, "discard_smallest: discard ratio must lie in [0, 1]");
  }
  const int s = attention.rows;
  for (double v : attention.v) {
    if (v < 0.0) fail(ErrorKind::Contract, "discard_smallest: negative attention entry");
  }
  const int drop = static_cast<int>(std::floor(discard_ratio * s));
  Mat out = attention;
  if (drop == 0) return out;
  std::vector<int> idx(static_cast<size_t>(s));
  for (int r = 0; r < s; ++r) {
    double* row = out.row(r);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [row](int a, int b) { return row[a] < row[b]; });
    for (int i = 0; i < drop; ++i) row[idx[static_cast<size_t>(i)]] = 0.0;
  }
  return out;
}

Mat prune_attention(const Mat& attention, double discard_ratio) {
  Mat out = discard_smallest(attention, discard_ratio);
  const int s = out.rows;
  for (int r = 0; r < s; ++r) {
    double* row = out.row(r);
    row[r] += 1.0;
    double sum = 0.0;
    for (int c = 0; c < s; ++c) {
      row[c] *= 0.5;
      sum += row[c];
    }
    for (int c = 0; c < s; ++c) row[c] /= sum;
  }
  return out;
}

AggregatedMap aggregate_layers(std::span<const Mat> pruned, int anchor_index,
                               std::vector<bool> valid) {
  if (pruned.empty()) fail(ErrorKind::Contract, "aggregate_layers: empty layer list");
  const int s = pruned[0].rows;
  for (const Mat& m : pruned) {
    if (m.rows != s || m.cols != s) {
      fail(ErrorKind::Conformance, "aggregate_layers: layer dimension mismatch (" +
                                       std::to_string(m.rows) + "x" + std::to_string(m.cols) +
                                       " vs " + std::to_string(s) + ")");
    }
  }
  if (static_cast<int>(valid.size()) != s) {
    fail(ErrorKind::Conformance, "aggregate_layers: valid mask length must equal S");
  }
  AggregatedMap out;
  out.R = pruned[0];
  for (size_t l = 1; l < pruned.size(); ++l) out.R = matmul(out.R, pruned[l]);
  out.anchor_index = anchor_index;
  out.valid = std::move(valid);
  return out;
}

std::vector<double> token_scores(const AggregatedMap& map) {
  const int s = map.R.rows;
  if (map.anchor_index < 0 || map.anchor_index >= s) {
    fail(ErrorKind::Contract, "token_scores: anchor index " + std::to_string(map.anchor_index) +
                                  " outside map of size " + std::to_string(s));
  }
  std::vector<double> scores(static_cast<size_t>(s), kneg_inf);
  for (int c = 0; c < s; ++c) {
    if (map.valid[static_cast<size_t>(c)]) scores[static_cast<size_t>(c)] = map.R(map.anchor_index, c);
  }
  return scores;
}

namespace {

int count_finite(std::span<const double> scores) {
  int n = 0;
  for (double v : scores) {
    if (std::isfinite(v)) ++n;
  }
  return n;
}

}  // namespace

std::vector<int> select_topk(std::span<const double> scores, int k) {
  const int finite = count_finite(scores);
  if (k < 1 || k > finite) {
    fail(ErrorKind::Budget, "select_topk: budget " + std::to_string(k) + " exceeds " +
                                std::to_string(finite) + " selectable tokens");
  }
  std::vector<int> idx;
  idx.reserve(scores.size());
  for (int i = 0; i < static_cast<int>(scores.size()); ++i) {
    if (std::isfinite(scores[static_cast<size_t>(i)])) idx.push_back(i);
  }
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    const double sa = scores[static_cast<size_t>(a)], sb = scores[static_cast<size_t>(b)];
    if (sa != sb) return sa > sb;
    return a < b;
  });
  idx.resize(static_cast<size_t>(k));
  return idx;
}

std::vector<int> select_topk_diverse(std::span<const double> scores, int k, const Mat& tokens,
                                     double beta) {
  if (beta == 0.0) return select_topk(scores, k);
  const int finite = count_finite(scores);
  if (k < 1 || k > finite) {
    fail(ErrorKind::Budget, "select_topk_diverse: budget " + std::to_string(k) + " exceeds " +
                                std::to_string(finite) + " selectable tokens");
  }
  const int dim = tokens.cols;
  auto cosine = [&](int a, int b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int d = 0; d < dim; ++d) {
      dot += tokens(a, d) * tokens(b, d);
      na += tokens(a, d) * tokens(a, d);
      nb += tokens(b, d) * tokens(b, d);
    }
    const double denom = std::sqrt(na) * std::sqrt(nb);
    return denom > 0.0 ? dot / denom : 0.0;
  };

  std::vector<int> chosen;
  std::vector<bool> used(scores.size(), false);
  while (static_cast<int>(chosen.size()) < k) {
    int best = -1;
    double best_score = kneg_inf;
    for (int i = 0; i < static_cast<int>(scores.size()); ++i) {
      if (used[static_cast<size_t>(i)] || !std::isfinite(scores[static_cast<size_t>(i)])) continue;
      double penalty = 0.0;
      for (int c : chosen) penalty = std::max(penalty, cosine(i, c));
      const double adjusted = scores[static_cast<size_t>(i)] - beta * penalty;
      if (adjusted > best_score) {
        best_score = adjusted;
        best = i;
      }
    }
    chosen.push_back(best);
    used[static_cast<size_t>(best)] = true;
  }
  return chosen;
}

SelectionStrategy strategy_from_name(const std::string& name) {
  if (name == "A" || name == "a") return SelectionStrategy::MinMean;
  if (name == "B" || name == "b") return SelectionStrategy::MaxMean;
  if (name == "C" || name == "c") return SelectionStrategy::MinStd;
  if (name == "D" || name == "d") return SelectionStrategy::MaxStd;
  fail(ErrorKind::Config, "unknown selection strategy '" + name + "' (expected A, B, C or D)");
}

std::vector<double> baseline_strategy_scores(const AttentionStack& attn,
                                             SelectionStrategy strategy,
                                             const std::vector<bool>& present,
                                             const std::vector<bool>& valid) {
  if (attn.layers.empty()) fail(ErrorKind::Contract, "baseline_strategy_scores: empty stack");
  const Mat& last = attn.layers.back();
  const int s = last.rows;
  if (static_cast<int>(present.size()) != s || static_cast<int>(valid.size()) != s) {
    fail(ErrorKind::Conformance, "baseline_strategy_scores: mask length must equal S");
  }
  int row_count = 0;
  for (int r = 0; r < s; ++r) row_count += present[static_cast<size_t>(r)] ? 1 : 0;
  if (row_count == 0) fail(ErrorKind::Contract, "baseline_strategy_scores: no present rows");

  std::vector<double> scores(static_cast<size_t>(s), kneg_inf);
  for (int c = 0; c < s; ++c) {
    if (!valid[static_cast<size_t>(c)]) continue;
    double mean = 0.0;
    for (int r = 0; r < s; ++r) {
      if (present[static_cast<size_t>(r)]) mean += last(r, c);
    }
    mean /= row_count;
    double var = 0.0;
    for (int r = 0; r < s; ++r) {
      if (present[static_cast<size_t>(r)]) var += (last(r, c) - mean) * (last(r, c) - mean);
    }
    var /= row_count;
    const double sd = std::sqrt(var);
    switch (strategy) {
      case SelectionStrategy::MinMean: scores[static_cast<size_t>(c)] = -mean; break;
      case SelectionStrategy::MaxMean: scores[static_cast<size_t>(c)] = mean; break;
      case SelectionStrategy::MinStd: scores[static_cast<size_t>(c)] = -sd; break;
      case SelectionStrategy::MaxStd: scores[static_cast<size_t>(c)] = sd; break;
    }
  }
  return scores;
}

double attention_entropy(const Mat& attention, const std::vector<bool>& valid) {
  const int s = attention.rows;
  if (attention.cols != s) {
    fail(ErrorKind::Conformance, "attention_entropy: map must be square");
  }
  if (static_cast<int>(valid.size()) != s) {
    fail(ErrorKind::Conformance, "attention_entropy: mask length must equal S");
  }
  int n_valid = 0;
  for (int i = 0; i < s; ++i) n_valid += valid[static_cast<size_t>(i)] ? 1 : 0;
  if (n_valid == 0) fail(ErrorKind::Contract, "attention_entropy: empty valid set");

  double total = 0.0;
  int rows_used = 0;
  for (int r = 0; r < s; ++r) {
    if (!valid[static_cast<size_t>(r)]) continue;
    double mass = 0.0;
    for (int c = 0; c < s; ++c) {
      if (valid[static_cast<size_t>(c)]) mass += attention(r, c);
    }
    if (mass <= 0.0) continue;  // row carries no mass on valid positions
    double h = 0.0;
    for (int c = 0; c < s; ++c) {
      if (!valid[static_cast<size_t>(c)]) continue;
      const double p = attention(r, c) / mass;
      if (p > 0.0) h -= p * std::log(p);
    }
    total += h;
    ++rows_used;
  }
  if (rows_used == 0) fail(ErrorKind::Contract, "attention_entropy: no valid row carries mass");
  return total / rows_used;
}

std::vector<int> layer_group_indices(int layer_count, LayerGroup group) {
  if (layer_count < 1) fail(ErrorKind::Config, "layer_group_indices: need at least one layer");
  const int third = (layer_count + 2) / 3;  // ceil(L/3)
  int begin = 0, end = 0;
  switch (group) {
    case LayerGroup::Early: begin = 0; end = std::min(third, layer_count); break;
    case LayerGroup::Middle: begin = std::min(third, layer_count); end = std::min(2 * third, layer_count); break;
    case LayerGroup::Late: begin = std::min(2 * third, layer_count); end = layer_count; break;
  }
  std::vector<int> out;
  for (int i = begin; i < end; ++i) out.push_back(i);
  return out;
}

std::vector<int> parse_layer_set(const std::string& spec, int layer_count) {
  std::vector<int> out;
  auto append_group = [&](LayerGroup g) {
    for (int i : layer_group_indices(layer_count, g)) out.push_back(i);
  };
  if (spec.rfind("single:", 0) == 0) {
    const int idx = std::stoi(spec.substr(7));
    if (idx < 0 || idx >= layer_count) {
      fail(ErrorKind::Config, "layer index " + std::to_string(idx) + " outside encoder depth " +
                                  std::to_string(layer_count));
    }
    return {idx};
  }
  if (!spec.empty() && spec.find_first_of("0123456789") == 0) {
    size_t pos = 0;
    while (pos < spec.size()) {
      size_t comma = spec.find(',', pos);
      if (comma == std::string::npos) comma = spec.size();
      const int idx = std::stoi(spec.substr(pos, comma - pos));
      if (idx < 0 || idx >= layer_count) {
        fail(ErrorKind::Config, "layer index " + std::to_string(idx) + " outside encoder depth " +
                                    std::to_string(layer_count));
      }
      out.push_back(idx);
      pos = comma + 1;
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    if (out.empty()) fail(ErrorKind::Config, "layer set must not be empty");
    return out;
  }
  for (char ch : spec) {
    switch (ch) {
      case 'e': case 'E': append_group(LayerGroup::Early); break;
      case 'm': case 'M': append_group(LayerGroup::Middle); break;
      case 'l': case 'L': append_group(LayerGroup::Late); break;
      default: fail(ErrorKind::Config, std::string("unknown layer-set spec '") + spec + "'");
    }
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  if (out.empty()) fail(ErrorKind::Config, "layer set must not be empty");
  return out;
}

}  // namespace cmret
