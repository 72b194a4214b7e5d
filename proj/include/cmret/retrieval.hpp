#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cmret/mat.hpp"

namespace cmret {

// Metrics for one evaluation pass. Queries are captions, gallery items are
// images; sims matrices are queries x gallery.
struct RetrievalResult {
  Mat fused;
  Mat s_global;
  Mat s_local;
  std::map<int, double> rank_k;  // k in {1, 5, 10}
  double mean_ap{0.0};
  std::string protocol;  // e.g. "alpha->beta"
  double lambda_s{0.5};
  std::string checkpoint_id;
  std::string config_hash;
  std::uint64_t seed{0};
};

// Fraction of queries whose top-k gallery items (descending similarity, ties
// by ascending gallery index) contain at least one matching identity.
double rank_k(const Mat& sims, const std::vector<int>& query_ids,
              const std::vector<int>& gallery_ids, int k);

// Interpolation-free mean average precision.
double mean_ap(const Mat& sims, const std::vector<int>& query_ids,
               const std::vector<int>& gallery_ids);

// Global/local embedding tables for one side of the retrieval problem.
struct EmbeddingTable {
  Mat global;  // [items, D], unit rows
  Mat local;   // [items, D], unit rows
  std::vector<int> ids;
};

// Fuses global and local similarities at lambda_s and computes the metric
// block. Deterministic; performs no parameter updates by construction.
RetrievalResult evaluate_embeddings(const EmbeddingTable& queries, const EmbeddingTable& gallery,
                                    double lambda_s);

}  // namespace cmret
