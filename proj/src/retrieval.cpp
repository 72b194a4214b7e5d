#include "cmret/retrieval.hpp"

#include <algorithm>
#include <numeric>

#include "cmret/error.hpp"
#include "cmret/objectives.hpp"

namespace cmret {

namespace {

void check_inputs(const Mat& sims, const std::vector<int>& query_ids,
                  const std::vector<int>& gallery_ids) {
  if (sims.rows != static_cast<int>(query_ids.size()) ||
      sims.cols != static_cast<int>(gallery_ids.size())) {
    fail(ErrorKind::Conformance, "retrieval: similarity matrix is " + std::to_string(sims.rows) +
                                     "x" + std::to_string(sims.cols) + " but ids are " +
                                     std::to_string(query_ids.size()) + "/" +
                                     std::to_string(gallery_ids.size()));
  }
  for (int q = 0; q < sims.rows; ++q) {
    const int id = query_ids[static_cast<size_t>(q)];
    bool found = false;
    for (int g = 0; g < sims.cols && !found; ++g) found = gallery_ids[static_cast<size_t>(g)] == id;
    if (!found) {
      fail(ErrorKind::Protocol,
           "retrieval: query identity " + std::to_string(id) + " has no gallery match");
    }
  }
}

std::vector<int> ranked_gallery(const Mat& sims, int q) {
  std::vector<int> order(static_cast<size_t>(sims.cols));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const double sa = sims(q, a), sb = sims(q, b);
    if (sa != sb) return sa > sb;
    return a < b;
  });
  return order;
}

}  // namespace

double rank_k(const Mat& sims, const std::vector<int>& query_ids,
              const std::vector<int>& gallery_ids, int k) {
  check_inputs(sims, query_ids, gallery_ids);
  if (k < 1) fail(ErrorKind::Contract, "rank_k: k must be positive");
  int hits = 0;
  for (int q = 0; q < sims.rows; ++q) {
    const std::vector<int> order = ranked_gallery(sims, q);
    const int limit = std::min(k, sims.cols);
    for (int r = 0; r < limit; ++r) {
      if (gallery_ids[static_cast<size_t>(order[static_cast<size_t>(r)])] ==
          query_ids[static_cast<size_t>(q)]) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / sims.rows;
}

double mean_ap(const Mat& sims, const std::vector<int>& query_ids,
               const std::vector<int>& gallery_ids) {
  check_inputs(sims, query_ids, gallery_ids);
  double total = 0.0;
  for (int q = 0; q < sims.rows; ++q) {
    const std::vector<int> order = ranked_gallery(sims, q);
    int correct = 0;
    double ap = 0.0;
    for (int r = 0; r < sims.cols; ++r) {
      if (gallery_ids[static_cast<size_t>(order[static_cast<size_t>(r)])] ==
          query_ids[static_cast<size_t>(q)]) {
        ++correct;
        ap += static_cast<double>(correct) / (r + 1);
      }
    }
    total += ap / correct;  // check_inputs guarantees correct >= 1
  }
  return total / sims.rows;
}

RetrievalResult evaluate_embeddings(const EmbeddingTable& queries, const EmbeddingTable& gallery,
                                    double lambda_s) {
  RetrievalResult res;
  res.lambda_s = lambda_s;
  res.s_global = matmul(queries.global, transpose(gallery.global));
  res.s_local = matmul(queries.local, transpose(gallery.local));
  res.fused = fuse_similarity(res.s_global, res.s_local, lambda_s);
  for (int k : {1, 5, 10}) {
    res.rank_k[k] = rank_k(res.fused, queries.ids, gallery.ids, k);
  }
  res.mean_ap = mean_ap(res.fused, queries.ids, gallery.ids);
  return res;
}

}  // namespace cmret
