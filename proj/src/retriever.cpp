#include "gotcha/retriever.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <thread>

#include "gotcha/error.hpp"
#include "gotcha/rng.hpp"

namespace gotcha {

namespace {

struct Entry {
  double sq;
  std::size_t index;
  bool operator<(const Entry& o) const { return sq < o.sq || (sq == o.sq && index < o.index); }
};

// Bounded max-heap top-k over rows [begin, end).
std::vector<Entry> partial_top(const FeatureMatrix& fm, std::span<const double> query,
                               std::size_t k, std::size_t begin, std::size_t end) {
  std::priority_queue<Entry> heap;
  for (std::size_t i = begin; i < end; ++i) {
    const Entry e{squared_distance(fm.row(i), query), i};
    if (heap.size() < k) {
      heap.push(e);
    } else if (e < heap.top()) {
      heap.pop();
      heap.push(e);
    }
  }
  std::vector<Entry> out;
  out.reserve(heap.size());
  while (!heap.empty()) {
    out.push_back(heap.top());
    heap.pop();
  }
  std::reverse(out.begin(), out.end());
  return out;
}

void check_query(const FeatureMatrix& fm, std::span<const double> query, std::size_t k) {
  if (query.size() != fm.cols) {
    throw ShapeError("query length " + std::to_string(query.size()) +
                     " does not match feature dimension " + std::to_string(fm.cols));
  }
  if (k == 0) throw ConfigError("k must be at least 1");
}

// Excluded rows are removed after scanning k + |excluded| entries, which is
// exact because at most |excluded| of them can be dropped.
ScanResult finish(std::vector<Entry> entries, std::span<const std::size_t> excluded,
                  std::size_t k) {
  ScanResult out;
  out.reserve(std::min(k, entries.size()));
  for (const auto& e : entries) {
    if (std::find(excluded.begin(), excluded.end(), e.index) != excluded.end()) continue;
    out.push_back({e.index, std::sqrt(e.sq)});
    if (out.size() == k) break;
  }
  if (out.empty()) throw EmptyResultError("every gallery record is excluded");
  return out;
}

}  // namespace

ScanResult scan_top_k(const FeatureMatrix& features, std::span<const double> query, std::size_t k,
                      std::span<const std::size_t> excluded) {
  check_query(features, query, k);
  return finish(partial_top(features, query, k + excluded.size(), 0, features.rows), excluded, k);
}

ScanResult scan_top_k_parallel(const FeatureMatrix& features, std::span<const double> query,
                               std::size_t k, std::span<const std::size_t> excluded,
                               std::size_t workers) {
  check_query(features, query, k);
  workers = std::max<std::size_t>(1, std::min(workers, features.rows));
  const std::size_t want = k + excluded.size();
  std::vector<std::vector<Entry>> parts(workers);
  std::vector<std::thread> threads;
  const std::size_t chunk = (features.rows + workers - 1) / std::max<std::size_t>(workers, 1);
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = std::min(features.rows, w * chunk);
    const std::size_t end = std::min(features.rows, begin + chunk);
    threads.emplace_back([&, w, begin, end] { parts[w] = partial_top(features, query, want, begin, end); });
  }
  for (auto& t : threads) t.join();

  std::vector<Entry> merged;
  for (const auto& p : parts) merged.insert(merged.end(), p.begin(), p.end());
  std::sort(merged.begin(), merged.end());
  if (merged.size() > want) merged.resize(want);
  return finish(std::move(merged), excluded, k);
}

std::vector<double> softmax_probabilities(const ScanResult& result) {
  if (result.empty()) throw EmptyResultError("softmax over an empty result");
  // Shift by the smallest distance; the ratio is unchanged.
  double lo = result.front().distance;
  for (const auto& n : result) lo = std::min(lo, n.distance);
  std::vector<double> pi(result.size());
  double total = 0.0;
  for (std::size_t j = 0; j < result.size(); ++j) {
    pi[j] = std::exp(-(result[j].distance - lo));
    total += pi[j];
  }
  for (auto& p : pi) p /= total;
  return pi;
}

std::size_t sample_candidate(const ScanResult& result, Rng& rng) {
  const auto pi = softmax_probabilities(result);
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t j = 0; j < pi.size(); ++j) {
    acc += pi[j];
    if (u < acc) return result[j].index;
  }
  return result.back().index;
}

std::size_t greedy_candidate(const ScanResult& result) {
  if (result.empty()) throw EmptyResultError("greedy choice over an empty result");
  return result.front().index;
}

std::size_t initial_candidate(std::size_t gallery_size, Rng& rng) {
  if (gallery_size == 0) throw EmptyResultError("cannot pick a candidate from an empty gallery");
  return static_cast<std::size_t>(rng.index(gallery_size));
}

std::size_t next_candidate(const FeatureMatrix& features, std::span<const double> query,
                           std::size_t k, std::span<const std::size_t> excluded,
                           CandidatePolicy policy, Rng& rng) {
  ScanResult result;
  try {
    result = scan_top_k(features, query, k, excluded);
  } catch (const EmptyResultError&) {
    result = scan_top_k(features, query, k);
  }
  return policy == CandidatePolicy::kGreedy ? greedy_candidate(result)
                                            : sample_candidate(result, rng);
}

}  // namespace gotcha
