#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "gotcha/gallery.hpp"

namespace gotcha {

class Rng;

struct Neighbor {
  std::size_t index;
  double distance;

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

/// Ascending by distance, ties by ascending index.
using ScanResult = std::vector<Neighbor>;

/// Squared L2 distance between a stored float row and a double query,
/// accumulated in double in index order.
inline double squared_distance(std::span<const float> row, std::span<const double> query) {
  double acc = 0.0;
  for (std::size_t j = 0; j < row.size(); ++j) {
    const double diff = static_cast<double>(row[j]) - query[j];
    acc += diff * diff;
  }
  return acc;
}

/// Exact top-k by Euclidean distance over rows not listed in `excluded`.
/// Throws EmptyResultError when every row is excluded.
ScanResult scan_top_k(const FeatureMatrix& features, std::span<const double> query, std::size_t k,
                      std::span<const std::size_t> excluded = {});

/// Same result as scan_top_k, bit for bit; rows are split into `workers`
/// contiguous partitions whose partial results merge in partition order.
ScanResult scan_top_k_parallel(const FeatureMatrix& features, std::span<const double> query,
                               std::size_t k, std::span<const std::size_t> excluded,
                               std::size_t workers);

/// pi(j) = exp(-d_j) / sum_k exp(-d_k) over the result entries.
std::vector<double> softmax_probabilities(const ScanResult& result);

/// Draws a record index with probability pi.
std::size_t sample_candidate(const ScanResult& result, Rng& rng);

/// The most probable entry: the nearest one, lowest index on ties.
std::size_t greedy_candidate(const ScanResult& result);

std::size_t initial_candidate(std::size_t gallery_size, Rng& rng);

enum class CandidatePolicy { kSample, kGreedy };

/// Picks the next candidate. If exclusions leave nothing eligible the scan is
/// repeated without them.
std::size_t next_candidate(const FeatureMatrix& features, std::span<const double> query,
                           std::size_t k, std::span<const std::size_t> excluded,
                           CandidatePolicy policy, Rng& rng);

}  // namespace gotcha
