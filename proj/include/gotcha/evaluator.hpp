#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gotcha/dialog_model.hpp"
#include "gotcha/feedback_sim.hpp"
#include "gotcha/gallery.hpp"
#include "gotcha/trainer.hpp"

namespace gotcha {

/// Percentile of `target` when every row is ranked by L2 distance to `query`.
/// Ties are pessimistic: rows at the target's distance count as ranked above it.
/// Returns 100 (N - rank) / (N - 1); needs N >= 2.
double ranking_percentile(const FeatureMatrix& features, std::span<const double> query,
                          std::size_t target);

struct EvalOptions {
  std::size_t rounds = 5;
  std::size_t k = 10;
  double margin = 2.0;
  DisclosureMode mode = DisclosureMode::kProgressive;
  DisclosureSchedule schedule;
  bool nested_masks = true;
  bool exclude_shown = true;
  std::size_t episodes = 1000;

  static EvalOptions from(const TrainConfig& cfg, std::size_t episodes);
};

struct EvalReport {
  DisclosureMode mode = DisclosureMode::kProgressive;
  std::size_t episodes = 0;
  std::size_t rounds = 0;
  std::size_t matched_episodes = 0;
  std::vector<double> percentile_by_round;  // matched dialogs count as 100 from the match on
  std::vector<double> loss_by_round;        // mean over dialogs still running that round
  std::vector<std::size_t> active_by_round;
  nlohmann::json config;

  nlohmann::json to_json() const;
};

/// Greedy held-out dialogs with the simulated witness.
EvalReport eval_rounds(const ModelParameters& params, const GalleryView& view,
                       const EvalOptions& options, std::uint64_t seed);

struct BaselineBounds {
  double upper = 0.0;
  double lower = 0.0;
  double expectation = 0.0;
};

/// Attribute-matching baseline for one target: rank every record by how many
/// attributes agree with the (optionally noise-flipped) target signature and
/// report the percentiles at the head and tail of the target's tie block.
BaselineBounds baseline_bounds(const GalleryView& view, std::size_t target, double flip_prob,
                               std::uint64_t seed);

struct BaselineSummary {
  std::size_t targets = 0;
  double flip_prob = 0.0;
  BaselineBounds mean;

  nlohmann::json to_json() const;
};

/// Averages baseline_bounds over `targets` uniformly drawn targets (all of them when 0).
BaselineSummary baseline_summary(const GalleryView& view, double flip_prob, std::uint64_t seed,
                                 std::size_t targets = 0);

struct ModeSummary {
  DisclosureMode mode = DisclosureMode::kProgressive;
  std::vector<double> mean_percentile, std_percentile;
  std::vector<double> mean_loss, std_loss;
  std::vector<EvalReport> runs;  // one per seed
};

struct ComparisonTable {
  std::vector<std::uint64_t> seeds;
  std::vector<ModeSummary> modes;

  const ModeSummary& at(DisclosureMode mode) const;
  nlohmann::json to_json() const;
  std::string to_text() const;
};

/// Trains and evaluates every disclosure mode under the same seeds. Needs at
/// least two seeds.
ComparisonTable compare_modes(const Gallery& gallery, const TrainConfig& base,
                              std::span<const std::uint64_t> seeds, std::size_t eval_episodes);

}  // namespace gotcha
