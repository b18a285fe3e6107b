#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "gotcha/dialog_model.hpp"
#include "gotcha/error.hpp"
#include "gotcha/feedback_sim.hpp"
#include "gotcha/gallery.hpp"
#include "gotcha/retriever.hpp"
#include "gotcha/tensor_ops.hpp"

namespace gotcha {

struct TrainConfig {
  std::size_t rounds = 5;
  double margin = 2.0;
  double lr = 0.001;
  std::size_t k = 10;
  std::size_t batch = 32;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  DisclosureMode mode = DisclosureMode::kProgressive;
  DisclosureSchedule schedule;
  bool nested_masks = true;
  double train_fraction = 0.8;
  std::size_t hidden = 0;              // 0: same as the feature dimension
  std::size_t episodes_per_epoch = 0;  // 0: one episode per training record
  std::size_t eval_episodes = 500;     // held-out dialogs after each epoch; 0 disables
  std::size_t workers = 1;

  /// Throws ConfigError on any violated precondition.
  void validate() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Sum over rounds of max(0, |s_t - x+| - |s_t - x-_t| + margin).
/// When `grad` is non-null it receives dL/ds_t per round (zero where the hinge
/// is inactive).
double triplet_loss(std::span<const Vector> queries, std::span<const double> positive,
                    std::span<const Vector> negatives, double margin,
                    std::vector<Vector>* grad = nullptr);

struct RolloutOptions {
  std::size_t rounds = 5;
  std::size_t k = 10;
  double margin = 2.0;
  DisclosureMode mode = DisclosureMode::kProgressive;
  DisclosureSchedule schedule;
  bool nested_masks = true;
  CandidatePolicy policy = CandidatePolicy::kSample;
  bool exclude_shown = false;
  bool record_percentile = false;
};

struct RoundRecord {
  std::size_t candidate = 0;  // index within the view
  RelevanceVector relevance;
  bool matched = false;
  std::size_t negative = 0;
  double loss = 0.0;
  double percentile = 0.0;  // only when requested; 100 once matched
};

/// One simulated dialog. `inputs`, `negatives` and `queries` cover only the
/// rounds that produced a representation (a match ends the dialog first).
struct Episode {
  std::size_t target = 0;
  std::vector<RoundRecord> rounds;
  bool matched = false;
  std::optional<std::size_t> next_candidate;
  std::vector<RoundInput> inputs;
  Vector positive;
  std::vector<Vector> negatives;
  std::vector<Vector> queries;
  double loss = 0.0;

  std::vector<std::size_t> candidate_sequence() const;
};

/// Seed of the i-th dialog of a run; every per-dialog random stream is derived from it.
std::uint64_t episode_seed(std::uint64_t run_seed, std::uint64_t index);

/// Runs one dialog with the simulated witness. The target is drawn uniformly
/// from the view unless given.
Episode rollout_episode(const ModelParameters& params, const GalleryView& view,
                        const RolloutOptions& options, std::uint64_t seed,
                        std::optional<std::size_t> target = std::nullopt);

/// Replays the recorded dialog with `params` and returns its loss; candidate
/// choices stay fixed. Gradients, scaled by `scale`, accumulate into `grad`.
double episode_loss(const ModelParameters& params, const Episode& episode, DisclosureMode mode,
                    double margin, ModelParameters* grad = nullptr, double scale = 1.0);

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  TrainConfig config;
  ModelParameters params;
  AdamState adam;
  std::size_t epoch = 0;
  std::uint64_t step = 0;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss = 0.0;
  std::vector<double> percentile_by_round;

  nlohmann::json to_json() const;
};

/// Raised when the loss stops being finite; carries the state at the start of
/// the failing epoch.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& what, Checkpoint last_good)
      : NumericError(what), last_good_(std::move(last_good)) {}
  const Checkpoint& last_good() const { return last_good_; }

 private:
  Checkpoint last_good_;
};

ModelDims dims_for(const Gallery& gallery, const TrainConfig& cfg);

class Trainer {
 public:
  Trainer(const Gallery& gallery, TrainConfig cfg);
  Trainer(const Gallery& gallery, Checkpoint resume);

  /// One pass of episodes_per_epoch dialogs, then held-out evaluation.
  EpochMetrics run_epoch();

  /// Rolls out and applies one batch; returns its mean loss.
  double train_batch(std::uint64_t epoch, std::size_t first_episode, std::size_t count);

  const Checkpoint& checkpoint() const { return state_; }
  const GalleryView& train_view() const { return train_; }
  const GalleryView& test_view() const { return test_; }
  std::size_t episodes_per_epoch() const;

 private:
  RolloutOptions rollout_options() const;

  const Gallery* gallery_;
  GalleryView train_;
  GalleryView test_;
  Checkpoint state_;
  std::vector<ModelParameters> scratch_;
};

/// Trains cfg.epochs epochs, continuing from `resume` when given. A resumed
/// run keeps the checkpoint's config apart from the epoch total.
Checkpoint train(const Gallery& gallery, const TrainConfig& cfg,
                 const std::function<void(const EpochMetrics&)>& on_epoch = {},
                 const std::optional<Checkpoint>& resume = std::nullopt);

}  // namespace gotcha
