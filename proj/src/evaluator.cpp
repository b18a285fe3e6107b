#include "gotcha/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "gotcha/error.hpp"
#include "gotcha/retriever.hpp"
#include "gotcha/rng.hpp"

namespace gotcha {

namespace {

double percentile_of_rank(std::size_t rank, std::size_t n) {
  return 100.0 * static_cast<double>(n - rank) / static_cast<double>(n - 1);
}

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// Sample standard deviation (n - 1 denominator).
double stddev_of(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

double ranking_percentile(const FeatureMatrix& features, std::span<const double> query,
                          std::size_t target) {
  const std::size_t n = features.rows;
  if (n < 2) throw Error("ranking percentile is undefined for fewer than two records");
  if (target >= n) throw std::out_of_range("target index outside the gallery");
  if (query.size() != features.cols) throw ShapeError("query length does not match features");
  const double target_sq = squared_distance(features.row(target), query);
  std::size_t ahead = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (i != target && squared_distance(features.row(i), query) <= target_sq) ++ahead;
  }
  return percentile_of_rank(ahead + 1, n);
}

EvalOptions EvalOptions::from(const TrainConfig& cfg, std::size_t episodes) {
  EvalOptions o;
  o.rounds = cfg.rounds;
  o.k = cfg.k;
  o.margin = cfg.margin;
  o.mode = cfg.mode;
  o.schedule = cfg.schedule;
  o.nested_masks = cfg.nested_masks;
  o.episodes = episodes;
  return o;
}

nlohmann::json EvalReport::to_json() const {
  return {{"mode", std::string(to_string(mode))},
          {"episodes", episodes},
          {"rounds", rounds},
          {"matched_episodes", matched_episodes},
          {"percentile_by_round", percentile_by_round},
          {"loss_by_round", loss_by_round},
          {"active_by_round", active_by_round},
          {"config", config}};
}

EvalReport eval_rounds(const ModelParameters& params, const GalleryView& view,
                       const EvalOptions& options, std::uint64_t seed) {
  if (view.size() < 2) throw ConfigError("evaluation needs at least two records");
  RolloutOptions ro;
  ro.rounds = options.rounds;
  ro.k = options.k;
  ro.margin = options.margin;
  ro.mode = options.mode;
  ro.schedule = options.schedule;
  ro.nested_masks = options.nested_masks;
  ro.policy = CandidatePolicy::kGreedy;
  ro.exclude_shown = options.exclude_shown;
  ro.record_percentile = true;

  EvalReport report;
  report.mode = options.mode;
  report.episodes = options.episodes;
  report.rounds = options.rounds;
  report.percentile_by_round.assign(options.rounds, 0.0);
  report.loss_by_round.assign(options.rounds, 0.0);
  report.active_by_round.assign(options.rounds, 0);
  report.config = {{"k", options.k},
                   {"margin", options.margin},
                   {"schedule", options.schedule.proportions()},
                   {"nested_masks", options.nested_masks},
                   {"exclude_shown", options.exclude_shown},
                   {"seed", seed},
                   {"gallery_size", view.size()}};

  for (std::size_t i = 0; i < options.episodes; ++i) {
    const auto ep = rollout_episode(params, view, ro, episode_seed(seed, i));
    if (ep.matched) ++report.matched_episodes;
    for (std::size_t r = 0; r < options.rounds; ++r) {
      if (r < ep.rounds.size()) {
        const auto& rec = ep.rounds[r];
        report.percentile_by_round[r] += rec.percentile;
        if (!rec.matched) {
          report.loss_by_round[r] += rec.loss;
          ++report.active_by_round[r];
        }
      } else {
        report.percentile_by_round[r] += 100.0;
      }
    }
  }
  for (std::size_t r = 0; r < options.rounds; ++r) {
    if (options.episodes) report.percentile_by_round[r] /= static_cast<double>(options.episodes);
    if (report.active_by_round[r]) {
      report.loss_by_round[r] /= static_cast<double>(report.active_by_round[r]);
    }
  }
  return report;
}

BaselineBounds baseline_bounds(const GalleryView& view, std::size_t target, double flip_prob,
                               std::uint64_t seed) {
  const std::size_t n = view.size();
  if (n < 2) throw Error("baseline percentile is undefined for fewer than two records");
  if (target >= n) throw std::out_of_range("target index outside the gallery");
  if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw ConfigError("flip probability must lie in [0, 1]");

  // Classifier error is modelled as independent per-attribute flips.
  Rng rng(derive_seed(seed, "flip"));
  std::vector<std::int8_t> signature(view.attributes(target).begin(), view.attributes(target).end());
  if (flip_prob > 0.0) {
    for (auto& a : signature) {
      if (rng.bernoulli(flip_prob)) a = static_cast<std::int8_t>(-a);
    }
  }

  auto score = [&](std::size_t i) {
    const auto attrs = view.attributes(i);
    std::size_t matches = 0;
    for (std::size_t j = 0; j < attrs.size(); ++j) matches += attrs[j] == signature[j];
    return matches;
  };
  const std::size_t own = score(target);
  std::size_t better = 0, tied = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = score(i);
    if (s > own) ++better;
    else if (s == own) ++tied;
  }
  BaselineBounds b;
  b.upper = percentile_of_rank(better + 1, n);
  b.lower = percentile_of_rank(better + tied, n);
  b.expectation = (b.upper + b.lower) / 2.0;
  return b;
}

nlohmann::json BaselineSummary::to_json() const {
  return {{"targets", targets},
          {"flip_prob", flip_prob},
          {"upper", mean.upper},
          {"lower", mean.lower},
          {"expectation", mean.expectation}};
}

BaselineSummary baseline_summary(const GalleryView& view, double flip_prob, std::uint64_t seed,
                                 std::size_t targets) {
  BaselineSummary s;
  s.flip_prob = flip_prob;
  s.targets = targets ? targets : view.size();
  Rng pick(derive_seed(seed, "targets"));
  for (std::size_t i = 0; i < s.targets; ++i) {
    const std::size_t target = targets ? static_cast<std::size_t>(pick.index(view.size())) : i;
    const auto b = baseline_bounds(view, target, flip_prob, derive_seed(seed, i));
    s.mean.upper += b.upper;
    s.mean.lower += b.lower;
    s.mean.expectation += b.expectation;
  }
  if (s.targets) {
    const double inv = 1.0 / static_cast<double>(s.targets);
    s.mean.upper *= inv;
    s.mean.lower *= inv;
    s.mean.expectation *= inv;
  }
  return s;
}

const ModeSummary& ComparisonTable::at(DisclosureMode mode) const {
  for (const auto& m : modes) {
    if (m.mode == mode) return m;
  }
  throw NotFoundError("mode missing from comparison");
}

nlohmann::json ComparisonTable::to_json() const {
  nlohmann::json out;
  out["seeds"] = seeds;
  auto& arr = out["modes"] = nlohmann::json::array();
  for (const auto& m : modes) {
    arr.push_back({{"mode", std::string(to_string(m.mode))},
                   {"mean_percentile", m.mean_percentile},
                   {"std_percentile", m.std_percentile},
                   {"mean_loss", m.mean_loss},
                   {"std_loss", m.std_loss}});
  }
  return out;
}

std::string ComparisonTable::to_text() const {
  std::ostringstream out;
  char buf[64];
  out << "percentile by round (mean ± std over " << seeds.size() << " seeds)\n";
  for (const auto& m : modes) {
    std::snprintf(buf, sizeof(buf), "%-14s", std::string(to_string(m.mode)).c_str());
    out << buf;
    for (std::size_t r = 0; r < m.mean_percentile.size(); ++r) {
      std::snprintf(buf, sizeof(buf), "  %6.2f±%-5.2f", m.mean_percentile[r], m.std_percentile[r]);
      out << buf;
    }
    out << '\n';
  }
  out << "loss by round\n";
  for (const auto& m : modes) {
    std::snprintf(buf, sizeof(buf), "%-14s", std::string(to_string(m.mode)).c_str());
    out << buf;
    for (std::size_t r = 0; r < m.mean_loss.size(); ++r) {
      std::snprintf(buf, sizeof(buf), "  %6.4f±%-6.4f", m.mean_loss[r], m.std_loss[r]);
      out << buf;
    }
    out << '\n';
  }
  return out.str();
}

ComparisonTable compare_modes(const Gallery& gallery, const TrainConfig& base,
                              std::span<const std::uint64_t> seeds, std::size_t eval_episodes) {
  if (seeds.size() < 2) throw ConfigError("mode comparison needs at least two seeds");
  ComparisonTable table;
  table.seeds.assign(seeds.begin(), seeds.end());
  for (auto mode : {DisclosureMode::kProgressive, DisclosureMode::kFull, DisclosureMode::kFullNoAttr}) {
    ModeSummary summary;
    summary.mode = mode;
    for (auto seed : seeds) {
      TrainConfig cfg = base;
      cfg.mode = mode;
      cfg.seed = seed;
      cfg.eval_episodes = 0;
      const auto ckpt = train(gallery, cfg);
      const auto test = split(gallery, cfg.train_fraction).second;
      summary.runs.push_back(eval_rounds(ckpt.params, test, EvalOptions::from(cfg, eval_episodes),
                                         derive_seed(seed, "eval")));
    }
    const std::size_t rounds = base.rounds;
    std::vector<double> col(seeds.size());
    for (std::size_t r = 0; r < rounds; ++r) {
      for (std::size_t s = 0; s < seeds.size(); ++s) col[s] = summary.runs[s].percentile_by_round[r];
      summary.mean_percentile.push_back(mean_of(col));
      summary.std_percentile.push_back(stddev_of(col));
      for (std::size_t s = 0; s < seeds.size(); ++s) col[s] = summary.runs[s].loss_by_round[r];
      summary.mean_loss.push_back(mean_of(col));
      summary.std_loss.push_back(stddev_of(col));
    }
    table.modes.push_back(std::move(summary));
  }
  return table;
}

}  // namespace gotcha
