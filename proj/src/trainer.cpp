#include "gotcha/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <thread>

#include "gotcha/evaluator.hpp"
#include "gotcha/rng.hpp"

namespace gotcha {

void TrainConfig::validate() const {
  if (rounds == 0) throw ConfigError("rounds must be at least 1");
  if (!(margin >= 0.0) || !std::isfinite(margin)) throw ConfigError("margin must be >= 0");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be >= 0");
  if (k == 0) throw ConfigError("k must be at least 1");
  if (batch == 0) throw ConfigError("batch size must be at least 1");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ConfigError("train fraction must lie strictly between 0 and 1");
  }
  if (workers == 0) throw ConfigError("workers must be at least 1");
  if (mode == DisclosureMode::kProgressive && schedule.rounds() < rounds) {
    throw ConfigError("disclosure schedule has " + std::to_string(schedule.rounds()) +
                      " entries but " + std::to_string(rounds) + " rounds were requested");
  }
}

nlohmann::json to_json(const TrainConfig& cfg) {
  return {
      {"rounds", cfg.rounds},
      {"margin", cfg.margin},
      {"lr", cfg.lr},
      {"k", cfg.k},
      {"batch", cfg.batch},
      {"epochs", cfg.epochs},
      {"seed", cfg.seed},
      {"mode", std::string(to_string(cfg.mode))},
      {"schedule", cfg.schedule.proportions()},
      {"nested_masks", cfg.nested_masks},
      {"train_fraction", cfg.train_fraction},
      {"hidden", cfg.hidden},
      {"episodes_per_epoch", cfg.episodes_per_epoch},
      {"eval_episodes", cfg.eval_episodes},
      {"workers", cfg.workers},
  };
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  cfg.rounds = j.at("rounds").get<std::size_t>();
  cfg.margin = j.at("margin").get<double>();
  cfg.lr = j.at("lr").get<double>();
  cfg.k = j.at("k").get<std::size_t>();
  cfg.batch = j.at("batch").get<std::size_t>();
  cfg.epochs = j.at("epochs").get<std::size_t>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.mode = parse_mode(j.at("mode").get<std::string>());
  cfg.schedule = DisclosureSchedule(j.at("schedule").get<std::vector<double>>());
  cfg.nested_masks = j.at("nested_masks").get<bool>();
  cfg.train_fraction = j.at("train_fraction").get<double>();
  cfg.hidden = j.at("hidden").get<std::size_t>();
  cfg.episodes_per_epoch = j.at("episodes_per_epoch").get<std::size_t>();
  cfg.eval_episodes = j.at("eval_episodes").get<std::size_t>();
  cfg.workers = j.at("workers").get<std::size_t>();
  return cfg;
}

double triplet_loss(std::span<const Vector> queries, std::span<const double> positive,
                    std::span<const Vector> negatives, double margin, std::vector<Vector>* grad) {
  if (queries.size() != negatives.size()) {
    throw ShapeError("triplet loss needs one negative per round");
  }
  if (grad) grad->assign(queries.size(), Vector());
  double total = 0.0;
  for (std::size_t t = 0; t < queries.size(); ++t) {
    const auto& s = queries[t];
    const auto& neg = negatives[t];
    if (s.size() != positive.size() || neg.size() != positive.size()) {
      throw ShapeError("triplet loss operands differ in length");
    }
    double sq_pos = 0.0, sq_neg = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      sq_pos += (s[i] - positive[i]) * (s[i] - positive[i]);
      sq_neg += (s[i] - neg[i]) * (s[i] - neg[i]);
    }
    const double d_pos = std::sqrt(sq_pos);
    const double d_neg = std::sqrt(sq_neg);
    const double hinge = d_pos - d_neg + margin;
    if (!std::isfinite(hinge)) throw NumericError("non-finite value in triplet loss");
    if (grad) (*grad)[t].assign(s.size(), 0.0);
    if (hinge <= 0.0) continue;
    total += hinge;
    if (!grad) continue;
    auto& g = (*grad)[t];
    // The norm is not differentiable at 0; use the zero subgradient there.
    if (d_pos > 0.0) {
      for (std::size_t i = 0; i < s.size(); ++i) g[i] += (s[i] - positive[i]) / d_pos;
    }
    if (d_neg > 0.0) {
      for (std::size_t i = 0; i < s.size(); ++i) g[i] -= (s[i] - neg[i]) / d_neg;
    }
  }
  return total;
}

std::vector<std::size_t> Episode::candidate_sequence() const {
  std::vector<std::size_t> seq;
  for (const auto& r : rounds) seq.push_back(r.candidate);
  return seq;
}

std::uint64_t episode_seed(std::uint64_t run_seed, std::uint64_t index) {
  return derive_seed(derive_seed(run_seed, "episode"), index);
}

namespace {

Vector widen(std::span<const float> v) { return Vector(v.begin(), v.end()); }

DisclosureSchedule schedule_for(const RolloutOptions& o) {
  if (o.mode != DisclosureMode::kProgressive) return DisclosureSchedule(Vector(o.rounds, 0.0));
  if (o.schedule.rounds() < o.rounds) {
    throw ConfigError("disclosure schedule shorter than the number of rounds");
  }
  return o.schedule;
}

}  // namespace

Episode rollout_episode(const ModelParameters& params, const GalleryView& view,
                        const RolloutOptions& options, std::uint64_t seed,
                        std::optional<std::size_t> target) {
  if (view.empty()) throw ConfigError("cannot run a dialog over an empty gallery");
  if (options.rounds == 0) throw ConfigError("rounds must be at least 1");
  const std::size_t n = view.size();

  Rng target_rng(derive_seed(seed, "target"));
  Rng initial_rng(derive_seed(seed, "initial"));
  Rng negative_rng(derive_seed(seed, "negative"));
  Rng sample_rng(derive_seed(seed, "sample"));

  Episode ep;
  ep.target = target ? *target : static_cast<std::size_t>(target_rng.index(n));
  if (ep.target >= n) throw std::out_of_range("target index outside the gallery view");
  ep.positive = widen(view.features(ep.target));

  const MaskPlan plan(schedule_for(options), view.attr_dim(), derive_seed(seed, "mask"),
                      options.nested_masks);
  const FeatureMatrix fm = view.feature_matrix();
  const RecordRef target_rec = view.record(ep.target);

  auto state = DialogState::fresh(params.dims);
  std::size_t candidate = initial_candidate(n, initial_rng);
  std::vector<std::size_t> shown;
  for (std::size_t t = 0; t < options.rounds; ++t) {
    shown.push_back(candidate);
    const RecordRef cand = view.record(candidate);
    auto fb = witness_round(target_rec, cand, plan, t, options.mode);

    RoundRecord rec;
    rec.candidate = candidate;
    rec.matched = fb.matched;
    if (fb.matched) {
      rec.relevance = std::move(fb.relevance);
      rec.percentile = 100.0;
      ep.rounds.push_back(std::move(rec));
      ep.matched = true;
      ep.next_candidate.reset();
      break;
    }

    ep.inputs.push_back({fb.relevance, AttributeVector(cand.attributes.begin(), cand.attributes.end()),
                         std::vector<float>(cand.features.begin(), cand.features.end())});
    const auto enc = encode_round(params, fb.relevance, cand.attributes, cand.features, options.mode);
    Vector query = aggregate(params, enc.fused, state);

    // Uniform over the view minus the target.
    auto neg = static_cast<std::size_t>(negative_rng.index(n - 1));
    if (neg >= ep.target) ++neg;
    rec.negative = neg;
    ep.negatives.push_back(widen(view.features(neg)));
    rec.loss = triplet_loss(std::span(&query, 1), ep.positive, std::span(&ep.negatives.back(), 1),
                            options.margin);
    ep.loss += rec.loss;
    if (options.record_percentile) rec.percentile = ranking_percentile(fm, query, ep.target);

    candidate = next_candidate(fm, query, options.k,
                               options.exclude_shown ? std::span<const std::size_t>(shown)
                                                     : std::span<const std::size_t>(),
                               options.policy, sample_rng);
    ep.next_candidate = candidate;
    ep.queries.push_back(std::move(query));
    rec.relevance = std::move(fb.relevance);
    ep.rounds.push_back(std::move(rec));
  }
  return ep;
}

double episode_loss(const ModelParameters& params, const Episode& episode, DisclosureMode mode,
                    double margin, ModelParameters* grad, double scale) {
  if (episode.inputs.empty()) return 0.0;
  const auto trace = episode_trace(params, episode.inputs, mode);
  std::vector<Vector> grad_q;
  const double loss = triplet_loss(trace.queries, episode.positive, episode.negatives, margin,
                                   grad ? &grad_q : nullptr);
  if (grad) {
    if (scale != 1.0) {
      for (auto& g : grad_q) {
        for (auto& v : g) v *= scale;
      }
    }
    episode_backward(params, trace, grad_q, *grad);
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Checkpoints: "GCKP", u32 version, u64 header length, JSON header, then raw
// little-endian doubles: parameters, then Adam first and second moments.

namespace {

constexpr char kCkptMagic[4] = {'G', 'C', 'K', 'P'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

void write_doubles(std::ostream& out, std::span<const double> values) {
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size_bytes()));
}

void read_doubles(std::istream& in, std::span<double> values) {
  if (!in.read(reinterpret_cast<char*>(values.data()),
               static_cast<std::streamsize>(values.size_bytes()))) {
    throw FormatError("checkpoint truncated in tensor data");
  }
}

nlohmann::json dims_json(const ModelDims& d) {
  return {{"attrs", d.attrs}, {"features", d.features}, {"embed", d.embed}, {"hidden", d.hidden}};
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  nlohmann::json header;
  header["config"] = to_json(ckpt.config);
  header["dims"] = dims_json(ckpt.params.dims);
  header["epoch"] = ckpt.epoch;
  header["step"] = ckpt.step;
  const bool moments = !ckpt.adam.first.empty();
  header["adam"] = {{"step", ckpt.adam.step},
                    {"beta1", ckpt.adam.config.beta1},
                    {"beta2", ckpt.adam.config.beta2},
                    {"eps", ckpt.adam.config.eps},
                    {"moments", moments}};
  auto& table = header["tensors"] = nlohmann::json::array();
  for (const auto& t : ckpt.params.tensors()) {
    table.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}});
  }
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(kCkptMagic, 4);
  const std::uint32_t version = Checkpoint::kVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : ckpt.params.tensors()) write_doubles(out, t.values);
  if (moments) {
    for (const auto& m : ckpt.adam.first) write_doubles(out, m);
    for (const auto& v : ckpt.adam.second) write_doubles(out, v);
  }
  if (!out) throw Error("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  if (!in.read(magic, 4) || std::memcmp(magic, kCkptMagic, 4) != 0) {
    throw FormatError("not a checkpoint: " + path.string());
  }
  if (!in.read(reinterpret_cast<char*>(&version), sizeof(version))) {
    throw FormatError("checkpoint truncated in header");
  }
  if (version != Checkpoint::kVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  if (!in.read(reinterpret_cast<char*>(&len), sizeof(len)) || len > (1u << 26)) {
    throw FormatError("checkpoint truncated in header");
  }
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) {
    throw FormatError("checkpoint truncated in header");
  }

  Checkpoint ckpt;
  try {
    const auto header = nlohmann::json::parse(text);
    ckpt.config = train_config_from_json(header.at("config"));
    const auto& d = header.at("dims");
    ModelDims dims{d.at("attrs").get<std::size_t>(), d.at("features").get<std::size_t>(),
                   d.at("embed").get<std::size_t>(), d.at("hidden").get<std::size_t>()};
    ckpt.params = ModelParameters(dims);
    ckpt.epoch = header.at("epoch").get<std::size_t>();
    ckpt.step = header.at("step").get<std::uint64_t>();
    const auto& adam = header.at("adam");
    ckpt.adam.step = adam.at("step").get<std::uint64_t>();
    ckpt.adam.config = {adam.at("beta1").get<double>(), adam.at("beta2").get<double>(),
                        adam.at("eps").get<double>()};

    const auto tensors = ckpt.params.tensors();
    const auto& table = header.at("tensors");
    if (table.size() != tensors.size()) throw FormatError("checkpoint shape table has the wrong length");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      if (table[i].at("name").get<std::string>() != tensors[i].name ||
          table[i].at("rows").get<std::size_t>() != tensors[i].rows ||
          table[i].at("cols").get<std::size_t>() != tensors[i].cols) {
        throw FormatError("checkpoint shape table mismatch at '" + tensors[i].name + "'");
      }
    }
    for (const auto& t : tensors) read_doubles(in, t.values);
    if (adam.at("moments").get<bool>()) {
      for (const auto& t : tensors) ckpt.adam.first.emplace_back(t.values.size());
      for (const auto& t : tensors) ckpt.adam.second.emplace_back(t.values.size());
      for (auto& m : ckpt.adam.first) read_doubles(in, m);
      for (auto& v : ckpt.adam.second) read_doubles(in, v);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint header: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("bad checkpoint header: ") + e.what());
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes in checkpoint");
  return ckpt;
}

// ---------------------------------------------------------------------------

nlohmann::json EpochMetrics::to_json() const {
  return {{"epoch", epoch}, {"loss", loss}, {"percentile_by_round", percentile_by_round}};
}

ModelDims dims_for(const Gallery& gallery, const TrainConfig& cfg) {
  const std::size_t f = gallery.feat_dim();
  // The query is compared directly against stored features, so E == F.
  return {gallery.attr_dim(), f, f, cfg.hidden ? cfg.hidden : f};
}

Trainer::Trainer(const Gallery& gallery, TrainConfig cfg) : gallery_(&gallery) {
  cfg.validate();
  std::tie(train_, test_) = split(gallery, cfg.train_fraction);
  if (train_.empty()) throw ConfigError("training partition is empty");
  state_.params = ModelParameters::random(dims_for(gallery, cfg), cfg.seed);
  state_.config = std::move(cfg);
}

Trainer::Trainer(const Gallery& gallery, Checkpoint resume) : gallery_(&gallery) {
  resume.config.validate();
  if (!(resume.params.dims == dims_for(gallery, resume.config))) {
    throw ConfigError("checkpoint dimensions do not match the gallery");
  }
  std::tie(train_, test_) = split(gallery, resume.config.train_fraction);
  if (train_.empty()) throw ConfigError("training partition is empty");
  state_ = std::move(resume);
}

std::size_t Trainer::episodes_per_epoch() const {
  return state_.config.episodes_per_epoch ? state_.config.episodes_per_epoch : train_.size();
}

RolloutOptions Trainer::rollout_options() const {
  const auto& c = state_.config;
  RolloutOptions o;
  o.rounds = c.rounds;
  o.k = c.k;
  o.margin = c.margin;
  o.mode = c.mode;
  o.schedule = c.schedule;
  o.nested_masks = c.nested_masks;
  o.policy = CandidatePolicy::kSample;
  o.exclude_shown = false;
  return o;
}

double Trainer::train_batch(std::uint64_t epoch, std::size_t first_episode, std::size_t count) {
  const auto& cfg = state_.config;
  const auto options = rollout_options();
  const std::uint64_t epoch_seed = derive_seed(derive_seed(cfg.seed, "train"), epoch);
  const auto& params = state_.params;

  auto run = [&](std::size_t j, ModelParameters& grad) {
    grad.set_zero();
    const auto ep = rollout_episode(params, train_, options, episode_seed(epoch_seed, first_episode + j));
    return episode_loss(params, ep, cfg.mode, cfg.margin, &grad);
  };

  // Per-episode gradients are summed in episode order, so any worker count
  // gives bit-identical sums.
  std::vector<double> losses(count, 0.0);
  const std::size_t buffers = cfg.workers > 1 ? count + 1 : 2;
  while (scratch_.size() < buffers) scratch_.emplace_back(params.dims);
  ModelParameters& total = scratch_[0];
  total.set_zero();
  auto total_refs = total.tensors();
  auto accumulate = [&](const ModelParameters& g) {
    const auto src = g.tensors();
    for (std::size_t b = 0; b < src.size(); ++b) {
      for (std::size_t i = 0; i < src[b].values.size(); ++i) total_refs[b].values[i] += src[b].values[i];
    }
  };

  if (cfg.workers > 1) {
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(cfg.workers);
    for (std::size_t w = 0; w < cfg.workers; ++w) {
      threads.emplace_back([&, w] {
        try {
          for (std::size_t j = w; j < count; j += cfg.workers) losses[j] = run(j, scratch_[j + 1]);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : threads) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
    for (std::size_t j = 0; j < count; ++j) accumulate(scratch_[j + 1]);
  } else {
    for (std::size_t j = 0; j < count; ++j) {
      losses[j] = run(j, scratch_[1]);
      accumulate(scratch_[1]);
    }
  }

  double sum = 0.0;
  for (double l : losses) sum += l;
  const double mean = sum / static_cast<double>(count);
  if (!std::isfinite(mean)) return mean;

  const double inv = 1.0 / static_cast<double>(count);
  for (auto& t : total_refs) {
    for (auto& v : t.values) v *= inv;
  }
  const auto grads = std::as_const(total).tensors();
  const auto refs = state_.params.tensors();
  adam_step(refs, grads, state_.adam, cfg.lr);
  ++state_.step;
  return mean;
}

EpochMetrics Trainer::run_epoch() {
  const Checkpoint last_good = state_;
  const auto& cfg = state_.config;
  const std::size_t episodes = episodes_per_epoch();
  const std::uint64_t epoch = state_.epoch;

  double total = 0.0;
  for (std::size_t first = 0; first < episodes; first += cfg.batch) {
    const std::size_t count = std::min(cfg.batch, episodes - first);
    double loss = 0.0;
    try {
      loss = train_batch(epoch, first, count);
    } catch (const NumericError& e) {
      throw TrainingDiverged(std::string("training diverged: ") + e.what(), last_good);
    }
    if (!std::isfinite(loss)) {
      throw TrainingDiverged("training diverged: non-finite loss in epoch " +
                                 std::to_string(epoch + 1),
                             last_good);
    }
    total += loss * static_cast<double>(count);
  }
  ++state_.epoch;

  EpochMetrics m;
  m.epoch = state_.epoch;
  m.loss = total / static_cast<double>(episodes);
  if (cfg.eval_episodes > 0 && test_.size() >= 2) {
    const auto report = eval_rounds(state_.params, test_, EvalOptions::from(cfg, cfg.eval_episodes),
                                    derive_seed(cfg.seed, "eval"));
    m.percentile_by_round = report.percentile_by_round;
  }
  return m;
}

Checkpoint train(const Gallery& gallery, const TrainConfig& cfg,
                 const std::function<void(const EpochMetrics&)>& on_epoch,
                 const std::optional<Checkpoint>& resume) {
  std::optional<Trainer> built;
  if (resume) {
    // The stored config records the total epoch count of the run.
    Checkpoint start = *resume;
    start.config.epochs = resume->epoch + cfg.epochs;
    built.emplace(gallery, std::move(start));
  } else {
    built.emplace(gallery, cfg);
  }
  Trainer& trainer = *built;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const auto m = trainer.run_epoch();
    if (on_epoch) on_epoch(m);
  }
  return trainer.checkpoint();
}

}  // namespace gotcha
