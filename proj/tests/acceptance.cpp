// Acceptance run: one PASS/FAIL line per criterion, details indented below it.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "gotcha/dialog_model.hpp"
#include "gotcha/evaluator.hpp"
#include "gotcha/feedback_sim.hpp"
#include "gotcha/gallery.hpp"
#include "gotcha/retriever.hpp"
#include "gotcha/rng.hpp"
#include "gotcha/session_service.hpp"
#include "gotcha/trainer.hpp"
#include "reference_loss.hpp"

using namespace gotcha;
using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

// Tolerances and sizes.
constexpr double kGradTolerance = 1e-4;
constexpr double kGradSeconds = 60.0;
constexpr std::size_t kOracleInstances = 200;
constexpr double kScanSeconds = 2.0;
constexpr std::size_t kMaskPlans = 1000;
constexpr std::size_t kDraws = 100000;
constexpr double kSigmas = 3.0;
constexpr double kRound5Target = 90.0;
constexpr double kRiseTarget = 10.0;
constexpr double kUntrainedCentre = 50.0;
constexpr double kUntrainedSlack = 5.0;
constexpr double kTrainSeconds = 15.0 * 60.0;
constexpr double kNoAttrSlack = 1.0;
constexpr std::size_t kPercentileInstances = 500;
constexpr std::size_t kServiceDialogs = 25;

int failures = 0;

void verdict(int n, bool ok, const std::string& summary) {
  std::cout << "criterion " << n << ": " << (ok ? "PASS" : "FAIL") << "  " << summary << std::endl;
  if (!ok) ++failures;
}

void detail(const std::string& line) { std::cout << "    " << line << std::endl; }

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

struct ScratchDir {
  std::filesystem::path path;
  ScratchDir() {
    path = std::filesystem::temp_directory_path() /
           ("gotcha-acceptance-" + std::to_string(::getpid()));
    std::filesystem::create_directories(path);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

// ---------------------------------------------------------------------------

void gradient_suite() {
  const auto t0 = Clock::now();
  double worst = 0.0, worst_plain = 0.0, worst_loss_gap = 0.0;
  std::size_t checks = 0;
  for (std::uint64_t s = 0; s < 4; ++s) {
    const auto g = gen_synthetic(20, 8, 16, 0.1, 100 + s);
    const auto p = ModelParameters::random(ModelDims{8, 16, 16, 16}, s);
    for (DisclosureMode mode :
         {DisclosureMode::kProgressive, DisclosureMode::kFull, DisclosureMode::kFullNoAttr}) {
      RolloutOptions o;
      o.rounds = 3;
      o.mode = mode;
      o.margin = 2.0;
      Episode ep;
      for (std::uint64_t e = 0;; ++e) {
        ep = rollout_episode(p, g.view(), o, e);
        if (ep.inputs.size() == 3) break;
      }
      auto grad = ModelParameters::zeros(p.dims);
      const double loss = episode_loss(p, ep, mode, o.margin, &grad);
      const auto analytic = grad.flatten();

      const long double ref = test::reference_episode_loss(p, ep, mode, o.margin);
      worst_loss_gap = std::max(worst_loss_gap, std::abs(static_cast<double>(ref) - loss) /
                                                    std::max(std::abs(loss), 1e-300));
      worst = std::max(worst, test::reference_grad_check(p, ep, mode, o.margin, analytic)
                                  .max_rel_error);

      auto probe = p;
      const auto plain = grad_check(
          [&](std::span<const double> t) {
            probe.unflatten(t);
            return episode_loss(probe, ep, mode, o.margin);
          },
          p.flatten(), analytic, 5e-4);
      worst_plain = std::max(worst_plain, plain.max_rel_error);
      ++checks;
    }
  }
  const double secs = seconds_since(t0);
  const bool ok = worst < kGradTolerance && worst_loss_gap < 1e-12 && secs < kGradSeconds;
  verdict(1, ok, "max rel error " + fmt(worst) + " over " + std::to_string(checks) +
                     " episodes, " + fmt(secs, 3) + " s");
  detail("reference loss vs 64-bit loss, max relative gap " + fmt(worst_loss_gap));
  detail("plain 64-bit differences (h=5e-4), max rel error " + fmt(worst_plain) +
         " (round-off bound, informational)");
}

// ---------------------------------------------------------------------------

ScanResult brute_force(const FeatureMatrix& fm, std::span<const double> q, std::size_t k,
                       std::span<const std::size_t> excluded) {
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t i = 0; i < fm.rows; ++i) {
    if (std::find(excluded.begin(), excluded.end(), i) != excluded.end()) continue;
    double acc = 0.0;
    const auto row = fm.row(i);
    for (std::size_t j = 0; j < fm.cols; ++j) {
      const double d = static_cast<double>(row[j]) - q[j];
      acc += d * d;
    }
    all.emplace_back(acc, i);
  }
  std::sort(all.begin(), all.end());
  ScanResult out;
  for (std::size_t i = 0; i < std::min(k, all.size()); ++i) {
    out.push_back({all[i].second, std::sqrt(all[i].first)});
  }
  return out;
}

void retrieval_oracle() {
  Rng rng(derive_seed(2, "oracle"));
  std::size_t mismatches = 0, parallel_mismatches = 0;
  for (std::size_t inst = 0; inst < kOracleInstances; ++inst) {
    const std::size_t n = 1 + rng.index(10000);
    const std::size_t f = 1 + rng.index(48);
    const bool coarse = rng.bernoulli(0.3);  // small integer grid, many ties
    std::vector<float> data(n * f);
    for (auto& x : data) {
      x = coarse ? static_cast<float>(rng.index(3)) : static_cast<float>(rng.normal());
    }
    std::vector<double> q(f);
    for (auto& x : q) x = coarse ? static_cast<double>(rng.index(3)) : rng.normal();
    const std::size_t k = rng.bernoulli(0.1) ? n + rng.index(5) : 1 + rng.index(std::min<std::size_t>(n, 60));
    std::vector<std::size_t> excluded;
    if (n > 1 && rng.bernoulli(0.5)) {
      const std::size_t m = rng.index(std::min<std::size_t>(n - 1, 12));
      for (std::size_t j = 0; j < m; ++j) excluded.push_back(rng.index(n));
    }
    const FeatureMatrix fm{data, n, f};
    const auto got = scan_top_k(fm, q, k, excluded);
    if (got != brute_force(fm, q, k, excluded)) ++mismatches;
    if (scan_top_k_parallel(fm, q, k, excluded, 1 + rng.index(6)) != got) ++parallel_mismatches;
  }

  const std::size_t n = 200000, f = 256;
  std::vector<float> big(n * f);
  Rng fill(7);
  for (auto& x : big) x = static_cast<float>(fill.uniform(-1.0, 1.0));
  std::vector<double> q(f);
  for (auto& x : q) x = fill.uniform(-1.0, 1.0);
  const FeatureMatrix fm{big, n, f};
  const auto t0 = Clock::now();
  const auto serial = scan_top_k(fm, q, 10);
  const double secs = seconds_since(t0);
  const auto parallel = scan_top_k_parallel(fm, q, 10, {}, 4);
  const bool identical = serial == parallel;

  verdict(2, mismatches == 0 && parallel_mismatches == 0 && secs < kScanSeconds && identical,
          std::to_string(mismatches) + " mismatches in " + std::to_string(kOracleInstances) +
              " instances; 200000x256 scan " + fmt(secs, 3) + " s; parallel " +
              (identical ? "bit-identical" : "DIFFERS"));
  detail("parallel mismatches on oracle instances: " + std::to_string(parallel_mismatches));
}

// ---------------------------------------------------------------------------

void masking_exactness() {
  const DisclosureSchedule schedule;  // 0.5, 0.3, 0.2, 0.1, 0.0
  const std::size_t attrs = 40;
  const std::vector<std::size_t> expected{20, 12, 8, 4, 0};
  bool counts_ok = true, nested_ok = true;
  RelevanceVector all_revealed(attrs, 1);
  std::vector<std::size_t> seen;
  for (std::size_t i = 0; i < kMaskPlans; ++i) {
    const MaskPlan plan(schedule, attrs, derive_seed(3, i), true);
    std::vector<std::size_t> prev_masked;
    for (std::size_t t = 0; t < schedule.rounds(); ++t) {
      const auto r = apply_mask(all_revealed, plan, t);
      const auto zeros = static_cast<std::size_t>(std::count(r.begin(), r.end(), 0));
      if (zeros != expected[t]) counts_ok = false;
      if (i == 0) seen.push_back(zeros);
      std::vector<std::size_t> masked;
      for (std::size_t j = 0; j < attrs; ++j) {
        if (r[j] == 0) masked.push_back(j);
      }
      // Revealed sets grow, so masked sets shrink.
      if (t > 0 && !std::includes(prev_masked.begin(), prev_masked.end(), masked.begin(), masked.end())) {
        nested_ok = false;
      }
      prev_masked = masked;
    }
  }
  std::string got;
  for (auto c : seen) got += (got.empty() ? "" : ",") + std::to_string(c);
  verdict(3, counts_ok && nested_ok,
          "zero counts (" + got + "); nested across " + std::to_string(kMaskPlans) + " plans: " +
              (nested_ok ? "yes" : "NO"));
}

// ---------------------------------------------------------------------------

bool draws_within(const std::vector<double>& distances, std::uint64_t seed, std::string& report) {
  ScanResult result;
  for (std::size_t j = 0; j < distances.size(); ++j) result.push_back({j, distances[j]});
  std::vector<long double> exact(distances.size());
  long double total = 0.0L;
  for (std::size_t j = 0; j < distances.size(); ++j) total += exact[j] = std::exp(-static_cast<long double>(distances[j]));
  for (auto& e : exact) e /= total;

  std::vector<std::size_t> counts(distances.size(), 0);
  Rng rng(seed);
  for (std::size_t i = 0; i < kDraws; ++i) ++counts[sample_candidate(result, rng)];
  bool ok = true;
  double worst = 0.0;
  for (std::size_t j = 0; j < distances.size(); ++j) {
    const double pi = static_cast<double>(exact[j]);
    const double sigma = std::sqrt(kDraws * pi * (1.0 - pi));
    const double z = std::abs(static_cast<double>(counts[j]) - kDraws * pi) / sigma;
    worst = std::max(worst, z);
    if (z > kSigmas) ok = false;
    report += " " + fmt(static_cast<double>(counts[j]) / kDraws) + "/" + fmt(pi);
  }
  report += " (max " + fmt(worst, 3) + " sigma)";
  return ok;
}

void sampling_distribution() {
  std::string five, two;
  const bool a = draws_within({0.35, 0.6, 0.9, 1.4, 2.3}, 11, five);
  const bool b = draws_within({0.0, std::log(2.0)}, 12, two);
  verdict(4, a && b, std::to_string(kDraws) + " draws per distance set");
  detail("five candidates, empirical/exact:" + five);
  detail("(0, ln 2), empirical/exact:" + two);
}

// ---------------------------------------------------------------------------

struct EndToEnd {
  Gallery gallery;
  Checkpoint trained;
  bool ok = false;
};

EndToEnd end_to_end_learning() {
  EndToEnd out;
  out.gallery = gen_synthetic(2000, 40, 64, 0.1, 2024);
  TrainConfig cfg;  // margin 2.0, lr 0.001, K 10, T 5
  cfg.epochs = 20;
  cfg.seed = 1;
  cfg.hidden = 64;
  cfg.eval_episodes = 0;
  cfg.workers = 1;
  const auto test_view = split(out.gallery, cfg.train_fraction).second;
  const auto eval_opts = EvalOptions::from(cfg, 1000);

  const auto untrained = ModelParameters::random(dims_for(out.gallery, cfg), cfg.seed);
  const auto before = eval_rounds(untrained, test_view, eval_opts, derive_seed(cfg.seed, "eval"));

  const auto t0 = Clock::now();
  out.trained = train(out.gallery, cfg);
  const double secs = seconds_since(t0);
  const auto after = eval_rounds(out.trained.params, test_view, eval_opts, derive_seed(cfg.seed, "eval"));

  const double r1 = after.percentile_by_round.front();
  const double r5 = after.percentile_by_round.back();
  const double u1 = before.percentile_by_round.front();
  out.ok = r5 >= kRound5Target && r5 - r1 >= kRiseTarget &&
           std::abs(u1 - kUntrainedCentre) <= kUntrainedSlack && secs <= kTrainSeconds;
  verdict(5, out.ok,
          "round-5 " + fmt(r5) + ", round-1 " + fmt(r1) + ", untrained round-1 " + fmt(u1) + ", " +
              std::to_string(cfg.epochs) + " epochs in " + fmt(secs, 3) + " s");
  std::string curve;
  for (double v : after.percentile_by_round) curve += " " + fmt(v);
  detail("held-out percentile by round:" + curve);
  return out;
}

// ---------------------------------------------------------------------------

void mode_ordering() {
  const auto g = gen_synthetic(1000, 40, 64, 0.1, 77);
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.hidden = 64;
  const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  const auto table = compare_modes(g, cfg, seeds, 500);
  const auto& prog = table.at(DisclosureMode::kProgressive);
  const auto& full = table.at(DisclosureMode::kFull);
  const auto& noattr = table.at(DisclosureMode::kFullNoAttr);
  const bool first = prog.mean_percentile.front() <= full.mean_percentile.front();
  const bool last = noattr.mean_percentile.back() <= full.mean_percentile.back() + kNoAttrSlack;
  const std::string text = table.to_text();
  const bool emitted = !text.empty() && prog.std_percentile.size() == cfg.rounds;
  verdict(6, first && last && emitted,
          "round-1 progressive " + fmt(prog.mean_percentile.front()) + " vs full " +
              fmt(full.mean_percentile.front()) + "; round-5 full-no-attr " +
              fmt(noattr.mean_percentile.back()) + " vs full " + fmt(full.mean_percentile.back()));
  std::istringstream lines(text);
  for (std::string line; std::getline(lines, line);) detail(line);
}

// ---------------------------------------------------------------------------

double pessimistic_percentile(const FeatureMatrix& fm, std::span<const double> q, std::size_t target) {
  auto dist = [&](std::size_t i) {
    double acc = 0.0;
    const auto row = fm.row(i);
    for (std::size_t j = 0; j < fm.cols; ++j) {
      const double d = static_cast<double>(row[j]) - q[j];
      acc += d * d;
    }
    return acc;
  };
  std::vector<std::pair<double, int>> order;  // ties sort the target last
  for (std::size_t i = 0; i < fm.rows; ++i) order.emplace_back(dist(i), i == target ? 1 : 0);
  std::sort(order.begin(), order.end());
  std::size_t rank = 0;
  while (order[rank].second != 1) ++rank;
  ++rank;
  return 100.0 * static_cast<double>(fm.rows - rank) / static_cast<double>(fm.rows - 1);
}

void metric_oracle() {
  Rng rng(derive_seed(7, "metric"));
  std::size_t mismatches = 0;
  for (std::size_t inst = 0; inst < kPercentileInstances; ++inst) {
    const std::size_t n = 2 + rng.index(400);
    const std::size_t f = 1 + rng.index(8);
    const bool coarse = rng.bernoulli(0.5);
    std::vector<float> data(n * f);
    for (auto& x : data) x = coarse ? static_cast<float>(rng.index(2)) : static_cast<float>(rng.normal());
    std::vector<double> q(f);
    for (auto& x : q) x = coarse ? static_cast<double>(rng.index(2)) : rng.normal();
    const std::size_t target = rng.index(n);
    const FeatureMatrix fm{data, n, f};
    if (ranking_percentile(fm, q, target) != pessimistic_percentile(fm, q, target)) ++mismatches;
  }
  const std::vector<float> line{0.0f, 1.0f, 2.0f, 3.0f, 4.0f};
  const FeatureMatrix fm{line, 5, 1};
  const std::vector<double> q{0.0};
  const double top = ranking_percentile(fm, q, 0);
  const double bottom = ranking_percentile(fm, q, 4);
  verdict(7, mismatches == 0 && top == 100.0 && bottom == 0.0,
          std::to_string(mismatches) + " mismatches in " + std::to_string(kPercentileInstances) +
              " instances; extremes " + fmt(top) + " and " + fmt(bottom));
}

// ---------------------------------------------------------------------------

Gallery from_signatures(const std::vector<std::vector<std::int8_t>>& sigs) {
  Gallery g(sigs.front().size(), 1);
  for (std::size_t i = 0; i < sigs.size(); ++i) {
    const float feat = static_cast<float>(i);
    g.add("s" + std::to_string(i), sigs[i], std::span<const float>(&feat, 1));
  }
  return g;
}

void baseline_bounds_check() {
  std::size_t runs = 0, violations = 0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto g = gen_synthetic(150, 5 + s % 4, 4, 0.1, 300 + s);
    for (double flip : {0.0, 0.05, 0.2, 0.5}) {
      for (std::size_t t = 0; t < g.size(); ++t) {
        const auto b = baseline_bounds(g.view(), t, flip, derive_seed(s, t));
        ++runs;
        if (!(b.upper >= b.expectation && b.expectation >= b.lower)) ++violations;
      }
    }
  }

  std::vector<std::vector<std::int8_t>> unique;
  for (std::uint32_t code = 0; code < 256; ++code) {
    std::vector<std::int8_t> sig(8);
    for (int b = 0; b < 8; ++b) sig[b] = (code >> b) & 1 ? 1 : -1;
    unique.push_back(sig);
  }
  const auto ug = from_signatures(unique);
  const double unique_expectation = baseline_summary(ug.view(), 0.0, 1).mean.expectation;

  const auto five = from_signatures({{1, 1, 1}, {1, 1, 1}, {1, 1, -1}, {1, -1, -1}, {-1, -1, -1}});
  const auto b = baseline_bounds(five.view(), 0, 0.0, 1);
  const bool hand = b.upper == 100.0 && b.lower == 75.0 && b.expectation == 87.5;
  verdict(8, violations == 0 && unique_expectation == 100.0 && hand,
          std::to_string(violations) + " ordering violations in " + std::to_string(runs) +
              " runs; unique signatures " + fmt(unique_expectation) + "; N=5 case (" +
              fmt(b.upper) + ", " + fmt(b.lower) + ", " + fmt(b.expectation) + ")");
}

// ---------------------------------------------------------------------------

void determinism_and_persistence(const std::filesystem::path& dir) {
  const auto g = gen_synthetic(300, 10, 16, 0.1, 5);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 8;
  cfg.episodes_per_epoch = 96;
  cfg.eval_episodes = 50;

  auto run = [&](std::size_t workers, std::vector<std::string>& metrics) {
    auto c = cfg;
    c.workers = workers;
    return train(g, c, [&](const EpochMetrics& m) { metrics.push_back(m.to_json().dump()); });
  };
  std::vector<std::string> m1, m2, m3;
  const auto a = run(1, m1);
  const auto b = run(1, m2);
  const auto c = run(3, m3);
  // The worker count is recorded in the config; everything learned must agree.
  const bool trajectories = a == b && m1 == m2 && a.params == c.params && a.adam == c.adam &&
                            a.step == c.step && m1 == m3;

  const auto test_view = split(g, cfg.train_fraction).second;
  const auto opts = EvalOptions::from(cfg, 100);
  bool transcripts = eval_rounds(a.params, test_view, opts, 4).to_json() ==
                     eval_rounds(b.params, test_view, opts, 4).to_json();
  RolloutOptions ro;
  ro.policy = CandidatePolicy::kSample;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto e1 = rollout_episode(a.params, g.view(), ro, s);
    const auto e2 = rollout_episode(a.params, g.view(), ro, s);
    if (e1.candidate_sequence() != e2.candidate_sequence() || e1.loss != e2.loss) transcripts = false;
  }

  save_checkpoint(a, dir / "a.ckpt");
  const auto loaded = load_checkpoint(dir / "a.ckpt");
  save_checkpoint(loaded, dir / "b.ckpt");
  const bool ckpt_rt = loaded == a && read_bytes(dir / "a.ckpt") == read_bytes(dir / "b.ckpt");

  save_packed(g, dir / "g.bin");
  const auto g2 = load_packed(dir / "g.bin");
  save_packed(g2, dir / "g2.bin");
  write_jsonl(g, dir / "g.jsonl");
  const auto g3 = ingest_jsonl(dir / "g.jsonl");
  const bool gallery_rt = g2 == g && read_bytes(dir / "g.bin") == read_bytes(dir / "g2.bin") && g3 == g;

  auto half_cfg = cfg;
  half_cfg.epochs = 1;
  const auto half = train(g, half_cfg);
  save_checkpoint(half, dir / "half.ckpt");
  const auto resumed = train(g, half_cfg, {}, load_checkpoint(dir / "half.ckpt"));
  const bool resume_ok = resumed == a;

  verdict(9, trajectories && transcripts && ckpt_rt && gallery_rt && resume_ok,
          std::string("trajectories ") + (trajectories ? "identical" : "DIFFER") + "; transcripts " +
              (transcripts ? "identical" : "DIFFER") + "; checkpoint round-trip " +
              (ckpt_rt ? "exact" : "BROKEN") + "; gallery round-trip " +
              (gallery_rt ? "exact" : "BROKEN") + "; resume " + (resume_ok ? "equal" : "DIFFERS"));
}

// ---------------------------------------------------------------------------

void service_equivalence(const EndToEnd& e2e, const std::filesystem::path& dir) {
  save_checkpoint(e2e.trained, dir / "service.ckpt");
  const auto ckpt = load_checkpoint(dir / "service.ckpt");
  const auto model = std::make_shared<const ModelParameters>(ckpt.params);
  const auto gallery = std::make_shared<const Gallery>(e2e.gallery);
  const auto& g = *gallery;

  SessionService service(model, gallery);
  httplib::Server server;
  service.mount(server);
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread worker([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  httplib::Client client("127.0.0.1", port);
  auto post = [&](const std::string& path, const json& body) {
    auto res = client.Post(path, body.dump(), "application/json");
    if (!res) throw std::runtime_error("no response from " + path);
    return std::make_pair(res->status, json::parse(res->body));
  };

  const auto eval_opts = EvalOptions::from(ckpt.config, kServiceDialogs);
  RolloutOptions ro;
  ro.rounds = eval_opts.rounds;
  ro.k = eval_opts.k;
  ro.margin = eval_opts.margin;
  ro.mode = eval_opts.mode;
  ro.schedule = eval_opts.schedule;
  ro.nested_masks = eval_opts.nested_masks;
  ro.policy = CandidatePolicy::kGreedy;
  ro.exclude_shown = eval_opts.exclude_shown;

  std::size_t equal = 0, matched = 0;
  std::size_t finished = 0, late_409 = 0;
  for (std::size_t i = 0; i < kServiceDialogs; ++i) {
    const std::uint64_t seed = episode_seed(derive_seed(ckpt.config.seed, "service"), i);
    const auto ep = rollout_episode(ckpt.params, g.view(), ro, seed);
    std::vector<std::string> expected;
    for (auto c : ep.candidate_sequence()) expected.emplace_back(g.id(c));
    if (ep.next_candidate) expected.emplace_back(g.id(*ep.next_candidate));

    // The witness side: its own target and mask plan from the dialog seed.
    Rng target_rng(derive_seed(seed, "target"));
    const std::size_t target = target_rng.index(g.size());
    const MaskPlan plan(ro.schedule, g.attr_dim(), derive_seed(seed, "mask"), ro.nested_masks);

    auto [status, body] = post("/sessions", {{"seed", seed}, {"mode", "progressive"}});
    if (status != 201) throw std::runtime_error("session creation failed");
    const std::string sid = body.at("session_id");
    std::vector<std::string> shown{body.at("candidate").at("id").get<std::string>()};
    for (std::size_t t = 0;; ++t) {
      const auto idx = *g.find(shown.back());
      const auto fb = witness_round(g.record(target), g.record(idx), plan, t, ro.mode);
      if (fb.matched) {
        const auto [cs, cb] = post("/sessions/" + sid + "/confirm", {{"candidate_id", shown.back()}});
        if (cs == 200) ++matched;
        break;
      }
      json rel = json::array();
      for (auto v : fb.relevance) rel.push_back(int(v));
      auto [fs, fbody] = post("/sessions/" + sid + "/feedback", {{"relevance", rel}});
      if (fs != 200) break;
      shown.push_back(fbody.at("candidate").at("id").get<std::string>());
      if (fbody.at("done").get<bool>()) {
        const auto [late, lb] = post("/sessions/" + sid + "/feedback", {{"relevance", rel}});
        ++finished;
        late_409 += late == 409;
        break;
      }
    }
    if (shown == expected) ++equal;
  }

  auto [cs, created] = post("/sessions", {{"seed", 1}});
  const std::string sid = created.at("session_id");
  const json over = {{"relevance", json(std::vector<int>(g.attr_dim(), 1))}};
  const int over_status = post("/sessions/" + sid + "/feedback", over).first;

  server.stop();
  worker.join();

  const bool saw_409 = finished > 0 && late_409 == finished;
  const bool ok = equal == kServiceDialogs && over_status == 422 && saw_409;
  verdict(10, ok,
          std::to_string(equal) + "/" + std::to_string(kServiceDialogs) +
              " HTTP dialogs equal the evaluator's candidate sequence (" + std::to_string(matched) +
              " matched); over-budget " + std::to_string(over_status) + "; round T+1 " +
              std::to_string(late_409) + "/" + std::to_string(finished) + " answered 409");
}

}  // namespace

int main() {
  ScratchDir scratch;
  auto guarded = [](int n, const std::function<void()>& f) {
    try {
      f();
    } catch (const std::exception& e) {
      verdict(n, false, std::string("error: ") + e.what());
    }
  };
  guarded(1, gradient_suite);
  guarded(2, retrieval_oracle);
  guarded(3, masking_exactness);
  guarded(4, sampling_distribution);
  EndToEnd e2e;
  guarded(5, [&] { e2e = end_to_end_learning(); });
  guarded(6, mode_ordering);
  guarded(7, metric_oracle);
  guarded(8, baseline_bounds_check);
  guarded(9, [&] { determinism_and_persistence(scratch.path); });
  guarded(10, [&] { service_equivalence(e2e, scratch.path); });
  std::cout << (failures == 0 ? "all criteria pass" : std::to_string(failures) + " criteria fail")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
