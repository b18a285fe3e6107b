#include "gotcha/cli.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "gotcha/error.hpp"
#include "gotcha/evaluator.hpp"
#include "gotcha/gallery.hpp"
#include "gotcha/rng.hpp"
#include "gotcha/session_service.hpp"
#include "gotcha/trainer.hpp"

namespace gotcha {

namespace {

// Flags win over GOTCHA_* environment variables, which win over defaults.
void bind_environment(CLI::App& app) {
  for (CLI::Option* opt : app.get_options()) {
    const auto& names = opt->get_lnames();
    if (names.empty() || names.front() == "help") continue;
    std::string env = "GOTCHA_" + names.front();
    for (auto& c : env) c = c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    opt->envname(env);
  }
}

struct ValidationError : Error {
  using Error::Error;
};

void require(bool ok, const std::string& message) {
  if (!ok) throw ValidationError(message);
}

bool is_jsonl(const std::string& path) {
  return path.size() >= 6 && path.compare(path.size() - 6, 6, ".jsonl") == 0;
}

void write_gallery(const Gallery& g, const std::string& path) {
  if (is_jsonl(path)) {
    write_jsonl(g, path);
  } else {
    save_packed(g, path);
  }
}

void write_report(const nlohmann::json& report, const std::string& path, std::ostream& out) {
  if (!path.empty()) {
    std::ofstream f(path);
    if (!f) throw Error("cannot write " + path);
    f << report.dump(2) << '\n';
  }
  out << report.dump() << '\n';
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      seeds.push_back(std::stoull(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw ValidationError("bad seed '" + tok + "'");
    }
  }
  return seeds;
}

// Shared flags for anything that trains.
struct TrainFlags {
  TrainConfig cfg;
  std::string mode = "progressive";
  std::string schedule = "0.5,0.3,0.2,0.1,0.0";
  bool per_round_resample = false;

  void add_to(CLI::App& sub) {
    sub.add_option("--epochs", cfg.epochs, "Training epochs");
    sub.add_option("--rounds", cfg.rounds, "Dialog rounds T");
    sub.add_option("--margin", cfg.margin, "Triplet margin m");
    sub.add_option("--lr", cfg.lr, "Adam learning rate");
    sub.add_option("--k", cfg.k, "Nearest neighbours considered per round");
    sub.add_option("--batch", cfg.batch, "Episodes per optimizer step");
    sub.add_option("--mode", mode, "Disclosure mode: progressive | full | full-no-attr");
    sub.add_option("--schedule", schedule, "Masked fraction per round");
    sub.add_flag("--per-round-resample", per_round_resample,
                 "Draw masked positions independently each round instead of nesting them");
    sub.add_option("--train-fraction", cfg.train_fraction, "Prefix of the gallery used for training");
    sub.add_option("--hidden", cfg.hidden, "GRU hidden size (0: feature dimension)");
    sub.add_option("--episodes-per-epoch", cfg.episodes_per_epoch,
                   "Dialogs per epoch (0: one per training record)");
    sub.add_option("--eval-episodes", cfg.eval_episodes, "Held-out dialogs after each epoch");
    sub.add_option("--workers", cfg.workers, "Threads used to roll out a batch");
  }

  TrainConfig resolve() {
    require(cfg.margin >= 0.0, "--margin must be >= 0");
    require(cfg.lr >= 0.0, "--lr must be >= 0");
    require(cfg.rounds >= 1, "--rounds must be >= 1");
    require(cfg.k >= 1, "--k must be >= 1");
    require(cfg.batch >= 1, "--batch must be >= 1");
    require(cfg.workers >= 1, "--workers must be >= 1");
    require(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0,
            "--train-fraction must lie strictly between 0 and 1");
    try {
      cfg.mode = parse_mode(mode);
      cfg.schedule = DisclosureSchedule::parse(schedule);
    } catch (const ConfigError& e) {
      throw ValidationError(e.what());
    }
    cfg.nested_masks = !per_round_resample;
    cfg.validate();
    return cfg;
  }
};

struct ModelSource {
  ModelParameters params;
  TrainConfig cfg;
  bool trained = false;
};

ModelSource load_model(const std::string& ckpt_path, const Gallery& g, std::uint64_t seed) {
  ModelSource m;
  if (!ckpt_path.empty()) {
    auto ckpt = load_checkpoint(ckpt_path);
    if (!(ckpt.params.dims == dims_for(g, ckpt.config))) {
      throw ValidationError("checkpoint dimensions do not match the gallery");
    }
    m.params = std::move(ckpt.params);
    m.cfg = ckpt.config;
    m.trained = true;
  } else {
    m.cfg.seed = seed;
    m.params = ModelParameters::random(dims_for(g, m.cfg), seed);
  }
  return m;
}

}  // namespace

int dispatch(int argc, const char* const argv[], std::ostream& out, std::ostream& err) {
  CLI::App app{"Interactive face retrieval with progressive relevance feedback"};
  app.name("gotcha");
  app.option_defaults()->always_capture_default();
  app.require_subcommand(0, 1);

  // gen-synthetic
  auto* gen = app.add_subcommand("gen-synthetic", "Write a synthetic gallery");
  std::size_t gen_n = 2000, gen_attrs = 40, gen_feat = 256;
  double gen_noise = 0.1;
  std::uint64_t gen_seed = 0;
  std::string gen_out;
  gen->add_option("--n", gen_n, "Number of records");
  gen->add_option("--attrs", gen_attrs, "Attributes per record");
  gen->add_option("--feat-dim", gen_feat, "Feature dimension");
  gen->add_option("--noise", gen_noise, "Std-dev of feature noise");
  gen->add_option("--seed", gen_seed, "Random seed");
  gen->add_option("--out", gen_out, "Output path (.jsonl for JSON lines, else packed)")->required();

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Convert a JSONL gallery to the packed format");
  std::string ingest_in, ingest_out;
  bool ingest_normalize = false;
  ingest->add_option("--in", ingest_in, "JSONL input")->required();
  ingest->add_option("--out", ingest_out, "Packed output")->required();
  ingest->add_flag("--normalize", ingest_normalize, "L2-normalize feature rows");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train the dialog model");
  TrainFlags tf;
  std::string train_gallery, train_out, train_resume, train_metrics;
  train_cmd->add_option("--gallery", train_gallery, "Gallery file")->required();
  train_cmd->add_option("--seed", tf.cfg.seed, "Random seed");
  tf.add_to(*train_cmd);
  train_cmd->add_option("--out", train_out, "Checkpoint path")->required();
  train_cmd->add_option("--resume", train_resume, "Continue from this checkpoint");
  train_cmd->add_option("--metrics", train_metrics, "Also append epoch metrics to this file");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate greedy dialogs on held-out records");
  std::string eval_gallery, eval_ckpt, eval_report, eval_mode, eval_split = "test";
  std::size_t eval_episodes = 1000, eval_k = 0;
  std::uint64_t eval_seed = 0;
  double eval_fraction = 0.8;
  bool eval_allow_repeats = false;
  eval_cmd->add_option("--gallery", eval_gallery, "Gallery file")->required();
  eval_cmd->add_option("--ckpt", eval_ckpt, "Checkpoint (untrained weights when omitted)");
  eval_cmd->add_option("--episodes", eval_episodes, "Dialogs to run");
  eval_cmd->add_option("--mode", eval_mode, "Disclosure mode (default: the checkpoint's)");
  eval_cmd->add_option("--k", eval_k, "Nearest neighbours (0: the checkpoint's)");
  eval_cmd->add_option("--seed", eval_seed, "Random seed");
  eval_cmd->add_option("--split", eval_split, "Records to search: test | all");
  eval_cmd->add_option("--train-fraction", eval_fraction, "Split used without a checkpoint");
  eval_cmd->add_flag("--allow-repeats", eval_allow_repeats, "Allow re-showing earlier candidates");
  eval_cmd->add_option("--report", eval_report, "Write the JSON report here");

  // baseline
  auto* base_cmd = app.add_subcommand("baseline", "Attribute-matching baseline bounds");
  std::string base_gallery, base_report;
  double base_flip = 0.0;
  std::uint64_t base_seed = 0;
  std::size_t base_targets = 0;
  base_cmd->add_option("--gallery", base_gallery, "Gallery file")->required();
  base_cmd->add_option("--flip-prob", base_flip, "Per-attribute classifier error rate");
  base_cmd->add_option("--seed", base_seed, "Random seed");
  base_cmd->add_option("--targets", base_targets, "Targets to sample (0: every record)");
  base_cmd->add_option("--report", base_report, "Write the JSON report here");

  // compare
  auto* cmp_cmd = app.add_subcommand("compare", "Train and evaluate every disclosure mode");
  std::string cmp_gallery, cmp_seeds = "1,2", cmp_report;
  std::size_t cmp_eval = 500;
  TrainFlags cf;
  cmp_cmd->add_option("--gallery", cmp_gallery, "Gallery file")->required();
  cmp_cmd->add_option("--seeds", cmp_seeds, "Comma separated seeds (at least two)");
  cmp_cmd->add_option("--episodes", cmp_eval, "Held-out dialogs per run");
  cf.add_to(*cmp_cmd);
  cmp_cmd->add_option("--report", cmp_report, "Write the JSON table here");

  // simulate
  auto* sim_cmd = app.add_subcommand("simulate", "Print one simulated dialog");
  std::string sim_gallery, sim_ckpt, sim_target, sim_mode;
  std::uint64_t sim_seed = 0;
  sim_cmd->add_option("--gallery", sim_gallery, "Gallery file")->required();
  sim_cmd->add_option("--ckpt", sim_ckpt, "Checkpoint (untrained weights when omitted)");
  sim_cmd->add_option("--target-id", sim_target, "Target record (random when omitted)");
  sim_cmd->add_option("--mode", sim_mode, "Disclosure mode (default: the checkpoint's)");
  sim_cmd->add_option("--seed", sim_seed, "Random seed");

  // serve
  auto* serve_cmd = app.add_subcommand("serve", "Serve live retrieval sessions over HTTP");
  std::string serve_gallery, serve_ckpt, serve_addr = "127.0.0.1:8080", serve_assets;
  std::size_t serve_ttl = 1800;
  serve_cmd->add_option("--gallery", serve_gallery, "Gallery file")->required();
  serve_cmd->add_option("--ckpt", serve_ckpt, "Checkpoint")->required();
  serve_cmd->add_option("--addr", serve_addr, "host:port to listen on");
  serve_cmd->add_option("--asset-dir", serve_assets, "Directory with <id>.jpg/.png images");
  serve_cmd->add_option("--idle-ttl", serve_ttl, "Seconds before an idle session is dropped");

  for (auto* sub : app.get_subcommands({})) bind_environment(*sub);

  if (argc <= 1) {
    err << app.help();
    return 1;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return 1;
  }
  if (app.get_subcommands().empty()) {
    err << app.help();
    return 1;
  }

  try {
    if (*gen) {
      require(gen_n >= 1 && gen_attrs >= 1 && gen_feat >= 1, "dimensions must be positive");
      require(gen_noise >= 0.0, "--noise must be >= 0");
      const auto g = gen_synthetic(gen_n, gen_attrs, gen_feat, gen_noise, gen_seed);
      write_gallery(g, gen_out);
      out << nlohmann::json{{"records", g.size()}, {"attrs", g.attr_dim()},
                            {"feat_dim", g.feat_dim()}, {"out", gen_out}}.dump()
          << '\n';
    } else if (*ingest) {
      const auto g = ingest_jsonl(ingest_in, IngestOptions{ingest_normalize});
      save_packed(g, ingest_out);
      out << nlohmann::json{{"records", g.size()}, {"attrs", g.attr_dim()},
                            {"feat_dim", g.feat_dim()}, {"out", ingest_out}}.dump()
          << '\n';
    } else if (*train_cmd) {
      const auto cfg = tf.resolve();
      const auto g = load_gallery(train_gallery);
      std::optional<Checkpoint> resume;
      if (!train_resume.empty()) resume = load_checkpoint(train_resume);
      std::ofstream metrics_file;
      if (!train_metrics.empty()) metrics_file.open(train_metrics, std::ios::app);
      err << "training on " << g.size() << " records, " << cfg.epochs << " epoch(s)\n";
      try {
        const auto ckpt = train(g, cfg, [&](const EpochMetrics& m) {
          const auto line = m.to_json().dump();
          out << line << std::endl;
          if (metrics_file) metrics_file << line << std::endl;
        }, resume);
        save_checkpoint(ckpt, train_out);
      } catch (const TrainingDiverged& e) {
        save_checkpoint(e.last_good(), train_out);
        err << e.what() << "; last good checkpoint written to " << train_out << '\n';
        return 2;
      }
      err << "checkpoint written to " << train_out << '\n';
    } else if (*eval_cmd) {
      const auto g = load_gallery(eval_gallery);
      auto model = load_model(eval_ckpt, g, eval_seed);
      if (!model.trained) model.cfg.train_fraction = eval_fraction;
      require(eval_split == "test" || eval_split == "all", "--split must be test or all");
      EvalOptions opts = EvalOptions::from(model.cfg, eval_episodes);
      if (!eval_mode.empty()) opts.mode = parse_mode(eval_mode);
      if (eval_k) opts.k = eval_k;
      opts.exclude_shown = !eval_allow_repeats;
      const GalleryView view =
          eval_split == "all" ? g.view() : split(g, model.cfg.train_fraction).second;
      const auto report = eval_rounds(model.params, view, opts, eval_seed);
      auto j = report.to_json();
      j["checkpoint"] = eval_ckpt.empty() ? nlohmann::json(nullptr) : nlohmann::json(eval_ckpt);
      write_report(j, eval_report, out);
    } else if (*base_cmd) {
      require(base_flip >= 0.0 && base_flip <= 1.0, "--flip-prob must lie in [0, 1]");
      const auto g = load_gallery(base_gallery);
      const auto summary = baseline_summary(g.view(), base_flip, base_seed, base_targets);
      write_report(summary.to_json(), base_report, out);
    } else if (*cmp_cmd) {
      const auto cfg = cf.resolve();
      const auto seeds = parse_seeds(cmp_seeds);
      require(seeds.size() >= 2, "--seeds needs at least two seeds");
      const auto g = load_gallery(cmp_gallery);
      const auto table = compare_modes(g, cfg, seeds, cmp_eval);
      err << table.to_text();
      write_report(table.to_json(), cmp_report, out);
    } else if (*sim_cmd) {
      const auto g = load_gallery(sim_gallery);
      require(g.size() >= 2, "simulation needs at least two records");
      const auto model = load_model(sim_ckpt, g, sim_seed);
      RolloutOptions ro;
      ro.rounds = model.cfg.rounds;
      ro.k = model.cfg.k;
      ro.margin = model.cfg.margin;
      ro.mode = sim_mode.empty() ? model.cfg.mode : parse_mode(sim_mode);
      ro.schedule = model.cfg.schedule;
      ro.nested_masks = model.cfg.nested_masks;
      ro.policy = CandidatePolicy::kGreedy;
      ro.exclude_shown = true;
      ro.record_percentile = true;
      std::optional<std::size_t> target;
      if (!sim_target.empty()) {
        target = g.find(sim_target);
        require(target.has_value(), "unknown target id '" + sim_target + "'");
      }
      const auto ep = rollout_episode(model.params, g.view(), ro, sim_seed, target);
      const auto target_attrs = g.attributes(ep.target);
      err << "target " << g.id(ep.target) << '\n';
      for (std::size_t r = 0; r < ep.rounds.size(); ++r) {
        const auto& rec = ep.rounds[r];
        const auto attrs = g.attributes(rec.candidate);
        std::size_t same = 0;
        for (std::size_t j = 0; j < attrs.size(); ++j) same += attrs[j] == target_attrs[j];
        out << nlohmann::json{{"round", r + 1},
                              {"candidate_id", std::string(g.id(rec.candidate))},
                              {"matched_attributes", same},
                              {"percentile", rec.percentile},
                              {"matched", rec.matched}}.dump()
            << '\n';
        err << "round " << r + 1 << ": " << g.id(rec.candidate) << "  " << same << "/"
            << attrs.size() << " attributes agree  percentile " << rec.percentile
            << (rec.matched ? "  matched" : "") << '\n';
      }
      err << (ep.matched ? "target found" : "round limit reached")
          << " (agreeing attributes need not rise every round even while the percentile does)\n";
    } else if (*serve_cmd) {
      const auto colon = serve_addr.rfind(':');
      require(colon != std::string::npos, "--addr must look like host:port");
      const std::string host = serve_addr.substr(0, colon);
      int port = 0;
      try {
        port = std::stoi(serve_addr.substr(colon + 1));
      } catch (const std::exception&) {
        throw ValidationError("bad port in --addr");
      }
      auto gallery = std::make_shared<const Gallery>(load_gallery(serve_gallery));
      auto ckpt = load_checkpoint(serve_ckpt);
      require(ckpt.params.dims == dims_for(*gallery, ckpt.config),
              "checkpoint dimensions do not match the gallery");
      ServiceOptions opts;
      opts.k = ckpt.config.k;
      opts.rounds = ckpt.config.rounds;
      opts.schedule = ckpt.config.schedule;
      opts.idle_ttl = std::chrono::seconds(serve_ttl);
      opts.asset_dir = serve_assets;
      SessionService service(std::make_shared<const ModelParameters>(std::move(ckpt.params)), gallery,
                             opts);
      httplib::Server server;
      service.mount(server);
      err << "listening on " << host << ':' << port << '\n';
      if (!server.listen(host, port)) throw Error("cannot listen on " + serve_addr);
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace gotcha
