#include "gotcha/session_service.hpp"

#include <cstdio>

#include <httplib.h>

#include "gotcha/error.hpp"
#include "gotcha/retriever.hpp"
#include "gotcha/rng.hpp"

namespace gotcha {

namespace {

ServiceResponse error(int status, const std::string& message) {
  return {status, {{"error", message}}};
}

DisclosureSchedule schedule_from(const nlohmann::json& value) {
  if (value.is_string()) return DisclosureSchedule::parse(value.get<std::string>());
  if (value.is_array()) {
    std::vector<double> p;
    for (const auto& v : value) {
      if (!v.is_number()) throw ConfigError("schedule entries must be numbers");
      p.push_back(v.get<double>());
    }
    return DisclosureSchedule(std::move(p));
  }
  throw ConfigError("schedule must be an array or a comma separated string");
}

}  // namespace

SessionService::SessionService(std::shared_ptr<const ModelParameters> model,
                               std::shared_ptr<const Gallery> gallery, ServiceOptions options)
    : model_(std::move(model)),
      gallery_(std::move(gallery)),
      options_(std::move(options)),
      token_rng_(std::random_device{}()) {
  if (!gallery_ || gallery_->empty()) throw ConfigError("the service needs a non-empty gallery");
  if (model_ && !(model_->dims.attrs == gallery_->attr_dim() &&
                  model_->dims.features == gallery_->feat_dim() &&
                  model_->dims.embed == gallery_->feat_dim())) {
    throw ConfigError("model dimensions do not match the gallery");
  }
  if (options_.rounds == 0 || options_.k == 0) throw ConfigError("rounds and k must be positive");
}

std::size_t SessionService::session_count() {
  std::lock_guard lock(sessions_mutex_);
  return sessions_.size();
}

void SessionService::purge_expired(ServiceOptions::Clock::time_point now) {
  for (auto it = sessions_.begin(); it != sessions_.end();) {
    // A session busy in another request is left alone.
    std::unique_lock lock(it->second->mutex, std::try_to_lock);
    if (lock.owns_lock() && now - it->second->last_access > options_.idle_ttl) {
      lock.unlock();
      it = sessions_.erase(it);
    } else {
      ++it;
    }
  }
}

std::shared_ptr<SessionService::Session> SessionService::find(std::string_view id) {
  std::lock_guard lock(sessions_mutex_);
  purge_expired(options_.clock());
  auto it = sessions_.find(std::string(id));
  return it == sessions_.end() ? nullptr : it->second;
}

nlohmann::json SessionService::candidate_card(std::size_t index) const {
  const auto id = std::string(gallery_->id(index));
  nlohmann::json attrs = nlohmann::json::array();
  for (auto a : gallery_->attributes(index)) attrs.push_back(int(a));
  nlohmann::json card = {{"id", id}, {"attributes", attrs}};
  if (!options_.asset_dir.empty()) {
    for (const char* ext : {".jpg", ".png", ".jpeg"}) {
      if (std::filesystem::exists(options_.asset_dir / (id + ext))) {
        card["image_url"] = "/assets/" + id + ext;
        break;
      }
    }
  }
  return card;
}

std::size_t SessionService::budget(const Session& s) const {
  const std::size_t a = gallery_->attr_dim();
  if (s.done) return 0;
  if (s.mode != DisclosureMode::kProgressive) return a;
  return s.schedule.budget(s.state.round, a);
}

nlohmann::json SessionService::round_payload(const Session& s) const {
  return {{"session_id", s.id},
          {"round", s.state.round + 1},
          {"max_rounds", options_.rounds},
          {"mode", std::string(to_string(s.mode))},
          {"candidate", candidate_card(s.candidate)},
          {"done", s.done},
          {"matched", s.matched},
          {"disclosure_budget", budget(s)}};
}

ServiceResponse SessionService::create_session(const nlohmann::json& request) {
  if (!model_) return error(503, "model not loaded");
  if (!request.is_null() && !request.is_object()) return error(400, "request must be a JSON object");

  auto session = std::make_shared<Session>();
  try {
    session->mode = request.contains("mode") ? parse_mode(request["mode"].get<std::string>())
                                              : DisclosureMode::kProgressive;
    session->schedule =
        request.contains("schedule") ? schedule_from(request["schedule"]) : options_.schedule;
  } catch (const std::exception& e) {
    return error(400, e.what());
  }
  if (session->mode == DisclosureMode::kProgressive && session->schedule.rounds() < options_.rounds) {
    return error(400, "schedule shorter than the number of rounds");
  }

  std::lock_guard lock(sessions_mutex_);
  if (request.contains("seed")) {
    const auto& seed = request["seed"];
    if (!seed.is_number_integer() || (!seed.is_number_unsigned() && seed.get<std::int64_t>() < 0)) {
      return error(400, "seed must be a non-negative integer");
    }
    session->seed = request["seed"].get<std::uint64_t>();
  } else {
    session->seed = token_rng_();
  }
  char token[24];
  do {
    std::snprintf(token, sizeof(token), "s%016llx", static_cast<unsigned long long>(token_rng_()));
  } while (sessions_.contains(token));
  session->id = token;

  session->state = DialogState::fresh(model_->dims);
  Rng initial(derive_seed(session->seed, "initial"));
  session->candidate = initial_candidate(gallery_->size(), initial);
  session->shown.push_back(session->candidate);
  session->created = session->last_access = options_.clock();

  purge_expired(session->created);
  sessions_.emplace(session->id, session);
  return {201, round_payload(*session)};
}

ServiceResponse SessionService::submit_feedback(std::string_view session_id,
                                                const nlohmann::json& body) {
  auto session = find(session_id);
  if (!session) return error(404, "unknown session");
  std::lock_guard lock(session->mutex);
  session->last_access = options_.clock();
  if (session->done) return error(409, "session is finished");

  const std::size_t a = gallery_->attr_dim();
  if (!body.is_object() || !body.contains("relevance") || !body["relevance"].is_array()) {
    return error(422, "body must contain a relevance array");
  }
  const auto& arr = body["relevance"];
  if (arr.size() != a) {
    return error(422, "relevance must have " + std::to_string(a) + " entries");
  }
  RelevanceVector relevance;
  std::size_t revealed = 0;
  for (const auto& v : arr) {
    if (!v.is_number_integer()) return error(422, "relevance entries must be -1, 0 or 1");
    const auto x = v.get<long long>();
    if (x < -1 || x > 1) return error(422, "relevance entries must be -1, 0 or 1");
    relevance.push_back(static_cast<std::int8_t>(x));
    revealed += x != 0;
  }
  const std::size_t allowed = budget(*session);
  if (revealed > allowed) {
    return error(422, "disclosure budget exceeded: " + std::to_string(revealed) + " > " +
                          std::to_string(allowed));
  }

  const auto& p = *model_;
  const std::size_t shown_round = session->state.round + 1;
  const std::string shown_id(gallery_->id(session->candidate));
  const auto enc = encode_round(p, relevance, gallery_->attributes(session->candidate),
                                gallery_->features(session->candidate), session->mode);
  const Vector query = aggregate(p, enc.fused, session->state);
  Rng unused(0);
  session->candidate = next_candidate(gallery_->feature_matrix(), query, options_.k, session->shown,
                                      CandidatePolicy::kGreedy, unused);
  session->shown.push_back(session->candidate);
  session->transcript.push_back({shown_round, shown_id, std::move(relevance)});
  if (session->state.round >= options_.rounds) session->done = true;
  return {200, round_payload(*session)};
}

ServiceResponse SessionService::confirm_match(std::string_view session_id,
                                              const nlohmann::json& body) {
  auto session = find(session_id);
  if (!session) return error(404, "unknown session");
  std::lock_guard lock(session->mutex);
  session->last_access = options_.clock();
  if (!body.is_object() || !body.contains("candidate_id") || !body["candidate_id"].is_string()) {
    return error(422, "body must contain candidate_id");
  }
  if (session->matched) return error(409, "session already confirmed");
  if (body["candidate_id"].get<std::string>() != gallery_->id(session->candidate)) {
    return error(409, "candidate_id is not the current candidate");
  }
  session->matched = true;
  session->done = true;
  return {200, {{"session_id", session->id}, {"done", true}, {"matched", true},
                {"candidate_id", std::string(gallery_->id(session->candidate))}}};
}

ServiceResponse SessionService::get_state(std::string_view session_id) {
  auto session = find(session_id);
  if (!session) return error(404, "unknown session");
  std::lock_guard lock(session->mutex);
  session->last_access = options_.clock();
  auto body = round_payload(*session);
  auto& transcript = body["transcript"] = nlohmann::json::array();
  for (const auto& e : session->transcript) {
    nlohmann::json rel = nlohmann::json::array();
    for (auto r : e.relevance) rel.push_back(int(r));
    transcript.push_back({{"round", e.round}, {"candidate_id", e.candidate_id}, {"relevance", rel}});
  }
  auto& history = body["history"] = nlohmann::json::array();
  for (auto i : session->shown) history.push_back(std::string(gallery_->id(i)));
  body["seed"] = session->seed;
  return {200, body};
}

ServiceResponse SessionService::gallery_item(std::string_view item_id) const {
  const auto index = gallery_->find(item_id);
  if (!index) return error(404, "unknown gallery item");
  return {200, candidate_card(*index)};
}

ServiceResponse SessionService::health() const {
  return {200,
          {{"status", "ok"},
           {"model_loaded", model_ != nullptr},
           {"gallery_size", gallery_->size()},
           {"attributes", gallery_->attr_dim()},
           {"rounds", options_.rounds}}};
}

void SessionService::mount(httplib::Server& server) {
  auto reply = [](httplib::Response& res, const ServiceResponse& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  auto parse = [](const httplib::Request& req, nlohmann::json& out) {
    if (req.body.empty()) {
      out = nlohmann::json::object();
      return true;
    }
    out = nlohmann::json::parse(req.body, nullptr, false);
    return !out.is_discarded();
  };

  server.Post("/sessions", [this, reply, parse](const httplib::Request& req, httplib::Response& res) {
    nlohmann::json body;
    if (!parse(req, body)) return reply(res, error(400, "malformed JSON"));
    reply(res, create_session(body));
  });
  server.Post(R"(/sessions/([^/]+)/feedback)",
              [this, reply, parse](const httplib::Request& req, httplib::Response& res) {
                nlohmann::json body;
                if (!parse(req, body)) return reply(res, error(422, "malformed JSON"));
                reply(res, submit_feedback(req.matches[1].str(), body));
              });
  server.Post(R"(/sessions/([^/]+)/confirm)",
              [this, reply, parse](const httplib::Request& req, httplib::Response& res) {
                nlohmann::json body;
                if (!parse(req, body)) return reply(res, error(422, "malformed JSON"));
                reply(res, confirm_match(req.matches[1].str(), body));
              });
  server.Get(R"(/sessions/([^/]+))", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, get_state(req.matches[1].str()));
  });
  server.Get(R"(/gallery/items/([^/]+))",
             [this, reply](const httplib::Request& req, httplib::Response& res) {
               reply(res, gallery_item(req.matches[1].str()));
             });
  server.Get("/healthz", [this, reply](const httplib::Request&, httplib::Response& res) {
    reply(res, health());
  });
  if (!options_.asset_dir.empty()) server.set_mount_point("/assets", options_.asset_dir.string());
}

}  // namespace gotcha
