#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "gotcha/dialog_model.hpp"
#include "gotcha/feedback_sim.hpp"
#include "gotcha/gallery.hpp"

namespace httplib {
class Server;
}

namespace gotcha {

struct ServiceOptions {
  using Clock = std::chrono::steady_clock;

  std::size_t k = 10;
  std::size_t rounds = 5;
  DisclosureSchedule schedule;
  std::chrono::seconds idle_ttl{30 * 60};
  std::filesystem::path asset_dir;  // optional; images named <id>.jpg / .png
  std::function<Clock::time_point()> clock = [] { return Clock::now(); };
};

/// Status code plus JSON body; handlers never throw for client errors.
struct ServiceResponse {
  int status = 200;
  nlohmann::json body;
};

/// Live retrieval dialogs for a human witness or a remote simulator.
///
/// The model and gallery are shared read-only. Each session is guarded by its
/// own mutex, so calls on one session are serialized while different sessions
/// proceed concurrently. Retrieval is always greedy with shown candidates
/// excluded.
class SessionService {
 public:
  SessionService(std::shared_ptr<const ModelParameters> model,
                 std::shared_ptr<const Gallery> gallery, ServiceOptions options = {});

  /// {mode?, schedule?, seed?} -> {session_id, round, candidate, ...}
  ServiceResponse create_session(const nlohmann::json& request);
  /// {relevance: [A values in -1/0/1]} -> {round, candidate, done, disclosure_budget}
  ServiceResponse submit_feedback(std::string_view session_id, const nlohmann::json& body);
  /// {candidate_id} -> {done: true}
  ServiceResponse confirm_match(std::string_view session_id, const nlohmann::json& body);
  ServiceResponse get_state(std::string_view session_id);
  ServiceResponse gallery_item(std::string_view item_id) const;
  ServiceResponse health() const;

  /// Registers the JSON routes (and the asset mount, when configured).
  void mount(httplib::Server& server);

  std::size_t session_count();

 private:
  struct TranscriptEntry {
    std::size_t round;
    std::string candidate_id;
    RelevanceVector relevance;
  };

  struct Session {
    std::mutex mutex;
    std::string id;
    DisclosureMode mode = DisclosureMode::kProgressive;
    DisclosureSchedule schedule;
    std::uint64_t seed = 0;
    DialogState state;
    std::size_t candidate = 0;
    std::vector<std::size_t> shown;
    std::vector<TranscriptEntry> transcript;
    bool done = false;
    bool matched = false;
    ServiceOptions::Clock::time_point created;
    ServiceOptions::Clock::time_point last_access;
  };

  std::shared_ptr<Session> find(std::string_view id);
  void purge_expired(ServiceOptions::Clock::time_point now);
  nlohmann::json candidate_card(std::size_t index) const;
  std::size_t budget(const Session& s) const;
  nlohmann::json round_payload(const Session& s) const;

  std::shared_ptr<const ModelParameters> model_;
  std::shared_ptr<const Gallery> gallery_;
  ServiceOptions options_;

  std::mutex sessions_mutex_;
  std::unordered_map<std::string, std::shared_ptr<Session>> sessions_;
  std::mt19937_64 token_rng_;
};

}  // namespace gotcha
