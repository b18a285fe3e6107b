#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gotcha/gallery.hpp"

namespace gotcha {

/// Signed binary attributes, one byte per entry, each -1 or +1.
using AttributeVector = std::vector<std::int8_t>;
/// Per-attribute agreement: +1 same, -1 different, 0 undisclosed.
using RelevanceVector = std::vector<std::int8_t>;

enum class DisclosureMode {
  kProgressive,  // relevance partially masked following the schedule
  kFull,         // complete relevance every round
  kFullNoAttr,   // complete relevance, candidate attributes withheld from the encoder
};

DisclosureMode parse_mode(std::string_view text);
std::string_view to_string(DisclosureMode mode);

/// Fraction of relevance entries hidden at each round. Non-increasing, each in [0, 1].
class DisclosureSchedule {
 public:
  DisclosureSchedule();  // 0.5, 0.3, 0.2, 0.1, 0.0
  explicit DisclosureSchedule(std::vector<double> proportions);

  /// Parses a comma separated list such as "0.5,0.3,0.2,0.1,0.0".
  static DisclosureSchedule parse(std::string_view text);

  std::size_t rounds() const { return proportions_.size(); }
  double proportion(std::size_t round) const { return proportions_.at(round); }
  const std::vector<double>& proportions() const { return proportions_; }

  /// round(p_t * attrs), halves rounded up.
  std::size_t masked_count(std::size_t round, std::size_t attrs) const;
  /// Nonzero entries a witness may reveal at `round`.
  std::size_t budget(std::size_t round, std::size_t attrs) const {
    return attrs - masked_count(round, attrs);
  }

  std::string to_string() const;

  friend bool operator==(const DisclosureSchedule&, const DisclosureSchedule&) = default;

 private:
  std::vector<double> proportions_;
};

/// Which relevance positions stay hidden in each round of one episode.
///
/// In nested mode one permutation is drawn per episode and the masked set at
/// round t is the last masked_count(t) entries of it, so hidden sets only shrink.
/// With nesting off, every round draws its own permutation.
class MaskPlan {
 public:
  MaskPlan(DisclosureSchedule schedule, std::size_t attrs, std::uint64_t seed,
           bool nested = true);

  std::size_t attrs() const { return attrs_; }
  std::size_t rounds() const { return schedule_.rounds(); }
  const DisclosureSchedule& schedule() const { return schedule_; }
  const std::vector<std::size_t>& order() const { return order_; }
  bool nested() const { return nested_; }

  std::size_t masked_count(std::size_t round) const;
  /// Sorted indices hidden at `round`.
  std::vector<std::size_t> masked_indices(std::size_t round) const;

 private:
  std::vector<std::size_t> order_for_round(std::size_t round) const;

  DisclosureSchedule schedule_;
  std::size_t attrs_;
  std::uint64_t seed_;
  bool nested_;
  std::vector<std::size_t> order_;
};

/// Throws ShapeError unless every entry is -1 or +1.
void validate_attributes(std::span<const std::int8_t> values);

RelevanceVector compute_relevance(std::span<const std::int8_t> candidate,
                                  std::span<const std::int8_t> target);

MaskPlan make_mask_plan(const DisclosureSchedule& schedule, std::size_t attrs,
                        std::uint64_t seed, bool nested = true);

RelevanceVector apply_mask(std::span<const std::int8_t> relevance, const MaskPlan& plan,
                           std::size_t round);

struct WitnessFeedback {
  RelevanceVector relevance;
  bool matched = false;
};

/// One round of the simulated witness: compare the shown candidate against the
/// remembered target. Full modes never mask.
WitnessFeedback witness_round(const RecordRef& target, const RecordRef& candidate,
                              const MaskPlan& plan, std::size_t round, DisclosureMode mode);

}  // namespace gotcha
