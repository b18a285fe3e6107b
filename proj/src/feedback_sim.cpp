#include "gotcha/feedback_sim.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <sstream>

#include "gotcha/error.hpp"
#include "gotcha/rng.hpp"

namespace gotcha {

DisclosureMode parse_mode(std::string_view text) {
  if (text == "progressive") return DisclosureMode::kProgressive;
  if (text == "full") return DisclosureMode::kFull;
  if (text == "full-no-attr") return DisclosureMode::kFullNoAttr;
  throw ConfigError("unknown disclosure mode '" + std::string(text) + "'");
}

std::string_view to_string(DisclosureMode mode) {
  switch (mode) {
    case DisclosureMode::kProgressive: return "progressive";
    case DisclosureMode::kFull: return "full";
    case DisclosureMode::kFullNoAttr: return "full-no-attr";
  }
  return "unknown";
}

DisclosureSchedule::DisclosureSchedule() : proportions_{0.5, 0.3, 0.2, 0.1, 0.0} {}

DisclosureSchedule::DisclosureSchedule(std::vector<double> proportions)
    : proportions_(std::move(proportions)) {
  if (proportions_.empty()) throw ConfigError("disclosure schedule is empty");
  for (std::size_t t = 0; t < proportions_.size(); ++t) {
    const double p = proportions_[t];
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("schedule fractions must lie in [0, 1]");
    if (t > 0 && p > proportions_[t - 1]) {
      throw ConfigError("schedule fractions must be non-increasing");
    }
  }
}

DisclosureSchedule DisclosureSchedule::parse(std::string_view text) {
  std::vector<double> values;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find(',', start);
    if (end == std::string_view::npos) end = text.size();
    std::string token(text.substr(start, end - start));
    token.erase(0, token.find_first_not_of(" \t"));
    token.erase(token.find_last_not_of(" \t") + 1);
    if (token.empty()) throw ConfigError("empty entry in schedule '" + std::string(text) + "'");
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(token, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != token.size()) throw ConfigError("bad schedule entry '" + token + "'");
    values.push_back(v);
    start = end + 1;
  }
  return DisclosureSchedule(std::move(values));
}

std::size_t DisclosureSchedule::masked_count(std::size_t round, std::size_t attrs) const {
  const double exact = proportion(round) * static_cast<double>(attrs);
  return std::min(attrs, static_cast<std::size_t>(std::floor(exact + 0.5)));
}

std::string DisclosureSchedule::to_string() const {
  std::ostringstream out;
  for (std::size_t t = 0; t < proportions_.size(); ++t) {
    if (t) out << ',';
    out << proportions_[t];
  }
  return out.str();
}

MaskPlan::MaskPlan(DisclosureSchedule schedule, std::size_t attrs, std::uint64_t seed,
                   bool nested)
    : schedule_(std::move(schedule)), attrs_(attrs), seed_(seed), nested_(nested) {
  if (attrs == 0) throw ConfigError("mask plan needs at least one attribute");
  order_ = order_for_round(0);
}

std::vector<std::size_t> MaskPlan::order_for_round(std::size_t round) const {
  std::vector<std::size_t> order(attrs_);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(nested_ ? seed_ : derive_seed(seed_, round));
  // Fisher-Yates, uniform over permutations.
  for (std::size_t i = attrs_; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.index(i));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

std::size_t MaskPlan::masked_count(std::size_t round) const {
  if (round >= rounds()) throw std::out_of_range("round outside the disclosure schedule");
  return schedule_.masked_count(round, attrs_);
}

std::vector<std::size_t> MaskPlan::masked_indices(std::size_t round) const {
  const auto count = masked_count(round);
  const auto order = nested_ ? order_ : order_for_round(round);
  std::vector<std::size_t> masked(order.end() - static_cast<std::ptrdiff_t>(count), order.end());
  std::sort(masked.begin(), masked.end());
  return masked;
}

void validate_attributes(std::span<const std::int8_t> values) {
  for (auto v : values) {
    if (v != 1 && v != -1) throw ShapeError("attributes must be ±1");
  }
}

RelevanceVector compute_relevance(std::span<const std::int8_t> candidate,
                                  std::span<const std::int8_t> target) {
  if (candidate.size() != target.size()) {
    throw ShapeError("relevance needs equal-length attribute vectors (" +
                     std::to_string(candidate.size()) + " vs " + std::to_string(target.size()) +
                     ")");
  }
  RelevanceVector out(candidate.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<std::int8_t>(candidate[i] * target[i]);
  }
  return out;
}

MaskPlan make_mask_plan(const DisclosureSchedule& schedule, std::size_t attrs,
                        std::uint64_t seed, bool nested) {
  return MaskPlan(schedule, attrs, seed, nested);
}

RelevanceVector apply_mask(std::span<const std::int8_t> relevance, const MaskPlan& plan,
                           std::size_t round) {
  if (relevance.size() != plan.attrs()) {
    throw ShapeError("relevance length does not match the mask plan");
  }
  RelevanceVector out(relevance.begin(), relevance.end());
  for (auto i : plan.masked_indices(round)) out[i] = 0;
  return out;
}

WitnessFeedback witness_round(const RecordRef& target, const RecordRef& candidate,
                              const MaskPlan& plan, std::size_t round, DisclosureMode mode) {
  WitnessFeedback fb;
  fb.matched = candidate.id == target.id;
  fb.relevance = compute_relevance(candidate.attributes, target.attributes);
  if (mode == DisclosureMode::kProgressive) {
    fb.relevance = apply_mask(fb.relevance, plan, round);
  } else if (round >= plan.rounds()) {
    throw std::out_of_range("round outside the disclosure schedule");
  }
  return fb;
}

}  // namespace gotcha
