#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "gotcha/feedback_sim.hpp"
#include "gotcha/tensor_ops.hpp"

namespace gotcha {

struct ModelDims {
  std::size_t attrs = 40;
  std::size_t features = 256;
  std::size_t embed = 256;
  std::size_t hidden = 256;

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

/// Encoder and aggregator weights.
///
/// indication: [relevance; attributes] (2A) -> E
/// image:      candidate features (F) -> E
/// fusion:     [x; f] (2E) -> E
/// gru:        E -> H
/// output:     H -> E, producing the query representation compared to gallery features
struct ModelParameters {
  ModelDims dims;
  Affine indication;
  Affine image;
  Affine fusion;
  GruParams gru;
  Affine output;

  ModelParameters() = default;
  explicit ModelParameters(const ModelDims& d);

  static ModelParameters zeros(const ModelDims& d) { return ModelParameters(d); }
  static ModelParameters random(const ModelDims& d, std::uint64_t seed);

  std::vector<TensorRef> tensors();
  std::vector<ConstTensorRef> tensors() const;
  std::size_t parameter_count() const;
  void set_zero();
  /// Copies every value into / out of one flat vector, block order as tensors().
  std::vector<double> flatten() const;
  void unflatten(std::span<const double> flat);

  friend bool operator==(const ModelParameters&, const ModelParameters&) = default;
};

/// What the encoder sees in one round.
struct RoundInput {
  RelevanceVector relevance;
  AttributeVector attributes;
  std::vector<float> features;
};

struct EncodeCache {
  Vector indication_input;  // [relevance; attributes or zeros]
  Vector image_input;       // candidate features widened to double
  Vector fusion_input;      // [x; f]
  Vector fused;             // r_t
};

EncodeCache encode_round(const ModelParameters& p, std::span<const std::int8_t> relevance,
                         std::span<const std::int8_t> attributes, std::span<const float> features,
                         DisclosureMode mode);

struct DialogState {
  Vector h;
  std::size_t round = 0;
  std::vector<std::size_t> history;

  static DialogState fresh(const ModelDims& dims) { return {Vector(dims.hidden, 0.0), 0, {}}; }
};

/// Feeds r_t through the GRU and the output map; advances the state.
/// Returns s_t. When `cache` is non-null the GRU activations are stored there.
Vector aggregate(const ModelParameters& p, std::span<const double> fused, DialogState& state,
                 GruCache* cache = nullptr);

/// Activations of a whole dialog, kept for backpropagation.
struct EpisodeTrace {
  std::vector<EncodeCache> encode;
  std::vector<GruCache> gru;
  std::vector<Vector> queries;  // s_t per round
};

EpisodeTrace episode_trace(const ModelParameters& p, std::span<const RoundInput> rounds,
                           DisclosureMode mode);

/// Representations s_1..s_T for a dialog starting from h_0 = 0.
std::vector<Vector> episode_forward(const ModelParameters& p, std::span<const RoundInput> rounds,
                                    DisclosureMode mode);

/// Backpropagation through time given dL/ds_t for every round. Accumulates into `grad`.
void episode_backward(const ModelParameters& p, const EpisodeTrace& trace,
                      std::span<const Vector> grad_queries, ModelParameters& grad);

}  // namespace gotcha
