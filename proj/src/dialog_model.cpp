#include "gotcha/dialog_model.hpp"

#include <algorithm>

#include "gotcha/error.hpp"
#include "gotcha/rng.hpp"

namespace gotcha {

ModelParameters::ModelParameters(const ModelDims& d)
    : dims(d),
      indication(2 * d.attrs, d.embed),
      image(d.features, d.embed),
      fusion(2 * d.embed, d.embed),
      gru(d.embed, d.hidden),
      output(d.hidden, d.embed) {
  if (d.attrs == 0 || d.features == 0 || d.embed == 0 || d.hidden == 0) {
    throw ConfigError("model dimensions must be positive");
  }
}

ModelParameters ModelParameters::random(const ModelDims& d, std::uint64_t seed) {
  ModelParameters p(d);
  Rng rng(derive_seed(seed, "init"));
  p.indication.init_uniform(rng);
  p.image.init_uniform(rng);
  p.fusion.init_uniform(rng);
  p.gru.init_uniform(rng);
  p.output.init_uniform(rng);
  return p;
}

namespace {

template <typename Ref, typename Self>
std::vector<Ref> collect(Self& p) {
  std::vector<Ref> out;
  auto mat = [&](const char* name, auto& m) {
    out.push_back(Ref{name, m.rows, m.cols, std::span(m.data)});
  };
  auto vec = [&](const char* name, auto& v) { out.push_back(Ref{name, v.size(), 1, std::span(v)}); };
  mat("indication.weight", p.indication.weight);
  vec("indication.bias", p.indication.bias);
  mat("image.weight", p.image.weight);
  vec("image.bias", p.image.bias);
  mat("fusion.weight", p.fusion.weight);
  vec("fusion.bias", p.fusion.bias);
  mat("gru.update_in", p.gru.update_in);
  mat("gru.update_hidden", p.gru.update_hidden);
  vec("gru.update_bias", p.gru.update_bias);
  mat("gru.reset_in", p.gru.reset_in);
  mat("gru.reset_hidden", p.gru.reset_hidden);
  vec("gru.reset_bias", p.gru.reset_bias);
  mat("gru.cand_in", p.gru.cand_in);
  mat("gru.cand_hidden", p.gru.cand_hidden);
  vec("gru.cand_bias", p.gru.cand_bias);
  mat("output.weight", p.output.weight);
  vec("output.bias", p.output.bias);
  return out;
}

}  // namespace

std::vector<TensorRef> ModelParameters::tensors() { return collect<TensorRef>(*this); }

std::vector<ConstTensorRef> ModelParameters::tensors() const {
  return collect<ConstTensorRef>(*this);
}

std::size_t ModelParameters::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors()) n += t.values.size();
  return n;
}

void ModelParameters::set_zero() {
  for (auto& t : tensors()) std::fill(t.values.begin(), t.values.end(), 0.0);
}

std::vector<double> ModelParameters::flatten() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  for (const auto& t : tensors()) flat.insert(flat.end(), t.values.begin(), t.values.end());
  return flat;
}

void ModelParameters::unflatten(std::span<const double> flat) {
  if (flat.size() != parameter_count()) throw ShapeError("flat parameter vector has the wrong size");
  std::size_t at = 0;
  for (auto& t : tensors()) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(at), t.values.size(), t.values.begin());
    at += t.values.size();
  }
}

EncodeCache encode_round(const ModelParameters& p, std::span<const std::int8_t> relevance,
                         std::span<const std::int8_t> attributes, std::span<const float> features,
                         DisclosureMode mode) {
  const auto& d = p.dims;
  if (relevance.size() != d.attrs || attributes.size() != d.attrs) {
    throw ShapeError("encoder expects " + std::to_string(d.attrs) + " relevance/attribute entries");
  }
  if (features.size() != d.features) {
    throw ShapeError("encoder expects " + std::to_string(d.features) + " features");
  }

  EncodeCache c;
  c.indication_input.resize(2 * d.attrs, 0.0);
  for (std::size_t i = 0; i < d.attrs; ++i) {
    c.indication_input[i] = relevance[i];
    if (mode != DisclosureMode::kFullNoAttr) c.indication_input[d.attrs + i] = attributes[i];
  }
  c.image_input.assign(features.begin(), features.end());

  const Vector x = affine_forward(p.indication, c.indication_input);
  const Vector f = affine_forward(p.image, c.image_input);
  c.fusion_input = x;
  c.fusion_input.insert(c.fusion_input.end(), f.begin(), f.end());
  c.fused = affine_forward(p.fusion, c.fusion_input);
  return c;
}

Vector aggregate(const ModelParameters& p, std::span<const double> fused, DialogState& state,
                 GruCache* cache) {
  if (state.h.size() != p.dims.hidden) throw ShapeError("dialog state has the wrong hidden size");
  GruCache c = gru_forward(p.gru, fused, state.h);
  Vector s = affine_forward(p.output, c.h);
  state.h = c.h;
  ++state.round;
  if (cache) *cache = std::move(c);
  return s;
}

EpisodeTrace episode_trace(const ModelParameters& p, std::span<const RoundInput> rounds,
                           DisclosureMode mode) {
  if (rounds.empty()) throw ConfigError("an episode needs at least one round");
  EpisodeTrace trace;
  auto state = DialogState::fresh(p.dims);
  for (const auto& r : rounds) {
    trace.encode.push_back(encode_round(p, r.relevance, r.attributes, r.features, mode));
    GruCache gc;
    trace.queries.push_back(aggregate(p, trace.encode.back().fused, state, &gc));
    trace.gru.push_back(std::move(gc));
  }
  return trace;
}

std::vector<Vector> episode_forward(const ModelParameters& p, std::span<const RoundInput> rounds,
                                    DisclosureMode mode) {
  return episode_trace(p, rounds, mode).queries;
}

void episode_backward(const ModelParameters& p, const EpisodeTrace& trace,
                      std::span<const Vector> grad_queries, ModelParameters& grad) {
  const auto& d = p.dims;
  const std::size_t rounds = trace.queries.size();
  if (grad_queries.size() != rounds) throw ShapeError("one query gradient per round is required");

  Vector grad_h_next(d.hidden, 0.0);
  for (std::size_t t = rounds; t-- > 0;) {
    // s_t = W_G h_t, and h_t also feeds round t+1.
    Vector grad_h = grad_h_next;
    affine_backward(p.output, trace.gru[t].h, grad_queries[t], grad.output, grad_h);

    Vector grad_fused(d.embed, 0.0);
    std::fill(grad_h_next.begin(), grad_h_next.end(), 0.0);
    gru_backward(p.gru, trace.gru[t], grad_h, grad.gru, grad_fused, grad_h_next);

    const auto& enc = trace.encode[t];
    Vector grad_fusion_in(2 * d.embed, 0.0);
    affine_backward(p.fusion, enc.fusion_input, grad_fused, grad.fusion, grad_fusion_in);
    const auto grad_x = std::span<const double>(grad_fusion_in).first(d.embed);
    const auto grad_f = std::span<const double>(grad_fusion_in).subspan(d.embed);
    affine_backward(p.indication, enc.indication_input, grad_x, grad.indication, {});
    affine_backward(p.image, enc.image_input, grad_f, grad.image, {});
  }
}

}  // namespace gotcha
