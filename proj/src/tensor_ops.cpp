#include "gotcha/tensor_ops.hpp"

#include <algorithm>
#include <cmath>

#include "gotcha/error.hpp"
#include "gotcha/rng.hpp"

namespace gotcha {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw ShapeError(what);
}

void fill_uniform(std::vector<double>& values, double bound, Rng& rng) {
  for (auto& v : values) v = rng.uniform(-bound, bound);
}

// out += M x
void matvec_add(const Matrix& m, std::span<const double> x, std::span<double> out) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    const double* row = m.data.data() + r * m.cols;
    double acc = 0.0;
    for (std::size_t c = 0; c < m.cols; ++c) acc += row[c] * x[c];
    out[r] += acc;
  }
}

// out += M^T g
void matvec_t_add(const Matrix& m, std::span<const double> g, std::span<double> out) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    const double* row = m.data.data() + r * m.cols;
    const double gr = g[r];
    for (std::size_t c = 0; c < m.cols; ++c) out[c] += row[c] * gr;
  }
}

// G += g x^T
void outer_add(std::span<const double> g, std::span<const double> x, Matrix& grad) {
  for (std::size_t r = 0; r < grad.rows; ++r) {
    double* row = grad.data.data() + r * grad.cols;
    const double gr = g[r];
    if (gr == 0.0) continue;
    for (std::size_t c = 0; c < grad.cols; ++c) row[c] += gr * x[c];
  }
}

void add_into(std::span<const double> src, std::span<double> dst) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

}  // namespace

void Affine::init_uniform(Rng& rng) {
  fill_uniform(weight.data, 1.0 / std::sqrt(static_cast<double>(in_dim())), rng);
  std::fill(bias.begin(), bias.end(), 0.0);
}

Vector affine_forward(const Affine& layer, std::span<const double> input) {
  require(input.size() == layer.in_dim(), "affine input has the wrong length");
  Vector out(layer.bias);
  matvec_add(layer.weight, input, out);
  return out;
}

void affine_backward(const Affine& layer, std::span<const double> input,
                     std::span<const double> grad_out, Affine& grad,
                     std::span<double> grad_input) {
  require(input.size() == layer.in_dim(), "affine input has the wrong length");
  require(grad_out.size() == layer.out_dim(), "affine output gradient has the wrong length");
  require(grad.weight.rows == layer.out_dim() && grad.weight.cols == layer.in_dim(),
          "affine gradient buffer has the wrong shape");
  outer_add(grad_out, input, grad.weight);
  add_into(grad_out, grad.bias);
  if (!grad_input.empty()) {
    require(grad_input.size() == layer.in_dim(), "affine input gradient has the wrong length");
    matvec_t_add(layer.weight, grad_out, grad_input);
  }
}

GruParams::GruParams(std::size_t input_dim, std::size_t hidden_dim)
    : update_in(hidden_dim, input_dim),
      update_hidden(hidden_dim, hidden_dim),
      update_bias(hidden_dim, 0.0),
      reset_in(hidden_dim, input_dim),
      reset_hidden(hidden_dim, hidden_dim),
      reset_bias(hidden_dim, 0.0),
      cand_in(hidden_dim, input_dim),
      cand_hidden(hidden_dim, hidden_dim),
      cand_bias(hidden_dim, 0.0) {}

void GruParams::init_uniform(Rng& rng) {
  for (Matrix* m : {&update_in, &update_hidden, &reset_in, &reset_hidden, &cand_in, &cand_hidden}) {
    fill_uniform(m->data, 1.0 / std::sqrt(static_cast<double>(m->cols)), rng);
  }
  for (Vector* b : {&update_bias, &reset_bias, &cand_bias}) std::fill(b->begin(), b->end(), 0.0);
}

GruCache gru_forward(const GruParams& p, std::span<const double> input,
                     std::span<const double> h_prev) {
  require(input.size() == p.input_dim(), "GRU input has the wrong length");
  require(h_prev.size() == p.hidden_dim(), "GRU hidden state has the wrong length");
  const std::size_t hd = p.hidden_dim();

  GruCache c;
  c.input.assign(input.begin(), input.end());
  c.h_prev.assign(h_prev.begin(), h_prev.end());

  c.update = p.update_bias;
  matvec_add(p.update_in, input, c.update);
  matvec_add(p.update_hidden, h_prev, c.update);
  c.reset = p.reset_bias;
  matvec_add(p.reset_in, input, c.reset);
  matvec_add(p.reset_hidden, h_prev, c.reset);
  for (std::size_t i = 0; i < hd; ++i) {
    c.update[i] = sigmoid(c.update[i]);
    c.reset[i] = sigmoid(c.reset[i]);
  }

  Vector gated(hd);
  for (std::size_t i = 0; i < hd; ++i) gated[i] = c.reset[i] * h_prev[i];
  c.candidate = p.cand_bias;
  matvec_add(p.cand_in, input, c.candidate);
  matvec_add(p.cand_hidden, gated, c.candidate);

  c.h.resize(hd);
  for (std::size_t i = 0; i < hd; ++i) {
    c.candidate[i] = std::tanh(c.candidate[i]);
    c.h[i] = (1.0 - c.update[i]) * h_prev[i] + c.update[i] * c.candidate[i];
  }
  return c;
}

void gru_backward(const GruParams& p, const GruCache& c, std::span<const double> grad_h,
                  GruParams& grad, std::span<double> grad_input, std::span<double> grad_h_prev) {
  const std::size_t hd = p.hidden_dim();
  require(grad_h.size() == hd, "GRU output gradient has the wrong length");

  Vector d_update_pre(hd), d_cand_pre(hd), d_reset_pre(hd), d_h_prev(hd, 0.0), gated(hd);
  for (std::size_t i = 0; i < hd; ++i) {
    const double z = c.update[i];
    d_h_prev[i] = grad_h[i] * (1.0 - z);
    d_update_pre[i] = grad_h[i] * (c.candidate[i] - c.h_prev[i]) * z * (1.0 - z);
    d_cand_pre[i] = grad_h[i] * z * (1.0 - c.candidate[i] * c.candidate[i]);
    gated[i] = c.reset[i] * c.h_prev[i];
  }

  // Candidate path: c = tanh(Uc x + Vc (r*h) + bc)
  outer_add(d_cand_pre, c.input, grad.cand_in);
  outer_add(d_cand_pre, gated, grad.cand_hidden);
  add_into(d_cand_pre, grad.cand_bias);
  Vector d_gated(hd, 0.0);
  matvec_t_add(p.cand_hidden, d_cand_pre, d_gated);
  for (std::size_t i = 0; i < hd; ++i) {
    d_h_prev[i] += d_gated[i] * c.reset[i];
    const double r = c.reset[i];
    d_reset_pre[i] = d_gated[i] * c.h_prev[i] * r * (1.0 - r);
  }

  outer_add(d_update_pre, c.input, grad.update_in);
  outer_add(d_update_pre, c.h_prev, grad.update_hidden);
  add_into(d_update_pre, grad.update_bias);
  outer_add(d_reset_pre, c.input, grad.reset_in);
  outer_add(d_reset_pre, c.h_prev, grad.reset_hidden);
  add_into(d_reset_pre, grad.reset_bias);

  matvec_t_add(p.update_hidden, d_update_pre, d_h_prev);
  matvec_t_add(p.reset_hidden, d_reset_pre, d_h_prev);

  if (!grad_input.empty()) {
    require(grad_input.size() == p.input_dim(), "GRU input gradient has the wrong length");
    matvec_t_add(p.update_in, d_update_pre, grad_input);
    matvec_t_add(p.reset_in, d_reset_pre, grad_input);
    matvec_t_add(p.cand_in, d_cand_pre, grad_input);
  }
  if (!grad_h_prev.empty()) {
    require(grad_h_prev.size() == hd, "GRU state gradient has the wrong length");
    add_into(d_h_prev, grad_h_prev);
  }
}

void adam_step(std::span<const TensorRef> params, std::span<const ConstTensorRef> grads,
               AdamState& state, double lr) {
  if (params.size() != grads.size()) throw ShapeError("Adam: parameter/gradient block count differs");
  for (std::size_t b = 0; b < params.size(); ++b) {
    if (params[b].values.size() != grads[b].values.size()) {
      throw ShapeError("Adam: block '" + params[b].name + "' gradient has the wrong size");
    }
    for (std::size_t i = 0; i < grads[b].values.size(); ++i) {
      if (!std::isfinite(grads[b].values[i])) {
        throw NumericError("Adam: non-finite gradient in block '" + grads[b].name + "' at " +
                           std::to_string(i));
      }
    }
  }
  if (state.first.empty()) {
    for (const auto& p : params) {
      state.first.emplace_back(p.values.size(), 0.0);
      state.second.emplace_back(p.values.size(), 0.0);
    }
  }
  if (state.first.size() != params.size()) throw ShapeError("Adam: state does not mirror parameters");

  ++state.step;
  const auto& cfg = state.config;
  const double t = static_cast<double>(state.step);
  const double correct1 = 1.0 - std::pow(cfg.beta1, t);
  const double correct2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t b = 0; b < params.size(); ++b) {
    auto& m = state.first[b];
    auto& v = state.second[b];
    if (m.size() != params[b].values.size()) throw ShapeError("Adam: state does not mirror parameters");
    const auto g = grads[b].values;
    auto w = params[b].values;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double m_hat = m[i] / correct1;
      const double v_hat = v[i] / correct2;
      w[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }
}

GradCheckResult grad_check(const std::function<double(std::span<const double>)>& f,
                           std::span<const double> theta, std::span<const double> analytic,
                           double h) {
  if (theta.size() != analytic.size()) throw ShapeError("grad_check: gradient length differs");
  GradCheckResult result;
  std::vector<double> probe(theta.begin(), theta.end());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + h;
    const double up = f(probe);
    probe[i] = saved - h;
    const double down = f(probe);
    probe[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    const double rel = std::abs(analytic[i] - numeric) / denom;
    if (i == 0 || rel > result.max_rel_error) {
      result = {rel, i, analytic[i], numeric};
    }
  }
  return result;
}

}  // namespace gotcha
