#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "olive/rng.hpp"

namespace olive {

// One-hidden-layer perceptron over a flat parameter vector, so model deltas
// are ordinary float vectors the aggregation pipeline can sparsify. Layout:
// W1 (inputs x hidden, row-major by input), b1, W2 (hidden x outputs), b2.
struct MlpShape {
  uint32_t inputs = 0;
  uint32_t hidden = 0;
  uint32_t outputs = 0;

  uint64_t w1_offset() const { return 0; }
  uint64_t b1_offset() const { return uint64_t(inputs) * hidden; }
  uint64_t w2_offset() const { return b1_offset() + hidden; }
  uint64_t b2_offset() const { return w2_offset() + uint64_t(hidden) * outputs; }
  uint64_t param_count() const { return b2_offset() + outputs; }
};

// He-style init: weights scaled by fan-in, biases zero.
inline std::vector<float> init_params(const MlpShape& shape, Rng& rng) {
  std::vector<float> theta(shape.param_count(), 0.0f);
  const double w1_scale = std::sqrt(2.0 / double(shape.inputs));
  for (uint64_t p = shape.w1_offset(); p < shape.b1_offset(); ++p) {
    theta[p] = float(rng.normal() * w1_scale);
  }
  const double w2_scale = std::sqrt(2.0 / double(shape.hidden));
  for (uint64_t p = shape.w2_offset(); p < shape.b2_offset(); ++p) {
    theta[p] = float(rng.normal() * w2_scale);
  }
  return theta;
}

// Class probabilities for one sample. `hidden_scale`, when nonempty, is an
// element-wise multiplier on the hidden activations - the dropout hook
// (inverted masks: 0 or 1/keep). Training and inference share this path so
// the two cannot drift.
inline void mlp_forward(const MlpShape& shape, std::span<const float> theta,
                        std::span<const float> x, std::span<const float> hidden_scale,
                        std::vector<float>& z1, std::vector<float>& probs) {
  z1.assign(shape.hidden, 0.0f);
  const float* w1 = theta.data() + shape.w1_offset();
  const float* b1 = theta.data() + shape.b1_offset();
  const float* w2 = theta.data() + shape.w2_offset();
  const float* b2 = theta.data() + shape.b2_offset();
  for (uint32_t h = 0; h < shape.hidden; ++h) z1[h] = b1[h];
  for (uint32_t i = 0; i < shape.inputs; ++i) {
    const float xi = x[i];
    if (xi == 0.0f) continue;  // multi-hot attack inputs are mostly zero
    const float* row = w1 + uint64_t(i) * shape.hidden;
    for (uint32_t h = 0; h < shape.hidden; ++h) z1[h] += xi * row[h];
  }
  probs.assign(shape.outputs, 0.0f);
  for (uint32_t o = 0; o < shape.outputs; ++o) probs[o] = b2[o];
  for (uint32_t h = 0; h < shape.hidden; ++h) {
    float a = std::max(z1[h], 0.0f);
    if (!hidden_scale.empty()) a *= hidden_scale[h];
    if (a == 0.0f) continue;
    const float* row = w2 + uint64_t(h) * shape.outputs;
    for (uint32_t o = 0; o < shape.outputs; ++o) probs[o] += a * row[o];
  }
  float peak = probs[0];
  for (const float v : probs) peak = std::max(peak, v);
  float total = 0.0f;
  for (auto& v : probs) {
    v = std::exp(v - peak);
    total += v;
  }
  for (auto& v : probs) v /= total;
}

inline uint32_t mlp_predict(const MlpShape& shape, std::span<const float> theta,
                            std::span<const float> x) {
  std::vector<float> z1, probs;
  mlp_forward(shape, theta, x, {}, z1, probs);
  return uint32_t(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

// Cross-entropy gradient of one sample, accumulated into `grad` (same layout
// as theta). Returns the sample loss.
inline double mlp_backprop(const MlpShape& shape, std::span<const float> theta,
                           std::span<const float> x, uint32_t label,
                           std::span<const float> hidden_scale, std::span<float> grad) {
  if (label >= shape.outputs) throw std::out_of_range("label out of range");
  std::vector<float> z1, probs;
  mlp_forward(shape, theta, x, hidden_scale, z1, probs);

  const float* w2 = theta.data() + shape.w2_offset();
  float* g_w1 = grad.data() + shape.w1_offset();
  float* g_b1 = grad.data() + shape.b1_offset();
  float* g_w2 = grad.data() + shape.w2_offset();
  float* g_b2 = grad.data() + shape.b2_offset();

  std::vector<float> dz2(shape.outputs);
  for (uint32_t o = 0; o < shape.outputs; ++o) {
    dz2[o] = probs[o] - (o == label ? 1.0f : 0.0f);
    g_b2[o] += dz2[o];
  }
  std::vector<float> dz1(shape.hidden, 0.0f);
  for (uint32_t h = 0; h < shape.hidden; ++h) {
    float a = std::max(z1[h], 0.0f);
    if (!hidden_scale.empty()) a *= hidden_scale[h];
    const float* row = w2 + uint64_t(h) * shape.outputs;
    float* g_row = g_w2 + uint64_t(h) * shape.outputs;
    float da = 0.0f;
    for (uint32_t o = 0; o < shape.outputs; ++o) {
      g_row[o] += a * dz2[o];
      da += row[o] * dz2[o];
    }
    if (z1[h] > 0.0f) {
      dz1[h] = hidden_scale.empty() ? da : da * hidden_scale[h];
    }
  }
  for (uint32_t h = 0; h < shape.hidden; ++h) g_b1[h] += dz1[h];
  for (uint32_t i = 0; i < shape.inputs; ++i) {
    const float xi = x[i];
    if (xi == 0.0f) continue;
    float* g_row = g_w1 + uint64_t(i) * shape.hidden;
    for (uint32_t h = 0; h < shape.hidden; ++h) g_row[h] += xi * dz1[h];
  }
  return -std::log(std::max(double(probs[label]), 1e-12));
}

// Mean cross-entropy gradient over a batch, written into `grad` (overwritten,
// not accumulated). Returns the mean loss.
template <class GetSample>
double mlp_batch_gradient(const MlpShape& shape, std::span<const float> theta, size_t count,
                          GetSample&& sample_at, std::span<float> grad) {
  if (count == 0) throw std::invalid_argument("empty batch");
  std::fill(grad.begin(), grad.end(), 0.0f);
  double loss = 0.0;
  for (size_t s = 0; s < count; ++s) {
    const auto& [x, label] = sample_at(s);
    loss += mlp_backprop(shape, theta, x, label, {}, grad);
  }
  const float inv = 1.0f / float(count);
  for (auto& g : grad) g *= inv;
  return loss / double(count);
}

}  // namespace olive
