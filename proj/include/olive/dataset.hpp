#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "olive/mlp.hpp"
#include "olive/rng.hpp"
#include "olive/synth.hpp"

namespace olive {

struct Dataset {
  uint32_t input_dim = 0;
  uint32_t num_labels = 0;
  std::vector<std::vector<float>> xs;
  std::vector<uint32_t> ys;

  size_t size() const { return xs.size(); }
};

// Gaussian blobs, one cluster per label. The cluster centre for label l is
// `separation` times a deterministic unit direction; samples add N(0, noise^2)
// per coordinate. Larger separation / noise ratios make the labels easier.
inline Dataset synth_clusters(uint32_t num_labels, uint32_t input_dim, uint32_t per_label,
                              double separation, double noise, uint64_t seed) {
  if (num_labels == 0 || input_dim == 0 || per_label == 0) {
    throw std::invalid_argument("dataset dimensions must be positive");
  }
  Dataset data;
  data.input_dim = input_dim;
  data.num_labels = num_labels;
  data.xs.reserve(size_t(num_labels) * per_label);
  data.ys.reserve(size_t(num_labels) * per_label);

  std::vector<std::vector<float>> centres(num_labels);
  for (uint32_t l = 0; l < num_labels; ++l) {
    Rng dir(derive_seed(seed, 0x6365u, l));  // per-label centre direction
    auto& c = centres[l];
    c.resize(input_dim);
    double norm_sq = 0.0;
    for (auto& v : c) {
      v = float(dir.normal());
      norm_sq += double(v) * v;
    }
    const double scale = separation / std::max(std::sqrt(norm_sq), 1e-12);
    for (auto& v : c) v = float(v * scale);
  }
  Rng rng(derive_seed(seed, 0x7361u));  // sample noise
  for (uint32_t l = 0; l < num_labels; ++l) {
    for (uint32_t s = 0; s < per_label; ++s) {
      std::vector<float> x(input_dim);
      for (uint32_t i = 0; i < input_dim; ++i) {
        x[i] = centres[l][i] + float(rng.normal() * noise);
      }
      data.xs.push_back(std::move(x));
      data.ys.push_back(l);
    }
  }
  return data;
}

namespace detail {

inline uint32_t read_be_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("truncated file");
  return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

// Largest divisor of n that is <= sqrt(n); pairs with n/g to form the pooling
// grid, so the grid is as square as n allows (prime n degrades to 1 x n).
inline uint32_t square_divisor(uint32_t n) {
  uint32_t best = 1;
  for (uint32_t g = 1; uint64_t(g) * g <= n; ++g) {
    if (n % g == 0) best = g;
  }
  return best;
}

}  // namespace detail

// Raw IDX image file (magic 0x00000803): count, rows, cols, then one byte per
// pixel. Returned pixels are already scaled to [0, 1].
struct IdxImages {
  uint32_t rows = 0;
  uint32_t cols = 0;
  std::vector<std::vector<float>> pixels;
};

inline IdxImages parse_idx_images(std::istream& in) {
  if (detail::read_be_u32(in) != 0x00000803u) throw std::runtime_error("bad magic");
  IdxImages out;
  const uint32_t count = detail::read_be_u32(in);
  out.rows = detail::read_be_u32(in);
  out.cols = detail::read_be_u32(in);
  if (out.rows == 0 || out.cols == 0) throw std::runtime_error("corrupt record");
  out.pixels.resize(count);
  std::vector<unsigned char> raw(size_t(out.rows) * out.cols);
  for (auto& img : out.pixels) {
    if (!in.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()))) {
      throw std::runtime_error("truncated file");
    }
    img.resize(raw.size());
    for (size_t p = 0; p < raw.size(); ++p) img[p] = float(raw[p]) / 255.0f;
  }
  return out;
}

inline std::vector<uint32_t> parse_idx_labels(std::istream& in) {
  if (detail::read_be_u32(in) != 0x00000801u) throw std::runtime_error("bad magic");
  const uint32_t count = detail::read_be_u32(in);
  std::vector<uint32_t> labels(count);
  for (auto& l : labels) {
    char b;
    if (!in.get(b)) throw std::runtime_error("truncated file");
    l = uint32_t(static_cast<unsigned char>(b));
  }
  return labels;
}

// Average-pool an image down to `target_dim` values. The output grid is
// gh x gw with gh = square_divisor(target_dim), gw = target_dim / gh; each
// output cell averages its share of input rows and columns.
inline std::vector<float> pool_image(std::span<const float> pixels, uint32_t rows, uint32_t cols,
                                     uint32_t target_dim) {
  const uint32_t gh = detail::square_divisor(target_dim);
  const uint32_t gw = target_dim / gh;
  if (gh > rows || gw > cols) throw std::invalid_argument("target dimension exceeds image");
  std::vector<float> out(target_dim, 0.0f);
  for (uint32_t r = 0; r < gh; ++r) {
    const uint32_t r0 = r * rows / gh;
    const uint32_t r1 = (r + 1) * rows / gh;
    for (uint32_t c = 0; c < gw; ++c) {
      const uint32_t c0 = c * cols / gw;
      const uint32_t c1 = (c + 1) * cols / gw;
      float sum = 0.0f;
      for (uint32_t rr = r0; rr < r1; ++rr) {
        for (uint32_t cc = c0; cc < c1; ++cc) sum += pixels[size_t(rr) * cols + cc];
      }
      out[r * gw + c] = sum / float((r1 - r0) * (c1 - c0));
    }
  }
  return out;
}

// Loads an IDX image/label pair and pools every image to `input_dim` values.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                        uint32_t input_dim) {
  std::ifstream images(images_path, std::ios::binary);
  if (!images) throw std::runtime_error("cannot open " + images_path);
  std::ifstream labels(labels_path, std::ios::binary);
  if (!labels) throw std::runtime_error("cannot open " + labels_path);
  IdxImages imgs = parse_idx_images(images);
  std::vector<uint32_t> ys = parse_idx_labels(labels);
  if (imgs.pixels.size() != ys.size()) throw std::runtime_error("corrupt record");

  Dataset data;
  data.input_dim = input_dim;
  data.xs.reserve(imgs.pixels.size());
  data.ys = std::move(ys);
  uint32_t max_label = 0;
  for (const uint32_t y : data.ys) max_label = std::max(max_label, y);
  data.num_labels = max_label + 1;
  for (const auto& img : imgs.pixels) {
    data.xs.push_back(pool_image(img, imgs.rows, imgs.cols, input_dim));
  }
  return data;
}

// One client's slice of the federation: its ground-truth label set and the
// sample ids it trains on.
struct ClientShard {
  std::vector<uint32_t> labels;       // sorted, distinct
  std::vector<uint32_t> sample_ids;   // indices into the pool
};

// The simulator's world: the sample pool plus the client shards, the held-out
// per-label shards an attacker uses to model gradients, and a test set.
struct FlSplit {
  Dataset pool;
  std::vector<ClientShard> clients;
  std::vector<std::vector<uint32_t>> label_shards;  // per-label held-out ids
  std::vector<uint32_t> test_ids;
};

// Label-skew partition: each client holds `labels_per_client` distinct labels
// and samples (with replacement) from the training remainder of those labels.
// Per-label pools are split teacher | test | train up front.
inline FlSplit build_split(Dataset pool, uint32_t n_clients, uint32_t labels_per_client,
                           uint32_t samples_per_client, uint32_t teacher_per_label,
                           uint32_t test_per_label, uint64_t seed) {
  if (labels_per_client == 0 || labels_per_client > pool.num_labels) {
    throw std::invalid_argument("labels per client out of range");
  }
  if (n_clients == 0 || samples_per_client == 0) {
    throw std::invalid_argument("client counts must be positive");
  }
  std::vector<std::vector<uint32_t>> by_label(pool.num_labels);
  for (uint32_t s = 0; s < pool.size(); ++s) by_label[pool.ys[s]].push_back(s);

  FlSplit split;
  split.label_shards.resize(pool.num_labels);
  std::vector<std::vector<uint32_t>> train_pool(pool.num_labels);
  for (uint32_t l = 0; l < pool.num_labels; ++l) {
    auto& ids = by_label[l];
    if (ids.size() < size_t(teacher_per_label) + test_per_label + 1) {
      throw std::invalid_argument("label pool too small for split");
    }
    Rng shuffle_rng(derive_seed(seed, 0x7068u, l));
    for (size_t i = ids.size(); i > 1; --i) {
      std::swap(ids[i - 1], ids[shuffle_rng.bounded(i)]);
    }
    split.label_shards[l].assign(ids.begin(), ids.begin() + teacher_per_label);
    split.test_ids.insert(split.test_ids.end(), ids.begin() + teacher_per_label,
                          ids.begin() + teacher_per_label + test_per_label);
    train_pool[l].assign(ids.begin() + teacher_per_label + test_per_label, ids.end());
  }

  split.clients.resize(n_clients);
  for (uint32_t u = 0; u < n_clients; ++u) {
    Rng rng(derive_seed(seed, 0x636cu, u));
    IndexSampler label_picker{pool.num_labels};
    auto& shard = split.clients[u];
    shard.labels = label_picker.draw(labels_per_client, rng);
    std::sort(shard.labels.begin(), shard.labels.end());
    shard.sample_ids.resize(samples_per_client);
    for (uint32_t s = 0; s < samples_per_client; ++s) {
      const uint32_t l = shard.labels[s % labels_per_client];
      const auto& ids = train_pool[l];
      shard.sample_ids[s] = ids[rng.bounded(ids.size())];
    }
  }
  split.pool = std::move(pool);
  return split;
}

// Fraction of the listed samples the model labels correctly.
inline double dataset_accuracy(const MlpShape& shape, std::span<const float> theta,
                               const Dataset& pool, std::span<const uint32_t> ids) {
  if (ids.empty()) return 0.0;
  size_t hits = 0;
  for (const uint32_t s : ids) {
    if (mlp_predict(shape, theta, pool.xs[s]) == pool.ys[s]) ++hits;
  }
  return double(hits) / double(ids.size());
}

}  // namespace olive
