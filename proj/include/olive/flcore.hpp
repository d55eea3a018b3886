#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "olive/aggregate.hpp"
#include "olive/crypto.hpp"
#include "olive/dataset.hpp"
#include "olive/mlp.hpp"
#include "olive/oram.hpp"
#include "olive/rng.hpp"
#include "olive/trace.hpp"

namespace olive {

// Named sub-streams of the master seed. Every consumer derives its own stream
// from (seed, purpose, round/user), so changing one knob (say sigma) never
// shifts the randomness seen by an unrelated stage (say participant
// sampling). That independence is load-bearing: round-1 attack scores must be
// bit-identical across noise scales.
namespace streams {
inline constexpr uint64_t kSampling = 1;
inline constexpr uint64_t kNoise = 2;
inline constexpr uint64_t kData = 3;
inline constexpr uint64_t kModelInit = 4;
inline constexpr uint64_t kKeys = 5;
inline constexpr uint64_t kOram = 6;
inline constexpr uint64_t kAttack = 7;
inline constexpr uint64_t kBench = 8;
}  // namespace streams

enum class AggregatorKind { kLinear, kBaseline, kAdvanced, kGrouped, kOram };

inline AggregatorKind parse_aggregator(const std::string& name) {
  if (name == "linear") return AggregatorKind::kLinear;
  if (name == "baseline") return AggregatorKind::kBaseline;
  if (name == "advanced") return AggregatorKind::kAdvanced;
  if (name == "grouped") return AggregatorKind::kGrouped;
  if (name == "oram") return AggregatorKind::kOram;
  throw std::invalid_argument("unknown aggregator: " + name);
}

inline const char* aggregator_name(AggregatorKind kind) {
  switch (kind) {
    case AggregatorKind::kLinear: return "linear";
    case AggregatorKind::kBaseline: return "baseline";
    case AggregatorKind::kAdvanced: return "advanced";
    case AggregatorKind::kGrouped: return "grouped";
    case AggregatorKind::kOram: return "oram";
  }
  return "?";
}

enum class DatasetKind { kSynthetic, kIdx };

struct DatasetConfig {
  DatasetKind kind = DatasetKind::kSynthetic;
  std::string path;         // IDX image file (kind = idx)
  std::string labels_path;  // IDX label file (kind = idx)
  uint32_t labels = 10;
  uint32_t input_dim = 32;
  uint32_t labels_per_user = 2;
  uint32_t samples_per_client = 32;
  uint32_t pool_per_label = 256;   // synthetic pool size per label
  uint32_t teacher_per_label = 64;
  uint32_t test_per_label = 32;
  double separation = 4.0;
  double noise = 1.0;
};

struct ModelConfig {
  uint32_t hidden = 16;
};

struct FlConfig {
  uint32_t n_users = 100;
  double q = 0.3;
  uint32_t rounds = 3;
  double alpha = 0.1;
  double sigma = 1.12;
  double clip = 1.0;
  double lr_client = 0.5;
  double lr_server = 1.0;
  uint64_t seed = 1;
  AggregatorKind aggregator = AggregatorKind::kLinear;
  uint64_t group_h = 0;      // clients per group (aggregator = grouped)
  uint64_t cacheline_c = 1;  // observer granularity (aggregator = baseline)
  uint32_t local_epochs = 1;
  DatasetConfig dataset;
  ModelConfig model;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline uint64_t config_u64(const std::string& value, const std::string& key) {
  size_t used = 0;
  uint64_t v = 0;
  try {
    v = std::stoull(value, &used);
  } catch (const std::exception&) {
    throw std::invalid_argument("invalid value for config key: " + key);
  }
  if (used != value.size()) throw std::invalid_argument("invalid value for config key: " + key);
  return v;
}

inline double config_double(const std::string& value, const std::string& key) {
  size_t used = 0;
  double v = 0;
  try {
    v = std::stod(value, &used);
  } catch (const std::exception&) {
    throw std::invalid_argument("invalid value for config key: " + key);
  }
  if (used != value.size()) throw std::invalid_argument("invalid value for config key: " + key);
  return v;
}

}  // namespace detail

// Flat key = value config text. '#' starts a comment; unknown keys are
// rejected so typos fail loudly instead of silently running defaults.
inline FlConfig parse_fl_config_text(const std::string& text) {
  FlConfig cfg;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("malformed config line: " + line);
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) throw std::invalid_argument("malformed config line: " + line);

    if (key == "n_users") cfg.n_users = uint32_t(detail::config_u64(value, key));
    else if (key == "q") cfg.q = detail::config_double(value, key);
    else if (key == "rounds") cfg.rounds = uint32_t(detail::config_u64(value, key));
    else if (key == "alpha") cfg.alpha = detail::config_double(value, key);
    else if (key == "sigma") cfg.sigma = detail::config_double(value, key);
    else if (key == "clip") cfg.clip = detail::config_double(value, key);
    else if (key == "lr_client") cfg.lr_client = detail::config_double(value, key);
    else if (key == "lr_server") cfg.lr_server = detail::config_double(value, key);
    else if (key == "seed") cfg.seed = detail::config_u64(value, key);
    else if (key == "aggregator") cfg.aggregator = parse_aggregator(value);
    else if (key == "group_h") cfg.group_h = detail::config_u64(value, key);
    else if (key == "cacheline_c") cfg.cacheline_c = detail::config_u64(value, key);
    else if (key == "local_epochs") cfg.local_epochs = uint32_t(detail::config_u64(value, key));
    else if (key == "dataset.kind") {
      if (value == "synthetic") cfg.dataset.kind = DatasetKind::kSynthetic;
      else if (value == "idx") cfg.dataset.kind = DatasetKind::kIdx;
      else throw std::invalid_argument("invalid value for config key: " + key);
    }
    else if (key == "dataset.path") cfg.dataset.path = value;
    else if (key == "dataset.labels_path") cfg.dataset.labels_path = value;
    else if (key == "dataset.labels") cfg.dataset.labels = uint32_t(detail::config_u64(value, key));
    else if (key == "dataset.input_dim") cfg.dataset.input_dim = uint32_t(detail::config_u64(value, key));
    else if (key == "dataset.labels_per_user") cfg.dataset.labels_per_user = uint32_t(detail::config_u64(value, key));
    else if (key == "dataset.samples_per_client") cfg.dataset.samples_per_client = uint32_t(detail::config_u64(value, key));
    else if (key == "dataset.pool_per_label") cfg.dataset.pool_per_label = uint32_t(detail::config_u64(value, key));
    else if (key == "dataset.teacher_per_label") cfg.dataset.teacher_per_label = uint32_t(detail::config_u64(value, key));
    else if (key == "dataset.test_per_label") cfg.dataset.test_per_label = uint32_t(detail::config_u64(value, key));
    else if (key == "dataset.separation") cfg.dataset.separation = detail::config_double(value, key);
    else if (key == "dataset.noise") cfg.dataset.noise = detail::config_double(value, key);
    else if (key == "model.hidden") cfg.model.hidden = uint32_t(detail::config_u64(value, key));
    else throw std::invalid_argument("unknown config key: " + key);
  }
  return cfg;
}

inline FlConfig load_fl_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_fl_config_text(buf.str());
}

// k = ceil(alpha * d), the number of coordinates a client keeps.
inline uint64_t sparsity_k(double alpha, uint64_t d) {
  if (!(alpha > 0.0) || alpha > 1.0) {
    throw std::invalid_argument("sparse ratio must be in (0, 1]");
  }
  return std::min<uint64_t>(d, uint64_t(std::ceil(alpha * double(d))));
}

// Keeps the k coordinates of largest magnitude, ties broken toward the lower
// index; the result is index-sorted. Always emits exactly k entries (zeros
// included), so the uplink record count itself carries no information.
inline SparseGradient topk_sparsify(std::span<const float> delta, uint64_t k) {
  if (k == 0 || k > delta.size()) throw std::invalid_argument("sparsity count out of range");
  std::vector<uint32_t> order(delta.size());
  std::iota(order.begin(), order.end(), 0u);
  std::partial_sort(order.begin(), order.begin() + k, order.end(),
                    [&](uint32_t a, uint32_t b) {
                      const float ma = std::fabs(delta[a]);
                      const float mb = std::fabs(delta[b]);
                      if (ma != mb) return ma > mb;
                      return a < b;
                    });
  order.resize(k);
  std::sort(order.begin(), order.end());
  SparseGradient g;
  g.entries.reserve(k);
  for (const uint32_t idx : order) g.entries.push_back({idx, delta[idx]});
  return g;
}

// Scales the update so its L2 norm is at most `clip` (no-op below the bound).
inline void l2_clip(SparseGradient& g, double clip) {
  if (!(clip > 0.0)) throw std::invalid_argument("clip bound must be positive");
  double norm_sq = 0.0;
  for (const auto& e : g.entries) norm_sq += double(e.value) * e.value;
  const double norm = std::sqrt(norm_sq);
  if (norm <= clip || norm == 0.0) return;
  const float scale = float(clip / norm);
  for (auto& e : g.entries) e.value *= scale;
}

// Poisson sampling: each user joins the round independently with rate q.
inline std::vector<uint32_t> sample_participants(uint32_t n_users, double q, Rng& rng) {
  if (q < 0.0 || q > 1.0) throw std::invalid_argument("sampling rate must be in [0, 1]");
  std::vector<uint32_t> cohort;
  for (uint32_t u = 0; u < n_users; ++u) {
    if (rng.next_double() < q) cohort.push_back(u);
  }
  return cohort;
}

// Wire form of an update: u32 entry count, then (u32 index, f32 bits) pairs,
// little endian.
inline std::vector<uint8_t> encode_update(const SparseGradient& g) {
  std::vector<uint8_t> out;
  out.reserve(4 + g.entries.size() * 8);
  auto put32 = [&out](uint32_t v) {
    for (int b = 0; b < 4; ++b) out.push_back(uint8_t(v >> (b * 8)));
  };
  put32(uint32_t(g.entries.size()));
  for (const auto& e : g.entries) {
    put32(e.index);
    put32(std::bit_cast<uint32_t>(e.value));
  }
  return out;
}

inline SparseGradient decode_update(std::span<const uint8_t> bytes) {
  auto get32 = [&bytes](size_t at) {
    return uint32_t(bytes[at]) | (uint32_t(bytes[at + 1]) << 8) |
           (uint32_t(bytes[at + 2]) << 16) | (uint32_t(bytes[at + 3]) << 24);
  };
  if (bytes.size() < 4) throw std::runtime_error("corrupt record");
  const uint32_t count = get32(0);
  if (bytes.size() != size_t(4) + size_t(count) * 8) throw std::runtime_error("corrupt record");
  SparseGradient g;
  g.entries.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    const size_t at = 4 + size_t(i) * 8;
    g.entries.push_back({get32(at), std::bit_cast<float>(get32(at + 4))});
  }
  return g;
}

// Registration step of the setup phase: every user shares a sealing key with
// the trusted side, indexed by user id.
struct KeyStore {
  std::vector<AeadKey> keys;

  static KeyStore make(uint64_t seed, uint32_t n_users) {
    KeyStore store;
    store.keys.reserve(n_users);
    for (uint32_t u = 0; u < n_users; ++u) {
      store.keys.push_back({derive_seed(seed, streams::kKeys, u, 0),
                            derive_seed(seed, streams::kKeys, u, 1)});
    }
    return store;
  }
};

inline Sealed seal_update(const SparseGradient& g, const AeadKey& key, uint32_t user,
                          uint32_t round) {
  return seal(encode_update(g), key, user, round);
}

// Gatekeeper for one submission: the sender must be in this round's cohort,
// must not have submitted yet, the tag must verify under the sender's key,
// and the payload must be exactly k strictly increasing indices below d.
inline SparseGradient verify_and_decrypt(const Sealed& sealed, const KeyStore& keys,
                                         std::span<const uint32_t> cohort,
                                         std::set<uint32_t>& seen, uint64_t k, uint64_t d) {
  if (std::find(cohort.begin(), cohort.end(), sealed.user) == cohort.end()) {
    throw std::runtime_error("not sampled");
  }
  if (!seen.insert(sealed.user).second) throw std::runtime_error("duplicate submission");
  if (sealed.user >= keys.keys.size()) throw std::runtime_error("authentication failure");
  SparseGradient g = decode_update(open_sealed(sealed, keys.keys[sealed.user]));
  if (g.entries.size() != k) throw std::runtime_error("corrupt record");
  for (size_t i = 0; i < g.entries.size(); ++i) {
    if (g.entries[i].index >= d) throw std::runtime_error("corrupt record");
    if (i > 0 && g.entries[i].index <= g.entries[i - 1].index) {
      throw std::runtime_error("corrupt record");
    }
  }
  return g;
}

// One client's local work for a round: `local_epochs` full-batch gradient
// steps from the broadcast model, then top-k of the resulting delta, clipped.
inline SparseGradient client_update(const MlpShape& shape, const std::vector<float>& theta,
                                    const Dataset& pool, const ClientShard& shard,
                                    const FlConfig& cfg) {
  std::vector<float> local = theta;
  std::vector<float> grad(theta.size());
  auto sample_at = [&](size_t s) {
    return std::pair<std::span<const float>, uint32_t>(pool.xs[shard.sample_ids[s]],
                                                       pool.ys[shard.sample_ids[s]]);
  };
  for (uint32_t e = 0; e < cfg.local_epochs; ++e) {
    mlp_batch_gradient(shape, local, shard.sample_ids.size(), sample_at, grad);
    for (size_t p = 0; p < local.size(); ++p) local[p] -= float(cfg.lr_client) * grad[p];
  }
  std::vector<float> delta(theta.size());
  for (size_t p = 0; p < delta.size(); ++p) delta[p] = local[p] - theta[p];
  SparseGradient g = topk_sparsify(delta, sparsity_k(cfg.alpha, theta.size()));
  l2_clip(g, cfg.clip);
  return g;
}

// What the round let an observer learn: one record per accepted update, with
// the gradient coordinates its memory trace exposed. Oblivious aggregators
// produce none.
struct RoundLeak {
  uint32_t round = 0;  // 1-based
  uint32_t user = 0;
  std::vector<uint32_t> indices;  // sorted, deduplicated
};

struct RoundOutcome {
  std::vector<RoundLeak> leaks;
  uint32_t sampled = 0;
  uint32_t accepted = 0;
};

// One federated round: sample a cohort, run the clients, verify their sealed
// updates, aggregate with the configured algorithm, apply the averaging and
// noising step (divisor qN, noise sigma * clip), and take the server step.
// The trace is recorded, parsed, and reported only for the linear aggregator;
// the oblivious aggregators run untraced since their traces are input-free.
inline RoundOutcome run_round(std::vector<float>& theta, uint32_t round, const FlConfig& cfg,
                              const MlpShape& shape, const FlSplit& split,
                              const KeyStore& keys) {
  Rng sampling(derive_seed(cfg.seed, streams::kSampling, round));
  const std::vector<uint32_t> cohort = sample_participants(cfg.n_users, cfg.q, sampling);

  std::vector<Sealed> inbox;
  inbox.reserve(cohort.size());
  for (const uint32_t user : cohort) {
    const SparseGradient g = client_update(shape, theta, split.pool, split.clients[user], cfg);
    inbox.push_back(seal_update(g, keys.keys[user], user, round));
  }

  const uint64_t d = theta.size();
  const uint64_t k = sparsity_k(cfg.alpha, d);
  std::set<uint32_t> seen;
  std::vector<SparseGradient> updates;
  std::vector<uint32_t> senders;
  for (const Sealed& sealed : inbox) {
    updates.push_back(verify_and_decrypt(sealed, keys, cohort, seen, k, d));
    senders.push_back(sealed.user);
  }
  if (updates.empty()) throw std::runtime_error("no valid updates");

  const AggregateInstance inst = pack_instance(updates, d);
  RoundOutcome out;
  out.sampled = uint32_t(cohort.size());
  out.accepted = uint32_t(updates.size());

  DenseVector agg;
  if (cfg.aggregator == AggregatorKind::kLinear) {
    Tracer tracer(Tracer::Mode::kRecord);
    agg = linear_aggregate(inst, tracer);
    const auto per_user = leaked_indices(tracer.take(), LinearLayout{inst.n, inst.k, inst.d});
    out.leaks.reserve(per_user.size());
    for (size_t i = 0; i < per_user.size(); ++i) {
      RoundLeak leak;
      leak.round = round;
      leak.user = senders[i];
      leak.indices.assign(per_user[i].begin(), per_user[i].end());
      out.leaks.push_back(std::move(leak));
    }
  } else {
    Tracer tracer(Tracer::Mode::kOff);
    switch (cfg.aggregator) {
      case AggregatorKind::kBaseline:
        agg = baseline_aggregate(inst, cfg.cacheline_c, tracer);
        break;
      case AggregatorKind::kAdvanced:
        agg = advanced_aggregate(inst, tracer);
        break;
      case AggregatorKind::kGrouped:
        agg = grouped_advanced_aggregate(inst, cfg.group_h, tracer);
        break;
      case AggregatorKind::kOram: {
        PathOram::Params params;
        params.capacity = d;
        agg = oram_aggregate(inst, params, derive_seed(cfg.seed, streams::kOram, round), tracer);
        break;
      }
      default:
        break;
    }
  }

  Rng noise(derive_seed(cfg.seed, streams::kNoise, round));
  Tracer off(Tracer::Mode::kOff);
  average_and_perturb(agg, cfg.q * double(cfg.n_users), cfg.sigma * cfg.clip, noise, off);
  for (uint64_t p = 0; p < d; ++p) theta[p] += float(cfg.lr_server * double(agg[p]));
  return out;
}

struct RoundMetrics {
  uint32_t round = 0;
  uint32_t participants = 0;
  double test_accuracy = 0.0;
};

struct TrainResult {
  MlpShape shape;
  FlSplit split;
  std::vector<float> theta;                  // final model
  std::vector<std::vector<float>> entering;  // entering[t-1] = model entering round t
  std::vector<RoundLeak> leaks;
  std::vector<RoundMetrics> metrics;
};

inline Dataset build_dataset(const DatasetConfig& dc, uint64_t seed) {
  if (dc.kind == DatasetKind::kIdx) {
    return load_idx(dc.path, dc.labels_path, dc.input_dim);
  }
  return synth_clusters(dc.labels, dc.input_dim, dc.pool_per_label, dc.separation, dc.noise,
                        derive_seed(seed, streams::kData));
}

// Full simulation: build the world, then run the configured number of rounds.
// entering[t-1] snapshots the model each round's clients start from, which is
// exactly what a leak-analysis needs to reconstruct per-label gradients.
inline TrainResult train(const FlConfig& cfg) {
  TrainResult out;
  Dataset data = build_dataset(cfg.dataset, cfg.seed);
  out.split = build_split(std::move(data), cfg.n_users, cfg.dataset.labels_per_user,
                          cfg.dataset.samples_per_client, cfg.dataset.teacher_per_label,
                          cfg.dataset.test_per_label, derive_seed(cfg.seed, streams::kData, 1));
  out.shape = MlpShape{out.split.pool.input_dim, cfg.model.hidden, out.split.pool.num_labels};
  Rng init_rng(derive_seed(cfg.seed, streams::kModelInit));
  out.theta = init_params(out.shape, init_rng);
  const KeyStore keys = KeyStore::make(cfg.seed, cfg.n_users);

  for (uint32_t t = 1; t <= cfg.rounds; ++t) {
    out.entering.push_back(out.theta);
    RoundOutcome round = run_round(out.theta, t, cfg, out.shape, out.split, keys);
    for (auto& leak : round.leaks) out.leaks.push_back(std::move(leak));
    out.metrics.push_back({t, round.accepted,
                           dataset_accuracy(out.shape, out.theta, out.split.pool,
                                            out.split.test_ids)});
  }
  return out;
}

// Leak log: JSON lines, one object per accepted update.
inline void write_leaks(const std::string& path, std::span<const RoundLeak> leaks) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path);
  for (const auto& leak : leaks) {
    nlohmann::json row;
    row["round"] = leak.round;
    row["user"] = leak.user;
    row["indices"] = leak.indices;
    out << row.dump() << '\n';
  }
}

inline std::vector<RoundLeak> read_leaks(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<RoundLeak> leaks;
  std::string line;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    const nlohmann::json row = nlohmann::json::parse(line);
    RoundLeak leak;
    leak.round = row.at("round").get<uint32_t>();
    leak.user = row.at("user").get<uint32_t>();
    leak.indices = row.at("indices").get<std::vector<uint32_t>>();
    leaks.push_back(std::move(leak));
  }
  return leaks;
}

inline void write_metrics_csv(const std::string& path, std::span<const RoundMetrics> metrics) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << "round,test_accuracy,participants\n";
  for (const auto& m : metrics) {
    out << m.round << ',' << m.test_accuracy << ',' << m.participants << '\n';
  }
}

// Model checkpoint: "OLVM" magic, u32 d, then d little-endian f32 values.
inline constexpr char kModelMagic[4] = {'O', 'L', 'V', 'M'};

inline void write_model(const std::string& path, std::span<const float> theta) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path);
  out.write(kModelMagic, 4);
  detail::put_u32(out, uint32_t(theta.size()));
  for (const float v : theta) detail::put_u32(out, std::bit_cast<uint32_t>(v));
}

inline std::vector<float> read_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  char magic[4] = {};
  if (!in.read(magic, 4) || std::memcmp(magic, kModelMagic, 4) != 0) {
    throw std::runtime_error("bad magic");
  }
  const uint32_t d = detail::get_u32(in);
  std::vector<float> theta(d);
  for (auto& v : theta) v = std::bit_cast<float>(detail::get_u32(in));
  return theta;
}

// Checkpoint naming shared by the trainer and the leak analysis.
inline std::string checkpoint_name(uint32_t round) {
  return "model_round_" + std::to_string(round) + ".olvm";
}

}  // namespace olive
