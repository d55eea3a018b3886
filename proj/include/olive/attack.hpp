#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "olive/dataset.hpp"
#include "olive/flcore.hpp"
#include "olive/mlp.hpp"
#include "olive/rng.hpp"

namespace olive {

// Label inference from leaked gradient coordinates. The observer saw, for
// each participant-round, the set of top-k indices the linear aggregator's
// memory trace exposed. Gradient coordinates correlate strongly with the
// labels present in a client's shard, so per-label reference index sets
// ("teachers") computed on held-out data rank the candidate labels.

enum class AttackMethod { kJac, kNn, kNnSingle };

inline AttackMethod parse_attack_method(const std::string& name) {
  if (name == "jac") return AttackMethod::kJac;
  if (name == "nn") return AttackMethod::kNn;
  if (name == "nn-single") return AttackMethod::kNnSingle;
  throw std::invalid_argument("unknown attack method: " + name);
}

inline const char* attack_method_name(AttackMethod m) {
  switch (m) {
    case AttackMethod::kJac: return "jac";
    case AttackMethod::kNn: return "nn";
    case AttackMethod::kNnSingle: return "nn-single";
  }
  return "?";
}

// Reference index sets: sets[t-1][l] holds the top-k coordinates of the
// gradient of the round-t entering model on label l's held-out shard.
struct TeacherTable {
  uint64_t k = 0;
  uint32_t labels = 0;
  std::vector<std::vector<std::vector<uint32_t>>> sets;

  uint32_t rounds() const { return uint32_t(sets.size()); }
};

// One full-batch backward pass per (round, label); no model update, mirroring
// what the clients' first local step differentiates.
inline TeacherTable build_teachers(const MlpShape& shape,
                                   std::span<const std::vector<float>> entering,
                                   const Dataset& pool,
                                   std::span<const std::vector<uint32_t>> label_shards,
                                   uint64_t k) {
  TeacherTable table;
  table.k = k;
  table.labels = uint32_t(label_shards.size());
  table.sets.resize(entering.size());
  std::vector<float> grad(shape.param_count());
  for (size_t t = 0; t < entering.size(); ++t) {
    table.sets[t].resize(label_shards.size());
    for (uint32_t l = 0; l < label_shards.size(); ++l) {
      const auto& shard = label_shards[l];
      if (shard.empty()) throw std::runtime_error("missing teacher data for label");
      auto sample_at = [&](size_t s) {
        return std::pair<std::span<const float>, uint32_t>(pool.xs[shard[s]], pool.ys[shard[s]]);
      };
      mlp_batch_gradient(shape, entering[t], shard.size(), sample_at, grad);
      const SparseGradient top = topk_sparsify(grad, k);
      auto& out = table.sets[t][l];
      out.reserve(top.entries.size());
      for (const auto& e : top.entries) out.push_back(e.index);
    }
  }
  return table;
}

// |a ∩ b| / |a ∪ b| over sorted index vectors; both empty counts as 0.
inline double jaccard(std::span<const uint32_t> a, std::span<const uint32_t> b) {
  size_t i = 0, j = 0, both = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] == b[j]) {
      ++both;
      ++i;
      ++j;
    } else if (a[i] < b[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  const size_t either = a.size() + b.size() - both;
  return either == 0 ? 0.0 : double(both) / double(either);
}

// Coarsens a sorted index set to cacheline buckets floor(index / c).
inline std::vector<uint32_t> bucketize(std::span<const uint32_t> indices, uint64_t c) {
  std::vector<uint32_t> out;
  out.reserve(indices.size());
  for (const uint32_t idx : indices) out.push_back(uint32_t(idx / c));
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

struct AttackOptions {
  AttackMethod method = AttackMethod::kJac;
  uint32_t known_count = 0;   // 0: infer the set size by clustering
  uint64_t cacheline_c = 1;   // bucket leaks and teachers to this granularity
  bool jac_union = false;     // union indices across rounds instead of (round, index) pairs
  uint32_t nn_hidden = 64;
  uint32_t nn_epochs = 300;
  double nn_lr = 0.3;
  double nn_keep = 0.5;       // dropout keep rate while training the classifier
  uint64_t seed = 1;
};

namespace detail {

// user -> (round -> sorted bucketed index set)
using UserViews = std::map<uint32_t, std::map<uint32_t, std::vector<uint32_t>>>;

inline UserViews collect_views(std::span<const RoundLeak> leaks, uint64_t c) {
  if (c == 0) throw std::invalid_argument("cacheline width must be positive");
  UserViews views;
  for (const auto& leak : leaks) {
    views[leak.user][leak.round] = bucketize(leak.indices, c);
  }
  return views;
}

inline std::vector<float> multi_hot(std::span<const uint32_t> indices, uint64_t dim,
                                    uint64_t offset) {
  std::vector<float> x(dim, 0.0f);
  for (const uint32_t idx : indices) x[offset + idx] = 1.0f;
  return x;
}

// Trains the score classifier: inputs are multi-hot teacher sets, targets the
// label ids, full-batch steps with a fresh inverted-dropout mask per sample.
inline std::vector<float> train_classifier(const MlpShape& shape,
                                           std::span<const std::vector<float>> inputs,
                                           std::span<const uint32_t> targets,
                                           const AttackOptions& opt, Rng& rng) {
  Rng init_rng(rng.next_u64());
  std::vector<float> theta = init_params(shape, init_rng);
  std::vector<float> grad(theta.size());
  std::vector<float> mask(shape.hidden);
  const float boost = float(1.0 / opt.nn_keep);
  for (uint32_t epoch = 0; epoch < opt.nn_epochs; ++epoch) {
    std::fill(grad.begin(), grad.end(), 0.0f);
    for (size_t s = 0; s < inputs.size(); ++s) {
      for (auto& m : mask) m = rng.next_double() < opt.nn_keep ? boost : 0.0f;
      mlp_backprop(shape, theta, inputs[s], targets[s], mask, grad);
    }
    const float step = float(opt.nn_lr / double(inputs.size()));
    for (size_t p = 0; p < theta.size(); ++p) theta[p] -= step * grad[p];
  }
  return theta;
}

}  // namespace detail

// Per-label Jaccard scores for one user. Default mode compares (round, index)
// pairs over the user's observed rounds; rounds are disjoint tags, so the
// score is the size-weighted combination of the per-round overlaps. The union
// fallback flattens all rounds into one index set first.
inline std::vector<double> score_jac(
    const std::map<uint32_t, std::vector<uint32_t>>& user_rounds, const TeacherTable& teachers,
    uint64_t cacheline_c, bool union_mode) {
  std::vector<double> scores(teachers.labels, 0.0);
  for (uint32_t l = 0; l < teachers.labels; ++l) {
    if (union_mode) {
      std::vector<uint32_t> leak_all, teach_all;
      for (const auto& [t, indices] : user_rounds) {
        leak_all.insert(leak_all.end(), indices.begin(), indices.end());
        const auto teach = bucketize(teachers.sets.at(t - 1)[l], cacheline_c);
        teach_all.insert(teach_all.end(), teach.begin(), teach.end());
      }
      std::sort(leak_all.begin(), leak_all.end());
      leak_all.erase(std::unique(leak_all.begin(), leak_all.end()), leak_all.end());
      std::sort(teach_all.begin(), teach_all.end());
      teach_all.erase(std::unique(teach_all.begin(), teach_all.end()), teach_all.end());
      scores[l] = jaccard(leak_all, teach_all);
    } else {
      size_t both = 0, either = 0;
      for (const auto& [t, indices] : user_rounds) {
        const auto teach = bucketize(teachers.sets.at(t - 1)[l], cacheline_c);
        size_t i = 0, j = 0, inter = 0;
        while (i < indices.size() && j < teach.size()) {
          if (indices[i] == teach[j]) ++inter, ++i, ++j;
          else if (indices[i] < teach[j]) ++i;
          else ++j;
        }
        both += inter;
        either += indices.size() + teach.size() - inter;
      }
      scores[l] = either == 0 ? 0.0 : double(both) / double(either);
    }
  }
  return scores;
}

// The classifier ensemble behind the nn and nn-single methods. Per-round:
// one classifier per round over multi-hot teacher sets, user scores averaged
// post-softmax over the user's observed rounds. Single: one classifier whose
// input concatenates all rounds, zero blocks standing in for rounds the user
// skipped.
struct NnScorer {
  MlpShape shape;
  uint64_t bucket_dim = 0;
  bool single = false;
  std::vector<std::vector<float>> models;  // per round, or one for single

  static NnScorer fit(const TeacherTable& teachers, uint64_t d, const AttackOptions& opt) {
    NnScorer scorer;
    scorer.bucket_dim = (d + opt.cacheline_c - 1) / opt.cacheline_c;
    scorer.single = opt.method == AttackMethod::kNnSingle;
    const uint32_t rounds = teachers.rounds();
    if (scorer.single) {
      scorer.shape = MlpShape{uint32_t(scorer.bucket_dim * rounds), opt.nn_hidden,
                              teachers.labels};
      std::vector<std::vector<float>> inputs;
      std::vector<uint32_t> targets;
      for (uint32_t l = 0; l < teachers.labels; ++l) {
        std::vector<float> x(scorer.bucket_dim * rounds, 0.0f);
        for (uint32_t t = 0; t < rounds; ++t) {
          for (const uint32_t b : bucketize(teachers.sets[t][l], opt.cacheline_c)) {
            x[uint64_t(t) * scorer.bucket_dim + b] = 1.0f;
          }
        }
        inputs.push_back(std::move(x));
        targets.push_back(l);
      }
      Rng rng(derive_seed(opt.seed, streams::kAttack, 0));
      scorer.models.push_back(detail::train_classifier(scorer.shape, inputs, targets, opt, rng));
    } else {
      scorer.shape = MlpShape{uint32_t(scorer.bucket_dim), opt.nn_hidden, teachers.labels};
      for (uint32_t t = 0; t < rounds; ++t) {
        std::vector<std::vector<float>> inputs;
        std::vector<uint32_t> targets;
        for (uint32_t l = 0; l < teachers.labels; ++l) {
          inputs.push_back(detail::multi_hot(bucketize(teachers.sets[t][l], opt.cacheline_c),
                                             scorer.bucket_dim, 0));
          targets.push_back(l);
        }
        Rng rng(derive_seed(opt.seed, streams::kAttack, t + 1));
        scorer.models.push_back(
            detail::train_classifier(scorer.shape, inputs, targets, opt, rng));
      }
    }
    return scorer;
  }

  std::vector<double> score(const std::map<uint32_t, std::vector<uint32_t>>& user_rounds) const {
    std::vector<float> z1, probs;
    std::vector<double> scores(shape.outputs, 0.0);
    if (single) {
      std::vector<float> x(shape.inputs, 0.0f);
      for (const auto& [t, indices] : user_rounds) {
        for (const uint32_t b : indices) x[uint64_t(t - 1) * bucket_dim + b] = 1.0f;
      }
      mlp_forward(shape, models[0], x, {}, z1, probs);
      for (uint32_t o = 0; o < shape.outputs; ++o) scores[o] = probs[o];
    } else {
      for (const auto& [t, indices] : user_rounds) {
        mlp_forward(shape, models.at(t - 1), detail::multi_hot(indices, bucket_dim, 0), {}, z1,
                    probs);
        for (uint32_t o = 0; o < shape.outputs; ++o) scores[o] += probs[o];
      }
      for (auto& s : scores) s /= double(user_rounds.size());
    }
    return scores;
  }
};

struct LabelPrediction {
  std::vector<uint32_t> labels;  // sorted ascending
  bool degenerate = false;
};

// Turns per-label scores into a predicted label set. With a known set size,
// takes the top scores (ties toward the lower label). Otherwise clusters the
// scores with 1-D 2-means seeded at the extremes and keeps the upper cluster.
// All-equal scores cannot be clustered; that case degrades to the lowest
// argmax label and is flagged.
inline LabelPrediction extract_labels(std::span<const double> scores, uint32_t known_count) {
  if (scores.empty()) throw std::invalid_argument("no scores to extract from");
  LabelPrediction out;
  const bool all_equal =
      std::all_of(scores.begin(), scores.end(), [&](double s) { return s == scores[0]; });
  if (all_equal) {
    out.labels = {0};
    out.degenerate = true;
    return out;
  }
  if (known_count > 0) {
    std::vector<uint32_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0u);
    std::stable_sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
      if (scores[a] != scores[b]) return scores[a] > scores[b];
      return a < b;
    });
    order.resize(std::min<size_t>(known_count, order.size()));
    std::sort(order.begin(), order.end());
    out.labels = std::move(order);
    return out;
  }
  double lo = *std::min_element(scores.begin(), scores.end());
  double hi = *std::max_element(scores.begin(), scores.end());
  std::vector<bool> upper(scores.size());
  for (int iter = 0; iter < 100; ++iter) {
    double lo_sum = 0, hi_sum = 0;
    size_t lo_n = 0, hi_n = 0;
    for (size_t l = 0; l < scores.size(); ++l) {
      upper[l] = std::abs(scores[l] - hi) < std::abs(scores[l] - lo);
      if (upper[l]) {
        hi_sum += scores[l];
        ++hi_n;
      } else {
        lo_sum += scores[l];
        ++lo_n;
      }
    }
    const double new_lo = lo_n ? lo_sum / double(lo_n) : lo;
    const double new_hi = hi_n ? hi_sum / double(hi_n) : hi;
    const bool settled = std::abs(new_lo - lo) < 1e-9 && std::abs(new_hi - hi) < 1e-9;
    lo = new_lo;
    hi = new_hi;
    if (settled) break;
  }
  for (uint32_t l = 0; l < scores.size(); ++l) {
    if (upper[l]) out.labels.push_back(l);
  }
  return out;
}

struct AttackRow {
  uint32_t user = 0;
  std::vector<uint32_t> predicted;
  uint32_t top1 = 0;
  std::vector<uint32_t> true_labels;
  bool degenerate = false;
};

struct AttackReport {
  AttackMethod method = AttackMethod::kJac;
  std::vector<AttackRow> rows;
  double all_acc = 0.0;   // fraction of users whose predicted set matches exactly
  double top1_acc = 0.0;  // fraction whose best-scored label is truly held
};

// Runs the full pipeline over every user present in the leak log: score,
// extract, compare against ground truth. Rounds referenced by the log must
// have teachers.
inline AttackReport evaluate_attack(std::span<const RoundLeak> leaks,
                                    const TeacherTable& teachers,
                                    std::span<const std::vector<uint32_t>> true_labels,
                                    uint64_t d, const AttackOptions& opt) {
  const detail::UserViews views = detail::collect_views(leaks, opt.cacheline_c);
  if (views.empty()) throw std::runtime_error("user never observed");
  for (const auto& [user, rounds] : views) {
    if (user >= true_labels.size()) throw std::invalid_argument("unknown user in leak log");
    for (const auto& [t, indices] : rounds) {
      if (t == 0 || t > teachers.rounds()) {
        throw std::runtime_error("missing model for round " + std::to_string(t));
      }
    }
  }

  NnScorer nn;
  if (opt.method != AttackMethod::kJac) nn = NnScorer::fit(teachers, d, opt);

  AttackReport report;
  report.method = opt.method;
  size_t all_hits = 0, top1_hits = 0;
  for (const auto& [user, rounds] : views) {
    const std::vector<double> scores =
        opt.method == AttackMethod::kJac
            ? score_jac(rounds, teachers, opt.cacheline_c, opt.jac_union)
            : nn.score(rounds);
    AttackRow row;
    row.user = user;
    row.true_labels = true_labels[user];
    uint32_t best = 0;
    for (uint32_t l = 1; l < scores.size(); ++l) {
      if (scores[l] > scores[best]) best = l;
    }
    row.top1 = best;
    LabelPrediction pred = extract_labels(scores, opt.known_count);
    row.predicted = std::move(pred.labels);
    row.degenerate = pred.degenerate;
    if (row.predicted == row.true_labels) ++all_hits;
    if (std::find(row.true_labels.begin(), row.true_labels.end(), best) !=
        row.true_labels.end()) {
      ++top1_hits;
    }
    report.rows.push_back(std::move(row));
  }
  report.all_acc = double(all_hits) / double(report.rows.size());
  report.top1_acc = double(top1_hits) / double(report.rows.size());
  return report;
}

// Per-user CSV rows; label sets are ';'-joined so the file stays one row per
// user.
inline void write_attack_csv(std::ostream& out, const AttackReport& report) {
  auto join = [](std::span<const uint32_t> labels) {
    std::string s;
    for (size_t i = 0; i < labels.size(); ++i) {
      if (i) s += ';';
      s += std::to_string(labels[i]);
    }
    return s;
  };
  out << "user,method,predicted_labels,top1,true_labels\n";
  for (const auto& row : report.rows) {
    out << row.user << ',' << attack_method_name(report.method) << ',' << join(row.predicted)
        << ',' << row.top1 << ',' << join(row.true_labels) << '\n';
  }
}

}  // namespace olive
