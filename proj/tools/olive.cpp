// Command-line front end: benchmarks, obliviousness checks, the federated
// simulation, the label-inference analysis, and raw trace dumps. Every
// command is deterministic under --seed; outputs are CSV or JSON so runs can
// be compared and plotted offline.
//
// Exit codes: 0 success, 1 failed check or analysis error, 2 usage or config
// error.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "olive/aggregate.hpp"
#include "olive/attack.hpp"
#include "olive/flcore.hpp"
#include "olive/oram.hpp"
#include "olive/rng.hpp"
#include "olive/synth.hpp"
#include "olive/trace.hpp"

namespace {

using olive::AggregateInstance;
using olive::AggregatorKind;
using olive::DenseVector;
using olive::Rng;
using olive::Tracer;

struct AlgoArgs {
  std::string algo = "advanced";
  uint64_t n = 32;
  uint64_t d = 256;
  double alpha = 0.0625;
  uint64_t cacheline_c = 1;
  uint64_t group_h = 0;
  uint64_t seed = 1;
};

void add_algo_flags(CLI::App* cmd, AlgoArgs& args) {
  // --h is taken by the group-size flag, so help is long-form only.
  cmd->set_help_flag("--help", "print help and exit");
  cmd->add_option("--algo", args.algo, "linear|baseline|advanced|grouped|oram")
      ->check(CLI::IsMember({"linear", "baseline", "advanced", "grouped", "oram"}));
  cmd->add_option("--n", args.n, "clients per batch")->check(CLI::PositiveNumber);
  cmd->add_option("--d", args.d, "dense gradient dimension")->check(CLI::PositiveNumber);
  cmd->add_option("--alpha", args.alpha, "sparse ratio in (0, 1]");
  cmd->add_option("--c", args.cacheline_c, "cacheline granularity (baseline)")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--h", args.group_h, "clients per group (grouped)");
  cmd->add_option("--seed", args.seed, "master seed");
}

// Grouped needs a group size; everything else ignores h.
void require_group_size(const AlgoArgs& args) {
  if (args.algo == "grouped" && args.group_h == 0) {
    throw CLI::ValidationError("--h", "grouped aggregation requires --h");
  }
}

DenseVector run_aggregator(AggregatorKind kind, const AggregateInstance& inst,
                           const AlgoArgs& args, uint64_t oram_seed, Tracer& tracer) {
  switch (kind) {
    case AggregatorKind::kLinear:
      return olive::linear_aggregate(inst, tracer);
    case AggregatorKind::kBaseline:
      return olive::baseline_aggregate(inst, args.cacheline_c, tracer);
    case AggregatorKind::kAdvanced:
      return olive::advanced_aggregate(inst, tracer);
    case AggregatorKind::kGrouped:
      return olive::grouped_advanced_aggregate(inst, args.group_h, tracer);
    case AggregatorKind::kOram: {
      olive::PathOram::Params params;
      params.capacity = inst.d;
      return olive::oram_aggregate(inst, params, oram_seed, tracer);
    }
  }
  throw std::invalid_argument("unknown aggregator");
}

// aggregate-bench: timed repetitions on fresh synthetic batches, one CSV row
// per repetition. Event counts come from the counting tracer, whose bulk
// hooks are O(1) per sweep, so they do not distort the timings.
int cmd_aggregate_bench(const AlgoArgs& args, uint64_t repeat) {
  require_group_size(args);
  const AggregatorKind kind = olive::parse_aggregator(args.algo);
  const uint64_t k = olive::sparsity_k(args.alpha, args.d);
  std::cout << "algo,rep,n,k,d,param,seconds,events,reads,writes\n";
  for (uint64_t rep = 0; rep < repeat; ++rep) {
    Rng rng(olive::derive_seed(args.seed, olive::streams::kBench, rep));
    const AggregateInstance inst = olive::random_instance(args.n, k, args.d, rng);
    Tracer tracer(Tracer::Mode::kCount);
    const auto started = std::chrono::steady_clock::now();
    const DenseVector agg = run_aggregator(
        kind, inst, args, olive::derive_seed(args.seed, olive::streams::kBench, rep, 1), tracer);
    const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - started;
    uint64_t reads = 0, writes = 0;
    for (uint8_t region = 0; region < olive::kRegionCount; ++region) {
      reads += tracer.count(region, olive::MemOp::kRead);
      writes += tracer.count(region, olive::MemOp::kWrite);
    }
    const uint64_t param = kind == AggregatorKind::kBaseline  ? args.cacheline_c
                           : kind == AggregatorKind::kGrouped ? args.group_h
                                                              : 0;
    std::cout << args.algo << ',' << rep << ',' << args.n << ',' << k << ',' << args.d << ','
              << param << ',' << elapsed.count() << ',' << tracer.total_events() << ',' << reads
              << ',' << writes << '\n';
    if (agg.size() != args.d) throw std::runtime_error("aggregate has wrong dimension");
  }
  return 0;
}

// oblivious-check: generates random same-shape input pairs and compares
// traces. Oblivious aggregators must produce byte-identical traces (baseline
// at its cacheline granularity). The linear aggregator must do the opposite:
// pairs with different index multisets must be distinguishable, and the trace
// must surrender each client's exact index set. PathORAM is randomized, so
// for it the check is distributional: total variation distance between trace
// samples for two fixed inputs must be small.
int cmd_oblivious_check(const AlgoArgs& args, uint64_t pairs) {
  require_group_size(args);
  const AggregatorKind kind = olive::parse_aggregator(args.algo);
  const uint64_t k = olive::sparsity_k(args.alpha, args.d);
  const uint64_t granularity = kind == AggregatorKind::kBaseline ? args.cacheline_c : 1;
  nlohmann::json report;
  report["algo"] = args.algo;
  report["n"] = args.n;
  report["k"] = k;
  report["d"] = args.d;
  report["pairs"] = pairs;
  bool ok = true;

  if (kind == AggregatorKind::kOram) {
    // The ORAM trace is randomized: apart from fixed-shape sweeps, the only
    // variation is which leaf each access touches, and obliviousness means
    // the leaf choices are uniform regardless of the input. So the check is
    // statistical: run two fixed inputs `pairs` times each, require every
    // run's trace length to be identical (shape depends only on n, k, d),
    // and compare the pooled leaf histograms with a two-sample chi-squared
    // homogeneity test at significance 0.001.
    Rng rng(olive::derive_seed(args.seed, 0xA));
    const AggregateInstance a = olive::random_instance(args.n, k, args.d, rng);
    const AggregateInstance b = olive::random_instance(args.n, k, args.d, rng);
    olive::PathOram::Params params;
    params.capacity = args.d;
    params.log_leaves = true;
    auto run_logged = [&](const AggregateInstance& inst, uint64_t seed,
                          std::vector<uint64_t>& histogram) -> uint64_t {
      Tracer tracer(Tracer::Mode::kCount);
      olive::PathOram oram(params, seed, tracer);
      for (uint64_t q = 0; q < inst.cells.size(); ++q) {
        const olive::CtWord cell = inst.cells[q];
        const bool dummy = olive::is_sentinel(cell);
        oram.access(olive::OramOp::kWriteAdd,
                    olive::o_select_u64(dummy, 0, olive::cell_index(cell)),
                    olive::o_select(dummy, 0.0f, olive::cell_value(cell)));
      }
      for (uint64_t j = 0; j < inst.d; ++j) oram.access(olive::OramOp::kRead, j);
      histogram.resize(oram.leaf_count());
      for (uint32_t leaf : oram.leaf_log()) ++histogram[leaf];
      return tracer.total_events();
    };
    std::vector<uint64_t> hist_a, hist_b;
    bool shape_constant = true;
    uint64_t shape = 0;
    for (uint64_t s = 0; s < pairs; ++s) {
      const uint64_t ea = run_logged(a, olive::derive_seed(args.seed, 0xB, s), hist_a);
      const uint64_t eb = run_logged(b, olive::derive_seed(args.seed, 0xC, s), hist_b);
      if (s == 0) shape = ea;
      shape_constant = shape_constant && ea == shape && eb == shape;
    }
    double chi2 = 0.0;
    const double total_a = double(pairs) * double(a.cells.size() + a.d);
    const double total_b = total_a;
    for (size_t leaf = 0; leaf < hist_a.size(); ++leaf) {
      const double pooled = double(hist_a[leaf] + hist_b[leaf]) / (total_a + total_b);
      if (pooled == 0.0) continue;
      const double ea = total_a * pooled;
      const double eb = total_b * pooled;
      chi2 += (double(hist_a[leaf]) - ea) * (double(hist_a[leaf]) - ea) / ea +
              (double(hist_b[leaf]) - eb) * (double(hist_b[leaf]) - eb) / eb;
    }
    const double df = double(hist_a.size() - 1);
    const double z = 3.090232;  // one-sided 0.001 quantile of the normal
    const double term = 1.0 - 2.0 / (9.0 * df) + z * std::sqrt(2.0 / (9.0 * df));
    const double critical = df * term * term * term;
    report["mode"] = "statistical";
    report["events_per_run"] = shape;
    report["shape_constant"] = shape_constant;
    report["leaves"] = hist_a.size();
    report["chi_squared"] = chi2;
    report["chi_squared_critical"] = critical;
    ok = shape_constant && chi2 < critical;
  } else if (kind == AggregatorKind::kLinear) {
    uint64_t distinguishable = 0;
    bool leaks_exact = true;
    for (uint64_t p = 0; p < pairs; ++p) {
      Rng rng(olive::derive_seed(args.seed, 0xD, p));
      const AggregateInstance a = olive::random_instance(args.n, k, args.d, rng);
      AggregateInstance b = olive::random_instance(args.n, k, args.d, rng);
      for (int retry = 0; olive::same_index_multiset(a, b); ++retry) {
        if (retry == 1000) throw std::runtime_error("could not generate a differing pair");
        b = olive::random_instance(args.n, k, args.d, rng);
      }
      Tracer tracer(Tracer::Mode::kRecord);
      olive::linear_aggregate(a, tracer);
      const olive::AccessTrace trace_a = tracer.take();
      olive::linear_aggregate(b, tracer);
      const olive::AccessTrace trace_b = tracer.take();
      if (!olive::trace_equal(trace_a, trace_b)) ++distinguishable;
      const olive::LinearLayout layout{a.n, a.k, a.d};
      leaks_exact = leaks_exact && olive::leaked_indices(trace_a, layout) ==
                                       olive::instance_supports(a) &&
                    olive::leaked_indices(trace_b, layout) == olive::instance_supports(b);
    }
    report["distinguishable"] = distinguishable;
    report["leaks_exact"] = leaks_exact;
    report["mode"] = "witness";
    ok = distinguishable * 100 >= pairs * 99 && leaks_exact;
  } else {
    uint64_t equal = 0;
    for (uint64_t p = 0; p < pairs; ++p) {
      Rng rng(olive::derive_seed(args.seed, 0xE, p));
      const AggregateInstance a = olive::random_instance(args.n, k, args.d, rng);
      const AggregateInstance b = olive::random_instance(args.n, k, args.d, rng);
      Tracer tracer(Tracer::Mode::kRecord);
      run_aggregator(kind, a, args, 0, tracer);
      const olive::AccessTrace trace_a = tracer.take(granularity);
      run_aggregator(kind, b, args, 0, tracer);
      const olive::AccessTrace trace_b = tracer.take(granularity);
      if (olive::trace_equal(trace_a, trace_b)) {
        ++equal;
      } else if (!report.contains("first_divergence")) {
        const auto where = olive::trace_divergence(trace_a, trace_b);
        report["first_divergence"] = {{"pair", p}, {"event", where.value_or(0)}};
      }
    }
    report["equal"] = equal;
    report["granularity"] = granularity;
    report["mode"] = "exact";
    ok = equal == pairs;
  }
  report["pass"] = ok;
  std::cout << report.dump(2) << '\n';
  return ok ? 0 : 1;
}

// fl-train: runs the simulation and writes the leak log, the metrics CSV,
// and one checkpoint per round (the model each round's clients started from)
// plus the final model.
int cmd_fl_train(const std::string& config_path, const std::string& leak_out,
                 const std::string& metrics_out, const std::string& model_out) {
  const olive::FlConfig cfg = olive::load_fl_config(config_path);
  const olive::TrainResult result = olive::train(cfg);

  olive::write_leaks(leak_out, result.leaks);
  olive::write_metrics_csv(metrics_out, result.metrics);
  std::filesystem::create_directories(model_out);
  for (uint32_t t = 1; t <= result.entering.size(); ++t) {
    olive::write_model((std::filesystem::path(model_out) / olive::checkpoint_name(t)).string(),
                       result.entering[t - 1]);
  }
  olive::write_model((std::filesystem::path(model_out) / "model_final.olvm").string(),
                     result.theta);

  for (const auto& m : result.metrics) {
    std::cout << "round " << m.round << ": accuracy " << m.test_accuracy << ", participants "
              << m.participants << ", leaked entries so far " << result.leaks.size() << '\n';
  }
  std::cout << "wrote " << leak_out << ", " << metrics_out << ", " << result.entering.size() + 1
            << " checkpoints under " << model_out << '\n';
  return 0;
}

// attack: rebuilds the world from the config (held-out shards, ground-truth
// labels), loads the per-round checkpoints the leak log references, scores
// every observed user, and prints the per-user CSV plus a summary line.
int cmd_attack(const std::string& config_path, const std::string& leaks_path,
               const std::string& checkpoints_dir, const std::string& method,
               uint32_t known_count, uint64_t cacheline_c, bool jac_union, uint64_t seed,
               const std::string& out_path) {
  const olive::FlConfig cfg = olive::load_fl_config(config_path);
  const std::vector<olive::RoundLeak> leaks = olive::read_leaks(leaks_path);

  olive::Dataset data = olive::build_dataset(cfg.dataset, cfg.seed);
  const olive::FlSplit split = olive::build_split(
      std::move(data), cfg.n_users, cfg.dataset.labels_per_user, cfg.dataset.samples_per_client,
      cfg.dataset.teacher_per_label, cfg.dataset.test_per_label,
      olive::derive_seed(cfg.seed, olive::streams::kData, 1));
  const olive::MlpShape shape{split.pool.input_dim, cfg.model.hidden, split.pool.num_labels};

  uint32_t max_round = 0;
  for (const auto& leak : leaks) max_round = std::max(max_round, leak.round);
  if (leaks.empty()) throw std::runtime_error("user never observed");

  std::vector<std::vector<float>> entering;
  for (uint32_t t = 1; t <= max_round; ++t) {
    const auto path = std::filesystem::path(checkpoints_dir) / olive::checkpoint_name(t);
    if (!std::filesystem::exists(path)) {
      throw std::runtime_error("missing model for round " + std::to_string(t));
    }
    entering.push_back(olive::read_model(path.string()));
    if (entering.back().size() != shape.param_count()) {
      throw std::runtime_error("checkpoint does not match the configured model");
    }
  }

  const uint64_t k = olive::sparsity_k(cfg.alpha, shape.param_count());
  const olive::TeacherTable teachers =
      olive::build_teachers(shape, entering, split.pool, split.label_shards, k);

  std::vector<std::vector<uint32_t>> truth(cfg.n_users);
  for (uint32_t u = 0; u < cfg.n_users; ++u) truth[u] = split.clients[u].labels;

  olive::AttackOptions opt;
  opt.method = olive::parse_attack_method(method);
  opt.known_count = known_count;
  opt.cacheline_c = cacheline_c;
  opt.jac_union = jac_union;
  opt.seed = seed;
  const olive::AttackReport report =
      olive::evaluate_attack(leaks, teachers, truth, shape.param_count(), opt);

  olive::write_attack_csv(std::cout, report);
  std::cout << "# users=" << report.rows.size() << " all=" << report.all_acc
            << " top1=" << report.top1_acc << '\n';
  if (!out_path.empty()) {
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw std::invalid_argument("cannot open " + out_path);
    olive::write_attack_csv(out, report);
  }
  return 0;
}

// trace-dump: records one aggregation run and writes the binary trace file.
// Averaging events are off by default so the dump matches the bare
// aggregation formulas; --with-averaging appends the two post-processing
// sweeps.
int cmd_trace_dump(const AlgoArgs& args, const std::string& out_path, uint64_t granularity,
                   bool with_averaging) {
  require_group_size(args);
  const AggregatorKind kind = olive::parse_aggregator(args.algo);
  const uint64_t k = olive::sparsity_k(args.alpha, args.d);
  Rng rng(olive::derive_seed(args.seed, olive::streams::kBench, 0));
  const AggregateInstance inst = olive::random_instance(args.n, k, args.d, rng);
  Tracer tracer(Tracer::Mode::kRecord);
  DenseVector agg = run_aggregator(kind, inst, args,
                                   olive::derive_seed(args.seed, olive::streams::kBench, 0, 1),
                                   tracer);
  if (with_averaging) {
    Rng noise(olive::derive_seed(args.seed, olive::streams::kNoise, 0));
    olive::average_and_perturb(agg, double(args.n), 0.0, noise, tracer);
  }
  const olive::AccessTrace trace = tracer.take(granularity);
  try {
    olive::write_trace(out_path, trace);
  } catch (const std::runtime_error& e) {
    // A bad output path is a usage error, not an analysis failure.
    throw std::invalid_argument(e.what());
  }
  std::cout << "wrote " << trace.events.size() << " events to " << out_path << " (granularity "
            << trace.granularity << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"olive: oblivious sparse-gradient aggregation toolkit"};
  app.set_help_flag("--help", "print help and exit");
  app.require_subcommand(1);

  AlgoArgs bench_args;
  uint64_t bench_repeat = 1;
  CLI::App* bench = app.add_subcommand("aggregate-bench", "time aggregation on synthetic batches");
  add_algo_flags(bench, bench_args);
  bench->add_option("--repeat", bench_repeat, "repetitions")->check(CLI::PositiveNumber);

  AlgoArgs check_args;
  uint64_t check_pairs = 100;
  CLI::App* check = app.add_subcommand("oblivious-check", "compare traces across input pairs");
  add_algo_flags(check, check_args);
  check->add_option("--pairs", check_pairs, "input pairs (samples per side for oram)")
      ->check(CLI::PositiveNumber);

  std::string train_config, train_leaks = "leaks.jsonl", train_metrics = "metrics.csv";
  std::string train_models = ".";
  CLI::App* train = app.add_subcommand("fl-train", "run the federated simulation");
  train->add_option("--config", train_config, "flat key = value config file")->required();
  train->add_option("--leak-out", train_leaks, "leak log path (JSON lines)");
  train->add_option("--metrics-out", train_metrics, "metrics CSV path");
  train->add_option("--model-out", train_models, "directory for round checkpoints");

  std::string atk_config, atk_leaks, atk_checkpoints, atk_method = "jac", atk_out;
  uint32_t atk_known = 0;
  uint64_t atk_cacheline = 1, atk_seed = 1;
  bool atk_union = false;
  CLI::App* attack = app.add_subcommand("attack", "infer labels from a leak log");
  attack->add_option("--config", atk_config, "config the leaks were produced with")->required();
  attack->add_option("--leaks", atk_leaks, "leak log path")->required();
  attack->add_option("--checkpoints", atk_checkpoints, "directory with model_round_t.olvm")
      ->required();
  attack->add_option("--method", atk_method, "jac|nn|nn-single")
      ->check(CLI::IsMember({"jac", "nn", "nn-single"}));
  attack->add_option("--known-count", atk_known, "known label-set size (0 = cluster)");
  attack->add_option("--cacheline-c", atk_cacheline, "bucket leaks and teachers to this width")
      ->check(CLI::PositiveNumber);
  attack->add_flag("--jac-union", atk_union, "union indices across rounds instead of pairing");
  attack->add_option("--seed", atk_seed, "classifier training seed");
  attack->add_option("--out", atk_out, "also write the CSV here");

  AlgoArgs dump_args;
  std::string dump_out;
  uint64_t dump_granularity = 1;
  bool dump_averaging = false;
  CLI::App* dump = app.add_subcommand("trace-dump", "record one run's trace to a file");
  add_algo_flags(dump, dump_args);
  dump->add_option("--out", dump_out, "output trace path")->required();
  dump->add_option("--granularity", dump_granularity, "bucket cells to this width")
      ->check(CLI::PositiveNumber);
  dump->add_flag("--with-averaging", dump_averaging, "append the averaging sweeps");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (bench->parsed()) return cmd_aggregate_bench(bench_args, bench_repeat);
    if (check->parsed()) return cmd_oblivious_check(check_args, check_pairs);
    if (train->parsed()) {
      return cmd_fl_train(train_config, train_leaks, train_metrics, train_models);
    }
    if (attack->parsed()) {
      return cmd_attack(atk_config, atk_leaks, atk_checkpoints, atk_method, atk_known,
                        atk_cacheline, atk_union, atk_seed, atk_out);
    }
    if (dump->parsed()) {
      return cmd_trace_dump(dump_args, dump_out, dump_granularity, dump_averaging);
    }
  } catch (const CLI::ValidationError& e) {
    std::cerr << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::runtime_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
