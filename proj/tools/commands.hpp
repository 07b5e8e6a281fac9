#pragma once

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <iostream>
#include <mutex>

#include "mnarflow/mnarflow.hpp"

namespace mnarflow::cli {

namespace fs = std::filesystem;

enum ExitCode { kOk = 0, kConfigError = 2, kDataError = 3, kTrainingError = 4 };

struct Options {
  std::string config;
  std::string out;
  std::string data;
  std::string checkpoint;
  std::string truth;
  std::string test;
  std::optional<std::uint64_t> seed;
  int threads = default_thread_count();
  bool pre_imputed = false;
  bool quiet = false;
};

struct LoadedConfig {
  ExperimentConfig cfg;
  std::string text;  // hashed into the manifest
};

inline LoadedConfig load_config(const Options& opt) {
  LoadedConfig out;
  if (opt.config.empty()) {
    out.cfg = parse_config(Json::object());
    out.text = "{}";
  } else {
    std::ifstream is(opt.config, std::ios::binary);
    if (!is) throw ConfigError("cannot open config '" + opt.config + "'");
    out.text.assign(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
    Json j;
    try {
      j = Json::parse(out.text);
    } catch (const Json::parse_error& e) {
      throw ConfigError("config '" + opt.config + "' is not valid JSON: " + e.what());
    }
    out.cfg = parse_config(j);
  }
  if (opt.threads < 1) throw ConfigError("--threads must be >= 1");
  out.cfg.train.threads = opt.threads;
  return out;
}

inline fs::path output_dir(const Options& opt, const ExperimentConfig& cfg) {
  fs::path dir = opt.out.empty() ? fs::path(cfg.output_dir) : fs::path(opt.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory '" + dir.string() + "': " + ec.message());
  return dir;
}

inline void write_manifest(const fs::path& dir, const std::string& command, std::uint64_t seed,
                           const std::string& config_text) {
  write_json_file((dir / "manifest.json").string(), manifest_json(command, seed, config_text));
}

inline void check_gaussian_exact(const ExperimentConfig& cfg) {
  if (cfg.train.estep_mode != EStepMode::gaussian_exact) return;
  if (cfg.train.family != ModelFamily::linear || cfg.instance.sem_family != SemFamily::linear) {
    throw ConfigError(
        "train.estep_mode: gaussian-exact samples the exact Gaussian posterior and is only valid for a linear "
        "SEM; this config is nonlinear (use \"rejection\")");
  }
  if (!cfg.train.ignorable_mechanism) {
    throw ConfigError(
        "train.estep_mode: gaussian-exact ignores the missingness mechanism; set train.ignorable_mechanism "
        "to true only for MCAR/MAR data");
  }
}

// ---------------------------------------------------------------------------

inline int cmd_simulate(const Options& opt, std::ostream& log) {
  LoadedConfig lc = load_config(opt);
  if (opt.seed) lc.cfg.instance.seed = *opt.seed;
  const fs::path dir = output_dir(opt, lc.cfg);
  const Truth truth = gen_instance(lc.cfg.instance);
  const Simulation sim = simulate(truth, lc.cfg.instance);
  write_dataset(sim.data, (dir / "data.csv").string());
  write_dataset(complete_dataset(sim), (dir / "complete.csv").string());
  write_json_file((dir / "truth.json").string(), truth_json(truth));
  write_manifest(dir, "simulate", lc.cfg.instance.seed, lc.text);
  log << "simulate: " << sim.data.n() << " records, K = " << sim.data.k() << ", missing rate "
      << eligible_missing_rate(sim.data) << " -> " << dir.string() << '\n';
  return kOk;
}

inline int cmd_fit(const Options& opt, std::ostream& log) {
  LoadedConfig lc = load_config(opt);
  if (opt.seed) lc.cfg.train.seed = *opt.seed;
  if (opt.data.empty()) throw ConfigError("fit: --data is required");
  check_gaussian_exact(lc.cfg);
  TrainConfig train = lc.cfg.train;
  const Dataset data = read_dataset(opt.data, opt.pre_imputed);
  if (opt.pre_imputed) {
    if (!data.y.allFinite()) throw DataError("fit --pre-imputed: dataset still has missing values");
    train.estep_mode = EStepMode::passthrough;
  }
  const fs::path dir = output_dir(opt, lc.cfg);
  if (data.fully_observed() || train.estep_mode == EStepMode::passthrough) log << "E-step pass-through\n";

  const auto on_epoch = [&](const EpochRecord& rec) {
    if (opt.quiet) return;
    if (rec.epoch == 1 || rec.epoch % 10 == 0 || rec.epoch == train.epochs) {
      log << "epoch " << rec.epoch << "/" << train.epochs << " objective " << rec.objective << " attempts "
          << rec.mean_attempts << '\n';
    }
  };
  const FitState st = train.lambda_dag > 0.0 ? run_em_dag(data, train, on_epoch) : run_em(data, train, on_epoch);
  write_json_file((dir / "checkpoint.json").string(), checkpoint_json(st));
  write_text_file((dir / "history.csv").string(), history_csv(st.history));
  write_text_file((dir / "acceptance.csv").string(), acceptance_csv(st.history));
  write_manifest(dir, "fit", train.seed, lc.text);
  const ExtractedGraphs g = extract_graph(st, train.edge_threshold, train.m_edge_threshold);
  log << "fit: " << g.target.edge_count() << " target edges, " << g.m_edges.edge_count() << " m-edges -> "
      << dir.string() << '\n';
  return kOk;
}

struct EdgeScores {
  int shd = 0;
  int true_positive = 0;
  int estimated = 0;
  int truth = 0;
};

inline Json ratio_or_null(int num, int den) { return den == 0 ? Json(nullptr) : Json(static_cast<double>(num) / den); }

inline EdgeScores score_edges(const EdgePattern& est, const EdgePattern& truth, bool m_edges) {
  EdgeScores s;
  s.shd = m_edges ? m_edge_shd(est, truth) : shd(est, truth);
  s.estimated = est.edge_count();
  s.truth = truth.edge_count();
  for (int j = 0; j < truth.k(); ++j)
    for (int c = 0; c < truth.k(); ++c) s.true_positive += est.has(j, c) && truth.has(j, c);
  return s;
}

/// Accepts a fit checkpoint or a truth document (scored as a perfect fit).
inline FitState load_fitted(const std::string& path) {
  const Json j = read_json_file(path);
  if (j.is_object() && j.value("schema", std::string()) == "mnarflow.truth") return truth_state(truth_from_json(j));
  return checkpoint_from_json(j);
}

inline Json evaluate_state(const FitState& st, const Truth& truth, const TrainConfig& train,
                           const Dataset* test = nullptr) {
  if (node_count(st.sem) != truth.target.k()) {
    throw DimensionError("evaluate: checkpoint has K = " + std::to_string(node_count(st.sem)) + " but truth has K = " +
                         std::to_string(truth.target.k()));
  }
  const ExtractedGraphs g = extract_graph(st, train.edge_threshold, train.m_edge_threshold);
  const EdgeScores t = score_edges(g.target, truth.target, false);
  const EdgeScores m = score_edges(g.m_edges, truth.m_edges, true);
  Json out{{"k", truth.target.k()},
           {"shd_target", t.shd},
           {"shd_m", m.shd},
           {"edges_target", t.estimated},
           {"edges_target_true", t.truth},
           {"precision_target", ratio_or_null(t.true_positive, t.estimated)},
           {"recall_target", ratio_or_null(t.true_positive, t.truth)},
           {"edges_m", m.estimated},
           {"edges_m_true", m.truth},
           {"precision_m", ratio_or_null(m.true_positive, m.estimated)},
           {"recall_m", ratio_or_null(m.true_positive, m.truth)}};
  if (test) {
    if (test->k() != truth.target.k()) throw DimensionError("evaluate: test split has a different K");
    const double ll = proxy_loglik(*test, st, train);
    out["heldout_proxy_loglik"] = std::isfinite(ll) ? Json(ll) : Json(nullptr);
  }
  return out;
}

inline int cmd_evaluate(const Options& opt, std::ostream& log) {
  LoadedConfig lc = load_config(opt);
  if (opt.checkpoint.empty() || opt.truth.empty()) throw ConfigError("evaluate: --checkpoint and --truth are required");
  const FitState st = load_fitted(opt.checkpoint);
  const Truth truth = truth_from_json(read_json_file(opt.truth));
  std::optional<Dataset> test;
  if (!opt.test.empty()) test = read_dataset(opt.test);
  const Json metrics = evaluate_state(st, truth, lc.cfg.train, test ? &*test : nullptr);
  fs::path out = opt.out.empty() ? fs::path(lc.cfg.output_dir) / "metrics.json" : fs::path(opt.out);
  if (fs::is_directory(out)) out /= "metrics.json";
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_json_file(out.string(), metrics);
  log << "evaluate: shd_target " << metrics["shd_target"] << ", shd_m " << metrics["shd_m"] << " -> " << out.string()
      << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// Benchmark

struct BenchRow {
  double rate = 0.0;
  std::uint64_t seed = 0;
  std::string method;
  std::optional<int> shd_target;
  std::optional<int> shd_m;
  double seconds = 0.0;
  std::string error;
};

/// Rows with any missing entry removed.
inline Dataset complete_case_rows(const Dataset& d) {
  std::vector<int> rows;
  for (int i = 0; i < d.n(); ++i)
    if (d.complete_record(i)) rows.push_back(i);
  if (rows.empty()) throw DataError("complete_case: no complete records");
  return d.subset(rows);
}

/// Missing entries replaced by the observed column mean (over rows where the
/// node is not intervened).
inline Dataset mean_imputed(const Dataset& d) {
  Dataset out = d;
  for (int c = 0; c < d.k(); ++c) {
    double sum = 0.0;
    int n = 0;
    for (int i = 0; i < d.n(); ++i)
      if (d.r(i, c) && d.s(i, c)) {
        sum += d.y(i, c);
        ++n;
      }
    const double mean = n ? sum / n : 0.0;
    for (int i = 0; i < d.n(); ++i)
      if (!d.r(i, c)) out.y(i, c) = mean;
  }
  out.r.setOnes();
  return out;
}

struct BenchCell {
  double rate;
  std::uint64_t seed;
  std::string method;
};

inline BenchRow run_cell(const BenchCell& cell, const ExperimentConfig& cfg, int inner_threads) {
  BenchRow row{cell.method == "complete" ? 0.0 : cell.rate, cell.seed, cell.method, {}, {}, 0.0, {}};
  const auto start = std::chrono::steady_clock::now();
  try {
    InstanceSpec spec = cfg.instance;
    spec.seed = cell.seed;
    spec.missing_rate = cell.method == "complete" ? cfg.instance.missing_rate : cell.rate;
    TrainConfig train = cfg.train;
    train.seed = cell.seed;
    train.threads = inner_threads;
    const Truth truth = gen_instance(spec);
    const Simulation sim = simulate(truth, spec);
    Dataset data;
    bool mechanism_learned = true;
    if (cell.method == "em") {
      data = sim.data;
    } else if (cell.method == "complete") {
      data = complete_dataset(sim);
      mechanism_learned = false;
    } else if (cell.method == "complete_case") {
      data = complete_case_rows(sim.data);
      mechanism_learned = false;
    } else {
      data = mean_imputed(sim.data);
      mechanism_learned = false;
    }
    if (!mechanism_learned) train.estep_mode = EStepMode::passthrough;
    const FitState st = train.lambda_dag > 0.0 ? run_em_dag(data, train) : run_em(data, train);
    const ExtractedGraphs g = extract_graph(st, train.edge_threshold, train.m_edge_threshold);
    row.shd_target = shd(g.target, truth.target);
    if (mechanism_learned) row.shd_m = m_edge_shd(g.m_edges, truth.m_edges);
  } catch (const std::exception& e) {
    row.error = e.what();
  }
  row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return row;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c == '\n' ? ' ' : c;
  }
  return out + '"';
}

inline std::string benchmark_header() { return "rate,seed,method,shd_target,shd_m,seconds,error\n"; }

inline std::string benchmark_line(const BenchRow& r) {
  std::ostringstream os;
  os << format_double(r.rate) << ',' << r.seed << ',' << r.method << ',';
  if (r.shd_target) os << *r.shd_target;
  os << ',';
  if (r.shd_m) os << *r.shd_m;
  char secs[32];
  std::snprintf(secs, sizeof secs, "%.3f", r.seconds);
  os << ',' << secs << ',' << csv_escape(r.error) << '\n';
  return os.str();
}

/// Cells: per seed, one complete-data control (rate 0) and every other
/// method at every rate.
inline std::vector<BenchCell> benchmark_cells(const ExperimentConfig& cfg) {
  std::vector<BenchCell> cells;
  const SweepSpec& sw = *cfg.sweep;
  for (int s = 0; s < sw.seeds; ++s) {
    const std::uint64_t seed = cfg.instance.seed + static_cast<std::uint64_t>(s);
    for (const auto& m : sw.methods)
      if (m == "complete") cells.push_back({0.0, seed, m});
    for (double rate : sw.rates)
      for (const auto& m : sw.methods)
        if (m != "complete") cells.push_back({rate, seed, m});
  }
  return cells;
}

inline int cmd_benchmark(const Options& opt, std::ostream& log) {
  LoadedConfig lc = load_config(opt);
  if (opt.seed) lc.cfg.instance.seed = *opt.seed;
  if (!lc.cfg.sweep) throw ConfigError("benchmark: config has no \"sweep\" section");
  const fs::path dir = output_dir(opt, lc.cfg);
  const std::vector<BenchCell> cells = benchmark_cells(lc.cfg);
  std::vector<BenchRow> rows(cells.size());

  // Cells run in a pool; lines are written in cell order by one writer as
  // soon as every earlier cell has finished.
  const std::string path = (dir / "benchmark.csv").string();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write '" + path + "'");
  os << benchmark_header() << std::flush;
  std::mutex mu;
  std::vector<char> done(cells.size(), 0);
  std::size_t next_to_write = 0;
  const int outer = std::min<int>(opt.threads, static_cast<int>(cells.size()));
  parallel_for(cells.size(), outer, [&](std::size_t i) {
    BenchRow row = run_cell(cells[i], lc.cfg, 1);
    std::lock_guard<std::mutex> lock(mu);
    rows[i] = std::move(row);
    done[i] = 1;
    if (!opt.quiet) {
      log << "benchmark: rate " << rows[i].rate << " seed " << rows[i].seed << " " << rows[i].method << " -> "
          << (rows[i].error.empty() ? "shd " + std::to_string(rows[i].shd_target.value_or(-1)) : rows[i].error)
          << '\n';
    }
    while (next_to_write < cells.size() && done[next_to_write]) os << benchmark_line(rows[next_to_write++]);
    os.flush();
  });
  write_manifest(dir, "benchmark", lc.cfg.instance.seed, lc.text);
  int failures = 0;
  for (const auto& r : rows) failures += !r.error.empty();
  log << "benchmark: " << rows.size() << " rows (" << failures << " failed) -> " << path << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& log = std::cerr) {
  CLI::App app{"Causal structure and missingness-mechanism learning from incomplete interventional data"};
  app.require_subcommand(1);
  Options opt;
  std::uint64_t seed = 0;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "experiment config (JSON)");
    sub->add_option("--out", opt.out, "output directory (or file for evaluate)");
    sub->add_option("--seed", seed, "override the seed");
    sub->add_option("--threads", opt.threads, "worker threads (default: $MNARFLOW_THREADS, else all cores)");
    sub->add_flag("--quiet", opt.quiet, "less logging");
  };
  CLI::App* sim = app.add_subcommand("simulate", "generate an instance and its dataset");
  common(sim);
  CLI::App* fit = app.add_subcommand("fit", "fit a model by penalized EM");
  common(fit);
  fit->add_option("--data", opt.data, "dataset CSV")->required();
  fit->add_flag("--pre-imputed", opt.pre_imputed, "dataset is externally imputed; skip the E-step");
  CLI::App* eval = app.add_subcommand("evaluate", "score a checkpoint against the truth");
  common(eval);
  eval->add_option("--checkpoint", opt.checkpoint, "checkpoint JSON")->required();
  eval->add_option("--truth", opt.truth, "truth JSON written by simulate")->required();
  eval->add_option("--test", opt.test, "held-out dataset CSV");
  CLI::App* bench = app.add_subcommand("benchmark", "sweep missing rates and seeds");
  common(bench);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream out, err;
    const int code = app.exit(e, out, err);
    log << out.str() << err.str();
    return code == 0 ? kOk : kConfigError;
  }
  for (CLI::App* sub : {sim, fit, eval, bench})
    if (sub->parsed() && sub->count("--seed")) opt.seed = seed;

  try {
    if (sim->parsed()) return cmd_simulate(opt, log);
    if (fit->parsed()) return cmd_fit(opt, log);
    if (eval->parsed()) return cmd_evaluate(opt, log);
    return cmd_benchmark(opt, log);
  } catch (const ConfigError& e) {
    log << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const DataError& e) {
    log << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const TrainingError& e) {
    log << "training failure: " << e.what() << '\n';
    return kTrainingError;
  } catch (const NumericError& e) {
    log << "training failure: " << e.what() << '\n';
    return kTrainingError;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return kDataError;
  }
}

}  // namespace mnarflow::cli
