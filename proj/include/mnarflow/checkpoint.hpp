#pragma once

#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mnarflow/bench.hpp"
#include "mnarflow/core.hpp"
#include "mnarflow/trainer.hpp"

namespace mnarflow {

using Json = nlohmann::json;

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr int kSchemaVersion = 1;

// Doubles go through nlohmann's shortest round-trip formatting, so parsing a
// dumped document restores every value bit for bit.

inline Json to_json(const Matrix& m) {
  Json rows = Json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Json row = Json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Json to_json(const Vector& v) {
  Json out = Json::array();
  for (double x : v) out.push_back(x);
  return out;
}

inline Json to_json(const EdgePattern& p) {
  Json rows = Json::array();
  for (int i = 0; i < p.k(); ++i) {
    Json row = Json::array();
    for (int j = 0; j < p.k(); ++j) row.push_back(p.has(i, j) ? 1 : 0);
    rows.push_back(std::move(row));
  }
  return rows;
}

namespace detail {

inline const Json& field(const Json& obj, const std::string& key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) throw DataError(where + ": missing field '" + key + "'");
  return obj.at(key);
}

inline double number(const Json& v, const std::string& where) {
  if (!v.is_number()) throw DataError(where + ": expected a number");
  return v.get<double>();
}

}  // namespace detail

inline Matrix matrix_from_json(const Json& j, const std::string& where) {
  if (!j.is_array()) throw DataError(where + ": expected an array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows ? static_cast<Eigen::Index>(j[0].size()) : 0;
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    if (!j[i].is_array() || static_cast<Eigen::Index>(j[i].size()) != cols) throw DataError(where + ": ragged matrix");
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = detail::number(j[i][c], where);
  }
  return m;
}

inline Vector vector_from_json(const Json& j, const std::string& where) {
  if (!j.is_array()) throw DataError(where + ": expected an array");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = detail::number(j[i], where);
  return v;
}

inline EdgePattern pattern_from_json(const Json& j, const std::string& where) {
  const Matrix m = matrix_from_json(j, where);
  if (m.rows() != m.cols()) throw DimensionError(where + ": pattern must be square");
  BitMatrix bits(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (m(i, c) != 0.0 && m(i, c) != 1.0) throw DataError(where + ": pattern entries must be 0/1");
      bits(i, c) = m(i, c) == 1.0;
    }
  try {
    return EdgePattern(bits);
  } catch (const Error& e) {
    throw DataError(where + ": " + e.what());
  }
}

inline Json to_json(const SemModel& model) {
  Json j;
  if (const auto* lin = std::get_if<LinearSem>(&model)) {
    j["architecture"] = "linear";
    j["b"] = to_json(lin->b);
    j["contractivity_bound"] = lin->contractivity_bound;
  } else {
    const auto& net = std::get<MlpSem>(model);
    j["architecture"] = "mlp";
    j["activation"] = to_string(net.activation);
    j["w1"] = to_json(net.w1);
    j["b1"] = to_json(net.b1);
    j["w2"] = to_json(net.w2);
    j["b2"] = to_json(net.b2);
    j["lipschitz_target"] = net.lipschitz_target;
  }
  j["lipschitz_bound"] = lipschitz_bound(model);
  return j;
}

inline SemModel sem_from_json(const Json& j) {
  const std::string arch = detail::field(j, "architecture", "sem").get<std::string>();
  if (arch == "linear") {
    LinearSem lin;
    lin.b = matrix_from_json(detail::field(j, "b", "sem"), "sem.b");
    lin.contractivity_bound = detail::number(detail::field(j, "contractivity_bound", "sem"), "sem.contractivity_bound");
    if (lin.b.rows() != lin.b.cols()) throw DimensionError("sem.b must be square");
    return lin;
  }
  if (arch == "mlp") {
    MlpSem net;
    try {
      net.activation = activation_from_string(detail::field(j, "activation", "sem").get<std::string>());
    } catch (const ConfigError& e) {
      throw DataError(std::string("sem.activation: ") + e.what());
    }
    net.w1 = matrix_from_json(detail::field(j, "w1", "sem"), "sem.w1");
    net.b1 = vector_from_json(detail::field(j, "b1", "sem"), "sem.b1");
    net.w2 = matrix_from_json(detail::field(j, "w2", "sem"), "sem.w2");
    net.b2 = vector_from_json(detail::field(j, "b2", "sem"), "sem.b2");
    net.lipschitz_target = detail::number(detail::field(j, "lipschitz_target", "sem"), "sem.lipschitz_target");
    if (net.w2.rows() != net.w1.cols() || net.w2.cols() != net.w1.rows() || net.b1.size() != net.w1.cols() ||
        net.b2.size() != net.w1.rows()) {
      throw DimensionError("sem: network layer shapes disagree");
    }
    return net;
  }
  throw DataError("sem.architecture: unknown value '" + arch + "'");
}

inline Json to_json(const GumbelMask& mask) {
  return {{"logits", to_json(mask.logits)}, {"temperature", mask.temperature}, {"hard", mask.hard}};
}

inline GumbelMask mask_from_json(const Json& j) {
  GumbelMask m;
  m.logits = matrix_from_json(detail::field(j, "logits", "mask"), "mask.logits");
  m.temperature = detail::number(detail::field(j, "temperature", "mask"), "mask.temperature");
  m.hard = detail::field(j, "hard", "mask").get<bool>();
  return m;
}

inline Json to_json(const NoiseModel& noise) {
  return {{"variances", to_json(noise.variances)}, {"learnable", noise.learnable}};
}

inline NoiseModel noise_from_json(const Json& j) {
  NoiseModel n;
  n.variances = vector_from_json(detail::field(j, "variances", "noise"), "noise.variances");
  n.learnable = detail::field(j, "learnable", "noise").get<bool>();
  n.validate();
  return n;
}

inline Json to_json(const MnarModel& m) {
  Json j{{"w", to_json(m.w)}, {"z", to_json(m.z)}};
  if (m.parent_pattern) j["parent_pattern"] = to_json(*m.parent_pattern);
  return j;
}

inline MnarModel mnar_from_json(const Json& j) {
  MnarModel m;
  m.w = matrix_from_json(detail::field(j, "w", "mnar"), "mnar.w");
  m.z = vector_from_json(detail::field(j, "z", "mnar"), "mnar.z");
  if (j.contains("parent_pattern")) m.parent_pattern = pattern_from_json(j["parent_pattern"], "mnar.parent_pattern");
  m.validate();
  return m;
}

inline Json to_json(const AdamState& a) { return {{"m", to_json(a.m)}, {"v", to_json(a.v)}, {"t", a.t}}; }

inline AdamState adam_from_json(const Json& j) {
  AdamState a;
  a.m = vector_from_json(detail::field(j, "m", "optimizer"), "optimizer.m");
  a.v = vector_from_json(detail::field(j, "v", "optimizer"), "optimizer.v");
  a.t = detail::field(j, "t", "optimizer").get<long>();
  return a;
}

inline Json to_json(const EpochRecord& e) {
  return {{"epoch", e.epoch},           {"objective", e.objective},       {"objective_se", e.objective_se},
          {"proxy_loglik", e.proxy_loglik}, {"mean_attempts", e.mean_attempts}, {"fallbacks", e.fallbacks},
          {"records", e.records},       {"lipschitz", e.lipschitz},       {"temperature", e.temperature}};
}

inline EpochRecord epoch_from_json(const Json& j) {
  EpochRecord e;
  e.epoch = j.at("epoch").get<int>();
  e.objective = j.at("objective").get<double>();
  e.objective_se = j.at("objective_se").get<double>();
  // NaN (no complete records) is stored as null
  e.proxy_loglik = j.at("proxy_loglik").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                  : j.at("proxy_loglik").get<double>();
  e.mean_attempts = j.at("mean_attempts").get<double>();
  e.fallbacks = j.at("fallbacks").get<int>();
  e.records = j.at("records").get<int>();
  e.lipschitz = j.at("lipschitz").get<double>();
  e.temperature = j.at("temperature").get<double>();
  return e;
}

/// Checkpoint document: theta (sem, mask, noise), section `mnar`, optimizer
/// moments and history.
inline Json checkpoint_json(const FitState& st) {
  Json j;
  j["schema"] = "mnarflow.checkpoint";
  j["schema_version"] = kSchemaVersion;
  j["theta"] = {{"sem", to_json(st.sem)}, {"mask", to_json(st.mask)}, {"noise", to_json(st.noise)}};
  j["mnar"] = to_json(st.mnar);
  j["optimizer"] = {{"theta", to_json(st.adam_theta)}, {"phi", to_json(st.adam_phi)}};
  j["dag_constrained"] = st.dag_constrained;
  j["estep_passthrough"] = st.estep_passthrough;
  Json hist = Json::array();
  for (const auto& e : st.history) hist.push_back(to_json(e));
  j["history"] = std::move(hist);
  return j;
}

inline FitState checkpoint_from_json(const Json& j) {
  try {
    if (j.value("schema", std::string()) != "mnarflow.checkpoint") throw DataError("checkpoint: wrong schema tag");
    if (j.value("schema_version", 0) != kSchemaVersion) throw DataError("checkpoint: unsupported schema_version");
    FitState st;
    const Json& theta = detail::field(j, "theta", "checkpoint");
    st.sem = sem_from_json(detail::field(theta, "sem", "theta"));
    st.mask = mask_from_json(detail::field(theta, "mask", "theta"));
    st.noise = noise_from_json(detail::field(theta, "noise", "theta"));
    st.mnar = mnar_from_json(detail::field(j, "mnar", "checkpoint"));
    if (j.contains("optimizer")) {
      st.adam_theta = adam_from_json(j["optimizer"].at("theta"));
      st.adam_phi = adam_from_json(j["optimizer"].at("phi"));
    }
    st.dag_constrained = j.value("dag_constrained", false);
    st.estep_passthrough = j.value("estep_passthrough", false);
    if (j.contains("history"))
      for (const auto& e : j["history"]) st.history.push_back(epoch_from_json(e));
    const int k = node_count(st.sem);
    if (st.mask.k() != k || st.noise.variances.size() != k || st.mnar.k() != k) {
      throw DimensionError("checkpoint: section sizes disagree");
    }
    return st;
  } catch (const Json::exception& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
}

/// The ground truth as a fitted state: mask logits +/-kTruthLogit on the
/// target pattern, so extraction recovers the pattern exactly.
inline constexpr double kTruthLogit = 30.0;

inline FitState truth_state(const Truth& t) {
  const int k = t.target.k();
  FitState st;
  st.sem = t.sem;
  st.mask.logits = Matrix::Constant(k, k, -kTruthLogit);
  for (int i = 0; i < k; ++i)
    for (int c = 0; c < k; ++c)
      if (t.target.has(i, c)) st.mask.logits(i, c) = kTruthLogit;
  st.noise = t.noise;
  st.mnar = t.mnar;
  return st;
}

inline Json truth_json(const Truth& t) {
  Json j;
  j["schema"] = "mnarflow.truth";
  j["schema_version"] = kSchemaVersion;
  j["sem"] = to_json(t.sem);
  j["sem_mask"] = to_json(t.mask);
  j["noise"] = to_json(t.noise);
  j["mnar"] = to_json(t.mnar);
  j["target_pattern"] = to_json(t.target);
  j["m_pattern"] = to_json(t.m_edges);
  return j;
}

inline Truth truth_from_json(const Json& j) {
  try {
    if (j.value("schema", std::string()) != "mnarflow.truth") throw DataError("truth: wrong schema tag");
    Truth t;
    t.sem = sem_from_json(detail::field(j, "sem", "truth"));
    t.mask = matrix_from_json(detail::field(j, "sem_mask", "truth"), "truth.sem_mask");
    t.noise = noise_from_json(detail::field(j, "noise", "truth"));
    t.mnar = mnar_from_json(detail::field(j, "mnar", "truth"));
    t.target = pattern_from_json(detail::field(j, "target_pattern", "truth"), "truth.target_pattern");
    t.m_edges = pattern_from_json(detail::field(j, "m_pattern", "truth"), "truth.m_pattern");
    return t;
  } catch (const Json::exception& e) {
    throw DataError(std::string("truth: ") + e.what());
  }
}

inline Json read_json_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open '" + path + "'");
  try {
    return Json::parse(is);
  } catch (const Json::parse_error& e) {
    throw DataError("'" + path + "' is not valid JSON: " + e.what());
  }
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  os << text;
  if (!os) throw DataError("write failed for '" + path + "'");
}

inline void write_json_file(const std::string& path, const Json& j) { write_text_file(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------
// Experiment configuration

struct SweepSpec {
  std::vector<double> rates{0.1, 0.2, 0.3, 0.4, 0.5};
  int seeds = 1;
  std::vector<std::string> methods{"em", "complete", "complete_case", "mean_impute"};
};

struct ExperimentConfig {
  InstanceSpec instance;
  TrainConfig train;
  std::optional<SweepSpec> sweep;
  std::string output_dir = ".";

  void validate() const {
    instance.validate();
    train.validate();
    if (sweep) {
      if (sweep->seeds < 1) throw ConfigError("sweep.seeds must be >= 1");
      if (sweep->rates.empty()) throw ConfigError("sweep.rates must not be empty");
      for (double r : sweep->rates)
        if (!(r >= 0.0 && r < 1.0)) throw ConfigError("sweep.rates: every rate must be in [0, 1)");
      for (const auto& m : sweep->methods)
        if (m != "em" && m != "complete" && m != "complete_case" && m != "mean_impute") {
          throw ConfigError("sweep.methods: unknown method '" + m + "'");
        }
    }
  }
};

namespace detail {

/// Reads fields of one config object; rejects unknown keys and wrong types
/// with the dotted field path in the message.
class FieldReader {
 public:
  FieldReader(const Json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  ~FieldReader() = default;

  template <class T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    const Json& v = obj_.at(key);
    const std::string where = path_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where + ": expected true/false");
      out = v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(where + ": expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0) {
          throw ConfigError(where + ": expected a non-negative integer");
        }
      }
      out = v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(where + ": expected a number");
      out = v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(where + ": expected a string");
      out = v.get<std::string>();
    } else {
      try {
        out = v.get<T>();
      } catch (const Json::exception&) {
        throw ConfigError(where + ": wrong type");
      }
    }
  }

  template <class E>
  void read_enum(const std::string& key, E& out, std::initializer_list<std::pair<const char*, E>> names) {
    std::string s;
    read(key, s);
    if (!obj_.contains(key)) return;
    for (const auto& [name, value] : names)
      if (s == name) {
        out = value;
        return;
      }
    std::string allowed;
    for (const auto& [name, value] : names) allowed += (allowed.empty() ? "" : ", ") + std::string(name);
    throw ConfigError(path_ + "." + key + ": unknown value '" + s + "' (expected one of: " + allowed + ")");
  }

  const Json* child(const std::string& key) {
    seen_.insert(key);
    return obj_.contains(key) ? &obj_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [key, value] : obj_.items())
      if (!seen_.count(key)) throw ConfigError(path_ + "." + key + ": unknown field");
  }

  const std::string& path() const { return path_; }

 private:
  const Json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void read_instance(const Json& j, InstanceSpec& spec) {
  FieldReader f(j, "instance");
  f.read("k", spec.k);
  f.read("er_density", spec.er_density);
  f.read("allow_cycles", spec.allow_cycles);
  f.read_enum("sem_family", spec.sem_family, {{"linear", SemFamily::linear}, {"tanh", SemFamily::tanh}});
  f.read("weight_low", spec.weight_low);
  f.read("weight_high", spec.weight_high);
  f.read("lipschitz_target", spec.lipschitz_target);
  f.read("noise_sigma", spec.noise_sigma);
  f.read("n_per_intervention", spec.n_per_intervention);
  f.read("interventions", spec.interventions);
  f.read("include_observational", spec.include_observational);
  f.read("observational_only", spec.observational_only);
  f.read_enum("mechanism", spec.mechanism, {{"mnar", MechanismKind::mnar}, {"mcar", MechanismKind::mcar}});
  f.read("max_parents", spec.max_parents);
  f.read("missing_rate", spec.missing_rate);
  f.read("calibration_rows", spec.calibration_rows);
  f.read("seed", spec.seed);
  f.finish();
}

inline void read_train(const Json& j, TrainConfig& cfg) {
  FieldReader f(j, "train");
  f.read("epochs", cfg.epochs);
  f.read("batch_size", cfg.batch_size);
  f.read("learning_rate", cfg.learning_rate);
  f.read("lambda1", cfg.lambda1);
  f.read("lambda2", cfg.lambda2);
  f.read("lambda_dag", cfg.lambda_dag);
  f.read_enum("estep_mode", cfg.estep_mode,
              {{"rejection", EStepMode::rejection},
               {"gaussian-exact", EStepMode::gaussian_exact},
               {"passthrough", EStepMode::passthrough}});
  f.read_enum("logdet_mode", cfg.logdet_mode,
              {{"auto", LogDetChoice::automatic}, {"exact", LogDetChoice::exact}, {"stochastic", LogDetChoice::stochastic}});
  f.read("seed", cfg.seed);
  f.read("edge_threshold", cfg.edge_threshold);
  f.read("m_edge_threshold", cfg.m_edge_threshold);
  f.read_enum("family", cfg.family, {{"linear", ModelFamily::linear}, {"mlp", ModelFamily::mlp}});
  f.read("hidden", cfg.hidden);
  f.read_enum("activation", cfg.activation, {{"tanh", Activation::tanh}, {"identity", Activation::identity}});
  f.read("lipschitz_target", cfg.lipschitz_target);
  f.read("linear_bound", cfg.linear_bound);
  f.read("init_scale", cfg.init_scale);
  f.read("temperature", cfg.temperature);
  f.read("anneal_temperature", cfg.anneal_temperature);
  f.read("final_temperature", cfg.final_temperature);
  f.read("noise_sigma", cfg.noise_sigma);
  f.read("learn_variance", cfg.learn_variance);
  f.read("ignorable_mechanism", cfg.ignorable_mechanism);
  f.read("early_stop", cfg.early_stop);
  f.read("adam_beta1", cfg.adam_beta1);
  f.read("adam_beta2", cfg.adam_beta2);
  f.read("adam_eps", cfg.adam_eps);
  f.read("threads", cfg.threads);
  f.read("draws_per_record", cfg.draws_per_record);
  if (const Json* rj = f.child("rejection")) {
    FieldReader r(*rj, "train.rejection");
    r.read("proposal_scale", cfg.rejection.proposal_scale);
    r.read("c0", cfg.rejection.c0);
    r.read("pilot_draws", cfg.rejection.pilot_draws);
    r.read("envelope_inflation", cfg.rejection.envelope_inflation);
    r.read("max_attempts", cfg.rejection.max_attempts);
    r.read("max_restarts", cfg.rejection.max_restarts);
    r.read_enum("fallback", cfg.rejection.fallback,
                {{"best-weight", RejectionFallback::best_weight},
                 {"resample-proposal", RejectionFallback::resample_proposal}});
    r.finish();
  }
  if (const Json* ej = f.child("estimator")) {
    FieldReader e(*ej, "train.estimator");
    e.read("poisson_rate", cfg.estimator.poisson_rate);
    e.read("min_terms", cfg.estimator.min_terms);
    e.read("num_hutchinson", cfg.estimator.num_hutchinson);
    e.finish();
  }
  f.finish();
}

}  // namespace detail

inline ExperimentConfig parse_config(const Json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  detail::FieldReader top(j, "config");
  int version = kSchemaVersion;
  top.read("schema_version", version);
  if (version != kSchemaVersion) {
    throw ConfigError("config.schema_version: unsupported version " + std::to_string(version));
  }
  ExperimentConfig cfg;
  if (const Json* inst = top.child("instance")) detail::read_instance(*inst, cfg.instance);
  if (const Json* tr = top.child("train")) detail::read_train(*tr, cfg.train);
  if (const Json* sw = top.child("sweep")) {
    SweepSpec sweep;
    detail::FieldReader f(*sw, "sweep");
    f.read("rates", sweep.rates);
    f.read("seeds", sweep.seeds);
    f.read("methods", sweep.methods);
    f.finish();
    cfg.sweep = sweep;
  }
  top.read("output_dir", cfg.output_dir);
  top.finish();
  cfg.validate();
  return cfg;
}

inline ExperimentConfig read_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open config '" + path + "'");
  Json j;
  try {
    j = Json::parse(is);
  } catch (const Json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

/// Manifest written next to every command output.
inline Json manifest_json(const std::string& command, std::uint64_t seed, const std::string& config_text) {
  return {{"tool", "mnarflow"},
          {"tool_version", kToolVersion},
          {"schema_version", kSchemaVersion},
          {"command", command},
          {"seed", seed},
          {"spec_hash", fnv1a_hex(config_text)}};
}

// ---------------------------------------------------------------------------
// Tables

inline std::string history_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream os;
  os << "epoch,objective,objective_se,proxy_loglik,mean_attempts,fallbacks,lipschitz,temperature\n";
  for (const auto& e : history) {
    os << e.epoch << ',' << format_double(e.objective) << ',' << format_double(e.objective_se) << ','
       << format_double(e.proxy_loglik) << ',' << format_double(e.mean_attempts) << ',' << e.fallbacks << ','
       << format_double(e.lipschitz) << ',' << format_double(e.temperature) << '\n';
  }
  return os.str();
}

inline std::vector<EpochRecord> history_from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::getline(is, line);
  std::vector<EpochRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != 8) throw DataError("history: expected 8 columns");
    EpochRecord e;
    e.epoch = std::stoi(cells[0]);
    e.objective = std::stod(cells[1]);
    e.objective_se = std::stod(cells[2]);
    e.proxy_loglik = std::stod(cells[3]);
    e.mean_attempts = std::stod(cells[4]);
    e.fallbacks = std::stoi(cells[5]);
    e.lipschitz = std::stod(cells[6]);
    e.temperature = std::stod(cells[7]);
    out.push_back(e);
  }
  return out;
}

/// Per-epoch E-step acceptance statistics.
inline std::string acceptance_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream os;
  os << "epoch,records,mean_attempts,fallbacks\n";
  for (const auto& e : history)
    os << e.epoch << ',' << e.records << ',' << format_double(e.mean_attempts) << ',' << e.fallbacks << '\n';
  return os.str();
}

}  // namespace mnarflow
