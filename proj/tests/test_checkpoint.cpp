#include <gtest/gtest.h>

#include "mnarflow/checkpoint.hpp"
#include "oracles.hpp"

using namespace mnarflow;

namespace {

FitState trained_state(ModelFamily family) {
  InstanceSpec spec;
  spec.k = 4;
  spec.n_per_intervention = 40;
  spec.missing_rate = 0.2;
  spec.calibration_rows = 400;
  const Simulation sim = simulate(gen_instance(spec), spec);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.family = family;
  cfg.hidden = 5;
  cfg.learn_variance = true;
  return run_em(sim.data, cfg);
}

std::string message_of(const std::string& text) {
  try {
    parse_config(Json::parse(text));
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  for (ModelFamily family : {ModelFamily::linear, ModelFamily::mlp}) {
    const FitState st = trained_state(family);
    const std::string text = checkpoint_json(st).dump(2);
    const FitState back = checkpoint_from_json(Json::parse(text));
    EXPECT_EQ(pack(back.sem), pack(st.sem));
    EXPECT_EQ(back.mask.logits, st.mask.logits);
    EXPECT_EQ(back.mask.temperature, st.mask.temperature);
    EXPECT_EQ(back.noise.variances, st.noise.variances);
    EXPECT_EQ(back.noise.learnable, st.noise.learnable);
    EXPECT_EQ(back.mnar.w, st.mnar.w);
    EXPECT_EQ(back.mnar.z, st.mnar.z);
    EXPECT_EQ(back.adam_theta.m, st.adam_theta.m);
    EXPECT_EQ(back.adam_phi.v, st.adam_phi.v);
    EXPECT_EQ(back.adam_theta.t, st.adam_theta.t);
    ASSERT_EQ(back.history.size(), st.history.size());
    EXPECT_EQ(back.history[1].objective, st.history[1].objective);
    // Re-serializing gives the same document.
    EXPECT_EQ(checkpoint_json(back).dump(2), text);
  }
}

TEST(Checkpoint, FileRoundTrip) {
  const FitState st = trained_state(ModelFamily::linear);
  const std::string path = (oracle::scratch_dir("checkpoint") / "ckpt.json").string();
  write_json_file(path, checkpoint_json(st));
  EXPECT_EQ(pack(checkpoint_from_json(read_json_file(path)).sem), pack(st.sem));
  EXPECT_THROW(read_json_file(path + ".missing"), DataError);
}

TEST(Checkpoint, RejectsForeignDocuments) {
  EXPECT_THROW(checkpoint_from_json(Json{{"schema", "other"}}), DataError);
  Json j = checkpoint_json(trained_state(ModelFamily::linear));
  j["mnar"]["z"] = Json::array({1.0});
  EXPECT_THROW(checkpoint_from_json(j), DataError);
}

TEST(Checkpoint, TruthRoundTripAndExtraction) {
  InstanceSpec spec;
  spec.k = 5;
  spec.seed = 9;
  spec.sem_family = SemFamily::tanh;
  spec.calibration_rows = 300;
  const Truth t = gen_instance(spec);
  const Truth back = truth_from_json(Json::parse(truth_json(t).dump()));
  EXPECT_EQ(pack(back.sem), pack(t.sem));
  EXPECT_EQ(back.mnar.w, t.mnar.w);
  EXPECT_EQ(back.target.as_real(), t.target.as_real());
  EXPECT_EQ(back.m_edges.as_real(), t.m_edges.as_real());
  const FitState st = truth_state(t);
  EXPECT_EQ(extract_m_edges(st.mnar).as_real(), t.m_edges.as_real());
}

TEST(Config, DefaultsAndOverrides) {
  const ExperimentConfig def = parse_config(Json::object());
  EXPECT_EQ(def.instance.k, 10);
  EXPECT_EQ(def.train.epochs, 100);
  EXPECT_FALSE(def.sweep.has_value());

  const ExperimentConfig cfg = parse_config(Json::parse(R"({
    "schema_version": 1,
    "instance": {"k": 6, "sem_family": "tanh", "interventions": [[0], [1, 2]]},
    "train": {"epochs": 7, "estep_mode": "gaussian-exact", "rejection": {"fallback": "resample-proposal"}},
    "sweep": {"rates": [0.1], "seeds": 2, "methods": ["em"]},
    "output_dir": "out"
  })"));
  EXPECT_EQ(cfg.instance.k, 6);
  EXPECT_EQ(cfg.instance.sem_family, SemFamily::tanh);
  EXPECT_EQ(cfg.instance.interventions.size(), 2u);
  EXPECT_EQ(cfg.train.epochs, 7);
  EXPECT_EQ(cfg.train.estep_mode, EStepMode::gaussian_exact);
  EXPECT_EQ(cfg.train.rejection.fallback, RejectionFallback::resample_proposal);
  ASSERT_TRUE(cfg.sweep.has_value());
  EXPECT_EQ(cfg.sweep->seeds, 2);
  EXPECT_EQ(cfg.output_dir, "out");
}

TEST(Config, ErrorsNameTheField) {
  EXPECT_NE(message_of(R"({"train": {"epoch": 3}})").find("train.epoch"), std::string::npos);
  EXPECT_NE(message_of(R"({"instance": {"k": "ten"}})").find("instance.k"), std::string::npos);
  EXPECT_NE(message_of(R"({"train": {"estep_mode": "gibbs"}})").find("train.estep_mode"), std::string::npos);
  EXPECT_NE(message_of(R"({"train": {"rejection": {"c": 1}}})").find("train.rejection.c"), std::string::npos);
  EXPECT_NE(message_of(R"({"sweep": {"methods": ["magic"]}})").find("magic"), std::string::npos);
  EXPECT_NE(message_of(R"({"schema_version": 9})").find("schema_version"), std::string::npos);
  EXPECT_NE(message_of(R"({"train": {"epochs": 0}})").find("epochs"), std::string::npos);
  EXPECT_NE(message_of(R"({"instance": {"missing_rate": 1.5}})"), "");
  EXPECT_NE(message_of(R"([1, 2])"), "");
}

TEST(Config, FileErrors) {
  EXPECT_THROW(read_config("/nonexistent/config.json"), ConfigError);
  const std::string path = (oracle::scratch_dir("config") / "bad.json").string();
  write_text_file(path, "{ not json");
  EXPECT_THROW(read_config(path), ConfigError);
}

TEST(Manifest, Fields) {
  const Json m = manifest_json("simulate", 42, "{}");
  EXPECT_EQ(m["command"], "simulate");
  EXPECT_EQ(m["seed"], 42);
  EXPECT_EQ(m["tool_version"], kToolVersion);
  EXPECT_EQ(m["spec_hash"].get<std::string>().size(), 16u);
  EXPECT_NE(m["spec_hash"], manifest_json("simulate", 42, "{ }")["spec_hash"]);
}

TEST(Tables, HistoryRoundTrip) {
  std::vector<EpochRecord> h(3);
  for (int i = 0; i < 3; ++i) {
    h[i].epoch = i + 1;
    h[i].objective = -1.0 / (i + 3);
    h[i].objective_se = 0.01 * i;
    h[i].proxy_loglik = i == 1 ? std::numeric_limits<double>::quiet_NaN() : -2.5;
    h[i].mean_attempts = 1.5;
    h[i].fallbacks = i;
    h[i].lipschitz = 0.95;
  }
  const std::string csv = history_csv(h);
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "epoch,objective,objective_se,proxy_loglik,mean_attempts,fallbacks,lipschitz,temperature");
  const auto back = history_from_csv(csv);
  ASSERT_EQ(back.size(), 3u);
  EXPECT_EQ(back[0].objective, h[0].objective);
  EXPECT_TRUE(std::isnan(back[1].proxy_loglik));
  EXPECT_EQ(back[2].fallbacks, 2);
}

TEST(Tables, AcceptanceCsv) {
  std::vector<EpochRecord> h(2);
  h[0].epoch = 1;
  h[0].records = 10;
  h[0].mean_attempts = 2.5;
  h[0].fallbacks = 1;
  h[1].epoch = 2;
  h[1].records = 10;
  h[1].mean_attempts = 2.0;
  EXPECT_EQ(acceptance_csv(h), "epoch,records,mean_attempts,fallbacks\n1,10,2.5,1\n2,10,2,0\n");
}
