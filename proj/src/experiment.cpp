#include "cgan/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <stdexcept>

#include "cgan/checkpoint.hpp"
#include "cgan/errors.hpp"
#include "cgan/rng.hpp"

namespace cgan {

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  c.train.max_steps = 2000;
  c.reweight.query_window = 3;
  c.reweight.refresh_every = 1;
  c.reweight.all_layers = true;
  return c;
}

namespace {

using Json = nlohmann::json;
using OJson = nlohmann::ordered_json;

// Reads the keys of one config object and rejects anything it did not ask for.
class Section {
 public:
  Section(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError("'" + path_ + "' must be a JSON object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    known_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("'" + name(key) + "' has the wrong type: " + j_.at(key).dump());
    }
  }

  template <typename E>
  void read_enum(const char* key, E& out, E (*parse)(const std::string&)) {
    std::string text;
    known_.insert(key);
    if (!j_.contains(key)) return;
    read(key, text);
    try {
      out = parse(text);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("'" + name(key) + "': " + e.what());
    }
  }

  const Json* child(const char* key) {
    known_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!known_.count(key)) throw ConfigError("unknown config key '" + name(key) + "'");
    }
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> known_;
};

std::string scope_name(RegularizerScope s) {
  return s == RegularizerScope::answer_token ? "answer_token" : "target_span";
}

RegularizerScope scope_from_string(const std::string& s) {
  if (s == "answer_token") return RegularizerScope::answer_token;
  if (s == "target_span") return RegularizerScope::target_span;
  throw std::invalid_argument("unknown regularizer scope '" + s + "'");
}

std::string entailment_name(EntailmentMode m) {
  return m == EntailmentMode::binary ? "binary" : "overlap";
}

EntailmentMode entailment_from_string(const std::string& s) {
  if (s == "binary") return EntailmentMode::binary;
  if (s == "overlap") return EntailmentMode::overlap;
  throw std::invalid_argument("unknown entailment mode '" + s + "'");
}

}  // namespace

OJson experiment_config_to_json(const ExperimentConfig& c) {
  OJson j;
  OJson corpus;
  corpus["num_facts"] = c.corpus.num_facts;
  corpus["num_distractors"] = c.corpus.num_distractors;
  corpus["vocab"] = {{"subjects", c.corpus.vocab.subjects},
                     {"relations", c.corpus.vocab.relations},
                     {"values", c.corpus.vocab.values}};
  corpus["train_fraction"] = c.corpus.train_fraction;
  corpus["test_fraction"] = c.corpus.test_fraction;
  corpus["train_episodes"] = c.corpus.train_episodes;
  corpus["test_episodes"] = c.corpus.test_episodes;
  corpus["echo_query"] = c.corpus.echo_query;
  corpus["resample_train_values"] = c.corpus.resample_train_values;
  corpus["seed"] = c.corpus.seed;
  j["corpus"] = std::move(corpus);

  OJson model;
  model["context_length"] = c.model.context_length;
  model["num_layers"] = c.model.num_layers;
  model["num_heads"] = c.model.num_heads;
  model["embed_dim"] = c.model.embed_dim;
  model["mlp_multiplier"] = c.model.mlp_multiplier;
  model["dropout_rate"] = c.model.dropout_rate;
  j["model"] = std::move(model);

  OJson train;
  train["learning_rate"] = c.train.learning_rate;
  train["batch_size"] = c.train.batch_size;
  train["beta1"] = c.train.beta1;
  train["beta2"] = c.train.beta2;
  train["epsilon"] = c.train.epsilon;
  train["weight_decay"] = c.train.weight_decay;
  train["grad_clip"] = c.train.grad_clip;
  train["max_steps"] = c.train.max_steps;
  train["causal_reg_weight"] = c.train.causal_reg_weight;
  train["reg_scope"] = scope_name(c.train.reg_scope);
  j["train"] = std::move(train);

  const ReweightPolicy& r = c.reweight;
  OJson rw;
  rw["tau_percentile"] = r.ccs.tau_percentile;
  rw["norm"] = to_string(r.ccs.norm);
  rw["renormalize_by_input_mass"] = r.ccs.renormalize_by_input_mass;
  rw["aggregation"] = to_string(r.aggregation);
  rw["ig_steps"] = r.ig.steps;
  rw["ig_baseline"] = to_string(r.ig.baseline);
  rw["ig_pad_token"] = r.ig.pad_token;
  rw["s_floor"] = r.s_floor;
  rw["top_k"] = r.top_k;
  rw["refresh_every"] = r.refresh_every;
  rw["retrieval_k"] = r.retrieval_k;
  rw["query_window"] = r.query_window;
  rw["entailment"] = entailment_name(r.entailment);
  rw["f_min"] = r.f_min;
  rw["include_output_keys"] = r.include_output_keys;
  rw["all_layers"] = r.all_layers;
  j["reweight"] = std::move(rw);

  j["gat"] = {{"hidden", c.gat.hidden},
              {"num_heads", c.gat.num_heads},
              {"leaky_slope", c.gat.leaky_slope},
              {"dropout", c.gat.dropout},
              {"train", c.gat.train},
              {"train_episodes", c.gat.train_episodes},
              {"train_steps", c.gat.train_steps},
              {"batch_size", c.gat.batch_size},
              {"learning_rate", c.gat.learning_rate}};
  j["seeds"] = c.seeds;
  j["ccs_series_episodes"] = c.ccs_series_episodes;
  return j;
}

ExperimentConfig experiment_config_from_json(const Json& j) {
  ExperimentConfig c = ExperimentConfig::defaults();
  Section top(j, "");
  if (const Json* cj = top.child("corpus")) {
    Section s(*cj, "corpus");
    s.read("num_facts", c.corpus.num_facts);
    s.read("num_distractors", c.corpus.num_distractors);
    if (const Json* vj = s.child("vocab")) {
      Section v(*vj, "corpus.vocab");
      v.read("subjects", c.corpus.vocab.subjects);
      v.read("relations", c.corpus.vocab.relations);
      v.read("values", c.corpus.vocab.values);
      v.finish();
    }
    s.read("train_fraction", c.corpus.train_fraction);
    s.read("test_fraction", c.corpus.test_fraction);
    s.read("train_episodes", c.corpus.train_episodes);
    s.read("test_episodes", c.corpus.test_episodes);
    s.read("echo_query", c.corpus.echo_query);
    s.read("resample_train_values", c.corpus.resample_train_values);
    s.read("seed", c.corpus.seed);
    s.finish();
  }
  if (const Json* mj = top.child("model")) {
    Section s(*mj, "model");
    s.read("context_length", c.model.context_length);
    s.read("num_layers", c.model.num_layers);
    s.read("num_heads", c.model.num_heads);
    s.read("embed_dim", c.model.embed_dim);
    s.read("mlp_multiplier", c.model.mlp_multiplier);
    s.read("dropout_rate", c.model.dropout_rate);
    s.finish();
  }
  if (const Json* tj = top.child("train")) {
    Section s(*tj, "train");
    s.read("learning_rate", c.train.learning_rate);
    s.read("batch_size", c.train.batch_size);
    s.read("beta1", c.train.beta1);
    s.read("beta2", c.train.beta2);
    s.read("epsilon", c.train.epsilon);
    s.read("weight_decay", c.train.weight_decay);
    s.read("grad_clip", c.train.grad_clip);
    s.read("max_steps", c.train.max_steps);
    s.read("causal_reg_weight", c.train.causal_reg_weight);
    s.read_enum("reg_scope", c.train.reg_scope, &scope_from_string);
    s.finish();
  }
  if (const Json* rj = top.child("reweight")) {
    Section s(*rj, "reweight");
    ReweightPolicy& r = c.reweight;
    s.read("tau_percentile", r.ccs.tau_percentile);
    s.read_enum("norm", r.ccs.norm, &ccs_norm_from_string);
    s.read("renormalize_by_input_mass", r.ccs.renormalize_by_input_mass);
    s.read_enum("aggregation", r.aggregation, &aggregation_from_string);
    s.read("ig_steps", r.ig.steps);
    s.read_enum("ig_baseline", r.ig.baseline, &baseline_from_string);
    s.read("ig_pad_token", r.ig.pad_token);
    s.read("s_floor", r.s_floor);
    s.read("top_k", r.top_k);
    s.read("refresh_every", r.refresh_every);
    s.read("retrieval_k", r.retrieval_k);
    s.read("query_window", r.query_window);
    s.read_enum("entailment", r.entailment, &entailment_from_string);
    s.read("f_min", r.f_min);
    s.read("include_output_keys", r.include_output_keys);
    s.read("all_layers", r.all_layers);
    s.finish();
  }
  if (const Json* gj = top.child("gat")) {
    Section s(*gj, "gat");
    s.read("hidden", c.gat.hidden);
    s.read("num_heads", c.gat.num_heads);
    s.read("leaky_slope", c.gat.leaky_slope);
    s.read("dropout", c.gat.dropout);
    s.read("train", c.gat.train);
    s.read("train_episodes", c.gat.train_episodes);
    s.read("train_steps", c.gat.train_steps);
    s.read("batch_size", c.gat.batch_size);
    s.read("learning_rate", c.gat.learning_rate);
    s.finish();
  }
  top.read("seeds", c.seeds);
  top.read("ccs_series_episodes", c.ccs_series_episodes);
  top.finish();

  c.corpus.require_valid();
  ModelConfig probe = c.model;
  probe.vocab_size = 1;
  probe.require_valid();
  c.train.require_valid();
  std::vector<std::string> errors;
  const ReweightPolicy& r = c.reweight;
  if (!(r.ccs.tau_percentile >= 0.0 && r.ccs.tau_percentile <= 100.0)) {
    errors.push_back("reweight.tau_percentile: must lie in [0, 100]");
  }
  if (!(r.s_floor > 0.0 && r.s_floor <= 1.0)) errors.push_back("reweight.s_floor: must lie in (0, 1]");
  if (!(r.f_min > 0.0 && r.f_min <= 1.0)) errors.push_back("reweight.f_min: must lie in (0, 1]");
  if (r.ig.steps == 0) errors.push_back("reweight.ig_steps: must be >= 1");
  if (r.refresh_every == 0) errors.push_back("reweight.refresh_every: must be >= 1");
  if (r.retrieval_k == 0) errors.push_back("reweight.retrieval_k: must be >= 1");
  if (!(c.gat.leaky_slope > 0.0 && c.gat.leaky_slope < 1.0)) {
    errors.push_back("gat.leaky_slope: must lie in (0, 1)");
  }
  if (c.gat.hidden == 0 || c.gat.num_heads == 0) errors.push_back("gat: hidden and num_heads must be >= 1");
  if (!(c.gat.dropout >= 0.0 && c.gat.dropout < 1.0)) errors.push_back("gat.dropout: must lie in [0, 1)");
  if (c.gat.batch_size == 0) errors.push_back("gat.batch_size: must be >= 1");
  if (!(c.gat.learning_rate > 0.0)) errors.push_back("gat.learning_rate: must be positive");
  if (c.seeds.empty()) errors.push_back("seeds: at least one seed is required");
  if (!errors.empty()) {
    std::string msg = "invalid experiment config:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  return c;
}

void apply_override(Json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    value = text;
  }
  Json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (!node->is_object()) {
      if (!node->is_null()) throw ConfigError("override key '" + key + "' descends into a non-object");
      *node = Json::object();
    }
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

std::string config_digest(const ExperimentConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(experiment_config_to_json(config).dump())));
  return buf;
}

RunSeeds derive_run_seeds(std::uint64_t seed) {
  return RunSeeds{derive_seed(seed, "model"), derive_seed(seed, "train"), derive_seed(seed, "gat")};
}

Spread spread(const std::vector<double>& values) {
  if (values.empty()) return {};
  Spread s;
  s.min = *std::min_element(values.begin(), values.end());
  s.max = *std::max_element(values.begin(), values.end());
  double total = 0.0;
  for (double v : values) total += v;
  s.mean = total / static_cast<double>(values.size());
  return s;
}

std::size_t EvalReport::seeds_with_reduction() const {
  std::size_t n = 0;
  for (const auto& r : runs) n += r.reweighted.hallucination_rate < r.baseline.hallucination_rate;
  return n;
}

double EvalReport::mean_baseline_hallucination() const {
  std::vector<double> v;
  for (const auto& r : runs) v.push_back(r.baseline.hallucination_rate);
  return spread(v).mean;
}

double EvalReport::mean_reweighted_hallucination() const {
  std::vector<double> v;
  for (const auto& r : runs) v.push_back(r.reweighted.hallucination_rate);
  return spread(v).mean;
}

namespace {

ConditionResult score(const std::vector<std::string>& answers, const std::vector<std::string>& gold,
                      const std::vector<std::vector<std::string>>& evidence) {
  ConditionResult c;
  c.answers = answers;
  c.counts = cgan::partition(answers, gold, evidence);
  c.hallucination_rate = c.counts.rate(c.counts.hallucinated);
  c.factual_accuracy = factual_accuracy(answers, gold);
  c.in_evidence_wrong_rate = c.counts.rate(c.counts.in_evidence_wrong);
  return c;
}

void log(const Progress& p, const std::string& line) {
  if (p.log) p.log(line);
}

}  // namespace

PreparedData prepare_data(const ExperimentConfig& config) {
  PreparedData d;
  d.corpus = gen_corpus(config.corpus);
  d.vocab = build_vocabulary(d.corpus);
  d.train = encode_episodes(d.vocab, d.corpus.train);
  d.test = encode_episodes(d.vocab, d.corpus.test);
  return d;
}

TrainResult train_seed(const ExperimentConfig& config, const PreparedData& data, std::uint64_t seed,
                       const Progress& progress) {
  const RunSeeds seeds = derive_run_seeds(seed);
  ModelConfig mc = config.model;
  mc.vocab_size = data.vocab.size();
  mc.seed = seeds.model;
  TrainSpec ts = config.train;
  ts.seed = seeds.train;
  try {
    return train(init_model(mc), data.train, ts, [&](const StepRecord& r) {
      if (r.step % 250 == 0 || r.step + 1 == ts.max_steps) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "seed %llu step %zu loss %.4f",
                      static_cast<unsigned long long>(seed), r.step, r.loss.total);
        log(progress, buf);
      }
    });
  } catch (const std::exception& e) {
    throw std::runtime_error("seed " + std::to_string(seed) + ": training failed: " + e.what());
  }
}

GatParams gat_for_seed(const ExperimentConfig& config, std::size_t embed_dim, std::uint64_t seed) {
  return GatParams::init(embed_dim + 2, config.gat.hidden, config.gat.num_heads,
                         derive_run_seeds(seed).gat, config.gat.leaky_slope, config.gat.dropout);
}

GatTrainResult train_graph_layer(const ExperimentConfig& config, const PreparedData& data,
                                 const ModelParams& params, std::uint64_t seed,
                                 const Progress& progress) {
  std::vector<GatExample> examples;
  const std::size_t count = std::min(config.gat.train_episodes, data.train.size());
  for (std::size_t i = 0; i < count; ++i) {
    const Episode& e = data.train[i];
    if (e.evidence.size() != 3) {
      throw std::invalid_argument("train episode " + std::to_string(i) + " has no subject-relation-value evidence");
    }
    const std::vector<std::string> f = data.vocab.decode(
        std::span(e.tokens).subspan(e.evidence.begin, e.evidence.size()));
    const FactStore store = FactStore::ingest(std::vector<Fact>{{f[0], f[1], f[2]}});
    for (GatExample& ex : collect_gat_examples(params, data.vocab, e, store, config.reweight)) {
      examples.push_back(std::move(ex));
    }
  }
  GatTrainSpec spec;
  spec.max_steps = config.gat.train_steps;
  spec.batch_size = config.gat.batch_size;
  spec.learning_rate = config.gat.learning_rate;
  spec.seed = derive_seed(derive_run_seeds(seed).gat, "train");
  const std::size_t every = std::max<std::size_t>(1, spec.max_steps / 4);
  GatTrainResult result = train_gat(
      params, gat_for_seed(config, params.config.embed_dim, seed), examples, config.reweight, spec,
      [&](std::size_t step, double loss) {
        if (step % every == 0 || step + 1 == spec.max_steps) {
          char buf[96];
          std::snprintf(buf, sizeof buf, "seed %llu graph layer step %zu loss %.4f",
                        static_cast<unsigned long long>(seed), step, loss);
          log(progress, buf);
        }
      });
  char buf[128];
  std::snprintf(buf, sizeof buf, "seed %llu graph layer: %zu examples, loss %.4f -> %.4f",
                static_cast<unsigned long long>(seed), examples.size(), result.initial_loss,
                result.final_loss);
  log(progress, buf);
  return result;
}

EvalReport run_experiment(const ExperimentConfig& config, const Progress& progress) {
  EvalReport report;
  report.config = config;
  report.config_digest = config_digest(config);

  const PreparedData data = prepare_data(config);
  const Corpus& corpus = data.corpus;
  const Vocabulary& vocab = data.vocab;
  const std::vector<Episode>& test_set = data.test;
  const FactStore store = FactStore::ingest(corpus.facts);
  if (data.train.empty() || test_set.empty()) {
    throw std::invalid_argument("experiment needs non-empty train and test splits");
  }

  std::vector<std::string> gold;
  std::vector<std::vector<std::string>> evidence;
  for (const TextEpisode& e : corpus.test) {
    gold.push_back(e.answer());
    evidence.emplace_back(e.tokens.begin() + static_cast<std::ptrdiff_t>(e.evidence.begin),
                          e.tokens.begin() + static_cast<std::ptrdiff_t>(e.evidence.end));
  }

  ReweightPolicy identity_policy = config.reweight;
  identity_policy.ccs.tau_percentile = 0.0;

  for (std::uint64_t seed : config.seeds) {
    SeedResult run;
    run.seed = seed;
    const TrainResult trained = train_seed(config, data, seed, progress);
    if (!trained.history.empty()) {
      run.initial_loss = trained.history.front().loss.total;
      run.final_loss = trained.history.back().loss.total;
    }
    const ModelParams& params = trained.params;
    GatParams gat = gat_for_seed(config, params.config.embed_dim, seed);
    if (config.gat.train) {
      try {
        GatTrainResult fitted = train_graph_layer(config, data, params, seed, progress);
        run.gat_training = GatTrainingSummary{fitted.examples, fitted.initial_loss, fitted.final_loss};
        gat = std::move(fitted.params);
      } catch (const std::exception& ex) {
        throw std::runtime_error("seed " + std::to_string(seed) + ": graph layer training failed: " + ex.what());
      }
    }

    std::vector<std::string> base_answers, rw_answers;
    for (std::size_t i = 0; i < test_set.size(); ++i) {
      const Episode& e = test_set[i];
      const std::vector<TokenId> prompt(e.tokens.begin(),
                                        e.tokens.begin() + static_cast<std::ptrdiff_t>(e.target.begin));
      const std::size_t new_tokens = e.target.size();
      try {
        const Generation base = generate(params, prompt, GenerateOptions{new_tokens});
        const ReweightedGeneration rw =
            generate_reweighted(params, vocab, prompt, store, gat, config.reweight, new_tokens);
        base_answers.push_back(vocab.token(base.tokens.back()));
        rw_answers.push_back(vocab.token(rw.tokens.back()));
        run.changed_answers += base_answers.back() != rw_answers.back();
        for (const auto& s : rw.steps) run.suppressed_steps += !s.suppressed.empty();
        if (i < config.ccs_series_episodes) {
          const ReweightedGeneration plain =
              generate_reweighted(params, vocab, prompt, store, gat, identity_policy, new_tokens);
          report.ccs_series.push_back(CcsSeries{seed, i, ccs_report(rw, plain)});
        }
      } catch (const std::exception& ex) {
        throw std::runtime_error("seed " + std::to_string(seed) + ", test episode " +
                                 std::to_string(i) + ": " + ex.what());
      }
    }
    run.baseline = score(base_answers, gold, evidence);
    run.reweighted = score(rw_answers, gold, evidence);
    const double base_rate = run.baseline.hallucination_rate;
    run.relative_reduction =
        base_rate > 0.0 ? (base_rate - run.reweighted.hallucination_rate) / base_rate : 0.0;
    run.accuracy_delta = run.reweighted.factual_accuracy - run.baseline.factual_accuracy;
    char buf[160];
    std::snprintf(buf, sizeof buf,
                  "seed %llu baseline hallucination %.3f accuracy %.3f | reweighted hallucination "
                  "%.3f accuracy %.3f",
                  static_cast<unsigned long long>(seed), run.baseline.hallucination_rate,
                  run.baseline.factual_accuracy, run.reweighted.hallucination_rate,
                  run.reweighted.factual_accuracy);
    log(progress, buf);
    report.runs.push_back(std::move(run));
  }
  return report;
}

std::vector<ReferenceRow> literature_reference() {
  return {{"baseline", 0.342, 0.618}, {"rag", 0.275, 0.684}, {"c-gan", 0.197, 0.798}};
}

namespace {

OJson condition_json(const ConditionResult& c) {
  OJson j;
  j["hallucination_rate"] = c.hallucination_rate;
  j["factual_accuracy"] = c.factual_accuracy;
  j["in_evidence_wrong_rate"] = c.in_evidence_wrong_rate;
  j["counts"] = {{"correct", c.counts.correct},
                 {"in_evidence_wrong", c.counts.in_evidence_wrong},
                 {"hallucinated", c.counts.hallucinated}};
  return j;
}

OJson spread_json(const std::vector<double>& values) {
  const Spread s = spread(values);
  return {{"mean", s.mean}, {"min", s.min}, {"max", s.max}};
}

OJson optional_number(const std::optional<double>& v) { return v ? OJson(*v) : OJson(); }

}  // namespace

OJson report_to_json(const EvalReport& report) {
  OJson j;
  j["format"] = "cgan-eval-report";
  j["version"] = 1;
  j["config_digest"] = report.config_digest;
  j["config"] = experiment_config_to_json(report.config);
  j["seeds"] = report.config.seeds;

  auto runs = OJson::array();
  std::vector<double> bh, ba, rh, ra, red, delta;
  for (const auto& r : report.runs) {
    OJson jr;
    jr["seed"] = r.seed;
    jr["train"] = {{"initial_loss", r.initial_loss}, {"final_loss", r.final_loss}};
    jr["baseline"] = condition_json(r.baseline);
    jr["reweighted"] = condition_json(r.reweighted);
    jr["relative_reduction"] = r.relative_reduction;
    jr["accuracy_delta"] = r.accuracy_delta;
    jr["changed_answers"] = r.changed_answers;
    jr["suppressed_steps"] = r.suppressed_steps;
    jr["gat_training"] = r.gat_training ? OJson{{"examples", r.gat_training->examples},
                                                {"initial_loss", r.gat_training->initial_loss},
                                                {"final_loss", r.gat_training->final_loss}}
                                        : OJson();
    runs.push_back(std::move(jr));
    bh.push_back(r.baseline.hallucination_rate);
    ba.push_back(r.baseline.factual_accuracy);
    rh.push_back(r.reweighted.hallucination_rate);
    ra.push_back(r.reweighted.factual_accuracy);
    red.push_back(r.relative_reduction);
    delta.push_back(r.accuracy_delta);
  }
  j["runs"] = std::move(runs);

  OJson summary;
  summary["baseline"] = {{"hallucination_rate", spread_json(bh)},
                         {"factual_accuracy", spread_json(ba)}};
  summary["reweighted"] = {{"hallucination_rate", spread_json(rh)},
                           {"factual_accuracy", spread_json(ra)}};
  summary["relative_reduction"] = spread_json(red);
  summary["accuracy_delta"] = spread_json(delta);
  const double mean_base = spread(bh).mean;
  summary["relative_reduction_of_means"] =
      mean_base > 0.0 ? (mean_base - spread(rh).mean) / mean_base : 0.0;
  summary["seeds_with_reduction"] = report.seeds_with_reduction();
  summary["num_seeds"] = report.runs.size();
  j["summary"] = std::move(summary);

  auto series = OJson::array();
  for (const auto& s : report.ccs_series) {
    OJson js;
    js["seed"] = s.seed;
    js["episode"] = s.episode;
    auto rows = OJson::array();
    for (const auto& r : s.rows) {
      rows.push_back({{"position", r.position},
                      {"token", r.token},
                      {"ccs_before", optional_number(r.ccs_before)},
                      {"ccs_after", optional_number(r.ccs_after)},
                      {"suppressed", r.suppressed}});
    }
    js["rows"] = std::move(rows);
    series.push_back(std::move(js));
  }
  j["ccs_series"] = std::move(series);

  OJson reference;
  reference["note"] =
      "Published large-model benchmark figures, shown for context only; not expected values for "
      "this desk-scale setup.";
  auto ref_rows = OJson::array();
  for (const auto& r : literature_reference()) {
    ref_rows.push_back({{"system", r.system},
                        {"hallucination_rate", r.hallucination_rate},
                        {"factual_accuracy", r.factual_accuracy}});
  }
  reference["rows"] = std::move(ref_rows);
  j["literature_reference"] = std::move(reference);
  return j;
}

std::string report_table_csv(const EvalReport& report) {
  std::string out =
      "seed,condition,hallucination_rate,factual_accuracy,in_evidence_wrong_rate,correct,"
      "in_evidence_wrong,hallucinated\n";
  char buf[256];
  for (const auto& r : report.runs) {
    for (const auto* c : {&r.baseline, &r.reweighted}) {
      std::snprintf(buf, sizeof buf, "%llu,%s,%.17g,%.17g,%.17g,%zu,%zu,%zu\n",
                    static_cast<unsigned long long>(r.seed),
                    c == &r.baseline ? "baseline" : "reweighted", c->hallucination_rate,
                    c->factual_accuracy, c->in_evidence_wrong_rate, c->counts.correct,
                    c->counts.in_evidence_wrong, c->counts.hallucinated);
      out += buf;
    }
  }
  return out;
}

std::string report_ccs_csv(const EvalReport& report) {
  std::string out = "seed,episode," + ccs_report_csv({}).substr(0, ccs_report_csv({}).size() - 1) + "\n";
  for (const auto& s : report.ccs_series) {
    const std::string body = ccs_report_csv(s.rows);
    std::size_t pos = body.find('\n') + 1;  // skip the header
    while (pos < body.size()) {
      const std::size_t end = body.find('\n', pos);
      out += std::to_string(s.seed) + "," + std::to_string(s.episode) + "," +
             body.substr(pos, end - pos) + "\n";
      pos = end + 1;
    }
  }
  return out;
}

}  // namespace cgan
