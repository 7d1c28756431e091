#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cgan/corpus.hpp"
#include "cgan/gat_training.hpp"
#include "cgan/metrics.hpp"
#include "cgan/model.hpp"
#include "cgan/reweighting.hpp"
#include "cgan/training.hpp"
#include "json.hpp"

namespace cgan {

/// Graph layer shape. Weights are drawn per run seed and, with `train`,
/// fitted to teacher-forced steps of the first `train_episodes` training
/// episodes with the language model frozen.
struct GatSettings {
  std::size_t hidden = 8;
  std::size_t num_heads = 4;
  double leaky_slope = 0.2;
  double dropout = 0.3;
  bool train = false;
  std::size_t train_episodes = 100;
  std::size_t train_steps = 200;
  std::size_t batch_size = 8;
  double learning_rate = 1e-2;

  bool operator==(const GatSettings&) const = default;
};

/// Everything a baseline-versus-re-weighted comparison depends on. The corpus
/// is fixed by corpus.seed; each run seed fans out into the model, training
/// and graph-layer seeds. vocab_size is taken from the corpus.
struct ExperimentConfig {
  CorpusSpec corpus;
  ModelConfig model;
  TrainSpec train;
  ReweightPolicy reweight;
  GatSettings gat;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  /// Test episodes per seed whose per-token scores are reported.
  std::size_t ccs_series_episodes = 2;

  /// Settings used when no config file is given.
  static ExperimentConfig defaults();
};

nlohmann::ordered_json experiment_config_to_json(const ExperimentConfig& config);
/// Strict: unknown keys raise ConfigError naming the dotted key. Missing keys
/// keep their defaults.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);

/// Applies "a.b.c=value" to a JSON document. The value is parsed as JSON when
/// possible and kept as a string otherwise.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// FNV-1a of the canonical config JSON, as 16 hex digits.
std::string config_digest(const ExperimentConfig& config);

struct RunSeeds {
  std::uint64_t model = 0;
  std::uint64_t train = 0;
  std::uint64_t gat = 0;
};

RunSeeds derive_run_seeds(std::uint64_t seed);

struct ConditionResult {
  OutcomeCounts counts;
  double hallucination_rate = 0.0;
  double factual_accuracy = 0.0;
  double in_evidence_wrong_rate = 0.0;
  std::vector<std::string> answers;
};

struct CcsSeries {
  std::uint64_t seed = 0;
  std::size_t episode = 0;
  std::vector<CcsRow> rows;
};

struct GatTrainingSummary {
  std::size_t examples = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

struct SeedResult {
  std::uint64_t seed = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  ConditionResult baseline;
  ConditionResult reweighted;
  /// (baseline - reweighted) / baseline hallucination rate; 0 when the
  /// baseline rate is 0.
  double relative_reduction = 0.0;
  /// reweighted - baseline factual accuracy.
  double accuracy_delta = 0.0;
  std::size_t changed_answers = 0;
  std::size_t suppressed_steps = 0;
  /// Set when the graph layer was trained.
  std::optional<GatTrainingSummary> gat_training;
};

struct Spread {
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
};

Spread spread(const std::vector<double>& values);

struct EvalReport {
  std::string config_digest;
  ExperimentConfig config;
  std::vector<SeedResult> runs;
  std::vector<CcsSeries> ccs_series;

  std::size_t seeds_with_reduction() const;
  double mean_baseline_hallucination() const;
  double mean_reweighted_hallucination() const;
};

struct Progress {
  std::function<void(const std::string&)> log;
};

/// Corpus, vocabulary and encoded splits fixed by the corpus section.
struct PreparedData {
  Corpus corpus;
  Vocabulary vocab;
  std::vector<Episode> train;
  std::vector<Episode> test;
};

PreparedData prepare_data(const ExperimentConfig& config);

/// Trains the model of one run seed, exactly as run_experiment does.
TrainResult train_seed(const ExperimentConfig& config, const PreparedData& data, std::uint64_t seed,
                       const Progress& progress = {});

/// Graph-layer weights of one run seed.
GatParams gat_for_seed(const ExperimentConfig& config, std::size_t embed_dim, std::uint64_t seed);

/// Starts from gat_for_seed and trains on the training split. Each episode's
/// evidence is its own gold fact, since training prompts carry fresh values.
GatTrainResult train_graph_layer(const ExperimentConfig& config, const PreparedData& data,
                                 const ModelParams& params, std::uint64_t seed,
                                 const Progress& progress = {});

/// Trains one model per seed, decodes the test split with plain greedy
/// decoding and with re-weighting, and scores both. Component errors are
/// rethrown with the seed and episode attached.
EvalReport run_experiment(const ExperimentConfig& config, const Progress& progress = {});

nlohmann::ordered_json report_to_json(const EvalReport& report);
/// Per seed and condition: rates and counts.
std::string report_table_csv(const EvalReport& report);
/// Concatenated per-token score series with seed and episode columns.
std::string report_ccs_csv(const EvalReport& report);

/// Literature reference values shown next to the desk-scale numbers.
struct ReferenceRow {
  const char* system;
  double hallucination_rate;
  double factual_accuracy;
};
std::vector<ReferenceRow> literature_reference();

}  // namespace cgan
