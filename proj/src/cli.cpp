#include "cgan/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cgan/attribution.hpp"
#include "cgan/causal_graph.hpp"
#include "cgan/checkpoint.hpp"
#include "cgan/errors.hpp"
#include "cgan/experiment.hpp"
#include "cgan/metrics.hpp"

namespace cgan {
namespace {

namespace fs = std::filesystem;

struct CommonFlags {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir = "cgan-out";
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

struct PromptFlags {
  std::string checkpoint;
  std::string prompt;
  std::size_t episode = 0;
  std::size_t max_new = 0;
  std::string facts;
};

// Thrown for problems that are the caller's fault: bad flags, unreadable
// config files. Mapped to the usage exit code.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "Experiment config JSON; defaults apply when omitted");
  cmd->add_option("--set", flags.overrides,
                  "Override a config key, e.g. --set reweight.tau_percentile=10 (repeatable)");
  cmd->add_option("--out", flags.out_dir, "Output directory for artifacts")->capture_default_str();
  cmd->add_option("--seed", flags.seed, "Run seed; defaults to the first seed of the config");
  cmd->add_flag("--quiet", flags.quiet, "Suppress progress messages");
}

void add_prompt(CLI::App* cmd, PromptFlags& flags) {
  cmd->add_option("--checkpoint", flags.checkpoint, "Checkpoint written by `train`")->required();
  cmd->add_option("--prompt", flags.prompt,
                  "Whitespace-separated prompt; defaults to a held-out episode of the config corpus");
  cmd->add_option("--episode", flags.episode, "Held-out episode used when --prompt is absent")
      ->capture_default_str();
  cmd->add_option("--max-new", flags.max_new,
                  "Tokens to generate; 0 uses the episode's target length (3 without --prompt)")
      ->capture_default_str();
  cmd->add_option("--facts", flags.facts, "Fact JSONL file; defaults to the config corpus facts");
}

ExperimentConfig load_config(const CommonFlags& flags) {
  nlohmann::json doc;
  if (!flags.config_path.empty()) {
    std::ifstream in(flags.config_path);
    if (!in) throw UsageError("cannot read config file '" + flags.config_path + "'");
    try {
      doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("config file '" + flags.config_path + "' is not valid JSON: " + e.what());
    }
  } else {
    doc = nlohmann::json::parse(experiment_config_to_json(ExperimentConfig::defaults()).dump());
  }
  for (const auto& o : flags.overrides) apply_override(doc, o);
  return experiment_config_from_json(doc);
}

std::uint64_t run_seed(const CommonFlags& flags, const ExperimentConfig& config) {
  return flags.seed ? *flags.seed : config.seeds.front();
}

fs::path out_dir(const CommonFlags& flags) {
  fs::path dir(flags.out_dir);
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw std::runtime_error("write to '" + path.string() + "' failed");
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string join(const std::vector<std::string>& tokens) {
  std::string s;
  for (const auto& t : tokens) {
    if (!s.empty()) s += ' ';
    s += t;
  }
  return s;
}

Progress progress_for(const CommonFlags& flags, std::ostream& err) {
  if (flags.quiet) return {};
  return Progress{[&err](const std::string& line) { err << line << '\n'; }};
}

// Prompt, generation length and fact store shared by generate, audit and
// export-graph.
struct PromptContext {
  Checkpoint checkpoint;
  std::vector<TokenId> prompt;
  std::size_t max_new = 0;
  std::vector<Fact> facts;
};

PromptContext prompt_context(const ExperimentConfig& config, const PromptFlags& flags) {
  PromptContext ctx;
  try {
    ctx.checkpoint = load_checkpoint_file(flags.checkpoint);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw UsageError("cannot load checkpoint '" + flags.checkpoint + "': " + e.what());
  }
  std::optional<Corpus> corpus;
  auto need_corpus = [&]() -> const Corpus& {
    if (!corpus) corpus = gen_corpus(config.corpus);
    return *corpus;
  };
  if (!flags.prompt.empty()) {
    ctx.prompt = ctx.checkpoint.vocab.encode(std::string_view(flags.prompt));
    ctx.max_new = flags.max_new == 0 ? 3 : flags.max_new;
  } else {
    const Corpus& c = need_corpus();
    if (flags.episode >= c.test.size()) {
      throw UsageError("--episode " + std::to_string(flags.episode) + " is out of range (" +
                       std::to_string(c.test.size()) + " held-out episodes)");
    }
    const TextEpisode& e = c.test[flags.episode];
    ctx.prompt = ctx.checkpoint.vocab.encode(std::span<const std::string>(e.prompt()));
    ctx.max_new = flags.max_new == 0 ? e.target.size() : flags.max_new;
  }
  if (!flags.facts.empty()) {
    std::ifstream in(flags.facts);
    if (!in) throw UsageError("cannot read fact file '" + flags.facts + "'");
    ctx.facts = read_facts_jsonl(in);
  } else {
    ctx.facts = need_corpus().facts;
  }
  return ctx;
}

std::unique_ptr<EntailmentModel> entailment_for(const ReweightPolicy& policy) {
  return std::make_unique<LexicalEntailment>(policy.entailment, policy.f_min);
}

// Attention and attribution of the emitted continuation, read from a plain
// forward pass over prompt + outputs.
CausalGraph graph_for(const ModelParams& params, const Vocabulary& vocab,
                      std::span<const TokenId> prompt, std::span<const TokenId> outputs,
                      const ReweightPolicy& policy, AttributionMatrix* attribution_out = nullptr) {
  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), outputs.begin(), outputs.end());
  const ForwardResult fwd = forward(params, seq);
  const AlphaMatrix alpha =
      aggregate_attention(fwd.trace, prompt.size(), outputs.size(), policy.aggregation);
  AttributionMatrix attr = attribution_matrix(params, seq, prompt.size(), policy.ig);
  GraphOptions opts;
  opts.ccs = policy.ccs;
  const std::vector<std::string> tin = vocab.decode(prompt);
  const std::vector<std::string> tout = vocab.decode(outputs);
  CausalGraph g = build_graph(alpha, attr, tin, tout, opts);
  if (attribution_out) *attribution_out = std::move(attr);
  return g;
}

// The run seed's graph layer, trained on the config's corpus when gat.train is set.
GatParams graph_layer(const ExperimentConfig& config, const Checkpoint& checkpoint, std::uint64_t seed,
                      const Progress& progress) {
  if (!config.gat.train) return gat_for_seed(config, checkpoint.params.config.embed_dim, seed);
  const PreparedData data = prepare_data(config);
  if (data.vocab.tokens() != checkpoint.vocab.tokens()) {
    throw UsageError("gat.train: the config's corpus does not match the checkpoint's vocabulary");
  }
  return train_graph_layer(config, data, checkpoint.params, seed, progress).params;
}

int cmd_gen_corpus(const CommonFlags& flags, std::ostream& out) {
  const ExperimentConfig config = load_config(flags);
  const Corpus corpus = gen_corpus(config.corpus);
  const fs::path dir = out_dir(flags);
  std::ostringstream facts, train, test;
  write_facts_jsonl(facts, corpus.facts);
  write_episodes_jsonl(train, corpus.train);
  write_episodes_jsonl(test, corpus.test);
  write_text(dir / "facts.jsonl", facts.str());
  write_text(dir / "train.jsonl", train.str());
  write_text(dir / "test.jsonl", test.str());
  out << "command=gen-corpus facts=" << corpus.facts.size()
      << " train_facts=" << corpus.num_train_facts << " train_episodes=" << corpus.train.size()
      << " test_episodes=" << corpus.test.size() << " vocab=" << build_vocabulary(corpus).size()
      << " out=" << dir.string() << '\n';
  return kExitOk;
}

int cmd_train(const CommonFlags& flags, std::ostream& out, std::ostream& err) {
  const ExperimentConfig config = load_config(flags);
  const std::uint64_t seed = run_seed(flags, config);
  const PreparedData data = prepare_data(config);
  const TrainResult trained = train_seed(config, data, seed, progress_for(flags, err));
  const fs::path dir = out_dir(flags);
  const fs::path path = dir / "checkpoint.json";
  save_checkpoint_file(path.string(), Checkpoint{trained.params, data.vocab});
  std::string history = "step,total,cross_entropy,causal_penalty\n";
  char buf[128];
  for (const auto& r : trained.history) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", r.step, r.loss.total,
                  r.loss.cross_entropy, r.loss.causal_penalty);
    history += buf;
  }
  write_text(dir / "train_history.csv", history);
  out << "command=train seed=" << seed << " steps=" << trained.history.size()
      << " params=" << trained.params.parameter_count()
      << " initial_loss=" << fmt(trained.history.empty() ? 0.0 : trained.history.front().loss.total)
      << " final_loss=" << fmt(trained.history.empty() ? 0.0 : trained.history.back().loss.total)
      << " checkpoint=" << path.string() << '\n';
  return kExitOk;
}

int cmd_generate(const CommonFlags& flags, const PromptFlags& pflags, bool reweight,
                 std::ostream& out, std::ostream& err) {
  const ExperimentConfig config = load_config(flags);
  const std::uint64_t seed = run_seed(flags, config);
  const PromptContext ctx = prompt_context(config, pflags);
  const ModelParams& params = ctx.checkpoint.params;
  const Vocabulary& vocab = ctx.checkpoint.vocab;

  nlohmann::ordered_json doc;
  doc["prompt"] = vocab.decode(ctx.prompt);
  std::vector<TokenId> tokens;
  if (reweight) {
    const FactStore store = FactStore::ingest(ctx.facts);
    const auto entail = entailment_for(config.reweight);
    const ReweightedGeneration gen =
        generate_reweighted(params, vocab, ctx.prompt, store,
                            graph_layer(config, ctx.checkpoint, seed, progress_for(flags, err)),
                            config.reweight, ctx.max_new, entail.get());
    tokens = gen.tokens;
    auto steps = nlohmann::ordered_json::array();
    for (const auto& s : gen.steps) steps.push_back(diagnostics_to_json(s));
    doc["output"] = vocab.decode(tokens);
    doc["steps"] = std::move(steps);
  } else {
    tokens = generate(params, ctx.prompt, GenerateOptions{ctx.max_new}).tokens;
    doc["output"] = vocab.decode(tokens);
  }
  doc["reweighted"] = reweight;
  const fs::path path = out_dir(flags) / "generation.json";
  write_text(path, doc.dump(2) + "\n");
  out << "command=generate reweighted=" << (reweight ? "true" : "false")
      << " tokens=" << tokens.size() << " output=\"" << join(vocab.decode(tokens)) << "\""
      << " file=" << path.string() << '\n';
  return kExitOk;
}

int cmd_audit(const CommonFlags& flags, const PromptFlags& pflags, std::ostream& out,
              std::ostream& err) {
  const ExperimentConfig config = load_config(flags);
  const std::uint64_t seed = run_seed(flags, config);
  const PromptContext ctx = prompt_context(config, pflags);
  const ModelParams& params = ctx.checkpoint.params;
  const Vocabulary& vocab = ctx.checkpoint.vocab;
  const FactStore store = FactStore::ingest(ctx.facts);
  const auto entail = entailment_for(config.reweight);
  const GatParams gat = graph_layer(config, ctx.checkpoint, seed, progress_for(flags, err));

  const ReweightedGeneration gen = generate_reweighted(params, vocab, ctx.prompt, store, gat,
                                                       config.reweight, ctx.max_new, entail.get());
  ReweightPolicy identity = config.reweight;
  identity.ccs.tau_percentile = 0.0;
  const ReweightedGeneration plain = generate_reweighted(params, vocab, ctx.prompt, store, gat,
                                                         identity, ctx.max_new, entail.get());

  AttributionMatrix attr;
  const CausalGraph graph = graph_for(params, vocab, ctx.prompt, gen.tokens, config.reweight, &attr);
  const fs::path dir = out_dir(flags);
  write_text(dir / "graph.json", export_json(graph));
  write_text(dir / "graph.dot", export_dot(graph));
  write_text(dir / "attribution.json", attribution_to_json(attr).dump(2) + "\n");
  const std::vector<CcsRow> rows = ccs_report(gen, plain);
  write_text(dir / "ccs.csv", ccs_report_csv(rows));
  nlohmann::ordered_json doc;
  doc["prompt"] = gen.prompt;
  doc["output"] = vocab.decode(gen.tokens);
  auto steps = nlohmann::ordered_json::array();
  std::size_t suppressed = 0;
  for (const auto& s : gen.steps) {
    steps.push_back(diagnostics_to_json(s));
    suppressed += !s.suppressed.empty();
  }
  doc["steps"] = std::move(steps);
  write_text(dir / "diagnostics.json", doc.dump(2) + "\n");

  out << "command=audit seed=" << seed << " output=\"" << join(vocab.decode(gen.tokens)) << "\""
      << " baseline_output=\"" << join(vocab.decode(plain.tokens)) << "\""
      << " suppressed_steps=" << suppressed << " edges=" << graph.edges.size()
      << " out=" << dir.string() << '\n';
  return kExitOk;
}

int cmd_export_graph(const CommonFlags& flags, const PromptFlags& pflags, const std::string& format,
                     const std::string& graph_in, std::ostream& out) {
  const fs::path dir = out_dir(flags);
  CausalGraph graph;
  if (!graph_in.empty()) {
    std::ifstream in(graph_in);
    if (!in) throw UsageError("cannot read graph file '" + graph_in + "'");
    std::stringstream text;
    text << in.rdbuf();
    graph = import_json(text.str());
  } else {
    if (pflags.checkpoint.empty()) throw UsageError("export-graph needs --checkpoint or --graph");
    const ExperimentConfig config = load_config(flags);
    const PromptContext ctx = prompt_context(config, pflags);
    const ModelParams& params = ctx.checkpoint.params;
    const std::vector<TokenId> outputs =
        generate(params, ctx.prompt, GenerateOptions{ctx.max_new}).tokens;
    graph = graph_for(params, ctx.checkpoint.vocab, ctx.prompt, outputs, config.reweight);
  }
  std::vector<std::string> files;
  if (format == "dot" || format == "both") {
    write_text(dir / "graph.dot", export_dot(graph));
    files.push_back((dir / "graph.dot").string());
  }
  if (format == "json" || format == "both") {
    write_text(dir / "graph.json", export_json(graph));
    files.push_back((dir / "graph.json").string());
  }
  std::string joined;
  for (const auto& f : files) joined += (joined.empty() ? "" : ",") + f;
  out << "command=export-graph nodes=" << graph.nodes.size() << " edges=" << graph.edges.size()
      << " files=" << joined << '\n';
  return kExitOk;
}

int cmd_eval(const CommonFlags& flags, std::ostream& out, std::ostream& err) {
  ExperimentConfig config = load_config(flags);
  if (flags.seed) config.seeds = {*flags.seed};
  const EvalReport report = run_experiment(config, progress_for(flags, err));
  const fs::path dir = out_dir(flags);
  write_text(dir / "report.json", report_to_json(report).dump(2) + "\n");
  write_text(dir / "table.csv", report_table_csv(report));
  write_text(dir / "ccs.csv", report_ccs_csv(report));
  const double base = report.mean_baseline_hallucination();
  const double rw = report.mean_reweighted_hallucination();
  out << "command=eval digest=" << report.config_digest << " seeds=" << report.runs.size()
      << " baseline_hallucination=" << fmt(base) << " reweighted_hallucination=" << fmt(rw)
      << " seeds_with_reduction=" << report.seeds_with_reduction()
      << " report=" << (dir / "report.json").string() << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Causal attribution, graph-based attention re-weighting and evaluation on a toy "
               "fact-recall task.",
               "cgan"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  CommonFlags flags;
  PromptFlags pflags;
  std::string format = "both";
  std::string graph_in;
  bool no_reweight = false;

  CLI::App* gen_corpus_cmd = app.add_subcommand("gen-corpus", "Write facts.jsonl, train.jsonl and test.jsonl");
  add_common(gen_corpus_cmd, flags);

  CLI::App* train_cmd = app.add_subcommand("train", "Train one model and write checkpoint.json");
  add_common(train_cmd, flags);

  CLI::App* generate_cmd = app.add_subcommand("generate", "Decode one prompt with a checkpoint");
  add_common(generate_cmd, flags);
  add_prompt(generate_cmd, pflags);
  generate_cmd->add_flag("--plain", no_reweight, "Plain greedy decoding without re-weighting");

  CLI::App* audit_cmd =
      app.add_subcommand("audit", "Re-weighted decoding of one prompt with graph, scores and exports");
  add_common(audit_cmd, flags);
  add_prompt(audit_cmd, pflags);

  CLI::App* eval_cmd = app.add_subcommand("eval", "Full baseline versus re-weighted experiment");
  add_common(eval_cmd, flags);

  CLI::App* export_cmd =
      app.add_subcommand("export-graph", "Write the causal graph of a greedy decode as DOT and/or JSON");
  add_common(export_cmd, flags);
  export_cmd->add_option("--checkpoint", pflags.checkpoint, "Checkpoint written by `train`");
  export_cmd->add_option("--prompt", pflags.prompt,
                         "Whitespace-separated prompt; defaults to a held-out episode");
  export_cmd->add_option("--episode", pflags.episode, "Held-out episode used when --prompt is absent")
      ->capture_default_str();
  export_cmd->add_option("--max-new", pflags.max_new, "Tokens to generate; 0 uses the target length")
      ->capture_default_str();
  export_cmd->add_option("--graph", graph_in, "Convert an existing graph JSON instead of decoding");
  export_cmd->add_option("--format", format, "dot, json or both")
      ->check(CLI::IsMember({"dot", "json", "both"}))
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen_corpus_cmd) return cmd_gen_corpus(flags, out);
    if (*train_cmd) return cmd_train(flags, out, err);
    if (*generate_cmd) return cmd_generate(flags, pflags, !no_reweight, out, err);
    if (*audit_cmd) return cmd_audit(flags, pflags, out, err);
    if (*eval_cmd) return cmd_eval(flags, out, err);
    if (*export_cmd) return cmd_export_graph(flags, pflags, format, graph_in, out);
  } catch (const ConfigError& e) {
    err << "cgan: config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "cgan: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "cgan: error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace cgan
