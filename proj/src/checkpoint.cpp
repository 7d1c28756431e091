#include "cgan/checkpoint.hpp"

#include <fstream>
#include <set>

#include "cgan/errors.hpp"

namespace cgan {

namespace {

constexpr const char* kFormat = "cgan-checkpoint";

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known,
                    const std::string& where) {
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown key '" + where + key + "'");
  }
}

}  // namespace

nlohmann::ordered_json model_config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["vocab_size"] = c.vocab_size;
  j["context_length"] = c.context_length;
  j["num_layers"] = c.num_layers;
  j["num_heads"] = c.num_heads;
  j["embed_dim"] = c.embed_dim;
  j["mlp_multiplier"] = c.mlp_multiplier;
  j["dropout_rate"] = c.dropout_rate;
  j["seed"] = c.seed;
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  reject_unknown(j,
                 {"vocab_size", "context_length", "num_layers", "num_heads", "embed_dim",
                  "mlp_multiplier", "dropout_rate", "seed"},
                 "model.");
  ModelConfig c;
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.context_length = j.value("context_length", c.context_length);
  c.num_layers = j.value("num_layers", c.num_layers);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.mlp_multiplier = j.value("mlp_multiplier", c.mlp_multiplier);
  c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
  c.seed = j.value("seed", c.seed);
  return c;
}

nlohmann::ordered_json tensor_to_json(const Tensor& t) {
  nlohmann::ordered_json j;
  j["shape"] = t.shape();
  j["data"] = std::vector<double>(t.values().begin(), t.values().end());
  return j;
}

Tensor tensor_from_json(const nlohmann::json& j) {
  return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
}

void save_checkpoint(std::ostream& out, const Checkpoint& ck) {
  nlohmann::ordered_json j;
  j["format"] = kFormat;
  j["version"] = kCheckpointVersion;
  j["config"] = model_config_to_json(ck.params.config);
  j["vocab"] = ck.vocab.tokens();
  nlohmann::ordered_json params = nlohmann::ordered_json::object();
  for (const auto& [name, t] : ck.params.named()) params[name] = tensor_to_json(*t);
  j["params"] = std::move(params);
  out << j.dump() << '\n';
}

Checkpoint load_checkpoint(std::istream& in) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  if (j.value("format", "") != kFormat) throw std::invalid_argument("not a cgan checkpoint");
  if (j.value("version", 0) != kCheckpointVersion) {
    throw std::invalid_argument("unsupported checkpoint version " + j.at("version").dump());
  }
  Checkpoint ck;
  ck.params = init_model(model_config_from_json(j.at("config")));
  ck.vocab = Vocabulary(j.at("vocab").get<std::vector<std::string>>());
  if (ck.vocab.size() != ck.params.config.vocab_size) {
    throw std::invalid_argument("checkpoint vocabulary size does not match config.vocab_size");
  }
  const auto& stored = j.at("params");
  std::size_t seen = 0;
  for (auto& [name, t] : ck.params.named()) {
    if (!stored.contains(name)) throw std::invalid_argument("checkpoint is missing " + name);
    Tensor loaded = tensor_from_json(stored.at(name));
    const std::string what = "checkpoint " + name;
    require_shape(what.c_str(), t->shape(), loaded.shape());
    *t = std::move(loaded);
    ++seen;
  }
  if (seen != stored.size()) throw std::invalid_argument("checkpoint has unexpected tensors");
  return ck;
}

void save_checkpoint_file(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  save_checkpoint(out, ck);
}

Checkpoint load_checkpoint_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  return load_checkpoint(in);
}

}  // namespace cgan
