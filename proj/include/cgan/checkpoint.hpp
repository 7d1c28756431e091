#pragma once

#include <istream>
#include <ostream>
#include <string>

#include "cgan/model.hpp"
#include "cgan/vocabulary.hpp"
#include "json.hpp"

namespace cgan {

/// A trained model together with the vocabulary its token ids refer to.
struct Checkpoint {
  ModelParams params;
  Vocabulary vocab;
};

inline constexpr int kCheckpointVersion = 1;

nlohmann::ordered_json model_config_to_json(const ModelConfig& config);
/// Strict: unknown keys raise ConfigError naming the key. Missing keys keep
/// their defaults.
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::ordered_json tensor_to_json(const Tensor& t);
Tensor tensor_from_json(const nlohmann::json& j);

/// JSON document with format tag, version, config, vocabulary and every
/// parameter tensor by name. Doubles are written in shortest round-trip form,
/// so save/load is bit-exact.
void save_checkpoint(std::ostream& out, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(std::istream& in);

void save_checkpoint_file(const std::string& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint_file(const std::string& path);

}  // namespace cgan
