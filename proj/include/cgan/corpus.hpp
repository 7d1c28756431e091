#pragma once

#include <cstddef>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "cgan/fact_store.hpp"
#include "cgan/training.hpp"
#include "cgan/vocabulary.hpp"

namespace cgan {

/// Sizes of the synthetic token pools. Subjects are named s0.., relations
/// r0.., values v0...
struct VocabProfile {
  std::size_t subjects = 120;
  std::size_t relations = 4;
  std::size_t values = 60;

  bool operator==(const VocabProfile&) const = default;
};

struct CorpusSpec {
  std::size_t num_facts = 200;
  std::size_t num_distractors = 2;
  VocabProfile vocab;
  double train_fraction = 0.5;
  double test_fraction = 0.5;
  std::size_t train_episodes = 2000;
  std::size_t test_episodes = 200;
  /// Target restates subject and relation before the value ("s r v").
  /// Otherwise the target is the value alone.
  bool echo_query = true;
  /// Training prompts draw a fresh value for every fact they show, so the
  /// answer can only be read from the prompt. With fixed values a small model
  /// memorizes the training facts and never learns to consult the context.
  bool resample_train_values = true;
  std::uint64_t seed = 0;

  std::vector<std::string> validate() const;
  void require_valid() const;

  bool operator==(const CorpusSpec&) const = default;
};

/// Token-level episode as stored on disk.
struct TextEpisode {
  std::vector<std::string> tokens;
  Span evidence;
  Span target;

  std::vector<std::string> prompt() const {
    return {tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(target.begin)};
  }
  /// Gold answer: the last target token.
  const std::string& answer() const { return tokens.at(target.end - 1); }

  bool operator==(const TextEpisode&) const = default;
};

struct Corpus {
  std::vector<Fact> facts;  // every fact, train split first
  std::size_t num_train_facts = 0;
  std::vector<TextEpisode> train;
  std::vector<TextEpisode> test;
};

/// Marker tokens used by the prompt format
/// "s1 r v1 ; s2 r v2 ; Q s2 r ?".
inline constexpr const char* kFactSeparator = ";";
inline constexpr const char* kQueryMarker = "Q";
inline constexpr const char* kQueryEnd = "?";

/// Deterministic in spec.seed. Every prompt holds the queried fact and
/// `num_distractors` facts with the same relation, other subjects and other
/// values, shuffled. The evidence span covers the queried fact.
Corpus gen_corpus(const CorpusSpec& spec);

/// Vocabulary over every token in the facts and episodes, markers first.
Vocabulary build_vocabulary(const Corpus& corpus);

Episode encode_episode(const Vocabulary& vocab, const TextEpisode& episode);
std::vector<Episode> encode_episodes(const Vocabulary& vocab, std::span<const TextEpisode> episodes);

std::vector<TextEpisode> read_episodes_jsonl(std::istream& in);
void write_episodes_jsonl(std::ostream& out, std::span<const TextEpisode> episodes);

}  // namespace cgan
