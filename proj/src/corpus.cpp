#include "cgan/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "cgan/errors.hpp"
#include "cgan/rng.hpp"
#include "json.hpp"

namespace cgan {

std::vector<std::string> CorpusSpec::validate() const {
  std::vector<std::string> errors;
  if (num_facts < 10) errors.push_back("num_facts: must be >= 10");
  if (train_fraction < 0.0 || test_fraction < 0.0) {
    errors.push_back("train_fraction/test_fraction: must be >= 0");
  }
  if (std::abs(train_fraction + test_fraction - 1.0) > 1e-12) {
    errors.push_back("train_fraction + test_fraction: must sum to 1");
  }
  if (vocab.subjects == 0 || vocab.relations == 0 || vocab.values == 0) {
    errors.push_back("vocab: every pool must be non-empty");
  } else if (num_facts > vocab.subjects * vocab.relations) {
    errors.push_back("num_facts: exceeds subjects * relations = " +
                     std::to_string(vocab.subjects * vocab.relations));
  }
  if (vocab.values < num_distractors + 1) {
    errors.push_back("vocab.values: needs at least num_distractors + 1 values");
  }
  return errors;
}

void CorpusSpec::require_valid() const {
  const auto errors = validate();
  if (errors.empty()) return;
  std::string msg = "invalid corpus spec:";
  for (const auto& e : errors) msg += "\n  " + e;
  throw ConfigError(msg);
}

namespace {

std::string pool_token(char prefix, std::size_t i) { return prefix + std::to_string(i); }

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

template <typename T>
void shuffle(std::vector<T>& items, std::mt19937_64& rng) {
  // Fisher-Yates with our own index draws so the order does not depend on the
  // standard library's shuffle implementation.
  for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[uniform_index(rng, i)]);
}

TextEpisode make_episode(const Fact& gold, std::span<const Fact> split, const CorpusSpec& spec,
                         std::mt19937_64& rng) {
  std::vector<const Fact*> candidates;
  for (const Fact& f : split) {
    if (f.relation == gold.relation && f.subject != gold.subject && f.value != gold.value) {
      candidates.push_back(&f);
    }
  }
  std::vector<const Fact*> chosen{&gold};
  std::set<std::string> used_values{gold.value};
  shuffle(candidates, rng);
  for (const Fact* f : candidates) {
    if (chosen.size() == spec.num_distractors + 1) break;
    if (used_values.insert(f->value).second) chosen.push_back(f);
  }
  if (chosen.size() != spec.num_distractors + 1) {
    throw std::invalid_argument("gen_corpus: not enough distractor facts for relation " +
                                gold.relation + "; use more facts or fewer distractors");
  }
  shuffle(chosen, rng);

  TextEpisode e;
  for (const Fact* f : chosen) {
    if (f == &gold) e.evidence = Span{e.tokens.size(), e.tokens.size() + 3};
    e.tokens.insert(e.tokens.end(), {f->subject, f->relation, f->value, kFactSeparator});
  }
  e.tokens.insert(e.tokens.end(), {kQueryMarker, gold.subject, gold.relation, kQueryEnd});
  const std::size_t begin = e.tokens.size();
  if (spec.echo_query) e.tokens.insert(e.tokens.end(), {gold.subject, gold.relation});
  e.tokens.push_back(gold.value);
  e.target = Span{begin, e.tokens.size()};
  return e;
}

}  // namespace

Corpus gen_corpus(const CorpusSpec& spec) {
  spec.require_valid();
  std::mt19937_64 fact_rng(derive_seed(spec.seed, "corpus.facts"));

  // Distinct (subject, relation) pairs drawn without replacement.
  std::vector<std::size_t> pairs(spec.vocab.subjects * spec.vocab.relations);
  std::iota(pairs.begin(), pairs.end(), 0);
  shuffle(pairs, fact_rng);
  std::vector<Fact> facts;
  for (std::size_t i = 0; i < spec.num_facts; ++i) {
    const std::size_t s = pairs[i] / spec.vocab.relations;
    const std::size_t r = pairs[i] % spec.vocab.relations;
    facts.push_back(Fact{pool_token('s', s), pool_token('r', r),
                         pool_token('v', uniform_index(fact_rng, spec.vocab.values))});
  }

  Corpus corpus;
  corpus.num_train_facts =
      static_cast<std::size_t>(std::llround(spec.train_fraction * static_cast<double>(spec.num_facts)));
  corpus.facts = facts;
  const std::span<const Fact> all(corpus.facts);
  const auto train_facts = all.subspan(0, corpus.num_train_facts);
  const auto test_facts = all.subspan(corpus.num_train_facts);

  std::mt19937_64 train_rng(derive_seed(spec.seed, "corpus.train"));
  if (!train_facts.empty()) {
    for (std::size_t i = 0; i < spec.train_episodes; ++i) {
      if (!spec.resample_train_values) {
        const Fact& gold = train_facts[uniform_index(train_rng, train_facts.size())];
        corpus.train.push_back(make_episode(gold, train_facts, spec, train_rng));
        continue;
      }
      std::vector<Fact> fresh(train_facts.begin(), train_facts.end());
      for (Fact& f : fresh) f.value = pool_token('v', uniform_index(train_rng, spec.vocab.values));
      const Fact& gold = fresh[uniform_index(train_rng, fresh.size())];
      corpus.train.push_back(make_episode(gold, fresh, spec, train_rng));
    }
  }
  std::mt19937_64 test_rng(derive_seed(spec.seed, "corpus.test"));
  if (!test_facts.empty()) {
    for (std::size_t i = 0; i < spec.test_episodes; ++i) {
      const Fact& gold = test_facts[i % test_facts.size()];
      corpus.test.push_back(make_episode(gold, test_facts, spec, test_rng));
    }
  }
  return corpus;
}

Vocabulary build_vocabulary(const Corpus& corpus) {
  Vocabulary vocab({kFactSeparator, kQueryMarker, kQueryEnd});
  for (const Fact& f : corpus.facts) {
    vocab.add(f.subject);
    vocab.add(f.relation);
    vocab.add(f.value);
  }
  for (const auto* split : {&corpus.train, &corpus.test}) {
    for (const TextEpisode& e : *split) {
      for (const auto& t : e.tokens) vocab.add(t);
    }
  }
  return vocab;
}

Episode encode_episode(const Vocabulary& vocab, const TextEpisode& episode) {
  return Episode{vocab.encode(episode.tokens), episode.evidence, episode.target};
}

std::vector<Episode> encode_episodes(const Vocabulary& vocab, std::span<const TextEpisode> episodes) {
  std::vector<Episode> out;
  out.reserve(episodes.size());
  for (const auto& e : episodes) out.push_back(encode_episode(vocab, e));
  return out;
}

namespace {

Span read_span(const nlohmann::json& j, const char* key, std::size_t len) {
  const auto& arr = j.at(key);
  if (!arr.is_array() || arr.size() != 2) {
    throw std::invalid_argument(std::string(key) + " must be [start, end)");
  }
  Span s{arr[0].get<std::size_t>(), arr[1].get<std::size_t>()};
  if (s.begin > s.end || s.end > len) {
    throw std::invalid_argument(std::string(key) + " lies outside the token sequence");
  }
  return s;
}

}  // namespace

std::vector<TextEpisode> read_episodes_jsonl(std::istream& in) {
  std::vector<TextEpisode> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      for (const auto& [key, _] : j.items()) {
        if (key != "tokens" && key != "evidence_span" && key != "target_span") {
          throw std::invalid_argument("unknown key '" + key + "'");
        }
      }
      TextEpisode e;
      e.tokens = j.at("tokens").get<std::vector<std::string>>();
      e.evidence = read_span(j, "evidence_span", e.tokens.size());
      e.target = read_span(j, "target_span", e.tokens.size());
      out.push_back(std::move(e));
    } catch (const std::exception& e) {
      throw std::invalid_argument("corpus line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void write_episodes_jsonl(std::ostream& out, std::span<const TextEpisode> episodes) {
  for (const auto& e : episodes) {
    nlohmann::ordered_json j;
    j["tokens"] = e.tokens;
    j["evidence_span"] = {e.evidence.begin, e.evidence.end};
    j["target_span"] = {e.target.begin, e.target.end};
    out << j.dump() << '\n';
  }
}

}  // namespace cgan
