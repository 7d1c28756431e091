#include "cgan/fact_store.hpp"

#include <algorithm>
#include <set>

#include "json.hpp"

namespace cgan {

FactStore FactStore::ingest(std::span<const Fact> facts) {
  FactStore store;
  for (const Fact& f : facts) {
    if (f.subject.empty() || f.relation.empty() || f.value.empty()) {
      throw std::invalid_argument("fact fields must be non-empty: (" + f.subject + ", " +
                                  f.relation + ", " + f.value + ")");
    }
    const auto key = std::make_pair(f.subject, f.relation);
    if (auto it = store.by_key_.find(key); it != store.by_key_.end()) {
      const Fact& prior = store.facts_[it->second];
      if (prior.value == f.value) continue;
      throw FactConflict("conflicting facts: (" + prior.subject + ", " + prior.relation + ", " +
                         prior.value + ") and (" + f.subject + ", " + f.relation + ", " + f.value +
                         ")");
    }
    const std::size_t index = store.facts_.size();
    store.facts_.push_back(f);
    store.by_key_.emplace(key, index);
    store.by_token_[f.subject].push_back(index);
    if (f.relation != f.subject) store.by_token_[f.relation].push_back(index);
  }
  return store;
}

EvidenceSet FactStore::retrieve(std::span<const std::string> query_tokens, std::size_t k) const {
  if (k == 0) throw std::invalid_argument("retrieve: k must be >= 1");
  const std::set<std::string> query(query_tokens.begin(), query_tokens.end());
  std::map<std::size_t, int> scores;  // ordered by ingestion index
  for (const std::string& token : query) {
    auto it = by_token_.find(token);
    if (it == by_token_.end()) continue;
    for (std::size_t index : it->second) {
      const Fact& f = facts_[index];
      scores[index] = static_cast<int>(query.count(f.subject)) +
                      static_cast<int>(f.relation != f.subject && query.count(f.relation));
    }
  }
  std::vector<std::pair<std::size_t, int>> ranked(scores.begin(), scores.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  EvidenceSet out;
  for (std::size_t i = 0; i < ranked.size() && i < k; ++i) {
    out.facts.push_back(facts_[ranked[i].first]);
    out.scores.push_back(static_cast<double>(ranked[i].second));
  }
  return out;
}

std::vector<std::string> char_ngrams(const std::string& token, std::size_t n) {
  if (token.size() < n || n == 0) return {token};
  std::vector<std::string> grams;
  for (std::size_t i = 0; i + n <= token.size(); ++i) grams.push_back(token.substr(i, n));
  return grams;
}

LexicalEntailment::LexicalEntailment(EntailmentMode mode, double f_min, std::size_t ngram)
    : mode_(mode), f_min_(f_min), ngram_(ngram) {
  if (!(f_min > 0.0 && f_min <= 1.0)) {
    throw std::invalid_argument("entailment f_min must lie in (0, 1]");
  }
}

double LexicalEntailment::factor(const std::string& token, NodeRole /*role*/,
                                 const EvidenceSet& evidence) const {
  if (mode_ == EntailmentMode::binary) {
    for (const Fact& f : evidence.facts) {
      if (token == f.subject || token == f.relation || token == f.value) return 1.0;
    }
    return f_min_;
  }
  std::set<std::string> evidence_grams;
  for (const Fact& f : evidence.facts) {
    for (const std::string* field : {&f.subject, &f.relation, &f.value}) {
      for (auto& g : char_ngrams(*field, ngram_)) evidence_grams.insert(std::move(g));
    }
  }
  const auto grams = char_ngrams(token, ngram_);
  std::size_t matched = 0;
  for (const auto& g : grams) matched += evidence_grams.count(g);
  const double share = static_cast<double>(matched) / static_cast<double>(grams.size());
  return f_min_ + (1.0 - f_min_) * share;
}

double entailment_factor(const std::string& token, NodeRole role, const EvidenceSet& evidence,
                         EntailmentMode mode, double f_min) {
  return LexicalEntailment(mode, f_min).factor(token, role, evidence);
}

std::vector<Fact> read_facts_jsonl(std::istream& in) {
  std::vector<Fact> facts;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      for (const auto& [key, _] : j.items()) {
        if (key != "subject" && key != "relation" && key != "value") {
          throw std::invalid_argument("unknown key '" + key + "'");
        }
      }
      facts.push_back(Fact{j.at("subject").get<std::string>(), j.at("relation").get<std::string>(),
                           j.at("value").get<std::string>()});
    } catch (const std::exception& e) {
      throw std::invalid_argument("fact file line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return facts;
}

void write_facts_jsonl(std::ostream& out, std::span<const Fact> facts) {
  for (const Fact& f : facts) {
    nlohmann::ordered_json j;
    j["subject"] = f.subject;
    j["relation"] = f.relation;
    j["value"] = f.value;
    out << j.dump() << '\n';
  }
}

}  // namespace cgan
