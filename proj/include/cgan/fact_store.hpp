#pragma once

#include <cstddef>
#include <istream>
#include <map>
#include <memory>
#include <ostream>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace cgan {

struct Fact {
  std::string subject;
  std::string relation;
  std::string value;

  bool operator==(const Fact&) const = default;
};

/// Retrieved facts, best first, with their overlap scores.
struct EvidenceSet {
  std::vector<Fact> facts;
  std::vector<double> scores;

  bool empty() const { return facts.empty(); }
  std::size_t size() const { return facts.size(); }
};

class FactConflict : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Immutable, indexed collection of (subject, relation, value) facts.
class FactStore {
 public:
  FactStore() = default;

  /// Throws FactConflict naming both facts when a (subject, relation) pair is
  /// ingested twice with different values. Exact duplicates are kept once.
  static FactStore ingest(std::span<const Fact> facts);

  const std::vector<Fact>& facts() const { return facts_; }
  std::size_t size() const { return facts_.size(); }

  /// Scores each fact by how many of {subject, relation} occur in the query
  /// and returns the k best with a positive score. Ties keep ingestion order.
  EvidenceSet retrieve(std::span<const std::string> query_tokens, std::size_t k) const;

 private:
  std::vector<Fact> facts_;
  std::map<std::pair<std::string, std::string>, std::size_t> by_key_;
  std::unordered_map<std::string, std::vector<std::size_t>> by_token_;
};

enum class NodeRole { input, output };

enum class EntailmentMode { binary, overlap };

/// Maps a graph node and the retrieved evidence to a factor in [f_min, 1].
class EntailmentModel {
 public:
  virtual ~EntailmentModel() = default;
  virtual double factor(const std::string& token, NodeRole role,
                        const EvidenceSet& evidence) const = 0;
};

/// Lexical entailment proxy.
///
/// binary:  1 if the token equals any field of a retrieved fact, else f_min.
/// overlap: f_min + (1 - f_min) * (share of the token's character n-grams that
///          occur in some evidence field). Tokens shorter than n count as a
///          single gram.
class LexicalEntailment final : public EntailmentModel {
 public:
  explicit LexicalEntailment(EntailmentMode mode, double f_min = 0.1, std::size_t ngram = 3);

  double factor(const std::string& token, NodeRole role,
                const EvidenceSet& evidence) const override;

  EntailmentMode mode() const { return mode_; }
  double f_min() const { return f_min_; }

 private:
  EntailmentMode mode_;
  double f_min_;
  std::size_t ngram_;
};

double entailment_factor(const std::string& token, NodeRole role, const EvidenceSet& evidence,
                         EntailmentMode mode, double f_min = 0.1);

/// Character n-grams of `token`; a token shorter than n is its own gram.
std::vector<std::string> char_ngrams(const std::string& token, std::size_t n);

std::vector<Fact> read_facts_jsonl(std::istream& in);
void write_facts_jsonl(std::ostream& out, std::span<const Fact> facts);

}  // namespace cgan
