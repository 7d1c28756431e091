#include "cgan/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace cgan {

std::string to_string(Outcome outcome) {
  switch (outcome) {
    case Outcome::correct: return "correct";
    case Outcome::in_evidence_wrong: return "in_evidence_wrong";
    case Outcome::hallucinated: return "hallucinated";
  }
  return "unknown";
}

Outcome classify(const std::string& prediction, const std::string& gold,
                 std::span<const std::string> evidence) {
  if (prediction == gold) return Outcome::correct;
  if (std::find(evidence.begin(), evidence.end(), prediction) != evidence.end()) {
    return Outcome::in_evidence_wrong;
  }
  return Outcome::hallucinated;
}

namespace {

void require_aligned(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw std::invalid_argument(std::string(what) + ": " + std::to_string(a) +
                                " predictions but " + std::to_string(b) + " references");
  }
}

}  // namespace

OutcomeCounts partition(std::span<const std::string> predictions, std::span<const std::string> gold,
                        std::span<const std::vector<std::string>> evidence) {
  require_aligned(predictions.size(), gold.size(), "partition");
  require_aligned(predictions.size(), evidence.size(), "partition");
  OutcomeCounts counts;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    switch (classify(predictions[i], gold[i], evidence[i])) {
      case Outcome::correct: ++counts.correct; break;
      case Outcome::in_evidence_wrong: ++counts.in_evidence_wrong; break;
      case Outcome::hallucinated: ++counts.hallucinated; break;
    }
  }
  return counts;
}

double hallucination_rate(std::span<const std::string> predictions,
                          std::span<const std::string> gold,
                          std::span<const std::vector<std::string>> evidence) {
  const OutcomeCounts c = partition(predictions, gold, evidence);
  return c.rate(c.hallucinated);
}

double factual_accuracy(std::span<const std::string> predictions, std::span<const std::string> gold) {
  require_aligned(predictions.size(), gold.size(), "factual_accuracy");
  if (predictions.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) hits += predictions[i] == gold[i];
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

std::vector<CcsRow> ccs_report(const ReweightedGeneration& after,
                               const ReweightedGeneration& before) {
  if (after.prompt != before.prompt) {
    throw std::invalid_argument("ccs_report: the two runs were decoded from different prompts");
  }
  std::vector<CcsRow> rows;
  for (std::size_t t = 0; t < after.steps.size(); ++t) {
    const StepDiagnostics& s = after.steps[t];
    CcsRow row;
    row.position = after.prompt.size() + t;
    row.token = s.token;
    row.ccs_after = s.token_ccs;
    if (t < before.steps.size()) row.ccs_before = before.steps[t].token_ccs;
    row.suppressed = !s.suppressed.empty();
    rows.push_back(std::move(row));
  }
  return rows;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string csv_number(const std::optional<double>& v) {
  if (!v) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", *v);
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        fields.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        fields.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.emplace_back();
    } else {
      fields.back() += c;
    }
  }
  if (quoted) throw std::invalid_argument("unterminated quote in CSV line");
  return fields;
}

constexpr const char* kCcsHeader = "position,token,ccs_before,ccs_after,suppressed";

}  // namespace

std::string ccs_report_csv(std::span<const CcsRow> rows) {
  std::string out = std::string(kCcsHeader) + "\n";
  for (const auto& r : rows) {
    out += std::to_string(r.position) + "," + csv_field(r.token) + "," + csv_number(r.ccs_before) +
           "," + csv_number(r.ccs_after) + "," + (r.suppressed ? "1" : "0") + "\n";
  }
  return out;
}

std::vector<CcsRow> parse_ccs_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCcsHeader) {
    throw std::invalid_argument("CCS report must start with the header " + std::string(kCcsHeader));
  }
  std::vector<CcsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 5) throw std::invalid_argument("CCS report row needs 5 fields: " + line);
    CcsRow r;
    r.position = std::stoul(f[0]);
    r.token = f[1];
    if (!f[2].empty()) r.ccs_before = std::stod(f[2]);
    if (!f[3].empty()) r.ccs_after = std::stod(f[3]);
    if (f[4] != "0" && f[4] != "1") throw std::invalid_argument("suppressed must be 0 or 1");
    r.suppressed = f[4] == "1";
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace cgan
