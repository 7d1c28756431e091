#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cgan/reweighting.hpp"

namespace cgan {

enum class Outcome {
  correct,
  in_evidence_wrong,  // wrong, but the token occurs in the evidence
  hallucinated,       // wrong and absent from the evidence
};

std::string to_string(Outcome outcome);

Outcome classify(const std::string& prediction, const std::string& gold,
                 std::span<const std::string> evidence);

struct OutcomeCounts {
  std::size_t correct = 0;
  std::size_t in_evidence_wrong = 0;
  std::size_t hallucinated = 0;

  std::size_t total() const { return correct + in_evidence_wrong + hallucinated; }
  double rate(std::size_t count) const {
    return total() == 0 ? 0.0 : static_cast<double>(count) / static_cast<double>(total());
  }
  bool operator==(const OutcomeCounts&) const = default;
};

/// Rejects lists of different lengths.
OutcomeCounts partition(std::span<const std::string> predictions, std::span<const std::string> gold,
                        std::span<const std::vector<std::string>> evidence);

/// Share of predictions that are wrong and absent from their evidence tokens.
double hallucination_rate(std::span<const std::string> predictions,
                          std::span<const std::string> gold,
                          std::span<const std::vector<std::string>> evidence);

/// Exact-match share.
double factual_accuracy(std::span<const std::string> predictions, std::span<const std::string> gold);

struct CcsRow {
  std::size_t position = 0;
  std::string token;
  std::optional<double> ccs_before;
  std::optional<double> ccs_after;
  bool suppressed = false;

  bool operator==(const CcsRow&) const = default;
};

/// One row per generated token of `after`: the emitted token's score in the
/// plain run (`before`) and in the re-weighted run, and whether any key was
/// suppressed at that step. Both runs must share the prompt.
std::vector<CcsRow> ccs_report(const ReweightedGeneration& after,
                               const ReweightedGeneration& before);

/// Header position,token,ccs_before,ccs_after,suppressed; missing scores are
/// empty fields and numbers use 17 significant digits.
std::string ccs_report_csv(std::span<const CcsRow> rows);
std::vector<CcsRow> parse_ccs_report_csv(const std::string& text);

}  // namespace cgan
