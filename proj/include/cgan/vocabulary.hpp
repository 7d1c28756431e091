#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace cgan {

using TokenId = std::uint32_t;

/// Whitespace token <-> id map. Ids are assigned in insertion order.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens);

  TokenId add(std::string_view token);
  std::optional<TokenId> find(std::string_view token) const;
  /// Throws std::out_of_range naming the token when it is unknown.
  TokenId id(std::string_view token) const;
  const std::string& token(TokenId id) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<TokenId> encode(std::span<const std::string> tokens) const;
  std::vector<TokenId> encode(std::string_view text) const;
  std::vector<std::string> decode(std::span<const TokenId> ids) const;

  static std::vector<std::string> split(std::string_view text);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

}  // namespace cgan
