#include "cgan/vocabulary.hpp"

#include <sstream>
#include <stdexcept>

namespace cgan {

Vocabulary::Vocabulary(std::vector<std::string> tokens) {
  for (auto& t : tokens) {
    if (find(t)) throw std::invalid_argument("Vocabulary: duplicate token '" + t + "'");
    add(t);
  }
}

TokenId Vocabulary::add(std::string_view token) {
  if (token.empty()) throw std::invalid_argument("Vocabulary: empty token");
  if (auto existing = find(token)) return *existing;
  const auto id = static_cast<TokenId>(tokens_.size());
  tokens_.emplace_back(token);
  ids_.emplace(tokens_.back(), id);
  return id;
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocabulary::id(std::string_view token) const {
  if (auto found = find(token)) return *found;
  throw std::out_of_range("Vocabulary: unknown token '" + std::string(token) + "'");
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id >= tokens_.size()) {
    throw std::out_of_range("Vocabulary: id " + std::to_string(id) + " out of range");
  }
  return tokens_[id];
}

std::vector<TokenId> Vocabulary::encode(std::span<const std::string> tokens) const {
  std::vector<TokenId> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

std::vector<TokenId> Vocabulary::encode(std::string_view text) const {
  const auto parts = split(text);
  return encode(parts);
}

std::vector<std::string> Vocabulary::decode(std::span<const TokenId> ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (TokenId id : ids) out.push_back(token(id));
  return out;
}

std::vector<std::string> Vocabulary::split(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::vector<std::string> out;
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

}  // namespace cgan
