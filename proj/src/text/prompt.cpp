#include "loraloop/text/prompt.hpp"

#include <cctype>
#include <stdexcept>

namespace loraloop::text {

std::vector<std::string> split_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c)) || c == '-') {
      if (!current.empty()) out.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(c);
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

PromptTemplate::PromptTemplate(std::string pattern) : pattern_(std::move(pattern)) {
  const auto first = pattern_.find("{c}");
  if (first == std::string::npos || pattern_.find("{c}", first + 1) != std::string::npos) {
    throw std::invalid_argument("prompt template needs exactly one {c} slot: '" + pattern_ + "'");
  }
  slot_ = first;
}

std::string PromptTemplate::fill(std::string_view class_name) const {
  std::string out = pattern_.substr(0, slot_);
  out += class_name;
  out += pattern_.substr(slot_ + 3);
  return out;
}

std::size_t Vocabulary::add(const std::string& token) {
  if (auto it = ids_.find(token); it != ids_.end()) return it->second;
  const auto id = tokens_.size();
  tokens_.push_back(token);
  ids_.emplace(token, id);
  return id;
}

std::optional<std::size_t> Vocabulary::find(const std::string& token) const {
  if (auto it = ids_.find(token); it != ids_.end()) return it->second;
  return std::nullopt;
}

}  // namespace loraloop::text
