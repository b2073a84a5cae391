#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace loraloop::text {

/// Splits on whitespace and hyphens, so structured class names such as
/// "stripes-f3-p0" share their parts with other classes.
std::vector<std::string> split_tokens(std::string_view text);

/// Prompt template with exactly one "{c}" slot.
class PromptTemplate {
 public:
  explicit PromptTemplate(std::string pattern = "a photo of a {c}");

  [[nodiscard]] std::string fill(std::string_view class_name) const;
  [[nodiscard]] const std::string& pattern() const noexcept { return pattern_; }

 private:
  std::string pattern_;
  std::size_t slot_ = 0;
};

/// Incrementally built token vocabulary; ids are dense and stable.
class Vocabulary {
 public:
  std::size_t add(const std::string& token);
  [[nodiscard]] std::optional<std::size_t> find(const std::string& token) const;
  [[nodiscard]] std::size_t size() const noexcept { return tokens_.size(); }
  [[nodiscard]] const std::vector<std::string>& tokens() const noexcept { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, std::size_t, std::less<>> ids_;
};

using TokenSeq = std::vector<std::size_t>;

}  // namespace loraloop::text
