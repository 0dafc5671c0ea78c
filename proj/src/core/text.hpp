#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace capforge {

/// Lowercases, replaces punctuation with spaces, splits on whitespace.
std::vector<std::string> tokenize(std::string_view text);

std::string join_tokens(const std::vector<std::string>& tokens);

bool is_article(std::string_view w);
bool is_conjunction(std::string_view w);
bool is_preposition(std::string_view w);

/// Function words removed before content-word comparisons.
bool is_stop_word(std::string_view w);

}  // namespace capforge
