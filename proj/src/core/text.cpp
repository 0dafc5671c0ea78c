#include "text.hpp"

#include <algorithm>
#include <array>
#include <cctype>

namespace capforge {

namespace {

constexpr std::array<std::string_view, 3> kArticles = {"a", "an", "the"};
constexpr std::array<std::string_view, 9> kConjunctions = {"and", "or", "but", "while", "as",
                                                           "then", "so", "nor", "yet"};
constexpr std::array<std::string_view, 17> kPrepositions = {
    "of", "in", "on", "at", "with", "by", "to", "from", "for",
    "into", "over", "under", "near", "onto", "through", "about", "during"};
constexpr std::array<std::string_view, 16> kExtraStop = {
    "is", "are", "was", "were", "be", "been", "being", "there", "it",
    "its", "this", "that", "some", "someone", "something", "meanwhile"};

template <std::size_t N>
bool contains(const std::array<std::string_view, N>& list, std::string_view w) {
  return std::find(list.begin(), list.end(), w) != list.end();
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c) || std::ispunct(c)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string s;
  for (const auto& t : tokens) {
    if (!s.empty()) s.push_back(' ');
    s += t;
  }
  return s;
}

bool is_article(std::string_view w) { return contains(kArticles, w); }
bool is_conjunction(std::string_view w) { return contains(kConjunctions, w); }
bool is_preposition(std::string_view w) { return contains(kPrepositions, w); }

bool is_stop_word(std::string_view w) {
  return is_article(w) || is_conjunction(w) || is_preposition(w) || contains(kExtraStop, w);
}

}  // namespace capforge
