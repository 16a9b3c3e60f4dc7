#pragma once

#include <array>
#include <cctype>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace ospo::text {

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline bool starts_with_vowel(std::string_view word) {
  if (word.empty()) return false;
  switch (std::tolower(static_cast<unsigned char>(word.front()))) {
    case 'a': case 'e': case 'i': case 'o': case 'u': return true;
    default: return false;
  }
}

/// "a"/"an" chosen by the first word that follows the article.
inline std::string_view article_for(std::string_view following_word) {
  return starts_with_vowel(following_word) ? "an" : "a";
}

inline const std::vector<std::pair<std::string, std::string>>& irregular_plurals() {
  static const std::vector<std::pair<std::string, std::string>> table = {
      {"leaf", "leaves"},   {"knife", "knives"}, {"wolf", "wolves"},
      {"shelf", "shelves"}, {"man", "men"},      {"woman", "women"},
      {"child", "children"}, {"person", "people"}, {"foot", "feet"},
      {"tooth", "teeth"},   {"mouse", "mice"},   {"goose", "geese"},
  };
  return table;
}

/// Pluralizes the last word of a (possibly multi-word) noun.
inline std::string pluralize(std::string_view noun) {
  std::string s(noun);
  std::size_t space = s.rfind(' ');
  std::string head = space == std::string::npos ? std::string() : s.substr(0, space + 1);
  std::string last = space == std::string::npos ? s : s.substr(space + 1);
  for (const auto& [sing, plur] : irregular_plurals()) {
    if (last == sing) return head + plur;
  }
  auto ends_with = [&](std::string_view suf) {
    return last.size() >= suf.size() && std::string_view(last).substr(last.size() - suf.size()) == suf;
  };
  if (ends_with("s") || ends_with("x") || ends_with("z") || ends_with("ch") || ends_with("sh")) {
    return head + last + "es";
  }
  if (last.size() >= 2 && last.back() == 'y' && !starts_with_vowel(std::string_view(last).substr(last.size() - 2, 1))) {
    return head + last.substr(0, last.size() - 1) + "ies";
  }
  return head + last + "s";
}

inline std::string noun_phrase(std::string_view noun, int count) {
  return count == 1 ? std::string(noun) : pluralize(noun);
}

/// Counts 1-9 render as words; larger counts as digits.
inline std::string number_word(int n) {
  static const std::array<const char*, 10> words = {"zero", "one", "two",   "three", "four",
                                                    "five", "six", "seven", "eight", "nine"};
  if (n >= 0 && n <= 9) return words[static_cast<std::size_t>(n)];
  return std::to_string(n);
}

/// Inverse of number_word; -1 when the token is not a count.
inline int parse_number(std::string_view tok) {
  static const std::array<const char*, 10> words = {"zero", "one", "two",   "three", "four",
                                                    "five", "six", "seven", "eight", "nine"};
  for (int i = 0; i < 10; ++i) {
    if (tok == words[static_cast<std::size_t>(i)]) return i;
  }
  if (tok.empty()) return -1;
  int value = 0;
  for (char c : tok) {
    if (!std::isdigit(static_cast<unsigned char>(c))) return -1;
    value = value * 10 + (c - '0');
  }
  return value;
}

inline std::vector<std::string> split_words(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ' ') {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

}  // namespace ospo::text
