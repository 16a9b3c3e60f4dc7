#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ospo/errors.hpp"
#include "ospo/prompt.hpp"
#include "ospo/text.hpp"

namespace ospo {

inline constexpr std::string_view kGlobalQuestionPrefix = "This image is generated by a prompt: ";
inline constexpr std::string_view kGlobalQuestionSuffix =
    ". Does this image accurately represent the prompt?";

struct LocalQuestion {
  std::string question;
  std::string fact;  // canonical fact string this question grounds
  bool operator==(const LocalQuestion&) const = default;
};

/// Atomic local questions plus the single global faithfulness question for
/// one base prompt.
struct QuestionSet {
  std::vector<LocalQuestion> local;
  std::string global;
};

// Question text builders. The simulator parses these exact shapes back, so
// they are the single source of truth for question phrasing.

inline std::string existence_question(std::string_view noun) {
  return "Is there " + std::string(text::article_for(noun)) + " " + std::string(noun) + "?";
}

inline std::string attribute_question(std::string_view noun, std::string_view value) {
  return "Is the " + std::string(noun) + " " + std::string(value) + "?";
}

inline std::string relation_question(std::string_view subj, std::string_view phrase,
                                     std::string_view obj) {
  return "Is " + std::string(text::article_for(subj)) + " " + std::string(subj) + " " +
         std::string(phrase) + " " + std::string(text::article_for(obj)) + " " +
         std::string(obj) + "?";
}

inline std::string count_question(std::string_view noun, int count) {
  if (count == 1) return "Is there one " + std::string(noun) + "?";
  return "Are there " + text::number_word(count) + " " + text::pluralize(noun) + "?";
}

inline std::string global_question(std::string_view surface) {
  return std::string(kGlobalQuestionPrefix) + std::string(surface) +
         std::string(kGlobalQuestionSuffix);
}

/// Decomposes a base prompt into atomic yes/no questions: one existence
/// question per entity, one per attribute binding, one per relation, one per
/// count, plus the fixed-template global question.
inline QuestionSet decompose_questions(const StructuredPrompt& base) {
  if (base.entities.empty()) throw EmptyPrompt("prompt has no entities");
  QuestionSet qs;
  for (const auto& e : base.entities) {
    qs.local.push_back({existence_question(e.object), object_fact(e.object)});
    for (const auto& a : e.attributes) {
      qs.local.push_back(
          {attribute_question(e.object, a.value), attribute_fact(e.object, a.kind, a.value)});
    }
  }
  for (const auto& r : base.relations) {
    const std::string& subj = base.entities[r.subject].object;
    const std::string& obj = base.entities[r.object].object;
    qs.local.push_back({relation_question(subj, r.phrase, obj), relation_fact(subj, r.phrase, obj)});
  }
  for (const auto& c : base.counts) {
    const std::string& noun = base.entities[c.entity].object;
    qs.local.push_back({count_question(noun, c.count), count_fact(noun, c.count)});
  }
  qs.global = global_question(base.surface);
  return qs;
}

// ---------------------------------------------------------------------------
// Question parsing (simulator side)
// ---------------------------------------------------------------------------

struct ParsedQuestion {
  enum class Type { Existence, Attribute, Relation, Count, Global };
  Type type{};
  std::string noun;
  std::string value;    // attribute value
  std::string phrase;   // relation phrase
  std::string noun2;    // relation object
  int count = 0;
  std::string prompt_surface;  // global only
};

/// Parses a question produced by the builders above. Throws
/// UnanswerableQuestion on anything else - reaching that path means the
/// decomposition and the grounding disagree about phrasing.
inline ParsedQuestion parse_question(std::string_view q) {
  auto fail = [&]() -> ParsedQuestion {
    throw UnanswerableQuestion("cannot ground question: " + std::string(q));
  };
  auto strip_prefix = [&](std::string_view s, std::string_view prefix) -> std::optional<std::string_view> {
    if (s.substr(0, prefix.size()) == prefix) return s.substr(prefix.size());
    return std::nullopt;
  };

  if (auto rest = strip_prefix(q, kGlobalQuestionPrefix)) {
    std::string_view body = *rest;
    if (body.size() < kGlobalQuestionSuffix.size() ||
        body.substr(body.size() - kGlobalQuestionSuffix.size()) != kGlobalQuestionSuffix) {
      return fail();
    }
    ParsedQuestion p;
    p.type = ParsedQuestion::Type::Global;
    p.prompt_surface = std::string(body.substr(0, body.size() - kGlobalQuestionSuffix.size()));
    return p;
  }

  if (q.empty() || q.back() != '?') return fail();
  std::string body(q.substr(0, q.size() - 1));

  if (auto rest = strip_prefix(body, "Is there one ")) {
    ParsedQuestion p;
    p.type = ParsedQuestion::Type::Count;
    p.noun = std::string(*rest);
    p.count = 1;
    return p;
  }
  if (auto rest = strip_prefix(body, "Is there a ")) {
    ParsedQuestion p;
    p.type = ParsedQuestion::Type::Existence;
    p.noun = std::string(*rest);
    return p;
  }
  if (auto rest = strip_prefix(body, "Is there an ")) {
    ParsedQuestion p;
    p.type = ParsedQuestion::Type::Existence;
    p.noun = std::string(*rest);
    return p;
  }
  if (auto rest = strip_prefix(body, "Are there ")) {
    std::vector<std::string> words = text::split_words(*rest);
    if (words.size() < 2) return fail();
    int n = text::parse_number(words.front());
    if (n < 0) return fail();
    ParsedQuestion p;
    p.type = ParsedQuestion::Type::Count;
    p.count = n;
    std::string plural;
    for (std::size_t i = 1; i < words.size(); ++i) {
      if (i > 1) plural += ' ';
      plural += words[i];
    }
    p.noun = plural;  // plural surface form; grounding resolves it
    return p;
  }
  if (auto rest = strip_prefix(body, "Is the ")) {
    // "Is the {noun} {value}" - value is the last word.
    std::vector<std::string> words = text::split_words(*rest);
    if (words.size() < 2) return fail();
    ParsedQuestion p;
    p.type = ParsedQuestion::Type::Attribute;
    p.value = words.back();
    for (std::size_t i = 0; i + 1 < words.size(); ++i) {
      if (i) p.noun += ' ';
      p.noun += words[i];
    }
    return p;
  }
  for (std::string_view prefix : {"Is a ", "Is an "}) {
    if (auto rest = strip_prefix(body, prefix)) {
      // "Is a {subj} {phrase} a {obj}" - split at the last article.
      std::vector<std::string> words = text::split_words(*rest);
      std::size_t article = words.size();
      for (std::size_t i = words.size(); i > 0; --i) {
        if (words[i - 1] == "a" || words[i - 1] == "an") {
          article = i - 1;
          break;
        }
      }
      if (article == words.size() || article == 0 || article + 1 >= words.size()) return fail();
      ParsedQuestion p;
      p.type = ParsedQuestion::Type::Relation;
      // The subject/phrase boundary is ambiguous without a vocabulary; the
      // grounder resolves it against known nouns. Hand over the raw pieces.
      std::string left;
      for (std::size_t i = 0; i < article; ++i) {
        if (i) left += ' ';
        left += words[i];
      }
      p.noun = left;  // "{subj} {phrase}" combined; grounder splits
      for (std::size_t i = article + 1; i < words.size(); ++i) {
        if (i > article + 1) p.noun2 += ' ';
        p.noun2 += words[i];
      }
      return p;
    }
  }
  return fail();
}

inline void to_json(nlohmann::json& j, const LocalQuestion& q) {
  j = {{"question", q.question}, {"fact", q.fact}};
}

inline void from_json(const nlohmann::json& j, LocalQuestion& q) {
  q.question = j.at("question");
  q.fact = j.at("fact");
}

inline void to_json(nlohmann::json& j, const QuestionSet& qs) {
  j = {{"local", qs.local}, {"global", qs.global}};
}

inline void from_json(const nlohmann::json& j, QuestionSet& qs) {
  qs.local = j.at("local").get<std::vector<LocalQuestion>>();
  qs.global = j.at("global");
}

}  // namespace ospo
