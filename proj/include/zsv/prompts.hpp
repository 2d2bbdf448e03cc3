#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <istream>
#include <optional>
#include <ostream>
#include <regex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "zsv/chat.hpp"
#include "zsv/io.hpp"
#include "zsv/manifest.hpp"

namespace zsv {

enum class PromptMode { baseline, handcrafted, gpt, combined };

inline std::string_view to_string(PromptMode m) {
  switch (m) {
    case PromptMode::baseline: return "baseline";
    case PromptMode::handcrafted: return "handcrafted";
    case PromptMode::gpt: return "gpt";
    case PromptMode::combined: return "combined";
  }
  return "baseline";
}

inline std::optional<PromptMode> parse_prompt_mode(std::string_view s) {
  if (s == "baseline") return PromptMode::baseline;
  if (s == "handcrafted") return PromptMode::handcrafted;
  if (s == "gpt") return PromptMode::gpt;
  if (s == "combined") return PromptMode::combined;
  return std::nullopt;
}

inline bool mode_uses_descriptions(PromptMode m) { return m == PromptMode::gpt || m == PromptMode::combined; }

inline std::string default_template(Modality m) {
  switch (m) {
    case Modality::image: return "A photo of a {}.";
    case Modality::video: return "A video of a person {}.";
    case Modality::pointcloud: return "A point cloud depth map of a {}.";
  }
  return "A photo of a {}.";
}

struct MissingInput : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct CountMismatch : std::runtime_error {
  std::size_t found;
  std::size_t expected;
  std::vector<std::string> sentences;
  CountMismatch(std::size_t found_, std::size_t expected_, std::vector<std::string> got)
      : std::runtime_error("expected " + std::to_string(expected_) + " sentences, found " + std::to_string(found_)),
        found(found_),
        expected(expected_),
        sentences(std::move(got)) {}
};

struct GenerationPolicy {
  std::string model_name = "gpt-4-1106-preview";
  std::size_t K = 20;
  int max_retries = 3;
  double temperature = 0.7;
};

inline std::string fill_template(std::string_view tmpl, std::string_view category) {
  std::string out(tmpl);
  auto pos = out.find("{}");
  if (pos == std::string::npos) throw MissingInput("template has no '{}' placeholder: " + out);
  out.replace(pos, 2, category);
  return out;
}

// Chat request asking for `count` numbered visual descriptions of one
// category. `count` defaults to policy.K; top-up requests pass a smaller one.
inline ChatRequest build_description_request(std::string_view category, std::string_view dataset_context,
                                             const GenerationPolicy& policy, std::optional<std::size_t> count = {}) {
  if (trim(category).empty()) throw std::invalid_argument("category must be non-empty");
  const std::size_t k = count.value_or(policy.K);
  if (k == 0) throw std::invalid_argument("K must be >= 1");
  const std::string cat(category);
  const std::string noun = k == 1 ? "sentence" : "sentences";
  std::ostringstream user;
  user << "Generate " << k << " different " << noun << " describing what a \"" << cat
       << "\" looks like. The category comes from a dataset of " << dataset_context << ". ";
  user << (k == 1 ? "The sentence should" : "Each sentence should")
       << " describe visual features (shape, color, texture, parts, typical surroundings) that help recognize a \""
       << cat << "\" and tell it apart from other " << dataset_context << ". ";
  user << "Answer with a numbered list from 1 to " << k << ", one sentence per line, and nothing else.";
  ChatRequest req;
  req.model = policy.model_name;
  req.temperature = policy.temperature;
  req.messages.push_back({"system", "You write short, concrete visual descriptions of object categories.", {}});
  req.messages.push_back({"user", user.str(), {}});
  return req;
}

namespace detail {

inline std::string strip_decoration(std::string s) {
  auto t = std::string(trim(s));
  while (t.size() >= 4 && t.rfind("**", 0) == 0 && t.substr(t.size() - 2) == "**") t = std::string(trim(t.substr(2, t.size() - 4)));
  if (t.size() >= 2 && ((t.front() == '"' && t.back() == '"') || (t.front() == '\'' && t.back() == '\'')))
    t = std::string(trim(t.substr(1, t.size() - 2)));
  return t;
}

}  // namespace detail

// Numbered ("1.", "1)") or bulleted ("-", "*") lines, markers stripped.
// Anything else (preambles, closing remarks) is ignored.
inline std::vector<std::string> extract_enumerated_lines(std::string_view text) {
  static const std::regex numbered(R"(^\s*\(?\d{1,3}[.):]\s*(.*)$)");
  static const std::regex bulleted(R"(^\s*(?:[-*•]|\xE2\x80\xA2)\s+(.*)$)");
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::smatch m;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (std::regex_match(line, m, numbered) || std::regex_match(line, m, bulleted)) {
      auto s = detail::strip_decoration(m[1].str());
      if (!s.empty()) out.push_back(std::move(s));
    }
  }
  return out;
}

inline std::vector<std::string> parse_description_response(std::string_view text, std::size_t K) {
  auto sentences = extract_enumerated_lines(text);
  if (sentences.size() != K) {
    auto found = sentences.size();
    throw CountMismatch(found, K, std::move(sentences));
  }
  return sentences;
}

inline std::string number_lines(const std::vector<std::string>& sentences) {
  std::string out;
  for (std::size_t i = 0; i < sentences.size(); ++i) out += std::to_string(i + 1) + ". " + sentences[i] + "\n";
  return out;
}

// Retries on a count mismatch; when retries run out, truncates a surplus or
// asks only for the missing sentences.
inline std::vector<std::string> generate_descriptions(ChatClient& chat, std::string_view category,
                                                      std::string_view dataset_context, const GenerationPolicy& policy) {
  std::vector<std::string> best;
  for (int attempt = 0; attempt <= policy.max_retries; ++attempt) {
    auto reply = chat.complete(build_description_request(category, dataset_context, policy));
    try {
      return parse_description_response(reply.text, policy.K);
    } catch (const CountMismatch& e) {
      if (e.sentences.size() > best.size() || (best.size() < policy.K && e.sentences.size() > policy.K))
        best = e.sentences;
    }
  }
  if (best.size() > policy.K) {
    best.resize(policy.K);
    return best;
  }
  for (int attempt = 0; attempt <= policy.max_retries && best.size() < policy.K; ++attempt) {
    const auto missing = policy.K - best.size();
    auto reply = chat.complete(build_description_request(category, dataset_context, policy, missing));
    auto more = extract_enumerated_lines(reply.text);
    for (auto& s : more) {
      if (best.size() == policy.K) break;
      if (std::find(best.begin(), best.end(), s) == best.end()) best.push_back(std::move(s));
    }
  }
  if (best.size() != policy.K) throw CountMismatch(best.size(), policy.K, best);
  return best;
}

inline std::vector<std::string> compose_prompts(std::string_view category, PromptMode mode,
                                                const std::optional<std::string>& tmpl = std::nullopt,
                                                const std::vector<std::string>* gpt_sentences = nullptr) {
  switch (mode) {
    case PromptMode::baseline:
      return {std::string(category)};
    case PromptMode::handcrafted:
      if (!tmpl) throw MissingInput("handcrafted mode needs a template");
      return {fill_template(*tmpl, category)};
    case PromptMode::gpt:
      if (!gpt_sentences || gpt_sentences->empty()) throw MissingInput("gpt mode needs generated sentences");
      return *gpt_sentences;
    case PromptMode::combined: {
      if (!tmpl) throw MissingInput("combined mode needs a template");
      if (!gpt_sentences || gpt_sentences->empty()) throw MissingInput("combined mode needs generated sentences");
      const auto head = fill_template(*tmpl, category);
      std::vector<std::string> out;
      out.reserve(gpt_sentences->size());
      for (const auto& s : *gpt_sentences) out.push_back(head + " " + s);
      return out;
    }
  }
  throw MissingInput("unknown prompt mode");
}

struct PromptSet {
  std::string dataset;
  PromptMode mode = PromptMode::gpt;
  std::size_t K = 0;
  std::vector<std::string> category_names;
  std::vector<std::vector<std::string>> sentences;  // [category][k]

  void validate() const {
    if (K == 0) throw ValidationError("prompt set K must be >= 1");
    if ((mode == PromptMode::baseline || mode == PromptMode::handcrafted) && K != 1)
      throw ValidationError("baseline/handcrafted prompt sets have K = 1");
    if (sentences.size() != category_names.size()) throw ValidationError("sentence blocks do not match categories");
    for (std::size_t c = 0; c < sentences.size(); ++c) {
      if (sentences[c].size() != K)
        throw ValidationError("category '" + category_names[c] + "' has " + std::to_string(sentences[c].size()) +
                              " sentences, expected " + std::to_string(K));
      for (const auto& s : sentences[c])
        if (trim(s).empty()) throw ValidationError("empty sentence for '" + category_names[c] + "'");
    }
  }

  // First `k` sentences of every category.
  PromptSet truncated(std::size_t k) const {
    if (k == 0 || k > K) throw std::invalid_argument("cannot truncate K=" + std::to_string(K) + " to " + std::to_string(k));
    PromptSet p = *this;
    p.K = k;
    for (auto& s : p.sentences) s.resize(k);
    return p;
  }
};

inline PromptSet build_prompt_set(const CategorySet& cats, PromptMode mode, const std::optional<std::string>& tmpl,
                                  const PromptSet* descriptions) {
  PromptSet p;
  p.dataset = cats.dataset_name();
  p.mode = mode;
  p.category_names = cats.names();
  if (mode_uses_descriptions(mode)) {
    if (!descriptions) throw MissingInput(std::string(to_string(mode)) + " mode needs generated descriptions");
    if (descriptions->category_names.size() != cats.size())
      throw ValidationError("descriptions cover " + std::to_string(descriptions->category_names.size()) +
                            " categories, dataset has " + std::to_string(cats.size()));
  }
  for (std::size_t c = 0; c < cats.size(); ++c)
    p.sentences.push_back(compose_prompts(cats[c], mode, tmpl, descriptions ? &descriptions->sentences[c] : nullptr));
  p.K = p.sentences.front().size();
  p.validate();
  return p;
}

inline void write_prompt_set(const PromptSet& p, std::ostream& out) {
  p.validate();
  out << "#promptset " << p.dataset << ' ' << to_string(p.mode) << ' ' << p.K << '\n';
  for (std::size_t c = 0; c < p.category_names.size(); ++c) {
    out << "#cat " << c << ' ' << p.category_names[c] << '\n';
    for (const auto& s : p.sentences[c]) out << s << '\n';
  }
}

inline void save_prompt_set(const PromptSet& p, const std::filesystem::path& path) {
  std::ostringstream ss;
  write_prompt_set(p, ss);
  write_file_atomic(path, ss.str());
}

inline PromptSet read_prompt_set(std::istream& in) {
  PromptSet p;
  std::string line;
  std::size_t line_no = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!header) {
      std::istringstream hs(line);
      std::string tag, mode;
      hs >> tag >> p.dataset >> mode >> p.K;
      auto m = parse_prompt_mode(mode);
      if (tag != "#promptset" || !hs || !m) throw ParseError("expected '#promptset <dataset> <mode> <K>'", line_no);
      p.mode = *m;
      header = true;
      continue;
    }
    if (line.rfind("#cat ", 0) == 0) {
      std::string_view rest(line);
      rest.remove_prefix(5);
      auto sp = rest.find(' ');
      if (sp == std::string_view::npos) throw ParseError("expected '#cat <index> <name>'", line_no);
      if (std::string(rest.substr(0, sp)) != std::to_string(p.category_names.size()))
        throw ParseError("category block out of order", line_no);
      p.category_names.emplace_back(rest.substr(sp + 1));
      p.sentences.emplace_back();
      continue;
    }
    if (p.sentences.empty()) throw ParseError("sentence before first '#cat' block", line_no);
    p.sentences.back().push_back(line);
  }
  if (!header) throw ParseError("missing '#promptset' header", line_no + 1);
  p.validate();
  return p;
}

inline PromptSet load_prompt_set(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  return read_prompt_set(in);
}

}  // namespace zsv
