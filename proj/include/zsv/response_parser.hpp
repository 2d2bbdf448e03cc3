#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <filesystem>
#include <optional>
#include <regex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "zsv/ensemble.hpp"
#include "zsv/io.hpp"
#include "zsv/manifest.hpp"
#include "zsv/vlm_client.hpp"

namespace zsv {

struct Unparseable : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class ParseStatus { ok, partial, unparseable, refused };

inline std::string_view to_string(ParseStatus s) {
  switch (s) {
    case ParseStatus::ok: return "ok";
    case ParseStatus::partial: return "partial";
    case ParseStatus::unparseable: return "unparseable";
    case ParseStatus::refused: return "refused";
  }
  return "unparseable";
}

inline std::optional<ParseStatus> parse_status(std::string_view s) {
  if (s == "ok") return ParseStatus::ok;
  if (s == "partial") return ParseStatus::partial;
  if (s == "unparseable") return ParseStatus::unparseable;
  if (s == "refused") return ParseStatus::refused;
  return std::nullopt;
}

inline bool is_included(ParseStatus s) { return s == ParseStatus::ok || s == ParseStatus::partial; }

struct ParseOutcome {
  std::optional<Prediction> prediction;
  std::vector<std::string> dropped_out_of_list;
  ParseStatus status = ParseStatus::unparseable;
};

struct MatchPolicy {
  std::size_t max_edit_distance = 2;
  double max_relative_distance = 0.2;
};

inline constexpr std::size_t max_ranked = 5;

namespace detail {

inline std::string clean_candidate(std::string_view raw) {
  std::string s(trim(raw));
  bool changed = true;
  while (changed && !s.empty()) {
    changed = false;
    for (std::string_view wrap : {"**", "__", "`", "\"", "'", "*"}) {
      if (s.size() >= 2 * wrap.size() && s.starts_with(wrap) && s.ends_with(wrap)) {
        s = std::string(trim(std::string_view(s).substr(wrap.size(), s.size() - 2 * wrap.size())));
        changed = true;
      }
    }
    while (!s.empty() && (s.back() == '.' || s.back() == ',' || s.back() == ';')) {
      s.pop_back();
      changed = true;
    }
    s = std::string(trim(s));
  }
  return s;
}

// Matching '}' or ']' for the bracket at `open`, skipping quoted strings.
inline std::size_t matching_bracket(std::string_view text, std::size_t open) {
  const char o = text[open], c = o == '{' ? '}' : ']';
  int depth = 0;
  char quote = 0;
  for (std::size_t i = open; i < text.size(); ++i) {
    char ch = text[i];
    if (quote) {
      if (ch == '\\') ++i;
      else if (ch == quote) quote = 0;
      continue;
    }
    if (ch == '"' || ch == '\'') quote = ch;
    else if (ch == o) ++depth;
    else if (ch == c && --depth == 0) return i;
  }
  return std::string_view::npos;
}

// Python-style single-quoted literals to JSON double quotes.
inline std::string requote(std::string_view s) {
  std::string out;
  char quote = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    char ch = s[i];
    if (!quote) {
      if (ch == '\'' || ch == '"') {
        quote = ch;
        out += '"';
      } else {
        out += ch;
      }
      continue;
    }
    if (ch == '\\' && i + 1 < s.size()) {
      out += ch;
      out += s[++i];
    } else if (ch == quote) {
      quote = 0;
      out += '"';
    } else if (ch == '"') {
      out += "\\\"";
    } else {
      out += ch;
    }
  }
  return out;
}

inline std::optional<nlohmann::json> lenient_json(std::string_view s) {
  auto j = nlohmann::json::parse(s, nullptr, false);
  if (!j.is_discarded()) return j;
  j = nlohmann::json::parse(requote(s), nullptr, false);
  if (!j.is_discarded()) return j;
  return std::nullopt;
}

inline std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  for (auto& part : split(s, ',')) {
    std::string p(trim(part));
    if (p.rfind("and ", 0) == 0) p = p.substr(4);
    p = clean_candidate(p);
    if (!p.empty()) out.push_back(std::move(p));
  }
  return out;
}

inline std::vector<std::string> json_list(const nlohmann::json& v) {
  std::vector<std::string> out;
  if (v.is_string()) return split_list(v.get<std::string>());
  if (!v.is_array()) return out;
  for (const auto& e : v) {
    if (e.is_string()) {
      auto s = clean_candidate(e.get<std::string>());
      if (!s.empty()) out.push_back(std::move(s));
    }
  }
  return out;
}

inline std::vector<std::string> from_mapping(std::string_view text, std::string_view expected_key) {
  std::vector<std::string> fallback;
  for (std::size_t pos = text.find('{'); pos != std::string_view::npos; pos = text.find('{', pos + 1)) {
    auto end = matching_bracket(text, pos);
    if (end == std::string_view::npos) continue;
    auto j = lenient_json(text.substr(pos, end - pos + 1));
    if (!j || !j->is_object()) continue;
    if (j->contains(expected_key)) {
      auto list = json_list((*j)[std::string(expected_key)]);
      if (!list.empty()) return list;
    }
    if (fallback.empty() && j->size() == 1) fallback = json_list(j->begin().value());
  }
  if (!fallback.empty()) return fallback;
  // A bare list, e.g. ["a", "b", ...].
  for (std::size_t pos = text.find('['); pos != std::string_view::npos; pos = text.find('[', pos + 1)) {
    auto end = matching_bracket(text, pos);
    if (end == std::string_view::npos) continue;
    auto j = lenient_json(text.substr(pos, end - pos + 1));
    if (j && j->is_array()) {
      auto list = json_list(*j);
      if (!list.empty()) return list;
    }
  }
  return {};
}

inline std::vector<std::string> from_numbered(std::string_view text) {
  static const std::regex numbered(R"(^\s*(?:[-*]\s*)?\(?\d{1,2}[.):]\s+(.+)$)");
  static const std::regex bulleted(R"(^\s*[-*•]\s+(.+)$)");
  std::vector<std::string> nums, bullets;
  std::istringstream in{std::string(text)};
  std::string line;
  std::smatch m;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (std::regex_match(line, m, numbered)) {
      auto s = clean_candidate(m[1].str());
      if (!s.empty()) nums.push_back(std::move(s));
    } else if (std::regex_match(line, m, bulleted)) {
      auto s = clean_candidate(m[1].str());
      if (!s.empty()) bullets.push_back(std::move(s));
    }
  }
  return nums.empty() ? bullets : nums;
}

inline std::vector<std::string> from_cue_line(std::string_view text) {
  static const std::regex cue(R"((top[\s-]*(?:5|five)|most relevant categor(?:y|ies)|predictions?)[^:\n]*:?\s*(.*))",
                              std::regex::icase);
  auto lines = split(text, '\n');
  for (std::size_t i = 0; i < lines.size(); ++i) {
    std::smatch m;
    const std::string& line = lines[i];
    if (!std::regex_search(line, m, cue)) continue;
    std::string rest = m[2].str();
    if (trim(rest).empty()) {
      for (std::size_t j = i + 1; j < lines.size(); ++j)
        if (!trim(lines[j]).empty()) {
          rest = lines[j];
          break;
        }
    }
    auto list = split_list(rest);
    if (!list.empty()) return list;
  }
  return {};
}

inline std::vector<std::string> dedup_cap(std::vector<std::string> in) {
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  for (auto& s : in) {
    if (out.size() == max_ranked) break;
    if (seen.insert(normalize_category(s)).second) out.push_back(std::move(s));
  }
  return out;
}

}  // namespace detail

// Candidate labels in rank order, deduplicated (first occurrence wins) and
// capped at five. Tries a mapping keyed by `expected_key`, then numbered
// lines, then a comma list after a "top 5" style cue.
inline std::vector<std::string> extract_ranked_list(std::string_view text, std::string_view expected_key) {
  for (auto strategy : {+[](std::string_view t, std::string_view k) { return detail::from_mapping(t, k); },
                        +[](std::string_view t, std::string_view) { return detail::from_numbered(t); },
                        +[](std::string_view t, std::string_view) { return detail::from_cue_line(t); }}) {
    auto list = detail::dedup_cap(strategy(text, expected_key));
    if (!list.empty()) return list;
  }
  throw Unparseable("no ranked list found in response");
}

inline std::size_t levenshtein(std::string_view a, std::string_view b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

namespace detail {

// The candidate itself, then its head before an explanation separator
// ("happiness - smiling face", "fear: wide eyes", "cat (likely)").
inline std::vector<std::string> candidate_variants(const std::string& raw) {
  std::vector<std::string> out{normalize_category(clean_candidate(raw))};
  for (std::string_view sep : {" - ", ": ", " (", " \xE2\x80\x94 ", " \xE2\x80\x93 "}) {
    auto pos = raw.find(sep);
    if (pos != std::string::npos && pos > 0) {
      auto head = normalize_category(clean_candidate(std::string_view(raw).substr(0, pos)));
      if (!head.empty() && std::find(out.begin(), out.end(), head) == out.end()) out.push_back(std::move(head));
    }
  }
  return out;
}

inline std::optional<std::size_t> fuzzy_match(const std::string& norm, const CategorySet& cats, const MatchPolicy& policy) {
  if (norm.empty()) return std::nullopt;
  std::optional<std::size_t> best;
  std::size_t best_d = std::string::npos;
  const auto& names = cats.normalized_names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    auto d = levenshtein(norm, names[i]);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  if (best && best_d <= policy.max_edit_distance &&
      static_cast<double>(best_d) / static_cast<double>(norm.size()) <= policy.max_relative_distance)
    return best;
  return std::nullopt;
}

}  // namespace detail

inline std::optional<std::size_t> match_category(std::string_view raw, const CategorySet& categories,
                                                 const MatchPolicy& policy = {}) {
  auto variants = detail::candidate_variants(std::string(raw));
  for (const auto& v : variants)
    if (auto idx = categories.find_normalized(v)) return idx;
  for (const auto& v : variants)
    if (auto idx = detail::fuzzy_match(v, categories, policy)) return idx;
  return std::nullopt;
}

inline ParseOutcome parse_topk(const RawResponse& response, const SampleRecord& sample, const CategorySet& categories,
                               const MatchPolicy& policy = {}, const RefusalDetector& refusals = RefusalDetector{}) {
  ParseOutcome out;
  if (response.refusal || refusals.matches(response.text)) {
    out.status = ParseStatus::refused;
    return out;
  }
  std::vector<std::string> candidates;
  try {
    candidates = extract_ranked_list(response.text, sample.hashed_id);
  } catch (const Unparseable&) {
    out.status = ParseStatus::unparseable;
    return out;
  }
  Prediction pred;
  for (const auto& c : candidates) {
    auto idx = match_category(c, categories, policy);
    if (!idx) {
      out.dropped_out_of_list.push_back(c);
      continue;
    }
    if (std::find(pred.ranked.begin(), pred.ranked.end(), *idx) != pred.ranked.end()) continue;
    pred.ranked.push_back(*idx);
    pred.scores.push_back(1.0 / static_cast<double>(pred.ranked.size()));
  }
  if (pred.ranked.empty()) {
    out.status = ParseStatus::unparseable;
    return out;
  }
  out.status = out.dropped_out_of_list.empty() ? ParseStatus::ok : ParseStatus::partial;
  out.prediction = std::move(pred);
  return out;
}

// One line of a run log: id, status, ranked indices, dropped raw strings.
struct RunLogEntry {
  std::string hashed_id;
  ParseStatus status = ParseStatus::unparseable;
  std::vector<std::size_t> ranked;
  std::vector<std::string> dropped;

  friend bool operator==(const RunLogEntry&, const RunLogEntry&) = default;
};

inline RunLogEntry to_log_entry(const std::string& hashed_id, const ParseOutcome& o) {
  RunLogEntry e{hashed_id, o.status, {}, o.dropped_out_of_list};
  if (o.prediction) e.ranked = o.prediction->ranked;
  return e;
}

inline std::string format_run_log_line(const RunLogEntry& e) {
  std::string line = e.hashed_id + '\t' + std::string(to_string(e.status)) + '\t';
  for (std::size_t i = 0; i < e.ranked.size(); ++i) {
    if (i) line += ',';
    line += std::to_string(e.ranked[i]);
  }
  line += '\t';
  for (std::size_t i = 0; i < e.dropped.size(); ++i) {
    if (i) line += '\t';
    line += escape_field(e.dropped[i]);
  }
  return line;
}

inline RunLogEntry parse_run_log_line(std::string_view line, std::size_t line_no = 0) {
  auto fields = split(line, '\t');
  if (fields.size() < 4) throw ParseError("run log line needs 4 fields", line_no);
  RunLogEntry e;
  e.hashed_id = fields[0];
  auto st = parse_status(fields[1]);
  if (!st) throw ParseError("unknown status '" + fields[1] + "'", line_no);
  e.status = *st;
  if (!fields[2].empty())
    for (auto& idx : split(fields[2], ','))
      e.ranked.push_back(detail::parse_index(idx, line_no, "ranked index"));
  for (std::size_t i = 3; i < fields.size(); ++i)
    if (!fields[i].empty()) e.dropped.push_back(unescape_field(fields[i]));
  return e;
}

inline std::string format_run_log(const std::vector<RunLogEntry>& entries) {
  std::string out;
  for (const auto& e : entries) out += format_run_log_line(e) + '\n';
  return out;
}

inline std::vector<RunLogEntry> read_run_log(const std::filesystem::path& path) {
  std::vector<RunLogEntry> out;
  std::istringstream in(read_file(path));
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty()) out.push_back(parse_run_log_line(line, n));
  }
  return out;
}

}  // namespace zsv
