#pragma once

#include <cctype>
#include <charconv>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "zsv/hash.hpp"
#include "zsv/io.hpp"

namespace zsv {

struct ParseError : std::runtime_error {
  std::size_t line;
  ParseError(const std::string& message, std::size_t line_)
      : std::runtime_error("line " + std::to_string(line_) + ": " + message), line(line_) {}
};

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Modality { image, video, pointcloud };

inline std::string_view to_string(Modality m) {
  switch (m) {
    case Modality::image: return "image";
    case Modality::video: return "video";
    case Modality::pointcloud: return "pointcloud";
  }
  return "image";
}

inline std::optional<Modality> parse_modality(std::string_view s) {
  if (s == "image") return Modality::image;
  if (s == "video") return Modality::video;
  if (s == "pointcloud") return Modality::pointcloud;
  return std::nullopt;
}

// Lowercase, trim, and collapse runs of whitespace/underscores into one space.
inline std::string normalize_category(std::string_view name) {
  std::string out;
  out.reserve(name.size());
  bool pending_space = false;
  for (char ch : name) {
    auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c) || ch == '_') {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out += ' ';
      pending_space = false;
    }
    out += static_cast<char>(std::tolower(c));
  }
  return out;
}

inline std::string hash_sample_id(std::string_view original_name, std::string_view salt) {
  return to_hex16(fnv1a64(original_name, fnv1a64(salt)));
}

class CategorySet {
 public:
  CategorySet() = default;
  CategorySet(std::string dataset_name, Modality modality, std::vector<std::string> categories)
      : dataset_name_(std::move(dataset_name)), modality_(modality), names_(std::move(categories)) {
    if (names_.size() < 2) throw ValidationError("a category set needs at least 2 categories");
    normalized_.reserve(names_.size());
    for (std::size_t i = 0; i < names_.size(); ++i) {
      auto norm = normalize_category(names_[i]);
      if (norm.empty()) throw ValidationError("category " + std::to_string(i) + " is empty");
      if (!index_.emplace(norm, i).second)
        throw ValidationError("duplicate category after normalization: '" + names_[i] + "'");
      normalized_.push_back(std::move(norm));
    }
  }

  const std::string& dataset_name() const { return dataset_name_; }
  Modality modality() const { return modality_; }
  std::size_t size() const { return names_.size(); }
  const std::string& operator[](std::size_t i) const { return names_.at(i); }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<std::string>& normalized_names() const { return normalized_; }

  std::optional<std::size_t> find_normalized(const std::string& normalized) const {
    auto it = index_.find(normalized);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

 private:
  std::string dataset_name_;
  Modality modality_ = Modality::image;
  std::vector<std::string> names_;
  std::vector<std::string> normalized_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct SampleRecord {
  std::string hashed_id;
  std::string original_name;  // as written in the manifest
  std::filesystem::path source_path;  // resolved against the manifest directory
  std::size_t label_index = 0;
  Modality modality = Modality::image;
};

struct DeclaredStats {
  std::size_t class_count = 0;
  std::size_t sample_count = 0;
};

struct DatasetManifest {
  CategorySet category_set;
  std::vector<SampleRecord> samples;
  std::optional<DeclaredStats> declared_stats;

  const SampleRecord* find_sample(std::string_view hashed_id) const {
    for (const auto& s : samples)
      if (s.hashed_id == hashed_id) return &s;
    return nullptr;
  }
};

namespace detail {

// Category-derived tokens a hashed id must not contain. Only tokens of three
// or more characters are considered; shorter ones cannot be avoided in hex.
inline std::vector<std::string> leak_tokens(const CategorySet& cats) {
  std::unordered_set<std::string> seen;
  std::vector<std::string> tokens;
  auto add = [&](const std::string& t) {
    if (t.size() >= 3 && seen.insert(t).second) tokens.push_back(t);
  };
  for (const auto& norm : cats.normalized_names()) {
    add(norm);
    for (auto& word : split(norm, ' ')) add(word);
  }
  return tokens;
}

inline bool contains_any(const std::string& id, const std::vector<std::string>& tokens) {
  for (const auto& t : tokens)
    if (id.find(t) != std::string::npos) return true;
  return false;
}

inline std::size_t parse_index(std::string_view s, std::size_t line, const char* what) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty())
    throw ParseError(std::string("expected non-negative integer for ") + what + ", got '" + std::string(s) + "'",
                     line);
  return v;
}

}  // namespace detail

// Hashes `original_name` with `salt`; if the digest happens to spell a
// category token, the salt is extended with a counter until it does not.
inline std::string assign_hashed_id(std::string_view original_name, const std::string& salt,
                                    const std::vector<std::string>& leak_tokens) {
  auto id = hash_sample_id(original_name, salt);
  for (int attempt = 1; detail::contains_any(id, leak_tokens); ++attempt)
    id = hash_sample_id(original_name, salt + "#" + std::to_string(attempt));
  return id;
}

inline DatasetManifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir = {},
                                      std::optional<std::string> salt = std::nullopt) {
  std::string line;
  std::size_t line_no = 0;

  std::string dataset;
  Modality modality = Modality::image;
  std::optional<DeclaredStats> stats;
  std::vector<std::string> categories;
  std::vector<std::pair<std::string, std::size_t>> rows;
  std::vector<std::size_t> row_lines;

  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!have_header) {
      std::istringstream hs(line);
      std::string tag, name, mod;
      hs >> tag >> name >> mod;
      if (tag != "#dataset" || name.empty() || mod.empty())
        throw ParseError("expected header '#dataset <name> <modality> <C> <N>'", line_no);
      auto m = parse_modality(mod);
      if (!m) throw ParseError("unknown modality '" + mod + "'", line_no);
      std::string c, n, extra;
      hs >> c >> n >> extra;
      if (!extra.empty()) throw ParseError("trailing tokens in header", line_no);
      if (!c.empty() || !n.empty()) {
        if (c.empty() || n.empty()) throw ParseError("header declares class count without sample count", line_no);
        stats = DeclaredStats{detail::parse_index(c, line_no, "class count"),
                              detail::parse_index(n, line_no, "sample count")};
      }
      dataset = name;
      modality = *m;
      have_header = true;
      continue;
    }
    if (line.rfind("#cat ", 0) == 0) {
      if (!rows.empty()) throw ParseError("category line after sample records", line_no);
      std::string_view rest(line);
      rest.remove_prefix(5);
      auto sp = rest.find(' ');
      if (sp == std::string_view::npos) throw ParseError("expected '#cat <index> <name>'", line_no);
      auto idx = detail::parse_index(rest.substr(0, sp), line_no, "category index");
      if (idx != categories.size())
        throw ParseError("category index " + std::to_string(idx) + " out of order (expected " +
                             std::to_string(categories.size()) + ")",
                         line_no);
      auto name = rest.substr(sp + 1);
      if (trim(name).empty()) throw ParseError("empty category name", line_no);
      categories.emplace_back(name);
      continue;
    }
    if (line[0] == '#') throw ParseError("unknown directive", line_no);
    auto tab = line.rfind('\t');
    if (tab == std::string::npos || tab == 0) throw ParseError("expected '<path>\\t<category_index>'", line_no);
    rows.emplace_back(line.substr(0, tab),
                      detail::parse_index(std::string_view(line).substr(tab + 1), line_no, "label"));
    row_lines.push_back(line_no);
  }
  if (!have_header) throw ParseError("missing '#dataset' header", line_no + 1);

  DatasetManifest m{CategorySet(dataset, modality, std::move(categories)), {}, stats};
  const auto& cats = m.category_set;
  if (rows.empty()) throw ValidationError("manifest '" + dataset + "' has no samples");
  if (stats) {
    if (stats->class_count != cats.size())
      throw ValidationError("declared " + std::to_string(stats->class_count) + " classes, found " +
                            std::to_string(cats.size()));
    if (stats->sample_count != rows.size())
      throw ValidationError("declared " + std::to_string(stats->sample_count) + " samples, found " +
                            std::to_string(rows.size()));
  }

  const std::string effective_salt = salt.value_or(dataset);
  const auto tokens = detail::leak_tokens(cats);
  std::unordered_set<std::string> ids;
  m.samples.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto& [path, label] = rows[i];
    if (label >= cats.size())
      throw ValidationError("line " + std::to_string(row_lines[i]) + ": label " + std::to_string(label) +
                            " outside [0, " + std::to_string(cats.size()) + ")");
    SampleRecord rec;
    rec.hashed_id = assign_hashed_id(path, effective_salt, tokens);
    if (!ids.insert(rec.hashed_id).second)
      throw ValidationError("line " + std::to_string(row_lines[i]) + ": duplicate sample id for '" + path + "'");
    std::filesystem::path p(path);
    rec.source_path = (p.is_absolute() || base_dir.empty()) ? p : base_dir / p;
    rec.original_name = std::move(path);
    rec.label_index = label;
    rec.modality = modality;
    m.samples.push_back(std::move(rec));
  }
  return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path,
                                     std::optional<std::string> salt = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest " + path.string());
  return parse_manifest(in, path.parent_path(), std::move(salt));
}

inline void write_manifest(const DatasetManifest& m, std::ostream& out) {
  const auto& cats = m.category_set;
  out << "#dataset " << cats.dataset_name() << ' ' << to_string(cats.modality());
  if (m.declared_stats) out << ' ' << m.declared_stats->class_count << ' ' << m.declared_stats->sample_count;
  out << '\n';
  for (std::size_t i = 0; i < cats.size(); ++i) out << "#cat " << i << ' ' << cats[i] << '\n';
  for (const auto& s : m.samples) out << s.original_name << '\t' << s.label_index << '\n';
}

inline std::string manifest_to_string(const DatasetManifest& m) {
  std::ostringstream ss;
  write_manifest(m, ss);
  return ss.str();
}

}  // namespace zsv
