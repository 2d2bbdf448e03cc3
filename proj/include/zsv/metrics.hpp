#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "zsv/io.hpp"
#include "zsv/manifest.hpp"
#include "zsv/response_parser.hpp"

namespace zsv {

struct EmptyDenominator : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DatasetMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SampleOutcome {
  std::string hashed_id;
  ParseStatus status = ParseStatus::ok;
  std::vector<std::size_t> ranked;
  std::size_t label_index = 0;
};

struct ExcludedCounts {
  std::size_t refused = 0;
  std::size_t unparseable = 0;
};

struct RunResult {
  std::string dataset;
  std::string method_label;
  std::vector<SampleOutcome> per_sample;

  ExcludedCounts excluded() const {
    ExcludedCounts c;
    for (const auto& s : per_sample) {
      if (s.status == ParseStatus::refused) ++c.refused;
      else if (s.status == ParseStatus::unparseable) ++c.unparseable;
    }
    return c;
  }

  std::size_t included() const {
    return static_cast<std::size_t>(
        std::count_if(per_sample.begin(), per_sample.end(), [](const auto& s) { return is_included(s.status); }));
  }

  void validate() const {
    std::unordered_set<std::string> ids;
    for (const auto& s : per_sample)
      if (!ids.insert(s.hashed_id).second) throw ValidationError("duplicate sample id " + s.hashed_id + " in run");
  }
};

// Joins a run log with its manifest. Every manifest sample must appear.
inline RunResult run_result_from_log(const DatasetManifest& manifest, const std::vector<RunLogEntry>& log,
                                     std::string method_label) {
  RunResult r{manifest.category_set.dataset_name(), std::move(method_label), {}};
  std::unordered_map<std::string, const RunLogEntry*> by_id;
  for (const auto& e : log)
    if (!by_id.emplace(e.hashed_id, &e).second) throw ValidationError("duplicate id " + e.hashed_id + " in run log");
  for (const auto& s : manifest.samples) {
    auto it = by_id.find(s.hashed_id);
    if (it == by_id.end()) throw ValidationError("run log '" + r.method_label + "' lacks sample " + s.hashed_id);
    for (auto idx : it->second->ranked)
      if (idx >= manifest.category_set.size()) throw ValidationError("run log index out of range for " + s.hashed_id);
    r.per_sample.push_back({s.hashed_id, it->second->status, it->second->ranked, s.label_index});
  }
  if (by_id.size() != manifest.samples.size()) throw ValidationError("run log has samples not in the manifest");
  return r;
}

inline bool hit_at_k(const SampleOutcome& s, std::size_t k) {
  const auto n = std::min(k, s.ranked.size());
  return std::find(s.ranked.begin(), s.ranked.begin() + static_cast<std::ptrdiff_t>(n), s.label_index) !=
         s.ranked.begin() + static_cast<std::ptrdiff_t>(n);
}

// Percentage of included samples whose label is among the first k ranks.
inline double topk_accuracy(const RunResult& result, std::size_t k) {
  if (k != 1 && k != 5) throw std::invalid_argument("k must be 1 or 5");
  std::size_t hits = 0, n = 0;
  for (const auto& s : result.per_sample) {
    if (!is_included(s.status)) continue;
    ++n;
    hits += hit_at_k(s, k) ? 1 : 0;
  }
  if (n == 0) throw EmptyDenominator("no included samples in '" + result.method_label + "'");
  return 100.0 * static_cast<double>(hits) / static_cast<double>(n);
}

struct AccuracyPair {
  double top1 = 0;
  double top5 = 0;
};

struct DeltaRow {
  std::string dataset;
  double top1_baseline = 0;
  double top1_variant = 0;
  double delta = 0;
};

inline DeltaRow delta_row(std::string dataset, double top1_baseline, double top1_variant) {
  return {std::move(dataset), top1_baseline, top1_variant, top1_variant - top1_baseline};
}

inline DeltaRow delta_table(const RunResult& baseline, const RunResult& variant) {
  if (baseline.dataset != variant.dataset)
    throw DatasetMismatch("cannot compare '" + baseline.dataset + "' with '" + variant.dataset + "'");
  return delta_row(baseline.dataset, topk_accuracy(baseline, 1), topk_accuracy(variant, 1));
}

inline AccuracyPair average_over_datasets(const std::vector<AccuracyPair>& rows) {
  if (rows.empty()) throw std::invalid_argument("nothing to average");
  AccuracyPair sum;
  for (const auto& r : rows) {
    sum.top1 += r.top1;
    sum.top5 += r.top5;
  }
  const auto n = static_cast<double>(rows.size());
  return {sum.top1 / n, sum.top5 / n};
}

// Top-1 per class over included samples; nullopt for classes without any.
inline std::vector<std::optional<double>> per_class_accuracy(const RunResult& result, std::size_t class_count) {
  std::vector<std::size_t> hits(class_count, 0), totals(class_count, 0);
  for (const auto& s : result.per_sample) {
    if (!is_included(s.status)) continue;
    if (s.label_index >= class_count) throw std::out_of_range("label outside class range");
    ++totals[s.label_index];
    hits[s.label_index] += hit_at_k(s, 1) ? 1 : 0;
  }
  std::vector<std::optional<double>> out(class_count);
  for (std::size_t c = 0; c < class_count; ++c)
    if (totals[c] > 0) out[c] = 100.0 * static_cast<double>(hits[c]) / static_cast<double>(totals[c]);
  return out;
}

struct AblationRow {
  std::size_t K = 0;
  double top1 = 0;
};

inline std::vector<AblationRow> ablation_table(const std::vector<std::pair<std::size_t, RunResult>>& results) {
  std::vector<AblationRow> rows;
  for (const auto& [k, r] : results) {
    if (!rows.empty() && r.dataset != results.front().second.dataset)
      throw DatasetMismatch("ablation mixes datasets");
    rows.push_back({k, topk_accuracy(r, 1)});
  }
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.K < b.K; });
  return rows;
}

// Display rounding happens only here.
inline std::string format_pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", v);
  std::string s = buf;
  return s == "-0.0" ? "0.0" : s;
}

inline std::string format_delta(double v) {
  auto s = format_pct(v);
  if (s == "0.0") return s;
  return v > 0 ? "+" + s : s;
}

struct ResultRow {
  std::string dataset;
  std::string method;
  double top1 = 0;
  double top5 = 0;
  std::optional<double> delta;  // top-1 against the dataset's baseline row
  ExcludedCounts excluded;
};

struct ResultTable {
  std::vector<ResultRow> rows;

  void add(const RunResult& r) {
    rows.push_back({r.dataset, r.method_label, topk_accuracy(r, 1), topk_accuracy(r, 5), std::nullopt, r.excluded()});
  }

  // Fills deltas against the row of `baseline_method` on the same dataset.
  void compute_deltas(const std::string& baseline_method) {
    for (auto& row : rows) {
      if (row.method == baseline_method) continue;
      for (const auto& b : rows)
        if (b.dataset == row.dataset && b.method == baseline_method) row.delta = row.top1 - b.top1;
    }
  }

  std::vector<std::string> methods() const {
    std::vector<std::string> out;
    for (const auto& r : rows)
      if (std::find(out.begin(), out.end(), r.method) == out.end()) out.push_back(r.method);
    return out;
  }

  std::vector<std::string> datasets() const {
    std::vector<std::string> out;
    for (const auto& r : rows)
      if (std::find(out.begin(), out.end(), r.dataset) == out.end()) out.push_back(r.dataset);
    return out;
  }

  // Unweighted mean per method over the datasets it was run on.
  std::vector<ResultRow> average_rows() const {
    std::vector<ResultRow> out;
    const auto n_datasets = datasets().size();
    for (const auto& m : methods()) {
      std::vector<AccuracyPair> pairs;
      std::vector<double> deltas;
      ExcludedCounts ex;
      for (const auto& r : rows) {
        if (r.method != m) continue;
        pairs.push_back({r.top1, r.top5});
        if (r.delta) deltas.push_back(*r.delta);
        ex.refused += r.excluded.refused;
        ex.unparseable += r.excluded.unparseable;
      }
      auto avg = average_over_datasets(pairs);
      ResultRow row{"Average over " + std::to_string(n_datasets) + " datasets", m, avg.top1, avg.top5, std::nullopt, ex};
      if (!deltas.empty() && deltas.size() == pairs.size()) {
        double s = 0;
        for (double d : deltas) s += d;
        row.delta = s / static_cast<double>(deltas.size());
      }
      out.push_back(std::move(row));
    }
    return out;
  }
};

enum class ReportFormat { csv, markdown };

inline std::string render_csv(const ResultTable& t, bool with_average = true) {
  std::ostringstream out;
  out << "dataset,method,top1,top5,delta,excluded_refused,excluded_unparseable\n";
  auto emit = [&](const ResultRow& r) {
    auto quote = [](const std::string& s) {
      if (s.find_first_of(",\"\n") == std::string::npos) return s;
      std::string q = "\"";
      for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
      return q + "\"";
    };
    out << quote(r.dataset) << ',' << quote(r.method) << ',' << format_pct(r.top1) << ',' << format_pct(r.top5) << ','
        << (r.delta ? format_delta(*r.delta) : "") << ',' << r.excluded.refused << ',' << r.excluded.unparseable << '\n';
  };
  for (const auto& r : t.rows) emit(r);
  if (with_average && t.datasets().size() > 1)
    for (const auto& r : t.average_rows()) emit(r);
  return out.str();
}

// One block per dataset: methods as columns with "top1 / top5" cells and a
// top-1 delta column after every non-baseline method.
inline std::string render_markdown(const ResultTable& t, const std::string& baseline_method = "") {
  std::ostringstream out;
  const auto methods = t.methods();
  auto datasets = t.datasets();
  std::vector<ResultRow> all = t.rows;
  if (datasets.size() > 1) {
    auto avg = t.average_rows();
    datasets.push_back(avg.front().dataset);
    all.insert(all.end(), avg.begin(), avg.end());
  }
  out << "| Dataset |";
  for (const auto& m : methods) {
    out << ' ' << m << " |";
    if (m != baseline_method && !baseline_method.empty()) out << " Top-1 Δ |";
  }
  out << " Excluded (refused / unparseable) |\n|---|";
  for (const auto& m : methods) {
    out << "---|";
    if (m != baseline_method && !baseline_method.empty()) out << "---|";
  }
  out << "---|\n";
  for (const auto& d : datasets) {
    out << "| " << d << " |";
    std::string excluded;
    for (const auto& m : methods) {
      const ResultRow* row = nullptr;
      for (const auto& r : all)
        if (r.dataset == d && r.method == m) row = &r;
      if (row) {
        out << ' ' << format_pct(row->top1) << " / " << format_pct(row->top5) << " |";
        if (row->excluded.refused + row->excluded.unparseable > 0) {
          if (!excluded.empty()) excluded += "; ";
          excluded += m + ": " + std::to_string(row->excluded.refused) + " / " + std::to_string(row->excluded.unparseable);
        }
      } else {
        out << " - |";
      }
      if (m != baseline_method && !baseline_method.empty())
        out << ' ' << (row && row->delta ? format_delta(*row->delta) : "-") << " |";
    }
    out << ' ' << (excluded.empty() ? "0 / 0" : excluded) << " |\n";
  }
  return out.str();
}

inline std::string render_ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "K,top1\n";
  for (const auto& r : rows) out += std::to_string(r.K) + "," + format_pct(r.top1) + "\n";
  return out;
}

inline std::string render_per_class_csv(const CategorySet& cats, const std::vector<std::optional<double>>& acc) {
  std::ostringstream out;
  out << "index,category,top1\n";
  for (std::size_t c = 0; c < acc.size(); ++c) {
    std::string name = cats[c];
    if (name.find_first_of(",\"") != std::string::npos) {
      std::string q = "\"";
      for (char ch : name) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
      name = q + "\"";
    }
    out << c << ',' << name << ',' << (acc[c] ? format_pct(*acc[c]) : "absent") << '\n';
  }
  return out.str();
}

inline void emit_report(const ResultTable& table, ReportFormat format, const std::filesystem::path& path,
                        const std::string& baseline_method = "") {
  try {
    write_file_atomic(path, format == ReportFormat::csv ? render_csv(table) : render_markdown(table, baseline_method));
  } catch (const std::filesystem::filesystem_error& e) {
    throw IoError(e.what());
  }
}

}  // namespace zsv
