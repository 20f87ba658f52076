#pragma once

// Design families and their sequence-by-period treatment matrices.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "crthte/errors.hpp"

namespace crthte {

enum class DesignFamily {
  parallel_two_level,
  parallel_two_level_by_arm,
  parallel_three_level,
  multi_period_parallel,
  crxo_two_period,
  crxo_multi_period,
  stepped_wedge,
  irgt,
  custom
};

enum class Sampling { cross_sectional, closed_cohort };
enum class RandomizationLevel { cluster, subcluster };

// Per-arm cluster size, outcome ICC and outcome SD for the by-arm and IRGT
// families. For IRGT the control arm is often ungrouped (m_control = 1).
struct ArmParams {
  long m_treatment = 1;
  long m_control = 1;
  double icc_treatment = 0.0;
  double icc_control = 0.0;
  double sd_treatment = 1.0;
  double sd_control = 1.0;
};

struct DesignSpec {
  DesignFamily family = DesignFamily::parallel_two_level;
  int periods = 0;    // 0: family default
  int sequences = 0;  // 0: family default
  double pi = 0.5;    // proportion treated (or on the treatment-first sequence)
  Sampling sampling = Sampling::cross_sectional;
  long n_total = 0;
  int n_sub = 1;  // subclusters per cluster (three-level only)
  RandomizationLevel randomization_level = RandomizationLevel::cluster;
  std::optional<ArmParams> arm_params;
};

struct TreatmentMatrix {
  std::vector<std::vector<std::uint8_t>> rows;  // S x J, entries 0/1
  std::vector<long> clusters_per_sequence;      // length S

  int sequences() const { return static_cast<int>(rows.size()); }
  int periods() const { return rows.empty() ? 0 : static_cast<int>(rows.front().size()); }
  long total() const {
    return std::accumulate(clusters_per_sequence.begin(), clusters_per_sequence.end(), 0L);
  }

  friend bool operator==(const TreatmentMatrix&, const TreatmentMatrix&) = default;
};

inline std::string_view family_name(DesignFamily f) {
  switch (f) {
    case DesignFamily::parallel_two_level: return "parallel";
    case DesignFamily::parallel_two_level_by_arm: return "parallel-by-arm";
    case DesignFamily::parallel_three_level: return "three-level";
    case DesignFamily::multi_period_parallel: return "multi-period-parallel";
    case DesignFamily::crxo_two_period: return "crxo-two-period";
    case DesignFamily::crxo_multi_period: return "crxo-multi-period";
    case DesignFamily::stepped_wedge: return "stepped-wedge";
    case DesignFamily::irgt: return "irgt";
    case DesignFamily::custom: return "custom";
  }
  return "?";
}

inline DesignFamily parse_family(std::string name) {
  std::replace(name.begin(), name.end(), '_', '-');
  static const DesignFamily all[] = {
      DesignFamily::parallel_two_level, DesignFamily::parallel_two_level_by_arm,
      DesignFamily::parallel_three_level, DesignFamily::multi_period_parallel,
      DesignFamily::crxo_two_period, DesignFamily::crxo_multi_period,
      DesignFamily::stepped_wedge, DesignFamily::irgt, DesignFamily::custom};
  for (auto f : all)
    if (family_name(f) == name) return f;
  if (name == "parallel-two-level") return DesignFamily::parallel_two_level;
  if (name == "sw" || name == "sw-crt") return DesignFamily::stepped_wedge;
  throw ValidationError("unknown design family '" + name + "'", "design.family");
}

inline bool is_multi_period(DesignFamily f) {
  return f == DesignFamily::multi_period_parallel || f == DesignFamily::crxo_two_period ||
         f == DesignFamily::crxo_multi_period || f == DesignFamily::stepped_wedge ||
         f == DesignFamily::custom;
}

// Fills family defaults (periods, sequences) and checks structural
// constraints. Does not look at n_total.
inline DesignSpec normalized(DesignSpec spec) {
  switch (spec.family) {
    case DesignFamily::parallel_two_level:
    case DesignFamily::parallel_two_level_by_arm:
    case DesignFamily::parallel_three_level:
    case DesignFamily::irgt:
      if (spec.periods > 1)
        throw ValidationError(std::string(family_name(spec.family)) + " is a single-period design", "design.periods");
      spec.periods = 1;
      spec.sequences = 2;
      break;
    case DesignFamily::multi_period_parallel:
    case DesignFamily::crxo_multi_period:
      if (spec.periods < 2) throw ValidationError("number of periods must be >= 2", "design.periods");
      spec.sequences = 2;
      break;
    case DesignFamily::crxo_two_period:
      if (spec.periods != 0 && spec.periods != 2)
        throw ValidationError("two-period CRXO has exactly 2 periods", "design.periods");
      spec.periods = 2;
      spec.sequences = 2;
      break;
    case DesignFamily::stepped_wedge:
      if (spec.periods == 0 && spec.sequences > 0) spec.periods = spec.sequences + 1;
      if (spec.periods < 2) throw ValidationError("stepped wedge needs >= 2 periods", "design.periods");
      if (spec.sequences == 0) spec.sequences = spec.periods - 1;
      if (spec.sequences != spec.periods - 1)
        throw ValidationError("stepped wedge requires sequences = periods - 1", "design.sequences");
      break;
    case DesignFamily::custom:
      break;
  }
  if (!(spec.pi > 0.0 && spec.pi < 1.0)) throw ValidationError("pi must lie in (0, 1)", "design.pi");
  if (spec.family == DesignFamily::parallel_three_level && spec.n_sub < 1)
    throw ValidationError("subclusters per cluster must be >= 1", "design.subclusters");
  if (spec.family == DesignFamily::parallel_three_level &&
      spec.randomization_level == RandomizationLevel::subcluster && spec.n_sub < 2)
    throw ValidationError("subcluster randomization needs >= 2 subclusters", "design.subclusters");
  return spec;
}

// Largest-remainder apportionment of n units over the weights; remainder ties
// go to the lower index, so two-row parallel splits round pi*n half up toward
// the treated row.
inline std::vector<long> allocate(long n, const std::vector<double>& weights) {
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<long> counts(weights.size());
  std::vector<double> frac(weights.size());
  long assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double q = static_cast<double>(n) * weights[i] / total;
    counts[i] = static_cast<long>(std::floor(q + 1e-9));
    frac[i] = q - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  std::vector<std::size_t> order(weights.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return frac[a] > frac[b] + 1e-9; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++counts[order[k % order.size()]];
  return counts;
}

namespace detail {

inline TreatmentMatrix two_sequence(std::vector<std::uint8_t> first, std::vector<std::uint8_t> second,
                                    long n, double pi) {
  auto counts = allocate(n, {pi, 1.0 - pi});
  if (counts[0] < 1 || counts[1] < 1) {
    throw ValidationError("infeasible allocation: pi * n = " + std::to_string(pi * static_cast<double>(n)) +
                              " leaves an empty arm",
                          "design.pi");
  }
  return {{std::move(first), std::move(second)}, std::move(counts)};
}

}  // namespace detail

// Parallel and three-level rows are (treated, control). For three-level
// designs under subcluster randomization the counts are subclusters per
// cluster rather than clusters. IRGT and by-arm designs are one-period
// two-stratum matrices whose per-arm settings stay in DesignSpec::arm_params.
inline TreatmentMatrix generate(const DesignSpec& raw) {
  const DesignSpec spec = normalized(raw);
  const int J = spec.periods;
  const long n = spec.n_total;
  if (spec.family == DesignFamily::custom)
    throw ValidationError("custom designs come from a CSV upload", "design.csv");
  const bool by_subcluster = spec.family == DesignFamily::parallel_three_level &&
                             spec.randomization_level == RandomizationLevel::subcluster;
  if (n < (by_subcluster ? 1 : 2)) throw ValidationError("need at least 2 clusters", "design.clusters");
  switch (spec.family) {
    case DesignFamily::parallel_two_level:
    case DesignFamily::parallel_two_level_by_arm:
    case DesignFamily::irgt:
      return detail::two_sequence({1}, {0}, n, spec.pi);
    case DesignFamily::parallel_three_level:
      if (spec.randomization_level == RandomizationLevel::subcluster)
        return detail::two_sequence({1}, {0}, spec.n_sub, spec.pi);
      return detail::two_sequence({1}, {0}, n, spec.pi);
    case DesignFamily::multi_period_parallel:
      return detail::two_sequence(std::vector<std::uint8_t>(J, 1), std::vector<std::uint8_t>(J, 0), n, spec.pi);
    case DesignFamily::crxo_two_period:
      return detail::two_sequence({1, 0}, {0, 1}, n, spec.pi);
    case DesignFamily::crxo_multi_period: {
      std::vector<std::uint8_t> a(J), b(J);
      for (int j = 0; j < J; ++j) {
        a[j] = static_cast<std::uint8_t>((j + 1) % 2);
        b[j] = static_cast<std::uint8_t>(j % 2);
      }
      return detail::two_sequence(std::move(a), std::move(b), n, spec.pi);
    }
    case DesignFamily::stepped_wedge: {
      const int S = spec.sequences;
      if (n % S != 0) {
        throw ValidationError("stepped wedge needs clusters balanced across sequences (" + std::to_string(n) +
                                  " is not a multiple of " + std::to_string(S) + ")",
                              "design.clusters");
      }
      // Row s (0-based) switches to treatment after period J - 2 - s, so row
      // sums increase down the staircase.
      TreatmentMatrix tm;
      for (int s = 0; s < S; ++s) {
        std::vector<std::uint8_t> row(J, 0);
        for (int j = J - 1 - s; j < J; ++j) row[j] = 1;
        tm.rows.push_back(std::move(row));
        tm.clusters_per_sequence.push_back(n / S);
      }
      return tm;
    }
    case DesignFamily::custom:
      break;
  }
  throw ValidationError("unsupported design family", "design.family");
}

// ---------------------------------------------------------------------------
// CSV design format
//
//   [n_clusters,p1,...,pJ]      optional header; n_clusters makes column 1 counts
//   20,0,1,1                    one row per sequence, cells strictly 0 or 1
//
// Comma separator, LF line endings (a trailing CR is tolerated).
// ---------------------------------------------------------------------------

struct ParsedDesign {
  TreatmentMatrix matrix;
  bool has_counts = false;
  std::vector<int> lines;  // source line of each sequence row
};

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return std::string(s.substr(b, e - b));
}

inline std::vector<std::string> split_fields(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline bool is_integer(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

}  // namespace detail

inline ParsedDesign parse_csv(std::string_view text) {
  if (text.substr(0, 3) == "\xEF\xBB\xBF") text.remove_prefix(3);

  ParsedDesign out;
  std::size_t expected = 0;
  bool first_content = true;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const auto raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (detail::trim(raw).empty()) continue;

    const auto fields = detail::split_fields(raw);
    if (first_content) {
      first_content = false;
      const bool header = !std::all_of(fields.begin(), fields.end(), detail::is_integer);
      if (header) {
        std::string first = fields.front();
        std::transform(first.begin(), first.end(), first.begin(), [](unsigned char c) { return std::tolower(c); });
        out.has_counts = first == "n_clusters";
        expected = fields.size();
        if (expected < (out.has_counts ? 2u : 1u))
          throw ParseError("header at line " + std::to_string(line_no) + " names no periods", line_no, 1);
        continue;
      }
    }
    if (expected == 0) expected = fields.size();
    if (fields.size() != expected) {
      throw ParseError("ragged row at line " + std::to_string(line_no) + ": expected " + std::to_string(expected) +
                           " fields, found " + std::to_string(fields.size()),
                       line_no, static_cast<int>(std::min(fields.size(), expected)) + 1);
    }
    std::size_t c0 = 0;
    long count = 1;
    if (out.has_counts) {
      const auto& f = fields[0];
      if (!detail::is_integer(f) || f.size() > 12 || std::stol(f) < 1) {
        throw ParseError("invalid cluster count at line " + std::to_string(line_no) + ", column 1", line_no, 1);
      }
      count = std::stol(f);
      c0 = 1;
    }
    std::vector<std::uint8_t> row;
    for (std::size_t c = c0; c < fields.size(); ++c) {
      if (fields[c] != "0" && fields[c] != "1") {
        throw ParseError("non-binary cell at line " + std::to_string(line_no) + ", column " + std::to_string(c + 1),
                         line_no, static_cast<int>(c + 1));
      }
      row.push_back(fields[c] == "1" ? 1 : 0);
    }
    out.matrix.rows.push_back(std::move(row));
    out.matrix.clusters_per_sequence.push_back(count);
    out.lines.push_back(line_no);
  }
  if (out.matrix.rows.empty()) throw ParseError("empty design file", line_no, 0);
  return out;
}

inline std::string emit_csv(const TreatmentMatrix& tm) {
  std::ostringstream os;
  os << "n_clusters";
  for (int j = 1; j <= tm.periods(); ++j) os << ",p" << j;
  for (int s = 0; s < tm.sequences(); ++s) {
    os << '\n' << tm.clusters_per_sequence[s];
    for (auto w : tm.rows[s]) os << ',' << static_cast<int>(w);
  }
  return os.str();
}

}  // namespace crthte
