#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "afnn/metrics.hpp"

namespace afnn::report {

class ReportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CsvRow {
  std::string run_id;
  int unseen_domain = 0;
  metrics::MetricRecord record;
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

/// Parses a metrics CSV as written by metrics::write_metric_csv.
inline std::vector<CsvRow> read_metric_csv(std::istream& in, const std::string& what = "metrics csv") {
  std::string line;
  if (!std::getline(in, line)) throw ReportError(what + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != metrics::kMetricCsvHeader) throw ReportError(what + ": unexpected header '" + line + "'");
  std::vector<CsvRow> rows;
  std::size_t lineno = 1;
  auto num = [&](const std::string& s) {
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != s.size() || s.empty()) {
      throw ReportError(what + ":" + std::to_string(lineno) + ": bad number '" + s + "'");
    }
    return v;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv_line(line);
    if (f.size() != 8) throw ReportError(what + ":" + std::to_string(lineno) + ": expected 8 fields");
    CsvRow r;
    r.run_id = f[0];
    r.unseen_domain = static_cast<int>(num(f[1]));
    r.record.domain_id = r.unseen_domain;
    r.record.sample_id = f[2];
    try {
      r.record.structure = metrics::parse_structure(f[3]);
    } catch (const std::exception& e) {
      throw ReportError(what + ":" + std::to_string(lineno) + ": " + e.what());
    }
    r.record.dsc = num(f[4]);
    const bool defined = f[7] == "1";
    if (defined) {
      r.record.hd = num(f[5]);
      r.record.asd = num(f[6]);
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

/// Mean metrics per (run, unseen domain, structure).
struct Table {
  std::vector<std::string> runs;  ///< first-appearance order
  std::vector<int> domains;       ///< ascending
  std::map<std::pair<std::string, int>, std::map<metrics::Structure, metrics::StructureSummary>> cells;
};

inline Table build_table(const std::vector<CsvRow>& rows) {
  Table t;
  std::map<std::pair<std::string, int>, std::vector<metrics::MetricRecord>> groups;
  std::set<int> domains;
  for (const auto& r : rows) {
    if (std::find(t.runs.begin(), t.runs.end(), r.run_id) == t.runs.end()) t.runs.push_back(r.run_id);
    domains.insert(r.unseen_domain);
    groups[{r.run_id, r.unseen_domain}].push_back(r.record);
  }
  t.domains.assign(domains.begin(), domains.end());
  for (const auto& [key, recs] : groups) t.cells[key] = metrics::summarize(recs);
  return t;
}

inline std::string fmt(double v, int precision) {
  if (!std::isfinite(v)) return "-";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

/// Markdown table with left-aligned first column and right-aligned numbers,
/// padded so columns line up in plain text.
inline std::string render_markdown(const std::vector<std::string>& header,
                                   const std::vector<std::vector<std::string>>& body) {
  std::vector<std::size_t> width(header.size(), 3);
  auto widen = [&](const std::vector<std::string>& row) {
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  };
  widen(header);
  for (const auto& r : body) widen(r);
  auto cell = [&](const std::string& s, std::size_t i) {
    const std::string pad(width[i] - s.size(), ' ');
    return i == 0 ? s + pad : pad + s;
  };
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& row) {
    os << '|';
    for (std::size_t i = 0; i < row.size(); ++i) os << ' ' << cell(row[i], i) << " |";
    os << '\n';
  };
  line(header);
  os << '|';
  for (std::size_t i = 0; i < header.size(); ++i) {
    os << (i == 0 ? ' ' + std::string(width[i], '-') + " |" : ' ' + std::string(width[i] - 1, '-') + ": |");
  }
  os << '\n';
  for (const auto& r : body) line(r);
  return os.str();
}

enum class Measure { kDsc, kHd, kAsd };

inline double measure_of(const metrics::StructureSummary& s, Measure m) {
  switch (m) {
    case Measure::kDsc: return s.mean_dsc;
    case Measure::kHd: return s.count > s.undefined ? s.mean_hd : std::numeric_limits<double>::quiet_NaN();
    case Measure::kAsd: return s.count > s.undefined ? s.mean_asd : std::numeric_limits<double>::quiet_NaN();
  }
  return 0.0;
}

/// One row per run; per unseen domain an OD and an OC column, then Avg. over
/// the domains the run has results for.
inline std::string render_measure(const Table& t, Measure m, int precision) {
  std::vector<std::string> header{"Method"};
  for (int d : t.domains) {
    header.push_back("D" + std::to_string(d) + " OD");
    header.push_back("D" + std::to_string(d) + " OC");
  }
  header.push_back("Avg. OD");
  header.push_back("Avg. OC");
  std::vector<std::vector<std::string>> body;
  for (const auto& run : t.runs) {
    std::vector<std::string> row{run};
    double sum[2] = {0, 0};
    std::size_t n[2] = {0, 0};
    for (int d : t.domains) {
      auto it = t.cells.find({run, d});
      for (int k = 0; k < 2; ++k) {
        const auto st = k == 0 ? metrics::Structure::kOpticDisc : metrics::Structure::kOpticCup;
        double v = std::numeric_limits<double>::quiet_NaN();
        if (it != t.cells.end() && it->second.count(st)) v = measure_of(it->second.at(st), m);
        row.push_back(fmt(v, precision));
        if (std::isfinite(v)) {
          sum[k] += v;
          ++n[k];
        }
      }
    }
    for (int k = 0; k < 2; ++k) {
      row.push_back(fmt(n[k] ? sum[k] / static_cast<double>(n[k]) : std::numeric_limits<double>::quiet_NaN(),
                        precision));
    }
    body.push_back(std::move(row));
  }
  return render_markdown(header, body);
}

inline std::string render_report(const Table& t) {
  std::ostringstream os;
  os << "# Segmentation results\n\n";
  os << "Columns are unseen (held-out) domains; Avg. is the mean over the listed domains.\n\n";
  os << "## DSC\n\n" << render_measure(t, Measure::kDsc, 4) << '\n';
  os << "## HD (pixels)\n\n" << render_measure(t, Measure::kHd, 3) << '\n';
  os << "## ASD (pixels)\n\n" << render_measure(t, Measure::kAsd, 3) << '\n';
  std::size_t undefined = 0;
  for (const auto& [k, by] : t.cells)
    for (const auto& [s, sum] : by) undefined += sum.undefined;
  os << "Samples with one empty surface (excluded from HD/ASD): " << undefined << '\n';
  return os.str();
}

/// Histogram of one channel as a standalone SVG bar chart.
inline std::string histogram_svg(const std::vector<std::size_t>& bins, double lo, double hi, const std::string& title) {
  const double w = 640, h = 240, margin = 30;
  std::size_t peak = 1;
  for (auto b : bins) peak = std::max(peak, b);
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  os << "<text x=\"" << margin << "\" y=\"18\" font-family=\"monospace\" font-size=\"12\">" << title << "</text>\n";
  const double bw = (w - 2 * margin) / static_cast<double>(std::max<std::size_t>(1, bins.size()));
  for (std::size_t i = 0; i < bins.size(); ++i) {
    const double bh = (h - 2 * margin) * static_cast<double>(bins[i]) / static_cast<double>(peak);
    os << "<rect x=\"" << margin + bw * static_cast<double>(i) << "\" y=\"" << h - margin - bh << "\" width=\"" << bw
       << "\" height=\"" << bh << "\" fill=\"steelblue\"/>\n";
  }
  os << "<text x=\"" << margin << "\" y=\"" << h - 10 << "\" font-family=\"monospace\" font-size=\"11\">" << fmt(lo, 3)
     << "</text>\n";
  os << "<text x=\"" << w - margin - 40 << "\" y=\"" << h - 10 << "\" font-family=\"monospace\" font-size=\"11\">"
     << fmt(hi, 3) << "</text>\n</svg>\n";
  return os.str();
}

}  // namespace afnn::report
