#include "crpo/error.hpp"
#include "crpo/runner.hpp"
#include "crpo/util.hpp"

#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

namespace crpo {

using nlohmann::json;

ReportFormat report_format_from_name(std::string_view name) {
  if (name == "csv") return ReportFormat::Csv;
  if (name == "markdown" || name == "md") return ReportFormat::Markdown;
  if (name == "json") return ReportFormat::Json;
  throw ConfigError("unknown report format '" + std::string(name) + "' (expected csv, markdown or json)");
}

std::string_view report_format_extension(ReportFormat format) {
  switch (format) {
    case ReportFormat::Csv:
      return ".csv";
    case ReportFormat::Markdown:
      return ".md";
    case ReportFormat::Json:
      return ".json";
  }
  return "";
}

namespace {

std::string fixed(double v, int digits) {
  if (std::isnan(v)) return "";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

// Column values in report order: five metrics then avg.
std::array<double, kMetricCount + 1> cells(const AggregateRow& a) {
  std::array<double, kMetricCount + 1> out{};
  for (std::size_t i = 0; i < kMetricCount; ++i) out[i] = a.metrics[i];
  out[kMetricCount] = a.avg;
  return out;
}

json value_or_null(double v) { return std::isnan(v) ? json(nullptr) : json(v); }

json table_row_json(const AggregateRow& a) {
  json row = {{"strategy", strategy_name(a.strategy)}};
  const auto values = cells(a);
  for (std::size_t i = 1; i < kReportColumns.size(); ++i) {
    row[std::string(kReportColumns[i])] = value_or_null(values[i - 1]);
  }
  return row;
}

std::string render_csv(const RunManifest& manifest) {
  std::ostringstream out;
  for (std::size_t i = 0; i < kReportColumns.size(); ++i) out << (i ? "," : "") << kReportColumns[i];
  out << '\n';
  for (const auto& a : manifest.aggregate) {
    out << strategy_name(a.strategy);
    for (double v : cells(a)) out << ',' << fixed(v, 6);
    out << '\n';
  }
  return out.str();
}

std::string render_markdown(const RunManifest& manifest) {
  constexpr int kDigits = 4;
  std::array<std::string, kMetricCount + 1> best;
  for (std::size_t c = 0; c <= kMetricCount; ++c) {
    double max = -1.0;
    for (const auto& a : manifest.aggregate) {
      const double v = cells(a)[c];
      if (!std::isnan(v) && v > max) max = v;
    }
    if (max >= 0.0) best[c] = fixed(max, kDigits);
  }
  std::ostringstream out;
  out << "| Strategy | Helpfulness | Correctness | Coherence | Complexity | Verbosity | Avg. Score |\n";
  out << "|---|---:|---:|---:|---:|---:|---:|\n";
  for (const auto& a : manifest.aggregate) {
    out << "| " << strategy_display_name(a.strategy);
    const auto values = cells(a);
    for (std::size_t c = 0; c < values.size(); ++c) {
      const std::string text = fixed(values[c], kDigits);
      if (text.empty()) {
        out << " | n/a";
      } else if (text == best[c]) {
        out << " | **" << text << "**";
      } else {
        out << " | " << text;
      }
    }
    out << " |\n";
  }
  std::ostringstream counts;
  for (const auto& a : manifest.aggregate) {
    if (counts.tellp() > 0) counts << ", ";
    counts << strategy_name(a.strategy) << ' ' << a.rows << '/' << (a.rows + a.excluded);
  }
  out << "\nRows evaluated per strategy: " << counts.str() << ".\n";
  return out.str();
}

std::string render_json(const RunManifest& manifest) {
  json table = json::array();
  json counts = json::object();
  json ablation = json::array();
  const std::set<Strategy> ablation_arms = {Strategy::TpsTop3, Strategy::CrpoTiered,
                                            Strategy::CrpoMultiMetric};
  for (const auto& a : manifest.aggregate) {
    table.push_back(table_row_json(a));
    counts[std::string(strategy_name(a.strategy))] = {{"rows", a.rows}, {"excluded", a.excluded}};
    if (ablation_arms.count(a.strategy)) ablation.push_back(table_row_json(a));
  }
  json doc = {{"columns", kReportColumns},
              {"table", table},
              {"counts", counts},
              {"ablation_tps", ablation},
              {"template_version", manifest.config.value("template_version", "")},
              {"k", manifest.config.value("k", 0)}};
  return doc.dump(2) + "\n";
}

}  // namespace

std::string render_report(const RunManifest& manifest, ReportFormat format) {
  switch (format) {
    case ReportFormat::Csv:
      return render_csv(manifest);
    case ReportFormat::Markdown:
      return render_markdown(manifest);
    case ReportFormat::Json:
      return render_json(manifest);
  }
  return {};
}

void emit_report(const RunManifest& manifest, ReportFormat format, const std::filesystem::path& path) {
  write_file_atomic(path, render_report(manifest, format));
}

std::string render_sweep_report(const std::vector<SweepPoint>& points, ReportFormat format) {
  if (format == ReportFormat::Json) {
    json series = json::array();
    for (const auto& p : points) {
      json overall = json::object();
      for (const auto& [s, v] : p.overall) overall[std::string(strategy_name(s))] = value_or_null(v);
      series.push_back({{"k", p.k}, {"overall", overall}});
    }
    return json{{"series", series}}.dump(2) + "\n";
  }
  std::ostringstream out;
  if (format == ReportFormat::Csv) {
    out << "k,strategy,overall\n";
    for (const auto& p : points) {
      for (const auto& [s, v] : p.overall) out << p.k << ',' << strategy_name(s) << ',' << fixed(v, 6) << '\n';
    }
    return out.str();
  }
  out << "| k | Strategy | Overall |\n|---:|---|---:|\n";
  for (const auto& p : points) {
    for (const auto& [s, v] : p.overall) {
      out << "| " << p.k << " | " << strategy_display_name(s) << " | " << fixed(v, 4) << " |\n";
    }
  }
  return out.str();
}

}  // namespace crpo
