#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>

#include <json.hpp>

#include "ebyd/cli/commands.hpp"

namespace ebyd {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr int kSchema = 1;

struct Columns {
  std::size_t seeds = 0;
  std::vector<double> bem, dr, auroc, asr_before, ca_before, asr_after, ca_after;
};

[[noreturn]] void bad_record(const fs::path& file, std::size_t line, const std::string& what) {
  throw FormatError(file.string() + ":" + std::to_string(line) + ": " + what);
}

void add(std::vector<double>& column, const json& v) {
  if (v.is_number()) column.push_back(v.get<double>());
}

std::optional<double> med(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  return median(v);
}

std::optional<double> mean(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::string cell(const std::optional<double>& v) {
  if (!v) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", *v);
  return buf;
}

}  // namespace

double median(std::vector<double> values) {
  if (values.empty()) throw ArgumentError("median of an empty list");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

std::vector<ReportRow> aggregate_runs(const std::vector<fs::path>& run_dirs) {
  if (run_dirs.empty()) throw ArgumentError("report needs at least one run directory");
  std::map<std::pair<std::string, std::string>, Columns> groups;
  for (const fs::path& dir : run_dirs) {
    const fs::path file = dir / "run.jsonl";
    std::ifstream in(file, std::ios::binary);
    if (!in) throw MissingArtifact("missing artifact '" + file.string() + "'");
    std::string text;
    std::size_t line_no = 0, records = 0;
    while (std::getline(in, text)) {
      ++line_no;
      if (text.empty()) continue;
      json r;
      try {
        r = json::parse(text);
        if (!r.is_object() || r.value("schema", -1) != kSchema) {
          bad_record(file, line_no, "record schema is not " + std::to_string(kSchema));
        }
        const std::string attack = r.at("attack").get<std::string>();
        const bool clean = attack == "clean";
        const int target = r.at("target").get<int>();
        for (const auto& t : r.at("techniques")) {
          Columns& c = groups[{attack, t.at("technique").get<std::string>()}];
          ++c.seeds;
          add(c.bem, t.at("bem"));
          const json& d = t.at("detection");
          const bool flagged = d.at("backdoored").get<bool>();
          c.dr.push_back(flagged && (clean || d.at("target") == target) ? 1.0 : 0.0);
          add(c.auroc, d.at("auroc"));
          const json& m = t.at("removal");
          add(c.asr_before, m.at("asr_before"));
          add(c.ca_before, m.at("ca_before"));
          add(c.asr_after, m.at("asr_after"));
          add(c.ca_after, m.at("ca_after"));
        }
        const json& b = r.at("baseline");
        Columns& c = groups[{attack, "baseline"}];
        ++c.seeds;
        if (!b.at("nc").is_null()) {
          const json& nc = b.at("nc");
          c.dr.push_back(nc.at("backdoored").get<bool>() && (clean || nc.at("target") == target) ? 1.0 : 0.0);
        }
        add(c.auroc, b.at("auroc"));
        add(c.asr_before, r.at("model").at("asr"));
        add(c.ca_before, r.at("model").at("ca"));
        add(c.asr_after, b.at("ft").at("asr_after"));
        add(c.ca_after, b.at("ft").at("ca_after"));
      } catch (const json::exception& e) {
        bad_record(file, line_no, std::string("record does not match the run schema: ") + e.what());
      }
      ++records;
    }
    if (records == 0) throw FormatError(file.string() + ": no run records");
  }
  std::vector<ReportRow> rows;
  for (const auto& [key, c] : groups) {
    rows.push_back({key.first, key.second, c.seeds, med(c.bem), mean(c.dr), med(c.auroc), med(c.asr_before),
                    med(c.ca_before), med(c.asr_after), med(c.ca_after)});
  }
  return rows;
}

std::string format_report_csv(const std::vector<ReportRow>& rows) {
  std::string out = "attack,technique,seeds,bem,dr,auroc,asr_before,ca_before,asr_after,ca_after\n";
  for (const auto& r : rows) {
    out += r.attack + "," + r.technique + "," + std::to_string(r.seeds) + "," + cell(r.bem) + "," + cell(r.dr) + "," +
           cell(r.auroc) + "," + cell(r.asr_before) + "," + cell(r.ca_before) + "," + cell(r.asr_after) + "," +
           cell(r.ca_after) + "\n";
  }
  return out;
}

}  // namespace ebyd
