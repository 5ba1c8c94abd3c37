#include "sslab/compare.hpp"

#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

#include "sslab/errors.hpp"
#include "sslab/train.hpp"

namespace sslab {

namespace {

std::optional<double> last_number(const MetricsRun& run, const std::string& key) {
  for (auto it = run.records.rbegin(); it != run.records.rend(); ++it) {
    if (it->contains(key) && it->at(key).is_number()) {
      return it->at(key).get<double>();
    }
  }
  return std::nullopt;
}

template <typename T>
nlohmann::ordered_json opt(const std::optional<T>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

std::string fmt(const std::optional<double>& v, const char* spec = "%.4f") {
  if (!v) {
    return "-";
  }
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, *v);
  return buf;
}

}  // namespace

MetricsRun parse_metrics(const std::string& text, const std::string& name) {
  MetricsRun run{name, {}};
  std::size_t start = 0;
  std::size_t line_no = 0;
  while (start < text.size()) {
    const auto nl = text.find('\n', start);
    if (nl == std::string::npos) {
      break;  // partial trailing line
    }
    ++line_no;
    const auto line = text.substr(start, nl - start);
    start = nl + 1;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;
    }
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw InputError(name + ":" + std::to_string(line_no) + ": malformed metrics line: " + e.what());
    }
    if (!rec.is_object() || !rec.contains("step") || !rec.at("step").is_number_unsigned()) {
      throw InputError(name + ":" + std::to_string(line_no) + ": metrics record without a step");
    }
    if (rec.contains("event")) {
      continue;
    }
    run.records.push_back(std::move(rec));
  }
  return run;
}

MetricsRun read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw InputError("cannot open metrics file " + path.string());
  }
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_metrics(text, path.string());
}

std::vector<std::pair<std::uint64_t, double>> metric_series(const MetricsRun& run, const std::string& metric) {
  std::vector<std::pair<std::uint64_t, double>> out;
  for (const auto& r : run.records) {
    if (r.contains(metric) && r.at(metric).is_number()) {
      out.emplace_back(r.at("step").get<std::uint64_t>(), r.at(metric).get<double>());
    }
  }
  return out;
}

Comparison compare_runs(const std::vector<MetricsRun>& runs, const std::string& metric,
                        std::optional<double> threshold) {
  if (runs.empty()) {
    throw InputError("compare: need at least one metrics file");
  }
  Comparison c;
  c.metric = metric;
  if (threshold) {
    c.threshold = *threshold;
  } else {
    const auto first = last_number(runs.front(), metric);
    if (!first) {
      throw InputError(runs.front().name + ": no values for metric '" + metric + "'");
    }
    c.threshold = *first;
  }
  for (const auto& run : runs) {
    CompareRow row;
    row.name = run.name;
    row.final_value = last_number(run, metric);
    row.final_token_acc = last_number(run, "val_token_acc");
    row.final_seq_acc = last_number(run, "val_seq_acc");
    row.final_bleu = last_number(run, "val_bleu");
    row.steps_to_threshold = sslab::steps_to_threshold(metric_series(run, metric), c.threshold);
    c.rows.push_back(row);
  }
  const auto base = c.rows.front().steps_to_threshold;
  for (auto& row : c.rows) {
    if (base && row.steps_to_threshold && *row.steps_to_threshold > 0) {
      row.speedup = static_cast<double>(*base) / static_cast<double>(*row.steps_to_threshold);
    }
  }
  return c;
}

nlohmann::ordered_json Comparison::to_json() const {
  nlohmann::ordered_json j;
  j["metric"] = metric;
  j["threshold"] = threshold;
  j["runs"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json o;
    o["file"] = r.name;
    o["final"] = opt(r.final_value);
    o["final_val_token_acc"] = opt(r.final_token_acc);
    o["final_val_seq_acc"] = opt(r.final_seq_acc);
    o["final_val_bleu"] = opt(r.final_bleu);
    o["steps_to_threshold"] = opt(r.steps_to_threshold);
    o["speedup"] = opt(r.speedup);
    j["runs"].push_back(o);
  }
  return j;
}

std::string Comparison::table() const {
  std::vector<std::vector<std::string>> cells{
      {"file", "final " + metric, "token_acc", "seq_acc", "bleu", "steps_to_thr", "speedup"}};
  for (const auto& r : rows) {
    cells.push_back({r.name, fmt(r.final_value), fmt(r.final_token_acc), fmt(r.final_seq_acc),
                     fmt(r.final_bleu, "%.2f"),
                     r.steps_to_threshold ? std::to_string(*r.steps_to_threshold) : "-",
                     fmt(r.speedup, "%.2fx")});
  }
  std::vector<std::size_t> width(cells.front().size(), 0);
  for (const auto& row : cells) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      width[i] = std::max(width[i], row[i].size());
    }
  }
  std::ostringstream out;
  out << "threshold " << metric << " >= " << threshold << '\n';
  for (const auto& row : cells) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      out << (i == 0 ? "" : "  ");
      if (i == 0) {
        out << row[i] << std::string(width[i] - row[i].size(), ' ');
      } else {
        out << std::string(width[i] - row[i].size(), ' ') << row[i];
      }
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace sslab
