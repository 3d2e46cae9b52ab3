#include "csae/io.hpp"

#include "csae/error.hpp"

#include <boost/tokenizer.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

namespace csae {

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string format_number(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

std::string header_comment(std::uint64_t seed, std::string_view config) {
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(fnv1a64(config)));
  return "# csae " + std::string(kVersion) + " seed=" + std::to_string(seed) + " config=" + hash;
}

namespace {

using Tokenizer = boost::tokenizer<boost::escaped_list_separator<char>>;

std::vector<std::string> split_fields(const std::string& line) {
  Tokenizer tok(line, boost::escaped_list_separator<char>('\\', ',', '"'));
  return {tok.begin(), tok.end()};
}

std::string field(std::string_view text) {
  if (text.find_first_of(",\"\\\n") == std::string_view::npos) return std::string(text);
  std::string out = "\"";
  for (char c : text) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + '"';
}

std::string optional_number(const std::optional<double>& value) {
  return value ? format_number(*value) : std::string();
}

[[noreturn]] void fail(std::size_t line, const std::string& column, const std::string& what) {
  throw Error("ingest-error", "line " + std::to_string(line) + ", column '" + column + "': " + what);
}

double parse_number(const std::string& text, std::size_t line, const std::string& column) {
  double value = 0.0;
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (text.empty()) fail(line, column, "empty cell");
  if (ec != std::errc() || ptr != end || !std::isfinite(value)) fail(line, column, "'" + text + "' is not a finite number");
  return value;
}

bool parse_flag(const std::string& text, std::size_t line, const std::string& column) {
  if (text == "0") return false;
  if (text == "1") return true;
  fail(line, column, "expected 0 or 1, got '" + text + "'");
}

ColumnSummary summarize(std::string name, const std::vector<double>& values) {
  ColumnSummary s{std::move(name), values.size(), 0.0, 0.0};
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= double(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.sd = std::sqrt(ss / double(values.size() - 1));
  }
  return s;
}

}  // namespace

Ingested read_frame_csv(std::istream& in, const IngestOptions& options) {
  std::string text;
  std::size_t line_no = 0;
  auto next_line = [&]() -> bool {
    if (!std::getline(in, text)) return false;
    ++line_no;
    if (!text.empty() && text.back() == '\r') text.pop_back();
    return true;
  };

  bool have_header = false;
  while (next_line()) {
    if (!text.empty() && text.front() == '#') continue;
    have_header = true;
    break;
  }
  if (!have_header) throw Error("ingest-error", "missing header row");
  const auto header = split_fields(text);
  const std::size_t header_line = line_no;

  std::map<std::string, std::size_t> position;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c].empty()) fail(header_line, "#" + std::to_string(c + 1), "empty column name");
    if (!position.emplace(header[c], c).second) fail(header_line, header[c], "duplicate column");
  }
  for (const char* required : {"area", "a", "s", "y"}) {
    if (!position.count(required)) fail(header_line, required, "required column missing");
  }
  const std::set<std::string> contextual(options.contextual.begin(), options.contextual.end());
  for (const auto& name : options.contextual) {
    if (!position.count(name)) fail(header_line, name, "declared contextual column missing");
    if (name == "area" || name == "a" || name == "s" || name == "y" || name == "weight") {
      fail(header_line, name, "reserved column cannot be contextual");
    }
  }
  const bool has_weight = position.count("weight") > 0;
  std::vector<std::size_t> individual_cols, contextual_cols;
  std::vector<std::string> individual_names, contextual_names;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const auto& name = header[c];
    if (name == "area" || name == "a" || name == "s" || name == "y" || name == "weight") continue;
    if (contextual.count(name)) {
      contextual_cols.push_back(c);
      contextual_names.push_back(name);
    } else {
      individual_cols.push_back(c);
      individual_names.push_back(name);
    }
  }

  std::vector<UnitRecord> units;
  std::vector<std::string> labels;
  std::map<std::string, std::size_t> area_id;
  std::vector<std::pair<std::size_t, std::vector<double>>> area_context;  // first line, values
  bool weights_defaulted = !has_weight;
  while (next_line()) {
    if (text.empty()) continue;
    std::vector<std::string> cells;
    try {
      cells = split_fields(text);
    } catch (const boost::escaped_list_error& e) {
      fail(line_no, "-", std::string("malformed field: ") + e.what());
    }
    if (cells.size() != header.size()) {
      fail(line_no, "-", "expected " + std::to_string(header.size()) + " fields, got " + std::to_string(cells.size()));
    }
    UnitRecord u;
    const auto& label = cells[position["area"]];
    if (label.empty()) fail(line_no, "area", "empty area label");
    auto [it, fresh] = area_id.emplace(label, labels.size());
    if (fresh) labels.push_back(label);
    u.area = it->second;
    u.treated = parse_flag(cells[position["a"]], line_no, "a");
    u.sampled = parse_flag(cells[position["s"]], line_no, "s");
    const auto& y = cells[position["y"]];
    if (u.sampled && y.empty()) fail(line_no, "y", "sampled unit (s=1) without an outcome");
    if (!u.sampled && !y.empty()) fail(line_no, "y", "unsampled unit (s=0) carries an outcome");
    if (u.sampled) u.outcome = parse_number(y, line_no, "y");
    if (has_weight) {
      const auto& w = cells[position["weight"]];
      if (w.empty()) {
        weights_defaulted = true;
      } else {
        u.weight = parse_number(w, line_no, "weight");
        if (*u.weight <= 0) fail(line_no, "weight", "design weights must be positive");
      }
    }
    for (auto c : individual_cols) u.individual.push_back(parse_number(cells[c], line_no, header[c]));
    for (auto c : contextual_cols) u.contextual.push_back(parse_number(cells[c], line_no, header[c]));
    if (fresh) {
      area_context.emplace_back(line_no, u.contextual);
    } else {
      const auto& [first, values] = area_context[u.area];
      for (std::size_t k = 0; k < values.size(); ++k) {
        if (values[k] != u.contextual[k]) {
          fail(line_no, contextual_names[k],
               "contextual value differs from line " + std::to_string(first) + " of area '" + label + "'");
        }
      }
    }
    units.push_back(std::move(u));
  }
  if (units.empty()) throw Error("ingest-error", "no data rows");

  Ingested out{PopulationFrame::from_units(std::move(units), labels, individual_names, contextual_names), {}};
  auto& report = out.report;
  const auto& frame = out.frame;
  report.rows = frame.size();
  report.areas = partition_counts(frame);
  report.weights_defaulted = weights_defaulted;
  for (std::size_t k = 0; k < individual_names.size(); ++k) {
    const auto col = frame.individual().col(static_cast<Eigen::Index>(k));
    report.covariates.push_back(summarize(individual_names[k], {col.data(), col.data() + col.size()}));
  }
  for (std::size_t k = 0; k < contextual_names.size(); ++k) {
    const auto col = frame.contextual().col(static_cast<Eigen::Index>(k));
    report.covariates.push_back(summarize(contextual_names[k], {col.data(), col.data() + col.size()}));
  }
  std::vector<double> y1, y0;
  for (auto row : frame.sampled_rows()) (frame.treated(row) ? y1 : y0).push_back(*frame.outcome(row));
  report.outcome_treated = summarize("y | a=1", y1);
  report.outcome_control = summarize("y | a=0", y0);
  return out;
}

Ingested ingest(const std::filesystem::path& path, const IngestOptions& options) {
  std::ifstream in(path);
  if (!in) throw Error("io-error", "cannot read '" + path.string() + "'");
  return read_frame_csv(in, options);
}

void write_frame_csv(std::ostream& out, const PopulationFrame& frame) {
  bool weighted = false;
  for (std::size_t i = 0; i < frame.size() && !weighted; ++i) weighted = frame.weight(i).has_value();
  out << "area,a,s,y";
  if (weighted) out << ",weight";
  for (const auto& n : frame.individual_names()) out << ',' << field(n);
  for (const auto& n : frame.contextual_names()) out << ',' << field(n);
  out << '\n';
  for (std::size_t i = 0; i < frame.size(); ++i) {
    out << field(frame.area_label(frame.area_of(i))) << ',' << frame.treated(i) << ',' << frame.sampled(i) << ','
        << optional_number(frame.outcome(i));
    if (weighted) out << ',' << optional_number(frame.weight(i));
    const auto r = static_cast<Eigen::Index>(i);
    for (Eigen::Index k = 0; k < frame.individual().cols(); ++k) out << ',' << format_number(frame.individual()(r, k));
    for (Eigen::Index k = 0; k < frame.contextual().cols(); ++k) out << ',' << format_number(frame.contextual()(r, k));
    out << '\n';
  }
}

void write_label_map(std::ostream& out, const PopulationFrame& frame) {
  out << "id,label\n";
  for (std::size_t j = 0; j < frame.area_count(); ++j) out << j << ',' << field(frame.area_label(j)) << '\n';
}

void write_report(std::ostream& out, const PopulationFrame& frame, const IngestReport& report) {
  out << "rows: " << report.rows << ", areas: " << report.areas.size() << ", sampled: " << frame.sample_size()
      << '\n';
  if (report.weights_defaulted) out << "design weights: defaulted to N_j^a / n_j^a where missing\n";
  out << "area,N,N1,N0,n,n1,n0\n";
  for (std::size_t j = 0; j < report.areas.size(); ++j) {
    const auto& c = report.areas[j];
    out << field(frame.area_label(j)) << ',' << c.population << ',' << c.population_treated << ','
        << c.population_control << ',' << c.sample << ',' << c.sample_treated << ',' << c.sample_control << '\n';
  }
  out << "variable,count,mean,sd\n";
  auto line = [&](const ColumnSummary& s) {
    out << field(s.name) << ',' << s.count << ',' << format_number(s.mean) << ',' << format_number(s.sd) << '\n';
  };
  for (const auto& s : report.covariates) line(s);
  line(report.outcome_treated);
  line(report.outcome_control);
}

void write_estimates_header(std::ostream& out) {
  out << "area,estimator,nuisance,tau,tau1,tau0,lower,upper,flag,clipped\n";
}

void write_estimates(std::ostream& out, const PopulationFrame& frame, const std::vector<AreaEstimate>& estimates) {
  for (const auto& e : estimates) {
    out << field(frame.area_label(e.area)) << ',' << field(e.estimator) << ',' << field(e.nuisance) << ','
        << optional_number(e.tau) << ',' << optional_number(e.tau1) << ',' << optional_number(e.tau0) << ',';
    if (e.interval) out << format_number(e.interval->lower) << ',' << format_number(e.interval->upper);
    else out << ',';
    out << ',' << field(e.flag) << ',' << e.clipped << '\n';
  }
}

void write_truth_csv(std::ostream& out, const std::vector<std::string>& labels, const std::vector<double>& tau) {
  out << "area,tau_true\n";
  for (std::size_t j = 0; j < tau.size(); ++j) out << field(labels[j]) << ',' << format_number(tau[j]) << '\n';
}

void write_results_csv(std::ostream& out, const ResultsTable& results) {
  out << "rank,method,mu,e1,mu_a,mse,pct_err,bias,failure_rate,valid,cov_single,cov_double\n";
  std::size_t rank = 0;
  for (const auto& r : rank_table(results)) {
    out << ++rank << ',' << field(r.name) << ',' << r.mu << ',' << r.e1 << ',' << r.mu_a << ','
        << format_number(r.mean_mse) << ',' << format_number(r.percent_error) << ',' << format_number(r.mean_bias)
        << ',' << format_number(r.failure_rate()) << ',' << r.valid << ',' << optional_number(r.coverage_single)
        << ',' << optional_number(r.coverage_double) << '\n';
  }
}

void write_area_results_csv(std::ostream& out, const ResultsTable& results, const std::vector<std::string>& labels) {
  out << "method,area,bias,mse,count\n";
  for (const auto& r : results.methods) {
    for (std::size_t j = 0; j < r.area_mse.size(); ++j) {
      out << field(r.name) << ',' << field(labels[j]) << ',' << format_number(r.area_bias[j]) << ','
          << format_number(r.area_mse[j]) << ',' << r.area_count[j] << '\n';
    }
  }
}

void write_timing_csv(std::ostream& out, const ResultsTable& results) {
  out << "method,seconds_total,seconds_per_replication\n";
  for (const auto& r : results.methods) {
    out << field(r.name) << ',' << format_number(r.seconds) << ','
        << format_number(r.seconds_per_replication(results.replications)) << '\n';
  }
}

std::string format_table(const ResultsTable& results) {
  const auto rows = rank_table(results);
  const bool coverage = std::any_of(rows.begin(), rows.end(), [](auto& r) { return r.coverage_single.has_value(); });
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> head{"method", "mu", "e1", "mu_a", "MSE", "%err", "bias", "time(s)"};
  if (coverage) head.insert(head.end(), {"Cov(single)", "Cov(double)"});
  cells.push_back(head);
  auto fixed = [](double v, int digits) {
    if (!std::isfinite(v)) return format_number(v);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return std::string(buf);
  };
  for (const auto& r : rows) {
    std::vector<std::string> row{r.name, r.mu, r.e1, r.mu_a};
    if (r.valid) {
      row.insert(row.end(), {fixed(r.mean_mse, 6), fixed(r.percent_error, 2), fixed(r.mean_bias, 4)});
    } else {
      row.insert(row.end(), {"invalid", "fail " + fixed(100 * r.failure_rate(), 1) + "%", "-"});
    }
    row.push_back(fixed(r.seconds_per_replication(results.replications), 3));
    if (coverage) {
      row.push_back(r.coverage_single ? fixed(*r.coverage_single, 4) : "-");
      row.push_back(r.coverage_double ? fixed(*r.coverage_double, 4) : "-");
    }
    cells.push_back(std::move(row));
  }
  std::vector<std::size_t> width(head.size(), 0);
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream out;
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      const auto pad = std::string(width[c] - row[c].size(), ' ');
      out << (c < 4 ? row[c] + pad : pad + row[c]) << (c + 1 < row.size() ? "  " : "\n");
    }
  }
  return out.str();
}

}  // namespace csae
