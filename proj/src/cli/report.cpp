// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include "thdbar/cli.hpp"

namespace thdbar::cli {

namespace fs = std::filesystem;

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string px(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string r;
  for (char c : s) {
    switch (c) {
      case '&': r += "&amp;"; break;
      case '<': r += "&lt;"; break;
      case '>': r += "&gt;"; break;
      case '"': r += "&quot;"; break;
      default: r += c;
    }
  }
  return r;
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::pair<double, double> padded_range(const std::vector<double>& v) {
  auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  double a = *lo, b = *hi;
  if (a == b) {
    const double d = a == 0.0 ? 1.0 : std::abs(a) * 0.05;
    a -= d;
    b += d;
  }
  return {a, b};
}

}  // namespace

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("missing upstream artifact: " + path);
  CsvTable t;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto cells = split_line(line);
    if (t.columns.empty()) {
      t.columns = cells;
      continue;
    }
    if (cells.size() != t.columns.size()) throw FormatError("malformed CSV row in " + path + ": " + line);
    std::vector<std::optional<double>> row;
    for (const auto& c : cells) {
      if (c.empty()) {
        row.emplace_back();
        continue;
      }
      try {
        std::size_t used = 0;
        const double v = std::stod(c, &used);
        row.emplace_back(used == c.size() ? std::optional<double>(v) : std::nullopt);
      } catch (const std::logic_error&) {
        row.emplace_back();
      }
    }
    t.rows.push_back(std::move(row));
  }
  if (t.columns.empty()) throw FormatError("CSV without header: " + path);
  return t;
}

std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.empty()) throw ShapeError("dimension mismatch: chart needs matching non-empty x, y");
  constexpr double W = 640, H = 400, L = 80, R = 20, T = 40, B = 60;
  const auto [x0, x1] = padded_range(x);
  const auto [y0, y1] = padded_range(y);
  auto sx = [&](double v) { return L + (v - x0) / (x1 - x0) * (W - L - R); };
  auto sy = [&](double v) { return H - B - (v - y0) / (y1 - y0) * (H - T - B); };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
    << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" << xml_escape(title)
    << "</text>\n";
  s << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << W - L - R << "\" height=\"" << H - T - B
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  constexpr int ticks = 5;
  for (int i = 0; i <= ticks; ++i) {
    const double fx = x0 + (x1 - x0) * i / ticks, fy = y0 + (y1 - y0) * i / ticks;
    s << "<line x1=\"" << px(sx(fx)) << "\" y1=\"" << H - B << "\" x2=\"" << px(sx(fx)) << "\" y2=\"" << H - B + 5
      << "\" stroke=\"black\"/>";
    s << "<text x=\"" << px(sx(fx)) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">" << tick(fx)
      << "</text>\n";
    s << "<line x1=\"" << L - 5 << "\" y1=\"" << px(sy(fy)) << "\" x2=\"" << W - R << "\" y2=\"" << px(sy(fy))
      << "\" stroke=\"#dddddd\"/>";
    s << "<text x=\"" << L - 8 << "\" y=\"" << px(sy(fy) + 4) << "\" text-anchor=\"end\">" << tick(fy) << "</text>\n";
  }
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 18 << "\" text-anchor=\"middle\">" << xml_escape(x_label)
    << "</text>\n";
  s << "<text x=\"18\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
    << (T + H - B) / 2 << ")\">" << xml_escape(y_label) << "</text>\n";
  s << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"";
  for (std::size_t i = 0; i < x.size(); ++i) s << (i ? " " : "") << px(sx(x[i])) << ',' << px(sy(y[i]));
  s << "\"/>\n";
  for (std::size_t i = 0; i < x.size(); ++i)
    s << "<circle cx=\"" << px(sx(x[i])) << "\" cy=\"" << px(sy(y[i])) << "\" r=\"2.5\" fill=\"#1f77b4\"/>\n";
  s << "</svg>\n";
  return s.str();
}

void report(const RunConfig& cfg, const Layout& out, std::ostream& log) {
  struct Source {
    std::string stage, path;
  };
  const std::vector<Source> sources{{"tokenizer", out.tokenizer() + "/report.csv"},
                                    {"pretrain", out.bar() + "/report.csv"},
                                    {"finetune", out.finetune() + "/report.csv"}};
  const auto eval_csv = out.eval() + "/eval.csv";
  const bool any = fs::exists(eval_csv) || std::any_of(sources.begin(), sources.end(),
                                                        [](const Source& s) { return fs::exists(s.path); });
  if (!any) throw Error("missing upstream artifact: no report CSV under " + out.root);

  const auto dir = out.report();
  fs::remove_all(dir);
  fs::create_directories(dir);
  {
    std::ofstream c(dir + "/config.json", std::ios::trunc);
    c << to_json_value(cfg).dump(2) << '\n';
  }
  std::ostringstream summary;
  std::size_t charts = 0;
  for (const auto& src : sources) {
    if (!fs::exists(src.path)) continue;
    const auto table = read_csv(src.path);
    summary << "[" << src.stage << "] " << src.path.substr(out.root.size() + 1) << ", " << table.rows.size()
            << " rows\n";
    for (std::size_t col = 1; col < table.columns.size(); ++col) {
      std::vector<double> x, y;
      for (const auto& row : table.rows) {
        if (!row[0] || !row[col]) continue;
        x.push_back(*row[0]);
        y.push_back(*row[col]);
      }
      if (x.empty()) continue;
      const auto& name = table.columns[col];
      const auto file = src.stage + "_" + name + ".svg";
      std::ofstream svg(dir + "/" + file, std::ios::trunc);
      svg << line_chart_svg(src.stage + ": " + name, table.columns[0], name, x, y);
      if (!svg) throw Error("cannot write " + dir + "/" + file);
      ++charts;
      const auto [lo, hi] = std::minmax_element(y.begin(), y.end());
      summary << "  " << name << ": first " << num(y.front()) << " at " << num(x.front()) << ", last "
              << num(y.back()) << " at " << num(x.back()) << ", min " << num(*lo) << ", max " << num(*hi) << "  ("
              << file << ")\n";
    }
  }
  if (fs::exists(eval_csv)) {
    std::ifstream in(eval_csv);
    std::string line;
    summary << "[eval] eval/eval.csv\n";
    while (std::getline(in, line)) summary << "  " << line << '\n';
  }
  std::ofstream s(dir + "/summary.txt", std::ios::trunc);
  s << summary.str();
  if (!s) throw Error("cannot write " + dir + "/summary.txt");
  log << "report: " << charts << " charts -> " << dir << '\n';
}

}  // namespace thdbar::cli
