#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "bnas/cli.hpp"
#include "bnas/runconfig.hpp"
#include "bnas/trainer.hpp"

namespace bnas::cli {

namespace {

struct Series {
  std::string name;
  std::vector<double> y;
};

constexpr const char* kColours[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

// One panel: axes, tick labels at the extremes, a polyline per series and a legend.
std::string panel(const std::vector<double>& x, const std::vector<Series>& series, double top, const std::string& label,
                  bool log_y) {
  constexpr double left = 70, width = 560, height = 200;
  auto ty = [log_y](double v) { return log_y ? std::log10(std::max(v, 1e-12)) : v; };
  double x0 = x.empty() ? 0 : x.front(), x1 = x.empty() ? 1 : x.back();
  if (x1 <= x0) x1 = x0 + 1;
  double y0 = std::numeric_limits<double>::infinity(), y1 = -y0;
  for (const auto& s : series) {
    for (double v : s.y) {
      y0 = std::min(y0, ty(v));
      y1 = std::max(y1, ty(v));
    }
  }
  if (!std::isfinite(y0)) y0 = 0, y1 = 1;
  if (y1 <= y0) y1 = y0 + 1;
  auto px = [&](double v) { return left + width * (v - x0) / (x1 - x0); };
  auto py = [&](double v) { return top + height - height * (ty(v) - y0) / (y1 - y0); };

  std::string svg;
  svg += "<rect x=\"" + num(left) + "\" y=\"" + num(top) + "\" width=\"" + num(width) + "\" height=\"" + num(height) +
         "\" fill=\"none\" stroke=\"#444\"/>\n";
  svg += "<text x=\"" + num(left) + "\" y=\"" + num(top - 6) + "\" font-size=\"12\">" + escape(label) + "</text>\n";
  const auto tick = [&](double v) { return log_y ? num(std::pow(10.0, v)) : num(v); };
  svg += "<text x=\"" + num(left - 4) + "\" y=\"" + num(top + 10) + "\" font-size=\"10\" text-anchor=\"end\">" + tick(y1) + "</text>\n";
  svg += "<text x=\"" + num(left - 4) + "\" y=\"" + num(top + height) + "\" font-size=\"10\" text-anchor=\"end\">" + tick(y0) +
         "</text>\n";
  svg += "<text x=\"" + num(left) + "\" y=\"" + num(top + height + 14) + "\" font-size=\"10\">" + num(x0) + "</text>\n";
  svg += "<text x=\"" + num(left + width) + "\" y=\"" + num(top + height + 14) + "\" font-size=\"10\" text-anchor=\"end\">" +
         num(x1) + "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const char* colour = kColours[k % std::size(kColours)];
    std::string pts;
    for (std::size_t i = 0; i < series[k].y.size() && i < x.size(); ++i) {
      pts += num(px(x[i])) + "," + num(py(series[k].y[i])) + " ";
    }
    svg += "<polyline fill=\"none\" stroke=\"" + std::string(colour) + "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
    const double ly = top + 14 + 14 * static_cast<double>(k);
    svg += "<text x=\"" + num(left + width + 10) + "\" y=\"" + num(ly) + "\" font-size=\"11\" fill=\"" + colour + "\">" +
           escape(series[k].name) + "</text>\n";
  }
  return svg;
}

std::string document(const std::string& title, double height, const std::string& body) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"" + num(height) + "\">\n" +
         "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n<text x=\"70\" y=\"22\" font-size=\"14\">" + escape(title) +
         "</text>\n" + body + "</svg>\n";
}

std::vector<std::string> split_row(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

}  // namespace

std::string csv_to_svg(const std::string& csv_text, const std::string& title) {
  std::stringstream in(csv_text);
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("plot: empty CSV " + title);
  const auto header = split_row(line);
  if (header.size() < 2) throw ConfigError("plot: CSV needs an x column and at least one series");
  std::vector<double> x;
  std::vector<Series> cols(header.size() - 1);
  for (std::size_t c = 1; c < header.size(); ++c) cols[c - 1].name = header[c];
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_row(line);
    if (cells.size() != header.size()) throw ConfigError("plot: ragged CSV row in " + title);
    try {
      x.push_back(std::stod(cells[0]));
      for (std::size_t c = 1; c < cells.size(); ++c) cols[c - 1].y.push_back(std::stod(cells[c]));
    } catch (const std::exception&) {
      throw ConfigError("plot: non-numeric cell in " + title);
    }
  }
  // Accuracy-like columns share a panel; every other column gets its own.
  std::vector<Series> fractions;
  std::vector<Series> others;
  for (auto& s : cols) (s.name.find("acc") != std::string::npos ? fractions : others).push_back(s);
  std::string body;
  double top = 50;
  if (!fractions.empty()) {
    body += panel(x, fractions, top, "accuracy vs " + header[0], false);
    top += 250;
  }
  for (const auto& s : others) {
    body += panel(x, {s}, top, s.name + " vs " + header[0], false);
    top += 250;
  }
  return document(title, top + 10, body);
}

std::string grad_log_to_svg(const GradLog& log, const std::string& title) {
  // Aggregate per top-level block: "stem", "cells.N", "classifier".
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t k = 0; k < log.names.size(); ++k) {
    const std::string& n = log.names[k];
    auto dot = n.find('.');
    if (n.rfind("cells.", 0) == 0) dot = n.find('.', 6);
    groups[n.substr(0, dot)].push_back(k);
  }
  std::vector<double> x(log.steps.size());
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<double>(i);
  std::vector<Series> series;
  Series total{"total", {}};
  for (const auto& step : log.steps) {
    double s = 0;
    for (float v : step) s += static_cast<double>(v) * v;
    total.y.push_back(std::sqrt(s));
  }
  series.push_back(total);
  for (const auto& [name, idx] : groups) {
    if (series.size() >= std::size(kColours)) break;
    Series s{name, {}};
    for (const auto& step : log.steps) {
      double acc = 0;
      for (std::size_t k : idx) acc += static_cast<double>(step[k]) * step[k];
      s.y.push_back(std::sqrt(acc));
    }
    series.push_back(std::move(s));
  }
  return document(title, 310, panel(x, series, 50, "gradient L2 norm per step (log scale)", true));
}

}  // namespace bnas::cli
