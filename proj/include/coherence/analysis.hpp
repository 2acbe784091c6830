// Copyright 2026 The Coherence Toolkit Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Post-processing of training logs and evaluation results: dev-accuracy
// stability statistics, curves over steps or hyperparameter values, and
// CSV / SVG output.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "coherence/common.hpp"
#include "coherence/io.hpp"
#include "coherence/trainer.hpp"

namespace coherence {

struct CurveSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  std::vector<double> band;  // std over seeds; 0 with a single run
  std::vector<std::size_t> runs;
  std::vector<bool> incomplete;

  std::size_t size() const { return x.size(); }
  bool operator==(const CurveSeries&) const = default;
};

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Sample standard deviation (n - 1); 0 for fewer than two values.
inline double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

// ---------------------------------------------------------------------------
// Stability

struct StabilityStats {
  std::string label;
  std::size_t runs = 0;
  double mean_accuracy = 0.0;  // over all post-warm-up evaluations of all runs
  double mean_std = 0.0;       // average over runs of the per-run std
  std::vector<double> run_std;
};

// Evaluations with step > warmup_steps.
inline std::vector<double> post_warmup_accuracies(const TrainLog& log, std::size_t warmup_steps) {
  std::vector<double> out;
  for (const auto& e : log.evals)
    if (e.step > warmup_steps) out.push_back(e.dev_accuracy);
  return out;
}

inline double stability_std(const std::vector<double>& series) {
  if (series.size() < 3)
    throw DataError("stability needs >= 3 post-warm-up evaluations, got " +
                    std::to_string(series.size()));
  return sample_std(series);
}

// Logs are grouped by `labels[i]` (typically the regime name, or the regime
// plus an ablation tag). Every log needs >= 3 post-warm-up evaluations.
inline std::vector<StabilityStats> stability_stats(const std::vector<TrainLog>& logs,
                                                   const std::vector<std::string>& labels,
                                                   std::size_t warmup_steps) {
  if (logs.size() != labels.size()) throw std::invalid_argument("one label per log required");
  std::vector<StabilityStats> out;
  std::map<std::string, std::size_t> index;
  std::map<std::string, std::vector<double>> pooled;
  for (std::size_t i = 0; i < logs.size(); ++i) {
    const auto series = post_warmup_accuracies(logs[i], warmup_steps);
    const double s = stability_std(series);
    auto [it, fresh] = index.try_emplace(labels[i], out.size());
    if (fresh) out.push_back({labels[i], 0, 0.0, 0.0, {}});
    auto& st = out[it->second];
    st.runs += 1;
    st.run_std.push_back(s);
    pooled[labels[i]].insert(pooled[labels[i]].end(), series.begin(), series.end());
  }
  for (auto& st : out) {
    st.mean_std = mean_of(st.run_std);
    st.mean_accuracy = mean_of(pooled[st.label]);
  }
  return out;
}

inline std::vector<StabilityStats> stability_stats(const std::vector<TrainLog>& logs,
                                                   std::size_t warmup_steps) {
  std::vector<std::string> labels;
  for (const auto& l : logs) labels.push_back(l.regime);
  return stability_stats(logs, labels, warmup_steps);
}

// Dev accuracy against step, averaged over runs sharing a label.
inline std::vector<CurveSeries> stability_curves(const std::vector<TrainLog>& logs,
                                                 const std::vector<std::string>& labels) {
  std::map<std::string, std::map<std::size_t, std::vector<double>>> by_label;
  std::map<std::string, std::size_t> run_count;
  std::vector<std::string> order;
  for (std::size_t i = 0; i < logs.size(); ++i) {
    if (!run_count.contains(labels[i])) order.push_back(labels[i]);
    ++run_count[labels[i]];
    for (const auto& e : logs[i].evals) by_label[labels[i]][e.step].push_back(e.dev_accuracy);
  }
  std::vector<CurveSeries> out;
  for (const auto& label : order) {
    CurveSeries s;
    s.label = label;
    for (const auto& [step, ys] : by_label[label]) {
      s.x.push_back(static_cast<double>(step));
      s.y.push_back(mean_of(ys));
      s.band.push_back(sample_std(ys));
      s.runs.push_back(ys.size());
      s.incomplete.push_back(ys.size() < run_count[label]);
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Hyperparameter sweeps

struct SweepPoint {
  std::string parameter;  // e.g. "h"
  double value = 0.0;
  std::string test_set;
  std::uint64_t seed = 0;
  std::optional<double> metric;  // missing when the run failed or is absent
};

// One series per (parameter, test set); points average over seeds. A point is
// incomplete when it has fewer than `expected_seeds` finished runs.
inline std::vector<CurveSeries> sweep_series(const std::vector<SweepPoint>& points,
                                             std::size_t expected_seeds) {
  std::map<std::pair<std::string, std::string>, std::map<double, std::vector<double>>> grid;
  std::map<std::pair<std::string, std::string>, std::map<double, std::size_t>> seen;
  for (const auto& p : points) {
    auto key = std::make_pair(p.parameter, p.test_set);
    auto& ys = grid[key][p.value];
    ++seen[key][p.value];
    if (p.metric) ys.push_back(*p.metric);
  }
  std::vector<CurveSeries> out;
  for (const auto& [key, xs] : grid) {
    CurveSeries s;
    s.label = key.first + "/" + key.second;
    for (const auto& [x, ys] : xs) {
      s.x.push_back(x);
      s.y.push_back(ys.empty() ? std::numeric_limits<double>::quiet_NaN() : mean_of(ys));
      s.band.push_back(sample_std(ys));
      s.runs.push_back(ys.size());
      s.incomplete.push_back(ys.size() < expected_seeds);
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw DataError("bad number in curve file: " + s);
  return v;
}

inline void write_curves_csv(const std::vector<CurveSeries>& series, std::ostream& out) {
  out << "label,x,y,std,runs,incomplete\n";
  for (const auto& s : series) {
    if (s.label.find(',') != std::string::npos)
      throw std::invalid_argument("series label must not contain ','");
    for (std::size_t i = 0; i < s.size(); ++i)
      out << s.label << ',' << format_double(s.x[i]) << ',' << format_double(s.y[i]) << ','
          << format_double(s.band[i]) << ',' << s.runs[i] << ',' << (s.incomplete[i] ? 1 : 0)
          << '\n';
  }
}

inline std::vector<CurveSeries> read_curves_csv(std::istream& in) {
  std::vector<CurveSeries> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    if (++lineno == 1 || line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 6) throw DataError("curve file line " + std::to_string(lineno) + ": expected 6 fields");
    if (out.empty() || out.back().label != f[0]) out.push_back(CurveSeries{f[0], {}, {}, {}, {}, {}});
    auto& s = out.back();
    s.x.push_back(parse_double(f[1]));
    s.y.push_back(parse_double(f[2]));
    s.band.push_back(parse_double(f[3]));
    s.runs.push_back(std::stoul(f[4]));
    s.incomplete.push_back(f[5] == "1");
  }
  return out;
}

// ---------------------------------------------------------------------------
// SVG

struct PlotOptions {
  std::string title;
  std::string x_label = "x";
  std::string y_label = "accuracy";
  int width = 640;
  int height = 400;
};

inline std::string render_svg(const std::vector<CurveSeries>& series, const PlotOptions& opt) {
  static constexpr std::array<const char*, 6> kColors = {"#1f77b4", "#d62728", "#2ca02c",
                                                         "#ff7f0e", "#9467bd", "#8c564b"};
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (std::isnan(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i] - s.band[i]);
      y1 = std::max(y1, s.y[i] + s.band[i]);
    }
  if (!(x1 > x0)) x1 = x0 + 1.0;
  if (!(y1 > y0)) y1 = y0 + 1e-3;
  const double ml = 60, mr = 140, mt = 30, mb = 45;
  const double pw = opt.width - ml - mr, ph = opt.height - mt - mb;
  auto px = [&](double x) { return ml + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return mt + (1.0 - (y - y0) / (y1 - y0)) * ph; };
  auto f = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << opt.width << "\" height=\""
    << opt.height << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << ml << "\" y=\"18\" font-size=\"13\">" << opt.title << "</text>\n";
  o << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw << "\" y2=\""
    << mt + ph << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << mt + ph
    << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double xv = x0 + (x1 - x0) * t / 4.0, yv = y0 + (y1 - y0) * t / 4.0;
    o << "<text x=\"" << f(px(xv)) << "\" y=\"" << mt + ph + 15
      << "\" text-anchor=\"middle\">" << f(xv) << "</text>\n";
    o << "<text x=\"" << ml - 5 << "\" y=\"" << f(py(yv) + 4) << "\" text-anchor=\"end\">"
      << f(yv) << "</text>\n";
  }
  o << "<text x=\"" << ml + pw / 2 << "\" y=\"" << opt.height - 8
    << "\" text-anchor=\"middle\">" << opt.x_label << "</text>\n";
  o << "<text x=\"14\" y=\"" << mt + ph / 2 << "\" transform=\"rotate(-90 14 " << mt + ph / 2
    << ")\" text-anchor=\"middle\">" << opt.y_label << "</text>\n";

  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = kColors[k % kColors.size()];
    std::string upper, lower, line;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (std::isnan(s.y[i])) continue;
      line += f(px(s.x[i])) + "," + f(py(s.y[i])) + " ";
      upper += f(px(s.x[i])) + "," + f(py(s.y[i] + s.band[i])) + " ";
    }
    for (std::size_t i = s.size(); i-- > 0;) {
      if (std::isnan(s.y[i])) continue;
      lower += f(px(s.x[i])) + "," + f(py(s.y[i] - s.band[i])) + " ";
    }
    o << "<polygon points=\"" << upper << lower << "\" fill=\"" << color
      << "\" fill-opacity=\"0.15\" stroke=\"none\"/>\n";
    o << "<polyline points=\"" << line << "\" fill=\"none\" stroke=\"" << color
      << "\" stroke-width=\"1.5\"/>\n";
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (std::isnan(s.y[i])) continue;
      o << "<circle cx=\"" << f(px(s.x[i])) << "\" cy=\"" << f(py(s.y[i])) << "\" r=\"2.5\" fill=\""
        << (s.incomplete[i] ? "white" : color) << "\" stroke=\"" << color << "\"/>\n";
    }
    const double ly = mt + 15.0 * static_cast<double>(k);
    o << "<line x1=\"" << ml + pw + 10 << "\" y1=\"" << ly << "\" x2=\"" << ml + pw + 30
      << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << ml + pw + 35 << "\" y=\"" << ly + 4 << "\">" << s.label << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

// Writes <stem>.csv, and <stem>.svg when any series has at least two points.
// Returns the paths written.
inline std::vector<std::string> write_curves(const std::vector<CurveSeries>& series,
                                             const fs::path& stem, const PlotOptions& opt) {
  std::vector<std::string> written;
  const fs::path csv = stem.string() + ".csv";
  write_file_atomically(csv, [&](std::ostream& out) { write_curves_csv(series, out); });
  written.push_back(csv.string());
  const bool plottable = std::any_of(series.begin(), series.end(),
                                     [](const CurveSeries& s) { return s.size() >= 2; });
  if (plottable) {
    const fs::path svg = stem.string() + ".svg";
    write_file_atomically(svg, [&](std::ostream& out) { out << render_svg(series, opt); });
    written.push_back(svg.string());
  } else {
    warn("single grid point: wrote " + csv.string() + " without a plot");
  }
  return written;
}

// Convenience for sweeps: series plus files.
inline std::vector<CurveSeries> sweep_curves(const std::vector<SweepPoint>& points,
                                             std::size_t expected_seeds, const fs::path& stem,
                                             const PlotOptions& opt = {}) {
  auto series = sweep_series(points, expected_seeds);
  write_curves(series, stem, opt);
  return series;
}

}  // namespace coherence
