/*
 * Copyright 2026 The fsvlm Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>

#include "fsvlm/error.hpp"
#include "fsvlm/runner.hpp"
#include "fsvlm/svg.hpp"

namespace fsvlm {

namespace {

struct MetricLabel {
  const char* key;
  const char* title;
};

constexpr MetricLabel kClassificationMetrics[] = {
    {"accuracy", "Accuracy"}, {"macro_auc", "AUC"}, {"macro_f1", "F1"}};
constexpr MetricLabel kDiagnosticMetrics[] = {{"alignment", "Alignment"},
                                              {"similarity_gap", "Similarity gap"},
                                              {"intra_class_distance", "Intra-class distance"},
                                              {"silhouette", "Silhouette"}};

std::string format_stats(const CellStats* s) {
  if (s == nullptr || s->n == 0) return "n/a";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f±%.4f", s->mean, s->sd);
  return std::string(buf) + (s->single ? " (n=1)" : "");
}

std::string shot_header(int k) { return std::to_string(k) + "-shot"; }

std::string strategy_for(const std::string& strategy, int shots) { return shots == 0 ? kZeroShot : strategy; }

std::vector<std::size_t> cell_records(const std::vector<RunRecord>& records, const std::string& backbone,
                                      const std::string& strategy, int shots) {
  std::vector<std::size_t> idx;
  const std::string s = strategy_for(strategy, shots);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.ok() && r.backbone == backbone && r.strategy == s && r.shots == shots) idx.push_back(i);
  }
  return idx;
}

void write_tables(const std::filesystem::path& dir, const std::string& stem, const ResultTable& table,
                  std::span<const MetricLabel> metrics, const ReportOptions& o, std::vector<std::filesystem::path>& files) {
  std::string tsv = "# config " + o.fingerprint + "\n";
  tsv += "metric\tbackbone\tstrategy";
  for (int k : o.shots) tsv += "\t" + shot_header(k);
  tsv += "\n";
  std::string md;
  for (const auto& m : metrics) {
    md += "### " + std::string(m.title) + " (mean±SD)\n\n| Backbone | Strategy |";
    for (int k : o.shots) md += " " + shot_header(k) + " |";
    md += "\n|---|---|";
    for (std::size_t i = 0; i < o.shots.size(); ++i) md += "---|";
    md += "\n";
    for (const auto& b : o.backbones) {
      for (const auto& s : o.strategies) {
        tsv += std::string(m.key) + "\t" + b + "\t" + s;
        md += "| " + b + " | " + s + " |";
        for (int k : o.shots) {
          const std::string cell = format_stats(table.find(b, s, k, m.key));
          tsv += "\t" + cell;
          md += " " + cell + " |";
        }
        tsv += "\n";
        md += "\n";
      }
    }
    md += "\n";
  }
  md += "config fingerprint: `" + o.fingerprint + "`\n";
  write_text(dir / (stem + ".tsv"), tsv);
  write_text(dir / (stem + ".md"), md);
  files.push_back(dir / (stem + ".tsv"));
  files.push_back(dir / (stem + ".md"));
}

struct Axes {
  double x, y, w, h;
  double lo, hi;
  int categories;

  double cx(double i) const { return x + (i + 0.5) / categories * w; }
  double fy(double v) const { return y + h - (v - lo) / (hi - lo) * h; }
};

void draw_axes(svg::Document& doc, const Axes& a, const std::vector<std::string>& xlabels, const std::string& title) {
  doc.rect(a.x, a.y, a.w, a.h, "white", "#999999");
  for (int t = 0; t <= 4; ++t) {
    const double v = a.lo + (a.hi - a.lo) * t / 4.0;
    doc.line(a.x - 3, a.fy(v), a.x, a.fy(v), "#999999");
    doc.text(a.x - 5, a.fy(v) + 3, svg::num(v, 2), 9, "end");
  }
  for (std::size_t i = 0; i < xlabels.size(); ++i) {
    doc.text(a.cx(static_cast<double>(i)), a.y + a.h + 13, xlabels[i], 9, "middle");
  }
  doc.text(a.x + a.w / 2, a.y - 6, title, 11, "middle");
}

void stamp(svg::Document& doc, const ReportOptions& o, double height, const std::string& what) {
  doc.metadata(Json{{"figure", what}, {"fingerprint", o.fingerprint}}.dump());
  doc.text(8, height - 6, "config " + o.fingerprint.substr(0, 16), 9);
}

double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

std::string safe(const std::string& s) {
  std::string out;
  for (char c : s) out += std::isalnum(static_cast<unsigned char>(c)) || c == '-' ? c : '_';
  return out;
}

void roc_figures(const std::filesystem::path& dir, const std::vector<RunRecord>& records, const ReportOptions& o,
                 std::vector<std::filesystem::path>& files) {
  std::string tsv = "# config " + o.fingerprint + "\nbackbone\tstrategy\tshots\trun_id\tclass\tfpr\ttpr\n";
  const double panel = 150, gap = 40, top = 40;
  for (const auto& b : o.backbones) {
    for (const auto& s : o.strategies) {
      const double width = gap + o.shots.size() * (panel + gap) + 160;
      const double height = top + panel + 60;
      svg::Document doc(width, height);
      doc.text(gap, 18, b + " / " + s + ": ROC of the best-AUC run per shot level", 13);
      for (std::size_t c = 0; c < o.class_names.size(); ++c) {
        doc.rect(width - 150, top + 14 * c, 10, 10, svg::palette(c));
        doc.text(width - 136, top + 9 + 14 * c, o.class_names[c], 9);
      }
      for (std::size_t k = 0; k < o.shots.size(); ++k) {
        const double px = gap + k * (panel + gap);
        Axes ax{px, top, panel, panel, 0, 1, 1};
        doc.rect(px, top, panel, panel, "white", "#999999");
        doc.line(px, top + panel, px + panel, top, "#dddddd");
        doc.text(px + panel / 2, top - 6, shot_header(o.shots[k]), 11, "middle");
        doc.text(px + panel / 2, top + panel + 14, "FPR", 9, "middle");
        const auto best = best_auc_record(records, cell_records(records, b, s, o.shots[k]));
        if (!best) continue;
        const auto& rec = records[*best];
        for (std::size_t c = 0; c < rec.eval.roc.size(); ++c) {
          std::vector<std::pair<double, double>> pts;
          for (const auto& p : rec.eval.roc[c]) {
            pts.emplace_back(px + p.fpr * panel, ax.fy(p.tpr));
            tsv += b + "\t" + s + "\t" + std::to_string(rec.shots) + "\t" + std::to_string(rec.run_id) + "\t" +
                   rec.eval.class_names[c] + "\t" + Json(p.fpr).dump() + "\t" + Json(p.tpr).dump() + "\n";
          }
          if (!pts.empty()) doc.polyline(pts, svg::palette(c), 1.2);
        }
        doc.text(px + panel - 4, top + panel - 6, "AUC " + svg::num(rec.eval.macro_auc, 3), 9, "end");
      }
      stamp(doc, o, height, "roc-grid");
      const auto path = dir / ("roc_" + safe(b) + "_" + safe(s) + ".svg");
      write_text(path, doc.str());
      files.push_back(path);
    }
  }
  write_text(dir / "roc_curves.tsv", tsv);
  files.push_back(dir / "roc_curves.tsv");
}

void boxplot_figures(const std::filesystem::path& dir, const std::vector<RunRecord>& records,
                     const ReportOptions& o, std::vector<std::filesystem::path>& files) {
  std::string tsv = "# config " + o.fingerprint + "\nbackbone\tstrategy\tshots\trun_id\tclass\tauc\n";
  std::vector<std::string> xlabels;
  for (int k : o.shots) xlabels.push_back(std::to_string(k));
  const double panel_w = 40.0 * o.shots.size() + 20, panel_h = 180, gap = 50, top = 50;
  for (const auto& b : o.backbones) {
    for (const auto& s : o.strategies) {
      const double width = gap + o.class_names.size() * (panel_w + gap);
      const double height = top + panel_h + 50;
      svg::Document doc(width, height);
      doc.text(gap, 18, b + " / " + s + ": per-class AUC across runs (x: shots)", 13);
      for (std::size_t c = 0; c < o.class_names.size(); ++c) {
        Axes ax{gap + c * (panel_w + gap), top, panel_w, panel_h, 0, 1, static_cast<int>(o.shots.size())};
        draw_axes(doc, ax, xlabels, o.class_names[c]);
        for (std::size_t k = 0; k < o.shots.size(); ++k) {
          std::vector<double> v;
          for (auto i : cell_records(records, b, s, o.shots[k])) {
            const auto& rec = records[i];
            if (c < rec.eval.per_class_auc.size() && rec.eval.per_class_auc[c]) {
              v.push_back(*rec.eval.per_class_auc[c]);
              tsv += b + "\t" + s + "\t" + std::to_string(rec.shots) + "\t" + std::to_string(rec.run_id) + "\t" +
                     o.class_names[c] + "\t" + Json(*rec.eval.per_class_auc[c]).dump() + "\n";
            }
          }
          if (v.empty()) continue;
          const double q1 = quantile(v, 0.25), q2 = quantile(v, 0.5), q3 = quantile(v, 0.75);
          const double iqr = q3 - q1;
          double wlo = q1, whi = q3;
          for (double x : v) {
            if (x >= q1 - 1.5 * iqr) wlo = std::min(wlo, x);
            if (x <= q3 + 1.5 * iqr) whi = std::max(whi, x);
          }
          const double cx = ax.cx(static_cast<double>(k)), bw = 12;
          const auto& color = svg::palette(c);
          doc.line(cx, ax.fy(wlo), cx, ax.fy(q1), "#555555");
          doc.line(cx, ax.fy(q3), cx, ax.fy(whi), "#555555");
          doc.rect(cx - bw / 2, ax.fy(q3), bw, std::max(ax.fy(q1) - ax.fy(q3), 0.5), color, "#333333");
          doc.line(cx - bw / 2, ax.fy(q2), cx + bw / 2, ax.fy(q2), "black", 1.5);
          for (double x : v) {
            if (x < wlo || x > whi) doc.circle(cx, ax.fy(x), 1.8, "#333333");
          }
        }
      }
      stamp(doc, o, height, "per-class-auc-boxplot");
      const auto path = dir / ("boxplot_" + safe(b) + "_" + safe(s) + ".svg");
      write_text(path, doc.str());
      files.push_back(path);
    }
  }
  write_text(dir / "per_class_auc.tsv", tsv);
  files.push_back(dir / "per_class_auc.tsv");
}

void curve_figures(const std::filesystem::path& dir, const ResultTable& table, const ReportOptions& o,
                   std::vector<std::filesystem::path>& files) {
  std::string tsv = "# config " + o.fingerprint + "\nbackbone\tstrategy\tmetric\tshots\tmean\tsd\tn\n";
  std::vector<std::string> xlabels;
  for (int k : o.shots) xlabels.push_back(std::to_string(k));
  const MetricLabel curves[] = {{"alignment", "Alignment"}, {"similarity_gap", "Similarity gap"}};
  for (const auto& b : o.backbones) {
    const double panel_w = 60.0 * o.shots.size(), panel_h = 200, gap = 60, top = 50;
    const double width = gap + 2 * (panel_w + gap) + 120, height = top + panel_h + 50;
    svg::Document doc(width, height);
    doc.text(gap, 18, b + ": cross-modal alignment and similarity gap vs shots (mean±SD)", 13);
    for (int m = 0; m < 2; ++m) {
      double lo = 0, hi = 0;
      bool any = false;
      for (const auto& s : o.strategies) {
        for (int k : o.shots) {
          if (const auto* st = table.find(b, s, k, curves[m].key)) {
            lo = any ? std::min(lo, st->mean - st->sd) : st->mean - st->sd;
            hi = any ? std::max(hi, st->mean + st->sd) : st->mean + st->sd;
            any = true;
          }
        }
      }
      if (!any) continue;
      const double pad = std::max(0.05 * (hi - lo), 1e-3);
      Axes ax{gap + m * (panel_w + gap), top, panel_w, panel_h, lo - pad, hi + pad, static_cast<int>(o.shots.size())};
      draw_axes(doc, ax, xlabels, curves[m].title);
      for (std::size_t si = 0; si < o.strategies.size(); ++si) {
        const auto& s = o.strategies[si];
        std::vector<std::pair<double, double>> pts;
        for (std::size_t k = 0; k < o.shots.size(); ++k) {
          const auto* st = table.find(b, s, o.shots[k], curves[m].key);
          if (st == nullptr) continue;
          const double cx = ax.cx(static_cast<double>(k));
          pts.emplace_back(cx, ax.fy(st->mean));
          doc.line(cx, ax.fy(st->mean - st->sd), cx, ax.fy(st->mean + st->sd), svg::palette(si), 1);
          char buf[160];
          std::snprintf(buf, sizeof buf, "%s\t%s\t%s\t%d\t%.6f\t%.6f\t%d\n", b.c_str(), s.c_str(), curves[m].key,
                        o.shots[k], st->mean, st->sd, st->n);
          tsv += buf;
        }
        doc.polyline(pts, svg::palette(si), 1.8);
      }
    }
    for (std::size_t si = 0; si < o.strategies.size(); ++si) {
      doc.rect(width - 110, top + 16 * si, 10, 10, svg::palette(si));
      doc.text(width - 96, top + 9 + 16 * si, o.strategies[si], 10);
    }
    stamp(doc, o, height, "alignment-gap-curves");
    const auto path = dir / ("curves_" + safe(b) + ".svg");
    write_text(path, doc.str());
    files.push_back(path);
  }
  write_text(dir / "curves.tsv", tsv);
  files.push_back(dir / "curves.tsv");
}

void projection_figures(const std::filesystem::path& dir, const std::vector<RunRecord>& records,
                        const ReportOptions& o, std::vector<std::filesystem::path>& files,
                        std::vector<std::string>& warnings) {
  std::string tsv = "# config " + o.fingerprint + "\nbackbone\tstrategy\tshots\trun_id\tmacro_auc\tartifacts\n";
  const double panel = 170, gap = 24, left = 90, top = 50;
  for (const auto& b : o.backbones) {
    const double width = left + o.shots.size() * (panel + gap) + 200;
    const double height = top + o.strategies.size() * (panel + gap) + 30;
    svg::Document doc(width, height);
    doc.text(left, 18, b + ": projection with per-class KDE, best-AUC run per cell (diamonds: prompts)", 13);
    for (std::size_t c = 0; c < o.class_names.size(); ++c) {
      doc.rect(width - 190, top + 14 * c, 10, 10, svg::palette(c));
      doc.text(width - 176, top + 9 + 14 * c, o.class_names[c], 9);
    }
    for (std::size_t si = 0; si < o.strategies.size(); ++si) {
      const auto& s = o.strategies[si];
      const double py = top + si * (panel + gap);
      doc.text(left - 8, py + panel / 2, s, 11, "end");
      for (std::size_t k = 0; k < o.shots.size(); ++k) {
        const double px = left + k * (panel + gap);
        if (si == 0) doc.text(px + panel / 2, top - 6, shot_header(o.shots[k]), 11, "middle");
        const auto best = best_auc_record(records, cell_records(records, b, s, o.shots[k]));
        if (!best) continue;
        const auto& rec = records[*best];
        const auto diag_path = o.output_root / rec.artifacts / "diagnostics.json";
        if (!std::filesystem::exists(diag_path)) {
          warnings.push_back("missing " + diag_path.string() + "; projection panel left empty");
          continue;
        }
        const DiagnosticsReport d = DiagnosticsReport::from_json(read_json(diag_path));
        tsv += b + "\t" + s + "\t" + std::to_string(rec.shots) + "\t" + std::to_string(rec.run_id) + "\t" +
               Json(rec.eval.macro_auc).dump() + "\t" + rec.artifacts + "\n";
        const bool show_text = s != strategy_name(Strategy::kClassifier);
        for (auto& w : draw_density_panel(doc, {px, py, panel, panel}, d.projection, d.labels, d.modality,
                                          o.class_names, show_text, 48)) {
          warnings.push_back(b + "/" + s + "/" + std::to_string(o.shots[k]) + ": " + w);
        }
      }
    }
    stamp(doc, o, height, "projection-kde");
    const auto path = dir / ("projection_" + safe(b) + ".svg");
    write_text(path, doc.str());
    files.push_back(path);
  }
  write_text(dir / "best_runs.tsv", tsv);
  files.push_back(dir / "best_runs.tsv");
}

}  // namespace

ReportSummary render_report(const ResultTable& table, const std::vector<RunRecord>& records,
                            const ReportOptions& o) {
  if (std::none_of(records.begin(), records.end(), [](const RunRecord& r) { return r.ok(); })) {
    throw InsufficientDataError("no successful run records to report");
  }
  if (o.report_dir.empty()) throw ConfigError("report directory not set");
  if (o.shots.empty() || o.strategies.empty() || o.backbones.empty()) throw ConfigError("report layout is empty");

  auto staging = o.report_dir;
  staging += ".staging";
  std::filesystem::remove_all(staging);
  std::filesystem::create_directories(staging);
  ReportSummary summary;
  try {
    write_tables(staging, "table1", table, kClassificationMetrics, o, summary.files);
    write_tables(staging, "table2", table, kDiagnosticMetrics, o, summary.files);
    roc_figures(staging, records, o, summary.files);
    boxplot_figures(staging, records, o, summary.files);
    curve_figures(staging, table, o, summary.files);
    projection_figures(staging, records, o, summary.files, summary.warnings);
    std::string failures;
    for (const auto& r : records) {
      if (!r.ok()) failures += r.key() + "\t" + r.error + "\n";
    }
    if (!failures.empty()) {
      write_text(staging / "failed_runs.tsv", failures);
      summary.files.push_back(staging / "failed_runs.tsv");
    }
  } catch (...) {
    std::filesystem::remove_all(staging);
    throw;
  }
  std::filesystem::remove_all(o.report_dir);
  std::filesystem::rename(staging, o.report_dir);
  for (auto& f : summary.files) f = o.report_dir / f.filename();
  return summary;
}

}  // namespace fsvlm
