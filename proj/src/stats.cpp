#include "adapterlab/stats.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "adapterlab/adapter.hpp"
#include "adapterlab/errors.hpp"
#include "adapterlab/svg.hpp"

namespace adapterlab {

namespace {

/// Continued fraction for I_x(a, b), modified Lentz (Numerical Recipes betacf).
double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 10000;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  throw NumericError("incomplete beta continued fraction did not converge");
}

std::string format_number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::string scale_level(double s) {
  std::ostringstream os;
  os << std::setprecision(15) << s;
  return os.str();
}

}  // namespace

std::string_view to_string(Factor f) {
  switch (f) {
    case Factor::input_pos: return "input_pos";
    case Factor::output_class: return "output_class";
    case Factor::activation: return "activation";
    case Factor::scale: return "scale";
  }
  return "?";
}

AnovaResult one_way_anova(const std::vector<std::vector<double>>& groups) {
  AnovaResult r;
  r.k = groups.size();
  if (r.k < 2) throw GroupingError("ANOVA needs at least two groups, got " + std::to_string(r.k));
  double total = 0.0;
  for (const auto& g : groups) {
    if (g.empty()) throw GroupingError("ANOVA group is empty");
    for (double v : g) {
      if (!std::isfinite(v)) throw GroupingError("ANOVA observation is not finite");
      total += v;
    }
    r.n += g.size();
  }
  if (r.n <= r.k) {
    throw GroupingError("ANOVA needs more observations (" + std::to_string(r.n) + ") than groups (" +
                        std::to_string(r.k) + ")");
  }
  const double grand = total / static_cast<double>(r.n);
  for (const auto& g : groups) {
    double m = 0.0;
    for (double v : g) m += v;
    m /= static_cast<double>(g.size());
    r.ssb += static_cast<double>(g.size()) * (m - grand) * (m - grand);
    for (double v : g) r.sse += (v - m) * (v - m);
  }
  r.df_between = r.k - 1;
  r.df_within = r.n - r.k;
  r.msb = r.ssb / static_cast<double>(r.df_between);
  r.mse = r.sse / static_cast<double>(r.df_within);
  if (r.sse == 0.0) {
    r.f_infinite = r.ssb > 0.0;
    r.f = r.f_infinite ? std::numeric_limits<double>::infinity() : 0.0;
    r.p = r.f_infinite ? 0.0 : 1.0;
  } else {
    r.f = r.msb / r.mse;
    r.p = f_p_value(r.f, static_cast<double>(r.df_between), static_cast<double>(r.df_within));
  }
  return r;
}

AnovaResult one_way_anova(const Grouping& grouping) {
  std::vector<std::vector<double>> g;
  for (const auto& [level, values] : grouping.groups) g.push_back(values);
  return one_way_anova(g);
}

double incomplete_beta(double x, double a, double b) {
  if (!(a > 0.0 && b > 0.0)) throw ConfigError("incomplete beta needs a, b > 0");
  if (!(x >= 0.0 && x <= 1.0)) throw ConfigError("incomplete beta needs x in [0, 1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                           b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double f_p_value(double f, double df1, double df2) {
  if (!(df1 >= 1.0 && df2 >= 1.0) || !std::isfinite(df1) || !std::isfinite(df2)) {
    throw ConfigError("F distribution degrees of freedom must be finite and >= 1");
  }
  if (std::isnan(f) || f < 0.0) throw ConfigError("F statistic must be >= 0");
  if (f == 0.0) return 1.0;
  if (std::isinf(f)) return 0.0;
  const double x = df2 / (df2 + df1 * f);
  return std::clamp(incomplete_beta(x, df2 / 2.0, df1 / 2.0), 0.0, 1.0);
}

Grouping group_records(const std::vector<RunRecord>& records, Factor factor,
                       const std::string& metric) {
  Grouping g;
  g.factor = factor;
  for (const auto& r : records) {
    if (r.failed || r.is_full_finetune()) continue;
    const auto it = r.summary.find(metric);
    if (it == r.summary.end()) {
      throw DataError("record " + r.key() + " has no metric '" + metric + "'");
    }
    const DesignPoint d = DesignPoint::parse(r.design);
    std::string level;
    switch (factor) {
      case Factor::input_pos: level = std::string(to_string(d.input)); break;
      case Factor::output_class: level = std::string(to_string(d.output)); break;
      case Factor::activation: level = std::string(to_string(d.act)); break;
      case Factor::scale: level = scale_level(d.scale); break;
    }
    g.groups[level].push_back(it->second);
  }
  return g;
}

std::vector<AnovaRow> anova_report(const std::vector<RunRecord>& records, const std::string& metric) {
  std::vector<AnovaRow> rows;
  for (Factor f : kAllFactors) {
    AnovaRow row;
    row.factor = f;
    const Grouping g = group_records(records, f, metric);
    if (g.groups.size() < 2) {
      row.note = "not analyzable: " + std::to_string(g.groups.size()) + " level(s)";
    } else {
      try {
        row.result = one_way_anova(g);
        row.analyzable = true;
      } catch (const GroupingError& e) {
        row.note = std::string("not analyzable: ") + e.what();
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_anova_csv(std::ostream& out, const std::vector<AnovaRow>& rows) {
  out << "factor,k,N,SSB,SSE,F,p\n";
  for (const auto& row : rows) {
    out << to_string(row.factor) << ',';
    if (!row.analyzable) {
      out << ",,,,,\n";
      continue;
    }
    const auto& r = row.result;
    out << r.k << ',' << r.n << ',' << format_number(r.ssb) << ',' << format_number(r.sse) << ','
        << format_number(r.f) << ',' << (r.p ? format_number(*r.p) : "") << '\n';
  }
}

std::string anova_svg(const std::vector<AnovaRow>& rows, const std::string& title) {
  const double w = 520, h = 340, left = 60, right = 20, top = 40, bottom = 60;
  const double plot_w = w - left - right, plot_h = h - top - bottom;
  double cap = 1.0;
  for (const auto& r : rows) {
    if (r.analyzable && !r.result.f_infinite) cap = std::max(cap, r.result.f);
  }
  cap *= 1.15;
  Svg svg(w, h);
  svg.text(w / 2, 22, title, 14, "middle");
  svg.line(left, top, left, top + plot_h);
  svg.line(left, top + plot_h, left + plot_w, top + plot_h);
  for (int i = 0; i <= 4; ++i) {
    const double v = cap * i / 4.0, y = top + plot_h - plot_h * i / 4.0;
    svg.line(left - 4, y, left, y);
    std::ostringstream os;
    os << std::setprecision(3) << v;
    svg.text(left - 6, y + 4, os.str(), 10, "end");
  }
  const double one = top + plot_h - plot_h / cap;
  svg.line(left, one, left + plot_w, one, "#c33", 0.8);
  svg.text(left + plot_w, one - 3, "F = 1", 9, "end");
  const double slot = plot_w / static_cast<double>(std::max<std::size_t>(rows.size(), 1));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const double x = left + slot * (static_cast<double>(i) + 0.2);
    svg.text(x + slot * 0.3, top + plot_h + 18, to_string(r.factor), 11, "middle");
    if (!r.analyzable) {
      svg.text(x + slot * 0.3, top + plot_h - 6, "n/a", 10, "middle");
      continue;
    }
    const double f = r.result.f_infinite ? cap : r.result.f;
    const double bh = plot_h * f / cap;
    svg.rect(x, top + plot_h - bh, slot * 0.6, bh, "#3b6ea5");
    std::ostringstream os;
    if (r.result.f_infinite) {
      os << "inf";
    } else {
      os << std::setprecision(3) << r.result.f;
    }
    svg.text(x + slot * 0.3, top + plot_h - bh - 4, os.str(), 10, "middle");
  }
  svg.text(16, top + plot_h / 2, "F statistic", 11, "middle", -90);
  return svg.str();
}

}  // namespace adapterlab
