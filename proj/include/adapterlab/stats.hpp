#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "adapterlab/records.hpp"

namespace adapterlab {

/// Groups that cannot support a one-way ANOVA.
class GroupingError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Factor { input_pos, output_class, activation, scale };
inline constexpr Factor kAllFactors[] = {Factor::input_pos, Factor::output_class,
                                         Factor::activation, Factor::scale};
std::string_view to_string(Factor f);

struct Grouping {
  Factor factor = Factor::input_pos;
  std::map<std::string, std::vector<double>> groups;  // level -> observations
};

struct AnovaResult {
  std::size_t k = 0;  // groups
  std::size_t n = 0;  // observations
  double ssb = 0.0, sse = 0.0;
  std::size_t df_between = 0, df_within = 0;
  double msb = 0.0, mse = 0.0;
  double f = 0.0;
  bool f_infinite = false;  // SSE == 0 with SSB > 0
  std::optional<double> p;
};

/// Throws GroupingError when k < 2, a group is empty, or N <= k. SSE == 0
/// yields F = +inf (flagged) when SSB > 0, and F = 0 when SSB == 0 too.
AnovaResult one_way_anova(const std::vector<std::vector<double>>& groups);
AnovaResult one_way_anova(const Grouping& grouping);

/// Regularised incomplete beta I_x(a, b) by a modified Lentz continued fraction.
double incomplete_beta(double x, double a, double b);

/// Upper tail 1 - CDF_F(F; df1, df2). F = +inf gives 0.
double f_p_value(double f, double df1, double df2);

struct AnovaRow {
  Factor factor;
  bool analyzable = false;
  std::string note;  // why not, when not
  AnovaResult result;
};

/// One row per factor, in kAllFactors order. Failed records and the
/// full fine-tune arm are ignored; a usable record without `metric` in its
/// summary raises DataError.
std::vector<AnovaRow> anova_report(const std::vector<RunRecord>& records, const std::string& metric);

/// Builds the grouping of `metric` by `factor` over adapter records.
Grouping group_records(const std::vector<RunRecord>& records, Factor factor,
                       const std::string& metric);

void write_anova_csv(std::ostream& out, const std::vector<AnovaRow>& rows);
/// Bar chart of F per factor; infinite F is drawn at the axis cap and labelled.
std::string anova_svg(const std::vector<AnovaRow>& rows, const std::string& title);

}  // namespace adapterlab
