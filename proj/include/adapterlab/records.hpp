#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace adapterlab {

/// Design string of the full fine-tune comparison arm.
inline constexpr const char* kFullFinetune = "full";

/// One trained (design point, seed) job. Metric series are indexed like
/// `checkpoints`; `summary` holds the window aggregates used for analysis.
struct RunRecord {
  std::string design;
  std::uint64_t seed = 0;
  std::string task;
  std::size_t steps = 0;
  std::vector<std::size_t> checkpoints;
  std::map<std::string, std::vector<double>> metrics;
  std::map<std::string, double> summary;
  std::vector<double> losses;  // mean training loss per checkpoint interval
  std::size_t backbone_params = 0;
  std::size_t trainable_params = 0;
  double fraction = 0.0;
  std::size_t rank = 0;
  double wall_time = 0.0;  // seconds; not part of content comparisons
  bool failed = false;
  std::string error;

  /// "<design>#<seed>"; the resume key.
  std::string key() const;
  bool is_full_finetune() const { return design == kFullFinetune; }

  nlohmann::json to_json() const;
  /// Throws DataError on missing fields or a design string that does not parse.
  static RunRecord from_json(const nlohmann::json& j);

  /// Equality of everything except wall time.
  bool same_content(const RunRecord& other) const;
};

/// One JSON object per line. Malformed lines (e.g. a torn final write) are
/// skipped and counted in `skipped` when given.
std::vector<RunRecord> read_records(const std::string& path, std::size_t* skipped = nullptr);

}  // namespace adapterlab
