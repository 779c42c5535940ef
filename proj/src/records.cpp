#include "adapterlab/records.hpp"

#include <cmath>
#include <fstream>

#include "adapterlab/adapter.hpp"
#include "adapterlab/errors.hpp"

namespace adapterlab {

std::string RunRecord::key() const { return design + "#" + std::to_string(seed); }

nlohmann::json RunRecord::to_json() const {
  nlohmann::json j = {{"design", design},
                      {"seed", seed},
                      {"task", task},
                      {"steps", steps},
                      {"checkpoints", checkpoints},
                      {"metrics", metrics},
                      {"summary", summary},
                      {"losses", losses},
                      {"backbone_params", backbone_params},
                      {"trainable_params", trainable_params},
                      {"fraction", fraction},
                      {"rank", rank},
                      {"wall_time", wall_time},
                      {"failed", failed}};
  if (!error.empty()) j["error"] = error;
  return j;
}

RunRecord RunRecord::from_json(const nlohmann::json& j) {
  RunRecord r;
  try {
    r.design = j.at("design").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.task = j.at("task").get<std::string>();
    r.steps = j.at("steps").get<std::size_t>();
    r.checkpoints = j.at("checkpoints").get<std::vector<std::size_t>>();
    r.metrics = j.at("metrics").get<std::map<std::string, std::vector<double>>>();
    r.summary = j.at("summary").get<std::map<std::string, double>>();
    r.losses = j.value("losses", std::vector<double>{});
    r.backbone_params = j.at("backbone_params").get<std::size_t>();
    r.trainable_params = j.at("trainable_params").get<std::size_t>();
    r.fraction = j.at("fraction").get<double>();
    r.rank = j.value("rank", std::size_t{0});
    r.wall_time = j.value("wall_time", 0.0);
    r.failed = j.value("failed", false);
    r.error = j.value("error", std::string{});
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed run record: ") + e.what());
  }
  if (!r.is_full_finetune()) {
    try {
      DesignPoint::parse(r.design).validate();
    } catch (const std::exception& e) {
      throw DataError("run record design '" + r.design + "' is invalid: " + e.what());
    }
  }
  for (const auto& [name, v] : r.summary) {
    if (!std::isfinite(v)) throw DataError("run record metric '" + name + "' is not finite");
  }
  return r;
}

bool RunRecord::same_content(const RunRecord& o) const {
  return design == o.design && seed == o.seed && task == o.task && steps == o.steps &&
         checkpoints == o.checkpoints && metrics == o.metrics && summary == o.summary &&
         losses == o.losses && backbone_params == o.backbone_params &&
         trainable_params == o.trainable_params && fraction == o.fraction && rank == o.rank &&
         failed == o.failed && error == o.error;
}

std::vector<RunRecord> read_records(const std::string& path, std::size_t* skipped) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open records file '" + path + "'");
  std::vector<RunRecord> out;
  std::size_t bad = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(RunRecord::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error&) {
      ++bad;
    }
  }
  if (skipped) *skipped = bad;
  return out;
}

}  // namespace adapterlab
