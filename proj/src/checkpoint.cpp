#include "adapterlab/checkpoint.hpp"

#include <fstream>

#include "adapterlab/errors.hpp"
#include "adapterlab/imageio.hpp"

namespace adapterlab {

void save_tensors(const std::string& dir, const std::vector<NamedTensor>& tensors,
                  const nlohmann::json& extra) {
  ensure_directory(dir);
  std::ofstream bin(dir + "/weights.bin", std::ios::binary);
  if (!bin) throw DataError("cannot write '" + dir + "/weights.bin'");
  nlohmann::json m = extra;
  m["tensors"] = nlohmann::json::array();
  for (const auto& t : tensors) {
    write_tensor(bin, t.value);
    m["tensors"].push_back({{"name", t.name}, {"shape", t.value.shape()}});
  }
  bin.close();
  if (!bin) throw DataError("failed writing '" + dir + "/weights.bin'");
  std::ofstream man(dir + "/manifest.json");
  man << m.dump(2) << '\n';
  if (!man) throw DataError("failed writing '" + dir + "/manifest.json'");
}

LoadedTensors load_tensors(const std::string& dir) {
  LoadedTensors out;
  std::ifstream man(dir + "/manifest.json");
  if (!man) throw DataError("no manifest.json in '" + dir + "'");
  try {
    out.manifest = nlohmann::json::parse(man);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest in '" + dir + "': " + e.what());
  }
  std::ifstream bin(dir + "/weights.bin", std::ios::binary);
  if (!bin) throw DataError("no weights.bin in '" + dir + "'");
  if (!out.manifest.contains("tensors")) throw DataError("manifest in '" + dir + "' lists no tensors");
  for (const auto& entry : out.manifest["tensors"]) {
    Tensor t = read_tensor(bin);
    const auto shape = entry.at("shape").get<Shape>();
    if (t.shape() != shape) {
      throw DataError("tensor '" + entry.at("name").get<std::string>() + "' has shape " +
                      shape_string(t.shape()) + ", manifest says " + shape_string(shape));
    }
    out.tensors.push_back({entry.at("name").get<std::string>(), t});
  }
  return out;
}

void assign_tensors(std::vector<NamedTensor>& into, const std::vector<NamedTensor>& from) {
  if (into.size() != from.size()) {
    throw DataError("expected " + std::to_string(into.size()) + " tensors, found " +
                    std::to_string(from.size()));
  }
  for (std::size_t i = 0; i < into.size(); ++i) {
    if (into[i].name != from[i].name || into[i].value.shape() != from[i].value.shape()) {
      throw DataError("tensor " + std::to_string(i) + " mismatch: '" + into[i].name + "' " +
                      shape_string(into[i].value.shape()) + " vs '" + from[i].name + "' " +
                      shape_string(from[i].value.shape()));
    }
    auto dst = into[i].value.mutable_data();
    const auto& src = from[i].value.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

void save_checkpoint(const std::string& dir, const UNet& model, const nlohmann::json& extra) {
  nlohmann::json m = extra;
  m["config"] = model.config().to_json();
  m["config_hash"] = model.config().hash();
  m["parameter_count"] = model.parameter_count();
  save_tensors(dir, model.parameters(), m);
}

UNet load_checkpoint(const std::string& dir, nlohmann::json* manifest) {
  auto loaded = load_tensors(dir);
  UNetConfig cfg;
  try {
    cfg = UNetConfig::from_json(loaded.manifest.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint '" + dir + "' has no usable config: " + e.what());
  }
  if (loaded.manifest.value("config_hash", std::uint64_t{0}) != cfg.hash()) {
    throw DataError("checkpoint '" + dir + "' config hash does not match its config");
  }
  UNet model(cfg, 0);
  assign_tensors(model.parameters(), loaded.tensors);
  if (manifest) *manifest = std::move(loaded.manifest);
  return model;
}

}  // namespace adapterlab
