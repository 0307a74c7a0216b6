#include "run_config.hpp"

#include "fmc/json_util.hpp"

namespace fmc::cli {

RunConfig parse_run_config(const nlohmann::json& j) {
  reject_unknown_keys(j, {"network", "phantom", "train", "paths"}, "config");
  RunConfig rc;
  if (j.contains("network")) {
    rc.network = network_config_from_json(j["network"]);
    rc.num_classes_given = j["network"].contains("num_classes");
  }
  if (j.contains("phantom")) rc.phantom = phantom_config_from_json(j["phantom"]);
  if (j.contains("train")) rc.train = train_config_from_json(j["train"]);
  if (j.contains("paths")) {
    const auto& p = j["paths"];
    reject_unknown_keys(p, {"data", "out"}, "config.paths");
    std::string s;
    if (p.contains("data")) {
      read_optional(p, "data", s, "config.paths");
      rc.data_path = s;
    }
    if (p.contains("out")) {
      read_optional(p, "out", s, "config.paths");
      rc.out_path = s;
    }
  }
  return rc;
}

RunConfig load_run_config(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return parse_run_config(j);
}

nlohmann::json to_json(const RunConfig& rc) {
  nlohmann::json j{{"network", fmc::to_json(rc.network)},
                   {"phantom", fmc::to_json(rc.phantom)},
                   {"train", fmc::to_json(rc.train)}};
  nlohmann::json paths = nlohmann::json::object();
  if (rc.data_path) paths["data"] = *rc.data_path;
  if (rc.out_path) paths["out"] = *rc.out_path;
  j["paths"] = paths;
  return j;
}

}  // namespace fmc::cli
