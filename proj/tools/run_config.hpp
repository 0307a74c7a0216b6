#pragma once

#include <optional>
#include <string>

#include "fmc/network.hpp"
#include "fmc/phantom.hpp"
#include "json.hpp"

namespace fmc::cli {

/// Everything a run can be configured with. Sections are optional; missing
/// keys keep their defaults and unknown keys anywhere are rejected.
struct RunConfig {
  NetworkConfig network;
  bool num_classes_given = false;  // otherwise taken from the dataset
  PhantomConfig phantom;
  TrainConfig train;
  std::optional<std::string> data_path;
  std::optional<std::string> out_path;
};

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);
nlohmann::json to_json(const RunConfig& cfg);

}  // namespace fmc::cli
