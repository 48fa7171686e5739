#pragma once

#include <filesystem>
#include <vector>

#include "json.hpp"
#include "sinkgate/numerics/sgt1.hpp"
#include "sinkgate/scenes/scene.hpp"

namespace sinkgate::scenes {

struct DataSpec {
  std::uint64_t seed = 1;
  int size = 300;
  int grid_side = 4;
  int max_objects = 6;
  EncodeSpec encode;
  std::vector<Task> tasks{kAllTasks.begin(), kAllTasks.end()};
};

// Example i gets task tasks[i % tasks.size()], so an equal mix differs by at
// most one across tags. Scenes that cannot support the task are redrawn from
// a fresh sub-stream; everything is a pure function of (spec, i).
std::vector<Example> generate_dataset(const DataSpec& spec);
Example generate_one(const DataSpec& spec, std::uint64_t index, const Tensor& codebook);

nlohmann::json scene_to_json(const Scene& s);
Scene scene_from_json(const nlohmann::json& j);
nlohmann::json labels_to_json(const ProbeLabels& l);

// JSON-lines manifest with one example per line; patch features go to
// sidecar SGT1 files under <dir>/patches/.
void write_manifest(const std::filesystem::path& manifest, const std::vector<Example>& examples,
                    sgt1::Dtype dtype = sgt1::Dtype::f64);
std::vector<Example> read_manifest(const std::filesystem::path& manifest);

}  // namespace sinkgate::scenes
