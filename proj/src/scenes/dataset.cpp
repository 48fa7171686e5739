#include "sinkgate/scenes/dataset.hpp"

#include <cstdio>
#include <fstream>

namespace sinkgate::scenes {

using nlohmann::json;

namespace {
constexpr int kMaxAttempts = 1000;
}

Example generate_one(const DataSpec& spec, std::uint64_t index, const Tensor& codebook) {
  if (spec.tasks.empty()) throw ConfigError("data.tasks must not be empty");
  const Task task = spec.tasks[index % spec.tasks.size()];
  const Rng base = Rng::stream(spec.seed, "example", index);
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    Rng scene_rng = base.split("scene", static_cast<std::uint64_t>(attempt));
    Scene scene = generate_scene(scene_rng, spec.grid_side, spec.max_objects);
    Rng query_rng = base.split("query", static_cast<std::uint64_t>(attempt));
    try {
      Example ex = make_example(scene, task, query_rng, spec.encode, codebook);
      ex.id = index;
      return ex;
    } catch (const InvariantError&) {
      // scene cannot carry this question; draw another one
    }
  }
  throw InvariantError(std::string("could not generate a ") + task_name(task) +
                       " example; max_objects too small for the task?");
}

std::vector<Example> generate_dataset(const DataSpec& spec) {
  if (spec.size < 0) throw ConfigError("data.size must be >= 0");
  const Tensor codebook = build_codebook();
  std::vector<Example> out;
  out.reserve(static_cast<std::size_t>(spec.size));
  for (int i = 0; i < spec.size; ++i) out.push_back(generate_one(spec, static_cast<std::uint64_t>(i), codebook));
  return out;
}

json scene_to_json(const Scene& s) {
  json objs = json::array();
  for (const auto& o : s.objects) {
    objs.push_back({{"color", o.color}, {"shape", o.shape}, {"size", o.size}, {"cell", o.cell}});
  }
  return {{"grid_side", s.grid_side}, {"objects", objs}};
}

Scene scene_from_json(const json& j) {
  Scene s;
  s.grid_side = j.at("grid_side").get<int>();
  for (const auto& o : j.at("objects")) {
    s.objects.push_back(Object{o.at("color").get<int>(), o.at("shape").get<int>(), o.at("size").get<int>(),
                               o.at("cell").get<int>()});
  }
  return s;
}

json labels_to_json(const ProbeLabels& l) {
  json j;
  j["count"] = l.count;
  j["size"] = l.size ? json(*l.size) : json(nullptr);
  j["color"] = std::vector<int>(l.color.begin(), l.color.end());
  j["shape"] = std::vector<int>(l.shape.begin(), l.shape.end());
  return j;
}

void write_manifest(const std::filesystem::path& manifest, const std::vector<Example>& examples,
                    sgt1::Dtype dtype) {
  const auto dir = manifest.parent_path();
  std::filesystem::create_directories(dir / "patches");
  std::ofstream out(manifest);
  if (!out) throw IoError("cannot write " + manifest.string());
  for (const auto& ex : examples) {
    char name[32];
    std::snprintf(name, sizeof name, "%06llu.sgt1", static_cast<unsigned long long>(ex.id));
    const std::string rel = std::string("patches/") + name;
    sgt1::save(dir / rel, ex.patches, dtype);
    json line;
    line["id"] = ex.id;
    line["task"] = task_name(ex.task);
    line["scene"] = scene_to_json(ex.scene);
    line["prompt"] = ex.prompt;
    line["answer"] = ex.answer;
    line["labels"] = labels_to_json(labels_of(ex.scene));
    line["patches"] = rel;
    out << line.dump() << "\n";
  }
}

std::vector<Example> read_manifest(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot read manifest " + manifest.string());
  std::vector<Example> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    Example ex;
    ex.id = j.at("id").get<std::uint64_t>();
    ex.task = parse_task(j.at("task").get<std::string>());
    ex.scene = scene_from_json(j.at("scene"));
    ex.prompt = j.at("prompt").get<std::vector<int>>();
    ex.answer = j.at("answer").get<std::vector<int>>();
    ex.patches = sgt1::load(manifest.parent_path() / j.at("patches").get<std::string>());
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace sinkgate::scenes
