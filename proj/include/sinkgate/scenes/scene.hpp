#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sinkgate/numerics/rng.hpp"
#include "sinkgate/numerics/tensor.hpp"
#include "sinkgate/scenes/vocab.hpp"

namespace sinkgate::scenes {

struct Object {
  int color = 0;
  int shape = 0;
  int size = 0;
  int cell = 0;  // row-major index into the grid
  friend bool operator==(const Object&, const Object&) = default;
};

struct Scene {
  int grid_side = 4;
  std::vector<Object> objects;  // sorted by cell

  int cells() const { return grid_side * grid_side; }
  const Object* at_cell(int cell) const;
  friend bool operator==(const Scene&, const Scene&) = default;
};

struct ProbeLabels {
  int count = 0;
  std::optional<int> size;  // unset for empty scenes
  std::array<std::uint8_t, vocab::kColors> color{};
  std::array<std::uint8_t, vocab::kShapes> shape{};
};

enum class Task { global_count, local_attribute, relation };
inline constexpr std::array<Task, 3> kAllTasks{Task::global_count, Task::local_attribute, Task::relation};

const char* task_name(Task t);
Task parse_task(const std::string& s);

// Throws InvariantError when max_objects exceeds the number of cells.
Scene generate_scene(Rng& rng, int grid_side, int max_objects);
ProbeLabels labels_of(const Scene& scene);

// Patch-feature layout (D_v = 32). Dims not listed stay zero in the
// encoding; the vision encoder's sink pathway writes into 19..28 and 31.
namespace feat {
inline constexpr int kDim = 32;
inline constexpr int color = 0;       // 8 one-hot
inline constexpr int shape = 8;       // 3 one-hot
inline constexpr int size = 11;       // 5 one-hot
inline constexpr int object = 16;
inline constexpr int background = 17;
inline constexpr int textured = 18;   // marks cells that trigger LLM-side sinks
inline constexpr int count_code = 19; // 10 dims, written by the encoder only
inline constexpr int count_code_len = 10;
inline constexpr int sink_eligible = 29;
inline constexpr int sink_vit = 31;
inline constexpr int kContent = 19;   // dims 0..18 come from the codebook
}  // namespace feat

// Codebook rows: (color, shape, size) combinations first, then the three
// background variants.
inline constexpr int kCombos = vocab::kColors * vocab::kShapes * vocab::kSizes;
inline constexpr int kRowBackground = kCombos;
inline constexpr int kRowSinkEligible = kCombos + 1;
inline constexpr int kRowTextured = kCombos + 2;
inline constexpr int kCodebookRows = kCombos + 3;

int combo_row(const Object& o);
Tensor build_codebook();

struct EncodeSpec {
  double noise = 0.05;
  std::vector<int> sink_eligible_cells{0, 3, 12, 15};
  std::vector<int> textured_cells{5, 10};
};

// Codebook row for each cell (background variants chosen from the spec).
std::vector<int> cell_rows(const Scene& scene, const EncodeSpec& spec);
// n x 32 patch features: codebook row plus N(0, noise^2) on the content dims.
Tensor encode_patches(const Scene& scene, const Tensor& codebook, Rng& rng, const EncodeSpec& spec);

struct Example {
  std::uint64_t id = 0;
  Scene scene;
  Tensor patches;
  std::vector<int> prompt;  // BOS, n visual placeholders, arg1, arg2, task token
  std::vector<int> answer;  // single token
  Task task = Task::global_count;
};

// Index ranges within a prompt.
struct Spans {
  int sys_begin = 0, sys_end = 1;
  int vis_begin = 1, vis_end = 1;
  int txt_begin = 1, txt_end = 1;
  int length() const { return txt_end; }
};
Spans spans_for(int n_visual);

// Builds the question for `task`. Throws InvariantError when the scene
// cannot support it (no objects for a local query; no two uniquely
// coloured objects in distinct columns for a relation).
Example make_example(const Scene& scene, Task task, Rng& rng, const EncodeSpec& spec, const Tensor& codebook);

// Re-derives the answer from the scene and the prompt tokens alone.
int answer_by_rule(const Scene& scene, const std::vector<int>& prompt);

}  // namespace sinkgate::scenes
