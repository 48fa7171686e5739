#include "sinkgate/scenes/scene.hpp"

#include <algorithm>
#include <numeric>

namespace sinkgate::scenes {

const Object* Scene::at_cell(int cell) const {
  for (const auto& o : objects) {
    if (o.cell == cell) return &o;
  }
  return nullptr;
}

const char* task_name(Task t) {
  switch (t) {
    case Task::global_count: return "global_count";
    case Task::local_attribute: return "local_attribute";
    case Task::relation: return "relation";
  }
  return "?";
}

Task parse_task(const std::string& s) {
  for (Task t : kAllTasks) {
    if (s == task_name(t)) return t;
  }
  throw ConfigError("unknown task tag '" + s + "'");
}

Scene generate_scene(Rng& rng, int grid_side, int max_objects) {
  if (grid_side < 1) throw ConfigError("grid_side must be >= 1");
  const int n = grid_side * grid_side;
  if (max_objects < 0 || max_objects > n) {
    throw ConfigError("max_objects must lie in [0, grid_side^2]");
  }
  Scene s;
  s.grid_side = grid_side;
  const int count = static_cast<int>(rng.below(static_cast<std::uint64_t>(max_objects) + 1));
  // Partial Fisher-Yates picks `count` distinct cells.
  std::vector<int> cells(n);
  std::iota(cells.begin(), cells.end(), 0);
  for (int i = 0; i < count; ++i) {
    const int j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(n - i)));
    std::swap(cells[i], cells[j]);
  }
  for (int i = 0; i < count; ++i) {
    Object o;
    o.cell = cells[i];
    o.color = static_cast<int>(rng.below(vocab::kColors));
    o.shape = static_cast<int>(rng.below(vocab::kShapes));
    o.size = static_cast<int>(rng.below(vocab::kSizes));
    s.objects.push_back(o);
  }
  std::sort(s.objects.begin(), s.objects.end(), [](const Object& a, const Object& b) { return a.cell < b.cell; });
  return s;
}

ProbeLabels labels_of(const Scene& scene) {
  ProbeLabels l;
  l.count = static_cast<int>(scene.objects.size());
  for (const auto& o : scene.objects) {
    l.color[o.color] = 1;
    l.shape[o.shape] = 1;
    if (!l.size || o.size > *l.size) l.size = o.size;
  }
  return l;
}

int combo_row(const Object& o) {
  return (o.color * vocab::kShapes + o.shape) * vocab::kSizes + o.size;
}

Tensor build_codebook() {
  Tensor cb = Tensor::matrix(kCodebookRows, feat::kDim);
  for (int c = 0; c < vocab::kColors; ++c) {
    for (int sh = 0; sh < vocab::kShapes; ++sh) {
      for (int sz = 0; sz < vocab::kSizes; ++sz) {
        const int r = combo_row(Object{c, sh, sz, 0});
        cb.at(r, feat::color + c) = 1.0;
        cb.at(r, feat::shape + sh) = 1.0;
        cb.at(r, feat::size + sz) = 1.0;
        cb.at(r, feat::object) = 1.0;
      }
    }
  }
  cb.at(kRowBackground, feat::background) = 1.0;
  cb.at(kRowSinkEligible, feat::background) = 1.0;
  cb.at(kRowSinkEligible, feat::sink_eligible) = 1.0;
  cb.at(kRowTextured, feat::background) = 1.0;
  cb.at(kRowTextured, feat::textured) = 1.0;
  return cb;
}

std::vector<int> cell_rows(const Scene& scene, const EncodeSpec& spec) {
  std::vector<int> rows(scene.cells(), kRowBackground);
  for (int c : spec.sink_eligible_cells) {
    if (c >= 0 && c < scene.cells()) rows[c] = kRowSinkEligible;
  }
  for (int c : spec.textured_cells) {
    if (c >= 0 && c < scene.cells()) rows[c] = kRowTextured;
  }
  for (const auto& o : scene.objects) rows[o.cell] = combo_row(o);
  return rows;
}

Tensor encode_patches(const Scene& scene, const Tensor& codebook, Rng& rng, const EncodeSpec& spec) {
  if (codebook.rows() != kCodebookRows || codebook.cols() != feat::kDim) {
    throw ShapeError("encode_patches: codebook must be " + std::to_string(kCodebookRows) + "x" +
                     std::to_string(feat::kDim));
  }
  const auto rows = cell_rows(scene, spec);
  Tensor out = Tensor::matrix(rows.size(), feat::kDim);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto dst = out.row(i);
    auto src = codebook.row(static_cast<std::size_t>(rows[i]));
    std::copy(src.begin(), src.end(), dst.begin());
    if (spec.noise > 0.0) {
      for (int d = 0; d < feat::kContent; ++d) dst[d] += spec.noise * rng.normal();
    }
  }
  return out;
}

Spans spans_for(int n_visual) {
  Spans s;
  s.vis_begin = 1;
  s.vis_end = 1 + n_visual;
  s.txt_begin = s.vis_end;
  s.txt_end = s.txt_begin + 3;
  return s;
}

namespace {

int column(const Scene& s, int cell) { return cell % s.grid_side; }

struct RelationPair {
  const Object* a;
  const Object* b;
};

std::vector<RelationPair> relation_pairs(const Scene& scene) {
  std::array<int, vocab::kColors> freq{};
  for (const auto& o : scene.objects) ++freq[o.color];
  std::vector<RelationPair> out;
  for (const auto& a : scene.objects) {
    for (const auto& b : scene.objects) {
      if (&a == &b || freq[a.color] != 1 || freq[b.color] != 1) continue;
      if (column(scene, a.cell) == column(scene, b.cell)) continue;
      out.push_back({&a, &b});
    }
  }
  return out;
}

}  // namespace

Example make_example(const Scene& scene, Task task, Rng& rng, const EncodeSpec& spec, const Tensor& codebook) {
  using namespace vocab;
  Example ex;
  ex.scene = scene;
  ex.task = task;
  int arg1 = NONE, arg2 = NONE, qtok = Q_COUNT;
  switch (task) {
    case Task::global_count:
      if (static_cast<int>(scene.objects.size()) > kMaxCount) throw InvariantError("count exceeds vocabulary");
      break;
    case Task::local_attribute: {
      if (scene.objects.empty()) throw InvariantError("local_attribute needs at least one object");
      if (scene.cells() > kMaxCells) throw InvariantError("grid too large for cell tokens");
      int cell = static_cast<int>(rng.below(static_cast<std::uint64_t>(scene.cells())));
      while (!scene.at_cell(cell)) cell = static_cast<int>(rng.below(static_cast<std::uint64_t>(scene.cells())));
      arg1 = cell_token(cell);
      const int kinds[3] = {Q_COLOR, Q_SHAPE, Q_SIZE};
      qtok = kinds[rng.below(3)];
      break;
    }
    case Task::relation: {
      const auto pairs = relation_pairs(scene);
      if (pairs.empty()) throw InvariantError("relation needs two uniquely coloured objects in distinct columns");
      const auto& p = pairs[rng.below(pairs.size())];
      arg1 = color_token(p.a->color);
      arg2 = color_token(p.b->color);
      qtok = Q_LEFT_OF;
      break;
    }
  }
  ex.prompt.push_back(BOS);
  for (int i = 0; i < scene.cells(); ++i) ex.prompt.push_back(VIS);
  ex.prompt.push_back(arg1);
  ex.prompt.push_back(arg2);
  ex.prompt.push_back(qtok);
  ex.answer = {answer_by_rule(scene, ex.prompt)};
  Rng patch_rng = rng.split("patches");
  ex.patches = encode_patches(scene, codebook, patch_rng, spec);
  return ex;
}

int answer_by_rule(const Scene& scene, const std::vector<int>& prompt) {
  using namespace vocab;
  if (prompt.size() < 3) throw InvariantError("prompt too short");
  const int arg1 = prompt[prompt.size() - 3];
  const int arg2 = prompt[prompt.size() - 2];
  const int q = prompt.back();
  if (q == Q_COUNT) return count_token(static_cast<int>(scene.objects.size()));
  if (q == Q_COLOR || q == Q_SHAPE || q == Q_SIZE) {
    const Object* o = scene.at_cell(arg1 - CELL_0);
    if (!o) throw InvariantError("queried cell is empty");
    if (q == Q_COLOR) return color_token(o->color);
    if (q == Q_SHAPE) return shape_token(o->shape);
    return size_token(o->size);
  }
  if (q == Q_LEFT_OF) {
    const Object *a = nullptr, *b = nullptr;
    for (const auto& o : scene.objects) {
      if (color_token(o.color) == arg1) a = &o;
      if (color_token(o.color) == arg2) b = &o;
    }
    if (!a || !b) throw InvariantError("relation colours not present");
    return column(scene, a->cell) < column(scene, b->cell) ? LEFT : RIGHT;
  }
  throw InvariantError("unknown question token " + std::to_string(q));
}

}  // namespace sinkgate::scenes
