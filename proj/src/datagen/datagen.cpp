#include "granmoe/datagen/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "granmoe/errors.hpp"
#include "granmoe/textcodec/prompt.hpp"

namespace granmoe {

using ordered_json = nlohmann::ordered_json;

namespace {

constexpr int kMaxPlacementTries = 200;

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finaliser over the pair
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

int uniform(std::mt19937_64& rng, int lo, int hi) {  // inclusive
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

bool boxes_clear(const BBox& a, const BBox& b) {
  // one pixel of background between shapes
  return a.x2 + 1 <= b.x1 || b.x2 + 1 <= a.x1 || a.y2 + 1 <= b.y1 || b.y2 + 1 <= a.y1;
}

BBox tight_box(const std::vector<std::pair<int, int>>& pixels) {
  BBox b{pixels.front().first, pixels.front().second, pixels.front().first + 1, pixels.front().second + 1};
  for (auto [x, y] : pixels) {
    b.x1 = std::min(b.x1, x);
    b.y1 = std::min(b.y1, y);
    b.x2 = std::max(b.x2, x + 1);
    b.y2 = std::max(b.y2, y + 1);
  }
  return b;
}

// Shape of size w x h at (x, y), with its box tightened to the raster.
PlacedShape make_shape(int label, Tone tone, ShapeKind kind, int x, int y, int w, int h) {
  PlacedShape s{label, tone, kind, BBox{x, y, x + w, y + h}};
  s.box = tight_box(rasterize(s));
  return s;
}

bool fits(const PlacedShape& s, const std::vector<PlacedShape>& others, const PlacedShape* ignore = nullptr) {
  for (const auto& o : others) {
    if (ignore && o == *ignore) continue;
    if (!boxes_clear(s.box, o.box)) return false;
  }
  return true;
}

std::optional<PlacedShape> place_new(std::mt19937_64& rng, const std::vector<PlacedShape>& others, int label,
                                     const SceneKnobs& k) {
  for (int attempt = 0; attempt < kMaxPlacementTries; ++attempt) {
    const int w = uniform(rng, k.min_extent, std::min(k.max_extent, k.canvas));
    const int h = uniform(rng, k.min_extent, std::min(k.max_extent, k.canvas));
    const auto kind = uniform(rng, 0, 1) ? ShapeKind::ellipse : ShapeKind::rectangle;
    const auto tone = uniform(rng, 0, 1) ? Tone::dark : Tone::bright;
    const int x = uniform(rng, 0, k.canvas - w);
    const int y = uniform(rng, 0, k.canvas - h);
    PlacedShape s = make_shape(label, tone, kind, x, y, w, h);
    if (fits(s, others)) return s;
  }
  return std::nullopt;
}

std::vector<int> unused_labels(const std::vector<PlacedShape>& shapes) {
  std::vector<int> out;
  for (int id = 1; id < scene_labels().size(); ++id) {
    if (std::none_of(shapes.begin(), shapes.end(), [&](const PlacedShape& s) { return s.label == id; })) {
      out.push_back(id);
    }
  }
  return out;
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string task_slug(TaskToken t) {
  auto s = lower(to_string(t));
  return s.substr(1, s.size() - 2);
}

InstructionSample make_sample(const std::string& id, TaskToken task, std::vector<Image> images,
                              std::vector<std::string> paths, std::string prompt, std::string target) {
  InstructionSample s;
  s.id = id;
  s.task = task;
  s.images = std::move(images);
  s.image_paths = std::move(paths);
  s.granularity = route_granularity(prompt);
  s.prompt = std::move(prompt);
  s.target = std::move(target);
  s.provenance = "synthetic";
  return s;
}

std::string class_list() {
  std::string out;
  for (int id = 1; id < scene_labels().size(); ++id) out += (id > 1 ? ", " : "") + scene_labels().name(id);
  return out;
}

}  // namespace

const LabelSet& scene_labels() {
  static const LabelSet labels({"background", "pond", "building", "road", "tree", "field"});
  return labels;
}

std::string_view to_string(Tone t) noexcept { return t == Tone::bright ? "bright" : "dark"; }

std::string_view to_string(Mutation m) noexcept {
  switch (m) {
    case Mutation::add: return "add";
    case Mutation::remove: return "remove";
    case Mutation::move: return "move";
  }
  return "?";
}

ordered_json SceneKnobs::to_json() const {
  return {{"canvas", canvas},         {"patch_size", patch_size}, {"min_shapes", min_shapes},
          {"max_shapes", max_shapes}, {"min_extent", min_extent}, {"max_extent", max_extent}};
}

SceneKnobs SceneKnobs::from_json(const ordered_json& j) {
  SceneKnobs k;
  k.canvas = j.value("canvas", k.canvas);
  k.patch_size = j.value("patch_size", k.patch_size);
  k.min_shapes = j.value("min_shapes", k.min_shapes);
  k.max_shapes = j.value("max_shapes", k.max_shapes);
  k.min_extent = j.value("min_extent", k.min_extent);
  k.max_extent = j.value("max_extent", k.max_extent);
  return k;
}

int shape_gray(int label, Tone tone) {
  return tone == Tone::bright ? 140 + 22 * (label - 1) : 50 + 18 * (label - 1);
}

std::vector<std::pair<int, int>> rasterize(const PlacedShape& s) {
  std::vector<std::pair<int, int>> px;
  const auto& b = s.box;
  const double cx = 0.5 * (b.x1 + b.x2), cy = 0.5 * (b.y1 + b.y2);
  const double rx = 0.5 * (b.x2 - b.x1), ry = 0.5 * (b.y2 - b.y1);
  for (int y = b.y1; y < b.y2; ++y)
    for (int x = b.x1; x < b.x2; ++x) {
      if (s.kind == ShapeKind::ellipse) {
        const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
        if (dx * dx + dy * dy > 1.0) continue;
      }
      px.emplace_back(x, y);
    }
  return px;
}

SceneSpec generate_scene(std::uint64_t seed, const SceneKnobs& k) {
  if (k.canvas < 2 * k.patch_size) throw GenerationError("canvas must be at least twice the patch size");
  if (k.canvas % k.patch_size != 0) throw GenerationError("canvas must be a multiple of the patch size");
  if (k.min_shapes < 1 || k.max_shapes < k.min_shapes) throw GenerationError("invalid shape-count range");
  if (k.max_shapes > scene_labels().size() - 1) {
    throw GenerationError("at most " + std::to_string(scene_labels().size() - 1) + " shapes (one per class)");
  }
  if (k.min_extent < 2 || k.max_extent < k.min_extent || k.min_extent > k.canvas) {
    throw GenerationError("invalid shape extent range");
  }
  std::mt19937_64 rng(mix(seed, 0x5CE7E));
  SceneSpec scene{k.canvas, k.canvas, seed, {}};
  const int n = uniform(rng, k.min_shapes, k.max_shapes);
  for (int i = 0; i < n; ++i) {
    auto free = unused_labels(scene.shapes);
    const int label = free[static_cast<std::size_t>(uniform(rng, 0, static_cast<int>(free.size()) - 1))];
    auto shape = place_new(rng, scene.shapes, label, k);
    if (!shape) {
      throw GenerationError("could not place " + std::to_string(n) + " non-overlapping shapes on a " +
                            std::to_string(k.canvas) + "px canvas (seed " + std::to_string(seed) + ")");
    }
    scene.shapes.push_back(*shape);
  }
  return scene;
}

Image render_image(const SceneSpec& scene) {
  Image img(scene.height, scene.width, 1);
  std::mt19937_64 rng(mix(scene.seed, 0x7E47));
  for (int y = 0; y < scene.height; ++y)
    for (int x = 0; x < scene.width; ++x) img.at(y, x) = (20 + uniform(rng, 0, 15)) / 255.0;
  for (const auto& s : scene.shapes) {
    const double g = shape_gray(s.label, s.tone) / 255.0;
    for (auto [x, y] : rasterize(s)) img.at(y, x) = g;
  }
  return img;
}

Mask label_mask(const SceneSpec& scene) {
  Mask m(scene.width, scene.height);
  for (const auto& s : scene.shapes)
    for (auto [x, y] : rasterize(s)) m.at(x, y) = s.label;
  return m;
}

Mask class_mask(const SceneSpec& scene, int label) {
  Mask m = label_mask(scene);
  for (auto& v : m.labels) v = v == label ? label : 0;
  return m;
}

std::string scene_class(const SceneSpec& scene) {
  if (scene.shapes.empty()) return std::string(kBackground);
  const PlacedShape* best = nullptr;
  std::size_t best_area = 0;
  for (const auto& s : scene.shapes) {
    const auto area = rasterize(s).size();
    if (!best || area > best_area || (area == best_area && s.label < best->label)) {
      best = &s;
      best_area = area;
    }
  }
  return scene_labels().name(best->label);
}

std::string position_word(const BBox& box, int width, int height) {
  const double cx = 0.5 * (box.x1 + box.x2), cy = 0.5 * (box.y1 + box.y2);
  auto third = [](double c, int extent) { return 3.0 * c < extent ? 0 : (3.0 * c >= 2.0 * extent ? 2 : 1); };
  const int col = third(cx, width), row = third(cy, height);
  static const char* rows[] = {"top", "center", "bottom"};
  static const char* cols[] = {"left", "center", "right"};
  if (row == 1 && col == 1) return "center";
  if (row == 1) return cols[col];
  if (col == 1) return rows[row];
  return std::string(rows[row]) + " " + cols[col];
}

std::string object_phrase(const PlacedShape& s) {
  return "the " + std::string(to_string(s.tone)) + " " + scene_labels().name(s.label);
}

std::string scene_caption(const SceneSpec& scene) {
  std::vector<std::string> parts;
  for (const auto& s : scene.shapes) {
    parts.push_back("a " + std::string(to_string(s.tone)) + " " + scene_labels().name(s.label) + " at the " +
                    position_word(s.box, scene.width, scene.height));
  }
  if (parts.empty()) return "nothing.";
  std::string out = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) out += (i + 1 == parts.size() ? " and " : ", ") + parts[i];
  return out + ".";
}

ScenePair mutate_scene(const SceneSpec& base, std::uint64_t seed, const SceneKnobs& k) {
  std::mt19937_64 rng(mix(seed, 0x3A7E));
  std::vector<Mutation> options{Mutation::add, Mutation::remove, Mutation::move};
  std::shuffle(options.begin(), options.end(), rng);
  for (Mutation m : options) {
    ScenePair pair{base, base, m, {}, {}};
    pair.after.seed = mix(base.seed, seed);
    if (m == Mutation::add) {
      auto free = unused_labels(base.shapes);
      if (free.empty()) continue;
      const int label = free[static_cast<std::size_t>(uniform(rng, 0, static_cast<int>(free.size()) - 1))];
      auto shape = place_new(rng, base.shapes, label, k);
      if (!shape) continue;
      pair.changed = *shape;
      pair.after.shapes.push_back(*shape);
      return pair;
    }
    if (m == Mutation::remove) {
      if (base.shapes.size() < 2) continue;
      const auto idx = static_cast<std::size_t>(uniform(rng, 0, static_cast<int>(base.shapes.size()) - 1));
      pair.changed = base.shapes[idx];
      pair.after.shapes.erase(pair.after.shapes.begin() + static_cast<std::ptrdiff_t>(idx));
      return pair;
    }
    const auto idx = static_cast<std::size_t>(uniform(rng, 0, static_cast<int>(base.shapes.size()) - 1));
    const PlacedShape& src = base.shapes[idx];
    const std::string from = position_word(src.box, base.width, base.height);
    for (int attempt = 0; attempt < kMaxPlacementTries; ++attempt) {
      const int w = src.box.x2 - src.box.x1, h = src.box.y2 - src.box.y1;
      PlacedShape moved = src;
      moved.box.x1 = uniform(rng, 0, base.width - w);
      moved.box.y1 = uniform(rng, 0, base.height - h);
      moved.box.x2 = moved.box.x1 + w;
      moved.box.y2 = moved.box.y1 + h;
      moved.box = tight_box(rasterize(moved));
      if (position_word(moved.box, base.width, base.height) == from) continue;
      if (!fits(moved, base.shapes, &src)) continue;
      pair.changed = src;
      pair.moved_to = moved;
      pair.after.shapes[idx] = moved;
      return pair;
    }
  }
  throw GenerationError("no feasible mutation for scene seed " + std::to_string(base.seed));
}

std::string change_caption(const ScenePair& p) {
  const auto& s = p.changed;
  const std::string cls = scene_labels().name(s.label);
  const std::string tone(to_string(s.tone));
  const std::string pos = position_word(s.box, p.before.width, p.before.height);
  switch (p.mutation) {
    case Mutation::add: return "a " + tone + " " + cls + " was added at the " + pos + ".";
    case Mutation::remove: return "the " + tone + " " + cls + " was removed from the " + pos + ".";
    case Mutation::move:
      return "the " + tone + " " + cls + " moved from the " + pos + " to the " +
             position_word(p.moved_to.box, p.before.width, p.before.height) + ".";
  }
  return {};
}

Mask change_mask(const ScenePair& p) {
  Mask before(p.before.width, p.before.height), after(p.before.width, p.before.height);
  for (auto [x, y] : rasterize(p.changed)) before.at(x, y) = 1;
  if (p.mutation == Mutation::move)
    for (auto [x, y] : rasterize(p.moved_to)) after.at(x, y) = 1;
  if (p.mutation == Mutation::add) std::swap(before, after);
  Mask out(p.before.width, p.before.height);
  for (std::size_t i = 0; i < out.labels.size(); ++i)
    out.labels[i] = before.labels[i] != after.labels[i] ? p.changed.label : 0;
  return out;
}

GeneratedSamples scene_to_samples(const SceneSpec& scene, const std::string& scene_id,
                                  const std::set<TaskToken>& tasks, int grid_n) {
  GeneratedSamples out;
  const Image img = render_image(scene);
  const std::vector<std::string> paths{"images/" + scene_id + ".pgm"};
  std::mt19937_64 rng(mix(scene.seed, 0x7A5C));
  auto emit = [&](TaskToken task, int k, std::string prompt, std::string target) {
    out.samples.push_back(make_sample(scene_id + "-" + task_slug(task) + "-" + std::to_string(k), task, {img}, paths,
                                      std::move(prompt), std::move(target)));
  };
  for (TaskToken task : tasks) {
    switch (task) {
      case TaskToken::cls:
        emit(task, 0, build_prompt(task, 1, {{"class names", class_list()}}, 1), scene_class(scene));
        break;
      case TaskToken::cap: emit(task, 0, build_prompt(task, 1, {}, 1), scene_caption(scene)); break;
      case TaskToken::vqa: {
        const int asked = uniform(rng, 1, scene_labels().size() - 1);
        const bool present = std::any_of(scene.shapes.begin(), scene.shapes.end(),
                                         [&](const PlacedShape& s) { return s.label == asked; });
        emit(task, 0,
             build_prompt(task, 1, {{"question", "Is there a " + scene_labels().name(asked) + " in the image?"}}, 1),
             present ? "yes" : "no");
        emit(task, 1, build_prompt(task, 1, {{"question", "How many objects are there in the image?"}}, 1),
             std::to_string(scene.shapes.size()));
        break;
      }
      case TaskToken::vg:
      case TaskToken::ref:
      case TaskToken::seg:
        if (scene.shapes.empty()) {
          out.skipped.push_back({scene_id, std::string(to_string(task)), "scene has no objects"});
          break;
        }
        for (std::size_t i = 0; i < scene.shapes.size(); ++i) {
          const auto& s = scene.shapes[i];
          const int k = static_cast<int>(i);
          const std::string box = bbox_to_text(normalize_bbox(s.box, scene.width, scene.height));
          if (task == TaskToken::vg) {
            emit(task, k, build_prompt(task, 1, {{"object describing", object_phrase(s)}}, 1), box);
          } else if (task == TaskToken::ref) {
            emit(task, k, build_prompt(task, 1, {{"bbox", box}}, 1), object_phrase(s));
          } else {
            const int tmpl = uniform(rng, 1, 4);
            const auto desc = encode_mask(class_mask(scene, s.label), grid_n, scene_labels());
            emit(task, k, build_prompt(task, tmpl, {{"class name", scene_labels().name(s.label)}}, 1),
                 descriptor_to_text(desc));
          }
        }
        break;
      case TaskToken::ccd:
        out.skipped.push_back({scene_id, "[CCD]", "single scene; change captioning needs a pair"});
        break;
    }
  }
  return out;
}

GeneratedSamples pair_to_samples(const ScenePair& pair, const std::string& pair_id,
                                 const std::set<TaskToken>& tasks, int grid_n) {
  GeneratedSamples out;
  const std::vector<Image> images{render_image(pair.before), render_image(pair.after)};
  const std::vector<std::string> paths{"images/" + pair_id + "-a.pgm", "images/" + pair_id + "-b.pgm"};
  std::mt19937_64 rng(mix(pair.after.seed, 0xCCD));
  if (tasks.count(TaskToken::ccd)) {
    const int tmpl = uniform(rng, 1, 10);
    out.samples.push_back(make_sample(pair_id + "-ccd-0", TaskToken::ccd, images, paths,
                                      build_prompt(TaskToken::ccd, tmpl, {}, 2), change_caption(pair)));
  }
  if (tasks.count(TaskToken::seg)) {
    const int building = *scene_labels().id_of("building");
    if (pair.changed.label == building) {
      const auto desc = encode_mask(change_mask(pair), grid_n, scene_labels());
      out.samples.push_back(make_sample(pair_id + "-seg-0", TaskToken::seg, images, paths,
                                        build_prompt(TaskToken::seg, 5, {}, 2), descriptor_to_text(desc)));
    } else {
      out.skipped.push_back({pair_id, "[SEG]", "change-detection prompt covers building changes only"});
    }
  }
  return out;
}

ordered_json DataKnobs::to_json() const {
  ordered_json t = ordered_json::array();
  for (auto task : tasks) t.push_back(std::string(to_string(task)));
  return {{"scenes", scenes}, {"pairs", pairs}, {"grid_n", grid_n}, {"tasks", t}, {"scene", scene.to_json()}};
}

DataKnobs DataKnobs::from_json(const ordered_json& j) {
  DataKnobs k;
  k.scenes = j.value("scenes", k.scenes);
  k.pairs = j.value("pairs", k.pairs);
  k.grid_n = j.value("grid_n", k.grid_n);
  if (j.contains("tasks")) {
    k.tasks.clear();
    for (const auto& t : j.at("tasks")) {
      const auto task = parse_task_token(t.get<std::string>());
      if (!task) throw ContractError("unknown task token " + t.get<std::string>());
      k.tasks.insert(*task);
    }
  }
  if (j.contains("scene")) k.scene = SceneKnobs::from_json(j.at("scene"));
  if (k.scenes < 0 || k.pairs < 0 || k.grid_n < 1) throw ContractError("data knobs out of range");
  return k;
}

GeneratedSamples generate_dataset(std::uint64_t seed, const DataKnobs& knobs) {
  GeneratedSamples all;
  auto append = [&](GeneratedSamples g) {
    std::move(g.samples.begin(), g.samples.end(), std::back_inserter(all.samples));
    std::move(g.skipped.begin(), g.skipped.end(), std::back_inserter(all.skipped));
  };
  char id[32];
  for (int i = 0; i < knobs.scenes; ++i) {
    std::snprintf(id, sizeof id, "s%05d", i);
    append(scene_to_samples(generate_scene(mix(seed, static_cast<std::uint64_t>(i)), knobs.scene), id, knobs.tasks,
                            knobs.grid_n));
  }
  for (int j = 0; j < knobs.pairs; ++j) {
    std::snprintf(id, sizeof id, "p%05d", j);
    const auto base = generate_scene(mix(seed, 1000000ULL + static_cast<std::uint64_t>(j)), knobs.scene);
    append(pair_to_samples(mutate_scene(base, mix(seed, 2000000ULL + static_cast<std::uint64_t>(j)), knobs.scene), id,
                           knobs.tasks, knobs.grid_n));
  }
  return all;
}

// ---- files ----------------------------------------------------------------------

void write_image_pgm(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 1) throw DimensionError("graymap output needs a single-channel image");
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P2\n" << image.width << ' ' << image.height << "\n255\n";
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const long g = std::lround(std::clamp(image.at(y, x), 0.0, 1.0) * 255.0);
      out << (x ? " " : "") << g;
    }
    out << '\n';
  }
}

Image read_image_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read image " + path.string());
  std::string text, line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    text += line + '\n';
  }
  std::istringstream is(text);
  std::string first;
  is >> first;
  int w = 0, h = 0;
  double maxval = 255.0;
  if (first == "P2") {
    is >> w >> h >> maxval;
  } else {
    w = std::stoi(first);
    is >> h;
  }
  if (!is || w <= 0 || h <= 0 || maxval <= 0) throw DataError("bad image header in " + path.string());
  Image img(h, w, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double v;
      if (!(is >> v)) throw DataError("truncated image data in " + path.string());
      img.at(y, x) = v / maxval;
    }
  return img;
}

ordered_json sample_to_json(const InstructionSample& s) {
  ordered_json j;
  j["schema_version"] = kSampleSchemaVersion;
  j["id"] = s.id;
  j["task"] = std::string(to_string(s.task));
  j["images"] = s.image_paths;
  j["prompt"] = s.prompt;
  j["target"] = s.target;
  j["granularity"] = s.granularity ? ordered_json(std::string(to_string(*s.granularity))) : ordered_json(nullptr);
  j["provenance"] = s.provenance;
  return j;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<ordered_json>& records) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& r : records) out << r.dump() << '\n';
}

void export_dataset(const std::filesystem::path& dir, const std::vector<InstructionSample>& samples,
                    const std::string& jsonl_name) {
  std::filesystem::create_directories(dir / "images");
  std::set<std::string> written;
  std::vector<ordered_json> records;
  for (InstructionSample s : samples) {
    if (s.image_paths.size() != s.images.size()) {
      s.image_paths.clear();
      for (std::size_t k = 0; k < s.images.size(); ++k)
        s.image_paths.push_back("images/" + s.id + "-" + std::to_string(k) + ".pgm");
    }
    for (std::size_t k = 0; k < s.images.size(); ++k) {
      if (written.insert(s.image_paths[k]).second) write_image_pgm(dir / s.image_paths[k], s.images[k]);
    }
    records.push_back(sample_to_json(s));
  }
  write_jsonl(dir / jsonl_name, records);
}

ordered_json IngestError::to_json() const { return {{"line", line}, {"id", id}, {"error", message}}; }

IngestResult ingest_jsonl(const std::filesystem::path& path, const std::filesystem::path& image_root) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  IngestResult result;
  std::map<std::string, Image> cache;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::string id;
    try {
      const auto j = ordered_json::parse(line);
      if (!j.is_object()) throw DataError("record is not a JSON object");
      if (!j.contains("schema_version")) throw DataError("missing schema_version");
      if (j.at("schema_version") != kSampleSchemaVersion) {
        throw DataError("unsupported schema_version " + j.at("schema_version").dump());
      }
      for (const char* key : {"id", "task", "images", "prompt", "target"})
        if (!j.contains(key)) throw DataError(std::string("missing field '") + key + "'");
      InstructionSample s;
      s.id = id = j.at("id").get<std::string>();
      const auto task = parse_task_token(j.at("task").get<std::string>());
      if (!task) throw DataError("unknown task " + j.at("task").dump());
      s.task = *task;
      s.prompt = j.at("prompt").get<std::string>();
      s.target = j.at("target").get<std::string>();
      s.provenance = j.contains("provenance") ? j.at("provenance").get<std::string>() : "ingested";
      s.image_paths = j.at("images").get<std::vector<std::string>>();
      for (const auto& rel : s.image_paths) {
        auto it = cache.find(rel);
        if (it == cache.end()) {
          const auto full = image_root / rel;
          if (!std::filesystem::exists(full)) throw DataError("missing image file " + full.string());
          it = cache.emplace(rel, read_image_file(full)).first;
        }
        s.images.push_back(it->second);
      }
      const auto routed = route_granularity(s.prompt, RouteMode::lenient);
      if (j.contains("granularity") && !j.at("granularity").is_null()) {
        const auto level = parse_granularity(j.at("granularity").get<std::string>());
        if (!level) throw DataError("unknown granularity " + j.at("granularity").dump());
        s.granularity = *level;
      } else if (!routed.fallback) {
        s.granularity = routed.level;
      }
      validate_sample(s);
      result.samples.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      result.errors.push_back({lineno, id, std::string("json: ") + e.what()});
    } catch (const std::exception& e) {
      result.errors.push_back({lineno, id, e.what()});
    }
  }
  return result;
}

}  // namespace granmoe
