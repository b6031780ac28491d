#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "granmoe/datagen/datagen.hpp"
#include "granmoe/errors.hpp"
#include "granmoe/metrics/metrics.hpp"
#include "granmoe/model/tokenizer.hpp"
#include "granmoe/textcodec/prompt.hpp"
#include "oracles.hpp"

using namespace granmoe;
namespace fs = std::filesystem;

namespace {

const std::set<TaskToken> kAll(kAllTasks.begin(), kAllTasks.end());

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("granmoe_datagen_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Continuous IoU between a pixel box mapped to [0, 100] and a lattice box.
double iou_continuous(const BBox& px, int w, int h, const NormalizedBBox& q) {
  const double ax1 = 100.0 * px.x1 / w, ax2 = 100.0 * px.x2 / w, ay1 = 100.0 * px.y1 / h, ay2 = 100.0 * px.y2 / h;
  const double iw = std::max(0.0, std::min(ax2, double(q.x2)) - std::max(ax1, double(q.x1)));
  const double ih = std::max(0.0, std::min(ay2, double(q.y2)) - std::max(ay1, double(q.y1)));
  const double inter = iw * ih;
  return inter / ((ax2 - ax1) * (ay2 - ay1) + double(q.x2 - q.x1) * (q.y2 - q.y1) - inter);
}

}  // namespace

TEST(Scene, SameSeedSameScene) {
  for (std::uint64_t s = 0; s < 50; ++s) EXPECT_EQ(generate_scene(s), generate_scene(s));
  EXPECT_NE(generate_scene(1), generate_scene(2));
}

TEST(Scene, RectangleRasterFillsItsBox) {
  int rects = 0;
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto sc = generate_scene(s);
    const Mask m = label_mask(sc);
    for (const auto& sh : sc.shapes) {
      const long fg = std::count(m.labels.begin(), m.labels.end(), sh.label);
      EXPECT_EQ(fg, static_cast<long>(rasterize(sh).size()));
      if (sh.kind == ShapeKind::rectangle) {
        ++rects;
        EXPECT_EQ(fg, sh.box.area());
      } else {
        EXPECT_LE(fg, sh.box.area());
      }
    }
  }
  EXPECT_GT(rects, 0);
}

TEST(Scene, ShapesKeepApartAndInside) {
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto sc = generate_scene(s);
    std::set<int> classes;
    for (const auto& sh : sc.shapes) {
      EXPECT_TRUE(classes.insert(sh.label).second);
      EXPECT_GE(sh.box.x1, 0);
      EXPECT_LE(sh.box.x2, sc.width);
    }
  }
}

TEST(Scene, CaptionNamesEachClassOnce) {
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto sc = generate_scene(s);
    const auto words = metric_tokens(scene_caption(sc));
    for (int id = 1; id < scene_labels().size(); ++id) {
      const bool placed = std::any_of(sc.shapes.begin(), sc.shapes.end(), [&](const auto& sh) { return sh.label == id; });
      EXPECT_EQ(std::count(words.begin(), words.end(), scene_labels().name(id)), placed ? 1 : 0) << scene_caption(sc);
    }
  }
}

TEST(Scene, GrayLevelsAreDistinct) {
  std::set<int> seen;
  for (int l = 1; l < scene_labels().size(); ++l)
    for (auto t : {Tone::bright, Tone::dark}) {
      EXPECT_TRUE(seen.insert(shape_gray(l, t)).second);
      EXPECT_GT(shape_gray(l, t), 35);
    }
}

TEST(Scene, KnobErrors) {
  SceneKnobs k;
  k.canvas = 12;
  EXPECT_THROW(generate_scene(1, k), GenerationError);
  k = {};
  k.min_extent = 20;
  k.max_extent = 10;
  EXPECT_THROW(generate_scene(1, k), GenerationError);
}

TEST(Samples, VgTargetWithinRounding) {
  // Every edge is the exact 100 * c / extent value rounded, so it is off by at
  // most half a unit. That caps IoU at (L - 1)^2 / L^2 for an L-unit box:
  // >= 0.96 once both sides span 50 units. The toy canvas also draws 6 px
  // shapes (18.75 units), where only the per-edge bound is meaningful.
  SceneKnobs big;
  big.max_shapes = 1;
  big.min_extent = 18;
  big.max_extent = 28;
  int checked = 0;
  for (const auto& knobs : {SceneKnobs{}, big}) {
    for (std::uint64_t s = 0; s < 100; ++s) {
      const auto sc = generate_scene(s, knobs);
      const auto g = scene_to_samples(sc, "s", {TaskToken::vg}, 8);
      ASSERT_EQ(g.samples.size(), sc.shapes.size());
      for (std::size_t i = 0; i < sc.shapes.size(); ++i) {
        const auto b = parse_bbox_text(g.samples[i].target);
        const auto& px = sc.shapes[i].box;
        EXPECT_LE(std::abs(b.x1 - 100.0 * px.x1 / sc.width), 0.5);
        EXPECT_LE(std::abs(b.x2 - 100.0 * px.x2 / sc.width), 0.5);
        EXPECT_LE(std::abs(b.y1 - 100.0 * px.y1 / sc.height), 0.5);
        EXPECT_LE(std::abs(b.y2 - 100.0 * px.y2 / sc.height), 0.5);
        if (100.0 * (px.x2 - px.x1) / sc.width >= 50 && 100.0 * (px.y2 - px.y1) / sc.height >= 50) {
          EXPECT_GE(iou_continuous(px, sc.width, sc.height, b), 0.96);
          ++checked;
        }
      }
    }
  }
  EXPECT_GT(checked, 50);
}

TEST(Samples, SegTargetDecodesToDownsampledTruth) {
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto sc = generate_scene(s);
    const auto g = scene_to_samples(sc, "s", {TaskToken::seg}, 8);
    ASSERT_EQ(g.samples.size(), sc.shapes.size());
    for (std::size_t i = 0; i < sc.shapes.size(); ++i) {
      const auto d = parse_descriptor_text(g.samples[i].target, 8, scene_labels());
      EXPECT_EQ(decode_mask(d, scene_labels(), 8, 8), oracle::majority_grid(class_mask(sc, sc.shapes[i].label), 8));
    }
  }
}

TEST(Samples, GranularityMatchesRouterAndInvariantsHold) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    DataKnobs k;
    k.scenes = 12;
    k.pairs = 6;
    for (const auto& s : generate_dataset(seed, k).samples) {
      EXPECT_NO_THROW(validate_sample(s)) << s.id;
      ASSERT_TRUE(s.granularity.has_value());
      EXPECT_EQ(*s.granularity, route_granularity(s.prompt));
      EXPECT_EQ(static_cast<int>(s.images.size()), is_change_sample(s) ? 2 : 1);
      EXPECT_TRUE(Tokenizer::standard().covers(s.target)) << s.target;
    }
  }
}

TEST(Samples, CcdSkippedForSingleScenes) {
  const auto g = scene_to_samples(generate_scene(3), "s00003", kAll, 8);
  EXPECT_TRUE(std::none_of(g.samples.begin(), g.samples.end(), [](const auto& s) { return s.task == TaskToken::ccd; }));
  ASSERT_FALSE(g.skipped.empty());
  EXPECT_EQ(g.skipped[0].task, "[CCD]");
}

TEST(Pairs, ChangeMaskIsSymmetricDifference) {
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto base = generate_scene(s);
    ScenePair p;
    try {
      p = mutate_scene(base, s + 1000);
    } catch (const GenerationError&) {
      continue;
    }
    const Mask a = label_mask(p.before), b = label_mask(p.after), c = change_mask(p);
    for (std::size_t i = 0; i < c.labels.size(); ++i) EXPECT_EQ(c.labels[i] != 0, a.labels[i] != b.labels[i]);
    EXPECT_FALSE(change_caption(p).empty());
  }
}

TEST(Pairs, BuildingMutationsGetChangeSeg) {
  int with_seg = 0;
  for (std::uint64_t s = 0; s < 200; ++s) {
    ScenePair p;
    try {
      p = mutate_scene(generate_scene(s), s + 7);
    } catch (const GenerationError&) {
      continue;
    }
    const auto g = pair_to_samples(p, "p", kAll, 8);
    const bool seg = std::any_of(g.samples.begin(), g.samples.end(), [](const auto& x) { return x.task == TaskToken::seg; });
    EXPECT_EQ(seg, scene_labels().name(p.changed.label) == "building");
    with_seg += seg;
    for (const auto& x : g.samples) EXPECT_EQ(x.images.size(), 2u);
  }
  EXPECT_GT(with_seg, 0);
}

TEST(Dataset, DeterministicBytes) {
  DataKnobs k;
  k.scenes = 10;
  k.pairs = 4;
  const auto a = scratch("det_a"), b = scratch("det_b");
  export_dataset(a, generate_dataset(42, k).samples);
  export_dataset(b, generate_dataset(42, k).samples);
  EXPECT_EQ(slurp(a / "data.jsonl"), slurp(b / "data.jsonl"));
  for (const auto& e : fs::directory_iterator(a / "images"))
    EXPECT_EQ(slurp(e.path()), slurp(b / "images" / e.path().filename()));
  export_dataset(b, generate_dataset(43, k).samples);
  EXPECT_NE(slurp(a / "data.jsonl"), slurp(b / "data.jsonl"));
}

TEST(Dataset, KnobsJsonRoundTrip) {
  DataKnobs k;
  k.scenes = 3;
  k.tasks = {TaskToken::vg, TaskToken::seg};
  k.scene.max_shapes = 2;
  EXPECT_EQ(DataKnobs::from_json(k.to_json()).to_json(), k.to_json());
}

// ---- ingest --------------------------------------------------------------------------------------

TEST(Ingest, ExportThenIngestIsIdentity) {
  DataKnobs k;
  k.scenes = 8;
  k.pairs = 4;
  const auto samples = generate_dataset(5, k).samples;
  const auto dir = scratch("roundtrip");
  export_dataset(dir, samples);
  const auto r = ingest_jsonl(dir / "data.jsonl", dir);
  EXPECT_TRUE(r.errors.empty());
  ASSERT_EQ(r.samples.size(), samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) EXPECT_EQ(r.samples[i], samples[i]) << samples[i].id;
}

TEST(Ingest, ValidThreeRecords) {
  DataKnobs k;
  k.scenes = 1;
  k.pairs = 0;
  auto samples = generate_dataset(6, k).samples;
  samples.resize(3);
  const auto dir = scratch("three");
  export_dataset(dir, samples);
  const auto r = ingest_jsonl(dir / "data.jsonl", dir);
  EXPECT_EQ(r.samples.size(), 3u);
  EXPECT_TRUE(r.errors.empty());
}

TEST(Ingest, BadRecordsAreReportedNotThrown) {
  DataKnobs k;
  k.scenes = 1;
  k.pairs = 0;
  auto samples = generate_dataset(7, k).samples;
  const auto dir = scratch("bad");
  export_dataset(dir, {samples[0]});
  auto good = sample_to_json(samples[0]);
  auto ccd_one_image = good;
  ccd_one_image["task"] = "[CCD]";
  ccd_one_image["prompt"] = "<image>\n[CCD] What are the differences between these two images?";
  auto no_version = good;
  no_version.erase("schema_version");
  auto missing_image = good;
  missing_image["images"] = {"images/nope.pgm"};
  auto wrong_level = good;
  wrong_level["granularity"] = "pixel";
  write_jsonl(dir / "mixed.jsonl", {good, ccd_one_image, no_version, missing_image, wrong_level});
  {
    std::ofstream out(dir / "mixed.jsonl", std::ios::app);
    out << "{not json\n";
  }
  const auto r = ingest_jsonl(dir / "mixed.jsonl", dir);
  EXPECT_EQ(r.samples.size(), 1u);
  ASSERT_EQ(r.errors.size(), 5u);
  EXPECT_EQ(r.errors[0].line, 2u);
  EXPECT_EQ(r.errors[0].id, samples[0].id);
  EXPECT_EQ(r.errors[4].line, 6u);
  EXPECT_TRUE(r.errors[0].to_json().contains("error"));
}

TEST(Ingest, MissingProvenanceDefaults) {
  DataKnobs k;
  k.scenes = 1;
  k.pairs = 0;
  auto s = generate_dataset(8, k).samples[0];
  const auto dir = scratch("prov");
  export_dataset(dir, {s});
  auto j = sample_to_json(s);
  j.erase("provenance");
  j.erase("granularity");
  write_jsonl(dir / "p.jsonl", {j});
  const auto r = ingest_jsonl(dir / "p.jsonl", dir);
  ASSERT_EQ(r.samples.size(), 1u);
  EXPECT_EQ(r.samples[0].provenance, "ingested");
  EXPECT_EQ(r.samples[0].granularity, s.granularity);
}

TEST(Images, PgmRoundTrip) {
  const auto sc = generate_scene(9);
  const Image img = render_image(sc);
  const auto dir = scratch("pgm");
  write_image_pgm(dir / "x.pgm", img);
  EXPECT_EQ(read_image_file(dir / "x.pgm"), img);
}
