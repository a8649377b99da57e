#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "dtn/dataset.hpp"
#include "dtn/errors.hpp"
#include "dtn/image_io.hpp"

using namespace dtn;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("dtn_test_data_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

Image checker(std::size_t w, std::size_t h) {
  Image img(w, h);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>((i * 37) % 251);
  return img;
}

// Images referenced by the committed three-image fixture.
fs::path fixture_with_images(const std::string& name) {
  const auto dir = scratch_dir(name);
  fs::copy_file(fs::path(DTN_SOURCE_DIR) / "tests/fixtures/coco3/annotations.json", dir / "annotations.json");
  write_ppm(dir / "a.ppm", checker(64, 48));
  write_png(dir / "b.png", checker(32, 32));
  write_ppm(dir / "c.ppm", checker(40, 30));
  return dir;
}

std::string single_image_doc(const std::string& annotations, const std::string& categories = R"([{"id": 1, "name": "thing"}])") {
  return R"({"images": [{"id": 1, "file_name": "x.ppm", "width": 64, "height": 64}], "annotations": )" +
         annotations + R"(, "categories": )" + categories + "}";
}

}  // namespace

TEST(Synthetic, SameSeedIsByteIdentical) {
  const auto a = generate_synthetic(12, 96, 42);
  const auto b = generate_synthetic(12, 96, 42);
  ASSERT_EQ(a.samples.size(), 12u);
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    EXPECT_EQ(a.samples[i].image.pixels, b.samples[i].image.pixels);
    ASSERT_EQ(a.samples[i].annotations.size(), b.samples[i].annotations.size());
    for (std::size_t j = 0; j < a.samples[i].annotations.size(); ++j) {
      EXPECT_EQ(a.samples[i].annotations[j].box, b.samples[i].annotations[j].box);
      EXPECT_EQ(a.samples[i].annotations[j].class_id, b.samples[i].annotations[j].class_id);
    }
  }
  const auto c = generate_synthetic(12, 96, 43);
  EXPECT_NE(a.samples[0].image.pixels, c.samples[0].image.pixels);
}

TEST(Synthetic, BoxesAreValidInBoundsAndDisjoint) {
  const auto data = generate_synthetic(100, 96, 7);
  EXPECT_NO_THROW(data.validate());
  EXPECT_EQ(data.class_names, synthetic_class_names());
  for (const auto& s : data.samples) {
    ASSERT_GE(s.annotations.size(), 1u);
    ASSERT_LE(s.annotations.size(), 3u);
    for (std::size_t i = 0; i < s.annotations.size(); ++i) {
      const auto& b = s.annotations[i].box;
      EXPECT_TRUE(b.valid());
      EXPECT_GE(b.x_min, 0.0);
      EXPECT_GE(b.y_min, 0.0);
      EXPECT_LE(b.x_max, 96.0);
      EXPECT_LE(b.y_max, 96.0);
      EXPECT_LT(s.annotations[i].class_id, 3u);
      for (std::size_t j = i + 1; j < s.annotations.size(); ++j) EXPECT_EQ(iou(b, s.annotations[j].box), 0.0);
    }
  }
}

TEST(Synthetic, EveryShapePixelLiesInsideItsBox) {
  const auto data = generate_synthetic(50, 96, 11);
  for (const auto& s : data.samples) {
    auto inside_any = [&](std::size_t x, std::size_t y) {
      for (const auto& a : s.annotations)
        if (x + 0.5 > a.box.x_min && x + 0.5 < a.box.x_max && y + 0.5 > a.box.y_min && y + 0.5 < a.box.y_max)
          return true;
      return false;
    };
    const std::uint8_t* bg = nullptr;
    for (std::size_t y = 0; y < 96 && !bg; ++y)
      for (std::size_t x = 0; x < 96 && !bg; ++x)
        if (!inside_any(x, y)) bg = s.image.at(x, y);
    ASSERT_NE(bg, nullptr);
    for (std::size_t y = 0; y < 96; ++y)
      for (std::size_t x = 0; x < 96; ++x) {
        const auto* p = s.image.at(x, y);
        if (p[0] != bg[0] || p[1] != bg[1] || p[2] != bg[2]) ASSERT_TRUE(inside_any(x, y)) << s.source_id;
      }
    // Each box is tight: its border rows and columns contain shape pixels.
    for (const auto& a : s.annotations) {
      bool top = false;
      const auto y = static_cast<std::size_t>(a.box.y_min);
      for (auto x = static_cast<std::size_t>(a.box.x_min); x < static_cast<std::size_t>(a.box.x_max); ++x) {
        const auto* p = s.image.at(x, y);
        top = top || p[0] != bg[0] || p[1] != bg[1] || p[2] != bg[2];
      }
      EXPECT_TRUE(top);
      EXPECT_GE(a.box.width(), 4.0);
    }
  }
}

TEST(Synthetic, ClassHistogramIsNearUniform) {
  const auto data = generate_synthetic(300, 96, 7);
  std::size_t counts[3] = {0, 0, 0}, total = 0;
  for (const auto& s : data.samples)
    for (const auto& a : s.annotations) {
      ++counts[a.class_id];
      ++total;
    }
  const double expected = static_cast<double>(total) / 3.0;
  for (auto c : counts) {
    EXPECT_GE(static_cast<double>(c), 0.8 * expected);
    EXPECT_LE(static_cast<double>(c), 1.2 * expected);
  }
}

TEST(Synthetic, RejectsBadArguments) {
  EXPECT_THROW(generate_synthetic(0, 96, 1), ConfigError);
  SyntheticOptions small;
  small.min_extent = 4;
  EXPECT_THROW(generate_synthetic(1, 96, 1, small), ConfigError);
}

TEST(Coco, HandcraftedFixtureLoadsKnownBoxes) {
  const auto dir = fixture_with_images("fixture");
  CocoLoadReport report;
  const auto m = load_coco_json(dir / "annotations.json", dir, &report);
  EXPECT_EQ(report.dropped_zero_area, 1u);
  EXPECT_EQ(m.class_names, (std::vector<std::string>{"rectangle", "ellipse", "triangle"}));
  ASSERT_EQ(m.samples.size(), 3u);

  const auto& a = m.samples[0];
  EXPECT_EQ(a.image_id, 10);
  EXPECT_EQ(a.source_id, "a.ppm");
  EXPECT_EQ(a.image, checker(64, 48));
  ASSERT_EQ(a.annotations.size(), 2u);
  EXPECT_EQ(a.annotations[0].box, (BBox{10, 20, 40, 40}));
  EXPECT_EQ(a.annotations[0].class_id, 1u);
  EXPECT_EQ(a.annotations[1].box, (BBox{0, 0, 5.5, 8}));
  EXPECT_EQ(a.annotations[1].class_id, 0u);

  const auto& b = m.samples[1];
  EXPECT_EQ(b.image_id, 20);
  EXPECT_EQ(b.image, checker(32, 32));
  ASSERT_EQ(b.annotations.size(), 1u);
  EXPECT_EQ(b.annotations[0].box, (BBox{20, 24, 32, 32}));  // clipped to the image
  EXPECT_EQ(b.annotations[0].class_id, 1u);

  const auto& c = m.samples[2];
  EXPECT_EQ(c.image_id, 30);
  ASSERT_EQ(c.annotations.size(), 1u);
  EXPECT_EQ(c.annotations[0].box, (BBox{1, 2, 4, 6}));
  EXPECT_EQ(c.annotations[0].class_id, 2u);
}

TEST(Coco, CornerConversionAndEmptyAnnotations) {
  const auto dir = scratch_dir("convert");
  write_ppm(dir / "x.ppm", checker(64, 64));
  write_text(dir / "one.json", single_image_doc(R"([{"id": 1, "image_id": 1, "category_id": 1, "bbox": [10, 20, 30, 40]}])"));
  const auto m = load_coco_json(dir / "one.json", dir);
  ASSERT_EQ(m.samples.at(0).annotations.size(), 1u);
  EXPECT_EQ(m.samples[0].annotations[0].box, (BBox{10, 20, 40, 60}));

  write_text(dir / "empty.json", single_image_doc("[]"));
  const auto e = load_coco_json(dir / "empty.json", dir);
  ASSERT_EQ(e.samples.size(), 1u);
  EXPECT_TRUE(e.samples[0].annotations.empty());
}

TEST(Coco, DescriptiveLoadErrors) {
  const auto dir = scratch_dir("errors");
  write_ppm(dir / "x.ppm", checker(64, 64));
  auto load_error = [&](const std::string& text) -> std::string {
    write_text(dir / "doc.json", text);
    try {
      load_coco_json(dir / "doc.json", dir);
    } catch (const LoadError& e) {
      return e.what();
    }
    return "no error";
  };
  EXPECT_NE(load_error("{ not json").find("malformed JSON"), std::string::npos);
  EXPECT_NE(load_error(single_image_doc(R"([{"id": 1, "image_id": 1, "category_id": 9, "bbox": [0, 0, 1, 1]}])"))
                .find("unknown category id 9"),
            std::string::npos);
  EXPECT_NE(load_error(single_image_doc(R"([{"id": 1, "image_id": 5, "category_id": 1, "bbox": [0, 0, 1, 1]}])"))
                .find("unknown image id 5"),
            std::string::npos);
  EXPECT_NE(load_error(R"({"images": [{"id": 1, "file_name": "missing.png", "width": 4, "height": 4}],
                           "annotations": [], "categories": []})")
                .find("missing.png"),
            std::string::npos);
  EXPECT_NE(load_error(R"({"images": []})").find("annotations"), std::string::npos);
  EXPECT_THROW(load_coco_json(dir / "absent.json", dir), LoadError);
}

TEST(Coco, ReserializeReloadIsAFixpoint) {
  const auto dir = fixture_with_images("fixpoint");
  const auto first = load_coco_json(dir / "annotations.json", dir);
  const auto out = scratch_dir("fixpoint_out");
  save_coco_dataset(first, out / "annotations.json", out / "images");
  const auto second = load_coco_json(out / "annotations.json", out / "images");
  EXPECT_TRUE(approx_equal(first, second, 0.0));
  save_coco_dataset(second, out / "again.json", out / "images");
  EXPECT_EQ(to_coco_json(first), to_coco_json(second));

  const auto synth = generate_synthetic(5, 48, 3, {8, 16, 3, 150});
  save_coco_dataset(synth, out / "synth.json", out / "synth");
  EXPECT_TRUE(approx_equal(synth, load_coco_json(out / "synth.json", out / "synth"), 0.0));
}

TEST(Coco, CommittedDeskSetMatchesTheGenerator) {
  const auto dir = std::filesystem::path(DTN_SOURCE_DIR) / "data" / "synthetic32";
  const auto committed = load_coco_json(dir / "annotations.json", dir / "images");
  EXPECT_TRUE(approx_equal(committed, generate_synthetic(32, 96, 7), 0.0));
}

TEST(Resize, ShorterEdgeExamples) {
  ImageSample s;
  s.image = checker(640, 480);
  s.annotations = {{{0, 0, 48, 48}, 0}};
  const auto r = resize_shorter_edge(s, 800);
  EXPECT_EQ(r.image.height, 800u);
  EXPECT_EQ(r.image.width, static_cast<std::size_t>(std::floor(640.0 * 800.0 / 480.0 + 0.5)));
  EXPECT_EQ(r.image.width, 1067u);
  EXPECT_NEAR(r.annotations[0].box.x_max, 80.0, 1e-9);
  EXPECT_NEAR(r.annotations[0].box.y_max, 80.0, 1e-9);
  EXPECT_EQ(r.annotations[0].box.x_min, 0.0);

  ImageSample sq;
  sq.image = checker(96, 96);
  sq.annotations = {{{3, 4, 50, 60}, 2}};
  const auto same = resize_shorter_edge(sq, 96);
  EXPECT_EQ(same.image, sq.image);
  EXPECT_EQ(same.annotations[0].box, sq.annotations[0].box);
}

TEST(Resize, PreservesContainmentAndRelativePositions) {
  const auto data = generate_synthetic(20, 96, 5);
  for (std::size_t target : {40u, 96u, 150u, 800u}) {
    for (const auto& s : data.samples) {
      const auto r = resize_shorter_edge(s, target);
      const double f = static_cast<double>(target) / 96.0;
      ASSERT_EQ(r.annotations.size(), s.annotations.size());
      for (std::size_t i = 0; i < s.annotations.size(); ++i) {
        const auto& b = r.annotations[i].box;
        EXPECT_GE(b.x_min, 0.0);
        EXPECT_LE(b.x_max, static_cast<double>(r.image.width));
        EXPECT_LE(b.y_max, static_cast<double>(r.image.height));
        EXPECT_NEAR(b.x_min, s.annotations[i].box.x_min * f, 1.0);
        EXPECT_NEAR(b.y_max, s.annotations[i].box.y_max * f, 1.0);
      }
    }
  }
}

TEST(Normalization, MapsBytesToSymmetricRange) {
  Image img(3, 1, 1);
  img.pixels = {0, 255, 51};
  const auto t = to_input_tensor<double>(img);
  EXPECT_EQ(t.shape(), (Shape{1, 3, 1}));
  EXPECT_DOUBLE_EQ(t.data()[0], -1.0);
  EXPECT_DOUBLE_EQ(t.data()[1], 1.0);
  EXPECT_NEAR(t.data()[2], (51.0 / 255.0 - 0.5) / 0.5, 1e-15);
}

TEST(Flip, MirrorsPixelsAndBoxesAndIsAnInvolution) {
  const auto data = generate_synthetic(4, 48, 8, {8, 16, 3, 150});
  for (const auto& s : data.samples) {
    const auto f = flip_horizontal(s);
    EXPECT_EQ(f.image.at(0, 5)[1], s.image.at(47, 5)[1]);
    for (std::size_t i = 0; i < s.annotations.size(); ++i) {
      EXPECT_EQ(f.annotations[i].box.x_min, 48.0 - s.annotations[i].box.x_max);
      EXPECT_EQ(f.annotations[i].box.y_min, s.annotations[i].box.y_min);
    }
    const auto back = flip_horizontal(f);
    EXPECT_EQ(back.image, s.image);
    for (std::size_t i = 0; i < s.annotations.size(); ++i) EXPECT_EQ(back.annotations[i].box, s.annotations[i].box);
  }
}

TEST(ImageIo, PngAndPpmRoundTrip) {
  const auto dir = scratch_dir("io");
  const auto img = checker(13, 7);
  write_png(dir / "x.png", img);
  write_ppm(dir / "x.ppm", img);
  EXPECT_EQ(read_image(dir / "x.png"), img);
  EXPECT_EQ(read_image(dir / "x.ppm"), img);
  write_text(dir / "bad.png", "definitely not an image");
  EXPECT_THROW(read_image(dir / "bad.png"), LoadError);
  EXPECT_THROW(read_image(dir / "nope.png"), LoadError);
}

TEST(Manifest, ValidateRejectsOutOfBoundsBoxes) {
  DatasetManifest m;
  m.class_names = {"a"};
  ImageSample s;
  s.image = Image(10, 10);
  s.annotations = {{{0, 0, 11, 5}, 0}};
  m.samples.push_back(s);
  EXPECT_THROW(m.validate(), LoadError);
  m.samples[0].annotations = {{{0, 0, 5, 5}, 1}};
  EXPECT_THROW(m.validate(), LoadError);
  m.samples[0].annotations = {{{0, 0, 5, 5}, 0}};
  EXPECT_NO_THROW(m.validate());
}
