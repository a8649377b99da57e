#include "dtn/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "dtn/errors.hpp"
#include "dtn/random.hpp"

namespace dtn {

using nlohmann::json;

const char* to_string(Split split) {
  switch (split) {
    case Split::Train:
      return "train";
    case Split::Val:
      return "val";
    case Split::Test:
      return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw ConfigError("unknown split '" + s + "' (train, val or test)");
}

void DatasetManifest::validate() const {
  for (const auto& s : samples) {
    for (const auto& a : s.annotations) {
      if (!a.box.valid() || a.box.x_min < 0.0 || a.box.y_min < 0.0 ||
          a.box.x_max > static_cast<double>(s.image.width) ||
          a.box.y_max > static_cast<double>(s.image.height)) {
        throw LoadError("annotation box outside image " + s.source_id);
      }
      if (a.class_id >= class_names.size()) {
        throw LoadError("class id " + std::to_string(a.class_id) + " out of range in " + s.source_id);
      }
    }
  }
}

const ImageSample* DatasetManifest::find(std::int64_t image_id) const {
  for (const auto& s : samples)
    if (s.image_id == image_id) return &s;
  return nullptr;
}

namespace {

enum class ShapeKind { Rectangle = 0, Ellipse = 1, Triangle = 2 };

bool covers(ShapeKind kind, double px, double py, double x0, double y0, double w, double h) {
  switch (kind) {
    case ShapeKind::Rectangle:
      return px >= x0 && px < x0 + w && py >= y0 && py < y0 + h;
    case ShapeKind::Ellipse: {
      const double nx = (px - (x0 + 0.5 * w)) / (0.5 * w);
      const double ny = (py - (y0 + 0.5 * h)) / (0.5 * h);
      return nx * nx + ny * ny <= 1.0;
    }
    case ShapeKind::Triangle: {
      // Apex at top centre, base along the bottom edge.
      if (py < y0 || py > y0 + h) return false;
      const double half = 0.5 * w * (py - y0) / h;
      const double cx = x0 + 0.5 * w;
      return px >= cx - half && px <= cx + half;
    }
  }
  return false;
}

// Rasterizes by pixel-centre inclusion and returns the tight pixel bounds.
std::optional<BBox> draw_shape(Image& img, ShapeKind kind, std::size_t x0, std::size_t y0,
                               std::size_t w, std::size_t h, Rgb color) {
  std::size_t min_x = img.width, min_y = img.height, max_x = 0, max_y = 0;
  bool any = false;
  for (std::size_t y = y0; y < y0 + h; ++y) {
    for (std::size_t x = x0; x < x0 + w; ++x) {
      if (!covers(kind, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5,
                  static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(w),
                  static_cast<double>(h))) {
        continue;
      }
      auto* p = img.at(x, y);
      p[0] = color[0];
      p[1] = color[1];
      p[2] = color[2];
      min_x = std::min(min_x, x);
      min_y = std::min(min_y, y);
      max_x = std::max(max_x, x);
      max_y = std::max(max_y, y);
      any = true;
    }
  }
  if (!any) return std::nullopt;
  return BBox{static_cast<double>(min_x), static_cast<double>(min_y),
              static_cast<double>(max_x + 1), static_cast<double>(max_y + 1)};
}

Rgb random_color(Rng& rng) {
  return {static_cast<std::uint8_t>(rng.uniform_index(256)),
          static_cast<std::uint8_t>(rng.uniform_index(256)),
          static_cast<std::uint8_t>(rng.uniform_index(256))};
}

int l1(const Rgb& a, const Rgb& b) {
  int d = 0;
  for (int c = 0; c < 3; ++c) d += std::abs(int(a[c]) - int(b[c]));
  return d;
}

void fill(Image& img, Rgb color) {
  for (std::size_t i = 0; i < img.width * img.height; ++i) {
    img.pixels[3 * i] = color[0];
    img.pixels[3 * i + 1] = color[1];
    img.pixels[3 * i + 2] = color[2];
  }
}

std::string synthetic_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "synth_%05zu.png", index);
  return buf;
}

}  // namespace

DatasetManifest generate_synthetic(std::size_t count, std::size_t image_size, std::uint64_t seed,
                                   const SyntheticOptions& options, Split split) {
  if (count == 0) throw ConfigError("generate_synthetic: count must be at least 1");
  if (options.min_extent < 8 || options.max_extent < options.min_extent ||
      options.max_extent > image_size) {
    throw ConfigError("generate_synthetic: extents must satisfy 8 <= min <= max <= image size");
  }
  if (options.max_shapes == 0) throw ConfigError("generate_synthetic: max_shapes must be positive");
  DatasetManifest manifest;
  manifest.class_names = synthetic_class_names();
  manifest.split = split;
  for (std::size_t k = 0; k < count; ++k) {
    Rng rng({seed, 0x5EED, k});
    ImageSample sample;
    sample.image_id = static_cast<std::int64_t>(k + 1);
    sample.source_id = synthetic_name(k);
    sample.image = Image(image_size, image_size, 3);
    const Rgb background = random_color(rng);
    fill(sample.image, background);
    const std::size_t wanted = 1 + rng.uniform_index(options.max_shapes);
    std::vector<BBox> placed;
    for (std::size_t attempt = 0; placed.size() < wanted && attempt < 200; ++attempt) {
      const auto kind = static_cast<ShapeKind>(rng.uniform_index(3));
      const std::size_t span = options.max_extent - options.min_extent + 1;
      const std::size_t w = options.min_extent + rng.uniform_index(span);
      const std::size_t h = options.min_extent + rng.uniform_index(span);
      const std::size_t x0 = rng.uniform_index(image_size - w + 1);
      const std::size_t y0 = rng.uniform_index(image_size - h + 1);
      // Keep a 2 px gap so shapes never touch and boxes never share pixels.
      const BBox footprint{double(x0) - 2, double(y0) - 2, double(x0 + w) + 2, double(y0 + h) + 2};
      const bool clash = std::any_of(placed.begin(), placed.end(),
                                     [&](const BBox& b) { return iou(b, footprint) > 0.0; });
      if (clash) continue;
      Rgb color = random_color(rng);
      while (l1(color, background) < options.min_contrast) color = random_color(rng);
      const auto box = draw_shape(sample.image, kind, x0, y0, w, h, color);
      if (!box) continue;
      placed.push_back({double(x0), double(y0), double(x0 + w), double(y0 + h)});
      sample.annotations.push_back({*box, static_cast<std::size_t>(kind)});
    }
    manifest.samples.push_back(std::move(sample));
  }
  return manifest;
}

ImageSample make_single_shape_sample(std::size_t image_size, std::size_t class_id, const BBox& box,
                                     Rgb background, Rgb color) {
  if (class_id > 2) throw ConfigError("make_single_shape_sample: class id must be 0, 1 or 2");
  ImageSample sample;
  sample.image_id = 1;
  sample.source_id = "single.png";
  sample.image = Image(image_size, image_size, 3);
  fill(sample.image, background);
  const auto x0 = static_cast<std::size_t>(box.x_min), y0 = static_cast<std::size_t>(box.y_min);
  const auto w = static_cast<std::size_t>(box.width()), h = static_cast<std::size_t>(box.height());
  if (x0 + w > image_size || y0 + h > image_size || w == 0 || h == 0) {
    throw GeometryError("make_single_shape_sample: box must lie inside the image");
  }
  auto drawn = draw_shape(sample.image, static_cast<ShapeKind>(class_id), x0, y0, w, h, color);
  if (drawn) sample.annotations.push_back({*drawn, class_id});
  return sample;
}

namespace {

template <typename V>
V require_field(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) {
    throw LoadError(where + ": missing field '" + key + "'");
  }
  try {
    return obj.at(key).get<V>();
  } catch (const json::exception& e) {
    throw LoadError(where + ": bad field '" + key + "': " + e.what());
  }
}

}  // namespace

DatasetManifest load_coco_json(const std::filesystem::path& annotation_path,
                               const std::filesystem::path& image_dir, CocoLoadReport* report) {
  std::ifstream in(annotation_path);
  if (!in) throw LoadError("cannot open annotation file " + annotation_path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw LoadError("malformed JSON in " + annotation_path.string() + ": " + e.what());
  }
  if (!doc.is_object()) throw LoadError("COCO document must be a JSON object");
  for (const char* key : {"images", "annotations", "categories"}) {
    if (!doc.contains(key) || !doc[key].is_array()) {
      throw LoadError(std::string("COCO document needs an array '") + key + "'");
    }
  }

  std::map<std::int64_t, std::string> categories;
  for (const auto& c : doc["categories"]) {
    const auto id = require_field<std::int64_t>(c, "id", "category");
    if (!categories.emplace(id, require_field<std::string>(c, "name", "category")).second) {
      throw LoadError("duplicate category id " + std::to_string(id));
    }
  }
  DatasetManifest manifest;
  std::map<std::int64_t, std::size_t> dense;
  for (const auto& [id, name] : categories) {
    dense[id] = manifest.class_names.size();
    manifest.class_names.push_back(name);
  }

  std::map<std::int64_t, ImageSample> by_id;
  for (const auto& im : doc["images"]) {
    ImageSample s;
    s.image_id = require_field<std::int64_t>(im, "id", "image");
    s.source_id = require_field<std::string>(im, "file_name", "image " + std::to_string(s.image_id));
    const auto w = require_field<std::size_t>(im, "width", s.source_id);
    const auto h = require_field<std::size_t>(im, "height", s.source_id);
    s.image = read_image(image_dir / s.source_id);
    if (s.image.width != w || s.image.height != h) {
      throw LoadError("image " + s.source_id + " is " + std::to_string(s.image.width) + "x" +
                      std::to_string(s.image.height) + " but the annotation file says " +
                      std::to_string(w) + "x" + std::to_string(h));
    }
    if (!by_id.emplace(s.image_id, std::move(s)).second) {
      throw LoadError("duplicate image id " + std::to_string(im["id"].get<std::int64_t>()));
    }
  }

  std::size_t dropped = 0;
  for (const auto& a : doc["annotations"]) {
    const auto image_id = require_field<std::int64_t>(a, "image_id", "annotation");
    const auto cat = require_field<std::int64_t>(a, "category_id", "annotation");
    const auto bbox = require_field<std::vector<double>>(a, "bbox", "annotation");
    auto it = by_id.find(image_id);
    if (it == by_id.end()) throw LoadError("annotation references unknown image id " + std::to_string(image_id));
    auto ct = dense.find(cat);
    if (ct == dense.end()) throw LoadError("annotation references unknown category id " + std::to_string(cat));
    if (bbox.size() != 4) throw LoadError("annotation bbox must be [x, y, w, h]");
    auto& s = it->second;
    BBox box{bbox[0], bbox[1], bbox[0] + bbox[2], bbox[1] + bbox[3]};
    box = clip_box(box, static_cast<double>(s.image.width), static_cast<double>(s.image.height));
    if (!(bbox[2] > 0.0 && bbox[3] > 0.0) || !box.valid()) {
      ++dropped;
      continue;
    }
    s.annotations.push_back({box, ct->second});
  }
  if (report) report->dropped_zero_area = dropped;
  for (auto& [id, s] : by_id) manifest.samples.push_back(std::move(s));
  manifest.validate();
  return manifest;
}

json to_coco_json(const DatasetManifest& manifest) {
  json doc;
  doc["categories"] = json::array();
  for (std::size_t k = 0; k < manifest.class_names.size(); ++k) {
    doc["categories"].push_back({{"id", k + 1}, {"name", manifest.class_names[k]}});
  }
  doc["images"] = json::array();
  doc["annotations"] = json::array();
  std::int64_t next_id = 1;
  for (const auto& s : manifest.samples) {
    doc["images"].push_back({{"id", s.image_id},
                             {"file_name", s.source_id},
                             {"width", s.image.width},
                             {"height", s.image.height}});
    for (const auto& a : s.annotations) {
      doc["annotations"].push_back(
          {{"id", next_id++},
           {"image_id", s.image_id},
           {"category_id", a.class_id + 1},
           {"bbox", {a.box.x_min, a.box.y_min, a.box.width(), a.box.height()}}});
    }
  }
  return doc;
}

void save_coco_dataset(const DatasetManifest& manifest, const std::filesystem::path& annotation_path,
                       const std::filesystem::path& image_dir) {
  std::filesystem::create_directories(image_dir);
  if (annotation_path.has_parent_path()) std::filesystem::create_directories(annotation_path.parent_path());
  for (const auto& s : manifest.samples) write_png(image_dir / s.source_id, s.image);
  std::ofstream out(annotation_path);
  out << to_coco_json(manifest).dump(1) << '\n';
  if (!out) throw std::runtime_error("cannot write " + annotation_path.string());
}

double shorter_edge_scale(const Image& image, std::size_t target) {
  if (target == 0) throw ConfigError("resize: target must be at least 1");
  const auto shorter = std::min(image.width, image.height);
  if (shorter == 0) throw LoadError("resize: empty image");
  return static_cast<double>(target) / static_cast<double>(shorter);
}

ImageSample resize_shorter_edge(const ImageSample& sample, std::size_t target) {
  const double f = shorter_edge_scale(sample.image, target);
  const auto& src = sample.image;
  const auto round_half_up = [](double v) { return static_cast<std::size_t>(std::floor(v + 0.5)); };
  const std::size_t nw = std::max<std::size_t>(1, round_half_up(static_cast<double>(src.width) * f));
  const std::size_t nh = std::max<std::size_t>(1, round_half_up(static_cast<double>(src.height) * f));
  ImageSample out = sample;
  if (nw == src.width && nh == src.height) return out;

  Image dst(nw, nh, src.channels);
  const double sx = static_cast<double>(src.width) / static_cast<double>(nw);
  const double sy = static_cast<double>(src.height) / static_cast<double>(nh);
  for (std::size_t y = 0; y < nh; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0,
                                 static_cast<double>(src.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, src.height - 1);
    const double ly = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < nw; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0,
                                   static_cast<double>(src.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, src.width - 1);
      const double lx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < src.channels; ++c) {
        const double v = (1 - ly) * ((1 - lx) * src.at(x0, y0)[c] + lx * src.at(x1, y0)[c]) +
                         ly * ((1 - lx) * src.at(x0, y1)[c] + lx * src.at(x1, y1)[c]);
        dst.at(x, y)[c] = static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
      }
    }
  }
  out.image = std::move(dst);
  for (auto& a : out.annotations) {
    a.box = clip_box({a.box.x_min * f, a.box.y_min * f, a.box.x_max * f, a.box.y_max * f},
                     static_cast<double>(nw), static_cast<double>(nh));
  }
  return out;
}

ImageSample flip_horizontal(const ImageSample& sample) {
  ImageSample out = sample;
  const auto& src = sample.image;
  for (std::size_t y = 0; y < src.height; ++y)
    for (std::size_t x = 0; x < src.width; ++x)
      std::copy_n(src.at(x, y), src.channels, out.image.at(src.width - 1 - x, y));
  const double w = static_cast<double>(src.width);
  for (auto& a : out.annotations) a.box = {w - a.box.x_max, a.box.y_min, w - a.box.x_min, a.box.y_max};
  return out;
}

template <typename T>
Tensor<T> to_input_tensor(const Image& image) {
  std::vector<T> v(image.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = (static_cast<T>(image.pixels[i]) / T(255) - T(0.5)) / T(0.5);
  }
  return Tensor<T>::from_vector({image.height, image.width, image.channels}, std::move(v));
}

template Tensor<float> to_input_tensor(const Image&);
template Tensor<double> to_input_tensor(const Image&);

bool approx_equal(const DatasetManifest& a, const DatasetManifest& b, double tol) {
  if (a.class_names != b.class_names || a.samples.size() != b.samples.size()) return false;
  const auto close = [tol](double x, double y) { return std::abs(x - y) <= tol; };
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    const auto& sa = a.samples[i];
    const auto& sb = b.samples[i];
    if (sa.image_id != sb.image_id || sa.source_id != sb.source_id || !(sa.image == sb.image) ||
        sa.annotations.size() != sb.annotations.size()) {
      return false;
    }
    for (std::size_t j = 0; j < sa.annotations.size(); ++j) {
      const auto& x = sa.annotations[j];
      const auto& y = sb.annotations[j];
      if (x.class_id != y.class_id || !close(x.box.x_min, y.box.x_min) ||
          !close(x.box.y_min, y.box.y_min) || !close(x.box.x_max, y.box.x_max) ||
          !close(x.box.y_max, y.box.y_max)) {
        return false;
      }
    }
  }
  return true;
}

}  // namespace dtn
