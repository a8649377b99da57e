#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dtn/geometry.hpp"
#include "dtn/image_io.hpp"
#include "dtn/tensor.hpp"

namespace dtn {

struct Annotation {
  BBox box;
  std::size_t class_id = 0;
};

struct ImageSample {
  std::int64_t image_id = 0;
  /// File name relative to the dataset's image directory.
  std::string source_id;
  Image image;
  std::vector<Annotation> annotations;
};

enum class Split { Train, Val, Test };

const char* to_string(Split split);
Split parse_split(const std::string& s);

struct DatasetManifest {
  std::vector<ImageSample> samples;
  std::vector<std::string> class_names;
  Split split = Split::Train;

  std::size_t num_classes() const { return class_names.size(); }
  /// Throws LoadError when a box leaves its image or a class id is out of range.
  void validate() const;
  const ImageSample* find(std::int64_t image_id) const;
};

struct SyntheticOptions {
  std::size_t min_extent = 12;
  std::size_t max_extent = 32;
  std::size_t max_shapes = 3;
  /// Minimum L1 distance between a shape colour and the background.
  int min_contrast = 150;
};

inline const std::vector<std::string>& synthetic_class_names() {
  static const std::vector<std::string> names{"rectangle", "ellipse", "triangle"};
  return names;
}

/// Uniform background plus 1..max_shapes non-overlapping filled rectangles,
/// ellipses or triangles. Boxes are the tight pixel bounds of what was drawn.
/// Byte-identical output for a given seed.
DatasetManifest generate_synthetic(std::size_t count, std::size_t image_size, std::uint64_t seed,
                                   const SyntheticOptions& options = {}, Split split = Split::Train);

/// Image with a single shape of the given class and box; used by smoke tests.
ImageSample make_single_shape_sample(std::size_t image_size, std::size_t class_id, const BBox& box,
                                     Rgb background, Rgb color);

struct CocoLoadReport {
  std::size_t dropped_zero_area = 0;
};

/// Reads the COCO subset: images[{id,file_name,width,height}],
/// annotations[{id,image_id,category_id,bbox}], categories[{id,name}].
/// Category ids are remapped to dense [0, K) in ascending id order, samples
/// are ordered by image id, boxes are clipped to the image.
DatasetManifest load_coco_json(const std::filesystem::path& annotation_path,
                               const std::filesystem::path& image_dir,
                               CocoLoadReport* report = nullptr);

/// Canonical COCO document: category id = dense index + 1, annotation ids
/// numbered from 1 in sample order.
nlohmann::json to_coco_json(const DatasetManifest& manifest);

/// Writes every image as PNG under image_dir and the canonical JSON.
void save_coco_dataset(const DatasetManifest& manifest, const std::filesystem::path& annotation_path,
                       const std::filesystem::path& image_dir);

/// Factor that maps the shorter image edge onto `target`.
double shorter_edge_scale(const Image& image, std::size_t target);

/// Bilinear resize so the shorter edge becomes `target`; output extents are
/// round-half-up of extent * factor and boxes scale by the same factor.
ImageSample resize_shorter_edge(const ImageSample& sample, std::size_t target);

ImageSample flip_horizontal(const ImageSample& sample);

/// Per-channel (x / 255 - 0.5) / 0.5, shaped H x W x C.
template <typename T>
Tensor<T> to_input_tensor(const Image& image);

bool approx_equal(const DatasetManifest& a, const DatasetManifest& b, double tol = 1e-9);

}  // namespace dtn
