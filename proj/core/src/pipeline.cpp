#include "dtn/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <sstream>

#include "dtn/atomic_file.hpp"
#include "dtn/errors.hpp"

namespace dtn {

namespace {

std::string shortest(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string checkpoint_name(std::uint64_t iteration) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ckpt_%06llu.dtn", static_cast<unsigned long long>(iteration));
  return buf;
}

const Rgb kClassColors[] = {{230, 25, 75}, {0, 130, 200}, {245, 130, 48}, {145, 30, 180},
                            {70, 240, 240}, {240, 50, 230}, {210, 245, 60}, {128, 128, 0}};

}  // namespace

DatasetManifest load_dataset(const DataConfig& data) {
  DatasetManifest m = data.source == DataSource::Coco
                          ? load_coco_json(data.annotations, data.images)
                          : generate_synthetic(data.synthetic_count, data.resize_target, data.synthetic_seed);
  for (auto& s : m.samples) s = resize_shorter_edge(s, data.resize_target);
  return m;
}

std::string loss_csv(const std::vector<LossRecord>& trace) {
  std::string out = "iteration,phase,loss,classification,regression\n";
  for (const auto& r : trace) {
    out += std::to_string(r.iteration) + "," + std::to_string(r.phase) + "," + shortest(r.loss) + "," +
           shortest(r.classification) + "," + shortest(r.regression) + "\n";
  }
  return out;
}

TrainRunResult run_training(const RunConfig& config, const DatasetManifest& data, const TrainRunOptions& options) {
  config.validate();
  auto model = DetTransNet<float>::create(config.model, config.seed());
  std::optional<TrainerState> restored;
  if (options.resume) {
    const auto ckpt = load_checkpoint(*options.resume);
    load_parameters(model, ckpt);
    restored = ckpt.state;
  }
  Trainer trainer(model, data, config.train, config.optimizer);
  if (restored) trainer.restore(*restored);

  write_file_atomic(options.out_dir / "config.yaml", config.to_yaml());
  auto save = [&](const std::string& name) {
    const auto path = options.out_dir / name;
    save_checkpoint(path, make_checkpoint(config, model, trainer.state()));
    write_file_atomic(options.out_dir / "loss.csv", loss_csv(trainer.trace()));
    return path;
  };

  TrainRunResult result;
  while (!trainer.finished()) {
    const auto rec = trainer.step();
    if (options.on_step) options.on_step(rec);
    const bool cadence = config.output.checkpoint_every > 0 && rec.iteration % config.output.checkpoint_every == 0;
    const bool stop = options.stop_after && rec.iteration >= *options.stop_after && !trainer.finished();
    if (cadence || stop) result.final_checkpoint = save(checkpoint_name(rec.iteration));
    if (stop) {
      result.trace = trainer.trace();
      return result;
    }
  }
  result.final_checkpoint = save("final.dtn");
  result.trace = trainer.trace();
  result.completed = true;
  return result;
}

DetectionsByImage detect_dataset(const DetTransNet<float>& model, const DatasetManifest& data) {
  DetectionsByImage out;
  for (const auto& s : data.samples) {
    out[s.image_id] = run_inference(model, to_input_tensor<float>(s.image)).detections;
  }
  return out;
}

std::vector<Detection> detect_image(const DetTransNet<float>& model, const Image& image, std::size_t resize_target,
                                    double score_threshold) {
  ImageSample sample;
  sample.image = image;
  const auto resized = resize_shorter_edge(sample, resize_target);
  PatchConfig pc = model.config.patch;
  pc.height = resized.image.height;
  pc.width = resized.image.width;
  pc.validate();
  if (pc.height != model.config.patch.height || pc.width != model.config.patch.width ||
      resized.image.channels != pc.channels) {
    throw ConfigError("detect: resized image is H=" + std::to_string(pc.height) + ", W=" + std::to_string(pc.width) +
                      " but the model expects H=" + std::to_string(model.config.patch.height) +
                      ", W=" + std::to_string(model.config.patch.width) + " (P=" + std::to_string(pc.patch_size) +
                      ", m=" + std::to_string(pc.overlap) + ")");
  }
  DetTransNet<float> m = model;  // shares weights
  m.config.head.score_threshold = std::min(m.config.head.score_threshold, std::max(score_threshold, 0.0));
  auto dets = run_inference(m, to_input_tensor<float>(resized.image)).detections;
  const double sx = static_cast<double>(resized.image.width) / static_cast<double>(image.width);
  const double sy = static_cast<double>(resized.image.height) / static_cast<double>(image.height);
  std::vector<Detection> out;
  for (auto d : dets) {
    if (!(d.score > score_threshold)) continue;
    d.box = clip_box({d.box.x_min / sx, d.box.y_min / sy, d.box.x_max / sx, d.box.y_max / sy},
                     static_cast<double>(image.width), static_cast<double>(image.height));
    if (d.box.valid()) out.push_back(d);
  }
  std::stable_sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return out;
}

std::string pr_curve_svg(const DetectionsByImage& detections, const DatasetManifest& data) {
  constexpr double left = 50, top = 20, w = 320, h = 240;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"520\" height=\"300\" font-family=\"sans-serif\" "
         "font-size=\"11\">\n";
  svg << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << w << "\" height=\"" << h
      << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double f = i / 4.0;
    char label[16];
    std::snprintf(label, sizeof(label), "%.2f", f);
    svg << "<text x=\"" << left + f * w << "\" y=\"" << top + h + 14 << "\" text-anchor=\"middle\">" << label
        << "</text>\n";
    svg << "<text x=\"" << left - 4 << "\" y=\"" << top + h - f * h + 4 << "\" text-anchor=\"end\">" << label
        << "</text>\n";
  }
  svg << "<text x=\"" << left + w / 2 << "\" y=\"" << top + h + 30 << "\" text-anchor=\"middle\">recall</text>\n";
  svg << "<text x=\"12\" y=\"" << top + h / 2 << "\" transform=\"rotate(-90 12 " << top + h / 2
      << ")\" text-anchor=\"middle\">precision</text>\n";
  for (std::size_t c = 0; c < data.num_classes(); ++c) {
    const auto& col = kClassColors[c % std::size(kClassColors)];
    char color[16];
    std::snprintf(color, sizeof(color), "#%02x%02x%02x", col[0], col[1], col[2]);
    const auto curve = precision_recall_curve(detections, data, c, 0.5);
    if (!curve.empty()) {
      svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
      for (const auto& p : curve) {
        char pt[64];
        std::snprintf(pt, sizeof(pt), "%.2f,%.2f ", left + p.recall * w, top + h - p.precision * h);
        svg << pt;
      }
      svg << "\"/>\n";
    }
    svg << "<text x=\"" << left + w + 15 << "\" y=\"" << top + 15 + 16.0 * static_cast<double>(c) << "\" fill=\""
        << color << "\">" << data.class_names[c] << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

Image annotate(const Image& image, const std::vector<Annotation>& truth, const std::vector<Detection>& detections) {
  Image out = image;
  for (const auto& a : truth) draw_box(out, a.box, {0, 200, 0});
  for (const auto& d : detections) draw_box(out, d.box, kClassColors[d.class_id % std::size(kClassColors)]);
  return out;
}

}  // namespace dtn
