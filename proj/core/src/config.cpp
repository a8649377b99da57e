#include "dtn/config.hpp"

#include <charconv>
#include <concepts>
#include <fstream>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "dtn/errors.hpp"

namespace dtn {

namespace {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  std::string s(buf, res.ptr);
  // Keep a decimal marker so the value reads back as a float.
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

// Visits every field with its section, key and a typed reference. The visit
// order is the canonical serialization order.
template <typename Config, typename V>
void visit_fields(Config& c, V&& v) {
  auto& p = c.model.patch;
  v("patch", "height", p.height);
  v("patch", "width", p.width);
  v("patch", "channels", p.channels);
  v("patch", "patch_size", p.patch_size);
  v("patch", "overlap", p.overlap);
  auto& e = c.model.encoder;
  v("encoder", "embed_dim", e.embed_dim);
  v("encoder", "depth", e.depth);
  v("encoder", "heads", e.heads);
  v("encoder", "mlp_ratio", e.mlp_ratio);
  v("encoder", "dropout", e.dropout);
  v("encoder", "residual_blocks", c.model.residual_blocks);
  auto& r = c.model.rpn;
  v("rpn", "kernel_size", r.kernel_size);
  v("rpn", "hidden_dim", r.hidden_dim);
  v("rpn", "anchor_scales", r.anchors.scales);
  v("rpn", "anchor_ratios", r.anchors.aspect_ratios);
  v("rpn", "nms_iou", r.nms_iou);
  v("rpn", "pre_nms_top", r.pre_nms_top);
  v("rpn", "post_nms_top", r.post_nms_top);
  v("rpn", "batch_size", c.train.rpn_batch);
  auto& h = c.model.head;
  v("head", "pool_size", h.pool_size);
  v("head", "hidden_dim", h.hidden_dim);
  v("head", "num_classes", h.num_classes);
  v("head", "nms_iou", h.nms_iou);
  v("head", "score_threshold", h.score_threshold);
  v("head", "max_detections", h.max_detections);
  auto& t = c.train;
  v("train", "seed", t.seed);
  v("train", "phase1_iters", t.phase1_iters);
  v("train", "phase2_iters", t.phase2_iters);
  v("train", "batch_size", t.batch_size);
  v("train", "rois_per_image", t.rois_per_image);
  v("train", "flip", t.flip);
  v("train", "phase2_lr_scale", t.phase2_lr_scale);
  auto& o = c.optimizer;
  v("optimizer", "lr", o.lr);
  v("optimizer", "beta1", o.beta1);
  v("optimizer", "beta2", o.beta2);
  v("optimizer", "eps", o.eps);
  v("optimizer", "weight_decay", o.weight_decay);
  v("optimizer", "warmup_iters", o.warmup_iters);
  auto& d = c.data;
  v("data", "source", d.source);
  v("data", "annotations", d.annotations);
  v("data", "images", d.images);
  v("data", "synthetic_count", d.synthetic_count);
  v("data", "synthetic_seed", d.synthetic_seed);
  v("data", "resize_target", d.resize_target);
  v("output", "dir", c.output.dir);
  v("output", "checkpoint_every", c.output.checkpoint_every);
}

std::string field_name(const char* section, const char* key) {
  return std::string(section) + "." + key;
}

template <typename T>
T scalar_as(const YAML::Node& n, const std::string& field, const char* expected) {
  if (!n.IsScalar()) throw ConfigError(field + ": expected " + expected);
  try {
    return n.as<T>();
  } catch (const YAML::Exception&) {
    throw ConfigError(field + ": expected " + expected + ", got '" + n.Scalar() + "'");
  }
}

struct Reader {
  const YAML::Node& root;

  template <std::unsigned_integral U>
  void read(const YAML::Node& n, const std::string& f, U& out) {
    if (n.IsScalar() && !n.Scalar().empty() && n.Scalar()[0] == '-')
      throw ConfigError(f + ": expected a non-negative integer, got '" + n.Scalar() + "'");
    out = scalar_as<U>(n, f, "a non-negative integer");
  }
  void read(const YAML::Node& n, const std::string& f, double& out) {
    out = scalar_as<double>(n, f, "a number");
  }
  void read(const YAML::Node& n, const std::string& f, bool& out) { out = scalar_as<bool>(n, f, "true or false"); }
  void read(const YAML::Node& n, const std::string& f, std::string& out) {
    out = scalar_as<std::string>(n, f, "a string");
  }
  void read(const YAML::Node& n, const std::string& f, std::vector<double>& out) {
    if (!n.IsSequence()) throw ConfigError(f + ": expected a list of numbers");
    out.clear();
    for (std::size_t i = 0; i < n.size(); ++i) out.push_back(scalar_as<double>(n[i], f, "a list of numbers"));
  }
  void read(const YAML::Node& n, const std::string& f, DataSource& out) {
    const auto s = scalar_as<std::string>(n, f, "synthetic or coco");
    if (s == "synthetic") {
      out = DataSource::Synthetic;
    } else if (s == "coco") {
      out = DataSource::Coco;
    } else {
      throw ConfigError(f + ": expected synthetic or coco, got '" + s + "'");
    }
  }

  template <typename T>
  void operator()(const char* section, const char* key, T& out) {
    const YAML::Node sec = root[section];
    if (!sec) return;
    const YAML::Node n = sec[key];
    if (!n || n.IsNull()) return;
    read(n, field_name(section, key), out);
  }
};

struct Writer {
  YAML::Node root;

  template <std::unsigned_integral U>
  std::string text(const U& v) {
    return std::to_string(v);
  }
  std::string text(const double& v) { return format_double(v); }
  std::string text(const bool& v) { return v ? "true" : "false"; }
  std::string text(const DataSource& v) { return v == DataSource::Coco ? "coco" : "synthetic"; }

  void operator()(const char* section, const char* key, const std::string& v) { root[section][key] = v; }
  void operator()(const char* section, const char* key, const std::vector<double>& v) {
    YAML::Node seq(YAML::NodeType::Sequence);
    seq.SetStyle(YAML::EmitterStyle::Flow);
    for (double x : v) seq.push_back(format_double(x));
    root[section][key] = seq;
  }
  template <typename T>
  void operator()(const char* section, const char* key, const T& v) {
    root[section][key] = text(v);
  }
};

void check_keys(const YAML::Node& root) {
  if (!root.IsMap()) throw ConfigError("config: top level must be a mapping of sections");
  std::set<std::string> known;
  RunConfig probe;
  visit_fields(probe, [&](const char* section, const char* key, auto&) { known.insert(field_name(section, key)); });
  std::set<std::string> sections;
  for (const auto& f : known) sections.insert(f.substr(0, f.find('.')));
  for (const auto& kv : root) {
    const auto section = kv.first.as<std::string>();
    if (!sections.count(section)) throw ConfigError("config: unknown section '" + section + "'");
    if (kv.second.IsNull()) continue;
    if (!kv.second.IsMap()) throw ConfigError("config: section '" + section + "' must be a mapping");
    for (const auto& entry : kv.second) {
      const auto f = section + "." + entry.first.as<std::string>();
      if (!known.count(f)) throw ConfigError("config: unknown key '" + f + "'");
    }
  }
}

RunConfig from_node(const YAML::Node& root) {
  check_keys(root);
  RunConfig c;
  visit_fields(c, Reader{root});
  c.validate();
  return c;
}

YAML::Node parse_yaml(const std::string& text) {
  try {
    YAML::Node n = YAML::Load(text);
    if (n.IsNull()) return YAML::Node(YAML::NodeType::Map);
    return n;
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config: malformed YAML: ") + e.what());
  }
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  train.validate();
  optimizer.validate();
  if (data.resize_target == 0) throw ConfigError("data.resize_target must be positive");
  if (model.patch.height != model.patch.width) {
    throw ConfigError("patch: the square feature map needs H == W (H=" + std::to_string(model.patch.height) +
                      ", W=" + std::to_string(model.patch.width) + ")");
  }
  if (data.resize_target != model.patch.height) {
    throw ConfigError("data.resize_target " + std::to_string(data.resize_target) +
                      " must equal the model input size " + std::to_string(model.patch.height));
  }
  if (data.source == DataSource::Coco && (data.annotations.empty() || data.images.empty()))
    throw ConfigError("data: coco source needs data.annotations and data.images");
  if (data.source == DataSource::Synthetic && data.synthetic_count == 0)
    throw ConfigError("data.synthetic_count must be positive");
  if (data.source == DataSource::Synthetic && model.head.num_classes != synthetic_class_names().size()) {
    throw ConfigError("head.num_classes must be " + std::to_string(synthetic_class_names().size()) +
                      " for the synthetic dataset");
  }
  if (output.dir.empty()) throw ConfigError("output.dir must not be empty");
}

std::string RunConfig::to_yaml() const {
  Writer w;
  visit_fields(*this, w);
  YAML::Emitter out;
  out << w.root;
  return std::string(out.c_str()) + "\n";
}

RunConfig parse_run_config(const std::string& yaml_text) { return from_node(parse_yaml(yaml_text)); }

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

void apply_override(RunConfig& config, const std::string& dotted_key, const std::string& value) {
  const auto dot = dotted_key.find('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 == dotted_key.size())
    throw ConfigError("override '" + dotted_key + "' must have the form section.key");
  YAML::Node root = parse_yaml(config.to_yaml());
  root[dotted_key.substr(0, dot)][dotted_key.substr(dot + 1)] = parse_yaml(value);
  config = from_node(root);
}

}  // namespace dtn
