#include "dtn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

#include "dtn/backbone.hpp"
#include "dtn/detector.hpp"
#include "dtn/losses.hpp"
#include "dtn/model.hpp"
#include "dtn/ops.hpp"

namespace dtn {

double gradient_relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradErrorFloor});
  return std::abs(analytic - numeric) / denom;
}

namespace {

double reduce(const TensorD& out, const std::vector<double>& r) {
  const auto d = out.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) acc += d[i] * r[i];
  return acc;
}

}  // namespace

double max_gradient_error(const GradFn& fn, const std::vector<TensorD>& inputs, Rng& rng,
                          const GradcheckOptions& options, std::size_t* entries_checked) {
  for (auto t : inputs) {
    if (t.requires_grad()) t.zero_grad();
  }
  TensorD out = fn(inputs);
  std::vector<double> r(out.numel());
  for (auto& x : r) x = rng.uniform(-1.0, 1.0);
  auto loss = sum(mul(out, TensorD::from_vector(out.shape(), r)));
  loss.backward();

  double worst = 0.0;
  std::size_t checked = 0;
  NoGradGuard no_grad;
  for (auto t : inputs) {
    if (!t.requires_grad()) continue;
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    std::vector<std::size_t> idx(t.numel());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (idx.size() > options.max_entries_per_input) {
      rng.shuffle(idx.begin(), idx.end());
      idx.resize(options.max_entries_per_input);
    }
    auto data = t.data();
    for (auto i : idx) {
      const double orig = data[i];
      data[i] = orig + options.step;
      const double plus = reduce(fn(inputs), r);
      data[i] = orig - options.step;
      const double minus = reduce(fn(inputs), r);
      data[i] = orig;
      const double numeric = (plus - minus) / (2.0 * options.step);
      worst = std::max(worst, gradient_relative_error(analytic[i], numeric));
      ++checked;
    }
  }
  if (entries_checked) *entries_checked += checked;
  return worst;
}

namespace {

struct Case {
  std::vector<TensorD> inputs;
  GradFn fn;
  double tolerance = kOpGradTolerance;
};

using Maker = std::function<Case(Rng&)>;

std::size_t extent(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + rng.uniform_index(hi - lo + 1);
}

TensorD rand_t(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return TensorD::from_vector(std::move(shape), std::move(v), true);
}

// Values bounded away from zero so that kinks (relu) stay out of reach of h.
TensorD rand_away_from_zero(Rng& rng, Shape shape) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) {
    const double mag = rng.uniform(0.05, 1.5);
    x = rng.bernoulli(0.5) ? mag : -mag;
  }
  return TensorD::from_vector(std::move(shape), std::move(v), true);
}

Shape rand_shape2(Rng& rng) { return {extent(rng, 1, 5), extent(rng, 1, 5)}; }

Case unary(Rng& rng, TensorD (*op)(const TensorD&), double lo = -2.0, double hi = 2.0) {
  return {{rand_t(rng, rand_shape2(rng), lo, hi)}, [op](const auto& in) { return op(in[0]); }};
}

Case binary(Rng& rng, TensorD (*op)(const TensorD&, const TensorD&)) {
  const Shape s = rand_shape2(rng);
  return {{rand_t(rng, s), rand_t(rng, s)}, [op](const auto& in) { return op(in[0], in[1]); }};
}

// Stable across standard libraries, unlike std::hash.
std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
  return h;
}

BBox random_box(Rng& rng, double h, double w, double min_size) {
  const double bw = rng.uniform(min_size, w), bh = rng.uniform(min_size, h);
  const double x0 = rng.uniform(0.0, w - bw), y0 = rng.uniform(0.0, h - bh);
  return {x0, y0, x0 + bw, y0 + bh};
}

// Small double-precision model used by the end-to-end loss checks.
ModelConfig tiny_model_config() {
  ModelConfig c;
  c.patch = {16, 16, 3, 8, 4};
  c.encoder.embed_dim = 8;
  c.encoder.depth = 1;
  c.encoder.heads = 2;
  c.encoder.mlp_ratio = 2;
  c.residual_blocks = 1;
  c.rpn.hidden_dim = 6;
  c.rpn.anchors.scales = {6.0, 10.0};
  c.rpn.anchors.aspect_ratios = {1.0};
  c.head.pool_size = 2;
  c.head.hidden_dim = 8;
  c.head.num_classes = 2;
  return c;
}

std::vector<TensorD> model_parameters(const DetTransNet<double>& net, std::initializer_list<ParamGroup> groups) {
  std::vector<TensorD> out;
  for (const auto& p : net.parameters())
    for (auto g : groups)
      if (p.group == g) out.push_back(p.tensor);
  return out;
}

const std::map<std::string, Maker>& registry() {
  static const std::map<std::string, Maker> makers = [] {
    std::map<std::string, Maker> m;
    m["matmul"] = [](Rng& rng) {
      const auto r = extent(rng, 1, 5), k = extent(rng, 1, 5), c = extent(rng, 1, 5);
      return Case{{rand_t(rng, {r, k}), rand_t(rng, {k, c})},
                  [](const auto& in) { return matmul(in[0], in[1]); }};
    };
    m["transpose"] = [](Rng& rng) { return unary(rng, &transpose<double>); };
    m["add"] = [](Rng& rng) { return binary(rng, &add<double>); };
    m["sub"] = [](Rng& rng) { return binary(rng, &sub<double>); };
    m["mul"] = [](Rng& rng) { return binary(rng, &mul<double>); };
    m["add_rowwise"] = [](Rng& rng) {
      const auto c = extent(rng, 1, 5);
      return Case{{rand_t(rng, {extent(rng, 1, 4), extent(rng, 1, 3), c}), rand_t(rng, {c})},
                  [](const auto& in) { return add_rowwise(in[0], in[1]); }};
    };
    m["scale"] = [](Rng& rng) {
      const double f = rng.uniform(-3.0, 3.0);
      return Case{{rand_t(rng, rand_shape2(rng))}, [f](const auto& in) { return scale(in[0], f); }};
    };
    m["add_scalar"] = [](Rng& rng) {
      const double v = rng.uniform(-3.0, 3.0);
      return Case{{rand_t(rng, rand_shape2(rng))}, [v](const auto& in) { return add_scalar(in[0], v); }};
    };
    m["relu"] = [](Rng& rng) {
      return Case{{rand_away_from_zero(rng, rand_shape2(rng))}, [](const auto& in) { return relu(in[0]); }};
    };
    m["gelu"] = [](Rng& rng) { return unary(rng, &gelu<double>, -3.0, 3.0); };
    m["sigmoid"] = [](Rng& rng) { return unary(rng, &sigmoid<double>, -4.0, 4.0); };
    m["log"] = [](Rng& rng) { return unary(rng, &log<double>, 0.2, 3.0); };
    m["exp"] = [](Rng& rng) { return unary(rng, &exp<double>, -2.0, 2.0); };
    m["sum"] = [](Rng& rng) { return unary(rng, &sum<double>); };
    m["mean"] = [](Rng& rng) { return unary(rng, &mean<double>); };
    m["reshape"] = [](Rng& rng) {
      const auto r = extent(rng, 1, 4), c = extent(rng, 1, 4);
      return Case{{rand_t(rng, {r, c})}, [r, c](const auto& in) { return reshape(in[0], {c, r}); }};
    };
    m["concat"] = [](Rng& rng) {
      const std::size_t axis = rng.uniform_index(2);
      const std::size_t parts = extent(rng, 1, 3), fixed = extent(rng, 1, 4);
      Case cs;
      for (std::size_t i = 0; i < parts; ++i) {
        const auto var = extent(rng, 1, 3);
        cs.inputs.push_back(rand_t(rng, axis == 0 ? Shape{var, fixed} : Shape{fixed, var}));
      }
      cs.fn = [axis](const auto& in) { return concat(in, axis); };
      return cs;
    };
    m["slice"] = [](Rng& rng) {
      const Shape s{extent(rng, 1, 5), extent(rng, 1, 5)};
      const std::size_t axis = rng.uniform_index(2);
      const std::size_t b = rng.uniform_index(s[axis]);
      const std::size_t e = b + 1 + rng.uniform_index(s[axis] - b);
      return Case{{rand_t(rng, s)}, [axis, b, e](const auto& in) { return slice(in[0], axis, b, e); }};
    };
    m["index_rows"] = [](Rng& rng) {
      const auto r = extent(rng, 1, 5);
      std::vector<std::size_t> rows(extent(rng, 1, 7));
      for (auto& x : rows) x = rng.uniform_index(r);
      return Case{{rand_t(rng, {r, extent(rng, 1, 4)})},
                  [rows](const auto& in) { return index_rows<double>(in[0], rows); }};
    };
    m["conv2d"] = [](Rng& rng) {
      const auto k = rng.bernoulli(0.5) ? std::size_t{3} : std::size_t{1};
      const auto ci = extent(rng, 1, 3), co = extent(rng, 1, 3);
      const bool with_bias = rng.bernoulli(0.7);
      Case cs{{rand_t(rng, {extent(rng, 1, 5), extent(rng, 1, 5), ci}), rand_t(rng, {k, k, ci, co})}, {}};
      if (with_bias) cs.inputs.push_back(rand_t(rng, {co}));
      cs.fn = [](const auto& in) { return conv2d(in[0], in[1], in.size() > 2 ? in[2] : TensorD()); };
      return cs;
    };
    m["softmax"] = [](Rng& rng) {
      const std::size_t axis = rng.uniform_index(2);
      return Case{{rand_t(rng, rand_shape2(rng), -3.0, 3.0)},
                  [axis](const auto& in) { return softmax(in[0], axis); }};
    };
    m["layernorm"] = [](Rng& rng) {
      const auto c = extent(rng, 2, 6);
      return Case{{rand_t(rng, {extent(rng, 1, 4), c}, -2.0, 2.0), rand_t(rng, {c}), rand_t(rng, {c})},
                  [](const auto& in) { return layernorm(in[0], in[1], in[2], kLayerNormEps); }};
    };
    m["bce_with_logits_sum"] = [](Rng& rng) {
      const auto n = extent(rng, 1, 12);
      std::vector<double> t(n), w(n);
      for (std::size_t i = 0; i < n; ++i) {
        t[i] = rng.bernoulli(0.3) ? rng.uniform() : static_cast<double>(rng.uniform_index(2));
        w[i] = rng.bernoulli(0.2) ? 0.0 : rng.uniform(0.1, 2.0);
      }
      return Case{{rand_t(rng, {n}, -5.0, 5.0)},
                  [t, w](const auto& in) { return bce_with_logits_sum<double>(in[0], t, w); }};
    };
    m["cross_entropy_sum"] = [](Rng& rng) {
      const auto r = extent(rng, 1, 5), c = extent(rng, 2, 5);
      std::vector<std::size_t> labels(r);
      for (auto& l : labels) l = rng.uniform_index(c);
      return Case{{rand_t(rng, {r, c}, -3.0, 3.0)},
                  [labels](const auto& in) { return cross_entropy_sum<double>(in[0], labels); }};
    };
    m["smooth_l1_sum"] = [](Rng& rng) {
      const auto n = extent(rng, 1, 12);
      std::vector<double> t(n), w(n), p(n);
      for (std::size_t i = 0; i < n; ++i) {
        t[i] = rng.uniform(-2.0, 2.0);
        // Keep |pred - target| clear of the transition point beta = 1.
        double d = rng.uniform(0.0, 2.5);
        if (std::abs(d - 1.0) < 0.05) d += 0.1;
        p[i] = t[i] + (rng.bernoulli(0.5) ? d : -d);
        w[i] = rng.bernoulli(0.2) ? 0.0 : rng.uniform(0.1, 2.0);
      }
      return Case{{TensorD::from_vector({n}, p, true)},
                  [t, w](const auto& in) { return smooth_l1_sum<double>(in[0], t, w, 1.0); }};
    };
    m["extract_patches"] = [](Rng& rng) {
      PatchConfig pc;
      pc.patch_size = extent(rng, 2, 4);
      pc.overlap = rng.uniform_index(pc.patch_size);
      const auto steps = extent(rng, 0, 2);
      pc.height = pc.width = pc.patch_size + steps * (pc.patch_size - pc.overlap);
      pc.channels = extent(rng, 1, 2);
      return Case{{rand_t(rng, {pc.height, pc.width, pc.channels})},
                  [pc](const auto& in) { return extract_patches(in[0], pc); }};
    };
    m["embed"] = [](Rng& rng) {
      const auto n = extent(rng, 1, 4), dim = extent(rng, 1, 5), d = extent(rng, 1, 4);
      return Case{{rand_t(rng, {n, dim}), rand_t(rng, {dim, d}), rand_t(rng, {1, d}), rand_t(rng, {n + 1, d})},
                  [](const auto& in) { return embed(in[0], in[1], in[2], in[3]).tokens; }};
    };
    m["encoder_forward"] = [](Rng& rng) {
      EncoderConfig ec;
      ec.heads = extent(rng, 1, 2);
      ec.embed_dim = ec.heads * extent(rng, 1, 3);
      ec.depth = 1;
      ec.mlp_ratio = 2;
      auto w = init_encoder_layer<double>(ec, rng);
      Case cs;
      cs.inputs = {rand_t(rng, {extent(rng, 2, 4), ec.embed_dim}), rand_t(rng, {ec.embed_dim}, 0.5, 1.5),
                          rand_t(rng, {ec.embed_dim}, -0.2, 0.2), rand_t(rng, w.qkv_w.shape(), -0.5, 0.5),
                          rand_t(rng, w.qkv_b.shape(), -0.1, 0.1), rand_t(rng, w.proj_w.shape(), -0.5, 0.5),
                          rand_t(rng, w.proj_b.shape(), -0.1, 0.1), rand_t(rng, {ec.embed_dim}, 0.5, 1.5),
                          rand_t(rng, {ec.embed_dim}, -0.2, 0.2), rand_t(rng, w.fc1_w.shape(), -0.5, 0.5),
                          rand_t(rng, w.fc1_b.shape(), -0.1, 0.1), rand_t(rng, w.fc2_w.shape(), -0.5, 0.5),
                          rand_t(rng, w.fc2_b.shape(), -0.1, 0.1)};
      cs.fn = [ec](const auto& in) {
        EncoderLayerWeights<double> lw{in[1], in[2], in[3], in[4], in[5], in[6], in[7], in[8], in[9], in[10], in[11], in[12]};
        std::vector<EncoderLayerWeights<double>> layers{lw};
        return encoder_forward<double>({in[0]}, ec, layers).tokens;
      };
      return cs;
    };
    m["residual_stack"] = [](Rng& rng) {
      const auto g = extent(rng, 1, 4), d = extent(rng, 1, 3);
      Case cs;
      cs.inputs = {rand_t(rng, {g, g, d}), rand_t(rng, {3, 3, d, d}, -0.5, 0.5), rand_t(rng, {d}, -0.1, 0.1),
                   rand_t(rng, {3, 3, d, d}, -0.5, 0.5), rand_t(rng, {d}, -0.1, 0.1)};
      cs.fn = [](const auto& in) {
        std::vector<ResidualBlockWeights<double>> blocks{{in[1], in[2], in[3], in[4]}};
        return residual_stack<double>(in[0], blocks).values;
      };
      return cs;
    };
    m["roi_align"] = [](Rng& rng) {
      const auto g = extent(rng, 1, 4), d = extent(rng, 1, 3), q = extent(rng, 1, 3);
      const double size = 4.0 * static_cast<double>(g);
      std::vector<BBox> boxes(extent(rng, 1, 3));
      for (auto& b : boxes) b = random_box(rng, size, size, 0.5);
      return Case{{rand_t(rng, {g, g, d})}, [boxes, q, size](const auto& in) {
                    return roi_align<double>({in[0]}, boxes, q, size, size);
                  }};
    };
    m["rpn_forward"] = [](Rng& rng) {
      const auto g = extent(rng, 1, 4), d = extent(rng, 1, 3), h = extent(rng, 1, 3), a = extent(rng, 1, 2);
      Case cs;
      cs.inputs = {rand_t(rng, {g, g, d}), rand_t(rng, {3, 3, d, h}), rand_t(rng, {h}, -0.1, 0.1),
                   rand_t(rng, {h, a}), rand_t(rng, {a}), rand_t(rng, {h, 4 * a}), rand_t(rng, {4 * a})};
      cs.fn = [](const auto& in) {
        RpnWeights<double> w{in[1], in[2], in[3], in[4], in[5], in[6]};
        auto out = rpn_forward<double>({in[0]}, w);
        return concat<double>({reshape(out.objectness, {out.objectness.numel()}),
                               reshape(out.deltas, {out.deltas.numel()})},
                              0);
      };
      return cs;
    };
    m["detection_head"] = [](Rng& rng) {
      const auto r = extent(rng, 1, 4), f = extent(rng, 1, 6), h = extent(rng, 1, 5), k = extent(rng, 1, 3);
      Case cs;
      cs.inputs = {rand_t(rng, {r, f}), rand_t(rng, {f, h}), rand_t(rng, {h}, -0.1, 0.1), rand_t(rng, {h, h}),
                   rand_t(rng, {h}, -0.1, 0.1), rand_t(rng, {h, k + 1}), rand_t(rng, {k + 1}),
                   rand_t(rng, {h, 4 * k}), rand_t(rng, {4 * k})};
      cs.fn = [](const auto& in) {
        HeadWeights<double> w{in[1], in[2], in[3], in[4], in[5], in[6], in[7], in[8]};
        auto out = detection_head<double>(in[0], w);
        return concat<double>({out.class_logits, out.box_deltas}, 1);
      };
      return cs;
    };
    // End-to-end: RPN loss back through the whole backbone.
    m["rpn_loss"] = [](Rng& rng) {
      const auto cfg = tiny_model_config();
      auto net = DetTransNet<double>::create(cfg, rng.next_u64());
      auto image = rand_t(rng, {16, 16, 3});
      image.set_requires_grad(false);
      std::vector<BBox> gts(extent(rng, 1, 2));
      for (auto& b : gts) b = random_box(rng, 16.0, 16.0, 4.0);
      RpnTargetConfig tcfg;
      tcfg.batch_size = 16;
      const auto targets = build_rpn_targets(net.anchors, gts, tcfg, &rng);
      Case cs;
      cs.inputs = model_parameters(net, {ParamGroup::Backbone, ParamGroup::Rpn});
      cs.tolerance = kLossGradTolerance;
      cs.fn = [net, image, targets](const auto&) {
        auto fm = backbone_forward(image, net.config.patch, net.config.encoder, net.backbone);
        return rpn_loss(rpn_forward(fm, net.rpn), targets).total;
      };
      return cs;
    };
    // End-to-end: ROI loss through the head, ROI pooling and the backbone.
    m["roi_loss"] = [](Rng& rng) {
      const auto cfg = tiny_model_config();
      auto net = DetTransNet<double>::create(cfg, rng.next_u64());
      auto image = rand_t(rng, {16, 16, 3});
      image.set_requires_grad(false);
      std::vector<Annotation> gts(extent(rng, 1, 2));
      for (auto& a : gts) a = {random_box(rng, 16.0, 16.0, 4.0), rng.uniform_index(cfg.head.num_classes)};
      std::vector<BBox> proposals(6);
      for (auto& b : proposals) b = random_box(rng, 16.0, 16.0, 2.0);
      RoiSampleConfig rcfg;
      rcfg.rois_per_image = 6;
      const auto rois = sample_rois(proposals, gts, cfg.head.num_classes, rcfg, &rng);
      Case cs;
      cs.inputs = model_parameters(net, {ParamGroup::Backbone, ParamGroup::Head});
      cs.tolerance = kLossGradTolerance;
      cs.fn = [net, image, rois](const auto&) {
        auto fm = backbone_forward(image, net.config.patch, net.config.encoder, net.backbone);
        auto pooled = roi_align(fm, rois.boxes, net.config.head.pool_size, 16.0, 16.0);
        return roi_loss(detection_head(pooled, net.head), rois, net.config.head.num_classes).total;
      };
      return cs;
    };
    return m;
  }();
  return makers;
}

}  // namespace

std::vector<std::string> gradcheck_names() {
  std::vector<std::string> names;
  for (const auto& [name, maker] : registry())
    if (name != "rpn_loss" && name != "roi_loss") names.push_back(name);
  names.push_back("rpn_loss");
  names.push_back("roi_loss");
  return names;
}

GradcheckReport run_gradcheck(const std::string& name, const GradcheckOptions& options) {
  auto it = registry().find(name);
  if (it == registry().end()) throw std::invalid_argument("gradcheck: unknown check '" + name + "'");
  GradcheckReport report;
  report.name = name;
  const bool end_to_end = name == "rpn_loss" || name == "roi_loss";
  GradcheckOptions opts = options;
  // End-to-end checks hold hundreds of parameters; a handful per tensor
  // still touches every weight group.
  if (end_to_end) opts.max_entries_per_input = std::min<std::size_t>(opts.max_entries_per_input, 6);
  for (std::size_t i = 0; i < options.instances; ++i) {
    Rng rng({options.seed, fnv1a(name), i});
    Case cs = it->second(rng);
    report.tolerance = cs.tolerance;
    report.max_error = std::max(report.max_error, max_gradient_error(cs.fn, cs.inputs, rng, opts, &report.entries));
    ++report.instances;
  }
  return report;
}

std::vector<GradcheckReport> run_gradcheck_suite(const GradcheckOptions& options) {
  std::vector<GradcheckReport> out;
  for (const auto& name : gradcheck_names()) out.push_back(run_gradcheck(name, options));
  return out;
}

}  // namespace dtn
