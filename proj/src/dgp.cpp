#include "conceptlab/dgp.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <stdexcept>

#include "conceptlab/io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace conceptlab::dgp {

namespace {

Vec vec3(double r, double g, double b) {
  Vec v(3);
  v << r, g, b;
  return v;
}

Vec vec1(double x) {
  Vec v(1);
  v << x;
  return v;
}

}  // namespace

bool ConceptAxis::varies() const {
  return (value_means.at(0) - value_means.at(1)).cwiseAbs().maxCoeff() > 1e-12;
}

ConceptAxis ConceptAxis::color(double separation, double spread_ratio) {
  const double u = separation / 2.0;
  ConceptAxis a;
  a.name = "color";
  a.value_means = {vec3(0.5 + u, 0.5 - u, 0.5 - u),   // value 0: red
                   vec3(0.5 - u, 0.5 - u, 0.5 + u)};  // value 1: blue
  a.spread = separation * spread_ratio;
  return a;
}

ConceptAxis ConceptAxis::size(double separation, double spread_ratio) {
  const double u = separation / 2.0;
  // centered at 0.6 so the small class stays comfortably renderable at low
  // resolutions across the whole separation sweep
  ConceptAxis a;
  a.name = "size";
  a.value_means = {vec1(0.6 + u),   // value 0: large
                   vec1(0.6 - u)};  // value 1: small
  a.spread = separation * spread_ratio;
  return a;
}

ConceptAxis ConceptAxis::shape() {
  ConceptAxis a;
  a.name = "shape";
  a.categorical = true;
  a.value_means = {vec1(0.0), vec1(1.0)};  // circle, triangle
  a.spread = 0.0;
  return a;
}

ConceptAxis ConceptAxis::background(double separation, double spread_ratio) {
  const double u = separation / 2.0;
  ConceptAxis a;
  a.name = "background_color";
  a.value_means = {vec3(0.5 - u, 0.5 - u, 0.5 - u),   // value 0: dark
                   vec3(0.5 + u, 0.5 + u, 0.5 + u)};  // value 1: bright
  a.spread = separation * spread_ratio;
  return a;
}

ConceptAxis ConceptAxis::fixed_shape(int shape_id) {
  ConceptAxis a;
  a.name = "shape";
  a.categorical = true;
  a.value_means = {vec1(static_cast<double>(shape_id)), vec1(static_cast<double>(shape_id))};
  return a;
}

ConceptAxis ConceptAxis::fixed_background(const Vec& rgb) {
  ConceptAxis a;
  a.name = "background_color";
  a.value_means = {rgb, rgb};
  return a;
}

int ConceptSpaceSpec::active_axis_count() const {
  return static_cast<int>(active_axis_indices().size());
}

std::vector<int> ConceptSpaceSpec::active_axis_indices() const {
  std::vector<int> idx;
  for (int i = 0; i < static_cast<int>(axes.size()); ++i)
    if (axes[i].varies()) idx.push_back(i);
  return idx;
}

int ConceptSpaceSpec::z_dims() const {
  int d = 0;
  for (int i : active_axis_indices()) d += axes[i].value_dims();
  return d;
}

int ConceptSpaceSpec::cond_dims() const {
  int d = 0;
  for (int i : active_axis_indices()) d += axes[i].cond_dims();
  return d;
}

std::vector<std::string> ConceptSpaceSpec::all_class_labels() const {
  const int d = active_axis_count();
  std::vector<std::string> labels;
  for (int m = 0; m < (1 << d); ++m) {
    std::string s(d, '0');
    for (int k = 0; k < d; ++k)
      if (m & (1 << (d - 1 - k))) s[k] = '1';
    labels.push_back(s);
  }
  return labels;
}

const ConceptAxis* ConceptSpaceSpec::find_axis(const std::string& name) const {
  for (const auto& a : axes)
    if (a.name == name) return &a;
  return nullptr;
}

int ConceptSpaceSpec::active_index_of(const std::string& name) const {
  int k = 0;
  for (int i : active_axis_indices()) {
    if (axes[i].name == name) return k;
    ++k;
  }
  return -1;
}

void ConceptSpaceSpec::validate() const {
  if (height < 16 || width < 16)
    throw std::invalid_argument("resolution must be at least 16x16");
  for (const auto& a : axes) {
    if (a.value_means.size() != 2)
      throw std::invalid_argument("axis " + a.name + ": expected 2 value means");
    if (a.value_means[0].size() != a.value_means[1].size())
      throw std::invalid_argument("axis " + a.name + ": inconsistent mean dims");
    if (a.categorical && a.spread != 0.0)
      throw std::invalid_argument("axis " + a.name + ": categorical axes take no spread");
    const double lo = (a.name == "size") ? 1e-9 : 0.0;
    const double hi = 1.0;
    for (const auto& m : a.value_means)
      for (int j = 0; j < m.size(); ++j) {
        if (m[j] - a.spread < lo - 1e-12 || m[j] + a.spread > hi + 1e-12)
          throw std::invalid_argument("axis " + a.name +
                                      ": sampling interval leaves the value range");
      }
    if (a.varies() && !a.categorical) {
      // intervals of the two values must be disjoint in at least one dimension
      bool disjoint = false;
      for (int j = 0; j < a.value_means[0].size(); ++j) {
        const double d = std::abs(a.value_means[0][j] - a.value_means[1][j]);
        if (d > 2.0 * a.spread + 1e-12) disjoint = true;
      }
      if (!disjoint)
        throw std::invalid_argument("axis " + a.name + ": class intervals overlap");
    }
  }
}

ConceptSpaceSpec ConceptSpaceSpec::with_max_diversity() const {
  ConceptSpaceSpec out = *this;
  for (auto& a : out.axes) {
    if (!a.varies() || a.categorical) continue;
    // sizes below ~1.5 px render as near-invisible blobs, which breaks the
    // perfect-classification requirement; keep a visibility floor
    const double lo = (a.name == "size") ? 0.1 : 0.0;
    double s = 1.0;
    for (int j = 0; j < a.value_means[0].size(); ++j) {
      for (const auto& m : a.value_means) {
        s = std::min(s, m[j] - lo);
        s = std::min(s, 1.0 - m[j]);
      }
    }
    // widest spread still leaving a 10% gap between the class intervals
    double gap = 0.0;
    for (int j = 0; j < a.value_means[0].size(); ++j)
      gap = std::max(gap, std::abs(a.value_means[0][j] - a.value_means[1][j]));
    s = std::min(s, 0.45 * gap);
    a.spread = std::max(s, 0.0);
  }
  return out;
}

ConceptVector sample_concept_vector(const std::string& class_label,
                                    const ConceptSpaceSpec& spec, Rng& rng) {
  const auto active = spec.active_axis_indices();
  if (static_cast<int>(class_label.size()) != static_cast<int>(active.size()))
    throw std::invalid_argument("class label '" + class_label + "' does not index " +
                                std::to_string(active.size()) + " active axes");
  ConceptVector z;
  z.class_label = class_label;
  z.values.resize(spec.z_dims());
  int off = 0;
  for (size_t k = 0; k < active.size(); ++k) {
    const ConceptAxis& a = spec.axes[active[k]];
    const char bit = class_label[k];
    if (bit != '0' && bit != '1')
      throw std::invalid_argument("class label must be a bitstring");
    const Vec& m = a.value_means[bit - '0'];
    for (int j = 0; j < m.size(); ++j)
      z.values[off + j] =
          a.categorical ? m[j] : rng.uniform(m[j] - a.spread, m[j] + a.spread);
    off += m.size();
  }
  return z;
}

ConceptVector class_mean_vector(const std::string& class_label, const ConceptSpaceSpec& spec) {
  const auto active = spec.active_axis_indices();
  if (class_label.size() != active.size())
    throw std::invalid_argument("class label '" + class_label + "' does not index " +
                                std::to_string(active.size()) + " active axes");
  ConceptVector z;
  z.class_label = class_label;
  z.values.resize(spec.z_dims());
  int off = 0;
  for (size_t k = 0; k < active.size(); ++k) {
    const ConceptAxis& a = spec.axes[active[k]];
    const Vec& m = a.value_means[class_label[k] - '0'];
    z.values.segment(off, m.size()) = m;
    off += m.size();
  }
  return z;
}

Vec class_corner(const std::string& class_label) {
  Vec corner(class_label.size());
  for (size_t i = 0; i < class_label.size(); ++i) corner[i] = class_label[i] - '0';
  return corner;
}

Vec conditioning_of(const ConceptVector& z, const ConceptSpaceSpec& spec) {
  const auto active = spec.active_axis_indices();
  Vec h(spec.cond_dims());
  int zoff = 0, hoff = 0;
  for (int i : active) {
    const ConceptAxis& a = spec.axes[i];
    if (a.categorical) {
      const int id = static_cast<int>(std::lround(z.values[zoff]));
      h[hoff] = id == 0 ? 1.0 : 0.0;
      h[hoff + 1] = id == 1 ? 1.0 : 0.0;
    } else {
      h.segment(hoff, a.value_dims()) = z.values.segment(zoff, a.value_dims());
    }
    zoff += a.value_dims();
    hoff += a.cond_dims();
  }
  return h;
}

void MixingConfig::validate(const ConceptSpaceSpec& spec) const {
  if (mask_fraction < 0.0 || mask_fraction > 1.0)
    throw std::invalid_argument("mask_fraction must lie in [0,1]");
  if (!mask_axis.empty() && spec.active_index_of(mask_axis) < 0)
    throw std::invalid_argument("mask_target axis '" + mask_axis + "' is not active");
}

Vec mix(const ConceptVector& z, const ConceptSpaceSpec& spec, const MixingConfig& cfg,
        Rng& rng) {
  cfg.validate(spec);
  Vec h = conditioning_of(z, spec);
  if (cfg.mask_fraction <= 0.0 || cfg.mask_axis.empty()) return h;
  if (z.class_label != cfg.mask_class) return h;
  if (!rng.bernoulli(cfg.mask_fraction)) return h;
  const auto active = spec.active_axis_indices();
  int hoff = 0;
  for (int i : active) {
    const ConceptAxis& a = spec.axes[i];
    if (a.name == cfg.mask_axis) {
      h.segment(hoff, a.cond_dims()).setConstant(cfg.null_fill);
      break;
    }
    hoff += a.cond_dims();
  }
  return h;
}

namespace {

struct ShapeGeom {
  bool triangle = false;
  double cx = 0, cy = 0, r = 0;
  // triangle vertices (vertex up, inscribed in the radius)
  double vx[3] = {0, 0, 0}, vy[3] = {0, 0, 0};

  bool inside(double x, double y) const {
    if (!triangle) {
      const double dx = x - cx, dy = y - cy;
      return dx * dx + dy * dy <= r * r;
    }
    // vertices wind clockwise in image coordinates (y grows downward)
    for (int e = 0; e < 3; ++e) {
      const int f = (e + 1) % 3;
      const double cross =
          (vx[f] - vx[e]) * (y - vy[e]) - (vy[f] - vy[e]) * (x - vx[e]);
      if (cross > 0.0) return false;
    }
    return true;
  }
};

ShapeGeom make_geom(int shape_id, double cx, double cy, double r) {
  ShapeGeom g;
  g.cx = cx;
  g.cy = cy;
  g.r = r;
  g.triangle = shape_id == 1;
  if (g.triangle) {
    const double s = 0.8660254037844386;  // sin(60 deg)
    g.vx[0] = cx;
    g.vy[0] = cy - r;
    g.vx[1] = cx - s * r;
    g.vy[1] = cy + 0.5 * r;
    g.vx[2] = cx + s * r;
    g.vy[2] = cy + 0.5 * r;
  }
  return g;
}

struct AxisView {
  Vec color = Vec();
  Vec background = Vec();
  double size_value = 0.5;
  int shape_id = 0;
};

AxisView read_axes(const ConceptVector& z, const ConceptSpaceSpec& spec) {
  AxisView view;
  view.color = vec3(1.0, 1.0, 1.0);
  view.background = vec3(0.0, 0.0, 0.0);
  int zoff = 0;
  const auto active = spec.active_axis_indices();
  std::vector<bool> is_active(spec.axes.size(), false);
  for (int i : active) is_active[i] = true;
  for (size_t i = 0; i < spec.axes.size(); ++i) {
    const ConceptAxis& a = spec.axes[i];
    Vec val;
    if (is_active[i]) {
      val = z.values.segment(zoff, a.value_dims());
      zoff += a.value_dims();
    } else {
      val = a.value_means[0];
    }
    if (a.name == "color") view.color = val;
    else if (a.name == "background_color") view.background = val;
    else if (a.name == "size") view.size_value = val[0];
    else if (a.name == "shape") view.shape_id = static_cast<int>(std::lround(val[0]));
  }
  return view;
}

}  // namespace

int placement_margin(double size_value, int height, int width) {
  const double radius_px = 0.5 * size_value * std::min(height, width);
  return static_cast<int>(std::ceil(radius_px));
}

Tensor render_at(const ConceptVector& z, const ConceptSpaceSpec& spec, double cx,
                 double cy) {
  const AxisView view = read_axes(z, spec);
  const int H = spec.height, W = spec.width;
  const double r = 0.5 * view.size_value * std::min(H, W);
  const ShapeGeom geom = make_geom(view.shape_id, cx, cy, r);

  Tensor img(1, 3, H, W);
  for (int ch = 0; ch < 3; ++ch)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) img.at(0, ch, y, x) = view.background[ch];

  const int y0 = std::max(0, static_cast<int>(std::floor(cy - r - 1)));
  const int y1 = std::min(H - 1, static_cast<int>(std::ceil(cy + r + 1)));
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - r - 1)));
  const int x1 = std::min(W - 1, static_cast<int>(std::ceil(cx + r + 1)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      // classify the pixel by its corners and center; mixed pixels get 4x4
      // supersampling
      int in = 0;
      in += geom.inside(x, y);
      in += geom.inside(x + 1.0, y);
      in += geom.inside(x, y + 1.0);
      in += geom.inside(x + 1.0, y + 1.0);
      in += geom.inside(x + 0.5, y + 0.5);
      double cov;
      if (in == 5) {
        cov = 1.0;
      } else if (in == 0) {
        continue;
      } else {
        int hit = 0;
        for (int sy = 0; sy < 4; ++sy)
          for (int sx = 0; sx < 4; ++sx)
            hit += geom.inside(x + (sx + 0.5) / 4.0, y + (sy + 0.5) / 4.0);
        cov = hit / 16.0;
      }
      for (int ch = 0; ch < 3; ++ch)
        img.at(0, ch, y, x) =
            view.background[ch] + cov * (view.color[ch] - view.background[ch]);
    }
  }
  return img;
}

RenderedSample render(const ConceptVector& z, const ConceptSpaceSpec& spec, Rng& rng) {
  const AxisView view = read_axes(z, spec);
  const int H = spec.height, W = spec.width;
  const int margin = placement_margin(view.size_value, H, W);
  if (2 * margin > W || 2 * margin > H)
    throw std::invalid_argument("object too large for frame after margin");
  RenderedSample s;
  s.pos_x = rng.uniform(margin, W - margin);
  s.pos_y = rng.uniform(margin, H - margin);
  s.image = render_at(z, spec, s.pos_x, s.pos_y);
  s.z = z;
  s.class_label = z.class_label;
  s.h = conditioning_of(z, spec);
  return s;
}

Dataset build_dataset(const ConceptSpaceSpec& spec, const std::vector<std::string>& classes,
                      int n_per_class, uint64_t seed,
                      const std::optional<MixingConfig>& mixing) {
  spec.validate();
  if (classes.empty()) throw std::invalid_argument("class list is empty");
  if (n_per_class < 1) throw std::invalid_argument("n_per_class must be >= 1");
  if (mixing) mixing->validate(spec);

  Dataset ds;
  ds.spec = spec;
  ds.seed = seed;
  ds.samples.reserve(static_cast<size_t>(classes.size()) * n_per_class);
  for (size_t k = 0; k < classes.size(); ++k) {
    for (int i = 0; i < n_per_class; ++i) {
      const uint64_t index = k * static_cast<uint64_t>(n_per_class) + i;
      Rng r = Rng::derive(seed, "sample", index);
      ConceptVector z = sample_concept_vector(classes[k], spec, r);
      RenderedSample s = render(z, spec, r);
      if (mixing) s.h = mix(z, spec, *mixing, r);
      s.seed = index;
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

double empirical_concept_signal(const ConceptSpaceSpec& spec, const std::string& axis,
                                int n_pairs, Rng& rng) {
  const ConceptAxis* a = spec.find_axis(axis);
  if (!a) throw std::invalid_argument("unknown axis " + axis);
  // a constant axis never changes the rendering: zero sensitivity
  if (!a->varies()) return 0.0;
  const int ai = spec.active_index_of(axis);
  const auto active = spec.active_axis_indices();
  int zoff = 0;
  for (int k = 0; k < ai; ++k) zoff += spec.axes[active[k]].value_dims();
  const int adim = a->value_dims();

  const auto labels = spec.all_class_labels();
  double acc = 0.0;
  for (int p = 0; p < n_pairs; ++p) {
    const std::string& base = labels[rng.uniform_index(labels.size())];
    ConceptVector z = sample_concept_vector(base, spec, rng);
    ConceptVector zp = z, zm = z;
    for (int j = 0; j < adim; ++j) {
      const double m1 = a->value_means[1][j], m0 = a->value_means[0][j];
      zp.values[zoff + j] =
          a->categorical ? m1 : rng.uniform(m1 - a->spread, m1 + a->spread);
      zm.values[zoff + j] =
          a->categorical ? m0 : rng.uniform(m0 - a->spread, m0 + a->spread);
    }
    // the concept coordinate distance is measured in normalized value units:
    // swapping value 0 for value 1 is one unit, so the estimate scales with
    // the image-space class separation
    const double dz = 1.0;
    // shared position across the pair
    const AxisView vp = read_axes(zp, spec);
    const AxisView vm = read_axes(zm, spec);
    const int margin = std::max(placement_margin(vp.size_value, spec.height, spec.width),
                                placement_margin(vm.size_value, spec.height, spec.width));
    const double cx = rng.uniform(margin, spec.width - margin);
    const double cy = rng.uniform(margin, spec.height - margin);
    const Tensor ip = render_at(zp, spec, cx, cy);
    const Tensor im = render_at(zm, spec, cx, cy);
    double d2 = 0.0;
    for (size_t q = 0; q < ip.size(); ++q) {
      const double d = ip.v[q] - im.v[q];
      d2 += d * d;
    }
    acc += std::sqrt(d2) / dz;
  }
  return acc / n_pairs;
}

// ---- spec JSON ----

namespace {

json axis_to_json(const ConceptAxis& a) {
  json j;
  j["name"] = a.name;
  j["categorical"] = a.categorical;
  j["spread"] = a.spread;
  for (const auto& m : a.value_means) {
    std::vector<double> v(m.data(), m.data() + m.size());
    j["value_means"].push_back(v);
  }
  return j;
}

ConceptAxis axis_from_json(const json& j) {
  ConceptAxis a;
  a.name = j.at("name").get<std::string>();
  a.categorical = j.at("categorical").get<bool>();
  a.spread = j.at("spread").get<double>();
  for (const auto& mj : j.at("value_means")) {
    auto v = mj.get<std::vector<double>>();
    Vec m(v.size());
    for (size_t i = 0; i < v.size(); ++i) m[i] = v[i];
    a.value_means.push_back(m);
  }
  return a;
}

}  // namespace

std::string ConceptSpaceSpec::to_json() const {
  json j;
  j["height"] = height;
  j["width"] = width;
  j["axes"] = json::array();
  for (const auto& a : axes) j["axes"].push_back(axis_to_json(a));
  return j.dump(2);
}

ConceptSpaceSpec ConceptSpaceSpec::from_json(const std::string& text) {
  const json j = json::parse(text);
  ConceptSpaceSpec s;
  s.height = j.at("height").get<int>();
  s.width = j.at("width").get<int>();
  for (const auto& aj : j.at("axes")) s.axes.push_back(axis_from_json(aj));
  return s;
}

void save_dataset(const Dataset& ds, const std::string& dir) {
  fs::create_directories(dir);
  io::write_text_file(dir + "/spec.json", ds.spec.to_json());
  std::ofstream manifest(dir + "/manifest.jsonl", std::ios::binary);
  if (!manifest) throw std::runtime_error("cannot write manifest in " + dir);
  std::vector<int> counter;
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    const RenderedSample& s = ds.samples[i];
    fs::create_directories(dir + "/" + s.class_label);
    char name[32];
    std::snprintf(name, sizeof(name), "%06zu.png", i);
    const std::string rel = s.class_label + "/" + name;
    io::write_png(dir + "/" + rel, s.image);
    json rec;
    rec["index"] = i;
    rec["file"] = rel;
    rec["class"] = s.class_label;
    rec["z"] = std::vector<double>(s.z.values.data(), s.z.values.data() + s.z.values.size());
    rec["h"] = std::vector<double>(s.h.data(), s.h.data() + s.h.size());
    rec["position"] = {s.pos_x, s.pos_y};
    rec["seed"] = s.seed;
    manifest << rec.dump() << '\n';
  }
}

Dataset load_dataset(const std::string& dir) {
  Dataset ds;
  ds.spec = ConceptSpaceSpec::from_json(io::read_text_file(dir + "/spec.json"));
  std::ifstream manifest(dir + "/manifest.jsonl", std::ios::binary);
  if (!manifest) throw std::runtime_error("missing manifest in " + dir);
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    const json rec = json::parse(line);
    RenderedSample s;
    s.class_label = rec.at("class").get<std::string>();
    auto zv = rec.at("z").get<std::vector<double>>();
    s.z.values.resize(zv.size());
    for (size_t i = 0; i < zv.size(); ++i) s.z.values[i] = zv[i];
    s.z.class_label = s.class_label;
    auto hv = rec.at("h").get<std::vector<double>>();
    s.h.resize(hv.size());
    for (size_t i = 0; i < hv.size(); ++i) s.h[i] = hv[i];
    s.pos_x = rec.at("position")[0].get<double>();
    s.pos_y = rec.at("position")[1].get<double>();
    s.seed = rec.at("seed").get<uint64_t>();
    s.image = io::read_png(dir + "/" + rec.at("file").get<std::string>());
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace conceptlab::dgp
