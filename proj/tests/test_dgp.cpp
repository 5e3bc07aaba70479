#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "conceptlab/dgp.hpp"
#include "conceptlab/io.hpp"

using namespace conceptlab;
using namespace conceptlab::dgp;

namespace {

ConceptSpaceSpec two_concept_spec(double color_sep, double size_sep, int res = 32) {
  ConceptSpaceSpec spec;
  spec.axes = {ConceptAxis::color(color_sep), ConceptAxis::size(size_sep)};
  spec.height = res;
  spec.width = res;
  return spec;
}

}  // namespace

TEST_CASE("sampling stays within the class interval") {
  // strong color signal: m_red = (0.9, 0.1, 0.1)
  ConceptSpaceSpec spec = two_concept_spec(0.8, 0.5);
  const ConceptAxis& color = spec.axes[0];
  CHECK(color.value_means[0][0] == doctest::Approx(0.9));
  CHECK(color.value_means[0][1] == doctest::Approx(0.1));
  CHECK(color.value_means[0][2] == doctest::Approx(0.1));
  Rng rng(7);
  for (int i = 0; i < 200; ++i) {
    const ConceptVector z = sample_concept_vector("00", spec, rng);
    for (int j = 0; j < 3; ++j) {
      CHECK(z.values[j] >= color.value_means[0][j] - color.spread - 1e-12);
      CHECK(z.values[j] <= color.value_means[0][j] + color.spread + 1e-12);
    }
  }
}

TEST_CASE("zero spread degenerates to the class mean") {
  ConceptSpaceSpec spec = two_concept_spec(0.4, 0.5);
  for (auto& a : spec.axes) a.spread = 0.0;
  Rng rng(3);
  const ConceptVector z = sample_concept_vector("10", spec, rng);
  CHECK(z.values[0] == doctest::Approx(0.3));  // blue r
  CHECK(z.values[1] == doctest::Approx(0.3));
  CHECK(z.values[2] == doctest::Approx(0.7));
  CHECK(z.values[3] == doctest::Approx(0.85));  // large diameter at separation 0.5
}

TEST_CASE("law of large numbers on the sampler") {
  // weak color signal: m_blue = (0.4, 0.4, 0.6)
  ConceptSpaceSpec spec = two_concept_spec(0.2, 0.5);
  const ConceptAxis& color = spec.axes[0];
  const int n = 10000;
  Rng rng(11);
  Vec mean = Vec::Zero(3);
  for (int i = 0; i < n; ++i) {
    const ConceptVector z = sample_concept_vector("10", spec, rng);
    mean += z.values.head(3);
  }
  mean /= n;
  const double tol = 3.0 * color.spread / std::sqrt(3.0 * n);
  CHECK(std::abs(mean[0] - 0.4) < tol);
  CHECK(std::abs(mean[1] - 0.4) < tol);
  CHECK(std::abs(mean[2] - 0.6) < tol);
}

TEST_CASE("unknown class label and bad spreads are rejected") {
  ConceptSpaceSpec spec = two_concept_spec(0.4, 0.5);
  Rng rng(1);
  CHECK_THROWS(sample_concept_vector("0", spec, rng));
  CHECK_THROWS(sample_concept_vector("0x", spec, rng));
  spec.axes[0].spread = 0.5;  // escapes [0,1] and overlaps
  CHECK_THROWS(spec.validate());
}

TEST_CASE("interior pixel color matches the encoded color") {
  ConceptSpaceSpec spec = two_concept_spec(0.8, 0.6);
  for (auto& a : spec.axes) a.spread = 0.0;
  const ConceptVector z = class_mean_vector("00", spec);  // large red circle
  const Tensor img = render_at(z, spec, 16.0, 16.0);
  const double radius = 0.5 * z.values[3] * 32;
  Vec mean = Vec::Zero(3);
  int count = 0;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      const double d = std::hypot(x + 0.5 - 16.0, y + 0.5 - 16.0);
      if (d <= radius - 2.0) {
        for (int c = 0; c < 3; ++c) mean[c] += img.at(0, c, y, x);
        ++count;
      }
    }
  REQUIRE(count > 0);
  mean /= count;
  for (int c = 0; c < 3; ++c) CHECK(std::abs(mean[c] - z.values[c]) < 0.02);
}

TEST_CASE("rendering is deterministic given the seed") {
  ConceptSpaceSpec spec = two_concept_spec(0.5, 0.5);
  Rng r1(42), r2(42);
  const ConceptVector z = sample_concept_vector("01", spec, r1);
  const ConceptVector z2 = sample_concept_vector("01", spec, r2);
  const RenderedSample a = render(z, spec, r1);
  const RenderedSample b = render(z2, spec, r2);
  CHECK(a.image.v == b.image.v);
  CHECK(a.pos_x == b.pos_x);
}

TEST_CASE("rasterized area matches the analytic circle area") {
  ConceptSpaceSpec spec = two_concept_spec(0.8, 0.6);
  for (auto& a : spec.axes) a.spread = 0.0;
  for (const char* cls : {"00", "01"}) {
    const ConceptVector z = class_mean_vector(cls, spec);
    const Tensor img = render_at(z, spec, 16.0, 16.0);
    const double rho = 0.5 * z.values[3];  // radius fraction
    // coverage-weighted pixel count on the red channel (red object, black bg)
    double area = 0.0;
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) area += img.at(0, 0, y, x) / z.values[0];
    const double analytic = M_PI * (rho * 32) * (rho * 32);
    CHECK(area == doctest::Approx(analytic).epsilon(0.05));
  }
}

TEST_CASE("background outside the boundary band is exact") {
  ConceptSpaceSpec spec = two_concept_spec(0.8, 0.6);
  for (auto& a : spec.axes) a.spread = 0.0;
  const ConceptVector z = class_mean_vector("01", spec);  // small circle
  const Tensor img = render_at(z, spec, 10.0, 12.0);
  const double radius = 0.5 * z.values[3] * 32;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      const double d = std::hypot(x + 0.5 - 10.0, y + 0.5 - 12.0);
      if (d > radius + 2.0)
        for (int c = 0; c < 3; ++c) CHECK(img.at(0, c, y, x) == 0.0);
    }
}

TEST_CASE("triangles render inside the inscribing radius") {
  ConceptSpaceSpec spec;
  spec.axes = {ConceptAxis::color(0.8), ConceptAxis::shape()};
  spec.height = spec.width = 32;
  ConceptVector z = class_mean_vector("11", spec);  // blue triangle
  const Tensor img = render_at(z, spec, 16.0, 16.0);
  // default size for a fixed-size space comes from the size axis being absent
  double painted = 0.0;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) painted += img.at(0, 2, y, x);
  CHECK(painted > 0.0);
}

TEST_CASE("object too large for the frame is an error") {
  ConceptSpaceSpec spec = two_concept_spec(0.8, 0.6, 17);
  ConceptVector z = class_mean_vector("00", spec);
  z.values[3] = 1.0;  // diameter = full frame; ceil margin exceeds the frame
  Rng rng(5);
  CHECK_THROWS(render(z, spec, rng));
}

TEST_CASE("dataset counts and determinism") {
  ConceptSpaceSpec spec = two_concept_spec(0.5, 0.5, 16);
  const std::vector<std::string> classes{"00", "01", "10"};
  const Dataset ds = build_dataset(spec, classes, 4, 123);
  CHECK(ds.samples.size() == 12);
  std::map<std::string, int> counts;
  for (const auto& s : ds.samples) counts[s.class_label]++;
  for (const auto& c : classes) CHECK(counts[c] == 4);

  const Dataset ds2 = build_dataset(spec, classes, 4, 123);
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    CHECK(ds.samples[i].image.v == ds2.samples[i].image.v);
    CHECK((ds.samples[i].z.values - ds2.samples[i].z.values).norm() == 0.0);
  }
  const Dataset ds3 = build_dataset(spec, classes, 1, 123);
  CHECK(ds3.samples.size() == 3);
  CHECK_THROWS(build_dataset(spec, {}, 4, 1));
  CHECK_THROWS(build_dataset(spec, classes, 0, 1));
}

TEST_CASE("nearest-class-mean classification of z is perfect") {
  ConceptSpaceSpec spec = two_concept_spec(0.2, 0.35, 16);
  const auto classes = spec.all_class_labels();
  const Dataset ds = build_dataset(spec, classes, 64, 9);
  for (const auto& s : ds.samples) {
    double best = 1e18;
    std::string best_cls;
    for (const auto& c : classes) {
      const ConceptVector m = class_mean_vector(c, spec);
      const double d = (m.values - s.z.values).norm();
      if (d < best) {
        best = d;
        best_cls = c;
      }
    }
    CHECK(best_cls == s.class_label);
  }
}

TEST_CASE("spreads scale with mean separation") {
  const double r = ConceptAxis::color(0.8).spread / ConceptAxis::color(0.2).spread;
  CHECK(r == doctest::Approx(4.0));
  const double rs = ConceptAxis::size(0.6).spread / ConceptAxis::size(0.3).spread;
  CHECK(rs == doctest::Approx(2.0));
}

TEST_CASE("mixing masks only matching samples") {
  ConceptSpaceSpec spec;
  spec.axes = {ConceptAxis::color(0.8), ConceptAxis::shape()};
  spec.height = spec.width = 16;
  MixingConfig mc;
  mc.mask_fraction = 1.0;
  mc.mask_class = "01";  // red triangle
  mc.mask_axis = "color";

  Rng rng(2);
  const ConceptVector z_match = sample_concept_vector("01", spec, rng);
  const Vec h = mix(z_match, spec, mc, rng);
  CHECK(h[0] == -1.0);
  CHECK(h[1] == -1.0);
  CHECK(h[2] == -1.0);
  CHECK(h[3] == 0.0);  // shape one-hot untouched
  CHECK(h[4] == 1.0);

  const ConceptVector z_other = sample_concept_vector("11", spec, rng);
  const Vec h2 = mix(z_other, spec, mc, rng);
  CHECK((h2 - conditioning_of(z_other, spec)).norm() == 0.0);

  mc.mask_fraction = 0.0;
  const Vec h3 = mix(z_match, spec, mc, rng);
  CHECK((h3 - conditioning_of(z_match, spec)).norm() == 0.0);
}

TEST_CASE("masked fraction concentrates around alpha") {
  ConceptSpaceSpec spec;
  spec.axes = {ConceptAxis::color(0.8), ConceptAxis::shape()};
  spec.height = spec.width = 16;
  MixingConfig mc;
  mc.mask_fraction = 0.5;
  mc.mask_class = "01";
  mc.mask_axis = "color";
  Rng rng(77);
  int masked = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const ConceptVector z = sample_concept_vector("01", spec, rng);
    const Vec h = mix(z, spec, mc, rng);
    if (h[0] == -1.0) ++masked;
  }
  CHECK(std::abs(masked / static_cast<double>(n) - 0.5) < 0.02);
}

TEST_CASE("concept signal grows with mean separation") {
  Rng rng(5);
  double prev = -1.0;
  for (double sep : {0.2, 0.4, 0.6, 0.8}) {
    ConceptSpaceSpec spec = two_concept_spec(sep, 0.5);
    const double sig = empirical_concept_signal(spec, "color", 64, rng);
    CHECK(sig >= prev);
    prev = sig;
  }
  // direct comparison of the endpoints
  Rng r2(6);
  ConceptSpaceSpec strong = two_concept_spec(0.8, 0.5);
  ConceptSpaceSpec weak = two_concept_spec(0.2, 0.5);
  const double s_strong = empirical_concept_signal(strong, "color", 128, r2);
  const double s_weak = empirical_concept_signal(weak, "color", 128, r2);
  CHECK(s_strong > s_weak);
}

TEST_CASE("constant axis has zero concept signal") {
  ConceptSpaceSpec spec;
  spec.axes = {ConceptAxis::color(0.5), ConceptAxis::fixed_shape(0)};
  spec.height = spec.width = 16;
  Rng rng(8);
  CHECK(empirical_concept_signal(spec, "shape", 16, rng) == 0.0);
  CHECK_THROWS(empirical_concept_signal(spec, "no_such_axis", 16, rng));
}

TEST_CASE("dataset save/load round-trips") {
  namespace fs = std::filesystem;
  ConceptSpaceSpec spec = two_concept_spec(0.5, 0.5, 16);
  const Dataset ds = build_dataset(spec, {"00", "11"}, 3, 5);
  const std::string dir = (fs::temp_directory_path() / "clab_dgp_roundtrip").string();
  fs::remove_all(dir);
  save_dataset(ds, dir);
  const Dataset back = load_dataset(dir);
  REQUIRE(back.samples.size() == ds.samples.size());
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    CHECK(back.samples[i].class_label == ds.samples[i].class_label);
    CHECK((back.samples[i].z.values - ds.samples[i].z.values).norm() < 1e-12);
    CHECK((back.samples[i].h - ds.samples[i].h).norm() < 1e-12);
    // 8-bit quantization on disk
    double max_err = 0.0;
    for (size_t q = 0; q < ds.samples[i].image.v.size(); ++q)
      max_err = std::max(max_err,
                         std::abs(back.samples[i].image.v[q] - ds.samples[i].image.v[q]));
    CHECK(max_err <= 0.5 / 255.0 + 1e-9);
  }
  fs::remove_all(dir);
}

TEST_CASE("spec json round-trips") {
  ConceptSpaceSpec spec = two_concept_spec(0.35, 0.65, 16);
  const ConceptSpaceSpec back = ConceptSpaceSpec::from_json(spec.to_json());
  CHECK(back.height == 16);
  CHECK(back.axes.size() == 2);
  CHECK(back.axes[0].name == "color");
  CHECK((back.axes[0].value_means[1] - spec.axes[0].value_means[1]).norm() < 1e-12);
  CHECK(back.axes[1].spread == doctest::Approx(spec.axes[1].spread));
}

TEST_CASE("max-diversity spreads keep classes separable") {
  ConceptSpaceSpec spec = two_concept_spec(0.2, 0.35, 16);
  const ConceptSpaceSpec diverse = spec.with_max_diversity();
  diverse.validate();
  CHECK(diverse.axes[0].spread > spec.axes[0].spread);
  CHECK(diverse.axes[1].spread > spec.axes[1].spread);
}
