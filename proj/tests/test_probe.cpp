#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>

#include "conceptlab/probe.hpp"

using namespace conceptlab;

namespace {

dgp::ConceptSpaceSpec desk_spec(double color_sep = 0.5, double size_sep = 0.5) {
  dgp::ConceptSpaceSpec spec;
  spec.axes = {dgp::ConceptAxis::color(color_sep), dgp::ConceptAxis::size(size_sep)};
  spec.height = spec.width = 16;
  return spec;
}

probe::ProbeConfig fast_cfg() {
  probe::ProbeConfig cfg;
  cfg.channels = {8, 16, 32};
  cfg.images_per_class = 192;
  cfg.batch_size = 32;
  cfg.train_steps = 3000;
  cfg.eval_every = 100;
  return cfg;
}

Tensor render_batch(const dgp::ConceptSpaceSpec& spec, const std::string& cls, int n,
                    uint64_t seed) {
  Tensor batch(n, 3, spec.height, spec.width);
  for (int i = 0; i < n; ++i) {
    Rng rng = Rng::derive(seed, "probe-test", i);
    const auto z = dgp::sample_concept_vector(cls, spec, rng);
    const auto s = dgp::render(z, spec, rng);
    std::copy_n(s.image.v.data(), batch.per_image(), batch.image(i));
  }
  return batch;
}

std::unique_ptr<probe::ProbeState>& shared_probe() {
  static std::unique_ptr<probe::ProbeState> p;
  if (!p) p = probe::train_probe(desk_spec(), fast_cfg(), 31337);
  return p;
}

}  // namespace

TEST_CASE("probe reaches the held-out accuracy target on synthetic data") {
  auto& p = shared_probe();
  CHECK(p->held_out_accuracy >= 0.99);
  CHECK(p->axis_names == std::vector<std::string>{"color", "size"});
}

TEST_CASE("probe scores its own training distribution at least as well") {
  auto& p = shared_probe();
  // fresh draws from the max-diversity training distribution
  const auto diverse = desk_spec().with_max_diversity();
  double worst = 1.0;
  for (const auto& cls : diverse.all_class_labels()) {
    const Tensor batch = render_batch(diverse, cls, 64, 1234);
    const auto ev = probe::evaluate(batch, *p, cls);
    worst = std::min(worst, ev.per_axis_accuracy.minCoeff());
  }
  CHECK(worst >= p->held_out_accuracy - 0.02);
}

TEST_CASE("degenerate spec without two values per axis is rejected") {
  dgp::ConceptSpaceSpec spec;
  spec.axes = {dgp::ConceptAxis::fixed_shape(0)};
  spec.height = spec.width = 16;
  CHECK_THROWS(probe::train_probe(spec, fast_cfg(), 1));
}

TEST_CASE("unreachable accuracy target reports confusion diagnostics") {
  probe::ProbeConfig cfg = fast_cfg();
  cfg.train_steps = 1;
  cfg.eval_every = 1;
  cfg.images_per_class = 64;
  try {
    probe::train_probe(desk_spec(), cfg, 7);
    FAIL("expected a diagnostics error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("confusion") != std::string::npos);
  }
}

TEST_CASE("coordinates land at the class corners for clean renders") {
  auto& p = shared_probe();
  const auto spec = desk_spec();
  const Tensor b11 = render_batch(spec, "11", 64, 99);
  const Vec c11 = probe::concept_coordinates(b11, *p);
  CHECK(std::abs(c11[0] - 1.0) < 0.05);
  CHECK(std::abs(c11[1] - 1.0) < 0.05);

  const Tensor b00 = render_batch(spec, "00", 64, 98);
  const Vec c00 = probe::concept_coordinates(b00, *p);
  CHECK(std::abs(c00[0]) < 0.05);
  CHECK(std::abs(c00[1]) < 0.05);

  // a 50/50 mixture of 00 and 11 averages to the center
  Tensor mixed(128, 3, 16, 16);
  for (int i = 0; i < 64; ++i) {
    std::copy_n(b00.image(i), b00.per_image(), mixed.image(i));
    std::copy_n(b11.image(i), b11.per_image(), mixed.image(64 + i));
  }
  const Vec cm = probe::concept_coordinates(mixed, *p);
  CHECK(std::abs(cm[0] - 0.5) < 0.05);
  CHECK(std::abs(cm[1] - 0.5) < 0.05);
}

TEST_CASE("accuracies compare argmax labels against the target bits") {
  auto& p = shared_probe();
  const auto spec = desk_spec();
  const Tensor b11 = render_batch(spec, "11", 64, 55);
  const auto perfect = probe::evaluate(b11, *p, "11");
  CHECK(perfect.joint_accuracy == doctest::Approx(1.0).epsilon(0.03));

  const Tensor b01 = render_batch(spec, "01", 64, 56);
  const auto cross = probe::evaluate(b01, *p, "11");
  CHECK(cross.per_axis_accuracy[0] < 0.05);  // color mismatch
  CHECK(cross.per_axis_accuracy[1] > 0.95);  // size matches
  CHECK(cross.joint_accuracy < 0.05);

  // joint accuracy never exceeds any per-axis accuracy
  for (const auto* ev : {&perfect, &cross})
    CHECK(ev->joint_accuracy <= ev->per_axis_accuracy.minCoeff() + 1e-12);

  CHECK_THROWS(probe::evaluate(b11, *p, "1"));
  Tensor empty;
  CHECK_THROWS(probe::evaluate(empty, *p, "11"));
}

TEST_CASE("coordinates are permutation invariant and inference deterministic") {
  auto& p = shared_probe();
  const auto spec = desk_spec();
  Tensor batch = render_batch(spec, "10", 32, 77);
  const Vec c1 = probe::concept_coordinates(batch, *p);
  // reverse the batch
  Tensor rev(batch.n, batch.c, batch.h, batch.w);
  for (int i = 0; i < batch.n; ++i)
    std::copy_n(batch.image(i), batch.per_image(), rev.image(batch.n - 1 - i));
  const Vec c2 = probe::concept_coordinates(rev, *p);
  CHECK((c1 - c2).cwiseAbs().maxCoeff() < 1e-12);
  const Vec c3 = probe::concept_coordinates(batch, *p);
  CHECK((c1 - c3).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("probe checkpoints round-trip") {
  namespace fs = std::filesystem;
  auto& p = shared_probe();
  const std::string path = (fs::temp_directory_path() / "clab_probe.bin").string();
  p->save_file(path);
  auto back = probe::ProbeState::load_file(path);
  CHECK(back->held_out_accuracy == p->held_out_accuracy);
  const Tensor batch = render_batch(desk_spec(), "01", 16, 3);
  const Vec a = probe::concept_coordinates(batch, *p);
  const Vec b = probe::concept_coordinates(batch, *back);
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
  fs::remove(path);
}
