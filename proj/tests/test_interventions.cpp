#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "conceptlab/interventions.hpp"

using namespace conceptlab;
using namespace conceptlab::interventions;

namespace {

struct Fixture {
  dgp::ConceptSpaceSpec spec;
  std::unique_ptr<probe::ProbeState> prb;
  std::unique_ptr<diffusion::DenoiserState> state;
  Vec base_cond;

  Fixture() {
    spec.axes = {dgp::ConceptAxis::color(0.4), dgp::ConceptAxis::size(0.5)};
    spec.height = spec.width = 16;
    probe::ProbeConfig pcfg;
    pcfg.channels = {8, 16, 32};
    pcfg.images_per_class = 128;
    pcfg.batch_size = 32;
    pcfg.train_steps = 2500;
    pcfg.eval_every = 100;
    prb = probe::train_probe(spec, pcfg, 71);

    nn::UNetConfig net;
    net.channels_per_level = {4, 8};
    net.res_blocks_per_level = 1;
    net.time_embed_dim = 8;
    net.time_hidden = 16;
    net.cond_hidden = 16;
    net.cond_dim = spec.cond_dims();
    net.height = net.width = 16;
    state = diffusion::DenoiserState::create(net, diffusion::TrainConfig{}, 72);
    // give the untrained sampler nonzero output so evaluations are not all
    // identical by construction
    Rng r(73);
    for (nn::Param* p : state->net.params())
      if (p->name == "out.conv.weight")
        for (double& w : p->w) w = 0.05 * r.normal();
    base_cond = dgp::conditioning_of(dgp::class_mean_vector("11", spec), spec);
  }

  EvalParams ev(uint64_t seed = 1000) const {
    EvalParams e;
    e.n_samples = 8;
    e.sampler_steps = 6;
    e.w_cfg = 1.0;
    e.eval_seed = seed;
    return e;
  }
};

Fixture& fx() {
  static Fixture f;
  return f;
}

}  // namespace

TEST_CASE("default overprompt sweep reproduces the published conditionings") {
  auto os = OverpromptSpec::blue_defaults(fx().spec, "11");
  REQUIRE(os.sweep.size() == 5);
  const double expect[5][3] = {{0.40, 0.40, 0.60},
                               {0.35, 0.35, 0.65},
                               {0.25, 0.25, 0.75},
                               {0.15, 0.15, 0.85},
                               {0.05, 0.05, 0.95}};
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 3; ++j) CHECK(os.sweep[i][j] == doctest::Approx(expect[i][j]));
  // the non-color part of the conditioning is the class mean
  CHECK(os.sweep[0][3] == doctest::Approx(fx().base_cond[3]));
}

TEST_CASE("singleton overprompt sweep equals naive prompting exactly") {
  auto& f = fx();
  const double naive = naive_accuracy(*f.state, *f.prb, f.base_cond, "11", f.ev());
  OverpromptSpec os;
  os.base_conditioning = f.base_cond;
  os.sweep = {f.base_cond};
  const auto res = overprompt(*f.state, os, *f.prb, "11", f.ev());
  CHECK(res.best_accuracy == naive);
  CHECK(res.best_index == 0);
}

TEST_CASE("enlarging a sweep never decreases the best accuracy") {
  auto& f = fx();
  auto os_small = OverpromptSpec::blue_defaults(f.spec, "11");
  os_small.sweep.resize(2);
  const auto small = overprompt(*f.state, os_small, *f.prb, "11", f.ev());
  auto os_full = OverpromptSpec::blue_defaults(f.spec, "11");
  const auto full = overprompt(*f.state, os_full, *f.prb, "11", f.ev());
  CHECK(full.best_accuracy >= small.best_accuracy);
  // shared entries score identically: per-entry rng streams are independent
  CHECK(full.accuracies[0] == small.accuracies[0]);
  CHECK(full.accuracies[1] == small.accuracies[1]);
  OverpromptSpec empty;
  CHECK_THROWS(overprompt(*f.state, empty, *f.prb, "11", f.ev()));
}

TEST_CASE("identity latent intervention equals naive prompting exactly") {
  auto& f = fx();
  const double naive = naive_accuracy(*f.state, *f.prb, f.base_cond, "11", f.ev());
  LatentInterventionSpec ls = LatentInterventionSpec::defaults(f.spec, "11");
  ls.alpha_grid = {0.0};
  ls.beta_grid = {0.0};
  const auto res = latent_intervene(*f.state, f.base_cond, ls, *f.prb, "11", f.ev());
  CHECK(res.best_accuracy == naive);
  CHECK(res.best_alpha == 0.0);
}

TEST_CASE("published grid evaluates 16 combinations") {
  auto& f = fx();
  const LatentInterventionSpec ls = LatentInterventionSpec::defaults(f.spec, "11");
  CHECK(ls.alpha_grid == std::vector<double>{0.1, 1.0, 2.0, 4.0});
  CHECK(ls.beta_grid == std::vector<double>{0.1, 0.25, 0.5, 1.0});
  const auto res = latent_intervene(*f.state, f.base_cond, ls, *f.prb, "11", f.ev());
  CHECK(res.accuracies.size() == 16);
  // direction construction: very blue, and large size 0.7
  CHECK(ls.cond_plus[2] == doctest::Approx(0.95));
  CHECK(ls.cond_minus[3] == doctest::Approx(0.7));
}

TEST_CASE("zero-norm concept directions are rejected") {
  auto& f = fx();
  auto zeroed = f.state->clone();
  for (nn::Param* p : zeroed->net.embedding_params())
    std::fill(p->w.begin(), p->w.end(), 0.0);
  const LatentInterventionSpec ls = LatentInterventionSpec::defaults(f.spec, "11");
  CHECK_THROWS(latent_intervene(*zeroed, f.base_cond, ls, *f.prb, "11", f.ev()));
}

TEST_CASE("self-patching reproduces naive accuracy exactly") {
  auto& f = fx();
  const double naive = naive_accuracy(*f.state, *f.prb, f.base_cond, "11", f.ev());
  const double patched = patch_and_evaluate(*f.state, *f.state, *f.prb, f.base_cond, "11", f.ev());
  CHECK(patched == naive);
}

TEST_CASE("patching across incompatible configs fails") {
  auto& f = fx();
  nn::UNetConfig other = f.state->net_cfg;
  other.channels_per_level = {6, 8};
  auto donor = diffusion::DenoiserState::create(other, diffusion::TrainConfig{}, 99);
  CHECK_THROWS(patch_and_evaluate(*f.state, *donor, *f.prb, f.base_cond, "11", f.ev()));
}

TEST_CASE("sustained crossing rule") {
  const std::vector<long> steps{0, 250, 500, 750, 1000};
  CHECK(first_sustained_crossing(steps, {0.1, 0.6, 0.7, 0.8, 0.9}, 0.5, 2) == 250);
  // a single blip does not sustain
  CHECK(first_sustained_crossing(steps, {0.1, 0.6, 0.2, 0.3, 0.4}, 0.5, 2) == -1);
  CHECK(first_sustained_crossing(steps, {0.1, 0.6, 0.2, 0.6, 0.7}, 0.5, 2) == 750);
  CHECK(first_sustained_crossing(steps, {0.1, 0.6, 0.2, 0.3, 0.7}, 0.5, 1) == 250);
  CHECK(first_sustained_crossing(steps, {0.9, 0.9, 0.9, 0.9, 0.9}, 0.5, 2) == 0);
}

TEST_CASE("elicitation curves evaluate each checkpoint in order") {
  namespace fs = std::filesystem;
  auto& f = fx();
  const std::string dir = (fs::temp_directory_path() / "clab_elicit").string();
  fs::create_directories(dir);
  auto c0 = f.state->clone();
  c0->step = 0;
  c0->save_file(dir + "/ckpt_0000000.bin");
  auto c1 = f.state->clone();
  c1->step = 250;
  c1->save_file(dir + "/ckpt_0000250.bin");

  ElicitationInputs in;
  in.checkpoint_paths = {dir + "/ckpt_0000000.bin", dir + "/ckpt_0000250.bin"};
  in.spec = f.spec;
  in.target_class = "11";
  in.capability_threshold = 0.5;

  for (auto protocol : {Protocol::Naive, Protocol::Overprompt, Protocol::Latent, Protocol::Patch}) {
    const auto curve = elicitation_curve(in, protocol, *f.prb, f.ev());
    CHECK(curve.steps == std::vector<long>{0, 250});
    CHECK(curve.accuracy.size() == 2);
    // an untrained model stays close to chance, far from the threshold
    for (double a : curve.accuracy) CHECK(a < 0.5);
    CHECK(!curve.capability.has_value());
  }

  // unordered checkpoints are rejected
  ElicitationInputs bad = in;
  std::swap(bad.checkpoint_paths[0], bad.checkpoint_paths[1]);
  CHECK_THROWS(elicitation_curve(bad, Protocol::Naive, *f.prb, f.ev()));
  fs::remove_all(dir);
}
