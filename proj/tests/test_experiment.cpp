#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "conceptlab/experiment.hpp"
#include "conceptlab/io.hpp"
#include "conceptlab/toml.hpp"

using namespace conceptlab;
using namespace conceptlab::experiment;
namespace fs = std::filesystem;

namespace {

std::string tmp_dir(const std::string& name) {
  const std::string d = (fs::temp_directory_path() / name).string();
  fs::remove_all(d);
  return d;
}

int count_files(const std::string& dir, const std::string& suffix) {
  int n = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().string().ends_with(suffix)) ++n;
  return n;
}

}  // namespace

TEST_CASE("toml subset parses sections, arrays and comments") {
  const std::string text = R"(
kind = "train"   # stage
seeds = [1, 2, 3]
[dgp]
color_separation = 0.2
axes = ["color", "size"]
flag = true
)";
  const toml::Table t = toml::parse(text);
  CHECK(t.get_string("", "kind", "") == "train");
  CHECK(t.get_numbers("", "seeds", {}).size() == 3);
  CHECK(t.get_number("dgp", "color_separation", 0) == doctest::Approx(0.2));
  CHECK(t.get_strings("dgp", "axes", {})[1] == "size");
  CHECK(t.get_bool("dgp", "flag", false));
  CHECK_THROWS(toml::parse("key 123"));
  CHECK_THROWS(toml::parse("[unterminated"));
  CHECK_THROWS(toml::parse("x = [1, \"a\"]"));
}

TEST_CASE("experiment config round-trips through toml") {
  ExperimentConfig cfg = preset("fig6", "desk");
  cfg.kind = "train";
  const ExperimentConfig back = ExperimentConfig::from_toml(cfg.to_toml());
  CHECK(back.kind == "train");
  CHECK(back.color_separation == doctest::Approx(0.2));
  CHECK(back.size_separation == doctest::Approx(0.6));
  CHECK(back.net.channels_per_level == cfg.net.channels_per_level);
  CHECK(back.seeds == cfg.seeds);
  CHECK(back.config_hash() == cfg.config_hash());
}

TEST_CASE("config hash ignores the stage kind") {
  ExperimentConfig a = preset("fig6", "desk");
  a.kind = "gen-data";
  ExperimentConfig b = a;
  b.kind = "evaluate";
  CHECK(a.config_hash() == b.config_hash());
  b.color_separation = 0.3;
  CHECK(a.config_hash() != b.config_hash());
}

TEST_CASE("presets pin the published protocol settings") {
  const auto fig6 = preset("fig6", "desk");
  CHECK(fig6.seeds.size() == 5);
  CHECK(fig6.train.checkpoint_every <= 500);
  CHECK(fig6.protocols ==
        std::vector<std::string>{"naive", "overprompt", "latent", "patch"});
  CHECK(fig6.color_separation == doctest::Approx(0.2));
  CHECK(fig6.size_separation == doctest::Approx(0.6));

  const auto fig8 = preset("fig8", "desk");
  CHECK(fig8.masking_sweep == std::vector<double>{0, 25, 50, 75, 100});
  CHECK(fig8.axes == std::vector<std::string>{"color", "shape"});
  CHECK(fig8.n_per_class == 1000);

  const auto fig5 = preset("fig5", "desk");
  REQUIRE(fig5.sigma_pairs.size() == 4);
  CHECK(fig5.sigma_pairs[0] > fig5.sigma_pairs[1]);  // sigma1 > sigma2
  CHECK(fig5.sigma_pairs[2] < fig5.sigma_pairs[3]);  // mirrored pair

  const auto fig3 = preset("fig3", "desk");
  CHECK(fig3.signal_sweep == std::vector<double>{0.2, 0.35, 0.5, 0.65, 0.8});

  const auto appd5 = preset("appd5", "desk");
  CHECK(appd5.train_classes.size() == 4);
  CHECK(appd5.ood_class == "111");

  CHECK_THROWS(preset("fig99", "desk"));
  CHECK_THROWS(preset("fig6", "huge"));
  for (const auto& name : preset_names()) {
    ExperimentConfig c = preset(name);
    c.out_dir = "x";
    c.validate();
  }
}

TEST_CASE("unknown kind fails before any directory mutation") {
  ExperimentConfig cfg = preset("fig5", "desk");
  cfg.kind = "frobnicate";
  cfg.out_dir = tmp_dir("clab_nokind");
  CHECK_THROWS(run(cfg));
  CHECK(!fs::exists(cfg.out_dir));
}

TEST_CASE("simulate stage writes the landscape trajectory files") {
  ExperimentConfig cfg = preset("fig5", "desk");
  cfg.out_dir = tmp_dir("clab_fig5");
  REQUIRE(run(cfg) == 0);
  CHECK(fs::exists(cfg.out_dir + "/sim/two_phase_class00.csv"));
  CHECK(fs::exists(cfg.out_dir + "/sim/two_phase_class11.csv"));
  CHECK(fs::exists(cfg.out_dir + "/manifest.json"));

  // the manifest checksums match the files on disk
  const auto manifest = nlohmann::json::parse(io::read_text_file(cfg.out_dir + "/manifest.json"));
  for (const auto& [rel, sum] : manifest.at("files").items())
    CHECK(io::file_checksum(cfg.out_dir + "/" + rel) == sum.get<std::string>());

  // idempotent: re-running leaves artifacts untouched
  const std::string probe_file = cfg.out_dir + "/sim/two_phase_class00.csv";
  const std::string before = io::read_text_file(probe_file);
  io::write_text_file(probe_file, "tampered");
  REQUIRE(run(cfg) == 0);  // no-op: stage already complete
  CHECK(io::read_text_file(probe_file) == "tampered");
  RunOptions force;
  force.force = true;
  REQUIRE(run(cfg, force) == 0);
  CHECK(io::read_text_file(probe_file) == before);
  fs::remove_all(cfg.out_dir);
}

TEST_CASE("underspecification preset reproduces the endpoint sweep") {
  ExperimentConfig cfg = preset("fig10b", "desk");
  cfg.out_dir = tmp_dir("clab_fig10b");
  REQUIRE(run(cfg) == 0);
  std::ifstream f(cfg.out_dir + "/sim/underspec_endpoints.csv");
  REQUIRE(f.good());
  std::string line;
  std::getline(f, line);  // header
  const double expect_z1[] = {1.0, 0.75, 0.5, 0.25, 0.0};
  int i = 0;
  while (std::getline(f, line)) {
    double alpha, z1, z2;
    REQUIRE(sscanf(line.c_str(), "%lf,%lf,%lf", &alpha, &z1, &z2) == 3);
    CHECK(std::abs(z1 - expect_z1[i]) < 0.01);
    CHECK(std::abs(z2 - 1.0) < 0.01);
    ++i;
  }
  CHECK(i == 5);
  fs::remove_all(cfg.out_dir);
}

TEST_CASE("report on an empty run directory names the missing stages") {
  const std::string dir = tmp_dir("clab_empty_report");
  fs::create_directories(dir);
  CHECK_THROWS(write_report(dir));
  ExperimentConfig cfg = preset("fig6", "desk");
  cfg.out_dir = dir;
  io::write_text_file(dir + "/config.toml", cfg.to_toml().dump());
  try {
    write_report(dir);
    FAIL("expected missing-stage error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("missing") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("spearman rank correlation") {
  CHECK(spearman({1, 2, 3, 4, 5}, {2, 4, 6, 8, 10}) == doctest::Approx(1.0));
  CHECK(spearman({1, 2, 3, 4, 5}, {5, 4, 3, 2, 1}) == doctest::Approx(-1.0));
  CHECK(spearman({1, 2, 3, 4}, {1, 3, 2, 4}) == doctest::Approx(0.8));
  CHECK_THROWS(spearman({1.0}, {2.0}));
}

TEST_CASE("miniature pipeline runs end to end and deterministically") {
  ExperimentConfig cfg;
  cfg.name = "mini";
  cfg.profile = "desk";
  cfg.apply_profile();
  cfg.seeds = {7};
  cfg.n_per_class = 16;
  cfg.eval_classes = {"11"};
  cfg.net.channels_per_level = {4, 8};
  cfg.net.res_blocks_per_level = 1;
  cfg.net.time_hidden = 16;
  cfg.net.cond_hidden = 16;
  cfg.train.total_steps = 40;
  cfg.train.batch_size = 8;
  cfg.train.checkpoint_every = 20;
  cfg.train.log_every = 20;
  cfg.probe_cfg.channels = {8, 16, 32};
  cfg.probe_cfg.images_per_class = 96;
  cfg.probe_cfg.batch_size = 32;
  cfg.probe_cfg.train_steps = 2500;
  cfg.probe_cfg.eval_every = 100;
  cfg.eval_samples = 4;
  cfg.sampler_steps = 4;
  cfg.protocols = {"naive", "patch"};

  auto run_all = [&](const std::string& dir) {
    cfg.out_dir = dir;
    for (const char* kind :
         {"gen-data", "probe-train", "train", "evaluate", "intervene", "report"}) {
      cfg.kind = kind;
      REQUIRE(run(cfg) == 0);
    }
  };
  const std::string dir_a = tmp_dir("clab_mini_a");
  run_all(dir_a);
  CHECK(count_files(dir_a + "/data", ".png") == 3 * 16);
  CHECK(fs::exists(dir_a + "/probes/base.bin"));
  CHECK(fs::exists(dir_a + "/models/base/seed7/train_log.csv"));
  CHECK(fs::exists(dir_a + "/eval/base/seed7/traj_11.csv"));
  CHECK(fs::exists(dir_a + "/intervene/base/seed7/capability.json"));
  CHECK(fs::exists(dir_a + "/report/summary.json"));
  CHECK(count_files(dir_a + "/eval", ".png") >= 3);  // sample grids per checkpoint

  const std::string dir_b = tmp_dir("clab_mini_b");
  run_all(dir_b);
  CHECK(io::read_text_file(dir_a + "/eval/base/seed7/traj_11.csv") ==
        io::read_text_file(dir_b + "/eval/base/seed7/traj_11.csv"));
  CHECK(io::read_text_file(dir_a + "/intervene/base/seed7/elicitation.csv") ==
        io::read_text_file(dir_b + "/intervene/base/seed7/elicitation.csv"));
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
}
