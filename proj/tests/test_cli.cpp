#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <sys/wait.h>

#include "hyperseg/inference.hpp"
#include "hyperseg/models.hpp"
#include "hyperseg/synthdata.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace hyperseg;
using hyperseg::testing::temp_dir;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(HYPERSEG_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

std::size_t count_subdirs(const fs::path& p, const std::string& prefix) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(p))
    n += e.is_directory() && e.path().filename().string().rfind(prefix, 0) == 0;
  return n;
}

const char* kSmallConfig =
    "seed = 4\n"
    "dataset.n_samples = 8\n"
    "dataset.grid_size = 16\n"
    "model.kernel_depths = 4, 8\n"
    "model.hypervector_size = 4\n"
    "model.mapping_layers = 2\n"
    "train.epochs = 1\n"
    "train.batch_size = 2\n"
    "train.patch_size = 8\n"
    "train.lr = 0.001\n"
    "predict.patch = 8\n"
    "predict.ensemble_alphas = 0.3, 0.7\n";

}  // namespace

TEST_CASE("generate") {
  const auto dir = temp_dir("cli_generate");
  write(dir / "run.cfg", kSmallConfig);
  const auto cfg = (dir / "run.cfg").string();
  REQUIRE(run("generate --config " + cfg + " --out " + (dir / "a").string()) == 0);
  CHECK(count_subdirs(dir / "a", "sample_") == 8);
  CHECK(fs::exists(dir / "a" / "config.echo"));
  CHECK(fs::exists(dir / "a" / "FORMAT_VERSION"));
  REQUIRE(run("generate --config " + cfg + " --out " + (dir / "b").string()) == 0);
  for (const auto& e : fs::recursive_directory_iterator(dir / "a"))
    if (e.is_regular_file()) CHECK(slurp(e.path()) == slurp(dir / "b" / fs::relative(e.path(), dir / "a")));

  CHECK(run("generate --config " + cfg + " --out " + (dir / "c").string() + " dataset.n_samples=3") == 0);
  CHECK(count_subdirs(dir / "c", "sample_") == 3);
  CHECK(slurp(dir / "c" / "config.echo").find("dataset.n_samples = 3\n") != std::string::npos);

  CHECK(run("generate --config " + cfg + " --out " + (dir / "d").string() + " dataset.n_samples=-4") == 1);
  CHECK(run("generate --config " + cfg + " --out " + (dir / "d").string() + " nonsense.key=1") == 1);
  CHECK(run("generate --out " + (dir / "d").string()) == 1);  // seed missing
  CHECK(run("generate --config " + (dir / "missing.cfg").string() + " --out " + (dir / "d").string()) == 1);
  CHECK(run("frobnicate") == 1);
  write(dir / "blocker", "x");
  CHECK(run("generate --config " + cfg + " --out " + (dir / "blocker" / "sub").string()) == 2);
}

TEST_CASE("train, predict and evaluate") {
  const auto dir = temp_dir("cli_pipeline");
  write(dir / "run.cfg", kSmallConfig);
  const std::string cfg = "--config " + (dir / "run.cfg").string();
  const std::string data = (dir / "data").string();
  REQUIRE(run("generate " + cfg + " --out " + data) == 0);

  SUBCASE("vtv ensemble") {
    REQUIRE(run("train " + cfg + " --dataset " + data + " --out " + (dir / "vtv").string() +
                " train.strategy=vtv_ensemble") == 0);
    CHECK(count_subdirs(dir / "vtv", "member_") == 5);
    for (const char* a : {"0.1", "0.3", "0.5", "0.7", "0.9"}) CHECK(fs::exists(dir / "vtv" / ("member_" + std::string(a)) / "manifest"));
    const auto report = nlohmann::json::parse(slurp(dir / "vtv" / "train_report.json"));
    CHECK(report["members"].size() == 5);
    CHECK(fs::exists(dir / "vtv" / "timing.json"));

    REQUIRE(run("predict " + cfg + " --model " + (dir / "vtv").string() + " --dataset " + data + " --out " +
                (dir / "pred").string() + " --method vtv predict.taus=0.25,0.5,0.75") == 0);
    const auto pm = nlohmann::json::parse(slurp(dir / "pred" / "predictions.json"));
    REQUIRE(pm["ids"].size() == 2);  // validation quarter of 8
    const fs::path first = dir / "pred" / pm["ids"][0].get<std::string>();
    for (const char* f : {"prob.f64", "prob.header", "prob.pgm", "entropy.f64", "entropy.pgm", "label_tau0.25.pgm",
                          "label_tau0.5.pgm", "label_tau0.75.pgm"})
      CHECK_MESSAGE(fs::exists(first / f), f);

    REQUIRE(run("predict " + cfg + " --model " + (dir / "vtv").string() + " --dataset " + data + " --out " +
                (dir / "pred_notau").string() + " predict.taus=") == 0);
    std::size_t labels = 0;
    for (const auto& e : fs::recursive_directory_iterator(dir / "pred_notau"))
      labels += e.path().filename().string().rfind("label_", 0) == 0;
    CHECK(labels == 0);

    REQUIRE(run("evaluate " + cfg + " --predictions " + (dir / "pred").string() + " --dataset " + data + " --out " +
                (dir / "eval").string()) == 0);
    std::istringstream sweep(slurp(dir / "eval" / "sweep.csv"));
    std::size_t rows = 0;
    for (std::string l; std::getline(sweep, l);) rows += l.rfind("vtv,micro,", 0) == 0;
    CHECK(rows == 21);
    CHECK(slurp(dir / "eval" / "summary.csv").find("prob_mae") != std::string::npos);
  }

  SUBCASE("hypernet") {
    REQUIRE(run("train " + cfg + " --dataset " + data + " --out " + (dir / "hyp").string() +
                " train.strategy=hypernet") == 0);
    CHECK(fs::exists(dir / "hyp" / "model" / "manifest"));
    const std::string log = slurp(dir / "hyp" / "train.log");
    std::size_t steps = 0;
    for (std::size_t at = log.find("alpha=0."); at != std::string::npos; at = log.find("alpha=0.", at + 1)) ++steps;
    CHECK(steps == 3);  // 6 training samples, minibatch 2
    CHECK(run("predict " + cfg + " --model " + (dir / "hyp").string() + " --dataset " + data + " --out " +
              (dir / "hp").string()) == 0);
    CHECK(run("predict " + cfg + " --model " + (dir / "hyp").string() + " --dataset " + data + " --out " +
              (dir / "hp1").string() + " --alpha 0.4") == 0);
    CHECK(run("predict " + cfg + " --model " + (dir / "hyp").string() + " --dataset " + data + " --out " +
              (dir / "hp2").string() + " --alpha 1.5") == 1);
  }

  SUBCASE("zero epochs keeps the initialization") {
    REQUIRE(run("train " + cfg + " --dataset " + data + " --out " + (dir / "zero").string() + " train.epochs=0") == 0);
    const auto ck = load_checkpoint(dir / "zero" / "model");
    ModelSpec spec;
    spec.kernel_depths = {4, 8};
    spec.hypervector_size = 4;
    spec.mapping_layers = 2;
    const auto init = SegmentationNet::create(spec, 4);
    for (std::size_t i = 0; i < init.parameters().size(); ++i) {
      const auto a = init.parameters()[i].second.data(), b = ck.model.parameters()[i].second.data();
      CHECK(std::equal(a.begin(), a.end(), b.begin(), b.end()));
    }
  }

  SUBCASE("reruns are byte identical") {
    for (const char* name : {"r1", "r2"}) {
      REQUIRE(run("train " + cfg + " --dataset " + data + " --out " + (dir / name).string()) == 0);
      REQUIRE(run("predict " + cfg + " --model " + (dir / name).string() + " --dataset " + data + " --out " +
                  (dir / (std::string(name) + "p")).string()) == 0);
      REQUIRE(run("evaluate " + cfg + " --predictions " + (dir / (std::string(name) + "p")).string() + " --dataset " +
                  data + " --out " + (dir / (std::string(name) + "e")).string()) == 0);
    }
    for (const auto& [a, b] : {std::pair{"r1", "r2"}, std::pair{"r1p", "r2p"}, std::pair{"r1e", "r2e"}})
      for (const auto& e : fs::recursive_directory_iterator(dir / a)) {
        if (!e.is_regular_file()) continue;
        const auto name = e.path().filename().string();
        if (name == "train.log" || name == "timing.json") continue;
        CHECK_MESSAGE(slurp(e.path()) == slurp(dir / b / fs::relative(e.path(), dir / a)), e.path().string());
      }
  }

  SUBCASE("contract errors") {
    CHECK(run("predict " + cfg + " --model " + (dir / "nowhere").string() + " --dataset " + data + " --out " +
              (dir / "x").string()) == 2);
    REQUIRE(run("train " + cfg + " --dataset " + data + " --out " + (dir / "m").string()) == 0);
    REQUIRE(run("predict " + cfg + " --model " + (dir / "m").string() + " --dataset " + data + " --out " +
                (dir / "p").string() + " --subset all") == 0);
    REQUIRE(run("generate " + cfg + " --out " + (dir / "small").string() + " dataset.n_samples=4") == 0);
    CHECK(run("evaluate " + cfg + " --predictions " + (dir / "p").string() + " --dataset " + (dir / "small").string() +
              " --out " + (dir / "e").string()) == 1);
    CHECK(run("train " + cfg + " --dataset " + (dir / "nodata").string() + " --out " + (dir / "y").string()) == 2);
  }
}

TEST_CASE("diverged training exits with a runtime failure") {
  const auto dir = temp_dir("cli_nan");
  write(dir / "run.cfg", kSmallConfig);
  const std::string cfg = "--config " + (dir / "run.cfg").string();
  REQUIRE(run("generate " + cfg + " --out " + (dir / "data").string()) == 0);
  // corrupt one training image with a NaN
  auto ds = read_dataset(dir / "data");
  for (auto& v : ds.samples[ds.split.train[0]].image.values) v = std::nan("");
  fs::remove_all(dir / "data");
  write_dataset(ds, dir / "data");
  CHECK(run("train " + cfg + " --dataset " + (dir / "data").string() + " --out " + (dir / "m").string()) == 2);
}
