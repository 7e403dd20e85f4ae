#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "oracles.hpp"
#include "saliency/imaging.hpp"
#include "saliency/model_io.hpp"

namespace fs = std::filesystem;
using namespace saliency;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + std::string(SALIENCY_BIN) + " " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[512];
  while (fgets(buf, sizeof buf, pipe)) r.out += buf;
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("saliency_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  // 1x4x4 input, conv -> relu -> gap -> dense.
  void write_tiny_model() {
    std::ofstream(dir_ / "tiny.json") << R"({"name": "tiny", "input_shape": [1, 4, 4],
      "preprocess": {"mean": [0.5], "std": [0.5]}, "class_labels": ["a", "b"],
      "layers": [
        {"name": "conv1", "type": "conv2d", "out_channels": 2, "kernel": 3, "stride": 1, "padding": 1},
        {"name": "relu1", "type": "relu"},
        {"name": "gap", "type": "gap"},
        {"name": "fc", "type": "dense", "out_features": 2}]})";
    const auto spec = load_model_spec(dir_ / "tiny.json");
    std::mt19937 rng(8);
    WeightStore store;
    for (const auto& slot : parameter_slots(spec)) store.add(slot.name, oracle::random_tensor<float>(rng, slot.shape));
    save_weights(store, dir_ / "tiny.gcw");
    Image img(4, 4, 1);
    for (std::size_t i = 0; i < 16; ++i) img.pixels[i] = std::uint8_t(i * 16);
    write_image(img, dir_ / "tiny.pgm");
  }

  std::string fixture(const std::string& name) const { return (oracle::fixture_dir() / name).string(); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, ExplainWritesOverlayAndRawGrid) {
  const auto r = run("explain " + fixture("gap.json") + " " + fixture("gap.gcw") + " " + fixture("images/000.ppm") +
                     " --method gradcam --class auto --out " + path("out"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("score"), std::string::npos);
  int images = 0, raws = 0;
  for (const auto& e : fs::directory_iterator(dir_ / "out")) {
    const auto name = e.path().filename().string();
    if (name.find(".gradcam.") != std::string::npos && e.path().extension() == ".ppm") ++images;
    if (e.path().extension() == ".f32") ++raws;
  }
  EXPECT_EQ(images, 1);
  EXPECT_EQ(raws, 1);
  EXPECT_TRUE(fs::exists(dir_ / "out" / "run.json"));
  const std::string label = r.out.find("(square)") != std::string::npos ? "square" : "disc";
  const auto sidecar = nlohmann::json::parse(oracle::read_text(dir_ / "out" / ("000.gradcam." + label + ".f32.json")));
  EXPECT_EQ(sidecar["shape"], (std::vector<int>{16, 16}));
}

TEST_F(Cli, ExplainIsByteIdenticalAcrossRuns) {
  const std::string base = "explain " + fixture("gap.json") + " " + fixture("gap.gcw") + " " +
                           fixture("images/004.ppm") + " --methods cam,gradcam,gbp,guided-gradcam --class 1 --out ";
  ASSERT_EQ(run(base + path("a")).code, 0);
  fs::copy(dir_ / "a", dir_ / "first");
  ASSERT_EQ(run(base + path("a")).code, 0);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir_ / "first")) {
    ++files;
    EXPECT_EQ(oracle::read_text(e.path()), oracle::read_text(dir_ / "a" / e.path().filename())) << e.path();
  }
  EXPECT_GE(files, 12u);
}

TEST_F(Cli, CamOnFullyConnectedModelIsInputError) {
  const auto r = run("explain " + fixture("fc.json") + " " + fixture("fc.gcw") + " " + fixture("images/000.ppm") +
                     " --method cam --out " + path("out"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("NotCamCompatible"), std::string::npos) << r.out;
}

TEST_F(Cli, BadInputsExitOne) {
  EXPECT_EQ(run("explain " + fixture("gap.json")).code, 1);
  EXPECT_EQ(run("explain " + fixture("gap.json") + " " + fixture("gap.gcw") + " " + fixture("images/000.ppm") +
                " --bogus")
                .code,
            1);
  EXPECT_EQ(run("explain " + fixture("gap.json") + " " + fixture("fc.gcw") + " " + fixture("images/000.ppm")).code, 1);
  EXPECT_EQ(run("explain " + fixture("gap.json") + " " + fixture("gap.gcw") + " " + fixture("images/000.ppm") +
                " --class zebra --out " + path("o"))
                .code,
            1);
  EXPECT_EQ(run("explain " + fixture("gap.json") + " " + fixture("gap.gcw") + " " + fixture("images/000.ppm") +
                " --layer nowhere --out " + path("o"))
                .code,
            1);
}

TEST_F(Cli, InfoPrintsOneRowPerLayer) {
  write_tiny_model();
  const auto r = run("info " + path("tiny.json") + " " + path("tiny.gcw"));
  ASSERT_EQ(r.code, 0) << r.out;
  std::istringstream lines(r.out);
  std::vector<std::string> rows;
  for (std::string line; std::getline(lines, line);) rows.push_back(line);
  ASSERT_EQ(rows.size(), 5u);  // header + 4 layers
  EXPECT_NE(rows[1].find("[2,4,4]"), std::string::npos);
  EXPECT_NE(rows[3].find("[2]"), std::string::npos);
  EXPECT_NE(rows[4].find("[2]"), std::string::npos);
}

TEST_F(Cli, OccludeOn4x4GivesTwoByTwoGrid) {
  write_tiny_model();
  const auto r = run("occlude " + path("tiny.json") + " " + path("tiny.gcw") + " " + path("tiny.pgm") +
                     " --patch 2 --stride 2 --class 0 --out " + path("out"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto meta = nlohmann::json::parse(oracle::read_text(dir_ / "out" / "tiny.occlusion.a.f32.json"));
  EXPECT_EQ(meta["shape"], (std::vector<int>{2, 2}));
  EXPECT_EQ(fs::file_size(dir_ / "out" / "tiny.occlusion.a.f32"), 16u);
}

TEST_F(Cli, OcclusionIndependentOfThreadCount) {
  const std::string args = "occlude " + fixture("gap.json") + " " + fixture("gap.gcw") + " " +
                           fixture("images/002.ppm") + " --patch 4 --stride 2 --class square --out ";
  ASSERT_EQ(run(args + path("one"), "SALIENCY_THREADS=1 ").code, 0);
  ASSERT_EQ(run(args + path("four"), "SALIENCY_THREADS=4 ").code, 0);
  EXPECT_EQ(oracle::read_text(dir_ / "one" / "002.occlusion.square.f32"),
            oracle::read_text(dir_ / "four" / "002.occlusion.square.f32"));
  EXPECT_FALSE(oracle::read_text(dir_ / "one" / "002.occlusion.square.f32").empty());
}

TEST_F(Cli, EvaluateReportsOneRhoPerMethod) {
  const auto r = run("evaluate " + fixture("gap.json") + " " + fixture("gap.gcw") + " " + fixture("images/000.ppm") +
                     " --methods gbp,guided-gradcam --patch 8 --stride 4 --out " + path("out"));
  ASSERT_EQ(r.code, 0) << r.out;
  nlohmann::json report;
  for (const auto& e : fs::directory_iterator(dir_ / "out")) {
    if (e.path().filename().string().find(".evaluate.") != std::string::npos) {
      report = nlohmann::json::parse(oracle::read_text(e.path()));
    }
  }
  ASSERT_EQ(report["results"].size(), 2u);
  EXPECT_EQ(report["results"][0]["method"], "gbp");
  EXPECT_EQ(report["sweep"]["patch"], 8);
}
