#include <cstdlib>
#include <filesystem>
#include <sstream>

#include <gtest/gtest.h>
#include <sys/wait.h>

#include "cli.hpp"
#include "json.hpp"
#include "fixtures.hpp"
#include "munet/image_io.hpp"
#include "munet/mesh.hpp"

using namespace munet;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("munet_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }
  std::string mesh(const std::string& name, const MeshGraph& m) const {
    write_obj_file(m, path(name));
    return path(name);
  }
  std::string text(const std::string& name, const std::string& content) const {
    write_file(path(name), content);
    return path(name);
  }

  fs::path dir_;
};

const char* kShortConfig = R"({
  "network": {"template_subdivisions": 1, "image_resolution": 16, "global_dim": 4, "local_dim": 4,
              "l1_width": 8, "graph_widths": [8, 8], "mesh_widths": [6, 6]},
  "training": {"steps": 6, "eval_every": 3, "eval_samples": 200, "warmup_steps": 2},
  "data": {"train_samples": 2}
})";

} // namespace

TEST_F(CliTest, ValidateExitCodes) {
  EXPECT_EQ(run({"validate", mesh("ico.obj", make_icosphere(2))}).code, 0);
  const MeshGraph tri(Positions{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}}, {{0, 1, 2}});
  const Result r = run({"validate", mesh("tri.obj", tri), "--json"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("boundary_edge"), std::string::npos) << r.out;
  EXPECT_EQ(run({"validate", path("missing.obj")}).code, 3);
  EXPECT_EQ(run({"validate", text("bad.obj", "v 0 0\n")}).code, 3);
}

TEST_F(CliTest, MetricsIdenticalAndConcentric) {
  const std::string a = mesh("a.obj", make_icosphere(3));
  const Result same = run({"metrics", a, a, "--samples", "2000", "--res", "64", "--json", path("same.json")});
  ASSERT_EQ(same.code, 0) << same.err;
  const auto doc = nlohmann::json::parse(read_file(path("same.json")));
  EXPECT_EQ(doc.at("schema_version").get<int>(), 1);
  for (const char* k : {"mvpe", "chamfer", "p2s", "s2p", "normal_cos", "normal_l2"})
    EXPECT_LE(doc.at("metrics").at(k).get<double>(), 1e-9) << k;

  const std::string b = mesh("b.obj", munet::test::scaled(make_icosphere(3), 1.1));
  const Result gap = run({"metrics", b, a, "--samples", "10000", "--res", "64", "--json", path("gap.json")});
  ASSERT_EQ(gap.code, 0) << gap.err;
  const auto j = nlohmann::json::parse(read_file(path("gap.json")));
  EXPECT_NEAR(j.at("metrics").at("chamfer").get<double>(), 0.1, 0.002);
}

TEST_F(CliTest, MetricsBatchCsvAndErrors) {
  const std::string a = mesh("a.obj", make_icosphere(1));
  const Result r = run({"metrics", a, a, a, a, "--samples", "200", "--res", "32"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(std::count(r.out.begin(), r.out.end(), '\n'), 3);
  EXPECT_EQ(run({"metrics", a, text("bad.obj", "f 1 2 3\n")}).code, 3);
  EXPECT_EQ(run({"metrics", a}).code, 2);
}

TEST_F(CliTest, RenderFullFrameQuadSilhouette) {
  const Result r = run({"render", mesh("q.obj", munet::test::quad(1.0)), "--res", "32", "--out", path("q.pgm")});
  ASSERT_EQ(r.code, 0) << r.err;
  const FloatImage img = decode_pgm(read_file(path("q.pgm")));
  EXPECT_EQ(img.width, 32);
  for (double v : img.data) EXPECT_EQ(v, 1.0);
  const std::string raw = read_file(path("q.pgm"));
  EXPECT_EQ(static_cast<unsigned char>(raw.back()), 255);
}

TEST_F(CliTest, RenderAllAnglesWritesFourFiles) {
  const Result r = run({"render", mesh("s.obj", make_icosphere(2)), "--angle", "all", "--res", "32", "--out", path("s.pgm")});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* tag : {"000", "090", "180", "270"}) EXPECT_TRUE(fs::exists(path(std::string("s_") + tag + ".pgm")));
}

TEST_F(CliTest, RenderSphereNormalsCenterFacesCamera) {
  const Result r = run({"render", mesh("s.obj", make_icosphere(5)), "--mode", "normals", "--res", "64", "--scale",
                        "0.8", "--out", path("n.pfm")});
  ASSERT_EQ(r.code, 0) << r.err;
  const FloatImage img = decode_pfm(read_file(path("n.pfm")));
  const Vec3 c(img.at(32, 32, 0), img.at(32, 32, 1), img.at(32, 32, 2));
  EXPECT_LE((c - Vec3(0, 0, 1)).norm(), 0.05);
  EXPECT_TRUE(fs::exists(path("n_mask.pgm")));
}

TEST_F(CliTest, RenderRejectsBadAngle) {
  EXPECT_EQ(run({"render", mesh("s.obj", make_icosphere(0)), "--angle", "north", "--out", path("x.pgm")}).code, 2);
}

TEST_F(CliTest, GradcheckExitCodes) {
  EXPECT_EQ(run({"gradcheck"}).code, 0);
  const Result strict = run({"gradcheck", "--tolerance", "1e-12"});
  EXPECT_EQ(strict.code, 4);
  EXPECT_NE(strict.out.find("FAIL"), std::string::npos);
  EXPECT_EQ(run({"gradcheck", "--inject-fault"}).code, 4);
}

TEST_F(CliTest, TrainToyMalformedConfigNamesKey) {
  const Result bad_type = run({"train-toy", "--config", text("c.json", R"({"training": {"steps": "many"}})"),
                               "--out-dir", path("out")});
  EXPECT_EQ(bad_type.code, 2);
  EXPECT_NE(bad_type.err.find("training.steps"), std::string::npos) << bad_type.err;
  const Result unknown = run({"train-toy", "--config", text("d.json", R"({"network": {"widht": 3}})"),
                              "--out-dir", path("out")});
  EXPECT_EQ(unknown.code, 2);
  EXPECT_NE(unknown.err.find("network.widht"), std::string::npos) << unknown.err;
  EXPECT_EQ(run({"train-toy", "--config", text("e.json", "{"), "--out-dir", path("out")}).code, 2);
  EXPECT_EQ(run({"train-toy", "--config", path("absent.json"), "--out-dir", path("out")}).code, 3);
}

TEST_F(CliTest, TrainToyDeterministicOutputs) {
  const std::string cfg = text("c.json", kShortConfig);
  ASSERT_EQ(run({"train-toy", "--config", cfg, "--out-dir", path("a")}).code, 0);
  ASSERT_EQ(run({"train-toy", "--config", cfg, "--out-dir", path("b")}).code, 0);
  for (const char* f : {"history.csv", "checkpoint.munet", "manifest.json", "heldout_body.obj", "heldout_surface.obj"})
    EXPECT_EQ(read_file(path(std::string("a/") + f)), read_file(path(std::string("b/") + f))) << f;
  const std::string csv = read_file(path("a/history.csv"));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,lv,lj,lcd1,lcd2,ln,ltrace,lcloth,total,heldout_mvpe,heldout_cd");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 8);
}

TEST_F(CliTest, HelpListsFlagsWithDefaults) {
  const Result r = run({"render", "--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("--res"), std::string::npos);
  EXPECT_NE(r.out.find("256"), std::string::npos);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({}).code, 2);
}

TEST_F(CliTest, BinaryPropagatesExitCodes) {
  const std::string cmd = std::string(MUNET_BIN) + " validate " + path("missing.obj") + " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  ASSERT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 3);
}
