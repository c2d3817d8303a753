#include <sys/wait.h>

#include <fstream>

#include "support.hpp"

namespace dreamphys {
namespace {

using testing::ScratchDir;
namespace fs = std::filesystem;

const fs::path kSource(DREAMPHYS_SOURCE_DIR);

int run(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(DREAMPHYS_CLI) + " " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

/// Small pinned bar with a coarse grid so CLI runs take well under a second.
struct SmallScene {
  fs::path ply, config;

  SmallScene(const ScratchDir& dir, bool static_scene = false) {
    std::mt19937_64 rng(501);
    SimConfig cfg;
    cfg.grid_resolution = 16;
    cfg.dt = 2e-4;
    cfg.substeps_per_frame = 10;
    cfg.frame_count = 10;
    cfg.image_height = cfg.image_width = 24;
    cfg.camera_path = {CameraPose{Vec3d(0.5, 0.5, -0.4), Vec3d(0.5, 0.5, 0.5), Vec3d::UnitY(), 30.0}};
    cfg.fixed_region = Aabb<double>{Vec3d::Zero(), Vec3d(0.43, 1.0, 1.0)};
    if (static_scene) cfg.gravity = Vec3d::Zero();
    const Scene sc = gradcheck::detail::lattice_scene(8, 3, 3, cfg.dx() / 2.0, Vec3d::Constant(0.5), rng);
    ply = dir / "scene.ply";
    config = dir / "config.json";
    save_ply(ply, sc);
    std::ofstream(config) << config_to_json(cfg).dump(2);
  }

  std::string args() const { return "--scene '" + ply.string() + "' --config '" + config.string() + "'"; }
};

double max_frame_difference(const render::Video<float>& a, const render::Video<float>& b, int t) {
  double m = 0.0;
  const auto fa = a.frame(t), fb = b.frame(t);
  for (std::size_t i = 0; i < fa.size(); ++i) m = std::max(m, static_cast<double>(std::abs(fa[i] - fb[i])));
  return m;
}

TEST(Cli, ParseAndRangeErrorsExitTwo) {
  ScratchDir dir("cli_args");
  EXPECT_EQ(run("simulate --config x.json --out o", dir / "log"), 2);
  EXPECT_EQ(run("frobnicate", dir / "log"), 2);
  EXPECT_EQ(run("recover --true-young 1e9", dir / "log"), 2);
  EXPECT_NE(slurp(dir / "log").find("outside"), std::string::npos);
  EXPECT_EQ(run("recover --init-bias sideways", dir / "log"), 2);
}

TEST(Cli, ConfigErrorsExitTwo) {
  ScratchDir dir("cli_cfg");
  SmallScene s(dir);
  std::ofstream(dir / "bad.json") << R"({"frame_count": 4, "image_size": [8, 8], "camera": {}, "bogus": 1})";
  EXPECT_EQ(run("simulate --scene '" + s.ply.string() + "' --config '" + (dir / "bad.json").string() + "' --out '" +
                    (dir / "o").string() + "'",
                dir / "log"),
            2);
  EXPECT_EQ(run("optimize " + s.args() + " --out '" + (dir / "o").string() + "' --groups 3 --reference x",
                dir / "log"),
            2);
}

TEST(Cli, MalformedSceneExitsThree) {
  ScratchDir dir("cli_ply");
  SmallScene s(dir);
  std::ofstream(dir / "bad.ply") << "ply\nformat ascii 1.0\nelement vertex 3\nend_header\n1 2\n";
  EXPECT_EQ(run("simulate --scene '" + (dir / "bad.ply").string() + "' --config '" + s.config.string() + "' --out '" +
                    (dir / "o").string() + "'",
                dir / "log"),
            3);
}

TEST(Cli, GradcheckPassesAndDetectsInjectedFault) {
  ScratchDir dir("cli_grad");
  EXPECT_EQ(run("gradcheck --fp64", dir / "log"), 0);
  EXPECT_NE(slurp(dir / "log").find("end_to_end"), std::string::npos);
  EXPECT_EQ(run("gradcheck --fp64 --inject-sign-flip", dir / "log"), 1);
  EXPECT_NE(slurp(dir / "log").find("FAIL"), std::string::npos);
}

TEST(Cli, UnreachableRemoteOracleExitsFour) {
  ScratchDir dir("cli_remote");
  SmallScene s(dir);
  int port = -1;
  {
    protocol::MockServer probe;
    port = probe.port();
  }
  EXPECT_EQ(run("optimize " + s.args() + " --out '" + (dir / "o").string() +
                    "' --oracle remote --text 'a swaying bar' --endpoint http://127.0.0.1:" + std::to_string(port),
                dir / "log"),
            4);
}

TEST(Cli, RemoteOracleThroughMockServer) {
  ScratchDir dir("cli_mock");
  SmallScene s(dir);
  protocol::MockServer server(protocol::MockMode::Zero);
  EXPECT_EQ(run("optimize " + s.args() + " --out '" + (dir / "o").string() +
                    "' --oracle remote --text 'a swaying bar' --max-iterations 5 --endpoint " + server.endpoint(),
                dir / "log"),
            0)
      << slurp(dir / "log");
  // Two denoiser calls (motion and anchor) per group per iteration.
  EXPECT_EQ(server.requests(), 3 * 5 * 2);
  const auto manifest = nlohmann::json::parse(slurp(dir / "o/manifest.json"));
  EXPECT_EQ(manifest.at("cfg").get<double>(), 100.0);
  EXPECT_EQ(manifest.at("iterations").get<int>(), 3);
}

TEST(Cli, RestStateFramesAreIdentical) {
  ScratchDir dir("cli_rest");
  SmallScene s(dir, true);
  ASSERT_EQ(run("simulate " + s.args() + " --young 1e6 --deterministic --out '" + (dir / "o").string() + "'",
                dir / "log"),
            0);
  const auto v = image_io::read_frames(dir / "o/frames");
  ASSERT_EQ(v.frames, 10);
  for (int t = 1; t < v.frames; ++t) {
    const auto a = v.frame(0), b = v.frame(t);
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin())) << "frame " << t;
  }
  const auto manifest = nlohmann::json::parse(slurp(dir / "o/manifest.json"));
  EXPECT_EQ(manifest.at("frames").get<int>(), 10);
}

TEST(Cli, DropballStiffnessChangesTheVideo) {
  ScratchDir dir("cli_drop");
  const std::string scene = "--scene '" + (kSource / "configs/dropball/scene.ply").string() + "' --config '" +
                            (kSource / "configs/dropball/config.json").string() + "'";
  ASSERT_EQ(run("simulate " + scene + " --young 1e4 --out '" + (dir / "soft").string() + "'", dir / "log"), 0);
  ASSERT_EQ(run("simulate " + scene + " --young 1e8 --out '" + (dir / "stiff").string() + "'", dir / "log"), 0);
  const auto soft = image_io::read_frames(dir / "soft/frames");
  const auto stiff = image_io::read_frames(dir / "stiff/frames");
  ASSERT_TRUE(soft.same_shape(stiff));
  double worst = 0.0;
  for (int t = 0; t < soft.frames; ++t) worst = std::max(worst, max_frame_difference(soft, stiff, t));
  EXPECT_GT(worst, 0.1);
}

TEST(Cli, AnalyticOracleOnItsOwnRenderConvergesAtThree) {
  ScratchDir dir("cli_self");
  SmallScene s(dir);
  const std::string ckpt = (dir / "init.dpmf").string();
  ASSERT_EQ(run("init-field --scene '" + s.ply.string() + "' --out '" + ckpt + "' --log10 5.5", dir / "log"), 0);
  ASSERT_EQ(run("simulate " + s.args() + " --params '" + ckpt + "' --deterministic --out '" + (dir / "ref").string() + "'",
                dir / "log"),
            0);
  EXPECT_EQ(run("optimize " + s.args() + " --init '" + ckpt + "' --reference '" + (dir / "ref/frames").string() +
                    "' --deterministic --out '" + (dir / "o").string() + "'",
                dir / "log"),
            0)
      << slurp(dir / "log");
  const auto manifest = nlohmann::json::parse(slurp(dir / "o/manifest.json"));
  EXPECT_TRUE(manifest.at("converged").get<bool>());
  EXPECT_EQ(manifest.at("iterations").get<int>(), 3);
  EXPECT_EQ(manifest.at("cfg").get<double>(), 100.0);
  EXPECT_NEAR(manifest.at("final_mean_log10_E").get<double>(), 5.5, 0.05);
  EXPECT_TRUE(fs::exists(dir / "o/field.dpmf"));
  std::ifstream log(dir / "o/log.jsonl");
  int lines = 0;
  for (std::string line; std::getline(log, line);) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("score_norm").get<double>(), 0.0);
    ++lines;
  }
  EXPECT_EQ(lines, 3);
}

TEST(Cli, SceneCommandWritesLoadableFiles) {
  ScratchDir dir("cli_scene");
  ASSERT_EQ(run("scene --name dropball --frames 10 --out '" + dir.path().string() + "'", dir / "log"), 0);
  EXPECT_EQ(load_ply(dir / "scene.ply").kernels.size(), 1904u);
  EXPECT_EQ(load_config(dir / "config.json").frame_count, 10);
  EXPECT_EQ(run("scene --name teapot --out '" + dir.path().string() + "'", dir / "log"), 2);
}

}  // namespace
}  // namespace dreamphys
