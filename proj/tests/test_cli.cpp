#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "opama/geometry.hpp"
#include "opama/image_io.hpp"

namespace fs = std::filesystem;
using namespace opama;

namespace {

struct CliRun {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("opama_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

CliRun cli(const std::string& args, const fs::path& dir) {
  const fs::path out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = std::string(OPAMA_CLI) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

std::size_t count_lines(const std::string& s) {
  std::size_t n = 0;
  for (char c : s) n += c == '\n';
  return n;
}

const char* kSmallModel =
    "--set T=100 --set sample_steps=4 --set d_model=16 --set ssm_state=4 --set vcr_blocks=2 "
    "--set gma_width=8 --set unet_base=8 --set corpus_size=4 --set warmup_steps=2 --set lr=1e-3";

Tensor smooth_equirect(std::int64_t w, std::int64_t h) {
  Tensor px(Shape{h, w, 3});
  auto d = px.data();
  for (std::int64_t v = 0; v < h; ++v)
    for (std::int64_t u = 0; u < w; ++u) {
      const Vec3 r = dir_from_equirect(u, v, w, h);
      double* p = d.data() + (v * w + u) * 3;
      p[0] = 0.5 + 0.3 * std::sin(2.0 * r[0] + r[1]);
      p[1] = 0.5 + 0.3 * std::cos(3.0 * r[2] - r[0]);
      p[2] = 0.5 + 0.25 * r[0] * r[2] + 0.2 * r[1];
    }
  return px;
}

}  // namespace

TEST(CliProject, CubemapRoundTripKeepsPsnr) {
  const auto dir = scratch("roundtrip");
  const Tensor src = quantize8(smooth_equirect(256, 128));
  write_image(dir / "pano.png", src);
  ASSERT_EQ(cli("project --in " + (dir / "pano.png").string() + " --to cubemap --size 64 --out " +
                    (dir / "faces").string(), dir).code, 0);
  ASSERT_TRUE(fs::exists(dir / "faces" / "U.png"));
  ASSERT_EQ(cli("project --in " + (dir / "faces").string() + " --to equirect --width 256 --out " +
                    (dir / "back.png").string(), dir).code, 0);
  const Tensor back = read_image(dir / "back.png");
  ASSERT_EQ(back.shape(), src.shape());
  double se = 0;
  std::size_t n = 0;
  for (std::int64_t v = 13; v < 128 - 13; ++v)
    for (std::int64_t i = 0; i < 256 * 3; ++i) {
      const auto k = static_cast<std::size_t>(v * 256 * 3 + i);
      se += (src[k] - back[k]) * (src[k] - back[k]);
      ++n;
    }
  EXPECT_GE(10.0 * std::log10(n / se), 30.0);
}

TEST(CliProject, ConstantImageGivesConstantView) {
  const auto dir = scratch("constant");
  write_image(dir / "flat.png", Tensor(Shape{64, 128, 3}, 100.0 / 255.0));
  ASSERT_EQ(cli("project --in " + (dir / "flat.png").string() + " --to nfov --lon 0 --lat 0 --out " +
                    (dir / "view.png").string(), dir).code, 0);
  const Tensor view = read_image(dir / "view.png");
  EXPECT_EQ(view.shape(), (Shape{32, 32, 3}));
  for (double v : view.data()) ASSERT_NEAR(v, 100.0 / 255.0, 1e-12);
}

TEST(CliProject, ExitCodes) {
  const auto dir = scratch("project_codes");
  const CliRun missing = cli("project --to cubemap --out x", dir);
  EXPECT_EQ(missing.code, 1);
  EXPECT_NE(missing.err.find("--in"), std::string::npos);
  EXPECT_NE(missing.err.find("Usage"), std::string::npos);
  EXPECT_EQ(cli("project --in " + (dir / "absent.png").string() + " --to nfov --out v.png", dir).code, 2);
  std::ofstream(dir / "junk.png") << "not an image";
  EXPECT_EQ(cli("project --in " + (dir / "junk.png").string() + " --to nfov --out v.png", dir).code, 2);
  write_image(dir / "flat.png", Tensor(Shape{64, 128, 3}, 0.5));
  EXPECT_EQ(cli("project --in " + (dir / "flat.png").string() + " --to nfov --lat 95 --out v.png", dir).code, 1);
  EXPECT_EQ(cli("project --in a --to sphere --out b", dir).code, 1);
  EXPECT_EQ(cli("project --in a --to nfov --out b --bogus 3", dir).code, 1);
}

TEST(CliHelp, EverySubcommandHasHelp) {
  const auto dir = scratch("help");
  for (const char* sub : {"project", "train", "generate", "verify", "bench"}) {
    const CliRun r = cli(std::string(sub) + " --help", dir);
    EXPECT_EQ(r.code, 0) << sub;
    EXPECT_NE(r.out.find("Usage"), std::string::npos) << sub;
  }
  EXPECT_EQ(cli("", dir).code, 1);
}

class CliModel : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = scratch("model");
    const CliRun r = cli(std::string("train ") + kSmallModel + " --steps 10 --log-every 0 --data-dir " +
                          (dir_ / "data").string() + " --ckpt-out " + (dir_ / "m.ckpt").string(), dir_);
    train_code_ = r.code;
  }
  static inline fs::path dir_;
  static inline int train_code_ = -1;
};

TEST_F(CliModel, TrainWritesTenLossRows) {
  ASSERT_EQ(train_code_, 0);
  const std::string csv = slurp(dir_ / "m.loss.csv");
  EXPECT_EQ(csv.rfind("step,loss,lr\n", 0), 0u);
  EXPECT_EQ(count_lines(csv), 11u);
  EXPECT_TRUE(fs::exists(dir_ / "m.ckpt"));
  EXPECT_TRUE(fs::exists(dir_ / "data" / "pano_0003.png"));
}

TEST_F(CliModel, ResumeContinuesStepNumbering) {
  ASSERT_EQ(train_code_, 0);
  const auto dir = scratch("resume");
  fs::copy_file(dir_ / "m.loss.csv", dir / "r.loss.csv");
  ASSERT_EQ(cli(std::string("train ") + kSmallModel + " --steps 2 --log-every 0 --data-dir " +
                    (dir_ / "data").string() + " --resume " + (dir_ / "m.ckpt").string() + " --ckpt-out " +
                    (dir / "r.ckpt").string(), dir).code, 0);
  std::istringstream csv(slurp(dir / "r.loss.csv"));
  std::string line, last;
  std::size_t rows = 0;
  while (std::getline(csv, line)) last = line, ++rows;
  EXPECT_EQ(rows, 13u);
  EXPECT_EQ(last.rfind("12,", 0), 0u);
}

TEST_F(CliModel, TrainRejectsBadConfig) {
  const auto dir = scratch("badcfg");
  std::ofstream(dir / "bad.cfg") << "view_size = banana\n";
  EXPECT_EQ(cli("train --steps 1 --config " + (dir / "bad.cfg").string(), dir).code, 1);
  EXPECT_EQ(cli("train --steps 1 --set no_such_key=1", dir).code, 1);
  EXPECT_EQ(cli("train --steps 1 --config " + (dir / "missing.cfg").string(), dir).code, 2);
}

TEST_F(CliModel, GenerateModesAndDeterminism) {
  ASSERT_EQ(train_code_, 0);
  const auto dir = scratch("generate");
  const std::string base = std::string("generate ") + kSmallModel + " --ckpt " + (dir_ / "m.ckpt").string();
  ASSERT_EQ(cli("project --in " + (dir_ / "data" / "pano_0001.png").string() + " --to nfov --lon 30 --out " +
                    (dir / "seed.png").string(), dir).code, 0);
  const std::string seed = " --seed-image " + (dir / "seed.png").string() + " --lon 30";
  const std::string text = " --text \"a warm scene with 3 boxes\"";
  for (const std::string& mode : {seed, text, seed + text}) {
    const auto out = dir / ("m" + std::to_string(mode.size()));
    const CliRun r = cli(base + mode + " --out-dir " + out.string(), dir);
    ASSERT_EQ(r.code, 0) << r.err;
    const Tensor mask = read_image(out / "mask.png");
    for (double v : mask.data()) ASSERT_EQ(v, 1.0);
    EXPECT_EQ(read_image(out / "panorama.png").shape(), (Shape{64, 128, 3}));
    EXPECT_NE(slurp(out / "meta.txt").find("# steps"), std::string::npos);
  }
  ASSERT_EQ(cli(base + seed + " --seed 9 --out-dir " + (dir / "a").string(), dir).code, 0);
  ASSERT_EQ(cli(base + seed + " --seed 9 --out-dir " + (dir / "b").string(), dir).code, 0);
  ASSERT_EQ(cli(base + seed + " --seed 10 --out-dir " + (dir / "c").string(), dir).code, 0);
  EXPECT_EQ(slurp(dir / "a" / "panorama.png"), slurp(dir / "b" / "panorama.png"));
  EXPECT_NE(slurp(dir / "a" / "panorama.png"), slurp(dir / "c" / "panorama.png"));
  EXPECT_EQ(cli(base + " --out-dir " + (dir / "none").string(), dir).code, 1);
  EXPECT_EQ(cli(base + " --seed-image " + (dir / "missing.png").string(), dir).code, 2);
}

TEST(CliVerify, ScanSuitePasses) {
  const auto dir = scratch("verify");
  const CliRun r = cli("verify --suite scan", dir);
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("parallel_vs_sequential"), std::string::npos);
}

TEST(CliVerify, FailingToleranceNamesProperty) {
  const auto dir = scratch("verify_fail");
  const CliRun r = cli("verify --suite scan --tolerance-scale 1e-30", dir);
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("FAILED scan/parallel_vs_sequential"), std::string::npos);
  EXPECT_EQ(cli("verify --suite nonsense", dir).code, 1);
}

TEST(CliBench, EmitsCsvRows) {
  const auto dir = scratch("bench");
  for (int L : {1, 4096}) {
    const CliRun r = cli("bench --kernel scan --L " + std::to_string(L) + " --N 16 --D 8 --csv " +
                          (dir / "b.csv").string(), dir);
    ASSERT_EQ(r.code, 0) << r.err;
    std::istringstream csv(slurp(dir / "b.csv"));
    std::string line;
    std::getline(csv, line);
    EXPECT_EQ(line, "L,N,D,variant,wall_ns,max_abs_err");
    int rows = 0;
    while (std::getline(csv, line)) {
      ++rows;
      EXPECT_EQ(line.rfind(std::to_string(L) + ",16,8,", 0), 0u) << line;
      EXPECT_LE(std::stod(line.substr(line.rfind(',') + 1)), 1e-10) << line;
    }
    EXPECT_EQ(rows, 2);
  }
  EXPECT_EQ(cli("bench --L 0", dir).code, 1);
  EXPECT_EQ(cli("bench --kernel conv", dir).code, 1);
}
