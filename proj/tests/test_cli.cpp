#include <advpatch/bench.hpp>
#include <advpatch/patchgen.hpp>

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <sys/wait.h>

#include "test_support.hpp"

using namespace advpatch;
namespace fs = std::filesystem;

namespace {

// Scratch directory of the running test, emptied on first use.
fs::path work() {
  const fs::path p = fs::path(::testing::TempDir()) / "advpatch_cli" /
                     ::testing::UnitTest::GetInstance()->current_test_info()->name();
  static std::set<fs::path> fresh;
  if (fresh.insert(p).second) {
    fs::remove_all(p);
    fs::create_directories(p);
  }
  return p;
}

int cli(const std::string& args, std::string* output = nullptr) {
  const auto log = work() / "last_output.txt";
  const std::string cmd = std::string(ADVPATCH_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  if (output) {
    std::ifstream in(log);
    *output = {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  }
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// One viewpoint sequence whose views are the reference pushed through
// small known homographies.
fs::path dataset() {
  if (fs::exists(work() / "hp")) return work() / "hp";
  {
    const fs::path seq = work() / "hp" / "v_synthetic";
    fs::create_directories(seq);
    const auto ref = testing_support::blob_field(320, 240, 3);
    save_ppm((seq / "1.ppm").string(), ref);
    for (int i = 2; i <= 6; ++i) {
      const auto h = Homography::from_rows({1.0 + 0.01 * i, 0.005 * i, 2.0 * i, -0.004 * i, 1.0, -1.5 * i, 0, 0, 1});
      const auto view = warp_into_quad(GrayImage(320, 240, 1, 0.5), ref,
                                       maskgen::transfer_quad(h, Quad::rectangle(0, 0, 320, 240)));
      save_ppm((seq / (std::to_string(i) + ".ppm")).string(), view);
      std::ofstream out(seq / ("H_1_" + std::to_string(i)));
      write_homography(out, h);
    }
  }
  return work() / "hp";
}

std::string path(const std::string& name) { return (work() / name).string(); }

std::string chess_patch() {
  save_ppm(path("chess.pgm"), patchgen::chessboard(32, 8));
  return path("chess.pgm");
}

}  // namespace

TEST(Cli, UsageAndHelp) {
  EXPECT_EQ(cli(""), 1);
  EXPECT_EQ(cli("--help"), 0);
  EXPECT_EQ(cli("eval --help"), 0);
  EXPECT_EQ(cli("no-such-command"), 1);
  EXPECT_EQ(cli("gen-patch"), 1);
}

TEST(Cli, GenPatchWithConfigFile) {
  std::ofstream(path("gen.cfg")) << "# chessboard settings\npreset=chessboard\nsize=64\nout=" << path("chess.pgm") << "\n";
  ASSERT_EQ(cli("gen-patch --config " + path("gen.cfg") + " --size 32"), 0);
  const auto img = load_ppm(path("chess.pgm"));
  EXPECT_EQ(img.width(), 32);
  EXPECT_EQ(img.channels(), 1);
  EXPECT_NE(slurp(path("chess.pgm.txt")).find("preset=chessboard\n"), std::string::npos);
  std::ofstream(path("bad.cfg")) << "colour=blue\n";
  EXPECT_EQ(cli("gen-patch --config " + path("bad.cfg") + " --out " + path("x.pgm")), 1);
  EXPECT_EQ(cli("gen-patch --preset nope --out " + path("x.pgm")), 1);
  EXPECT_EQ(cli("gen-patch --preset untargeted --size 36 --out " + path("x.pgm")), 1);
}

TEST(Cli, GenPatchRunsPgd) {
  ASSERT_EQ(cli("random-weights --seed 1 --dustbin-bias 7 --out " + path("w.spwf")), 0);
  EXPECT_EQ(cli("gen-patch --preset untargeted --size 32 --steps 3 --alpha 50 --weights " + path("w.spwf") +
                " --out " + path("adv.pgm") + " --meta " + path("adv.meta")),
            0);
  const auto meta = slurp(path("adv.meta"));
  EXPECT_NE(meta.find("steps=3\n"), std::string::npos);
  EXPECT_NE(meta.find("\n2,"), std::string::npos);
  EXPECT_EQ(cli("gen-patch --preset untargeted --size 32 --steps 3 --out " + path("adv.pgm")), 1);
  EXPECT_EQ(cli("gen-patch --preset untargeted --size 32 --steps 3 --weights " + path("missing.spwf") + " --out " +
                path("adv.pgm")),
            2);
}

TEST(Cli, EvalWritesReports) {
  const std::string ds = dataset().string();
  ASSERT_EQ(cli("eval --dataset " + ds + " --extractor classical --mask-size 64 --format csv --report " +
                path("benign.csv")),
            0);
  const auto csv = slurp(path("benign.csv"));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 6);
  EXPECT_NE(csv.find("classical,benign,targeted,64,0,v_synthetic,1,"), std::string::npos);

  ASSERT_EQ(cli("random-weights --seed 2 --out " + path("w2.spwf")), 0);
  std::string out;
  ASSERT_EQ(cli("eval --dataset " + ds + " --weights " + path("w2.spwf") + " --patch " + chess_patch() +
                    " --protocol untargeted --mask-size 64 --patch-size 64 --seed 4 --report -",
                &out),
            0);
  EXPECT_NE(out.find("| spnet | untargeted | chess | 64 | 64 |"), std::string::npos) << out;

  EXPECT_EQ(cli("eval --dataset " + ds + " --extractor spnet"), 1);
  EXPECT_EQ(cli("eval --dataset " + ds + " --extractor classical --format xml"), 1);
  EXPECT_EQ(cli("eval --dataset " + path("nowhere") + " --extractor classical"), 2);
}

TEST(Cli, ExportMasks) {
  ASSERT_EQ(cli("export-masks --dataset " + dataset().string() + " --mask-size 64 --out " + path("masks")), 0);
  for (int p = 1; p <= 5; ++p) {
    std::ifstream in(work() / "masks" / ("v_synthetic_" + std::to_string(p) + ".masks"));
    ASSERT_TRUE(in) << p;
    const auto m = maskgen::read_masks(in);
    EXPECT_EQ(m.source.corners[0], (Point2{128, 88}));
    EXPECT_FALSE(maskgen::quads_overlap(m.source, m.target));
  }
}

TEST(Cli, MatchPairVisualization) {
  const auto seq = dataset() / "v_synthetic";
  std::string out;
  ASSERT_EQ(cli("match-pair --extractor classical --image-a " + (seq / "1.ppm").string() + " --image-b " +
                    (seq / "3.ppm").string() + " --homography " + (seq / "H_1_3").string() + " --patch " +
                    chess_patch() + " --mask-size 64 --visualize " + path("pair.ppm"),
                &out),
            0);
  EXPECT_NE(out.find("SPR"), std::string::npos) << out;
  const auto vis = load_ppm(path("pair.ppm"));
  EXPECT_EQ(vis.width(), 640);
  EXPECT_EQ(vis.height(), 240);
  EXPECT_EQ(vis.channels(), 3);
  EXPECT_EQ(cli("match-pair --extractor classical --image-a " + (seq / "1.ppm").string() + " --image-b " +
                (seq / "3.ppm").string() + " --patch " + chess_patch()),
            1);
}

TEST(Cli, ActivationRoundTrip) {
  ASSERT_EQ(cli("random-weights --seed 5 --out " + path("w5.spwf")), 0);
  ASSERT_EQ(cli("random-weights --seed 6 --out " + path("w6.spwf")), 0);
  ASSERT_EQ(cli("dump-activations --weights " + path("w5.spwf") + " --out " + path("act.spwf")), 0);
  std::string out;
  EXPECT_EQ(cli("verify-activations --weights " + path("w5.spwf") + " --activations " + path("act.spwf"), &out), 0);
  EXPECT_NE(out.find("match"), std::string::npos);
  EXPECT_EQ(cli("verify-activations --weights " + path("w6.spwf") + " --activations " + path("act.spwf")), 2);
  EXPECT_EQ(cli("verify-activations --weights " + path("w5.spwf") + " --activations " + path("w5.spwf")), 2);
}
