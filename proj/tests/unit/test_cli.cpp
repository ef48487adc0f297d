#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

namespace fs = std::filesystem;

namespace {

int gspw(const std::string& args) {
  const std::string cmd = std::string(GSPW_BIN) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("exit codes") {
  const fs::path dir = fs::temp_directory_path() / "gspw_test_cli";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string d = dir.string();

  CHECK(gspw("") == 2);
  CHECK(gspw("run --set no_such_key=1") == 2);
  CHECK(gspw("run --set voxel_size=-1") == 2);
  CHECK(gspw("render --scene " + d + "/missing.gsp --out " + d + "/r") == 4);

  REQUIRE(gspw("build-synth --seed 3 --road-length 40 --cameras 8 --out " + d + "/synth") == 0);
  CHECK(fs::exists(dir / "synth" / "manifest.json"));
  const std::string in = " --scene " + d + "/synth/scene_corrupt.gsp --masks " + d + "/synth/masks";

  CHECK(gspw("locate" + in + " --out " + d + "/locate.json") == 0);
  CHECK(gspw("search" + in + " --span-u 0 --span-v 0 --out " + d + "/search.json") == 3);
  CHECK(gspw("inpaint" + in + " --set span_u=0 --set span_v=0 --out " + d + "/x.gsp") == 3);
  CHECK(gspw("inpaint" + in + " --set fuse_iters=3 --observed " + d + "/synth/gt --out " + d +
             "/inpainted.gsp --trace " + d + "/loss.csv") == 0);
  CHECK(fs::exists(dir / "inpainted.gsp"));
  {
    std::ifstream f(dir / "loss.csv");
    std::string header;
    std::getline(f, header);
    CHECK(header == "iter,loss");
  }
  CHECK(gspw("render --scene " + d + "/inpainted.gsp --out " + d + "/renders") == 0);
  CHECK(gspw("eval --renders " + d + "/renders --gt " + d + "/synth/clean --regions " + d +
             "/synth/regions --out " + d + "/report.json") == 0);
  CHECK(fs::exists(dir / "report.json"));

  CHECK(gspw("fit-features --scene " + d + "/synth/scene_clean.gsp --features " + d + "/synth/features --masks " +
             d + "/synth/masks --iters 3 --out " + d + "/feat.gsp --trace " + d + "/feat.csv") == 0);
  CHECK(fs::exists(dir / "feat.csv"));

  std::ofstream(dir / "bad.cfg") << "seed = x\n";
  CHECK(gspw("run --config " + d + "/bad.cfg") == 2);
  CHECK(gspw("run --config " + d + "/nope.cfg") == 4);
}
