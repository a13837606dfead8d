#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>

#include "doctest.h"
#include "spikesr/train.hpp"
#include "synth.hpp"

using namespace spikesr;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
};

Run cli(const std::string& args) {
  const std::string cmd = std::string(SPIKESR_CLI) + " " + args + " 2>&1";
  Run r{-1, ""};
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p);
  char buf[512];
  while (fgets(buf, sizeof buf, p)) r.out += buf;
  const int st = pclose(p);
  r.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

int count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) n += !line.empty();
  return n;
}

fs::path scratch() {
  const fs::path dir = fs::temp_directory_path() / "spikesr_test_cli";
  fs::remove_all(dir);
  fs::create_directories(dir / "hr");
  return dir;
}

}  // namespace

TEST_CASE("cli: unknown flag exits 2 with usage") {
  auto r = cli("train --bogus");
  CHECK(r.code == 2);
  CHECK(r.out.find("Usage") != std::string::npos);
}

TEST_CASE("cli: runtime failure exits 1") {
  auto r = cli("sr --variant toy --in /nonexistent.png --out /tmp/x.png");
  CHECK(r.code == 1);
  CHECK(r.out.rfind("error:", 0) == 0);
}

TEST_CASE("cli: count reports the full model") {
  auto r = cli("count --variant full --hw 160x160 --time-steps 1");
  REQUIRE(r.code == 0);
  CHECK(r.out.find("params 1044434") != std::string::npos);
  CHECK(r.out.find("macs 30579454976") != std::string::npos);
}

TEST_CASE("cli: train, eval and sr on a tiny dataset") {
  const fs::path dir = scratch();
  for (int i = 0; i < 2; ++i) write_png((dir / "hr" / ("img" + std::to_string(i) + ".png")).string(), testutil::shapes_image(48, 60 + i));
  auto t = cli("train --data-root " + (dir / "hr").string() + " --out " + (dir / "run").string() +
               " --variant toy --steps 3 --batch 2 --patch 8 --log-every 1 --checkpoint-every 3"
               " --set model.channels=4 --set model.num_sag=1");
  REQUIRE_MESSAGE(t.code == 0, t.out);
  CHECK(fs::exists(dir / "run" / "last.spsr"));
  CHECK(fs::exists(dir / "run" / "ckpt_00000003.spsr"));
  CHECK(count_lines(dir / "run" / "log.csv") == 4);

  std::ofstream(dir / "val.txt") << "scale=4\nimg0.png\nimg1.png\n";
  auto e = cli("eval --ckpt " + (dir / "run" / "last.spsr").string() + " --manifest " + (dir / "val.txt").string() +
               " --data-root " + (dir / "hr").string() + " --csv " + (dir / "m.csv").string());
  REQUIRE_MESSAGE(e.code == 0, e.out);
  CHECK(count_lines(dir / "m.csv") == 4);
  auto b0 = cli("eval --bicubic --border 0 --manifest " + (dir / "val.txt").string() + " --data-root " + (dir / "hr").string());
  auto b4 = cli("eval --bicubic --manifest " + (dir / "val.txt").string() + " --data-root " + (dir / "hr").string());
  REQUIRE(b0.code == 0);
  REQUIRE(b4.code == 0);
  CHECK(b0.out != b4.out);

  write_png((dir / "lr.png").string(), testutil::shapes_image(64, 3));
  auto s = cli("sr --ckpt " + (dir / "run" / "last.spsr").string() + " --in " + (dir / "lr.png").string() + " --out " +
               (dir / "sr.png").string());
  REQUIRE_MESSAGE(s.code == 0, s.out);
  auto img = read_png((dir / "sr.png").string());
  CHECK(img.width == 256);
  CHECK(img.height == 256);
  fs::remove_all(dir);
}
