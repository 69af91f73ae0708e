// SPDX-License-Identifier: Apache-2.0
//
// Runs the omni-epi executable end to end.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string("OMNI_EPI_THREADS=1 ") + OMNI_EPI_CLI + " " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), p)) r.out += buf.data();
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

const fs::path& root() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "omni_epi_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

const std::string kData =
    "--preset nano --set train.scene_size=16 --set train.train_scenes=1 --set train.val_scenes=1 --seed 4";

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

}  // namespace

TEST_CASE("inspect prints the tiny budget and succeeds") {
  const Run r = run("inspect --out " + q(root() / "inspect"));
  INFO(r.out);
  CHECK(r.code == 0);
  CHECK(r.out.find("budget ok") != std::string::npos);
  CHECK(r.out.find("total,") != std::string::npos);
  CHECK(fs::exists(root() / "inspect" / "budget.txt"));
  CHECK(fs::exists(root() / "inspect" / "run_manifest.txt"));
  const Run gtf = run("--preset gtf inspect --out " + q(root() / "inspect_gtf"));
  CHECK(gtf.code == 0);
  CHECK(gtf.out.find("variant gtf,") != std::string::npos);
}

TEST_CASE("configuration errors exit with status 2") {
  const Run r = run("inspect --set model.bogus=1 --out " + q(root() / "bad"));
  CHECK(r.code == 2);
  CHECK(r.out.find("model.bogus") != std::string::npos);
  CHECK(run("--preset enormous inspect --out " + q(root() / "bad")).code == 2);
  CHECK(run("no-such-command").code == 2);
  CHECK(run("eval --pred " + q(root() / "missing") + " --gt " + q(root() / "missing") + " --out " + q(root() / "bad"))
            .code == 2);
}

TEST_CASE("a violated budget exits with status 1") {
  const Run r = run("inspect --set model.channels=128 --out " + q(root() / "over"));
  CHECK(r.code == 1);
  CHECK(r.out.find("VIOLATED") != std::string::npos);
}

TEST_CASE("gen-data is deterministic") {
  const fs::path a = root() / "data_a", b = root() / "data_b";
  REQUIRE(run(kData + " gen-data --out " + q(a)).code == 0);
  REQUIRE(run(kData + " gen-data --out " + q(b)).code == 0);
  int files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file() || e.path().filename() == "run_manifest.txt") continue;
    const fs::path rel = fs::relative(e.path(), a);
    INFO(rel.string());
    CHECK(slurp(e.path()) == slurp(b / rel));
    ++files;
  }
  CHECK(files > 4);
  const std::string manifest = slurp(a / "run_manifest.txt");
  CHECK(manifest.find("exit_code=0") != std::string::npos);
  CHECK(manifest.find("seed=4") != std::string::npos);
}

TEST_CASE("train, infer and eval chain together") {
  const fs::path data = root() / "data_a", run_dir = root() / "run";
  if (!fs::exists(data)) REQUIRE(run(kData + " gen-data --out " + q(data)).code == 0);
  const Run t = run(kData + " train --data " + q(data) + " --max-steps 3 --out " + q(run_dir));
  INFO(t.out);
  REQUIRE(t.code == 0);
  CHECK(t.out.find("bicubic validation PSNR") != std::string::npos);
  CHECK(fs::exists(run_dir / "last.ckpt"));
  CHECK(fs::exists(run_dir / "metrics.csv"));

  const fs::path pred = root() / "pred", tiled = root() / "pred_tiled";
  const std::string ckpt = " --checkpoint " + q(run_dir / "last.ckpt") + " --input " + q(data / "val_000" / "lr");
  const Run i = run("infer" + ckpt + " --out " + q(pred));
  INFO(i.out);
  REQUIRE(i.code == 0);
  CHECK(fs::exists(pred / "manifest.txt"));
  CHECK(slurp(pred / "manifest.txt").find("meta.mode=") != std::string::npos);
  REQUIRE(run("infer" + ckpt + " --epsw --tta --patch 4 --stride 2 --out " + q(tiled)).code == 0);

  const Run e = run("eval --pred " + q(pred) + " --gt " + q(data / "val_000" / "hr") + " --out " + q(root() / "eval"));
  INFO(e.out);
  CHECK(e.code == 0);
  CHECK(e.out.find("mean,all,") != std::string::npos);
  CHECK(fs::exists(root() / "eval" / "metrics.txt"));

  const Run self = run("eval --pred " + q(pred) + " --gt " + q(pred) + " --out " + q(root() / "eval_self"));
  CHECK(self.out.find("mean,all,inf,1.0000") != std::string::npos);

  const Run again = run("infer" + ckpt + " --out " + q(root() / "pred_again"));
  REQUIRE(again.code == 0);
  for (const auto& e2 : fs::directory_iterator(pred)) {
    if (e2.path().filename() == "run_manifest.txt") continue;
    CHECK(slurp(e2.path()) == slurp(root() / "pred_again" / e2.path().filename()));
  }

  const Run mismatch = run("infer" + ckpt + " --patch 4 --stride 8 --epsw --out " + q(root() / "bad_tiles"));
  CHECK(mismatch.code == 2);
}

TEST_CASE("gradcheck subcommand passes") {
  const Run r = run("gradcheck --seeds 1 --max-coords 4 --out " + q(root() / "gc"));
  INFO(r.out);
  CHECK(r.code == 0);
  CHECK(r.out.find("PASS mhsa seed=") != std::string::npos);
  CHECK(r.out.find("FAIL") == std::string::npos);
  CHECK(fs::exists(root() / "gc" / "gradcheck.txt"));
}
