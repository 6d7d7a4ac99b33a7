#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "test_support.hpp"
#include "wpfuse/image_io.hpp"
#include "wpfuse/metrics.hpp"

namespace fs = std::filesystem;
using namespace wpfuse;

namespace {

struct Run {
  int code = -1;
  std::string output;  // stdout and stderr
};

Run run_cli(const std::string& args) {
  const auto log = fs::temp_directory_path() / "wpfuse_cli_test_output.txt";
  const std::string cmd = std::string(WPFUSE_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.output = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_config(const fs::path& path, const fs::path& manifest, const fs::path& out, int steps = 3) {
  std::ofstream cfg(path);
  cfg << "manifest = " << manifest.string() << "\n"
      << "output_dir = " << out.string() << "\n"
      << "patch_size = 32\nepochs = 1\nbatch_size = 2\nbase_channels = 4\ndecoder_blocks = 1\n"
      << "max_steps = " << steps << "\nseed = 11\nvalidation_fraction = 0.25\n";
}

// Synthetic data set shared by the cases below.
fs::path dataset() {
  static const fs::path dir = [] {
    const auto d = test::scratch_dir("cli_data");
    const Run r = run_cli("synth --out-dir " + d.string() + " --pairs 4 --size 32 --seed 3");
    REQUIRE(r.code == 0);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("help and usage errors") {
  CHECK(run_cli("--help").code == 0);
  const Run none = run_cli("");
  CHECK(none.code == 2);
  const Run bogus = run_cli("frobnicate");
  CHECK(bogus.code == 2);
  CHECK(run_cli("fuse --a x.png").code == 2);
}

TEST_CASE("synth writes a manifest and image pairs") {
  const fs::path d = dataset();
  CHECK(fs::exists(d / "manifest.txt"));
  const Run again = run_cli("synth --out-dir " + (test::scratch_dir("cli_synth2")).string() + " --pairs 4 --size 32 --seed 3");
  CHECK(again.code == 0);
  CHECK(slurp(d / "manifest.txt").size() > 0);
}

TEST_CASE("train writes a checkpoint and reproducible loss CSV") {
  const fs::path d = dataset();
  const auto work = test::scratch_dir("cli_train");
  write_config(work / "a.cfg", d / "manifest.txt", work / "run_a");
  write_config(work / "b.cfg", d / "manifest.txt", work / "run_b");
  const Run a = run_cli("train --config " + (work / "a.cfg").string());
  INFO(a.output);
  REQUIRE(a.code == 0);
  CHECK(fs::exists(work / "run_a" / "model.wpf"));
  REQUIRE(run_cli("train --config " + (work / "b.cfg").string()).code == 0);
  const std::string la = slurp(work / "run_a" / "loss.csv");
  CHECK(la.rfind("step,intensity,gradient,structure,total\n", 0) == 0);
  CHECK(la == slurp(work / "run_b" / "loss.csv"));
  CHECK(slurp(work / "run_a" / "model.wpf") == slurp(work / "run_b" / "model.wpf"));
}

TEST_CASE("train with a missing manifest fails before creating outputs") {
  const auto work = test::scratch_dir("cli_missing");
  write_config(work / "c.cfg", work / "nope.txt", work / "out");
  const Run r = run_cli("train --config " + (work / "c.cfg").string());
  CHECK(r.code == 3);
  CHECK(r.output.find("wpfuse: error: data:") != std::string::npos);
  CHECK_FALSE(fs::exists(work / "out"));

  std::ofstream(work / "bad.cfg") << "manifest = m\noutput_dir = o\nbogus = 1\n";
  CHECK(run_cli("train --config " + (work / "bad.cfg").string()).code == 2);
}

TEST_CASE("fuse and eval") {
  const fs::path d = dataset();
  const auto work = test::scratch_dir("cli_fuse");
  write_config(work / "t.cfg", d / "manifest.txt", work / "run", 1);
  REQUIRE(run_cli("train --config " + (work / "t.cfg").string()).code == 0);
  const std::string ckpt = (work / "run" / "model.wpf").string();
  const std::string a = (d / "syn000_a.png").string(), b = (d / "syn000_b.png").string();

  const Run f = run_cli("fuse --checkpoint " + ckpt + " --a " + a + " --b " + b + " --out " + (work / "f.png").string());
  INFO(f.output);
  REQUIRE(f.code == 0);
  const Image<float> fused = read_gray_image((work / "f.png").string());
  CHECK(fused.rows() == 32);

  // Identity: scoring a source against itself twice.
  const Run e = run_cli("eval --fused " + a + " --a " + a + " --b " + a + " --out " + (work / "m.csv").string() +
                        " --pair-id self");
  REQUIRE(e.code == 0);
  std::ifstream in(work / "m.csv");
  const auto rows = read_metric_csv(in);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].pair_id == "self");
  CHECK(std::abs(rows[0].report.q_c - 1.0) < 1e-6);
  CHECK(rows[0].report.runtime_seconds == 0.0);

  // A color B needs --color.
  ColorImage rgb;
  const Image<float> src = read_gray_image(b);
  rgb.rgb = {src, Image<float>((0.5f * src).eval()), Image<float>(src.cwiseSqrt())};
  write_image((work / "pet.png").string(), rgb);
  const Run no_flag =
      run_cli("fuse --checkpoint " + ckpt + " --a " + a + " --b " + (work / "pet.png").string() + " --out " +
              (work / "c.png").string());
  CHECK(no_flag.code == 3);
  CHECK(no_flag.output.find("--color") != std::string::npos);
  const Run with_flag =
      run_cli("fuse --color --checkpoint " + ckpt + " --a " + a + " --b " + (work / "pet.png").string() + " --out " +
              (work / "c.png").string());
  CHECK(with_flag.code == 0);
  CHECK(read_image((work / "c.png").string()).is_color());

  std::ofstream(work / "junk.png") << "garbage";
  const Run bad = run_cli("eval --fused " + (work / "junk.png").string() + " --a " + a + " --b " + b + " --out " +
                          (work / "x.csv").string());
  CHECK(bad.code == 3);
  CHECK_FALSE(fs::exists(work / "x.csv"));
}

TEST_CASE("ablate writes the comparison table") {
  const fs::path d = dataset();
  const auto work = test::scratch_dir("cli_ablate");
  write_config(work / "t.cfg", d / "manifest.txt", work / "run", 2);
  const Run r = run_cli("ablate --config " + (work / "t.cfg").string());
  INFO(r.output);
  REQUIRE(r.code == 0);
  const std::string table = slurp(work / "run" / "ablation_table.csv");
  CHECK(table.rfind("metric,wdepp,max,average\n", 0) == 0);
  CHECK(fs::exists(work / "run" / "ablation_rows.csv"));
}
