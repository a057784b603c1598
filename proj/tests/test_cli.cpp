#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

// End-to-end smoke tests through the installed binary (path via ICSEG_BIN).

namespace fs = std::filesystem;

namespace {

std::string bin() {
  const char* b = std::getenv("ICSEG_BIN");
  REQUIRE(b != nullptr);
  return b;
}

int run(const std::string& args) {
  const std::string cmd = bin() + " " + args + " >/dev/null 2>&1";
  return std::system(cmd.c_str());
}

std::string run_capture(const std::string& args) {
  const fs::path tmp = fs::temp_directory_path() / "icseg_cli_capture.txt";
  const std::string cmd = bin() + " " + args + " >" + tmp.string() + " 2>&1";
  std::system(cmd.c_str());
  std::ifstream in(tmp);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

const std::string kToySets =
    " --set resolution=16 --set f_sp=2 --set patch_size=4 --set base_width=16"
    " --set channel_mults=1,2 --set attn_resolutions=4 --set heads=2 --set d_enc=16"
    " --set enc_depth=1 --set enc_heads=2 --set groups=4 --set batch=1";

}  // namespace

TEST_CASE("gen-data / train / infer / eval pipeline exits cleanly") {
  const fs::path root = fs::temp_directory_path() / "icseg_cli_smoke";
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string data = (root / "data").string();

  CHECK(run("gen-data --out " + data +
            " --seed 3 --resolution 16 --categories circle,square --samples 3") == 0);
  CHECK(fs::exists(fs::path(data) / "manifest.txt"));

  const std::string rundir = (root / "run").string();
  CHECK(run("train --data " + data + "/manifest.txt --out " + rundir +
            " --set iters=10 --set seed=1" + kToySets + " --log-every 0") == 0);
  const std::string ck = rundir + "/checkpoint.bin";
  CHECK(fs::exists(ck));

  const std::string mask_out = (root / "pred.png").string();
  CHECK(run("infer --checkpoint " + ck + " --query " + data + "/images/circle_0.png" +
            " --prompt-image " + data + "/images/circle_1.png" + " --prompt-mask " + data +
            "/masks/circle_1.png --out " + mask_out) == 0);
  CHECK(fs::exists(mask_out));

  const std::string report = run_capture("eval --checkpoint " + ck + " --data " + data +
                                         "/manifest.txt --episodes 4 --seed 5");
  CHECK(report.find("miou") != std::string::npos);

  // unknown config keys and missing files produce nonzero exits
  CHECK(run("train --data " + data + "/manifest.txt --out " + rundir +
            " --set bogus_key=1") != 0);
  CHECK(run("eval --checkpoint /nonexistent.bin --data " + data + "/manifest.txt") != 0);
  CHECK(run("infer --checkpoint " + ck + " --query /missing.png --prompt-image x.png "
            "--prompt-mask y.png --out z.png") != 0);
  fs::remove_all(root);
}

TEST_CASE("gen-data is checksum-identical for one seed") {
  const fs::path root = fs::temp_directory_path() / "icseg_cli_det";
  fs::remove_all(root);
  CHECK(run("gen-data --out " + (root / "a").string() +
            " --seed 7 --resolution 16 --categories circle --samples 2") == 0);
  CHECK(run("gen-data --out " + (root / "b").string() +
            " --seed 7 --resolution 16 --categories circle --samples 2") == 0);
  CHECK(file_bytes(root / "a" / "images" / "circle_0.png") ==
        file_bytes(root / "b" / "images" / "circle_0.png"));
  CHECK(file_bytes(root / "a" / "manifest.txt") == file_bytes(root / "b" / "manifest.txt"));
  fs::remove_all(root);
}

TEST_CASE("eval over oracle predictions reports perfect scores") {
  const fs::path root = fs::temp_directory_path() / "icseg_cli_oracle";
  fs::remove_all(root);
  const std::string data = (root / "data").string();
  CHECK(run("gen-data --out " + data +
            " --seed 9 --resolution 16 --categories circle,square --samples 2") == 0);
  // the ground-truth masks themselves are the predictions
  const std::string report = run_capture("eval --data " + data + "/manifest.txt --pred-dir " +
                                         data + "/masks");
  CHECK(report.find("miou        1.0000") != std::string::npos);
  CHECK(report.find("j_and_f     1.0000") != std::string::npos);
  fs::remove_all(root);
}

TEST_CASE("grad-check subcommand passes with a small seed budget") {
  CHECK(run("grad-check --seeds 3") == 0);
}
