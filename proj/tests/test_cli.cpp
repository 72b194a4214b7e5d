#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(CMRET_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

fs::path work_dir() {
  const fs::path dir = fs::temp_directory_path() / "cmret_cli_test";
  return dir;
}

void write_tiny_config(const fs::path& path) {
  json j;
  j["visual"] = {{"layers", 2}, {"heads", 2}, {"dim", 16}, {"mlp_hidden", 32},
                 {"image_h", 32}, {"image_w", 16}, {"patch", 8}};
  j["text"] = {{"layers", 2}, {"heads", 2}, {"dim", 16}, {"mlp_hidden", 32}, {"max_len", 18}};
  j["loss"] = {{"temperature", 0.05}};
  j["optim"] = {{"learning_rate", 1e-3}, {"batch_size", 8}, {"epochs", 2}};
  std::ofstream f(path);
  f << j.dump(2);
}

}  // namespace

TEST_CASE("cli flow: gen-data, train, eval, diagnose, overlays") {
  const fs::path dir = work_dir();
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string d = dir.string();
  write_tiny_config(dir / "tiny.json");

  REQUIRE(run_cli("gen-data --out " + d + "/data --ids 10 --images-per-id 3 --image-h 32 --image-w 16 --seed 2") == 0);
  REQUIRE(fs::exists(dir / "data" / "manifest.jsonl"));

  REQUIRE(run_cli("train --config " + d + "/tiny.json --data " + d +
                  "/data/manifest.jsonl --out " + d + "/run --seed 7") == 0);
  REQUIRE(fs::exists(dir / "run" / "checkpoint_final.bin"));

  CHECK(run_cli("eval --checkpoint " + d + "/run/checkpoint_final --data " + d +
                "/data/manifest.jsonl --lambda-sweep 0,0.25,0.5,0.75,1") == 0);
  // five records, each carrying the config hash
  std::ifstream report(dir / "run" / "metrics_report.jsonl");
  int lines = 0;
  std::string line, hash;
  while (std::getline(report, line)) {
    const json j = json::parse(line);
    CHECK(!j.at("config_hash").get<std::string>().empty());
    hash = j.at("config_hash").get<std::string>();
    ++lines;
  }
  CHECK(lines == 5);

  CHECK(run_cli("diagnose --checkpoint " + d + "/run/checkpoint_final --mode schedule --out " +
                d + "/schedule.tsv") == 0);
  std::ifstream sched(dir / "schedule.tsv");
  std::string header_comment, header;
  std::getline(sched, header_comment);
  std::getline(sched, header);
  CHECK(header == "t\tk_image\tk_text");
  CHECK(header_comment.find(hash) != std::string::npos);

  CHECK(run_cli("diagnose --checkpoint " + d + "/run/checkpoint_final --data " + d +
                "/data/manifest.jsonl --mode entropy --out " + d + "/entropy.tsv") == 0);
  CHECK(run_cli("export-overlays --checkpoint " + d + "/run/checkpoint_final --data " + d +
                "/data/manifest.jsonl --count 2 --out " + d + "/ov") == 0);
  CHECK(fs::exists(dir / "ov" / "overlay_0000.ppm"));
  CHECK(fs::exists(dir / "ov" / "overlay_0001.txt"));

  // ablation arms parse and run
  CHECK(run_cli("train --config " + d + "/tiny.json --data " + d +
                "/data/manifest.jsonl --out " + d + "/run_sl --seed 7 --mars-layers single:1") ==
        0);
  CHECK(run_cli("train --config " + d + "/tiny.json --data " + d +
                "/data/manifest.jsonl --out " + d + "/run_base --seed 7 --no-grab") == 0);

  fs::remove_all(dir);
}

TEST_CASE("cli exit codes map error kinds") {
  const fs::path dir = work_dir().string() + "_codes";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string d = dir.string();
  write_tiny_config(dir / "tiny.json");
  REQUIRE(run_cli("gen-data --out " + d + "/data --ids 8 --images-per-id 2 --image-h 32 --image-w 16 --seed 3") == 0);

  // configuration error -> 2, checked before any compute
  CHECK(run_cli("train --config " + d + "/tiny.json --data " + d +
                "/data/manifest.jsonl --out " + d + "/bad --rho-start 0.2 --rho-end 0.5") == 2);
  CHECK(run_cli("gen-data --out " + d + "/too_many --ids 4000") == 2);

  // data error -> 3
  {
    std::ofstream f(dir / "broken.json");
    f << "this is not json";
  }
  CHECK(run_cli("convert --annotations " + d + "/broken.json --out " + d + "/conv.jsonl") == 3);

  // generic I/O failure -> 1
  CHECK(run_cli("eval --checkpoint " + d + "/missing --data " + d + "/data/manifest.jsonl") == 1);

  fs::remove_all(dir);
}
