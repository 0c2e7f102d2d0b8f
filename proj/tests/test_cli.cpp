// SPDX-License-Identifier: Apache-2.0
// Drives the castctl binary named by $CASTCTL end to end on a tiny config.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"({
  "seed": 7,
  "vocab_size": 20,
  "source": {"d_model": 8, "n_layers": 1, "n_heads": 2, "d_ff": 16, "max_seq_len": 8},
  "target": {"d_model": 12, "n_layers": 2, "n_heads": 2, "d_ff": 24, "max_seq_len": 8},
  "pretrain": {"steps": 20, "batch_size": 4, "seq_len": 8},
  "lora": {"rank": 2, "slots": ["attn_v"], "steps": 10, "batch_size": 8},
  "distill": {"steps": 5, "batch_size": 4, "seq_len": 8},
  "task": {"modulus": 5, "eval_examples": 50},
  "baselines": {"svd_rank_budget": 8},
  "ablation": {"probe_batches": 1}
})";

struct Result {
  int status = -1;
  std::string output;
};

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class Cli {
 public:
  Cli() : root_(fs::temp_directory_path() / ("castctl_test_" + std::to_string(::getpid()))) {
    fs::remove_all(root_);
    fs::create_directories(root_);
    std::ofstream(config()) << kTinyConfig;
    const char* exe = std::getenv("CASTCTL");
    REQUIRE_MESSAGE(exe != nullptr, "CASTCTL must point at the castctl binary");
    exe_ = exe;
  }
  ~Cli() { fs::remove_all(root_); }

  fs::path config() const { return root_ / "tiny.json"; }
  fs::path out(const std::string& name) const { return root_ / name; }
  const fs::path& root() const { return root_; }

  Result run(const std::string& args) const {
    const fs::path log = root_ / "last.log";
    const std::string cmd = "\"" + exe_ + "\" " + args + " > \"" + log.string() + "\" 2>&1";
    const int raw = std::system(cmd.c_str());
    Result r;
    r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    r.output = read_text(log);
    return r;
  }

  std::string stage(const std::string& name, const std::string& dir, const std::string& extra = "") const {
    return name + " --config \"" + config().string() + "\" --out \"" + out(dir).string() + "\" " + extra;
  }

 private:
  fs::path root_;
  std::string exe_;
};

}  // namespace

TEST_CASE("configuration errors exit with status 2") {
  Cli cli;
  CHECK(cli.run("").status == 2);
  CHECK(cli.run("pretrain").status == 2);
  CHECK(cli.run("frobnicate --config x").status == 2);
  CHECK(cli.run("pretrain --config \"" + cli.out("absent.json").string() + "\"").status == 2);
  std::ofstream(cli.out("bad.json")) << R"({"seed": 1, "colour": "blue"})";
  const Result unknown = cli.run("pretrain --config \"" + cli.out("bad.json").string() + "\"");
  CHECK(unknown.status == 2);
  CHECK(unknown.output.find("colour") != std::string::npos);
  CHECK(cli.run(cli.stage("pretrain", "x", "--set distill.nope=1")).status == 2);
  CHECK(cli.run(cli.stage("pretrain", "x", "--temperature -1")).status == 2);
}

TEST_CASE("eval before train-cast names the missing stage") {
  Cli cli;
  REQUIRE(cli.run(cli.stage("pretrain", "run")).status == 0);
  REQUIRE(cli.run(cli.stage("train-lora", "run")).status == 0);
  const Result r = cli.run(cli.stage("eval", "run"));
  CHECK(r.status == 5);
  CHECK(r.output.find("train-cast") != std::string::npos);

  const Result early = cli.run(cli.stage("train-lora", "empty"));
  CHECK(early.status == 5);
  CHECK(early.output.find("pretrain") != std::string::npos);
}

TEST_CASE("pipeline produces every artifact and is reproducible") {
  Cli cli;
  REQUIRE(cli.run(cli.stage("pipeline", "a")).status == 0);
  const std::vector<std::string> files = {"source.ckpt",       "target.ckpt",        "source_lora.adpt",
                                          "ceiling_lora.adpt", "cast_mapping.mapr",  "svd_lora.adpt",
                                          "naive_lora.adpt",   "eval_report.json",   "train_cast_report.json",
                                          "resolved_config.json"};
  for (const auto& f : files) CHECK_MESSAGE(fs::exists(cli.out("a") / f), f);
  const auto report = nlohmann::json::parse(read_text(cli.out("a") / "eval_report.json"));
  CHECK(report.at("scores").size() == 6);

  REQUIRE(cli.run(cli.stage("pipeline", "b")).status == 0);
  for (const auto& f : {"source_lora.adpt", "ceiling_lora.adpt", "cast_mapping.mapr", "svd_lora.adpt",
                        "naive_lora.adpt", "eval_report.json"}) {
    CHECK_MESSAGE(read_text(cli.out("a") / f) == read_text(cli.out("b") / f), f);
  }

  // Stages are resumable: rerunning one stage from its inputs reproduces its output.
  REQUIRE(cli.run(cli.stage("train-cast", "b")).status == 0);
  CHECK(read_text(cli.out("a") / "cast_mapping.mapr") == read_text(cli.out("b") / "cast_mapping.mapr"));

  // A different seed gives different adapters.
  REQUIRE(cli.run(cli.stage("pipeline", "c", "--seed 8")).status == 0);
  CHECK(read_text(cli.out("a") / "source_lora.adpt") != read_text(cli.out("c") / "source_lora.adpt"));

  SUBCASE("ablate writes its report") {
    const Result r = cli.run(cli.stage("ablate", "a", "--steps 3"));
    CHECK(r.status == 0);
    CHECK(fs::exists(cli.out("a") / "ablation_report.json"));
  }
  SUBCASE("a corrupted artifact is a format error") {
    const fs::path mapping = cli.out("a") / "cast_mapping.mapr";
    std::string bytes = read_text(mapping);
    bytes[0] = 'X';
    std::ofstream(mapping, std::ios::binary) << bytes;
    CHECK(cli.run(cli.stage("eval", "a")).status == 3);
  }
  SUBCASE("a kernel that changed under the mapping is an integrity error") {
    const fs::path adapters = cli.out("a") / "source_lora.adpt";
    std::string bytes = read_text(adapters);
    bytes[bytes.size() - 2] = static_cast<char>(bytes[bytes.size() - 2] ^ 0x01);
    std::ofstream(adapters, std::ios::binary) << bytes;
    const Result r = cli.run(cli.stage("eval", "a"));
    CHECK(r.status == 4);
  }
}
