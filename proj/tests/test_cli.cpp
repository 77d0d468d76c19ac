// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sys/wait.h>

#include "dualpipe/io/files.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(DUALPIPE_CLI) + " " + args + " 2>/dev/null";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("dualpipe_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Cli, CountParamsPreset) {
  const auto r = run("count-params --preset whisper-large-v2 --rank 1 --start-layer 0");
  ASSERT_EQ(r.code, 0);
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j.at("lora").get<std::size_t>(), 737280u);
  EXPECT_EQ(j.at("layernorm").get<std::size_t>(), 2560u);
  const auto r8 = nlohmann::json::parse(run("count-params --preset whisper-large-v2 --rank 8").out);
  EXPECT_EQ(r8.at("lora").get<std::size_t>(), 8u * 737280u);
}

TEST(Cli, UsageErrorsExitWithTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("count-params --preset gpt").code, 2);
  EXPECT_EQ(run("sweep --data x --base y --out z --axis depth").code, 2);
  EXPECT_EQ(run("--help").code, 0);

  const auto dir = scratch("badcfg");
  std::ofstream(dir / "cfg.json") << R"({"bogus": 1})";
  EXPECT_EQ(run("count-params --config " + (dir / "cfg.json").string()).code, 2);
  fs::remove_all(dir);
}

TEST(Cli, EndToEndPipeline) {
  const auto dir = scratch("e2e");
  const std::string d = dir.string();
  const std::string tiny = " --d-model 16 --heads 2 --enc-layers 2 --dec-layers 1 --ffn 32 --vocab-size 270";
  ASSERT_EQ(run("synth --utts 12 --seed 3 --out " + d + "/data").code, 0);
  for (const char* f : {"train.jsonl", "dev.jsonl", "test.jsonl", "languages.json"})
    EXPECT_TRUE(fs::exists(dir / "data" / f)) << f;

  ASSERT_EQ(run("train-base --threads 1 --steps 4 --batch 2 --data " + d + "/data --out " + d + "/base" + tiny).code, 0);
  const std::string base_manifest = dualpipe::io::read_file(dir / "base" / "manifest.json");
  ASSERT_EQ(run("extend --threads 1 --steps 3 --batch 2 --rank 2 --start-layer 1 --las-hidden 16 --vocab-size 270"
                " --checkpoint-every 2 --data " + d + "/data --base " + d + "/base --out " + d + "/ext").code, 0);
  EXPECT_TRUE(fs::exists(dir / "ext" / "step-2" / "manifest.json"));
  EXPECT_EQ(dualpipe::io::read_file(dir / "base" / "manifest.json"), base_manifest);

  ASSERT_EQ(run("decode --threads 1 --max-len 6 --mode auto --base " + d + "/base --ext " + d + "/ext --data " + d +
                "/data --out " + d + "/hyp.jsonl").code, 0);
  const auto ev = run("evaluate --refs " + d + "/data/test.jsonl --hyps " + d + "/hyp.jsonl --out " + d + "/report.json");
  ASSERT_EQ(ev.code, 0);
  EXPECT_NE(ev.out.find("average"), std::string::npos);
  const auto report = nlohmann::json::parse(dualpipe::io::read_file(dir / "report.json"));
  EXPECT_EQ(report.at("languages").size(), 4u);

  // decoding without the extension on an extension-only mode is a usage error
  EXPECT_EQ(run("decode --mode secondary --base " + d + "/base --data " + d + "/data --out " + d + "/x.jsonl").code, 2);
  fs::remove_all(dir);
}
