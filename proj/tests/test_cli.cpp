#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "tightbox/dataset.hpp"
#include "tightbox/interp.hpp"
#include "tightbox/model.hpp"
#include "tightbox/service.hpp"

using namespace tightbox;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

// Runs the CLI through the shell, capturing stdout (stderr is dropped).
Run cli(const std::string& args) {
  const std::string cmd = std::string("\"") + TIGHTBOX_CLI_PATH + "\" " + args + " 2>/dev/null";
  Run r;
  FILE* p = ::popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = ::pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    root = fs::temp_directory_path() /
           ("tightbox_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()) + "_" +
            std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root);
  }
  void TearDown() override { fs::remove_all(root); }

  std::string q(const fs::path& p) const { return "\"" + p.string() + "\""; }

  fs::path root;
};

}  // namespace

TEST_F(Cli, SynthIsByteIdenticalForASeed) {
  ASSERT_EQ(cli("synth --n 5 --seed 4 --size 48 --prelabels --out " + q(root / "a")).code, 0);
  ASSERT_EQ(cli("synth --n 5 --seed 4 --size 48 --prelabels --out " + q(root / "b")).code, 0);
  ASSERT_EQ(cli("synth --n 5 --seed 5 --size 48 --prelabels --out " + q(root / "c")).code, 0);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), root / "a");
    if (rel == "manifest.json") continue;
    EXPECT_EQ(slurp(e.path()), slurp(root / "b" / rel)) << rel;
    ++files;
  }
  EXPECT_EQ(files, 5u * 2 + 2);
  EXPECT_NE(slurp(root / "a" / "labels.jsonl"), slurp(root / "c" / "labels.jsonl"));
  EXPECT_EQ(load_labels(root / "a" / "labels.jsonl").size(), 5u);

  const json m = read_json(root / "a" / "manifest.json");
  EXPECT_EQ(m.at("command"), "synth");
  EXPECT_EQ(m.at("seed"), 4);
  EXPECT_TRUE(m.at("outputs").contains("labels"));
}

TEST_F(Cli, ExtractMatchesSynthLabels) {
  ASSERT_EQ(cli("synth --n 6 --seed 2 --size 64 --out " + q(root / "d")).code, 0);
  const auto r = cli("extract --masks " + q(root / "d" / "masks") + " --images " + q(root / "d" / "images") +
                     " --out " + q(root / "x"));
  ASSERT_EQ(r.code, 0);
  const auto truth = load_labels(root / "d" / "labels.jsonl");
  const auto got = load_labels(root / "x" / "labels.jsonl");
  ASSERT_EQ(got.size(), truth.size());
  for (const auto& t : truth) {
    bool found = false;
    for (const auto& g : got) found |= g.image_id == t.image_id && *g.true_box == *t.true_box;
    EXPECT_TRUE(found) << t.image_id;
  }
}

TEST_F(Cli, StatsRecoverSigmas) {
  ASSERT_EQ(cli("synth --n 3000 --seed 9 --size 32 --background flat --prelabels --sigma-v 0.06 --sigma-h 0.03 "
                "--out " + q(root / "d"))
                .code,
            0);
  const auto r = cli("stats --gt " + q(root / "d" / "labels.jsonl") + " --pre " + q(root / "d" / "prelabels.jsonl") +
                     " --iou 0.1 --out " + q(root / "s"));
  ASSERT_EQ(r.code, 0);
  const json j = read_json(root / "s" / "error_model.json");
  EXPECT_EQ(j.at("n_pairs"), 3000);
  EXPECT_NEAR(j.at("error_model").at("sigma_vertical").get<double>(), 0.06, 0.05 * 0.06);
  EXPECT_NEAR(j.at("error_model").at("sigma_horizontal").get<double>(), 0.03, 0.05 * 0.03);
  EXPECT_NE(r.out.find("3000 matched pairs"), std::string::npos);
}

TEST_F(Cli, EvalWithOracleCheckpoint) {
  ASSERT_EQ(cli("synth --n 12 --seed 1 --size 96 --out " + q(root / "d")).code, 0);
  SampleConfig sample;
  sample.patch_size = 64;
  save_oracle_checkpoint(root / "ck", root / "d" / "labels.jsonl", sample);
  const auto r = cli("eval --checkpoint " + q(root / "ck") + " --labels " + q(root / "d" / "labels.jsonl") +
                     " --images " + q(root / "d" / "images") + " --seed 5 --out " + q(root / "e"));
  ASSERT_EQ(r.code, 0);
  const json j = read_json(root / "e" / "report.json");
  EXPECT_GT(j.at("mae_le").at("before").get<double>(), 0.0);
  EXPECT_NEAR(j.at("mae_le").at("after").get<double>(), 0.0, 1e-6);
  EXPECT_EQ(slurp(root / "e" / "report.txt"), r.out);

  // Same seed, same report.
  ASSERT_EQ(cli("eval --checkpoint " + q(root / "ck") + " --labels " + q(root / "d" / "labels.jsonl") + " --images " +
                q(root / "d" / "images") + " --seed 5 --out " + q(root / "e2"))
                .code,
            0);
  EXPECT_EQ(slurp(root / "e" / "report.json"), slurp(root / "e2" / "report.json"));
}

TEST_F(Cli, RefineWritesModelBoxes) {
  ASSERT_EQ(cli("synth --n 4 --seed 3 --size 96 --prelabels --out " + q(root / "d")).code, 0);
  SampleConfig sample;
  sample.patch_size = 64;
  save_oracle_checkpoint(root / "ck", root / "d" / "labels.jsonl", sample);
  const auto r = cli("refine --checkpoint " + q(root / "ck") + " --labels " + q(root / "d" / "prelabels.jsonl") +
                     " --images " + q(root / "d" / "images") + " --out " + q(root / "r"));
  ASSERT_EQ(r.code, 0);
  const auto truth = load_labels(root / "d" / "labels.jsonl");
  const auto out = load_labels(root / "r" / "refined.jsonl");
  ASSERT_EQ(out.size(), truth.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    EXPECT_EQ(out[i].source, LabelSource::model);
    const BBox b = label_box(out[i]);
    const BBox& t = *truth[i].true_box;
    EXPECT_NEAR(b.x_min, t.x_min, 1e-6);
    EXPECT_NEAR(b.y_max, t.y_max, 1e-6);
  }
}

TEST_F(Cli, TrackInterpWithAndWithoutModel) {
  ASSERT_EQ(cli("synth --sequence-frames 11 --key-interval 5 --seed 2 --size 96 --out " + q(root / "d")).code, 0);
  const TrackSequence seq = load_track(root / "d" / "track.json");
  ASSERT_EQ(seq.keyframes.size(), 3u);

  ASSERT_EQ(cli("track-interp --track " + q(root / "d" / "track.json") + " --out " + q(root / "i")).code, 0);
  const auto plain = load_labels(root / "i" / "boxes.jsonl");
  ASSERT_EQ(plain.size(), 11u);
  const auto expected = interpolate_track(seq);
  for (std::size_t f = 0; f < 11; ++f) EXPECT_EQ(label_box(plain[f]), expected[f].box);
  EXPECT_EQ(plain[0].image_id, "frame_0000.png");

  SampleConfig sample;
  sample.patch_size = 64;
  save_oracle_checkpoint(root / "ck", root / "d" / "labels.jsonl", sample);
  ASSERT_EQ(cli("track-interp --track " + q(root / "d" / "track.json") + " --images " + q(root / "d" / "images") +
                " --checkpoint " + q(root / "ck") + " --out " + q(root / "m"))
                .code,
            0);
  const auto refined = load_labels(root / "m" / "boxes.jsonl");
  const auto truth = load_labels(root / "d" / "labels.jsonl");
  ASSERT_EQ(refined.size(), 11u);
  for (std::size_t f = 0; f < 11; ++f) {
    EXPECT_NEAR(label_box(refined[f]).x_min, truth[f].true_box->x_min, 1e-6);
    EXPECT_EQ(refined[f].source, f % 5 == 0 ? LabelSource::human : LabelSource::model);
  }
}

TEST_F(Cli, ConfigPrecedence) {
  ASSERT_EQ(cli("synth --n 8 --seed 1 --size 48 --out " + q(root / "d")).code, 0);
  std::ofstream(root / "cfg.json") << R"({"train": {"epochs": 2, "batch_size": 4, "seed": 11}, "eval": {}})";
  const auto r = cli("train --labels " + q(root / "d" / "labels.jsonl") + " --images " + q(root / "d" / "images") +
                     " --config " + q(root / "cfg.json") + " --batch-size 2 --patch-size 32 --val-fraction 0 --out " +
                     q(root / "t"));
  ASSERT_EQ(r.code, 0);
  const json c = read_json(root / "t" / "manifest.json").at("config");
  EXPECT_EQ(c.at("epochs"), 2);        // config file over default
  EXPECT_EQ(c.at("batch_size"), 2);    // flag over config file
  EXPECT_EQ(c.at("seed"), 11);
  EXPECT_EQ(c.at("learning_rate"), 1e-4);  // default
  EXPECT_EQ(read_json(root / "t" / "history.json").at("loss").size(), 2u);
  EXPECT_TRUE(fs::exists(root / "t" / "model.bin"));

  ASSERT_EQ(cli("finetune --checkpoint " + q(root / "t") + " --labels " + q(root / "d" / "labels.jsonl") +
                " --images " + q(root / "d" / "images") + " --epochs 1 --out " + q(root / "f"))
                .code,
            0);
  const json fc = read_json(root / "f" / "manifest.json").at("config");
  EXPECT_EQ(fc.at("sample").at("patch_size"), 32);
}

TEST_F(Cli, ExitCodesAndErrorJson) {
  // Runtime I/O failure.
  fs::create_directories(root / "empty_ck");
  fs::create_directories(root / "imgs");
  std::ofstream(root / "l.jsonl") << "";
  auto r = cli("refine --checkpoint " + q(root / "empty_ck") + " --labels " + q(root / "l.jsonl") + " --images " +
               q(root / "imgs") + " --out " + q(root / "o1"));
  EXPECT_EQ(r.code, 2);
  json e = read_json(root / "o1" / "error.json");
  EXPECT_EQ(e.at("error"), "IoError");
  EXPECT_EQ(e.at("exit_code"), 2);

  // Validation failure: too few pairs to fit the error model.
  ASSERT_EQ(cli("synth --n 1 --seed 1 --size 48 --prelabels --out " + q(root / "d")).code, 0);
  r = cli("stats --gt " + q(root / "d" / "labels.jsonl") + " --pre " + q(root / "d" / "prelabels.jsonl") + " --out " +
          q(root / "o2"));
  EXPECT_EQ(r.code, 1);
  e = read_json(root / "o2" / "error.json");
  EXPECT_EQ(e.at("error"), "ValidationError");

  // Malformed label file.
  std::ofstream(root / "bad.jsonl") << "{not json\n";
  r = cli("stats --gt " + q(root / "bad.jsonl") + " --pre " + q(root / "bad.jsonl") + " --out " + q(root / "o3"));
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(fs::exists(root / "o3" / "error.json"));

  // Argument errors.
  EXPECT_EQ(cli("synth").code, 1);
  EXPECT_EQ(cli("nonsense").code, 1);
  EXPECT_EQ(cli("train --labels " + q(root / "missing.jsonl") + " --images " + q(root) + " --out " + q(root / "o4"))
                .code,
            1);
  EXPECT_EQ(cli("train --labels " + q(root / "l.jsonl") + " --images " + q(root) + " --optimizer rmsprop --out " +
                q(root / "o5"))
                .code,
            1);
}

TEST_F(Cli, HelpShowsDefaults) {
  const auto top = cli("--help");
  EXPECT_EQ(top.code, 0);
  for (const char* sub : {"synth", "extract", "stats", "train", "finetune", "eval", "refine", "track-interp", "serve"})
    EXPECT_NE(top.out.find(sub), std::string::npos) << sub;
  const auto train = cli("train --help");
  EXPECT_EQ(train.code, 0);
  EXPECT_NE(train.out.find("--lr"), std::string::npos);
  EXPECT_NE(train.out.find("0.0001"), std::string::npos);
  EXPECT_NE(train.out.find("--batch-size"), std::string::npos);
  EXPECT_NE(train.out.find("32"), std::string::npos);
  const auto serve = cli("serve --help");
  EXPECT_NE(serve.out.find("--port"), std::string::npos);
  EXPECT_NE(serve.out.find(std::to_string(kDefaultPort)), std::string::npos);
}
