#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "saferedir/config.hpp"
#include "saferedir/dataset.hpp"
#include "test_util.hpp"

using namespace saferedir;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

std::string bin() {
  const char* b = std::getenv("SAFEREDIR_BIN");
  return b ? b : "./saferedir";
}

// Runs the CLI with stderr folded into stdout.
Result run(const std::string& args, const std::string& env = "") {
  const std::string cmd = (env.empty() ? "" : "env " + env + " ") + bin() + " " + args + " 2>&1";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

// The JSON document printed last (commands may log lines before it).
json last_json(const std::string& out) {
  const auto pos = out.find("\n{");
  return json::parse(pos == std::string::npos ? out : out.substr(pos + 1));
}

RunConfig small_config() {
  RunConfig c;
  c.world.D = 16;
  c.world.vocab = 64;
  c.world.pairs = 12;
  c.world.T = 10;
  c.model.latent_widths = {8};
  c.model.groups = 4;
  c.model.f_z = 32;
  c.model.f_t = 16;
  c.model.heads = 2;
  c.model.cls_hidden = 32;
  c.model.mask_hidden = 16;
  c.model.alpha_hidden = 16;
  c.model.pos_dim = 8;
  c.train.epochs = 1;
  c.train.batch = 32;
  return c;
}

struct Workspace {
  std::filesystem::path dir = srtest::scratch_dir("cli");
  std::string path(const std::string& name) const { return (dir / name).string(); }
  std::string write_config(const RunConfig& c, const std::string& name = "cfg.json") const {
    std::ofstream(path(name)) << to_json(c).dump(2);
    return path(name);
  }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Cli, HelpListsEveryCommandAndFlag) {
  const Result r = run("--help-all");
  EXPECT_EQ(r.code, 0);
  for (const char* s : {"gen-data", "train", "eval", "simulate", "gradcheck", "--config", "--seed", "--out", "--data",
                        "--ablate", "--ckpt", "--split", "--world", "--T", "--K", "--alpha-scale", "--eps"})
    EXPECT_NE(r.out.find(s), std::string::npos) << s;
}

TEST(Cli, UsageErrorsExitWithConfigCode) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("gen-data --out x.bin --bogus").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("gen-data").code, 2);
}

TEST(Cli, GenDataSummaryAndDeterminism) {
  Workspace w;
  const std::string cfg = w.write_config(small_config());
  const Result a = run("gen-data --config " + cfg + " --seed 4 --out " + w.path("a.bin"));
  ASSERT_EQ(a.code, 0) << a.out;
  const json s = last_json(a.out);
  EXPECT_EQ(s.at("items"), 12 * 2 * 2 * 2 * 10);
  EXPECT_EQ(s.at("train_items").get<int>() + s.at("val_items").get<int>(), s.at("items").get<int>());
  EXPECT_EQ(s.at("seed"), 4);
  EXPECT_GT(s.at("beta").at("min_gap").get<double>(), 0.2);
  const Result b = run("gen-data --config " + cfg + " --seed 4 --out " + w.path("b.bin"));
  ASSERT_EQ(b.code, 0);
  EXPECT_EQ(slurp(w.path("a.bin")), slurp(w.path("b.bin")));
  EXPECT_EQ(last_json(b.out).at("hash"), s.at("hash"));
}

TEST(Cli, SeedPrecedenceFlagThenEnvThenConfig) {
  Workspace w;
  RunConfig c = small_config();
  c.world.seed = 21;
  const std::string cfg = w.write_config(c);
  const std::string base = "gen-data --config " + cfg + " --out " + w.path("d.bin");
  EXPECT_EQ(last_json(run(base).out).at("seed"), 21);
  EXPECT_EQ(last_json(run(base, "SAFEREDIR_SEED=33").out).at("seed"), 33);
  EXPECT_EQ(last_json(run(base + " --seed 44", "SAFEREDIR_SEED=33").out).at("seed"), 44);
  EXPECT_EQ(run(base, "SAFEREDIR_SEED=abc").code, 2);
}

TEST(Cli, BadConfigsExitWithConfigCode) {
  Workspace w;
  std::ofstream(w.path("unknown.json")) << R"({"world": {"D": 16, "colour": 3}})";
  const Result u = run("gen-data --config " + w.path("unknown.json") + " --out " + w.path("x.bin"));
  EXPECT_EQ(u.code, 2);
  EXPECT_NE(u.out.find("colour"), std::string::npos) << u.out;

  RunConfig weak = small_config();
  weak.world.beta = 0.5;
  const Result b = run("gen-data --config " + w.write_config(weak, "weak.json") + " --out " + w.path("x.bin"));
  EXPECT_EQ(b.code, 2);
  EXPECT_NE(b.out.find("needs beta >"), std::string::npos) << b.out;

  const Result missing = run("gen-data --config " + w.path("nope.json") + " --out " + w.path("x.bin"));
  EXPECT_EQ(missing.code, 2);
}

TEST(Cli, CorruptDataExitsWithDataCode) {
  Workspace w;
  const std::string cfg = w.write_config(small_config());
  ASSERT_EQ(run("gen-data --config " + cfg + " --out " + w.path("d.bin")).code, 0);
  const std::string bytes = slurp(w.path("d.bin"));
  std::ofstream(w.path("cut.bin"), std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  const Result r = run("train --config " + cfg + " --data " + w.path("cut.bin") + " --out " + w.path("c.bin"));
  EXPECT_EQ(r.code, 3) << r.out;
  EXPECT_NE(r.out.find("truncated"), std::string::npos) << r.out;
  EXPECT_FALSE(std::filesystem::exists(w.path("c.bin")));

  RunConfig wide = small_config();
  wide.world.D = 32;
  const Result d = run("train --config " + w.write_config(wide, "wide.json") + " --data " + w.path("d.bin") +
                       " --out " + w.path("c.bin"));
  EXPECT_EQ(d.code, 3) << d.out;
}

TEST(Cli, TrainEvalSimulatePipeline) {
  Workspace w;
  const std::string cfg = w.write_config(small_config());
  ASSERT_EQ(run("gen-data --config " + cfg + " --out " + w.path("d.bin")).code, 0);

  const std::string train = "train --config " + cfg + " --data " + w.path("d.bin") + " --seed 3";
  const Result t1 = run(train + " --out " + w.path("c1.bin") + " --step-log " + w.path("steps.jsonl") +
                        " --ablate no_mask");
  ASSERT_EQ(t1.code, 0) << t1.out;
  const json j1 = last_json(t1.out);
  EXPECT_EQ(j1.at("ablate"), json({"no_mask"}));
  std::ifstream steps(w.path("steps.jsonl"));
  std::string line;
  std::size_t n = 0;
  while (std::getline(steps, line)) {
    EXPECT_EQ(json::parse(line).at("L_mask"), 0.0);
    ++n;
  }
  EXPECT_EQ(n, j1.at("steps").get<std::size_t>());
  EXPECT_GT(n, 0u);

  const Result t2 = run(train + " --out " + w.path("c2.bin"));
  const Result t3 = run(train + " --out " + w.path("c3.bin"));
  ASSERT_EQ(t2.code, 0) << t2.out;
  EXPECT_EQ(last_json(t2.out).at("loss_curve_hash"), last_json(t3.out).at("loss_curve_hash"));
  EXPECT_EQ(slurp(w.path("c2.bin")), slurp(w.path("c3.bin")));
  EXPECT_EQ(run(train + " --out " + w.path("c4.bin") + " --ablate no_such_thing").code, 2);

  const Result e = run("eval --ckpt " + w.path("c2.bin") + " --data " + w.path("d.bin") + " --split val");
  ASSERT_EQ(e.code, 0) << e.out;
  const json ej = last_json(e.out);
  for (const char* k : {"cls_accuracy", "mask_f1", "delta_cosine", "forget_rate"}) EXPECT_TRUE(ej.contains(k)) << k;
  EXPECT_EQ(run("eval --ckpt " + w.path("c2.bin") + " --data " + w.path("d.bin") + " --split test").code, 2);

  const std::string sim = "simulate --ckpt " + w.path("c2.bin") + " --world " + w.path("d.bin") + " --K 2 --seed 9";
  ASSERT_EQ(run(sim + " --out " + w.path("t1.json")).code, 0);
  ASSERT_EQ(run(sim + " --out " + w.path("t2.json")).code, 0);
  EXPECT_EQ(slurp(w.path("t1.json")), slurp(w.path("t2.json")));
  const json doc = json::parse(slurp(w.path("t1.json")));
  EXPECT_EQ(doc.at("config").at("K"), 2);
  ASSERT_FALSE(doc.at("traces").empty());
  EXPECT_EQ(doc.at("traces")[0].at("steps").size(), 10u);
  EXPECT_EQ(run(sim + " --out " + w.path("t3.json") + " --K -1").code, 2);
  EXPECT_EQ(run("simulate --ckpt " + w.path("d.bin") + " --world " + w.path("d.bin") + " --out x.json").code, 3);
}

TEST(Cli, GradcheckPassesAtReducedConfig) {
  Workspace w;
  const Result r = run("gradcheck --config " + w.write_config(small_config()));
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
  for (const char* b : {"latent_encoder", "timestep_encoder", "fusion", "classifier", "delta_head", "mask_head",
                        "alpha_head"})
    EXPECT_NE(r.out.find(b), std::string::npos) << b;
  const Result strict = run("gradcheck --config " + w.path("cfg.json") + " --tol 1e-30");
  EXPECT_EQ(strict.code, 4) << strict.out;
}
