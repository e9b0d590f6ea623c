#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <vector>

#include "deqfuse/checkpoint.hpp"
#include "deqfuse/cli.hpp"

using namespace deqfuse;
namespace fs = std::filesystem;

namespace {

int run_cli(std::initializer_list<const char*> args, std::string* out = nullptr) {
  std::vector<const char*> argv = {"deqfuse"};
  argv.insert(argv.end(), args.begin(), args.end());
  std::ostringstream captured;
  std::streambuf* old = nullptr;
  if (out != nullptr) old = std::cout.rdbuf(captured.rdbuf());
  const int rc = cli::run(static_cast<int>(argv.size()), argv.data());
  if (out != nullptr) {
    std::cout.rdbuf(old);
    *out = captured.str();
  }
  return rc;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / ("deqfuse_test_" + std::to_string(::getpid()))) {
    fs::create_directories(path);
  }
  ~TempDir() { std::error_code ec; fs::remove_all(path, ec); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("checkpoint round trip is byte and bit exact") {
  TempDir tmp;
  RngState rng(11);
  Checkpoint ckpt;
  ckpt.seed = 11;
  ckpt.params = init_fusion_params(rng, 8, 2);
  ckpt.head = init_head(rng, 8, 4);
  ckpt.has_head = true;

  const std::string p1 = tmp.file("a.json");
  const std::string p2 = tmp.file("b.json");
  save_checkpoint(p1, ckpt);
  const Checkpoint loaded = load_checkpoint(p1);
  save_checkpoint(p2, loaded);
  CHECK(slurp(p1) == slurp(p2));

  std::vector<const Tensor2*> a, b;
  visit_params(ckpt.params, [&a](const std::string&, const Tensor2& t) { a.push_back(&t); });
  visit_params(loaded.params,
               [&b](const std::string&, const Tensor2& t) { b.push_back(&t); });
  for (std::size_t k = 0; k < a.size(); ++k) {
    REQUIRE(a[k]->size() == b[k]->size());
    for (std::size_t j = 0; j < a[k]->size(); ++j) CHECK((*a[k])[j] == (*b[k])[j]);
  }
  CHECK(max_abs_diff(ckpt.head.weight, loaded.head.weight) == 0.0);
}

TEST_CASE("checkpoint rejects malformed input") {
  TempDir tmp;
  const std::string path = tmp.file("bad.json");
  std::ofstream(path) << "{not json";
  CHECK_THROWS_AS(load_checkpoint(path), IoError);
  CHECK_THROWS_AS(load_checkpoint(tmp.file("missing.json")), IoError);
}

TEST_CASE("converge writes a fixed-length deterministic CSV") {
  TempDir tmp;
  const std::string out1 = tmp.file("t1.csv");
  const std::string out2 = tmp.file("t2.csv");
  CHECK(run_cli({"converge", "--dim", "16", "--batch", "2", "--steps", "12", "--seed",
                 "5", "--out", out1.c_str()}) == cli::kExitOk);
  CHECK(run_cli({"converge", "--dim", "16", "--batch", "2", "--steps", "12", "--seed",
                 "5", "--out", out2.c_str()}) == cli::kExitOk);
  const std::string a = slurp(out1);
  CHECK(a == slurp(out2));
  CHECK(a.rfind("step,rel_diff\n", 0) == 0);
  CHECK(a.back() == '\n');
  CHECK(std::count(a.begin(), a.end(), '\n') == 13);  // header + 12 rows
}

TEST_CASE("converge default instance drops below 1e-2 by step 20") {
  TempDir tmp;
  const std::string out = tmp.file("default.csv");
  std::string printed;
  CHECK(run_cli({"converge", "--out", out.c_str()}, &printed) == cli::kExitOk);
  // parse data row 20 from the CSV
  std::istringstream is(slurp(out));
  std::string line;
  std::getline(is, line);
  double step20 = 1.0;
  for (int row = 1; row <= 20; ++row) {
    REQUIRE(static_cast<bool>(std::getline(is, line)));
    if (row == 20) step20 = std::stod(line.substr(line.find(',') + 1));
  }
  CHECK(step20 < 1e-2);
  CHECK(printed.find("step 20") != std::string::npos);
}

TEST_CASE("converge with --steps 1 emits exactly one data row") {
  TempDir tmp;
  const std::string out = tmp.file("one.csv");
  CHECK(run_cli({"converge", "--dim", "8", "--batch", "2", "--steps", "1", "--out",
                 out.c_str()}) == cli::kExitOk);
  const std::string body = slurp(out);
  CHECK(std::count(body.begin(), body.end(), '\n') == 2);
}

TEST_CASE("converge reports an unwritable output path as an I/O failure") {
  CHECK(run_cli({"converge", "--dim", "8", "--batch", "2", "--steps", "2", "--out",
                 "/nonexistent_dir/x.csv"}) == cli::kExitIo);
}

TEST_CASE("config file obeys flag > file > default precedence") {
  TempDir tmp;
  const std::string cfg = tmp.file("cfg.json");
  std::ofstream(cfg) << R"({"steps": 3, "dim": 8, "batch": 2})";

  // file value applies when the flag is absent
  const std::string out1 = tmp.file("o1.csv");
  CHECK(run_cli({"converge", "--config", cfg.c_str(), "--out", out1.c_str()}) ==
        cli::kExitOk);
  const std::string b1 = slurp(out1);
  CHECK(std::count(b1.begin(), b1.end(), '\n') == 4);

  // explicit flag beats the file
  const std::string out2 = tmp.file("o2.csv");
  CHECK(run_cli({"converge", "--config", cfg.c_str(), "--steps", "2", "--out",
                 out2.c_str()}) == cli::kExitOk);
  const std::string b2 = slurp(out2);
  CHECK(std::count(b2.begin(), b2.end(), '\n') == 3);

  // default (100 steps) without either
  const std::string out3 = tmp.file("o3.csv");
  CHECK(run_cli({"converge", "--dim", "8", "--batch", "2", "--out", out3.c_str()}) ==
        cli::kExitOk);
  const std::string b3 = slurp(out3);
  CHECK(std::count(b3.begin(), b3.end(), '\n') == 101);
}

TEST_CASE("unknown config keys are rejected with the validation exit code") {
  TempDir tmp;
  const std::string cfg = tmp.file("bad.json");
  std::ofstream(cfg) << R"({"not_a_flag": 1})";
  CHECK(run_cli({"converge", "--config", cfg.c_str()}) == cli::kExitValidation);
}

TEST_CASE("bad flags exit with the validation code") {
  CHECK(run_cli({"converge", "--no-such-flag", "3"}) == cli::kExitValidation);
  CHECK(run_cli({"train", "--variant", "bogus"}) == cli::kExitValidation);
}

TEST_CASE("gradcheck passes at 1e-3 and fails at an impossible tolerance") {
  std::string report;
  CHECK(run_cli({"gradcheck", "--seeds", "1", "--tol", "1e-3"}, &report) == cli::kExitOk);
  CHECK(report.find("result: PASS") != std::string::npos);

  // every parameter group appears exactly once, plus the input groups
  for (const char* name :
       {"block0.w_pre", "block0.b_pre", "block0.w_res", "block0.b_res",
        "block0.gn_pre.scale", "block0.gn_pre.shift", "block0.gn_res.scale",
        "block0.gn_res.shift", "block0.gn_out.scale", "block0.gn_out.shift",
        "block1.w_pre", "gate.weight", "gate.bias", "fuse.weight", "fuse.bias",
        "gn_fuse.scale", "gn_fuse.shift", "modality_weights", "x_0", "x_1"}) {
    INFO(name);
    std::size_t count = 0;
    for (std::size_t pos = report.find(name); pos != std::string::npos;
         pos = report.find(name, pos + 1)) {
      // exact token match: next char is whitespace
      const std::size_t end = pos + std::string(name).size();
      if (end < report.size() && std::isspace(static_cast<unsigned char>(report[end])) &&
          (pos == 0 || std::isspace(static_cast<unsigned char>(report[pos - 1])))) {
        ++count;
      }
    }
    CHECK(count == 1);
  }

  CHECK(run_cli({"gradcheck", "--seeds", "1", "--tol", "1e-12"}) == cli::kExitNumeric);
}

TEST_CASE("train with lr 0 checkpoints the initialization") {
  TempDir tmp;
  const std::string metrics = tmp.file("m.csv");
  const std::string ckpt_path = tmp.file("c.json");
  CHECK(run_cli({"train", "--variant", "full", "--epochs", "1", "--lr", "0",
                 "--train-samples", "64", "--test-samples", "16", "--seed", "4", "--out",
                 metrics.c_str(), "--ckpt-out", ckpt_path.c_str()}) == cli::kExitOk);
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  RngState rng(4);
  const FusionParams init = init_fusion_params(rng, 16, 2);
  std::vector<const Tensor2*> a, b;
  visit_params(ckpt.params, [&a](const std::string&, const Tensor2& t) { a.push_back(&t); });
  visit_params(init, [&b](const std::string&, const Tensor2& t) { b.push_back(&t); });
  for (std::size_t k = 0; k < a.size(); ++k) CHECK(max_abs_diff(*a[k], *b[k]) == 0.0);

  const std::string m = slurp(metrics);
  CHECK(m.rfind("epoch,train_loss,test_acc,macro_f1,weighted_f1\n", 0) == 0);
  CHECK(m.back() == '\n');
}

TEST_CASE("train CSV is deterministic across reruns") {
  TempDir tmp;
  const std::string m1 = tmp.file("m1.csv"), m2 = tmp.file("m2.csv");
  const std::string c1 = tmp.file("c1.json"), c2 = tmp.file("c2.json");
  for (const auto& [m, c] : {std::pair{m1, c1}, std::pair{m2, c2}}) {
    CHECK(run_cli({"train", "--epochs", "2", "--train-samples", "128", "--test-samples",
                   "32", "--seed", "9", "--out", m.c_str(), "--ckpt-out",
                   c.c_str()}) == cli::kExitOk);
  }
  CHECK(slurp(m1) == slurp(m2));
  CHECK(slurp(c1) == slurp(c2));
}

TEST_CASE("ablate covers every variant and keeps table and CSV consistent") {
  TempDir tmp;
  const std::string out = tmp.file("ab.csv");
  std::string table;
  // tiny configuration: coverage and formatting, not learning quality
  CHECK(run_cli({"ablate", "--seeds", "1", "--epochs", "1", "--train-samples", "48",
                 "--test-samples", "16", "--out", out.c_str()},
                &table) == cli::kExitOk);
  const std::string csv = slurp(out);
  std::size_t rows = 0;
  std::istringstream is(csv);
  std::string line;
  std::getline(is, line);  // header
  std::vector<std::string> variants = {"weighted_sum", "no_deq", "no_fuse",
                                       "no_theta",     "no_gate", "full"};
  std::size_t idx = 0;
  while (std::getline(is, line)) {
    REQUIRE(idx < variants.size());
    CHECK(line.rfind(variants[idx] + ",", 0) == 0);
    // the printed table carries the same numbers as the CSV row
    const std::string mean_acc = line.substr(line.find(',') + 1,
                                             line.find(',', line.find(',') + 1) -
                                                 line.find(',') - 1);
    CHECK(table.find(mean_acc) != std::string::npos);
    ++rows;
    ++idx;
  }
  CHECK(rows == 6);
  // Full is printed last
  CHECK(table.rfind("full") > table.rfind("weighted_sum"));
}

TEST_CASE("solvebench reports the degenerate anderson column equal to naive") {
  std::string out;
  CHECK(run_cli({"solvebench", "--dim", "16", "--batch", "2", "--seeds", "3",
                 "--target-resid", "1e-3"},
                &out) == cli::kExitOk);
  std::istringstream is(out);
  std::string line;
  std::getline(is, line);  // header
  for (int seed = 0; seed < 3; ++seed) {
    std::getline(is, line);
    std::istringstream row(line);
    std::string s, naive, anderson, m1;
    row >> s >> naive >> anderson >> m1;
    CHECK(naive == m1);
  }
}
