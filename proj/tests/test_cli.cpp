#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <fstream>
#include <iostream>
#include <sstream>

#include "support.hpp"
#include "vos/cli.hpp"
#include "vos/config.hpp"

using namespace vos;
using testing::TempDir;

namespace {

struct Captured {
  int code;
  std::string out;
  std::string err;
};

Captured run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  auto* old_out = std::cout.rdbuf(out.rdbuf());
  auto* old_err = std::cerr.rdbuf(err.rdbuf());
  const int code = run_cli(args);
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

// Three instance records over two images; "chair" is not an allowed class.
void make_records(const fs::path& dir) {
  MaskMap a(8, 8), b(8, 8), c(8, 8);
  a(1, 1) = 1;
  b(5, 5) = 1;
  c(3, 3) = 1;
  save_mask(a, dir / "img1" / "1_person.png");
  save_mask(b, dir / "img1" / "2_chair.png");
  save_mask(c, dir / "img2" / "1_dog.png");
  save_frame(Frame(8, 8, 0.3), dir / "img1.png");
  save_frame(Frame(8, 8, 0.6), dir / "img2.png");
}

NetConfig tiny() {
  NetConfig c;
  c.n_blocks = 1;
  c.n_queries = 4;
  c.key_dim = 4;
  c.value_dim = 6;
  c.hidden_dim = 3;
  c.readout_dim = 8;
  c.encoder_channels = {3, 4, 4, 5};
  c.mask_channels = {2, 3, 3, 4};
  c.decoder_channels = {4, 3, 3};
  return c;
}

}  // namespace

TEST_CASE("datagen filters records and writes a corpus") {
  TempDir dir;
  make_records(dir / "records");
  const auto r = run({"datagen", "--records", (dir / "records").string(), "--classes", "person,dog", "--out",
                      (dir / "corpus").string()});
  CHECK(r.code == 0);
  CHECK(r.out.find("kept 2 / 3") != std::string::npos);
  const DatasetIndex index = scan_dataset(dir / "corpus");
  REQUIRE(index.sequences.size() == 2);
  CHECK(index.sequences[0].object_ids == std::vector<int>{1});
  CHECK(fs::exists(dir / "corpus" / "manifest.json"));

  const auto none = run({"datagen", "--records", (dir / "records").string(), "--classes", "table", "--out",
                         (dir / "empty").string()});
  CHECK(none.code == 2);
  CHECK(none.out.find("kept 0 / 3") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "empty"));
}

TEST_CASE("datagen is deterministic for a seed") {
  TempDir dir;
  for (const char* name : {"a", "b"})
    REQUIRE(run({"datagen", "--synthetic", "2", "--frames", "3", "--size", "24", "--seed", "9", "--out",
                 (dir / name).string()})
                .code == 0);
  for (const char* rel : {"JPEGImages/synthetic_0001/00002.png", "Annotations/synthetic_0000/00001.png"})
    CHECK(slurp(dir / "a" / rel) == slurp(dir / "b" / rel));
  run({"datagen", "--synthetic", "2", "--frames", "3", "--size", "24", "--seed", "10", "--out", (dir / "c").string()});
  CHECK(slurp(dir / "a" / "JPEGImages/synthetic_0000/00000.png") != slurp(dir / "c" / "JPEGImages/synthetic_0000/00000.png"));
}

TEST_CASE("exit codes") {
  CHECK(run({}).code == 2);
  CHECK(run({"nonsense"}).code == 2);
  CHECK(run({"--help"}).code == 0);
  CHECK(run({"eval", "--pred", "/nonexistent/p", "--gt", "/nonexistent/g"}).code == 2);
  CHECK(run({"train", "--stage", "sideways"}).code == 2);
  CHECK(run({"infer", "--data", "/nonexistent", "--weights", "/nonexistent.vosw", "--out", "/tmp/x"}).code == 2);
}

TEST_CASE("train, infer, eval and ablate on a tiny corpus") {
  TempDir dir;
  REQUIRE(run({"datagen", "--synthetic", "2", "--frames", "4", "--size", "32", "--seed", "3", "--out",
               (dir / "data").string()})
              .code == 0);
  const fs::path weights = dir / "w.vosw";
  VosNetwork(tiny()).save(weights);

  {
    std::ofstream ini(dir / "train.ini");
    ini << "[train]\nbatch = 1\ncrop = 32\n[pretrain]\niters = 2\n[net]\nblocks = 1\nqueries = 4\nkey_dim = 4\n";
  }
  const auto tr = run({"train", "--stage", "pretrain", "--preset", "toy", "--config", (dir / "train.ini").string(),
                       "--data", (dir / "data").string(), "--out", (dir / "run").string(), "--iters", "3"});
  CHECK(tr.code == 0);
  CHECK(fs::exists(dir / "run" / "pretrain_weights.vosw"));
  const std::string manifest = slurp(dir / "run" / "pretrain_manifest.json");
  CHECK(manifest.find(git_blob_sha1_file(dir / "run" / "pretrain_weights.vosw")) != std::string::npos);
  CHECK(manifest.find("\"iters\": \"3\"") != std::string::npos);  // flag beats file

  const auto in = run({"infer", "--data", (dir / "data").string(), "--weights", weights.string(), "--scales", "24,32",
                       "--flip", "--tmax", "4", "--out", (dir / "pred").string(), "--dump-probs"});
  CHECK(in.code == 0);
  CHECK(fs::exists(dir / "pred" / "synthetic_0001" / "00003.png"));
  CHECK(fs::exists(dir / "pred" / "synthetic_0001" / "00003.prob"));

  const auto ev = run({"eval", "--pred", (dir / "pred").string(), "--gt", (dir / "data").string(), "--csv",
                       (dir / "m.csv").string()});
  CHECK(ev.code == 0);
  CHECK(ev.out.find("J&F") != std::string::npos);
  CHECK(fs::exists(dir / "m.csv"));

  const auto ab = run({"ablate", "--data", (dir / "data").string(), "--baseline-weights", weights.string(),
                       "--da-weights", weights.string(), "--scales", "24,32", "--out", (dir / "ab").string()});
  REQUIRE(ab.code == 0);
  std::istringstream table(ab.out);
  std::vector<std::string> lines;
  for (std::string l; std::getline(table, l);) lines.push_back(l);
  REQUIRE(lines.size() == 4);
  CHECK(lines[0].find("J&F") != std::string::npos);
  const char* names[] = {"Baseline ", "Baseline+DA ", "Baseline+DA+TTA+MS "};
  for (int i = 0; i < 3; ++i) {
    CHECK(lines[static_cast<std::size_t>(i + 1)].rfind(names[i], 0) == 0);
    std::istringstream row(lines[static_cast<std::size_t>(i + 1)]);
    std::string name;
    double j, f, jf;
    row >> name >> j >> f >> jf;
    CHECK(std::abs(jf - (j + f) / 2) <= 1e-4);
  }
  CHECK(slurp(dir / "ab" / "ablation.txt") == ab.out);

  const auto missing = run({"ablate", "--data", (dir / "data").string(), "--baseline-weights", weights.string(),
                            "--da-weights", (dir / "nope.vosw").string()});
  CHECK(missing.code == 2);
  CHECK(missing.err.find("Baseline+DA") != std::string::npos);
}

TEST_CASE("ablation table layout") {
  const std::string t = format_ablation_table({{"Baseline", 0.7509, 0.8206, (0.7509 + 0.8206) / 2},
                                               {"Baseline+DA", 0.7713, 0.8373, (0.7713 + 0.8373) / 2},
                                               {"Baseline+DA+TTA+MS", 0.8007, 0.8683, (0.8007 + 0.8683) / 2}});
  CHECK(t.find("Baseline             0.7509  0.8206  0.7857") != std::string::npos);
  CHECK(t.find("Baseline+DA+TTA+MS   0.8007  0.8683  0.8345") != std::string::npos);
}

TEST_CASE("ini parsing and content hashes") {
  const auto ini = parse_ini("# c\n[a]\nx = 1\n; d\ny=two words\n[b]\nx=3\n");
  CHECK(ini.at("a").at("x") == "1");
  CHECK(ini.at("a").at("y") == "two words");
  CHECK(ini.at("b").at("x") == "3");
  // values from `git hash-object --stdin`
  CHECK(git_blob_sha1("hello") == "b6fc4c620b67d95f953a5c1c1230aaab5db5a1b0");
  CHECK(git_blob_sha1("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}
