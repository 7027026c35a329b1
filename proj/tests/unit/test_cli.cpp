#include <doctest.h>

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "spikeseg/cli.hpp"
#include "spikeseg/io.hpp"

using namespace spikeseg;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code = 0;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "spikeseg");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Run r;
  r.code = cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("spikeseg_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::size_t spike_column_total(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  std::size_t n = 0;
  while (std::getline(in, line)) n += line.back() == '1' ? 1 : 0;
  return n;
}

const char* kTinyConfig =
    "d_model = 16\nd_ff = 16\nheads = 2\nn_enc_blocks = 1\nn_dec_blocks = 1\n"
    "frontend_ch1 = 8\nfrontend_ch2 = 8\ncif_channels = 8\nsteps = 40\ncheckpoint_every = 20\n";

// One shared corpus and trained checkpoint for the slower tests.
struct Fixture {
  fs::path dir;
  Fixture() {
    dir = scratch("fixture");
    write_text(dir / "tiny.cfg", kTinyConfig);
    REQUIRE(run({"gen", "--vocab", "4", "--utts", "12", "--eval-utts", "4", "--dim", "5", "--seed", "3", "--out-dir",
                 (dir / "data").string()})
                .code == 0);
    const auto t = run({"train", "--manifest", (dir / "data/train.json").string(), "--eval-manifest",
                        (dir / "data/eval.json").string(), "--config", (dir / "tiny.cfg").string(), "--steps", "30",
                        "--out-dir", (dir / "run").string()});
    REQUIRE(t.code == 0);
  }
};

const Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

TEST_CASE("version and help") {
  const auto v = run({"--version"});
  CHECK(v.code == 0);
  CHECK(v.out.find(std::string(cli::kVersion)) != std::string::npos);
  const auto h = run({"--help"});
  CHECK(h.code == 0);
  CHECK(h.out.find("simulate") != std::string::npos);
  CHECK(run({"simulate", "--help"}).code == 0);
}

TEST_CASE("usage errors exit with 2") {
  CHECK(run({}).code == 2);
  CHECK(run({"transmogrify"}).code == 2);
  CHECK(run({"simulate", "--dynamics", "quadratic"}).code == 2);
  CHECK(run({"simulate", "--wave", "square"}).code == 2);
  CHECK(run({"simulate", "--steps", "many"}).code == 2);
  CHECK(run({"eval", "--manifest", "x.json"}).code == 2);
}

TEST_CASE("missing files exit with 1 and name the path") {
  const auto r = run({"eval", "--checkpoint", "/nonexistent/model.ckpt", "--manifest", "/nonexistent/m.json"});
  CHECK(r.code == 1);
  CHECK(r.err.find("/nonexistent/model.ckpt") != std::string::npos);
  const auto p = run({"simulate", "--params-file", "/nonexistent/params.txt"});
  CHECK(p.code == 1);
  CHECK(p.err.find("/nonexistent/params.txt") != std::string::npos);
}

TEST_CASE("simulate") {
  const auto tri = run({"simulate", "--dynamics", "second-order", "--wave", "triangle"});
  REQUIRE(tri.code == 0);
  CHECK(tri.out.rfind("step,i,v,v_th,u,spike", 0) == 0);
  CHECK(spike_column_total(tri.out) > 0);

  const auto zero = run({"simulate", "--dynamics", "vanilla", "--wave", "constant", "--min", "0", "--max", "0"});
  REQUIRE(zero.code == 0);
  CHECK(spike_column_total(zero.out) == 0);

  const auto quarter = run({"simulate", "--dynamics", "vanilla", "--wave", "constant", "--min", "0.25", "--max", "0.25",
                            "--steps", "9"});
  REQUIRE(quarter.code == 0);
  CHECK(spike_column_total(quarter.out) == 2);

  const auto dir = scratch("simulate");
  write_text(dir / "p.txt", "# quieter neuron\nc = 0.5\n");
  const auto file = run({"simulate", "--dynamics", "second-order", "--params-file", (dir / "p.txt").string(), "--out",
                         (dir / "trace.csv").string(), "--summary", (dir / "s.json").string()});
  REQUIRE(file.code == 0);
  const auto summary = json::parse(file.out);
  CHECK(summary == read_json(dir / "s.json"));
  CHECK(fs::exists(dir / "trace.csv"));

  write_text(dir / "bad.txt", "volume = 11\n");
  CHECK(run({"simulate", "--params-file", (dir / "bad.txt").string()}).code == 2);
}

TEST_CASE("phase") {
  const auto r = run({"phase"});
  REQUIRE(r.code == 0);
  const auto j = json::parse(r.out);
  REQUIRE(j.at("roots").size() == 2);
  CHECK(j["roots"][0]["stability"] == "attractor");
  CHECK(j["roots"][1]["stability"] == "repulsor");
  CHECK(j["roots"][1]["v"].get<double>() == doctest::Approx(0.820513).epsilon(1e-6));
  CHECK(json::parse(run({"phase", "--current", "0.15"}).out).at("roots").empty());
  CHECK(run({"phase", "--a", "0"}).code == 2);
}

TEST_CASE("gen is reproducible") {
  const auto a = scratch("gen_a");
  const auto b = scratch("gen_b");
  for (const auto& d : {a, b}) {
    REQUIRE(run({"gen", "--vocab", "5", "--utts", "6", "--eval-utts", "2", "--dim", "4", "--seed", "9", "--out-dir",
                 d.string()})
                .code == 0);
  }
  CHECK(read_text(a / "train.json") == read_text(b / "train.json"));
  CHECK(read_text(a / "train_features/train-0003.csv") == read_text(b / "train_features/train-0003.csv"));
  const auto m = read_json(a / "train.json");
  CHECK(m.at("utterances").size() == 6);
  CHECK(m.at("vocab").size() == 5);
}

TEST_CASE("train honours flags over the config file") {
  const auto& f = fixture();
  CHECK(fs::exists(f.dir / "run/cmvn.json"));
  CHECK(fs::exists(f.dir / "run/final.ckpt"));
  CHECK(fs::exists(f.dir / "run/best.ckpt"));
  // config says 40 steps, the flag said 30
  std::istringstream log(read_text(f.dir / "run/train_log.jsonl"));
  std::string line;
  std::size_t steps = 0;
  while (std::getline(log, line)) {
    const auto j = json::parse(line);
    if (j.contains("total")) {
      ++steps;
      for (const char* key : {"step", "lr", "ce", "ctc", "qua", "total"}) CHECK(j.contains(key));
    }
  }
  CHECK(steps == 30);
  const auto cfg = read_text(f.dir / "run/model.cfg");
  CHECK(cfg.find("d_model = 16") != std::string::npos);
}

TEST_CASE("eval schema and beam widths") {
  const auto& f = fixture();
  for (const char* beam : {"1", "5"}) {
    const auto r = run({"eval", "--checkpoint", (f.dir / "run/final.ckpt").string(), "--manifest",
                        (f.dir / "data/eval.json").string(), "--beam", beam});
    REQUIRE(r.code == 0);
    const auto j = json::parse(r.out);
    for (const char* key : {"per_mean", "per_std", "boundary_recall", "spikes_per_utt"}) CHECK(j.contains(key));
  }
  const auto dflt = json::parse(run({"eval", "--checkpoint", (f.dir / "run/final.ckpt").string(), "--manifest",
                                     (f.dir / "data/eval.json").string()})
                                    .out);
  CHECK(dflt.at("beam") == 5);
  const auto noisy = run({"eval", "--checkpoint", (f.dir / "run/final.ckpt").string(), "--manifest",
                          (f.dir / "data/eval.json").string(), "--noise", "0", "--out",
                          (f.dir / "eval.json").string()});
  REQUIRE(noisy.code == 0);
  const auto j = read_json(f.dir / "eval.json");
  CHECK(j.at("robustness").at("relative_change") == 0.0);
  CHECK(run({"eval", "--checkpoint", (f.dir / "run/final.ckpt").string(), "--manifest",
             (f.dir / "data/eval.json").string(), "--beam", "0"})
            .code == 2);
}

TEST_CASE("segment writes a trace and boundaries") {
  const auto& f = fixture();
  const auto csv = f.dir / "seg.csv";
  const auto r = run({"segment", "--checkpoint", (f.dir / "run/final.ckpt").string(), "--manifest",
                      (f.dir / "data/eval.json").string(), "--utt-id", "eval-0001", "--out", csv.string()});
  REQUIRE(r.code == 0);
  const auto text = read_text(csv);
  CHECK(text.rfind("frame,current,potential,spike\n", 0) == 0);
  const auto j = read_json(fs::path(csv).replace_extension(".json"));
  CHECK(j.contains("boundary_frames"));
  CHECK(j.at("utt_id") == "eval-0001");
  CHECK(run({"segment", "--checkpoint", (f.dir / "run/final.ckpt").string(), "--manifest",
             (f.dir / "data/eval.json").string(), "--utt-id", "eval-9999", "--out", csv.string()})
            .code == 2);
}

TEST_CASE("sweep emits one row per grid cell") {
  const auto& f = fixture();
  const auto out = f.dir / "sweep.csv";
  const auto r = run({"sweep", "--manifest", (f.dir / "data/train.json").string(), "--eval-manifest",
                      (f.dir / "data/eval.json").string(), "--dynamics-list", "vanilla,second-order", "--layers-list",
                      "1,2", "--config", (f.dir / "tiny.cfg").string(), "--steps", "4", "--beam", "1", "--out",
                      out.string()});
  REQUIRE(r.code == 0);
  std::istringstream in(read_text(out));
  std::string line;
  std::vector<std::string> rows;
  while (std::getline(in, line)) rows.push_back(line);
  REQUIRE(rows.size() == 5);
  CHECK(rows[0] == "dynamics,enc_blocks,per_mean,per_std,boundary_recall,spikes_per_utt");
  CHECK(rows[1].rfind("vanilla,1,", 0) == 0);
  CHECK(rows[4].rfind("second-order,2,", 0) == 0);
}
