#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "specbench/io.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

const fs::path& workdir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "specbench_cli_tests";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

Run run(const std::string& args, const std::string& env = {}) {
  const fs::path out = workdir() / "stdout.txt";
  const fs::path err = workdir() / "stderr.txt";
  const std::string cmd = "cd " + workdir().string() + " && " + env + " " + SPECBENCH_CLI + " " + args + " > " +
                          out.string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = specbench::read_text(out);
  r.err = specbench::read_text(err);
  return r;
}

std::string file(const std::string& name) { return specbench::read_text(workdir() / name); }

int lines(const std::string& text) {
  int n = 0;
  for (char c : text) n += c == '\n';
  return n;
}

int count(const std::string& text, const std::string& needle) {
  int n = 0;
  for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + 1)) ++n;
  return n;
}

// The prepared charge_mimic corpus, generated once.
const std::string& dataset_csv() {
  static const std::string name = [] {
    REQUIRE(run("generate --preset charge_mimic --seed 2 --out full.csv").code == 0);
    return std::string("full.csv");
  }();
  return name;
}

void check_single_line_error(const Run& r, int code, const std::string& kind) {
  CHECK(r.code == code);
  CHECK(lines(r.err) == 1);
  CHECK(r.err.rfind("error: " + kind + ": ", 0) == 0);
}

}  // namespace

TEST_CASE("generate matches the corpus size and is reproducible") {
  const Run r = run("generate --preset charge_mimic --seed 7 --out d.csv");
  REQUIRE(r.code == 0);
  const std::string a = file("d.csv");
  CHECK(lines(a) == 2113);
  CHECK(count(a.substr(0, a.find('\n')), ",") == 728);
  REQUIRE(run("generate --preset charge_mimic --seed 7 --out d2.csv").code == 0);
  CHECK(file("d2.csv") == a);
  REQUIRE(run("generate --preset charge_mimic --seed 8 --out d3.csv").code == 0);
  CHECK(file("d3.csv") != a);
}

TEST_CASE("every subcommand documents its flags") {
  const std::vector<std::pair<std::string, std::vector<std::string>>> commands{
      {"generate", {"--preset", "--config", "--seed", "--out", "--raw"}},
      {"preprocess", {"--in", "--out", "--no-despike"}},
      {"augment", {"--in", "--out", "--seed", "--noise", "--shift", "--mode"}},
      {"fit-peaks", {"--in", "--out", "--study", "--preset", "--class", "--reps", "--levels", "--seed"}},
      {"train", {"--in", "--preset", "--config", "--model", "--seed", "--split", "--epochs", "--param", "--out",
                 "--report", "--history"}},
      {"evaluate", {"--model-file", "--in", "--rows", "--noise", "--seed", "--out", "--confusion"}},
      {"sweep", {"--plan", "--out", "--seed", "--confusion"}},
      {"stability", {"--plan", "--out", "--seed"}},
      {"pca", {"--in", "--out", "--components", "--summary"}},
      {"plot", {"--in", "--out", "--title"}}};
  for (const auto& [cmd, flags] : commands) {
    const Run r = run(cmd + " --help");
    CAPTURE(cmd);
    CHECK(r.code == 0);
    for (const auto& f : flags) {
      CAPTURE(f);
      CHECK(r.out.find(f) != std::string::npos);
    }
  }
  CHECK(run("--help").code == 0);
}

TEST_CASE("usage errors") {
  check_single_line_error(run(""), 1, "usage");
  check_single_line_error(run("frobnicate"), 1, "usage");
  check_single_line_error(run("generate --preset charge_mimic --out x.csv"), 1, "usage");
  check_single_line_error(run("generate --preset charge_mimic --seed 1 --out x.csv --bogus"), 1, "usage");
  check_single_line_error(run("generate --preset nothing --seed 1 --out x.csv"), 1, "usage");
  check_single_line_error(run("train --preset charge_mimic --model lstm --seed 1 --out m.json"), 1, "usage");
  check_single_line_error(run("fit-peaks --out s.csv --study"), 1, "usage");
  CHECK_FALSE(fs::exists(workdir() / "x.csv"));
}

TEST_CASE("data errors") {
  specbench::write_text(workdir() / "broken.csv", "1450,1451,label\n0.1,zz,a\n");
  check_single_line_error(run("preprocess --in broken.csv --out p.csv"), 2, "data");
  check_single_line_error(run("augment --in broken.csv --out p.csv --seed 1"), 2, "data");
  specbench::write_text(workdir() / "bad_plan.json", R"({"dataset": {"preset": "charge_mimic"}, "models": ["knn"],
                                                         "noise_levels": [0.9], "master_seed": 1})");
  check_single_line_error(run("sweep --plan bad_plan.json --out r"), 2, "data");
  specbench::write_text(workdir() / "no_seed_plan.json", R"({"dataset": {"preset": "charge_mimic"}, "models": ["knn"]})");
  check_single_line_error(run("sweep --plan no_seed_plan.json --out r"), 1, "usage");
}

TEST_CASE("numerical failures") {
  const Run r = run("train --in " + dataset_csv() +
                    " --model MHCNN --seed 1 --epochs 2 --param lr=1e306 --param batch_size=64 --out m.json");
  check_single_line_error(r, 3, "numerical");
  CHECK(r.err.find("diverged") != std::string::npos);
}

TEST_CASE("preprocess, augment and pca") {
  REQUIRE(run("generate --preset dielectric_mimic --seed 3 --raw --out raw.csv").code == 0);
  REQUIRE(run("generate --preset dielectric_mimic --seed 3 --out prepared.csv").code == 0);
  REQUIRE(run("preprocess --in raw.csv --out p.csv").code == 0);
  CHECK(file("p.csv") == file("prepared.csv"));

  REQUIRE(run("augment --in prepared.csv --out a1.csv --seed 9 --mode append").code == 0);
  REQUIRE(run("augment --in prepared.csv --out a2.csv --seed 9 --mode append").code == 0);
  CHECK(file("a1.csv") == file("a2.csv"));
  CHECK(lines(file("a1.csv")) == 2 * (lines(file("prepared.csv")) - 1) + 1);

  const Run p = run("pca --in prepared.csv --out pca.csv --components 3 --summary pca.json");
  REQUIRE(p.code == 0);
  CHECK(file("pca.csv").rfind("label,pc1,pc2,pc3\n", 0) == 0);
  CHECK(nlohmann::json::parse(file("pca.json")).at("explained_variance_ratio").size() == 3);
}

TEST_CASE("train and evaluate agree") {
  const Run t = run("train --in " + dataset_csv() + " --model gnb --seed 4 --out gnb.json --report gnb_report.json");
  REQUIRE(t.code == 0);
  const Run e = run("evaluate --model-file gnb.json --in " + dataset_csv() + " --out eval.json --confusion conf.csv");
  REQUIRE(e.code == 0);
  CHECK(e.out == t.out);
  CHECK(nlohmann::json::parse(file("eval.json")).at("confusion") ==
        nlohmann::json::parse(file("gnb_report.json")).at("confusion"));
  CHECK(lines(file("conf.csv")) == 5);

  REQUIRE(run("train --in " + dataset_csv() + " --model CNN --seed 4 --epochs 2 --out cnn.json --history h.csv").code ==
          0);
  CHECK(lines(file("h.csv")) == 3);
  const std::string model = file("cnn.json");
  REQUIRE(run("train --in " + dataset_csv() + " --model CNN --seed 4 --epochs 2 --out cnn.json").code == 0);
  CHECK(file("cnn.json") == model);
  check_single_line_error(run("evaluate --model-file cnn.json --in " + dataset_csv() + " --noise 0.2"), 1, "usage");
  CHECK(run("evaluate --model-file cnn.json --in " + dataset_csv() + " --noise 0.2 --seed 1 --rows all").code == 0);
}

TEST_CASE("sweep, stability and plot") {
  specbench::write_text(workdir() / "plan.json",
                        R"({"dataset": {"preset": "charge_mimic", "max_per_class": 12}, "models": ["knn", "gnb", "FC"],
                            "noise_levels": [0, 0.25, 0.5], "repetitions": 2, "epochs": 2, "master_seed": 5,
                            "augment": {"noise": 0.05, "shift": 30}})");
  REQUIRE(run("sweep --plan plan.json --out s1 --confusion").code == 0);
  const std::string sweep = file("s1/sweep.csv");
  CHECK(lines(sweep) == 1 + 3 * 3);
  CHECK(fs::exists(workdir() / "s1/confusion_FC.json"));
  REQUIRE(run("sweep --plan plan.json --out s2", "SPECBENCH_THREADS=3").code == 0);
  CHECK(file("s2/sweep.csv") == sweep);
  CHECK(file("s2/sweep_runs.csv") == file("s1/sweep_runs.csv"));
  REQUIRE(run("sweep --plan plan.json --out s3 --seed 6").code == 0);
  CHECK(file("s3/sweep.csv") != sweep);

  REQUIRE(run("plot --in s1/sweep.csv --out s1/sweep.svg").code == 0);
  REQUIRE(run("plot --in s1/sweep.csv --out s1/again.svg").code == 0);
  const std::string svg = file("s1/sweep.svg");
  CHECK(svg == file("s1/again.svg"));
  CHECK(count(svg, "<path") == 3);
  CHECK(count(svg, "class=\"errbar\"") == 9);

  const Run st = run("stability --plan plan.json --out st");
  REQUIRE(st.code == 0);
  CHECK(st.err.rfind("warning: ", 0) == 0);
  CHECK(lines(file("st/stability.csv")) == 1 + 6 * 2);
  CHECK(fs::exists(workdir() / "st/history_FC_aug_1.csv"));
  REQUIRE(run("plot --in st/history_FC_0.csv --out st/h.svg").code == 0);
  CHECK(count(file("st/h.svg"), "<path") == 1);
}

TEST_CASE("peak fits") {
  REQUIRE(run("fit-peaks --in " + dataset_csv() + " --out peaks.csv").code == 0);
  CHECK(lines(file("peaks.csv")) == 1 + 2 * 2112);
  REQUIRE(run("fit-peaks --study --preset charge_mimic --class 1 --reps 5 --levels 0.01,0.1 --seed 3 --out st.csv")
              .code == 0);
  CHECK(lines(file("st.csv")) == 1 + 2 * 8);
}
