#include <doctest.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "ottabp/model.hpp"

using namespace ottabp;
namespace fs = std::filesystem;

namespace {

const char* kCli = OTTABP_CLI_PATH;

int run_cli(const std::string& args, const fs::path& stderr_to = {}) {
  std::string cmd = std::string(kCli) + " " + args + " >/dev/null";
  if (!stderr_to.empty()) cmd += " 2>" + stderr_to.string();
  else cmd += " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

struct CliDir {
  fs::path dir;
  CliDir() {
    dir = fs::temp_directory_path() / "ottabp_cli_test";
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~CliDir() { fs::remove_all(dir); }

  fs::path write_config(const std::string& name, const std::string& domain,
                        const std::string& extra_adapt = "") {
    const fs::path p = dir / name;
    std::ofstream f(p);
    std::string init_line;
    if (domain == "target")
      init_line = "\"init_data\": \"" + (dir / (domain + "_init.csv")).string() + "\",\n    ";
    f << R"({
  "seed": 7,
  "model": {"L": 32, "d": 8, "h": 8, "blocks": 1},
  "synth": {
    "subjects": 2, "domain": ")" << domain << R"(", "T": 20, "n_init": 10,
    "heart_cycles": 2.0, "noise_sigma": 0.02, "drift_delta": 6.0
  },
  "pretrain": {"epochs": 3, "batch_size": 16},
  "adapt": {"reps_per_batch": 2)" << extra_adapt << R"(},
  "sweep": {"frequencies": [null, 10], "init_label_counts": [0, 5], "seeds": [1]},
  "paths": {
    "data": ")" << (dir / (domain + ".csv")).string() << R"(",
    )" << init_line << R"("checkpoint": ")" << (dir / "model.ckpt").string() << R"(",
    "report_dir": ")" << (dir / "report").string() << R"("
  }
})";
    return p;
  }
};

}  // namespace

TEST_CASE("cli synth") {
  CliDir t;
  const fs::path cfg = t.write_config("cfg.json", "target");
  SUBCASE("row count and byte-identical rerun") {
    REQUIRE(run_cli("synth --config " + cfg.string()) == 0);
    const std::string first = slurp(t.dir / "target.csv");
    std::istringstream is(first);
    std::string line;
    int rows = -1;  // header not counted
    while (std::getline(is, line)) ++rows;
    CHECK(rows == 40);  // 2 subjects x T=20
    REQUIRE(run_cli("synth --config " + cfg.string()) == 0);
    CHECK(slurp(t.dir / "target.csv") == first);
    CHECK(fs::exists(t.dir / "target_init.csv"));
  }
  SUBCASE("--subjects and --seed override the config") {
    REQUIRE(run_cli("synth --config " + cfg.string() + " --subjects 3") == 0);
    const std::string with3 = slurp(t.dir / "target.csv");
    std::istringstream is(with3);
    std::string line;
    int rows = -1;
    while (std::getline(is, line)) ++rows;
    CHECK(rows == 60);
    REQUIRE(run_cli("synth --config " + cfg.string() + " --seed 8") == 0);
    CHECK(slurp(t.dir / "target.csv") != with3);
  }
  SUBCASE("invalid config field names the field") {
    const fs::path bad = t.dir / "bad.json";
    std::ofstream(bad) << R"({"synth": {"noise_sigma": -1}})";
    const fs::path err = t.dir / "stderr.txt";
    CHECK(run_cli("synth --config " + bad.string(), err) == 2);
    CHECK(slurp(err).find("noise_sigma") != std::string::npos);
  }
  SUBCASE("unknown config field is rejected") {
    const fs::path bad = t.dir / "bad2.json";
    std::ofstream(bad) << R"({"synth": {"noise": 0.1}})";
    const fs::path err = t.dir / "stderr.txt";
    CHECK(run_cli("synth --config " + bad.string(), err) == 2);
    CHECK(slurp(err).find("synth.noise") != std::string::npos);
  }
}

TEST_CASE("cli pretrain") {
  CliDir t;
  const fs::path cfg = t.write_config("cfg.json", "source");
  SUBCASE("missing data file exits 2") {
    CHECK(run_cli("pretrain --config " + cfg.string()) == 2);
  }
  SUBCASE("deterministic checkpoint; epochs=0 equals initialization") {
    REQUIRE(run_cli("synth --config " + cfg.string()) == 0);
    REQUIRE(run_cli("pretrain --config " + cfg.string()) == 0);
    const std::string first = slurp(t.dir / "model.ckpt");
    REQUIRE(run_cli("pretrain --config " + cfg.string()) == 0);
    CHECK(slurp(t.dir / "model.ckpt") == first);

    const fs::path zero_cfg = t.dir / "zero.json";
    {
      std::string text = slurp(cfg);
      const auto pos = text.find("\"epochs\": 3");
      REQUIRE(pos != std::string::npos);
      text.replace(pos, 11, "\"epochs\": 0");
      std::ofstream(zero_cfg) << text;
    }
    REQUIRE(run_cli("pretrain --config " + zero_cfg.string()) == 0);
    Checkpoint ckpt = load_checkpoint((t.dir / "model.ckpt").string());
    ModelParams fresh = init_params(ckpt.params.geo, 7);
    for_each_tensor_pair(ckpt.params, fresh, [](Eigen::MatrixXd& a, Eigen::MatrixXd& b) {
      CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
    });
  }
}

TEST_CASE("cli sweep and baseline") {
  CliDir t;
  const fs::path src_cfg = t.write_config("src.json", "source");
  const fs::path tgt_cfg = t.write_config("tgt.json", "target");
  REQUIRE(run_cli("synth --config " + src_cfg.string()) == 0);
  REQUIRE(run_cli("pretrain --config " + src_cfg.string()) == 0);
  // point the target config's data at the target stream but keep the
  // checkpoint from the source run
  REQUIRE(run_cli("synth --config " + tgt_cfg.string()) == 0);

  SUBCASE("deterministic report, exit 0, smoke run under a minute") {
    const auto t0 = std::chrono::steady_clock::now();
    REQUIRE(run_cli("sweep --config " + tgt_cfg.string() + " --jobs 2") == 0);
    CHECK(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() < 60.0);
    const std::string report = slurp(t.dir / "report" / "report.csv");
    CHECK(report.find("frequency,init_labels,metric,target,value,n_eval,n_runs") !=
          std::string::npos);
    REQUIRE(run_cli("sweep --config " + tgt_cfg.string() + " --jobs 2") == 0);
    CHECK(slurp(t.dir / "report" / "report.csv") == report);
    CHECK(fs::exists(t.dir / "report" / "report.txt"));
  }
  SUBCASE("corrupt checkpoint exits 2") {
    std::ofstream(t.dir / "model.ckpt", std::ios::trunc) << "garbage";
    CHECK(run_cli("sweep --config " + tgt_cfg.string()) == 2);
  }
  SUBCASE("geometry mismatch exits 2 with both dimensions") {
    const fs::path wide_cfg = t.dir / "wide.json";
    {
      std::string text = slurp(tgt_cfg);
      const auto pos = text.find("\"L\": 32");
      REQUIRE(pos != std::string::npos);
      text.replace(pos, 7, "\"L\": 64");
      std::ofstream(wide_cfg) << text;
    }
    // data on disk still has L=32 windows
    const fs::path err = t.dir / "stderr.txt";
    REQUIRE(run_cli("pretrain --config " + wide_cfg.string(), err) == 2);
    const std::string msg = slurp(err);
    CHECK(msg.find("64") != std::string::npos);
    CHECK(msg.find("32") != std::string::npos);
  }
  SUBCASE("diverging cells exit 4 but still write the report") {
    const fs::path hot_cfg = t.write_config("hot.json", "target", ", \"lr_test\": 1e9");
    CHECK(run_cli("sweep --config " + hot_cfg.string()) == 4);
    CHECK(slurp(t.dir / "report" / "report.txt").find("Failed runs") != std::string::npos);
  }
  SUBCASE("baseline command reports frozen metrics") {
    CHECK(run_cli("baseline --config " + tgt_cfg.string() + " --out " +
                  (t.dir / "baseline.csv").string()) == 0);
    CHECK(slurp(t.dir / "baseline.csv").find("mae,sbp") != std::string::npos);
  }
  SUBCASE("missing subcommand exits 2") { CHECK(run_cli("") == 2); }
}
