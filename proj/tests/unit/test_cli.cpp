#include "fixtures.hpp"
#include "ugcem/cli.hpp"
#include "ugcem/data.hpp"
#include "ugcem/ensemble.hpp"
#include "ugcem/harness.hpp"

#include <doctest.h>

#include <fstream>
#include <sstream>

using namespace ugcem;
namespace fs = std::filesystem;

namespace {

int call(std::vector<std::string> args) {
  args.insert(args.begin(), "ugcem");
  return cli::run(std::span<const std::string>(args));
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::vector<std::string> small_profile(const fs::path& out) {
  return {"--out",        out.string(), "--samples",  "1500", "--hidden",   "8,8",  "--epochs",
          "50",           "--population", "16",      "--particles", "4",    "--horizon", "4",
          "--iterations", "2",          "--seeds",    "0,1",  "--episodes", "1",    "--max-steps",
          "8",            "--heatmap-res", "3",       "--heatmap-actions", "20", "--log-level", "warn"};
}

std::vector<std::string> with(std::vector<std::string> base, std::initializer_list<std::string> extra) {
  base.insert(base.begin(), extra.begin(), extra.end());
  return base;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("collect, train, eval, sweep, heatmap and trace end to end") {
  testing::TempDir dir("cli_e2e");
  const auto out = dir / "run";
  const auto profile = small_profile(out);

  REQUIRE(call(with(profile, {"collect"})) == cli::kSuccess);
  const auto dataset = lines_of(out / "dataset.txt");
  REQUIRE(!dataset.empty());
  CHECK(dataset[0] == "#ugcem-v1 env=cartpole obs_dim=4 act_dim=1");
  const std::string first_bytes = slurp(out / "dataset.txt");
  REQUIRE(call(with(profile, {"collect"})) == cli::kSuccess);
  CHECK(slurp(out / "dataset.txt") == first_bytes);
  const TransitionBuffer kept = load(out / "dataset.txt");
  for (const auto& t : kept) {
    REQUIRE(!in_forbidden_region(t.obs, RegionSpec::defaults(EnvId::cartpole)));
  }

  REQUIRE(call(with(profile, {"train"})) == cli::kSuccess);
  const auto loss = lines_of(out / "loss_history.csv");
  REQUIRE(loss.size() == 1 + 4 * 50);
  CHECK(loss[0] == "member,epoch,nll");
  CHECK(loss[1].rfind("0,1,", 0) == 0);
  CHECK(loss.back().rfind("3,50,", 0) == 0);

  const Ensemble model = load_ensemble(out / "model.txt");
  EnsembleConfig ec;
  ec.hidden = {8, 8};
  const Ensemble direct = train_ensemble(kept, ec, 0).ensemble;
  Eigen::MatrixXd probe = Eigen::MatrixXd::Random(5, 7);
  const auto a = forward(model.members[1], model.norm.apply_columns(probe));
  const auto b = forward(direct.members[1], direct.norm.apply_columns(probe));
  CHECK(a.mean == b.mean);
  CHECK(a.logvar == b.logvar);

  REQUIRE(call(with(profile, {"eval", "--beta", "0"})) == cli::kSuccess);
  const auto eval_rows = lines_of(out / "results.csv");
  REQUIRE(eval_rows.size() == 3);
  {
    auto c = CemConfig::defaults(EnvId::cartpole);
    c.population = 16;
    c.particles = 4;
    c.horizon = 4;
    c.iterations = 2;
    EpisodeOptions eo;
    eo.max_steps = 8;
    const auto ep = run_episode(EnvId::cartpole, model, c, RegionSpec::defaults(EnvId::cartpole), episode_seed(1, 0), eo);
    CHECK(eval_rows[2] == "cartpole,0,1,0," + format_real(ep.ret) + "," + std::to_string(ep.cost));
  }

  REQUIRE(call(with(profile, {"sweep", "--workers", "3"})) == cli::kSuccess);
  CHECK(lines_of(out / "results.csv").size() == 1 + 5 * 2);
  CHECK(lines_of(out / "aggregate.csv").size() == 1 + 5);

  // The echoed config reproduces the run exactly.
  const std::string results = slurp(out / "results.csv");
  const auto echo = dir / "echo.toml";
  fs::copy_file(out / "run_config.toml", echo);
  REQUIRE(call({"--config", echo.string(), "sweep"}) == cli::kSuccess);
  CHECK(slurp(out / "results.csv") == results);

  REQUIRE(call(with(profile, {"heatmap"})) == cli::kSuccess);
  const auto heat = lines_of(out / "heatmap.csv");
  CHECK(heat.size() == 1 + 9);
  CHECK(heat[0] == "dim1,dim2,omega");

  REQUIRE(call(with(profile, {"trace"})) == cli::kSuccess);
  CHECK(lines_of(out / "trace_scores.csv").size() == 1 + 2 * 16);
  CHECK(fs::exists(out / "trace_states.csv"));
}

TEST_CASE("collect without filtering keeps every transition") {
  testing::TempDir dir("cli_nofilter");
  const auto out = dir / "run";
  REQUIRE(call(with(small_profile(out), {"collect", "--no-filter"})) == cli::kSuccess);
  CHECK(load(out / "dataset.txt").size() == 1500);
}

TEST_CASE("pendulum preset uses the wedge region") {
  testing::TempDir dir("cli_pendulum");
  const auto out = dir / "run";
  REQUIRE(call(with(small_profile(out), {"collect", "--env", "pendulum"})) == cli::kSuccess);
  const TransitionBuffer d = load(out / "dataset.txt");
  CHECK(d.env() == EnvId::pendulum);
  CHECK(d.size() < 1500);
  for (const auto& t : d) {
    const double th = std::atan2(t.obs[1], t.obs[0]);
    REQUIRE(!(th > -0.75 * std::numbers::pi && th < -0.25 * std::numbers::pi));
  }
  const std::string echo = slurp(out / "run_config.toml");
  CHECK(echo.find("env = \"pendulum\"") != std::string::npos);
  CHECK(echo.find("max-steps = 8") != std::string::npos);
}

TEST_CASE("the shipped default config parses and matches the built-in defaults") {
  testing::TempDir dir("cli_default_config");
  const auto a = dir / "a";
  const auto b = dir / "b";
  const fs::path config = fs::path(UGCEM_SOURCE_DIR) / "configs" / "default.toml";
  REQUIRE(call({"--config", config.string(), "collect", "--out", a.string(), "--samples", "300", "--log-level", "warn"}) ==
          cli::kSuccess);
  REQUIRE(call({"collect", "--out", b.string(), "--samples", "300", "--log-level", "warn"}) == cli::kSuccess);
  auto body = [](std::string s) { return s.substr(s.find("workers")); };
  std::string ea = slurp(a / "run_config.toml"), eb = slurp(b / "run_config.toml");
  // Identical apart from the output paths.
  auto strip = [](std::string s, const std::string& path) {
    for (auto pos = s.find(path); pos != std::string::npos; pos = s.find(path)) s.erase(pos, path.size());
    return s;
  };
  CHECK(strip(body(ea), a.string()) == strip(body(eb), b.string()));
  CHECK(slurp(a / "dataset.txt") == slurp(b / "dataset.txt"));
}

TEST_CASE("exit codes") {
  testing::TempDir dir("cli_codes");
  const auto out = dir / "run";
  CHECK(call({"--help"}) == cli::kSuccess);
  CHECK(call({}) == cli::kConfigError);
  CHECK(call({"fly"}) == cli::kConfigError);
  CHECK(call({"collect", "--env", "mountaincar", "--out", out.string()}) == cli::kConfigError);
  CHECK(call({"collect", "--bogus-flag", "--out", out.string()}) == cli::kConfigError);
  CHECK(call({"sweep", "--beta", "-1", "--out", out.string()}) == cli::kConfigError);
  CHECK(call({"train", "--out", out.string(), "--log-level", "off"}) == cli::kMissingInput);
  CHECK(call({"sweep", "--out", out.string(), "--log-level", "off"}) == cli::kMissingInput);
  CHECK(call({"--config", (dir / "absent.toml").string(), "collect"}) == cli::kConfigError);

  fs::create_directories(out);
  {
    std::ofstream bad(out / "dataset.txt");
    bad << "not a dataset\n";
  }
  CHECK(call({"train", "--out", out.string(), "--log-level", "off"}) == cli::kMissingInput);

  const auto typo = dir / "typo.toml";
  {
    std::ofstream f(typo);
    f << "env = \"cartpole\"\nhorizn = 5\n";
  }
  CHECK(call({"--config", typo.string(), "collect", "--out", out.string()}) == cli::kConfigError);
}

}
