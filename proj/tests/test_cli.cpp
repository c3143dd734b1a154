#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "merlot/harness.hpp"

#ifndef MERLOT_CLI_PATH
#error "MERLOT_CLI_PATH must be defined"
#endif

namespace {

const std::string kCli = MERLOT_CLI_PATH;

int run(const std::string& args, const std::string& redirect = "> /dev/null 2>&1") {
  const std::string cmd = kCli + " " + args + " " + redirect;
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

}  // namespace

TEST_CASE("help exits zero, usage errors exit one") {
  CHECK(run("--help") == 0);
  CHECK(run("gen-tasks --help") == 0);
  CHECK(run("frobnicate") == 1);
  CHECK(run("gen-tasks --nope x") == 1);
  CHECK(run("") == 1);               // missing subcommand
  CHECK(run("plot --csv only") == 1);  // missing required --out
}

TEST_CASE("runtime failures exit two") {
  CHECK(run("eval --checkpoint /no/such/file.ckpt --out out.csv") == 2);
  CHECK(run("plot --csv /no/such.csv --out out.svg") == 2);
  CHECK(run("train --config /no/such.cfg --out ck.bin") == 2);
}

TEST_CASE("gen-tasks is byte-for-byte idempotent") {
  CHECK(run("gen-tasks --split interpolation --protocol range_shift --n 20 --seed 9 "
            "--out cli_tasks_a.txt") == 0);
  CHECK(run("gen-tasks --split interpolation --protocol range_shift --n 20 --seed 9 "
            "--out cli_tasks_b.txt") == 0);
  CHECK(slurp("cli_tasks_a.txt") == slurp("cli_tasks_b.txt"));

  // The file parses back through the library.
  std::ifstream in("cli_tasks_a.txt");
  const auto tasks = merlot::task1d::read_tasks(in);
  CHECK(tasks.size() == 20);
  std::remove("cli_tasks_a.txt");
  std::remove("cli_tasks_b.txt");
}

TEST_CASE("train, eval, sweep, plot pipeline") {
  write_file("cli_train.cfg",
             "model = merlot\n"
             "d_r = 8\n"
             "heads = 2\n"
             "T = 2\n"
             "batch_size = 2\n"
             "steps = 3\n"
             "seed = 4\n"
             "task = oned\n"
             "split = train\n"
             "protocol = range_shift\n");
  CHECK(run("train --config cli_train.cfg --out cli_ck.bin --workers 2") == 0);

  // Checkpoint loads and carries the config echo.
  const auto ckpt = merlot::harness::load_checkpoint("cli_ck.bin");
  CHECK(ckpt.config_echo.find("model = merlot") != std::string::npos);

  CHECK(run("eval --checkpoint cli_ck.bin --split interpolation --protocol range_shift "
            "--n-tasks 5 --seed 3 --out cli_eval.csv --dump-predictions cli_overlay.csv") == 0);
  {
    std::ifstream in("cli_eval.csv");
    const auto report = merlot::harness::read_eval_csv(in);
    CHECK(report.rows.size() == 5);
  }

  CHECK(run("sweep-context --checkpoint cli_ck.bin --sizes 5,10 --n-tasks 3 --seed 2 "
            "--out cli_sweep.csv") == 0);
  {
    std::ifstream in("cli_sweep.csv");
    const auto report = merlot::harness::read_eval_csv(in);
    CHECK(report.rows.size() == 2);
  }

  // plot handles both csv schemas and leaves its input untouched.
  const std::string sweep_before = slurp("cli_sweep.csv");
  CHECK(run("plot --csv cli_sweep.csv --out cli_curve.svg") == 0);
  CHECK(slurp("cli_sweep.csv") == sweep_before);
  CHECK(slurp("cli_curve.svg").find("<svg") != std::string::npos);

  const std::string overlay_before = slurp("cli_overlay.csv");
  CHECK(run("plot --csv cli_overlay.csv --out cli_overlay.svg") == 0);
  CHECK(slurp("cli_overlay.csv") == overlay_before);
  CHECK(slurp("cli_overlay.svg").find("<svg") != std::string::npos);

  // Re-running eval with identical flags reproduces the csv byte-for-byte.
  CHECK(run("eval --checkpoint cli_ck.bin --split interpolation --protocol range_shift "
            "--n-tasks 5 --seed 3 --out cli_eval2.csv") == 0);
  CHECK(slurp("cli_eval.csv") == slurp("cli_eval2.csv"));

  for (const char* f : {"cli_train.cfg", "cli_ck.bin", "cli_eval.csv", "cli_eval2.csv",
                        "cli_sweep.csv", "cli_curve.svg", "cli_overlay.csv", "cli_overlay.svg"})
    std::remove(f);
}

TEST_CASE("maze data generation and maze eval pipeline") {
  CHECK(run("gen-maze-data --mazes 2 --episodes 2 --len 60 --seed 11 --out cli_maze.bin") == 0);
  const auto data = merlot::maze::load_dataset("cli_maze.bin");
  CHECK(data.mazes.size() == 2);

  write_file("cli_maze.cfg",
             "model = merlot\n"
             "d_r = 8\n"
             "heads = 2\n"
             "T = 1\n"
             "batch_size = 2\n"
             "steps = 2\n"
             "seed = 4\n"
             "task = maze\n"
             "task_file = cli_maze.bin\n");
  CHECK(run("train --config cli_maze.cfg --out cli_maze_ck.bin --workers 2") == 0);
  CHECK(run("eval --checkpoint cli_maze_ck.bin --protocol rollout --n-tasks 2 --seed 7 "
            "--task-file cli_maze.bin --out cli_maze_eval.csv") == 0);
  {
    std::ifstream in("cli_maze_eval.csv");
    const auto report = merlot::harness::read_eval_csv(in);
    REQUIRE(report.rows.size() == 1);
    CHECK(report.rows[0].protocol == "rollout");
    CHECK(report.rows[0].rmse >= 0.0);
  }
  CHECK(run("eval --checkpoint cli_maze_ck.bin --protocol walls --n-tasks 2 --seed 7 "
            "--task-file cli_maze.bin --out cli_maze_walls.csv") == 0);
  for (const char* f : {"cli_maze.bin", "cli_maze.cfg", "cli_maze_ck.bin", "cli_maze_eval.csv",
                        "cli_maze_walls.csv"})
    std::remove(f);
}
