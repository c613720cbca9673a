#include <CLI11.hpp>
#include <iostream>
#include <memory>

#include "optlens/config.hpp"
#include "optlens/error.hpp"
#include "optlens/runner.hpp"

namespace {

using optlens::harness::RunConfig;

struct SubState {
  std::string config_path;
  optlens::harness::KV cli;
  int (*run)(const RunConfig&) = nullptr;
};

// Every config key doubles as a flag; flag values overwrite file values.
void wire(CLI::App* sub, const std::shared_ptr<SubState>& st, int* rc) {
  sub->add_option("--config", st->config_path, "flat key=value config file");
  for (const auto& [key, desc] : optlens::harness::config_keys()) {
    std::string k = key;
    sub->add_option_function<std::string>(
        "--" + k, [st, k](const std::string& v) { st->cli[k] = v; }, desc);
  }
  sub->callback([st, rc]() {
    optlens::harness::KV kv;
    if (!st->config_path.empty()) kv = optlens::harness::parse_ini(st->config_path);
    for (const auto& [k, v] : st->cli) kv[k] = v;
    *rc = st->run(optlens::harness::config_from_kv(kv));
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"optlens: instrumented trajectories for hand-designed and learned optimizers"};
  app.require_subcommand(1);
  int rc = 0;

  struct Cmd {
    const char* name;
    const char* help;
    int (*run)(const RunConfig&);
  };
  const Cmd cmds[] = {
      {"meta-train", "train the learned optimizer, write a checkpoint + meta-loss log",
       optlens::harness::cmd_meta_train},
      {"meta-test", "run instrumented trajectories for one optimizer across seeds",
       optlens::harness::cmd_meta_test},
      {"blend-sweep", "trajectories for the sgd/lion interpolation across lambdas",
       optlens::harness::cmd_blend_sweep},
      {"histograms", "update-magnitude histograms at chosen iterations",
       optlens::harness::cmd_histograms},
      {"analyze", "recompute tail/covariance statistics from dumped noise",
       optlens::harness::cmd_analyze},
  };
  for (const auto& c : cmds) {
    auto st = std::make_shared<SubState>();
    st->run = c.run;
    wire(app.add_subcommand(c.name, c.help), st, &rc);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const optlens::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return rc;
}
