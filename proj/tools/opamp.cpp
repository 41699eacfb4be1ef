// opamp: experiment runner for projection AMP on the spiked model.
//
//   opamp run      --config cfg.json
//   opamp se       --config cfg.json
//   opamp figure   --config cfg.json --axis iterations|multiplications
//   opamp validate --suite traces|inverse|gaussianity|appendixF|derivatives
//
// CSV goes to the config's output_path (stdout when empty or overridden by
// --output -). OPAMP_WORKERS sets the number of worker threads.

#include <fstream>
#include <functional>
#include <optional>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "opamp/experiment.hpp"
#include "opamp/validation.hpp"

namespace {

int emit(const std::string &path, const std::function<void(std::ostream &)> &write) {
  if (path.empty() || path == "-") {
    write(std::cout);
    return std::cout ? 0 : 1;
  }
  std::ofstream out(path);
  if (!out) {
    std::cerr << "opamp: cannot open '" << path << "' for writing\n";
    return 1;
  }
  write(out);
  out.close();
  if (!out) {
    std::cerr << "opamp: failed writing '" << path << "'\n";
    return 1;
  }
  return 0;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Projection AMP experiments"};
  app.require_subcommand(1);

  std::string config_path, axis = "iterations", suite;
  std::optional<std::string> output_override;

  auto *run = app.add_subcommand("run", "Monte Carlo trials and SE predictions");
  run->add_option("--config", config_path, "JSON experiment config")->required()->check(CLI::ExistingFile);
  run->add_option("--output", output_override, "CSV path; '-' for stdout");

  auto *se = app.add_subcommand("se", "SE trajectories only");
  se->add_option("--config", config_path, "JSON experiment config")->required()->check(CLI::ExistingFile);
  se->add_option("--output", output_override, "CSV path; '-' for stdout");

  auto *figure = app.add_subcommand("figure", "Run data keyed for plotting");
  figure->add_option("--config", config_path, "JSON experiment config")->required()->check(CLI::ExistingFile);
  figure->add_option("--axis", axis, "x axis")->check(CLI::IsMember({"iterations", "multiplications"}));
  figure->add_option("--output", output_override, "CSV path; '-' for stdout");

  auto *validate = app.add_subcommand("validate", "Property suites; JSON report");
  validate->add_option("--suite", suite, "suite name")->required()->check(CLI::IsMember(opamp::suite_names()));

  CLI11_PARSE(app, argc, argv);

  try {
    if (validate->parsed()) {
      const auto report = opamp::run_suite(suite);
      std::cout << nlohmann::json(report).dump(2) << '\n';
      return report.passed() ? 0 : 1;
    }
    const auto config = opamp::load_config(config_path);
    const std::string path = output_override.value_or(config.output_path);
    if (se->parsed()) {
      const auto rows = opamp::se_table(config);
      return emit(path, [&](std::ostream &out) { opamp::write_se_csv(out, rows); });
    }
    const auto rows = opamp::run_experiment(config);
    if (figure->parsed() && axis == "multiplications")
      return emit(path, [&](std::ostream &out) { opamp::write_multiplications_csv(out, rows); });
    return emit(path, [&](std::ostream &out) { opamp::write_run_csv(out, rows); });
  } catch (const opamp::InvalidParameter &e) {
    std::cerr << "opamp: invalid config: " << e.what() << '\n';
    return 2;
  } catch (const std::exception &e) {
    std::cerr << "opamp: " << e.what() << '\n';
    return 1;
  }
}
