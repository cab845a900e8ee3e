// Serves the toy trainer over the file-based protocol:
//   cotrain_toy_server [--temperature T] <session_dir>

#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "cotrain/protocol.hpp"

int main(int argc, char** argv) {
  CLI::App app{"toy trainer over the cotrain session protocol"};
  std::string session_dir;
  double temperature = cotrain::kToyDefaultTemperature;
  app.add_option("--temperature", temperature)->check(CLI::PositiveNumber);
  app.add_option("session_dir", session_dir)->required();
  CLI11_PARSE(app, argc, argv);

  auto cache = std::make_shared<cotrain::ImageCache>();
  auto build = [&](const std::string& session, const cotrain::fs::path& model_dir,
                   int num_classes) -> std::unique_ptr<cotrain::Trainer> {
    spdlog::info("session '{}': {} classes, models in {}", session, num_classes, model_dir.string());
    return std::make_unique<cotrain::ToyTrainer>(session, model_dir, num_classes, cache,
                                                 temperature);
  };
  return cotrain::protocol::serve(session_dir, build);
}
