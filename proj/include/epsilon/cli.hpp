#pragma once

#include <cstddef>
#include <iostream>
#include <string>
#include <vector>

#include "epsilon/datagen.hpp"
#include "epsilon/model.hpp"
#include "epsilon/objective.hpp"
#include "epsilon/trainer.hpp"

namespace epsilon::cli {

// Merged view of every tunable the commands accept, populated from a
// `key = value` config file and then overridden by command-line flags.
//
// The namespace is flat. Keys that describe both the model and the synthetic
// generator (d, n, d_w) set both structs, as does `seed` for the generator and
// the optimizer; substream derivation keeps the consumers independent.
struct RunConfig {
  ModelConfig model;
  OptimConfig optim;
  LossConfig loss;
  SynthConfig synth;
  std::string data;                      // dataset prefix
  std::string out;                       // command output path
  std::vector<std::size_t> eval_ks{3, 5};

  // Applies one key/value pair; throws std::invalid_argument for unknown keys
  // or unparseable values. `where` prefixes error messages (e.g. "line 3").
  void apply(const std::string& key, const std::string& value, const std::string& where = "");
};

// All recognized config keys, for flag registration and docs.
const std::vector<std::string>& config_keys();

// Parses config text: `key = value` lines, `#` comments, blank lines ignored.
RunConfig parse_config_text(const std::string& text);
RunConfig load_config(const std::string& path);

// Runs one command. argv[0] is the program name; exit status follows the
// contract 0 = success, 1 = validation error, 2 = runtime failure.
int run(int argc, const char* const* argv, std::ostream& out = std::cout,
        std::ostream& err = std::cerr);

// Convenience for tests: args without the program name.
int run(const std::vector<std::string>& args, std::ostream& out = std::cout,
        std::ostream& err = std::cerr);

}  // namespace epsilon::cli
