#pragma once

#include <cstdint>
#include <string>

#include "ottabp/adapt.hpp"
#include "ottabp/eval.hpp"
#include "ottabp/model.hpp"
#include "ottabp/signal.hpp"

namespace ottabp {

// Single static JSON config file; commands read the sections they need.
// Flag overrides (--seed, --out, --subjects, --jobs) are applied by the CLI.
struct RunConfig {
  std::uint64_t seed = 0;
  ModelGeometry geometry;
  SynthConfig synth;
  Domain synth_domain = Domain::Source;
  int synth_subjects = 2;
  PretrainConfig pretrain;
  AdaptConfig adapt;
  SweepGrid sweep_grid;

  struct Paths {
    std::string data;
    std::string init_data;        // optional second CSV holding initial labeled samples
    std::string checkpoint;
    std::string report_dir;
    std::string predictions_dir;  // optional; per-run JSONL prediction logs
  } paths;

  std::string config_hash;  // FNV-1a of the canonical parsed document
};

RunConfig load_run_config(const std::string& path);

}  // namespace ottabp
