#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "vibiknet/training.hpp"

namespace vibik {

/// Settings read from a `train` config file. Keys mirror the field names of
/// TrainConfig and ModelConfig; "fusion" is an object with the FusionConfig
/// fields {"op", "mcb_dim", "mcb_seed"}. A top-level "seed" seeds both
/// training and model initialisation.
struct TrainingSetup {
  TrainConfig train;
  ModelConfig model;
};

TrainingSetup parse_training_config(std::string_view json_text);

/// Comparison table over several training runs: one row per log with the
/// final train accuracy, final held-out accuracy and mean seconds per epoch.
std::string comparison_table(const std::vector<TrainLog>& logs);

struct TinyCheckSpec {
  Index hidden_size = 4;
  Index embedding_dim = 6;
  Index num_answers = 5;
  Index image_dim = 8;
  Index mcb_dim = 16;
  Index batch = 3;
  double epsilon = 1e-5;
};

/// Gradient check of a seeded tiny model with random weights and inputs.
GradCheckReport tiny_grad_check(FusionOp op, std::uint64_t seed, const TinyCheckSpec& spec = {});

/// Entry point of the `vibiknet` tool. `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace vibik
