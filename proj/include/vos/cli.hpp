#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "vos/infer.hpp"
#include "vos/metrics.hpp"

namespace vos {

/// Entry point of the `mose-vos` binary. Exit codes: 0 success, 1 internal error,
/// 2 empty or invalid input.
int run_cli(int argc, char** argv);
int run_cli(const std::vector<std::string>& args);  // args exclude the program name

/// Runs inference over every video of a dataset and scores it against the dataset's
/// own annotations. Masks are written under `config.output_root` when it is set.
MetricReport infer_and_score(const DatasetIndex& index, const VosNetwork& net, const InferConfig& config);

/// Segments every video of `index` and writes `<out>/<video>/<frame>.png`.
void infer_dataset(const DatasetIndex& index, const VosNetwork& net, const InferConfig& config);

struct AblationRow {
  std::string name;
  double j = 0;
  double f = 0;
  double j_and_f = 0;
};

/// Three rows: Baseline, Baseline+DA, Baseline+DA+TTA+MS.
std::string format_ablation_table(const std::vector<AblationRow>& rows);

}  // namespace vos
