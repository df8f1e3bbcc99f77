#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "cssc/config.hpp"

namespace cssc {

// Architecture presets named after the ablation table rows.
struct AblationPreset {
  std::string slug;
  std::string display;
  AblationFlags flags;
};
const std::vector<AblationPreset>& ablation_presets();
const AblationPreset& find_preset(const std::string& slug);
void apply_preset(Config& c, const AblationPreset& p);

struct RunContext {
  std::string command;
  Config config;
  std::filesystem::path config_path;  // empty when running on defaults
  std::filesystem::path output_dir;
  std::ostream* out = nullptr;  // progress messages; null for quiet
};

// Output root: $CSSC_OUTPUT_ROOT or "runs", then the config file stem.
std::filesystem::path default_output_dir(const std::filesystem::path& config_path);

// Writes effective_config_<command>.cfg and provenance_<command>.json (git blob ids of the
// effective config and of every input file) into the output directory.
void write_provenance(const RunContext& ctx, const std::map<std::string, std::filesystem::path>& inputs);

struct PipelineResult {
  std::vector<EpochSummary> epochs;
  std::vector<EvalReport> reports;
  std::filesystem::path checkpoint;
};

// Builds the configured model, trains it on the manifest and evaluates
// every configured setting. Writes training artifacts to out_dir/train and
// metrics to out_dir/eval.
PipelineResult train_and_evaluate(const Config& c, const Manifest& manifest, const std::filesystem::path& out_dir,
                                  std::ostream* progress = nullptr);

// Writes metrics_<setting>.json, metrics.json and ranks_<setting>.tsv.
void write_eval_outputs(const std::filesystem::path& dir, const std::vector<EvalReport>& reports,
                        const EmbeddingTable& query, const EmbeddingTable& gallery);
std::string metrics_array_json(const std::vector<EvalReport>& reports);

int run_synth(const RunContext& ctx);
int run_train(const RunContext& ctx);
int run_eval(const RunContext& ctx);
int run_extract(const RunContext& ctx);
int run_gradcheck(const RunContext& ctx);
int run_ablate(const RunContext& ctx);
int run_command(const RunContext& ctx);

}  // namespace cssc
