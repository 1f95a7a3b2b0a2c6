#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "medlab/engine.hpp"
#include "medlab/error.hpp"
#include "medlab/experiment.hpp"

namespace {

using namespace medlab;

int exit_code(const Error& e) { return e.code() == ErrorCode::ConfigError ? 2 : 1; }

int cmd_run(const std::string& config_path, const std::string& output_override) {
  auto cfg = experiment::ExperimentConfig::load(config_path);
  if (!output_override.empty()) cfg.output_dir = output_override;
  const auto manifest = experiment::run_experiment(cfg);
  std::printf("%s: wrote %zu files to %s (%.3f s)\n", std::string(experiment::to_string(cfg.kind)).c_str(),
              manifest.outputs.size() + 1, cfg.output_dir.string().c_str(), manifest.wall_time_seconds);
  return 0;
}

int cmd_validate(const std::string& config_path) {
  const auto cfg = experiment::ExperimentConfig::load(config_path);
  std::printf("%s: config ok (%zu input files)\n", std::string(experiment::to_string(cfg.kind)).c_str(),
              cfg.inputs.size());
  return 0;
}

// Full logit matrices for each prompt, one prompt per input line.
int cmd_logits(const std::string& archive, const std::string& model_config, const std::string& vocab,
               const std::string& merges, const std::string& prompts_path, const std::string& out_path) {
  const auto model = engine::Transformer::load(archive, model_config);
  const auto tokenizer = experiment::load_tokenizer({merges.empty() ? "vocab" : "bpe", vocab, merges});
  std::ifstream in(prompts_path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + prompts_path);

  nlohmann::ordered_json prompts = nlohmann::ordered_json::array();
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto ids = tokenizer->encode(line);
    const auto trace = model.forward_trace(ids);
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (Eigen::Index t = 0; t < trace.logits.rows(); ++t) {
      std::vector<double> row(trace.logits.row(t).begin(), trace.logits.row(t).end());
      rows.push_back(std::move(row));
    }
    prompts.push_back({{"text", line}, {"ids", ids}, {"logits", std::move(rows)}});
  }
  const nlohmann::ordered_json doc = {{"vocab_size", model.config().vocab_size}, {"prompts", std::move(prompts)}};
  if (out_path.empty() || out_path == "-") {
    std::cout << doc.dump() << '\n';
  } else {
    std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
    out << doc.dump() << '\n';
    if (!out) throw Error(ErrorCode::IoError, "write failed: " + out_path);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"medlab: causal mediation and bias-metric experiments on small transformers"};
  app.require_subcommand(1);

  std::string config_path, output_override;
  auto* run = app.add_subcommand("run", "Run the experiment described by a config file");
  run->add_option("--config", config_path, "Experiment config JSON")->required();
  run->add_option("--output", output_override, "Override output_dir from the config");

  auto* validate = app.add_subcommand("validate", "Check a config and its input files without running");
  validate->add_option("--config", config_path, "Experiment config JSON")->required();

  std::string archive, model_config, vocab, merges, prompts, out;
  auto* logits = app.add_subcommand("logits", "Print next-token logits for each prompt as JSON");
  logits->add_option("--archive", archive, "Weight archive (.mlab)")->required();
  logits->add_option("--model-config", model_config, "Model config JSON")->required();
  logits->add_option("--vocab", vocab, "Vocab file, or vocab.json for BPE")->required();
  logits->add_option("--merges", merges, "BPE merges file (selects the BPE tokenizer)");
  logits->add_option("--prompts", prompts, "One prompt per line")->required();
  logits->add_option("--out", out, "Output path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*run) return cmd_run(config_path, output_override);
    if (*validate) return cmd_validate(config_path);
    if (*logits) return cmd_logits(archive, model_config, vocab, merges, prompts, out);
  } catch (const Error& e) {
    std::fprintf(stderr, "medlab: %s\n", e.what());
    return exit_code(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "medlab: %s\n", e.what());
    return 1;
  }
  return 0;
}
