#pragma once

// Declarative experiment runs: one JSON config in, CSV/JSON reports and a
// digest manifest out.

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "medlab/bias_metrics.hpp"
#include "medlab/cda.hpp"
#include "medlab/mediation.hpp"
#include "medlab/text.hpp"

namespace medlab::experiment {

namespace fs = std::filesystem;

enum class Kind { NeuronMediation, AttentionMediation, Crows, Seat, Cda };

Kind parse_kind(std::string_view name);
std::string_view to_string(Kind k);

struct TokenizerSpec {
  std::string type;  // "vocab" or "bpe"
  fs::path vocab;
  fs::path merges;  // bpe only
};

struct ModelSpec {
  fs::path archive;
  fs::path config;
  TokenizerSpec tokenizer;
};

struct DataSpec {
  fs::path professions;
  fs::path templates;
  fs::path winobias;
  fs::path crows;
  std::vector<fs::path> seat;
  fs::path corpus;
  fs::path lexicon;
};

struct Params {
  double top_fraction = 0.025;
  std::size_t top_heads = 3;
  std::optional<metrics::Pooling> pooling;  // unset = family default
  std::optional<metrics::PermutationMode> permutation;
  cda::Mode cda_mode = cda::Mode::TwoSided;
  mediation::GenderWords gender_words;
  mediation::Pronouns pronouns;
};

// One input file named by its config field, e.g. "data.templates".
struct InputRef {
  std::string field;
  std::string as_written;  // path string exactly as it appears in the config
  fs::path resolved;
};

struct ExperimentConfig {
  Kind kind = Kind::NeuronMediation;
  std::optional<ModelSpec> model;
  DataSpec data;
  Params params;
  fs::path output_dir;
  std::vector<InputRef> inputs;

  // Relative paths resolve against base_dir. Unknown keys, missing
  // kind-specific fields, bad parameter values and missing files all throw
  // ConfigError naming the field.
  static ExperimentConfig from_json(const nlohmann::json& j, const fs::path& base_dir);
  static ExperimentConfig load(const fs::path& path);

  nlohmann::ordered_json parameters_json() const;
};

std::unique_ptr<text::Tokenizer> load_tokenizer(const TokenizerSpec& spec);

struct FileDigest {
  std::string name;
  std::string sha256;
  std::uintmax_t bytes = 0;
};

std::string sha256_hex(const fs::path& path);

struct RunManifest {
  Kind kind = Kind::NeuronMediation;
  nlohmann::ordered_json parameters;
  std::vector<FileDigest> inputs;   // name = config field
  std::vector<FileDigest> outputs;  // name = file name inside the output directory
  double wall_time_seconds = 0.0;

  nlohmann::ordered_json to_json() const;
};

inline constexpr const char* kManifestName = "manifest.json";

// Runs the configured pipeline, writes its reports and manifest.json into
// output_dir, and returns the manifest.
RunManifest run_experiment(const ExperimentConfig& config);

enum class PlotSchema { LayerProfile, AttentionHeatmap, TotalEffectTable };

PlotSchema parse_schema(std::string_view name);

using PlotSource = std::variant<mediation::EffectReport, metrics::SeatResult, std::vector<mediation::AttentionRow>,
                                std::vector<mediation::LayerBucket>>;

// CSV text for a plot schema:
//   layer-profile      layer,mean_indirect_effect,count       (from layer buckets)
//   attention-heatmap  head_label,token,weight                (from attention rows)
//   total-effect-table group,mean_total_effect,count          (from an effect report)
// Throws SchemaError when the source does not fit the schema.
std::string emit_plot_data(const PlotSource& source, PlotSchema schema);

}  // namespace medlab::experiment
