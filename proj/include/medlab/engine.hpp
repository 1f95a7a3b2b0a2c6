#pragma once

// Deterministic transformer forward pass with capture and intervention hooks.
//
// Site indexing:
//   * neuron sites use residual-stream layer indices 0..n_layers, where 0 is
//     the embedding output (token + position) and l >= 1 is the output of
//     block l-1 (weights "layer.{l-1}.*");
//   * attention sites use the 0-based block index, so head (0, 2) is head 2 of
//     the first block.
//
// All arithmetic runs in double precision on weights widened from f32.

#include <Eigen/Dense>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "medlab/tensor_store.hpp"
#include "medlab/text.hpp"

namespace medlab::engine {

using text::TokenId;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

enum class Family { Causal, Bidirectional };
enum class NormStyle { Pre, Post };
// Exact erf GELU, or the tanh approximation used by GPT-2 checkpoints.
enum class Activation { Gelu, GeluTanh };

struct ModelConfig {
  Family family = Family::Causal;
  int n_layers = 1;
  int n_heads = 1;
  int d_model = 1;
  int d_ff = 1;
  int vocab_size = 1;
  int max_seq = 1;
  NormStyle norm_style = NormStyle::Pre;
  double ln_epsilon = 1e-5;
  bool tied_embeddings = true;
  Activation activation = Activation::Gelu;

  int head_dim() const { return d_model / n_heads; }
  // Throws InvalidConfig.
  void validate() const;

  static ModelConfig from_json(const nlohmann::json& j);
  static ModelConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
};

// Every tensor the engine requires for a config, in canonical order, with the
// exact expected shape. Linear weights are [out, in].
std::vector<std::pair<std::string, std::vector<std::uint64_t>>> expected_tensors(const ModelConfig& config);

struct LayerWeights {
  Vector ln1_gamma, ln1_beta;
  Matrix q_w, k_w, v_w, o_w;
  Vector q_b, k_b, v_b, o_b;
  Vector ln2_gamma, ln2_beta;
  Matrix fc_in_w, fc_out_w;
  Vector fc_in_b, fc_out_b;
};

class WeightStore {
 public:
  // Throws WeightMismatch on a missing, extra or misshapen tensor and
  // NumericError on non-finite values.
  WeightStore(const store::TensorArchive& archive, const ModelConfig& config);

  const Matrix& tok_emb() const { return tok_emb_; }
  const Matrix& pos_emb() const { return pos_emb_; }
  const LayerWeights& layer(int i) const { return layers_[static_cast<std::size_t>(i)]; }
  const Vector& ln_f_gamma() const { return ln_f_gamma_; }
  const Vector& ln_f_beta() const { return ln_f_beta_; }
  // tok_emb when embeddings are tied.
  const Matrix& lm_head() const { return lm_head_ ? *lm_head_ : tok_emb_; }

 private:
  Matrix tok_emb_, pos_emb_;
  std::vector<LayerWeights> layers_;
  Vector ln_f_gamma_, ln_f_beta_;
  std::optional<Matrix> lm_head_;
};

// Overrides one scalar of a residual-stream layer output.
struct NeuronSet {
  int layer = 0;
  int position = 0;
  int unit = 0;
  double value = 0.0;
};

// Substitutes a head's full post-softmax probability matrix [seq, seq].
struct AttnReplace {
  int layer = 0;
  int head = 0;
  Matrix probs;
};

using InterventionAction = std::variant<NeuronSet, AttnReplace>;

struct InterventionSpec {
  std::vector<InterventionAction> actions;
  bool empty() const { return actions.empty(); }
};

struct ActivationTrace {
  Family family = Family::Causal;
  std::vector<TokenId> ids;
  // n_layers + 1 entries of [seq, d_model]; index 0 is the embedding output.
  std::vector<Matrix> layer_outputs;
  // [layer][head] -> [seq, seq]
  std::vector<std::vector<Matrix>> attention_probs;
  // Final-norm output feeding the LM head, [seq, d_model].
  Matrix final_hidden;
  // [seq, vocab_size]
  Matrix logits;

  std::size_t seq_len() const { return ids.size(); }
};

class Transformer {
 public:
  Transformer(ModelConfig config, WeightStore weights);
  Transformer(ModelConfig config, const store::TensorArchive& archive);
  static Transformer load(const std::filesystem::path& archive, const std::filesystem::path& config);

  const ModelConfig& config() const { return config_; }
  const WeightStore& weights() const { return weights_; }

  // Errors: BadSite (ids or intervention out of bounds), NumericError.
  ActivationTrace forward_trace(std::span<const TokenId> ids, const InterventionSpec& spec = {}) const;

 private:
  void check_ids(std::span<const TokenId> ids) const;
  void check_spec(const InterventionSpec& spec, std::size_t seq) const;

  ModelConfig config_;
  WeightStore weights_;
};

// Softmax of the last-position logits. Throws WrongFamily for bidirectional traces.
Vector next_token_distribution(const ActivationTrace& trace);

// Numerically stable log-softmax of one logit row.
Vector log_softmax(const Eigen::Ref<const Vector>& logits);

// Causal: sum_{t>=1} log p(id_t | id_<t). Bidirectional: sum_t log p(id_t | ids
// with position t masked), one forward pass per position.
double pseudo_log_likelihood(std::span<const TokenId> ids, const Transformer& model,
                             std::optional<TokenId> mask_id = std::nullopt);

double gelu(double x);
double gelu_tanh(double x);

}  // namespace medlab::engine
