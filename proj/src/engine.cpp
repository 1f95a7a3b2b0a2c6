#include "medlab/engine.hpp"

#include <cmath>
#include <numbers>
#include <fstream>
#include <set>

#include "medlab/error.hpp"
#include "medlab/parallel.hpp"

namespace medlab::engine {

namespace {

constexpr double kRowSumTolerance = 1e-5;

int require_positive(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || !j.at(key).is_number_integer() || j.at(key).get<long long>() <= 0) {
    throw Error(ErrorCode::InvalidConfig, std::string("'") + key + "' must be a positive integer");
  }
  return j.at(key).get<int>();
}

Matrix to_matrix(const store::TensorEntry& e) {
  Matrix m(static_cast<Eigen::Index>(e.dims[0]), static_cast<Eigen::Index>(e.dims[1]));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(e.data[static_cast<std::size_t>(i)]);
  return m;
}

Vector to_vector(const store::TensorEntry& e) {
  Vector v(static_cast<Eigen::Index>(e.dims[0]));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = static_cast<double>(e.data[static_cast<std::size_t>(i)]);
  return v;
}

Matrix layer_norm(const Matrix& x, const Vector& gamma, const Vector& beta, double eps) {
  Matrix out(x.rows(), x.cols());
  const double n = static_cast<double>(x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).sum() / n;
    const double var = (x.row(r).array() - mean).square().sum() / n;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (Eigen::Index c = 0; c < x.cols(); ++c) out(r, c) = (x(r, c) - mean) * inv * gamma[c] + beta[c];
  }
  return out;
}

Matrix linear(const Matrix& x, const Matrix& w, const Vector& b) {
  Matrix out = x * w.transpose();
  out.rowwise() += b.transpose();
  return out;
}

void require_finite(const Matrix& m, const std::string& where) {
  if (!m.allFinite()) throw Error(ErrorCode::NumericError, "non-finite value in " + where);
}

}  // namespace

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double gelu_tanh(double x) {
  const double k = std::sqrt(2.0 / std::numbers::pi);
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

// ---------------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
  if (n_layers <= 0 || n_heads <= 0 || d_model <= 0 || d_ff <= 0 || vocab_size <= 0 || max_seq <= 0) {
    throw Error(ErrorCode::InvalidConfig, "all sizes must be positive");
  }
  if (d_model % n_heads != 0) {
    throw Error(ErrorCode::InvalidConfig, "d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                                              std::to_string(n_heads));
  }
  if (!(ln_epsilon > 0.0) || !std::isfinite(ln_epsilon)) throw Error(ErrorCode::InvalidConfig, "ln_epsilon must be > 0");
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorCode::InvalidConfig, "model config must be a JSON object");
  ModelConfig c;
  const auto family = j.value("family", std::string());
  if (family == "causal") {
    c.family = Family::Causal;
  } else if (family == "bidirectional") {
    c.family = Family::Bidirectional;
  } else {
    throw Error(ErrorCode::InvalidConfig, "'family' must be causal|bidirectional");
  }
  c.n_layers = require_positive(j, "n_layers");
  c.n_heads = require_positive(j, "n_heads");
  c.d_model = require_positive(j, "d_model");
  c.d_ff = require_positive(j, "d_ff");
  c.vocab_size = require_positive(j, "vocab_size");
  c.max_seq = require_positive(j, "max_seq");
  const auto norm = j.value("norm_style", std::string("pre"));
  if (norm == "pre") {
    c.norm_style = NormStyle::Pre;
  } else if (norm == "post") {
    c.norm_style = NormStyle::Post;
  } else {
    throw Error(ErrorCode::InvalidConfig, "'norm_style' must be pre|post");
  }
  if (j.contains("ln_epsilon")) {
    if (!j.at("ln_epsilon").is_number()) throw Error(ErrorCode::InvalidConfig, "'ln_epsilon' must be a number");
    c.ln_epsilon = j.at("ln_epsilon").get<double>();
  }
  if (j.contains("tied_embeddings")) {
    if (!j.at("tied_embeddings").is_boolean()) throw Error(ErrorCode::InvalidConfig, "'tied_embeddings' must be a bool");
    c.tied_embeddings = j.at("tied_embeddings").get<bool>();
  }
  const auto activation = j.value("activation", std::string("gelu"));
  if (activation == "gelu") {
    c.activation = Activation::Gelu;
  } else if (activation == "gelu_tanh") {
    c.activation = Activation::GeluTanh;
  } else {
    throw Error(ErrorCode::InvalidConfig, "'activation' must be gelu|gelu_tanh");
  }
  c.validate();
  return c;
}

ModelConfig ModelConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open model config " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, path.string() + ": " + e.what());
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {
      {"family", family == Family::Causal ? "causal" : "bidirectional"},
      {"n_layers", n_layers},
      {"n_heads", n_heads},
      {"d_model", d_model},
      {"d_ff", d_ff},
      {"vocab_size", vocab_size},
      {"max_seq", max_seq},
      {"norm_style", norm_style == NormStyle::Pre ? "pre" : "post"},
      {"ln_epsilon", ln_epsilon},
      {"tied_embeddings", tied_embeddings},
      {"activation", activation == Activation::Gelu ? "gelu" : "gelu_tanh"},
  };
}

std::vector<std::pair<std::string, std::vector<std::uint64_t>>> expected_tensors(const ModelConfig& c) {
  const auto d = static_cast<std::uint64_t>(c.d_model);
  const auto ff = static_cast<std::uint64_t>(c.d_ff);
  std::vector<std::pair<std::string, std::vector<std::uint64_t>>> out;
  out.push_back({"tok_emb", {static_cast<std::uint64_t>(c.vocab_size), d}});
  out.push_back({"pos_emb", {static_cast<std::uint64_t>(c.max_seq), d}});
  for (int i = 0; i < c.n_layers; ++i) {
    const std::string p = "layer." + std::to_string(i) + ".";
    out.push_back({p + "ln1.gamma", {d}});
    out.push_back({p + "ln1.beta", {d}});
    for (const char* proj : {"q", "k", "v", "o"}) {
      out.push_back({p + "attn." + proj + ".weight", {d, d}});
      out.push_back({p + "attn." + proj + ".bias", {d}});
    }
    out.push_back({p + "ln2.gamma", {d}});
    out.push_back({p + "ln2.beta", {d}});
    out.push_back({p + "mlp.fc_in.weight", {ff, d}});
    out.push_back({p + "mlp.fc_in.bias", {ff}});
    out.push_back({p + "mlp.fc_out.weight", {d, ff}});
    out.push_back({p + "mlp.fc_out.bias", {d}});
  }
  out.push_back({"ln_f.gamma", {d}});
  out.push_back({"ln_f.beta", {d}});
  if (!c.tied_embeddings) out.push_back({"lm_head.weight", {static_cast<std::uint64_t>(c.vocab_size), d}});
  return out;
}

// ---------------------------------------------------------------------------
// WeightStore

WeightStore::WeightStore(const store::TensorArchive& archive, const ModelConfig& config) {
  config.validate();
  const auto expected = expected_tensors(config);
  std::set<std::string> required;
  for (const auto& [name, dims] : expected) {
    required.insert(name);
    const auto* e = archive.find(name);
    if (e == nullptr) throw Error(ErrorCode::WeightMismatch, "missing tensor '" + name + "'");
    if (e->dims != dims) throw Error(ErrorCode::WeightMismatch, "tensor '" + name + "' has the wrong shape");
    for (float f : e->data) {
      if (!std::isfinite(f)) throw Error(ErrorCode::NumericError, "tensor '" + name + "' holds a non-finite value");
    }
  }
  for (const auto& e : archive.entries()) {
    if (!required.contains(e.name)) throw Error(ErrorCode::WeightMismatch, "unexpected tensor '" + e.name + "'");
  }

  auto mat = [&](const std::string& n) { return to_matrix(*archive.find(n)); };
  auto vec = [&](const std::string& n) { return to_vector(*archive.find(n)); };

  tok_emb_ = mat("tok_emb");
  pos_emb_ = mat("pos_emb");
  layers_.resize(static_cast<std::size_t>(config.n_layers));
  for (int i = 0; i < config.n_layers; ++i) {
    const std::string p = "layer." + std::to_string(i) + ".";
    auto& L = layers_[static_cast<std::size_t>(i)];
    L.ln1_gamma = vec(p + "ln1.gamma");
    L.ln1_beta = vec(p + "ln1.beta");
    L.q_w = mat(p + "attn.q.weight");
    L.k_w = mat(p + "attn.k.weight");
    L.v_w = mat(p + "attn.v.weight");
    L.o_w = mat(p + "attn.o.weight");
    L.q_b = vec(p + "attn.q.bias");
    L.k_b = vec(p + "attn.k.bias");
    L.v_b = vec(p + "attn.v.bias");
    L.o_b = vec(p + "attn.o.bias");
    L.ln2_gamma = vec(p + "ln2.gamma");
    L.ln2_beta = vec(p + "ln2.beta");
    L.fc_in_w = mat(p + "mlp.fc_in.weight");
    L.fc_in_b = vec(p + "mlp.fc_in.bias");
    L.fc_out_w = mat(p + "mlp.fc_out.weight");
    L.fc_out_b = vec(p + "mlp.fc_out.bias");
  }
  ln_f_gamma_ = vec("ln_f.gamma");
  ln_f_beta_ = vec("ln_f.beta");
  if (!config.tied_embeddings) lm_head_ = mat("lm_head.weight");
}

// ---------------------------------------------------------------------------
// Transformer

Transformer::Transformer(ModelConfig config, WeightStore weights)
    : config_(std::move(config)), weights_(std::move(weights)) {
  config_.validate();
}

Transformer::Transformer(ModelConfig config, const store::TensorArchive& archive)
    : Transformer(config, WeightStore(archive, config)) {}

Transformer Transformer::load(const std::filesystem::path& archive, const std::filesystem::path& config) {
  auto cfg = ModelConfig::load(config);
  return Transformer(cfg, store::read_archive_file(archive));
}

void Transformer::check_ids(std::span<const TokenId> ids) const {
  if (ids.empty()) throw Error(ErrorCode::BadSite, "empty token sequence");
  if (ids.size() > static_cast<std::size_t>(config_.max_seq)) {
    throw Error(ErrorCode::BadSite, "sequence length " + std::to_string(ids.size()) + " exceeds max_seq " +
                                        std::to_string(config_.max_seq));
  }
  for (auto id : ids) {
    if (id < 0 || id >= config_.vocab_size) throw Error(ErrorCode::BadSite, "token id " + std::to_string(id) + " out of range");
  }
}

void Transformer::check_spec(const InterventionSpec& spec, std::size_t seq) const {
  const auto s = static_cast<Eigen::Index>(seq);
  for (const auto& action : spec.actions) {
    if (const auto* n = std::get_if<NeuronSet>(&action)) {
      if (n->layer < 0 || n->layer > config_.n_layers || n->position < 0 || n->position >= static_cast<int>(seq) ||
          n->unit < 0 || n->unit >= config_.d_model) {
        throw Error(ErrorCode::BadSite, "neuron site (" + std::to_string(n->layer) + ", " + std::to_string(n->position) +
                                            ", " + std::to_string(n->unit) + ") out of range");
      }
      if (!std::isfinite(n->value)) throw Error(ErrorCode::BadSite, "neuron override value is not finite");
    } else {
      const auto& a = std::get<AttnReplace>(action);
      if (a.layer < 0 || a.layer >= config_.n_layers || a.head < 0 || a.head >= config_.n_heads) {
        throw Error(ErrorCode::BadSite, "attention site (" + std::to_string(a.layer) + ", " + std::to_string(a.head) +
                                            ") out of range");
      }
      if (a.probs.rows() != s || a.probs.cols() != s) {
        throw Error(ErrorCode::BadSite, "replacement attention matrix must be [seq, seq]");
      }
      if (!a.probs.allFinite()) throw Error(ErrorCode::BadSite, "replacement attention matrix is not finite");
      for (Eigen::Index r = 0; r < s; ++r) {
        if (std::abs(a.probs.row(r).sum() - 1.0) > kRowSumTolerance) {
          throw Error(ErrorCode::BadSite, "replacement attention row " + std::to_string(r) + " does not sum to 1");
        }
      }
    }
  }
}

ActivationTrace Transformer::forward_trace(std::span<const TokenId> ids, const InterventionSpec& spec) const {
  check_ids(ids);
  const std::size_t seq = ids.size();
  check_spec(spec, seq);

  const auto& W = weights_;
  const auto S = static_cast<Eigen::Index>(seq);
  const int dh = config_.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool causal = config_.family == Family::Causal;

  ActivationTrace trace;
  trace.family = config_.family;
  trace.ids.assign(ids.begin(), ids.end());
  trace.layer_outputs.reserve(static_cast<std::size_t>(config_.n_layers) + 1);
  trace.attention_probs.resize(static_cast<std::size_t>(config_.n_layers));

  auto apply_neurons = [&](Matrix& x, int layer) {
    for (const auto& action : spec.actions) {
      if (const auto* n = std::get_if<NeuronSet>(&action); n != nullptr && n->layer == layer) {
        x(n->position, n->unit) = n->value;
      }
    }
  };
  auto replacement = [&](int layer, int head) -> const Matrix* {
    const Matrix* found = nullptr;
    for (const auto& action : spec.actions) {
      if (const auto* a = std::get_if<AttnReplace>(&action); a != nullptr && a->layer == layer && a->head == head) {
        found = &a->probs;
      }
    }
    return found;
  };

  auto attention = [&](const Matrix& h, int layer) {
    const auto& L = W.layer(layer);
    const Matrix q = linear(h, L.q_w, L.q_b);
    const Matrix k = linear(h, L.k_w, L.k_b);
    const Matrix v = linear(h, L.v_w, L.v_b);
    Matrix context(S, config_.d_model);
    auto& probs_out = trace.attention_probs[static_cast<std::size_t>(layer)];
    probs_out.resize(static_cast<std::size_t>(config_.n_heads));
    for (int hd = 0; hd < config_.n_heads; ++hd) {
      const auto cols = Eigen::seqN(hd * dh, dh);
      Matrix probs;
      if (const Matrix* r = replacement(layer, hd)) {
        probs = *r;
      } else {
        const Matrix scores = (q(Eigen::all, cols) * k(Eigen::all, cols).transpose()) * scale;
        probs = Matrix::Zero(S, S);
        for (Eigen::Index i = 0; i < S; ++i) {
          const Eigen::Index width = causal ? i + 1 : S;
          const double mx = scores.row(i).head(width).maxCoeff();
          double total = 0.0;
          for (Eigen::Index j = 0; j < width; ++j) {
            probs(i, j) = std::exp(scores(i, j) - mx);
            total += probs(i, j);
          }
          probs.row(i).head(width) /= total;
        }
      }
      context(Eigen::all, cols) = probs * v(Eigen::all, cols);
      probs_out[static_cast<std::size_t>(hd)] = std::move(probs);
    }
    return linear(context, L.o_w, L.o_b);
  };
  auto mlp = [&](const Matrix& h, int layer) {
    const auto& L = W.layer(layer);
    Matrix hidden = linear(h, L.fc_in_w, L.fc_in_b);
    if (config_.activation == Activation::Gelu) {
      hidden = hidden.unaryExpr([](double x) { return gelu(x); });
    } else {
      hidden = hidden.unaryExpr([](double x) { return gelu_tanh(x); });
    }
    return linear(hidden, L.fc_out_w, L.fc_out_b);
  };

  Matrix x(S, config_.d_model);
  for (Eigen::Index t = 0; t < S; ++t) {
    x.row(t) = W.tok_emb().row(ids[static_cast<std::size_t>(t)]) + W.pos_emb().row(t);
  }
  apply_neurons(x, 0);
  trace.layer_outputs.push_back(x);

  for (int b = 0; b < config_.n_layers; ++b) {
    const auto& L = W.layer(b);
    if (config_.norm_style == NormStyle::Pre) {
      x += attention(layer_norm(x, L.ln1_gamma, L.ln1_beta, config_.ln_epsilon), b);
      x += mlp(layer_norm(x, L.ln2_gamma, L.ln2_beta, config_.ln_epsilon), b);
    } else {
      x = layer_norm(x + attention(x, b), L.ln1_gamma, L.ln1_beta, config_.ln_epsilon);
      x = layer_norm(x + mlp(x, b), L.ln2_gamma, L.ln2_beta, config_.ln_epsilon);
    }
    apply_neurons(x, b + 1);
    require_finite(x, "layer " + std::to_string(b + 1) + " output");
    trace.layer_outputs.push_back(x);
  }

  trace.final_hidden = layer_norm(x, W.ln_f_gamma(), W.ln_f_beta(), config_.ln_epsilon);
  trace.logits = trace.final_hidden * W.lm_head().transpose();
  require_finite(trace.logits, "logits");
  return trace;
}

// ---------------------------------------------------------------------------
// Scoring

Vector log_softmax(const Eigen::Ref<const Vector>& logits) {
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return (logits.array() - lse).matrix();
}

Vector next_token_distribution(const ActivationTrace& trace) {
  if (trace.family != Family::Causal) {
    throw Error(ErrorCode::WrongFamily, "next-token distribution requires a causal trace");
  }
  const Vector last = trace.logits.row(trace.logits.rows() - 1).transpose();
  const double mx = last.maxCoeff();
  Vector p = (last.array() - mx).exp().matrix();
  return p / p.sum();
}

double pseudo_log_likelihood(std::span<const TokenId> ids, const Transformer& model, std::optional<TokenId> mask_id) {
  if (ids.size() < 2) throw Error(ErrorCode::TooShort, "pseudo-log-likelihood needs at least 2 tokens");
  if (model.config().family == Family::Causal) {
    const auto trace = model.forward_trace(ids);
    double total = 0.0;
    for (std::size_t t = 1; t < ids.size(); ++t) {
      const Vector lp = log_softmax(trace.logits.row(static_cast<Eigen::Index>(t - 1)).transpose());
      total += lp[ids[t]];
    }
    return total;
  }
  if (!mask_id) throw Error(ErrorCode::NoMaskToken, "bidirectional scoring requires a mask token");
  std::vector<double> terms(ids.size());
  parallel_for(ids.size(), [&](std::size_t t) {
    std::vector<TokenId> masked(ids.begin(), ids.end());
    masked[t] = *mask_id;
    const auto trace = model.forward_trace(masked);
    const Vector lp = log_softmax(trace.logits.row(static_cast<Eigen::Index>(t)).transpose());
    terms[t] = lp[ids[t]];
  });
  double total = 0.0;
  for (double v : terms) total += v;
  return total;
}

}  // namespace medlab::engine
