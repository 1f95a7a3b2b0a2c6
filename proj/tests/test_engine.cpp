#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "helpers.hpp"
#include "medlab/engine.hpp"
#include "medlab/error.hpp"
#include "reference.hpp"

using namespace medlab;
using namespace medlab::engine;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorCode::IoError;
}

ModelConfig hand_config(Family family = Family::Causal, NormStyle norm = NormStyle::Pre, bool tied = true) {
  auto c = testutil::small_config(family, 1, 2, 4, 8, 6);
  c.d_ff = 8;
  c.norm_style = norm;
  c.tied_embeddings = tied;
  return c;
}

// Small integers over ten, laid out by a fixed per-tensor pattern.
store::TensorArchive hand_archive(const ModelConfig& c) {
  store::TensorArchive a;
  int salt = 1;
  for (const auto& [name, dims] : expected_tensors(c)) {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    std::vector<float> data(n);
    const bool gamma = name.ends_with(".gamma");
    for (std::uint64_t i = 0; i < n; ++i) {
      const int k = static_cast<int>((i * 7 + static_cast<std::uint64_t>(salt) * 3) % 11) - 5;
      data[i] = gamma ? 1.0f + 0.05f * static_cast<float>(k) : 0.1f * static_cast<float>(k);
    }
    a.add({name, dims, std::move(data)});
    ++salt;
  }
  return a;
}

std::vector<TokenId> random_ids(std::mt19937_64& gen, int vocab, int len) {
  std::uniform_int_distribution<int> tok(0, vocab - 1);
  std::vector<TokenId> ids(static_cast<std::size_t>(len));
  for (auto& t : ids) t = tok(gen);
  return ids;
}

std::vector<int> as_int(const std::vector<TokenId>& ids) { return {ids.begin(), ids.end()}; }

ActivationTrace trace_with_logits(std::vector<double> row, Family family = Family::Causal) {
  ActivationTrace t;
  t.family = family;
  t.logits = Matrix(1, static_cast<Eigen::Index>(row.size()));
  for (std::size_t i = 0; i < row.size(); ++i) t.logits(0, static_cast<Eigen::Index>(i)) = row[i];
  return t;
}

}  // namespace

TEST(Engine, HandModelMatchesLoopOracle) {
  for (auto family : {Family::Causal, Family::Bidirectional}) {
    for (auto norm : {NormStyle::Pre, NormStyle::Post}) {
      for (bool tied : {true, false}) {
        const auto c = hand_config(family, norm, tied);
        const auto archive = hand_archive(c);
        const Transformer model(c, archive);
        const ref::Model oracle(c, archive);
        const std::vector<TokenId> ids = {3, 1, 4, 1, 5};
        const auto trace = model.forward_trace(ids);
        const auto expected = oracle.forward(as_int(ids));
        EXPECT_LT(testutil::max_abs_diff(trace.logits, expected.logits), 1e-12);
        for (std::size_t l = 0; l < trace.layer_outputs.size(); ++l) {
          EXPECT_LT(testutil::max_abs_diff(trace.layer_outputs[l], expected.layers[l]), 1e-12);
        }
      }
    }
  }
}

TEST(Engine, TanhActivationMatchesOracle) {
  auto c = hand_config();
  c.activation = Activation::GeluTanh;
  const auto archive = hand_archive(c);
  const std::vector<TokenId> ids = {7, 0, 2};
  EXPECT_LT(testutil::max_abs_diff(Transformer(c, archive).forward_trace(ids).logits,
                                   ref::Model(c, archive).forward(as_int(ids)).logits),
            1e-12);
}

TEST(Engine, AttentionRowsNormalisedAndCausalMasked) {
  std::mt19937_64 gen(3);
  for (auto family : {Family::Causal, Family::Bidirectional}) {
    const auto c = testutil::small_config(family, 2, 4, 8, 10);
    const Transformer model(c, testutil::random_archive(c, 17));
    const auto trace = model.forward_trace(random_ids(gen, 10, 7));
    for (const auto& layer : trace.attention_probs) {
      for (const auto& p : layer) {
        for (Eigen::Index i = 0; i < p.rows(); ++i) {
          EXPECT_NEAR(p.row(i).sum(), 1.0, 1e-12);
          for (Eigen::Index j = 0; j < p.cols(); ++j) {
            EXPECT_GE(p(i, j), 0.0);
            if (family == Family::Causal && j > i) EXPECT_EQ(p(i, j), 0.0);
          }
        }
      }
    }
    EXPECT_EQ(trace.layer_outputs.size(), 3u);
  }
}

TEST(Engine, SingleTokenAttentionIsOne) {
  const auto c = testutil::small_config(Family::Causal, 1, 2, 4, 5);
  const Transformer model(c, testutil::random_archive(c, 1));
  const auto trace = model.forward_trace(std::vector<TokenId>{2});
  EXPECT_EQ(trace.attention_probs[0][0](0, 0), 1.0);
}

TEST(Engine, NoOpInterventionsAreExact) {
  std::mt19937_64 gen(21);
  const auto c = testutil::small_config(Family::Causal, 2, 2, 8, 12);
  const Transformer model(c, testutil::random_archive(c, 5));
  for (int trial = 0; trial < 50; ++trial) {
    const auto ids = random_ids(gen, 12, 2 + trial % 6);
    const auto base = model.forward_trace(ids);
    const int layer = trial % (c.n_layers + 1);
    const int pos = trial % static_cast<int>(ids.size());
    const int unit = trial % c.d_model;
    InterventionSpec spec;
    spec.actions.push_back(NeuronSet{layer, pos, unit, base.layer_outputs[static_cast<std::size_t>(layer)](pos, unit)});
    const int al = trial % c.n_layers, ah = trial % c.n_heads;
    spec.actions.push_back(AttnReplace{al, ah, base.attention_probs[static_cast<std::size_t>(al)][static_cast<std::size_t>(ah)]});
    const auto again = model.forward_trace(ids, spec);
    EXPECT_EQ((again.logits - base.logits).cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(Engine, NeuronHookMatchesManualSplice) {
  std::mt19937_64 gen(8);
  std::normal_distribution<double> val(0.0, 2.0);
  for (auto norm : {NormStyle::Pre, NormStyle::Post}) {
    auto c = testutil::small_config(Family::Causal, 3, 2, 6, 9);
    c.norm_style = norm;
    const auto archive = testutil::random_archive(c, 99);
    const Transformer model(c, archive);
    const ref::Model oracle(c, archive);
    for (int trial = 0; trial < 30; ++trial) {
      const auto ids = random_ids(gen, 9, 3 + trial % 5);
      const NeuronSet n{trial % (c.n_layers + 1), trial % static_cast<int>(ids.size()), (trial * 5) % c.d_model, val(gen)};
      const auto hooked = model.forward_trace(ids, {{n}});
      const auto spliced = oracle.forward(as_int(ids), {{n.layer, n.position, n.unit, n.value}});
      EXPECT_LT(testutil::max_abs_diff(hooked.logits, spliced.logits), 1e-9);
      EXPECT_EQ(hooked.layer_outputs[static_cast<std::size_t>(n.layer)](n.position, n.unit), n.value);
    }
  }
}

TEST(Engine, AttentionReplacementMatchesOracle) {
  std::mt19937_64 gen(12);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  const auto c = testutil::small_config(Family::Causal, 2, 2, 4, 7);
  const auto archive = testutil::random_archive(c, 4);
  const Transformer model(c, archive);
  const ref::Model oracle(c, archive);
  for (int trial = 0; trial < 20; ++trial) {
    const auto ids = random_ids(gen, 7, 4);
    ref::Mat probs(4, std::vector<double>(4));
    Matrix m(4, 4);
    for (int i = 0; i < 4; ++i) {
      double z = 0.0;
      for (int j = 0; j < 4; ++j) z += (probs[i][j] = u(gen));
      for (int j = 0; j < 4; ++j) m(i, j) = probs[i][j] /= z;
    }
    const int layer = trial % 2, head = (trial / 2) % 2;
    const auto hooked = model.forward_trace(ids, {{AttnReplace{layer, head, m}}});
    const auto expected = oracle.forward(as_int(ids), {}, {{layer, head, probs}});
    EXPECT_LT(testutil::max_abs_diff(hooked.logits, expected.logits), 1e-9);
  }
}

TEST(Engine, VocabularyPermutationEquivariance) {
  auto c = testutil::small_config(Family::Causal, 2, 2, 6, 8);
  c.tied_embeddings = false;
  const auto archive = testutil::random_archive(c, 31);
  std::vector<int> perm(8);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 gen(2);
  std::shuffle(perm.begin(), perm.end(), gen);

  store::TensorArchive permuted;
  for (auto e : archive.entries()) {
    if (e.name == "tok_emb" || e.name == "lm_head.weight") {
      const auto d = e.dims[1];
      std::vector<float> rows(e.data.size());
      for (std::size_t v = 0; v < 8; ++v) {
        std::copy_n(e.data.begin() + static_cast<std::ptrdiff_t>(v * d), d,
                    rows.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(perm[v]) * d));
      }
      e.data = std::move(rows);
    }
    permuted.add(std::move(e));
  }
  const Transformer a(c, archive), b(c, permuted);
  const std::vector<TokenId> ids = {1, 5, 2, 7};
  std::vector<TokenId> pids;
  for (auto t : ids) pids.push_back(perm[static_cast<std::size_t>(t)]);
  const auto pa = next_token_distribution(a.forward_trace(ids));
  const auto pb = next_token_distribution(b.forward_trace(pids));
  for (int v = 0; v < 8; ++v) EXPECT_NEAR(pa[v], pb[perm[static_cast<std::size_t>(v)]], 1e-12);
}

TEST(NextTokenDistribution, HandSoftmax) {
  const auto uniform = next_token_distribution(trace_with_logits({0, 0, 0, 0}));
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(uniform[i], 0.25);
  const auto p = next_token_distribution(trace_with_logits({std::log(2.0), 0, 0}));
  EXPECT_NEAR(p[0], 0.5, 1e-15);
  EXPECT_NEAR(p[1], 0.25, 1e-15);
  EXPECT_NEAR(p[2], 0.25, 1e-15);
  EXPECT_EQ(code_of([] { next_token_distribution(trace_with_logits({0, 0}, Family::Bidirectional)); }),
            ErrorCode::WrongFamily);
}

TEST(NextTokenDistribution, SumsToOneOnRandomModels) {
  std::mt19937_64 gen(4);
  const auto c = testutil::small_config(Family::Causal, 2, 2, 8, 20);
  const Transformer model(c, testutil::random_archive(c, 6, 2.0));
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = next_token_distribution(model.forward_trace(random_ids(gen, 20, 1 + trial % 8)));
    EXPECT_NEAR(p.sum(), 1.0, 1e-6);
    EXPECT_GT(p.minCoeff(), 0.0);
  }
}

TEST(PseudoLogLikelihood, UniformCausalModel) {
  for (int V : {4, 8, 13}) {
    const auto c = testutil::small_config(Family::Causal, 1, 1, 4, V);
    store::TensorArchive zero;
    for (const auto& [name, dims] : expected_tensors(c)) {
      std::uint64_t n = 1;
      for (auto d : dims) n *= d;
      zero.add({name, dims, std::vector<float>(n, 0.0f)});
    }
    const Transformer model(c, zero);
    for (int L : {2, 3, 6}) {
      std::vector<TokenId> ids(static_cast<std::size_t>(L), 1);
      EXPECT_NEAR(pseudo_log_likelihood(ids, model), (L - 1) * std::log(1.0 / V), 1e-12);
    }
  }
}

TEST(PseudoLogLikelihood, ConstantBidirectionalModelClosedForm) {
  // Zero weights except ln_f.beta = e_0 and lm_head row 0 = a * e_0, so every
  // position sees logits (a, 0, ..., 0) whatever the input.
  const int V = 5;
  const double a = 2.0;
  auto c = testutil::small_config(Family::Bidirectional, 1, 1, 4, V);
  c.tied_embeddings = false;
  store::TensorArchive arch;
  for (const auto& [name, dims] : expected_tensors(c)) {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    std::vector<float> data(n, 0.0f);
    if (name == "ln_f.beta") data[0] = 1.0f;
    if (name == "lm_head.weight") data[0] = static_cast<float>(a);
    arch.add({name, dims, std::move(data)});
  }
  const Transformer model(c, arch);
  const double z = std::exp(a) + (V - 1);
  const double lp0 = a - std::log(z), lp_other = -std::log(z);
  const std::vector<TokenId> ids = {0, 3, 0, 2};
  EXPECT_NEAR(pseudo_log_likelihood(ids, model, TokenId{1}), 2 * lp0 + 2 * lp_other, 1e-12);
  EXPECT_EQ(pseudo_log_likelihood(ids, model, TokenId{1}), pseudo_log_likelihood(ids, model, TokenId{1}));
}

TEST(PseudoLogLikelihood, BidirectionalMatchesMaskedOracle) {
  const auto c = testutil::small_config(Family::Bidirectional, 2, 2, 6, 9);
  const auto archive = testutil::random_archive(c, 77);
  const Transformer model(c, archive);
  const ref::Model oracle(c, archive);
  const std::vector<TokenId> ids = {2, 5, 8, 3};
  const int mask = 1;
  double expected = 0.0;
  for (std::size_t t = 0; t < ids.size(); ++t) {
    auto masked = as_int(ids);
    masked[t] = mask;
    expected += ref::log_prob(oracle.forward(masked).logits[t], ids[t]);
  }
  EXPECT_NEAR(pseudo_log_likelihood(ids, model, mask), expected, 1e-10);
}

TEST(PseudoLogLikelihood, Errors) {
  const auto cc = testutil::small_config(Family::Causal, 1, 1, 4, 6);
  const Transformer causal(cc, testutil::random_archive(cc, 1));
  EXPECT_EQ(code_of([&] { pseudo_log_likelihood(std::vector<TokenId>{1}, causal); }), ErrorCode::TooShort);
  const auto bc = testutil::small_config(Family::Bidirectional, 1, 1, 4, 6);
  const Transformer bidir(bc, testutil::random_archive(bc, 1));
  EXPECT_EQ(code_of([&] { pseudo_log_likelihood(std::vector<TokenId>{1, 2}, bidir); }), ErrorCode::NoMaskToken);
}

TEST(Engine, WeightValidation) {
  const auto c = hand_config();
  auto archive = hand_archive(c);
  EXPECT_NO_THROW(WeightStore(archive, c));

  store::TensorArchive missing;
  for (const auto& e : archive.entries()) {
    if (e.name != "ln_f.beta") missing.add(e);
  }
  EXPECT_EQ(code_of([&] { WeightStore(missing, c); }), ErrorCode::WeightMismatch);

  auto extra = archive;
  extra.add({"stray", {1}, {0.0f}});
  EXPECT_EQ(code_of([&] { WeightStore(extra, c); }), ErrorCode::WeightMismatch);

  store::TensorArchive wrong;
  for (auto e : archive.entries()) {
    if (e.name == "pos_emb") e.dims = {static_cast<std::uint64_t>(c.d_model), static_cast<std::uint64_t>(c.max_seq)};
    wrong.add(std::move(e));
  }
  EXPECT_EQ(code_of([&] { WeightStore(wrong, c); }), ErrorCode::WeightMismatch);

  store::TensorArchive nan;
  for (auto e : archive.entries()) {
    if (e.name == "tok_emb") e.data[3] = std::numeric_limits<float>::quiet_NaN();
    nan.add(std::move(e));
  }
  EXPECT_EQ(code_of([&] { WeightStore(nan, c); }), ErrorCode::NumericError);
}

TEST(Engine, BadSites) {
  const auto c = hand_config();
  const Transformer model(c, hand_archive(c));
  EXPECT_EQ(code_of([&] { model.forward_trace(std::vector<TokenId>{8}); }), ErrorCode::BadSite);
  EXPECT_EQ(code_of([&] { model.forward_trace(std::vector<TokenId>(7, 0)); }), ErrorCode::BadSite);
  EXPECT_EQ(code_of([&] { model.forward_trace(std::vector<TokenId>{}); }), ErrorCode::BadSite);
  const std::vector<TokenId> ids = {1, 2};
  EXPECT_EQ(code_of([&] { model.forward_trace(ids, {{NeuronSet{2, 0, 0, 1.0}}}); }), ErrorCode::BadSite);
  EXPECT_EQ(code_of([&] { model.forward_trace(ids, {{NeuronSet{0, 2, 0, 1.0}}}); }), ErrorCode::BadSite);
  EXPECT_EQ(code_of([&] { model.forward_trace(ids, {{NeuronSet{0, 0, 4, 1.0}}}); }), ErrorCode::BadSite);
  EXPECT_EQ(code_of([&] { model.forward_trace(ids, {{AttnReplace{0, 2, Matrix::Identity(2, 2)}}}); }),
            ErrorCode::BadSite);
  Matrix bad = Matrix::Constant(2, 2, 0.4);
  EXPECT_EQ(code_of([&] { model.forward_trace(ids, {{AttnReplace{0, 0, bad}}}); }), ErrorCode::BadSite);
  EXPECT_EQ(code_of([&] { model.forward_trace(ids, {{AttnReplace{0, 0, Matrix::Identity(3, 3)}}}); }),
            ErrorCode::BadSite);
}

TEST(Engine, NonFiniteActivationsReported) {
  // Finite overrides whose layer-norm sum overflows.
  const auto c = hand_config();
  const Transformer model(c, hand_archive(c));
  const double big = std::numeric_limits<double>::max();
  InterventionSpec spec;
  spec.actions.push_back(NeuronSet{0, 1, 0, big});
  spec.actions.push_back(NeuronSet{0, 1, 1, big});
  EXPECT_EQ(code_of([&] { model.forward_trace(std::vector<TokenId>{1, 2}, spec); }), ErrorCode::NumericError);
  spec.actions.pop_back();
  EXPECT_NO_THROW(model.forward_trace(std::vector<TokenId>{1, 2}, spec));
}

TEST(ModelConfig, Validation) {
  nlohmann::json j = {{"family", "causal"}, {"n_layers", 1}, {"n_heads", 2}, {"d_model", 4}, {"d_ff", 8},
                      {"vocab_size", 8},    {"max_seq", 6}};
  EXPECT_NO_THROW(ModelConfig::from_json(j));
  const auto c = ModelConfig::from_json(j);
  EXPECT_EQ(ModelConfig::from_json(c.to_json()).to_json(), c.to_json());
  auto bad = j;
  bad["d_model"] = 5;
  EXPECT_EQ(code_of([&] { ModelConfig::from_json(bad); }), ErrorCode::InvalidConfig);
  bad = j;
  bad["ln_epsilon"] = 0.0;
  EXPECT_EQ(code_of([&] { ModelConfig::from_json(bad); }), ErrorCode::InvalidConfig);
  bad = j;
  bad["family"] = "encoder";
  EXPECT_EQ(code_of([&] { ModelConfig::from_json(bad); }), ErrorCode::InvalidConfig);
  bad = j;
  bad.erase("n_heads");
  EXPECT_EQ(code_of([&] { ModelConfig::from_json(bad); }), ErrorCode::InvalidConfig);
}

TEST(Gelu, ReferenceValues) {
  EXPECT_NEAR(gelu(1.0), 0.8413447460685429, 1e-15);
  EXPECT_NEAR(gelu(-1.0), -0.15865525393145707, 1e-15);
  EXPECT_EQ(gelu(0.0), 0.0);
  EXPECT_NEAR(gelu_tanh(1.0), 0.8411919906082768, 1e-15);
}
