// Prints one PASS/FAIL line per acceptance criterion and exits non-zero if any
// criterion fails. Every check runs on the bundled tiny fixtures or on models
// built in memory.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <random>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "mediation_oracle.hpp"
#include "medlab/bias_metrics.hpp"
#include "medlab/cda.hpp"
#include "medlab/engine.hpp"
#include "medlab/mediation.hpp"
#include "reference.hpp"

using namespace medlab;
using engine::Family;
using engine::Matrix;
using mediation::GenderClass;
using mediation::PromptInstance;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------------------
// shared fixtures

struct Tiny {
  engine::ModelConfig config;
  store::TensorArchive archive;
  engine::Transformer model;
  text::VocabTokenizer tokenizer;
  std::vector<std::string> templates;
  std::vector<mediation::Profession> professions;

  mediation::LanguageModel lm() const { return {model, tokenizer}; }
};

Tiny load_tiny(const std::string& family_dir) {
  const auto dir = testutil::fixture_dir();
  auto config = engine::ModelConfig::load(dir / family_dir / "model.json");
  auto archive = store::read_archive_file(dir / family_dir / "weights.mlab");
  return Tiny{config,
              archive,
              engine::Transformer(config, archive),
              text::VocabTokenizer(text::Vocab::load(dir / "vocab.txt")),
              mediation::load_templates(dir / "data" / "templates.txt"),
              mediation::load_professions(dir / "data" / "professions.csv")};
}

std::pair<PromptInstance, PromptInstance> pronoun_pair(const Tiny& t, std::size_t tmpl, std::size_t prof) {
  auto null_p = mediation::make_pronoun_prompt(t.tokenizer, t.templates[tmpl], static_cast<int>(tmpl),
                                               t.professions[prof]);
  auto cf = mediation::substitute_subject(t.tokenizer, null_p,
                                          mediation::GenderWords{}.for_gender(mediation::opposite(t.professions[prof].gender)));
  return {null_p, cf};
}

double max_diff(const Matrix& a, const Matrix& b) { return (a - b).cwiseAbs().maxCoeff(); }

// ---------------------------------------------------------------------------
// criteria

Outcome engine_oracle() {
  auto c = testutil::small_config(Family::Causal, 1, 2, 4, 8, 6);
  c.d_ff = 8;
  store::TensorArchive a;
  int salt = 1;
  for (const auto& [name, dims] : engine::expected_tensors(c)) {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    std::vector<float> data(n);
    const bool gamma = name.ends_with(".gamma");
    for (std::uint64_t i = 0; i < n; ++i) {
      const int k = static_cast<int>((i * 5 + static_cast<std::uint64_t>(salt) * 3) % 9) - 4;
      data[i] = gamma ? 1.0f + 0.1f * static_cast<float>(k) : 0.25f * static_cast<float>(k);
    }
    a.add({name, dims, std::move(data)});
    ++salt;
  }
  const ref::Model oracle(c, a);
  const std::vector<std::vector<text::TokenId>> prompts = {{0}, {1, 2, 3}, {7, 6, 5, 4, 3, 2}, {3, 3, 3, 1}};
  double worst = 0.0;
  const auto start = std::chrono::steady_clock::now();
  const engine::Transformer model(c, a);
  std::vector<Matrix> got;
  for (const auto& ids : prompts) got.push_back(model.forward_trace(ids).logits);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    worst = std::max(worst, testutil::max_abs_diff(got[i], oracle.forward({prompts[i].begin(), prompts[i].end()}).logits));
  }
  return {worst <= 1e-6 && seconds < 1.0, "max |diff| " + fmt("%.3g", worst) + ", " + fmt("%.3f", seconds) + " s"};
}

Outcome intervention_identities(const Tiny& t) {
  std::mt19937_64 gen(101);
  double worst = 0.0;
  int nonzero_effects = 0;
  for (int k = 0; k < 100; ++k) {
    const auto [null_p, cf] = pronoun_pair(t, gen() % t.templates.size(), gen() % t.professions.size());
    const auto base = t.model.forward_trace(null_p.ids);
    const int layer = static_cast<int>(gen() % static_cast<std::uint64_t>(t.config.n_layers + 1));
    const int pos = static_cast<int>(gen() % null_p.ids.size());
    const int unit = static_cast<int>(gen() % static_cast<std::uint64_t>(t.config.d_model));
    const int block = static_cast<int>(gen() % static_cast<std::uint64_t>(t.config.n_layers));
    const int head = static_cast<int>(gen() % static_cast<std::uint64_t>(t.config.n_heads));

    engine::InterventionSpec set;
    set.actions.push_back(engine::NeuronSet{layer, pos, unit, base.layer_outputs[static_cast<std::size_t>(layer)](pos, unit)});
    worst = std::max(worst, max_diff(t.model.forward_trace(null_p.ids, set).logits, base.logits));

    engine::InterventionSpec replace;
    replace.actions.push_back(engine::AttnReplace{
        block, head, base.attention_probs[static_cast<std::size_t>(block)][static_cast<std::size_t>(head)]});
    worst = std::max(worst, max_diff(t.model.forward_trace(null_p.ids, replace).logits, base.logits));

    const mediation::PairAnalysis self(t.lm(), null_p, null_p);
    for (double e : {self.total_effect().effect, self.neuron_indirect(layer, unit).effect,
                     self.neuron_direct(layer, unit).effect, self.attention_indirect(block, head).effect,
                     self.attention_direct(block, head).effect}) {
      if (e != 0.0) ++nonzero_effects;
    }
  }
  return {worst <= 1e-9 && nonzero_effects == 0,
          "max logit |diff| " + fmt("%.3g", worst) + ", " + std::to_string(nonzero_effects) + " non-zero no-op effects"};
}

Outcome mediation_oracle(const Tiny& t) {
  std::mt19937_64 gen(202);
  double worst = 0.0;
  int cases = 0;
  for (std::uint64_t seed : {0ull, 41ull, 42ull, 43ull, 44ull}) {
    const auto archive = seed == 0 ? t.archive : testutil::random_archive(t.config, seed, 0.8);
    const engine::Transformer model(t.config, archive);
    const ref::Model oracle(t.config, archive);
    const mediation::LanguageModel lm{model, t.tokenizer};
    for (int k = 0; k < 10; ++k, ++cases) {
      const auto [null_p, cf] = pronoun_pair(t, gen() % t.templates.size(), gen() % t.professions.size());
      const int layer = static_cast<int>(gen() % static_cast<std::uint64_t>(t.config.n_layers + 1));
      const int unit = static_cast<int>(gen() % static_cast<std::uint64_t>(t.config.d_model));
      const double got = mediation::PairAnalysis(lm, null_p, cf).neuron_indirect(layer, unit).effect;
      worst = std::max(worst, std::abs(got - oracle::neuron_indirect(oracle, null_p, cf, layer, unit)));
    }
  }
  return {worst <= 1e-9, std::to_string(cases) + " cases, max |diff| " + fmt("%.3g", worst)};
}

Outcome constructed_mediator(const Tiny& t) {
  // "woman" copies the "nurse" embedding except in unit 0, so the subject's
  // whole influence enters through (layer 0, subject position, unit 0).
  const auto woman = static_cast<std::size_t>(t.tokenizer.encode("woman").front());
  const auto nurse = static_cast<std::size_t>(t.tokenizer.encode("nurse").front());
  const auto d = static_cast<std::size_t>(t.config.d_model);
  store::TensorArchive edited;
  for (auto e : t.archive.entries()) {
    if (e.name == "tok_emb") {
      for (std::size_t u = 1; u < d; ++u) e.data[woman * d + u] = e.data[nurse * d + u];
      e.data[woman * d] = e.data[nurse * d] + 3.0f;
    }
    edited.add(std::move(e));
  }
  const engine::Transformer model(t.config, edited);
  const mediation::LanguageModel lm{model, t.tokenizer};
  const auto null_p = mediation::make_pronoun_prompt(t.tokenizer, t.templates[0], 0, {"nurse", GenderClass::Female});
  const mediation::PairAnalysis pa(lm, null_p, mediation::substitute_subject(t.tokenizer, null_p, "woman"));
  const double te = pa.total_effect().effect;
  const double ie = pa.neuron_indirect(0, 0).effect;
  const double de = pa.neuron_direct(0, 0).effect;
  return {std::abs(te) > 1e-3 && std::abs(ie - te) <= 1e-6 && std::abs(de) <= 1e-6,
          "TE " + fmt("%.6g", te) + ", IE " + fmt("%.6g", ie) + ", DE " + fmt("%.3g", de)};
}

Outcome crows_properties(const Tiny& bidir) {
  const auto dir = testutil::fixture_dir();
  const auto pairs = metrics::load_sentence_pairs(dir / "data" / "crows.csv");

  const engine::Transformer uniform(engine::ModelConfig::load(dir / "uniform" / "model.json"),
                                    store::read_archive_file(dir / "uniform" / "weights.mlab"));
  const auto ties = metrics::crows_score(pairs, {uniform, bidir.tokenizer});

  const auto r = metrics::crows_score(pairs, bidir.lm());
  auto swapped_pairs = pairs;
  for (auto& p : swapped_pairs) std::swap(p.stereo, p.anti);
  const auto swapped = metrics::crows_score(swapped_pairs, bidir.lm());

  auto c = testutil::small_config(Family::Causal, 2, 2, 8, 20, 12);
  store::TensorArchive zero;
  const auto shapes = testutil::random_archive(c, 1);
  for (const auto& e : shapes.entries()) {
    const bool gamma = e.name.ends_with(".gamma");
    zero.add({e.name, e.dims, std::vector<float>(e.data.size(), gamma ? 1.0f : 0.0f)});
  }
  const engine::Transformer causal_uniform(c, zero);
  double worst = 0.0;
  for (int L = 2; L <= 12; ++L) {
    std::vector<text::TokenId> ids(static_cast<std::size_t>(L));
    for (int i = 0; i < L; ++i) ids[static_cast<std::size_t>(i)] = (i * 7) % 20;
    worst = std::max(worst, std::abs(engine::pseudo_log_likelihood(ids, causal_uniform) - (L - 1) * std::log(1.0 / 20)));
  }

  const bool ok = ties.score == 50.0 && r.ties == 0 && std::abs(r.score + swapped.score - 100.0) <= 1e-12 &&
                  worst <= 1e-9;
  return {ok, "all-ties " + fmt("%.1f", ties.score) + ", score " + fmt("%.1f", r.score) + " + swapped " +
                  fmt("%.1f", swapped.score) + ", uniform PLL |diff| " + fmt("%.3g", worst)};
}

double enumerate_p(const std::vector<double>& x, const std::vector<double>& y) {
  std::vector<double> all = x;
  all.insert(all.end(), y.begin(), y.end());
  const double observed = std::accumulate(x.begin(), x.end(), 0.0) - std::accumulate(y.begin(), y.end(), 0.0);
  std::size_t hits = 0, total = 0;
  for (unsigned mask = 0; mask < (1u << all.size()); ++mask) {
    if (static_cast<std::size_t>(__builtin_popcount(mask)) != x.size()) continue;
    double s = 0.0;
    for (std::size_t i = 0; i < all.size(); ++i) s += (mask >> i & 1u) ? all[i] : -all[i];
    ++total;
    if (s >= observed - 1e-12) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

Outcome seat_properties(const Tiny& bidir) {
  std::vector<std::string> notes;
  bool ok = true;

  auto sets = metrics::load_association_sets(testutil::fixture_dir() / "data" / "seat" / "career_family.json");
  auto same = sets;
  same.Y = same.X;
  const double d_same = metrics::seat_effect_size(metrics::embed_sets(same, bidir.lm(), metrics::Pooling::First));
  ok &= d_same == 0.0;
  notes.push_back("X==Y d " + fmt("%.3g", d_same));

  // s = cos(w,a) - cos(w,b): X -> {1, 0}, Y -> {-1, 0}; mean gap 1, sd sqrt(1/2).
  auto v = [](double a, double b) {
    engine::Vector out(2);
    out << a, b;
    return out;
  };
  const metrics::EmbeddedSets hand{{v(1, 0), v(1, 1)}, {v(0, 1), v(2, 2)}, {v(1, 0)}, {v(0, 1)}};
  const double d_hand = metrics::seat_effect_size(hand);
  ok &= std::abs(d_hand - std::sqrt(2.0)) <= 1e-12;
  notes.push_back("hand d " + fmt("%.9g", d_hand));

  std::mt19937_64 gen(303);
  std::normal_distribution<double> n(0, 1);
  double worst_exact = 0.0;
  for (int k = 0; k < 20; ++k) {
    metrics::AssociationScores s;
    for (int i = 0; i < 3; ++i) {
      s.x.push_back(n(gen) + 0.5);
      s.y.push_back(n(gen));
    }
    worst_exact = std::max(worst_exact, std::abs(metrics::permutation_pvalue(s, metrics::PermutationMode::exact()) -
                                                 enumerate_p(s.x, s.y)));
  }
  ok &= worst_exact <= 1e-15;
  notes.push_back("exact p |diff| " + fmt("%.3g", worst_exact));

  const auto fixture_scores = metrics::association_scores(metrics::embed_sets(sets, bidir.lm(), metrics::Pooling::First));
  double worst_z = 0.0;
  for (const auto& s : {fixture_scores, metrics::AssociationScores{{0.3, -0.1, 0.2, 0.5, 0.0}, {0.1, 0.2, -0.3, 0.0, 0.4}}}) {
    const double exact = enumerate_p(s.x, s.y);
    const double sampled = metrics::permutation_pvalue(s, metrics::PermutationMode::sampled(2000, 7));
    const double se = std::sqrt(exact * (1.0 - exact) / 2000.0);
    const double z = se > 0 ? std::abs(sampled - exact) / se : (std::abs(sampled - exact) <= 1.0 / 2001 ? 0.0 : 1e9);
    worst_z = std::max(worst_z, z);
  }
  ok &= worst_z <= 3.0;
  notes.push_back("sampled vs exact " + fmt("%.2f", worst_z) + " SE");

  std::string detail;
  for (const auto& s : notes) detail += (detail.empty() ? "" : ", ") + s;
  return {ok, detail};
}

Outcome cda_properties() {
  const auto lex = cda::WordPairLexicon::load(testutil::fixture_dir() / "data" / "lexicon.tsv");
  const std::string sentence = "Her most significant piece of work was translated into six languages.";
  const bool example = cda::swap_text(sentence, lex) == "His" + sentence.substr(3);

  static const std::vector<std::string> words = {"he", "She", "HIS", "her", "Man", "women", "mother", "Father",
                                                 "brotherhood", "sheep", "the", "café", "1999", "Mr", "MRS",
                                                 "himself", "girls", "x_he", "queen", "naïve", "boys", "son"};
  static const std::vector<std::string> seps = {" ", ", ", ". ", "'", "-", "\t", "!? ", "(", ") "};
  std::mt19937_64 gen(404);
  std::string corpus;
  for (int line = 0; line < 10000; ++line) {
    const std::size_t n = 1 + gen() % 10;
    for (std::size_t i = 0; i < n; ++i) corpus += words[gen() % words.size()] + seps[gen() % seps.size()];
    corpus += '\n';
  }
  auto replace = [&](const std::string& text) {
    std::istringstream in(text);
    std::ostringstream out;
    cda::augment_corpus(in, out, lex, cda::Mode::Replace);
    return out.str();
  };
  const auto once = replace(corpus);
  const bool involution = replace(once) == corpus && once != corpus;

  auto separators = [](const std::string& s) {
    std::string r;
    bool in_word = false;
    for (unsigned char c : s) {
      const bool w = cda::is_word_byte(c);
      if (!w) r.push_back(static_cast<char>(c));
      if (w && !in_word) r.push_back('\x01');
      in_word = w;
    }
    return r;
  };
  bool untouched = separators(once) == separators(corpus);
  // Words outside the lexicon must survive byte for byte, in order.
  std::vector<std::string> kept_a, kept_b;
  auto collect = [&](const std::string& s, std::vector<std::string>& out) {
    std::string w;
    for (unsigned char c : s) {
      if (cda::is_word_byte(c)) {
        w.push_back(static_cast<char>(c));
        continue;
      }
      std::string lower = w;
      for (auto& ch : lower) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
      out.push_back(lex.counterpart(lower) ? std::string("*") : w);
      w.clear();
    }
  };
  collect(corpus, kept_a);
  collect(once, kept_b);
  untouched &= kept_a == kept_b;

  return {example && involution && untouched, std::string("example ") + (example ? "ok" : "wrong") +
                                                  ", involution " + (involution ? "ok" : "broken") +
                                                  " on 10000 lines, other bytes " + (untouched ? "unchanged" : "changed")};
}

Outcome pipeline_reproducibility() {
  testutil::TempDir tmp("acceptance_repro");
  std::size_t compared = 0;
  std::vector<std::string> mismatches;
  for (const char* name : {"neuron_mediation", "attention_mediation", "crows", "seat", "seat_sampled", "cda"}) {
    const auto config = testutil::fixture_dir() / "configs" / (std::string(name) + ".json");
    std::vector<std::filesystem::path> dirs;
    for (const char* run : {"a", "b"}) {
      const auto out = tmp.path() / name / run;
      const std::string cmd = std::string(MEDLAB_CLI) + " run --config " + config.string() + " --output " +
                              out.string() + " >/dev/null 2>&1";
      if (std::system(cmd.c_str()) != 0) return {false, std::string("medlab run failed for ") + name};
      dirs.push_back(out);
    }
    for (const auto& entry : std::filesystem::directory_iterator(dirs[0])) {
      const auto file = entry.path().filename();
      auto a = testutil::read_file(dirs[0] / file), b = testutil::read_file(dirs[1] / file);
      if (file == "manifest.json") {
        // The manifest records wall-clock time; everything else must match.
        static const std::regex wall("\"wall_time_seconds\": [-0-9.eE+]+");
        a = std::regex_replace(a, wall, "");
        b = std::regex_replace(b, wall, "");
      }
      ++compared;
      if (a != b) mismatches.push_back(std::string(name) + "/" + file.string());
    }
  }
  std::string detail = std::to_string(compared) + " files compared";
  for (const auto& m : mismatches) detail += ", differs: " + m;
  return {mismatches.empty() && compared > 0, detail};
}

Outcome top_selection() {
  std::mt19937_64 gen(505);
  std::uniform_int_distribution<int> coarse(-50, 50);
  std::vector<mediation::SiteEffect> sites;
  for (int l = 0; l < 10; ++l) {
    for (int u = 0; u < 100; ++u) sites.push_back({{mediation::MediatorSite::Kind::Neuron, l, u}, coarse(gen) / 16.0, 0.0, 1});
  }
  std::shuffle(sites.begin(), sites.end(), gen);
  const auto top = mediation::select_top_sites(sites, 0.025);

  std::vector<std::tuple<double, int, int>> keys;
  for (const auto& s : sites) keys.emplace_back(-s.mean_indirect, s.site.layer, s.site.index);
  std::stable_sort(keys.begin(), keys.end());
  bool ranked = top.size() == 25;
  for (std::size_t i = 0; ranked && i < top.size(); ++i) {
    ranked = std::get<1>(keys[i]) == top[i].site.layer && std::get<2>(keys[i]) == top[i].site.index;
  }
  return {top.size() == 25 && ranked, std::to_string(top.size()) + " selected, ranking " + (ranked ? "matches" : "differs")};
}

}  // namespace

int main() {
  const Tiny causal = load_tiny("causal");
  const Tiny bidir = load_tiny("bidirectional");

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"engine-oracle-equivalence", engine_oracle},
      {"intervention-identities", [&] { return intervention_identities(causal); }},
      {"mediation-oracle", [&] { return mediation_oracle(causal); }},
      {"constructed-mediator", [&] { return constructed_mediator(causal); }},
      {"crows-properties", [&] { return crows_properties(bidir); }},
      {"seat-properties", [&] { return seat_properties(bidir); }},
      {"cda-properties", cda_properties},
      {"pipeline-reproducibility", pipeline_reproducibility},
      {"top-neuron-selection", top_selection},
  };

  int failures = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
