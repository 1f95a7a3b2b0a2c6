#pragma once

// Paired stereotype scoring (CrowS style) and sentence-level association
// tests (SEAT: WEAT effect size over pooled sentence encodings).

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "medlab/engine.hpp"
#include "medlab/mediation.hpp"

namespace medlab::metrics {

using engine::Vector;
using mediation::LanguageModel;

// ---------------------------------------------------------------------------
// CrowS

struct SentencePair {
  std::string stereo;
  std::string anti;
  std::string category;
};

// CSV with a header naming `stereo`, `anti` and `category` columns.
std::vector<SentencePair> load_sentence_pairs(const std::filesystem::path& path);
std::vector<SentencePair> parse_sentence_pairs(std::istream& in);

inline constexpr double kTieTolerance = 1e-9;

struct PairScore {
  double pll_stereo = 0.0;
  double pll_anti = 0.0;
  // +1 stereo preferred, 0 tie, -1 anti preferred
  int outcome = 0;
};

struct CrowsResult {
  double score = 50.0;  // percentage in [0, 100]
  std::size_t stereo_preferred = 0;
  std::size_t ties = 0;
  std::vector<PairScore> pairs;
};

// 100 * (#stereo>anti + 0.5 * #ties) / N from already-computed scores.
CrowsResult stereotype_score(std::vector<PairScore> pairs);

// Throws EmptyDataset.
CrowsResult crows_score(const std::vector<SentencePair>& pairs, const LanguageModel& lm);

// ---------------------------------------------------------------------------
// SEAT

enum class Pooling { First, Last, Mean };

Pooling default_pooling(engine::Family family);
Pooling parse_pooling(std::string_view name);
std::string_view to_string(Pooling p);

// Pools final-layer hidden states. Throws EmptyInput.
Vector embed_sentence(const std::string& sentence, const LanguageModel& lm, Pooling pooling);

// mean cos(w, a) over A minus mean cos(w, b) over B. Throws ZeroNorm.
double association_score(const Vector& w, std::span<const Vector> A, std::span<const Vector> B);

struct AssociationSets {
  std::string name;
  std::vector<std::string> X, Y, A, B;
};

// SEAT JSON: `targ1`, `targ2`, `attr1`, `attr2`, each either a sentence array
// or an object with an `examples` array.
AssociationSets load_association_sets(const std::filesystem::path& path);
AssociationSets parse_association_sets(std::istream& in, std::string name);

struct EmbeddedSets {
  std::vector<Vector> X, Y, A, B;
};

EmbeddedSets embed_sets(const AssociationSets& sets, const LanguageModel& lm, Pooling pooling);

struct AssociationScores {
  std::vector<double> x;
  std::vector<double> y;
};

AssociationScores association_scores(const EmbeddedSets& sets);

// (mean s(x) - mean s(y)) / population stddev of s over X u Y.
// Throws ZeroVariance.
double effect_size(const AssociationScores& scores);
double seat_effect_size(const EmbeddedSets& sets);

struct PermutationMode {
  enum class Kind { Exact, Sampled };
  Kind kind = Kind::Exact;
  std::size_t samples = 0;
  std::uint64_t seed = 0;

  static PermutationMode exact() { return {}; }
  static PermutationMode sampled(std::size_t n, std::uint64_t seed) { return {Kind::Sampled, n, seed}; }
};

// Upper bound on enumerated partitions in exact mode.
inline constexpr std::uint64_t kMaxExactPartitions = 50'000'000;

// One-sided permutation p-value of sum s(x) - sum s(y) over equal-size
// repartitions of X u Y. Exact mode enumerates all C(|X|+|Y|, |X|)
// partitions (UnequalSets unless |X| = |Y|); sampled mode draws `samples`
// seeded partitions and counts the observed one, so p >= 1/(samples+1).
double permutation_pvalue(const AssociationScores& scores, const PermutationMode& mode);
double seat_pvalue(const EmbeddedSets& sets, const PermutationMode& mode);

struct SeatResult {
  std::string name;
  double effect_size = 0.0;
  double p_value = 1.0;
  AssociationScores scores;
};

SeatResult run_seat(const AssociationSets& sets, const LanguageModel& lm, Pooling pooling,
                    const PermutationMode& mode);

}  // namespace medlab::metrics
